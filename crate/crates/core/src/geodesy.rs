//! Surface geodesics on the mesh vertex-edge graph: Dijkstra distance fields,
//! farthest-point sampling, factor-scaled nearest-neighbor sets, and walking
//! along geodesic paths.
//!
//! Distances are graph shortest paths (an upper bound on the true polyhedral
//! geodesic). Pure edge paths overestimate smooth geodesics by around 5% on
//! well-shaped triangulations, so the graph also carries a shortcut across
//! every interior edge: the two adjacent triangles are unfolded into a plane
//! and the opposite vertices are connected by the straightened crossing
//! length. Off-vertex endpoints snap to the nearest vertex and add the
//! Euclidean correction from the point to that vertex.

use std::cmp::Ordering as CmpOrdering;
use std::collections::{BinaryHeap, HashMap};

use nalgebra::{DMatrix, Point3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mesh::{MeshAccel, TriangleMesh};

/// Vertex-edge graph of a connected closed mesh with precomputed edge lengths.
#[derive(Debug)]
pub struct GeodesicIndex {
    verts: Vec<Point3<f64>>,
    adj: Vec<Vec<(u32, f64)>>,
}

#[derive(PartialEq)]
struct HeapEntry {
    dist: f64,
    vertex: u32,
}

impl Eq for HeapEntry {}

impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> CmpOrdering {
        // Reversed: BinaryHeap is a max-heap, we want smallest distance first.
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.vertex.cmp(&self.vertex))
    }
}

impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<CmpOrdering> {
        Some(self.cmp(other))
    }
}

impl GeodesicIndex {
    /// Build the edge graph; fails on disconnected meshes (listing component
    /// sizes) since geodesic distances would be infinite across components.
    pub fn new(mesh: &TriangleMesh) -> Result<Self> {
        let n = mesh.num_vertices();
        let verts = mesh.vertices();
        let mut adj: Vec<Vec<(u32, f64)>> = vec![Vec::new(); n];
        let mut opposite: HashMap<(u32, u32), u32> = HashMap::new();
        for face in mesh.faces() {
            for k in 0..3 {
                let a = face[k];
                let b = face[(k + 1) % 3];
                let c = face[(k + 2) % 3];
                if a < b {
                    let len = (verts[a as usize] - verts[b as usize]).norm();
                    adj[a as usize].push((b, len));
                    adj[b as usize].push((a, len));
                }
                opposite.insert((a, b), c);
            }
        }
        // Crossing shortcuts: connect the vertices opposite each shared edge
        // with the distance of the straight segment in the unfolded plane,
        // provided that segment actually crosses the shared edge.
        for (&(a, b), &c) in &opposite {
            if a >= b {
                continue;
            }
            let Some(&d) = opposite.get(&(b, a)) else {
                continue;
            };
            if let Some(len) = unfolded_crossing(
                &verts[a as usize],
                &verts[b as usize],
                &verts[c as usize],
                &verts[d as usize],
            ) {
                adj[c as usize].push((d, len));
                adj[d as usize].push((c, len));
            }
        }
        for list in adj.iter_mut() {
            list.sort_by(|x, y| x.0.cmp(&y.0).then(x.1.total_cmp(&y.1)));
        }

        // Connectivity check via BFS over all vertices.
        let mut component = vec![usize::MAX; n];
        let mut sizes = Vec::new();
        for start in 0..n {
            if component[start] != usize::MAX {
                continue;
            }
            let c = sizes.len();
            let mut queue = vec![start];
            component[start] = c;
            let mut size = 0usize;
            while let Some(v) = queue.pop() {
                size += 1;
                for &(w, _) in &adj[v] {
                    if component[w as usize] == usize::MAX {
                        component[w as usize] = c;
                        queue.push(w as usize);
                    }
                }
            }
            sizes.push(size);
        }
        if sizes.len() > 1 {
            return Err(Error::DisconnectedMesh { sizes });
        }

        Ok(GeodesicIndex {
            verts: mesh.vertices().to_vec(),
            adj,
        })
    }

    pub fn num_vertices(&self) -> usize {
        self.verts.len()
    }

    pub fn vertex(&self, i: u32) -> Point3<f64> {
        self.verts[i as usize]
    }

    pub fn nearest_vertex(&self, p: &Point3<f64>) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for (i, v) in self.verts.iter().enumerate() {
            let d = (v - p).norm();
            if d < best.1 {
                best = (i as u32, d);
            }
        }
        best
    }

    /// Dijkstra distances from a source vertex.
    pub fn distances_from_vertex(&self, src: u32) -> Vec<f64> {
        self.dijkstra(src).0
    }

    fn dijkstra(&self, src: u32) -> (Vec<f64>, Vec<u32>) {
        let n = self.verts.len();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![u32::MAX; n];
        let mut heap = BinaryHeap::new();
        dist[src as usize] = 0.0;
        heap.push(HeapEntry {
            dist: 0.0,
            vertex: src,
        });
        while let Some(HeapEntry { dist: d, vertex: v }) = heap.pop() {
            if d > dist[v as usize] {
                continue;
            }
            for &(w, len) in &self.adj[v as usize] {
                let nd = d + len;
                if nd < dist[w as usize] {
                    dist[w as usize] = nd;
                    pred[w as usize] = v;
                    heap.push(HeapEntry {
                        dist: nd,
                        vertex: w,
                    });
                }
            }
        }
        (dist, pred)
    }

    /// Geodesic distance field from an arbitrary surface point: nearest-vertex
    /// Dijkstra plus the Euclidean correction from `source` to that vertex.
    pub fn geodesic_distances(&self, source: &Point3<f64>) -> Vec<f64> {
        let (nv, corr) = self.nearest_vertex(source);
        let mut dist = self.distances_from_vertex(nv);
        for d in dist.iter_mut() {
            *d += corr;
        }
        dist
    }

    /// Farthest-point sampling: starting from `seed_vertex`, greedily add the
    /// vertex maximizing the geodesic distance to all previous selections
    /// (ties break to the lowest index). Returns vertices in selection order.
    pub fn farthest_point_sample(&self, count: usize, seed_vertex: u32) -> Result<Vec<u32>> {
        let n = self.verts.len();
        if count == 0 || count > n {
            return Err(Error::InvalidArgument(format!(
                "cannot sample {count} points from a mesh with {n} vertices"
            )));
        }
        if seed_vertex as usize >= n {
            return Err(Error::InvalidArgument(format!(
                "seed vertex {seed_vertex} out of range ({n} vertices)"
            )));
        }
        let mut selected = vec![seed_vertex];
        let mut dist = self.distances_from_vertex(seed_vertex);
        while selected.len() < count {
            let mut best = (0usize, f64::NEG_INFINITY);
            for (i, &d) in dist.iter().enumerate() {
                if d > best.1 {
                    best = (i, d);
                }
            }
            let next = best.0 as u32;
            selected.push(next);
            let update = self.distances_from_vertex(next);
            for (d, u) in dist.iter_mut().zip(update) {
                if u < *d {
                    *d = u;
                }
            }
        }
        Ok(selected)
    }

    /// Pairwise geodesic distances between particle positions. Entry (a, b) is
    /// `‖p_a − nv_a‖ + graph(nv_a, nv_b) + ‖nv_b − p_b‖`; the diagonal is 0.
    pub fn particle_geodesics(&self, particles: &[Point3<f64>]) -> DMatrix<f64> {
        let j = particles.len();
        let snapped: Vec<(u32, f64)> = particles.iter().map(|p| self.nearest_vertex(p)).collect();
        let mut sources: Vec<u32> = snapped.iter().map(|&(v, _)| v).collect();
        sources.sort_unstable();
        sources.dedup();
        let fields: Vec<(u32, Vec<f64>)> = sources
            .par_iter()
            .map(|&v| (v, self.distances_from_vertex(v)))
            .collect();
        let field_of = |v: u32| &fields[sources.binary_search(&v).unwrap()].1;

        let mut m = DMatrix::zeros(j, j);
        for a in 0..j {
            let (va, ca) = snapped[a];
            let field = field_of(va);
            for b in (a + 1)..j {
                let (vb, cb) = snapped[b];
                let d = ca + field[vb as usize] + cb;
                m[(a, b)] = d;
                m[(b, a)] = d;
            }
        }
        m
    }

    /// Per-particle neighbor sets: k is a neighbor of j when
    /// `geo(j, k) ≤ factor · d*_j` with `d*_j` the closest geodesic neighbor
    /// distance of j. Errors on coincident particles (d* = 0).
    pub fn geodesic_neighbors(
        &self,
        particles: &[Point3<f64>],
        factor: f64,
    ) -> Result<Vec<Vec<usize>>> {
        if !(factor >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "neighborhood factor must be ≥ 1, got {factor}"
            )));
        }
        let geo = self.particle_geodesics(particles);
        neighbor_sets(&geo, factor)
    }

    /// Walk `distance` along the geodesic path `from → toward` and snap the
    /// endpoint back to the surface. Returns the point and whether the walk
    /// was clamped at `toward` because the path was shorter than `distance`.
    pub fn geodesic_walk(
        &self,
        accel: &MeshAccel,
        from: &Point3<f64>,
        toward: &Point3<f64>,
        distance: f64,
    ) -> Result<(Point3<f64>, bool)> {
        if !(distance >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "walk distance must be non-negative, got {distance}"
            )));
        }
        if distance == 0.0 {
            return Ok((*from, false));
        }
        let path = self.geodesic_path(from, toward);
        let mut remaining = distance;
        for w in path.windows(2) {
            let seg = w[1] - w[0];
            let len = seg.norm();
            if len <= 1e-300 {
                continue;
            }
            if remaining <= len {
                let p = w[0] + seg * (remaining / len);
                return Ok((accel.closest_point(&p).0, false));
            }
            remaining -= len;
        }
        Ok((accel.closest_point(toward).0, true))
    }

    /// Walk the geodesic path `from → toward` but stop `stop_short` before
    /// its endpoint, snapping the stop back to the surface. Stays at `from`
    /// (returning `false`) when the whole path is within `stop_short` of
    /// `toward`, so the walk never overshoots backwards.
    pub fn geodesic_walk_stop_short(
        &self,
        accel: &MeshAccel,
        from: &Point3<f64>,
        toward: &Point3<f64>,
        stop_short: f64,
    ) -> Result<(Point3<f64>, bool)> {
        if !(stop_short >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "stop distance must be non-negative, got {stop_short}"
            )));
        }
        let path = self.geodesic_path(from, toward);
        let mut remaining = stop_short;
        for w in path.windows(2).rev() {
            let seg = w[0] - w[1];
            let len = seg.norm();
            if len <= 1e-300 {
                continue;
            }
            if remaining <= len {
                let p = w[1] + seg * (remaining / len);
                return Ok((accel.closest_point(&p).0, true));
            }
            remaining -= len;
        }
        Ok((*from, false))
    }

    /// Polyline of the graph geodesic path as
    /// `[from, nv(from), …graph vertices…, nv(toward), toward]`.
    fn geodesic_path(&self, from: &Point3<f64>, toward: &Point3<f64>) -> Vec<Point3<f64>> {
        let (nv_from, _) = self.nearest_vertex(from);
        let (nv_toward, _) = self.nearest_vertex(toward);
        let (_, pred) = self.dijkstra(nv_from);
        let mut path = vec![*toward];
        let mut v = nv_toward;
        while v != u32::MAX && v != nv_from {
            path.push(self.verts[v as usize]);
            v = pred[v as usize];
        }
        path.push(self.verts[nv_from as usize]);
        path.push(*from);
        path.reverse();
        path
    }
}

/// Length of the straight segment `c → d` after unfolding the triangles
/// `(a, b, c)` and `(b, a, d)` about their shared edge into one plane, or
/// `None` when the segment misses the shared edge (no valid crossing).
fn unfolded_crossing(
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
    d: &Point3<f64>,
) -> Option<f64> {
    let e = b - a;
    let elen = e.norm();
    if elen <= 1e-300 {
        return None;
    }
    let eh = e / elen;
    let pc = c - a;
    let xc = pc.dot(&eh);
    let yc = (pc - eh * xc).norm();
    let pd = d - a;
    let xd = pd.dot(&eh);
    let yd = (pd - eh * xd).norm();
    let denom = yc + yd;
    if denom <= 1e-300 {
        return None;
    }
    // With c above the edge and d below it, the segment crosses y = 0 at x*.
    let x_star = xc + yc * (xd - xc) / denom;
    if !(0.0..=elen).contains(&x_star) {
        return None;
    }
    Some(((xc - xd).powi(2) + denom * denom).sqrt())
}

/// Neighbor sets from a precomputed pairwise geodesic matrix.
pub fn neighbor_sets(geo: &DMatrix<f64>, factor: f64) -> Result<Vec<Vec<usize>>> {
    let j = geo.nrows();
    let mut out = Vec::with_capacity(j);
    for a in 0..j {
        let mut d_star = f64::INFINITY;
        let mut closest = a;
        for b in 0..j {
            if b != a && geo[(a, b)] < d_star {
                d_star = geo[(a, b)];
                closest = b;
            }
        }
        if j > 1 && d_star == 0.0 {
            return Err(Error::DuplicateParticles { a, b: closest });
        }
        let cutoff = factor * d_star;
        let mut set: Vec<usize> = (0..j).filter(|&b| b != a && geo[(a, b)] <= cutoff).collect();
        set.sort_unstable();
        out.push(set);
    }
    Ok(out)
}
