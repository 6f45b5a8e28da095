//! Closed triangle meshes: validation, vertex normals, and spatial queries.
//!
//! [`TriangleMesh`] enforces the invariants the rest of the pipeline relies on
//! (closed 2-manifold, consistent winding, no degenerate faces, unit vertex
//! normals). [`MeshAccel`] is an axis-aligned bounding-box tree over the faces
//! providing closest-point and axis-ray parity queries for voxelization and
//! surface-distance metrics.

use std::collections::HashMap;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Immutable validated triangle mesh.
#[derive(Debug, Clone)]
pub struct TriangleMesh {
    vertices: Vec<Point3<f64>>,
    faces: Vec<[u32; 3]>,
    /// Angle-weighted unit vertex normals recomputed from face geometry.
    normals: Vec<Vector3<f64>>,
}

impl TriangleMesh {
    /// Build a mesh and check structural invariants: all indices in range,
    /// no degenerate faces, every edge shared by exactly two faces with
    /// opposite orientation (closed, consistently wound 2-manifold).
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.len() < 4 {
            return Err(Error::InvalidMesh(format!(
                "{} vertices; a closed surface needs at least 4",
                vertices.len()
            )));
        }
        for (i, v) in vertices.iter().enumerate() {
            if !(v.x.is_finite() && v.y.is_finite() && v.z.is_finite()) {
                return Err(Error::InvalidMesh(format!("non-finite vertex {i}")));
            }
        }
        let n = vertices.len() as u32;
        let diag = bbox_of(&vertices).1;
        let degenerate_area = 1e-16 * diag * diag;
        for (f, face) in faces.iter().enumerate() {
            let [a, b, c] = *face;
            if a >= n || b >= n || c >= n {
                return Err(Error::InvalidMesh(format!(
                    "face {f} references vertex out of range (max {})",
                    n - 1
                )));
            }
            if a == b || b == c || a == c {
                return Err(Error::InvalidMesh(format!(
                    "face {f} repeats a vertex index"
                )));
            }
            let area2 = (vertices[b as usize] - vertices[a as usize])
                .cross(&(vertices[c as usize] - vertices[a as usize]))
                .norm();
            if area2 <= degenerate_area {
                return Err(Error::InvalidMesh(format!("face {f} is degenerate")));
            }
        }

        // Directed-edge bookkeeping: a closed consistently wound 2-manifold has
        // every directed edge exactly once and its reverse exactly once.
        let mut directed: HashMap<(u32, u32), usize> = HashMap::with_capacity(faces.len() * 3);
        for (f, face) in faces.iter().enumerate() {
            for k in 0..3 {
                let e = (face[k], face[(k + 1) % 3]);
                if directed.insert(e, f).is_some() {
                    return Err(Error::InvalidMesh(format!(
                        "inconsistent winding or non-manifold edge ({}, {}) at face {f}",
                        e.0, e.1
                    )));
                }
            }
        }
        for &(a, b) in directed.keys() {
            if !directed.contains_key(&(b, a)) {
                return Err(Error::InvalidMesh(format!(
                    "open boundary at edge ({a}, {b})"
                )));
            }
        }

        let normals = vertex_normals(&vertices, &faces)?;
        Ok(TriangleMesh {
            vertices,
            faces,
            normals,
        })
    }

    pub fn vertices(&self) -> &[Point3<f64>] {
        &self.vertices
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    /// Unit vertex normals (angle-weighted average of incident face normals).
    pub fn normals(&self) -> &[Vector3<f64>] {
        &self.normals
    }

    pub fn num_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn num_faces(&self) -> usize {
        self.faces.len()
    }

    /// Axis-aligned bounding box as (min corner, max corner).
    pub fn bbox(&self) -> (Point3<f64>, Point3<f64>) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for v in &self.vertices {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        (lo, hi)
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (lo, hi) = self.bbox();
        (hi - lo).norm()
    }

    /// Mean of the vertex positions.
    pub fn vertex_centroid(&self) -> Point3<f64> {
        let mut acc = Vector3::zeros();
        for v in &self.vertices {
            acc += v.coords;
        }
        Point3::from(acc / self.vertices.len() as f64)
    }

    /// Index and distance of the vertex nearest to `p`.
    pub fn nearest_vertex(&self, p: &Point3<f64>) -> (usize, f64) {
        let mut best = (0usize, f64::INFINITY);
        for (i, v) in self.vertices.iter().enumerate() {
            let d = (v - p).norm();
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// New mesh with every vertex mapped through `f` (revalidated).
    pub fn map_vertices(&self, mut f: impl FnMut(&Point3<f64>) -> Point3<f64>) -> Result<Self> {
        let vertices = self.vertices.iter().map(|v| f(v)).collect();
        TriangleMesh::new(vertices, self.faces.clone())
    }

    /// Corner positions of face `f`.
    pub fn triangle(&self, f: usize) -> [Point3<f64>; 3] {
        let [a, b, c] = self.faces[f];
        [
            self.vertices[a as usize],
            self.vertices[b as usize],
            self.vertices[c as usize],
        ]
    }
}

fn bbox_of(vertices: &[Point3<f64>]) -> (Point3<f64>, f64) {
    let mut lo = vertices[0];
    let mut hi = vertices[0];
    for v in vertices {
        for k in 0..3 {
            lo[k] = lo[k].min(v[k]);
            hi[k] = hi[k].max(v[k]);
        }
    }
    (lo, (hi - lo).norm())
}

fn vertex_normals(vertices: &[Point3<f64>], faces: &[[u32; 3]]) -> Result<Vec<Vector3<f64>>> {
    let mut acc = vec![Vector3::zeros(); vertices.len()];
    for face in faces {
        let [a, b, c] = [face[0] as usize, face[1] as usize, face[2] as usize];
        let fnorm = (vertices[b] - vertices[a])
            .cross(&(vertices[c] - vertices[a]))
            .normalize();
        for (corner, prev, next) in [(a, c, b), (b, a, c), (c, b, a)] {
            let u = (vertices[next] - vertices[corner]).normalize();
            let v = (vertices[prev] - vertices[corner]).normalize();
            let angle = u.dot(&v).clamp(-1.0, 1.0).acos();
            acc[corner] += angle * fnorm;
        }
    }
    acc.into_iter()
        .enumerate()
        .map(|(i, v)| {
            let norm = v.norm();
            if norm <= 1e-12 {
                Err(Error::InvalidMesh(format!(
                    "vertex {i} has a zero normal (incident faces cancel)"
                )))
            } else {
                Ok(v / norm)
            }
        })
        .collect()
}

/// Closest point to `p` on triangle `(a, b, c)`.
pub fn closest_point_on_triangle(
    p: &Point3<f64>,
    a: &Point3<f64>,
    b: &Point3<f64>,
    c: &Point3<f64>,
) -> Point3<f64> {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return *a;
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return *b;
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return a + ab * v;
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return *c;
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return a + ac * w;
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return b + (c - b) * w;
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    a + ab * v + ac * w
}

#[derive(Debug, Clone, Copy)]
struct Aabb {
    lo: Point3<f64>,
    hi: Point3<f64>,
}

impl Aabb {
    fn empty() -> Self {
        Aabb {
            lo: Point3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY),
            hi: Point3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        }
    }

    fn grow_point(&mut self, p: &Point3<f64>) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(p[k]);
            self.hi[k] = self.hi[k].max(p[k]);
        }
    }

    fn grow(&mut self, other: &Aabb) {
        for k in 0..3 {
            self.lo[k] = self.lo[k].min(other.lo[k]);
            self.hi[k] = self.hi[k].max(other.hi[k]);
        }
    }

    fn distance_sq(&self, p: &Point3<f64>) -> f64 {
        let mut d = 0.0;
        for k in 0..3 {
            let v = (self.lo[k] - p[k]).max(0.0).max(p[k] - self.hi[k]);
            d += v * v;
        }
        d
    }

    /// Whether the yz-projection of the box contains (y, z).
    fn contains_yz(&self, y: f64, z: f64) -> bool {
        y >= self.lo.y && y <= self.hi.y && z >= self.lo.z && z <= self.hi.z
    }
}

#[derive(Debug)]
enum Node {
    Leaf {
        bounds: Aabb,
        start: usize,
        count: usize,
    },
    Inner {
        bounds: Aabb,
        left: usize,
        right: usize,
    },
}

impl Node {
    fn bounds(&self) -> &Aabb {
        match self {
            Node::Leaf { bounds, .. } | Node::Inner { bounds, .. } => bounds,
        }
    }
}

/// Bounding-box tree over a mesh's faces for closest-point and ray queries.
#[derive(Debug)]
pub struct MeshAccel {
    nodes: Vec<Node>,
    /// Triangle corner positions, reordered during the build.
    tris: Vec<[Point3<f64>; 3]>,
    /// Original face index of each entry in `tris`.
    face_ids: Vec<usize>,
    root: usize,
}

const LEAF_SIZE: usize = 8;

impl MeshAccel {
    pub fn new(mesh: &TriangleMesh) -> Self {
        let mut tris: Vec<[Point3<f64>; 3]> =
            (0..mesh.num_faces()).map(|f| mesh.triangle(f)).collect();
        let mut face_ids: Vec<usize> = (0..tris.len()).collect();
        let mut nodes = Vec::new();
        let n = tris.len();
        let root = build(&mut nodes, &mut tris, &mut face_ids, 0, n);
        MeshAccel {
            nodes,
            tris,
            face_ids,
            root,
        }
    }

    /// Closest point on the mesh surface: (point, distance, face index).
    pub fn closest_point(&self, p: &Point3<f64>) -> (Point3<f64>, f64, usize) {
        let mut best_d2 = f64::INFINITY;
        let mut best = (*p, 0usize);
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if node.bounds().distance_sq(p) >= best_d2 {
                continue;
            }
            match node {
                Node::Leaf { start, count, .. } => {
                    for t in *start..*start + *count {
                        let [a, b, c] = &self.tris[t];
                        let q = closest_point_on_triangle(p, a, b, c);
                        let d2 = (q - p).norm_squared();
                        if d2 < best_d2 {
                            best_d2 = d2;
                            best = (q, self.face_ids[t]);
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    // Visit the nearer child first for tighter pruning.
                    let dl = self.nodes[*left].bounds().distance_sq(p);
                    let dr = self.nodes[*right].bounds().distance_sq(p);
                    if dl < dr {
                        stack.push(*right);
                        stack.push(*left);
                    } else {
                        stack.push(*left);
                        stack.push(*right);
                    }
                }
            }
        }
        (best.0, best_d2.sqrt(), best.1)
    }

    /// X coordinates where the line {(t, y, z) : t ∈ ℝ} crosses the surface.
    /// Callers that need robust parity should jitter (y, z) off exact edges.
    pub fn x_crossings(&self, y: f64, z: f64) -> Vec<f64> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(id) = stack.pop() {
            let node = &self.nodes[id];
            if !node.bounds().contains_yz(y, z) {
                continue;
            }
            match node {
                Node::Leaf { start, count, .. } => {
                    for t in *start..*start + *count {
                        let [a, b, c] = &self.tris[t];
                        // Barycentric test in the yz-projection.
                        let (ay, az) = (a.y, a.z);
                        let v0 = (b.y - ay, b.z - az);
                        let v1 = (c.y - ay, c.z - az);
                        let q = (y - ay, z - az);
                        let denom = v0.0 * v1.1 - v1.0 * v0.1;
                        if denom.abs() < 1e-300 {
                            continue; // edge-on to the ray
                        }
                        let u = (q.0 * v1.1 - v1.0 * q.1) / denom;
                        let v = (v0.0 * q.1 - q.0 * v0.1) / denom;
                        if u >= 0.0 && v >= 0.0 && u + v <= 1.0 {
                            out.push(a.x + u * (b.x - a.x) + v * (c.x - a.x));
                        }
                    }
                }
                Node::Inner { left, right, .. } => {
                    stack.push(*left);
                    stack.push(*right);
                }
            }
        }
        out.sort_by(f64::total_cmp);
        out
    }
}

fn build(
    nodes: &mut Vec<Node>,
    tris: &mut [[Point3<f64>; 3]],
    face_ids: &mut [usize],
    start: usize,
    count: usize,
) -> usize {
    let mut bounds = Aabb::empty();
    for t in &tris[start..start + count] {
        for p in t {
            bounds.grow_point(p);
        }
    }
    if count <= LEAF_SIZE {
        nodes.push(Node::Leaf {
            bounds,
            start,
            count,
        });
        return nodes.len() - 1;
    }
    // Median split along the widest axis of the centroid distribution.
    let mut clo = Aabb::empty();
    for t in &tris[start..start + count] {
        clo.grow_point(&centroid(t));
    }
    let ext = clo.hi - clo.lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let slice_tris = &mut tris[start..start + count];
    let slice_ids = &mut face_ids[start..start + count];
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by(|&a, &b| centroid(&slice_tris[a])[axis].total_cmp(&centroid(&slice_tris[b])[axis]));
    apply_permutation(slice_tris, slice_ids, &order);
    let mid = count / 2;
    let left = build(nodes, tris, face_ids, start, mid);
    let right = build(nodes, tris, face_ids, start + mid, count - mid);
    let mut b = Aabb::empty();
    b.grow(nodes[left].bounds());
    b.grow(nodes[right].bounds());
    nodes.push(Node::Inner {
        bounds: b,
        left,
        right,
    });
    nodes.len() - 1
}

fn centroid(t: &[Point3<f64>; 3]) -> Point3<f64> {
    Point3::from((t[0].coords + t[1].coords + t[2].coords) / 3.0)
}

fn apply_permutation(tris: &mut [[Point3<f64>; 3]], ids: &mut [usize], order: &[usize]) {
    let tmp_t: Vec<_> = order.iter().map(|&i| tris[i]).collect();
    let tmp_i: Vec<_> = order.iter().map(|&i| ids[i]).collect();
    tris.copy_from_slice(&tmp_t);
    ids.copy_from_slice(&tmp_i);
}
