//! File formats: OBJ and binary little-endian PLY meshes, raw signed-distance
//! volumes with a small text header, and whitespace-delimited particle files.
//!
//! Volume layout on disk: four header lines (`dims x y z`, `origin x y z`,
//! `spacing x y z`, `dtype f32`), a blank line, then `nx·ny·nz` little-endian
//! `f32` values with node (ix, iy, iz) at offset `(ix·ny + iy)·nz + iz`.
//!
//! Particle files hold one `x y z` line per particle; values are written with
//! shortest round-trip formatting, so save → load is exact.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point3;

use crate::error::{Error, Result};
use crate::mesh::TriangleMesh;
use crate::sdf::SignedDistanceVolume;
use crate::shape::ParticleSystem;

/// Load a mesh, dispatching on the file extension (`.obj` or `.ply`).
pub fn load_mesh(path: &Path) -> Result<TriangleMesh> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => load_obj(path),
        Some("ply") => load_ply(path),
        other => Err(Error::InvalidArgument(format!(
            "unsupported mesh extension {other:?} for {}; expected .obj or .ply",
            path.display()
        ))),
    }
}

/// Save a mesh, dispatching on the file extension (`.obj` or `.ply`).
pub fn save_mesh(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("obj") => save_obj(path, mesh),
        Some("ply") => save_ply(path, mesh),
        other => Err(Error::InvalidArgument(format!(
            "unsupported mesh extension {other:?} for {}; expected .obj or .ply",
            path.display()
        ))),
    }
}

fn load_obj(path: &Path) -> Result<TriangleMesh> {
    let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let reader = BufReader::new(file);
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        let lineno = lineno + 1;
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno,
            message,
        };
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            Some("v") => {
                let mut coords = [0.0f64; 3];
                for c in &mut coords {
                    *c = tokens
                        .next()
                        .ok_or_else(|| parse_err("vertex with fewer than 3 coordinates".into()))?
                        .parse()
                        .map_err(|e| parse_err(format!("bad vertex coordinate: {e}")))?;
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let idx: Vec<u32> = tokens
                    .map(|t| {
                        let first = t.split('/').next().unwrap_or(t);
                        let v: i64 = first
                            .parse()
                            .map_err(|e| parse_err(format!("bad face index '{t}': {e}")))?;
                        if v < 1 {
                            return Err(parse_err(format!(
                                "face index {v} is not a positive 1-based index"
                            )));
                        }
                        Ok((v - 1) as u32)
                    })
                    .collect::<Result<_>>()?;
                if idx.len() != 3 {
                    return Err(parse_err(format!(
                        "face with {} vertices; only triangles are supported",
                        idx.len()
                    )));
                }
                faces.push([idx[0], idx[1], idx[2]]);
            }
            // Normals, texture coordinates, comments, groups, etc. are skipped;
            // vertex normals are always recomputed from face geometry.
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

fn save_obj(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    for v in mesh.vertices() {
        writeln!(w, "v {} {} {}", v.x, v.y, v.z).map_err(io_err)?;
    }
    for f in mesh.faces() {
        writeln!(w, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1).map_err(io_err)?;
    }
    Ok(())
}

fn load_ply(path: &Path) -> Result<TriangleMesh> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let header_end = data
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "missing end_header".into(),
        })?
        + 11;
    let header = std::str::from_utf8(&data[..header_end]).map_err(|_| Error::Parse {
        path: path.display().to_string(),
        line: 0,
        message: "header is not valid UTF-8".into(),
    })?;

    let mut vertex_count = 0usize;
    let mut face_count = 0usize;
    let mut vertex_props: Vec<(String, String)> = Vec::new();
    let mut current = "";
    let mut saw_format = false;
    for (lineno, line) in header.lines().enumerate() {
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["ply"] | ["comment", ..] | ["end_header"] => {}
            ["format", f, _] => {
                if *f != "binary_little_endian" {
                    return Err(parse_err(format!(
                        "unsupported PLY format '{f}'; only binary_little_endian is supported"
                    )));
                }
                saw_format = true;
            }
            ["element", "vertex", n] => {
                current = "vertex";
                vertex_count = n.parse().map_err(|e| parse_err(format!("bad count: {e}")))?;
            }
            ["element", "face", n] => {
                current = "face";
                face_count = n.parse().map_err(|e| parse_err(format!("bad count: {e}")))?;
            }
            ["element", name, _] => {
                return Err(parse_err(format!("unsupported element '{name}'")));
            }
            ["property", "list", count_ty, idx_ty, _name] if current == "face" => {
                if *count_ty != "uchar" && *count_ty != "uint8" {
                    return Err(parse_err(format!("unsupported list count type {count_ty}")));
                }
                if *idx_ty != "int" && *idx_ty != "uint" && *idx_ty != "int32" && *idx_ty != "uint32"
                {
                    return Err(parse_err(format!("unsupported index type {idx_ty}")));
                }
            }
            ["property", ty, name] if current == "vertex" => {
                vertex_props.push((ty.to_string(), name.to_string()));
            }
            _ => {
                return Err(parse_err(format!("unrecognized header line '{line}'")));
            }
        }
    }
    if !saw_format {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "missing format line".into(),
        });
    }

    let prop_size = |ty: &str| -> Result<usize> {
        match ty {
            "float" | "float32" => Ok(4),
            "double" | "float64" => Ok(8),
            other => Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: format!("unsupported vertex property type {other}"),
            }),
        }
    };
    let mut offsets = [None; 3];
    let mut stride = 0usize;
    for (ty, name) in &vertex_props {
        let size = prop_size(ty)?;
        match name.as_str() {
            "x" => offsets[0] = Some((stride, size)),
            "y" => offsets[1] = Some((stride, size)),
            "z" => offsets[2] = Some((stride, size)),
            _ => {}
        }
        stride += size;
    }
    let [Some(ox), Some(oy), Some(oz)] = offsets else {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: "vertex element lacks x/y/z properties".into(),
        });
    };

    let body = &data[header_end..];
    let vertex_bytes = vertex_count * stride;
    if body.len() < vertex_bytes {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!(
                "data size mismatch: {} bytes of vertex data, {} expected",
                body.len(),
                vertex_bytes
            ),
        });
    }
    let read_scalar = |bytes: &[u8], size: usize| -> f64 {
        if size == 4 {
            f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64
        } else {
            f64::from_le_bytes(bytes[..8].try_into().unwrap())
        }
    };
    let mut vertices = Vec::with_capacity(vertex_count);
    for i in 0..vertex_count {
        let rec = &body[i * stride..];
        vertices.push(Point3::new(
            read_scalar(&rec[ox.0..], ox.1),
            read_scalar(&rec[oy.0..], oy.1),
            read_scalar(&rec[oz.0..], oz.1),
        ));
    }

    let mut faces = Vec::with_capacity(face_count);
    let mut cursor = vertex_bytes;
    for f in 0..face_count {
        let short = || Error::Parse {
            path: path.display().to_string(),
            line: 0,
            message: format!("data size mismatch in face {f}"),
        };
        let n = *body.get(cursor).ok_or_else(short)? as usize;
        cursor += 1;
        if n != 3 {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: format!("face {f} has {n} vertices; only triangles are supported"),
            });
        }
        let mut idx = [0u32; 3];
        for slot in &mut idx {
            let bytes = body.get(cursor..cursor + 4).ok_or_else(short)?;
            *slot = u32::from_le_bytes(bytes.try_into().unwrap());
            cursor += 4;
        }
        faces.push(idx);
    }
    TriangleMesh::new(vertices, faces)
}

fn save_ply(path: &Path, mesh: &TriangleMesh) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nelement face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        mesh.num_vertices(),
        mesh.num_faces()
    )
    .map_err(io_err)?;
    for v in mesh.vertices() {
        for c in [v.x, v.y, v.z] {
            w.write_all(&c.to_le_bytes()).map_err(io_err)?;
        }
    }
    for f in mesh.faces() {
        w.write_all(&[3u8]).map_err(io_err)?;
        for &i in f {
            w.write_all(&i.to_le_bytes()).map_err(io_err)?;
        }
    }
    Ok(())
}

/// Load a signed distance volume from the raw-grid format.
pub fn load_sdf_volume(path: &Path) -> Result<SignedDistanceVolume> {
    let data = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0usize;
    let mut lines = Vec::new();
    // Header: lines up to and including the first blank line.
    while lines.len() < 5 {
        let end = data[pos..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::InvalidVolume("truncated header".into()))?;
        let line = std::str::from_utf8(&data[pos..pos + end])
            .map_err(|_| Error::InvalidVolume("header is not valid UTF-8".into()))?;
        pos += end + 1;
        if line.trim().is_empty() {
            break;
        }
        lines.push(line.to_string());
    }
    if lines.len() != 4 {
        return Err(Error::InvalidVolume(format!(
            "expected 4 header lines (dims/origin/spacing/dtype), got {}",
            lines.len()
        )));
    }
    let triple = |line: &str, key: &str| -> Result<[f64; 3]> {
        let mut tokens = line.split_whitespace();
        if tokens.next() != Some(key) {
            return Err(Error::InvalidVolume(format!(
                "expected '{key} ...' header line, got '{line}'"
            )));
        }
        let mut out = [0.0; 3];
        for o in &mut out {
            *o = tokens
                .next()
                .ok_or_else(|| Error::InvalidVolume(format!("short '{key}' line")))?
                .parse()
                .map_err(|e| Error::InvalidVolume(format!("bad '{key}' value: {e}")))?;
        }
        Ok(out)
    };
    let dims_f = triple(&lines[0], "dims")?;
    let origin = triple(&lines[1], "origin")?;
    let spacing = triple(&lines[2], "spacing")?;
    if lines[3].trim() != "dtype f32" {
        return Err(Error::InvalidVolume(format!(
            "unsupported dtype line '{}'; only 'dtype f32' is supported",
            lines[3]
        )));
    }
    let dims = [dims_f[0] as usize, dims_f[1] as usize, dims_f[2] as usize];
    let expected = dims[0] * dims[1] * dims[2] * 4;
    let body = &data[pos..];
    if body.len() != expected {
        return Err(Error::InvalidVolume(format!(
            "data size mismatch: {} bytes of grid data, {} expected for dims {dims:?}",
            body.len(),
            expected
        )));
    }
    let values = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    SignedDistanceVolume::from_parts(
        dims,
        Point3::new(origin[0], origin[1], origin[2]),
        spacing,
        values,
    )
}

/// Save a signed distance volume to the raw-grid format.
pub fn save_sdf_volume(path: &Path, vol: &SignedDistanceVolume) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    let d = vol.dims();
    let o = vol.origin();
    let s = vol.spacing();
    write!(
        w,
        "dims {} {} {}\norigin {} {} {}\nspacing {} {} {}\ndtype f32\n\n",
        d[0], d[1], d[2], o.x, o.y, o.z, s[0], s[1], s[2]
    )
    .map_err(io_err)?;
    for v in vol.values() {
        w.write_all(&v.to_le_bytes()).map_err(io_err)?;
    }
    Ok(())
}

const PARTICLE_EXT: &str = "particles";

/// Write one `<shape_id>.particles` text file per shape into `dir`.
pub fn save_particles(ps: &ParticleSystem, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    for (id, particles) in ps.shape_ids().iter().zip(ps.all_positions()) {
        let path = dir.join(format!("{id}.{PARTICLE_EXT}"));
        let file = fs::File::create(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = BufWriter::new(file);
        for p in particles {
            writeln!(w, "{} {} {}", p.x, p.y, p.z)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    Ok(())
}

/// Load every `*.particles` file in `dir` (sorted by file name) into one
/// particle system. All shapes must carry the same particle count.
pub fn load_particles(dir: &Path) -> Result<ParticleSystem> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir.display().to_string(), e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.extension().and_then(|e| e.to_str()) == Some(PARTICLE_EXT))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no .{PARTICLE_EXT} files in {}",
            dir.display()
        )));
    }
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    for path in &paths {
        let id = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let file = fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut particles = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
            if line.trim().is_empty() {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| {
                    t.parse().map_err(|e| Error::Parse {
                        path: path.display().to_string(),
                        line: lineno + 1,
                        message: format!("bad coordinate: {e}"),
                    })
                })
                .collect::<Result<_>>()?;
            if vals.len() != 3 {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: format!("expected 3 coordinates, got {}", vals.len()),
                });
            }
            particles.push(Point3::new(vals[0], vals[1], vals[2]));
        }
        ids.push(id);
        positions.push(particles);
    }
    let expected = positions[0].len();
    for (id, p) in ids.iter().zip(&positions) {
        if p.len() != expected {
            return Err(Error::ParticleCountMismatch {
                context: format!("{id}.{PARTICLE_EXT}"),
                expected,
                got: p.len(),
            });
        }
    }
    ParticleSystem::new(ids, positions)
}
