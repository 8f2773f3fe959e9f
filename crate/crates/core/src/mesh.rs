//! Triangle-mesh proxies: a supported OBJ subset, derived normals, and
//! validation of frame sequences that must share topology and a UV atlas.
//!
//! UVs are stored per face corner rather than per vertex so atlas seams are
//! representable. Vertex normals are angle-weighted, which gives a usable
//! inside/outside sign for signed-distance queries at vertices and edges.

use crate::geom::{Aabb, Vec3};
use std::collections::HashMap;
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: index {index} out of range ({what} count is {count})")]
    Index {
        line: usize,
        index: i64,
        what: &'static str,
        count: usize,
    },
    #[error("line {line}: face mixes corners with and without texture coordinates")]
    InconsistentUv { line: usize },
    #[error("face {face} is degenerate (zero area)")]
    DegenerateFace { face: usize },
    #[error("mesh has no faces")]
    NoFaces,
    #[error("frame {frame}: {message}")]
    SequenceMismatch { frame: usize, message: String },
    #[error("empty frame list")]
    EmptySequence,
    #[error("uv ({0}, {1}) outside [0,1]^2")]
    UvOutOfRange(f64, f64),
}

/// A triangle mesh with per-corner UVs and derived normals.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<Vec3>,
    /// Vertex index triples, counter-clockwise when viewed from outside.
    pub faces: Vec<[u32; 3]>,
    /// One UV per face corner, `faces.len() * 3` entries, each in [0,1]^2.
    pub uv_per_corner: Vec<[f64; 2]>,
    /// Unit face normals from the CCW winding.
    pub face_normals: Vec<Vec3>,
    /// Unit angle-weighted vertex normals.
    pub vertex_normals: Vec<Vec3>,
}

impl TriangleMesh {
    /// Builds a mesh from raw arrays and derives normals.
    pub fn new(
        vertices: Vec<Vec3>,
        faces: Vec<[u32; 3]>,
        uv_per_corner: Vec<[f64; 2]>,
    ) -> Result<TriangleMesh, MeshError> {
        if faces.is_empty() {
            return Err(MeshError::NoFaces);
        }
        assert_eq!(uv_per_corner.len(), faces.len() * 3, "one uv per corner");
        for f in &faces {
            for &vi in f {
                assert!((vi as usize) < vertices.len(), "face index out of range");
            }
        }
        for uv in &uv_per_corner {
            let eps = 1e-9;
            if uv[0] < -eps || uv[0] > 1.0 + eps || uv[1] < -eps || uv[1] > 1.0 + eps {
                return Err(MeshError::UvOutOfRange(uv[0], uv[1]));
            }
        }
        let mut mesh = TriangleMesh {
            vertices,
            faces,
            uv_per_corner,
            face_normals: Vec::new(),
            vertex_normals: Vec::new(),
        };
        compute_normals(&mut mesh)?;
        Ok(mesh)
    }

    pub fn face_vertices(&self, face: usize) -> [Vec3; 3] {
        let f = self.faces[face];
        [
            self.vertices[f[0] as usize],
            self.vertices[f[1] as usize],
            self.vertices[f[2] as usize],
        ]
    }

    pub fn face_uvs(&self, face: usize) -> [[f64; 2]; 3] {
        [
            self.uv_per_corner[face * 3],
            self.uv_per_corner[face * 3 + 1],
            self.uv_per_corner[face * 3 + 2],
        ]
    }

    pub fn bounds(&self) -> Aabb {
        Aabb::from_points(self.vertices.iter().copied())
    }

    /// Map from an undirected edge (sorted vertex pair) to adjacent face
    /// indices. Used for edge pseudo-normals.
    pub fn edge_adjacency(&self) -> HashMap<(u32, u32), Vec<u32>> {
        let mut map: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
        for (fi, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                map.entry(key).or_default().push(fi as u32);
            }
        }
        map
    }

    /// Applies a point transform, recomputing normals.
    pub fn transformed(&self, f: impl Fn(Vec3) -> Vec3) -> TriangleMesh {
        let verts = self.vertices.iter().map(|&v| f(v)).collect();
        TriangleMesh::new(verts, self.faces.clone(), self.uv_per_corner.clone())
            .expect("transform of a valid mesh stays valid")
    }
}

/// Recomputes face and angle-weighted vertex normals in place.
pub fn compute_normals(mesh: &mut TriangleMesh) -> Result<(), MeshError> {
    if mesh.faces.is_empty() {
        return Err(MeshError::NoFaces);
    }
    let mut face_normals = Vec::with_capacity(mesh.faces.len());
    let mut vertex_accum = vec![Vec3::ZERO; mesh.vertices.len()];
    for (fi, f) in mesh.faces.iter().enumerate() {
        let [a, b, c] = [
            mesh.vertices[f[0] as usize],
            mesh.vertices[f[1] as usize],
            mesh.vertices[f[2] as usize],
        ];
        let n = (b - a).cross(c - a);
        let len = n.norm();
        if !(len > 0.0) || !n.is_finite() {
            return Err(MeshError::DegenerateFace { face: fi });
        }
        let unit = n / len;
        face_normals.push(unit);
        // Angle-weighted accumulation: each corner contributes the face
        // normal scaled by its interior angle.
        let corners = [a, b, c];
        for k in 0..3 {
            let p = corners[k];
            let e0 = (corners[(k + 1) % 3] - p).normalized();
            let e1 = (corners[(k + 2) % 3] - p).normalized();
            let angle = e0.dot(e1).clamp(-1.0, 1.0).acos();
            vertex_accum[f[k] as usize] += unit * angle;
        }
    }
    mesh.face_normals = face_normals;
    mesh.vertex_normals = vertex_accum
        .into_iter()
        .map(|n| if n.norm() > 0.0 { n.normalized() } else { n })
        .collect();
    Ok(())
}

/// A sequence of proxy meshes with identical topology and UV atlas.
#[derive(Debug, Clone)]
pub struct ProxySequence {
    pub frames: Vec<TriangleMesh>,
    /// Frame index of the template surface; the first frame.
    pub template_index: usize,
}

impl ProxySequence {
    pub fn template(&self) -> &TriangleMesh {
        &self.frames[self.template_index]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// Checks that all frames share faces and UVs exactly and wraps them up.
/// Vertex positions may differ; connectivity and the atlas may not.
pub fn validate_sequence(frames: Vec<TriangleMesh>) -> Result<ProxySequence, MeshError> {
    if frames.is_empty() {
        return Err(MeshError::EmptySequence);
    }
    let first = &frames[0];
    for (i, frame) in frames.iter().enumerate().skip(1) {
        if frame.vertices.len() != first.vertices.len() {
            return Err(MeshError::SequenceMismatch {
                frame: i,
                message: format!(
                    "vertex count {} differs from template {}",
                    frame.vertices.len(),
                    first.vertices.len()
                ),
            });
        }
        if frame.faces != first.faces {
            return Err(MeshError::SequenceMismatch {
                frame: i,
                message: "face list differs from template".into(),
            });
        }
        for (c, (uv, uv0)) in frame
            .uv_per_corner
            .iter()
            .zip(first.uv_per_corner.iter())
            .enumerate()
        {
            if (uv[0] - uv0[0]).abs() > 1e-9 || (uv[1] - uv0[1]).abs() > 1e-9 {
                return Err(MeshError::SequenceMismatch {
                    frame: i,
                    message: format!("uv atlas differs from template at corner {c}"),
                });
            }
        }
    }
    Ok(ProxySequence {
        frames,
        template_index: 0,
    })
}

/// Parses the supported OBJ subset: `v`, `vt`, `f` statements with `v/vt` or
/// `v/vt/vn` face corners, 1-based indices, negative (relative) indices
/// allowed. Polygon faces are fan-triangulated. `vn` data is ignored since
/// normals are derived. Comments and blank lines are skipped.
pub fn parse_obj(text: &str) -> Result<TriangleMesh, MeshError> {
    let mut positions: Vec<Vec3> = Vec::new();
    let mut uvs: Vec<[f64; 2]> = Vec::new();
    let mut faces: Vec<[u32; 3]> = Vec::new();
    let mut uv_per_corner: Vec<[f64; 2]> = Vec::new();
    let mut any_face_had_uv = false;
    let mut any_face_missing_uv = false;
    let mut first_face_line = 0usize;

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let trimmed = raw.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let mut fields = trimmed.split_whitespace();
        let keyword = fields.next().unwrap();
        match keyword {
            "v" => {
                let v = parse_floats::<3>(&mut fields, line, "v")?;
                positions.push(Vec3::from_array(v));
            }
            "vt" => {
                let vt = parse_floats::<2>(&mut fields, line, "vt")?;
                uvs.push(vt);
            }
            "vn" => {
                // Accepted and discarded; normals are recomputed.
            }
            "f" => {
                let mut corner_pos: Vec<u32> = Vec::new();
                let mut corner_uv: Vec<Option<u32>> = Vec::new();
                for piece in fields {
                    let mut parts = piece.split('/');
                    let vi_raw = parts.next().unwrap_or("");
                    let vi = parse_index(vi_raw, positions.len(), line, "vertex")?;
                    let ti = match parts.next() {
                        None | Some("") => None,
                        Some(t) => Some(parse_index(t, uvs.len(), line, "texture")?),
                    };
                    // Optional /vn part: validated syntactically, ignored.
                    if let Some(n) = parts.next() {
                        if !n.is_empty() {
                            n.parse::<i64>().map_err(|_| MeshError::Parse {
                                line,
                                message: format!("bad normal index `{n}`"),
                            })?;
                        }
                    }
                    if parts.next().is_some() {
                        return Err(MeshError::Parse {
                            line,
                            message: format!("too many `/` separators in `{piece}`"),
                        });
                    }
                    corner_pos.push(vi);
                    corner_uv.push(ti);
                }
                if corner_pos.len() < 3 {
                    return Err(MeshError::Parse {
                        line,
                        message: format!("face has {} corners, need at least 3", corner_pos.len()),
                    });
                }
                let has_uv = corner_uv.iter().all(|t| t.is_some());
                let lacks_uv = corner_uv.iter().all(|t| t.is_none());
                if !has_uv && !lacks_uv {
                    return Err(MeshError::InconsistentUv { line });
                }
                if faces.is_empty() {
                    first_face_line = line;
                }
                if has_uv {
                    any_face_had_uv = true;
                } else {
                    any_face_missing_uv = true;
                }
                if any_face_had_uv && any_face_missing_uv {
                    return Err(MeshError::InconsistentUv { line });
                }
                // Fan triangulation around corner 0.
                for k in 1..corner_pos.len() - 1 {
                    faces.push([corner_pos[0], corner_pos[k], corner_pos[k + 1]]);
                    for idx in [0, k, k + 1] {
                        let uv = match corner_uv[idx] {
                            Some(t) => uvs[t as usize],
                            None => [0.0, 0.0],
                        };
                        uv_per_corner.push(uv);
                    }
                }
            }
            other => {
                return Err(MeshError::Parse {
                    line,
                    message: format!("unsupported statement `{other}`"),
                });
            }
        }
    }
    let _ = first_face_line;
    TriangleMesh::new(positions, faces, uv_per_corner)
}

fn parse_floats<const N: usize>(
    fields: &mut std::str::SplitWhitespace<'_>,
    line: usize,
    keyword: &str,
) -> Result<[f64; N], MeshError> {
    let mut out = [0.0; N];
    for slot in out.iter_mut() {
        let field = fields.next().ok_or_else(|| MeshError::Parse {
            line,
            message: format!("`{keyword}` expects {N} numbers"),
        })?;
        *slot = field.parse::<f64>().map_err(|_| MeshError::Parse {
            line,
            message: format!("bad number `{field}`"),
        })?;
    }
    Ok(out)
}

/// Resolves a 1-based (possibly negative, relative) OBJ index against the
/// current element count.
fn parse_index(s: &str, count: usize, line: usize, what: &'static str) -> Result<u32, MeshError> {
    let idx: i64 = s.parse().map_err(|_| MeshError::Parse {
        line,
        message: format!("bad index `{s}`"),
    })?;
    let resolved = if idx > 0 {
        idx - 1
    } else if idx < 0 {
        count as i64 + idx
    } else {
        return Err(MeshError::Index {
            line,
            index: idx,
            what,
            count,
        });
    };
    if resolved < 0 || resolved >= count as i64 {
        return Err(MeshError::Index {
            line,
            index: idx,
            what,
            count,
        });
    }
    Ok(resolved as u32)
}

/// Writes the supported OBJ subset. Floats are printed with the shortest
/// representation that round-trips, so parse(serialize(m)) == m bit-exactly.
pub fn serialize_obj(mesh: &TriangleMesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v.x, v.y, v.z).unwrap();
    }
    for uv in &mesh.uv_per_corner {
        writeln!(out, "vt {} {}", uv[0], uv[1]).unwrap();
    }
    for (fi, f) in mesh.faces.iter().enumerate() {
        writeln!(
            out,
            "f {}/{} {}/{} {}/{}",
            f[0] + 1,
            fi * 3 + 1,
            f[1] + 1,
            fi * 3 + 2,
            f[2] + 1,
            fi * 3 + 3
        )
        .unwrap();
    }
    out
}
