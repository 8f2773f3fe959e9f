//! Nearest-point, signed-distance and UV queries against a proxy mesh,
//! accelerated by a bounding-volume hierarchy.
//!
//! Equidistant candidates (seams, symmetric points) are resolved
//! deterministically: within a small relative distance band, the lowest face
//! index wins, then the lexicographically smallest barycentric triple. The
//! band makes the choice stable under rigid motion, which the intrinsic
//! coordinates rely on.

use crate::geom::{Aabb, Vec3};
use crate::mesh::TriangleMesh;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SpatialError {
    #[error("face index {face} out of range (mesh has {count} faces)")]
    FaceOutOfRange { face: usize, count: usize },
}

/// Closest point on a mesh surface to some query point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub face_index: usize,
    /// Non-negative weights over the face's vertices, summing to 1.
    pub barycentric: [f64; 3],
    pub position: Vec3,
    pub unsigned_distance: f64,
}

/// Distance to the surface, positive outside.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignedDistance {
    pub value: f64,
}

#[derive(Debug, Clone)]
struct BvhNode {
    aabb: Aabb,
    /// Leaf: `count > 0`, faces in `order[start..start+count]`.
    /// Internal: `count == 0`, children at `start` and `start + 1`... no:
    /// children indices stored explicitly.
    left: u32,
    right: u32,
    start: u32,
    count: u32,
}

/// Bounding-volume hierarchy over mesh faces, plus the edge adjacency and
/// tie tolerances queries need. Immutable after build; concurrent read-only
/// queries are safe.
#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<BvhNode>,
    /// Face indices, permuted so each leaf owns a contiguous range.
    order: Vec<u32>,
    pub leaf_size: usize,
    /// Absolute squared-distance band treated as a tie.
    tie_band: f64,
    /// Undirected edge -> adjacent faces, for edge pseudo-normals.
    edge_faces: HashMap<(u32, u32), Vec<u32>>,
}

pub const DEFAULT_LEAF_SIZE: usize = 4;

pub fn build_bvh(mesh: &TriangleMesh) -> Bvh {
    build_bvh_with_leaf_size(mesh, DEFAULT_LEAF_SIZE)
}

pub fn build_bvh_with_leaf_size(mesh: &TriangleMesh, leaf_size: usize) -> Bvh {
    assert!(!mesh.faces.is_empty(), "bvh over empty mesh");
    let leaf_size = leaf_size.max(1);
    let centroids: Vec<Vec3> = (0..mesh.faces.len())
        .map(|f| {
            let [a, b, c] = mesh.face_vertices(f);
            (a + b + c) / 3.0
        })
        .collect();
    let face_boxes: Vec<Aabb> = (0..mesh.faces.len())
        .map(|f| Aabb::from_points(mesh.face_vertices(f)))
        .collect();

    let mut order: Vec<u32> = (0..mesh.faces.len() as u32).collect();
    let mut nodes = Vec::new();
    build_node(&mut nodes, &mut order, 0, mesh.faces.len(), &centroids, &face_boxes, leaf_size);

    let diag = mesh.bounds().diagonal().max(1e-300);
    Bvh {
        nodes,
        order,
        leaf_size,
        tie_band: 1e-12 * diag * diag,
        edge_faces: mesh.edge_adjacency(),
    }
}

fn build_node(
    nodes: &mut Vec<BvhNode>,
    order: &mut [u32],
    start: usize,
    count: usize,
    centroids: &[Vec3],
    face_boxes: &[Aabb],
    leaf_size: usize,
) -> u32 {
    let slice = &order[start..start + count];
    let mut aabb = Aabb::EMPTY;
    for &f in slice {
        aabb = aabb.union(&face_boxes[f as usize]);
    }
    let index = nodes.len() as u32;
    nodes.push(BvhNode {
        aabb,
        left: 0,
        right: 0,
        start: start as u32,
        count: 0,
    });
    if count <= leaf_size {
        nodes[index as usize].count = count as u32;
        return index;
    }
    // Median split along the longest axis of the centroid bounds.
    let cbounds = Aabb::from_points(slice.iter().map(|&f| centroids[f as usize]));
    let ext = cbounds.extent();
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = count / 2;
    order[start..start + count].select_nth_unstable_by(mid, |&a, &b| {
        let ca = centroids[a as usize].get(axis);
        let cb = centroids[b as usize].get(axis);
        ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
    });
    let left = build_node(nodes, order, start, mid, centroids, face_boxes, leaf_size);
    let right = build_node(nodes, order, start + mid, count - mid, centroids, face_boxes, leaf_size);
    nodes[index as usize].left = left;
    nodes[index as usize].right = right;
    index
}

impl Bvh {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Maximum leaf depth (root at depth 1).
    pub fn depth(&self) -> usize {
        fn walk(nodes: &[BvhNode], i: u32, d: usize) -> usize {
            let n = &nodes[i as usize];
            if n.count > 0 {
                d
            } else {
                walk(nodes, n.left, d + 1).max(walk(nodes, n.right, d + 1))
            }
        }
        walk(&self.nodes, 0, 1)
    }

    /// Checks that each face is in exactly one leaf and each node box bounds
    /// its faces. Used by tests.
    pub fn validate(&self, mesh: &TriangleMesh) -> bool {
        let mut seen = vec![false; mesh.faces.len()];
        for n in &self.nodes {
            if n.count == 0 {
                continue;
            }
            for &f in &self.order[n.start as usize..(n.start + n.count) as usize] {
                if seen[f as usize] {
                    return false;
                }
                seen[f as usize] = true;
                for v in mesh.face_vertices(f as usize) {
                    if !n.aabb.dilated(1e-12).contains(v) {
                        return false;
                    }
                }
            }
        }
        seen.iter().all(|&s| s)
    }
}

/// Closest point on a triangle `(a, b, c)` to `p`, with barycentric weights.
/// Region-based projection (interior, edges, vertices).
pub fn closest_point_on_triangle(p: Vec3, a: Vec3, b: Vec3, c: Vec3) -> ([f64; 3], Vec3) {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(ap);
    let d2 = ac.dot(ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return ([1.0, 0.0, 0.0], a);
    }
    let bp = p - b;
    let d3 = ab.dot(bp);
    let d4 = ac.dot(bp);
    if d3 >= 0.0 && d4 <= d3 {
        return ([0.0, 1.0, 0.0], b);
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return ([1.0 - v, v, 0.0], a + ab * v);
    }
    let cp = p - c;
    let d5 = ab.dot(cp);
    let d6 = ac.dot(cp);
    if d6 >= 0.0 && d5 <= d6 {
        return ([0.0, 0.0, 1.0], c);
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return ([1.0 - w, 0.0, w], a + ac * w);
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return ([0.0, 1.0 - w, w], b + (c - b) * w);
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    ([1.0 - v - w, v, w], a + ab * v + ac * w)
}

struct Candidate {
    face: usize,
    bary: [f64; 3],
    point: Vec3,
    dist_sq: f64,
}

/// True when `b` should replace `a` under the deterministic tie rules.
fn replaces(a: &Candidate, b: &Candidate, band: f64) -> bool {
    if b.dist_sq + band < a.dist_sq {
        return true;
    }
    if b.dist_sq > a.dist_sq + band {
        return false;
    }
    // Tie: lowest face index, then lexicographically smallest barycentric.
    match b.face.cmp(&a.face) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => b.bary < a.bary,
    }
}

/// Returned point minimizes Euclidean distance to `x` over the surface.
pub fn closest_point(x: Vec3, mesh: &TriangleMesh, bvh: &Bvh) -> SurfacePoint {
    let mut best: Option<Candidate> = None;
    // Fixed stack of node indices with their box distance, nearest on top.
    // Depth is logarithmic in the face count; 64 entries covers any mesh
    // this fits in memory.
    let mut stack = [(0u32, 0f64); 64];
    let mut top = 0usize;
    stack[top] = (0, bvh.nodes[0].aabb.distance_sq(x));
    top += 1;
    while top > 0 {
        top -= 1;
        let (ni, node_dist) = stack[top];
        if let Some(b) = &best {
            if node_dist > b.dist_sq + bvh.tie_band {
                continue;
            }
        }
        let node = &bvh.nodes[ni as usize];
        if node.count > 0 {
            for &f in &bvh.order[node.start as usize..(node.start + node.count) as usize] {
                let [a, b, c] = mesh.face_vertices(f as usize);
                let (bary, point) = closest_point_on_triangle(x, a, b, c);
                let cand = Candidate {
                    face: f as usize,
                    bary,
                    point,
                    dist_sq: (x - point).norm_sq(),
                };
                best = match best {
                    None => Some(cand),
                    Some(cur) => {
                        if replaces(&cur, &cand, bvh.tie_band) {
                            Some(cand)
                        } else {
                            Some(cur)
                        }
                    }
                };
            }
        } else {
            let dl = bvh.nodes[node.left as usize].aabb.distance_sq(x);
            let dr = bvh.nodes[node.right as usize].aabb.distance_sq(x);
            // Push the farther child first so the nearer is visited next.
            debug_assert!(top + 2 <= stack.len(), "bvh deeper than the traversal stack");
            if dl <= dr {
                stack[top] = (node.right, dr);
                stack[top + 1] = (node.left, dl);
            } else {
                stack[top] = (node.left, dl);
                stack[top + 1] = (node.right, dr);
            }
            top += 2;
        }
    }
    let best = best.expect("non-empty mesh");
    SurfacePoint {
        face_index: best.face,
        barycentric: best.bary,
        position: best.point,
        unsigned_distance: best.dist_sq.sqrt(),
    }
}

/// Pseudo-normal at a surface point: face normal for interior hits, the
/// angle-weighted vertex normal at vertices, and the area-weighted average of
/// adjacent face normals on edges.
pub fn pseudo_normal(sp: &SurfacePoint, mesh: &TriangleMesh, bvh: &Bvh) -> Vec3 {
    const EPS: f64 = 1e-9;
    let w = sp.barycentric;
    let zeros: Vec<usize> = (0..3).filter(|&i| w[i] < EPS).collect();
    let face = sp.face_index;
    match zeros.len() {
        0 => mesh.face_normals[face],
        1 => {
            // On the edge opposite the zero-weight corner.
            let f = mesh.faces[face];
            let k = zeros[0];
            let a = f[(k + 1) % 3];
            let b = f[(k + 2) % 3];
            let key = (a.min(b), a.max(b));
            let mut accum = Vec3::ZERO;
            if let Some(adj) = bvh.edge_faces.get(&key) {
                for &fi in adj {
                    let [p, q, r] = mesh.face_vertices(fi as usize);
                    let area2 = (q - p).cross(r - p).norm();
                    accum += mesh.face_normals[fi as usize] * area2;
                }
            }
            if accum.norm() > 0.0 {
                accum.normalized()
            } else {
                mesh.face_normals[face]
            }
        }
        _ => {
            // At (or extremely near) a vertex: the corner with maximal weight.
            let k = (0..3).max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap()).unwrap();
            let vi = mesh.faces[face][k] as usize;
            let n = mesh.vertex_normals[vi];
            if n.norm() > 0.0 {
                n
            } else {
                mesh.face_normals[face]
            }
        }
    }
}

/// Signed distance with magnitude equal to the unsigned distance of the
/// nearest surface point and sign from the pseudo-normal test.
pub fn signed_distance_at(x: Vec3, sp: &SurfacePoint, mesh: &TriangleMesh, bvh: &Bvh) -> SignedDistance {
    let n = pseudo_normal(sp, mesh, bvh);
    let side = (x - sp.position).dot(n);
    let value = if side < 0.0 {
        -sp.unsigned_distance
    } else {
        sp.unsigned_distance
    };
    SignedDistance { value }
}

pub fn signed_distance(x: Vec3, mesh: &TriangleMesh, bvh: &Bvh) -> SignedDistance {
    let sp = closest_point(x, mesh, bvh);
    signed_distance_at(x, &sp, mesh, bvh)
}

/// Barycentric transfer of a surface point onto a same-topology target frame.
pub fn transfer_point(sp: &SurfacePoint, target: &TriangleMesh) -> Result<Vec3, SpatialError> {
    if sp.face_index >= target.faces.len() {
        return Err(SpatialError::FaceOutOfRange {
            face: sp.face_index,
            count: target.faces.len(),
        });
    }
    let [a, b, c] = target.face_vertices(sp.face_index);
    let w = sp.barycentric;
    Ok(a * w[0] + b * w[1] + c * w[2])
}

/// Barycentric interpolation of the face's corner UVs.
pub fn surface_uv(sp: &SurfacePoint, mesh: &TriangleMesh) -> [f64; 2] {
    let uvs = mesh.face_uvs(sp.face_index);
    let w = sp.barycentric;
    [
        uvs[0][0] * w[0] + uvs[1][0] * w[1] + uvs[2][0] * w[2],
        uvs[0][1] * w[0] + uvs[1][1] * w[1] + uvs[2][1] * w[2],
    ]
}
