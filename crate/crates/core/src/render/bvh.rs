//! Median-split bounding volume hierarchy over triangles, f64 throughout.

use nalgebra::Vector3;

use crate::geometry::TriangleMesh;

const MAX_LEAF: usize = 8;
/// Barycentric slack so that rays through shared edges and vertices never slip
/// between neighbouring triangles.
const EDGE_EPS: f64 = 1e-10;

#[derive(Debug, Clone, Copy)]
struct Node {
    lo: [f64; 3],
    hi: [f64; 3],
    /// Leaf: first triangle slot. Interior: index of the right child (left is next).
    offset: u32,
    /// Number of triangles in a leaf, 0 for interior nodes.
    count: u32,
}

#[derive(Debug, Clone, Copy)]
struct Tri {
    v0: Vector3<f64>,
    e1: Vector3<f64>,
    e2: Vector3<f64>,
}

#[derive(Debug, Clone)]
pub struct Bvh {
    nodes: Vec<Node>,
    tris: Vec<Tri>,
}

#[derive(Debug, Clone, Copy)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
}

impl Bvh {
    pub fn build(mesh: &TriangleMesh) -> Self {
        let n = mesh.triangles().len();
        let tris_src: Vec<[Vector3<f64>; 3]> = (0..n).map(|i| mesh.triangle(i)).collect();
        let centroids: Vec<Vector3<f64>> = tris_src.iter().map(|t| (t[0] + t[1] + t[2]) / 3.0).collect();
        let mut order: Vec<u32> = (0..n as u32).collect();
        let mut nodes = Vec::with_capacity(2 * n / MAX_LEAF + 1);
        build_node(&mut nodes, &mut order, 0, &tris_src, &centroids);
        let tris = order
            .iter()
            .map(|&i| {
                let [a, b, c] = tris_src[i as usize];
                Tri { v0: a, e1: b - a, e2: c - a }
            })
            .collect();
        Bvh { nodes, tris }
    }

    pub fn triangle_count(&self) -> usize {
        self.tris.len()
    }

    /// Nearest hit parameter in `(t_min, t_max]`, if any.
    pub fn intersect(&self, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
        let inv = Vector3::new(1.0 / ray.dir.x, 1.0 / ray.dir.y, 1.0 / ray.dir.z);
        let mut best = t_max;
        let mut hit = false;
        let mut stack = [0u32; 64];
        let mut sp = 1usize;
        while sp > 0 {
            sp -= 1;
            let node = &self.nodes[stack[sp] as usize];
            if node.count > 0 {
                let start = node.offset as usize;
                for tri in &self.tris[start..start + node.count as usize] {
                    if let Some(t) = intersect_triangle(ray, tri) {
                        if t > t_min && t <= best {
                            best = t;
                            hit = true;
                        }
                    }
                }
                continue;
            }
            let left = stack[sp] + 1;
            let right = node.offset;
            let dl = slab(&self.nodes[left as usize], ray, &inv, t_min, best);
            let dr = slab(&self.nodes[right as usize], ray, &inv, t_min, best);
            match (dl, dr) {
                (Some(a), Some(b)) => {
                    // push the far child first
                    if a <= b {
                        stack[sp] = right;
                        stack[sp + 1] = left;
                    } else {
                        stack[sp] = left;
                        stack[sp + 1] = right;
                    }
                    sp += 2;
                }
                (Some(_), None) => {
                    stack[sp] = left;
                    sp += 1;
                }
                (None, Some(_)) => {
                    stack[sp] = right;
                    sp += 1;
                }
                (None, None) => {}
            }
        }
        hit.then_some(best)
    }
}

fn build_node(
    nodes: &mut Vec<Node>,
    order: &mut [u32],
    offset: usize,
    tris: &[[Vector3<f64>; 3]],
    centroids: &[Vector3<f64>],
) -> usize {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    let mut clo = [f64::INFINITY; 3];
    let mut chi = [f64::NEG_INFINITY; 3];
    for &i in order.iter() {
        for v in &tris[i as usize] {
            for k in 0..3 {
                lo[k] = lo[k].min(v[k]);
                hi[k] = hi[k].max(v[k]);
            }
        }
        let c = &centroids[i as usize];
        for k in 0..3 {
            clo[k] = clo[k].min(c[k]);
            chi[k] = chi[k].max(c[k]);
        }
    }
    let index = nodes.len();
    nodes.push(Node { lo, hi, offset: offset as u32, count: order.len() as u32 });
    if order.len() <= MAX_LEAF {
        return index;
    }
    let axis = (0..3)
        .max_by(|&a, &b| (chi[a] - clo[a]).total_cmp(&(chi[b] - clo[b])))
        .unwrap_or(0);
    let mid = order.len() / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        centroids[a as usize][axis]
            .total_cmp(&centroids[b as usize][axis])
            .then(a.cmp(&b))
    });
    let (left, right) = order.split_at_mut(mid);
    build_node(nodes, left, offset, tris, centroids);
    let right_index = build_node(nodes, right, offset + mid, tris, centroids);
    nodes[index].offset = right_index as u32;
    nodes[index].count = 0;
    index
}

#[inline]
fn slab(node: &Node, ray: &Ray, inv: &Vector3<f64>, t_min: f64, t_max: f64) -> Option<f64> {
    let mut t0 = t_min;
    let mut t1 = t_max;
    for k in 0..3 {
        if ray.dir[k] == 0.0 {
            // parallel to the slab: inside or never
            if ray.origin[k] < node.lo[k] || ray.origin[k] > node.hi[k] {
                return None;
            }
            continue;
        }
        let a = (node.lo[k] - ray.origin[k]) * inv[k];
        let b = (node.hi[k] - ray.origin[k]) * inv[k];
        let (near, far) = if a <= b { (a, b) } else { (b, a) };
        t0 = t0.max(near);
        t1 = t1.min(far);
        if t0 > t1 {
            return None;
        }
    }
    Some(t0)
}

/// Möller–Trumbore with inclusive, slightly widened barycentric bounds.
#[inline]
fn intersect_triangle(ray: &Ray, tri: &Tri) -> Option<f64> {
    let pvec = ray.dir.cross(&tri.e2);
    let det = tri.e1.dot(&pvec);
    if det == 0.0 {
        return None;
    }
    let inv_det = 1.0 / det;
    let tvec = ray.origin - tri.v0;
    let u = tvec.dot(&pvec) * inv_det;
    if !(-EDGE_EPS..=1.0 + EDGE_EPS).contains(&u) {
        return None;
    }
    let qvec = tvec.cross(&tri.e1);
    let v = ray.dir.dot(&qvec) * inv_det;
    if v < -EDGE_EPS || u + v > 1.0 + EDGE_EPS {
        return None;
    }
    Some(tri.e2.dot(&qvec) * inv_det)
}

/// Nearest hit by testing every triangle; reference for the hierarchy.
pub fn intersect_brute_force(mesh: &TriangleMesh, ray: &Ray, t_min: f64, t_max: f64) -> Option<f64> {
    (0..mesh.triangles().len())
        .filter_map(|i| {
            let [a, b, c] = mesh.triangle(i);
            intersect_triangle(ray, &Tri { v0: a, e1: b - a, e2: c - a })
        })
        .filter(|&t| t > t_min && t <= t_max)
        .min_by(f64::total_cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use rand::{Rng, SeedableRng};

    #[test]
    fn matches_brute_force_on_random_rays() {
        let mesh = fixtures::icosphere(5.0, 3, Vector3::new(0.3, -0.2, 20.0)).merged(&fixtures::asymmetric_prism());
        let bvh = Bvh::build(&mesh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut hits = 0;
        for _ in 0..2000 {
            let ray = Ray {
                origin: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), -5.0),
                dir: Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), 1.0),
            };
            let a = bvh.intersect(&ray, 0.0, f64::INFINITY);
            let b = intersect_brute_force(&mesh, &ray, 0.0, f64::INFINITY);
            assert_eq!(a.is_some(), b.is_some());
            if let (Some(a), Some(b)) = (a, b) {
                assert!((a - b).abs() < 1e-12);
                hits += 1;
            }
        }
        assert!(hits > 100);
    }

    #[test]
    fn ray_through_shared_vertex_hits() {
        // every vertex of a fan is shared by several triangles
        let mesh = fixtures::icosphere(10.0, 2, Vector3::new(0.0, 0.0, 40.0));
        let bvh = Bvh::build(&mesh);
        for v in mesh.vertices() {
            if v.z < 40.0 {
                let ray = Ray { origin: Vector3::zeros(), dir: v / v.z };
                let t = bvh.intersect(&ray, 0.0, f64::INFINITY).expect("vertex ray must hit");
                assert!((t - v.z).abs() < 1e-9);
            }
        }
    }
}
