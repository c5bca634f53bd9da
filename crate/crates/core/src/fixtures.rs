//! Procedural meshes used by examples, tests and the command-line demos.

use nalgebra::Vector3;

use crate::geometry::TriangleMesh;

/// Axis-aligned box centred at the origin.
pub fn box_mesh(size: Vector3<f64>) -> TriangleMesh {
    box_between(-size * 0.5, size * 0.5)
}

/// Axis-aligned box spanning `lo..hi`, outward-facing triangles.
pub fn box_between(lo: Vector3<f64>, hi: Vector3<f64>) -> TriangleMesh {
    let v = |x: bool, y: bool, z: bool| {
        Vector3::new(
            if x { hi.x } else { lo.x },
            if y { hi.y } else { lo.y },
            if z { hi.z } else { lo.z },
        )
    };
    let vertices = vec![
        v(false, false, false),
        v(true, false, false),
        v(true, true, false),
        v(false, true, false),
        v(false, false, true),
        v(true, false, true),
        v(true, true, true),
        v(false, true, true),
    ];
    let triangles = vec![
        [0, 2, 1],
        [0, 3, 2],
        [4, 5, 6],
        [4, 6, 7],
        [0, 1, 5],
        [0, 5, 4],
        [1, 2, 6],
        [1, 6, 5],
        [2, 3, 7],
        [2, 7, 6],
        [3, 0, 4],
        [3, 4, 7],
    ];
    TriangleMesh::new(vertices, triangles).expect("box is non-degenerate")
}

/// Rectangle in the plane `z = z0`, centred on the z axis.
pub fn plane(half_x: f64, half_y: f64, z0: f64) -> TriangleMesh {
    let vertices = vec![
        Vector3::new(-half_x, -half_y, z0),
        Vector3::new(half_x, -half_y, z0),
        Vector3::new(half_x, half_y, z0),
        Vector3::new(-half_x, half_y, z0),
    ];
    TriangleMesh::new(vertices, vec![[0, 1, 2], [0, 2, 3]]).expect("plane is non-degenerate")
}

/// Subdivided icosahedron with all vertices on the sphere.
/// Triangle count is `20 * 4^subdivisions`.
pub fn icosphere(radius: f64, subdivisions: u32, center: Vector3<f64>) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<Vector3<f64>> = [
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ]
    .iter()
    .map(|v| Vector3::from(*v).normalize())
    .collect();
    let mut faces: Vec<[u32; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut cache = std::collections::HashMap::new();
        let mut mid = |a: u32, b: u32, verts: &mut Vec<Vector3<f64>>| -> u32 {
            let key = (a.min(b), a.max(b));
            *cache.entry(key).or_insert_with(|| {
                verts.push(((verts[a as usize] + verts[b as usize]) * 0.5).normalize());
                (verts.len() - 1) as u32
            })
        };
        let mut next = Vec::with_capacity(faces.len() * 4);
        for f in &faces {
            let ab = mid(f[0], f[1], &mut verts);
            let bc = mid(f[1], f[2], &mut verts);
            let ca = mid(f[2], f[0], &mut verts);
            next.push([f[0], ab, ca]);
            next.push([f[1], bc, ab]);
            next.push([f[2], ca, bc]);
            next.push([ab, bc, ca]);
        }
        faces = next;
    }
    let vertices = verts.into_iter().map(|v| v * radius + center).collect();
    TriangleMesh::new(vertices, faces).expect("icosphere is non-degenerate")
}

/// Prism over a polygon that is star-shaped about the origin. The polygon
/// lies in `z = 0` (outward normal `-z`) and is extruded to `z = height`.
pub fn prism(polygon: &[[f64; 2]], height: f64) -> TriangleMesh {
    let n = polygon.len() as u32;
    assert!(n >= 3, "prism needs at least three polygon vertices");
    let mut vertices: Vec<Vector3<f64>> = Vec::with_capacity(2 * polygon.len() + 2);
    for p in polygon {
        vertices.push(Vector3::new(p[0], p[1], 0.0));
    }
    for p in polygon {
        vertices.push(Vector3::new(p[0], p[1], height));
    }
    let c0 = 2 * n;
    let c1 = 2 * n + 1;
    vertices.push(Vector3::new(0.0, 0.0, 0.0));
    vertices.push(Vector3::new(0.0, 0.0, height));
    // counter-clockwise polygon seen from +z
    let ccw = polygon
        .iter()
        .zip(polygon.iter().cycle().skip(1))
        .map(|(a, b)| a[0] * b[1] - a[1] * b[0])
        .sum::<f64>()
        > 0.0;
    let mut triangles = Vec::new();
    for i in 0..n {
        let j = (i + 1) % n;
        let (a, b) = if ccw { (i, j) } else { (j, i) };
        triangles.push([c0, b, a]);
        triangles.push([c1, n + a, n + b]);
        triangles.push([a, b, n + b]);
        triangles.push([a, n + b, n + a]);
    }
    TriangleMesh::new(vertices, triangles).expect("prism is non-degenerate")
}

/// Irregular pentagonal prism with no rotational symmetry about any axis.
pub fn asymmetric_prism() -> TriangleMesh {
    prism(
        &[[9.0, -2.0], [4.0, 8.0], [-5.0, 7.0], [-8.0, -3.0], [-1.0, -9.0]],
        12.0,
    )
}

/// Block whose square contact face (`z = 0`, 16 x 16 mm) is four-fold
/// symmetric while the side walls are not: a tab sticks out of the `+x`
/// wall and a shorter one out of the `+y` wall.
pub fn keyed_block() -> TriangleMesh {
    let body = box_between(Vector3::new(-8.0, -8.0, 0.0), Vector3::new(8.0, 8.0, 20.0));
    let tab_x = box_between(Vector3::new(8.0, -3.0, 4.0), Vector3::new(14.0, 5.0, 12.0));
    let tab_y = box_between(Vector3::new(-6.0, 8.0, 12.0), Vector3::new(0.0, 11.0, 18.0));
    body.merged(&tab_x).merged(&tab_y)
}
