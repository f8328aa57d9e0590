//! P1 element kernels: shape functions, constant gradients, triangle and edge
//! quadrature, and generic local-to-global assembly.
//!
//! Degrees of freedom are node-blocked: node `n` owns dofs
//! `(3n, 3n+1, 3n+2) = (ux, uy, p)`.

use crate::error::Error;
use crate::mesh::{BackgroundMesh, Point};
use crate::sparse::{CsrMatrix, Triplets};
use crate::Result;

pub const DOFS_PER_NODE: usize = 3;

#[inline]
pub fn vel_dof(node: usize, comp: usize) -> usize {
    DOFS_PER_NODE * node + comp
}

#[inline]
pub fn pres_dof(node: usize) -> usize {
    DOFS_PER_NODE * node + 2
}

/// Triangle geometry with precomputed area and P1 shape gradients.
#[derive(Debug, Clone)]
pub struct ElementGeometry {
    pub vertices: [Point; 3],
    pub area: f64,
    /// Constant gradients of the three shape functions; they sum to zero.
    pub grads: [Point; 3],
}

impl ElementGeometry {
    pub fn new(vertices: [Point; 3]) -> Self {
        let [a, b, c] = vertices;
        let det = (b.x - a.x) * (c.y - a.y) - (c.x - a.x) * (b.y - a.y);
        let area = 0.5 * det;
        let inv = 1.0 / det;
        // grad N_a = perpendicular of the opposite edge / det
        let grads = [
            Point::new((b.y - c.y) * inv, (c.x - b.x) * inv),
            Point::new((c.y - a.y) * inv, (a.x - c.x) * inv),
            Point::new((a.y - b.y) * inv, (b.x - a.x) * inv),
        ];
        ElementGeometry {
            vertices,
            area,
            grads,
        }
    }

    pub fn from_mesh(mesh: &BackgroundMesh, t: usize) -> Self {
        let [a, b, c] = mesh.triangles[t];
        Self::new([mesh.nodes[a], mesh.nodes[b], mesh.nodes[c]])
    }

    /// Longest edge.
    pub fn diameter(&self) -> f64 {
        let [a, b, c] = self.vertices;
        (b - a).norm().max((c - b).norm()).max((a - c).norm())
    }

    /// Barycentric coordinates of `x`, unchecked.
    pub fn barycentric(&self, x: Point) -> [f64; 3] {
        let [a, b, c] = self.vertices;
        let det = 2.0 * self.area;
        let l0 = ((b.x - x.x) * (c.y - x.y) - (c.x - x.x) * (b.y - x.y)) / det;
        let l1 = ((c.x - x.x) * (a.y - x.y) - (a.x - x.x) * (c.y - x.y)) / det;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Shape values at a point inside the element (tolerance 1e-12 * h).
    pub fn shape_eval(&self, x: Point) -> Result<[f64; 3]> {
        let tol = 1e-12 * self.diameter();
        let l = self.barycentric(x);
        if l.iter().any(|&v| v < -tol) {
            return Err(Error::InvalidInput(format!(
                "point ({}, {}) lies outside the element",
                x.x, x.y
            )));
        }
        Ok(l)
    }

    /// Physical quadrature points and weights; weights sum to the area.
    pub fn quadrature(&self, order: usize) -> Result<Vec<(Point, f64)>> {
        let rule = triangle_quadrature(order)?;
        Ok(rule
            .iter()
            .map(|&(l, w)| {
                let p = self.vertices[0] * l[0] + self.vertices[1] * l[1] + self.vertices[2] * l[2];
                (p, w * 2.0 * self.area)
            })
            .collect())
    }
}

/// Reference-triangle rule as (barycentric coords, weight); weights sum to
/// the reference area 1/2. Order 1 is the centroid rule, order 2 the
/// three-point edge-midpoint rule (exact for quadratics).
pub fn triangle_quadrature(order: usize) -> Result<&'static [([f64; 3], f64)]> {
    const ORDER1: [([f64; 3], f64); 1] = [([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], 0.5)];
    const ORDER2: [([f64; 3], f64); 3] = [
        ([0.5, 0.5, 0.0], 1.0 / 6.0),
        ([0.0, 0.5, 0.5], 1.0 / 6.0),
        ([0.5, 0.0, 0.5], 1.0 / 6.0),
    ];
    match order {
        1 => Ok(&ORDER1),
        2 => Ok(&ORDER2),
        _ => Err(Error::InvalidInput(format!(
            "unsupported triangle quadrature order {order}"
        ))),
    }
}

/// Straight edge with 2-point Gauss quadrature.
#[derive(Debug, Clone)]
pub struct EdgeGeometry {
    pub p0: Point,
    pub p1: Point,
    pub length: f64,
    /// Unit normal; orientation is chosen by the caller.
    pub normal: Point,
}

impl EdgeGeometry {
    /// Edge with the left-hand normal of the direction p0 -> p1.
    pub fn new(p0: Point, p1: Point) -> Self {
        let t = p1 - p0;
        let length = t.norm();
        let normal = Point::new(-t.y, t.x) / length;
        EdgeGeometry {
            p0,
            p1,
            length,
            normal,
        }
    }

    /// Flips the normal so it points away from `interior` (e.g. the owning
    /// element's centroid).
    pub fn oriented_away_from(mut self, interior: Point) -> Self {
        let mid = (self.p0 + self.p1) * 0.5;
        if (mid - interior).dot(&self.normal) < 0.0 {
            self.normal = -self.normal;
        }
        self
    }

    /// Two-point Gauss rule; weights sum to the edge length.
    pub fn gauss2(&self) -> [(Point, f64); 2] {
        let s = 0.5 / 3.0_f64.sqrt();
        let mid = (self.p0 + self.p1) * 0.5;
        let half = (self.p1 - self.p0) * 0.5;
        [
            (mid - half * (2.0 * s), self.length * 0.5),
            (mid + half * (2.0 * s), self.length * 0.5),
        ]
    }
}

/// Local dense block destined for the global operator.
#[derive(Debug, Clone)]
pub struct LocalBlock {
    pub dofs: Vec<usize>,
    /// Row-major dofs.len() x dofs.len() values.
    pub values: Vec<f64>,
}

/// Accumulates local blocks into a global sparse operator. Duplicate entries
/// sum; summation order follows block order, so results are deterministic.
pub fn assemble<I>(n_dofs: usize, blocks: I) -> Result<CsrMatrix>
where
    I: IntoIterator<Item = LocalBlock>,
{
    let mut trip = Triplets::default();
    for block in blocks {
        let n = block.dofs.len();
        if block.values.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: block.values.len(),
            });
        }
        for (a, &ga) in block.dofs.iter().enumerate() {
            for (b, &gb) in block.dofs.iter().enumerate() {
                trip.push(ga, gb, block.values[a * n + b]);
            }
        }
    }
    CsrMatrix::from_triplets(n_dofs, n_dofs, &trip)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::ExecMode;
    use crate::mesh::{build_background_mesh, mass_structure, Rect};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_right_triangle() -> ElementGeometry {
        ElementGeometry::new([
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(0.0, 1.0),
        ])
    }

    #[test]
    fn geometry_invariants() {
        let e = ElementGeometry::new([
            Point::new(0.2, -0.1),
            Point::new(1.3, 0.4),
            Point::new(0.5, 1.1),
        ]);
        assert!(e.area > 0.0);
        let sum = e.grads[0] + e.grads[1] + e.grads[2];
        assert!(sum.norm() < 1e-14);
        let w: f64 = e.quadrature(2).unwrap().iter().map(|q| q.1).sum();
        assert_relative_eq!(w, e.area, max_relative = 1e-14);
    }

    #[test]
    fn shape_values_at_vertices_and_centroid() {
        let e = unit_right_triangle();
        let v = e.shape_eval(Point::new(0.0, 0.0)).unwrap();
        assert_relative_eq!(v[0], 1.0, epsilon = 1e-14);
        assert_relative_eq!(v[1], 0.0, epsilon = 1e-14);
        let c = e.shape_eval(Point::new(1.0 / 3.0, 1.0 / 3.0)).unwrap();
        for &l in &c {
            assert_relative_eq!(l, 1.0 / 3.0, epsilon = 1e-14);
        }
        assert!(e.shape_eval(Point::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn quadrature_exactness() {
        let e = unit_right_triangle();
        // int 1 = 1/2 with either rule
        for order in [1, 2] {
            let s: f64 = e.quadrature(order).unwrap().iter().map(|q| q.1).sum();
            assert_relative_eq!(s, 0.5, epsilon = 1e-15);
        }
        // int x = 1/6 and int x*y = 1/24 need the degree-2 rule
        let q = e.quadrature(2).unwrap();
        let ix: f64 = q.iter().map(|&(p, w)| w * p.x).sum();
        assert_relative_eq!(ix, 1.0 / 6.0, epsilon = 1e-14);
        let ixy: f64 = q.iter().map(|&(p, w)| w * p.x * p.y).sum();
        assert_relative_eq!(ixy, 1.0 / 24.0, epsilon = 1e-14);
        assert!(triangle_quadrature(3).is_err());
        assert!(triangle_quadrature(0).is_err());
    }

    proptest! {
        #[test]
        fn shape_reproduces_linear_fields(a in 0.01f64..0.98, b in 0.01f64..0.98) {
            // Random interior point by barycentric folding.
            let (l1, l2) = if a + b < 1.0 { (a, b) } else { (1.0 - a, 1.0 - b) };
            let e = ElementGeometry::new([
                Point::new(-0.3, 0.2),
                Point::new(1.1, -0.4),
                Point::new(0.6, 1.3),
            ]);
            let x = e.vertices[0] * (1.0 - l1 - l2) + e.vertices[1] * l1 + e.vertices[2] * l2;
            let n = e.shape_eval(x).unwrap();
            prop_assert!((n[0] + n[1] + n[2] - 1.0).abs() < 1e-12);
            let rec = e.vertices[0] * n[0] + e.vertices[1] * n[1] + e.vertices[2] * n[2];
            prop_assert!((rec - x).norm() < 1e-12);
        }
    }

    #[test]
    fn edge_quadrature_and_orientation() {
        let e = EdgeGeometry::new(Point::new(0.0, 0.0), Point::new(2.0, 0.0));
        assert_relative_eq!(e.length, 2.0);
        let q = e.gauss2();
        assert_relative_eq!(q[0].1 + q[1].1, 2.0, epsilon = 1e-15);
        // int x over [0,2] = 2, exact for Gauss-2
        let ix: f64 = q.iter().map(|&(p, w)| w * p.x).sum();
        assert_relative_eq!(ix, 2.0, epsilon = 1e-14);
        // int x^3 = 4, still exact (degree 3)
        let ix3: f64 = q.iter().map(|&(p, w)| w * p.x * p.x * p.x).sum();
        assert_relative_eq!(ix3, 4.0, epsilon = 1e-13);
        let e = e.oriented_away_from(Point::new(1.0, 1.0));
        assert!(e.normal.y < 0.0);
        assert_relative_eq!(e.normal.norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn assemble_identity_and_overlap() {
        let b1 = LocalBlock {
            dofs: vec![0, 2],
            values: vec![1.0, 0.0, 0.0, 1.0],
        };
        let b2 = LocalBlock {
            dofs: vec![2, 3],
            values: vec![2.0, -1.0, -1.0, 2.0],
        };
        let a = assemble(4, vec![b1, b2]).unwrap();
        assert_eq!(a.get(0, 0), 1.0);
        assert_eq!(a.get(2, 2), 3.0); // overlapping entries accumulate
        assert_eq!(a.get(2, 3), -1.0);
        // out-of-range dof rejected
        let bad = LocalBlock {
            dofs: vec![5],
            values: vec![1.0],
        };
        assert!(assemble(4, vec![bad]).is_err());
    }

    #[test]
    fn assembled_mass_matches_mass_structure() {
        let mesh = build_background_mesh(
            Rect {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            },
            0.34,
        )
        .unwrap();
        let blocks: Vec<LocalBlock> = (0..mesh.n_triangles())
            .map(|t| {
                let area = mesh.triangle_area(t);
                let tri = mesh.triangles[t];
                let mut values = vec![0.0; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        values[a * 3 + b] = if a == b { area / 6.0 } else { area / 12.0 };
                    }
                }
                LocalBlock {
                    dofs: tri.to_vec(),
                    values,
                }
            })
            .collect();
        let assembled = assemble(mesh.n_nodes(), blocks).unwrap();
        let ms = mass_structure(&mesh, &mesh.all_elements(), ExecMode::Sequential).unwrap();
        for i in 0..mesh.n_nodes() {
            let (cols, vals) = assembled.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                assert_relative_eq!(v, ms.matrix().get(i, j), max_relative = 1e-13);
            }
        }
    }

    #[test]
    fn stiffness_harmonic_reproduction() {
        // Assembled P1 stiffness applied to the interpolant of u = x gives a
        // zero residual at interior nodes.
        let mesh = build_background_mesh(
            Rect {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            },
            0.25,
        )
        .unwrap();
        let blocks: Vec<LocalBlock> = (0..mesh.n_triangles())
            .map(|t| {
                let g = ElementGeometry::from_mesh(&mesh, t);
                let mut values = vec![0.0; 9];
                for a in 0..3 {
                    for b in 0..3 {
                        values[a * 3 + b] = g.area * g.grads[a].dot(&g.grads[b]);
                    }
                }
                LocalBlock {
                    dofs: mesh.triangles[t].to_vec(),
                    values,
                }
            })
            .collect();
        let k = assemble(mesh.n_nodes(), blocks).unwrap();
        let u: Vec<f64> = mesh.nodes.iter().map(|p| p.x).collect();
        let mut r = vec![0.0; mesh.n_nodes()];
        k.matvec(&u, &mut r);
        for (n, p) in mesh.nodes.iter().enumerate() {
            let interior = p.x > 1e-9 && p.x < 1.0 - 1e-9 && p.y > 1e-9 && p.y < 1.0 - 1e-9;
            if interior {
                assert!(r[n].abs() < 1e-13, "residual {} at node {}", r[n], n);
            }
        }
    }
}
