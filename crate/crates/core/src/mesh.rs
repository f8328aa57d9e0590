//! Fixed background triangulation of the rectangular channel.
//!
//! The mesh is a structured grid of nx x ny cells, each split into two
//! triangles along the SW-NE diagonal. It is built once and never changes
//! with the obstacle parameter; every geometry-dependent quantity lives in
//! [`crate::levelset::SurrogateDomain`] instead.
//!
//! Node ordering is row-major: node (i, j) has index `j * (nx + 1) + i`.
//! Cell (i, j) produces the lower triangle (sw, se, ne) and the upper
//! triangle (sw, ne, nw), both counter-clockwise.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::exec::{map_indexed, ExecMode};
use crate::sparse::{CsrMatrix, Triplets};
use crate::Result;

pub type Point = nalgebra::Vector2<f64>;

/// Axis-aligned channel bounds [x0, x1] x [y0, y1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: f64,
    pub x1: f64,
    pub y0: f64,
    pub y1: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }
}

/// Outer-boundary side of the channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryTag {
    Inflow,
    Outflow,
    WallTop,
    WallBottom,
}

/// Mesh edge with owning-triangle adjacency.
#[derive(Debug, Clone)]
pub struct MeshEdge {
    /// Endpoint node indices.
    pub nodes: [usize; 2],
    /// Owning triangles; interior edges have two, outer-boundary edges one.
    pub tris: [Option<usize>; 2],
    /// Side tag for outer-boundary edges, `None` for interior edges.
    pub tag: Option<BoundaryTag>,
}

#[derive(Debug, Clone)]
pub struct BackgroundMesh {
    pub bounds: Rect,
    pub nx: usize,
    pub ny: usize,
    pub nodes: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<MeshEdge>,
    /// Characteristic size: maximum over triangles of the longest edge.
    pub h: f64,
}

/// Builds the structured background mesh.
///
/// `nx = ceil(width / h_target)` cells per row (similarly `ny`), so the cell
/// size never exceeds `h_target`.
pub fn build_background_mesh(bounds: Rect, h_target: f64) -> Result<BackgroundMesh> {
    if !(bounds.x1 > bounds.x0) || !(bounds.y1 > bounds.y0) {
        return Err(Error::InvalidInput(format!(
            "degenerate bounds [{}, {}] x [{}, {}]",
            bounds.x0, bounds.x1, bounds.y0, bounds.y1
        )));
    }
    if !(h_target > 0.0) {
        return Err(Error::InvalidInput(format!(
            "non-positive target size {h_target}"
        )));
    }
    let nx = (bounds.width() / h_target).ceil() as usize;
    let ny = (bounds.height() / h_target).ceil() as usize;
    let nx = nx.max(1);
    let ny = ny.max(1);
    let dx = bounds.width() / nx as f64;
    let dy = bounds.height() / ny as f64;

    let node = |i: usize, j: usize| j * (nx + 1) + i;
    let mut nodes = Vec::with_capacity((nx + 1) * (ny + 1));
    for j in 0..=ny {
        // Boundary coordinates are exact so side detection can use indices.
        let y = if j == ny {
            bounds.y1
        } else {
            bounds.y0 + j as f64 * dy
        };
        for i in 0..=nx {
            let x = if i == nx {
                bounds.x1
            } else {
                bounds.x0 + i as f64 * dx
            };
            nodes.push(Point::new(x, y));
        }
    }

    let mut triangles = Vec::with_capacity(2 * nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            let (sw, se) = (node(i, j), node(i + 1, j));
            let (ne, nw) = (node(i + 1, j + 1), node(i, j + 1));
            triangles.push([sw, se, ne]);
            triangles.push([sw, ne, nw]);
        }
    }

    // Edge list in first-seen order for deterministic connectivity.
    let mut edge_of = std::collections::HashMap::new();
    let mut edges: Vec<MeshEdge> = Vec::new();
    for (t, tri) in triangles.iter().enumerate() {
        for k in 0..3 {
            let (a, b) = (tri[k], tri[(k + 1) % 3]);
            let key = (a.min(b), a.max(b));
            match edge_of.entry(key) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(edges.len());
                    edges.push(MeshEdge {
                        nodes: [key.0, key.1],
                        tris: [Some(t), None],
                        tag: None,
                    });
                }
                std::collections::hash_map::Entry::Occupied(e) => {
                    edges[*e.get()].tris[1] = Some(t);
                }
            }
        }
    }
    let grid_pos = |n: usize| (n % (nx + 1), n / (nx + 1));
    for e in &mut edges {
        if e.tris[1].is_some() {
            continue;
        }
        let (i0, j0) = grid_pos(e.nodes[0]);
        let (i1, j1) = grid_pos(e.nodes[1]);
        e.tag = if i0 == 0 && i1 == 0 {
            Some(BoundaryTag::Inflow)
        } else if i0 == nx && i1 == nx {
            Some(BoundaryTag::Outflow)
        } else if j0 == ny && j1 == ny {
            Some(BoundaryTag::WallTop)
        } else if j0 == 0 && j1 == 0 {
            Some(BoundaryTag::WallBottom)
        } else {
            None
        };
        debug_assert!(e.tag.is_some(), "untagged single-owner edge");
    }

    let mut h: f64 = 0.0;
    for tri in &triangles {
        for k in 0..3 {
            let len = (nodes[tri[(k + 1) % 3]] - nodes[tri[k]]).norm();
            h = h.max(len);
        }
    }

    Ok(BackgroundMesh {
        bounds,
        nx,
        ny,
        nodes,
        triangles,
        edges,
        h,
    })
}

impl BackgroundMesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t];
        let (p, q, r) = (self.nodes[a], self.nodes[b], self.nodes[c]);
        0.5 * ((q.x - p.x) * (r.y - p.y) - (r.x - p.x) * (q.y - p.y))
    }

    pub fn all_elements(&self) -> Vec<usize> {
        (0..self.n_triangles()).collect()
    }
}

/// Consistent P1 mass matrix restricted to an element subset, with the
/// subset's total measure. Gives exact L2 inner products of piecewise-linear
/// nodal fields over that subset.
#[derive(Debug, Clone)]
pub struct MassStructure {
    mass: CsrMatrix,
    pub total_measure: f64,
    n_nodes: usize,
}

pub fn mass_structure(
    mesh: &BackgroundMesh,
    elements: &[usize],
    mode: ExecMode,
) -> Result<MassStructure> {
    if elements.is_empty() {
        return Err(Error::InvalidInput(
            "mass structure over an empty element subset".into(),
        ));
    }
    let locals = map_indexed(mode, elements.len(), |k| {
        let t = elements[k];
        (mesh.triangles[t], mesh.triangle_area(t))
    });
    let mut trip = Triplets::with_capacity(9 * elements.len());
    let mut total = 0.0;
    for (tri, area) in locals {
        total += area;
        for a in 0..3 {
            for b in 0..3 {
                let m = if a == b { area / 6.0 } else { area / 12.0 };
                trip.push(tri[a], tri[b], m);
            }
        }
    }
    let mass = CsrMatrix::from_triplets(mesh.n_nodes(), mesh.n_nodes(), &trip)?;
    Ok(MassStructure {
        mass,
        total_measure: total,
        n_nodes: mesh.n_nodes(),
    })
}

impl MassStructure {
    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.mass
    }

    /// Exact integral of f*g over the subset for scalar nodal fields.
    pub fn inner_product(&self, f: &[f64], g: &[f64]) -> Result<f64> {
        self.inner_product_blocked(f, g, 1)
    }

    /// Inner product of node-blocked fields with `ncomp` interleaved
    /// components per node (ncomp = 2 for velocity).
    pub fn inner_product_blocked(&self, f: &[f64], g: &[f64], ncomp: usize) -> Result<f64> {
        let expected = self.n_nodes * ncomp;
        if f.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: f.len(),
            });
        }
        if g.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: g.len(),
            });
        }
        let mut acc = 0.0;
        for i in 0..self.n_nodes {
            let (cols, vals) = self.mass.row(i);
            for (&j, &m) in cols.iter().zip(vals) {
                for c in 0..ncomp {
                    acc += m * f[i * ncomp + c] * g[j * ncomp + c];
                }
            }
        }
        Ok(acc)
    }

    /// y = (M (x) I_ncomp) x for node-blocked fields.
    pub fn apply_blocked(&self, x: &[f64], ncomp: usize, y: &mut [f64]) {
        assert_eq!(x.len(), self.n_nodes * ncomp);
        assert_eq!(y.len(), self.n_nodes * ncomp);
        for i in 0..self.n_nodes {
            let (cols, vals) = self.mass.row(i);
            for c in 0..ncomp {
                let mut acc = 0.0;
                for (&j, &m) in cols.iter().zip(vals) {
                    acc += m * x[j * ncomp + c];
                }
                y[i * ncomp + c] = acc;
            }
        }
    }

    /// sqrt((f, f)) in this inner product.
    pub fn norm_blocked(&self, f: &[f64], ncomp: usize) -> Result<f64> {
        Ok(self.inner_product_blocked(f, f, ncomp)?.max(0.0).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_square(h: f64) -> BackgroundMesh {
        build_background_mesh(
            Rect {
                x0: 0.0,
                x1: 1.0,
                y0: 0.0,
                y1: 1.0,
            },
            h,
        )
        .unwrap()
    }

    #[test]
    fn minimal_grid_counts() {
        let m = unit_square(1.0);
        assert_eq!(m.n_triangles(), 2);
        assert_eq!(m.n_nodes(), 4);
    }

    #[test]
    fn channel_grid_counts() {
        // 8x4 cells expected from ceil(4/0.5), ceil(2/0.5).
        let m = build_background_mesh(
            Rect {
                x0: -2.0,
                x1: 2.0,
                y0: -1.0,
                y1: 1.0,
            },
            0.5,
        )
        .unwrap();
        assert_eq!((m.nx, m.ny), (8, 4));
        assert_eq!(m.n_triangles(), 64);
        assert_eq!(m.n_nodes(), 45);
        let area: f64 = (0..m.n_triangles()).map(|t| m.triangle_area(t)).sum();
        assert_relative_eq!(area, 8.0, max_relative = 1e-13);
    }

    #[test]
    fn triangles_positive_and_edges_consistent() {
        let m = build_background_mesh(
            Rect {
                x0: -2.0,
                x1: 2.0,
                y0: -1.0,
                y1: 1.0,
            },
            0.3,
        )
        .unwrap();
        for t in 0..m.n_triangles() {
            assert!(m.triangle_area(t) > 0.0);
        }
        let mut n_boundary = 0;
        for e in &m.edges {
            match (e.tris[0], e.tris[1]) {
                (Some(_), Some(_)) => assert!(e.tag.is_none()),
                (Some(_), None) => {
                    assert!(e.tag.is_some());
                    n_boundary += 1;
                }
                _ => panic!("edge without owner"),
            }
        }
        assert_eq!(n_boundary, 2 * (m.nx + m.ny));
        // h is the longest edge = cell diagonal.
        let dx = m.bounds.width() / m.nx as f64;
        let dy = m.bounds.height() / m.ny as f64;
        assert_relative_eq!(m.h, (dx * dx + dy * dy).sqrt(), max_relative = 1e-13);
    }

    #[test]
    fn deterministic_construction() {
        let b = Rect {
            x0: -2.0,
            x1: 2.0,
            y0: -1.0,
            y1: 1.0,
        };
        let m1 = build_background_mesh(b, 0.37).unwrap();
        let m2 = build_background_mesh(b, 0.37).unwrap();
        assert_eq!(m1.nodes, m2.nodes);
        assert_eq!(m1.triangles, m2.triangles);
        assert_eq!(
            m1.edges.iter().map(|e| e.nodes).collect::<Vec<_>>(),
            m2.edges.iter().map(|e| e.nodes).collect::<Vec<_>>()
        );
    }

    #[test]
    fn rejects_bad_input() {
        let b = Rect {
            x0: 0.0,
            x1: 0.0,
            y0: 0.0,
            y1: 1.0,
        };
        assert!(build_background_mesh(b, 0.1).is_err());
        let b = Rect {
            x0: 0.0,
            x1: 1.0,
            y0: 0.0,
            y1: 1.0,
        };
        assert!(build_background_mesh(b, 0.0).is_err());
        assert!(build_background_mesh(b, -1.0).is_err());
    }

    #[test]
    fn single_triangle_mass_entries() {
        let m = unit_square(1.0);
        let ms = mass_structure(&m, &[0], ExecMode::Sequential).unwrap();
        let area = m.triangle_area(0);
        let [a, b, c] = m.triangles[0];
        for &i in &[a, b, c] {
            assert_relative_eq!(ms.matrix().get(i, i), area / 6.0, max_relative = 1e-14);
        }
        assert_relative_eq!(ms.matrix().get(a, b), area / 12.0, max_relative = 1e-14);
        assert_relative_eq!(ms.total_measure, area, max_relative = 1e-14);
    }

    #[test]
    fn full_mesh_measure_and_integrals() {
        let m = unit_square(0.25);
        let ms = mass_structure(&m, &m.all_elements(), ExecMode::Sequential).unwrap();
        assert_relative_eq!(ms.total_measure, 1.0, max_relative = 1e-13);

        let ones = vec![1.0; m.n_nodes()];
        let xs: Vec<f64> = m.nodes.iter().map(|p| p.x).collect();
        let ys: Vec<f64> = m.nodes.iter().map(|p| p.y).collect();
        // measure, int x, and int x*y over the unit square; P1 interpolants
        // of x and y are exact so the consistent mass integrates exactly.
        assert_relative_eq!(ms.inner_product(&ones, &ones).unwrap(), 1.0, epsilon = 1e-13);
        assert_relative_eq!(ms.inner_product(&ones, &xs).unwrap(), 0.5, epsilon = 1e-13);
        assert_relative_eq!(ms.inner_product(&xs, &ys).unwrap(), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn random_subset_measure_matches_brute_force() {
        let m = build_background_mesh(
            Rect {
                x0: -2.0,
                x1: 2.0,
                y0: -1.0,
                y1: 1.0,
            },
            0.21,
        )
        .unwrap();
        // Take every third triangle as the subset.
        let subset: Vec<usize> = (0..m.n_triangles()).step_by(3).collect();
        let ms = mass_structure(&m, &subset, ExecMode::Parallel).unwrap();
        let brute: f64 = subset.iter().map(|&t| m.triangle_area(t)).sum();
        assert_relative_eq!(ms.total_measure, brute, max_relative = 1e-13);
    }

    #[test]
    fn mass_row_sums_are_lumped_areas() {
        let m = unit_square(0.5);
        let ms = mass_structure(&m, &m.all_elements(), ExecMode::Sequential).unwrap();
        let ones = vec![1.0; m.n_nodes()];
        let mut row_sums = vec![0.0; m.n_nodes()];
        ms.matrix().matvec(&ones, &mut row_sums);
        // Each row sum equals one third of the area of the node's star.
        let mut lumped = vec![0.0; m.n_nodes()];
        for t in 0..m.n_triangles() {
            let area = m.triangle_area(t);
            for &n in &m.triangles[t] {
                lumped[n] += area / 3.0;
            }
        }
        for i in 0..m.n_nodes() {
            assert_relative_eq!(row_sums[i], lumped[i], max_relative = 1e-13);
        }
    }

    #[test]
    fn inner_product_rejects_mismatch() {
        let m = unit_square(0.5);
        let ms = mass_structure(&m, &m.all_elements(), ExecMode::Sequential).unwrap();
        let short = vec![1.0; m.n_nodes() - 1];
        let ok = vec![1.0; m.n_nodes()];
        assert!(ms.inner_product(&short, &ok).is_err());
        assert!(ms.inner_product(&ok, &short).is_err());
    }

    #[test]
    fn empty_subset_rejected() {
        let m = unit_square(0.5);
        assert!(mass_structure(&m, &[], ExecMode::Sequential).is_err());
    }
}
