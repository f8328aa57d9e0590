//! Level-set representation of the parametrized rectangular obstacle and the
//! surrogate-domain classification built on top of it.
//!
//! Sign convention: the level set is negative inside the obstacle, positive
//! in the fluid. An element is active when all three vertices are strictly
//! on the fluid side; the surrogate boundary is the set of edges separating
//! active from inactive elements. Each surrogate quadrature point carries its
//! closest-point projection onto the true obstacle boundary, the distance
//! vector d, and the true normal there.

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::exec::{map_indexed, ExecMode};
use crate::fem::EdgeGeometry;
use crate::mesh::{BackgroundMesh, BoundaryTag, Point};
use crate::Result;

/// Axis-aligned rectangular obstacle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParamBox {
    pub center: [f64; 2],
    pub half_extents: [f64; 2],
}

impl ParamBox {
    pub fn new(center: [f64; 2], half_extents: [f64; 2]) -> Result<Self> {
        if !(half_extents[0] > 0.0) || !(half_extents[1] > 0.0) {
            return Err(Error::InvalidInput(format!(
                "non-positive box half extents ({}, {})",
                half_extents[0], half_extents[1]
            )));
        }
        Ok(ParamBox {
            center,
            half_extents,
        })
    }

    /// Exact signed distance to the rectangle boundary, negative inside.
    pub fn signed_distance(&self, p: Point) -> f64 {
        let qx = (p.x - self.center[0]).abs() - self.half_extents[0];
        let qy = (p.y - self.center[1]).abs() - self.half_extents[1];
        let outside = Point::new(qx.max(0.0), qy.max(0.0)).norm();
        outside + qx.max(qy).min(0.0)
    }

    /// Closest boundary point, distance vector d = x - p, and true normal at
    /// x, for a point on the fluid side. Points strictly inside the obstacle
    /// are rejected.
    pub fn closest_boundary_point(&self, p: Point) -> Result<(Point, Point, Point)> {
        if self.signed_distance(p) < -1e-12 * (self.half_extents[0] + self.half_extents[1]) {
            return Err(Error::InvalidInput(format!(
                "point ({}, {}) lies strictly inside the obstacle",
                p.x, p.y
            )));
        }
        Ok(self.closest_boundary_point_any(p))
    }

    /// Total closest-point map, defined for interior points as well so that
    /// classification stays robust when a quadrature point grazes a corner.
    pub fn closest_boundary_point_any(&self, p: Point) -> (Point, Point, Point) {
        let c = Point::new(self.center[0], self.center[1]);
        let w = Point::new(self.half_extents[0], self.half_extents[1]);
        let r = p - c;
        let sx = if r.x >= 0.0 { 1.0 } else { -1.0 };
        let sy = if r.y >= 0.0 { 1.0 } else { -1.0 };
        let qx = r.x.abs() - w.x;
        let qy = r.y.abs() - w.y;

        if qx > 0.0 && qy > 0.0 {
            // Corner region: project to the corner; the normal follows the
            // distance direction there.
            let x = c + Point::new(sx * w.x, sy * w.y);
            let d = x - p;
            let n = if d.norm() > 0.0 {
                d / d.norm()
            } else {
                Point::new(sx, sy) / 2.0_f64.sqrt()
            };
            return (x, d, n);
        }
        // Face regions (exterior slabs and interior): the nearest face is the
        // one with the largest slab coordinate; ties go to the x face.
        if qx >= qy {
            let x = Point::new(c.x + sx * w.x, p.y.clamp(c.y - w.y, c.y + w.y));
            (x, x - p, Point::new(sx, 0.0))
        } else {
            let x = Point::new(p.x.clamp(c.x - w.x, c.x + w.x), c.y + sy * w.y);
            (x, x - p, Point::new(0.0, sy))
        }
    }
}

/// Kind of boundary condition carried by a boundary segment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BcKind {
    Dirichlet,
    Neumann,
}

/// Experiment-specific rule mapping a parameter vector to an obstacle box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterMap {
    pub experiment: ExperimentId,
    /// Closed parameter ranges, one [lo, hi] per coordinate.
    pub ranges: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExperimentId {
    /// One parameter: a box of half extents (1, mu/4) centered on the bottom
    /// left corner (-2, -1) of the channel, so a quarter of it obstructs the
    /// inflow region.
    #[serde(rename = "exp1")]
    CornerBox1P,
    /// Three parameters (mu0, mu1, mu2): box centered at (mu0, 0) with half
    /// extents (mu1, mu2/4).
    #[serde(rename = "exp2")]
    MidBox3P,
}

impl ParameterMap {
    pub fn exp1() -> Self {
        ParameterMap {
            experiment: ExperimentId::CornerBox1P,
            ranges: vec![[1.0, 2.0]],
        }
    }

    pub fn exp2() -> Self {
        ParameterMap {
            experiment: ExperimentId::MidBox3P,
            ranges: vec![[-0.6, -0.5], [0.3, 0.4], [1.3, 1.4]],
        }
    }

    pub fn dim(&self) -> usize {
        self.ranges.len()
    }

    pub fn validate(&self) -> Result<()> {
        let expected = match self.experiment {
            ExperimentId::CornerBox1P => 1,
            ExperimentId::MidBox3P => 3,
        };
        if self.ranges.len() != expected {
            return Err(Error::Config(format!(
                "experiment expects {expected} parameter ranges, got {}",
                self.ranges.len()
            )));
        }
        for r in &self.ranges {
            if !(r[0] <= r[1]) {
                return Err(Error::Config(format!("empty parameter range [{}, {}]", r[0], r[1])));
            }
        }
        Ok(())
    }

    pub fn box_for(&self, mu: &[f64]) -> Result<ParamBox> {
        if mu.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: mu.len(),
            });
        }
        match self.experiment {
            ExperimentId::CornerBox1P => ParamBox::new([-2.0, -1.0], [1.0, mu[0] / 4.0]),
            ExperimentId::MidBox3P => ParamBox::new([mu[0], 0.0], [mu[1], mu[2] / 4.0]),
        }
    }
}

/// Per-quadrature-point record on a surrogate edge.
#[derive(Debug, Clone, Copy)]
pub struct SurrogateQp {
    /// Quadrature point on the surrogate edge.
    pub xt: Point,
    /// Closest point on the true obstacle boundary.
    pub x: Point,
    /// Distance vector x - xt.
    pub d: Point,
    /// True unit normal at x.
    pub n: Point,
    pub weight: f64,
}

/// Edge separating an active element from an inactive one.
#[derive(Debug, Clone)]
pub struct SurrogateEdge {
    /// Index into `mesh.edges`.
    pub edge: usize,
    /// The active element owning this edge.
    pub owner: usize,
    pub length: f64,
    /// Unit normal pointing out of the active side.
    pub normal: Point,
    pub qps: [SurrogateQp; 2],
    pub bc: BcKind,
}

/// Outer channel edge owned by an active element.
#[derive(Debug, Clone)]
pub struct OuterEdge {
    pub edge: usize,
    pub owner: usize,
    pub tag: BoundaryTag,
    pub length: f64,
    /// Outward unit normal of the channel.
    pub normal: Point,
    /// Quadrature points and weights; d = 0 on body-fitted edges.
    pub qps: [(Point, f64); 2],
}

/// Per-parameter classification of the background mesh.
#[derive(Debug, Clone)]
pub struct SurrogateDomain {
    pub obstacle: ParamBox,
    pub active_elements: Vec<usize>,
    pub inactive_elements: Vec<usize>,
    pub active_flags: Vec<bool>,
    /// Node belongs to at least one active element.
    pub active_nodes: Vec<bool>,
    pub surrogate_edges: Vec<SurrogateEdge>,
    pub outer_edges: Vec<OuterEdge>,
}

/// Classifies elements against the obstacle level set and builds the
/// surrogate boundary with its closest-point records.
pub fn classify(mesh: &BackgroundMesh, obstacle: ParamBox, mode: ExecMode) -> Result<SurrogateDomain> {
    let phi = map_indexed(mode, mesh.n_nodes(), |n| {
        obstacle.signed_distance(mesh.nodes[n])
    });
    let active_flags = map_indexed(mode, mesh.n_triangles(), |t| {
        mesh.triangles[t].iter().all(|&n| phi[n] > 0.0)
    });
    let active_elements: Vec<usize> = (0..mesh.n_triangles()).filter(|&t| active_flags[t]).collect();
    if active_elements.is_empty() {
        return Err(Error::DegenerateDomain);
    }
    let inactive_elements: Vec<usize> =
        (0..mesh.n_triangles()).filter(|&t| !active_flags[t]).collect();

    let mut active_nodes = vec![false; mesh.n_nodes()];
    for &t in &active_elements {
        for &n in &mesh.triangles[t] {
            active_nodes[n] = true;
        }
    }

    let centroid = |t: usize| -> Point {
        let [a, b, c] = mesh.triangles[t];
        (mesh.nodes[a] + mesh.nodes[b] + mesh.nodes[c]) / 3.0
    };

    let mut surrogate_edges = Vec::new();
    let mut outer_edges = Vec::new();
    for (e, edge) in mesh.edges.iter().enumerate() {
        match edge.tris {
            [Some(t0), Some(t1)] => {
                if active_flags[t0] == active_flags[t1] {
                    continue;
                }
                let owner = if active_flags[t0] { t0 } else { t1 };
                let geo = EdgeGeometry::new(mesh.nodes[edge.nodes[0]], mesh.nodes[edge.nodes[1]])
                    .oriented_away_from(centroid(owner));
                let qps = geo.gauss2().map(|(xt, weight)| {
                    let (x, d, n) = obstacle.closest_boundary_point_any(xt);
                    SurrogateQp {
                        xt,
                        x,
                        d,
                        n,
                        weight,
                    }
                });
                surrogate_edges.push(SurrogateEdge {
                    edge: e,
                    owner,
                    length: geo.length,
                    normal: geo.normal,
                    qps,
                    bc: BcKind::Dirichlet,
                });
            }
            [Some(t0), None] => {
                if !active_flags[t0] {
                    continue;
                }
                let geo = EdgeGeometry::new(mesh.nodes[edge.nodes[0]], mesh.nodes[edge.nodes[1]])
                    .oriented_away_from(centroid(t0));
                outer_edges.push(OuterEdge {
                    edge: e,
                    owner: t0,
                    tag: edge.tag.expect("outer edge without tag"),
                    length: geo.length,
                    normal: geo.normal,
                    qps: geo.gauss2(),
                });
            }
            _ => unreachable!("edge without owner"),
        }
    }

    Ok(SurrogateDomain {
        obstacle,
        active_elements,
        inactive_elements,
        active_flags,
        active_nodes,
        surrogate_edges,
        outer_edges,
    })
}

/// Tags every surrogate edge with the boundary-condition kind of the true
/// boundary segment its closest-point image lies on, by majority over the
/// edge's quadrature points (midpoint image breaks ties). Returns the tags
/// and stores them on the edges.
pub fn partition_surrogate_dirichlet<F>(
    domain: &mut SurrogateDomain,
    classify_point: F,
) -> Result<Vec<BcKind>>
where
    F: Fn(Point) -> Option<BcKind>,
{
    let mut tags = Vec::with_capacity(domain.surrogate_edges.len());
    for se in &mut domain.surrogate_edges {
        let mut votes = [0usize; 2];
        for qp in &se.qps {
            match classify_point(qp.x) {
                Some(BcKind::Dirichlet) => votes[0] += 1,
                Some(BcKind::Neumann) => votes[1] += 1,
                None => {
                    return Err(Error::Config(format!(
                        "surrogate point ({}, {}) maps to an untagged boundary segment",
                        qp.x.x, qp.x.y
                    )))
                }
            }
        }
        let kind = if votes[0] != votes[1] {
            if votes[0] > votes[1] {
                BcKind::Dirichlet
            } else {
                BcKind::Neumann
            }
        } else {
            let mid = (se.qps[0].xt + se.qps[1].xt) * 0.5;
            let (x, _, _) = domain.obstacle.closest_boundary_point_any(mid);
            classify_point(x).ok_or_else(|| {
                Error::Config("edge midpoint maps to an untagged boundary segment".into())
            })?
        };
        se.bc = kind;
        tags.push(kind);
    }
    Ok(tags)
}
