//! Full-order Navier-Stokes solver on the surrogate domain.
//!
//! The residual collects, over active elements, the Galerkin convection,
//! viscous, pressure and continuity terms plus SUPG/PSPG stabilization, and,
//! over boundary edges, the shifted-Nitsche Dirichlet terms (consistency,
//! adjoint, penalty, inflow and the continuity flux with the Taylor shift
//! `u + (grad u) d - g`), traction/backflow terms on outflow edges, and
//! normal-only Nitsche slip terms on the walls. Inactive nodes keep their
//! dofs: each carries an identity row tying it to the smooth ghost extension
//! of the boundary trace, so the global dof set is parameter independent and
//! Newton iterates come out extension-consistent.
//!
//! The Jacobian is the exact derivative of the residual with two deliberate
//! exceptions: the stabilization time tau and the inflow/backflow indicator
//! sets are frozen per Newton step (see [`Freeze`]), so the assembled matrix
//! is the exact derivative of the frozen-coefficient residual.

use crate::error::Error;
use crate::exec::{map_indexed, ExecMode};
use crate::fem::{triangle_quadrature, ElementGeometry, DOFS_PER_NODE};
use crate::levelset::{BcKind, SurrogateDomain, SurrogateQp};
use crate::mesh::{BackgroundMesh, BoundaryTag, Point};
use crate::sparse::{CsrMatrix, SparseLu, Triplets};
use crate::Result;

pub type Mat2 = nalgebra::Matrix2<f64>;

#[derive(Debug, Clone, Copy)]
pub struct FluidParams {
    pub density: f64,
    pub viscosity: f64,
    pub body_force: [f64; 2],
}

impl Default for FluidParams {
    fn default() -> Self {
        FluidParams {
            density: 1.0,
            viscosity: 1.0,
            body_force: [0.0, 0.0],
        }
    }
}

impl FluidParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.density > 0.0) || !(self.viscosity > 0.0) {
            return Err(Error::InvalidInput(format!(
                "non-positive fluid parameters rho = {}, nu = {}",
                self.density, self.viscosity
            )));
        }
        Ok(())
    }
}

/// Boundary data: constant x-velocity at the inflow, no slip on the obstacle,
/// prescribed (zero by default) traction at the outflow, no penetration on
/// the walls.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryData {
    pub u_in: f64,
    pub g_neumann: [f64; 2],
}

impl Default for BoundaryData {
    fn default() -> Self {
        BoundaryData {
            u_in: 1.0,
            g_neumann: [0.0, 0.0],
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct StabilizationParams {
    /// Nitsche penalty; the boundary terms scale with `gamma * nu / h`.
    pub gamma: f64,
    /// tau = 1 / (c1 nu / h_K^2 + c2 |u| / h_K)
    pub c1: f64,
    pub c2: f64,
}

impl Default for StabilizationParams {
    fn default() -> Self {
        StabilizationParams {
            gamma: 10.0,
            c1: 4.0,
            c2: 2.0,
        }
    }
}

impl StabilizationParams {
    pub fn tau(&self, viscosity: f64, h_k: f64, speed: f64) -> f64 {
        1.0 / (self.c1 * viscosity / (h_k * h_k) + self.c2 * speed / h_k)
    }
}

/// Per-term switches, mainly for oracle tests and the Stokes limit. All terms
/// are on by default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermFlags {
    pub convection: bool,
    pub viscous: bool,
    pub pressure: bool,
    pub continuity: bool,
    pub body_force: bool,
    pub supg: bool,
    pub pspg: bool,
    pub nitsche_flux: bool,
    pub nitsche_adjoint: bool,
    pub nitsche_penalty: bool,
    pub dirichlet_inflow: bool,
    pub continuity_bdry: bool,
    pub neumann: bool,
    pub backflow: bool,
    pub wall_slip: bool,
    pub ghost_rows: bool,
}

impl Default for TermFlags {
    fn default() -> Self {
        Self::all()
    }
}

impl TermFlags {
    pub fn all() -> Self {
        TermFlags {
            convection: true,
            viscous: true,
            pressure: true,
            continuity: true,
            body_force: true,
            supg: true,
            pspg: true,
            nitsche_flux: true,
            nitsche_adjoint: true,
            nitsche_penalty: true,
            dirichlet_inflow: true,
            continuity_bdry: true,
            neumann: true,
            backflow: true,
            wall_slip: true,
            ghost_rows: true,
        }
    }

    pub fn none() -> Self {
        TermFlags {
            convection: false,
            viscous: false,
            pressure: false,
            continuity: false,
            body_force: false,
            supg: false,
            pspg: false,
            nitsche_flux: false,
            nitsche_adjoint: false,
            nitsche_penalty: false,
            dirichlet_inflow: false,
            continuity_bdry: false,
            neumann: false,
            backflow: false,
            wall_slip: false,
            ghost_rows: false,
        }
    }

    /// Stokes limit: every convective operator disabled.
    pub fn stokes() -> Self {
        TermFlags {
            convection: false,
            supg: false,
            dirichlet_inflow: false,
            backflow: false,
            ..Self::all()
        }
    }
}

/// Full-order coefficient vector, 3 dofs per background node (ux, uy, p).
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub dofs: Vec<f64>,
}

impl State {
    pub fn zeros(n_nodes: usize) -> Self {
        State {
            dofs: vec![0.0; DOFS_PER_NODE * n_nodes],
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.dofs.len() / DOFS_PER_NODE
    }

    #[inline]
    pub fn velocity(&self, node: usize) -> Point {
        Point::new(self.dofs[3 * node], self.dofs[3 * node + 1])
    }

    #[inline]
    pub fn pressure(&self, node: usize) -> f64 {
        self.dofs[3 * node + 2]
    }

    pub fn is_finite(&self) -> bool {
        self.dofs.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct NewtonSettings {
    pub tol_rel: f64,
    pub max_iter: usize,
    /// Absolute floor below which the residual counts as converged even when
    /// the relative criterion cannot trigger (exact initial guesses).
    pub tol_abs: f64,
}

impl Default for NewtonSettings {
    fn default() -> Self {
        NewtonSettings {
            tol_rel: 1e-10,
            max_iter: 25,
            tol_abs: 1e-11,
        }
    }
}

/// Full Newton history; snapshots are drawn from here.
#[derive(Debug, Clone)]
pub struct NewtonTrace {
    /// U0..Un, with Uk = Uk-1 + dUk.
    pub iterates: Vec<State>,
    /// dU1..dUn.
    pub increments: Vec<Vec<f64>>,
    /// |R(U0)|..|R(Un)| in the Euclidean norm.
    pub residual_norms: Vec<f64>,
    pub converged: bool,
}

/// Frozen per-step coefficients: stabilization times per active element and
/// the inflow/backflow indicator sets per boundary quadrature point. The
/// Jacobian is exact for the residual assembled with the same freeze.
#[derive(Debug, Clone)]
pub struct Freeze {
    pub tau: Vec<f64>,
    pub surr_inflow: Vec<[bool; 2]>,
    pub outer_inflow: Vec<[bool; 2]>,
    pub outer_backflow: Vec<[bool; 2]>,
}

/// Linear map from active boundary traces to inactive-node values: each
/// inactive node takes the trace at its nearest surrogate quadrature point,
/// scaled by max(0, 1 - s / (band_factor * h)) where s is the level-set
/// distance of the node to the obstacle boundary.
#[derive(Debug, Clone)]
pub struct GhostExtension {
    rows: Vec<GhostRow>,
}

#[derive(Debug, Clone)]
struct GhostRow {
    node: usize,
    decay: f64,
    /// Nodes of the active element owning the nearest surrogate edge.
    trace_nodes: [usize; 3],
    shape: [f64; 3],
}

impl GhostExtension {
    pub fn build(mesh: &BackgroundMesh, surrogate: &SurrogateDomain, band_factor: f64) -> Self {
        let band = band_factor * mesh.h;
        let mut rows = Vec::new();
        for node in 0..mesh.n_nodes() {
            if surrogate.active_nodes[node] {
                continue;
            }
            let p = mesh.nodes[node];
            let s = surrogate.obstacle.signed_distance(p).abs();
            let decay = (1.0 - s / band).max(0.0);
            if decay == 0.0 || surrogate.surrogate_edges.is_empty() {
                rows.push(GhostRow {
                    node,
                    decay: 0.0,
                    trace_nodes: [0; 3],
                    shape: [0.0; 3],
                });
                continue;
            }
            let mut best = (f64::INFINITY, 0usize, Point::new(0.0, 0.0));
            for (k, se) in surrogate.surrogate_edges.iter().enumerate() {
                for qp in &se.qps {
                    let dist = (qp.xt - p).norm();
                    if dist < best.0 {
                        best = (dist, k, qp.xt);
                    }
                }
            }
            let owner = surrogate.surrogate_edges[best.1].owner;
            let geo = ElementGeometry::from_mesh(mesh, owner);
            rows.push(GhostRow {
                node,
                decay,
                trace_nodes: mesh.triangles[owner],
                shape: geo.barycentric(best.2),
            });
        }
        GhostExtension { rows }
    }

    /// Number of inactive nodes covered by the extension.
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Extension value of dof component `c` at a covered node.
    fn value(&self, row: &GhostRow, c: usize, u: &State) -> f64 {
        if row.decay == 0.0 {
            return 0.0;
        }
        let mut acc = 0.0;
        for a in 0..3 {
            acc += row.shape[a] * u.dofs[DOFS_PER_NODE * row.trace_nodes[a] + c];
        }
        row.decay * acc
    }

    /// Returns a copy of `u` with inactive-node entries replaced by their
    /// extension values; active entries are untouched.
    pub fn apply(&self, u: &State) -> State {
        let mut out = u.clone();
        for row in &self.rows {
            for c in 0..DOFS_PER_NODE {
                out.dofs[DOFS_PER_NODE * row.node + c] = self.value(row, c, u);
            }
        }
        out
    }
}

const QUAD_ORDER: usize = 2;

/// Assembles residuals and Jacobians of the stabilized flow problem for one
/// obstacle geometry.
pub struct NsAssembler<'a> {
    pub mesh: &'a BackgroundMesh,
    pub surrogate: &'a SurrogateDomain,
    pub fluid: FluidParams,
    pub bc: BoundaryData,
    pub stab: StabilizationParams,
    pub flags: TermFlags,
    pub exec: ExecMode,
    elem_geo: Vec<ElementGeometry>,
    active_pos: Vec<usize>,
    ghost: GhostExtension,
}

struct Local {
    nodes: [usize; 3],
    r: [f64; 9],
    j: Option<Box<[f64; 81]>>,
}

impl Local {
    fn new(nodes: [usize; 3], want_j: bool) -> Self {
        Local {
            nodes,
            r: [0.0; 9],
            j: if want_j {
                Some(Box::new([0.0; 81]))
            } else {
                None
            },
        }
    }

    #[inline]
    fn add_j(&mut self, row: usize, col: usize, v: f64) {
        if let Some(j) = self.j.as_deref_mut() {
            j[9 * row + col] += v;
        }
    }
}

impl<'a> NsAssembler<'a> {
    pub fn new(
        mesh: &'a BackgroundMesh,
        surrogate: &'a SurrogateDomain,
        fluid: FluidParams,
        bc: BoundaryData,
        stab: StabilizationParams,
        band_factor: f64,
        exec: ExecMode,
    ) -> Result<Self> {
        fluid.validate()?;
        if !(stab.gamma > 0.0) {
            return Err(Error::InvalidInput("non-positive Nitsche penalty".into()));
        }
        let elem_geo = map_indexed(exec, surrogate.active_elements.len(), |k| {
            ElementGeometry::from_mesh(mesh, surrogate.active_elements[k])
        });
        let mut active_pos = vec![usize::MAX; mesh.n_triangles()];
        for (k, &t) in surrogate.active_elements.iter().enumerate() {
            active_pos[t] = k;
        }
        let ghost = GhostExtension::build(mesh, surrogate, band_factor);
        Ok(NsAssembler {
            mesh,
            surrogate,
            fluid,
            bc,
            stab,
            flags: TermFlags::all(),
            exec,
            elem_geo,
            active_pos,
            ghost,
        })
    }

    pub fn n_dofs(&self) -> usize {
        DOFS_PER_NODE * self.mesh.n_nodes()
    }

    pub fn ghost_extension(&self) -> &GhostExtension {
        &self.ghost
    }

    /// Smooth continuation of the state into the inactive region.
    pub fn extend_to_ghost(&self, u: &State) -> State {
        self.ghost.apply(u)
    }

    /// Freezes tau and the indicator sets at the given state.
    pub fn freeze_at(&self, u: &State) -> Freeze {
        let nu = self.fluid.viscosity;
        let tau = map_indexed(self.exec, self.surrogate.active_elements.len(), |k| {
            let t = self.surrogate.active_elements[k];
            let [a, b, c] = self.mesh.triangles[t];
            let mean = (u.velocity(a) + u.velocity(b) + u.velocity(c)) / 3.0;
            self.stab.tau(nu, self.elem_geo[k].diameter(), mean.norm())
        });

        let surr_inflow = self
            .surrogate
            .surrogate_edges
            .iter()
            .map(|se| {
                let k = self.active_pos[se.owner];
                let grad_u = self.grad_u_of(k, u);
                let mut flags = [false; 2];
                for (q, qp) in se.qps.iter().enumerate() {
                    let g = Point::new(0.0, 0.0); // no slip on the obstacle
                    flags[q] = (g - grad_u * qp.d).dot(&se.normal) < 0.0;
                }
                flags
            })
            .collect();

        let mut outer_inflow = Vec::with_capacity(self.surrogate.outer_edges.len());
        let mut outer_backflow = Vec::with_capacity(self.surrogate.outer_edges.len());
        for oe in &self.surrogate.outer_edges {
            let mut inflow = [false; 2];
            let mut backflow = [false; 2];
            for (q, &(xq, _)) in oe.qps.iter().enumerate() {
                match oe.tag {
                    BoundaryTag::Inflow => {
                        let g = Point::new(self.bc.u_in, 0.0);
                        inflow[q] = g.dot(&oe.normal) < 0.0;
                    }
                    BoundaryTag::Outflow => {
                        let k = self.active_pos[oe.owner];
                        let geo = &self.elem_geo[k];
                        let n = geo.barycentric(xq);
                        let nodes = self.mesh.triangles[oe.owner];
                        let uq = u.velocity(nodes[0]) * n[0]
                            + u.velocity(nodes[1]) * n[1]
                            + u.velocity(nodes[2]) * n[2];
                        backflow[q] = uq.dot(&oe.normal) < 0.0;
                    }
                    _ => {}
                }
            }
            outer_inflow.push(inflow);
            outer_backflow.push(backflow);
        }

        Freeze {
            tau,
            surr_inflow,
            outer_inflow,
            outer_backflow,
        }
    }

    fn grad_u_of(&self, active_idx: usize, u: &State) -> Mat2 {
        let t = self.surrogate.active_elements[active_idx];
        let nodes = self.mesh.triangles[t];
        let geo = &self.elem_geo[active_idx];
        let mut g = Mat2::zeros();
        for a in 0..3 {
            let ua = u.velocity(nodes[a]);
            let ga = geo.grads[a];
            g[(0, 0)] += ua.x * ga.x;
            g[(0, 1)] += ua.x * ga.y;
            g[(1, 0)] += ua.y * ga.x;
            g[(1, 1)] += ua.y * ga.y;
        }
        g
    }

    pub fn residual(&self, u: &State, freeze: &Freeze) -> Result<Vec<f64>> {
        Ok(self.assemble(u, freeze, false)?.0)
    }

    pub fn jacobian(&self, u: &State, freeze: &Freeze) -> Result<CsrMatrix> {
        Ok(self.assemble(u, freeze, true)?.1.unwrap())
    }

    /// Assembles the residual and optionally the Jacobian in one pass.
    /// Local contributions are computed in parallel and merged in a fixed
    /// order, so results do not depend on the execution mode.
    pub fn assemble(
        &self,
        u: &State,
        freeze: &Freeze,
        want_j: bool,
    ) -> Result<(Vec<f64>, Option<CsrMatrix>)> {
        if !u.is_finite() {
            return Err(Error::InvalidInput("non-finite state".into()));
        }
        if u.dofs.len() != self.n_dofs() {
            return Err(Error::DimensionMismatch {
                expected: self.n_dofs(),
                got: u.dofs.len(),
            });
        }

        let n_active = self.surrogate.active_elements.len();
        let elem_locals = map_indexed(self.exec, n_active, |k| {
            self.element_kernel(k, u, freeze.tau[k], want_j)
        });
        let surr_locals = map_indexed(self.exec, self.surrogate.surrogate_edges.len(), |k| {
            self.surrogate_edge_kernel(k, u, &freeze.surr_inflow[k], want_j)
        });
        let outer_locals = map_indexed(self.exec, self.surrogate.outer_edges.len(), |k| {
            self.outer_edge_kernel(
                k,
                u,
                &freeze.outer_inflow[k],
                &freeze.outer_backflow[k],
                want_j,
            )
        });

        let mut r = vec![0.0; self.n_dofs()];
        let cap = 81 * (n_active + surr_locals.len() + outer_locals.len())
            + 4 * DOFS_PER_NODE * self.ghost.len();
        let mut trip = Triplets::with_capacity(if want_j { cap } else { 0 });
        for local in elem_locals
            .iter()
            .chain(surr_locals.iter())
            .chain(outer_locals.iter())
        {
            self.scatter(local, &mut r, want_j.then_some(&mut trip));
        }

        if self.flags.ghost_rows {
            for row in &self.ghost.rows {
                for c in 0..DOFS_PER_NODE {
                    let dof = DOFS_PER_NODE * row.node + c;
                    r[dof] += u.dofs[dof] - self.ghost.value(row, c, u);
                    if want_j {
                        trip.push(dof, dof, 1.0);
                        if row.decay != 0.0 {
                            for a in 0..3 {
                                trip.push(
                                    dof,
                                    DOFS_PER_NODE * row.trace_nodes[a] + c,
                                    -row.decay * row.shape[a],
                                );
                            }
                        }
                    }
                }
            }
        }

        let j = if want_j {
            Some(CsrMatrix::from_triplets(self.n_dofs(), self.n_dofs(), &trip)?)
        } else {
            None
        };
        Ok((r, j))
    }

    fn scatter(&self, local: &Local, r: &mut [f64], trip: Option<&mut Triplets>) {
        let dof = |a: usize, c: usize| DOFS_PER_NODE * local.nodes[a] + c;
        for a in 0..3 {
            for c in 0..3 {
                r[dof(a, c)] += local.r[3 * a + c];
            }
        }
        if let (Some(trip), Some(j)) = (trip, local.j.as_deref()) {
            for a in 0..3 {
                for ca in 0..3 {
                    let row = dof(a, ca);
                    for b in 0..3 {
                        for cb in 0..3 {
                            let v = j[9 * (3 * a + ca) + (3 * b + cb)];
                            if v != 0.0 {
                                trip.push(row, dof(b, cb), v);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Galerkin + SUPG/PSPG volume terms on one active element.
    fn element_kernel(&self, k: usize, u: &State, tau: f64, want_j: bool) -> Local {
        let t = self.surrogate.active_elements[k];
        let nodes = self.mesh.triangles[t];
        let geo = &self.elem_geo[k];
        let mut local = Local::new(nodes, want_j);

        let rho = self.fluid.density;
        let nu = self.fluid.viscosity;
        let g_body = Point::new(self.fluid.body_force[0], self.fluid.body_force[1]);
        let f = self.flags;

        let un = [
            u.velocity(nodes[0]),
            u.velocity(nodes[1]),
            u.velocity(nodes[2]),
        ];
        let pn = [
            u.pressure(nodes[0]),
            u.pressure(nodes[1]),
            u.pressure(nodes[2]),
        ];
        let grads = geo.grads;
        let mut grad_u = Mat2::zeros();
        let mut grad_p = Point::new(0.0, 0.0);
        for a in 0..3 {
            grad_u[(0, 0)] += un[a].x * grads[a].x;
            grad_u[(0, 1)] += un[a].x * grads[a].y;
            grad_u[(1, 0)] += un[a].y * grads[a].x;
            grad_u[(1, 1)] += un[a].y * grads[a].y;
            grad_p += grads[a] * pn[a];
        }
        let div_u = grad_u.trace();
        let eps = (grad_u + grad_u.transpose()) * 0.5;

        for &(nsh, w_ref) in triangle_quadrature(QUAD_ORDER).unwrap() {
            let w = w_ref * 2.0 * geo.area;
            let uq = un[0] * nsh[0] + un[1] * nsh[1] + un[2] * nsh[2];
            let pq = pn[0] * nsh[0] + pn[1] * nsh[1] + pn[2] * nsh[2];
            let conv = grad_u * uq;
            let mut r_m = grad_p / rho - g_body;
            if f.convection {
                r_m += conv;
            }

            for a in 0..3 {
                let ga = grads[a];
                let ua_dot = uq.dot(&ga); // u . grad(N_a)
                for i in 0..2 {
                    let li = 3 * a + i;
                    if f.convection {
                        local.r[li] += w * rho * nsh[a] * conv[i];
                    }
                    if f.body_force {
                        local.r[li] -= w * rho * nsh[a] * g_body[i];
                    }
                    if f.viscous {
                        local.r[li] +=
                            w * 2.0 * nu * (eps[(i, 0)] * ga.x + eps[(i, 1)] * ga.y);
                    }
                    if f.pressure {
                        local.r[li] -= w * pq * ga[i];
                    }
                    if f.supg {
                        local.r[li] += w * rho * tau * ua_dot * r_m[i];
                    }
                }
                if f.continuity {
                    local.r[3 * a + 2] -= w * nsh[a] * div_u;
                }
                // PSPG carries a minus: the continuity row is -(q, div u), so
                // the pressure relaxation -tau (grad q, grad p) must deepen the
                // (negative) Schur complement rather than cancel it.
                if f.pspg {
                    local.r[3 * a + 2] -= w * tau * ga.dot(&r_m);
                }
            }

            if !want_j {
                continue;
            }
            for a in 0..3 {
                let ga = grads[a];
                let ua_dot = uq.dot(&ga);
                for b in 0..3 {
                    let gb = grads[b];
                    let ub_dot = uq.dot(&gb);
                    for i in 0..2 {
                        for kk in 0..2 {
                            // d conv[i] / d u_{b,kk} = N_b dU[i][kk] + (u.gb) delta_ik
                            let dconv =
                                nsh[b] * grad_u[(i, kk)] + if i == kk { ub_dot } else { 0.0 };
                            let drm = if f.convection { dconv } else { 0.0 };
                            let mut v = 0.0;
                            if f.convection {
                                v += w * rho * nsh[a] * dconv;
                            }
                            if f.viscous {
                                v += w * nu
                                    * (if i == kk { ga.dot(&gb) } else { 0.0 } + ga[kk] * gb[i]);
                            }
                            if f.supg {
                                v += w * rho * tau * (nsh[b] * ga[kk] * r_m[i] + ua_dot * drm);
                            }
                            local.add_j(3 * a + i, 3 * b + kk, v);
                        }
                        // momentum vs pressure
                        let mut v = 0.0;
                        if f.pressure {
                            v -= w * nsh[b] * ga[i];
                        }
                        if f.supg {
                            v += w * tau * ua_dot * gb[i];
                        }
                        local.add_j(3 * a + i, 3 * b + 2, v);
                        // continuity vs velocity
                        let mut v = 0.0;
                        if f.continuity {
                            v -= w * nsh[a] * gb[i];
                        }
                        if f.pspg && f.convection {
                            let drm_dot = nsh[b]
                                * (ga.x * grad_u[(0, i)] + ga.y * grad_u[(1, i)])
                                + ub_dot * ga[i];
                            v -= w * tau * drm_dot;
                        }
                        local.add_j(3 * a + 2, 3 * b + i, v);
                    }
                    // continuity vs pressure (PSPG relaxation)
                    if f.pspg {
                        local.add_j(3 * a + 2, 3 * b + 2, -w * tau * ga.dot(&gb) / rho);
                    }
                }
            }
        }
        local
    }

    /// Shifted-Nitsche Dirichlet terms at one boundary quadrature point.
    ///
    /// `qp.d` is the distance vector to the true boundary (zero on
    /// body-fitted edges); `inflow` is the frozen indicator of the inflow
    /// part of the Dirichlet boundary, where the Taylor shift is dropped
    /// from the penalty/adjoint/flux mismatch but kept in the inflow term.
    #[allow(clippy::too_many_arguments)]
    fn dirichlet_qp(
        &self,
        local: &mut Local,
        geo: &ElementGeometry,
        u: &State,
        qp: &SurrogateQp,
        normal: Point,
        g_d: Point,
        inflow: bool,
        want_j: bool,
    ) {
        let rho = self.fluid.density;
        let nu = self.fluid.viscosity;
        let pen = self.stab.gamma * nu / self.mesh.h;
        let f = self.flags;
        let nodes = local.nodes;
        let w = qp.weight;

        let nsh = geo.barycentric(qp.xt);
        let grads = geo.grads;
        let un = [
            u.velocity(nodes[0]),
            u.velocity(nodes[1]),
            u.velocity(nodes[2]),
        ];
        let pn = [
            u.pressure(nodes[0]),
            u.pressure(nodes[1]),
            u.pressure(nodes[2]),
        ];
        let mut grad_u = Mat2::zeros();
        for a in 0..3 {
            grad_u[(0, 0)] += un[a].x * grads[a].x;
            grad_u[(0, 1)] += un[a].x * grads[a].y;
            grad_u[(1, 0)] += un[a].y * grads[a].x;
            grad_u[(1, 1)] += un[a].y * grads[a].y;
        }
        let eps = (grad_u + grad_u.transpose()) * 0.5;
        let uq = un[0] * nsh[0] + un[1] * nsh[1] + un[2] * nsh[2];
        let pq = pn[0] * nsh[0] + pn[1] * nsh[1] + pn[2] * nsh[2];

        let chi = if inflow { 0.0 } else { 1.0 };
        let gd = [
            grads[0].dot(&qp.d),
            grads[1].dot(&qp.d),
            grads[2].dot(&qp.d),
        ];
        // shifted shapes: S(u) = sum_b T_b u_b - g
        let tsh = [
            nsh[0] + chi * gd[0],
            nsh[1] + chi * gd[1],
            nsh[2] + chi * gd[2],
        ];
        let tsh_full = [nsh[0] + gd[0], nsh[1] + gd[1], nsh[2] + gd[2]];
        let gu_d = grad_u * qp.d;
        let s = uq + gu_d * chi - g_d;
        let s_full = uq + gu_d - g_d;
        let beta = (g_d - gu_d).dot(&normal);
        let eps_n = eps * normal;

        for a in 0..3 {
            let ga = grads[a];
            let ga_n = ga.dot(&normal);
            let ga_s = ga.dot(&s);
            for i in 0..2 {
                let li = 3 * a + i;
                if f.nitsche_flux {
                    local.r[li] -= w * nsh[a] * (2.0 * nu * eps_n[i] - pq * normal[i]);
                }
                if f.nitsche_adjoint {
                    local.r[li] -= w * nu * (ga_n * s[i] + normal[i] * ga_s);
                }
                if f.nitsche_penalty {
                    local.r[li] += w * pen * tsh[a] * s[i];
                }
                if f.dirichlet_inflow && inflow {
                    local.r[li] -= w * rho * beta * nsh[a] * s_full[i];
                }
            }
            if f.continuity_bdry {
                local.r[3 * a + 2] += w * nsh[a] * s.dot(&normal);
            }
        }

        if !want_j {
            return;
        }
        for a in 0..3 {
            let ga = grads[a];
            let ga_n = ga.dot(&normal);
            for b in 0..3 {
                let gb = grads[b];
                let gb_n = gb.dot(&normal);
                for i in 0..2 {
                    for kk in 0..2 {
                        let mut v = 0.0;
                        if f.nitsche_flux {
                            v -= w
                                * nsh[a]
                                * nu
                                * (if i == kk { gb_n } else { 0.0 } + gb[i] * normal[kk]);
                        }
                        if f.nitsche_adjoint {
                            v -= w * nu
                                * (if i == kk { ga_n * tsh[b] } else { 0.0 }
                                    + normal[i] * ga[kk] * tsh[b]);
                        }
                        if f.nitsche_penalty && i == kk {
                            v += w * pen * tsh[a] * tsh[b];
                        }
                        if f.dirichlet_inflow && inflow {
                            // beta varies with the state through -(grad u) d . n
                            v -= w * rho
                                * nsh[a]
                                * (-gd[b] * normal[kk] * s_full[i]
                                    + if i == kk { beta * tsh_full[b] } else { 0.0 });
                        }
                        local.add_j(3 * a + i, 3 * b + kk, v);
                    }
                    if f.nitsche_flux {
                        local.add_j(3 * a + i, 3 * b + 2, w * nsh[a] * nsh[b] * normal[i]);
                    }
                    if f.continuity_bdry {
                        local.add_j(3 * a + 2, 3 * b + i, w * nsh[a] * tsh[b] * normal[i]);
                    }
                }
            }
        }
    }

    /// Neumann data and backflow stabilization at one outflow point.
    #[allow(clippy::too_many_arguments)]
    fn neumann_qp(
        &self,
        local: &mut Local,
        geo: &ElementGeometry,
        u: &State,
        xq: Point,
        w: f64,
        normal: Point,
        backflow: bool,
        want_j: bool,
    ) {
        let rho = self.fluid.density;
        let f = self.flags;
        let nodes = local.nodes;
        let nsh = geo.barycentric(xq);
        let un = [
            u.velocity(nodes[0]),
            u.velocity(nodes[1]),
            u.velocity(nodes[2]),
        ];
        let uq = un[0] * nsh[0] + un[1] * nsh[1] + un[2] * nsh[2];
        let u_n = uq.dot(&normal);
        let g_n = Point::new(self.bc.g_neumann[0], self.bc.g_neumann[1]);

        for a in 0..3 {
            for i in 0..2 {
                let li = 3 * a + i;
                if f.neumann {
                    local.r[li] -= w * nsh[a] * g_n[i];
                }
                if f.backflow && backflow {
                    local.r[li] -= w * rho * nsh[a] * u_n * uq[i];
                }
            }
        }
        if want_j && f.backflow && backflow {
            for a in 0..3 {
                for b in 0..3 {
                    for i in 0..2 {
                        for kk in 0..2 {
                            let v = -w
                                * rho
                                * nsh[a]
                                * nsh[b]
                                * (normal[kk] * uq[i] + if i == kk { u_n } else { 0.0 });
                            local.add_j(3 * a + i, 3 * b + kk, v);
                        }
                    }
                }
            }
        }
    }

    /// Normal-only Nitsche terms enforcing no penetration on a wall point.
    #[allow(clippy::too_many_arguments)]
    fn wall_qp(
        &self,
        local: &mut Local,
        geo: &ElementGeometry,
        u: &State,
        xq: Point,
        w: f64,
        normal: Point,
        want_j: bool,
    ) {
        if !self.flags.wall_slip {
            return;
        }
        let nu = self.fluid.viscosity;
        let pen = self.stab.gamma * nu / self.mesh.h;
        let nodes = local.nodes;
        let nsh = geo.barycentric(xq);
        let grads = geo.grads;
        let un = [
            u.velocity(nodes[0]),
            u.velocity(nodes[1]),
            u.velocity(nodes[2]),
        ];
        let pn = [
            u.pressure(nodes[0]),
            u.pressure(nodes[1]),
            u.pressure(nodes[2]),
        ];
        let mut grad_u = Mat2::zeros();
        for a in 0..3 {
            grad_u[(0, 0)] += un[a].x * grads[a].x;
            grad_u[(0, 1)] += un[a].x * grads[a].y;
            grad_u[(1, 0)] += un[a].y * grads[a].x;
            grad_u[(1, 1)] += un[a].y * grads[a].y;
        }
        let eps = (grad_u + grad_u.transpose()) * 0.5;
        let uq = un[0] * nsh[0] + un[1] * nsh[1] + un[2] * nsh[2];
        let pq = pn[0] * nsh[0] + pn[1] * nsh[1] + pn[2] * nsh[2];
        let u_n = uq.dot(&normal);
        let sig_nn = 2.0 * nu * normal.dot(&(eps * normal)) - pq;

        for a in 0..3 {
            let ga_n = grads[a].dot(&normal);
            for i in 0..2 {
                let li = 3 * a + i;
                local.r[li] -= w * nsh[a] * normal[i] * sig_nn;
                local.r[li] -= w * 2.0 * nu * normal[i] * ga_n * u_n;
                local.r[li] += w * pen * nsh[a] * normal[i] * u_n;
            }
            local.r[3 * a + 2] += w * nsh[a] * u_n;
        }
        if !want_j {
            return;
        }
        for a in 0..3 {
            let ga_n = grads[a].dot(&normal);
            for b in 0..3 {
                let gb_n = grads[b].dot(&normal);
                for i in 0..2 {
                    for kk in 0..2 {
                        let mut v = 0.0;
                        v -= w * nsh[a] * normal[i] * 2.0 * nu * normal[kk] * gb_n;
                        v -= w * 2.0 * nu * normal[i] * ga_n * nsh[b] * normal[kk];
                        v += w * pen * nsh[a] * nsh[b] * normal[i] * normal[kk];
                        local.add_j(3 * a + i, 3 * b + kk, v);
                    }
                    local.add_j(3 * a + i, 3 * b + 2, w * nsh[a] * nsh[b] * normal[i]);
                    local.add_j(3 * a + 2, 3 * b + i, w * nsh[a] * nsh[b] * normal[i]);
                }
            }
        }
    }

    fn surrogate_edge_kernel(
        &self,
        k: usize,
        u: &State,
        inflow: &[bool; 2],
        want_j: bool,
    ) -> Local {
        let se = &self.surrogate.surrogate_edges[k];
        let nodes = self.mesh.triangles[se.owner];
        let geo = &self.elem_geo[self.active_pos[se.owner]];
        let mut local = Local::new(nodes, want_j);
        match se.bc {
            BcKind::Dirichlet => {
                for (q, qp) in se.qps.iter().enumerate() {
                    // no slip on the obstacle
                    self.dirichlet_qp(
                        &mut local,
                        geo,
                        u,
                        qp,
                        se.normal,
                        Point::new(0.0, 0.0),
                        inflow[q],
                        want_j,
                    );
                }
            }
            BcKind::Neumann => {
                // Neumann data evaluated at the surrogate point itself.
                for qp in &se.qps {
                    self.neumann_qp(
                        &mut local, geo, u, qp.xt, qp.weight, se.normal, false, want_j,
                    );
                }
            }
        }
        local
    }

    fn outer_edge_kernel(
        &self,
        k: usize,
        u: &State,
        inflow: &[bool; 2],
        backflow: &[bool; 2],
        want_j: bool,
    ) -> Local {
        let oe = &self.surrogate.outer_edges[k];
        let nodes = self.mesh.triangles[oe.owner];
        let geo = &self.elem_geo[self.active_pos[oe.owner]];
        let mut local = Local::new(nodes, want_j);
        for (q, &(xq, w)) in oe.qps.iter().enumerate() {
            match oe.tag {
                BoundaryTag::Inflow => {
                    // body fitted: d = 0, the edge normal is the true normal
                    let qp = SurrogateQp {
                        xt: xq,
                        x: xq,
                        d: Point::new(0.0, 0.0),
                        n: oe.normal,
                        weight: w,
                    };
                    let g = Point::new(self.bc.u_in, 0.0);
                    self.dirichlet_qp(&mut local, geo, u, &qp, oe.normal, g, inflow[q], want_j);
                }
                BoundaryTag::Outflow => {
                    self.neumann_qp(&mut local, geo, u, xq, w, oe.normal, backflow[q], want_j);
                }
                BoundaryTag::WallTop | BoundaryTag::WallBottom => {
                    self.wall_qp(&mut local, geo, u, xq, w, oe.normal, want_j);
                }
            }
        }
        local
    }

    /// Newton iteration from the zero state.
    pub fn newton_solve(&self, settings: &NewtonSettings) -> Result<NewtonTrace> {
        self.newton_solve_from(State::zeros(self.mesh.n_nodes()), settings)
    }

    /// Newton iteration from a given initial state (e.g. a neighbor
    /// parameter's converged solution). Non-convergence flags the trace
    /// instead of erroring; singular linear systems are errors carrying the
    /// iteration index.
    pub fn newton_solve_from(
        &self,
        initial: State,
        settings: &NewtonSettings,
    ) -> Result<NewtonTrace> {
        let mut u = initial;
        let mut freeze = self.freeze_at(&u);
        let mut r = self.residual(&u, &freeze)?;
        let r0 = norm2(&r);
        let tol = (settings.tol_rel * r0).max(settings.tol_abs);

        let mut trace = NewtonTrace {
            iterates: vec![u.clone()],
            increments: Vec::new(),
            residual_norms: vec![r0],
            converged: r0 <= tol,
        };
        if trace.converged {
            return Ok(trace);
        }

        let mut rn_prev = r0;
        for it in 1..=settings.max_iter {
            let j = self.jacobian(&u, &freeze)?;
            let lu = SparseLu::factorize(&j).map_err(|e| at_iteration(e, it))?;
            let neg_r: Vec<f64> = r.iter().map(|v| -v).collect();
            let delta = lu.solve(&neg_r).map_err(|e| at_iteration(e, it))?;

            // Backtracking on |R|: the shifted inflow and backflow terms are
            // superquadratic in the state, so full steps can explode during
            // transients. Deterministic halving, best trial kept as fallback.
            let mut accepted: Option<(f64, State, Freeze, Vec<f64>, f64)> = None;
            let mut best: Option<(f64, State, Freeze, Vec<f64>, f64)> = None;
            let mut alpha = 1.0;
            for _ in 0..=12 {
                let mut trial = u.clone();
                for (ti, di) in trial.dofs.iter_mut().zip(&delta) {
                    *ti += alpha * di;
                }
                if trial.is_finite() {
                    let fz_t = self.freeze_at(&trial);
                    let r_t = self.residual(&trial, &fz_t)?;
                    let rn_t = norm2(&r_t);
                    if rn_t.is_finite() {
                        if rn_t < (1.0 - 1e-4 * alpha) * rn_prev {
                            accepted = Some((alpha, trial, fz_t, r_t, rn_t));
                            break;
                        }
                        if best.as_ref().map_or(true, |b| rn_t < b.4) {
                            best = Some((alpha, trial, fz_t, r_t, rn_t));
                        }
                    }
                }
                alpha *= 0.5;
            }
            let Some((alpha, trial, fz_t, r_t, rn_t)) = accepted.or(best) else {
                // every trial was non-finite; give up flagged
                break;
            };
            let step: Vec<f64> = delta.iter().map(|d| alpha * d).collect();
            u = trial;
            freeze = fz_t;
            r = r_t;
            rn_prev = rn_t;
            trace.increments.push(step);
            trace.iterates.push(u.clone());
            trace.residual_norms.push(rn_t);
            if rn_t <= tol {
                trace.converged = true;
                break;
            }
        }
        Ok(trace)
    }
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::LinearSolve { reason, .. } => Error::LinearSolve {
            iteration: it,
            reason,
        },
        other => other,
    }
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
