//! Heat semigroup of the Kirchhoff Laplacian on a meshed metric graph.
//!
//! Linear finite elements on each edge subinterval give the stiffness
//! matrix `K` of the form `Q`; summing vertex rows over incident edges is
//! exactly the Kirchhoff condition, since it is the natural condition of
//! the form. With the lumped mass `M` the semi-discrete problem is
//! `M u' = -K u`, whose solution operator is positivity preserving and,
//! under reflecting truncation, mass conserving.
//!
//! The operator norm `‖e^{-At}‖_{L¹→L∞}` equals the supremum of the kernel
//! diagonal: by the semigroup property and symmetry,
//! `k(t,x,y) = ∫ k(t/2,x,z) k(t/2,z,y) dz ≤ √(k(t,x,x) k(t,y,y))`, so the
//! largest kernel value is attained on the diagonal.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sprs::{CsMat, TriMat};
use thiserror::Error;

use crate::functions::{FormSpec, FunctionError, GraphFunction, Mesh};
use crate::skeleton::{boundary_clearance, GraphPoint, SkeletonError};

/// Explanation of the diagonal reduction, included in reports.
pub const DIAGONAL_REDUCTION: &str = "sup_x k(t,x,x) equals the L1->Linf norm: \
k(t,x,y) = int k(t/2,x,z) k(t/2,z,y) dz <= sqrt(k(t,x,x) k(t,y,y)) by symmetry and Cauchy-Schwarz";

#[derive(Debug, Error)]
pub enum SemigroupError {
    #[error("time must be nonnegative and finite, got {0}")]
    InvalidTime(f64),
    #[error("times must be nondecreasing")]
    UnsortedTimes,
    #[error("Krylov scheme failed to converge at t = {time}: residual estimate {residual:e}")]
    KrylovNotConverged { time: f64, residual: f64 },
    #[error("conjugate gradients stalled with relative residual {0:e}")]
    CgNotConverged(f64),
    #[error("consistent mass is only available with the Crank-Nicolson scheme")]
    ConsistentMassNeedsCn,
    #[error("time step must be positive, got {0}")]
    InvalidStep(f64),
    #[error("Krylov dimension must be at least 2, got {0}")]
    InvalidDimension(usize),
    #[error("function lives on a different mesh")]
    MeshMismatch,
    #[error(transparent)]
    Function(#[from] FunctionError),
    #[error(transparent)]
    Graph(#[from] SkeletonError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Truncation {
    /// Natural (Neumann) condition at clipped boundary vertices.
    #[default]
    Reflecting,
    /// Boundary vertices held at zero.
    Absorbing,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassMatrix {
    #[default]
    Lumped,
    Consistent,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AssemblyOptions {
    pub form: FormSpec,
    pub truncation: Truncation,
    pub mass: MassMatrix,
}

impl AssemblyOptions {
    pub fn reflecting() -> Self {
        Self::default()
    }

    pub fn absorbing() -> Self {
        Self {
            truncation: Truncation::Absorbing,
            ..Self::default()
        }
    }

    pub fn with_form(mut self, form: FormSpec) -> Self {
        self.form = form;
        self
    }

    pub fn with_mass(mut self, mass: MassMatrix) -> Self {
        self.mass = mass;
        self
    }
}

#[derive(Debug)]
pub struct DiscreteLaplacian {
    mesh: Arc<Mesh>,
    options: AssemblyOptions,
    stiffness: CsMat<f64>,
    lumped: Vec<f64>,
    consistent: Option<CsMat<f64>>,
    absorbed: Vec<bool>,
}

pub fn assemble(mesh: &Arc<Mesh>, options: &AssemblyOptions) -> Result<DiscreteLaplacian, SemigroupError> {
    let g = mesh.graph();
    options.form.validate(g)?;
    let n = mesh.dof_count();
    let mut absorbed = vec![false; n];
    if options.truncation == Truncation::Absorbing {
        for v in g.boundary_vertices() {
            absorbed[v] = true;
        }
    }
    let mut k = TriMat::new((n, n));
    let mut lumped = vec![0.0; n];
    let mut consistent = (options.mass == MassMatrix::Consistent).then(|| TriMat::new((n, n)));
    for e in 0..g.edge_count() {
        let h = mesh.step(e);
        let w = options.form.conductivity(e) / h;
        for j in 0..mesh.subdivisions(e) {
            let (a, b) = (mesh.node_dof(e, j), mesh.node_dof(e, j + 1));
            lumped[a] += 0.5 * h;
            lumped[b] += 0.5 * h;
            if let Some(c) = consistent.as_mut() {
                c.add_triplet(a, a, h / 3.0);
                c.add_triplet(b, b, h / 3.0);
                c.add_triplet(a, b, h / 6.0);
                c.add_triplet(b, a, h / 6.0);
            }
            if absorbed[a] && absorbed[b] {
                continue;
            }
            if absorbed[a] {
                k.add_triplet(b, b, w);
            } else if absorbed[b] {
                k.add_triplet(a, a, w);
            } else {
                k.add_triplet(a, a, w);
                k.add_triplet(b, b, w);
                k.add_triplet(a, b, -w);
                k.add_triplet(b, a, -w);
            }
        }
    }
    if let Some(b) = &options.form.robin {
        for (v, &bv) in b.iter().enumerate() {
            if bv != 0.0 && !absorbed[v] {
                k.add_triplet(v, v, bv);
            }
        }
    }
    Ok(DiscreteLaplacian {
        mesh: Arc::clone(mesh),
        options: options.clone(),
        stiffness: k.to_csr(),
        lumped,
        consistent: consistent.map(|c| c.to_csr()),
        absorbed,
    })
}

fn csr_apply(m: &CsMat<f64>, x: &[f64], y: &mut [f64]) {
    y.iter_mut().for_each(|v| *v = 0.0);
    sprs::prod::mul_acc_mat_vec_csr(m.view(), x, y);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sup(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

impl DiscreteLaplacian {
    pub fn mesh(&self) -> &Arc<Mesh> {
        &self.mesh
    }

    pub fn options(&self) -> &AssemblyOptions {
        &self.options
    }

    pub fn stiffness(&self) -> &CsMat<f64> {
        &self.stiffness
    }

    pub fn lumped_mass(&self) -> &[f64] {
        &self.lumped
    }

    pub fn consistent_mass(&self) -> Option<&CsMat<f64>> {
        self.consistent.as_ref()
    }

    pub fn dof_count(&self) -> usize {
        self.lumped.len()
    }

    pub fn is_absorbed(&self, dof: usize) -> bool {
        self.absorbed[dof]
    }

    pub fn apply_stiffness(&self, x: &[f64], y: &mut [f64]) {
        csr_apply(&self.stiffness, x, y);
    }

    /// `∫ u` with the lumped (equivalently trapezoidal) quadrature.
    pub fn mass_of(&self, u: &[f64]) -> f64 {
        dot(&self.lumped, u)
    }

    /// Initial data with absorbed dofs zeroed.
    fn admissible(&self, f0: &GraphFunction) -> Result<Vec<f64>, SemigroupError> {
        if !Arc::ptr_eq(f0.mesh(), &self.mesh) {
            return Err(SemigroupError::MeshMismatch);
        }
        let mut u = f0.values().to_vec();
        for (v, a) in u.iter_mut().zip(&self.absorbed) {
            if *a {
                *v = 0.0;
            }
        }
        Ok(u)
    }

    /// Discrete delta at the mesh node nearest `source`: unit mass, value
    /// `1 / m_i` at that node.
    pub fn delta(&self, source: GraphPoint) -> Result<(GraphFunction, usize), SemigroupError> {
        self.mesh.graph().check_point(source)?;
        let dof = self.mesh.nearest_dof(source);
        let mut values = vec![0.0; self.dof_count()];
        values[dof] = 1.0 / self.lumped[dof];
        Ok((GraphFunction::from_values(&self.mesh, values)?, dof))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum Scheme {
    /// Crank–Nicolson with time step `dt`; `None` starts at `mesh²/4` and
    /// halves until two successive runs differ by less than `1e-8`
    /// (relative to the largest reported value).
    CrankNicolson { dt: Option<f64> },
    /// Lanczos approximation of the exponential on Krylov spaces of the
    /// given dimension, with adaptive substeps.
    Krylov { dimension: usize, tolerance: f64 },
}

impl Default for Scheme {
    fn default() -> Self {
        Self::krylov()
    }
}

impl Scheme {
    pub fn krylov() -> Self {
        Scheme::Krylov {
            dimension: 40,
            tolerance: 1e-12,
        }
    }

    pub fn crank_nicolson() -> Self {
        Scheme::CrankNicolson { dt: None }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheme::CrankNicolson { .. } => "crank_nicolson",
            Scheme::Krylov { .. } => "krylov",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub initial: String,
    pub scheme: Scheme,
    /// Time steps (Crank–Nicolson) or Krylov substeps taken from `t = 0`.
    pub steps: usize,
    /// Final Crank–Nicolson step, when applicable.
    pub dt: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct HeatState {
    pub function: GraphFunction,
    pub time: f64,
    pub provenance: Provenance,
    /// Scheme-reported error estimate in the sup norm, when available.
    pub error_estimate: Option<f64>,
}

/// `e^{-At} f0`.
pub fn evolve(l: &DiscreteLaplacian, f0: &GraphFunction, t: f64, scheme: &Scheme) -> Result<HeatState, SemigroupError> {
    evolve_labelled(l, f0, &[t], scheme, "custom").map(|mut v| v.remove(0))
}

/// `e^{-At} f0` at each of the nondecreasing `times`, along one trajectory.
pub fn evolve_to_times(
    l: &DiscreteLaplacian,
    f0: &GraphFunction,
    times: &[f64],
    scheme: &Scheme,
) -> Result<Vec<HeatState>, SemigroupError> {
    evolve_labelled(l, f0, times, scheme, "custom")
}

fn evolve_labelled(
    l: &DiscreteLaplacian,
    f0: &GraphFunction,
    times: &[f64],
    scheme: &Scheme,
    label: &str,
) -> Result<Vec<HeatState>, SemigroupError> {
    if let Some(&t) = times.iter().find(|t| !(**t >= 0.0 && t.is_finite())) {
        return Err(SemigroupError::InvalidTime(t));
    }
    if times.windows(2).any(|w| w[1] < w[0]) {
        return Err(SemigroupError::UnsortedTimes);
    }
    let u0 = l.admissible(f0)?;
    let (trajectory, steps, estimates, dt) = match *scheme {
        Scheme::CrankNicolson { dt } => cn_adaptive(l, &u0, times, dt)?,
        Scheme::Krylov { dimension, tolerance } => {
            if l.consistent.is_some() {
                return Err(SemigroupError::ConsistentMassNeedsCn);
            }
            let (traj, steps, est) = krylov_trajectory(l, &u0, times, dimension, tolerance)?;
            (traj, steps, est, None)
        }
    };
    trajectory
        .into_iter()
        .zip(times)
        .zip(steps.into_iter().zip(estimates))
        .map(|((u, &t), (steps, error_estimate))| {
            Ok(HeatState {
                function: GraphFunction::from_values(&l.mesh, u)?,
                time: t,
                provenance: Provenance {
                    initial: label.to_string(),
                    scheme: *scheme,
                    steps,
                    dt,
                },
                error_estimate,
            })
        })
        .collect()
}

type Trajectory = (Vec<Vec<f64>>, Vec<usize>, Vec<Option<f64>>, Option<f64>);

fn cn_adaptive(l: &DiscreteLaplacian, u0: &[f64], times: &[f64], dt: Option<f64>) -> Result<Trajectory, SemigroupError> {
    if let Some(dt) = dt {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(SemigroupError::InvalidStep(dt));
        }
        let (traj, steps) = cn_trajectory(l, u0, times, dt)?;
        let n = traj.len();
        return Ok((traj, steps, vec![None; n], Some(dt)));
    }
    const MAX_HALVINGS: usize = 8;
    let mut dt = l.mesh.mesh_size().powi(2) / 4.0;
    let (mut coarse, _) = cn_trajectory(l, u0, times, dt)?;
    for halving in 0.. {
        let (fine, steps) = cn_trajectory(l, u0, times, dt / 2.0)?;
        let scale = fine.iter().map(|u| sup(u)).fold(f64::MIN_POSITIVE, f64::max);
        let diffs: Vec<f64> = coarse
            .iter()
            .zip(&fine)
            .map(|(a, b)| a.iter().zip(b).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs())))
            .collect();
        dt /= 2.0;
        if diffs.iter().all(|d| *d < 1e-8 * scale) || halving + 1 == MAX_HALVINGS {
            return Ok((fine, steps, diffs.into_iter().map(Some).collect(), Some(dt)));
        }
        coarse = fine;
    }
    unreachable!()
}

/// Crank–Nicolson from `t = 0` through `times`, with each interval split
/// into equal steps no longer than `dt`.
fn cn_trajectory(l: &DiscreteLaplacian, u0: &[f64], times: &[f64], dt: f64) -> Result<(Vec<Vec<f64>>, Vec<usize>), SemigroupError> {
    let n = l.dof_count();
    let mut u = u0.to_vec();
    let mut now = 0.0;
    let mut total_steps = 0;
    let mut out = Vec::with_capacity(times.len());
    let mut steps_out = Vec::with_capacity(times.len());
    let mut ku = vec![0.0; n];
    let mut rhs = vec![0.0; n];
    for &target in times {
        let span = target - now;
        if span > 0.0 {
            let steps = (span / dt * (1.0 - 1e-12)).ceil().max(1.0) as usize;
            let h = span / steps as f64;
            let system = CnSystem::new(l, h);
            for _ in 0..steps {
                l.apply_stiffness(&u, &mut ku);
                system.apply_mass(&u, &mut rhs);
                for (r, k) in rhs.iter_mut().zip(&ku) {
                    *r -= 0.5 * h * k;
                }
                system.solve(&rhs, &mut u)?;
            }
            total_steps += steps;
            now = target;
        }
        out.push(u.clone());
        steps_out.push(total_steps);
    }
    Ok((out, steps_out))
}

/// `M + (h/2) K` with a Jacobi-preconditioned conjugate gradient solver.
struct CnSystem<'a> {
    l: &'a DiscreteLaplacian,
    half_step: f64,
    inverse_diagonal: Vec<f64>,
}

impl<'a> CnSystem<'a> {
    fn new(l: &'a DiscreteLaplacian, h: f64) -> Self {
        let half_step = 0.5 * h;
        let kd = l.stiffness.diag();
        let mut diagonal: Vec<f64> = match &l.consistent {
            Some(c) => {
                let cd = c.diag();
                let mut d = vec![0.0; l.dof_count()];
                for (i, v) in cd.iter() {
                    d[i] = *v;
                }
                d
            }
            None => l.lumped.clone(),
        };
        for (i, v) in kd.iter() {
            diagonal[i] += half_step * v;
        }
        Self {
            l,
            half_step,
            inverse_diagonal: diagonal.iter().map(|d| 1.0 / d).collect(),
        }
    }

    fn apply_mass(&self, x: &[f64], y: &mut [f64]) {
        match &self.l.consistent {
            Some(c) => csr_apply(c, x, y),
            None => {
                for ((yi, xi), m) in y.iter_mut().zip(x).zip(&self.l.lumped) {
                    *yi = m * xi;
                }
            }
        }
    }

    fn apply(&self, x: &[f64], y: &mut [f64], scratch: &mut [f64]) {
        self.apply_mass(x, y);
        self.l.apply_stiffness(x, scratch);
        for (yi, s) in y.iter_mut().zip(scratch.iter()) {
            *yi += self.half_step * s;
        }
    }

    /// Solves in place, using `x` as the initial guess.
    fn solve(&self, b: &[f64], x: &mut [f64]) -> Result<(), SemigroupError> {
        let n = b.len();
        let b_norm = norm(b);
        if b_norm == 0.0 {
            x.iter_mut().for_each(|v| *v = 0.0);
            return Ok(());
        }
        let mut scratch = vec![0.0; n];
        let mut ax = vec![0.0; n];
        self.apply(x, &mut ax, &mut scratch);
        let mut r: Vec<f64> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
        let mut z: Vec<f64> = r.iter().zip(&self.inverse_diagonal).map(|(r, d)| r * d).collect();
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        let mut ap = vec![0.0; n];
        let tol = 1e-14 * b_norm;
        for _ in 0..(10 * n).max(100) {
            if norm(&r) <= tol {
                return Ok(());
            }
            self.apply(&p, &mut ap, &mut scratch);
            let alpha = rz / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * ap[i];
            }
            for i in 0..n {
                z[i] = r[i] * self.inverse_diagonal[i];
            }
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        let rel = norm(&r) / b_norm;
        if rel <= 1e-10 {
            Ok(())
        } else {
            Err(SemigroupError::CgNotConverged(rel))
        }
    }
}

/// Orthonormal Lanczos basis of the symmetrized operator.
struct Lanczos {
    basis: Vec<Vec<f64>>,
    eigenvalues: Vec<f64>,
    /// Eigenvectors of the tridiagonal matrix, column-major by eigenvalue.
    eigenvectors: DMatrix<f64>,
    /// Norm of the residual vector after the last step; zero on breakdown.
    beta_next: f64,
}

fn lanczos(apply: &impl Fn(&[f64], &mut [f64]), start: &[f64], dimension: usize) -> Lanczos {
    let n = start.len();
    let m = dimension.min(n);
    let mut basis: Vec<Vec<f64>> = vec![start.to_vec()];
    let mut alphas: Vec<f64> = Vec::with_capacity(m);
    let mut betas: Vec<f64> = Vec::with_capacity(m);
    let mut w = vec![0.0; n];
    let mut beta_next = 0.0;
    for j in 0..m {
        apply(&basis[j], &mut w);
        let alpha = dot(&basis[j], &w);
        alphas.push(alpha);
        // Two passes of full reorthogonalization.
        for _ in 0..2 {
            for v in &basis {
                let c = dot(v, &w);
                for (wi, vi) in w.iter_mut().zip(v) {
                    *wi -= c * vi;
                }
            }
        }
        let beta = norm(&w);
        let scale = alpha.abs().max(betas.last().copied().unwrap_or(0.0)).max(f64::MIN_POSITIVE);
        if beta <= 1e-13 * scale {
            beta_next = 0.0;
            break;
        }
        beta_next = beta;
        if j + 1 < m {
            betas.push(beta);
            basis.push(w.iter().map(|x| x / beta).collect());
        }
    }
    let k = alphas.len();
    basis.truncate(k);
    let tri = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alphas[i]
        } else if i + 1 == j {
            betas[i]
        } else if j + 1 == i {
            betas[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(tri);
    Lanczos {
        basis,
        eigenvalues: eig.eigenvalues.iter().copied().collect(),
        eigenvectors: eig.eigenvectors,
        beta_next,
    }
}

impl Lanczos {
    /// Coefficients of `exp(-τT) e₁` and the residual-integral error
    /// estimate (per unit of starting norm).
    fn step(&self, tau: f64) -> (Vec<f64>, f64) {
        let k = self.eigenvalues.len();
        let q = &self.eigenvectors;
        let weights: Vec<f64> = (0..k).map(|j| (-tau * self.eigenvalues[j]).exp() * q[(0, j)]).collect();
        let coeffs = (0..k).map(|i| (0..k).map(|j| q[(i, j)] * weights[j]).sum()).collect();
        let integral: f64 = (0..k)
            .map(|j| {
                let lambda = self.eigenvalues[j];
                let phi = if (tau * lambda).abs() < 1e-12 { tau } else { -(-tau * lambda).exp_m1() / lambda };
                q[(k - 1, j)] * q[(0, j)] * phi
            })
            .sum();
        (coeffs, self.beta_next * integral.abs())
    }

    fn combine(&self, coeffs: &[f64], scale: f64, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for (c, v) in coeffs.iter().zip(&self.basis) {
            let c = c * scale;
            for (o, vi) in out.iter_mut().zip(v) {
                *o += c * vi;
            }
        }
    }
}

/// Adaptive Lanczos integration of `w' = -B w` with
/// `B = M^{-1/2} K M^{-1/2}` and `w = M^{1/2} u`.
fn krylov_trajectory(
    l: &DiscreteLaplacian,
    u0: &[f64],
    times: &[f64],
    dimension: usize,
    tolerance: f64,
) -> Result<(Vec<Vec<f64>>, Vec<usize>, Vec<Option<f64>>), SemigroupError> {
    if dimension < 2 {
        return Err(SemigroupError::InvalidDimension(dimension));
    }
    let n = l.dof_count();
    let root: Vec<f64> = l.lumped.iter().map(|m| m.sqrt()).collect();
    let inv_root: Vec<f64> = root.iter().map(|r| 1.0 / r).collect();
    let apply = |x: &[f64], y: &mut [f64]| {
        let scaled: Vec<f64> = x.iter().zip(&inv_root).map(|(a, b)| a * b).collect();
        l.apply_stiffness(&scaled, y);
        for (yi, s) in y.iter_mut().zip(&inv_root) {
            *yi *= s;
        }
    };
    let mut w: Vec<f64> = u0.iter().zip(&root).map(|(a, b)| a * b).collect();
    let start_norm = norm(&w);
    let horizon = times.last().copied().unwrap_or(0.0).max(f64::MIN_POSITIVE);
    let mut now = 0.0;
    let mut substeps = 0usize;
    let mut tau = horizon;
    let mut error_total = 0.0;
    let mut out = Vec::with_capacity(times.len());
    let mut steps_out = Vec::with_capacity(times.len());
    let mut estimates = Vec::with_capacity(times.len());
    let mut next = vec![0.0; n];
    for &target in times {
        while now < target {
            let beta0 = norm(&w);
            if beta0 == 0.0 {
                now = target;
                break;
            }
            let start: Vec<f64> = w.iter().map(|x| x / beta0).collect();
            let basis = lanczos(&apply, &start, dimension);
            let remaining = target - now;
            tau = tau.min(remaining);
            let mut accepted = None;
            for _ in 0..200 {
                let (coeffs, estimate) = basis.step(tau);
                let allowed = tolerance * start_norm * tau / horizon;
                // The residual integral cannot be resolved below rounding.
                let noise = 16.0 * f64::EPSILON * basis.beta_next * tau;
                if beta0 * estimate <= allowed.max(beta0 * noise) {
                    accepted = Some((coeffs, beta0 * estimate, allowed));
                    break;
                }
                if tau <= 1e-14 * horizon {
                    break;
                }
                tau *= 0.5;
            }
            let Some((coeffs, error, allowed)) = accepted else {
                return Err(SemigroupError::KrylovNotConverged {
                    time: now,
                    residual: beta0 * basis.step(tau).1,
                });
            };
            basis.combine(&coeffs, beta0, &mut next);
            std::mem::swap(&mut w, &mut next);
            error_total += error;
            substeps += 1;
            now = if tau >= remaining { target } else { now + tau };
            if error < 0.1 * allowed {
                tau *= 2.0;
            }
        }
        if substeps == 0 {
            out.push(u0.to_vec());
        } else {
            out.push(w.iter().zip(&inv_root).map(|(a, b)| a * b).collect());
        }
        steps_out.push(substeps);
        let min_root = root.iter().copied().fold(f64::INFINITY, f64::min);
        estimates.push(Some(error_total / min_root));
    }
    Ok((out, steps_out, estimates))
}

/// Warning attached to kernel columns at times below `mesh²/4`.
pub const UNDER_RESOLVED: &str = "kernel under-resolved";

#[derive(Clone, Debug)]
pub struct KernelColumn {
    pub state: HeatState,
    pub source: GraphPoint,
    pub source_dof: usize,
    pub warnings: Vec<String>,
}

impl KernelColumn {
    /// `k(t, source, source)`.
    pub fn diagonal(&self) -> f64 {
        self.state.function.values()[self.source_dof]
    }
}

/// `k(t, source, ·)` at each of the nondecreasing `times`.
pub fn heat_kernel_columns(
    l: &DiscreteLaplacian,
    source: GraphPoint,
    times: &[f64],
    scheme: &Scheme,
) -> Result<Vec<KernelColumn>, SemigroupError> {
    if let Some(&t) = times.iter().find(|t| !(**t > 0.0)) {
        return Err(SemigroupError::InvalidTime(t));
    }
    let (delta, dof) = l.delta(source)?;
    let label = format!("delta(edge {}, offset {})", source.edge, source.offset);
    let resolution = l.mesh.mesh_size().powi(2) / 4.0;
    let states = evolve_labelled(l, &delta, times, scheme, &label)?;
    Ok(states
        .into_iter()
        .map(|state| {
            let warnings = if state.time < resolution {
                vec![format!("{UNDER_RESOLVED}: t = {} < mesh²/4 = {resolution}", state.time)]
            } else {
                Vec::new()
            };
            KernelColumn {
                state,
                source,
                source_dof: dof,
                warnings,
            }
        })
        .collect())
}

pub fn heat_kernel_column(
    l: &DiscreteLaplacian,
    source: GraphPoint,
    t: f64,
    scheme: &Scheme,
) -> Result<KernelColumn, SemigroupError> {
    heat_kernel_columns(l, source, &[t], scheme).map(|mut v| v.remove(0))
}

/// `(k(t,x,y), k(t,y,x))` evaluated at the mesh nodes nearest `x` and `y`.
pub fn kernel_symmetry(
    l: &DiscreteLaplacian,
    x: GraphPoint,
    y: GraphPoint,
    t: f64,
    scheme: &Scheme,
) -> Result<(f64, f64), SemigroupError> {
    let from_x = heat_kernel_column(l, x, t, scheme)?;
    let from_y = heat_kernel_column(l, y, t, scheme)?;
    let (dx, dy) = (from_x.source_dof, from_y.source_dof);
    Ok((from_x.state.function.values()[dy], from_y.state.function.values()[dx]))
}

/// Distance a kernel at time `t` needs from the window rim.
pub fn front_clearance(t: f64, cell_diameter: f64) -> f64 {
    3.0 * t.sqrt() + cell_diameter
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupNormEstimate {
    pub t: f64,
    /// `max_x k(t,x,x)` over the sources used.
    pub estimate: f64,
    pub argmax: GraphPoint,
    pub sources_used: usize,
    /// Candidates too close to the rim at this time.
    pub excluded: Vec<GraphPoint>,
    /// No candidate met the clearance rule; all of them were used and the
    /// value reflects the truncated window rather than the infinite graph.
    pub truncation_limited: bool,
    pub warnings: Vec<String>,
}

/// Estimates `‖e^{-At}‖_{L¹→L∞}` at each time as the largest kernel
/// diagonal over the candidate sources that satisfy the clearance rule.
/// Trajectories for different sources run in parallel.
pub fn sup_norm_1_to_inf(
    l: &DiscreteLaplacian,
    times: &[f64],
    candidates: &[GraphPoint],
    scheme: &Scheme,
) -> Result<Vec<SupNormEstimate>, SemigroupError> {
    let g = l.mesh.graph();
    let cell = g.cell_diameter();
    let clearances: Vec<f64> = candidates
        .iter()
        .map(|&p| boundary_clearance(g, p))
        .collect::<Result<_, _>>()?;
    let qualifies = |c: usize, t: f64| clearances[c] >= front_clearance(t, cell);
    let limited: Vec<bool> = times
        .iter()
        .map(|&t| !(0..candidates.len()).any(|c| qualifies(c, t)))
        .collect();
    let needed = |c: usize, i: usize| limited[i] || qualifies(c, times[i]);

    let diagonals: Vec<Vec<Option<(f64, Vec<String>)>>> = (0..candidates.len())
        .into_par_iter()
        .map(|c| {
            let wanted: Vec<usize> = (0..times.len()).filter(|&i| needed(c, i)).collect();
            let mut row = vec![None; times.len()];
            if wanted.is_empty() {
                return Ok(row);
            }
            let ts: Vec<f64> = wanted.iter().map(|&i| times[i]).collect();
            let columns = heat_kernel_columns(l, candidates[c], &ts, scheme)?;
            for (i, col) in wanted.into_iter().zip(columns) {
                row[i] = Some((col.diagonal(), col.warnings));
            }
            Ok(row)
        })
        .collect::<Result<_, SemigroupError>>()?;

    Ok(times
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut best = (f64::NEG_INFINITY, candidates.first().copied().unwrap_or(GraphPoint::new(0, 0.0)));
            let mut used = 0;
            let mut excluded = Vec::new();
            let mut warnings = Vec::new();
            for (c, row) in diagonals.iter().enumerate() {
                match &row[i] {
                    Some((value, w)) if limited[i] || qualifies(c, t) => {
                        used += 1;
                        if *value > best.0 {
                            best = (*value, candidates[c]);
                        }
                        for msg in w {
                            if !warnings.contains(msg) {
                                warnings.push(msg.clone());
                            }
                        }
                    }
                    _ => excluded.push(candidates[c]),
                }
            }
            SupNormEstimate {
                t,
                estimate: best.0,
                argmax: best.1,
                sources_used: used,
                excluded,
                truncation_limited: limited[i],
                warnings,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{load_tiling, make_regular_tiling, Point, Rect, TilingKind};
    use crate::skeleton::{build_skeleton, MetricGraph};

    fn grid(n: f64) -> Arc<MetricGraph> {
        Arc::new(build_skeleton(&make_regular_tiling(TilingKind::Square, 1.0, Rect::square(n)).unwrap()).unwrap())
    }

    fn single_edge(length: f64) -> Arc<MetricGraph> {
        let l = length;
        let doc = format!(r#"{{"polygons": [[[0,0],[{l},0],[{l},{l}],[0,{l}]]]}}"#);
        Arc::new(build_skeleton(&load_tiling(&doc).unwrap()).unwrap())
    }

    fn dense(m: &CsMat<f64>) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; m.cols()]; m.rows()];
        for (v, (i, j)) in m.iter() {
            out[i][j] += *v;
        }
        out
    }

    #[test]
    fn element_assembly() {
        let g = single_edge(1.0);
        let mesh = Mesh::new(g, 0.5).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::reflecting()).unwrap();
        let k = dense(l.stiffness());
        // Edge 0 runs between vertices; its midpoint dof is interior.
        let e = mesh.graph().edge(0);
        let (a, m, b) = (e.ends[0], mesh.node_dof(0, 1), e.ends[1]);
        assert_eq!(k[m][m], 4.0);
        assert_eq!(k[a][m], -2.0);
        assert_eq!(k[m][b], -2.0);
        // Square corners have degree 2.
        assert_eq!(k[a][a], 4.0);
        let total: f64 = l.lumped_mass().iter().sum();
        assert!((total - 4.0).abs() < 1e-14);
        for row in &k {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
        for i in 0..k.len() {
            for j in 0..k.len() {
                assert_eq!(k[i][j], k[j][i]);
            }
        }
    }

    #[test]
    fn degree_four_vertex_diagonal_and_absorbing() {
        let g = grid(2.0);
        let mesh = Mesh::new(Arc::clone(&g), 0.25).unwrap();
        let c = g.vertex_at(Point::new(1.0, 1.0)).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::reflecting()).unwrap();
        assert_eq!(dense(l.stiffness())[c][c], 16.0);
        let a = assemble(&mesh, &AssemblyOptions::absorbing()).unwrap();
        let k = dense(a.stiffness());
        for v in g.boundary_vertices() {
            assert!(k[v].iter().all(|x| *x == 0.0));
            assert!(k.iter().all(|row| row[v] == 0.0));
        }
    }

    #[test]
    fn identity_and_equilibrium() {
        let g = grid(3.0);
        let mesh = Mesh::new(g, 0.25).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::reflecting()).unwrap();
        let f = GraphFunction::from_fn(&mesh, |p| (p.edge as f64 * 0.37 + p.offset).sin().abs());
        for scheme in [Scheme::krylov(), Scheme::crank_nicolson()] {
            let s = evolve(&l, &f, 0.0, &scheme).unwrap();
            assert_eq!(s.function.values(), f.values());
            let c = GraphFunction::constant(&mesh, 2.0);
            let s = evolve(&l, &c, 1.5, &scheme).unwrap();
            assert!(s.function.values().iter().all(|v| (v - 2.0).abs() < 1e-9), "{}", scheme.name());
        }
    }

    #[test]
    fn long_edge_matches_free_kernel() {
        let g = single_edge(40.0);
        let mesh = Mesh::new(Arc::clone(&g), 1.0 / 32.0).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::absorbing()).unwrap();
        let t = 0.5;
        let col = heat_kernel_column(&l, GraphPoint::new(0, 20.0), t, &Scheme::krylov()).unwrap();
        for k in 0..=16 {
            let d = k as f64 * 0.25;
            let exact = (4.0 * std::f64::consts::PI * t).powf(-0.5) * (-d * d / (4.0 * t)).exp();
            let got = col.state.function.evaluate(GraphPoint::new(0, 20.0 + d));
            assert!((got - exact).abs() <= 0.02 * exact, "d = {d}: {got} vs {exact}");
        }
    }

    #[test]
    fn schemes_agree_and_conserve_mass() {
        let g = grid(3.0);
        let mesh = Mesh::new(Arc::clone(&g), 0.125).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::reflecting()).unwrap();
        let f = GraphFunction::from_fn(&mesh, |p| {
            let x = g.position(p);
            (-((x.x - 1.2).powi(2) + (x.y - 1.7).powi(2))).exp()
        });
        let times = [0.1, 0.5];
        let kr = evolve_to_times(&l, &f, &times, &Scheme::Krylov { dimension: 40, tolerance: 1e-12 }).unwrap();
        let cn = evolve_to_times(&l, &f, &times, &Scheme::crank_nicolson()).unwrap();
        let m0 = l.mass_of(f.values());
        for (a, b) in kr.iter().zip(&cn) {
            let scale = sup(a.function.values());
            let diff = a.function.values().iter().zip(b.function.values()).fold(0.0, |m: f64, (x, y)| m.max((x - y).abs()));
            assert!(diff <= 1e-6 * scale, "t = {}: {diff}", a.time);
            assert!((l.mass_of(a.function.values()) - m0).abs() <= 1e-10 * m0);
            assert!((l.mass_of(b.function.values()) - m0).abs() <= 1e-10 * m0);
        }
    }

    #[test]
    fn kernel_is_positive_and_symmetric() {
        let g = grid(4.0);
        let mesh = Mesh::new(Arc::clone(&g), 0.125).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::reflecting()).unwrap();
        let x = GraphPoint::new(3, 0.5);
        let y = g.vertex_point(g.vertex_at(Point::new(2.0, 2.0)).unwrap()).unwrap();
        let (kxy, kyx) = kernel_symmetry(&l, x, y, 0.3, &Scheme::krylov()).unwrap();
        assert!((kxy - kyx).abs() <= 0.01 * kxy.abs().max(kyx.abs()));
        let col = heat_kernel_column(&l, x, 0.3, &Scheme::krylov()).unwrap();
        let peak = sup(col.state.function.values());
        assert!(col.state.function.values().iter().all(|v| *v >= -1e-9 * peak));
        assert!((l.mass_of(col.state.function.values()) - 1.0).abs() < 1e-8);
        let early = heat_kernel_column(&l, x, 1e-4, &Scheme::krylov()).unwrap();
        assert!(early.warnings[0].contains(UNDER_RESOLVED));
    }

    #[test]
    fn sup_norm_flags_truncation() {
        let g = grid(6.0);
        let mesh = Mesh::new(Arc::clone(&g), 1.0 / 32.0).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::reflecting()).unwrap();
        let c = g.vertex_at(Point::new(3.0, 3.0)).unwrap();
        let sources = [g.vertex_point(c).unwrap(), GraphPoint::new(g.incident(c)[0].0, 0.5)];
        let est = sup_norm_1_to_inf(&l, &[0.01, 0.05, 80.0], &sources, &Scheme::krylov()).unwrap();
        assert!(!est[0].truncation_limited);
        assert_eq!(est[0].sources_used, 2);
        assert!((est[0].estimate - (4.0 * std::f64::consts::PI * 0.01).powf(-0.5)).abs() < 0.1);
        assert!(est[0].estimate >= est[1].estimate);
        assert!(est[2].truncation_limited);
        assert!((est[2].estimate - 1.0 / g.total_length()).abs() < 1e-3);
    }

    #[test]
    fn robin_term_lowers_the_diagonal() {
        let g = grid(4.0);
        let mesh = Mesh::new(Arc::clone(&g), 0.125).unwrap();
        let plain = assemble(&mesh, &AssemblyOptions::reflecting()).unwrap();
        let robin = assemble(
            &mesh,
            &AssemblyOptions::reflecting().with_form(FormSpec::plain().with_robin(vec![1.0; g.vertex_count()])),
        )
        .unwrap();
        let x = GraphPoint::new(5, 0.25);
        for t in [0.05, 0.5, 2.0] {
            let a = heat_kernel_column(&plain, x, t, &Scheme::krylov()).unwrap().diagonal();
            let b = heat_kernel_column(&robin, x, t, &Scheme::krylov()).unwrap().diagonal();
            assert!(b <= a * (1.0 + 1e-9), "t = {t}: {b} > {a}");
        }
    }

    #[test]
    fn consistent_mass_needs_cn() {
        let g = grid(2.0);
        let mesh = Mesh::new(g, 0.25).unwrap();
        let l = assemble(&mesh, &AssemblyOptions::reflecting().with_mass(MassMatrix::Consistent)).unwrap();
        let f = GraphFunction::constant(&mesh, 1.0);
        assert!(matches!(evolve(&l, &f, 1.0, &Scheme::krylov()), Err(SemigroupError::ConsistentMassNeedsCn)));
        let s = evolve(&l, &f, 0.5, &Scheme::crank_nicolson()).unwrap();
        assert!(s.function.values().iter().all(|v| (v - 1.0).abs() < 1e-9));
    }
}
