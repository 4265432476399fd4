//! Newtonized orthogonal matching pursuit over 3-D source positions.
//!
//! Each iteration detects one path on a discrete position grid, refines all
//! detected paths with damped Newton steps, re-fits every gain jointly and
//! recomputes the residual from the original snapshots.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{from_spherical, wrap_angle, Pose, Spherical, Vec3};
use crate::initializer::InitStrategy;
use crate::signal::{
    antenna_response, cir_full, frequency_response, steering, ArrayGeometry, OfdmGrid, Scenario, Snapshot,
    SPEED_OF_LIGHT,
};

type C64 = Complex64;

/// Candidates closer than this to any pose are skipped.
const DEGENERATE_RADIUS: f64 = 1e-9;
/// Finite-difference steps for the Newton derivatives.
const FD_POSITION_STEP: f64 = 1e-4;
const FD_TAU_STEP: f64 = 1e-12;
const BACKTRACK: [f64; 4] = [1.0, 0.5, 0.25, 0.125];
const DAMPING_LIMIT: f64 = 1e-2;

/// Discrete spherical grid of candidate positions around `center`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibleSet {
    pub distances: Vec<f64>,
    pub elevations: Vec<f64>,
    pub azimuths: Vec<f64>,
    pub center: Vec3,
}

impl FeasibleSet {
    pub fn validate(&self) -> Result<()> {
        if self.distances.is_empty() || self.elevations.is_empty() || self.azimuths.is_empty() {
            return Err(Error::InvalidConfig("feasible set has an empty axis".into()));
        }
        if self.distances.iter().any(|d| !(*d >= 0.0)) {
            return Err(Error::InvalidConfig("feasible distances must be >= 0".into()));
        }
        Ok(())
    }

    /// Candidate positions in distance, elevation, azimuth order. A zero
    /// distance contributes the center once.
    pub fn candidates(&self) -> Vec<Vec3> {
        let mut out = Vec::new();
        for &d in &self.distances {
            if d == 0.0 {
                out.push(self.center);
                continue;
            }
            for &phi in &self.elevations {
                for &theta in &self.azimuths {
                    out.push(self.center + from_spherical(&Spherical::new(d, phi, theta)));
                }
            }
        }
        out
    }

    /// Spherical shell spanned by the set, widened on both sides by its
    /// own radial span.
    pub fn region(&self) -> Region {
        let lo = self.distances.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.distances.iter().cloned().fold(0.0, f64::max);
        let margin = hi - lo;
        Region {
            center: self.center,
            r_min: (lo - margin).max(0.0),
            r_max: hi + margin,
        }
    }
}

/// Where Newton refinement may move a path that was detected in a
/// given feasible set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: Vec3,
    pub r_min: f64,
    pub r_max: f64,
}

impl Region {
    pub fn contains(&self, p: &Vec3) -> bool {
        let r = (p - self.center).norm();
        r >= self.r_min && r <= self.r_max
    }
}

/// `η + 1` elevations evenly spaced over `[-π/2, π/2]`.
pub fn elevation_grid(eta_phi: usize) -> Vec<f64> {
    (0..=eta_phi).map(|k| PI / eta_phi as f64 * k as f64 - PI / 2.0).collect()
}

/// `η` azimuths evenly spaced over the full circle, wrapped to `(-π, π]`.
pub fn full_azimuth_grid(eta_theta: usize) -> Vec<f64> {
    (0..eta_theta).map(|k| wrap_angle(2.0 * PI / eta_theta as f64 * k as f64)).collect()
}

/// `η + 1` azimuths over the front half-plane `[0, π]`.
pub fn front_azimuth_grid(eta_theta: usize) -> Vec<f64> {
    (0..=eta_theta).map(|k| wrap_angle(PI / eta_theta as f64 * k as f64)).collect()
}

/// Delay offsets `k / (η_τ · N · Δf)` for `k = 0 … η_τ·N − 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauGrid {
    pub eta_tau: usize,
    pub values: Vec<f64>,
}

impl TauGrid {
    pub fn new(eta_tau: usize, grid: &OfdmGrid) -> Result<Self> {
        if eta_tau == 0 {
            return Err(Error::InvalidConfig("eta_tau must be >= 1".into()));
        }
        let len = eta_tau * grid.n_subcarriers;
        let spacing = 1.0 / (eta_tau as f64 * grid.bandwidth());
        Ok(Self {
            eta_tau,
            values: (0..len).map(|k| k as f64 * spacing).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Number of NOMP iterations `L`.
    pub paths: usize,
    /// Cyclic refinement sweeps `K_NR`.
    pub refine_sweeps: usize,
    /// Newton steps per path per sweep; a rejected step ends the run early.
    pub newton_steps: usize,
    pub eta_d: usize,
    pub eta_phi: usize,
    pub eta_theta: usize,
    pub eta_tau: usize,
    pub e_ps: f64,
    pub e_vs: f64,
    /// Largest allowed move, in meters of position or `c·τ`.
    pub newton_step_cap: f64,
    /// Known per-sample noise variance; enables the residual early stop.
    pub noise_variance: Option<f64>,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl SolverConfig {
    pub fn desk() -> Self {
        Self {
            paths: 3,
            refine_sweeps: 3,
            newton_steps: 10,
            eta_d: 4,
            eta_phi: 24,
            eta_theta: 24,
            eta_tau: 8,
            e_ps: 1.2,
            e_vs: 5.0,
            newton_step_cap: 0.5,
            noise_variance: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            eta_phi: 120,
            eta_theta: 120,
            eta_tau: 8,
            e_vs: 1.2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.paths, self.eta_d, self.eta_phi, self.eta_theta, self.eta_tau];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig("paths and grid densities must be >= 1".into()));
        }
        if !(self.e_ps > 0.0 && self.e_vs > 0.0 && self.newton_step_cap > 0.0) {
            return Err(Error::InvalidConfig("e_ps, e_vs and newton_step_cap must be > 0".into()));
        }
        if let Some(s2) = self.noise_variance {
            if !(s2 >= 0.0) {
                return Err(Error::InvalidConfig("noise_variance must be >= 0".into()));
            }
        }
        Ok(())
    }
}

/// Snapshots plus the receiver description needed to model them.
#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    pub snapshots: Vec<Snapshot>,
    pub array: ArrayGeometry,
    pub grid: OfdmGrid,
}

impl Problem {
    pub fn new(snapshots: Vec<Snapshot>, array: ArrayGeometry, grid: OfdmGrid) -> Result<Self> {
        let p = Self { snapshots, array, grid };
        p.validate()?;
        Ok(p)
    }

    pub fn from_scenario(scenario: &Scenario, snapshots: Vec<Snapshot>) -> Result<Self> {
        Self::new(snapshots, scenario.array.clone(), scenario.grid.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let len = self.grid.n_subcarriers * self.array.len();
        if self.snapshots.is_empty() {
            return Err(Error::DimensionMismatch("no snapshots".into()));
        }
        for (i, s) in self.snapshots.iter().enumerate() {
            if s.cfr.len() != len {
                return Err(Error::DimensionMismatch(format!(
                    "snapshot {i} has {} samples, expected {len}",
                    s.cfr.len()
                )));
            }
            if s.cfr.iter().any(|h| !h.re.is_finite() || !h.im.is_finite()) {
                return Err(Error::DimensionMismatch(format!("snapshot {i} has non-finite samples")));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.snapshots.len()
    }

    pub fn poses(&self) -> Vec<Pose> {
        self.snapshots.iter().map(|s| s.pose).collect()
    }

    fn samples(&self) -> f64 {
        (self.grid.n_subcarriers * self.array.len()) as f64
    }

    fn steer(&self, p: &Vec3, tau: f64, i: usize) -> Result<Vec<C64>> {
        steering(p, tau, &self.snapshots[i].pose, &self.array, &self.grid)
    }

    fn is_degenerate(&self, p: &Vec3) -> bool {
        self.snapshots
            .iter()
            .any(|s| (p - s.pose.delta).norm() < DEGENERATE_RADIUS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathEstimate {
    pub position: Vec3,
    pub gains: Vec<C64>,
}

/// Per-iteration record, also the JSON-lines diagnostics row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub l: usize,
    pub objective: f64,
    pub residual_energy: f64,
    pub accepted_newton_steps: usize,
    pub p_hat: Vec3,
    pub tau_hat: Vec<f64>,
    /// Position of the physical-source estimate after this iteration.
    pub ps_hat: Vec3,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub residuals: Vec<Vec<C64>>,
    pub estimates: Vec<PathEstimate>,
    /// Refinement region per path; a path without one is unconstrained.
    pub regions: Vec<Region>,
    pub tau_hat: Vec<f64>,
    pub config: SolverConfig,
    /// Accepted Newton steps since the last reset.
    pub accepted_steps: usize,
    pub notes: Vec<String>,
}

impl SolverState {
    pub fn new(problem: &Problem, config: SolverConfig) -> Self {
        Self {
            residuals: problem.snapshots.iter().map(|s| s.cfr.clone()).collect(),
            estimates: Vec::new(),
            regions: Vec::new(),
            tau_hat: vec![0.0; problem.count()],
            config,
            accepted_steps: 0,
            notes: Vec::new(),
        }
    }

    pub fn residual_energy(&self) -> f64 {
        energy(&self.residuals)
    }
}

fn energy(vs: &[Vec<C64>]) -> f64 {
    vs.iter().map(|v| v.iter().map(|x| x.norm_sqr()).sum::<f64>()).sum()
}

fn inner(v: &[C64], h: &[C64]) -> C64 {
    v.iter().zip(h).map(|(a, b)| a.conj() * b).sum()
}

/// `Σ_i |v_iᴴ h_i|² / ‖v_i‖²` with `v_i = steering(p, τ_i, pose_i)`.
pub fn objective(
    p: &Vec3,
    taus: &[f64],
    residuals: &[Vec<C64>],
    poses: &[Pose],
    array: &ArrayGeometry,
    grid: &OfdmGrid,
) -> Result<f64> {
    if taus.len() != residuals.len() || poses.len() != residuals.len() {
        return Err(Error::DimensionMismatch("objective inputs disagree on I".into()));
    }
    let norm = (grid.n_subcarriers * array.len()) as f64;
    let mut acc = 0.0;
    for ((tau, h), pose) in taus.iter().zip(residuals).zip(poses) {
        let v = steering(p, *tau, pose, array, grid)?;
        acc += inner(&v, h).norm_sqr() / norm;
    }
    Ok(acc)
}

/// Least-squares gain `vᴴh / ‖v‖²`.
pub fn ls_gain(p: &Vec3, tau: f64, h: &[C64], pose: &Pose, array: &ArrayGeometry, grid: &OfdmGrid) -> Result<C64> {
    let v = steering(p, tau, pose, array, grid)?;
    Ok(inner(&v, h) / (grid.n_subcarriers * array.len()) as f64)
}

/// Grid detection result.
#[derive(Debug, Clone, PartialEq)]
pub struct OmpResult {
    pub position: Vec3,
    pub taus: Vec<f64>,
    pub gains: Vec<C64>,
    pub objective: f64,
}

/// Antenna-combined spectrum `Σ_m conj(a_m) h_{mn}`.
fn combine_antennas(a: &[C64], h: &[C64], n: usize) -> Vec<C64> {
    let mut g = vec![C64::new(0.0, 0.0); n];
    for (m, am) in a.iter().enumerate() {
        let ac = am.conj();
        for (gk, hk) in g.iter_mut().zip(&h[m * n..(m + 1) * n]) {
            *gk += ac * hk;
        }
    }
    g
}

/// Exact argmax of the objective over `set × tau_grid^I`.
///
/// For a fixed position the objective separates over snapshots, and for one
/// snapshot `vᴴh` over the delay grid is a length-`η_τN` DFT of the
/// antenna-combined, range-compensated spectrum. Ties keep the first
/// candidate and the smallest delay index.
pub fn omp_step(problem: &Problem, residuals: &[Vec<C64>], set: &FeasibleSet, tau_grid: &TauGrid) -> Result<OmpResult> {
    set.validate()?;
    if tau_grid.is_empty() {
        return Err(Error::InvalidConfig("empty delay grid".into()));
    }
    let grid = &problem.grid;
    let n = grid.n_subcarriers;
    let k_len = tau_grid.len();
    let norm = problem.samples();
    let fft: std::sync::Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(k_len);
    let mut buf = vec![C64::new(0.0, 0.0); k_len];
    let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let bins: Vec<usize> = (0..n)
        .map(|k| grid.signed_index(k).rem_euclid(k_len as i64) as usize)
        .collect();

    let mut best: Option<(f64, Vec3, Vec<usize>)> = None;
    let mut ks = vec![0usize; problem.count()];
    for p in set.candidates() {
        if problem.is_degenerate(&p) {
            continue;
        }
        let mut total = 0.0;
        for (i, snap) in problem.snapshots.iter().enumerate() {
            let a = antenna_response(&p, &snap.pose, &problem.array, grid.wavelength)?;
            let g = combine_antennas(&a, &residuals[i], n);
            let d = (p - snap.pose.delta).norm() / SPEED_OF_LIGHT;
            buf.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
            for (k, gk) in g.iter().enumerate() {
                let f = grid.subcarrier_freqs[k];
                buf[bins[k]] += gk * C64::from_polar(1.0, 2.0 * PI * f * d);
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            let (mut kbest, mut vbest) = (0, f64::NEG_INFINITY);
            for (k, x) in buf.iter().enumerate() {
                let v = x.norm_sqr();
                if v > vbest {
                    kbest = k;
                    vbest = v;
                }
            }
            ks[i] = kbest;
            total += vbest / norm;
        }
        if best.as_ref().is_none_or(|(b, _, _)| total > *b) {
            best = Some((total, p, ks.clone()));
        }
    }
    let (value, position, idx) =
        best.ok_or_else(|| Error::InvalidConfig("feasible set has no usable candidate".into()))?;
    let taus: Vec<f64> = idx.iter().map(|&k| tau_grid.values[k]).collect();
    finish_detection(problem, residuals, position, taus, value)
}

/// Grid argmax over positions with the per-snapshot offsets held at `taus`.
pub fn omp_step_fixed_tau(problem: &Problem, residuals: &[Vec<C64>], set: &FeasibleSet, taus: &[f64]) -> Result<OmpResult> {
    set.validate()?;
    let grid = &problem.grid;
    let n = grid.n_subcarriers;
    let norm = problem.samples();
    let mut best: Option<(f64, Vec3)> = None;
    for p in set.candidates() {
        if problem.is_degenerate(&p) {
            continue;
        }
        let mut total = 0.0;
        for (i, snap) in problem.snapshots.iter().enumerate() {
            let a = antenna_response(&p, &snap.pose, &problem.array, grid.wavelength)?;
            let g = combine_antennas(&a, &residuals[i], n);
            let b = frequency_response(&p, taus[i], &snap.pose.delta, grid);
            total += inner(&b, &g).norm_sqr() / norm;
        }
        if best.is_none_or(|(b, _)| total > b) {
            best = Some((total, p));
        }
    }
    let (value, position) = best.ok_or_else(|| Error::InvalidConfig("feasible set has no usable candidate".into()))?;
    finish_detection(problem, residuals, position, taus.to_vec(), value)
}

fn finish_detection(problem: &Problem, residuals: &[Vec<C64>], position: Vec3, taus: Vec<f64>, objective: f64) -> Result<OmpResult> {
    let gains = (0..problem.count())
        .map(|i| {
            ls_gain(&position, taus[i], &residuals[i], &problem.snapshots[i].pose, &problem.array, &problem.grid)
        })
        .collect::<Result<_>>()?;
    Ok(OmpResult {
        position,
        taus,
        gains,
        objective,
    })
}

/// Residual of snapshot `i` with every path except `skip` removed, all at
/// offset `tau`.
fn partial_residual(problem: &Problem, state: &SolverState, skip: usize, i: usize, tau: f64) -> Result<Vec<C64>> {
    let mut r = problem.snapshots[i].cfr.clone();
    for (l, est) in state.estimates.iter().enumerate() {
        if l == skip {
            continue;
        }
        let v = problem.steer(&est.position, tau, i)?;
        let g = est.gains[i];
        for (rk, vk) in r.iter_mut().zip(&v) {
            *rk -= g * vk;
        }
    }
    Ok(r)
}

/// Per-snapshot Newton cost: minus the residual energy of snapshot `i`
/// after a joint least-squares fit of every path's gain. The paths in
/// `moving` sit at `x[3k..3k+3]`, the others at their estimates, and the
/// shared offset is `x.last() / c`. With a single path this equals
/// `|vᴴh|²/NM − ‖h‖²`; it is evaluated exactly as [`remove`] would leave the
/// residual so that an accepted step always lowers the stored energy.
fn snapshot_cost(problem: &Problem, state: &SolverState, moving: &[usize], i: usize, x: &[f64]) -> Result<f64> {
    cost_at(problem, state, moving, i, x, x[x.len() - 1] / SPEED_OF_LIGHT)
}

/// [`snapshot_cost`] with the offset given directly in seconds.
fn cost_at(problem: &Problem, state: &SolverState, moving: &[usize], i: usize, x: &[f64], tau: f64) -> Result<f64> {
    let h = &problem.snapshots[i].cfr;
    let cols: Vec<Vec<C64>> = state
        .estimates
        .iter()
        .enumerate()
        .map(|(k, e)| match moving.iter().position(|&m| m == k) {
            Some(j) => problem.steer(&Vec3::new(x[3 * j], x[3 * j + 1], x[3 * j + 2]), tau, i),
            None => problem.steer(&e.position, tau, i),
        })
        .collect::<Result<_>>()?;
    let (gains, _) = joint_gains(&cols, h)?;
    let mut r = h.clone();
    for (g, v) in gains.iter().zip(&cols) {
        for (rk, vk) in r.iter_mut().zip(v) {
            *rk -= g * vk;
        }
    }
    Ok(-r.iter().map(|z| z.norm_sqr()).sum::<f64>())
}

/// Variables of snapshot `i`: the moving positions then `c·τ_i`.
fn snapshot_vars(positions: &[Vec3], tau: f64) -> Vec<f64> {
    let mut x: Vec<f64> = positions.iter().flat_map(|p| [p.x, p.y, p.z]).collect();
    x.push(tau * SPEED_OF_LIGHT);
    x
}

/// Central-difference gradient and Hessian of one snapshot's cost.
fn snapshot_derivatives(problem: &Problem, state: &SolverState, moving: &[usize], i: usize, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    let step = |k: usize| if k + 1 == n { FD_TAU_STEP * SPEED_OF_LIGHT } else { FD_POSITION_STEP };
    let eval = |d: &[(usize, f64)]| -> Result<f64> {
        let mut y = x.to_vec();
        for &(k, s) in d {
            y[k] += s * step(k);
        }
        snapshot_cost(problem, state, moving, i, &y)
    };
    let f0 = eval(&[])?;
    let mut grad = DVector::zeros(n);
    let mut hess = DMatrix::zeros(n, n);
    for a in 0..n {
        let (ha, fp, fm) = (step(a), eval(&[(a, 1.0)])?, eval(&[(a, -1.0)])?);
        grad[a] = (fp - fm) / (2.0 * ha);
        hess[(a, a)] = (fp - 2.0 * f0 + fm) / (ha * ha);
        for b in 0..a {
            let fpp = eval(&[(a, 1.0), (b, 1.0)])?;
            let fpm = eval(&[(a, 1.0), (b, -1.0)])?;
            let fmp = eval(&[(a, -1.0), (b, 1.0)])?;
            let fmm = eval(&[(a, -1.0), (b, -1.0)])?;
            let v = (fpp - fpm - fmp + fmm) / (4.0 * ha * step(b));
            hess[(a, b)] = v;
            hess[(b, a)] = v;
        }
    }
    Ok((grad, hess))
}

/// Outcome of a single Newton attempt.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NewtonOutcome {
    Accepted,
    NotConcave,
    NoImprovement,
}

/// One damped Newton step on path `l` jointly with the shared offsets.
///
/// The step is taken only when the (possibly Levenberg-shifted)
/// finite-difference Hessian is negative definite, the new position stays in
/// the path's region, and the cost strictly increases for one of the
/// backtracking scales; then the offsets are wrapped into `[0, 1/Δf)` and all
/// gains re-fitted.
pub fn newton_refine(problem: &Problem, state: &mut SolverState, l: usize) -> Result<NewtonOutcome> {
    newton_step(problem, state, &[l])
}

/// Same as [`newton_refine`] but moves every detected path at once.
pub fn joint_newton_refine(problem: &Problem, state: &mut SolverState) -> Result<NewtonOutcome> {
    let all: Vec<usize> = (0..state.estimates.len()).collect();
    newton_step(problem, state, &all)
}

fn newton_step(problem: &Problem, state: &mut SolverState, moving: &[usize]) -> Result<NewtonOutcome> {
    let count = problem.count();
    let np = 3 * moving.len();
    let dim = np + count;
    let p0: Vec<Vec3> = moving.iter().map(|&l| state.estimates[l].position).collect();
    let taus0 = state.tau_hat.clone();
    let mut grad = DVector::zeros(dim);
    let mut hess = DMatrix::zeros(dim, dim);
    let mut cost0 = 0.0;
    for i in 0..count {
        let x = snapshot_vars(&p0, taus0[i]);
        cost0 += cost_at(problem, state, moving, i, &x, taus0[i])?;
        let (g, h) = snapshot_derivatives(problem, state, moving, i, &x)?;
        // snapshot i touches the positions and its own offset only
        let index = |k: usize| if k < np { k } else { np + i };
        for a in 0..=np {
            grad[index(a)] += g[a];
            for b in 0..=np {
                hess[(index(a), index(b))] += h[(a, b)];
            }
        }
    }
    let Some(chol) = damped_cholesky(-&hess) else {
        return Ok(NewtonOutcome::NotConcave);
    };
    let mut step = chol.solve(&grad);
    let largest = (0..moving.len())
        .map(|j| step.rows(3 * j, 3).norm())
        .chain(step.rows(np, count).iter().map(|x| x.abs()))
        .fold(0.0f64, f64::max);
    if !largest.is_finite() {
        return Ok(NewtonOutcome::NotConcave);
    }
    if largest > state.config.newton_step_cap {
        step *= state.config.newton_step_cap / largest;
    }
    'scales: for scale in BACKTRACK {
        let ps: Vec<Vec3> = (0..moving.len())
            .map(|j| p0[j] + Vec3::new(step[3 * j], step[3 * j + 1], step[3 * j + 2]) * scale)
            .collect();
        for (j, &l) in moving.iter().enumerate() {
            if problem.is_degenerate(&ps[j]) || state.regions.get(l).is_some_and(|r| !r.contains(&ps[j])) {
                continue 'scales;
            }
        }
        let period = problem.grid.delay_period();
        let taus: Vec<f64> = (0..count)
            .map(|i| (taus0[i] + step[np + i] * scale / SPEED_OF_LIGHT).rem_euclid(period))
            .collect();
        let cost = (0..count)
            .map(|i| cost_at(problem, state, moving, i, &snapshot_vars(&ps, taus[i]), taus[i]))
            .sum::<Result<f64>>()?;
        if cost > cost0 {
            state.tau_hat = taus;
            for (j, &l) in moving.iter().enumerate() {
                state.estimates[l].position = ps[j];
            }
            ls_all(problem, state)?;
            state.accepted_steps += 1;
            return Ok(NewtonOutcome::Accepted);
        }
    }
    Ok(NewtonOutcome::NoImprovement)
}

/// Cholesky factor of `-H`, shifted by a Levenberg term when `-H` has a
/// small or negative eigenvalue along a weakly observable direction.
fn damped_cholesky(neg_hess: DMatrix<f64>) -> Option<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if let Some(chol) = neg_hess.clone().cholesky() {
        return Some(chol);
    }
    let eig = neg_hess.clone().symmetric_eigen();
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    // only a mildly indefinite curvature is repaired
    if !(hi > 0.0) || lo < -DAMPING_LIMIT * hi {
        return None;
    }
    let mu = 2.0 * lo.abs() + 1e-9 * hi;
    let n = neg_hess.nrows();
    (neg_hess + DMatrix::identity(n, n) * mu).cholesky()
}

/// Up to `newton_steps` Newton steps on path `l`, stopping at the first
/// rejection.
pub fn refine_path(problem: &Problem, state: &mut SolverState, l: usize) -> Result<usize> {
    let mut accepted = 0;
    for _ in 0..state.config.newton_steps.max(1) {
        match newton_refine(problem, state, l)? {
            NewtonOutcome::Accepted => accepted += 1,
            _ => break,
        }
    }
    Ok(accepted)
}

/// `K_NR` sweeps over every detected path in detection order. With more
/// than one path each sweep ends with joint steps over all of them.
pub fn cyclic_refine(problem: &Problem, state: &mut SolverState) -> Result<usize> {
    let mut accepted = 0;
    for _ in 0..state.config.refine_sweeps {
        for l in 0..state.estimates.len() {
            accepted += refine_path(problem, state, l)?;
        }
        if state.estimates.len() > 1 {
            for _ in 0..state.config.newton_steps.max(1) {
                match joint_newton_refine(problem, state)? {
                    NewtonOutcome::Accepted => accepted += 1,
                    _ => break,
                }
            }
        }
    }
    Ok(accepted)
}

/// Joint least-squares gains for every path, per snapshot. A
/// rank-deficient steering matrix is solved with diagonal loading and noted.
pub fn ls_all(problem: &Problem, state: &mut SolverState) -> Result<()> {
    if state.estimates.is_empty() {
        return Ok(());
    }
    for i in 0..problem.count() {
        let cols: Vec<Vec<C64>> = state
            .estimates
            .iter()
            .map(|e| problem.steer(&e.position, state.tau_hat[i], i))
            .collect::<Result<_>>()?;
        let (gains, load) = joint_gains(&cols, &problem.snapshots[i].cfr)?;
        if let Some(load) = load {
            state
                .notes
                .push(format!("snapshot {i}: rank-deficient steering matrix, diagonal loading {load:e}"));
        }
        for (l, est) in state.estimates.iter_mut().enumerate() {
            est.gains[i] = gains[l];
        }
    }
    Ok(())
}

/// Least-squares gains of `h` on the columns `cols`, with the diagonal
/// loading used when the Gram matrix is ill-conditioned.
fn joint_gains(cols: &[Vec<C64>], h: &[C64]) -> Result<(DVector<C64>, Option<f64>)> {
    let paths = cols.len();
    let gram = DMatrix::from_fn(paths, paths, |a, b| inner(&cols[a], &cols[b]));
    let rhs = DVector::from_fn(paths, |a, _| inner(&cols[a], h));
    if let Some(chol) = well_conditioned_cholesky(&gram) {
        return Ok((chol.solve(&rhs), None));
    }
    let load = 1e-10 * gram.trace().re;
    let loaded = &gram + DMatrix::from_diagonal_element(paths, paths, C64::new(load, 0.0));
    let chol = loaded
        .cholesky()
        .ok_or_else(|| Error::Singular("loaded Gram matrix is not positive definite".into()))?;
    Ok((chol.solve(&rhs), Some(load)))
}

/// Cholesky factor when the pivots stay above `1e-12` of the largest.
fn well_conditioned_cholesky(gram: &DMatrix<C64>) -> Option<nalgebra::Cholesky<C64, nalgebra::Dyn>> {
    let chol = gram.clone().cholesky()?;
    let pivots: Vec<f64> = chol.l_dirty().diagonal().iter().map(|x| x.norm_sqr()).collect();
    let max = pivots.iter().cloned().fold(0.0, f64::max);
    let min = pivots.iter().cloned().fold(f64::INFINITY, f64::min);
    (min > 1e-12 * max).then_some(chol)
}

pub fn remove(problem: &Problem, state: &mut SolverState) -> Result<()> {
    for i in 0..problem.count() {
        state.residuals[i] = partial_residual(problem, state, usize::MAX, i, state.tau_hat[i])?;
    }
    Ok(())
}

/// Initial range of the next path from the strongest tap of snapshot 1's
/// residual CIR. `None` when the residual energy is at or below `floor`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DelayInit {
    pub distance: f64,
    pub clamped: bool,
}

pub fn vs_delay_init(residual: &Snapshot, tau_hat_1: f64, grid: &OfdmGrid, floor: f64) -> Result<Option<DelayInit>> {
    let e: f64 = residual.cfr.iter().map(|x| x.norm_sqr()).sum();
    if !(e > floor) {
        return Ok(None);
    }
    let cir = cir_full(residual, grid)?;
    let power: Vec<f64> = cir.row_iter().map(|row| row.iter().map(|x| x.norm_sqr()).sum()).collect();
    let mut peak = 0;
    for (k, v) in power.iter().enumerate() {
        if *v > power[peak] {
            peak = k;
        }
    }
    let rel = peak as f64 / (grid.cir_len() as f64 * grid.delta_f);
    let period = grid.delay_period();
    // the absolute delay is tiny next to the period; wrap to the nearest image
    let delay = (rel + tau_hat_1 + 0.5 * period).rem_euclid(period) - 0.5 * period;
    Ok(Some(if delay < 0.0 {
        DelayInit { distance: 0.0, clamped: true }
    } else {
        DelayInit { distance: SPEED_OF_LIGHT * delay, clamped: false }
    }))
}

/// Spherical shell set around the origin for a reflected path.
pub fn vs_feasible_set(d_init: f64, config: &SolverConfig) -> FeasibleSet {
    let eta = config.eta_d as i64;
    let mut distances: Vec<f64> = (-eta..=eta)
        .map(|k| (d_init + config.e_vs * k as f64 / eta as f64).max(0.0))
        .collect();
    distances.dedup();
    FeasibleSet {
        distances,
        elevations: elevation_grid(config.eta_phi),
        azimuths: full_azimuth_grid(config.eta_theta),
        center: Vec3::zeros(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveOutput {
    /// Estimates in detection order; the first is the physical source.
    pub estimates: Vec<PathEstimate>,
    pub tau_hat: Vec<f64>,
    pub diagnostics: Vec<IterationDiagnostics>,
    pub stopped_early: bool,
    /// Energy left after removing every estimated path.
    pub residual_energy: f64,
}

impl SolveOutput {
    pub fn source(&self) -> &Vec3 {
        &self.estimates[0].position
    }
}

/// Runs `L` NOMP iterations.
///
/// Iteration 1 searches the initializer's set jointly over positions and
/// the delay grid. Later iterations search the range-shell set around the
/// delay-derived distance with the offsets held at their current estimate;
/// the offsets are then refined jointly with every path.
pub fn solve(problem: &Problem, config: &SolverConfig, init: &InitStrategy) -> Result<SolveOutput> {
    config.validate()?;
    problem.validate()?;
    if problem.count() < 2 {
        return Err(Error::InvalidConfig("localization needs at least two snapshots".into()));
    }
    let mut state = SolverState::new(problem, config.clone());
    let tau_grid = TauGrid::new(config.eta_tau, &problem.grid)?;
    let floor = detection_floor(problem, config);
    let mut diagnostics = Vec::new();
    let mut stopped_early = false;

    for l in 0..config.paths {
        state.accepted_steps = 0;
        state.notes.clear();
        let (detection, region) = if l == 0 {
            let set = match init.ps_feasible_set(problem, config) {
                Ok(set) => set,
                Err(e) => match init.room_dims() {
                    Some(dims) => {
                        state.notes.push(format!("initializer failed ({e}); using the room-box set"));
                        crate::initializer::traditional_set(dims, config)?
                    }
                    None => return Err(e),
                },
            };
            (omp_step(problem, &state.residuals, &set, &tau_grid)?, set.region())
        } else {
            let first = Snapshot {
                cfr: state.residuals[0].clone(),
                pose: problem.snapshots[0].pose,
            };
            let Some(init_d) = vs_delay_init(&first, state.tau_hat[0], &problem.grid, floor)? else {
                stopped_early = true;
                break;
            };
            if init_d.clamped {
                state.notes.push("negative delay-derived distance clamped to 0".into());
            }
            let set = vs_feasible_set(init_d.distance, config);
            (omp_step_fixed_tau(problem, &state.residuals, &set, &state.tau_hat)?, set.region())
        };
        let p_grid = detection.position;
        if l == 0 {
            state.tau_hat = detection.taus.clone();
        }
        state.estimates.push(PathEstimate {
            position: detection.position,
            gains: detection.gains,
        });
        state.regions.push(region);
        // energy before refinement must already reflect the new path
        ls_all(problem, &mut state)?;
        if config.refine_sweeps > 0 {
            refine_path(problem, &mut state, l)?;
        }
        cyclic_refine(problem, &mut state)?;
        ls_all(problem, &mut state)?;
        remove(problem, &mut state)?;
        let est = &state.estimates[l];
        diagnostics.push(IterationDiagnostics {
            l: l + 1,
            objective: objective(&est.position, &state.tau_hat, &residuals_without(problem, &state, l)?, &problem.poses(), &problem.array, &problem.grid)?,
            residual_energy: state.residual_energy(),
            accepted_newton_steps: state.accepted_steps,
            p_hat: est.position,
            tau_hat: state.tau_hat.clone(),
            ps_hat: state.estimates[0].position,
            notes: {
                let mut n = state.notes.clone();
                if (est.position - p_grid).norm() == 0.0 && state.accepted_steps == 0 {
                    n.push("no Newton step accepted; estimate stayed on the grid".into());
                }
                n
            },
        });
        if config.noise_variance.is_some() && state.residual_energy() <= floor * problem.count() as f64 {
            stopped_early = l + 1 < config.paths;
            break;
        }
    }
    Ok(SolveOutput {
        residual_energy: state.residual_energy(),
        estimates: state.estimates,
        tau_hat: state.tau_hat,
        diagnostics,
        stopped_early,
    })
}

fn residuals_without(problem: &Problem, state: &SolverState, l: usize) -> Result<Vec<Vec<C64>>> {
    (0..problem.count())
        .map(|i| partial_residual(problem, state, l, i, state.tau_hat[i]))
        .collect()
}

/// Per-snapshot residual energy at which no further path is searched.
fn detection_floor(problem: &Problem, config: &SolverConfig) -> f64 {
    let e1: f64 = problem.snapshots[0].cfr.iter().map(|x| x.norm_sqr()).sum();
    let noise = config.noise_variance.map_or(0.0, |s2| 3.0 * s2 * problem.samples());
    noise.max(1e-12 * e1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Rotation;
    use crate::signal::{synthesize_cfr, PathGroundTruth};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_problem(paths: &[(Vec3, f64)], noise: f64, seed: u64) -> (Scenario, Problem) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grid = OfdmGrid::new(16, 2e6, 6.5e9).unwrap();
        let trajectory: Vec<Pose> = (0..4)
            .map(|i| {
                Pose::new(
                    Vec3::new(0.4 * i as f64, 0.1 * i as f64, 0.0),
                    Rotation::from_axis_angles(rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0),
                )
            })
            .collect();
        let scenario = Scenario {
            room: None,
            paths: paths
                .iter()
                .enumerate()
                .map(|(k, &(position, amp))| PathGroundTruth {
                    position,
                    gains: (0..4).map(|_| C64::from_polar(amp, rng.random_range(-PI..PI))).collect(),
                    is_physical: k == 0,
                })
                .collect(),
            trajectory,
            time_offsets: (0..4).map(|_| rng.random_range(0.0..5e-7)).collect(),
            noise_variance: noise,
            array: ArrayGeometry::xz_triangle(grid.wavelength),
            grid,
        };
        let snaps = synthesize_cfr(&scenario, &mut rng).unwrap();
        let problem = Problem::from_scenario(&scenario, snaps).unwrap();
        (scenario, problem)
    }

    #[test]
    fn grids_have_expected_sizes() {
        assert_eq!(elevation_grid(4), vec![-PI / 2.0, -PI / 4.0, 0.0, PI / 4.0, PI / 2.0]);
        assert_eq!(full_azimuth_grid(4).len(), 4);
        assert!(full_azimuth_grid(4).iter().all(|t| *t > -PI && *t <= PI));
        assert_eq!(front_azimuth_grid(4).len(), 5);
        let g = OfdmGrid::desk();
        let t = TauGrid::new(4, &g).unwrap();
        assert_eq!(t.len(), 256);
        assert!(t.values.windows(2).all(|w| w[1] > w[0]));
        assert!((t.values[1] - 1.0 / (4.0 * 64e6)).abs() < 1e-24);
    }

    #[test]
    fn objective_at_truth_is_total_power() {
        let (s, p) = small_problem(&[(Vec3::new(1.0, 3.0, 0.5), 0.4)], 0.0, 1);
        let res: Vec<_> = p.snapshots.iter().map(|x| x.cfr.clone()).collect();
        let value = objective(s.source(), &s.time_offsets, &res, &p.poses(), &p.array, &p.grid).unwrap();
        let expected: f64 = s.paths[0].gains.iter().map(|g| g.norm_sqr()).sum::<f64>() * 48.0;
        assert!((value / expected - 1.0).abs() < 1e-12);
        let zeros = vec![vec![C64::new(0.0, 0.0); 48]; 4];
        assert_eq!(objective(s.source(), &s.time_offsets, &zeros, &p.poses(), &p.array, &p.grid).unwrap(), 0.0);
        // any other point scores no higher
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let q = s.source() + Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let taus: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..5e-7)).collect();
            assert!(objective(&q, &taus, &res, &p.poses(), &p.array, &p.grid).unwrap() <= value * (1.0 + 1e-12));
        }
    }

    #[test]
    fn ls_gain_cases() {
        let g = OfdmGrid::new(8, 1e6, 6.5e9).unwrap();
        let array = ArrayGeometry::xz_triangle(g.wavelength);
        let pose = Pose::default();
        let p = Vec3::new(1.0, 2.0, 0.3);
        let v = steering(&p, 1e-7, &pose, &array, &g).unwrap();
        let h: Vec<C64> = v.iter().map(|x| x * C64::new(0.0, 3.0)).collect();
        assert!((ls_gain(&p, 1e-7, &h, &pose, &array, &g).unwrap() - C64::new(0.0, 3.0)).norm() < 1e-12);
        // orthogonal residual: project v out of another steering vector
        let u = steering(&p, 3e-7, &pose, &array, &g).unwrap();
        let c = inner(&v, &u) / inner(&v, &v);
        let w: Vec<C64> = u.iter().zip(&v).map(|(a, b)| a - c * b).collect();
        assert!(inner(&v, &w).norm() < 1e-9);
        assert!(ls_gain(&p, 1e-7, &w, &pose, &array, &g).unwrap().norm() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h: Vec<C64> = (0..24).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let best = ls_gain(&p, 1e-7, &h, &pose, &array, &g).unwrap();
        let err = |a: C64| -> f64 { h.iter().zip(&v).map(|(x, y)| (x - a * y).norm_sqr()).sum() };
        for _ in 0..100 {
            let a = C64::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            assert!(err(best) <= err(a));
        }
    }

    fn brute_force(problem: &Problem, res: &[Vec<C64>], set: &FeasibleSet, taus: &TauGrid) -> (f64, Vec3, Vec<f64>) {
        let count = problem.count();
        let mut best = (f64::NEG_INFINITY, Vec3::zeros(), vec![]);
        for p in set.candidates() {
            // enumerate the full Cartesian product tau_grid^I
            let total = taus.len().pow(count as u32);
            for code in 0..total {
                let mut c = code;
                let choice: Vec<f64> = (0..count)
                    .map(|_| {
                        let k = c % taus.len();
                        c /= taus.len();
                        taus.values[k]
                    })
                    .collect();
                let v = objective(&p, &choice, res, &problem.poses(), &problem.array, &problem.grid).unwrap();
                if v > best.0 + 1e-12 * v.abs() {
                    best = (v, p, choice);
                }
            }
        }
        best
    }

    #[test]
    fn omp_matches_brute_force_on_micro_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for trial in 0..20 {
            let grid = OfdmGrid::new(2, 5e6, 6.5e9).unwrap();
            let array = ArrayGeometry::xz_triangle(grid.wavelength);
            let snaps: Vec<Snapshot> = (0..2)
                .map(|i| Snapshot {
                    cfr: (0..6).map(|_| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect(),
                    pose: Pose::at(Vec3::new(0.3 * i as f64, 0.0, 0.0)),
                })
                .collect();
            let problem = Problem::new(snaps, array, grid.clone()).unwrap();
            let set = FeasibleSet {
                distances: vec![1.0 + trial as f64 * 0.1],
                elevations: vec![0.1],
                azimuths: vec![0.3, 1.2, 2.5],
                center: Vec3::zeros(),
            };
            let taus = TauGrid::new(2, &grid).unwrap();
            assert_eq!(taus.len(), 4);
            let res: Vec<_> = problem.snapshots.iter().map(|s| s.cfr.clone()).collect();
            let fast = omp_step(&problem, &res, &set, &taus).unwrap();
            let (value, p, choice) = brute_force(&problem, &res, &set, &taus);
            assert_eq!(fast.position, p);
            assert_eq!(fast.taus, choice);
            assert!((fast.objective / value - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn omp_recovers_on_grid_source() {
        let grid = OfdmGrid::new(16, 2e6, 6.5e9).unwrap();
        let tau_grid = TauGrid::new(2, &grid).unwrap();
        let set = FeasibleSet {
            distances: vec![0.0, 1.5, 3.0],
            elevations: elevation_grid(6),
            azimuths: front_azimuth_grid(8),
            center: Vec3::new(0.2, 0.5, 0.0),
        };
        let truth = set.candidates()[40];
        let (mut s, _) = small_problem(&[(truth, 0.5)], 0.0, 3);
        s.time_offsets = vec![tau_grid.values[3], tau_grid.values[10], tau_grid.values[0], tau_grid.values[31]];
        let snaps = synthesize_cfr(&s, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let problem = Problem::from_scenario(&s, snaps).unwrap();
        let res: Vec<_> = problem.snapshots.iter().map(|x| x.cfr.clone()).collect();
        let out = omp_step(&problem, &res, &set, &tau_grid).unwrap();
        assert_eq!(out.position, truth);
        for i in 0..4 {
            assert_eq!(out.taus[i], s.time_offsets[i]);
            assert!((out.gains[i] - s.paths[0].gains[i]).norm() < 1e-9);
        }
    }

    fn state_with(problem: &Problem, est: Vec<PathEstimate>, taus: Vec<f64>) -> SolverState {
        let mut st = SolverState::new(problem, SolverConfig::desk());
        st.estimates = est;
        st.tau_hat = taus;
        st
    }

    #[test]
    fn ls_all_and_remove_with_true_paths() {
        let paths = [(Vec3::new(1.0, 3.0, 0.5), 0.4), (Vec3::new(-2.0, 4.0, 1.0), 0.2)];
        let (s, p) = small_problem(&paths, 0.0, 5);
        let est: Vec<PathEstimate> = s
            .paths
            .iter()
            .map(|x| PathEstimate { position: x.position, gains: vec![C64::new(0.0, 0.0); 4] })
            .collect();
        let mut st = state_with(&p, est, s.time_offsets.clone());
        ls_all(&p, &mut st).unwrap();
        for (e, t) in st.estimates.iter().zip(&s.paths) {
            for (a, b) in e.gains.iter().zip(&t.gains) {
                assert!((a - b).norm() < 1e-8);
            }
        }
        remove(&p, &mut st).unwrap();
        for (r, snap) in st.residuals.iter().zip(&p.snapshots) {
            let rn: f64 = r.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            let hn: f64 = snap.cfr.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            assert!(rn < 1e-10 * hn);
        }
        assert!(st.notes.is_empty());
    }

    #[test]
    fn ls_all_orthogonality_and_single_column() {
        let (s, p) = small_problem(&[(Vec3::new(1.0, 3.0, 0.5), 0.4)], 0.05, 6);
        let est = vec![
            PathEstimate { position: Vec3::new(1.1, 2.9, 0.4), gains: vec![C64::new(0.0, 0.0); 4] },
            PathEstimate { position: Vec3::new(-1.0, 2.0, 0.0), gains: vec![C64::new(0.0, 0.0); 4] },
        ];
        let mut st = state_with(&p, est, s.time_offsets.clone());
        ls_all(&p, &mut st).unwrap();
        remove(&p, &mut st).unwrap();
        for i in 0..4 {
            let hn: f64 = p.snapshots[i].cfr.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            let rn: f64 = st.residuals[i].iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            assert!(rn <= hn);
            for e in &st.estimates {
                let v = p.steer(&e.position, st.tau_hat[i], i).unwrap();
                assert!(inner(&v, &st.residuals[i]).norm() < 1e-8 * hn);
            }
        }
        let mut single = state_with(&p, vec![st.estimates[0].clone()], s.time_offsets.clone());
        ls_all(&p, &mut single).unwrap();
        for i in 0..4 {
            let g = ls_gain(&single.estimates[0].position, s.time_offsets[i], &p.snapshots[i].cfr, &p.snapshots[i].pose, &p.array, &p.grid).unwrap();
            assert!((g - single.estimates[0].gains[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn duplicate_estimates_are_regularized() {
        let (s, p) = small_problem(&[(Vec3::new(1.0, 3.0, 0.5), 0.4)], 0.0, 7);
        let e = PathEstimate { position: *s.source(), gains: vec![C64::new(0.0, 0.0); 4] };
        let mut st = state_with(&p, vec![e.clone(), e], s.time_offsets.clone());
        ls_all(&p, &mut st).unwrap();
        assert!(!st.notes.is_empty());
        remove(&p, &mut st).unwrap();
        assert!(st.residual_energy() < 1e-12 * energy(&p.snapshots.iter().map(|x| x.cfr.clone()).collect::<Vec<_>>()));
    }

    #[test]
    fn remove_without_estimates_is_identity() {
        let (_, p) = small_problem(&[(Vec3::new(1.0, 3.0, 0.5), 0.4)], 0.01, 9);
        let mut st = SolverState::new(&p, SolverConfig::desk());
        remove(&p, &mut st).unwrap();
        for (r, s) in st.residuals.iter().zip(&p.snapshots) {
            assert_eq!(r, &s.cfr);
        }
    }

    #[test]
    fn newton_converges_from_nearby_start() {
        let truth = Vec3::new(1.0, 3.0, 0.5);
        let (s, p) = small_problem(&[(truth, 0.4)], 0.0, 10);
        let start = truth + Vec3::new(0.05, -0.08, 0.03);
        let mut st = state_with(&p, vec![PathEstimate { position: start, gains: vec![C64::new(0.0, 0.0); 4] }], s.time_offsets.iter().map(|t| t + 2e-10).collect());
        ls_all(&p, &mut st).unwrap();
        remove(&p, &mut st).unwrap();
        let mut last = st.residual_energy();
        for _ in 0..20 {
            let outcome = newton_refine(&p, &mut st, 0).unwrap();
            remove(&p, &mut st).unwrap();
            let e = st.residual_energy();
            if outcome == NewtonOutcome::Accepted {
                assert!(e < last);
            } else {
                assert_eq!(e, last);
            }
            last = e;
        }
        assert!((st.estimates[0].position - truth).norm() < 1e-6, "{:?}", st.estimates[0].position - truth);
    }

    #[test]
    fn newton_at_optimum_does_not_move_far() {
        let truth = Vec3::new(1.0, 3.0, 0.5);
        let (s, p) = small_problem(&[(truth, 0.4)], 0.0, 11);
        let mut st = state_with(&p, vec![PathEstimate { position: truth, gains: s.paths[0].gains.clone() }], s.time_offsets.clone());
        let outcome = newton_refine(&p, &mut st, 0).unwrap();
        let moved = (st.estimates[0].position - truth).norm();
        // finite-difference noise only
        assert!(outcome != NewtonOutcome::Accepted || moved < 1e-7, "{outcome:?} moved {moved}");
    }

    #[test]
    fn vs_delay_init_cases() {
        let g = OfdmGrid::desk();
        let zero = Snapshot { cfr: vec![C64::new(0.0, 0.0); 192], pose: Pose::default() };
        assert!(vs_delay_init(&zero, 0.0, &g, 0.0).unwrap().is_none());
        // residual whose peak maps just below zero delay after offset removal
        let b = crate::signal::frequency_response(&Vec3::zeros(), 0.0, &Vec3::zeros(), &g);
        let snap = Snapshot { cfr: b.repeat(3), pose: Pose::default() };
        let out = vs_delay_init(&snap, -2e-9, &g, 0.0).unwrap().unwrap();
        assert!(out.clamped && out.distance == 0.0);
        let out = vs_delay_init(&snap, 2e-8, &g, 0.0).unwrap().unwrap();
        assert!((out.distance - 2e-8 * SPEED_OF_LIGHT).abs() < 1e-9);
    }

    #[test]
    fn vs_delay_init_finds_second_path() {
        let p1 = Vec3::new(1.0, 2.0, 0.3);
        let p2 = Vec3::new(-6.0, 9.0, 0.3);
        let (s, p) = small_problem(&[(p1, 0.5), (p2, 0.3)], 0.0, 12);
        let mut st = state_with(&p, vec![PathEstimate { position: p1, gains: s.paths[0].gains.clone() }], s.time_offsets.clone());
        remove(&p, &mut st).unwrap();
        let first = Snapshot { cfr: st.residuals[0].clone(), pose: p.snapshots[0].pose };
        let d = vs_delay_init(&first, s.time_offsets[0], &p.grid, 0.0).unwrap().unwrap();
        let tap = SPEED_OF_LIGHT / (p.grid.cir_len() as f64 * p.grid.delta_f);
        assert!((d.distance - p2.norm()).abs() <= tap, "{} vs {}", d.distance, p2.norm());
    }

    #[test]
    fn vs_set_cases() {
        let config = SolverConfig { e_vs: 1.0, eta_d: 4, ..SolverConfig::desk() };
        let set = vs_feasible_set(5.0, &config);
        assert_eq!(set.distances, vec![4.0, 4.25, 4.5, 4.75, 5.0, 5.25, 5.5, 5.75, 6.0]);
        let near = vs_feasible_set(0.1, &config);
        assert!(near.distances.iter().all(|d| *d >= 0.0));
        assert_eq!(near.distances[0], 0.0);
        assert_eq!(set.azimuths.len(), config.eta_theta);
        let spacing = set.azimuths[1] - set.azimuths[0];
        assert!((spacing - 2.0 * PI / config.eta_theta as f64).abs() < 1e-12);
    }
}
