//! Reference methods: a single OMP detection over the room box, and the
//! two-step pipeline that estimates one bearing per snapshot and
//! intersects them.

use std::f64::consts::PI;

use nalgebra::{Matrix2, Matrix3, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{from_spherical, Spherical, Vec3};
use crate::initializer::traditional_set;
use crate::nomp::{elevation_grid, front_azimuth_grid, omp_step, PathEstimate, Problem, SolverConfig, TauGrid};
use crate::signal::{ArrayGeometry, OfdmGrid, Snapshot, C64};

/// Bearings closer to parallel than this cannot be intersected.
const PARALLEL_TOLERANCE: f64 = 1e-6;
const ANGLE_FD_STEP: f64 = 1e-5;
const ANGLE_NEWTON_STEPS: usize = 20;

/// OMP over the room-derived set and the delay grid, without refinement.
pub fn omp_only(problem: &Problem, room_dims: [f64; 3], config: &SolverConfig) -> Result<PathEstimate> {
    problem.validate()?;
    let set = traditional_set(room_dims, config)?;
    let taus = TauGrid::new(config.eta_tau, &problem.grid)?;
    let residuals: Vec<Vec<C64>> = problem.snapshots.iter().map(|s| s.cfr.clone()).collect();
    let det = omp_step(problem, &residuals, &set, &taus)?;
    Ok(PathEstimate {
        position: det.position,
        gains: det.gains,
    })
}

/// Estimated arrival direction at one snapshot.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BearingObservation {
    pub origin: Vec3,
    /// Unit vector in the global frame.
    pub direction: Vec3,
}

impl BearingObservation {
    pub fn new(origin: Vec3, direction: Vec3) -> Result<Self> {
        let n = direction.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateGeometry("bearing direction has zero length".into()));
        }
        Ok(Self {
            origin,
            direction: direction / n,
        })
    }
}

/// Subcarrier-incoherent angular spectrum `Σ_n |aᴴ h_n|` for a local-frame
/// direction.
fn angular_power(local: &Vec3, snapshot: &Snapshot, array: &ArrayGeometry, grid: &OfdmGrid) -> f64 {
    let k = 2.0 * PI / grid.wavelength;
    let n = grid.n_subcarriers;
    let a: Vec<C64> = array.offsets.iter().map(|q| C64::from_polar(1.0, k * local.dot(q))).collect();
    (0..n)
        .map(|sc| {
            a.iter()
                .enumerate()
                .map(|(m, am)| am.conj() * snapshot.cfr[m * n + sc])
                .sum::<C64>()
                .norm()
        })
        .sum()
}

fn local_dir(phi: f64, theta: f64) -> Vec3 {
    from_spherical(&Spherical::new(1.0, phi, theta))
}

/// Arrival direction of the strongest path at one snapshot, in the global
/// frame: a front-hemisphere grid search followed by Newton steps in
/// elevation and azimuth.
pub fn estimate_bearing(snapshot: &Snapshot, array: &ArrayGeometry, grid: &OfdmGrid, config: &SolverConfig) -> Result<BearingObservation> {
    let f = |phi: f64, theta: f64| angular_power(&local_dir(phi, theta), snapshot, array, grid);
    let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
    for &phi in &elevation_grid(config.eta_phi) {
        for &theta in &front_azimuth_grid(config.eta_theta) {
            let v = f(phi, theta);
            if v > best.0 {
                best = (v, phi, theta);
            }
        }
    }
    let (mut value, mut phi, mut theta) = best;
    let cap = PI / config.eta_phi.min(config.eta_theta) as f64;
    let h = ANGLE_FD_STEP;
    for _ in 0..ANGLE_NEWTON_STEPS {
        let f0 = value;
        let (fpp, fmp, fpt, fmt) = (f(phi + h, theta), f(phi - h, theta), f(phi, theta + h), f(phi, theta - h));
        let grad = Vector2::new((fpp - fmp) / (2.0 * h), (fpt - fmt) / (2.0 * h));
        let cross = (f(phi + h, theta + h) - f(phi + h, theta - h) - f(phi - h, theta + h) + f(phi - h, theta - h)) / (4.0 * h * h);
        let hess = Matrix2::new((fpp - 2.0 * f0 + fmp) / (h * h), cross, cross, (fpt - 2.0 * f0 + fmt) / (h * h));
        let Some(chol) = (-hess).cholesky() else { break };
        let mut step = chol.solve(&grad);
        if step.norm() > cap {
            step *= cap / step.norm();
        }
        let (np, nt) = (phi + step[0], theta + step[1]);
        let nv = f(np, nt);
        if !(nv > value) {
            break;
        }
        (value, phi, theta) = (nv, np, nt);
    }
    let global = snapshot.pose.omega.apply(&local_dir(phi, theta));
    BearingObservation::new(snapshot.pose.delta, global)
}

/// Point closest to all bearing lines in the least-squares sense:
/// `Σ(I − uuᵀ) p = Σ(I − uuᵀ) δ`.
pub fn triangulate(bearings: &[BearingObservation]) -> Result<Vec3> {
    let spread = bearings
        .iter()
        .enumerate()
        .flat_map(|(i, a)| bearings[i + 1..].iter().map(move |b| a.direction.cross(&b.direction).norm()))
        .fold(0.0, f64::max);
    if bearings.len() < 2 || spread < PARALLEL_TOLERANCE {
        return Err(Error::Unlocalizable("bearings are parallel".into()));
    }
    let mut a = Matrix3::zeros();
    let mut b = Vec3::zeros();
    for obs in bearings {
        let proj = Matrix3::identity() - obs.direction * obs.direction.transpose();
        a += proj;
        b += proj * obs.origin;
    }
    a.cholesky()
        .map(|c| c.solve(&b))
        .ok_or_else(|| Error::Unlocalizable("bearing normal equations are singular".into()))
}

/// Two-step localization: one bearing per snapshot, then triangulation.
pub fn two_step_ls(problem: &Problem, config: &SolverConfig) -> Result<Vec3> {
    problem.validate()?;
    if problem.count() < 2 {
        return Err(Error::InvalidConfig("triangulation needs at least two snapshots".into()));
    }
    let bearings = problem
        .snapshots
        .iter()
        .map(|s| estimate_bearing(s, &problem.array, &problem.grid, config))
        .collect::<Result<Vec<_>>>()?;
    triangulate(&bearings)
}
