//! Fisher information for a single line-of-sight path observed by a virtual
//! (per-snapshot clock offsets) or real (one shared offset) large array.
//!
//! Parameter orderings:
//! - virtual: `[p, τ_1 … τ_I, γ_1, β_1, …, γ_I, β_I]`, dimension `3 + 3I`
//! - real: `[p, τ, γ_1, β_1, …, γ_I, β_I]`, dimension `4 + 2I`

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation, Vec3};
use crate::signal::{steering, ArrayGeometry, OfdmGrid, Scenario, SPEED_OF_LIGHT};

/// Relative eigenvalue floor below which an EFIM counts as singular.
pub const SINGULAR_RATIO: f64 = 1e-10;

/// One LoS path seen from `I` poses: everything the bounds depend on.
#[derive(Debug, Clone, PartialEq)]
pub struct LosGeometry {
    pub source: Vec3,
    pub poses: Vec<Pose>,
    /// Path amplitude `|α_i|` per snapshot.
    pub gammas: Vec<f64>,
    /// Path phase per snapshot; only the numeric oracle needs it.
    pub phases: Vec<f64>,
    pub time_offsets: Vec<f64>,
    pub noise_variance: f64,
    pub grid: OfdmGrid,
    pub array: ArrayGeometry,
}

impl LosGeometry {
    /// Takes path 0 of `scenario` and ignores every other path.
    pub fn from_scenario(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let path = &scenario.paths[0];
        let geo = Self {
            source: path.position,
            poses: scenario.trajectory.clone(),
            gammas: path.gains.iter().map(|g| g.norm()).collect(),
            phases: path.gains.iter().map(|g| g.arg()).collect(),
            time_offsets: scenario.time_offsets.clone(),
            noise_variance: scenario.noise_variance,
            grid: scenario.grid.clone(),
            array: scenario.array.clone(),
        };
        geo.validate()?;
        Ok(geo)
    }

    pub fn snapshot_count(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self) -> Result<()> {
        let count = self.poses.len();
        if count == 0 || self.gammas.len() != count || self.phases.len() != count || self.time_offsets.len() != count {
            return Err(Error::DimensionMismatch(format!(
                "{count} poses, {} gains, {} phases, {} offsets",
                self.gammas.len(),
                self.phases.len(),
                self.time_offsets.len()
            )));
        }
        if !(self.noise_variance > 0.0) {
            return Err(Error::InvalidScenario("Fisher information needs σ² > 0".into()));
        }
        if self.gammas.iter().any(|&g| !(g > 0.0)) {
            return Err(Error::InvalidScenario("every snapshot needs a positive path gain".into()));
        }
        for pose in &self.poses {
            if !((self.source - pose.delta).norm() > 1e-9) {
                return Err(Error::DegenerateGeometry("source coincides with a pose".into()));
            }
        }
        Ok(())
    }

    /// Unit arrival direction `(p − δ_i)/‖p − δ_i‖`.
    pub fn direction(&self, i: usize) -> Vec3 {
        (self.source - self.poses[i].delta).normalize()
    }

    /// `2π²Δf²MN(N+1)(N+2)/(3σ²)`, the delay information per unit `γ²`.
    pub fn delay_information(&self) -> f64 {
        let n = self.grid.n_subcarriers as f64;
        let m = self.array.len() as f64;
        2.0 * PI * PI * self.grid.delta_f.powi(2) * m * n * (n + 1.0) * (n + 2.0) / (3.0 * self.noise_variance)
    }
}

/// Nonzero FIM blocks of one snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotBlocks {
    pub pp: Matrix3<f64>,
    pub p_tau: Vec3,
    pub p_beta: Vec3,
    pub tau_tau: f64,
    pub beta_beta: f64,
    pub gamma_gamma: f64,
}

/// Closed-form blocks for every snapshot.
pub fn vla_fim_blocks(geo: &LosGeometry) -> Result<Vec<SnapshotBlocks>> {
    geo.validate()?;
    let n = geo.grid.n_subcarriers as f64;
    let m = geo.array.len() as f64;
    let s2 = geo.noise_variance;
    let lambda = geo.grid.wavelength;
    let k_tau = geo.delay_information();
    let sum_f2 = geo.grid.delta_f.powi(2) * n * (n + 1.0) * (n + 2.0) / 12.0;
    let c = SPEED_OF_LIGHT;
    Ok((0..geo.snapshot_count())
        .map(|i| {
            let pose = &geo.poses[i];
            let d = (geo.source - pose.delta).norm();
            let u = geo.direction(i);
            let proj = Matrix3::identity() - u * u.transpose();
            let g2 = geo.gammas[i].powi(2);
            let mut outer = Matrix3::zeros();
            let mut lin = Vec3::zeros();
            for q in &geo.array.offsets {
                let pq = proj * pose.omega.apply(q);
                outer += pq * pq.transpose();
                lin += pq;
            }
            let pp = (8.0 * PI * PI * g2 / s2)
                * (outer * (n / (lambda * lambda * d * d)) + u * u.transpose() * (m * sum_f2 / (c * c)));
            SnapshotBlocks {
                pp,
                p_tau: -u * (k_tau * g2 / c),
                p_beta: lin * (4.0 * PI * g2 * n / (s2 * lambda * d)),
                tau_tau: k_tau * g2,
                beta_beta: 2.0 * g2 * m * n / s2,
                gamma_gamma: 2.0 * m * n / s2,
            }
        })
        .collect())
}

/// Full FIM, position Schur complement and SPEB.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherBundle {
    pub fim: DMatrix<f64>,
    pub efim_pos: Matrix3<f64>,
    pub speb: f64,
}

/// `Σ_i (J_i^pp − J_i^pβ J_i^βp / J_i^ββ)`, shared by both array models.
fn gain_eliminated(blocks: &[SnapshotBlocks]) -> Result<Matrix3<f64>> {
    let mut acc = Matrix3::zeros();
    for b in blocks {
        if !(b.beta_beta > 0.0 && b.tau_tau > 0.0) {
            return Err(Error::Singular("nuisance block is not positive".into()));
        }
        acc += b.pp - b.p_beta * b.p_beta.transpose() / b.beta_beta;
    }
    Ok(acc)
}

/// Virtual-array position EFIM.
pub fn vla_efim_pos(blocks: &[SnapshotBlocks]) -> Result<Matrix3<f64>> {
    let mut v = gain_eliminated(blocks)?;
    for b in blocks {
        v -= b.p_tau * b.p_tau.transpose() / b.tau_tau;
    }
    Ok(symmetrize(v))
}

/// Real-array position EFIM: the delay nuisance is one shared scalar.
pub fn rla_efim_pos(blocks: &[SnapshotBlocks]) -> Result<Matrix3<f64>> {
    let mut r = gain_eliminated(blocks)?;
    let s: Vec3 = blocks.iter().map(|b| b.p_tau).sum();
    let t: f64 = blocks.iter().map(|b| b.tau_tau).sum();
    r -= s * s.transpose() / t;
    Ok(symmetrize(r))
}

fn symmetrize(m: Matrix3<f64>) -> Matrix3<f64> {
    (m + m.transpose()) * 0.5
}

/// Assembles the virtual-array FIM in the documented ordering.
pub fn vla_fim(blocks: &[SnapshotBlocks]) -> DMatrix<f64> {
    let count = blocks.len();
    let dim = 3 + 3 * count;
    let mut j = DMatrix::zeros(dim, dim);
    for (i, b) in blocks.iter().enumerate() {
        let tau = 3 + i;
        let gamma = 3 + count + 2 * i;
        let beta = gamma + 1;
        let mut pp = j.fixed_view_mut::<3, 3>(0, 0);
        pp += b.pp;
        for r in 0..3 {
            j[(r, tau)] = b.p_tau[r];
            j[(tau, r)] = b.p_tau[r];
            j[(r, beta)] = b.p_beta[r];
            j[(beta, r)] = b.p_beta[r];
        }
        j[(tau, tau)] = b.tau_tau;
        j[(gamma, gamma)] = b.gamma_gamma;
        j[(beta, beta)] = b.beta_beta;
    }
    j
}

/// Assembles the real-array FIM: delay blocks sum into one shared row.
pub fn rla_fim(blocks: &[SnapshotBlocks]) -> DMatrix<f64> {
    let dim = 4 + 2 * blocks.len();
    let mut j = DMatrix::zeros(dim, dim);
    for (i, b) in blocks.iter().enumerate() {
        let gamma = 4 + 2 * i;
        let beta = gamma + 1;
        let mut pp = j.fixed_view_mut::<3, 3>(0, 0);
        pp += b.pp;
        for r in 0..3 {
            j[(r, 3)] += b.p_tau[r];
            j[(3, r)] += b.p_tau[r];
            j[(r, beta)] = b.p_beta[r];
            j[(beta, r)] = b.p_beta[r];
        }
        j[(3, 3)] += b.tau_tau;
        j[(gamma, gamma)] = b.gamma_gamma;
        j[(beta, beta)] = b.beta_beta;
    }
    j
}

/// Position block of a generic FIM's Schur complement, computed directly
/// from the full matrix: `J_pp − J_pn J_nn⁻¹ J_np`.
pub fn schur_position_block(fim: &DMatrix<f64>) -> Result<Matrix3<f64>> {
    let dim = fim.nrows();
    if dim < 3 || fim.ncols() != dim {
        return Err(Error::DimensionMismatch(format!("{}×{} FIM", fim.nrows(), fim.ncols())));
    }
    let jpp = fim.view((0, 0), (3, 3)).into_owned();
    if dim == 3 {
        return Ok(Matrix3::from_iterator(jpp.iter().copied()));
    }
    let jpn = fim.view((0, 3), (3, dim - 3)).into_owned();
    let jnn = fim.view((3, 3), (dim - 3, dim - 3)).into_owned();
    let chol = jnn
        .cholesky()
        .ok_or_else(|| Error::Singular("nuisance block is not positive definite".into()))?;
    let s = jpp - &jpn * chol.solve(&jpn.transpose());
    Ok(symmetrize(Matrix3::from_iterator(s.iter().copied())))
}

/// `trace(X⁻¹)`, or infinity when `X` is numerically singular.
pub fn speb(efim: &Matrix3<f64>) -> f64 {
    let eig = SymmetricEigen::new(symmetrize(*efim));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min < SINGULAR_RATIO * max {
        return f64::INFINITY;
    }
    eig.eigenvalues.iter().map(|l| 1.0 / l).sum()
}

/// Moore-Penrose inverse through the eigendecomposition, dropping modes
/// below the singular threshold.
pub fn efim_pseudo_inverse(efim: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(symmetrize(*efim));
    let max = eig.eigenvalues.max();
    let mut inv = Matrix3::zeros();
    for k in 0..3 {
        let l = eig.eigenvalues[k];
        if max > 0.0 && l >= SINGULAR_RATIO * max {
            let v = eig.eigenvectors.column(k);
            inv += v * v.transpose() / l;
        }
    }
    inv
}

pub fn vla_bundle(geo: &LosGeometry) -> Result<FisherBundle> {
    let blocks = vla_fim_blocks(geo)?;
    let efim_pos = vla_efim_pos(&blocks)?;
    Ok(FisherBundle {
        fim: vla_fim(&blocks),
        speb: speb(&efim_pos),
        efim_pos,
    })
}

pub fn rla_bundle(geo: &LosGeometry) -> Result<FisherBundle> {
    let blocks = vla_fim_blocks(geo)?;
    let efim_pos = rla_efim_pos(&blocks)?;
    Ok(FisherBundle {
        fim: rla_fim(&blocks),
        speb: speb(&efim_pos),
        efim_pos,
    })
}

/// Range information intensity between snapshots `i` and `j`.
pub fn zeta(geo: &LosGeometry, i: usize, j: usize) -> f64 {
    let total: f64 = geo.gammas.iter().map(|g| g * g).sum();
    geo.delay_information() / SPEED_OF_LIGHT.powi(2) * (geo.gammas[i] * geo.gammas[j]).powi(2) / total
}

/// Closed-form `R^pp − V^pp`.
pub fn delta_fim(geo: &LosGeometry) -> Result<Matrix3<f64>> {
    geo.validate()?;
    let count = geo.snapshot_count();
    let dirs: Vec<Vec3> = (0..count).map(|i| geo.direction(i)).collect();
    let mut acc = Matrix3::zeros();
    for i in 0..count {
        for j in i + 1..count {
            let du = dirs[i] - dirs[j];
            acc += du * du.transpose() * zeta(geo, i, j);
        }
    }
    Ok(acc)
}

/// Closed-form `trace(R^pp − V^pp)`.
pub fn delta_tr(geo: &LosGeometry) -> Result<f64> {
    geo.validate()?;
    let count = geo.snapshot_count();
    let mut acc = 0.0;
    for i in 0..count {
        for j in i + 1..count {
            let cos = geo.direction(i).dot(&geo.direction(j)).clamp(-1.0, 1.0);
            acc += 2.0 * zeta(geo, i, j) * (1.0 - cos);
        }
    }
    Ok(acc)
}

/// Angle at the source between the two arrival directions.
pub fn rho(p: &Vec3, delta_i: &Vec3, delta_j: &Vec3) -> Result<f64> {
    let a = p - delta_i;
    let b = p - delta_j;
    if !(a.norm() > 1e-9 && b.norm() > 1e-9) {
        return Err(Error::DegenerateGeometry("source coincides with a pose".into()));
    }
    Ok((a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos())
}

/// Which delay model the numeric oracle perturbs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrayModel {
    Virtual,
    Real,
}

/// FIM by central differences of the noiseless model mean,
/// `(2/σ²) Re Σ ∂μᴴ ∂μ`. `step` is relative: positions move by `step` m,
/// delays by `step / (NΔf)`, amplitudes by `step·γ_i`, phases by `step` rad.
/// The real-array model uses the first snapshot's offset for all.
pub fn fim_numeric_oracle(geo: &LosGeometry, model: ArrayModel, step: f64) -> Result<DMatrix<f64>> {
    geo.validate()?;
    let count = geo.snapshot_count();
    let mut theta = vec![geo.source.x, geo.source.y, geo.source.z];
    match model {
        ArrayModel::Virtual => theta.extend(&geo.time_offsets),
        ArrayModel::Real => theta.push(geo.time_offsets[0]),
    }
    let gain_base = theta.len();
    for i in 0..count {
        theta.push(geo.gammas[i]);
        theta.push(geo.phases[i]);
    }
    let tau_scale = 1.0 / geo.grid.bandwidth();
    let steps: Vec<f64> = (0..theta.len())
        .map(|k| {
            if k < 3 {
                step
            } else if k < gain_base {
                step * tau_scale
            } else if (k - gain_base) % 2 == 0 {
                step * theta[k]
            } else {
                step
            }
        })
        .collect();

    let mean = |t: &[f64]| -> Result<Vec<Complex64>> {
        let p = Vec3::new(t[0], t[1], t[2]);
        let mut out = Vec::new();
        for i in 0..count {
            let tau = match model {
                ArrayModel::Virtual => t[3 + i],
                ArrayModel::Real => t[3],
            };
            let alpha = Complex64::from_polar(t[gain_base + 2 * i], t[gain_base + 2 * i + 1]);
            let v = steering(&p, tau, &geo.poses[i], &geo.array, &geo.grid)?;
            out.extend(v.into_iter().map(|x| alpha * x));
        }
        Ok(out)
    };

    let partials: Vec<Vec<Complex64>> = (0..theta.len())
        .map(|k| {
            let mut plus = theta.clone();
            let mut minus = theta.clone();
            plus[k] += steps[k];
            minus[k] -= steps[k];
            let (hp, hm) = (mean(&plus)?, mean(&minus)?);
            Ok(hp.iter().zip(&hm).map(|(a, b)| (a - b) / (2.0 * steps[k])).collect())
        })
        .collect::<Result<_>>()?;

    let dim = theta.len();
    let mut j = DMatrix::zeros(dim, dim);
    for a in 0..dim {
        for b in a..dim {
            let s: f64 = partials[a].iter().zip(&partials[b]).map(|(x, y)| (x.conj() * y).re).sum();
            j[(a, b)] = 2.0 * s / geo.noise_variance;
            j[(b, a)] = j[(a, b)];
        }
    }
    Ok(j)
}

/// Monte Carlo SPEB sweep over straight walks of increasing length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpebSweepConfig {
    /// Emitter relative to the first pose.
    pub source: [f64; 3],
    pub distances: Vec<f64>,
    pub snapshot_counts: Vec<usize>,
    pub trials: usize,
    /// SNR of the first snapshot, which sets σ².
    pub snr_db: f64,
    pub rotation_jitter_deg: f64,
    pub grid: OfdmGrid,
    pub array: Option<ArrayGeometry>,
}

impl Default for SpebSweepConfig {
    fn default() -> Self {
        Self {
            source: [2.0, 3.0, 1.0],
            distances: (1..=15).map(|k| 0.2 * k as f64).collect(),
            snapshot_counts: vec![2, 3, 4, 5],
            trials: 2000,
            snr_db: 10.0,
            rotation_jitter_deg: 5.0,
            grid: OfdmGrid::desk(),
            array: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpebRow {
    pub snapshots: usize,
    pub movement_m: f64,
    pub speb_vla_m2: f64,
    pub speb_rla_m2: f64,
    /// Standard error of the VLA mean.
    pub se_vla_m2: f64,
    pub se_rla_m2: f64,
    pub trials: usize,
}

pub const SPEB_CSV_HEADER: &str = "I,movement_m,speb_vla_m2,speb_rla_m2,se_vla_m2,se_rla_m2,trials";

impl SpebRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.6},{:.9e},{:.9e},{:.9e},{:.9e},{}",
            self.snapshots, self.movement_m, self.speb_vla_m2, self.speb_rla_m2, self.se_vla_m2, self.se_rla_m2, self.trials
        )
    }
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 || !mean.is_finite() {
        return (mean, f64::NAN);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Runs the sweep. Each trial draws one heading and one set of per-pose
/// rotations, reused across every distance and snapshot count so curves
/// share the same geometry draws.
pub fn speb_sweep<R: Rng + ?Sized>(config: &SpebSweepConfig, rng: &mut R) -> Result<Vec<SpebRow>> {
    if config.trials == 0 || config.distances.is_empty() || config.snapshot_counts.is_empty() {
        return Err(Error::InvalidConfig("sweep needs trials, distances and snapshot counts".into()));
    }
    if config.snapshot_counts.iter().any(|&c| c < 2) {
        return Err(Error::InvalidConfig("snapshot counts must be >= 2".into()));
    }
    let max_count = *config.snapshot_counts.iter().max().unwrap();
    let jitter = config.rotation_jitter_deg.to_radians();
    let draws: Vec<(f64, Vec<Rotation>)> = (0..config.trials)
        .map(|_| {
            let heading = rng.random_range(0.0..2.0 * PI);
            let rots = (0..max_count)
                .map(|_| {
                    let mut a = || if jitter > 0.0 { rng.random_range(-jitter..=jitter) } else { 0.0 };
                    let (y, p, r) = (a(), a(), a());
                    Rotation::from_axis_angles(y, p, r)
                })
                .collect();
            (heading, rots)
        })
        .collect();
    let source = Vec3::from(config.source);
    let array = config
        .array
        .clone()
        .unwrap_or_else(|| ArrayGeometry::xz_triangle(config.grid.wavelength));
    let noise_variance = 1.0 / source.norm_squared() / 10f64.powf(config.snr_db / 10.0);

    let mut rows = Vec::new();
    for &count in &config.snapshot_counts {
        for &dist in &config.distances {
            let mut vla = Vec::with_capacity(config.trials);
            let mut rla = Vec::with_capacity(config.trials);
            for (heading, rots) in &draws {
                let dir = Vec3::new(heading.cos(), heading.sin(), 0.0);
                let poses: Vec<Pose> = (0..count)
                    .map(|i| Pose::new(dir * (dist * i as f64 / (count - 1) as f64), rots[i]))
                    .collect();
                let gammas = poses.iter().map(|p| 1.0 / (source - p.delta).norm()).collect();
                let geo = LosGeometry {
                    source,
                    poses,
                    gammas,
                    phases: vec![0.0; count],
                    time_offsets: vec![0.0; count],
                    noise_variance,
                    grid: config.grid.clone(),
                    array: array.clone(),
                };
                let blocks = vla_fim_blocks(&geo)?;
                vla.push(speb(&vla_efim_pos(&blocks)?));
                rla.push(speb(&rla_efim_pos(&blocks)?));
            }
            let (mv, sv) = mean_se(&vla);
            let (mr, sr) = mean_se(&rla);
            rows.push(SpebRow {
                snapshots: count,
                movement_m: dist,
                speb_vla_m2: mv,
                speb_rla_m2: mr,
                se_vla_m2: sv,
                se_rla_m2: sr,
                trials: config.trials,
            });
        }
    }
    Ok(rows)
}
