//! Multipath OFDM channel model for a moving, rotating receive array.
//!
//! A CFR vector stacks all antennas and subcarriers in antenna-major order:
//! element `m * N + n` is antenna `m`, subcarrier `n`. This is the layout of
//! `a ⊗ b` with the antenna response outermost, and it is also the on-disk
//! order of the snapshot dump.

use std::f64::consts::PI;
use std::io::{Read, Write};

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Rotation, Vec3};

pub type C64 = Complex64;

/// Propagation speed in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Minimum source-to-array distance treated as non-degenerate.
const MIN_RANGE: f64 = 1e-9;

/// Antenna offsets relative to the device center plus the patch boresight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub offsets: Vec<Vec3>,
    pub boresight: Vec3,
}

impl ArrayGeometry {
    pub fn new(offsets: Vec<Vec3>, boresight: Vec3) -> Result<Self> {
        if offsets.is_empty() {
            return Err(Error::InvalidConfig("array needs at least one antenna".into()));
        }
        if offsets.iter().any(|q| q.iter().any(|x| !x.is_finite())) {
            return Err(Error::InvalidConfig("non-finite antenna offset".into()));
        }
        if (boresight.norm() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig("boresight must be a unit vector".into()));
        }
        Ok(Self { offsets, boresight })
    }

    /// Three-element x-z array with half-wavelength scale and boresight +y.
    pub fn xz_triangle(wavelength: f64) -> Self {
        let s = wavelength / 2.0;
        Self {
            offsets: vec![
                Vec3::new(-0.5 * s, 0.0, 0.5 * s),
                Vec3::new(0.5 * s, 0.0, 0.5 * s),
                Vec3::new(0.5 * s, 0.0, -0.5 * s),
            ],
            boresight: Vec3::y(),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    /// Whether a source at `p` lies in the reception hemisphere at `pose`.
    pub fn sees(&self, p: &Vec3, pose: &Pose) -> bool {
        let local = pose.omega.inverse_apply(&(p - pose.delta));
        local.dot(&self.boresight) > 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
struct GridParams {
    n_subcarriers: usize,
    delta_f: f64,
    carrier_freq: f64,
}

/// OFDM subcarrier layout. Relative frequencies are
/// `[-N/2, …, -1, 1, …, N/2] · Δf`; the DC subcarrier is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridParams", into = "GridParams")]
pub struct OfdmGrid {
    pub n_subcarriers: usize,
    pub delta_f: f64,
    pub carrier_freq: f64,
    pub wavelength: f64,
    pub subcarrier_freqs: Vec<f64>,
}

impl OfdmGrid {
    pub fn new(n_subcarriers: usize, delta_f: f64, carrier_freq: f64) -> Result<Self> {
        if n_subcarriers < 2 || n_subcarriers % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "subcarrier count must be even and >= 2, got {n_subcarriers}"
            )));
        }
        if !(delta_f > 0.0 && carrier_freq > 0.0) || !delta_f.is_finite() || !carrier_freq.is_finite() {
            return Err(Error::InvalidConfig("frequencies must be positive".into()));
        }
        let half = (n_subcarriers / 2) as i64;
        let subcarrier_freqs = (-half..=half)
            .filter(|&k| k != 0)
            .map(|k| k as f64 * delta_f)
            .collect();
        Ok(Self {
            n_subcarriers,
            delta_f,
            carrier_freq,
            wavelength: SPEED_OF_LIGHT / carrier_freq,
            subcarrier_freqs,
        })
    }

    /// 64 subcarriers at 1 MHz spacing around 6.5 GHz.
    pub fn desk() -> Self {
        Self::new(64, 1e6, 6.5e9).expect("valid preset")
    }

    /// 1644 subcarriers across 500 MHz around 6.5 GHz.
    pub fn paper() -> Self {
        Self::new(1644, 500e6 / 1644.0, 6.5e9).expect("valid preset")
    }

    /// Signed subcarrier index of element `n` (never zero).
    pub fn signed_index(&self, n: usize) -> i64 {
        let half = (self.n_subcarriers / 2) as i64;
        let k = n as i64 - half;
        if k >= 0 {
            k + 1
        } else {
            k
        }
    }

    /// Occupied bandwidth `N · Δf`.
    pub fn bandwidth(&self) -> f64 {
        self.n_subcarriers as f64 * self.delta_f
    }

    /// Delays are only identifiable modulo this period.
    pub fn delay_period(&self) -> f64 {
        1.0 / self.delta_f
    }

    /// Length of the inverse transform used for CIRs: the next power of two
    /// that holds every signed subcarrier index plus the DC bin.
    pub fn cir_len(&self) -> usize {
        (self.n_subcarriers + 1).next_power_of_two()
    }
}

impl TryFrom<GridParams> for OfdmGrid {
    type Error = Error;
    fn try_from(p: GridParams) -> Result<Self> {
        OfdmGrid::new(p.n_subcarriers, p.delta_f, p.carrier_freq)
    }
}

impl From<OfdmGrid> for GridParams {
    fn from(g: OfdmGrid) -> Self {
        GridParams {
            n_subcarriers: g.n_subcarriers,
            delta_f: g.delta_f,
            carrier_freq: g.carrier_freq,
        }
    }
}

/// Axis-aligned room, with per-face reflectivity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Room {
    pub min: Vec3,
    pub max: Vec3,
    /// Reflective flags in the order of [`Face::ALL`].
    pub reflective: [bool; 6],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Face {
    XMin,
    XMax,
    YMin,
    YMax,
    ZMin,
    ZMax,
}

impl Face {
    pub const ALL: [Face; 6] = [
        Face::XMin,
        Face::XMax,
        Face::YMin,
        Face::YMax,
        Face::ZMin,
        Face::ZMax,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

impl Room {
    pub fn new(min: Vec3, max: Vec3) -> Result<Self> {
        if (0..3).any(|k| !(max[k] > min[k])) {
            return Err(Error::InvalidScenario("room extents must be positive".into()));
        }
        Ok(Self {
            min,
            max,
            reflective: [true; 6],
        })
    }

    /// Room `[0, a] × [0, b] × [0, c]`.
    pub fn from_dims(a: f64, b: f64, c: f64) -> Result<Self> {
        Self::new(Vec3::zeros(), Vec3::new(a, b, c))
    }

    /// Keeps only the listed faces reflective.
    pub fn with_reflectors(mut self, faces: &[Face]) -> Self {
        self.reflective = [false; 6];
        for f in faces {
            self.reflective[f.index()] = true;
        }
        self
    }

    pub fn dims(&self) -> Vec3 {
        self.max - self.min
    }

    pub fn diagonal(&self) -> f64 {
        self.dims().norm()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] && p[k] <= self.max[k])
    }

    pub fn strictly_contains(&self, p: &Vec3) -> bool {
        (0..3).all(|k| p[k] > self.min[k] && p[k] < self.max[k])
    }

    pub fn translated(&self, offset: &Vec3) -> Self {
        Self {
            min: self.min + offset,
            max: self.max + offset,
            reflective: self.reflective,
        }
    }
}

/// Mirror image of the emitter produced by one or more wall reflections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSource {
    pub position: Vec3,
    pub attenuation: f64,
    pub order: u32,
}

/// One axis of the shoebox image lattice: `(coordinate, hits on low wall,
/// hits on high wall)` for every image up to `max_order` reflections.
fn axis_images(x: f64, lo: f64, hi: f64, max_order: u32) -> Vec<(f64, u32, u32)> {
    let len = hi - lo;
    let bound = max_order as i64;
    let mut out = Vec::new();
    for n in -bound..=bound {
        // direct lattice: x + 2nL, |n| hits on each wall
        let hits = n.unsigned_abs() as u32;
        if 2 * hits <= max_order {
            out.push((x + 2.0 * n as f64 * len, hits, hits));
        }
        // mirrored lattice: 2lo - x + 2nL, |2n - 1| hits alternating
        let total = (2 * n - 1).unsigned_abs() as u32;
        if total <= max_order {
            let low = if n <= 0 { (total + 1) / 2 } else { (total - 1) / 2 };
            out.push((2.0 * lo - x + 2.0 * n as f64 * len, low, total - low));
        }
    }
    out
}

/// Image sources of `ps` in a shoebox room, orders `1..=max_order`.
///
/// Images reflecting off a non-reflective face are dropped. The result is
/// ordered by reflection order, then lexicographically by position.
pub fn image_sources(
    room: &Room,
    ps: &Vec3,
    max_order: u32,
    reflection_coeff: f64,
) -> Result<Vec<ImageSource>> {
    if !room.strictly_contains(ps) {
        return Err(Error::InvalidScenario(format!(
            "source {:?} is not inside the room",
            ps.as_slice()
        )));
    }
    if !(reflection_coeff > 0.0 && reflection_coeff <= 1.0) {
        return Err(Error::InvalidScenario(
            "reflection coefficient must lie in (0, 1]".into(),
        ));
    }
    if max_order == 0 {
        return Ok(Vec::new());
    }
    let axes: Vec<_> = (0..3)
        .map(|k| axis_images(ps[k], room.min[k], room.max[k], max_order))
        .collect();
    let mut out = Vec::new();
    for &(x, xl, xh) in &axes[0] {
        for &(y, yl, yh) in &axes[1] {
            for &(z, zl, zh) in &axes[2] {
                let hits = [xl, xh, yl, yh, zl, zh];
                let order: u32 = hits.iter().sum();
                if order == 0 || order > max_order {
                    continue;
                }
                if hits.iter().zip(room.reflective).any(|(&h, r)| h > 0 && !r) {
                    continue;
                }
                out.push(ImageSource {
                    position: Vec3::new(x, y, z),
                    attenuation: reflection_coeff.powi(order as i32),
                    order,
                });
            }
        }
    }
    out.sort_by(|a, b| {
        a.order.cmp(&b.order).then_with(|| {
            a.position
                .iter()
                .zip(b.position.iter())
                .map(|(x, y)| x.total_cmp(y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    Ok(out)
}

/// Ground truth for one propagation path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathGroundTruth {
    pub position: Vec3,
    /// Per-snapshot complex gain; zero where the path is not received.
    pub gains: Vec<C64>,
    pub is_physical: bool,
}

/// Full synthetic measurement setup. Path 0 is the physical source.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub room: Option<Room>,
    pub paths: Vec<PathGroundTruth>,
    pub trajectory: Vec<Pose>,
    pub time_offsets: Vec<f64>,
    pub noise_variance: f64,
    pub grid: OfdmGrid,
    pub array: ArrayGeometry,
}

impl Scenario {
    pub fn snapshot_count(&self) -> usize {
        self.trajectory.len()
    }

    pub fn source(&self) -> &Vec3 {
        &self.paths[0].position
    }

    pub fn validate(&self) -> Result<()> {
        let count = self.trajectory.len();
        if count == 0 {
            return Err(Error::InvalidScenario("trajectory is empty".into()));
        }
        if self.time_offsets.len() != count {
            return Err(Error::InvalidScenario(format!(
                "{} time offsets for {count} poses",
                self.time_offsets.len()
            )));
        }
        if self.trajectory[0].delta.norm() != 0.0 {
            return Err(Error::InvalidScenario("first pose must sit at the origin".into()));
        }
        if self.paths.is_empty() {
            return Err(Error::InvalidScenario("no propagation paths".into()));
        }
        if let Some(path) = self.paths.iter().find(|p| p.gains.len() != count) {
            return Err(Error::InvalidScenario(format!(
                "path at {:?} has {} gains for {count} poses",
                path.position.as_slice(),
                path.gains.len()
            )));
        }
        if !(self.noise_variance >= 0.0) {
            return Err(Error::InvalidScenario("noise variance must be >= 0".into()));
        }
        Ok(())
    }

    /// Noise-free CFR of snapshot `i`.
    pub fn mean_cfr(&self, i: usize) -> Result<Vec<C64>> {
        let pose = &self.trajectory[i];
        let mut h = vec![C64::new(0.0, 0.0); self.grid.n_subcarriers * self.array.len()];
        for path in &self.paths {
            let alpha = path.gains[i];
            if alpha == C64::new(0.0, 0.0) {
                continue;
            }
            let v = steering(&path.position, self.time_offsets[i], pose, &self.array, &self.grid)?;
            for (hk, vk) in h.iter_mut().zip(&v) {
                *hk += alpha * vk;
            }
        }
        Ok(h)
    }
}

/// One capture: the stacked CFR and the pose it was taken at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub cfr: Vec<C64>,
    pub pose: Pose,
}

fn range_from(p: &Vec3, delta: &Vec3) -> Result<f64> {
    let r = (p - delta).norm();
    if !(r > MIN_RANGE) {
        return Err(Error::DegenerateGeometry(format!(
            "source {:?} coincides with the array center",
            p.as_slice()
        )));
    }
    Ok(r)
}

/// Far-field array response at `pose` for a source at `p`.
pub fn antenna_response(p: &Vec3, pose: &Pose, array: &ArrayGeometry, wavelength: f64) -> Result<Vec<C64>> {
    let r = range_from(p, &pose.delta)?;
    let u = (p - pose.delta) / r;
    Ok(antenna_response_dir(&u, &pose.omega, array, wavelength))
}

/// Array response for a known global arrival direction `u`.
pub(crate) fn antenna_response_dir(u: &Vec3, omega: &Rotation, array: &ArrayGeometry, wavelength: f64) -> Vec<C64> {
    let k = 2.0 * PI / wavelength;
    // u^T Ω q = (Ω^T u)^T q
    let local = omega.inverse_apply(u);
    array
        .offsets
        .iter()
        .map(|q| C64::from_polar(1.0, k * local.dot(q)))
        .collect()
}

/// Per-subcarrier response for a path of length `‖p − δ‖` and time offset
/// `tau`.
pub fn frequency_response(p: &Vec3, tau: f64, delta: &Vec3, grid: &OfdmGrid) -> Vec<C64> {
    let delay = (p - delta).norm() / SPEED_OF_LIGHT - tau;
    frequency_response_delay(delay, grid)
}

/// Frequency response for an effective delay `‖p − δ‖/c − τ`.
pub(crate) fn frequency_response_delay(delay: f64, grid: &OfdmGrid) -> Vec<C64> {
    grid.subcarrier_freqs
        .iter()
        .map(|f| C64::from_polar(1.0, -2.0 * PI * f * delay))
        .collect()
}

/// Stacked steering vector, antenna-major: entry `m·N + n = a_m · b_n`.
pub fn steering(p: &Vec3, tau: f64, pose: &Pose, array: &ArrayGeometry, grid: &OfdmGrid) -> Result<Vec<C64>> {
    let a = antenna_response(p, pose, array, grid.wavelength)?;
    let b = frequency_response(p, tau, &pose.delta, grid);
    Ok(kron(&a, &b))
}

pub(crate) fn kron(a: &[C64], b: &[C64]) -> Vec<C64> {
    let mut out = Vec::with_capacity(a.len() * b.len());
    for am in a {
        out.extend(b.iter().map(|bn| am * bn));
    }
    out
}

/// Draws the per-snapshot CFRs of `scenario`, adding circular complex
/// Gaussian noise with `E|w|² = σ²` per entry.
pub fn synthesize_cfr<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> Result<Vec<Snapshot>> {
    scenario.validate()?;
    let scale = (scenario.noise_variance / 2.0).sqrt();
    (0..scenario.snapshot_count())
        .map(|i| {
            let mut cfr = scenario.mean_cfr(i)?;
            if scenario.noise_variance > 0.0 {
                for h in cfr.iter_mut() {
                    let re: f64 = rng.sample(StandardNormal);
                    let im: f64 = rng.sample(StandardNormal);
                    *h += C64::new(re * scale, im * scale);
                }
            }
            Ok(Snapshot {
                cfr,
                pose: scenario.trajectory[i],
            })
        })
        .collect()
}

/// Full-length per-antenna CIR (`cir_len` taps × M), `1/P` normalized.
pub fn cir_full(snapshot: &Snapshot, grid: &OfdmGrid) -> Result<DMatrix<C64>> {
    let n = grid.n_subcarriers;
    if snapshot.cfr.is_empty() || snapshot.cfr.len() % n != 0 {
        return Err(Error::DimensionMismatch(format!(
            "CFR length {} is not a multiple of {n} subcarriers",
            snapshot.cfr.len()
        )));
    }
    let m_count = snapshot.cfr.len() / n;
    let p = grid.cir_len();
    let fft = FftPlanner::<f64>::new().plan_fft_inverse(p);
    let mut out = DMatrix::zeros(p, m_count);
    let mut buf = vec![C64::new(0.0, 0.0); p];
    for m in 0..m_count {
        buf.iter_mut().for_each(|x| *x = C64::new(0.0, 0.0));
        for k in 0..n {
            let bin = grid.signed_index(k).rem_euclid(p as i64) as usize;
            buf[bin] = snapshot.cfr[m * n + k];
        }
        fft.process(&mut buf);
        for (t, x) in buf.iter().enumerate() {
            out[(t, m)] = x / p as f64;
        }
    }
    Ok(out)
}

/// First `n_taps` CIR taps per antenna (`n_taps` × M).
pub fn cir_from_snapshot(snapshot: &Snapshot, grid: &OfdmGrid, n_taps: usize) -> Result<DMatrix<C64>> {
    let p = grid.cir_len();
    if n_taps > p {
        return Err(Error::InvalidConfig(format!(
            "{n_taps} taps requested from a {p}-point transform"
        )));
    }
    let full = cir_full(snapshot, grid)?;
    Ok(full.rows(0, n_taps).into_owned())
}

const DUMP_POSE_DOUBLES: usize = 15;

/// Writes snapshots in the little-endian dump format: a `{N, M, I}` u32
/// header, then per snapshot the pose as 15 doubles (δ, Ω row-major,
/// yaw/pitch/roll) followed by `N·M` interleaved re/im doubles.
pub fn write_snapshots<W: Write>(mut w: W, grid: &OfdmGrid, m_count: usize, snapshots: &[Snapshot]) -> std::io::Result<()> {
    let n = grid.n_subcarriers;
    for v in [n, m_count, snapshots.len()] {
        let v = u32::try_from(v).map_err(|_| std::io::Error::other("dimension exceeds u32"))?;
        w.write_all(&v.to_le_bytes())?;
    }
    for s in snapshots {
        if s.cfr.len() != n * m_count {
            return Err(std::io::Error::other("snapshot length does not match header"));
        }
        let m = s.pose.omega.matrix();
        let (yaw, pitch, roll) = s.pose.omega.axis_angles();
        let mut pose = Vec::with_capacity(DUMP_POSE_DOUBLES);
        pose.extend(s.pose.delta.iter());
        for r in 0..3 {
            for c in 0..3 {
                pose.push(m[(r, c)]);
            }
        }
        pose.extend([yaw, pitch, roll]);
        for x in pose {
            w.write_all(&x.to_le_bytes())?;
        }
        for h in &s.cfr {
            w.write_all(&h.re.to_le_bytes())?;
            w.write_all(&h.im.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parsed dump: `(N, M, snapshots)`.
pub fn read_snapshots<R: Read>(mut r: R) -> std::io::Result<(usize, usize, Vec<Snapshot>)> {
    fn u32_le<R: Read>(r: &mut R) -> std::io::Result<usize> {
        let mut b = [0u8; 4];
        r.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b) as usize)
    }
    fn f64_le<R: Read>(r: &mut R) -> std::io::Result<f64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        Ok(f64::from_le_bytes(b))
    }
    let n = u32_le(&mut r)?;
    let m = u32_le(&mut r)?;
    let count = u32_le(&mut r)?;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut pose = [0.0; DUMP_POSE_DOUBLES];
        for x in pose.iter_mut() {
            *x = f64_le(&mut r)?;
        }
        let delta = Vec3::new(pose[0], pose[1], pose[2]);
        let omega = Rotation::from_matrix(nalgebra::Matrix3::from_row_slice(&pose[3..12]))
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        let mut cfr = Vec::with_capacity(n * m);
        for _ in 0..n * m {
            let re = f64_le(&mut r)?;
            let im = f64_le(&mut r)?;
            cfr.push(C64::new(re, im));
        }
        out.push(Snapshot {
            cfr,
            pose: Pose::new(delta, omega),
        });
    }
    Ok((n, m, out))
}
