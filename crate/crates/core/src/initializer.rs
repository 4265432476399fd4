//! Search-space initializers for the first NOMP iteration: the room box,
//! a perturbed oracle, and a small convolutional network.
//!
//! The network sees the feature tensor as an image with `M` channels,
//! 70 rows and `I` columns.

use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Vec3};
use crate::nomp::{elevation_grid, front_azimuth_grid, full_azimuth_grid, FeasibleSet, Problem, SolverConfig};
use crate::signal::{cir_from_snapshot, ArrayGeometry, OfdmGrid, Snapshot};

/// CIR taps kept per antenna.
pub const FEATURE_TAPS: usize = 32;
/// Rows of the feature tensor: magnitudes, phases, δ_i and Ω_i q_m.
pub const FEATURE_ROWS: usize = 2 * FEATURE_TAPS + 6;

/// Room-box set: shells out to the room diagonal, front half-plane only.
pub fn traditional_set(room_dims: [f64; 3], config: &SolverConfig) -> Result<FeasibleSet> {
    if room_dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::InvalidConfig(format!("room dimensions must be positive, got {room_dims:?}")));
    }
    let e_max = Vec3::from(room_dims).norm();
    Ok(FeasibleSet {
        distances: shells(e_max, config.eta_d),
        elevations: elevation_grid(config.eta_phi),
        azimuths: front_azimuth_grid(config.eta_theta),
        center: Vec3::zeros(),
    })
}

/// Ball set of radius `e_ps` around an initial guess, full azimuth circle.
pub fn ps_feasible_set(p_init: &Vec3, config: &SolverConfig) -> FeasibleSet {
    FeasibleSet {
        distances: shells(config.e_ps, config.eta_d),
        elevations: elevation_grid(config.eta_phi),
        azimuths: full_azimuth_grid(config.eta_theta),
        center: *p_init,
    }
}

fn shells(radius: f64, eta_d: usize) -> Vec<f64> {
    (0..=eta_d).map(|k| radius / eta_d as f64 * k as f64).collect()
}

/// Dense `70 × I × M` feature tensor, row-major in that order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub snapshots: usize,
    pub antennas: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(snapshots: usize, antennas: usize) -> Self {
        Self {
            snapshots,
            antennas,
            data: vec![0.0; FEATURE_ROWS * snapshots * antennas],
        }
    }

    pub fn shape(&self) -> [usize; 3] {
        [FEATURE_ROWS, self.snapshots, self.antennas]
    }

    pub fn get(&self, row: usize, i: usize, m: usize) -> f64 {
        self.data[(row * self.snapshots + i) * self.antennas + m]
    }

    fn set(&mut self, row: usize, i: usize, m: usize, v: f64) {
        let idx = (row * self.snapshots + i) * self.antennas + m;
        self.data[idx] = v;
    }

    pub fn to_nested(&self) -> Vec<Vec<Vec<f64>>> {
        (0..FEATURE_ROWS)
            .map(|r| (0..self.snapshots).map(|i| (0..self.antennas).map(|m| self.get(r, i, m)).collect()).collect())
            .collect()
    }

    pub fn from_nested(nested: &[Vec<Vec<f64>>]) -> Result<Self> {
        let bad = || Error::ModelShape("input tensor is not a regular 70 × I × M array".into());
        if nested.len() != FEATURE_ROWS || nested[0].is_empty() || nested[0][0].is_empty() {
            return Err(bad());
        }
        let (snapshots, antennas) = (nested[0].len(), nested[0][0].len());
        let mut t = Self::zeros(snapshots, antennas);
        for (r, rows) in nested.iter().enumerate() {
            if rows.len() != snapshots {
                return Err(bad());
            }
            for (i, cols) in rows.iter().enumerate() {
                if cols.len() != antennas {
                    return Err(bad());
                }
                for (m, v) in cols.iter().enumerate() {
                    t.set(r, i, m, *v);
                }
            }
        }
        Ok(t)
    }
}

/// Builds the network input from raw snapshots. When the transform is
/// shorter than 32 taps the missing rows stay zero.
pub fn build_features(snapshots: &[Snapshot], array: &ArrayGeometry, grid: &OfdmGrid) -> Result<FeatureTensor> {
    let m_count = array.len();
    let expected = grid.n_subcarriers * m_count;
    if snapshots.is_empty() {
        return Err(Error::DimensionMismatch("no snapshots".into()));
    }
    if let Some((i, s)) = snapshots.iter().enumerate().find(|(_, s)| s.cfr.len() != expected) {
        return Err(Error::DimensionMismatch(format!(
            "snapshot {i} has {} samples, expected {expected}",
            s.cfr.len()
        )));
    }
    let taps = FEATURE_TAPS.min(grid.cir_len());
    let mut t = FeatureTensor::zeros(snapshots.len(), m_count);
    for (i, snap) in snapshots.iter().enumerate() {
        let cir = cir_from_snapshot(snap, grid, taps)?;
        for m in 0..m_count {
            for k in 0..taps {
                let z = cir[(k, m)];
                t.set(k, i, m, z.norm());
                let phase = if z.norm() == 0.0 { 0.0 } else { wrap_angle(z.arg()) };
                t.set(FEATURE_TAPS + k, i, m, phase);
            }
            let q = snap.pose.omega.apply(&array.offsets[m]);
            for axis in 0..3 {
                t.set(2 * FEATURE_TAPS + axis, i, m, snap.pose.delta[axis]);
                t.set(2 * FEATURE_TAPS + 3 + axis, i, m, q[axis]);
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::None => x,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv2d {
        kernel: [usize; 2],
        in_channels: usize,
        out_channels: usize,
        padding: Padding,
        activation: Activation,
        /// `(out, in, row, col)` order.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
    /// Non-overlapping average pooling; `None` pools globally.
    AvgPool { kernel: Option<[usize; 2]> },
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
        activation: Activation,
        /// `(out, in)` order.
        weights: Vec<f64>,
        bias: Vec<f64>,
    },
}

impl Layer {
    fn kind(&self) -> &'static str {
        match self {
            Layer::Conv2d { .. } => "conv2d",
            Layer::AvgPool { .. } => "avgpool",
            Layer::Flatten => "flatten",
            Layer::Dense { .. } => "dense",
        }
    }
}

/// Wire form of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerSpec {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<Padding>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    activation: Option<Activation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    input_shape: [usize; 3],
    layers: Vec<LayerSpec>,
}

/// Tensor shape between layers: `(channels, height, width)` or a flat vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Image(usize, usize, usize),
    Flat(usize),
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Shape::Image(c, h, w) => write!(f, "{c}×{h}×{w}"),
            Shape::Flat(n) => write!(f, "{n}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralModel {
    /// `[70, I, M]`.
    pub input_shape: [usize; 3],
    pub layers: Vec<Layer>,
}

impl NeuralModel {
    /// Validates shapes, weight counts and finiteness.
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        let model = Self { input_shape, layers };
        model.check()?;
        Ok(model)
    }

    fn check(&self) -> Result<()> {
        let [rows, snaps, ants] = self.input_shape;
        if rows != FEATURE_ROWS || snaps == 0 || ants == 0 {
            return Err(Error::ModelShape(format!(
                "input shape must be [{FEATURE_ROWS}, I, M], got {:?}",
                self.input_shape
            )));
        }
        let mut shape = Shape::Image(ants, rows, snaps);
        let mut prev = "input".to_string();
        for (idx, layer) in self.layers.iter().enumerate() {
            let name = format!("layer {idx} ({})", layer.kind());
            shape = next_shape(layer, shape).map_err(|msg| {
                Error::ModelShape(format!("{name} does not fit the {shape} output of {prev}: {msg}"))
            })?;
            if let Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } = layer {
                if weights.iter().chain(bias).any(|x| !x.is_finite()) {
                    return Err(Error::ModelShape(format!("{name} has non-finite parameters")));
                }
            }
            prev = name;
        }
        if shape != Shape::Flat(3) {
            return Err(Error::ModelShape(format!("model output is {shape}, expected 3 values")));
        }
        Ok(())
    }

    /// Randomly initialized network in the declared layout: four 3×3
    /// same-padded relu convolutions with 32 filters, a global average pool,
    /// flatten, and a linear 32→3 dense layer. Weights are He-uniform,
    /// biases zero.
    pub fn standard<R: Rng + ?Sized>(snapshots: usize, antennas: usize, rng: &mut R) -> Result<Self> {
        const FILTERS: usize = 32;
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let bound = (6.0 / fan_in as f64).sqrt();
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let mut layers = Vec::new();
        let mut channels = antennas;
        for _ in 0..4 {
            layers.push(Layer::Conv2d {
                kernel: [3, 3],
                in_channels: channels,
                out_channels: FILTERS,
                padding: Padding::Same,
                activation: Activation::Relu,
                weights: uniform(FILTERS * channels * 9, channels * 9),
                bias: vec![0.0; FILTERS],
            });
            channels = FILTERS;
        }
        layers.push(Layer::AvgPool { kernel: None });
        layers.push(Layer::Flatten);
        layers.push(Layer::Dense {
            in_features: FILTERS,
            out_features: 3,
            activation: Activation::None,
            weights: uniform(3 * FILTERS, FILTERS),
            bias: vec![0.0; 3],
        });
        Self::new([FEATURE_ROWS, snapshots, antennas], layers)
    }

    pub fn to_json(&self) -> String {
        let spec = ModelSpec {
            input_shape: self.input_shape,
            layers: self.layers.iter().map(layer_to_spec).collect(),
        };
        serde_json::to_string(&spec).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(text).map_err(|e| parse_error(text, &e))?;
        let layers = spec
            .layers
            .into_iter()
            .enumerate()
            .map(|(idx, l)| layer_from_spec(idx, l))
            .collect::<Result<_>>()?;
        Self::new(spec.input_shape, layers)
    }
}

fn next_shape(layer: &Layer, shape: Shape) -> std::result::Result<Shape, String> {
    match (layer, shape) {
        (
            Layer::Conv2d {
                kernel,
                in_channels,
                out_channels,
                padding,
                weights,
                bias,
                ..
            },
            Shape::Image(c, h, w),
        ) => {
            if *in_channels != c {
                return Err(format!("expects {in_channels} input channels, gets {c}"));
            }
            let [kh, kw] = *kernel;
            if kh == 0 || kw == 0 {
                return Err("kernel dimensions must be >= 1".into());
            }
            if weights.len() != out_channels * in_channels * kh * kw || bias.len() != *out_channels {
                return Err(format!(
                    "needs {} weights and {out_channels} biases, has {} and {}",
                    out_channels * in_channels * kh * kw,
                    weights.len(),
                    bias.len()
                ));
            }
            match padding {
                Padding::Same if kh % 2 == 1 && kw % 2 == 1 => Ok(Shape::Image(*out_channels, h, w)),
                Padding::Same => Err("same padding needs odd kernel sizes".into()),
                Padding::Valid if kh <= h && kw <= w => Ok(Shape::Image(*out_channels, h - kh + 1, w - kw + 1)),
                Padding::Valid => Err("kernel larger than the input".into()),
            }
        }
        (Layer::AvgPool { kernel }, Shape::Image(c, h, w)) => match kernel {
            None => Ok(Shape::Image(c, 1, 1)),
            Some([kh, kw]) if *kh >= 1 && *kw >= 1 && *kh <= h && *kw <= w => Ok(Shape::Image(c, h / kh, w / kw)),
            Some(k) => Err(format!("pool kernel {k:?} does not fit")),
        },
        (Layer::Flatten, Shape::Image(c, h, w)) => Ok(Shape::Flat(c * h * w)),
        (
            Layer::Dense {
                in_features,
                out_features,
                weights,
                bias,
                ..
            },
            Shape::Flat(n),
        ) => {
            if *in_features != n {
                return Err(format!("expects {in_features} inputs, gets {n}"));
            }
            if weights.len() != in_features * out_features || bias.len() != *out_features {
                return Err(format!(
                    "needs {} weights and {out_features} biases, has {} and {}",
                    in_features * out_features,
                    weights.len(),
                    bias.len()
                ));
            }
            Ok(Shape::Flat(*out_features))
        }
        (_, Shape::Flat(_)) => Err("needs an image input; flatten came earlier".into()),
        (_, Shape::Image(..)) => Err("needs a flat input; add a flatten layer".into()),
    }
}

fn layer_to_spec(layer: &Layer) -> LayerSpec {
    let empty = LayerSpec {
        kind: layer.kind().into(),
        kernel: None,
        in_channels: None,
        out_channels: None,
        padding: None,
        activation: None,
        weights: None,
        bias: None,
    };
    match layer {
        Layer::Conv2d {
            kernel,
            in_channels,
            out_channels,
            padding,
            activation,
            weights,
            bias,
        } => LayerSpec {
            kernel: Some(kernel.to_vec()),
            in_channels: Some(*in_channels),
            out_channels: Some(*out_channels),
            padding: Some(*padding),
            activation: Some(*activation),
            weights: Some(weights.clone()),
            bias: Some(bias.clone()),
            ..empty
        },
        Layer::AvgPool { kernel } => LayerSpec {
            kernel: kernel.map(|k| k.to_vec()),
            ..empty
        },
        Layer::Flatten => empty,
        Layer::Dense {
            in_features,
            out_features,
            activation,
            weights,
            bias,
        } => LayerSpec {
            in_channels: Some(*in_features),
            out_channels: Some(*out_features),
            activation: Some(*activation),
            weights: Some(weights.clone()),
            bias: Some(bias.clone()),
            ..empty
        },
    }
}

fn layer_from_spec(idx: usize, spec: LayerSpec) -> Result<Layer> {
    let missing = |field: &str| Error::ModelShape(format!("layer {idx} ({}) is missing \"{field}\"", spec.kind));
    let kernel2 = |k: &Vec<usize>| -> Result<[usize; 2]> {
        <[usize; 2]>::try_from(k.as_slice())
            .map_err(|_| Error::ModelShape(format!("layer {idx} ({}) kernel must have two entries", spec.kind)))
    };
    Ok(match spec.kind.as_str() {
        "conv2d" => Layer::Conv2d {
            kernel: kernel2(spec.kernel.as_ref().ok_or_else(|| missing("kernel"))?)?,
            in_channels: spec.in_channels.ok_or_else(|| missing("in_channels"))?,
            out_channels: spec.out_channels.ok_or_else(|| missing("out_channels"))?,
            padding: spec.padding.unwrap_or(Padding::Same),
            activation: spec.activation.unwrap_or(Activation::None),
            weights: spec.weights.clone().ok_or_else(|| missing("weights"))?,
            bias: spec.bias.clone().ok_or_else(|| missing("bias"))?,
        },
        "avgpool" => Layer::AvgPool {
            kernel: spec.kernel.as_ref().map(kernel2).transpose()?,
        },
        "flatten" => Layer::Flatten,
        "dense" => Layer::Dense {
            in_features: spec.in_channels.ok_or_else(|| missing("in_channels"))?,
            out_features: spec.out_channels.ok_or_else(|| missing("out_channels"))?,
            activation: spec.activation.unwrap_or(Activation::None),
            weights: spec.weights.clone().ok_or_else(|| missing("weights"))?,
            bias: spec.bias.clone().ok_or_else(|| missing("bias"))?,
        },
        other => return Err(Error::ModelShape(format!("layer {idx} has unknown kind \"{other}\""))),
    })
}

/// Converts serde_json's line/column into a byte offset.
fn parse_error(text: &str, e: &serde_json::Error) -> Error {
    let mut offset = 0;
    for (n, line) in text.split_inclusive('\n').enumerate() {
        if n + 1 == e.line() {
            offset += e.column().min(line.len());
            break;
        }
        offset += line.len();
    }
    Error::ModelParse {
        offset: offset.min(text.len()),
        message: e.to_string(),
    }
}

pub fn load_model(path: &Path) -> Result<NeuralModel> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    NeuralModel::from_json(&text)
}

/// Runs the network on a feature tensor and returns the position guess.
pub fn neural_forward(model: &NeuralModel, features: &FeatureTensor) -> Result<Vec3> {
    let [rows, snaps, ants] = model.input_shape;
    if features.shape() != [rows, snaps, ants] {
        return Err(Error::ModelShape(format!(
            "features are {:?}, model expects {:?}",
            features.shape(),
            model.input_shape
        )));
    }
    // channels = antennas, height = feature rows, width = snapshots
    let mut shape = (ants, rows, snaps);
    let mut x: Vec<f64> = Vec::with_capacity(features.data.len());
    for m in 0..ants {
        for r in 0..rows {
            for i in 0..snaps {
                x.push(features.get(r, i, m));
            }
        }
    }
    for layer in &model.layers {
        match layer {
            Layer::Conv2d {
                kernel: [kh, kw],
                in_channels,
                out_channels,
                padding,
                activation,
                weights,
                bias,
            } => {
                let (_, h, w) = shape;
                let (ph, pw, oh, ow) = match padding {
                    Padding::Same => (kh / 2, kw / 2, h, w),
                    Padding::Valid => (0, 0, h - kh + 1, w - kw + 1),
                };
                let mut y = vec![0.0; out_channels * oh * ow];
                for o in 0..*out_channels {
                    for r in 0..oh {
                        for c in 0..ow {
                            let mut acc = bias[o];
                            for ci in 0..*in_channels {
                                for a in 0..*kh {
                                    let rr = (r + a) as isize - ph as isize;
                                    if rr < 0 || rr >= h as isize {
                                        continue;
                                    }
                                    for b in 0..*kw {
                                        let cc = (c + b) as isize - pw as isize;
                                        if cc < 0 || cc >= w as isize {
                                            continue;
                                        }
                                        let wi = ((o * in_channels + ci) * kh + a) * kw + b;
                                        acc += weights[wi] * x[(ci * h + rr as usize) * w + cc as usize];
                                    }
                                }
                            }
                            y[(o * oh + r) * ow + c] = activation.apply(acc);
                        }
                    }
                }
                x = y;
                shape = (*out_channels, oh, ow);
            }
            Layer::AvgPool { kernel } => {
                let (ch, h, w) = shape;
                let [kh, kw] = kernel.unwrap_or([h, w]);
                let (oh, ow) = (h / kh, w / kw);
                let mut y = vec![0.0; ch * oh * ow];
                for c in 0..ch {
                    for r in 0..oh {
                        for s in 0..ow {
                            let mut acc = 0.0;
                            for a in 0..kh {
                                for b in 0..kw {
                                    acc += x[(c * h + r * kh + a) * w + s * kw + b];
                                }
                            }
                            y[(c * oh + r) * ow + s] = acc / (kh * kw) as f64;
                        }
                    }
                }
                x = y;
                shape = (ch, oh, ow);
            }
            Layer::Flatten => {}
            Layer::Dense {
                in_features,
                out_features,
                activation,
                weights,
                bias,
            } => {
                x = (0..*out_features)
                    .map(|o| {
                        let row = &weights[o * in_features..(o + 1) * in_features];
                        activation.apply(bias[o] + row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>())
                    })
                    .collect();
            }
        }
    }
    Ok(Vec3::new(x[0], x[1], x[2]))
}

/// Source of the first iteration's search space.
#[derive(Debug, Clone)]
pub enum InitStrategy {
    Traditional {
        room_dims: [f64; 3],
    },
    /// Ground truth moved by a uniform draw from a ball of `max_error`.
    OraclePerturbed {
        truth: Vec3,
        max_error: f64,
        seed: u64,
        room_dims: Option<[f64; 3]>,
    },
    Neural {
        model: Arc<NeuralModel>,
        room_dims: Option<[f64; 3]>,
    },
}

impl InitStrategy {
    /// Room size available for the fallback set.
    pub fn room_dims(&self) -> Option<[f64; 3]> {
        match self {
            InitStrategy::Traditional { room_dims } => Some(*room_dims),
            InitStrategy::OraclePerturbed { room_dims, .. } | InitStrategy::Neural { room_dims, .. } => *room_dims,
        }
    }

    /// The guess the ball set is centered on, if this strategy uses one.
    pub fn initial_position(&self, problem: &Problem) -> Result<Option<Vec3>> {
        match self {
            InitStrategy::Traditional { .. } => Ok(None),
            InitStrategy::OraclePerturbed { truth, max_error, seed, .. } => {
                if !(*max_error >= 0.0) {
                    return Err(Error::InvalidConfig("max_error must be >= 0".into()));
                }
                Ok(Some(truth + perturbation(*max_error, *seed)))
            }
            InitStrategy::Neural { model, .. } => {
                let features = build_features(&problem.snapshots, &problem.array, &problem.grid)?;
                let p = neural_forward(model, &features)?;
                if p.iter().any(|x| !x.is_finite()) {
                    return Err(Error::ModelShape("network produced a non-finite position".into()));
                }
                Ok(Some(p))
            }
        }
    }

    pub fn ps_feasible_set(&self, problem: &Problem, config: &SolverConfig) -> Result<FeasibleSet> {
        match self {
            InitStrategy::Traditional { room_dims } => traditional_set(*room_dims, config),
            _ => {
                let p = self.initial_position(problem)?.expect("ball strategies give a position");
                Ok(ps_feasible_set(&p, config))
            }
        }
    }
}

/// Uniform draw from the ball of radius `max_error`.
pub fn perturbation(max_error: f64, seed: u64) -> Vec3 {
    if max_error == 0.0 {
        return Vec3::zeros();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if v.norm() > 1e-12 {
            break v.normalize();
        }
    };
    let u: f64 = rng.random_range(0.0..=1.0);
    dir * (max_error * u.cbrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;
    use crate::geometry::{Pose, Rotation};
    use crate::signal::C64;

    fn tiny_model(snaps: usize, ants: usize) -> NeuralModel {
        let conv_w = (0..2 * ants * 9).map(|k| ((k % 7) as f64 - 3.0) * 0.01).collect();
        NeuralModel::new(
            [FEATURE_ROWS, snaps, ants],
            vec![
                Layer::Conv2d {
                    kernel: [3, 3],
                    in_channels: ants,
                    out_channels: 2,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                    weights: conv_w,
                    bias: vec![0.1, -0.05],
                },
                Layer::AvgPool { kernel: None },
                Layer::Flatten,
                Layer::Dense {
                    in_features: 2,
                    out_features: 3,
                    activation: Activation::None,
                    weights: vec![1.0, 0.5, -0.3, 0.2, 0.7, 0.1],
                    bias: vec![0.0, 1.0, -1.0],
                },
            ],
        )
        .unwrap()
    }

    #[test]
    fn traditional_set_cases() {
        let config = SolverConfig::desk();
        let set = traditional_set([8.0, 6.0, 3.0], &config).unwrap();
        assert!((set.distances[4] - 10.44).abs() < 5e-3);
        assert_eq!(set.distances.len(), 5);
        assert_eq!(set.distances[0], 0.0);
        assert!(set.azimuths.iter().all(|t| (0.0..=PI).contains(t)));
        assert!(traditional_set([10.0, 0.0, 3.0], &config).is_err());
    }

    #[test]
    fn ps_set_cases() {
        let config = SolverConfig { e_ps: 1.2, eta_d: 4, ..SolverConfig::desk() };
        let p = Vec3::new(1.0, 2.0, 0.5);
        let set = ps_feasible_set(&p, &config);
        let expected = [0.0, 0.3, 0.6, 0.9, 1.2];
        for (a, b) in set.distances.iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        let cands = set.candidates();
        assert_eq!(cands[0], p);
        assert_eq!(cands.len(), 1 + 4 * (config.eta_phi + 1) * config.eta_theta);
        assert!(cands.iter().all(|c| (c - p).norm() <= 1.2 + 1e-12));
    }

    #[test]
    fn features_of_zero_cfr() {
        let grid = OfdmGrid::desk();
        let array = ArrayGeometry::xz_triangle(grid.wavelength);
        let snaps: Vec<Snapshot> = (0..7)
            .map(|i| Snapshot { cfr: vec![C64::new(0.0, 0.0); 192], pose: Pose::at(Vec3::new(0.3 * i as f64, 0.0, 0.0)) })
            .collect();
        let t = build_features(&snaps, &array, &grid).unwrap();
        assert_eq!(t.shape(), [70, 7, 3]);
        for r in 0..64 {
            for i in 0..7 {
                for m in 0..3 {
                    assert_eq!(t.get(r, i, m), 0.0);
                }
            }
        }
        for m in 0..3 {
            for axis in 0..3 {
                assert_eq!(t.get(64 + axis, 6, m), snaps[6].pose.delta[axis]);
                assert_eq!(t.get(67 + axis, 2, m), array.offsets[m][axis]);
            }
        }
    }

    #[test]
    fn features_pad_short_transforms_and_keep_phase_range() {
        let grid = OfdmGrid::new(8, 1e6, 6.5e9).unwrap();
        let array = ArrayGeometry::xz_triangle(grid.wavelength);
        let pose = Pose::new(Vec3::zeros(), Rotation::from_axis_angles(0.2, 0.0, 0.0));
        let cfr: Vec<C64> = (0..24).map(|k| C64::new((k as f64).cos(), (k as f64 * 0.7).sin())).collect();
        let t = build_features(&[Snapshot { cfr, pose }], &array, &grid).unwrap();
        assert_eq!(t.shape(), [70, 1, 3]);
        for m in 0..3 {
            for r in 16..32 {
                assert_eq!(t.get(r, 0, m), 0.0);
                assert_eq!(t.get(32 + r, 0, m), 0.0);
            }
            for r in 32..64 {
                let ph = t.get(r, 0, m);
                assert!(ph > -PI && ph <= PI);
            }
            let q = pose.omega.apply(&array.offsets[m]);
            assert_eq!(t.get(67, 0, m), q.x);
        }
        let bad = Snapshot { cfr: vec![C64::new(0.0, 0.0); 5], pose };
        assert!(build_features(&[bad], &array, &grid).is_err());
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut model = tiny_model(2, 3);
        for layer in model.layers.iter_mut() {
            if let Layer::Conv2d { weights, bias, .. } | Layer::Dense { weights, bias, .. } = layer {
                weights.iter_mut().for_each(|w| *w = 0.0);
                bias.iter_mut().for_each(|b| *b = 0.0);
            }
        }
        let mut t = FeatureTensor::zeros(2, 3);
        t.data.iter_mut().enumerate().for_each(|(k, x)| *x = k as f64 * 0.01);
        assert_eq!(neural_forward(&model, &t).unwrap(), Vec3::zeros());
    }

    #[test]
    fn final_bias_shifts_one_coordinate() {
        let model = tiny_model(2, 3);
        let mut t = FeatureTensor::zeros(2, 3);
        t.data.iter_mut().enumerate().for_each(|(k, x)| *x = ((k * 37) % 11) as f64 * 0.1);
        let base = neural_forward(&model, &t).unwrap();
        let mut shifted = model.clone();
        if let Some(Layer::Dense { bias, .. }) = shifted.layers.last_mut() {
            bias[1] *= 2.0;
        }
        let out = neural_forward(&shifted, &t).unwrap();
        assert_eq!(out.x, base.x);
        assert_eq!(out.z, base.z);
        assert!((out.y - base.y - 1.0).abs() < 1e-12);
        assert!(neural_forward(&model, &FeatureTensor::zeros(3, 3)).is_err());
    }

    #[test]
    fn json_round_trip_and_errors() {
        let model = tiny_model(2, 3);
        let text = model.to_json();
        assert_eq!(NeuralModel::from_json(&text).unwrap(), model);

        let cut = &text[..text.len() / 2];
        match NeuralModel::from_json(cut) {
            Err(Error::ModelParse { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected a parse error, got {other:?}"),
        }

        let wrong = text.replace("\"in_channels\":2,\"out_channels\":3", "\"in_channels\":5,\"out_channels\":3");
        match NeuralModel::from_json(&wrong) {
            Err(Error::ModelShape(msg)) => {
                assert!(msg.contains("layer 3 (dense)") && msg.contains("layer 2 (flatten)"), "{msg}");
            }
            other => panic!("expected a shape error, got {other:?}"),
        }
        assert!(matches!(NeuralModel::from_json("{\"input_shape\":[70,2,3],\"layers\":[]}"), Err(Error::ModelShape(_))));
    }

    #[test]
    fn standard_network_is_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = NeuralModel::standard(7, 3, &mut rng).unwrap();
        assert_eq!(model.layers.len(), 7);
        let mut t = FeatureTensor::zeros(7, 3);
        t.data.iter_mut().enumerate().for_each(|(k, x)| *x = (k as f64 * 0.37).sin());
        let a = neural_forward(&model, &t).unwrap();
        assert_eq!(a, neural_forward(&model, &t).unwrap());
        assert!(a.iter().all(|x| x.is_finite()));
        assert_eq!(NeuralModel::from_json(&model.to_json()).unwrap(), model);
    }

    #[test]
    fn perturbation_stays_in_ball() {
        assert_eq!(perturbation(0.0, 3), Vec3::zeros());
        for seed in 0..500 {
            let d = perturbation(1.2, seed);
            assert!(d.norm() <= 1.2);
        }
        assert_eq!(perturbation(1.2, 42), perturbation(1.2, 42));
    }
}
