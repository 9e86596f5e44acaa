//! Location encoder: sinusoidal positional features followed by a
//! dropout-bearing MLP, mapping points on the sphere to d-dimensional
//! embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, TensorRef};

/// A point on the sphere: longitude in [-pi, pi), latitude in [-pi/2, pi/2],
/// both radians. Construction wraps longitude modulo 2*pi.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoLocation {
    lon: f64,
    lat: f64,
}

impl GeoLocation {
    pub fn new(lon: f64, lat: f64) -> Result<Self> {
        if !lon.is_finite() || !lat.is_finite() {
            return Err(Error::NonFinite(format!("GeoLocation({lon}, {lat})")));
        }
        if !(-std::f64::consts::FRAC_PI_2..=std::f64::consts::FRAC_PI_2).contains(&lat) {
            return Err(Error::Config(format!(
                "latitude {lat} outside [-pi/2, pi/2]"
            )));
        }
        let two_pi = 2.0 * std::f64::consts::PI;
        let mut wrapped = lon - two_pi * ((lon + std::f64::consts::PI) / two_pi).floor();
        // Rounding can land exactly on +pi; that is the same meridian as -pi.
        if wrapped >= std::f64::consts::PI {
            wrapped = -std::f64::consts::PI;
        }
        Ok(GeoLocation {
            lon: wrapped,
            lat,
        })
    }

    /// Area-uniform location from two unit uniforms:
    /// lon = 2*pi*u1 - pi, lat = asin(2*u2 - 1).
    pub fn from_uniform(u1: f64, u2: f64) -> Self {
        let lon = 2.0 * std::f64::consts::PI * u1 - std::f64::consts::PI;
        let lat = (2.0 * u2 - 1.0).clamp(-1.0, 1.0).asin();
        GeoLocation::new(lon, lat).expect("uniform draw is always in bounds")
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    /// Longitude normalized to [-1, 1).
    pub fn lon_unit(&self) -> f64 {
        self.lon / std::f64::consts::PI
    }

    /// Latitude normalized to [-1, 1].
    pub fn lat_unit(&self) -> f64 {
        2.0 * self.lat / std::f64::consts::PI
    }

    pub fn to_unit_vector(&self) -> [f64; 3] {
        let (sin_lat, cos_lat) = self.lat.sin_cos();
        let (sin_lon, cos_lon) = self.lon.sin_cos();
        [cos_lat * cos_lon, cos_lat * sin_lon, sin_lat]
    }

    pub fn from_unit_vector(v: [f64; 3]) -> Self {
        let lat = v[2].clamp(-1.0, 1.0).asin();
        let lon = v[1].atan2(v[0]);
        GeoLocation::new(lon, lat).expect("unit vector maps into bounds")
    }
}

/// Draw a location uniformly (by area) from the surface of the sphere.
pub fn uniform_sphere_sample<R: Rng>(rng: &mut R) -> GeoLocation {
    let u1 = rng.gen::<f64>();
    let u2 = rng.gen::<f64>();
    GeoLocation::from_uniform(u1, u2)
}

/// Which sinusoidal positional features feed the MLP.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PositionalEncoding {
    /// Single-scale features: [sin(pi*lon_unit), cos(pi*lon_unit),
    /// sin(pi*lat_unit), cos(pi*lat_unit)].
    Wrap,
    /// Multi-scale features over a geometric ladder of `scales` scales from
    /// `r_min` to `r_max`: per scale s, [sin(lon_unit/a_s), cos(lon_unit/a_s),
    /// sin(lat_unit/a_s), cos(lat_unit/a_s)] with a_s = r_min * g^s and
    /// g = (r_max/r_min)^(1/(scales-1)).
    Grid {
        scales: usize,
        r_min: f64,
        r_max: f64,
    },
}

impl PositionalEncoding {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PositionalEncoding::Wrap => Ok(()),
            PositionalEncoding::Grid {
                scales,
                r_min,
                r_max,
            } => {
                if scales < 1 {
                    return Err(Error::Config("grid encoding needs at least 1 scale".into()));
                }
                if !(r_min > 0.0 && r_min <= r_max && r_max.is_finite()) {
                    return Err(Error::Config(format!(
                        "grid scales must satisfy 0 < r_min <= r_max, got [{r_min}, {r_max}]"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Feature width: 4 for wrap, 4 * scales for grid.
    pub fn dim(&self) -> usize {
        match *self {
            PositionalEncoding::Wrap => 4,
            PositionalEncoding::Grid { scales, .. } => 4 * scales,
        }
    }

    pub fn encode(&self, loc: &GeoLocation) -> Vec<f64> {
        match *self {
            PositionalEncoding::Wrap => wrap_encode(loc).to_vec(),
            PositionalEncoding::Grid {
                scales,
                r_min,
                r_max,
            } => grid_features(loc, scales, r_min, r_max),
        }
    }
}

/// Single-scale sinusoidal features of a location.
pub fn wrap_encode(loc: &GeoLocation) -> [f64; 4] {
    let lon = std::f64::consts::PI * loc.lon_unit();
    let lat = std::f64::consts::PI * loc.lat_unit();
    [lon.sin(), lon.cos(), lat.sin(), lat.cos()]
}

/// Multi-scale sinusoidal features of a location; length 4 * scales.
pub fn grid_encode(loc: &GeoLocation, config: &PositionalEncoding) -> Result<Vec<f64>> {
    config.validate()?;
    match *config {
        PositionalEncoding::Grid {
            scales,
            r_min,
            r_max,
        } => Ok(grid_features(loc, scales, r_min, r_max)),
        PositionalEncoding::Wrap => Err(Error::Config(
            "grid_encode called with a wrap configuration".into(),
        )),
    }
}

fn grid_features(loc: &GeoLocation, scales: usize, r_min: f64, r_max: f64) -> Vec<f64> {
    let growth = if scales == 1 {
        1.0
    } else {
        (r_max / r_min).powf(1.0 / (scales - 1) as f64)
    };
    let lon = loc.lon_unit();
    let lat = loc.lat_unit();
    let mut out = Vec::with_capacity(4 * scales);
    let mut alpha = r_min;
    for s in 0..scales {
        if s > 0 {
            alpha *= growth;
        }
        out.push((lon / alpha).sin());
        out.push((lon / alpha).cos());
        out.push((lat / alpha).sin());
        out.push((lat / alpha).cos());
    }
    out
}

/// MLP activation for the hidden layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    /// Slope 0.01 on the negative side.
    LeakyRelu,
    Gelu,
}

impl Activation {
    pub(crate) fn apply_tape(&self, tape: &mut Tape, x: TensorRef) -> TensorRef {
        match self {
            Activation::Relu => tape.leaky_relu(x, 0.0),
            Activation::LeakyRelu => tape.leaky_relu(x, 0.01),
            Activation::Gelu => tape.gelu(x),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leakyrelu",
            Activation::Gelu => "gelu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leakyrelu" => Ok(Activation::LeakyRelu),
            "gelu" => Ok(Activation::Gelu),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Whether dropout masks are sampled (training) or skipped (evaluation).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    Train,
    Eval,
}

/// The trainable location encoder: positional features into an MLP with
/// `hidden` layers of `width` units, ending in a linear map to `out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationEncoderParams {
    pub positional: PositionalEncoding,
    pub activation: Activation,
    /// Dropout rate D in [0, 1) applied after each hidden activation during
    /// training; survivors are scaled by 1/(1 - D).
    pub dropout: f64,
    weights: Vec<Matrix>,
    biases: Vec<Matrix>,
}

/// Tape handles for one registration of the encoder parameters.
pub struct EncoderVars {
    weights: Vec<TensorRef>,
    biases: Vec<TensorRef>,
}

impl LocationEncoderParams {
    /// Glorot-uniform initialization of all layers.
    pub fn init<R: Rng>(
        positional: PositionalEncoding,
        activation: Activation,
        dropout: f64,
        hidden_layers: usize,
        hidden_units: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        positional.validate()?;
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Config(format!("dropout rate {dropout} outside [0, 1)")));
        }
        if hidden_layers < 1 || hidden_units < 1 || out_dim < 1 {
            return Err(Error::Config(
                "encoder needs at least one hidden layer, one unit, and one output dim".into(),
            ));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut fan_in = positional.dim();
        for _ in 0..hidden_layers {
            weights.push(Matrix::glorot_uniform(fan_in, hidden_units, rng));
            biases.push(Matrix::zeros(1, hidden_units));
            fan_in = hidden_units;
        }
        weights.push(Matrix::glorot_uniform(fan_in, out_dim, rng));
        biases.push(Matrix::zeros(1, out_dim));
        Ok(LocationEncoderParams {
            positional,
            activation,
            dropout,
            weights,
            biases,
        })
    }

    pub fn output_dim(&self) -> usize {
        self.weights.last().expect("at least one layer").cols()
    }

    pub fn hidden_layers(&self) -> usize {
        self.weights.len() - 1
    }

    pub fn hidden_units(&self) -> usize {
        self.weights[0].cols()
    }

    /// Parameter matrices in canonical order: w0, b0, w1, b1, ...
    pub fn blocks(&self) -> Vec<&Matrix> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(w);
            out.push(b);
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Replace all parameter matrices; blocks must be in canonical order.
    pub fn with_blocks(&self, blocks: &[Matrix]) -> Result<Self> {
        if blocks.len() != 2 * self.weights.len() {
            return Err(Error::Shape(format!(
                "encoder expects {} parameter blocks, got {}",
                2 * self.weights.len(),
                blocks.len()
            )));
        }
        let mut clone = self.clone();
        for (i, block) in blocks.iter().enumerate() {
            let target = if i % 2 == 0 {
                &mut clone.weights[i / 2]
            } else {
                &mut clone.biases[i / 2]
            };
            if target.shape() != block.shape() {
                return Err(Error::Shape(format!(
                    "block {i}: expected {:?}, got {:?}",
                    target.shape(),
                    block.shape()
                )));
            }
            *target = block.clone();
        }
        Ok(clone)
    }

    pub(crate) fn from_parts(
        positional: PositionalEncoding,
        activation: Activation,
        dropout: f64,
        weights: Vec<Matrix>,
        biases: Vec<Matrix>,
    ) -> Result<Self> {
        positional.validate()?;
        if weights.len() != biases.len() || weights.is_empty() {
            return Err(Error::Shape("encoder layer lists are inconsistent".into()));
        }
        Ok(LocationEncoderParams {
            positional,
            activation,
            dropout,
            weights,
            biases,
        })
    }

    pub(crate) fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub(crate) fn biases(&self) -> &[Matrix] {
        &self.biases
    }

    /// Register parameters as gradient-tracked leaves.
    pub fn register(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            weights: self.weights.iter().map(|w| tape.leaf(w.clone())).collect(),
            biases: self.biases.iter().map(|b| tape.leaf(b.clone())).collect(),
        }
    }

    /// Register parameters as constants (no gradient flow; evaluation passes).
    pub fn register_frozen(&self, tape: &mut Tape) -> EncoderVars {
        EncoderVars {
            weights: self
                .weights
                .iter()
                .map(|w| tape.constant(w.clone()))
                .collect(),
            biases: self
                .biases
                .iter()
                .map(|b| tape.constant(b.clone()))
                .collect(),
        }
    }
}

impl EncoderVars {
    /// Rebuild from refs laid out in canonical block order (w0, b0, w1, b1, ...).
    pub fn from_refs(refs: &[TensorRef]) -> Self {
        assert!(refs.len() % 2 == 0 && !refs.is_empty());
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in refs.chunks(2) {
            weights.push(pair[0]);
            biases.push(pair[1]);
        }
        EncoderVars { weights, biases }
    }

    /// Refs in canonical block order, matching [`LocationEncoderParams::blocks`].
    pub fn refs(&self) -> Vec<TensorRef> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.push(*w);
            out.push(*b);
        }
        out
    }
}

/// Encode a batch on the tape. Row i of the result is the embedding of
/// `locs[i]`; in train mode each row's dropout masks come from an
/// independent substream seeded off `rng`, so a batch of one behaves
/// exactly like [`encode`].
pub fn encode_batch_tape(
    tape: &mut Tape,
    params: &LocationEncoderParams,
    vars: &EncoderVars,
    locs: &[GeoLocation],
    mode: EncodeMode,
    mut rng: Option<&mut ChaCha12Rng>,
) -> Result<TensorRef> {
    let n = locs.len();
    let feat_dim = params.positional.dim();
    let mut features = Matrix::zeros(n, feat_dim);
    for (i, loc) in locs.iter().enumerate() {
        features
            .row_mut(i)
            .copy_from_slice(&params.positional.encode(loc));
    }
    let mut x = tape.constant(features);

    let use_dropout = mode == EncodeMode::Train && params.dropout > 0.0;
    let mut row_rngs: Vec<ChaCha12Rng> = Vec::new();
    if use_dropout {
        let rng = rng
            .as_deref_mut()
            .ok_or_else(|| Error::Config("train-mode encode with dropout needs an rng".into()))?;
        row_rngs = (0..n)
            .map(|_| ChaCha12Rng::seed_from_u64(rng.gen::<u64>()))
            .collect();
    }

    let layers = params.weights.len();
    for layer in 0..layers {
        x = tape.linear(x, vars.weights[layer], vars.biases[layer]);
        if layer + 1 < layers {
            x = params.activation.apply_tape(tape, x);
            if use_dropout {
                let width = params.weights[layer].cols();
                let keep_scale = 1.0 / (1.0 - params.dropout);
                let mut mask = Matrix::zeros(n, width);
                for (r, row_rng) in row_rngs.iter_mut().enumerate() {
                    for v in mask.row_mut(r) {
                        *v = if row_rng.gen::<f64>() >= params.dropout {
                            keep_scale
                        } else {
                            0.0
                        };
                    }
                }
                let mask = tape.constant(mask);
                x = tape.mul_elem(x, mask);
            }
        }
    }
    Ok(x)
}

/// Embedding of one location as plain values.
pub fn encode(
    loc: &GeoLocation,
    params: &LocationEncoderParams,
    mode: EncodeMode,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<Vec<f64>> {
    let m = encode_batch(std::slice::from_ref(loc), params, mode, rng)?;
    Ok(m.row(0).to_vec())
}

/// Embeddings of a batch as plain values (row i is locs[i]).
pub fn encode_batch(
    locs: &[GeoLocation],
    params: &LocationEncoderParams,
    mode: EncodeMode,
    rng: Option<&mut ChaCha12Rng>,
) -> Result<Matrix> {
    if locs.is_empty() {
        return Ok(Matrix::zeros(0, params.output_dim()));
    }
    let mut tape = Tape::new();
    let vars = params.register_frozen(&mut tape);
    let out = encode_batch_tape(&mut tape, params, &vars, locs, mode, rng)?;
    Ok(tape.value(out).clone())
}
