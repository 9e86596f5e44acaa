//! Pre-training objectives: positive/negative pair construction over a
//! mini-batch and the NCE, MC (InfoNCE-style), and MSE losses built on them.
//!
//! Pair sets come from three sampling methods, combined per configuration:
//! in-batch mismatches (B), fresh uniform sphere locations paired against
//! real images (L), and two dropout-perturbed encodings of the same
//! locations (D).

use rand_chacha::ChaCha12Rng;

use crate::dataset::Batch;
use crate::encoder::{encode_batch_tape, uniform_sphere_sample, EncodeMode, EncoderVars,
    GeoLocation, LocationEncoderParams};
use crate::error::{Error, Result};
use crate::nn::LinearVars;
use crate::tensor::{Tape, TensorRef};

/// Similarity function used to score a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimilarityKind {
    Cosine,
    Dot,
}

/// One (left, right) embedding pair, with the anchor index that groups it
/// for the per-anchor softmax of the MC loss.
#[derive(Debug, Clone, Copy)]
pub struct Pair {
    pub left: TensorRef,
    pub right: TensorRef,
    pub anchor: usize,
}

/// Positive and negative pairs scored under one similarity function.
#[derive(Debug)]
pub struct PairSet {
    similarity: SimilarityKind,
    positives: Vec<Pair>,
    negatives: Vec<Pair>,
}

impl PairSet {
    pub fn new(similarity: SimilarityKind) -> Self {
        PairSet {
            similarity,
            positives: Vec::new(),
            negatives: Vec::new(),
        }
    }

    pub fn push_positive(&mut self, left: TensorRef, right: TensorRef, anchor: usize) {
        self.positives.push(Pair { left, right, anchor });
    }

    pub fn push_negative(&mut self, left: TensorRef, right: TensorRef, anchor: usize) {
        self.negatives.push(Pair { left, right, anchor });
    }

    pub fn positives(&self) -> &[Pair] {
        &self.positives
    }

    pub fn negatives(&self) -> &[Pair] {
        &self.negatives
    }

    pub fn similarity(&self) -> SimilarityKind {
        self.similarity
    }

    fn score(&self, tape: &mut Tape, pair: &Pair) -> Result<TensorRef> {
        match self.similarity {
            SimilarityKind::Cosine => tape.cosine_similarity(pair.left, pair.right),
            SimilarityKind::Dot => Ok(tape.dot(pair.left, pair.right)),
        }
    }
}

/// Extract every row of an N x d matrix node as 1 x d nodes.
fn rows_of(tape: &mut Tape, m: TensorRef) -> Vec<TensorRef> {
    (0..tape.value(m).rows()).map(|i| tape.row(m, i)).collect()
}

/// P^X and N^B of one mini-batch: N matched (i, i) positives and the
/// N(N-1) mismatched (i, j) pairs as negatives anchored at i.
pub fn build_inbatch_pairs(
    tape: &mut Tape,
    loc_emb: TensorRef,
    img_emb: TensorRef,
) -> Result<PairSet> {
    let n = tape.value(loc_emb).rows();
    if tape.value(img_emb).rows() != n || tape.value(loc_emb).cols() != tape.value(img_emb).cols()
    {
        return Err(Error::Shape(format!(
            "in-batch pairs need matching embeddings, got {:?} and {:?}",
            tape.value(loc_emb).shape(),
            tape.value(img_emb).shape()
        )));
    }
    if n < 2 {
        return Err(Error::Usage(format!(
            "in-batch negatives need a batch of at least 2, got {n}"
        )));
    }
    let locs = rows_of(tape, loc_emb);
    let imgs = rows_of(tape, img_emb);
    let mut set = PairSet::new(SimilarityKind::Cosine);
    for i in 0..n {
        set.push_positive(locs[i], imgs[i], i);
        for (j, img) in imgs.iter().enumerate() {
            if j != i {
                set.push_negative(locs[i], *img, i);
            }
        }
    }
    Ok(set)
}

/// N^L: for each image i, `count_per_image` fresh uniform sphere locations
/// encoded in train mode and paired against image i as negatives anchored
/// at i. Locations are resampled on every call.
pub fn build_negative_location_pairs(
    tape: &mut Tape,
    params: &LocationEncoderParams,
    enc_vars: &EncoderVars,
    img_emb: TensorRef,
    count_per_image: usize,
    rng: &mut ChaCha12Rng,
) -> Result<PairSet> {
    if count_per_image < 1 {
        return Err(Error::Config(
            "negative location sampling needs count >= 1".into(),
        ));
    }
    let n = tape.value(img_emb).rows();
    let sampled: Vec<GeoLocation> = (0..n * count_per_image)
        .map(|_| uniform_sphere_sample(rng))
        .collect();
    let neg_emb = encode_batch_tape(tape, params, enc_vars, &sampled, EncodeMode::Train, Some(rng))?;
    let neg_rows = rows_of(tape, neg_emb);
    let img_rows = rows_of(tape, img_emb);
    let mut set = PairSet::new(SimilarityKind::Cosine);
    for i in 0..n {
        for c in 0..count_per_image {
            set.push_negative(neg_rows[i * count_per_image + c], img_rows[i], i);
        }
    }
    Ok(set)
}

/// P^D and N^D: two train-mode passes over the same locations with
/// independent dropout masks give E and E'; (E_i, E'_i) are positives and
/// (E_i, E'_j), j != i, negatives anchored at i.
pub fn build_simcse_pairs(
    tape: &mut Tape,
    params: &LocationEncoderParams,
    enc_vars: &EncoderVars,
    locations: &[GeoLocation],
    rng: &mut ChaCha12Rng,
) -> Result<PairSet> {
    let n = locations.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "dropout-pair sampling needs a batch of at least 2, got {n}"
        )));
    }
    let first = encode_batch_tape(tape, params, enc_vars, locations, EncodeMode::Train, Some(rng))?;
    let second =
        encode_batch_tape(tape, params, enc_vars, locations, EncodeMode::Train, Some(rng))?;
    let e = rows_of(tape, first);
    let e_prime = rows_of(tape, second);
    let mut set = PairSet::new(SimilarityKind::Cosine);
    for i in 0..n {
        set.push_positive(e[i], e_prime[i], i);
        for (j, ep) in e_prime.iter().enumerate() {
            if j != i {
                set.push_negative(e[i], *ep, i);
            }
        }
    }
    Ok(set)
}

/// Binary noise-contrastive loss:
/// -mean over positives of log sigma(s) - mean over negatives of
/// log(1 - sigma(s)). Either set may be empty (its term drops); both empty
/// is an error.
pub fn nce_loss(tape: &mut Tape, pairs: &PairSet) -> Result<TensorRef> {
    if pairs.positives.is_empty() && pairs.negatives.is_empty() {
        return Err(Error::Empty("nce_loss with no pairs at all".into()));
    }
    let mut terms: Vec<TensorRef> = Vec::new();
    if !pairs.positives.is_empty() {
        let mut logs = Vec::with_capacity(pairs.positives.len());
        for pair in &pairs.positives {
            let s = pairs.score(tape, pair)?;
            logs.push(tape.log_sigmoid(s));
        }
        let mean = tape.mean_scalars(&logs);
        terms.push(tape.scale(mean, -1.0));
    }
    if !pairs.negatives.is_empty() {
        let mut logs = Vec::with_capacity(pairs.negatives.len());
        for pair in &pairs.negatives {
            let s = pairs.score(tape, pair)?;
            // log(1 - sigma(s)) = log sigma(-s)
            let neg_s = tape.scale(s, -1.0);
            logs.push(tape.log_sigmoid(neg_s));
        }
        let mean = tape.mean_scalars(&logs);
        terms.push(tape.scale(mean, -1.0));
    }
    Ok(match terms.len() {
        1 => terms[0],
        _ => tape.add(terms[0], terms[1]),
    })
}

/// Multi-class (InfoNCE-form) loss with temperature: the mean over positives
/// of -log softmax of the positive's similarity against the similarities of
/// the negatives sharing its anchor.
pub fn mc_loss(tape: &mut Tape, pairs: &PairSet, tau: f64) -> Result<TensorRef> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("mc_loss temperature {tau}")));
    }
    if pairs.positives.is_empty() {
        return Err(Error::Empty("mc_loss needs at least one positive".into()));
    }
    let max_anchor = pairs
        .positives
        .iter()
        .chain(&pairs.negatives)
        .map(|p| p.anchor)
        .max()
        .expect("non-empty positives");
    let mut grouped: Vec<Vec<TensorRef>> = vec![Vec::new(); max_anchor + 1];
    for pair in &pairs.negatives {
        let s = pairs.score(tape, pair)?;
        grouped[pair.anchor].push(s);
    }
    let mut per_positive = Vec::with_capacity(pairs.positives.len());
    for pair in &pairs.positives {
        let pos_score = pairs.score(tape, pair)?;
        let mut scores = Vec::with_capacity(1 + grouped[pair.anchor].len());
        scores.push(pos_score);
        scores.extend_from_slice(&grouped[pair.anchor]);
        let packed = tape.concat_scalars(&scores);
        let log_prob = tape.log_softmax_entry(packed, 0, tau)?;
        per_positive.push(tape.scale(log_prob, -1.0));
    }
    Ok(tape.mean_scalars(&per_positive))
}

/// Which sampling components contribute loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplingComponents {
    pub in_batch: bool,
    pub random_locations: bool,
    pub dropout_pairs: bool,
}

impl SamplingComponents {
    pub const ALL: SamplingComponents = SamplingComponents {
        in_batch: true,
        random_locations: true,
        dropout_pairs: true,
    };

    pub fn any(&self) -> bool {
        self.in_batch || self.random_locations || self.dropout_pairs
    }

    /// Parse a subset of the letters {b, l, d}, e.g. "bld", "b", "bd".
    pub fn parse(s: &str) -> Result<Self> {
        let mut out = SamplingComponents {
            in_batch: false,
            random_locations: false,
            dropout_pairs: false,
        };
        for ch in s.chars() {
            match ch.to_ascii_lowercase() {
                'b' => out.in_batch = true,
                'l' => out.random_locations = true,
                'd' => out.dropout_pairs = true,
                other => {
                    return Err(Error::Config(format!(
                        "unknown sampling component '{other}' in '{s}'"
                    )))
                }
            }
        }
        Ok(out)
    }

    pub fn name(&self) -> String {
        let mut s = String::new();
        if self.in_batch {
            s.push('b');
        }
        if self.random_locations {
            s.push('l');
        }
        if self.dropout_pairs {
            s.push('d');
        }
        s
    }
}

/// Which pre-training loss family to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Nce,
    Mc,
    Mse,
}

impl LossKind {
    pub fn name(&self) -> &'static str {
        match self {
            LossKind::Nce => "nce",
            LossKind::Mc => "mc",
            LossKind::Mse => "mse",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nce" => Ok(LossKind::Nce),
            "mc" => Ok(LossKind::Mc),
            "mse" => Ok(LossKind::Mse),
            other => Err(Error::Config(format!("unknown loss kind '{other}'"))),
        }
    }
}

/// Pre-training loss configuration: which loss, which components, their
/// weights and temperatures, and the negative-location count C.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveConfig {
    pub loss: LossKind,
    pub components: SamplingComponents,
    /// MC-loss weights for the L and D components.
    pub alpha1: f64,
    pub alpha2: f64,
    /// NCE-loss weights for the L and D components.
    pub beta1: f64,
    pub beta2: f64,
    /// Temperatures for the B, L, and D components of the MC loss.
    pub tau0: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// Negative locations sampled per image (C).
    pub negatives_per_image: usize,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            loss: LossKind::Mc,
            components: SamplingComponents::ALL,
            alpha1: 1.0,
            alpha2: 1.0,
            beta1: 1.0,
            beta2: 1.0,
            tau0: 1.0,
            tau1: 1.0,
            tau2: 1.0,
            negatives_per_image: 1,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.components.any() {
            return Err(Error::Config("all loss components disabled".into()));
        }
        for (name, tau) in [("tau0", self.tau0), ("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(tau > 0.0) || !tau.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {tau}")));
            }
        }
        for (name, w) in [
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be non-negative, got {w}"
                )));
            }
        }
        if self.components.random_locations && self.negatives_per_image < 1 {
            return Err(Error::Config(
                "negatives_per_image must be >= 1 when the L component is enabled".into(),
            ));
        }
        Ok(())
    }
}

/// Add `weight * term` to an accumulating scalar node.
fn add_weighted(tape: &mut Tape, acc: Option<TensorRef>, term: TensorRef, weight: f64) -> TensorRef {
    let scaled = if weight == 1.0 {
        term
    } else {
        tape.scale(term, weight)
    };
    match acc {
        None => scaled,
        Some(a) => tape.add(a, scaled),
    }
}

/// The binary (NCE) pre-training objective:
/// l(P^X, N^B) + beta1 * l(empty, N^L) + beta2 * l(P^D, N^D),
/// restricted to the enabled components.
pub fn csp_nce_objective(
    tape: &mut Tape,
    batch: &Batch,
    params: &LocationEncoderParams,
    enc_vars: &EncoderVars,
    proj_vars: &LinearVars,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha12Rng,
) -> Result<TensorRef> {
    cfg.validate()?;
    let mut acc = None;
    let needs_main_pass = cfg.components.in_batch;
    let loc_emb = if needs_main_pass {
        Some(encode_batch_tape(
            tape,
            params,
            enc_vars,
            &batch.locations,
            EncodeMode::Train,
            Some(rng),
        )?)
    } else {
        None
    };
    let needs_images = cfg.components.in_batch || cfg.components.random_locations;
    let img_emb = if needs_images {
        let features = tape.constant(batch.features.clone());
        Some(proj_vars.apply_tape(tape, features))
    } else {
        None
    };

    if cfg.components.in_batch {
        let pairs = build_inbatch_pairs(tape, loc_emb.unwrap(), img_emb.unwrap())?;
        let term = nce_loss(tape, &pairs)?;
        acc = Some(add_weighted(tape, acc, term, 1.0));
    }
    if cfg.components.random_locations {
        // P^X is already covered by the in-batch term, so this component
        // contributes negatives only.
        let pairs = build_negative_location_pairs(
            tape,
            params,
            enc_vars,
            img_emb.unwrap(),
            cfg.negatives_per_image,
            rng,
        )?;
        let term = nce_loss(tape, &pairs)?;
        acc = Some(add_weighted(tape, acc, term, cfg.beta1));
    }
    if cfg.components.dropout_pairs {
        let pairs = build_simcse_pairs(tape, params, enc_vars, &batch.locations, rng)?;
        let term = nce_loss(tape, &pairs)?;
        acc = Some(add_weighted(tape, acc, term, cfg.beta2));
    }
    Ok(acc.expect("validated: at least one component"))
}

/// The multi-class (MC) pre-training objective:
/// l(P^X, N^B, tau0) + alpha1 * l(P^X, N^L, tau1) + alpha2 * l(P^D, N^D, tau2),
/// restricted to the enabled components. P^X appears in both the B and L
/// terms because each sits inside its own softmax.
pub fn csp_mc_objective(
    tape: &mut Tape,
    batch: &Batch,
    params: &LocationEncoderParams,
    enc_vars: &EncoderVars,
    proj_vars: &LinearVars,
    cfg: &ContrastiveConfig,
    rng: &mut ChaCha12Rng,
) -> Result<TensorRef> {
    cfg.validate()?;
    let mut acc = None;
    let needs_main_pass = cfg.components.in_batch || cfg.components.random_locations;
    let loc_emb = if needs_main_pass {
        Some(encode_batch_tape(
            tape,
            params,
            enc_vars,
            &batch.locations,
            EncodeMode::Train,
            Some(rng),
        )?)
    } else {
        None
    };
    let img_emb = if needs_main_pass {
        let features = tape.constant(batch.features.clone());
        Some(proj_vars.apply_tape(tape, features))
    } else {
        None
    };

    if cfg.components.in_batch {
        let pairs = build_inbatch_pairs(tape, loc_emb.unwrap(), img_emb.unwrap())?;
        let term = mc_loss(tape, &pairs, cfg.tau0)?;
        acc = Some(add_weighted(tape, acc, term, 1.0));
    }
    if cfg.components.random_locations {
        let mut pairs = build_negative_location_pairs(
            tape,
            params,
            enc_vars,
            img_emb.unwrap(),
            cfg.negatives_per_image,
            rng,
        )?;
        // The softmax needs P^X inside this component as well.
        let loc_rows = rows_of(tape, loc_emb.unwrap());
        let img_rows = rows_of(tape, img_emb.unwrap());
        for i in 0..batch.len() {
            pairs.push_positive(loc_rows[i], img_rows[i], i);
        }
        let term = mc_loss(tape, &pairs, cfg.tau1)?;
        acc = Some(add_weighted(tape, acc, term, cfg.alpha1));
    }
    if cfg.components.dropout_pairs {
        let pairs = build_simcse_pairs(tape, params, enc_vars, &batch.locations, rng)?;
        let term = mc_loss(tape, &pairs, cfg.tau2)?;
        acc = Some(add_weighted(tape, acc, term, cfg.alpha2));
    }
    Ok(acc.expect("validated: at least one component"))
}

/// Regression baseline: mean squared error between a linear readout of the
/// location embedding and the frozen feature vector, averaged over batch
/// entries and feature dimensions. Features receive no gradient.
pub fn mse_objective(
    tape: &mut Tape,
    batch: &Batch,
    params: &LocationEncoderParams,
    enc_vars: &EncoderVars,
    regressor_vars: &LinearVars,
    rng: &mut ChaCha12Rng,
) -> Result<TensorRef> {
    let out_dim = tape.value(regressor_vars.weight).cols();
    if out_dim != batch.features.cols() {
        return Err(Error::Shape(format!(
            "regressor output {} != feature dimension {}",
            out_dim,
            batch.features.cols()
        )));
    }
    let loc_emb = encode_batch_tape(
        tape,
        params,
        enc_vars,
        &batch.locations,
        EncodeMode::Train,
        Some(rng),
    )?;
    let predicted = regressor_vars.apply_tape(tape, loc_emb);
    let target = tape.constant(batch.features.clone());
    let diff = tape.sub(predicted, target);
    let squared = tape.mul_elem(diff, diff);
    Ok(tape.mean_all(squared))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Activation, PositionalEncoding};
    use crate::nn::LinearLayer;
    use crate::tensor::{finite_difference_check, Matrix, FD_EPS};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn constant_pairs(
        tape: &mut Tape,
        pos: &[(Vec<f64>, Vec<f64>)],
        neg: &[(Vec<f64>, Vec<f64>)],
    ) -> PairSet {
        let mut set = PairSet::new(SimilarityKind::Cosine);
        for (i, (a, b)) in pos.iter().enumerate() {
            let l = tape.constant(Matrix::from_row(a.clone()).unwrap());
            let r = tape.constant(Matrix::from_row(b.clone()).unwrap());
            set.push_positive(l, r, i);
        }
        for (i, (a, b)) in neg.iter().enumerate() {
            let l = tape.constant(Matrix::from_row(a.clone()).unwrap());
            let r = tape.constant(Matrix::from_row(b.clone()).unwrap());
            set.push_negative(l, r, i.min(pos.len().saturating_sub(1)));
        }
        set
    }

    fn small_encoder(seed: u64, dropout: f64, out_dim: usize) -> LocationEncoderParams {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        LocationEncoderParams::init(
            PositionalEncoding::Grid {
                scales: 3,
                r_min: 0.01,
                r_max: 1.0,
            },
            Activation::LeakyRelu,
            dropout,
            1,
            12,
            out_dim,
            &mut rng,
        )
        .unwrap()
    }

    fn random_batch(seed: u64, n: usize, feat_dim: usize) -> Batch {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let locations = (0..n).map(|_| uniform_sphere_sample(&mut rng)).collect();
        let mut features = Matrix::zeros(n, feat_dim);
        for i in 0..n {
            for v in features.row_mut(i) {
                *v = rng.gen::<f64>() - 0.5;
            }
        }
        Batch {
            locations,
            features,
            labels: None,
        }
    }

    #[test]
    fn nce_loss_reference_values() {
        // 1 positive and 1 negative, both with similarity 0: 2 ln 2.
        let mut tape = Tape::new();
        let pairs = constant_pairs(
            &mut tape,
            &[(vec![1.0, 0.0], vec![0.0, 1.0])],
            &[(vec![1.0, 0.0], vec![0.0, 1.0])],
        );
        let loss = nce_loss(&mut tape, &pairs).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);

        // Positives only, similarity exactly 1: -log sigma(1).
        let mut tape = Tape::new();
        let v = vec![0.6, -0.8];
        let pos = vec![(v.clone(), v.clone()), (v.clone(), v.clone()), (v.clone(), v)];
        let pairs = constant_pairs(&mut tape, &pos, &[]);
        let loss = nce_loss(&mut tape, &pairs).unwrap();
        assert_abs_diff_eq!(
            tape.scalar(loss),
            (1.0 + (-1.0f64).exp()).ln(),
            epsilon = 1e-12
        );

        // Empty positives, two zero-similarity negatives: ln 2.
        let mut tape = Tape::new();
        let pairs = constant_pairs(
            &mut tape,
            &[],
            &[
                (vec![1.0, 0.0], vec![0.0, 1.0]),
                (vec![0.0, 2.0], vec![3.0, 0.0]),
            ],
        );
        let loss = nce_loss(&mut tape, &pairs).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn nce_loss_rejects_fully_empty_sets() {
        let mut tape = Tape::new();
        let pairs = PairSet::new(SimilarityKind::Cosine);
        assert!(matches!(nce_loss(&mut tape, &pairs), Err(Error::Empty(_))));
    }

    #[test]
    fn mc_loss_uniform_scores_give_log_group_size() {
        // 1 positive with 3 equal-similarity negatives: ln 4.
        let mut tape = Tape::new();
        let mut set = PairSet::new(SimilarityKind::Cosine);
        let a = tape.constant(Matrix::from_row(vec![1.0, 1.0]).unwrap());
        let b = tape.constant(Matrix::from_row(vec![1.0, 1.0]).unwrap());
        set.push_positive(a, b, 0);
        for _ in 0..3 {
            set.push_negative(a, b, 0);
        }
        let loss = mc_loss(&mut tape, &set, 1.0).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), (4.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn mc_loss_reference_value_and_scale_invariance() {
        // positive s = 1, negative s = -1, tau = 1: log(1 + e^{-2}).
        let build = |tape: &mut Tape, scale: f64| -> PairSet {
            let mut set = PairSet::new(SimilarityKind::Dot);
            let pos_l = tape.constant(Matrix::from_row(vec![scale]).unwrap());
            let one = tape.constant(Matrix::from_row(vec![1.0]).unwrap());
            let neg_l = tape.constant(Matrix::from_row(vec![-scale]).unwrap());
            set.push_positive(pos_l, one, 0);
            set.push_negative(neg_l, one, 0);
            set
        };
        let mut tape = Tape::new();
        let set = build(&mut tape, 1.0);
        let loss = mc_loss(&mut tape, &set, 1.0).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), (1.0 + (-2.0f64).exp()).ln(), epsilon = 1e-12);

        // Scaling similarities and tau together leaves the loss unchanged.
        let mut tape2 = Tape::new();
        let set2 = build(&mut tape2, 7.5);
        let scaled = mc_loss(&mut tape2, &set2, 7.5).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), tape2.scalar(scaled), epsilon = 1e-12);
    }

    #[test]
    fn mc_loss_positive_with_no_negatives_costs_nothing() {
        let mut tape = Tape::new();
        let mut set = PairSet::new(SimilarityKind::Cosine);
        let a = tape.constant(Matrix::from_row(vec![1.0, 0.0]).unwrap());
        set.push_positive(a, a, 0);
        let loss = mc_loss(&mut tape, &set, 0.5).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn pair_count_identities() {
        let params = small_encoder(1, 0.5, 6);
        let batch = random_batch(2, 5, 4);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let loc = encode_batch_tape(
            &mut tape,
            &params,
            &enc_vars,
            &batch.locations,
            EncodeMode::Train,
            Some(&mut rng),
        )
        .unwrap();
        let proj = LinearLayer::init(4, 6, &mut ChaCha12Rng::seed_from_u64(4));
        let proj_vars = proj.register(&mut tape);
        let feats = tape.constant(batch.features.clone());
        let img = proj_vars.apply_tape(&mut tape, feats);

        let inbatch = build_inbatch_pairs(&mut tape, loc, img).unwrap();
        assert_eq!(inbatch.positives().len(), 5);
        assert_eq!(inbatch.negatives().len(), 5 * 4);

        let negloc =
            build_negative_location_pairs(&mut tape, &params, &enc_vars, img, 3, &mut rng)
                .unwrap();
        assert_eq!(negloc.positives().len(), 0);
        assert_eq!(negloc.negatives().len(), 5 * 3);

        let simcse =
            build_simcse_pairs(&mut tape, &params, &enc_vars, &batch.locations, &mut rng).unwrap();
        assert_eq!(simcse.positives().len(), 5);
        assert_eq!(simcse.negatives().len(), 5 * 4);
    }

    #[test]
    fn inbatch_diagonal_is_positive() {
        let mut tape = Tape::new();
        let loc = tape.constant(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let img = tape.constant(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let pairs = build_inbatch_pairs(&mut tape, loc, img).unwrap();
        // Positive (0,0) scores 1, negative (0,1) scores 0.
        let p = pairs.positives()[0];
        let n = pairs.negatives()[0];
        let sp = tape.cosine_similarity(p.left, p.right).unwrap();
        let sn = tape.cosine_similarity(n.left, n.right).unwrap();
        assert_eq!(tape.scalar(sp), 1.0);
        assert_eq!(tape.scalar(sn), 0.0);
        assert_eq!(p.anchor, 0);
        assert_eq!(n.anchor, 0);
    }

    #[test]
    fn inbatch_requires_two_examples() {
        let mut tape = Tape::new();
        let loc = tape.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        let img = tape.constant(Matrix::from_vec(1, 2, vec![1.0, 0.0]).unwrap());
        assert!(build_inbatch_pairs(&mut tape, loc, img).is_err());
    }

    #[test]
    fn negative_locations_resample_every_call() {
        let params = small_encoder(5, 0.0, 4);
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let img = tape.constant(Matrix::from_vec(1, 4, vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let mut rng = ChaCha12Rng::seed_from_u64(6);
        let first = build_negative_location_pairs(&mut tape, &params, &enc_vars, img, 1, &mut rng)
            .unwrap();
        let second = build_negative_location_pairs(&mut tape, &params, &enc_vars, img, 1, &mut rng)
            .unwrap();
        assert_eq!(first.negatives().len(), 1);
        let a = tape.value(first.negatives()[0].left).clone();
        let b = tape.value(second.negatives()[0].left).clone();
        assert_ne!(a, b);
    }

    #[test]
    fn simcse_without_dropout_gives_unit_positives() {
        let params = small_encoder(7, 0.0, 5);
        let batch = random_batch(8, 3, 2);
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let pairs =
            build_simcse_pairs(&mut tape, &params, &enc_vars, &batch.locations, &mut rng).unwrap();
        for p in pairs.positives() {
            let s = tape.cosine_similarity(p.left, p.right).unwrap();
            assert_eq!(tape.scalar(s), 1.0);
        }
    }

    #[test]
    fn simcse_dropout_passes_use_different_masks() {
        let params = small_encoder(10, 0.5, 5);
        let batch = random_batch(11, 3, 2);
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let mut rng = ChaCha12Rng::seed_from_u64(12);
        let pairs =
            build_simcse_pairs(&mut tape, &params, &enc_vars, &batch.locations, &mut rng).unwrap();
        for p in pairs.positives() {
            assert_ne!(tape.value(p.left), tape.value(p.right));
        }
    }

    fn engineered_orthogonal_batch(tape: &mut Tape) -> (TensorRef, TensorRef) {
        // d = 4: locations on axes 0 and 1, images on axes 2 and 3; every
        // cross similarity is 0.
        let loc = tape.constant(
            Matrix::from_vec(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap(),
        );
        let img = tape.constant(
            Matrix::from_vec(2, 4, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        (loc, img)
    }

    #[test]
    fn nce_objective_engineered_orthogonal_value() {
        // B component only, all similarities 0: 2 ln 2.
        let mut tape = Tape::new();
        let (loc, img) = engineered_orthogonal_batch(&mut tape);
        let pairs = build_inbatch_pairs(&mut tape, loc, img).unwrap();
        let loss = nce_loss(&mut tape, &pairs).unwrap();
        assert_abs_diff_eq!(tape.scalar(loss), 2.0 * std::f64::consts::LN_2, epsilon = 1e-12);
    }

    #[test]
    fn mc_objective_engineered_diagonal_value() {
        // s(i,i) = 1, s(i,j) = 0, tau = 1: each anchor pays log(1 + e^{-1}).
        let mut tape = Tape::new();
        let loc = tape.constant(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let img = tape.constant(
            Matrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        );
        let pairs = build_inbatch_pairs(&mut tape, loc, img).unwrap();
        let loss = mc_loss(&mut tape, &pairs, 1.0).unwrap();
        assert_abs_diff_eq!(
            tape.scalar(loss),
            (1.0 + (-1.0f64).exp()).ln(),
            epsilon = 1e-12
        );
    }

    fn objective_value(
        batch: &Batch,
        params: &LocationEncoderParams,
        proj: &LinearLayer,
        cfg: &ContrastiveConfig,
        seed: u64,
    ) -> f64 {
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let proj_vars = proj.register(&mut tape);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let loss = match cfg.loss {
            LossKind::Nce => {
                csp_nce_objective(&mut tape, batch, params, &enc_vars, &proj_vars, cfg, &mut rng)
            }
            LossKind::Mc => {
                csp_mc_objective(&mut tape, batch, params, &enc_vars, &proj_vars, cfg, &mut rng)
            }
            LossKind::Mse => {
                mse_objective(&mut tape, batch, params, &enc_vars, &proj_vars, &mut rng)
            }
        }
        .unwrap();
        tape.scalar(loss)
    }

    #[test]
    fn enabling_components_changes_the_objective() {
        let params = small_encoder(20, 0.3, 6);
        let proj = LinearLayer::init(4, 6, &mut ChaCha12Rng::seed_from_u64(21));
        let batch = random_batch(22, 4, 4);
        for loss in [LossKind::Nce, LossKind::Mc] {
            let mut base = ContrastiveConfig {
                loss,
                components: SamplingComponents::parse("b").unwrap(),
                ..ContrastiveConfig::default()
            };
            let b_only = objective_value(&batch, &params, &proj, &base, 33);
            base.components = SamplingComponents::parse("bl").unwrap();
            let bl = objective_value(&batch, &params, &proj, &base, 33);
            base.components = SamplingComponents::parse("bd").unwrap();
            let bd = objective_value(&batch, &params, &proj, &base, 33);
            base.components = SamplingComponents::ALL;
            let bld = objective_value(&batch, &params, &proj, &base, 33);
            assert_ne!(b_only, bl);
            assert_ne!(b_only, bd);
            assert_ne!(bl, bld);
            assert_ne!(bd, bld);
        }
    }

    #[test]
    fn objectives_are_deterministic_given_seed() {
        let params = small_encoder(30, 0.5, 6);
        let proj = LinearLayer::init(4, 6, &mut ChaCha12Rng::seed_from_u64(31));
        let batch = random_batch(32, 4, 4);
        for loss in [LossKind::Nce, LossKind::Mc, LossKind::Mse] {
            let cfg = ContrastiveConfig {
                loss,
                ..ContrastiveConfig::default()
            };
            let proj_for_loss = if loss == LossKind::Mse {
                LinearLayer::init(6, 4, &mut ChaCha12Rng::seed_from_u64(31))
            } else {
                proj.clone()
            };
            let a = objective_value(&batch, &params, &proj_for_loss, &cfg, 99);
            let b = objective_value(&batch, &params, &proj_for_loss, &cfg, 99);
            assert_eq!(a.to_bits(), b.to_bits(), "loss {loss:?}");
        }
    }

    #[test]
    fn all_components_disabled_is_an_error() {
        let params = small_encoder(40, 0.0, 4);
        let proj = LinearLayer::init(3, 4, &mut ChaCha12Rng::seed_from_u64(41));
        let batch = random_batch(42, 3, 3);
        let cfg = ContrastiveConfig {
            components: SamplingComponents::parse("").unwrap(),
            ..ContrastiveConfig::default()
        };
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let proj_vars = proj.register(&mut tape);
        let mut rng = ChaCha12Rng::seed_from_u64(43);
        assert!(csp_mc_objective(
            &mut tape, &batch, &params, &enc_vars, &proj_vars, &cfg, &mut rng
        )
        .is_err());
    }

    #[test]
    fn mse_objective_reference_values() {
        let params = small_encoder(50, 0.0, 4);
        let batch = random_batch(51, 3, 5);

        // A regressor that is all zeros predicts 0, so the loss is
        // mean of squared feature entries.
        let zero_reg = LinearLayer::from_parts(Matrix::zeros(4, 5), Matrix::zeros(1, 5)).unwrap();
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let reg_vars = zero_reg.register(&mut tape);
        let mut rng = ChaCha12Rng::seed_from_u64(52);
        let loss = mse_objective(&mut tape, &batch, &params, &enc_vars, &reg_vars, &mut rng)
            .unwrap();
        let expected: f64 = batch
            .features
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            / batch.features.data().len() as f64;
        assert_abs_diff_eq!(tape.scalar(loss), expected, epsilon = 1e-12);

        // Dimension mismatch is a typed error.
        let bad_reg = LinearLayer::init(4, 7, &mut ChaCha12Rng::seed_from_u64(53));
        let mut tape = Tape::new();
        let enc_vars = params.register(&mut tape);
        let reg_vars = bad_reg.register(&mut tape);
        assert!(matches!(
            mse_objective(&mut tape, &batch, &params, &enc_vars, &reg_vars, &mut rng),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let params = small_encoder(60, 0.4, 6);
        let proj = LinearLayer::init(4, 6, &mut ChaCha12Rng::seed_from_u64(61));
        let regressor = LinearLayer::init(6, 4, &mut ChaCha12Rng::seed_from_u64(62));
        let batch = random_batch(63, 3, 4);
        let enc_blocks = params.blocks().len();

        for loss in [LossKind::Nce, LossKind::Mc, LossKind::Mse] {
            let cfg = ContrastiveConfig {
                loss,
                ..ContrastiveConfig::default()
            };
            let head = if loss == LossKind::Mse {
                regressor.clone()
            } else {
                proj.clone()
            };
            let mut point: Vec<Matrix> = params.blocks().into_iter().cloned().collect();
            point.extend(head.blocks().into_iter().cloned());
            let err = finite_difference_check(
                |tape, refs| {
                    let enc_vars = EncoderVars::from_refs(&refs[..enc_blocks]);
                    let head_vars = LinearVars::from_refs(&refs[enc_blocks..]);
                    let mut rng = ChaCha12Rng::seed_from_u64(64);
                    match cfg.loss {
                        LossKind::Nce => csp_nce_objective(
                            tape, &batch, &params, &enc_vars, &head_vars, &cfg, &mut rng,
                        ),
                        LossKind::Mc => csp_mc_objective(
                            tape, &batch, &params, &enc_vars, &head_vars, &cfg, &mut rng,
                        ),
                        LossKind::Mse => mse_objective(
                            tape, &batch, &params, &enc_vars, &head_vars, &mut rng,
                        ),
                    }
                },
                &point,
                FD_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "{loss:?} gradient error {err}");
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        // Explicit import: both globs above export an `Rng` trait.
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            // nce_loss is invariant under permutation of pairs within each set.
            #[test]
            fn nce_permutation_invariance(seed in 0u64..500) {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let n_pos = rng.gen_range(1usize..5);
                let n_neg = rng.gen_range(1usize..8);
                let rand_vec = |rng: &mut ChaCha12Rng| -> Vec<f64> {
                    (0..3).map(|_| rng.gen::<f64>() - 0.5).collect()
                };
                let pos: Vec<(Vec<f64>, Vec<f64>)> =
                    (0..n_pos).map(|_| (rand_vec(&mut rng), rand_vec(&mut rng))).collect();
                let neg: Vec<(Vec<f64>, Vec<f64>)> =
                    (0..n_neg).map(|_| (rand_vec(&mut rng), rand_vec(&mut rng))).collect();

                let eval = |pos: &[(Vec<f64>, Vec<f64>)], neg: &[(Vec<f64>, Vec<f64>)]| {
                    let mut tape = Tape::new();
                    let pairs = constant_pairs(&mut tape, pos, neg);
                    let l = nce_loss(&mut tape, &pairs).unwrap();
                    tape.scalar(l)
                };
                let base = eval(&pos, &neg);
                let mut pos_rev = pos.clone();
                pos_rev.reverse();
                let mut neg_rev = neg.clone();
                neg_rev.reverse();
                let flipped = eval(&pos_rev, &neg_rev);
                prop_assert!((base - flipped).abs() < 1e-12);
            }

            // mc_loss is non-negative and equals ln(1+K) for equal scores.
            #[test]
            fn mc_loss_uniform_value(k in 0usize..12, seed in 0u64..100) {
                let mut rng = ChaCha12Rng::seed_from_u64(seed);
                let v: Vec<f64> = (0..4).map(|_| rng.gen::<f64>() - 0.5).collect();
                let mut tape = Tape::new();
                let node = tape.constant(Matrix::from_row(v).unwrap());
                let mut set = PairSet::new(SimilarityKind::Cosine);
                set.push_positive(node, node, 0);
                for _ in 0..k {
                    set.push_negative(node, node, 0);
                }
                let loss = mc_loss(&mut tape, &set, 0.8).unwrap();
                let value = tape.scalar(loss);
                prop_assert!(value >= 0.0);
                prop_assert!((value - ((1 + k) as f64).ln()).abs() < 1e-10);
            }
        }
    }
}
