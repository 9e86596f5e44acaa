//! Supervised fine-tuning and inference: the presence-absence loss over a
//! class embedding matrix, a linear classifier head over frozen features,
//! and the combination of both posteriors at prediction time.

use rand::Rng;
use rand_chacha::ChaCha12Rng;

use crate::dataset::{minibatches, Batch, Dataset, GeoTaggedExample};
use crate::encoder::{
    encode, encode_batch_tape, uniform_sphere_sample, EncodeMode, EncoderVars, GeoLocation,
    LocationEncoderParams,
};
use crate::error::{Error, Result};
use crate::nn::LinearLayer;
use crate::objectives::{nce_loss, PairSet, SimilarityKind};
use crate::tensor::{adam_step, sigmoid, softmax, AdamState, Matrix, Tape, TensorRef};

/// The classification head g(): a linear map from image features to class
/// logits.
pub type ClassifierHead = LinearLayer;

/// Learned class embedding matrix T (d x Q): one column per class, scored
/// against location embeddings by dot product.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbedding {
    t: Matrix,
}

impl ClassEmbedding {
    /// Near-zero Gaussian init (sigma = 1e-4): the initial location posterior
    /// is ~0.5 for every class, leaving early training image-dominated.
    pub fn init<R: Rng>(embedding_dim: usize, num_classes: usize, rng: &mut R) -> Self {
        ClassEmbedding {
            t: Matrix::gaussian(embedding_dim, num_classes, 1e-4, rng),
        }
    }

    pub fn from_matrix(t: Matrix) -> Self {
        ClassEmbedding { t }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.t
    }

    pub fn matrix_mut(&mut self) -> &mut Matrix {
        &mut self.t
    }

    pub fn embedding_dim(&self) -> usize {
        self.t.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.t.cols()
    }

    pub fn register(&self, tape: &mut Tape) -> TensorRef {
        tape.leaf(self.t.clone())
    }
}

/// Fine-tuning hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SupervisedConfig {
    /// Weight of the positive term in the presence-absence loss.
    pub positive_weight: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for SupervisedConfig {
    fn default() -> Self {
        SupervisedConfig {
            positive_weight: 1.0,
            learning_rate: 0.0005,
            epochs: 30,
            batch_size: 64,
        }
    }
}

impl SupervisedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_weight > 0.0) {
            return Err(Error::Config(format!(
                "positive weight must be > 0, got {}",
                self.positive_weight
            )));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "fine-tune learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config(
                "fine-tuning needs at least one epoch and batch size 1".into(),
            ));
        }
        Ok(())
    }
}

/// Presence-absence loss of one labeled batch (Eq. 5 shape):
/// beta * nce(P^y, empty) + nce(empty, N^y u N^R), where a pair's score is
/// the dot product between a location embedding and a class column of T.
///
/// P^y pairs each example with its own class column; N^y pairs it with every
/// other class column; N^R pairs one fresh uniform sphere location per
/// example with all Q class columns.
pub fn presence_absence_loss(
    tape: &mut Tape,
    batch: &Batch,
    params: &LocationEncoderParams,
    enc_vars: &EncoderVars,
    class_embedding: TensorRef,
    positive_weight: f64,
    rng: &mut ChaCha12Rng,
) -> Result<TensorRef> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Usage("presence-absence loss needs labeled examples".into()))?;
    if batch.is_empty() {
        return Err(Error::Empty("presence-absence loss on an empty batch".into()));
    }
    let num_classes = tape.value(class_embedding).cols();
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Usage(format!(
            "label {bad} out of range for {num_classes} classes"
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
    let sampled: Vec<GeoLocation> = (0..batch.len())
        .map(|_| uniform_sphere_sample(rng))
        .collect();
    let neg_emb = encode_batch_tape(tape, params, enc_vars, &sampled, EncodeMode::Train, Some(rng))?;

    let loc_rows: Vec<TensorRef> = (0..batch.len()).map(|i| tape.row(loc_emb, i)).collect();
    let neg_rows: Vec<TensorRef> = (0..batch.len()).map(|i| tape.row(neg_emb, i)).collect();
    let class_cols: Vec<TensorRef> = (0..num_classes)
        .map(|q| tape.col(class_embedding, q))
        .collect();

    let mut positives = PairSet::new(SimilarityKind::Dot);
    for (i, &label) in labels.iter().enumerate() {
        positives.push_positive(loc_rows[i], class_cols[label], i);
    }
    let mut negatives = PairSet::new(SimilarityKind::Dot);
    for (i, &label) in labels.iter().enumerate() {
        for (q, col) in class_cols.iter().enumerate() {
            if q != label {
                negatives.push_negative(loc_rows[i], *col, i);
            }
        }
    }
    for i in 0..batch.len() {
        for col in &class_cols {
            negatives.push_negative(neg_rows[i], *col, i);
        }
    }

    let pos_term = nce_loss(tape, &positives)?;
    let neg_term = nce_loss(tape, &negatives)?;
    let weighted_pos = tape.scale(pos_term, positive_weight);
    Ok(tape.add(weighted_pos, neg_term))
}

/// Fine-tune the location encoder and class embedding jointly with the
/// presence-absence loss. Returns per-epoch mean losses.
pub fn train_presence_absence(
    dataset: &Dataset,
    params: &mut LocationEncoderParams,
    class_embedding: &mut ClassEmbedding,
    cfg: &SupervisedConfig,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("fine-tuning needs a non-empty dataset".into()));
    }
    if !dataset.is_labeled() {
        return Err(Error::Usage("fine-tuning needs a labeled dataset".into()));
    }
    let batch_size = cfg.batch_size.min(dataset.len());
    let mut enc_states: Vec<AdamState> = params
        .blocks()
        .iter()
        .map(|b| AdamState::for_param(b))
        .collect();
    let mut t_state = AdamState::for_param(class_embedding.matrix());

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        let batch_list: Vec<Batch> = minibatches(dataset, batch_size, rng)?.collect();
        for batch in batch_list {
            let mut tape = Tape::new();
            let enc_vars = params.register(&mut tape);
            let t_ref = class_embedding.register(&mut tape);
            let loss = presence_absence_loss(
                &mut tape,
                &batch,
                params,
                &enc_vars,
                t_ref,
                cfg.positive_weight,
                rng,
            )?;
            total += tape.scalar(loss);
            batches += 1;
            let grads = tape.backward(loss)?;
            let enc_refs = enc_vars.refs();
            for ((block, state), r) in params
                .blocks_mut()
                .into_iter()
                .zip(enc_states.iter_mut())
                .zip(enc_refs)
            {
                adam_step(block, grads.wrt(r), state, cfg.learning_rate)?;
            }
            adam_step(
                class_embedding.matrix_mut(),
                grads.wrt(t_ref),
                &mut t_state,
                cfg.learning_rate,
            )?;
        }
        if batches == 0 {
            return Err(Error::Empty(
                "no usable minibatches; dataset too small for the batch size".into(),
            ));
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

/// Mean softmax cross-entropy of the head's logits over one labeled batch.
/// Features enter as constants and receive no gradient.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    batch: &Batch,
    head_vars: &crate::nn::LinearVars,
) -> Result<TensorRef> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::Usage("cross-entropy needs labeled examples".into()))?;
    if batch.is_empty() {
        return Err(Error::Empty("cross-entropy on an empty batch".into()));
    }
    let features = tape.constant(batch.features.clone());
    let logits = head_vars.apply_tape(tape, features);
    let mut per_example = Vec::with_capacity(batch.len());
    for (i, &label) in labels.iter().enumerate() {
        let row = tape.row(logits, i);
        let log_prob = tape.log_softmax_entry(row, label, 1.0)?;
        per_example.push(tape.scale(log_prob, -1.0));
    }
    Ok(tape.mean_scalars(&per_example))
}

/// Train the classification head with softmax cross-entropy over frozen
/// features. Returns per-epoch mean losses.
pub fn train_classifier_head(
    dataset: &Dataset,
    head: &mut ClassifierHead,
    learning_rate: f64,
    epochs: usize,
    batch_size: usize,
    rng: &mut ChaCha12Rng,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Empty("head training needs a non-empty dataset".into()));
    }
    if !dataset.is_labeled() {
        return Err(Error::Usage("head training needs a labeled dataset".into()));
    }
    if head.in_dim() != dataset.feature_dim() || head.out_dim() != dataset.num_classes() {
        return Err(Error::Shape(format!(
            "head maps {} -> {}, dataset has dim {} and {} classes",
            head.in_dim(),
            head.out_dim(),
            dataset.feature_dim(),
            dataset.num_classes()
        )));
    }
    if !(learning_rate > 0.0) || epochs < 1 {
        return Err(Error::Config("head training needs lr > 0 and epochs >= 1".into()));
    }
    let batch_size = batch_size.max(1).min(dataset.len());
    let mut states: Vec<AdamState> = head
        .blocks()
        .iter()
        .map(|b| AdamState::for_param(b))
        .collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        let batch_list: Vec<Batch> = minibatches(dataset, batch_size, rng)?.collect();
        for batch in batch_list {
            let mut tape = Tape::new();
            let vars = head.register(&mut tape);
            let loss = cross_entropy_loss(&mut tape, &batch, &vars)?;
            total += tape.scalar(loss);
            batches += 1;
            let grads = tape.backward(loss)?;
            for ((block, state), r) in head
                .blocks_mut()
                .into_iter()
                .zip(states.iter_mut())
                .zip(vars.refs())
            {
                adam_step(block, grads.wrt(r), state, learning_rate)?;
            }
        }
        if batches == 0 {
            return Err(Error::Empty(
                "no usable minibatches; dataset too small for the batch size".into(),
            ));
        }
        epoch_losses.push(total / batches as f64);
    }
    Ok(epoch_losses)
}

/// Unnormalized per-class presence scores sigma(e(x) . T[:, y]), each
/// strictly inside (0, 1). Uses the deterministic eval-mode encoding.
pub fn location_posterior(
    loc: &GeoLocation,
    params: &LocationEncoderParams,
    class_embedding: &ClassEmbedding,
) -> Result<Vec<f64>> {
    if class_embedding.embedding_dim() != params.output_dim() {
        return Err(Error::Shape(format!(
            "class embedding dim {} != encoder output {}",
            class_embedding.embedding_dim(),
            params.output_dim()
        )));
    }
    let e = encode(loc, params, EncodeMode::Eval, None)?;
    let t = class_embedding.matrix();
    let mut out = Vec::with_capacity(class_embedding.num_classes());
    for q in 0..class_embedding.num_classes() {
        let mut score = 0.0;
        for (d, &ev) in e.iter().enumerate() {
            score += ev * t.get(d, q);
        }
        // Keep entries strictly inside (0, 1): sigmoid saturates to exact
        // 0.0/1.0 in f64 once |score| exceeds ~37.
        out.push(sigmoid(score).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0));
    }
    Ok(out)
}

/// Softmax class probabilities from the classifier head's logits.
pub fn image_posterior(feature: &[f64], head: &ClassifierHead) -> Result<Vec<f64>> {
    let logits = head.apply(feature)?;
    Ok(softmax(&logits))
}

/// Index of the largest value; ties break toward the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Combine the two (conditionally independent) posteriors by elementwise
/// product and take the argmax.
pub fn combine_scores(location_scores: &[f64], image_probs: &[f64]) -> Result<usize> {
    if location_scores.len() != image_probs.len() || location_scores.is_empty() {
        return Err(Error::Shape(format!(
            "posterior lengths {} and {}",
            location_scores.len(),
            image_probs.len()
        )));
    }
    let products: Vec<f64> = location_scores
        .iter()
        .zip(image_probs)
        .map(|(a, b)| a * b)
        .collect();
    Ok(argmax(&products))
}

/// Predict a class from a location-feature pair by multiplying the location
/// and image posteriors.
pub fn combined_predict(
    loc: &GeoLocation,
    feature: &[f64],
    params: &LocationEncoderParams,
    class_embedding: &ClassEmbedding,
    head: &ClassifierHead,
) -> Result<usize> {
    let loc_post = location_posterior(loc, params, class_embedding)?;
    let img_post = image_posterior(feature, head)?;
    combine_scores(&loc_post, &img_post)
}

/// Fraction of examples whose prediction equals the label.
pub fn evaluate_top1<F>(dataset: &Dataset, mut predictor: F) -> Result<f64>
where
    F: FnMut(&GeoTaggedExample) -> Result<usize>,
{
    if dataset.is_empty() {
        return Err(Error::Empty("evaluation needs a non-empty dataset".into()));
    }
    if !dataset.is_labeled() {
        return Err(Error::Usage("evaluation needs a labeled dataset".into()));
    }
    let mut correct = 0usize;
    for ex in dataset.examples() {
        if predictor(ex)? == ex.label.expect("labeled dataset") {
            correct += 1;
        }
    }
    Ok(correct as f64 / dataset.len() as f64)
}

/// Top-1 accuracies of the three prediction modes on one dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccuracyReport {
    pub image_only: f64,
    pub location_only: f64,
    pub combined: f64,
}

/// Evaluate image-only, location-only, and combined Top-1 accuracy.
pub fn evaluate_accuracies(
    dataset: &Dataset,
    params: &LocationEncoderParams,
    class_embedding: &ClassEmbedding,
    head: &ClassifierHead,
) -> Result<AccuracyReport> {
    let image_only = evaluate_top1(dataset, |ex| {
        Ok(argmax(&image_posterior(&ex.feature, head)?))
    })?;
    let location_only = evaluate_top1(dataset, |ex| {
        Ok(argmax(&location_posterior(
            &ex.location,
            params,
            class_embedding,
        )?))
    })?;
    let combined = evaluate_top1(dataset, |ex| {
        combined_predict(&ex.location, &ex.feature, params, class_embedding, head)
    })?;
    Ok(AccuracyReport {
        image_only,
        location_only,
        combined,
    })
}
