//! Pipeline orchestration: synthetic data generation, pre-training,
//! fine-tuning, evaluation, grid-embedding export and clustering, and the
//! full experiment sweep.
//!
//! Every stage derives its randomness from the global seed through a fixed
//! ChaCha stream id, so a whole experiment is a pure function of
//! (config, seed).

mod checkpoint;
mod config;
mod report;

pub use checkpoint::Checkpoint;
pub use config::{
    DataConfig, EncoderConfig, EncoderKind, FinetuneConfig, PretrainConfig, SynthConfig,
    TrainConfig,
};
pub use report::RunReport;

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::cluster::ward_cluster;
use crate::dataset::{generate_synthetic, load, minibatches, stratified_sample, Dataset,
    SyntheticSpec};
use crate::encoder::{encode_batch, EncodeMode, GeoLocation, LocationEncoderParams};
use crate::error::{Error, Result};
use crate::nn::LinearLayer;
use crate::objectives::{csp_mc_objective, csp_nce_objective, mse_objective, LossKind};
use crate::supervised::{
    evaluate_accuracies, train_classifier_head, train_presence_absence, AccuracyReport,
    ClassEmbedding, ClassifierHead,
};
use crate::tensor::{adam_step, AdamState, Matrix, Tape};

// Stage stream ids for the seed-derived rngs. Per-cell stages are offset by
// `CELL_STRIDE * (1 + cell index)`.
const STREAM_SYNTH_SPEC: u64 = 1;
const STREAM_SYNTH_TRAIN: u64 = 2;
const STREAM_SYNTH_EVAL: u64 = 3;
const STREAM_ENCODER_INIT: u64 = 4;
const STREAM_PRETRAIN_HEAD_INIT: u64 = 5;
const STREAM_PRETRAIN: u64 = 6;
const STREAM_STRATIFY: u64 = 7;
const STREAM_T_INIT: u64 = 8;
const STREAM_FINETUNE: u64 = 9;
const STREAM_HEAD_INIT: u64 = 10;
const STREAM_HEAD_TRAIN: u64 = 11;
const CELL_STRIDE: u64 = 100;

fn stage_rng(seed: u64, stream: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Generate the synthetic train and eval splits described by the config.
/// Both splits share one sampled specification (classes, centers,
/// prototypes); only the example draws differ.
pub fn generate_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let mut spec_rng = stage_rng(cfg.seed, STREAM_SYNTH_SPEC);
    let spec = SyntheticSpec::random(
        cfg.synth.classes,
        cfg.synth.centers_per_class,
        cfg.synth.kappa,
        cfg.feature_dim,
        cfg.synth.feature_noise,
        &mut spec_rng,
    )?;
    let train = generate_synthetic(
        &spec,
        cfg.synth.train_examples,
        &mut stage_rng(cfg.seed, STREAM_SYNTH_TRAIN),
    )?;
    let eval = generate_synthetic(
        &spec,
        cfg.synth.eval_examples,
        &mut stage_rng(cfg.seed, STREAM_SYNTH_EVAL),
    )?;
    Ok((train, eval))
}

/// Load the configured dataset files, or synthesize both splits.
pub fn resolve_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match (&cfg.data.train, &cfg.data.eval) {
        (Some(train), Some(eval)) => Ok((load(train)?, load(eval)?)),
        (None, None) => generate_data(cfg),
        _ => Err(Error::Config(
            "data.train and data.eval must be set together (or both left empty)".into(),
        )),
    }
}

/// Initialize the location encoder from the config and seed.
fn init_encoder(cfg: &TrainConfig) -> Result<LocationEncoderParams> {
    LocationEncoderParams::init(
        cfg.encoder.positional(),
        cfg.encoder.activation,
        cfg.encoder.dropout,
        cfg.encoder.hidden_layers,
        cfg.encoder.hidden_units,
        cfg.embed_dim,
        &mut stage_rng(cfg.seed, STREAM_ENCODER_INIT),
    )
}

/// Stratified labeled subset for one lambda cell, drawn from that cell's
/// seeded stream (cell 0 matches a standalone fine-tune run).
pub fn stratified_for_cell(
    cfg: &TrainConfig,
    train: &Dataset,
    lambda: f64,
    cell: u64,
) -> Result<Dataset> {
    stratified_sample(
        train,
        lambda,
        &mut stage_rng(cfg.seed, STREAM_STRATIFY + CELL_STRIDE * (1 + cell)),
    )
}

/// Result of the pre-training stage.
pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    pub epoch_losses: Vec<f64>,
}

/// Pre-train the location encoder (and the image projection or feature
/// regressor) on an unlabeled view of `data` with the configured objective.
/// The frozen feature vectors receive no gradient.
pub fn pretrain(cfg: &TrainConfig, data: &Dataset) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let objective = cfg.pretrain.objective.ok_or_else(|| {
        Error::Usage("pretrain called with pretrain.objective = none".into())
    })?;
    if data.is_empty() {
        return Err(Error::Empty("pre-training needs a non-empty dataset".into()));
    }
    if data.feature_dim() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "dataset features have dim {}, config says {}",
            data.feature_dim(),
            cfg.feature_dim
        )));
    }

    let mut params = init_encoder(cfg)?;
    let mut head_rng = stage_rng(cfg.seed, STREAM_PRETRAIN_HEAD_INIT);
    let mut head = match objective {
        LossKind::Mse => LinearLayer::init(cfg.embed_dim, cfg.feature_dim, &mut head_rng),
        LossKind::Nce | LossKind::Mc => {
            LinearLayer::init(cfg.feature_dim, cfg.embed_dim, &mut head_rng)
        }
    };
    let contrastive = cfg.pretrain.contrastive();

    let mut enc_states: Vec<AdamState> = params
        .blocks()
        .iter()
        .map(|b| AdamState::for_param(b))
        .collect();
    let mut head_states: Vec<AdamState> = head
        .blocks()
        .iter()
        .map(|b| AdamState::for_param(b))
        .collect();

    let mut rng = stage_rng(cfg.seed, STREAM_PRETRAIN);
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain.epochs);
    for _ in 0..cfg.pretrain.epochs {
        let mut total = 0.0;
        let mut batches = 0usize;
        let batch_list: Vec<_> = minibatches(data, cfg.pretrain.batch_size, &mut rng)?.collect();
        for batch in batch_list {
            let mut tape = Tape::new();
            let enc_vars = params.register(&mut tape);
            let head_vars = head.register(&mut tape);
            let loss = match objective {
                LossKind::Nce => csp_nce_objective(
                    &mut tape,
                    &batch,
                    &params,
                    &enc_vars,
                    &head_vars,
                    &contrastive,
                    &mut rng,
                )?,
                LossKind::Mc => csp_mc_objective(
                    &mut tape,
                    &batch,
                    &params,
                    &enc_vars,
                    &head_vars,
                    &contrastive,
                    &mut rng,
                )?,
                LossKind::Mse => {
                    mse_objective(&mut tape, &batch, &params, &enc_vars, &head_vars, &mut rng)?
                }
            };
            total += tape.scalar(loss);
            batches += 1;
            let grads = tape.backward(loss)?;
            for ((block, state), r) in params
                .blocks_mut()
                .into_iter()
                .zip(enc_states.iter_mut())
                .zip(enc_vars.refs())
            {
                adam_step(block, grads.wrt(r), state, cfg.pretrain.learning_rate)?;
            }
            for ((block, state), r) in head
                .blocks_mut()
                .into_iter()
                .zip(head_states.iter_mut())
                .zip(head_vars.refs())
            {
                adam_step(block, grads.wrt(r), state, cfg.pretrain.learning_rate)?;
            }
        }
        if batches == 0 {
            return Err(Error::Empty(
                "no usable minibatches; dataset too small for pretrain.batch_size".into(),
            ));
        }
        epoch_losses.push(total / batches as f64);
    }

    let mut checkpoint = Checkpoint::encoder_only(params);
    match objective {
        LossKind::Mse => checkpoint.regressor = Some(head),
        LossKind::Nce | LossKind::Mc => checkpoint.projection = Some(head),
    }
    Ok(PretrainOutcome {
        checkpoint,
        epoch_losses,
    })
}

/// Result of the fine-tuning stage.
pub struct FinetuneOutcome {
    pub checkpoint: Checkpoint,
    pub finetune_epoch_losses: Vec<f64>,
    pub head_epoch_losses: Vec<f64>,
}

/// Fine-tune on a labeled subset: the encoder and class embedding train
/// jointly under the presence-absence loss, and the classifier head trains
/// independently with cross-entropy over the frozen features. A missing
/// checkpoint starts from a fresh random-init encoder (the supervised-only
/// baseline).
pub fn finetune(
    cfg: &TrainConfig,
    checkpoint: Option<&Checkpoint>,
    labeled: &Dataset,
) -> Result<FinetuneOutcome> {
    finetune_cell(cfg, checkpoint, labeled, 0)
}

fn finetune_cell(
    cfg: &TrainConfig,
    checkpoint: Option<&Checkpoint>,
    labeled: &Dataset,
    cell: u64,
) -> Result<FinetuneOutcome> {
    if labeled.is_empty() {
        return Err(Error::Empty("fine-tuning needs a non-empty labeled subset".into()));
    }
    if !labeled.is_labeled() {
        return Err(Error::Usage("fine-tuning needs labels".into()));
    }
    if labeled.feature_dim() != cfg.feature_dim {
        return Err(Error::Shape(format!(
            "dataset features have dim {}, config says {}",
            labeled.feature_dim(),
            cfg.feature_dim
        )));
    }
    let mut params = match checkpoint {
        Some(ckpt) => {
            if ckpt.encoder.output_dim() != cfg.embed_dim {
                return Err(Error::Shape(format!(
                    "checkpoint embeds into {} dims, config says {}",
                    ckpt.encoder.output_dim(),
                    cfg.embed_dim
                )));
            }
            ckpt.encoder.clone()
        }
        None => init_encoder(cfg)?,
    };
    let offset = CELL_STRIDE * (1 + cell);
    let q = labeled.num_classes();
    let mut class_embedding = ClassEmbedding::init(
        cfg.embed_dim,
        q,
        &mut stage_rng(cfg.seed, STREAM_T_INIT + offset),
    );
    let supervised_cfg = cfg.finetune.supervised();
    let finetune_epoch_losses = train_presence_absence(
        labeled,
        &mut params,
        &mut class_embedding,
        &supervised_cfg,
        &mut stage_rng(cfg.seed, STREAM_FINETUNE + offset),
    )?;

    let mut head = ClassifierHead::init(
        cfg.feature_dim,
        q,
        &mut stage_rng(cfg.seed, STREAM_HEAD_INIT + offset),
    );
    let head_epoch_losses = train_classifier_head(
        labeled,
        &mut head,
        cfg.finetune.head_learning_rate,
        cfg.finetune.head_epochs,
        cfg.finetune.batch_size,
        &mut stage_rng(cfg.seed, STREAM_HEAD_TRAIN + offset),
    )?;

    let mut out = Checkpoint::encoder_only(params);
    out.class_embedding = Some(class_embedding);
    out.head = Some(head);
    Ok(FinetuneOutcome {
        checkpoint: out,
        finetune_epoch_losses,
        head_epoch_losses,
    })
}

/// Evaluate a fine-tuned checkpoint: image-only, location-only, and combined
/// Top-1 accuracy on held-out labeled data.
pub fn evaluate(checkpoint: &Checkpoint, data: &Dataset) -> Result<AccuracyReport> {
    let class_embedding = checkpoint
        .class_embedding
        .as_ref()
        .ok_or_else(|| Error::Usage("evaluation needs a fine-tuned class embedding".into()))?;
    let head = checkpoint
        .head
        .as_ref()
        .ok_or_else(|| Error::Usage("evaluation needs a trained classifier head".into()))?;
    if head.in_dim() != data.feature_dim() {
        return Err(Error::Shape(format!(
            "head expects features of dim {}, dataset has {}",
            head.in_dim(),
            data.feature_dim()
        )));
    }
    if class_embedding.num_classes() != data.num_classes() || head.out_dim() != data.num_classes()
    {
        return Err(Error::Shape(format!(
            "checkpoint classes ({}, {}) do not match dataset classes {}",
            class_embedding.num_classes(),
            head.out_dim(),
            data.num_classes()
        )));
    }
    evaluate_accuracies(data, &checkpoint.encoder, class_embedding, head)
}

/// Write eval-mode embeddings of a regular lon/lat grid, one row per point:
/// `lon_deg lat_deg e0 .. e_{d-1}`, ordered by latitude then longitude
/// (both ascending). Returns the number of rows written.
pub fn export_grid_embeddings(
    checkpoint: &Checkpoint,
    resolution_deg: f64,
    path: &Path,
) -> Result<usize> {
    if !(resolution_deg > 0.0) || !resolution_deg.is_finite() {
        return Err(Error::Config(format!(
            "grid resolution must be positive, got {resolution_deg}"
        )));
    }
    let n_lon = ((360.0 / resolution_deg) + 1e-9).floor().max(1.0) as usize;
    let n_lat = ((180.0 / resolution_deg) + 1e-9).floor().max(1.0) as usize;
    let params = &checkpoint.encoder;

    let mut out = String::new();
    let mut rows = 0usize;
    let mut pending: Vec<(f64, f64)> = Vec::new();
    let flush = |pending: &mut Vec<(f64, f64)>, out: &mut String| -> Result<()> {
        if pending.is_empty() {
            return Ok(());
        }
        let locs: Vec<GeoLocation> = pending
            .iter()
            .map(|(lon, lat)| GeoLocation::new(lon.to_radians(), lat.to_radians()))
            .collect::<Result<_>>()?;
        let emb = encode_batch(&locs, params, EncodeMode::Eval, None)?;
        for (i, (lon, lat)) in pending.iter().enumerate() {
            use std::fmt::Write as _;
            write!(out, "{lon} {lat}").unwrap();
            for v in emb.row(i) {
                write!(out, " {v}").unwrap();
            }
            out.push('\n');
        }
        pending.clear();
        Ok(())
    };

    for j in 0..n_lat {
        let lat = -90.0 + resolution_deg * (j as f64 + 0.5);
        for i in 0..n_lon {
            let lon = -180.0 + resolution_deg * (i as f64 + 0.5);
            pending.push((lon, lat));
            rows += 1;
            if pending.len() >= 512 {
                flush(&mut pending, &mut out)?;
            }
        }
    }
    flush(&mut pending, &mut out)?;
    std::fs::write(path, out)?;
    Ok(rows)
}

/// Read an embedding table written by [`export_grid_embeddings`], cluster
/// the embedding columns with Ward linkage into `k` groups, and write
/// `lon lat cluster` rows. Returns the number of rows written.
pub fn cluster_embeddings(table_path: &Path, k: usize, out_path: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(table_path)?;
    let path_str = table_path.display().to_string();
    let mut coords: Vec<(f64, f64)> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut width = None;
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_ascii_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::DimensionMismatch {
                path: path_str,
                line: line_no + 1,
                expected: 3,
                found: fields.len(),
            });
        }
        let expected = *width.get_or_insert(fields.len());
        if fields.len() != expected {
            return Err(Error::DimensionMismatch {
                path: path_str,
                line: line_no + 1,
                expected,
                found: fields.len(),
            });
        }
        let mut values = Vec::with_capacity(fields.len());
        for f in &fields {
            values.push(f.parse::<f64>().map_err(|_| Error::Parse {
                path: path_str.clone(),
                line: line_no + 1,
                msg: format!("bad float '{f}'"),
            })?);
        }
        coords.push((values[0], values[1]));
        rows.push(values[2..].to_vec());
    }
    if rows.is_empty() {
        return Err(Error::Empty(format!("{path_str} holds no embedding rows")));
    }
    let dim = rows[0].len();
    let table = Matrix::from_rows(&rows, dim)?;
    let labels = ward_cluster(&table, k)?;

    let mut out = String::new();
    for ((lon, lat), label) in coords.iter().zip(&labels) {
        use std::fmt::Write as _;
        writeln!(out, "{lon} {lat} {label}").unwrap();
    }
    std::fs::write(out_path, out)?;
    Ok(labels.len())
}

/// Run the full protocol: resolve data, pre-train once (unless the
/// objective is `none`), then for each lambda in `lambda_list` draw a
/// stratified subset, fine-tune, and evaluate. One report per lambda cell.
/// When `out_dir` is given, checkpoints and reports are written there.
pub fn run_experiment(cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<Vec<RunReport>> {
    cfg.validate()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let config_hash = cfg.config_hash();
    let variant = cfg.variant_label();

    let data_start = Instant::now();
    let (train, eval) = resolve_data(cfg)?;
    let data_seconds = data_start.elapsed().as_secs_f64();
    if !train.is_labeled() {
        return Err(Error::Usage(
            "run-experiment needs labeled training data for the fine-tuning stage".into(),
        ));
    }

    let mut pretrain_losses = Vec::new();
    let mut pretrain_seconds = 0.0;
    let pretrained = match cfg.pretrain.objective {
        Some(_) => {
            let start = Instant::now();
            let outcome = pretrain(cfg, &train)?;
            pretrain_seconds = start.elapsed().as_secs_f64();
            pretrain_losses = outcome.epoch_losses;
            if let Some(dir) = out_dir {
                outcome.checkpoint.save(&dir.join("pretrained.ckpt"))?;
            }
            Some(outcome.checkpoint)
        }
        None => None,
    };

    let mut reports = Vec::with_capacity(cfg.lambda_list.len());
    for (cell, &lambda) in cfg.lambda_list.iter().enumerate() {
        let cell_id = cell as u64;
        let offset = CELL_STRIDE * (1 + cell_id);
        let subset = stratified_sample(
            &train,
            lambda,
            &mut stage_rng(cfg.seed, STREAM_STRATIFY + offset),
        )?;
        let start = Instant::now();
        let outcome = finetune_cell(cfg, pretrained.as_ref(), &subset, cell_id)?;
        let finetune_seconds = start.elapsed().as_secs_f64();
        let accuracy = evaluate(&outcome.checkpoint, &eval)?;

        let mut report = RunReport::new(variant.clone(), cfg.seed, config_hash.clone());
        report.lambda = Some(lambda);
        report.pretrain_epoch_losses = pretrain_losses.clone();
        report.finetune_epoch_losses = outcome.finetune_epoch_losses;
        report.head_epoch_losses = outcome.head_epoch_losses;
        report.accuracy = Some(accuracy);
        report.stage_seconds = vec![
            ("data".into(), data_seconds),
            ("pretrain".into(), pretrain_seconds),
            ("finetune".into(), finetune_seconds),
        ];
        if let Some(dir) = out_dir {
            outcome
                .checkpoint
                .save(&dir.join(format!("finetuned_lambda{lambda}.ckpt")))?;
            report.save(&dir.join(format!("report_lambda{lambda}.txt")))?;
        }
        reports.push(report);
    }
    Ok(reports)
}
