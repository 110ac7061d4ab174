//! Task adaptation: classification, imputation, anomaly detection, and
//! short-term forecasting on top of the pre-trained backbone, plus
//! representation export.
//!
//! Classification mean-pools encoder outputs over all of a sample's tokens
//! into a linear head. The reconstruction tasks reuse the `W_out`
//! projection at the corresponding token positions; forecasting appends
//! mask-token patches after the history and reconstructs them.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize_instance, Corpus, TimeSeriesSample};
use crate::embedding::{
    attention_bias, build_token_grid, pack, PackItem, PackedEntry, PackedRow, TokenGrid,
};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderError, ForwardMode};
use crate::numerics::{Bound, Graph, ParamSet, Tensor};
use crate::pretrain::{row_losses, AdamW, MaskAction, MaskEntry, MaskPlan};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum HeadsError {
    #[error("class count mismatch: head has {head} classes, requested {requested}")]
    ClassCountMismatch { head: usize, requested: usize },
    #[error("empty missing set: nothing to impute")]
    EmptyMissingSet,
    #[error("window length {window} must be a positive multiple of patch length {patch}")]
    BadWindow { window: usize, patch: usize },
    #[error("horizon must be positive")]
    BadHorizon,
    #[error("empty calibration split")]
    EmptyCalibration,
    #[error("history plus horizon exceeds context capacity ({tokens} tokens > {capacity})")]
    ContextOverflow { tokens: usize, capacity: usize },
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Pretrain(#[from] crate::pretrain::PretrainError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HeadsError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Classify,
    Impute,
    Anomaly,
    Forecast,
}

impl TaskKind {
    /// Per-task patch-length presets.
    pub fn preset_patch_len(&self) -> usize {
        match self {
            TaskKind::Classify => 36,
            TaskKind::Impute => 24,
            TaskKind::Anomaly | TaskKind::Forecast => 4,
        }
    }
}

/// Adds the classification head (`D x K` linear over the pooled
/// representation) if not already present.
pub fn ensure_classify_head(params: &mut ParamSet, cfg: &EncoderConfig, k: usize, seed: u64) {
    if params.contains("head.W") {
        return;
    }
    let d = cfg.d_model;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x8EAD]));
    let data: Vec<f64> = (0..d * k)
        .map(|_| loop {
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if z.abs() <= 2.0 {
                break z * 0.02;
            }
        })
        .collect();
    params.insert("head.W", vec![d, k], data);
    params.insert("head.b", vec![1, k], vec![0.0; k]);
}

fn forward_grid(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    grid: &TokenGrid,
    plan: Option<&MaskPlan>,
    mode: ForwardMode,
) -> Result<Tensor> {
    let z0 = crate::embedding::embed_grid(g, bound, cfg, grid, plan)?;
    let n = grid.len();
    let bias = vec![0.0; n * n];
    Ok(encoder_forward(g, bound, cfg, z0, &bias, mode)?)
}

/// Pools encoder outputs over one packed entry's positions and projects to
/// K class logits.
pub fn classify_logits_from_row(
    g: &mut Graph,
    bound: &Bound,
    encoder_out: Tensor,
    entry: &PackedEntry,
) -> Result<Tensor> {
    let len = entry.item.grid.len();
    let positions: Vec<usize> = (0..len).map(|s| entry.position(s)).collect();
    let toks = g.gather_rows(encoder_out, &positions)?;
    let pooler = g.constant(&[1, len], vec![1.0 / len as f64; len])?;
    let pooled = g.matmul(pooler, toks)?;
    let w = bound.t("head.W");
    let b = bound.t("head.b");
    let logits = g.matmul(pooled, w)?;
    Ok(g.add_row(logits, b)?)
}

/// Classifies one sample: mean-pool over all tokens, then the linear head.
pub fn classify(params: &ParamSet, cfg: &EncoderConfig, sample: &TimeSeriesSample, k: usize) -> Result<Vec<f64>> {
    let head_k = params
        .get("head.W")
        .map(|e| e.shape[1])
        .unwrap_or(k);
    if head_k != k {
        return Err(HeadsError::ClassCountMismatch {
            head: head_k,
            requested: k,
        });
    }
    let (normalized, _) = normalize_instance(sample);
    let grid = build_token_grid(&normalized, cfg.patch_len, false)?.remove(0);
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let out = forward_grid(&mut g, &bound, cfg, &grid, None, ForwardMode::eval())?;
    let entry = PackedEntry {
        item: PackItem {
            sample_index: 0,
            sample_id: sample.sample_id.clone(),
            grid,
            mask_plan: None,
            ftp: None,
            norm: None,
            class_label: None,
        },
        offset: 0,
    };
    let logits = classify_logits_from_row(&mut g, &bound, out, &entry)?;
    Ok(g.data(logits).to_vec())
}

/// Imputation result: the completed series and the per-patch MSE in
/// original (de-normalized) units.
pub struct ImputeResult {
    pub completed: Vec<Vec<f64>>,
    pub mse: f64,
    pub per_patch_mse: Vec<((usize, usize), f64)>,
}

/// Embeds the missing patches as mask tokens, reconstructs them through
/// `W_out`, de-normalizes, and scores against the ground truth on the
/// masked, non-padded positions only.
pub fn impute(
    params: &ParamSet,
    cfg: &EncoderConfig,
    sample: &TimeSeriesSample,
    missing: &[(usize, usize)],
) -> Result<ImputeResult> {
    if missing.is_empty() {
        return Err(HeadsError::EmptyMissingSet);
    }
    let (normalized, stats) = normalize_instance(sample);
    let grid = build_token_grid(&normalized, cfg.patch_len, false)?.remove(0);
    let plan = MaskPlan {
        masked: missing
            .iter()
            .map(|&(c, i)| {
                let slot = &grid.tokens[grid.patch_slot(c, i)];
                MaskEntry {
                    variate: c,
                    patch_index: i,
                    action: MaskAction::Replace,
                    target: slot.raw_patch.clone().unwrap(),
                    pad_count: slot.pad_count,
                }
            })
            .collect(),
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let out = forward_grid(&mut g, &bound, cfg, &grid, Some(&plan), ForwardMode::eval())?;
    let rows: Vec<usize> = plan
        .masked
        .iter()
        .map(|m| grid.patch_slot(m.variate, m.patch_index))
        .collect();
    let z_masked = g.gather_rows(out, &rows)?;
    let w_out = bound.t("W_out");
    let recon = g.matmul(z_masked, w_out)?;
    let pred = g.data(recon);
    let p = cfg.patch_len;

    let mut completed = sample.values.clone();
    let mut per_patch_mse = Vec::with_capacity(plan.masked.len());
    let mut sq_sum = 0.0;
    let mut count = 0usize;
    for (mi, m) in plan.masked.iter().enumerate() {
        let real = p - m.pad_count;
        let mut patch_sq = 0.0;
        for j in 0..real {
            let t = m.patch_index * p + j;
            let denorm = stats.denormalize(m.variate, pred[mi * p + j]);
            let err = denorm - sample.values[m.variate][t];
            patch_sq += err * err;
            sq_sum += err * err;
            count += 1;
            completed[m.variate][t] = denorm;
        }
        per_patch_mse.push(((m.variate, m.patch_index), patch_sq / real.max(1) as f64));
    }
    Ok(ImputeResult {
        completed,
        mse: sq_sum / count.max(1) as f64,
        per_patch_mse,
    })
}

/// Selects `round(ratio * N)` patches per variate, at least one, without
/// replacement.
pub fn choose_missing_patches(grid: &TokenGrid, ratio: f64, seed: u64) -> Vec<(usize, usize)> {
    let n = grid.n_patches;
    let per_variate = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in 0..grid.n_variates {
        let mut idxs: Vec<usize> = (0..n).collect();
        for i in (1..idxs.len()).rev() {
            let j = rng.gen_range(0..=i);
            idxs.swap(i, j);
        }
        for &i in idxs.iter().take(per_variate) {
            out.push((c, i));
        }
    }
    out.sort_unstable();
    out
}

/// Reconstruction-error anomaly scores over non-overlapping windows. The
/// trailing partial window is zero-padded and its scores truncated to the
/// stream length. Scores are mean squared reconstruction error per time
/// point, averaged over variates, in window-normalized units.
pub fn anomaly_score(
    params: &ParamSet,
    cfg: &EncoderConfig,
    stream: &[Vec<f64>],
    window_len: usize,
) -> Result<Vec<f64>> {
    let p = cfg.patch_len;
    if window_len < p || window_len % p != 0 {
        return Err(HeadsError::BadWindow {
            window: window_len,
            patch: p,
        });
    }
    let c = stream.len();
    let t_total = stream[0].len();
    let mut scores = Vec::with_capacity(t_total);
    let mut start = 0;
    while start < t_total {
        let end = (start + window_len).min(t_total);
        let mut window: Vec<Vec<f64>> = stream.iter().map(|row| row[start..end].to_vec()).collect();
        for row in window.iter_mut() {
            row.resize(window_len, 0.0);
        }
        let sample = TimeSeriesSample {
            valid_len: vec![end - start; c],
            values: window,
            dataset_id: 0,
            class_label: None,
            sample_id: format!("window-{start}"),
            anomaly_labels: None,
        };
        let (normalized, _) = normalize_instance(&sample);
        let grid = build_token_grid(&normalized, p, false)?.remove(0);
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let out = forward_grid(&mut g, &bound, cfg, &grid, None, ForwardMode::eval())?;
        let rows: Vec<usize> = (0..c)
            .flat_map(|ci| (0..grid.n_patches).map(move |i| (ci, i)))
            .map(|(ci, i)| grid.patch_slot(ci, i))
            .collect();
        let z_all = g.gather_rows(out, &rows)?;
        let w_out = bound.t("W_out");
        let recon = g.matmul(z_all, w_out)?;
        let pred = g.data(recon);
        for t in 0..end - start {
            let mut err = 0.0;
            for ci in 0..c {
                let patch_idx = t / p;
                let within = t % p;
                let row = ci * grid.n_patches + patch_idx;
                let e = pred[row * p + within] - normalized.values[ci][t];
                err += e * e;
            }
            scores.push(err / c as f64);
        }
        start = end;
    }
    Ok(scores)
}

/// Thresholds scores at the given quantile of the calibration scores;
/// prediction is `score > threshold`.
pub fn detect(scores: &[f64], calibration: &[f64], quantile: f64) -> Result<Vec<bool>> {
    if calibration.is_empty() {
        return Err(HeadsError::EmptyCalibration);
    }
    let threshold = quantile_of(calibration, quantile);
    Ok(scores.iter().map(|&s| s > threshold).collect())
}

pub fn quantile_of(values: &[f64], q: f64) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let q = q.clamp(0.0, 1.0);
    if q == 0.0 {
        // every score strictly above the minimum is positive
        return f64::NEG_INFINITY;
    }
    let idx = ((sorted.len() as f64) * q).ceil() as usize;
    sorted[idx.saturating_sub(1).min(sorted.len() - 1)]
}

/// Appends `ceil(H/P)` mask-token patches per variate after the history,
/// reconstructs them through `W_out`, truncates to the horizon, and
/// de-normalizes with the history statistics.
pub fn forecast(
    params: &ParamSet,
    cfg: &EncoderConfig,
    history: &TimeSeriesSample,
    horizon: usize,
) -> Result<Vec<Vec<f64>>> {
    if horizon == 0 {
        return Err(HeadsError::BadHorizon);
    }
    let p = cfg.patch_len;
    let c = history.n_variates();
    let t = history.len();
    let n_hist = t.div_ceil(p);
    let n_future = horizon.div_ceil(p);
    let n_total = n_hist + n_future;
    let tokens = (n_total + 1) * c + 1;
    if tokens > cfg.context_len {
        return Err(HeadsError::ContextOverflow {
            tokens,
            capacity: cfg.context_len,
        });
    }
    let (normalized, stats) = normalize_instance(history);
    // extend with zeros; the appended patches are mask tokens so the filler
    // values are never embedded
    let mut extended = normalized.clone();
    let t_ext = n_total * p;
    for row in extended.values.iter_mut() {
        row.resize(t_ext, 0.0);
    }
    extended.valid_len = vec![t_ext; c];
    let grid = build_token_grid(&extended, p, false)?.remove(0);
    let plan = MaskPlan {
        masked: (0..c)
            .flat_map(|ci| (n_hist..n_total).map(move |i| (ci, i)))
            .map(|(ci, i)| MaskEntry {
                variate: ci,
                patch_index: i,
                action: MaskAction::Replace,
                target: vec![0.0; p],
                pad_count: 0,
            })
            .collect(),
    };
    let mut g = Graph::new();
    let bound = params.bind(&mut g)?;
    let out = forward_grid(&mut g, &bound, cfg, &grid, Some(&plan), ForwardMode::eval())?;
    let rows: Vec<usize> = plan
        .masked
        .iter()
        .map(|m| grid.patch_slot(m.variate, m.patch_index))
        .collect();
    let z = g.gather_rows(out, &rows)?;
    let w_out = bound.t("W_out");
    let recon = g.matmul(z, w_out)?;
    let pred = g.data(recon);
    let mut result = vec![Vec::with_capacity(horizon); c];
    for (mi, m) in plan.masked.iter().enumerate() {
        for j in 0..p {
            let offset = (m.patch_index - n_hist) * p + j;
            if offset < horizon {
                result[m.variate].push(stats.denormalize(m.variate, pred[mi * p + j]));
            }
        }
    }
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Representation {
    Dom,
    Var,
    Pooled,
}

pub struct ExportedRepresentations {
    /// One row per sample (DOM/POOLED) or per variate (VAR).
    pub matrix: Vec<Vec<f32>>,
    /// `(row, sample_id, label)` per matrix row.
    pub sidecar: Vec<(usize, String, String)>,
}

pub fn export_representations(
    params: &ParamSet,
    cfg: &EncoderConfig,
    samples: &[TimeSeriesSample],
    which: Representation,
) -> Result<ExportedRepresentations> {
    let mut matrix = Vec::new();
    let mut sidecar = Vec::new();
    for sample in samples {
        let (normalized, _) = normalize_instance(sample);
        let grid = build_token_grid(&normalized, cfg.patch_len, false)?.remove(0);
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let out = forward_grid(&mut g, &bound, cfg, &grid, None, ForwardMode::eval())?;
        let data = g.data(out);
        let d = cfg.d_model;
        let label = sample
            .class_label
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".to_string());
        let mut push_row = |row: Vec<f32>, id: String| {
            sidecar.push((matrix.len(), id, label.clone()));
            matrix.push(row);
        };
        match which {
            Representation::Dom => {
                let slot = grid.dom_slot();
                push_row(
                    data[slot * d..(slot + 1) * d].iter().map(|&v| v as f32).collect(),
                    sample.sample_id.clone(),
                );
            }
            Representation::Var => {
                for ci in 0..grid.n_variates {
                    let slot = grid.var_slot(ci);
                    push_row(
                        data[slot * d..(slot + 1) * d].iter().map(|&v| v as f32).collect(),
                        format!("{}#v{ci}", sample.sample_id),
                    );
                }
            }
            Representation::Pooled => {
                let n = grid.len();
                let mut pooled = vec![0.0f64; d];
                for r in 0..n {
                    for j in 0..d {
                        pooled[j] += data[r * d + j];
                    }
                }
                push_row(
                    pooled.iter().map(|&v| (v / n as f64) as f32).collect(),
                    sample.sample_id.clone(),
                );
            }
        }
    }
    Ok(ExportedRepresentations { matrix, sidecar })
}

/// Binary matrix file: magic "TSBE", u32 rows, u32 cols, row-major f32
/// little-endian; plus a tab-separated sidecar `{row, sample_id, label}`.
pub fn write_representation_files(
    reps: &ExportedRepresentations,
    matrix_path: &Path,
    sidecar_path: &Path,
) -> Result<()> {
    let rows = reps.matrix.len() as u32;
    let cols = reps.matrix.first().map(|r| r.len()).unwrap_or(0) as u32;
    let mut f = std::fs::File::create(matrix_path)?;
    f.write_all(b"TSBE")?;
    f.write_all(&rows.to_le_bytes())?;
    f.write_all(&cols.to_le_bytes())?;
    for row in &reps.matrix {
        for v in row {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    let mut s = std::fs::File::create(sidecar_path)?;
    for (row, id, label) in &reps.sidecar {
        writeln!(s, "{row}\t{id}\t{label}")?;
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub task: TaskKind,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub freeze_backbone: bool,
    /// Imputation: fraction of patches to mask per variate.
    pub mask_ratio: f64,
    /// Forecast: prediction horizon in time points.
    pub horizon: usize,
    pub n_classes: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
}

impl FinetuneConfig {
    pub fn new(task: TaskKind) -> Self {
        FinetuneConfig {
            task,
            steps: 200,
            batch_size: 8,
            lr: 1e-4,
            warmup_frac: 0.05,
            freeze_backbone: false,
            mask_ratio: 0.25,
            horizon: 8,
            n_classes: 2,
            weight_decay: 0.01,
            grad_clip: 1.0,
        }
    }
}

fn warmup_lr(base: f64, step: usize, total: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total as f64) * warmup_frac).ceil().max(1.0);
    if (step as f64) < warmup {
        base * (step as f64 + 1.0) / warmup
    } else {
        base
    }
}

fn finetune_mask_plan(task: TaskKind, grid: &TokenGrid, fcfg: &FinetuneConfig, seed: u64) -> MaskPlan {
    match task {
        TaskKind::Classify => MaskPlan::default(),
        TaskKind::Impute => {
            let missing = choose_missing_patches(grid, fcfg.mask_ratio, seed);
            MaskPlan {
                masked: missing
                    .into_iter()
                    .map(|(c, i)| {
                        let slot = &grid.tokens[grid.patch_slot(c, i)];
                        MaskEntry {
                            variate: c,
                            patch_index: i,
                            action: MaskAction::Replace,
                            target: slot.raw_patch.clone().unwrap(),
                            pad_count: slot.pad_count,
                        }
                    })
                    .collect(),
            }
        }
        TaskKind::Anomaly => MaskPlan {
            // unmasked self-reconstruction: every patch contributes with its
            // true value embedding visible
            masked: grid
                .tokens
                .iter()
                .filter(|s| s.raw_patch.is_some())
                .map(|s| MaskEntry {
                    variate: s.variate.unwrap(),
                    patch_index: s.patch_index.unwrap(),
                    action: MaskAction::Keep,
                    target: s.raw_patch.clone().unwrap(),
                    pad_count: s.pad_count,
                })
                .collect(),
        },
        TaskKind::Forecast => {
            let p = grid.patch_len;
            let n_future = fcfg.horizon.div_ceil(p).min(grid.n_patches.saturating_sub(1));
            let start = grid.n_patches - n_future;
            MaskPlan {
                masked: (0..grid.n_variates)
                    .flat_map(|c| (start..grid.n_patches).map(move |i| (c, i)))
                    .map(|(c, i)| {
                        let slot = &grid.tokens[grid.patch_slot(c, i)];
                        MaskEntry {
                            variate: c,
                            patch_index: i,
                            action: MaskAction::Replace,
                            target: slot.raw_patch.clone().unwrap(),
                            pad_count: slot.pad_count,
                        }
                    })
                    .collect(),
            }
        }
    }
}

pub struct FinetuneOutcome {
    pub params: ParamSet,
    /// Mean training loss per step.
    pub losses: Vec<f64>,
}

/// Task fine-tuning loop: AdamW at constant lr with linear warmup over the
/// first `warmup_frac` of steps. With the backbone frozen only head
/// parameters (and `W_out` for reconstruction tasks) receive updates.
pub fn finetune(
    corpus: &Corpus,
    train_indices: &[usize],
    cfg: &EncoderConfig,
    mut params: ParamSet,
    fcfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutcome> {
    if fcfg.task == TaskKind::Classify {
        ensure_classify_head(&mut params, cfg, fcfg.n_classes, seed);
    }
    if fcfg.freeze_backbone {
        for e in params.entries_mut() {
            e.trainable = e.name.starts_with("head.") || e.name == "W_out";
        }
    } else {
        for e in params.entries_mut() {
            e.trainable = true;
        }
    }
    let mut optimizer = AdamW::new(fcfg.weight_decay, fcfg.grad_clip);
    let mut losses = Vec::with_capacity(fcfg.steps);
    for step in 0..fcfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[step as u64, 0xF1]));
        let batch: Vec<usize> = (0..fcfg.batch_size)
            .map(|_| train_indices[rng.gen_range(0..train_indices.len())])
            .collect();

        let mut items = Vec::with_capacity(batch.len());
        for &si in &batch {
            let sample = &corpus.samples[si];
            let (normalized, stats) = normalize_instance(sample);
            let grid = build_token_grid(&normalized, cfg.patch_len, false)?.remove(0);
            let plan = finetune_mask_plan(
                fcfg.task,
                &grid,
                fcfg,
                derive_seed(seed, &[step as u64, si as u64, 0xF2]),
            );
            items.push(PackItem {
                sample_index: si,
                sample_id: sample.sample_id.clone(),
                grid,
                mask_plan: Some(plan),
                ftp: None,
                norm: Some(stats),
                class_label: sample.class_label,
            });
        }
        let rows = pack(items, cfg.context_len)?.rows;

        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let loss = match fcfg.task {
            TaskKind::Classify => classify_batch_loss(&mut g, &bound, cfg, &rows)?,
            _ => reconstruction_batch_loss(&mut g, &bound, cfg, &rows)?,
        };
        let loss_val = g.value(loss);
        if !loss_val.is_finite() {
            return Err(HeadsError::Pretrain(
                crate::pretrain::PretrainError::NonFiniteLoss { step },
            ));
        }
        g.backward(loss)?;
        let mut grads = HashMap::new();
        for entry in params.entries() {
            if entry.trainable {
                grads.insert(entry.name.clone(), g.grad(bound.t(&entry.name)).to_vec());
            }
        }
        drop(g);
        let lr = warmup_lr(fcfg.lr, step, fcfg.steps, fcfg.warmup_frac);
        optimizer.apply(&mut params, &grads, lr);
        losses.push(loss_val);
    }
    Ok(FinetuneOutcome { params, losses })
}

fn classify_batch_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    rows: &[PackedRow],
) -> Result<Tensor> {
    let mut logit_rows: Vec<Tensor> = Vec::new();
    let mut labels = Vec::new();
    for row in rows {
        let z0 = crate::embedding::embed_row(g, bound, cfg, row)?;
        let bias = attention_bias(row);
        let out = encoder_forward(g, bound, cfg, z0, &bias, ForwardMode::eval())?;
        for entry in &row.entries {
            logit_rows.push(classify_logits_from_row(g, bound, out, entry)?);
            labels.push(entry.item.class_label.unwrap_or(0));
        }
    }
    let sources: Vec<(Tensor, usize)> = logit_rows.iter().map(|&t| (t, 0)).collect();
    let stacked = g.assemble_rows(&sources)?;
    Ok(g.cross_entropy_from_logits(stacked, &labels)?)
}

fn reconstruction_batch_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    rows: &[PackedRow],
) -> Result<Tensor> {
    let mut terms = Vec::new();
    for row in rows {
        let losses = row_losses(g, bound, cfg, row, ForwardMode::eval(), false)?;
        for (_, mpm, _) in losses.per_sample {
            terms.push(mpm);
        }
    }
    let n = terms.len().max(1) as f64;
    let mut sum = terms[0];
    for &t in &terms[1..] {
        sum = g.add(sum, t)?;
    }
    Ok(g.scale(sum, 1.0 / n)?)
}
