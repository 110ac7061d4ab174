//! The two pre-training objectives (masked patch modeling and functional
//! token prediction), their corruption procedures, the joint loss, and the
//! AdamW optimization loop with cosine learning-rate decay.

use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{normalize_instance, normalize_series, Corpus, TimeSeriesSample};
use crate::embedding::{attention_bias, build_token_grid, embed_row, pack, PackItem, PackedRow, Role, TokenGrid};
use crate::encoder::{encoder_forward, EncoderConfig, EncoderError, ForwardMode};
use crate::numerics::{Bound, Graph, ParamSet, Result as NumResult, Tensor};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] crate::numerics::NumericsError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error("checkpoint hook: {0}")]
    Hook(String),
}

pub type Result<T> = std::result::Result<T, PretrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskAction {
    /// Token embedding substituted by the shared mask embedding.
    Replace,
    /// Token keeps its true value embedding but still counts as masked.
    Keep,
}

#[derive(Debug, Clone)]
pub struct MaskEntry {
    pub variate: usize,
    pub patch_index: usize,
    pub action: MaskAction,
    /// Ground-truth patch values captured before any corruption.
    pub target: Vec<f64>,
    pub pad_count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct MaskPlan {
    pub masked: Vec<MaskEntry>,
}

impl MaskPlan {
    /// S, the number of masked patches.
    pub fn s(&self) -> usize {
        self.masked.len()
    }
}

#[derive(Debug, Clone)]
pub struct FtpLabels {
    /// Per-variate: 1 if replaced/foreign, 0 if original. Absent when no
    /// replacement was applied (C == 1 or donor pool exhausted).
    pub variate_labels: Option<Vec<usize>>,
    pub domain_label: usize,
}

/// Independently selects each PATCH slot with probability `alpha`, then
/// assigns REPLACE with probability `replace_prob` (else KEEP). Targets are
/// captured from the grid before any corruption.
pub fn sample_mask(grid: &TokenGrid, alpha: f64, replace_prob: f64, seed: u64) -> MaskPlan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = MaskPlan::default();
    for slot in &grid.tokens {
        if slot.role != Role::Patch {
            continue;
        }
        let select: f64 = rng.gen_range(0.0..1.0);
        if select < alpha {
            let replace: f64 = rng.gen_range(0.0..1.0);
            plan.masked.push(MaskEntry {
                variate: slot.variate.unwrap(),
                patch_index: slot.patch_index.unwrap(),
                action: if replace < replace_prob {
                    MaskAction::Replace
                } else {
                    MaskAction::Keep
                },
                target: slot.raw_patch.clone().unwrap(),
                pad_count: slot.pad_count,
            });
        }
    }
    plan
}

/// Replaces one uniformly chosen variate of a `C >= 2` sample with a donor
/// variate from another dataset, normalized with the donor's own
/// statistics and cropped/tiled to length T. Returns the modified sample
/// and one-hot labels. `C == 1` or an empty donor pool leaves the sample
/// unchanged with no variate labels.
pub fn apply_variate_replacement(
    sample: &TimeSeriesSample,
    corpus: &Corpus,
    seed: u64,
) -> (TimeSeriesSample, FtpLabels) {
    let labels_off = FtpLabels {
        variate_labels: None,
        domain_label: sample.dataset_id,
    };
    if sample.n_variates() < 2 {
        return (sample.clone(), labels_off);
    }
    let pool = corpus.foreign_variates(sample.dataset_id);
    if pool.is_empty() {
        return (sample.clone(), labels_off);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let victim = rng.gen_range(0..sample.n_variates());
    let (donor_sample, donor_variate) = pool[rng.gen_range(0..pool.len())];
    let donor = &corpus.samples[donor_sample].values[donor_variate];
    let t = sample.len();
    let series: Vec<f64> = if donor.len() >= t {
        let start = rng.gen_range(0..=donor.len() - t);
        donor[start..start + t].to_vec()
    } else {
        (0..t).map(|i| donor[i % donor.len()]).collect()
    };
    let series = normalize_series(&series);
    let mut out = sample.clone();
    out.values[victim] = series;
    let mut labels = vec![0usize; sample.n_variates()];
    labels[victim] = 1;
    (
        out,
        FtpLabels {
            variate_labels: Some(labels),
            domain_label: sample.dataset_id,
        },
    )
}

/// Eq.-5-style reconstruction loss: mean squared error over masked,
/// non-padded scalar positions. `reconstructions` is the `[S, P]` matrix of
/// predicted patches in plan order. Returns a zero constant when S = 0.
pub fn mpm_loss(g: &mut Graph, reconstructions: Option<Tensor>, plan: &MaskPlan) -> NumResult<Tensor> {
    let Some(recon) = reconstructions else {
        return g.scalar(0.0);
    };
    if plan.s() == 0 {
        return g.scalar(0.0);
    }
    let p = g.shape(recon)[1];
    let mut targets = Vec::with_capacity(plan.s() * p);
    let mut weights = Vec::with_capacity(plan.s() * p);
    let mut n_real = 0usize;
    for entry in &plan.masked {
        targets.extend_from_slice(&entry.target);
        let real = p - entry.pad_count;
        n_real += real;
        for j in 0..p {
            weights.push(if j < real { 1.0 } else { 0.0 });
        }
    }
    if n_real == 0 {
        return g.scalar(0.0);
    }
    let scale = 1.0 / n_real as f64;
    for w in weights.iter_mut() {
        *w *= scale;
    }
    let tgt = g.constant(&[plan.s(), p], targets)?;
    let diff = g.sub(recon, tgt)?;
    g.weighted_sum_sq(diff, &weights)
}

/// Functional-token-prediction loss: sum of per-variate binary
/// cross-entropies (skipped when variate labels are absent) plus the M-way
/// domain cross-entropy, all from logits via stable log-sum-exp.
pub fn ftp_loss(
    g: &mut Graph,
    var_outputs: Option<Tensor>,
    dom_output: Tensor,
    labels: &FtpLabels,
    bound: &Bound,
) -> NumResult<Tensor> {
    let w_dom = bound.t("W_dom");
    let dom_logits = g.matmul(dom_output, w_dom)?;
    let dom_ce = g.cross_entropy_from_logits(dom_logits, &[labels.domain_label])?;
    match (&labels.variate_labels, var_outputs) {
        (Some(var_labels), Some(var_out)) => {
            let w_var = bound.t("W_var");
            let var_logits = g.matmul(var_out, w_var)?;
            let var_ce = g.cross_entropy_from_logits(var_logits, var_labels)?;
            // cross_entropy is a mean over rows; Eq. 6 sums over variates
            let var_sum = g.scale(var_ce, var_labels.len() as f64)?;
            g.add(var_sum, dom_ce)
        }
        _ => Ok(dom_ce),
    }
}

/// Per-sample loss decomposition for one packed row.
pub struct RowLosses {
    /// (sample_index, mpm, ftp) scalar tensors per entry.
    pub per_sample: Vec<(usize, Tensor, Tensor)>,
    /// Encoder output for the whole row, `[used, D]`.
    pub encoder_out: Tensor,
}

/// Embeds a packed row, runs the encoder, and computes MPM + FTP scalars
/// per sample. `ftp_enabled = false` drops the FTP term entirely.
pub fn row_losses(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    row: &PackedRow,
    mode: ForwardMode,
    ftp_enabled: bool,
) -> Result<RowLosses> {
    let z0 = embed_row(g, bound, cfg, row)?;
    let bias = attention_bias(row);
    let z_out = encoder_forward(g, bound, cfg, z0, &bias, mode)?;
    let w_out = bound.t("W_out");
    let mut per_sample = Vec::with_capacity(row.entries.len());
    for entry in &row.entries {
        let grid = &entry.item.grid;
        // MPM over this entry's masked coordinates
        let plan = entry.item.mask_plan.clone().unwrap_or_default();
        let recon = if plan.s() > 0 {
            let rows: Vec<usize> = plan
                .masked
                .iter()
                .map(|m| entry.position(grid.patch_slot(m.variate, m.patch_index)))
                .collect();
            let z_masked = g.gather_rows(z_out, &rows)?;
            Some(g.matmul(z_masked, w_out)?)
        } else {
            None
        };
        let mpm = mpm_loss(g, recon, &plan)?;
        let ftp = if ftp_enabled {
            if let Some(labels) = &entry.item.ftp {
                let dom_row = g.gather_rows(z_out, &[entry.position(grid.dom_slot())])?;
                let var_out = if labels.variate_labels.is_some() {
                    let rows: Vec<usize> = (0..grid.n_variates)
                        .map(|c| entry.position(grid.var_slot(c)))
                        .collect();
                    Some(g.gather_rows(z_out, &rows)?)
                } else {
                    None
                };
                ftp_loss(g, var_out, dom_row, labels, bound)?
            } else {
                g.scalar(0.0)?
            }
        } else {
            g.scalar(0.0)?
        };
        per_sample.push((entry.item.sample_index, mpm, ftp));
    }
    Ok(RowLosses {
        per_sample,
        encoder_out: z_out,
    })
}

/// Joint objective over a packed batch: mean over samples of
/// `mpm + ftp`. Returns `(total, mean_mpm, mean_ftp)`.
pub fn total_loss(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    rows: &[PackedRow],
    mode: ForwardMode,
    ftp_enabled: bool,
) -> Result<(Tensor, Tensor, Tensor)> {
    let mut mpms = Vec::new();
    let mut ftps = Vec::new();
    for row in rows {
        let losses = row_losses(g, bound, cfg, row, mode, ftp_enabled)?;
        for (_, mpm, ftp) in losses.per_sample {
            mpms.push(mpm);
            ftps.push(ftp);
        }
    }
    let n = mpms.len().max(1) as f64;
    let mut mpm_sum = mpms[0];
    for &t in &mpms[1..] {
        mpm_sum = g.add(mpm_sum, t)?;
    }
    let mut ftp_sum = ftps[0];
    for &t in &ftps[1..] {
        ftp_sum = g.add(ftp_sum, t)?;
    }
    let mean_mpm = g.scale(mpm_sum, 1.0 / n)?;
    let mean_ftp = g.scale(ftp_sum, 1.0 / n)?;
    let total = g.add(mean_mpm, mean_ftp)?;
    Ok((total, mean_mpm, mean_ftp))
}

/// Cosine learning-rate schedule hitting both endpoints exactly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LrSchedule {
    pub lr_init: f64,
    pub lr_final: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn lr(&self, step: usize) -> f64 {
        if self.total_steps == 0 {
            return self.lr_init;
        }
        let t = (step as f64 / self.total_steps as f64).min(1.0);
        self.lr_final + 0.5 * (self.lr_init - self.lr_final) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// AdamW with decoupled weight decay and global-norm gradient clipping.
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub step: usize,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl AdamW {
    pub fn new(weight_decay: f64, grad_clip: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            step: 0,
            moments: HashMap::new(),
        }
    }

    /// Applies one update. `grads` maps parameter name to gradient; names
    /// missing from the map are skipped (frozen or untouched parameters).
    pub fn apply(&mut self, params: &mut ParamSet, grads: &HashMap<String, Vec<f64>>, lr: f64) {
        self.step += 1;
        // global-norm clip, accumulated in declaration order so the sum is
        // bitwise reproducible (HashMap iteration order is not)
        let mut sq = 0.0;
        for entry in params.entries() {
            let Some(g) = grads.get(&entry.name) else {
                continue;
            };
            for v in g {
                sq += v * v;
            }
        }
        let norm = sq.sqrt();
        let clip_scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for entry in params.entries_mut() {
            let Some(grad) = grads.get(&entry.name) else {
                continue;
            };
            let (m, v) = self
                .moments
                .entry(entry.name.clone())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            for i in 0..grad.len() {
                let gi = grad[i] * clip_scale;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                entry.data[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * entry.data[i]);
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub mask_ratio: f64,
    pub replace_prob: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub channel_independent: bool,
    pub ftp_enabled: bool,
    pub dropout_enabled: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            encoder: EncoderConfig::default(),
            mask_ratio: 0.25,
            replace_prob: 0.9,
            batch_size: 8,
            total_steps: 500,
            lr_init: 1e-4,
            lr_final: 2e-7,
            weight_decay: 0.01,
            grad_clip: 1.0,
            channel_independent: false,
            ftp_enabled: true,
            dropout_enabled: false,
        }
    }
}

/// Append-only metrics record, one per step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub loss_mpm: f64,
    pub loss_ftp: f64,
    pub lr: f64,
    pub wallclock_ms: u64,
}

/// Assembles the packed batch for one step: normalization, variate
/// replacement, masking, packing. Deterministic given `(config, seed,
/// step)`; all per-sample randomness derives from hashed seeds.
pub fn assemble_batch(
    corpus: &Corpus,
    indices: &[usize],
    config: &PretrainConfig,
    seed: u64,
    step: usize,
) -> Result<Vec<PackedRow>> {
    let mut items = Vec::new();
    for &si in indices {
        let sample = &corpus.samples[si];
        let (normalized, stats) = normalize_instance(sample);
        let (corrupted, ftp) = if config.ftp_enabled && corpus.n_datasets() >= 2 {
            let s = derive_seed(seed, &[step as u64, si as u64, 1]);
            apply_variate_replacement(&normalized, corpus, s)
        } else {
            (
                normalized,
                FtpLabels {
                    variate_labels: None,
                    domain_label: sample.dataset_id,
                },
            )
        };
        let grids = build_token_grid(&corrupted, config.encoder.patch_len, config.channel_independent)?;
        for (gi, grid) in grids.into_iter().enumerate() {
            let s = derive_seed(seed, &[step as u64, si as u64, 2, gi as u64]);
            let plan = sample_mask(&grid, config.mask_ratio, config.replace_prob, s);
            items.push(PackItem {
                sample_index: si,
                sample_id: sample.sample_id.clone(),
                grid,
                mask_plan: Some(plan),
                ftp: Some(ftp.clone()),
                norm: Some(stats.clone()),
                class_label: sample.class_label,
            });
        }
    }
    Ok(pack(items, config.encoder.context_len)?.rows)
}

/// Draws `batch_size` sample indices for a step.
pub fn draw_batch_indices(n_samples: usize, batch_size: usize, seed: u64, step: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[step as u64, 0xBA7C4]));
    (0..batch_size).map(|_| rng.gen_range(0..n_samples)).collect()
}

pub struct PretrainOutcome {
    pub params: ParamSet,
    pub metrics: Vec<MetricsRecord>,
}

/// Runs the full pre-training loop. `clock_ms` supplies wallclock readings
/// for the metrics log (injectable so seeded runs can be byte-identical);
/// `checkpoint_hook` is called after any step where a periodic save is due.
#[allow(clippy::too_many_arguments)]
pub fn run_pretraining(
    corpus: &Corpus,
    config: &PretrainConfig,
    mut params: ParamSet,
    seed: u64,
    clock_ms: &mut dyn FnMut() -> u64,
    save_every: Option<usize>,
    checkpoint_hook: &mut dyn FnMut(usize, &ParamSet) -> std::result::Result<(), String>,
) -> Result<PretrainOutcome> {
    if corpus.samples.is_empty() {
        return Err(PretrainError::EmptyCorpus);
    }
    let schedule = LrSchedule {
        lr_init: config.lr_init,
        lr_final: config.lr_final,
        total_steps: config.total_steps,
    };
    let mut optimizer = AdamW::new(config.weight_decay, config.grad_clip);
    let mut metrics = Vec::with_capacity(config.total_steps);
    for step in 0..config.total_steps {
        let indices = draw_batch_indices(corpus.samples.len(), config.batch_size, seed, step);
        let rows = assemble_batch(corpus, &indices, config, seed, step)?;
        let mut g = Graph::new();
        let bound = params.bind(&mut g)?;
        let mode = if config.dropout_enabled {
            ForwardMode::train(derive_seed(seed, &[step as u64, 0xD40]))
        } else {
            ForwardMode::eval()
        };
        let (total, mpm, ftp) = total_loss(&mut g, &bound, &config.encoder, &rows, mode, config.ftp_enabled)?;
        let loss_val = g.value(total);
        if !loss_val.is_finite() {
            return Err(PretrainError::NonFiniteLoss { step });
        }
        g.backward(total).map_err(|_| PretrainError::NonFiniteLoss { step })?;
        let mut grads = HashMap::new();
        for entry in params.entries() {
            if entry.trainable {
                grads.insert(entry.name.clone(), g.grad(bound.t(&entry.name)).to_vec());
            }
        }
        let lr = schedule.lr(step);
        let (mpm_v, ftp_v) = (g.value(mpm), g.value(ftp));
        drop(g);
        optimizer.apply(&mut params, &grads, lr);
        metrics.push(MetricsRecord {
            step,
            loss_mpm: mpm_v,
            loss_ftp: ftp_v,
            lr,
            wallclock_ms: clock_ms(),
        });
        if let Some(every) = save_every {
            if every > 0 && (step + 1) % every == 0 {
                checkpoint_hook(step + 1, &params).map_err(PretrainError::Hook)?;
            }
        }
    }
    Ok(PretrainOutcome { params, metrics })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, SyntheticSpec};
    use crate::encoder::init_params;

    fn tiny_grid(c: usize, t: usize, p: usize) -> TokenGrid {
        let sample = TimeSeriesSample {
            values: (0..c)
                .map(|ci| (0..t).map(|i| ((ci + 1) * (i + 1)) as f64 * 0.01).collect())
                .collect(),
            valid_len: vec![t; c],
            dataset_id: 0,
            class_label: None,
            sample_id: "g".into(),
            anomaly_labels: None,
        };
        build_token_grid(&sample, p, false).unwrap().remove(0)
    }

    #[test]
    fn mask_alpha_zero_and_one() {
        let grid = tiny_grid(2, 16, 4);
        assert_eq!(sample_mask(&grid, 0.0, 0.9, 1).s(), 0);
        let full = sample_mask(&grid, 1.0, 0.9, 1);
        assert_eq!(full.s(), 8);
    }

    #[test]
    fn mask_statistics_monte_carlo() {
        // >= 100k PATCH slots in aggregate
        let grid = tiny_grid(4, 100, 4); // 100 patch slots
        let mut total = 0usize;
        let mut masked = 0usize;
        let mut replaced = 0usize;
        for seed in 0..1200u64 {
            let plan = sample_mask(&grid, 0.25, 0.9, seed);
            total += 100;
            masked += plan.s();
            replaced += plan
                .masked
                .iter()
                .filter(|m| m.action == MaskAction::Replace)
                .count();
        }
        assert!(total >= 100_000);
        let frac = masked as f64 / total as f64;
        let rep_frac = replaced as f64 / masked as f64;
        assert!((frac - 0.25).abs() <= 0.005, "mask fraction {frac}");
        assert!((rep_frac - 0.9).abs() <= 0.005, "replace fraction {rep_frac}");
    }

    #[test]
    fn mask_targets_capture_precorruption_values() {
        let grid = tiny_grid(2, 16, 4);
        let plan = sample_mask(&grid, 1.0, 0.9, 3);
        for entry in &plan.masked {
            let slot = grid.patch_slot(entry.variate, entry.patch_index);
            assert_eq!(&entry.target, grid.tokens[slot].raw_patch.as_ref().unwrap());
        }
    }

    #[test]
    fn replacement_c1_unchanged() {
        let spec = SyntheticSpec::default_pretrain(1, 32, 4, 0.1);
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        let (out, labels) = apply_variate_replacement(&corpus.samples[0], &corpus, 7);
        assert_eq!(out.values, corpus.samples[0].values);
        assert!(labels.variate_labels.is_none());
    }

    #[test]
    fn replacement_marks_exactly_one_victim() {
        let spec = SyntheticSpec::default_pretrain(3, 32, 4, 0.1);
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        let sample = &corpus.samples[0];
        let (out, labels) = apply_variate_replacement(sample, &corpus, 5);
        let labels = labels.variate_labels.unwrap();
        assert_eq!(labels.iter().sum::<usize>(), 1);
        let victim = labels.iter().position(|&l| l == 1).unwrap();
        for c in 0..3 {
            if c == victim {
                assert_ne!(out.values[c], sample.values[c]);
            } else {
                assert_eq!(out.values[c], sample.values[c]);
            }
        }
    }

    #[test]
    fn replacement_tiles_short_donor() {
        // donor pool with series shorter than T
        let spec = SyntheticSpec::default_pretrain(2, 10, 2, 0.0);
        let mut corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        for s in corpus.samples.iter_mut().filter(|s| s.dataset_id == 1) {
            for row in s.values.iter_mut() {
                row.truncate(4);
            }
            s.valid_len = vec![4; s.values.len()];
        }
        let sample = corpus.samples.iter().find(|s| s.dataset_id == 0).unwrap().clone();
        let (out, labels) = apply_variate_replacement(&sample, &corpus, 2);
        let victim = labels
            .variate_labels
            .unwrap()
            .iter()
            .position(|&l| l == 1)
            .unwrap();
        // tiled donors repeat with period equal to the donor length
        let v = &out.values[victim];
        assert_eq!(v.len(), 10);
        for i in 4..10 {
            assert_eq!(v[i], v[i - 4]);
        }
    }

    #[test]
    fn single_dataset_pool_disables_discrimination() {
        let mut spec = SyntheticSpec::default_pretrain(3, 16, 4, 0.0);
        spec.families.truncate(1);
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        let (_, labels) = apply_variate_replacement(&corpus.samples[0], &corpus, 3);
        assert!(labels.variate_labels.is_none());
    }

    #[test]
    fn mpm_loss_examples() {
        let mut g = Graph::new();
        // perfect reconstruction -> 0
        let plan = MaskPlan {
            masked: vec![MaskEntry {
                variate: 0,
                patch_index: 0,
                action: MaskAction::Replace,
                target: vec![0.5, -0.5],
                pad_count: 0,
            }],
        };
        let recon = g.constant(&[1, 2], vec![0.5, -0.5]).unwrap();
        let l = mpm_loss(&mut g, Some(recon), &plan).unwrap();
        assert_eq!(g.value(l), 0.0);

        // S=1, P=2, p=[0,0], p_hat=[1,1] -> 1.0
        let plan = MaskPlan {
            masked: vec![MaskEntry {
                variate: 0,
                patch_index: 0,
                action: MaskAction::Replace,
                target: vec![0.0, 0.0],
                pad_count: 0,
            }],
        };
        let recon = g.constant(&[1, 2], vec![1.0, 1.0]).unwrap();
        let l = mpm_loss(&mut g, Some(recon), &plan).unwrap();
        assert!((g.value(l) - 1.0).abs() < 1e-12);

        // S=2, P=2: errors [1,1] and [3,0] -> 2.75
        let plan = MaskPlan {
            masked: vec![
                MaskEntry {
                    variate: 0,
                    patch_index: 0,
                    action: MaskAction::Replace,
                    target: vec![0.0, 0.0],
                    pad_count: 0,
                },
                MaskEntry {
                    variate: 0,
                    patch_index: 1,
                    action: MaskAction::Keep,
                    target: vec![0.0, 0.0],
                    pad_count: 0,
                },
            ],
        };
        let recon = g.constant(&[2, 2], vec![1.0, 1.0, 3.0, 0.0]).unwrap();
        let l = mpm_loss(&mut g, Some(recon), &plan).unwrap();
        assert!((g.value(l) - 2.75).abs() < 1e-12);

        // empty plan -> 0
        let l = mpm_loss(&mut g, None, &MaskPlan::default()).unwrap();
        assert_eq!(g.value(l), 0.0);
    }

    #[test]
    fn mpm_loss_padded_tail_weighted_zero() {
        let mut g = Graph::new();
        let plan = MaskPlan {
            masked: vec![MaskEntry {
                variate: 0,
                patch_index: 0,
                action: MaskAction::Replace,
                target: vec![1.0, 0.0],
                pad_count: 1,
            }],
        };
        // huge error at the padded position does not count
        let recon = g.constant(&[1, 2], vec![2.0, 100.0]).unwrap();
        let l = mpm_loss(&mut g, Some(recon), &plan).unwrap();
        assert!((g.value(l) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ftp_loss_examples() {
        let cfg = EncoderConfig {
            d_model: 4,
            n_layers: 0,
            n_heads: 1,
            ffn_mult: 1,
            dropout: 0.0,
            context_len: 8,
            patch_len: 2,
        };
        // uniform logits: zero weights in W_var / W_dom
        let mut params = init_params(&cfg, 4, 1);
        params.get_mut("W_var").unwrap().data.fill(0.0);
        params.get_mut("W_dom").unwrap().data.fill(0.0);
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let var_out = g.constant(&[2, 4], vec![0.3; 8]).unwrap();
        let dom_out = g.constant(&[1, 4], vec![0.3; 4]).unwrap();
        let labels = FtpLabels {
            variate_labels: Some(vec![1, 0]),
            domain_label: 2,
        };
        let l = ftp_loss(&mut g, Some(var_out), dom_out, &labels, &bound).unwrap();
        let expect = 2.0 * 2.0_f64.ln() + 4.0_f64.ln();
        assert!((g.value(l) - expect).abs() < 1e-12, "{}", g.value(l));

        // variate term skipped when labels absent: M=4 -> ln 4
        let dom_out = g.constant(&[1, 4], vec![0.3; 4]).unwrap();
        let labels = FtpLabels {
            variate_labels: None,
            domain_label: 0,
        };
        let l = ftp_loss(&mut g, None, dom_out, &labels, &bound).unwrap();
        assert!((g.value(l) - 4.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn lr_schedule_endpoints_and_monotone() {
        let s = LrSchedule {
            lr_init: 1e-4,
            lr_final: 2e-7,
            total_steps: 1000,
        };
        assert_eq!(s.lr(0), 1e-4);
        assert_eq!(s.lr(1000), 2e-7);
        let mut prev = s.lr(0);
        for step in 1..=1000 {
            let lr = s.lr(step);
            assert!(lr <= prev + 1e-18, "step {step}");
            prev = lr;
        }
    }

    #[test]
    fn adamw_moves_toward_minimum() {
        let mut params = ParamSet::new();
        params.insert("x", vec![1, 1], vec![5.0]);
        let mut opt = AdamW::new(0.0, 0.0);
        for _ in 0..2000 {
            let x = params.get("x").unwrap().data[0];
            let mut grads = HashMap::new();
            grads.insert("x".to_string(), vec![2.0 * x]);
            opt.apply(&mut params, &grads, 1e-2);
        }
        assert!(params.get("x").unwrap().data[0].abs() < 1e-2);
    }

    #[test]
    fn frozen_ftp_heads_get_zero_grads_without_labels() {
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            context_len: 32,
            patch_len: 4,
        };
        let spec = SyntheticSpec::default_pretrain(2, 16, 4, 0.1);
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        let params = init_params(&cfg, corpus.n_datasets(), 1);
        let config = PretrainConfig {
            encoder: cfg.clone(),
            ..Default::default()
        };
        let mut rows = assemble_batch(&corpus, &[0, 1], &config, 1, 0).unwrap();
        // withhold all FTP labels
        for row in rows.iter_mut() {
            for e in row.entries.iter_mut() {
                e.item.ftp = None;
            }
        }
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let (total, _, _) = total_loss(&mut g, &bound, &cfg, &rows, ForwardMode::eval(), true).unwrap();
        g.backward(total).unwrap();
        assert!(g.grad(bound.t("W_var")).iter().all(|&v| v == 0.0));
        assert!(g.grad(bound.t("W_dom")).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pretraining_is_deterministic() {
        let spec = SyntheticSpec::default_pretrain(2, 24, 4, 0.1);
        let corpus = generate_synthetic_corpus(&spec, 1).unwrap();
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            context_len: 32,
            patch_len: 8,
        };
        let config = PretrainConfig {
            encoder: cfg.clone(),
            batch_size: 2,
            total_steps: 5,
            ..Default::default()
        };
        let run = || {
            let params = init_params(&cfg, corpus.n_datasets(), 3);
            let mut clock = || 0u64;
            run_pretraining(&corpus, &config, params, 42, &mut clock, None, &mut |_, _| Ok(()))
                .unwrap()
                .metrics
        };
        let a = run();
        let b = run();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.loss_mpm.to_bits(), y.loss_mpm.to_bits());
            assert_eq!(x.loss_ftp.to_bits(), y.loss_ftp.to_bits());
        }
    }
}
