//! Encoder-only transformer backbone over flattened token embeddings.
//!
//! Pre-layer-norm residual blocks: `Z + MHSA(LN(Z))` then `+ FFN(LN(.))`,
//! with a final layer norm after the stack. Disallowed attention pairs get
//! a large negative bias before softmax.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Bound, Graph, NumericsError, ParamSet, Result as NumResult, Tensor};
use crate::seeding::derive_seed;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("layer {layer}: {source}")]
    Layer {
        layer: usize,
        source: NumericsError,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_mult: usize,
    pub dropout: f64,
    pub context_len: usize,
    pub patch_len: usize,
}

impl Default for EncoderConfig {
    /// Desk-scale default; the BERT-base size (L=12, D=768, A=12) is
    /// available via configuration.
    fn default() -> Self {
        EncoderConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_mult: 4,
            dropout: 0.1,
            context_len: 512,
            patch_len: 24,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        if self.d_model == 0 || self.n_heads == 0 || self.ffn_mult == 0 || self.context_len == 0 || self.patch_len == 0
        {
            return Err(EncoderError::BadConfig("all dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EncoderError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(EncoderError::BadConfig(format!("dropout {} not in [0,1)", self.dropout)));
        }
        Ok(())
    }

    pub fn ffn_hidden(&self) -> usize {
        self.ffn_mult * self.d_model
    }

    /// Closed-form parameter count of backbone + embeddings + pre-training
    /// projections for `m` datasets.
    pub fn param_count(&self, m: usize) -> usize {
        let d = self.d_model;
        let h = self.ffn_hidden();
        let embeddings = 2 * d * self.patch_len + self.context_len * d + 3 * d;
        let per_layer = 4 * (d * d + d) + (d * h + h) + (h * d + d) + 2 * (2 * d);
        let final_ln = 2 * d;
        let heads = d * 2 + d * m;
        embeddings + self.n_layers * per_layer + final_ln + heads
    }
}

/// Forward-pass mode: dropout is active only in training with a seeded
/// generator, so identical seeds give bitwise-identical outputs.
#[derive(Debug, Clone, Copy)]
pub struct ForwardMode {
    pub training: bool,
    pub dropout_seed: u64,
}

impl ForwardMode {
    pub fn eval() -> Self {
        ForwardMode {
            training: false,
            dropout_seed: 0,
        }
    }

    pub fn train(seed: u64) -> Self {
        ForwardMode {
            training: true,
            dropout_seed: seed,
        }
    }
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

/// Initializes the full parameter set: truncated normal (std 0.02) weights,
/// zero biases and layer-norm betas, unit gammas. `m` sizes the domain
/// classification projection.
pub fn init_params(cfg: &EncoderConfig, m: usize, seed: u64) -> ParamSet {
    let d = cfg.d_model;
    let p = cfg.patch_len;
    let h = cfg.ffn_hidden();
    let mut params = ParamSet::new();
    let mut counter = 0u64;
    let mut normal = |n: usize| -> Vec<f64> {
        counter += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x1217, counter]));
        (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect()
    };
    params.insert("W_in", vec![d, p], normal(d * p));
    params.insert("W_out", vec![d, p], normal(d * p));
    // Learnable position table initialized with the fixed sinusoidal
    // encoding. A near-zero random init leaves all positions (and hence all
    // VAR/MASK slots of a sample) almost indistinguishable, and short runs
    // never develop the position-selective attention that variate-level
    // objectives need; the sinusoidal start provides that structure from
    // step 0 while remaining trainable.
    let mut pe = Vec::with_capacity(cfg.context_len * d);
    for pos in 0..cfg.context_len {
        for j in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (j / 2)) as f64 / d as f64);
            pe.push(if j % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    params.insert("PE", vec![cfg.context_len, d], pe);
    params.insert("z_mask", vec![1, d], normal(d));
    params.insert("z_var", vec![1, d], normal(d));
    params.insert("z_dom", vec![1, d], normal(d));
    for l in 0..cfg.n_layers {
        for w in ["Wq", "Wk", "Wv", "Wo"] {
            params.insert(&format!("layer{l}.attn.{w}"), vec![d, d], normal(d * d));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            params.insert(&format!("layer{l}.attn.{b}"), vec![1, d], vec![0.0; d]);
        }
        params.insert(&format!("layer{l}.ln1.gamma"), vec![1, d], vec![1.0; d]);
        params.insert(&format!("layer{l}.ln1.beta"), vec![1, d], vec![0.0; d]);
        params.insert(&format!("layer{l}.ffn.W1"), vec![d, h], normal(d * h));
        params.insert(&format!("layer{l}.ffn.b1"), vec![1, h], vec![0.0; h]);
        params.insert(&format!("layer{l}.ffn.W2"), vec![h, d], normal(h * d));
        params.insert(&format!("layer{l}.ffn.b2"), vec![1, d], vec![0.0; d]);
        params.insert(&format!("layer{l}.ln2.gamma"), vec![1, d], vec![1.0; d]);
        params.insert(&format!("layer{l}.ln2.beta"), vec![1, d], vec![0.0; d]);
    }
    params.insert("ln_f.gamma", vec![1, d], vec![1.0; d]);
    params.insert("ln_f.beta", vec![1, d], vec![0.0; d]);
    params.insert("W_var", vec![d, 2], normal(d * 2));
    params.insert("W_dom", vec![d, m], normal(d * m));
    params
}

const LN_EPS: f64 = 1e-5;

fn dropout(
    g: &mut Graph,
    x: Tensor,
    cfg: &EncoderConfig,
    mode: ForwardMode,
    site: u64,
) -> NumResult<Tensor> {
    if !mode.training || cfg.dropout == 0.0 {
        return Ok(x);
    }
    let n: usize = g.shape(x).iter().product();
    let keep = 1.0 - cfg.dropout;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(mode.dropout_seed, &[0xD0, site]));
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let shape = g.shape(x).to_vec();
    let m = g.constant(&shape, mask)?;
    g.mul(x, m)
}

/// One pre-LN residual block over a `[n, D]` token matrix. `attn_bias` is a
/// row-major `n x n` additive mask (0 allowed, large negative disallowed).
pub fn transformer_block(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    layer: usize,
    z: Tensor,
    attn_bias: &[f64],
    mode: ForwardMode,
) -> NumResult<Tensor> {
    let d = cfg.d_model;
    let n = g.shape(z)[0];
    let head_dim = d / cfg.n_heads;
    let p = |name: &str| format!("layer{layer}.{name}");

    // attention sublayer
    let ln1 = {
        let gamma = bound.t(&p("ln1.gamma"));
        let beta = bound.t(&p("ln1.beta"));
        g.layer_norm_rows(z, gamma, beta, LN_EPS)?
    };
    let q = {
        let w = bound.t(&p("attn.Wq"));
        let b = bound.t(&p("attn.bq"));
        let x = g.matmul(ln1, w)?;
        g.add_row(x, b)?
    };
    let k = {
        let w = bound.t(&p("attn.Wk"));
        let b = bound.t(&p("attn.bk"));
        let x = g.matmul(ln1, w)?;
        g.add_row(x, b)?
    };
    let v = {
        let w = bound.t(&p("attn.Wv"));
        let b = bound.t(&p("attn.bv"));
        let x = g.matmul(ln1, w)?;
        g.add_row(x, b)?
    };
    let bias = g.constant(&[n, n], attn_bias.to_vec())?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut head_outputs = Vec::with_capacity(cfg.n_heads);
    for hh in 0..cfg.n_heads {
        let qh = g.narrow_cols(q, hh * head_dim, head_dim)?;
        let kh = g.narrow_cols(k, hh * head_dim, head_dim)?;
        let vh = g.narrow_cols(v, hh * head_dim, head_dim)?;
        let kt = g.transpose(kh)?;
        let scores = g.matmul(qh, kt)?;
        let scaled = g.scale(scores, scale)?;
        let masked = g.add(scaled, bias)?;
        let attn = g.softmax_rows(masked)?;
        head_outputs.push(g.matmul(attn, vh)?);
    }
    let merged = g.concat_cols(&head_outputs)?;
    let attn_out = {
        let w = bound.t(&p("attn.Wo"));
        let b = bound.t(&p("attn.bo"));
        let x = g.matmul(merged, w)?;
        g.add_row(x, b)?
    };
    let attn_out = dropout(g, attn_out, cfg, mode, (layer as u64) * 2)?;
    let h1 = g.add(z, attn_out)?;

    // feed-forward sublayer
    let ln2 = {
        let gamma = bound.t(&p("ln2.gamma"));
        let beta = bound.t(&p("ln2.beta"));
        g.layer_norm_rows(h1, gamma, beta, LN_EPS)?
    };
    let ffn = {
        let w1 = bound.t(&p("ffn.W1"));
        let b1 = bound.t(&p("ffn.b1"));
        let w2 = bound.t(&p("ffn.W2"));
        let b2 = bound.t(&p("ffn.b2"));
        let x = g.matmul(ln2, w1)?;
        let x = g.add_row(x, b1)?;
        let x = g.gelu(x)?;
        let x = g.matmul(x, w2)?;
        g.add_row(x, b2)?
    };
    let ffn = dropout(g, ffn, cfg, mode, (layer as u64) * 2 + 1)?;
    g.add(h1, ffn)
}

/// Applies all `L` blocks then the final layer norm.
pub fn encoder_forward(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    z0: Tensor,
    attn_bias: &[f64],
    mode: ForwardMode,
) -> Result<Tensor, EncoderError> {
    let mut z = z0;
    for layer in 0..cfg.n_layers {
        z = transformer_block(g, bound, cfg, layer, z, attn_bias, mode)
            .map_err(|source| EncoderError::Layer { layer, source })?;
    }
    let gamma = bound.t("ln_f.gamma");
    let beta = bound.t("ln_f.beta");
    Ok(g.layer_norm_rows(z, gamma, beta, LN_EPS)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::check_gradients;
    use rand::rngs::StdRng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            context_len: 16,
            patch_len: 4,
        }
    }

    fn rand_input(n: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    #[test]
    fn single_token_attends_to_itself() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 2, 1);
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let z = g.constant(&[1, 8], rand_input(1, 8, 2)).unwrap();
        let out = encoder_forward(&mut g, &bound, &cfg, z, &[0.0], ForwardMode::eval()).unwrap();
        assert!(g.data(out).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn two_packed_samples_isolated() {
        let cfg = tiny_cfg();
        let params = init_params(&cfg, 2, 1);
        // 3 tokens of sample A, 3 of sample B, block-diagonal
        let mut bias = vec![-1e30; 36];
        for p in 0..3 {
            for q in 0..3 {
                bias[p * 6 + q] = 0.0;
                bias[(p + 3) * 6 + q + 3] = 0.0;
            }
        }
        let run = |b_input: &[f64]| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = params.bind(&mut g).unwrap();
            let mut data = rand_input(3, 8, 5);
            data.extend_from_slice(b_input);
            let z = g.constant(&[6, 8], data).unwrap();
            let out = encoder_forward(&mut g, &bound, &cfg, z, &bias, ForwardMode::eval()).unwrap();
            g.data(out)[..3 * 8].to_vec()
        };
        let out1 = run(&rand_input(3, 8, 6));
        let out2 = run(&rand_input(3, 8, 7));
        for (a, b) in out1.iter().zip(&out2) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_output_projections_reduce_to_composition() {
        let cfg = EncoderConfig {
            n_layers: 1,
            ..tiny_cfg()
        };
        let mut params = init_params(&cfg, 2, 3);
        params.get_mut("layer0.attn.Wo").unwrap().data.fill(0.0);
        let n = 4;
        let input = rand_input(n, 8, 9);
        let bias = vec![0.0; n * n];

        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let z = g.constant(&[n, 8], input.clone()).unwrap();
        let out = encoder_forward(&mut g, &bound, &cfg, z, &bias, ForwardMode::eval()).unwrap();
        let got = g.data(out).to_vec();

        // hand-composed: with Wo = 0 (and bo = 0), the block is
        // h = z + 0; out = ln_f(h + FFN(LN2(h)))
        let mut g2 = Graph::new();
        let bound2 = params.bind(&mut g2).unwrap();
        let z = g2.constant(&[n, 8], input).unwrap();
        let ln2 = {
            let gamma = bound2.t("layer0.ln2.gamma");
            let beta = bound2.t("layer0.ln2.beta");
            g2.layer_norm_rows(z, gamma, beta, LN_EPS).unwrap()
        };
        let ffn = {
            let w1 = bound2.t("layer0.ffn.W1");
            let b1 = bound2.t("layer0.ffn.b1");
            let w2 = bound2.t("layer0.ffn.W2");
            let b2 = bound2.t("layer0.ffn.b2");
            let x = g2.matmul(ln2, w1).unwrap();
            let x = g2.add_row(x, b1).unwrap();
            let x = g2.gelu(x).unwrap();
            let x = g2.matmul(x, w2).unwrap();
            g2.add_row(x, b2).unwrap()
        };
        let h = g2.add(z, ffn).unwrap();
        let gamma = bound2.t("ln_f.gamma");
        let beta = bound2.t("ln_f.beta");
        let expect = g2.layer_norm_rows(h, gamma, beta, LN_EPS).unwrap();
        for (a, b) in got.iter().zip(g2.data(expect)) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_layers_is_final_norm_only() {
        let cfg = EncoderConfig {
            n_layers: 0,
            ..tiny_cfg()
        };
        let params = init_params(&cfg, 2, 1);
        let mut g = Graph::new();
        let bound = params.bind(&mut g).unwrap();
        let input = rand_input(2, 8, 4);
        let z = g.constant(&[2, 8], input.clone()).unwrap();
        let out = encoder_forward(&mut g, &bound, &cfg, z, &vec![0.0; 4], ForwardMode::eval()).unwrap();
        let gamma = bound.t("ln_f.gamma");
        let beta = bound.t("ln_f.beta");
        let z2 = g.constant(&[2, 8], input).unwrap();
        let expect = g.layer_norm_rows(z2, gamma, beta, LN_EPS).unwrap();
        assert_eq!(g.data(out), g.data(expect));
    }

    #[test]
    fn deterministic_and_dropout_modes() {
        let cfg = EncoderConfig {
            dropout: 0.0,
            ..tiny_cfg()
        };
        let params = init_params(&cfg, 2, 8);
        let input = rand_input(4, 8, 11);
        let run = |mode: ForwardMode| -> Vec<u64> {
            let mut g = Graph::new();
            let bound = params.bind(&mut g).unwrap();
            let z = g.constant(&[4, 8], input.clone()).unwrap();
            let out = encoder_forward(&mut g, &bound, &cfg, z, &vec![0.0; 16], mode).unwrap();
            g.data(out).iter().map(|v| v.to_bits()).collect()
        };
        // same seed twice -> bitwise equal
        assert_eq!(run(ForwardMode::train(3)), run(ForwardMode::train(3)));
        // train with dropout=0 == eval
        assert_eq!(run(ForwardMode::train(3)), run(ForwardMode::eval()));
    }

    #[test]
    fn dropout_active_in_training() {
        let cfg = EncoderConfig {
            dropout: 0.5,
            ..tiny_cfg()
        };
        let params = init_params(&cfg, 2, 8);
        let input = rand_input(4, 8, 11);
        let run = |mode: ForwardMode| -> Vec<f64> {
            let mut g = Graph::new();
            let bound = params.bind(&mut g).unwrap();
            let z = g.constant(&[4, 8], input.clone()).unwrap();
            let out = encoder_forward(&mut g, &bound, &cfg, z, &vec![0.0; 16], mode).unwrap();
            g.data(out).to_vec()
        };
        assert_ne!(run(ForwardMode::train(3)), run(ForwardMode::eval()));
    }

    #[test]
    fn block_gradients_check() {
        let cfg = EncoderConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ffn_mult: 2,
            dropout: 0.0,
            context_len: 8,
            patch_len: 4,
        };
        let params = init_params(&cfg, 2, 21);
        let input = rand_input(3, 8, 22);
        let bias = vec![0.0; 9];
        let report = check_gradients(
            &params,
            move |g, bound| {
                let z = g.constant(&[3, 8], input.clone())?;
                let out = transformer_block(g, bound, &cfg, 0, z, &bias, ForwardMode::eval())?;
                let sq = g.mul(out, out)?;
                g.sum(sq)
            },
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.passed, "max rel err {}", report.max_rel_err);
    }

    #[test]
    fn param_count_formula_matches_allocation() {
        for (cfg, m) in [
            (tiny_cfg(), 2),
            (
                EncoderConfig {
                    d_model: 64,
                    n_layers: 2,
                    n_heads: 4,
                    ffn_mult: 4,
                    dropout: 0.1,
                    context_len: 512,
                    patch_len: 24,
                },
                5,
            ),
        ] {
            let params = init_params(&cfg, m, 0);
            assert_eq!(params.n_scalars(), cfg.param_count(m));
        }
    }

    #[test]
    fn paper_scale_param_count_near_85_6m() {
        let cfg = EncoderConfig {
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            ffn_mult: 4,
            dropout: 0.1,
            context_len: 512,
            patch_len: 36,
        };
        let count = cfg.param_count(8) as f64;
        let reported = 85.6e6;
        assert!(
            (count - reported).abs() / reported <= 0.05,
            "count {count} vs {reported}"
        );
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_cfg();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = tiny_cfg();
        cfg.dropout = 1.0;
        assert!(cfg.validate().is_err());
        assert!(tiny_cfg().validate().is_ok());
    }
}
