//! Token-grid construction and sample packing.
//!
//! A C-variate, length-T series with patch length P becomes a grid of
//! `(N+1)*C + 1` token slots (`N = ceil(T/P)`): one DOM slot, then per
//! variate its N PATCH slots followed by one VAR slot. Whole grids are
//! packed into fixed-length contexts with block-diagonal sample boundaries.

use thiserror::Error;

use crate::data::{NormStats, TimeSeriesSample};
use crate::encoder::EncoderConfig;
use crate::numerics::{Bound, Graph, Result as NumResult, Tensor};
use crate::pretrain::{FtpLabels, MaskAction, MaskPlan};

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("empty series")]
    EmptySeries,
    #[error("patch length must be >= 1")]
    BadPatchLen,
    #[error("sample {sample_id}: grid has {len} tokens, exceeding context length {context_len}")]
    GridTooLong {
        sample_id: String,
        len: usize,
        context_len: usize,
    },
    #[error("flat position {pos} exceeds position-table capacity {capacity}")]
    PositionOverflow { pos: usize, capacity: usize },
}

pub type Result<T> = std::result::Result<T, EmbeddingError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Dom,
    Var,
    Patch,
}

#[derive(Debug, Clone)]
pub struct TokenSlot {
    pub role: Role,
    /// Variate index; absent for DOM.
    pub variate: Option<usize>,
    /// Patch index within the variate; PATCH only.
    pub patch_index: Option<usize>,
    /// Raw patch values, zero-padded on the right; PATCH only.
    pub raw_patch: Option<Vec<f64>>,
    /// Number of padded positions at the tail of `raw_patch`.
    pub pad_count: usize,
}

#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Vec<TokenSlot>,
    pub n_patches: usize,
    pub n_variates: usize,
    pub patch_len: usize,
}

impl TokenGrid {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Flat slot index of a PATCH token: DOM is 0, variate `c` occupies
    /// `1 + c*(N+1) ..`, patches in increasing order.
    pub fn patch_slot(&self, variate: usize, patch_index: usize) -> usize {
        1 + variate * (self.n_patches + 1) + patch_index
    }

    pub fn var_slot(&self, variate: usize) -> usize {
        1 + variate * (self.n_patches + 1) + self.n_patches
    }

    pub fn dom_slot(&self) -> usize {
        0
    }
}

/// Splits a series into `N = ceil(T/P)` patches; the last patch is
/// zero-padded on the right and its pad count recorded.
pub fn segment_patches(series: &[f64], patch_len: usize) -> Result<Vec<(Vec<f64>, usize)>> {
    if series.is_empty() {
        return Err(EmbeddingError::EmptySeries);
    }
    if patch_len == 0 {
        return Err(EmbeddingError::BadPatchLen);
    }
    let t = series.len();
    let n = t.div_ceil(patch_len);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let start = i * patch_len;
        let end = ((i + 1) * patch_len).min(t);
        let mut patch = series[start..end].to_vec();
        let pad = patch_len - patch.len();
        patch.resize(patch_len, 0.0);
        out.push((patch, pad));
    }
    Ok(out)
}

/// Builds token grids for one sample. Joint mode (`channel_independent =
/// false`) yields a single `(N+1)C+1` grid; channel-independent mode yields
/// one `N+2` grid per variate.
pub fn build_token_grid(
    sample: &TimeSeriesSample,
    patch_len: usize,
    channel_independent: bool,
) -> Result<Vec<TokenGrid>> {
    let build_one = |variates: &[usize]| -> Result<TokenGrid> {
        let mut tokens = vec![TokenSlot {
            role: Role::Dom,
            variate: None,
            patch_index: None,
            raw_patch: None,
            pad_count: 0,
        }];
        let mut n_patches = 0;
        for (local_c, &c) in variates.iter().enumerate() {
            let patches = segment_patches(&sample.values[c], patch_len)?;
            n_patches = patches.len();
            for (i, (patch, pad)) in patches.into_iter().enumerate() {
                tokens.push(TokenSlot {
                    role: Role::Patch,
                    variate: Some(local_c),
                    patch_index: Some(i),
                    raw_patch: Some(patch),
                    pad_count: pad,
                });
            }
            tokens.push(TokenSlot {
                role: Role::Var,
                variate: Some(local_c),
                patch_index: None,
                raw_patch: None,
                pad_count: 0,
            });
        }
        Ok(TokenGrid {
            tokens,
            n_patches,
            n_variates: variates.len(),
            patch_len,
        })
    };
    if channel_independent {
        (0..sample.n_variates())
            .map(|c| build_one(&[c]))
            .collect()
    } else {
        let all: Vec<usize> = (0..sample.n_variates()).collect();
        Ok(vec![build_one(&all)?])
    }
}

/// Everything packing needs to carry per sample.
#[derive(Debug, Clone)]
pub struct PackItem {
    pub sample_index: usize,
    pub sample_id: String,
    pub grid: TokenGrid,
    pub mask_plan: Option<MaskPlan>,
    pub ftp: Option<FtpLabels>,
    pub norm: Option<NormStats>,
    pub class_label: Option<usize>,
}

/// One sample placed inside a packed row at `offset`.
#[derive(Debug, Clone)]
pub struct PackedEntry {
    pub item: PackItem,
    pub offset: usize,
}

impl PackedEntry {
    /// Flat within-row position of grid slot `slot`.
    pub fn position(&self, slot: usize) -> usize {
        self.offset + slot
    }
}

#[derive(Debug, Clone)]
pub struct PackedRow {
    pub entries: Vec<PackedEntry>,
    pub used: usize,
}

impl PackedRow {
    /// Per-position sample index over the full context; `None` is PAD.
    pub fn block_map(&self, context_len: usize) -> Vec<Option<usize>> {
        let mut map = vec![None; context_len];
        for e in &self.entries {
            for p in e.offset..e.offset + e.item.grid.len() {
                map[p] = Some(e.item.sample_index);
            }
        }
        map
    }

    /// Two positions may attend iff they belong to the same non-PAD sample.
    pub fn attention_allowed(&self, context_len: usize) -> Vec<Vec<bool>> {
        let map = self.block_map(context_len);
        let n = context_len;
        let mut out = vec![vec![false; n]; n];
        for p in 0..n {
            for q in 0..n {
                out[p][q] = map[p].is_some() && map[p] == map[q];
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub rows: Vec<PackedRow>,
    pub context_len: usize,
}

impl PackedBatch {
    /// Finds (row, entry) for a sample index; round-trip addressing.
    pub fn locate(&self, sample_index: usize) -> Option<(usize, &PackedEntry)> {
        for (ri, row) in self.rows.iter().enumerate() {
            for e in &row.entries {
                if e.item.sample_index == sample_index {
                    return Some((ri, e));
                }
            }
        }
        None
    }
}

/// First-fit-decreasing packing of whole grids into context rows.
pub fn pack(items: Vec<PackItem>, context_len: usize) -> Result<PackedBatch> {
    for item in &items {
        if item.grid.len() > context_len {
            return Err(EmbeddingError::GridTooLong {
                sample_id: item.sample_id.clone(),
                len: item.grid.len(),
                context_len,
            });
        }
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    // decreasing length; stable on input order for determinism
    order.sort_by_key(|&i| std::cmp::Reverse(items[i].grid.len()));
    let mut rows: Vec<PackedRow> = Vec::new();
    let mut items: Vec<Option<PackItem>> = items.into_iter().map(Some).collect();
    for idx in order {
        let item = items[idx].take().unwrap();
        let len = item.grid.len();
        let slot = rows.iter_mut().find(|r| r.used + len <= context_len);
        match slot {
            Some(row) => {
                let offset = row.used;
                row.used += len;
                row.entries.push(PackedEntry { item, offset });
            }
            None => rows.push(PackedRow {
                used: len,
                entries: vec![PackedEntry { item, offset: 0 }],
            }),
        }
    }
    Ok(PackedBatch { rows, context_len })
}

/// Embeds one grid into its `len x D` input matrix `Z^0`.
///
/// PATCH slots project their raw patch through `W_in`; masked-and-replaced
/// slots use the shared mask embedding instead; VAR and DOM slots use their
/// learnable embeddings. Every slot gets the absolute position embedding of
/// its flat within-sample index.
pub fn embed_grid(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    grid: &TokenGrid,
    mask_plan: Option<&MaskPlan>,
) -> NumResult<Tensor> {
    embed_grid_at(g, bound, cfg, grid, mask_plan, 0)
}

fn replaced(mask_plan: Option<&MaskPlan>, variate: usize, patch_index: usize) -> bool {
    mask_plan
        .map(|p| {
            p.masked.iter().any(|m| {
                m.variate == variate && m.patch_index == patch_index && m.action == MaskAction::Replace
            })
        })
        .unwrap_or(false)
}

fn embed_grid_at(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    grid: &TokenGrid,
    mask_plan: Option<&MaskPlan>,
    _offset: usize,
) -> NumResult<Tensor> {
    if grid.len() > cfg.context_len {
        return Err(crate::numerics::NumericsError::InvalidArgument {
            op: "embed_grid",
            msg: format!(
                "flat position {} exceeds position-table capacity {}",
                grid.len() - 1,
                cfg.context_len
            ),
        });
    }
    let w_in = bound.t("W_in"); // [D, P]
    let w_in_t = g.transpose(w_in)?; // [P, D]
    let z_mask = bound.t("z_mask");
    let z_var = bound.t("z_var");
    let z_dom = bound.t("z_dom");
    let pe = bound.t("PE");

    // raw patches in token order -> one projection matmul
    let mut patch_rows: Vec<f64> = Vec::new();
    let mut patch_row_of_slot = vec![usize::MAX; grid.len()];
    let mut n_patch_rows = 0;
    for (si, slot) in grid.tokens.iter().enumerate() {
        if let Some(raw) = &slot.raw_patch {
            patch_rows.extend_from_slice(raw);
            patch_row_of_slot[si] = n_patch_rows;
            n_patch_rows += 1;
        }
    }
    let patch_proj = if n_patch_rows > 0 {
        let pm = g.constant(&[n_patch_rows, grid.patch_len], patch_rows)?;
        Some(g.matmul(pm, w_in_t)?) // [n_patch_rows, D]
    } else {
        None
    };

    let mut sources: Vec<(Tensor, usize)> = Vec::with_capacity(grid.len());
    for (si, slot) in grid.tokens.iter().enumerate() {
        match slot.role {
            Role::Dom => sources.push((z_dom, 0)),
            Role::Var => sources.push((z_var, 0)),
            Role::Patch => {
                let c = slot.variate.unwrap();
                let i = slot.patch_index.unwrap();
                if replaced(mask_plan, c, i) {
                    sources.push((z_mask, 0));
                } else {
                    sources.push((patch_proj.unwrap(), patch_row_of_slot[si]));
                }
            }
        }
    }
    let base = g.assemble_rows(&sources)?;
    let positions: Vec<usize> = (0..grid.len()).collect();
    let pe_rows = g.gather_rows(pe, &positions)?;
    g.add(base, pe_rows)
}

/// Embeds a whole packed row into a `used x D` matrix. Position embeddings
/// reset at each sample's start so packing stays neutral.
pub fn embed_row(
    g: &mut Graph,
    bound: &Bound,
    cfg: &EncoderConfig,
    row: &PackedRow,
) -> NumResult<Tensor> {
    let mut parts = Vec::with_capacity(row.entries.len());
    for e in &row.entries {
        parts.push(embed_grid(g, bound, cfg, &e.item.grid, e.item.mask_plan.as_ref())?);
    }
    if parts.len() == 1 {
        return Ok(parts.pop().unwrap());
    }
    // vertical concat via row assembly
    let mut sources = Vec::with_capacity(row.used);
    for (e, t) in row.entries.iter().zip(&parts) {
        for r in 0..e.item.grid.len() {
            sources.push((*t, r));
        }
    }
    g.assemble_rows(&sources)
}

/// Block-diagonal additive attention mask for a packed row: 0 where
/// attention is allowed, a large negative value elsewhere.
pub fn attention_bias(row: &PackedRow) -> Vec<f64> {
    const NEG: f64 = -1e30;
    let n = row.used;
    let mut bias = vec![NEG; n * n];
    for e in &row.entries {
        let start = e.offset;
        let end = e.offset + e.item.grid.len();
        for p in start..end {
            for q in start..end {
                bias[p * n + q] = 0.0;
            }
        }
    }
    bias
}
