//! Hybrid target attention.
//!
//! The stack has `blocks` blocks; each runs `target_layers` target-attention
//! layers followed by `full_layers` full-attention layers. Both layer types
//! are gated pointwise attention with grouped key/value heads:
//!
//! ```text
//! X~         = GLN(X)
//! U,Q,K,V    = split(silu(f1(X~)))               (U,Q: H heads; K,V: G heads)
//! A_h        = silu(Q_h K_g^T ⊙ M) V_g · norm     g = h / (H/G)
//! X'         = f2(GLN(A_1 ‖ … ‖ A_H) ⊙ U) + X
//! ```
//!
//! A target layer computes `U, Q` only for T rows, keeps `K, V` over all rows,
//! and copies H/R rows through unchanged.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSchema;
use crate::engine::{fan_in_uniform, Graph, MacCount, MacKind, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::mask::MaskMatrix;
use crate::tokenizer::{TokenKind, TokenLayout, TokenMeta};
use crate::ScenarioId;

pub const NORM_EPS: f64 = 1e-6;

/// Scaling applied to each attention row after the pointwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNorm {
    /// `1/N` with `N` the sequence length. Couples every row to the number of
    /// T tokens in the record.
    SeqLen,
    /// `1/(visible keys)` per query row.
    ValidCount,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HtaConfig {
    pub d_model: usize,
    pub blocks: usize,
    pub target_layers: usize,
    pub full_layers: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub norm: AttentionNorm,
}

impl Default for HtaConfig {
    fn default() -> Self {
        Self { d_model: 64, blocks: 4, target_layers: 3, full_layers: 1, heads: 4, kv_heads: 2, norm: AttentionNorm::ValidCount }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Target,
    Full,
}

impl HtaConfig {
    /// Production-size settings (`d_model = 768, B = 4, K = 3, H = 3, G = 1`).
    pub fn production() -> Self {
        Self { d_model: 768, blocks: 4, target_layers: 3, full_layers: 1, heads: 3, kv_heads: 1, norm: AttentionNorm::ValidCount }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.kv_heads == 0 || !self.heads.is_multiple_of(self.kv_heads) {
            return fail(format!("heads ({}) must be a positive multiple of kv_heads ({})", self.heads, self.kv_heads));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!("d_model ({}) must be divisible by heads ({})", self.d_model, self.heads));
        }
        if self.blocks == 0 || self.target_layers + self.full_layers == 0 {
            return fail("need at least one block with at least one layer".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Query heads per key/value group.
    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    pub fn layer_kinds(&self) -> Vec<LayerKind> {
        (0..self.blocks)
            .flat_map(|_| {
                std::iter::repeat_n(LayerKind::Target, self.target_layers)
                    .chain(std::iter::repeat_n(LayerKind::Full, self.full_layers))
            })
            .collect()
    }

    /// `(K:P)xB`, with the lazy-decoder case named.
    pub fn label(&self) -> String {
        let base = format!("({}:{})x{}", self.target_layers, self.full_layers, self.blocks);
        if self.full_layers == 0 {
            format!("{base} lazy decoder")
        } else {
            base
        }
    }

    /// Learnable scalars in the stack given the number of GLN groups.
    pub fn param_count(&self, gln_groups: usize) -> usize {
        let (d, hd, gd) = (self.d_model, self.heads * self.head_dim(), self.kv_heads * self.head_dim());
        let gln = 2 * gln_groups * 2 * d;
        let f2 = hd * d + d;
        let full = (d + 1) * (2 * hd + 2 * gd) + f2 + gln;
        let target = (d + 1) * 2 * hd + (d + 1) * 2 * gd + f2 + gln;
        self.blocks * (self.target_layers * target + self.full_layers * full)
    }

    /// Scalars in the key/value projection of one layer.
    pub fn kv_projection_params(&self) -> usize {
        (self.d_model + 1) * 2 * self.kv_heads * self.head_dim()
    }
}

/// Normalization group of a token: its kind plus source sequence or scenario.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupKey {
    pub kind: TokenKind,
    pub id: u32,
}

impl GroupKey {
    pub fn of(meta: &TokenMeta) -> Self {
        Self { kind: meta.kind, id: meta.group_id }
    }

    fn name(&self) -> String {
        format!("{:?}{}", self.kind, self.id)
    }

    fn owner(&self) -> Option<ScenarioId> {
        (self.kind == TokenKind::T).then_some(self.id)
    }
}

pub fn schema_groups(schema: &DatasetSchema) -> Vec<GroupKey> {
    let h = schema.historical.iter().map(|q| GroupKey { kind: TokenKind::H, id: q.seq_id });
    let r = schema.realtime.iter().map(|q| GroupKey { kind: TokenKind::R, id: q.seq_id });
    let t = schema.scenarios.iter().map(|s| GroupKey { kind: TokenKind::T, id: s.scenario_id });
    h.chain(r).chain(t).collect()
}

#[derive(Clone, Debug)]
pub struct GlnParams {
    pub groups: BTreeMap<GroupKey, (ParamId, ParamId)>,
}

impl GlnParams {
    fn register<T: Real>(store: &mut ParamStore<T>, prefix: &str, groups: &[GroupKey], d: usize) -> Result<()> {
        for k in groups {
            store.register(format!("{prefix}.{}.gain", k.name()), k.owner(), Tensor::filled(1, d, T::one()))?;
            store.register(format!("{prefix}.{}.bias", k.name()), k.owner(), Tensor::zeros(1, d))?;
        }
        Ok(())
    }

    fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, groups: &[GroupKey]) -> Result<Self> {
        let mut out = BTreeMap::new();
        for k in groups {
            let gain = store.id(&format!("{prefix}.{}.gain", k.name()))?;
            let bias = store.id(&format!("{prefix}.{}.bias", k.name()))?;
            out.insert(*k, (gain, bias));
        }
        Ok(Self { groups: out })
    }
}

/// Group layer normalization: per-row standardization followed by the affine
/// transform of the row's group.
pub fn gln<T: Real>(g: &mut Graph<'_, T>, x: Var, metas: &[TokenMeta], params: &GlnParams) -> Result<Var> {
    if g.shape(x)[0] != metas.len() {
        return Err(Error::Dimension(format!("GLN over {} rows with {} metas", g.shape(x)[0], metas.len())));
    }
    let mut local: BTreeMap<GroupKey, usize> = BTreeMap::new();
    let mut gains = Vec::new();
    let mut biases = Vec::new();
    let mut slots = Vec::with_capacity(metas.len());
    for m in metas {
        let key = GroupKey::of(m);
        let slot = match local.get(&key) {
            Some(&s) => s,
            None => {
                let &(gain, bias) = params
                    .groups
                    .get(&key)
                    .ok_or_else(|| Error::Config(format!("no normalization parameters for group {}", key.name())))?;
                gains.push(g.param(gain));
                biases.push(g.param(bias));
                local.insert(key, gains.len() - 1);
                gains.len() - 1
            }
        };
        slots.push(slot);
    }
    let z = g.standardize(x, NORM_EPS);
    g.group_affine(z, &slots, &gains, &biases)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        zero: bool,
    ) -> Result<()> {
        let w = if zero { Tensor::zeros(d_in, d_out) } else { fan_in_uniform(rng, d_in, d_out) };
        store.register(format!("{prefix}.w"), None, w)?;
        store.register(format!("{prefix}.b"), None, Tensor::zeros(1, d_out))?;
        Ok(())
    }

    fn bind<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self { w: store.id(&format!("{prefix}.w"))?, b: store.id(&format!("{prefix}.b"))? })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct FullLayerWeights {
    pub gln_in: GlnParams,
    pub gln_gate: GlnParams,
    /// `d_model -> 2·H·d_h + 2·G·d_h`, split as `U, Q, K, V`.
    pub f1: Linear,
    pub f2: Linear,
}

#[derive(Clone, Debug)]
pub struct TargetLayerWeights {
    pub gln_in: GlnParams,
    pub gln_gate: GlnParams,
    /// `d_model -> 2·H·d_h` over T rows, split as `U, Q`.
    pub f_uq: Linear,
    /// `d_model -> 2·G·d_h` over all rows, split as `K, V`.
    pub f_kv: Linear,
    pub f2: Linear,
}

#[derive(Clone, Debug)]
pub enum LayerWeights {
    Full(FullLayerWeights),
    Target(TargetLayerWeights),
}

impl FullLayerWeights {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        groups: &[GroupKey],
        cfg: &HtaConfig,
        zero_output: bool,
    ) -> Result<()> {
        let (d, hd, gd) = (cfg.d_model, cfg.heads * cfg.head_dim(), cfg.kv_heads * cfg.head_dim());
        GlnParams::register(store, &format!("{prefix}.gln_in"), groups, d)?;
        GlnParams::register(store, &format!("{prefix}.gln_gate"), groups, hd)?;
        Linear::register(store, rng, &format!("{prefix}.f1"), d, 2 * hd + 2 * gd, false)?;
        Linear::register(store, rng, &format!("{prefix}.f2"), hd, d, zero_output)
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, groups: &[GroupKey]) -> Result<Self> {
        Ok(Self {
            gln_in: GlnParams::bind(store, &format!("{prefix}.gln_in"), groups)?,
            gln_gate: GlnParams::bind(store, &format!("{prefix}.gln_gate"), groups)?,
            f1: Linear::bind(store, &format!("{prefix}.f1"))?,
            f2: Linear::bind(store, &format!("{prefix}.f2"))?,
        })
    }
}

impl TargetLayerWeights {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        groups: &[GroupKey],
        cfg: &HtaConfig,
        zero_output: bool,
    ) -> Result<()> {
        let (d, hd, gd) = (cfg.d_model, cfg.heads * cfg.head_dim(), cfg.kv_heads * cfg.head_dim());
        GlnParams::register(store, &format!("{prefix}.gln_in"), groups, d)?;
        GlnParams::register(store, &format!("{prefix}.gln_gate"), groups, hd)?;
        Linear::register(store, rng, &format!("{prefix}.f_uq"), d, 2 * hd, false)?;
        Linear::register(store, rng, &format!("{prefix}.f_kv"), d, 2 * gd, false)?;
        Linear::register(store, rng, &format!("{prefix}.f2"), hd, d, zero_output)
    }

    /// Registers a target layer whose projections are the column blocks of an
    /// existing full layer's `f1` (`U,Q` and `K,V`), sharing `f2` and GLN values.
    pub fn register_from_full<T: Real>(
        store: &mut ParamStore<T>,
        full: &FullLayerWeights,
        prefix: &str,
        cfg: &HtaConfig,
    ) -> Result<()> {
        let uq = 2 * cfg.heads * cfg.head_dim();
        let kv = 2 * cfg.kv_heads * cfg.head_dim();
        let (w1, b1) = (store.value(full.f1.w).clone(), store.value(full.f1.b).clone());
        let (w2, b2) = (store.value(full.f2.w).clone(), store.value(full.f2.b).clone());
        store.register(format!("{prefix}.f_uq.w"), None, w1.slice_cols(0, uq))?;
        store.register(format!("{prefix}.f_uq.b"), None, b1.slice_cols(0, uq))?;
        store.register(format!("{prefix}.f_kv.w"), None, w1.slice_cols(uq, kv))?;
        store.register(format!("{prefix}.f_kv.b"), None, b1.slice_cols(uq, kv))?;
        store.register(format!("{prefix}.f2.w"), None, w2)?;
        store.register(format!("{prefix}.f2.b"), None, b2)?;
        for (part, params) in [("gln_in", &full.gln_in), ("gln_gate", &full.gln_gate)] {
            for (k, &(gain, bias)) in &params.groups {
                let (gv, bv) = (store.value(gain).clone(), store.value(bias).clone());
                store.register(format!("{prefix}.{part}.{}.gain", k.name()), k.owner(), gv)?;
                store.register(format!("{prefix}.{part}.{}.bias", k.name()), k.owner(), bv)?;
            }
        }
        Ok(())
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str, groups: &[GroupKey]) -> Result<Self> {
        Ok(Self {
            gln_in: GlnParams::bind(store, &format!("{prefix}.gln_in"), groups)?,
            gln_gate: GlnParams::bind(store, &format!("{prefix}.gln_gate"), groups)?,
            f_uq: Linear::bind(store, &format!("{prefix}.f_uq"))?,
            f_kv: Linear::bind(store, &format!("{prefix}.f_kv"))?,
            f2: Linear::bind(store, &format!("{prefix}.f2"))?,
        })
    }
}

/// Mask and per-row scaling for one attention call.
#[derive(Clone, Debug)]
pub struct AttnMask<T> {
    pub mask: Rc<Tensor<T>>,
    pub row_scale: Rc<Vec<T>>,
}

impl<T: Real> AttnMask<T> {
    pub fn new(mask: &MaskMatrix, norm: AttentionNorm) -> Self {
        let n = mask.cols();
        let row_scale = match norm {
            AttentionNorm::SeqLen => vec![T::of(1.0 / n.max(1) as f64); mask.rows()],
            AttentionNorm::ValidCount => {
                mask.row_counts().into_iter().map(|c| T::of(1.0 / c.max(1) as f64)).collect()
            }
            AttentionNorm::None => vec![T::one(); mask.rows()],
        };
        Self { mask: Rc::new(mask.to_tensor()), row_scale: Rc::new(row_scale) }
    }
}

/// Output of one layer plus the per-head attention weights it produced.
pub struct LayerOutput {
    pub out: Var,
    pub heads: Vec<Var>,
}

/// Grouped-query attention core; returns `A = A_1 ‖ … ‖ A_H` and the
/// per-head weights `silu(Q_h K_g^T ⊙ M)·norm`.
fn grouped_attention<T: Real>(
    g: &mut Graph<'_, T>,
    q: Var,
    k: Var,
    v: Var,
    mask: &AttnMask<T>,
    cfg: &HtaConfig,
) -> Result<(Var, Vec<Var>)> {
    let dh = cfg.head_dim();
    let prev = g.set_tag(MacKind::Attention);
    let mut kv = Vec::with_capacity(cfg.kv_heads);
    for grp in 0..cfg.kv_heads {
        kv.push((g.slice_cols(k, grp * dh, dh)?, g.slice_cols(v, grp * dh, dh)?));
    }
    let mut outs = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (kg, vg) = kv[h / cfg.group_size()];
        let qh = g.slice_cols(q, h * dh, dh)?;
        let scores = g.matmul_t(qh, kg)?;
        let w = g.masked_silu(scores, Rc::clone(&mask.mask), Rc::clone(&mask.row_scale))?;
        outs.push(g.matmul(w, vg)?);
        weights.push(w);
    }
    let a = g.concat_cols(&outs)?;
    g.set_tag(prev);
    Ok((a, weights))
}

/// `f2(GLN(A) ⊙ U) + residual`.
fn gated_output<T: Real>(
    g: &mut Graph<'_, T>,
    a: Var,
    u: Var,
    residual: Var,
    metas: &[TokenMeta],
    gln_gate: &GlnParams,
    f2: &Linear,
) -> Result<Var> {
    let an = gln(g, a, metas, gln_gate)?;
    let gated = g.mul(an, u)?;
    let prev = g.set_tag(MacKind::Projection);
    let o = f2.forward(g, gated)?;
    g.set_tag(prev);
    g.add(o, residual)
}

pub fn full_attention_layer<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    layout: &TokenLayout,
    mask: &AttnMask<T>,
    w: &FullLayerWeights,
    cfg: &HtaConfig,
) -> Result<LayerOutput> {
    let n = layout.metas.len();
    if g.shape(x) != [n, cfg.d_model] || mask.mask.shape() != [n, n] {
        return Err(Error::Dimension(format!(
            "full layer: input {:?}, mask {:?}, {n} tokens",
            g.shape(x),
            mask.mask.shape()
        )));
    }
    let (hd, gd) = (cfg.heads * cfg.head_dim(), cfg.kv_heads * cfg.head_dim());
    let xt = gln(g, x, &layout.metas, &w.gln_in)?;
    let prev = g.set_tag(MacKind::Projection);
    let p = w.f1.forward(g, xt)?;
    g.set_tag(prev);
    let p = g.silu(p);
    let u = g.slice_cols(p, 0, hd)?;
    let q = g.slice_cols(p, hd, hd)?;
    let k = g.slice_cols(p, 2 * hd, gd)?;
    let v = g.slice_cols(p, 2 * hd + gd, gd)?;
    let (a, heads) = grouped_attention(g, q, k, v, mask, cfg)?;
    let out = gated_output(g, a, u, x, &layout.metas, &w.gln_gate, &w.f2)?;
    Ok(LayerOutput { out, heads })
}

/// Updates only T rows; `mask_t` holds the T query rows (`L_T x N`).
pub fn target_attention_layer<T: Real>(
    g: &mut Graph<'_, T>,
    x: Var,
    layout: &TokenLayout,
    mask_t: &AttnMask<T>,
    w: &TargetLayerWeights,
    cfg: &HtaConfig,
) -> Result<LayerOutput> {
    let n = layout.metas.len();
    let (start, l_t) = (layout.boundaries.t_start(), layout.boundaries.l_t);
    if g.shape(x) != [n, cfg.d_model] || mask_t.mask.shape() != [l_t, n] {
        return Err(Error::Dimension(format!(
            "target layer: input {:?}, mask {:?}, {n} tokens with {l_t} targets",
            g.shape(x),
            mask_t.mask.shape()
        )));
    }
    let (hd, gd) = (cfg.heads * cfg.head_dim(), cfg.kv_heads * cfg.head_dim());
    let xt = gln(g, x, &layout.metas, &w.gln_in)?;
    let xt_t = g.slice_rows(xt, start, l_t)?;
    let prev = g.set_tag(MacKind::Projection);
    let uq = w.f_uq.forward(g, xt_t)?;
    let kv = w.f_kv.forward(g, xt)?;
    g.set_tag(prev);
    let uq = g.silu(uq);
    let kv = g.silu(kv);
    let u = g.slice_cols(uq, 0, hd)?;
    let q = g.slice_cols(uq, hd, hd)?;
    let k = g.slice_cols(kv, 0, gd)?;
    let v = g.slice_cols(kv, gd, gd)?;
    let (a, heads) = grouped_attention(g, q, k, v, mask_t, cfg)?;
    let x_t = g.slice_rows(x, start, l_t)?;
    let new_t = gated_output(g, a, u, x_t, layout.t_metas(), &w.gln_gate, &w.f2)?;
    let context = g.slice_rows(x, 0, start)?;
    let out = g.concat_rows(&[context, new_t], cfg.d_model)?;
    Ok(LayerOutput { out, heads })
}

#[derive(Clone, Debug)]
pub struct StackWeights {
    pub layers: Vec<LayerWeights>,
}

impl StackWeights {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        groups: &[GroupKey],
        cfg: &HtaConfig,
        zero_output: bool,
    ) -> Result<()> {
        for (l, kind) in cfg.layer_kinds().into_iter().enumerate() {
            let prefix = format!("hta.{l}");
            match kind {
                LayerKind::Full => FullLayerWeights::register(store, rng, &prefix, groups, cfg, zero_output)?,
                LayerKind::Target => TargetLayerWeights::register(store, rng, &prefix, groups, cfg, zero_output)?,
            }
        }
        Ok(())
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, groups: &[GroupKey], cfg: &HtaConfig) -> Result<Self> {
        let layers = cfg
            .layer_kinds()
            .into_iter()
            .enumerate()
            .map(|(l, kind)| {
                let prefix = format!("hta.{l}");
                Ok(match kind {
                    LayerKind::Full => LayerWeights::Full(FullLayerWeights::bind(store, &prefix, groups)?),
                    LayerKind::Target => LayerWeights::Target(TargetLayerWeights::bind(store, &prefix, groups)?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }
}

pub struct LayerRecord {
    pub kind: LayerKind,
    pub macs: MacCount,
    /// Per-head attention weights; rows are all tokens (full) or T tokens (target).
    pub heads: Vec<Var>,
}

pub struct StackOutput {
    pub out: Var,
    pub layers: Vec<LayerRecord>,
}

pub fn forward_stack<T: Real>(
    g: &mut Graph<'_, T>,
    x0: Var,
    layout: &TokenLayout,
    mask: &MaskMatrix,
    cfg: &HtaConfig,
    weights: &StackWeights,
) -> Result<StackOutput> {
    cfg.validate()?;
    let full_mask = AttnMask::new(mask, cfg.norm);
    let t_mask = AttnMask::new(&crate::mask::extract_t_rows(mask, &layout.boundaries)?, cfg.norm);
    let mut x = x0;
    let mut layers = Vec::with_capacity(weights.layers.len());
    for lw in &weights.layers {
        let before = g.macs();
        let (kind, res) = match lw {
            LayerWeights::Full(w) => (LayerKind::Full, full_attention_layer(g, x, layout, &full_mask, w, cfg)?),
            LayerWeights::Target(w) => (LayerKind::Target, target_attention_layer(g, x, layout, &t_mask, w, cfg)?),
        };
        layers.push(LayerRecord { kind, macs: g.macs().since(&before), heads: res.heads });
        x = res.out;
    }
    Ok(StackOutput { out: x, layers })
}
