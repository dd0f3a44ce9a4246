//! Multiply-accumulate accounting and throughput benchmarks for HTA stacks.
//!
//! Attention MACs of one layer (score `QK^T` plus aggregation `WV`, summed
//! over `H` heads of width `d_h`):
//!
//! ```text
//! full   : 2 · N²     · H · d_h
//! target : 2 · L_T · N · H · d_h
//! ```
//!
//! so a `(K:1)` block averages `(K·N·L_T + N²) / (K+1)` per layer against `N²`
//! for full attention at the same depth.

use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::engine::{Graph, MacCount, ParamStore, Real, Tensor};
use crate::error::{Error, Result};
use crate::hta::{
    forward_stack, full_attention_layer, target_attention_layer, AttnMask, GroupKey, HtaConfig, LayerKind,
    LayerWeights, StackWeights,
};
use crate::mask::{build_mask, extract_t_rows};
use crate::tokenizer::{Boundaries, TokenKind, TokenLayout, TokenMeta};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerMacs {
    pub kind: LayerKind,
    pub projection: u64,
    pub attention: u64,
}

/// Analytic projection and attention MACs of one layer.
pub fn analytic_layer_macs(cfg: &HtaConfig, kind: LayerKind, n: usize, l_t: usize) -> LayerMacs {
    let (n, l_t, d) = (n as u64, l_t as u64, cfg.d_model as u64);
    let hd = (cfg.heads * cfg.head_dim()) as u64;
    let gd = (cfg.kv_heads * cfg.head_dim()) as u64;
    match kind {
        LayerKind::Full => LayerMacs {
            kind,
            projection: n * d * (2 * hd + 2 * gd) + n * hd * d,
            attention: 2 * n * n * hd,
        },
        LayerKind::Target => LayerMacs {
            kind,
            projection: l_t * d * 2 * hd + n * d * 2 * gd + l_t * hd * d,
            attention: 2 * l_t * n * hd,
        },
    }
}

/// `(K·N·L_T + N²) / ((K+1)·N²)`.
pub fn predicted_ratio(k: usize, n: usize, l_t: usize) -> f64 {
    let (k, n, l_t) = (k as f64, n as f64, l_t as f64);
    (k * n * l_t + n * n) / ((k + 1.0) * n * n)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacReport {
    pub config: String,
    pub n: usize,
    pub l_t: usize,
    pub measured: Vec<LayerMacs>,
    pub analytic: Vec<LayerMacs>,
}

impl MacReport {
    pub fn exact(&self) -> bool {
        self.measured == self.analytic
    }

    pub fn attention(&self) -> u64 {
        self.measured.iter().map(|l| l.attention).sum()
    }

    pub fn projection(&self) -> u64 {
        self.measured.iter().map(|l| l.projection).sum()
    }

    pub fn attention_per_layer(&self) -> f64 {
        self.attention() as f64 / self.measured.len().max(1) as f64
    }
}

/// A record of `N` tokens: `L_T` targets of one scenario, the rest split
/// between historical and realtime context.
pub fn synthetic_layout(n: usize, l_t: usize) -> Result<TokenLayout> {
    if l_t == 0 || l_t > n {
        return Err(Error::Config(format!("need 0 < L_T <= N, got L_T={l_t}, N={n}")));
    }
    let context = n - l_t;
    let l_r = context / 4;
    let l_h = context - l_r;
    let meta = |kind, timestamp, exposure_ref| TokenMeta { kind, group_id: 0, timestamp, exposure_ref };
    let mut metas = Vec::with_capacity(n);
    metas.extend((0..l_h).map(|i| meta(TokenKind::H, i as u64, None)));
    let t0 = l_h as u64 + 1;
    metas.extend((0..l_r).map(|i| meta(TokenKind::R, t0 + 2 * i as u64, None)));
    metas.extend((0..l_t).map(|i| meta(TokenKind::T, t0 + (i * 2 * l_r.max(1) / l_t) as u64 + 1, Some(i))));
    Ok(TokenLayout { metas, boundaries: Boundaries { l_h, l_r, l_t } })
}

pub const SYNTHETIC_GROUPS: [GroupKey; 3] = [
    GroupKey { kind: TokenKind::H, id: 0 },
    GroupKey { kind: TokenKind::R, id: 0 },
    GroupKey { kind: TokenKind::T, id: 0 },
];

/// Random stack weights and a random `N x d_model` input for `cfg`.
pub fn synthetic_stack<T: Real>(
    cfg: &HtaConfig,
    n: usize,
    seed: u64,
) -> Result<(ParamStore<T>, StackWeights, Tensor<T>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    StackWeights::register(&mut store, &mut rng, &SYNTHETIC_GROUPS, cfg, false)?;
    let weights = StackWeights::bind(&store, &SYNTHETIC_GROUPS, cfg)?;
    let data = (0..n * cfg.d_model).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect();
    Ok((store, weights, Tensor::from_vec(n, cfg.d_model, data)?))
}

/// Runs the stack layer by layer on a synthetic record, reading the MAC
/// counters of each layer, and compares them with the analytic model.
pub fn count_macs(cfg: &HtaConfig, n: usize, l_t: usize) -> Result<MacReport> {
    let layout = synthetic_layout(n, l_t)?;
    let (store, weights, x0) = synthetic_stack::<f32>(cfg, n, 0)?;
    let mask = build_mask(&layout.metas);
    let full_mask = AttnMask::new(&mask, cfg.norm);
    let t_mask = AttnMask::new(&extract_t_rows(&mask, &layout.boundaries)?, cfg.norm);
    let mut x = x0;
    let mut measured = Vec::with_capacity(weights.layers.len());
    let mut analytic = Vec::with_capacity(weights.layers.len());
    for lw in &weights.layers {
        // one graph per layer keeps memory at a single layer's activations
        let mut g = Graph::new(&store);
        let xin = g.input(x);
        let (kind, out) = match lw {
            LayerWeights::Full(w) => (LayerKind::Full, full_attention_layer(&mut g, xin, &layout, &full_mask, w, cfg)?),
            LayerWeights::Target(w) => {
                (LayerKind::Target, target_attention_layer(&mut g, xin, &layout, &t_mask, w, cfg)?)
            }
        };
        let MacCount { projection, attention, .. } = g.macs();
        measured.push(LayerMacs { kind, projection, attention });
        analytic.push(analytic_layer_macs(cfg, kind, n, l_t));
        x = g.value(out.out).clone();
    }
    Ok(MacReport { config: cfg.label(), n, l_t, measured, analytic })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub k: usize,
    pub n: usize,
    pub l_t: usize,
    pub hybrid_attention: u64,
    pub full_attention: u64,
    pub measured_ratio: f64,
    pub predicted_ratio: f64,
    pub relative_error: f64,
    /// Instrumented counts of both stacks equal the analytic model.
    pub counts_exact: bool,
}

impl ComplexityRow {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.counts_exact && self.relative_error <= tolerance
    }
}

/// Attention-MAC ratio of `(K:1)xB` against full attention of the same depth,
/// `(0:1)x((K+1)B)`, for every `(N, L_T)` in `sizes` and `K` in `ks`.
pub fn verify_complexity(base: &HtaConfig, sizes: &[(usize, usize)], ks: &[usize]) -> Result<Vec<ComplexityRow>> {
    let mut rows = Vec::new();
    for &(n, l_t) in sizes {
        for &k in ks {
            let hybrid = HtaConfig { target_layers: k, full_layers: 1, ..base.clone() };
            let full = HtaConfig { target_layers: 0, full_layers: 1, blocks: (k + 1) * base.blocks, ..base.clone() };
            let (h, f) = (count_macs(&hybrid, n, l_t)?, count_macs(&full, n, l_t)?);
            let measured = h.attention() as f64 / f.attention() as f64;
            let predicted = predicted_ratio(k, n, l_t);
            rows.push(ComplexityRow {
                k,
                n,
                l_t,
                hybrid_attention: h.attention(),
                full_attention: f.attention(),
                measured_ratio: measured,
                predicted_ratio: predicted,
                relative_error: (measured - predicted).abs() / predicted,
                counts_exact: h.exact() && f.exact(),
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSpec {
    pub n: usize,
    pub l_t: usize,
    pub d_model: usize,
    pub heads: usize,
    pub blocks: usize,
    /// `(K, P)` pairs.
    pub matrix: Vec<(usize, usize)>,
    /// Also run each entry with `G = 1` (the base uses `G = H`).
    pub single_kv: bool,
    pub iters: usize,
    pub seed: u64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            n: 256,
            l_t: 16,
            d_model: 64,
            heads: 4,
            blocks: 4,
            matrix: vec![(0, 1), (1, 1), (3, 1), (5, 1), (1, 0)],
            single_kv: true,
            iters: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub config: String,
    pub kv_heads: usize,
    pub n: usize,
    pub l_t: usize,
    pub layers: usize,
    pub attention_macs: u64,
    pub attention_macs_per_layer: f64,
    pub projection_macs: u64,
    pub kv_params: usize,
    pub tokens_per_sec: f64,
    pub peak_bytes: usize,
    pub threads: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    /// Tab-separated table with a header line.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "config\tkv_heads\tN\tL_T\tlayers\tattention_MACs\tattention_MACs_per_layer\tprojection_MACs\tkv_params\ttokens_per_sec\tpeak_bytes\tthreads\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.1}\t{}\t{}\t{:.1}\t{}\t{}",
                r.config,
                r.kv_heads,
                r.n,
                r.l_t,
                r.layers,
                r.attention_macs,
                r.attention_macs_per_layer,
                r.projection_macs,
                r.kv_params,
                r.tokens_per_sec,
                r.peak_bytes,
                r.threads
            );
        }
        s
    }

    /// Per-layer attention MACs must strictly decrease as `K:P` grows, within
    /// each `kv_heads` setting.
    pub fn check_monotone(&self, spec: &BenchSpec) -> Result<()> {
        let ratio = |(k, p): (usize, usize)| if p == 0 { f64::INFINITY } else { k as f64 / p as f64 };
        let mut order: Vec<usize> = (0..spec.matrix.len()).collect();
        order.sort_by(|&a, &b| ratio(spec.matrix[a]).total_cmp(&ratio(spec.matrix[b])));
        let per_kv = self.rows.len() / spec.matrix.len().max(1);
        for v in 0..per_kv {
            let rows: Vec<&BenchRow> = order.iter().map(|&i| &self.rows[v * spec.matrix.len() + i]).collect();
            for w in rows.windows(2) {
                if w[1].attention_macs_per_layer >= w[0].attention_macs_per_layer {
                    return Err(Error::Contract(format!(
                        "attention MACs per layer do not decrease from {} to {}",
                        w[0].config, w[1].config
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Forward and backward passes of each configured stack on one synthetic
/// record, timed over `iters` repetitions.
pub fn bench(spec: &BenchSpec) -> Result<BenchTable> {
    let layout = synthetic_layout(spec.n, spec.l_t)?;
    let mask = build_mask(&layout.metas);
    let mut kv_modes = vec![spec.heads];
    if spec.single_kv && spec.heads > 1 {
        kv_modes.push(1);
    }
    let mut rows = Vec::new();
    for &kv in &kv_modes {
        for &(k, p) in &spec.matrix {
            let cfg = HtaConfig {
                d_model: spec.d_model,
                blocks: spec.blocks,
                target_layers: k,
                full_layers: p,
                heads: spec.heads,
                kv_heads: kv,
                ..HtaConfig::default()
            };
            let (store, weights, x0) = synthetic_stack::<f32>(&cfg, spec.n, spec.seed)?;
            let macs = count_macs(&cfg, spec.n, spec.l_t)?;
            let mut peak = 0;
            let start = Instant::now();
            for _ in 0..spec.iters.max(1) {
                let mut g = Graph::new(&store);
                let x = g.input(x0.clone());
                let out = forward_stack(&mut g, x, &layout, &mask, &cfg, &weights)?;
                let t = g.slice_rows(out.out, layout.boundaries.t_start(), spec.l_t)?;
                let col = g.slice_cols(t, 0, 1)?;
                let loss = g.bce_with_logits(col, &vec![0.0f32; spec.l_t], 1.0)?;
                g.backward(loss)?;
                peak = peak.max(g.peak_bytes());
            }
            let secs = start.elapsed().as_secs_f64();
            let label = if kv == spec.heads { format!("{} G=H", cfg.label()) } else { format!("{} G=1", cfg.label()) };
            rows.push(BenchRow {
                config: label,
                kv_heads: kv,
                n: spec.n,
                l_t: spec.l_t,
                layers: macs.measured.len(),
                attention_macs: macs.attention(),
                attention_macs_per_layer: macs.attention_per_layer(),
                projection_macs: macs.projection(),
                kv_params: cfg.kv_projection_params(),
                tokens_per_sec: (spec.n * spec.iters.max(1)) as f64 / secs.max(1e-9),
                peak_bytes: peak,
                threads: rayon::current_num_threads(),
            });
        }
    }
    Ok(BenchTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicted_ratio_edges() {
        assert!((predicted_ratio(3, 1000, 50) - 0.2875).abs() < 1e-12);
        assert_eq!(predicted_ratio(0, 100, 7), 1.0);
        assert_eq!(predicted_ratio(5, 64, 64), 1.0);
    }

    #[test]
    fn synthetic_layout_is_well_formed() {
        let l = synthetic_layout(40, 6).unwrap();
        l.validate().unwrap();
        assert_eq!(l.boundaries.total(), 40);
        assert!(synthetic_layout(4, 5).is_err());
    }

    #[test]
    fn instrumented_counts_match_analytic() {
        let cfg = HtaConfig { d_model: 8, blocks: 2, target_layers: 2, full_layers: 1, heads: 2, kv_heads: 1, ..HtaConfig::default() };
        let r = count_macs(&cfg, 24, 4).unwrap();
        assert!(r.exact(), "{:?} vs {:?}", r.measured, r.analytic);
        assert_eq!(r.measured.len(), 6);
    }
}
