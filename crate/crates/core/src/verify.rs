//! Self-contained oracle suites: each builds its own micro instances, so no
//! trained model or dataset is needed.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bench::{count_macs, verify_complexity};
use crate::data::{
    BehaviorEvent, DatasetSchema, Exposure, InferenceRequest, ScenarioSchema, Sequence, SequenceSchema, UserSample,
};
use crate::engine::{Graph, ParamStore, Tensor};
use crate::error::Result;
use crate::heads::{MmoeConfig, PredictionRecord};
use crate::hta::{
    full_attention_layer, target_attention_layer, AttentionNorm, AttnMask, FullLayerWeights, GlnParams, GroupKey,
    HtaConfig, TargetLayerWeights, NORM_EPS,
};
use crate::inference::{extract_subgraph, infer_request};
use crate::mask::{build_mask, build_mask_oracle, extract_t_rows};
use crate::model::{Model, ModelConfig};
use crate::tokenizer::{Boundaries, TokenKind, TokenLayout, TokenMeta};

/// Step of the fourth-order central differences.
pub const FD_STEP: f64 = 1e-3;
/// Gradients smaller than this are compared on an absolute scale.
pub const GRAD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub name: String,
    pub passed: bool,
    pub cases: usize,
    /// Largest observed error (or mismatch count for exact suites).
    pub worst: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<26} cases={:<5} worst={:.3e} tol={:.0e} {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.cases,
            self.worst,
            self.tolerance,
            self.detail
        )
    }
}

fn suite(name: &str, cases: usize, worst: f64, tolerance: f64, detail: String) -> SuiteResult {
    SuiteResult { name: name.into(), passed: worst <= tolerance, cases, worst, tolerance, detail }
}

/// Three scenarios with distinct feature layouts and task sets, small vocabularies.
pub fn micro_schema() -> DatasetSchema {
    let s = |x: &str| x.to_string();
    DatasetSchema {
        scenarios: vec![
            ScenarioSchema {
                scenario_id: 0,
                name: s("HP"),
                user_feature_vocabs: vec![3, 4],
                cross_feature_vocabs: vec![3],
                item_feature_vocabs: vec![5, 3],
                tasks: vec![s("ctr"), s("ctcvr")],
            },
            ScenarioSchema {
                scenario_id: 1,
                name: s("SQS"),
                user_feature_vocabs: vec![4],
                cross_feature_vocabs: vec![],
                item_feature_vocabs: vec![5, 2, 3],
                tasks: vec![s("ctr"), s("ctcvr"), s("imd"), s("write")],
            },
            ScenarioSchema {
                scenario_id: 2,
                name: s("PHF"),
                user_feature_vocabs: vec![2, 2],
                cross_feature_vocabs: vec![3, 2],
                item_feature_vocabs: vec![5],
                tasks: vec![s("ctr")],
            },
        ],
        historical: vec![
            SequenceSchema { seq_id: 0, name: s("orders"), feature_vocabs: vec![5, 3] },
            SequenceSchema { seq_id: 1, name: s("views"), feature_vocabs: vec![5] },
        ],
        realtime: vec![SequenceSchema { seq_id: 0, name: s("recent"), feature_vocabs: vec![5, 3] }],
    }
}

/// `d_model = 16, B = 1, K = 1, P = 1, H = 2, G = 1`.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        hta: HtaConfig { d_model: 16, blocks: 1, target_layers: 1, full_layers: 1, heads: 2, kv_heads: 1, ..HtaConfig::default() },
        d_emb: 4,
        mmoe: MmoeConfig { experts: 2, d_expert: Some(8) },
        zero_init_output: false,
    }
}

fn draw_features<R: Rng>(rng: &mut R, vocabs: &[usize]) -> Vec<u32> {
    vocabs.iter().map(|&v| rng.gen_range(0..v as u32)).collect()
}

fn labels<R: Rng>(rng: &mut R, s: &ScenarioSchema) -> BTreeMap<String, u8> {
    let ctr = rng.gen_bool(0.5);
    s.tasks
        .iter()
        .map(|t| {
            let y = match t.as_str() {
                "ctr" => ctr,
                _ => ctr && rng.gen_bool(0.5),
            };
            (t.clone(), u8::from(y))
        })
        .collect()
}

fn random_sequences<R: Rng>(rng: &mut R, seqs: &[SequenceSchema], max_len: usize, lo: u64, hi: u64) -> Vec<Sequence> {
    seqs.iter()
        .map(|q| {
            let n = rng.gen_range(0..=max_len);
            let mut times: Vec<u64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
            times.sort_unstable();
            let events = times
                .into_iter()
                .map(|t| BehaviorEvent { item_features: draw_features(rng, &q.feature_vocabs), timestamp: t })
                .collect();
            Sequence { seq_id: q.seq_id, events }
        })
        .collect()
}

pub fn random_exposure<R: Rng>(rng: &mut R, s: &ScenarioSchema, timestamp: u64) -> Exposure {
    Exposure {
        scenario_id: s.scenario_id,
        user_features: draw_features(rng, &s.user_feature_vocabs),
        cross_features: draw_features(rng, &s.cross_feature_vocabs),
        item_features: draw_features(rng, &s.item_feature_vocabs),
        timestamp,
        labels: labels(rng, s),
    }
}

/// A labeled record with mixed scenarios; realtime events and exposures
/// share a narrow time range so ties are common.
pub fn random_sample<R: Rng>(rng: &mut R, schema: &DatasetSchema, user_id: u64, max_exposures: usize) -> UserSample {
    let historical = random_sequences(rng, &schema.historical, 5, 0, 10);
    let realtime = random_sequences(rng, &schema.realtime, 5, 10, 16);
    let n = rng.gen_range(1..=max_exposures);
    let exposures = (0..n)
        .map(|_| {
            let s = &schema.scenarios[rng.gen_range(0..schema.scenarios.len())];
            let t = rng.gen_range(10..16);
            random_exposure(rng, s, t)
        })
        .collect();
    UserSample { user_id, historical, realtime, exposures }
}

pub fn random_request<R: Rng>(rng: &mut R, schema: &DatasetSchema, max_candidates: usize) -> InferenceRequest {
    let s = &schema.scenarios[rng.gen_range(0..schema.scenarios.len())];
    let t = rng.gen_range(10..16);
    let n = rng.gen_range(1..=max_candidates);
    InferenceRequest {
        user_id: rng.gen(),
        scenario_id: s.scenario_id,
        historical: random_sequences(rng, &schema.historical, 5, 0, 10),
        realtime: random_sequences(rng, &schema.realtime, 5, 10, 16),
        candidates: (0..n).map(|_| random_exposure(rng, s, t)).collect(),
    }
}

/// Metadata in block order `H, R, T` with random groups and tied timestamps.
pub fn random_layout<R: Rng>(rng: &mut R, max_tokens: usize, groups: &[GroupKey]) -> TokenLayout {
    let n = rng.gen_range(1..=max_tokens);
    let l_t = rng.gen_range(1..=n);
    let l_r = rng.gen_range(0..=n - l_t);
    let l_h = n - l_t - l_r;
    let of_kind = |k: TokenKind| groups.iter().filter(|g| g.kind == k).map(|g| g.id).collect::<Vec<_>>();
    let mut metas = Vec::with_capacity(n);
    for (kind, count) in [(TokenKind::H, l_h), (TokenKind::R, l_r), (TokenKind::T, l_t)] {
        let ids = of_kind(kind);
        let mut block: Vec<TokenMeta> = (0..count)
            .map(|i| TokenMeta {
                kind,
                group_id: ids[rng.gen_range(0..ids.len())],
                timestamp: rng.gen_range(0..6),
                exposure_ref: (kind == TokenKind::T).then_some(i),
            })
            .collect();
        if kind != TokenKind::T {
            block.sort_by_key(|m| m.timestamp);
        }
        metas.extend(block);
    }
    TokenLayout { metas, boundaries: Boundaries { l_h, l_r, l_t } }
}

/// Random metadata in arbitrary order (mask construction does not assume blocks).
pub fn random_metas<R: Rng>(rng: &mut R, max_tokens: usize) -> Vec<TokenMeta> {
    let n = rng.gen_range(0..=max_tokens);
    (0..n)
        .map(|i| {
            let kind = [TokenKind::H, TokenKind::R, TokenKind::T][rng.gen_range(0..3)];
            TokenMeta {
                kind,
                group_id: 0,
                timestamp: rng.gen_range(0..8),
                exposure_ref: (kind == TokenKind::T).then_some(i),
            }
        })
        .collect()
}

pub fn mask_oracle_suite(instances: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mismatches = 0usize;
    for _ in 0..instances {
        let metas = random_metas(&mut rng, 32);
        let (a, b) = (build_mask(&metas), build_mask_oracle(&metas));
        mismatches += (0..metas.len())
            .flat_map(|i| (0..metas.len()).map(move |j| (i, j)))
            .filter(|&(i, j)| a.get(i, j) != b.get(i, j))
            .count();
    }
    suite("mask oracle", instances, mismatches as f64, 0.0, "entrywise equality, N <= 32".into())
}

fn layer_groups() -> Vec<GroupKey> {
    vec![
        GroupKey { kind: TokenKind::H, id: 0 },
        GroupKey { kind: TokenKind::H, id: 1 },
        GroupKey { kind: TokenKind::R, id: 0 },
        GroupKey { kind: TokenKind::T, id: 0 },
        GroupKey { kind: TokenKind::T, id: 1 },
    ]
}

fn random_input<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<f64> {
    let data = (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized by construction")
}

/// Perturbs GLN parameters away from their `(1, 0)` initialization so group
/// affine transforms matter.
fn jitter_gln<R: Rng>(store: &mut ParamStore<f64>, rng: &mut R) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.contains(".gln_")).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

/// Target layer T rows against the full layer with the same weights.
pub fn layer_restriction_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = layer_groups();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let cfg = HtaConfig { d_model: 12, heads: 3, kv_heads: [1, 3][rng.gen_range(0..2)], ..HtaConfig::default() };
        let mut store = ParamStore::<f64>::new();
        FullLayerWeights::register(&mut store, &mut rng, "full", &groups, &cfg, false)?;
        jitter_gln(&mut store, &mut rng);
        let full = FullLayerWeights::bind(&store, "full", &groups)?;
        TargetLayerWeights::register_from_full(&mut store, &full, "target", &cfg)?;
        let target = TargetLayerWeights::bind(&store, "target", &groups)?;
        let layout = random_layout(&mut rng, 24, &groups);
        let x0 = random_input(&mut rng, layout.metas.len(), cfg.d_model);
        let mask = build_mask(&layout.metas);
        let t_mask = extract_t_rows(&mask, &layout.boundaries)?;

        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let f = full_attention_layer(&mut g, x, &layout, &AttnMask::new(&mask, cfg.norm), &full, &cfg)?;
        let t = target_attention_layer(&mut g, x, &layout, &AttnMask::new(&t_mask, cfg.norm), &target, &cfg)?;
        let start = layout.boundaries.t_start();
        let f_t = g.value(f.out).slice_rows(start, layout.boundaries.l_t);
        let t_out = g.value(t.out);
        worst = worst.max(f_t.max_abs_diff(&t_out.slice_rows(start, layout.boundaries.l_t)));
        // context rows pass through a target layer untouched
        worst = worst.max(t_out.slice_rows(0, start).max_abs_diff(&x0.slice_rows(0, start)));
    }
    Ok(suite("target/full restriction", instances, worst, 1e-6, "T rows, shared weights".into()))
}

fn gln_rows(x: &Tensor<f64>, metas: &[TokenMeta], params: &GlnParams, store: &ParamStore<f64>) -> Tensor<f64> {
    let mut out = x.clone();
    for (r, m) in metas.iter().enumerate() {
        let (gain, bias) = params.groups[&GroupKey::of(m)];
        let (gain, bias) = (store.value(gain), store.value(bias));
        let row = x.row(r);
        let d = row.len() as f64;
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        for c in 0..row.len() {
            out.set(r, c, (row[c] - mean) / (var + NORM_EPS).sqrt() * gain.get(0, c) + bias.get(0, c));
        }
    }
    out
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Independent multi-head reference of a full layer with one key/value head
/// per query head, written as explicit loops.
pub fn mha_reference(
    x: &Tensor<f64>,
    layout: &TokenLayout,
    w: &FullLayerWeights,
    store: &ParamStore<f64>,
    heads: usize,
    norm: AttentionNorm,
) -> Tensor<f64> {
    let (n, d) = (x.rows(), x.cols());
    let dh = d / heads;
    let xt = gln_rows(x, &layout.metas, &w.gln_in, store);
    let (w1, b1) = (store.value(w.f1.w), store.value(w.f1.b));
    let width = w1.cols();
    let mut p = Tensor::zeros(n, width);
    for i in 0..n {
        for c in 0..width {
            let mut acc = b1.get(0, c);
            for k in 0..d {
                acc += xt.get(i, k) * w1.get(k, c);
            }
            p.set(i, c, silu(acc));
        }
    }
    let hd = heads * dh;
    let (u_off, q_off, k_off, v_off) = (0, hd, 2 * hd, 3 * hd);
    let mut a = Tensor::zeros(n, hd);
    for i in 0..n {
        let q = &layout.metas[i];
        let visible: Vec<bool> = layout
            .metas
            .iter()
            .enumerate()
            .map(|(j, key)| match key.kind {
                TokenKind::H => true,
                TokenKind::R => q.timestamp > key.timestamp,
                TokenKind::T => i == j,
            })
            .collect();
        let count = visible.iter().filter(|&&v| v).count();
        let scale = match norm {
            AttentionNorm::SeqLen => 1.0 / n as f64,
            AttentionNorm::ValidCount => 1.0 / count.max(1) as f64,
            AttentionNorm::None => 1.0,
        };
        for h in 0..heads {
            for j in 0..n {
                let mut s = 0.0;
                for e in 0..dh {
                    s += p.get(i, q_off + h * dh + e) * p.get(j, k_off + h * dh + e);
                }
                let wgt = silu(if visible[j] { s } else { 0.0 }) * scale;
                for e in 0..dh {
                    let cur = a.get(i, h * dh + e);
                    a.set(i, h * dh + e, cur + wgt * p.get(j, v_off + h * dh + e));
                }
            }
        }
    }
    let an = gln_rows(&a, &layout.metas, &w.gln_gate, store);
    let (w2, b2) = (store.value(w.f2.w), store.value(w.f2.b));
    let mut out = x.clone();
    for i in 0..n {
        for c in 0..d {
            let mut acc = b2.get(0, c);
            for k in 0..hd {
                acc += an.get(i, k) * p.get(i, u_off + k) * w2.get(k, c);
            }
            out.set(i, c, out.get(i, c) + acc);
        }
    }
    out
}

/// `G = H` grouped attention against the multi-head reference.
pub fn gqa_degeneracy_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let groups = layer_groups();
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let heads = rng.gen_range(1..=4);
        let cfg = HtaConfig { d_model: 4 * heads, heads, kv_heads: heads, ..HtaConfig::default() };
        let mut store = ParamStore::<f64>::new();
        FullLayerWeights::register(&mut store, &mut rng, "full", &groups, &cfg, false)?;
        jitter_gln(&mut store, &mut rng);
        let w = FullLayerWeights::bind(&store, "full", &groups)?;
        let layout = random_layout(&mut rng, 20, &groups);
        let x0 = random_input(&mut rng, layout.metas.len(), cfg.d_model);
        let mask = build_mask(&layout.metas);
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let out = full_attention_layer(&mut g, x, &layout, &AttnMask::new(&mask, cfg.norm), &w, &cfg)?;
        let reference = mha_reference(&x0, &layout, &w, &store, heads, cfg.norm);
        worst = worst.max(g.value(out.out).max_abs_diff(&reference));
    }
    Ok(suite("GQA degeneracy (G=H)", instances, worst, 1e-12, "vs loop MHA reference".into()))
}

/// Hand-built micro record: two historical events, one realtime event and one
/// exposure per scenario.
pub fn gradcheck_sample(schema: &DatasetSchema) -> UserSample {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let ev = |rng: &mut ChaCha8Rng, q: &SequenceSchema, t| BehaviorEvent { item_features: draw_features(rng, &q.feature_vocabs), timestamp: t };
    let historical = vec![Sequence { seq_id: 0, events: vec![ev(&mut rng, &schema.historical[0], 1)] }, Sequence {
        seq_id: 1,
        events: vec![ev(&mut rng, &schema.historical[1], 2)],
    }];
    let realtime = vec![Sequence { seq_id: 0, events: vec![ev(&mut rng, &schema.realtime[0], 10)] }];
    let exposures = schema.scenarios.iter().map(|s| random_exposure(&mut rng, s, 11)).collect();
    UserSample { user_id: 1, historical, realtime, exposures }
}

/// Worst relative error `|a - n| / max(|a|, |n|, GRAD_FLOOR)` over every
/// scalar parameter, with the name of the worst parameter.
pub fn gradient_check(model: &mut Model<f64>, sample: &UserSample) -> Result<(f64, String, usize)> {
    let (_, grads) = model.loss_and_grads(sample, 1.0)?;
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut worst = (0.0f64, String::new());
    let mut checked = 0;
    for (id, name) in ids {
        for k in 0..model.store.value(id).len() {
            let orig = model.store.value(id).data()[k];
            let mut at = |offset: f64| {
                model.store.value_mut(id).data_mut()[k] = orig + offset;
                model.loss_and_grads(sample, 1.0).map(|(l, _)| l)
            };
            let (p1, m1, p2, m2) = (at(FD_STEP)?, at(-FD_STEP)?, at(2.0 * FD_STEP)?, at(-2.0 * FD_STEP)?);
            model.store.value_mut(id).data_mut()[k] = orig;
            let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * FD_STEP);
            let analytic = grads.get(id).data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]"));
            }
            checked += 1;
        }
    }
    Ok((worst.0, worst.1, checked))
}

pub fn gradient_check_suite(seed: u64) -> Result<SuiteResult> {
    let schema = micro_schema();
    let mut model = Model::<f64>::init(micro_config(), schema.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    jitter_gln(&mut model.store, &mut rng);
    let sample = gradcheck_sample(&schema);
    let (worst, at, checked) = gradient_check(&mut model, &sample)?;
    Ok(suite("gradient check", checked, worst, 1e-4, format!("central differences, step {FD_STEP:e}; worst at {at}")))
}

fn max_record_diff(a: &[PredictionRecord], b: &[PredictionRecord]) -> f64 {
    if a.len() != b.len() {
        return f64::INFINITY;
    }
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            if x.task != y.task || x.exposure != y.exposure {
                f64::INFINITY
            } else {
                (x.logit - y.logit).abs().max((x.probability - y.probability).abs())
            }
        })
        .fold(0.0, f64::max)
}

/// Every exposure scored inside its aggregated record equals the same
/// exposure scored alone.
pub fn aggregation_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let schema = micro_schema();
    let model = Model::<f64>::init(micro_config(), schema.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for u in 0..instances {
        let sample = random_sample(&mut rng, &schema, u as u64, 12);
        let all = model.predict(&sample)?;
        for i in 0..sample.exposures.len() {
            let single: Vec<PredictionRecord> = model
                .predict(&sample.singleton(i))?
                .into_iter()
                .map(|r| PredictionRecord { exposure: i, ..r })
                .collect();
            let mine: Vec<PredictionRecord> = all.iter().filter(|r| r.exposure == i).cloned().collect();
            worst = worst.max(max_record_diff(&mine, &single));
        }
    }
    Ok(suite("aggregation equivalence", instances, worst, 1e-6, "aggregated vs singleton forward".into()))
}

/// Scenario subgraph against the full multi-scenario graph.
pub fn subgraph_suite(instances: usize, seed: u64) -> Result<SuiteResult> {
    let schema = micro_schema();
    let model = Model::<f64>::init(micro_config(), schema.clone(), seed)?;
    let subs = schema
        .scenarios
        .iter()
        .map(|s| Ok((s.scenario_id, extract_subgraph(&model, s.scenario_id)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let req = random_request(&mut rng, &schema, 8);
        let via_sub = infer_request(&req, &subs[&req.scenario_id])?;
        let via_full = model.predict(&req.as_sample())?;
        worst = worst.max(max_record_diff(&via_sub, &via_full));
        if subs[&req.scenario_id].param_count() >= model.param_count() {
            worst = f64::INFINITY;
        }
    }
    Ok(suite("subgraph equivalence", instances, worst, 1e-6, "3-scenario requests".into()))
}

pub fn mac_suite() -> Result<SuiteResult> {
    let base = HtaConfig { d_model: 8, blocks: 1, heads: 2, kv_heads: 1, ..HtaConfig::default() };
    let mut cases = 0;
    let mut inexact = 0usize;
    let mut worst_ratio = 0.0f64;
    for (k, p) in [(0, 1), (1, 1), (3, 1), (2, 0)] {
        let r = count_macs(&HtaConfig { target_layers: k, full_layers: p, blocks: 2, ..base.clone() }, 96, 8)?;
        inexact += usize::from(!r.exact());
        cases += 1;
    }
    for row in verify_complexity(&base, &[(128, 8), (256, 16)], &[1, 3, 5])? {
        inexact += usize::from(!row.counts_exact);
        worst_ratio = worst_ratio.max(row.relative_error);
        cases += 1;
    }
    let mut r = suite("MAC exactness", cases, worst_ratio, 0.10, format!("{inexact} inexact counts; worst = ratio error"));
    r.passed &= inexact == 0;
    Ok(r)
}

/// Every suite at its default size.
pub fn run_all(seed: u64) -> Result<Vec<SuiteResult>> {
    Ok(vec![
        mask_oracle_suite(1000, seed),
        layer_restriction_suite(200, seed)?,
        gqa_degeneracy_suite(50, seed)?,
        gradient_check_suite(seed)?,
        aggregation_suite(200, seed)?,
        subgraph_suite(100, seed)?,
        mac_suite()?,
    ])
}
