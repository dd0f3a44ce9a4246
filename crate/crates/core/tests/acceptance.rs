//! Acceptance gate. Every check builds its own reference values with a
//! brute-force oracle local to this file and prints one `[PASS]`/`[FAIL]`
//! line; run with `--nocapture` to see them.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use mtfm_core::bench::{count_macs, verify_complexity};
use mtfm_core::data::{generate_dataset, serialize_dataset, GeneratorConfig, UserSample};
use mtfm_core::engine::{Graph, ParamStore, Tensor};
use mtfm_core::heads::{auc, gauc, EvalReport, PredictionRecord};
use mtfm_core::hta::{
    full_attention_layer, target_attention_layer, AttnMask, FullLayerWeights, GlnParams, GroupKey, HtaConfig,
    LayerKind, TargetLayerWeights,
};
use mtfm_core::inference::{extract_subgraph, infer_request, is_prunable, prune_model};
use mtfm_core::mask::{build_mask, extract_t_rows};
use mtfm_core::model::{Model, ModelConfig};
use mtfm_core::tokenizer::{TokenKind, TokenLayout, TokenMeta};
use mtfm_core::train::{evaluate, predict_all, split_users, train, TrainConfig};
use mtfm_core::verify::{micro_config, micro_schema, random_layout, random_request, random_sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn report(name: &str, passed: bool, detail: String) {
    println!("[{}] {name}: {detail}", if passed { "PASS" } else { "FAIL" });
}

fn secs(d: Duration) -> String {
    format!("{:.2}s", d.as_secs_f64())
}

fn visible(q: &TokenMeta, k: &TokenMeta, same: bool) -> bool {
    match k.kind {
        TokenKind::H => true,
        TokenKind::R => q.timestamp > k.timestamp,
        TokenKind::T => same,
    }
}

fn random_metas(rng: &mut ChaCha8Rng, max_tokens: usize) -> Vec<TokenMeta> {
    let n = rng.gen_range(0..=max_tokens);
    (0..n)
        .map(|i| {
            let kind = [TokenKind::H, TokenKind::R, TokenKind::T][rng.gen_range(0..3)];
            TokenMeta {
                kind,
                group_id: rng.gen_range(0..2),
                timestamp: rng.gen_range(0..6),
                exposure_ref: (kind == TokenKind::T).then_some(i),
            }
        })
        .collect()
}

#[test]
fn c01_mask_matches_brute_force() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut mismatches = 0usize;
    let mut ties = 0usize;
    for _ in 0..1000 {
        let metas = random_metas(&mut rng, 32);
        let mask = build_mask(&metas);
        for (i, q) in metas.iter().enumerate() {
            for (j, k) in metas.iter().enumerate() {
                ties += usize::from(i != j && q.timestamp == k.timestamp);
                mismatches += usize::from(mask.get(i, j) != visible(q, k, i == j));
            }
        }
    }
    let elapsed = start.elapsed();
    let passed = mismatches == 0 && ties > 0 && elapsed < Duration::from_secs(5);
    report("1 mask oracle", passed, format!("1000 instances, {mismatches} mismatches, {ties} tied pairs, {}", secs(elapsed)));
    assert!(passed);
}

fn max_record_diff(a: &[PredictionRecord], b: &[PredictionRecord]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            assert_eq!((x.exposure, &x.task), (y.exposure, &y.task));
            (x.logit - y.logit).abs().max((x.probability - y.probability).abs())
        })
        .fold(0.0, f64::max)
}

fn jitter_gln(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.name.contains(".gln_")).map(|(id, _)| id).collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
}

fn test_model(seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        hta: HtaConfig { d_model: 16, blocks: 2, target_layers: 2, full_layers: 1, heads: 4, kv_heads: 2, ..Default::default() },
        d_emb: 8,
        ..Default::default()
    };
    let mut model = Model::<f64>::init(cfg, micro_schema(), seed).unwrap();
    jitter_gln(&mut model.store, &mut ChaCha8Rng::seed_from_u64(seed));
    model
}

#[test]
fn c02_aggregated_equals_singleton() {
    let start = Instant::now();
    let model = test_model(202);
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut exposures = 0;
    for u in 0..200 {
        let sample = random_sample(&mut rng, &model.schema, u, 12);
        let all = model.predict(&sample).unwrap();
        for i in 0..sample.exposures.len() {
            let mut alone = model.predict(&sample.singleton(i)).unwrap();
            alone.iter_mut().for_each(|r| r.exposure = i);
            let mine: Vec<_> = all.iter().filter(|r| r.exposure == i).cloned().collect();
            worst = worst.max(max_record_diff(&mine, &alone));
            exposures += 1;
        }
    }
    let elapsed = start.elapsed();
    let passed = worst <= 1e-6 && elapsed < Duration::from_secs(60);
    report("2 aggregation equivalence", passed, format!("200 samples, {exposures} exposures, max |d| {worst:.3e}, {}", secs(elapsed)));
    assert!(passed);
}

#[test]
fn c03_subgraph_equals_full_graph() {
    let model = test_model(303);
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut worst = 0.0f64;
    let mut smaller = true;
    let subs: BTreeMap<_, _> =
        model.schema.scenarios.iter().map(|s| (s.scenario_id, extract_subgraph(&model, s.scenario_id).unwrap())).collect();
    for sub in subs.values() {
        smaller &= sub.param_count() < model.param_count();
        // nothing owned by another scenario survives extraction
        smaller &= sub.model.store.iter().all(|(_, p)| p.owner.is_none_or(|o| o == sub.scenario_id));
    }
    for _ in 0..100 {
        let req = random_request(&mut rng, &model.schema, 8);
        let via_sub = infer_request(&req, &subs[&req.scenario_id]).unwrap();
        let via_full = model.predict(&req.as_sample()).unwrap();
        worst = worst.max(max_record_diff(&via_sub, &via_full));
    }
    let passed = worst <= 1e-6 && smaller;
    report("3 subgraph equivalence", passed, format!("100 requests over 3 scenarios, max |d| {worst:.3e}"));
    assert!(passed);
}

fn layer_groups() -> Vec<GroupKey> {
    vec![
        GroupKey { kind: TokenKind::H, id: 0 },
        GroupKey { kind: TokenKind::H, id: 1 },
        GroupKey { kind: TokenKind::R, id: 0 },
        GroupKey { kind: TokenKind::T, id: 0 },
        GroupKey { kind: TokenKind::T, id: 1 },
        GroupKey { kind: TokenKind::T, id: 2 },
    ]
}

fn random_input(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn c04_target_layer_is_full_layer_restricted_to_targets() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let groups = layer_groups();
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let kv_heads = [1, 2, 4][rng.gen_range(0..3)];
        let cfg = HtaConfig { d_model: 16, heads: 4, kv_heads, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        FullLayerWeights::register(&mut store, &mut rng, "full", &groups, &cfg, false).unwrap();
        jitter_gln(&mut store, &mut rng);
        let full = FullLayerWeights::bind(&store, "full", &groups).unwrap();
        TargetLayerWeights::register_from_full(&mut store, &full, "target", &cfg).unwrap();
        let target = TargetLayerWeights::bind(&store, "target", &groups).unwrap();
        let layout = random_layout(&mut rng, 32, &groups);
        let x0 = random_input(&mut rng, layout.metas.len(), cfg.d_model);
        let mask = build_mask(&layout.metas);
        let t_mask = extract_t_rows(&mask, &layout.boundaries).unwrap();

        let mut g = Graph::new(&store);
        let x = g.input(x0);
        let f = full_attention_layer(&mut g, x, &layout, &AttnMask::new(&mask, cfg.norm), &full, &cfg).unwrap();
        let t = target_attention_layer(&mut g, x, &layout, &AttnMask::new(&t_mask, cfg.norm), &target, &cfg).unwrap();
        let (start, l_t) = (layout.boundaries.t_start(), layout.boundaries.l_t);
        let (f, t) = (g.value(f.out), g.value(t.out));
        for r in start..start + l_t {
            for c in 0..cfg.d_model {
                worst = worst.max((f.get(r, c) - t.get(r, c)).abs());
            }
        }
    }
    let passed = worst <= 1e-6;
    report("4 target/full restriction", passed, format!("200 instances, max |d| over T rows {worst:.3e}"));
    assert!(passed);
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn gln_reference(x: &[Vec<f64>], metas: &[TokenMeta], p: &GlnParams, store: &ParamStore<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .zip(metas)
        .map(|(row, m)| {
            let (gain, bias) = p.groups[&GroupKey { kind: m.kind, id: m.group_id }];
            let (gain, bias) = (store.value(gain).data(), store.value(bias).data());
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let sd = (var + 1e-6).sqrt();
            row.iter().enumerate().map(|(c, v)| (v - mean) / sd * gain[c] + bias[c]).collect()
        })
        .collect()
}

fn affine(x: &[Vec<f64>], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| (0..w.cols()).map(|c| b.get(0, c) + (0..w.rows()).map(|k| row[k] * w.get(k, c)).sum::<f64>()).collect())
        .collect()
}

/// Multi-head gated attention layer with one key/value head per query head,
/// written from the layer definition with nested loops.
fn mha_reference(x: &Tensor<f64>, layout: &TokenLayout, w: &FullLayerWeights, store: &ParamStore<f64>, heads: usize) -> Vec<Vec<f64>> {
    let n = x.rows();
    let d = x.cols();
    let dh = d / heads;
    let rows: Vec<Vec<f64>> = (0..n).map(|r| x.row(r).to_vec()).collect();
    let h = gln_reference(&rows, &layout.metas, &w.gln_in, store);
    let proj: Vec<Vec<f64>> = affine(&h, store.value(w.f1.w), store.value(w.f1.b))
        .into_iter()
        .map(|r| r.into_iter().map(silu).collect())
        .collect();
    let (u, q, k, v) = (0, d, 2 * d, 3 * d);
    let mut attn = vec![vec![0.0; d]; n];
    for i in 0..n {
        let vis: Vec<bool> = (0..n).map(|j| visible(&layout.metas[i], &layout.metas[j], i == j)).collect();
        let count = vis.iter().filter(|&&b| b).count().max(1) as f64;
        for head in 0..heads {
            for j in (0..n).filter(|&j| vis[j]) {
                let s: f64 = (0..dh).map(|e| proj[i][q + head * dh + e] * proj[j][k + head * dh + e]).sum();
                for e in 0..dh {
                    attn[i][head * dh + e] += silu(s) / count * proj[j][v + head * dh + e];
                }
            }
        }
    }
    let gated: Vec<Vec<f64>> = gln_reference(&attn, &layout.metas, &w.gln_gate, store)
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_iter().enumerate().map(|(c, a)| a * proj[i][u + c]).collect())
        .collect();
    affine(&gated, store.value(w.f2.w), store.value(w.f2.b))
        .into_iter()
        .enumerate()
        .map(|(i, r)| r.into_iter().enumerate().map(|(c, y)| y + rows[i][c]).collect())
        .collect()
}

#[test]
fn c05_gqa_with_g_equal_h_is_mha() {
    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let groups = layer_groups();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let heads = rng.gen_range(1..=4);
        let cfg = HtaConfig { d_model: 4 * heads, heads, kv_heads: heads, ..Default::default() };
        let mut store = ParamStore::<f64>::new();
        FullLayerWeights::register(&mut store, &mut rng, "full", &groups, &cfg, false).unwrap();
        jitter_gln(&mut store, &mut rng);
        let w = FullLayerWeights::bind(&store, "full", &groups).unwrap();
        let layout = random_layout(&mut rng, 24, &groups);
        let x0 = random_input(&mut rng, layout.metas.len(), cfg.d_model);
        let mask = build_mask(&layout.metas);
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let out = full_attention_layer(&mut g, x, &layout, &AttnMask::new(&mask, cfg.norm), &w, &cfg).unwrap();
        let reference = mha_reference(&x0, &layout, &w, &store, heads);
        let got = g.value(out.out);
        for (r, row) in reference.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                worst = worst.max((got.get(r, c) - v).abs());
            }
        }
    }
    let passed = worst <= 1e-12;
    report("5 GQA degeneracy", passed, format!("100 instances, G = H, max |d| vs loop MHA {worst:.3e}"));
    assert!(passed);
}

#[test]
fn c06_gradients_match_central_differences() {
    let start = Instant::now();
    let schema = micro_schema();
    let cfg = micro_config();
    assert_eq!(
        (cfg.hta.d_model, cfg.hta.blocks, cfg.hta.target_layers, cfg.hta.full_layers),
        (16, 1, 1, 1)
    );
    let mut model = Model::<f64>::init(cfg, schema.clone(), 606).unwrap();
    jitter_gln(&mut model.store, &mut ChaCha8Rng::seed_from_u64(606));
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    // one exposure per scenario so every head receives gradient
    let mut sample = random_sample(&mut rng, &schema, 1, 6);
    let t = sample.exposures.iter().map(|e| e.timestamp).max().unwrap_or(100);
    sample.exposures = schema.scenarios.iter().map(|s| mtfm_core::verify::random_exposure(&mut rng, s, t)).collect();

    let (_, grads) = model.loss_and_grads(&sample, 1.0).unwrap();
    // fourth-order central stencil; a plain two-point difference at small h
    // loses ~1e-11 to roundoff, which is visible against gradients near 1e-7
    let h = 1e-3;
    let ids: Vec<_> = model.store.iter().map(|(id, p)| (id, p.name.clone())).collect();
    let mut worst = (0.0f64, String::new());
    let mut scalars = 0;
    for (id, name) in ids {
        for k in 0..model.store.value(id).len() {
            let orig = model.store.value(id).data()[k];
            let mut at = |offset: f64| {
                model.store.value_mut(id).data_mut()[k] = orig + offset;
                model.loss_and_grads(&sample, 1.0).unwrap().0
            };
            let numeric = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            model.store.value_mut(id).data_mut()[k] = orig;
            let analytic = grads.get(id).data()[k];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{k}]"));
            }
            scalars += 1;
        }
    }
    let elapsed = start.elapsed();
    let passed = worst.0 <= 1e-4 && elapsed < Duration::from_secs(120);
    report(
        "6 gradient check",
        passed,
        format!("{scalars} scalars, max rel err {:.3e} at {}, {}", worst.0, worst.1, secs(elapsed)),
    );
    assert!(passed);
}

fn analytic_attention(cfg: &HtaConfig, kind: LayerKind, n: u64, l_t: u64) -> u64 {
    let width = (cfg.heads * (cfg.d_model / cfg.heads)) as u64;
    match kind {
        LayerKind::Full => 2 * n * n * width,
        LayerKind::Target => 2 * l_t * n * width,
    }
}

#[test]
fn c07_attention_mac_ratio_follows_formula() {
    let base = HtaConfig { d_model: 8, blocks: 1, heads: 2, kv_heads: 1, ..Default::default() };
    let sizes = [(512, 16), (1024, 32), (2048, 64)];
    let ks = [1, 3, 5];
    let mut passed = true;
    let mut worst = 0.0f64;
    for &(n, l_t) in &sizes {
        for &k in &ks {
            let hybrid = HtaConfig { target_layers: k, full_layers: 1, ..base.clone() };
            let full = HtaConfig { target_layers: 0, full_layers: 1, blocks: k + 1, ..base.clone() };
            let (h, f) = (count_macs(&hybrid, n, l_t).unwrap(), count_macs(&full, n, l_t).unwrap());
            for (r, cfg) in [(&h, &hybrid), (&f, &full)] {
                for m in &r.measured {
                    passed &= m.attention == analytic_attention(cfg, m.kind, n as u64, l_t as u64);
                }
            }
            let measured = h.attention() as f64 / f.attention() as f64;
            let (kf, nf, lf) = (k as f64, n as f64, l_t as f64);
            let predicted = (kf * nf * lf + nf * nf) / ((kf + 1.0) * nf * nf);
            let err = (measured - predicted).abs() / predicted;
            worst = worst.max(err);
            println!("    N={n:<5} L_T={l_t:<3} K={k}  measured {measured:.5}  predicted {predicted:.5}  rel err {err:.2e}");
        }
    }
    // the library's own accounting agrees with the counts above
    passed &= verify_complexity(&base, &sizes[..1], &ks).unwrap().iter().all(|r| r.passes(0.10));
    passed &= worst <= 0.10;
    report("7 complexity ratio", passed, format!("9 cases, exact MAC counts, worst ratio error {worst:.2e}"));
    assert!(passed);
}

fn hybrid_parity_config(k: usize) -> ModelConfig {
    ModelConfig {
        hta: HtaConfig { d_model: 64, blocks: 4, target_layers: k, full_layers: 1, ..Default::default() },
        zero_init_output: true,
        ..Default::default()
    }
}

#[test]
fn c08_full_and_hybrid_learn_to_parity() {
    let start = Instant::now();
    let data = generate_dataset(&GeneratorConfig { n_users: 10_000, ..Default::default() }, 7).unwrap();
    let (train_set, held_out) = split_users(&data.samples, 0.2, 1);
    let tc = TrainConfig { steps: 2000, seed: 7, ..Default::default() };
    let mut aucs = Vec::new();
    for k in [0, 3] {
        let mut model = Model::<f32>::init(hybrid_parity_config(k), data.schema.clone(), 1).unwrap();
        train(&mut model, &train_set, &[], &tc, |_| {}).unwrap();
        let records = predict_all(&model, &held_out).unwrap();
        let a = EvalReport::pooled_auc(&records, "ctr").unwrap();
        println!("    ({k}:1)x4  held-out CTR AUC {a:.4}  params {}", model.param_count());
        aucs.push(a);
    }
    let elapsed = start.elapsed();
    let gap = (aucs[0] - aucs[1]).abs();
    let passed = aucs.iter().all(|&a| a >= 0.75) && gap <= 0.01 && elapsed < Duration::from_secs(1800);
    report(
        "8 learning + hybrid parity",
        passed,
        format!("full {:.4}, hybrid {:.4}, |d| {gap:.4}, {}", aucs[0], aucs[1], secs(elapsed)),
    );
    assert!(passed);
}

#[test]
fn c09_two_four_pruning() {
    let data = generate_dataset(&GeneratorConfig { n_users: 1500, ..Default::default() }, 9).unwrap();
    let (train_set, held_out) = split_users(&data.samples, 0.2, 9);
    let cfg = ModelConfig {
        hta: HtaConfig { d_model: 32, blocks: 2, target_layers: 1, full_layers: 1, ..Default::default() },
        ..Default::default()
    };
    let mut model = Model::<f32>::init(cfg, data.schema.clone(), 9).unwrap();
    train(&mut model, &train_set, &[], &TrainConfig { steps: 300, seed: 9, ..Default::default() }, |_| {}).unwrap();
    let before = evaluate(&model, &held_out).unwrap();
    let summary = prune_model(&mut model);

    let mut groups = 0usize;
    let mut bad = 0usize;
    let mut matrices = 0usize;
    for (_, p) in model.store.iter().filter(|(_, p)| is_prunable(&p.name)) {
        matrices += 1;
        let w = &p.value;
        for c in 0..w.cols() {
            for g in 0..w.rows() / 4 {
                let zeros = (0..4).filter(|&i| w.get(4 * g + i, c) == 0.0).count();
                groups += 1;
                bad += usize::from(zeros != 2);
            }
        }
    }
    let after = evaluate(&model, &held_out).unwrap();
    let (b, a) = (before.loss.unwrap(), after.loss.unwrap());
    let ctr = |r: &EvalReport| r.metric("HP", "ctr").and_then(|m| m.auc).unwrap_or(f64::NAN);
    let passed = matrices > 0 && groups > 0 && bad == 0 && a.is_finite() && summary.zeroed() == 2 * groups;
    report(
        "9 2:4 pruning",
        passed,
        format!(
            "{matrices} matrices, {groups} groups, {bad} violations; loss {b:.4} -> {a:.4}, HP ctr AUC {:.4} -> {:.4}",
            ctr(&before),
            ctr(&after)
        ),
    );
    assert!(passed);
}

fn short_run(data: &[UserSample], schema: &mtfm_core::data::DatasetSchema) -> Vec<f64> {
    let cfg = ModelConfig {
        hta: HtaConfig { d_model: 16, blocks: 1, target_layers: 2, full_layers: 1, ..Default::default() },
        d_emb: 8,
        ..Default::default()
    };
    let mut model = Model::<f32>::init(cfg, schema.clone(), 10).unwrap();
    let tc = TrainConfig { steps: 40, batch_size: 8, seed: 10, ..Default::default() };
    train(&mut model, data, &[], &tc, |_| {}).unwrap().losses()
}

#[test]
fn c10_determinism() {
    let gcfg = GeneratorConfig { n_users: 300, ..Default::default() };
    let a = generate_dataset(&gcfg, 10).unwrap();
    let b = generate_dataset(&gcfg, 10).unwrap();
    let same_bytes = serialize_dataset(&a).unwrap().into_bytes() == serialize_dataset(&b).unwrap().into_bytes();
    let run1 = short_run(&a.samples, &a.schema);
    let run2 = short_run(&a.samples, &a.schema);
    let same_losses = run1.len() == 40 && run1.iter().zip(&run2).all(|(x, y)| x.to_bits() == y.to_bits());
    let passed = same_bytes && same_losses;
    report(
        "10 determinism",
        passed,
        format!("dataset bytes identical: {same_bytes}; 40-step loss trajectories bitwise identical: {same_losses}"),
    );
    assert!(passed);
}

fn auc_all_pairs(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

#[test]
fn c11_metrics_match_all_pairs_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let mut worst = 0.0f64;
    let mut tie_fixtures = 0;
    for f in 0..50 {
        let n = rng.gen_range(4..40);
        // coarse score grid forces ties in most fixtures
        let levels = if f % 2 == 0 { 4 } else { 1000 };
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / levels as f64).collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let users: Vec<u64> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        let mut sorted = scores.clone();
        sorted.sort_by(f64::total_cmp);
        tie_fixtures += usize::from(sorted.windows(2).any(|w| w[0] == w[1]));

        worst = worst.max((auc(&scores, &labels).unwrap() - auc_all_pairs(&scores, &labels)).abs());

        let mut num = 0.0;
        let mut den = 0.0;
        for u in 0..4 {
            let idx: Vec<usize> = (0..n).filter(|&i| users[i] == u).collect();
            let (s, y): (Vec<f64>, Vec<u8>) = idx.iter().map(|&i| (scores[i], labels[i])).unzip();
            if y.contains(&0) && y.contains(&1) {
                num += idx.len() as f64 * auc_all_pairs(&s, &y);
                den += idx.len() as f64;
            }
        }
        match gauc(&users, &scores, &labels) {
            Ok(g) if den > 0.0 => worst = worst.max((g - num / den).abs()),
            Err(_) if den == 0.0 => {}
            _ => worst = f64::INFINITY,
        }
    }
    let passed = worst <= 1e-12 && tie_fixtures > 0;
    report("11 metric correctness", passed, format!("50 fixtures ({tie_fixtures} with ties), max |d| {worst:.3e}"));
    assert!(passed);
}
