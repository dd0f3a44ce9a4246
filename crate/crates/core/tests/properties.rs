use mtfm_core::data::{DatasetSchema, UserSample};
use mtfm_core::engine::Graph;
use mtfm_core::heads::{auc, gauc};
use mtfm_core::hta::HtaConfig;
use mtfm_core::inference::{extract_subgraph, infer_request};
use mtfm_core::mask::build_mask;
use mtfm_core::model::{Model, ModelConfig};
use mtfm_core::tokenizer::{tokenize_sample, TokenKind, TokenMeta, TokenizerWeights};
use mtfm_core::verify::{micro_schema, random_request, random_sample};
use mtfm_core::Error;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn model(schema: DatasetSchema, seed: u64) -> Model<f64> {
    let cfg = ModelConfig {
        hta: HtaConfig { d_model: 16, blocks: 1, target_layers: 1, full_layers: 1, heads: 2, kv_heads: 1, ..Default::default() },
        d_emb: 8,
        ..Default::default()
    };
    Model::init(cfg, schema, seed).unwrap()
}

fn by_exposure(sample: &UserSample, m: &Model<f64>) -> Vec<Vec<(String, f64)>> {
    let mut out = vec![Vec::new(); sample.exposures.len()];
    for r in m.predict(sample).unwrap() {
        out[r.exposure].push((r.task, r.logit));
    }
    out
}

#[test]
fn permuting_exposures_permutes_predictions() {
    let schema = micro_schema();
    let m = model(schema.clone(), 1);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for u in 0..30 {
        let sample = random_sample(&mut rng, &schema, u, 10);
        let mut perm: Vec<usize> = (0..sample.exposures.len()).collect();
        perm.shuffle(&mut rng);
        let shuffled = UserSample { exposures: perm.iter().map(|&i| sample.exposures[i].clone()).collect(), ..sample.clone() };
        let (a, b) = (by_exposure(&sample, &m), by_exposure(&shuffled, &m));
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(a[old], b[new], "user {u}");
        }
    }
}

#[test]
fn tokenizer_layout_is_h_then_r_then_t() {
    let schema = micro_schema();
    let m = model(schema.clone(), 2);
    let weights = TokenizerWeights::bind(&m.store, &schema, 16).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for u in 0..30 {
        let sample = random_sample(&mut rng, &schema, u, 8);
        let seq = tokenize_sample(&m.store, &weights, &sample).unwrap();
        let b = seq.boundaries;
        let events = |qs: &[mtfm_core::data::Sequence]| qs.iter().map(|q| q.events.len()).sum::<usize>();
        assert_eq!((b.l_h, b.l_r, b.l_t), (events(&sample.historical), events(&sample.realtime), sample.exposures.len()));
        assert_eq!(seq.embeddings.shape(), [b.total(), 16]);
        let kinds: Vec<TokenKind> = seq.metas.iter().map(|t| t.kind).collect();
        let expected: Vec<TokenKind> = std::iter::repeat_n(TokenKind::H, b.l_h)
            .chain(std::iter::repeat_n(TokenKind::R, b.l_r))
            .chain(std::iter::repeat_n(TokenKind::T, b.l_t))
            .collect();
        assert_eq!(kinds, expected);
        // each exposure appears exactly once among the T tokens
        let mut refs: Vec<usize> = seq.metas[b.t_start()..].iter().map(|t| t.exposure_ref.unwrap()).collect();
        refs.sort_unstable();
        assert_eq!(refs, (0..b.l_t).collect::<Vec<_>>());
        for w in seq.metas[..b.l_h].windows(2).chain(seq.metas[b.l_h..b.t_start()].windows(2)) {
            assert!(w[0].timestamp <= w[1].timestamp);
        }
    }
}

#[test]
fn unknown_vocabulary_ids_are_rejected() {
    let schema = micro_schema();
    let m = model(schema.clone(), 3);
    let mut sample = random_sample(&mut ChaCha8Rng::seed_from_u64(3), &schema, 0, 3);
    sample.exposures[0].item_features[0] = 10_000;
    assert!(matches!(m.predict(&sample), Err(Error::Lookup(_))));
}

#[test]
fn request_yields_one_record_per_candidate_and_task() {
    let schema = micro_schema();
    let m = model(schema.clone(), 4);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let req = random_request(&mut rng, &schema, 9);
        let sub = extract_subgraph(&m, req.scenario_id).unwrap();
        let recs = infer_request(&req, &sub).unwrap();
        let tasks = schema.scenario(req.scenario_id).unwrap().tasks.len();
        assert_eq!(recs.len(), req.candidates.len() * tasks);
        assert!(recs.iter().all(|r| r.label.is_none() && r.probability > 0.0 && r.probability < 1.0));

        let mut perm: Vec<usize> = (0..req.candidates.len()).collect();
        perm.shuffle(&mut rng);
        let mut shuffled = req.clone();
        shuffled.candidates = perm.iter().map(|&i| req.candidates[i].clone()).collect();
        let again = infer_request(&shuffled, &sub).unwrap();
        for r in &again {
            let orig = recs.iter().find(|o| o.exposure == perm[r.exposure] && o.task == r.task).unwrap();
            assert_eq!(orig.logit, r.logit);
        }
    }
}

#[test]
fn request_for_another_scenario_is_refused() {
    let schema = micro_schema();
    let m = model(schema.clone(), 5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let req = loop {
        let r = random_request(&mut rng, &schema, 4);
        if r.scenario_id == 0 {
            break r;
        }
    };
    let sub = extract_subgraph(&m, 1).unwrap();
    assert!(infer_request(&req, &sub).is_err());
    assert!(matches!(extract_subgraph(&m, 99), Err(Error::Config(_))));
}

#[test]
fn single_scenario_subgraph_is_the_whole_model() {
    let schema = micro_schema().restrict_to(1).unwrap();
    let m = model(schema.clone(), 6);
    let sub = extract_subgraph(&m, 1).unwrap();
    assert_eq!(sub.param_count(), m.param_count());
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..10 {
        let req = random_request(&mut rng, &schema, 5);
        assert_eq!(infer_request(&req, &sub).unwrap(), m.predict(&req.as_sample()).unwrap());
    }
}

#[test]
fn gates_lie_on_the_simplex() {
    let schema = micro_schema();
    let m = model(schema.clone(), 7);
    let sample = random_sample(&mut ChaCha8Rng::seed_from_u64(7), &schema, 0, 12);
    let mut g = Graph::new(&m.store);
    let fwd = m.forward(&mut g, &sample).unwrap();
    assert!(!fwd.heads.is_empty());
    for head in &fwd.heads {
        let gate = g.value(head.gate);
        assert_eq!(gate.rows(), head.rows.len());
        for r in 0..gate.rows() {
            let row = gate.row(r);
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn scenario_heads_do_not_touch_other_scenarios() {
    let schema = micro_schema();
    let mut m = model(schema.clone(), 8);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let samples: Vec<_> = (0..10).map(|u| random_sample(&mut rng, &schema, u, 8)).collect();
    let before: Vec<_> = samples.iter().map(|s| m.predict(s).unwrap()).collect();
    let owned: Vec<_> = m.store.iter().filter(|(_, p)| p.owner == Some(2)).map(|(id, _)| id).collect();
    assert!(!owned.is_empty());
    for id in owned {
        m.store.value_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.3);
    }
    let mut changed = 0;
    for (s, old) in samples.iter().zip(before) {
        for (a, b) in m.predict(s).unwrap().iter().zip(old) {
            if a.scenario_id == 2 {
                changed += usize::from(a.logit != b.logit);
            } else {
                assert_eq!(a.logit, b.logit);
            }
        }
    }
    assert!(changed > 0);
}

fn meta_strategy() -> impl Strategy<Value = Vec<TokenMeta>> {
    prop::collection::vec((0..3usize, 0..5u64), 0..24).prop_map(|v| {
        v.into_iter()
            .enumerate()
            .map(|(i, (k, t))| {
                let kind = [TokenKind::H, TokenKind::R, TokenKind::T][k];
                TokenMeta { kind, group_id: 0, timestamp: t, exposure_ref: (kind == TokenKind::T).then_some(i) }
            })
            .collect()
    })
}

fn labeled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
    prop::collection::vec((0..8i32, any::<bool>()), 2..40).prop_filter_map("needs both classes", |v| {
        let labels: Vec<u8> = v.iter().map(|&(_, y)| u8::from(y)).collect();
        (labels.contains(&0) && labels.contains(&1)).then(|| (v.iter().map(|&(s, _)| s as f64).collect(), labels))
    })
}

proptest! {
    #[test]
    fn t_tokens_are_invisible_to_others(metas in meta_strategy()) {
        let mask = build_mask(&metas);
        for (j, key) in metas.iter().enumerate() {
            if key.kind == TokenKind::T {
                for i in 0..metas.len() {
                    prop_assert_eq!(mask.get(i, j), i == j);
                }
            }
            if key.kind == TokenKind::H {
                prop_assert!((0..metas.len()).all(|i| mask.get(i, j)));
            }
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_maps((scores, labels) in labeled_scores()) {
        let a = auc(&scores, &labels).unwrap();
        let mapped: Vec<f64> = scores.iter().map(|s| (0.3 * s).exp() - 7.0).collect();
        prop_assert_eq!(a, auc(&mapped, &labels).unwrap());
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn gauc_of_one_user_is_auc((scores, labels) in labeled_scores()) {
        let users = vec![42u64; scores.len()];
        prop_assert!((gauc(&users, &scores, &labels).unwrap() - auc(&scores, &labels).unwrap()).abs() < 1e-15);
    }
}
