//! Synthetic multi-scenario data with a planted label model.
//!
//! Users and catalog items carry 8-dimensional latent vectors. The click
//! probability of an exposure is `σ(α·⟨u, i⟩/√8 + b_s + noise·ε)`, with the
//! scenario bias `b_s` calibrated so the click rate lands near
//! `positive_rate`. Every observable feature (behavior sequences, bucketed
//! user attributes, item attributes, a noisy affinity cross feature) is a
//! function of those latents plus noise, so the labels are learnable.
//! Conversion-style tasks sit below the click in a funnel.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schema::{
    BehaviorEvent, Dataset, DatasetSchema, Exposure, ScenarioSchema, Sequence, SequenceSchema,
    UserSample,
};
use crate::error::{Error, Result};
use crate::{ScenarioId, Timestamp};

pub const LATENT_DIM: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_scenarios: usize,
    pub n_users: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub exposures_min: usize,
    pub exposures_max: usize,
    pub n_items: usize,
    /// Target mean click rate.
    pub positive_rate: f64,
    /// Standard deviation of the logit noise.
    pub noise: f64,
    /// Scale of the latent affinity inside the click logit.
    pub signal: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_scenarios: 3,
            n_users: 1000,
            seq_len_min: 4,
            seq_len_max: 16,
            exposures_min: 2,
            exposures_max: 10,
            n_items: 400,
            positive_rate: 0.3,
            noise: 0.3,
            signal: 3.0,
        }
    }
}

impl GeneratorConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_scenarios == 0 {
            return fail("n_scenarios must be at least 1");
        }
        if self.seq_len_min > self.seq_len_max {
            return fail("seq_len_min exceeds seq_len_max");
        }
        if self.exposures_min == 0 || self.exposures_min > self.exposures_max {
            return fail("exposure range must satisfy 1 <= exposures_min <= exposures_max");
        }
        if self.n_items < 2 {
            return fail("n_items must be at least 2");
        }
        if !(self.positive_rate > 0.0 && self.positive_rate < 1.0) {
            return fail("positive_rate must lie in (0, 1)");
        }
        if !(self.noise >= 0.0 && self.signal.is_finite()) {
            return fail("noise must be nonnegative and signal finite");
        }
        Ok(())
    }
}

const N_CATEGORY: usize = 8;
const N_STYLE: usize = 8;
const N_PRICE: usize = 4;
const N_QUARTILE: usize = 4;
const WINDOW_START: Timestamp = 100_000;
const WINDOW_LEN: Timestamp = 2_000;
const HISTORY_SPAN: Timestamp = 50_000;

type Latent = [f64; LATENT_DIM];

struct Item {
    latent: Latent,
    category: u32,
    style: u32,
    price: u32,
}

fn sign_bits(x: &[f64]) -> u32 {
    x.iter().enumerate().fold(0, |acc, (k, &v)| acc | (u32::from(v > 0.0) << k))
}

fn quartile(x: f64) -> u32 {
    // standard normal quartile cut points
    match x {
        x if x < -0.6745 => 0,
        x if x < 0.0 => 1,
        x if x < 0.6745 => 2,
        _ => 3,
    }
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

fn latent<R: Rng>(rng: &mut R) -> Latent {
    std::array::from_fn(|_| gaussian(rng))
}

fn affinity(u: &Latent, i: &Latent) -> f64 {
    u.iter().zip(i).map(|(a, b)| a * b).sum::<f64>() / (LATENT_DIM as f64).sqrt()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Scenario layouts. Slot counts differ on purpose: nothing aligns them.
fn scenario_schemas(n: usize, n_items: usize) -> Vec<ScenarioSchema> {
    let s = |x: &str| x.to_string();
    (0..n)
        .map(|k| {
            let id = k as ScenarioId;
            match k {
                0 => ScenarioSchema {
                    scenario_id: id,
                    name: s("HP"),
                    user_feature_vocabs: vec![N_QUARTILE; 4].into_iter().chain([5]).collect(),
                    cross_feature_vocabs: vec![6, N_QUARTILE],
                    item_feature_vocabs: vec![n_items, N_CATEGORY, N_STYLE, N_PRICE],
                    tasks: vec![s("ctr"), s("ctcvr")],
                },
                1 => ScenarioSchema {
                    scenario_id: id,
                    name: s("SQS"),
                    user_feature_vocabs: vec![N_QUARTILE; 4].into_iter().chain([3]).collect(),
                    cross_feature_vocabs: vec![N_QUARTILE],
                    item_feature_vocabs: vec![n_items, N_CATEGORY, 5],
                    tasks: vec![s("ctr"), s("ctcvr"), s("imd"), s("write")],
                },
                2 => ScenarioSchema {
                    scenario_id: id,
                    name: s("PHF"),
                    user_feature_vocabs: vec![16, 16],
                    cross_feature_vocabs: vec![6, N_QUARTILE],
                    item_feature_vocabs: vec![n_items, N_STYLE, N_PRICE],
                    tasks: vec![s("ctr"), s("ctcvr")],
                },
                _ => ScenarioSchema {
                    scenario_id: id,
                    name: format!("S{k}"),
                    user_feature_vocabs: vec![N_QUARTILE; 4],
                    cross_feature_vocabs: vec![N_QUARTILE],
                    item_feature_vocabs: vec![n_items, N_CATEGORY],
                    tasks: vec![s("ctr"), s("ctcvr")],
                },
            }
        })
        .collect()
}

pub fn dataset_schema(cfg: &GeneratorConfig) -> DatasetSchema {
    let n = cfg.n_items;
    DatasetSchema {
        scenarios: scenario_schemas(cfg.n_scenarios, n),
        historical: vec![
            SequenceSchema { seq_id: 0, name: "orders".into(), feature_vocabs: vec![n, N_CATEGORY, N_STYLE] },
            SequenceSchema { seq_id: 1, name: "views".into(), feature_vocabs: vec![n, N_CATEGORY] },
        ],
        realtime: vec![SequenceSchema {
            seq_id: 0,
            name: "recent_clicks".into(),
            feature_vocabs: vec![n, N_CATEGORY, N_STYLE],
        }],
    }
}

fn user_features(scenario: usize, u: &Latent, extra: u32) -> Vec<u32> {
    match scenario {
        0 => vec![quartile(u[0]), quartile(u[1]), quartile(u[2]), quartile(u[3]), extra % 5],
        1 => vec![quartile(u[4]), quartile(u[5]), quartile(u[6]), quartile(u[7]), extra % 3],
        2 => vec![sign_bits(&u[0..4]), sign_bits(&u[4..8])],
        k => (0..4).map(|d| quartile(u[(d + k) % LATENT_DIM])).collect(),
    }
}

fn item_features(scenario: usize, id: usize, it: &Item, extra: u32) -> Vec<u32> {
    let id = id as u32;
    match scenario {
        0 => vec![id, it.category, it.style, it.price],
        1 => vec![id, it.category, extra % 5],
        2 => vec![id, it.style, it.price],
        _ => vec![id, it.category],
    }
}

fn cross_features(scenario: usize, noisy_affinity: u32, distance: u32) -> Vec<u32> {
    match scenario {
        0 | 2 => vec![distance, noisy_affinity],
        _ => vec![noisy_affinity],
    }
}

/// Finds `b` with mean `σ(signal·a + b + noise·ε)` close to `rate` over a fixed
/// Monte-Carlo sample of affinities.
fn calibrate_bias(rng: &mut ChaCha8Rng, signal: f64, noise: f64, rate: f64) -> f64 {
    let draws: Vec<f64> = (0..4000)
        .map(|_| {
            let (u, i) = (latent(rng), latent(rng));
            signal * affinity(&u, &i) + noise * gaussian(rng)
        })
        .collect();
    let (mut lo, mut hi) = (-30.0, 30.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        let mean = draws.iter().map(|&x| sigmoid(x + mid)).sum::<f64>() / draws.len() as f64;
        if mean < rate {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

struct World {
    items: Vec<Item>,
    ctr_bias: Vec<f64>,
    scenario_weights: Vec<f64>,
}

fn pick_weighted<R: Rng>(rng: &mut R, cdf: &[f64]) -> usize {
    let total = *cdf.last().expect("nonempty cdf");
    let x = rng.gen::<f64>() * total;
    cdf.partition_point(|&c| c <= x).min(cdf.len() - 1)
}

fn sequence_event(seq_schema: usize, id: usize, it: &Item, ts: Timestamp) -> BehaviorEvent {
    let f = match seq_schema {
        1 => vec![id as u32, it.category],
        _ => vec![id as u32, it.category, it.style],
    };
    BehaviorEvent { item_features: f, timestamp: ts }
}

fn generate_user(cfg: &GeneratorConfig, world: &World, user: usize, rng: &mut ChaCha8Rng) -> UserSample {
    let u = latent(rng);
    let start = WINDOW_START + rng.gen_range(0..1000);
    // preference-weighted catalog for behavior sampling
    let mut pref_cdf = Vec::with_capacity(world.items.len());
    let mut acc = 0.0;
    for it in &world.items {
        acc += (2.0 * affinity(&u, &it.latent)).exp();
        pref_cdf.push(acc);
    }

    let draw_times = |rng: &mut ChaCha8Rng, n: usize, lo: Timestamp, hi: Timestamp| {
        let mut ts: Vec<Timestamp> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
        ts.sort_unstable();
        ts
    };

    let historical = (0..2)
        .map(|q| {
            let n = rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);
            let times = draw_times(rng, n, start - HISTORY_SPAN, start);
            let events = times
                .into_iter()
                .map(|t| {
                    let id = pick_weighted(rng, &pref_cdf);
                    sequence_event(q, id, &world.items[id], t)
                })
                .collect();
            Sequence { seq_id: q as u32, events }
        })
        .collect();

    let n_exp = rng.gen_range(cfg.exposures_min..=cfg.exposures_max);
    let scen_cdf: Vec<f64> = world
        .scenario_weights
        .iter()
        .scan(0.0, |a, &w| {
            *a += w;
            Some(*a)
        })
        .collect();
    let extra_user: u32 = rng.gen();
    let mut exposures = Vec::with_capacity(n_exp);
    while exposures.len() < n_exp {
        let s = pick_weighted(rng, &scen_cdf);
        let ts = start + rng.gen_range(0..WINDOW_LEN);
        let n_cand = rng.gen_range(1..=3).min(n_exp - exposures.len());
        for _ in 0..n_cand {
            let id = if rng.gen_bool(0.5) {
                pick_weighted(rng, &pref_cdf)
            } else {
                rng.gen_range(0..world.items.len())
            };
            let it = &world.items[id];
            let a = affinity(&u, &it.latent);
            let noisy = quartile(a + gaussian(rng));
            let distance = rng.gen_range(0..6);
            let p_click = sigmoid(cfg.signal * a + world.ctr_bias[s] + cfg.noise * gaussian(rng));
            let click = rng.gen_bool(p_click);
            let convert = click && rng.gen_bool(sigmoid(cfg.signal * a - 0.5));
            let mut labels = BTreeMap::new();
            labels.insert("ctr".to_string(), u8::from(click));
            labels.insert("ctcvr".to_string(), u8::from(convert));
            if s == 1 {
                let write = convert && rng.gen_bool(sigmoid(a + 0.5));
                let imd = write && rng.gen_bool(0.6);
                labels.insert("write".to_string(), u8::from(write));
                labels.insert("imd".to_string(), u8::from(imd));
            }
            exposures.push(Exposure {
                scenario_id: s as ScenarioId,
                user_features: user_features(s, &u, extra_user),
                cross_features: cross_features(s, noisy, distance),
                item_features: item_features(s, id, it, rng.gen()),
                timestamp: ts,
                labels,
            });
        }
    }

    // Realtime clicks: a few just before the window plus echoes of clicks
    // inside it. The echoes postdate their exposure, which is exactly what
    // the attention mask has to hide.
    let mut rt_events: Vec<(Timestamp, usize)> = Vec::new();
    let n_pre = rng.gen_range(cfg.seq_len_min / 2..=cfg.seq_len_max / 2);
    for t in draw_times(rng, n_pre, start - 500, start) {
        rt_events.push((t, pick_weighted(rng, &pref_cdf)));
    }
    for e in &exposures {
        if e.labels["ctr"] == 1 {
            rt_events.push((e.timestamp + rng.gen_range(1..60), e.item_features[0] as usize));
        }
    }
    rt_events.sort_by_key(|&(t, id)| (t, id));
    let keep = rt_events.len().min(cfg.seq_len_max);
    let rt_events = &rt_events[rt_events.len() - keep..];
    let realtime = vec![Sequence {
        seq_id: 0,
        events: rt_events.iter().map(|&(t, id)| sequence_event(0, id, &world.items[id], t)).collect(),
    }];

    UserSample { user_id: user as u64, historical, realtime, exposures }
}

/// Deterministic in `(cfg, seed)`.
pub fn generate_dataset(cfg: &GeneratorConfig, seed: u64) -> Result<Dataset> {
    cfg.validate()?;
    let schema = dataset_schema(cfg);
    schema.validate()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let items: Vec<Item> = (0..cfg.n_items)
        .map(|_| {
            let l = latent(&mut rng);
            Item {
                category: sign_bits(&l[0..3]),
                style: sign_bits(&l[3..6]),
                price: (quartile(l[6] + l[7]) as usize).min(N_PRICE - 1) as u32,
                latent: l,
            }
        })
        .collect();
    let base = calibrate_bias(&mut rng, cfg.signal, cfg.noise, cfg.positive_rate);
    // small per-scenario offsets keep scenario biases distinct
    let mut offsets: Vec<f64> = (0..cfg.n_scenarios).map(|k| 0.15 * (k as f64 - 1.0)).collect();
    offsets.shuffle(&mut rng);
    let ctr_bias = offsets.iter().map(|o| base + o).collect();
    let scenario_weights = (0..cfg.n_scenarios).map(|k| if k == 0 { 2.0 } else { 1.0 }).collect();
    let world = World { items, ctr_bias, scenario_weights };

    let samples = (0..cfg.n_users)
        .into_par_iter()
        .map(|user| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(user as u64 + 1);
            generate_user(cfg, &world, user, &mut r)
        })
        .collect();
    Ok(Dataset { schema, samples })
}
