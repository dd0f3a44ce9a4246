//! Heterogeneous tokenization of an aggregated user record.
//!
//! Each behavior event becomes an H- or R-token through the MLP of its source
//! sequence; each exposure becomes a T-token through the MLP of its scenario,
//! applied to the column concatenation of its user, cross and item slot
//! embeddings. Sources never share a width: nothing is padded or truncated to
//! align scenarios.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorEvent, DatasetSchema, Exposure, Sequence, UserSample};
use crate::engine::{fan_in_uniform, Graph, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::{ScenarioId, Timestamp};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TokenKind {
    H,
    R,
    T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMeta {
    pub kind: TokenKind,
    /// Source sequence id for H/R tokens, scenario id for T tokens.
    pub group_id: u32,
    pub timestamp: Timestamp,
    /// Index into `UserSample::exposures`, present exactly for T tokens.
    pub exposure_ref: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Boundaries {
    pub l_h: usize,
    pub l_r: usize,
    pub l_t: usize,
}

impl Boundaries {
    pub fn total(&self) -> usize {
        self.l_h + self.l_r + self.l_t
    }

    /// First T row.
    pub fn t_start(&self) -> usize {
        self.l_h + self.l_r
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenLayout {
    pub metas: Vec<TokenMeta>,
    pub boundaries: Boundaries,
}

impl TokenLayout {
    pub fn t_metas(&self) -> &[TokenMeta] {
        &self.metas[self.boundaries.t_start()..]
    }

    /// Checks block order, per-block time order and the T/exposure_ref pairing.
    pub fn validate(&self) -> Result<()> {
        let b = &self.boundaries;
        if b.total() != self.metas.len() {
            return Err(Error::Dimension("boundaries do not cover the tokens".into()));
        }
        let blocks = [
            (TokenKind::H, 0, b.l_h),
            (TokenKind::R, b.l_h, b.t_start()),
            (TokenKind::T, b.t_start(), b.total()),
        ];
        for (kind, lo, hi) in blocks {
            let block = &self.metas[lo..hi];
            if block.iter().any(|m| m.kind != kind || m.exposure_ref.is_some() != (kind == TokenKind::T)) {
                return Err(Error::Integrity(format!("{kind:?} block holds a foreign token")));
            }
            if kind != TokenKind::T && block.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
                return Err(Error::Integrity(format!("{kind:?} block is not time-sorted")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<T> {
    pub metas: Vec<TokenMeta>,
    pub embeddings: Tensor<T>,
    pub boundaries: Boundaries,
}

/// `in -> 2·d_model (SiLU) -> d_model`.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl Mlp {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        owner: Option<ScenarioId>,
        d_in: usize,
        d_model: usize,
    ) -> Result<()> {
        let hidden = 2 * d_model;
        store.register(format!("{prefix}.w1"), owner, fan_in_uniform(rng, d_in, hidden))?;
        store.register(format!("{prefix}.b1"), owner, Tensor::zeros(1, hidden))?;
        store.register(format!("{prefix}.w2"), owner, fan_in_uniform(rng, hidden, d_model))?;
        store.register(format!("{prefix}.b2"), owner, Tensor::zeros(1, d_model))?;
        Ok(())
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            w1: store.id(&format!("{prefix}.w1"))?,
            b1: store.id(&format!("{prefix}.b1"))?,
            w2: store.id(&format!("{prefix}.w2"))?,
            b2: store.id(&format!("{prefix}.b2"))?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w1, b1, w2, b2) = (g.param(self.w1), g.param(self.b1), g.param(self.w2), g.param(self.b2));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.silu(h);
        let o = g.matmul(h, w2)?;
        g.add_row(o, b2)
    }
}

#[derive(Clone, Debug)]
pub struct SourceTokenizer {
    pub tables: Vec<ParamId>,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct ScenarioTokenizer {
    pub user: Vec<ParamId>,
    pub cross: Vec<ParamId>,
    pub item: Vec<ParamId>,
    pub mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TokenizerWeights {
    pub d_model: usize,
    pub historical: BTreeMap<u32, SourceTokenizer>,
    pub realtime: BTreeMap<u32, SourceTokenizer>,
    pub scenarios: BTreeMap<ScenarioId, ScenarioTokenizer>,
}

fn embedding<T: Real, R: Rng>(rng: &mut R, vocab: usize, d_emb: usize) -> Tensor<T> {
    let data = (0..vocab * d_emb).map(|_| T::of(rng.gen_range(-1.0..=1.0))).collect();
    Tensor::from_vec(vocab, d_emb, data).expect("sized by construction")
}

fn source_prefix(kind: TokenKind, seq_id: u32) -> String {
    match kind {
        TokenKind::H => format!("tok.hist{seq_id}"),
        TokenKind::R => format!("tok.rt{seq_id}"),
        TokenKind::T => unreachable!("T tokens have scenario tokenizers"),
    }
}

impl TokenizerWeights {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        schema: &DatasetSchema,
        d_emb: usize,
        d_model: usize,
    ) -> Result<()> {
        for (kind, seqs) in [(TokenKind::H, &schema.historical), (TokenKind::R, &schema.realtime)] {
            for q in seqs {
                let prefix = source_prefix(kind, q.seq_id);
                for (slot, &v) in q.feature_vocabs.iter().enumerate() {
                    store.register(format!("{prefix}.emb{slot}"), None, embedding(rng, v, d_emb))?;
                }
                Mlp::register(store, rng, &format!("{prefix}.mlp"), None, q.feature_vocabs.len() * d_emb, d_model)?;
            }
        }
        for s in &schema.scenarios {
            let owner = Some(s.scenario_id);
            let prefix = format!("tok.scn{}", s.scenario_id);
            for (part, vocabs) in [
                ("user", &s.user_feature_vocabs),
                ("cross", &s.cross_feature_vocabs),
                ("item", &s.item_feature_vocabs),
            ] {
                for (slot, &v) in vocabs.iter().enumerate() {
                    store.register(format!("{prefix}.{part}{slot}"), owner, embedding(rng, v, d_emb))?;
                }
            }
            Mlp::register(store, rng, &format!("{prefix}.mlp"), owner, s.slot_count() * d_emb, d_model)?;
        }
        Ok(())
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, schema: &DatasetSchema, d_model: usize) -> Result<Self> {
        let bind_source = |kind, q: &crate::data::SequenceSchema| -> Result<SourceTokenizer> {
            let prefix = source_prefix(kind, q.seq_id);
            Ok(SourceTokenizer {
                tables: (0..q.feature_vocabs.len())
                    .map(|slot| store.id(&format!("{prefix}.emb{slot}")))
                    .collect::<Result<_>>()?,
                mlp: Mlp::bind(store, &format!("{prefix}.mlp"))?,
            })
        };
        let mut historical = BTreeMap::new();
        for q in &schema.historical {
            historical.insert(q.seq_id, bind_source(TokenKind::H, q)?);
        }
        let mut realtime = BTreeMap::new();
        for q in &schema.realtime {
            realtime.insert(q.seq_id, bind_source(TokenKind::R, q)?);
        }
        let mut scenarios = BTreeMap::new();
        for s in &schema.scenarios {
            let prefix = format!("tok.scn{}", s.scenario_id);
            let ids = |part: &str, n: usize| -> Result<Vec<ParamId>> {
                (0..n).map(|slot| store.id(&format!("{prefix}.{part}{slot}"))).collect()
            };
            scenarios.insert(
                s.scenario_id,
                ScenarioTokenizer {
                    user: ids("user", s.user_feature_vocabs.len())?,
                    cross: ids("cross", s.cross_feature_vocabs.len())?,
                    item: ids("item", s.item_feature_vocabs.len())?,
                    mlp: Mlp::bind(store, &format!("{prefix}.mlp"))?,
                },
            );
        }
        Ok(Self { d_model, historical, realtime, scenarios })
    }
}

/// Embeds each slot of `rows` through its table and concatenates the slot
/// embeddings column-wise.
fn embed_slots<T: Real>(g: &mut Graph<'_, T>, tables: &[ParamId], rows: &[&[u32]]) -> Result<Vec<Var>> {
    tables
        .iter()
        .enumerate()
        .map(|(slot, &table)| {
            let ids: Vec<usize> = rows.iter().map(|r| r[slot] as usize).collect();
            g.gather(table, &ids)
        })
        .collect()
}

/// One token per event of a single H or R sequence, in event order.
pub fn tokenize_sequence<T: Real>(
    g: &mut Graph<'_, T>,
    w: &TokenizerWeights,
    kind: TokenKind,
    seq_id: u32,
    events: &[BehaviorEvent],
) -> Result<(Vec<TokenMeta>, Var)> {
    let source = match kind {
        TokenKind::H => w.historical.get(&seq_id),
        TokenKind::R => w.realtime.get(&seq_id),
        TokenKind::T => None,
    }
    .ok_or_else(|| Error::Integrity(format!("no {kind:?} tokenizer for sequence {seq_id}")))?;
    if let Some(e) = events.iter().find(|e| e.item_features.len() != source.tables.len()) {
        return Err(Error::Integrity(format!(
            "event has {} features, sequence {seq_id} declares {}",
            e.item_features.len(),
            source.tables.len()
        )));
    }
    let rows: Vec<&[u32]> = events.iter().map(|e| e.item_features.as_slice()).collect();
    let slots = embed_slots(g, &source.tables, &rows)?;
    let x = g.concat_cols(&slots)?;
    let out = source.mlp.forward(g, x)?;
    let metas = events
        .iter()
        .map(|e| TokenMeta { kind, group_id: seq_id, timestamp: e.timestamp, exposure_ref: None })
        .collect();
    Ok((metas, out))
}

pub fn tokenize_h<T: Real>(
    g: &mut Graph<'_, T>,
    w: &TokenizerWeights,
    seq_id: u32,
    events: &[BehaviorEvent],
) -> Result<(Vec<TokenMeta>, Var)> {
    tokenize_sequence(g, w, TokenKind::H, seq_id, events)
}

/// T-tokens for exposures of one scenario: `MLP_s(Emb(U) ‖ Emb(C) ‖ Emb(I))`.
/// `refs[k]` becomes the `exposure_ref` of the k-th token.
pub fn tokenize_t_batch<T: Real>(
    g: &mut Graph<'_, T>,
    w: &TokenizerWeights,
    scenario: ScenarioId,
    exposures: &[&Exposure],
    refs: &[usize],
) -> Result<(Vec<TokenMeta>, Var)> {
    let tok = w
        .scenarios
        .get(&scenario)
        .ok_or_else(|| Error::Integrity(format!("no tokenizer for scenario {scenario}")))?;
    for e in exposures {
        if e.scenario_id != scenario
            || e.user_features.len() != tok.user.len()
            || e.cross_features.len() != tok.cross.len()
            || e.item_features.len() != tok.item.len()
        {
            return Err(Error::Integrity(format!("exposure does not match the schema of scenario {scenario}")));
        }
    }
    let user: Vec<&[u32]> = exposures.iter().map(|e| e.user_features.as_slice()).collect();
    let cross: Vec<&[u32]> = exposures.iter().map(|e| e.cross_features.as_slice()).collect();
    let item: Vec<&[u32]> = exposures.iter().map(|e| e.item_features.as_slice()).collect();
    let mut parts = embed_slots(g, &tok.user, &user)?;
    parts.extend(embed_slots(g, &tok.cross, &cross)?);
    parts.extend(embed_slots(g, &tok.item, &item)?);
    let x = g.concat_cols(&parts)?;
    let out = tok.mlp.forward(g, x)?;
    let metas = exposures
        .iter()
        .zip(refs)
        .map(|(e, &r)| TokenMeta { kind: TokenKind::T, group_id: scenario, timestamp: e.timestamp, exposure_ref: Some(r) })
        .collect();
    Ok((metas, out))
}

pub fn tokenize_t<T: Real>(
    g: &mut Graph<'_, T>,
    w: &TokenizerWeights,
    exposure: &Exposure,
) -> Result<(TokenMeta, Var)> {
    let (metas, v) = tokenize_t_batch(g, w, exposure.scenario_id, &[exposure], &[0])?;
    Ok((metas[0], v))
}

/// Canonical T order: `(timestamp, scenario, feature content, input index)`.
pub fn canonical_exposure_order(exposures: &[Exposure]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..exposures.len()).collect();
    order.sort_by(|&a, &b| {
        let (ea, eb) = (&exposures[a], &exposures[b]);
        (ea.timestamp, ea.scenario_id, ea.content_key(), a).cmp(&(eb.timestamp, eb.scenario_id, eb.content_key(), b))
    });
    order
}

/// Merges the tokens of several sequences chronologically (ties by sequence
/// order, then position).
fn merge_sequences<T: Real>(
    g: &mut Graph<'_, T>,
    w: &TokenizerWeights,
    kind: TokenKind,
    seqs: &[Sequence],
) -> Result<(Vec<TokenMeta>, Var)> {
    let mut metas = Vec::new();
    let mut parts = Vec::new();
    let mut keys = Vec::new();
    for (qi, q) in seqs.iter().enumerate() {
        let (m, v) = tokenize_sequence(g, w, kind, q.seq_id, &q.events)?;
        for (pos, meta) in m.iter().enumerate() {
            keys.push((meta.timestamp, qi, pos, metas.len() + pos));
        }
        metas.extend(m);
        parts.push(v);
    }
    let stacked = g.concat_rows(&parts, w.d_model)?;
    keys.sort_unstable();
    let order: Vec<usize> = keys.iter().map(|k| k.3).collect();
    let merged = g.select_rows(stacked, &order)?;
    Ok((order.iter().map(|&i| metas[i]).collect(), merged))
}

/// `X0 = (H; R; T)` for one record.
pub fn assemble<T: Real>(g: &mut Graph<'_, T>, w: &TokenizerWeights, sample: &UserSample) -> Result<(TokenLayout, Var)> {
    let (h_metas, h) = merge_sequences(g, w, TokenKind::H, &sample.historical)?;
    let (r_metas, r) = merge_sequences(g, w, TokenKind::R, &sample.realtime)?;

    let order = canonical_exposure_order(&sample.exposures);
    let mut by_scenario: BTreeMap<ScenarioId, Vec<usize>> = BTreeMap::new();
    for &i in &order {
        by_scenario.entry(sample.exposures[i].scenario_id).or_default().push(i);
    }
    let mut t_metas = Vec::with_capacity(order.len());
    let mut parts = Vec::new();
    for (&s, idx) in &by_scenario {
        let exps: Vec<&Exposure> = idx.iter().map(|&i| &sample.exposures[i]).collect();
        let (m, v) = tokenize_t_batch(g, w, s, &exps, idx)?;
        t_metas.extend(m);
        parts.push(v);
    }
    let stacked = g.concat_rows(&parts, w.d_model)?;
    // rows are grouped by scenario; put them back in canonical order
    let position: BTreeMap<usize, usize> =
        t_metas.iter().enumerate().map(|(row, m)| (m.exposure_ref.expect("T token"), row)).collect();
    let t_order: Vec<usize> = order.iter().map(|i| position[i]).collect();
    let t = g.select_rows(stacked, &t_order)?;
    let t_metas: Vec<TokenMeta> = t_order.iter().map(|&row| t_metas[row]).collect();

    let boundaries = Boundaries { l_h: h_metas.len(), l_r: r_metas.len(), l_t: t_metas.len() };
    let x0 = g.concat_rows(&[h, r, t], w.d_model)?;
    let metas = h_metas.into_iter().chain(r_metas).chain(t_metas).collect();
    Ok((TokenLayout { metas, boundaries }, x0))
}

/// Tokenizes a record outside of any training graph.
pub fn tokenize_sample<T: Real>(
    store: &ParamStore<T>,
    w: &TokenizerWeights,
    sample: &UserSample,
) -> Result<TokenSequence<T>> {
    let mut g = Graph::new(store);
    let (layout, x0) = assemble(&mut g, w, sample)?;
    Ok(TokenSequence { metas: layout.metas, embeddings: g.value(x0).clone(), boundaries: layout.boundaries })
}
