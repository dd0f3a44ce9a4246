//! Multi-gate mixture-of-experts head, multitask loss and ranking metrics.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetSchema;
use crate::engine::{fan_in_uniform, Graph, MacKind, ParamId, ParamStore, Real, Tensor, Var};
use crate::error::{Error, Result};
use crate::tokenizer::TokenMeta;
use crate::{ScenarioId, UserId};

/// Probabilities are kept inside `[PROB_EPS, 1 - PROB_EPS]`.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmoeConfig {
    pub experts: usize,
    /// Expert width; `None` uses `d_model`.
    pub d_expert: Option<usize>,
}

impl Default for MmoeConfig {
    fn default() -> Self {
        Self { experts: 4, d_expert: None }
    }
}

impl MmoeConfig {
    pub fn expert_width(&self, d_model: usize) -> usize {
        self.d_expert.unwrap_or(d_model)
    }
}

#[derive(Clone, Debug)]
pub struct TaskHead {
    pub task: String,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub tower_w: ParamId,
    pub tower_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct MmoeWeights {
    /// `(w, b)` of each shared expert, `d_model -> d_expert` followed by SiLU.
    pub experts: Vec<(ParamId, ParamId)>,
    pub d_expert: usize,
    pub heads: BTreeMap<ScenarioId, Vec<TaskHead>>,
}

impl MmoeWeights {
    pub fn register<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        schema: &DatasetSchema,
        d_model: usize,
        cfg: &MmoeConfig,
    ) -> Result<()> {
        if cfg.experts == 0 {
            return Err(Error::Config("MMoE needs at least one expert".into()));
        }
        let de = cfg.expert_width(d_model);
        for e in 0..cfg.experts {
            store.register(format!("mmoe.expert{e}.w"), None, fan_in_uniform(rng, d_model, de))?;
            store.register(format!("mmoe.expert{e}.b"), None, Tensor::zeros(1, de))?;
        }
        for s in &schema.scenarios {
            let owner = Some(s.scenario_id);
            for task in &s.tasks {
                let p = format!("mmoe.scn{}.{task}", s.scenario_id);
                store.register(format!("{p}.gate.w"), owner, fan_in_uniform(rng, d_model, cfg.experts))?;
                store.register(format!("{p}.gate.b"), owner, Tensor::zeros(1, cfg.experts))?;
                store.register(format!("{p}.tower.w"), owner, fan_in_uniform(rng, de, 1))?;
                store.register(format!("{p}.tower.b"), owner, Tensor::zeros(1, 1))?;
            }
        }
        Ok(())
    }

    pub fn bind<T: Real>(store: &ParamStore<T>, schema: &DatasetSchema, cfg: &MmoeConfig) -> Result<Self> {
        let experts = (0..cfg.experts)
            .map(|e| Ok((store.id(&format!("mmoe.expert{e}.w"))?, store.id(&format!("mmoe.expert{e}.b"))?)))
            .collect::<Result<Vec<_>>>()?;
        let d_expert = experts.first().map_or(0, |&(w, _)| store.value(w).cols());
        let mut heads = BTreeMap::new();
        for s in &schema.scenarios {
            let tasks = s
                .tasks
                .iter()
                .map(|task| {
                    let p = format!("mmoe.scn{}.{task}", s.scenario_id);
                    Ok(TaskHead {
                        task: task.clone(),
                        gate_w: store.id(&format!("{p}.gate.w"))?,
                        gate_b: store.id(&format!("{p}.gate.b"))?,
                        tower_w: store.id(&format!("{p}.tower.w"))?,
                        tower_b: store.id(&format!("{p}.tower.b"))?,
                    })
                })
                .collect::<Result<_>>()?;
            heads.insert(s.scenario_id, tasks);
        }
        Ok(Self { experts, d_expert, heads })
    }
}

/// Logits of one `(scenario, task)` pair for the T rows of that scenario.
pub struct HeadOutput {
    pub scenario_id: ScenarioId,
    pub task: String,
    /// Row indices into the T block.
    pub rows: Vec<usize>,
    /// `rows.len() x 1`.
    pub logits: Var,
    /// `rows.len() x E` softmax gate.
    pub gate: Var,
}

fn linear<T: Real>(g: &mut Graph<'_, T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
    let (w, b) = (g.param(w), g.param(b));
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

/// `Σ_e gate_e · expert_e(x)` followed by the tower, per `(scenario, task)`.
pub fn mmoe_forward<T: Real>(
    g: &mut Graph<'_, T>,
    t: Var,
    t_metas: &[TokenMeta],
    w: &MmoeWeights,
) -> Result<Vec<HeadOutput>> {
    if g.shape(t)[0] != t_metas.len() {
        return Err(Error::Dimension("MMoE input rows do not match T metadata".into()));
    }
    let mut by_scenario: BTreeMap<ScenarioId, Vec<usize>> = BTreeMap::new();
    for (row, m) in t_metas.iter().enumerate() {
        by_scenario.entry(m.group_id).or_default().push(row);
    }
    let prev = g.set_tag(MacKind::Other);
    let e = w.experts.len();
    let de = w.d_expert;
    // expand[e, e*de + j] = 1 spreads gate column e over expert block e;
    // collapse sums the blocks back to width de.
    let mut expand = Tensor::zeros(e, e * de);
    let mut collapse = Tensor::zeros(e * de, de);
    for k in 0..e {
        for j in 0..de {
            expand.set(k, k * de + j, T::one());
            collapse.set(k * de + j, j, T::one());
        }
    }
    let expand = g.input(expand);
    let collapse = g.input(collapse);
    let mut out = Vec::new();
    for (s, rows) in by_scenario {
        let tasks = w.heads.get(&s).ok_or_else(|| Error::Config(format!("no MMoE heads for scenario {s}")))?;
        let x = g.select_rows(t, &rows)?;
        let mut experts = Vec::with_capacity(e);
        for &(ew, eb) in &w.experts {
            let h = linear(g, x, ew, eb)?;
            experts.push(g.silu(h));
        }
        let stacked = g.concat_cols(&experts)?;
        for head in tasks {
            let z = linear(g, x, head.gate_w, head.gate_b)?;
            let gate = g.softmax_rows(z);
            let spread = g.matmul(gate, expand)?;
            let weighted = g.mul(stacked, spread)?;
            let mixture = g.matmul(weighted, collapse)?;
            let logits = linear(g, mixture, head.tower_w, head.tower_b)?;
            out.push(HeadOutput { scenario_id: s, task: head.task.clone(), rows: rows.clone(), logits, gate });
        }
    }
    g.set_tag(prev);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub user_id: UserId,
    pub scenario_id: ScenarioId,
    /// Index into the exposures (or candidates) of the input record.
    pub exposure: usize,
    pub task: String,
    pub logit: f64,
    pub probability: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<u8>,
}

pub fn sigmoid(z: f64) -> f64 {
    let p = if z >= 0.0 { 1.0 / (1.0 + (-z).exp()) } else { z.exp() / (1.0 + z.exp()) };
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross-entropy over labeled records, optionally task-weighted.
pub fn multitask_loss(records: &[PredictionRecord], task_weights: Option<&BTreeMap<String, f64>>) -> Result<f64> {
    let mut total = 0.0;
    let mut weight = 0.0;
    for r in records {
        let y = r.label.ok_or_else(|| Error::Contract(format!("record for task {} has no label", r.task)))?;
        if y > 1 {
            return Err(Error::Integrity(format!("label {y} is not binary")));
        }
        let w = task_weights.and_then(|m| m.get(&r.task).copied()).unwrap_or(1.0);
        let p = r.probability.clamp(PROB_EPS, 1.0 - PROB_EPS);
        let nll = if y == 1 { -p.ln() } else { -(1.0 - p).ln() };
        total += w * nll;
        weight += w;
    }
    if records.is_empty() || weight <= 0.0 {
        return Err(Error::NotComputable("loss over an empty record set".into()));
    }
    Ok(total / weight)
}

/// Area under the ROC curve via the rank statistic with midranks for ties.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Dimension(format!("{} scores, {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::NotComputable(format!("AUC needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Exposure-count weighted mean of per-user AUC over users with both classes.
pub fn gauc(users: &[UserId], scores: &[f64], labels: &[u8]) -> Result<f64> {
    if users.len() != scores.len() || scores.len() != labels.len() {
        return Err(Error::Dimension("gauc inputs differ in length".into()));
    }
    let mut groups: BTreeMap<UserId, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for ((&u, &s), &y) in users.iter().zip(scores).zip(labels) {
        let e = groups.entry(u).or_default();
        e.0.push(s);
        e.1.push(y);
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (s, y) in groups.values() {
        if let Ok(a) = auc(s, y) {
            num += s.len() as f64 * a;
            den += s.len() as f64;
        }
    }
    if den == 0.0 {
        return Err(Error::NotComputable("no user has both classes".into()));
    }
    Ok(num / den)
}

fn record_columns(records: &[PredictionRecord]) -> Result<(Vec<UserId>, Vec<f64>, Vec<u8>)> {
    let labels = records
        .iter()
        .map(|r| r.label.ok_or_else(|| Error::Contract("metric over unlabeled records".into())))
        .collect::<Result<_>>()?;
    Ok((records.iter().map(|r| r.user_id).collect(), records.iter().map(|r| r.logit).collect(), labels))
}

pub fn auc_of(records: &[PredictionRecord]) -> Result<f64> {
    let (_, s, y) = record_columns(records)?;
    auc(&s, &y)
}

pub fn gauc_of(records: &[PredictionRecord]) -> Result<f64> {
    let (u, s, y) = record_columns(records)?;
    gauc(&u, &s, &y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub scenario: String,
    pub task: String,
    pub exposures: usize,
    pub positives: usize,
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
}

/// Per-scenario, per-task metrics plus the overall loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub loss: Option<f64>,
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn from_records(schema: &DatasetSchema, records: &[PredictionRecord]) -> Self {
        let mut groups: BTreeMap<(ScenarioId, &str), Vec<PredictionRecord>> = BTreeMap::new();
        for r in records.iter().filter(|r| r.label.is_some()) {
            groups.entry((r.scenario_id, r.task.as_str())).or_default().push(r.clone());
        }
        let mut rows = Vec::new();
        for s in &schema.scenarios {
            for task in &s.tasks {
                let recs = groups.remove(&(s.scenario_id, task.as_str())).unwrap_or_default();
                rows.push(MetricRow {
                    scenario: s.name.clone(),
                    task: task.clone(),
                    exposures: recs.len(),
                    positives: recs.iter().filter(|r| r.label == Some(1)).count(),
                    auc: auc_of(&recs).ok(),
                    gauc: gauc_of(&recs).ok(),
                });
            }
        }
        Self { loss: multitask_loss(records, None).ok(), rows }
    }

    pub fn metric(&self, scenario: &str, task: &str) -> Option<&MetricRow> {
        self.rows.iter().find(|r| r.scenario == scenario && r.task == task)
    }

    /// AUC of one task pooled over every scenario that has it.
    pub fn pooled_auc(records: &[PredictionRecord], task: &str) -> Result<f64> {
        let recs: Vec<PredictionRecord> = records.iter().filter(|r| r.task == task).cloned().collect();
        auc_of(&recs)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
        writeln!(f, "{:<10} {:<8} {:>9} {:>9} {:>8} {:>8}", "scenario", "task", "exposures", "positives", "auc", "gauc")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<10} {:<8} {:>9} {:>9} {:>8} {:>8}",
                r.scenario,
                r.task,
                r.exposures,
                r.positives,
                show(r.auc),
                show(r.gauc)
            )?;
        }
        write!(f, "loss {}", show(self.loss))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(user: UserId, logit: f64, label: u8) -> PredictionRecord {
        PredictionRecord {
            user_id: user,
            scenario_id: 0,
            exposure: 0,
            task: "ctr".into(),
            logit,
            probability: sigmoid(logit),
            label: Some(label),
        }
    }

    #[test]
    fn half_probability_gives_ln2() {
        let recs = [rec(1, 0.0, 1), rec(1, 0.0, 0), rec(2, 0.0, 0)];
        assert!((multitask_loss(&recs, None).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(multitask_loss(&[], None).is_err());
    }

    #[test]
    fn exact_predictions_approach_zero_loss() {
        let recs = [rec(1, 60.0, 1), rec(1, -60.0, 0)];
        assert!(multitask_loss(&recs, None).unwrap() < 1e-11);
    }

    #[test]
    fn auc_basics() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::NotComputable(_))));
        // pairs: (0.3 vs 0.1) win, (0.3 vs 0.3) tie, (0.7 vs both) win -> 3.5 / 4
        assert_eq!(auc(&[0.1, 0.3, 0.3, 0.7], &[0, 0, 1, 1]).unwrap(), 0.875);
    }

    #[test]
    fn gauc_weights_by_exposures_and_skips_single_class_users() {
        let users = [1, 1, 1, 2, 2, 3];
        let scores = [0.9, 0.1, 0.5, 0.2, 0.8, 0.4];
        let labels = [1, 0, 0, 1, 0, 1];
        // user 1: auc 1.0 over 3 exposures; user 2: auc 0.0 over 2; user 3 skipped
        assert!((gauc(&users, &scores, &labels).unwrap() - 0.6).abs() < 1e-15);
        assert!(gauc(&[1, 2], &[0.1, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval() {
        for z in [-800.0, -40.0, 0.0, 40.0, 800.0] {
            let p = sigmoid(z);
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
