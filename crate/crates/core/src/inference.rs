//! Scenario subgraphs, request-level scoring and 2:4 structured pruning.

use serde::{Deserialize, Serialize};

use crate::data::InferenceRequest;
use crate::engine::{Real, Tensor};
use crate::error::{Error, Result};
use crate::heads::PredictionRecord;
use crate::model::Model;
use crate::ScenarioId;

/// Shared weights plus the parameters owned by one scenario.
#[derive(Clone, Debug)]
pub struct ScenarioSubgraph<T: Real> {
    pub scenario_id: ScenarioId,
    pub model: Model<T>,
}

impl<T: Real> ScenarioSubgraph<T> {
    pub fn param_count(&self) -> usize {
        self.model.param_count()
    }
}

pub fn extract_subgraph<T: Real>(model: &Model<T>, scenario_id: ScenarioId) -> Result<ScenarioSubgraph<T>> {
    if model.schema.scenario(scenario_id).is_none() {
        return Err(Error::Config(format!("unknown scenario {scenario_id}")));
    }
    Ok(ScenarioSubgraph { scenario_id, model: model.restrict_to(scenario_id)? })
}

/// Scores every candidate of a request in one token sequence.
pub fn infer_request<T: Real>(req: &InferenceRequest, sub: &ScenarioSubgraph<T>) -> Result<Vec<PredictionRecord>> {
    req.validate()?;
    if req.scenario_id != sub.scenario_id {
        return Err(Error::Integrity(format!(
            "request for scenario {} sent to the subgraph of scenario {}",
            req.scenario_id, sub.scenario_id
        )));
    }
    sub.model.predict(&req.as_sample())
}

/// Outcome of pruning one matrix.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneReport {
    /// Complete 4-groups that were pruned.
    pub groups: usize,
    /// Trailing rows outside any complete group (left dense).
    pub exempt_rows: usize,
    pub zeroed: usize,
}

/// Zeroes the two smallest-magnitude entries of every contiguous group of four
/// along the reduction dimension. Weights are stored `d_in x d_out` and
/// applied as `x · W`, so groups run down each column.
pub fn prune_2_4<T: Real>(w: &Tensor<T>) -> (Tensor<T>, PruneReport) {
    let mut out = w.clone();
    let (rows, cols) = (w.rows(), w.cols());
    if w.is_empty() {
        log::warn!("2:4 pruning skipped an empty {rows}x{cols} matrix");
        return (out, PruneReport::default());
    }
    let full = rows / 4;
    let mut report = PruneReport { groups: full * cols, exempt_rows: rows % 4, zeroed: 0 };
    if report.exempt_rows > 0 {
        log::warn!("2:4 pruning: last {} of {rows} rows form a partial group and stay dense", report.exempt_rows);
    }
    for c in 0..cols {
        for gi in 0..full {
            let mut idx = [0usize, 1, 2, 3];
            idx.sort_by(|&a, &b| {
                let (x, y) = (w.get(4 * gi + a, c).abs(), w.get(4 * gi + b, c).abs());
                x.partial_cmp(&y).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            for &k in &idx[..2] {
                out.set(4 * gi + k, c, T::zero());
            }
            report.zeroed += 2;
        }
    }
    (out, report)
}

/// Complete 4-groups whose zero count differs from two.
pub fn count_2_4_violations<T: Real>(w: &Tensor<T>) -> usize {
    let mut bad = 0;
    for c in 0..w.cols() {
        for gi in 0..w.rows() / 4 {
            let zeros = (0..4).filter(|&k| w.get(4 * gi + k, c) == T::zero()).count();
            bad += usize::from(zeros != 2);
        }
    }
    bad
}

/// Names of the projection weights covered by pruning.
pub fn is_prunable(name: &str) -> bool {
    name.starts_with("hta.")
        && [".f1.w", ".f_uq.w", ".f_kv.w", ".f2.w"].iter().any(|s| name.ends_with(s))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PruneSummary {
    pub matrices: Vec<(String, PruneReport)>,
}

impl PruneSummary {
    pub fn zeroed(&self) -> usize {
        self.matrices.iter().map(|(_, r)| r.zeroed).sum()
    }
}

/// Prunes every attention projection (`f1`, `f_uq`, `f_kv`, `f2`) in place.
pub fn prune_model<T: Real>(model: &mut Model<T>) -> PruneSummary {
    let targets: Vec<_> =
        model.store.iter().filter(|(_, p)| is_prunable(&p.name)).map(|(id, p)| (id, p.name.clone())).collect();
    let mut summary = PruneSummary::default();
    for (id, name) in targets {
        let (pruned, report) = prune_2_4(model.store.value(id));
        *model.store.value_mut(id) = pruned;
        summary.matrices.push((name, report));
    }
    summary
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keeps_the_two_largest_magnitudes() {
        let w = Tensor::<f64>::from_f64(4, 1, &[0.9, -0.8, 0.1, 0.05]).unwrap();
        let (p, r) = prune_2_4(&w);
        assert_eq!(p.data(), [0.9, -0.8, 0.0, 0.0]);
        assert_eq!(r, PruneReport { groups: 1, exempt_rows: 0, zeroed: 2 });
    }

    #[test]
    fn partial_group_is_exempt_and_empty_is_noop() {
        let w = Tensor::<f64>::from_f64(6, 1, &[1.0, 2.0, 3.0, 4.0, 0.5, 0.25]).unwrap();
        let (p, r) = prune_2_4(&w);
        assert_eq!(p.data(), [0.0, 0.0, 3.0, 4.0, 0.5, 0.25]);
        assert_eq!((r.groups, r.exempt_rows), (1, 2));
        assert_eq!(count_2_4_violations(&p), 0);
        let (e, r) = prune_2_4(&Tensor::<f64>::zeros(0, 3));
        assert!(e.is_empty() && r == PruneReport::default());
    }

    #[test]
    fn groups_run_down_columns() {
        let w = Tensor::<f64>::from_f64(4, 2, &[1.0, 4.0, 2.0, 3.0, 3.0, 2.0, 4.0, 1.0]).unwrap();
        let (p, _) = prune_2_4(&w);
        assert_eq!(p.data(), [0.0, 4.0, 0.0, 3.0, 3.0, 0.0, 4.0, 0.0]);
    }

    #[test]
    fn projection_names() {
        assert!(is_prunable("hta.3.f_kv.w") && is_prunable("hta.0.f1.w"));
        assert!(!is_prunable("hta.0.f1.b") && !is_prunable("tok.scn0.mlp.w1"));
    }
}
