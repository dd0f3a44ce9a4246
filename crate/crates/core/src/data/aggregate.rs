//! User-level multi-scenario aggregation.
//!
//! Scenario-specific exposures are first grouped per user inside their own
//! scenario, the per-scenario groups are then merged per user, and the result
//! is joined with the scenario-agnostic behavior sequences.

use std::collections::BTreeMap;

use super::schema::{Dataset, DatasetSchema, Exposure, Sequence, UserSample};
use crate::error::{Error, Result};
use crate::{ScenarioId, UserId};

/// Scenario-agnostic sequences keyed by user: `(historical, realtime)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SharedStore {
    pub sequences: BTreeMap<UserId, (Vec<Sequence>, Vec<Sequence>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggregationReport {
    pub raw_records: usize,
    pub aggregated_records: usize,
}

impl AggregationReport {
    pub fn compression_ratio(&self) -> f64 {
        self.raw_records as f64 / self.aggregated_records.max(1) as f64
    }
}

impl std::fmt::Display for AggregationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} exposures -> {} user records: {:.1}x fewer records than unaggregated",
            self.raw_records,
            self.aggregated_records,
            self.compression_ratio()
        )
    }
}

pub fn aggregate_users(
    schema: &DatasetSchema,
    stream: &[(UserId, Exposure)],
    shared: &SharedStore,
) -> Result<(Vec<UserSample>, AggregationReport)> {
    // stage 1: per-scenario grouping
    let mut per_scenario: BTreeMap<ScenarioId, BTreeMap<UserId, Vec<Exposure>>> = BTreeMap::new();
    for (user, e) in stream {
        if schema.scenario(e.scenario_id).is_none() {
            return Err(Error::Integrity(format!(
                "exposure of user {user} references unknown scenario {}",
                e.scenario_id
            )));
        }
        if !shared.sequences.contains_key(user) {
            return Err(Error::Integrity(format!("exposure references unknown user {user}")));
        }
        per_scenario.entry(e.scenario_id).or_default().entry(*user).or_default().push(e.clone());
    }

    // stage 2: merge scenario groups per user, in scenario order
    let mut merged: BTreeMap<UserId, Vec<Exposure>> = BTreeMap::new();
    for groups in per_scenario.into_values() {
        for (user, exps) in groups {
            merged.entry(user).or_default().extend(exps);
        }
    }

    // stage 3: join with the shared sequences
    let samples: Vec<UserSample> = merged
        .into_iter()
        .map(|(user_id, exposures)| {
            let (historical, realtime) = shared.sequences[&user_id].clone();
            UserSample { user_id, historical, realtime, exposures }
        })
        .collect();
    let report = AggregationReport { raw_records: stream.len(), aggregated_records: samples.len() };
    Ok((samples, report))
}

impl Dataset {
    /// Splits aggregated samples back into a time-ordered exposure log and the
    /// per-user shared store.
    pub fn explode(&self) -> (Vec<(UserId, Exposure)>, SharedStore) {
        let mut stream: Vec<(UserId, Exposure)> = self
            .samples
            .iter()
            .flat_map(|s| s.exposures.iter().map(move |e| (s.user_id, e.clone())))
            .collect();
        stream.sort_by_key(|(u, e)| (e.timestamp, *u));
        let sequences = self
            .samples
            .iter()
            .map(|s| (s.user_id, (s.historical.clone(), s.realtime.clone())))
            .collect();
        (stream, SharedStore { sequences })
    }
}
