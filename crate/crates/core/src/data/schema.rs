//! Feature schemas and the aggregated per-user record types.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{ScenarioId, Timestamp, UserId};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSchema {
    pub scenario_id: ScenarioId,
    pub name: String,
    pub user_feature_vocabs: Vec<usize>,
    pub cross_feature_vocabs: Vec<usize>,
    pub item_feature_vocabs: Vec<usize>,
    pub tasks: Vec<String>,
}

impl ScenarioSchema {
    pub fn has_funnel(&self) -> bool {
        self.task_index("ctr").is_some() && self.task_index("ctcvr").is_some()
    }

    pub fn task_index(&self, task: &str) -> Option<usize> {
        self.tasks.iter().position(|t| t == task)
    }

    pub fn slot_count(&self) -> usize {
        self.user_feature_vocabs.len() + self.cross_feature_vocabs.len() + self.item_feature_vocabs.len()
    }
}

/// Feature layout of one behavior sequence (historical or realtime).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSchema {
    pub seq_id: u32,
    pub name: String,
    pub feature_vocabs: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    pub scenarios: Vec<ScenarioSchema>,
    pub historical: Vec<SequenceSchema>,
    pub realtime: Vec<SequenceSchema>,
}

fn check_vocabs(what: &str, vocabs: &[usize]) -> Result<()> {
    if let Some(v) = vocabs.iter().find(|&&v| v < 2) {
        return Err(Error::Config(format!("{what}: vocabulary size {v} < 2")));
    }
    Ok(())
}

impl DatasetSchema {
    pub fn validate(&self) -> Result<()> {
        if self.scenarios.is_empty() {
            return Err(Error::Config("dataset declares no scenarios".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &self.scenarios {
            if !seen.insert(s.scenario_id) {
                return Err(Error::Config(format!("duplicate scenario id {}", s.scenario_id)));
            }
            if s.tasks.is_empty() {
                return Err(Error::Config(format!("scenario {} has no tasks", s.name)));
            }
            if s.tasks.iter().collect::<BTreeSet<_>>().len() != s.tasks.len() {
                return Err(Error::Config(format!("scenario {} repeats a task", s.name)));
            }
            if s.slot_count() == 0 {
                return Err(Error::Config(format!("scenario {} has no feature slots", s.name)));
            }
            check_vocabs(&s.name, &s.user_feature_vocabs)?;
            check_vocabs(&s.name, &s.cross_feature_vocabs)?;
            check_vocabs(&s.name, &s.item_feature_vocabs)?;
        }
        for (kind, seqs) in [("historical", &self.historical), ("realtime", &self.realtime)] {
            let mut ids = BTreeSet::new();
            for q in seqs {
                if !ids.insert(q.seq_id) {
                    return Err(Error::Config(format!("duplicate {kind} sequence id {}", q.seq_id)));
                }
                if q.feature_vocabs.is_empty() {
                    return Err(Error::Config(format!("{kind} sequence {} has no features", q.name)));
                }
                check_vocabs(&q.name, &q.feature_vocabs)?;
            }
        }
        Ok(())
    }

    pub fn scenario(&self, id: ScenarioId) -> Option<&ScenarioSchema> {
        self.scenarios.iter().find(|s| s.scenario_id == id)
    }

    pub fn historical_seq(&self, id: u32) -> Option<&SequenceSchema> {
        self.historical.iter().find(|s| s.seq_id == id)
    }

    pub fn realtime_seq(&self, id: u32) -> Option<&SequenceSchema> {
        self.realtime.iter().find(|s| s.seq_id == id)
    }

    /// The same schema restricted to one scenario.
    pub fn restrict_to(&self, id: ScenarioId) -> Result<Self> {
        let s = self
            .scenario(id)
            .ok_or_else(|| Error::Config(format!("unknown scenario {id}")))?;
        Ok(Self { scenarios: vec![s.clone()], ..self.clone() })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BehaviorEvent {
    #[serde(rename = "f")]
    pub item_features: Vec<u32>,
    #[serde(rename = "t")]
    pub timestamp: Timestamp,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sequence {
    pub seq_id: u32,
    pub events: Vec<BehaviorEvent>,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Exposure {
    #[serde(rename = "s")]
    pub scenario_id: ScenarioId,
    #[serde(rename = "u")]
    pub user_features: Vec<u32>,
    #[serde(rename = "c")]
    pub cross_features: Vec<u32>,
    #[serde(rename = "i")]
    pub item_features: Vec<u32>,
    #[serde(rename = "t")]
    pub timestamp: Timestamp,
    #[serde(rename = "y", default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, u8>,
}

impl Exposure {
    /// Feature content used to order exposures that share timestamp and scenario.
    pub fn content_key(&self) -> (&[u32], &[u32], &[u32]) {
        (&self.item_features, &self.cross_features, &self.user_features)
    }

    pub fn validate_features<'s>(&self, schema: &'s DatasetSchema) -> Result<&'s ScenarioSchema> {
        let s = schema.scenario(self.scenario_id).ok_or_else(|| {
            Error::Integrity(format!("exposure references unknown scenario {}", self.scenario_id))
        })?;
        for (what, ids, vocabs) in [
            ("user", &self.user_features, &s.user_feature_vocabs),
            ("cross", &self.cross_features, &s.cross_feature_vocabs),
            ("item", &self.item_features, &s.item_feature_vocabs),
        ] {
            if ids.len() != vocabs.len() {
                return Err(Error::Integrity(format!(
                    "{} exposure carries {} {what} features, schema declares {}",
                    s.name,
                    ids.len(),
                    vocabs.len()
                )));
            }
            if let Some((id, v)) = ids.iter().zip(vocabs.iter()).find(|(&id, &v)| id as usize >= v) {
                return Err(Error::Lookup(format!("{what} feature id {id} >= vocabulary {v}")));
            }
        }
        Ok(s)
    }

    /// Label completeness and the funnel constraint `ctcvr = 1 => ctr = 1`.
    pub fn validate_labels(&self, s: &ScenarioSchema) -> Result<()> {
        for t in &s.tasks {
            match self.labels.get(t) {
                Some(0 | 1) => {}
                Some(v) => return Err(Error::Integrity(format!("label {t}={v} is not binary"))),
                None => return Err(Error::Integrity(format!("missing label `{t}`"))),
            }
        }
        if self.labels.len() != s.tasks.len() {
            return Err(Error::Integrity(format!("labels for tasks outside {}", s.name)));
        }
        if s.has_funnel() && self.labels["ctcvr"] > self.labels["ctr"] {
            return Err(Error::Integrity("ctcvr=1 without ctr=1".into()));
        }
        Ok(())
    }
}

/// One aggregated training record: shared behavior sequences plus every
/// exposure of the user inside the aggregation window, across scenarios.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UserSample {
    pub user_id: UserId,
    #[serde(rename = "hist")]
    pub historical: Vec<Sequence>,
    #[serde(rename = "rt")]
    pub realtime: Vec<Sequence>,
    pub exposures: Vec<Exposure>,
}

fn validate_sequence(q: &Sequence, schema: Option<&SequenceSchema>, kind: &str) -> Result<()> {
    let schema =
        schema.ok_or_else(|| Error::Integrity(format!("unknown {kind} sequence id {}", q.seq_id)))?;
    for w in q.events.windows(2) {
        if w[1].timestamp < w[0].timestamp {
            return Err(Error::Integrity(format!("{kind} sequence {} is not time-sorted", q.seq_id)));
        }
    }
    for e in &q.events {
        if e.item_features.len() != schema.feature_vocabs.len() {
            return Err(Error::Integrity(format!("{kind} event feature count for {}", schema.name)));
        }
        if let Some((id, v)) =
            e.item_features.iter().zip(&schema.feature_vocabs).find(|(&id, &v)| id as usize >= v)
        {
            return Err(Error::Lookup(format!("{kind} feature id {id} >= vocabulary {v}")));
        }
    }
    Ok(())
}

impl UserSample {
    /// Structural checks. Labels are only checked when `labeled` is set.
    pub fn validate(&self, schema: &DatasetSchema, labeled: bool) -> Result<()> {
        for q in &self.historical {
            validate_sequence(q, schema.historical_seq(q.seq_id), "historical")?;
        }
        for q in &self.realtime {
            validate_sequence(q, schema.realtime_seq(q.seq_id), "realtime")?;
        }
        for e in &self.exposures {
            let s = e.validate_features(schema)?;
            if labeled {
                e.validate_labels(s)?;
            }
        }
        if let Some(first) = self.exposures.iter().map(|e| e.timestamp).min() {
            let late = self.historical.iter().flat_map(|q| &q.events).find(|e| e.timestamp >= first);
            if let Some(e) = late {
                return Err(Error::Integrity(format!(
                    "user {}: historical event at t={} is not before the first exposure at t={first}",
                    self.user_id, e.timestamp
                )));
            }
        }
        Ok(())
    }

    /// Copy of this sample keeping only exposure `idx`.
    pub fn singleton(&self, idx: usize) -> UserSample {
        UserSample { exposures: vec![self.exposures[idx].clone()], ..self.clone() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub schema: DatasetSchema,
    pub samples: Vec<UserSample>,
}

impl Dataset {
    pub fn exposure_count(&self) -> usize {
        self.samples.iter().map(|s| s.exposures.len()).sum()
    }
}

/// Online request: one scenario, candidates sharing a timestamp, no labels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceRequest {
    pub user_id: UserId,
    pub scenario_id: ScenarioId,
    #[serde(rename = "hist")]
    pub historical: Vec<Sequence>,
    #[serde(rename = "rt")]
    pub realtime: Vec<Sequence>,
    pub candidates: Vec<Exposure>,
}

impl InferenceRequest {
    pub fn validate(&self) -> Result<()> {
        if let Some(c) = self.candidates.iter().find(|c| c.scenario_id != self.scenario_id) {
            return Err(Error::Integrity(format!(
                "request for scenario {} contains a candidate from scenario {}",
                self.scenario_id, c.scenario_id
            )));
        }
        if let Some(first) = self.candidates.first() {
            if self.candidates.iter().any(|c| c.timestamp != first.timestamp) {
                return Err(Error::Integrity("candidates carry different timestamps".into()));
            }
        }
        Ok(())
    }

    /// The request as an unlabeled sample whose exposures are the candidates.
    pub fn as_sample(&self) -> UserSample {
        UserSample {
            user_id: self.user_id,
            historical: self.historical.clone(),
            realtime: self.realtime.clone(),
            exposures: self
                .candidates
                .iter()
                .map(|c| Exposure { labels: BTreeMap::new(), ..c.clone() })
                .collect(),
        }
    }
}
