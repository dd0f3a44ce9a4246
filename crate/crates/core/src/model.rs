//! The assembled model: tokenizers, HTA stack and MMoE head over one
//! parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, UserSample};
use crate::engine::{Gradients, Graph, ParamStore, Real, Var};
use crate::error::{Error, Result};
use crate::heads::{mmoe_forward, sigmoid, HeadOutput, MmoeConfig, MmoeWeights, PredictionRecord};
use crate::hta::{forward_stack, schema_groups, HtaConfig, StackOutput, StackWeights};
use crate::mask::build_mask;
use crate::tokenizer::{assemble, TokenLayout, TokenizerWeights};
use crate::ScenarioId;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hta: HtaConfig,
    /// Width of every feature-slot embedding.
    pub d_emb: usize,
    pub mmoe: MmoeConfig,
    /// Initialize every layer's output projection to zero so the stack starts
    /// as the identity on its residual path.
    pub zero_init_output: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { hta: HtaConfig::default(), d_emb: 16, mmoe: MmoeConfig::default(), zero_init_output: false }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.hta.validate()?;
        if self.d_emb == 0 {
            return Err(Error::Config("d_emb must be positive".into()));
        }
        if self.mmoe.experts == 0 || self.mmoe.d_expert == Some(0) {
            return Err(Error::Config("MMoE needs at least one expert of positive width".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Bindings {
    tok: TokenizerWeights,
    stack: StackWeights,
    mmoe: MmoeWeights,
}

#[derive(Clone, Debug)]
pub struct Model<T: Real> {
    pub cfg: ModelConfig,
    pub schema: DatasetSchema,
    pub store: ParamStore<T>,
    bind: Bindings,
}

/// Graph handles produced by one forward pass.
pub struct Forward {
    pub layout: TokenLayout,
    pub x0: Var,
    pub stack: StackOutput,
    /// Final T rows, `L_T x d_model`.
    pub t_out: Var,
    pub heads: Vec<HeadOutput>,
}

impl<T: Real> Model<T> {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn init(cfg: ModelConfig, schema: DatasetSchema, seed: u64) -> Result<Self> {
        cfg.validate()?;
        schema.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.hta.d_model;
        TokenizerWeights::register(&mut store, &mut rng, &schema, cfg.d_emb, d)?;
        StackWeights::register(&mut store, &mut rng, &schema_groups(&schema), &cfg.hta, cfg.zero_init_output)?;
        MmoeWeights::register(&mut store, &mut rng, &schema, d, &cfg.mmoe)?;
        Self::from_store(cfg, schema, store)
    }

    /// Binds an existing store; fails if any expected parameter is missing.
    pub fn from_store(cfg: ModelConfig, schema: DatasetSchema, store: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hta.d_model;
        let bind = Bindings {
            tok: TokenizerWeights::bind(&store, &schema, d)?,
            stack: StackWeights::bind(&store, &schema_groups(&schema), &cfg.hta)?,
            mmoe: MmoeWeights::bind(&store, &schema, &cfg.mmoe)?,
        };
        Ok(Self { cfg, schema, store, bind })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Shared parameters plus those owned by `scenario`, values shared with `self`.
    pub fn restrict_to(&self, scenario: ScenarioId) -> Result<Self> {
        let schema = self.schema.restrict_to(scenario)?;
        Self::from_store(self.cfg.clone(), schema, self.store.restrict_to(scenario))
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model::from_store(self.cfg.clone(), self.schema.clone(), self.store.cast())
            .expect("casting keeps every parameter name")
    }

    /// Replaces the parameter store (e.g. after training or pruning elsewhere).
    pub fn with_store(self, store: ParamStore<T>) -> Result<Self> {
        Self::from_store(self.cfg, self.schema, store)
    }

    pub fn forward<'s>(&'s self, g: &mut Graph<'s, T>, sample: &UserSample) -> Result<Forward> {
        let (layout, x0) = assemble(g, &self.bind.tok, sample)?;
        let mask = build_mask(&layout.metas);
        let stack = forward_stack(g, x0, &layout, &mask, &self.cfg.hta, &self.bind.stack)?;
        let b = layout.boundaries;
        let t_out = g.slice_rows(stack.out, b.t_start(), b.l_t)?;
        let heads = mmoe_forward(g, t_out, layout.t_metas(), &self.bind.mmoe)?;
        Ok(Forward { layout, x0, stack, t_out, heads })
    }

    /// Records ordered by exposure index, then by task order of the scenario.
    pub fn records(&self, g: &Graph<'_, T>, fwd: &Forward, sample: &UserSample) -> Vec<PredictionRecord> {
        let t_metas = fwd.layout.t_metas();
        let mut out = Vec::new();
        for head in &fwd.heads {
            let logits = g.value(head.logits);
            for (k, &row) in head.rows.iter().enumerate() {
                let exposure = t_metas[row].exposure_ref.expect("T token");
                let logit = logits.get(k, 0).as_f64();
                out.push(PredictionRecord {
                    user_id: sample.user_id,
                    scenario_id: head.scenario_id,
                    exposure,
                    task: head.task.clone(),
                    logit,
                    probability: sigmoid(logit),
                    label: sample.exposures[exposure].labels.get(&head.task).copied(),
                });
            }
        }
        let task_pos = |r: &PredictionRecord| {
            self.schema.scenario(r.scenario_id).and_then(|s| s.task_index(&r.task)).unwrap_or(usize::MAX)
        };
        out.sort_by_key(|r| (r.exposure, task_pos(r)));
        out
    }

    pub fn predict(&self, sample: &UserSample) -> Result<Vec<PredictionRecord>> {
        let mut g = Graph::new(&self.store);
        let fwd = self.forward(&mut g, sample)?;
        Ok(self.records(&g, &fwd, sample))
    }

    /// Labeled `(exposure, task)` pairs in a sample.
    pub fn pair_count(&self, sample: &UserSample) -> usize {
        sample
            .exposures
            .iter()
            .filter_map(|e| self.schema.scenario(e.scenario_id))
            .map(|s| s.tasks.len())
            .sum()
    }

    /// `weight · Σ BCE` over the sample's pairs and its parameter gradients.
    pub fn loss_and_grads(&self, sample: &UserSample, weight: f64) -> Result<(f64, Gradients<T>)> {
        let mut g = Graph::new(&self.store);
        let loss = self.loss(&mut g, sample, weight)?;
        let value = g.value(loss).get(0, 0).as_f64();
        Ok((value, g.backward(loss)?))
    }

    pub fn loss<'s>(&'s self, g: &mut Graph<'s, T>, sample: &UserSample, weight: f64) -> Result<Var> {
        let fwd = self.forward(g, sample)?;
        let t_metas = fwd.layout.t_metas();
        let mut terms = Vec::with_capacity(fwd.heads.len());
        for head in &fwd.heads {
            let labels = head
                .rows
                .iter()
                .map(|&row| {
                    let e = &sample.exposures[t_metas[row].exposure_ref.expect("T token")];
                    match e.labels.get(&head.task) {
                        Some(&y) if y <= 1 => Ok(T::of(y as f64)),
                        _ => Err(Error::Integrity(format!("missing or non-binary label `{}`", head.task))),
                    }
                })
                .collect::<Result<Vec<T>>>()?;
            terms.push(g.bce_with_logits(head.logits, &labels, T::of(weight))?);
        }
        let mut total = *terms.first().ok_or_else(|| Error::NotComputable("sample has no labeled pairs".into()))?;
        for &t in &terms[1..] {
            total = g.add(total, t)?;
        }
        Ok(total)
    }
}
