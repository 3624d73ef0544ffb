//! Training the query projection inside the live QA loop.
//!
//! Each training step runs the loop for a batch of instances. At every
//! iteration the current projection retrieves the top-M candidates, the
//! labeler scores them into a soft target, and the KL divergence between
//! that target and the retrieval softmax contributes loss and gradient.
//! Per-instance losses sum over iterations, then average over the batch.
//! The contrastive baseline instead takes one step per instance against
//! its labeled documents.

mod checkpoint;
mod loss;
mod optim;
mod projection;

pub use checkpoint::{
    append_loss_rows, config_hash, load_checkpoint, read_loss_steps, save_checkpoint,
    CheckpointMeta, LossRow, LOSS_CSV_HEADER,
};
pub use loss::{info_nce_loss, kl_gradient, kl_loss, retrieval_distribution, RetrievalDistribution};
pub use optim::{lr_for_step, AdamW, AdamWConfig};
pub use projection::{ProjectionGradient, QueryProjection};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QaInstance;
use crate::embedder::QueryEmbedder;
use crate::labeler::{LabelError, Labeler, ScoreMode};
use crate::orchestrator::{Orchestrator, ReformulationMode, RunError};
use crate::StoreError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("target and model distributions have misaligned ids")]
    Misaligned,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("instance {id:?} has no gt_doc_ids; the contrastive mode needs labels")]
    MissingGt { id: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Run(#[from] RunError),
    #[error(transparent)]
    Label(#[from] LabelError),
}

impl From<crate::embedder::EmbedError> for TrainError {
    fn from(value: crate::embedder::EmbedError) -> Self {
        TrainError::Run(RunError::Embed(value))
    }
}

/// Gateway-side failures abort the current step and training moves on;
/// anything structural is fatal.
fn is_gateway_failure(err: &TrainError) -> bool {
    fn run_is_gateway(err: &RunError) -> bool {
        match err {
            RunError::Lm(_) | RunError::Embed(_) => true,
            RunError::Aborted { source, .. } => run_is_gateway(source),
            _ => false,
        }
    }
    match err {
        TrainError::Run(e) => run_is_gateway(e),
        TrainError::Label(LabelError::Lm(_)) => true,
        _ => false,
    }
}

fn default_top_m() -> usize {
    32
}
fn default_top_k() -> usize {
    8
}
fn default_max_iterations() -> usize {
    6
}
fn default_min_iterations() -> usize {
    2
}
fn default_lm_temperature() -> f64 {
    0.1
}
fn default_batch_size() -> usize {
    16
}
fn default_learning_rate() -> f64 {
    1e-6
}
fn default_lr_decay_factor() -> f64 {
    0.9
}
fn default_lr_decay_every() -> u64 {
    100
}
fn default_max_epochs() -> usize {
    10
}
fn default_early_stop() -> bool {
    true
}

/// All training and loop hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    /// Candidates labeled and trained on per iteration.
    pub top_m: usize,
    /// Documents retrieved per iteration for answering.
    pub top_k: usize,
    pub max_iterations: usize,
    pub min_iterations: usize,
    /// Softmax temperature over LM log-scores.
    pub lm_temperature: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub optimizer: AdamWConfig,
    pub early_stop: bool,
    pub max_epochs: usize,
    /// Stop after this many optimizer steps; unlimited when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            top_m: default_top_m(),
            top_k: default_top_k(),
            max_iterations: default_max_iterations(),
            min_iterations: default_min_iterations(),
            lm_temperature: default_lm_temperature(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            lr_decay_factor: default_lr_decay_factor(),
            lr_decay_every: default_lr_decay_every(),
            optimizer: AdamWConfig::default(),
            early_stop: default_early_stop(),
            max_epochs: default_max_epochs(),
            max_steps: None,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |what: &str| Err(TrainError::BadConfig(what.to_string()));
        if self.min_iterations < 1 || self.min_iterations > self.max_iterations {
            return fail("need 1 <= min_iterations <= max_iterations");
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return fail("need 0 < lr_decay_factor <= 1");
        }
        if self.top_k > self.top_m {
            return fail("need top_k <= top_m");
        }
        if self.top_k == 0 {
            return fail("top_k must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.lm_temperature <= 0.0 {
            return fail("lm_temperature must be positive");
        }
        if self.learning_rate <= 0.0 {
            return fail("learning_rate must be positive");
        }
        if self.lr_decay_every == 0 {
            return fail("lr_decay_every must be positive");
        }
        Ok(())
    }
}

/// Which objective drives the projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Kl,
    InfoNce,
}

impl TrainMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainMode::Kl => "kl",
            TrainMode::InfoNce => "infonce",
        }
    }
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub projection: QueryProjection,
    pub rows: Vec<LossRow>,
    /// Global step counter after the run (includes `start_step`).
    pub steps_run: u64,
    /// Learning rate in effect at the last executed step.
    pub final_lr: f64,
    /// Batches dropped because of hard gateway failures.
    pub aborted_steps: u64,
}

/// Drives training over shared read-only retrieval and LM components.
pub struct Trainer<'a> {
    pub orchestrator: Orchestrator<'a>,
    pub embedder: &'a dyn QueryEmbedder,
    pub cfg: TrainerConfig,
    pub score_mode: ScoreMode,
    pub reformulation: ReformulationMode,
    pub length_normalize: bool,
    pub seed: u64,
}

impl<'a> Trainer<'a> {
    fn labeler(&self) -> Labeler<'a> {
        Labeler::new(self.orchestrator.gateway, self.orchestrator.templates)
            .with_length_normalize(self.length_normalize)
    }

    /// Loss and gradient for one instance: the loop runs with the current
    /// projection, then every executed iteration contributes a KL term over
    /// the top-M candidates of its recorded query.
    fn kl_instance(
        &self,
        projection: &QueryProjection,
        instance: &QaInstance,
        accumulate: bool,
    ) -> Result<(f64, ProjectionGradient), TrainError> {
        let dim = projection.dim();
        let embed = |text: &str| -> Result<crate::index::QueryVector, RunError> {
            let base = self.embedder.embed(text)?;
            projection
                .apply(&base)
                .map_err(|e| RunError::TraceFile(format!("projection failed: {e}")))
        };
        let trace = self
            .orchestrator
            .run(instance, &self.cfg, self.reformulation, &embed)?;

        let labeler = self.labeler();
        let store = self.orchestrator.index.store();
        let gold_answer = instance.answer().to_string();
        let mut total_loss = 0.0;
        let mut total_grad = ProjectionGradient::zeros(dim);
        for iteration in &trace.iterations {
            let base = self.embedder.embed(&iteration.query)?;
            let q_search = projection.apply(&base)?;
            let q64 = projection.apply_f64(&base.values)?;
            let top_m = self
                .orchestrator
                .index
                .search_top_m_for_training(&q_search, self.cfg.top_m)
                .map_err(RunError::Index)?;
            let target = labeler.label(
                self.orchestrator.corpus,
                &instance.question,
                &gold_answer,
                &top_m,
                self.score_mode,
                self.cfg.lm_temperature,
            )?;
            let doc_vectors: Vec<&[f32]> = top_m
                .iter()
                .map(|h| {
                    store
                        .vector(&h.doc_id)
                        .ok_or_else(|| TrainError::Shape(format!("no embedding for {:?}", h.doc_id)))
                })
                .collect::<Result<_, _>>()?;
            let ids: Vec<String> = top_m.iter().map(|h| h.doc_id.clone()).collect();
            let model = retrieval_distribution(&q64, ids, &doc_vectors)?;
            total_loss += kl_loss(&target, &model)?;
            if accumulate {
                total_grad.add_assign(&kl_gradient(&target, &model, &doc_vectors, &base.values)?);
            }
        }
        Ok((total_loss, total_grad))
    }

    /// Single contrastive step per instance: labeled documents are the
    /// positives, the remaining top of the retrieval are the negatives.
    fn info_nce_instance(
        &self,
        projection: &QueryProjection,
        instance: &QaInstance,
    ) -> Result<(f64, ProjectionGradient), TrainError> {
        if instance.gt_doc_ids.is_empty() {
            return Err(TrainError::MissingGt {
                id: instance.id.clone(),
            });
        }
        let store = self.orchestrator.index.store();
        let base = self.embedder.embed(&instance.question)?;
        let q_search = projection.apply(&base)?;
        let q64 = projection.apply_f64(&base.values)?;

        let positives: Vec<&[f32]> = instance
            .gt_doc_ids
            .iter()
            .map(|id| {
                store
                    .vector(id)
                    .ok_or_else(|| TrainError::Shape(format!("no embedding for gt doc {id:?}")))
            })
            .collect::<Result<_, _>>()?;

        let pool = self
            .orchestrator
            .index
            .search_top_m_for_training(&q_search, self.cfg.top_m + instance.gt_doc_ids.len())
            .map_err(RunError::Index)?;
        let negatives: Vec<&[f32]> = pool
            .iter()
            .filter(|h| !instance.gt_doc_ids.contains(&h.doc_id))
            .take(self.cfg.top_m)
            .map(|h| store.vector(&h.doc_id).expect("hit comes from the store"))
            .collect();
        if negatives.is_empty() {
            return Err(TrainError::Shape(format!(
                "no negatives available for instance {:?}",
                instance.id
            )));
        }

        let (loss, d_query) = info_nce_loss(&q64, &positives, &negatives)?;
        Ok((loss, ProjectionGradient::from_query_grad(&d_query, &base.values)))
    }

    fn batch_loss_and_grad(
        &self,
        projection: &QueryProjection,
        batch: &[&QaInstance],
        mode: TrainMode,
    ) -> Result<(f64, ProjectionGradient), TrainError> {
        let mut total_loss = 0.0;
        let mut total_grad = ProjectionGradient::zeros(projection.dim());
        for instance in batch {
            let (loss, grad) = match mode {
                TrainMode::Kl => self.kl_instance(projection, instance, true)?,
                TrainMode::InfoNce => self.info_nce_instance(projection, instance)?,
            };
            total_loss += loss;
            total_grad.add_assign(&grad);
        }
        let inv = 1.0 / batch.len() as f64;
        total_grad.scale(inv);
        Ok((total_loss * inv, total_grad))
    }

    /// Mean per-instance loss over a held-out split, no gradient.
    pub fn validation_loss(
        &self,
        projection: &QueryProjection,
        instances: &[QaInstance],
        mode: TrainMode,
    ) -> Result<f64, TrainError> {
        let mut total = 0.0;
        for instance in instances {
            total += match mode {
                TrainMode::Kl => self.kl_instance(projection, instance, false)?.0,
                TrainMode::InfoNce => self.info_nce_instance(projection, instance)?.0,
            };
        }
        Ok(total / instances.len().max(1) as f64)
    }

    /// Run training from `initial`, starting the global step counter at
    /// `start_step` (nonzero when resuming). Returns the trained projection
    /// and the loss history.
    pub fn train(
        &self,
        initial: QueryProjection,
        train_set: &[QaInstance],
        val_set: Option<&[QaInstance]>,
        mode: TrainMode,
        start_step: u64,
    ) -> Result<TrainOutcome, TrainError> {
        self.cfg.validate()?;
        if train_set.is_empty() {
            return Err(TrainError::BadConfig("training set is empty".into()));
        }
        if mode == TrainMode::InfoNce {
            if let Some(missing) = train_set.iter().find(|i| i.gt_doc_ids.is_empty()) {
                return Err(TrainError::MissingGt {
                    id: missing.id.clone(),
                });
            }
        }
        let dim = initial.dim();
        let mut projection = initial;
        let mut optimizer = AdamW::new(self.cfg.optimizer, dim * dim + dim);
        let mut rows: Vec<LossRow> = Vec::new();
        let mut step = start_step;
        let mut final_lr = lr_for_step(
            self.cfg.learning_rate,
            self.cfg.lr_decay_factor,
            self.cfg.lr_decay_every,
            step.max(1),
        );
        let mut aborted_steps = 0u64;
        let mut best_val = f64::INFINITY;

        'epochs: for epoch in 0..self.cfg.max_epochs {
            if self.cfg.max_steps.is_some_and(|max| step >= max) {
                break;
            }
            let mut order: Vec<usize> = (0..train_set.len()).collect();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(epoch as u64));
            order.shuffle(&mut rng);

            for chunk in order.chunks(self.cfg.batch_size) {
                if self.cfg.max_steps.is_some_and(|max| step >= max) {
                    break 'epochs;
                }
                let batch: Vec<&QaInstance> = chunk.iter().map(|&i| &train_set[i]).collect();
                let lr = lr_for_step(
                    self.cfg.learning_rate,
                    self.cfg.lr_decay_factor,
                    self.cfg.lr_decay_every,
                    step + 1,
                );
                match self.batch_loss_and_grad(&projection, &batch, mode) {
                    Ok((loss, grad)) => {
                        step += 1;
                        final_lr = lr;
                        let (weight, bias) = projection.params_mut();
                        let mut params: Vec<f64> = Vec::with_capacity(dim * dim + dim);
                        params.extend_from_slice(weight);
                        params.extend_from_slice(bias);
                        let mut grads: Vec<f64> = Vec::with_capacity(dim * dim + dim);
                        grads.extend_from_slice(&grad.d_weight);
                        grads.extend_from_slice(&grad.d_bias);
                        optimizer.step(&mut params, &grads, lr);
                        weight.copy_from_slice(&params[..dim * dim]);
                        bias.copy_from_slice(&params[dim * dim..]);
                        rows.push(LossRow {
                            step,
                            split: "train".into(),
                            mode: mode.as_str().into(),
                            loss,
                            lr,
                        });
                    }
                    Err(e) if is_gateway_failure(&e) => {
                        aborted_steps += 1;
                        log::warn!("step aborted (batch of {}): {e}", batch.len());
                    }
                    Err(e) => return Err(e),
                }
            }

            if let Some(val) = val_set {
                if !val.is_empty() {
                    let val_loss = self.validation_loss(&projection, val, mode)?;
                    rows.push(LossRow {
                        step,
                        split: "val".into(),
                        mode: mode.as_str().into(),
                        loss: val_loss,
                        lr: final_lr,
                    });
                    if self.cfg.early_stop {
                        if val_loss >= best_val {
                            log::info!("validation loss stopped improving after epoch {epoch}; halting");
                            break;
                        }
                        best_val = val_loss;
                    }
                }
            }
        }

        Ok(TrainOutcome {
            projection,
            rows,
            steps_run: step,
            final_lr,
            aborted_steps,
        })
    }
}
