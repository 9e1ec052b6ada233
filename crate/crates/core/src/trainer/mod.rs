//! Two-stage training: warm-up on synthetic samples with full anchor
//! supervision, then target-only training on parsed descriptions.
//!
//! Every random draw is derived from the configured seed and the step
//! counters, so a run is reproducible and a checkpoint resumes exactly.

pub mod checkpoint;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::GroundingSample;
use crate::losses::{compose, loss_crd, loss_mask, loss_ref, loss_text, LossBreakdown, LossTerms, LossWeights, Stage};
use crate::model::{GroundingInput, Model, ModelError};
use crate::orderparse::{trim_pad, OrderParser, ParseError};
use crate::scene::{Relation, Scene};
use crate::synthgen::{entry_rng, generate_entry, GenConfig, GenError, Style};
use crate::tensor::{adam_step, AdamConfig, AdamState, Tape, TensorError};

pub use checkpoint::{
    load_checkpoint, load_checkpoint_expecting, save_checkpoint, CheckpointError, CHECKPOINT_VERSION,
};

// Stream offsets keep the draws of different purposes apart.
const WARMUP_STREAM: u64 = 0x7761_726d;
const MAIN_STREAM: u64 = 0x6d61_696e;
const NOISE_STREAM: u64 = 0x6e6f_6973;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("synthesis: {0}")]
    Gen(#[from] GenError),
    #[error("order parsing: {0}")]
    Parse(#[from] ParseError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub warmup_steps: usize,
    pub main_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Order length and number of referring blocks.
    pub blocks: usize,
    pub d: usize,
    pub n_heads: usize,
    pub points_per_proposal: usize,
    pub seed: u64,
    pub weights: LossWeights,
    /// Log a moving-average loss every this many steps; 0 disables.
    pub eval_every: usize,
    /// Probability of replacing each proposal label with a random class.
    pub label_noise: f64,
    /// Warm-up samples draw their relation uniformly from this list.
    pub warmup_relations: Vec<Relation>,
    /// Rescale gradients whose global norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            warmup_steps: 2000,
            main_steps: 1000,
            batch_size: 16,
            lr: 1e-3,
            blocks: 4,
            d: 32,
            n_heads: 4,
            points_per_proposal: 16,
            seed: 0,
            weights: LossWeights::default(),
            eval_every: 0,
            label_noise: 0.0,
            warmup_relations: vec![Relation::Farthest, Relation::Nearest],
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label noise must lie in [0, 1]");
        }
        if self.warmup_relations.is_empty() {
            return bad("at least one warm-up relation is required");
        }
        if self.blocks == 0 {
            return bad("at least one block is required");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad("gradient clip must be positive");
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            ..AdamConfig::default()
        }
    }
}

/// A sample ready for the network: the order is normalized to `B` entries
/// and `supervision` holds the ids the reference loss reads.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub scene: Scene,
    pub labels: Vec<usize>,
    pub order: Vec<String>,
    /// Order before normalization, as parsed or stored.
    pub raw_order: Vec<String>,
    pub description: String,
    /// Warm-up: `B` anchor/target ids. Main: the target id alone.
    pub supervision: Vec<usize>,
    pub target_id: usize,
}

impl PreparedSample {
    pub fn input(&self) -> GroundingInput<'_> {
        GroundingInput {
            scene: &self.scene,
            labels: &self.labels,
            order: &self.order,
            description: &self.description,
        }
    }

    pub fn target_class(&self) -> usize {
        self.scene.proposals()[self.target_id].class_id
    }
}

fn noisy_labels(scene: &Scene, rate: f64, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let classes = scene.vocab().len();
    scene
        .labels()
        .into_iter()
        .map(|l| {
            if rate > 0.0 && rng.gen_bool(rate) {
                rng.gen_range(0..classes)
            } else {
                l
            }
        })
        .collect()
}

/// Warm-up form of a sample with known anchors: order and ids trimmed or
/// padded together.
pub fn prepare_warmup(sample: &GroundingSample, blocks: usize) -> Result<PreparedSample, TrainError> {
    let ids = sample
        .anchor_ids
        .as_ref()
        .ok_or_else(|| TrainError::Contract(format!("sample {:?} has no anchor ids", sample.scene.scene_id)))?;
    Ok(PreparedSample {
        labels: sample.scene.labels(),
        order: trim_pad(&sample.order, blocks),
        raw_order: sample.order.clone(),
        description: sample.description.clone(),
        supervision: trim_pad(ids, blocks),
        target_id: sample.target_id,
        scene: sample.scene.clone(),
    })
}

/// Main-stage form: the order comes from `parser`. A description with no
/// recognizable class falls back to the target's class alone.
pub fn prepare_main(
    samples: &[GroundingSample],
    parser: &dyn OrderParser,
    config: &TrainConfig,
) -> Result<Vec<PreparedSample>, TrainError> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let vocab = s.scene.vocab();
            let raw_order = match parser.parse(&s.description, vocab) {
                Ok(o) => o.names,
                Err(ParseError::EmptyOrder(d)) => {
                    log::warn!("no order in {d:?}; using the target class alone");
                    vec![s.scene.class_name(s.target_id).to_string()]
                }
                Err(e) => return Err(e.into()),
            };
            let mut rng = entry_rng(config.seed ^ NOISE_STREAM, i);
            Ok(PreparedSample {
                labels: noisy_labels(&s.scene, config.label_noise, &mut rng),
                order: trim_pad(&raw_order, config.blocks),
                raw_order,
                description: s.description.clone(),
                supervision: vec![s.target_id],
                target_id: s.target_id,
                scene: s.scene.clone(),
            })
        })
        .collect()
}

/// Model, optimizer state and progress counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub model: Model,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub warmup_done: usize,
    pub main_done: usize,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        if model.config().blocks != config.blocks {
            return Err(TrainError::Config(format!(
                "model has {} blocks, training config {}",
                model.config().blocks,
                config.blocks
            )));
        }
        let adam = AdamState::for_params(model.params().tensors());
        Ok(Self {
            model,
            adam,
            config,
            warmup_done: 0,
            main_done: 0,
        })
    }

    /// Forward pass and loss of one sample on `tape`.
    fn sample_loss(
        &self,
        tape: &mut Tape,
        p: &crate::tensor::Bound,
        s: &PreparedSample,
        stage: Stage,
    ) -> Result<(crate::tensor::Var, LossBreakdown), TrainError> {
        let out = self.model.forward(tape, p, &s.input())?;
        let terms = LossTerms {
            l_ref: Some(loss_ref(tape, &out.block_scores, &s.supervision, stage)?),
            l_mask: Some(loss_mask(tape, &out.mask_logits, &out.masks)?),
            l_text: Some(loss_text(tape, out.text_logits, s.target_class())?),
            l_crd: match stage {
                Stage::Warmup => Some(loss_crd(tape, &out.coord_pred, &s.scene.centers(), &s.supervision)?),
                Stage::Main => None,
            },
        };
        Ok(compose(tape, stage, &terms, &self.config.weights)?)
    }

    /// Mean loss over `batch` without updating anything.
    pub fn batch_loss(&self, batch: &[&PreparedSample], stage: Stage) -> Result<LossBreakdown, TrainError> {
        let mut tape = Tape::new();
        let p = self.model.params().bind_frozen(&mut tape);
        let mut acc = LossBreakdown::default();
        for s in batch {
            acc.accumulate(&self.sample_loss(&mut tape, &p, s, stage)?.1);
        }
        Ok(acc.scaled(1.0 / batch.len() as f64))
    }

    /// One Adam update on the mean loss of `batch`.
    pub fn step(&mut self, batch: &[&PreparedSample], stage: Stage) -> Result<LossBreakdown, TrainError> {
        if batch.is_empty() {
            return Err(TrainError::Contract("empty batch".into()));
        }
        let mut tape = Tape::new();
        let p = self.model.params().bind(&mut tape);
        let mut totals = Vec::with_capacity(batch.len());
        let mut acc = LossBreakdown::default();
        for s in batch {
            let (v, b) = self.sample_loss(&mut tape, &p, s, stage)?;
            totals.push(v);
            acc.accumulate(&b);
        }
        let mut sum = totals[0];
        for &v in &totals[1..] {
            sum = tape.add(sum, v)?;
        }
        let mean = tape.scale(sum, 1.0 / batch.len() as f64);
        let grads = tape.backward(mean)?;
        let mut g = p.grads(&tape, &grads);
        let norm = g.iter().flat_map(|t| t.data()).map(|x| x * x).sum::<f64>().sqrt();
        if let Some(clip) = self.config.grad_clip {
            if norm > clip {
                let c = clip / norm;
                g.iter_mut().for_each(|t| t.data_mut().iter_mut().for_each(|x| *x *= c));
            }
        }
        adam_step(
            self.model.params_mut().tensors_mut(),
            &g,
            &mut self.adam,
            &self.config.adam(),
        );
        Ok(acc.scaled(1.0 / batch.len() as f64))
    }

    fn report(&self, stage: Stage, step: usize, history: &[LossBreakdown]) {
        let every = self.config.eval_every;
        if every > 0 && (step + 1).is_multiple_of(every) {
            let recent = &history[history.len().saturating_sub(every)..];
            let avg = recent.iter().map(|b| b.total).sum::<f64>() / recent.len() as f64;
            log::info!("{stage:?} step {}: mean loss {avg:.4}", step + 1);
        }
    }

    /// Warm-up sample for global index `index`: relation drawn from the
    /// configured list, then the template generator.
    pub fn warmup_sample(&self, gen: &GenConfig, index: usize) -> Result<PreparedSample, TrainError> {
        let relations = &self.config.warmup_relations;
        let mut pick = entry_rng(self.config.seed ^ WARMUP_STREAM, index);
        let cfg = GenConfig {
            seed: self.config.seed ^ WARMUP_STREAM ^ 1,
            relation: relations[pick.gen_range(0..relations.len())],
            ..gen.clone()
        };
        let sample = generate_entry(&cfg, index)?;
        prepare_warmup(&GroundingSample::from(sample), self.config.blocks)
    }

    /// Runs the remaining warm-up steps, synthesizing each batch on the fly.
    pub fn warmup_stage(&mut self, gen: &GenConfig) -> Result<Vec<LossBreakdown>, TrainError> {
        gen.validate()?;
        if gen.order_len != self.config.blocks || gen.style != Style::Template {
            return Err(TrainError::Config(format!(
                "warm-up needs template samples of order length {}",
                self.config.blocks
            )));
        }
        let bs = self.config.batch_size;
        let mut history = Vec::new();
        while self.warmup_done < self.config.warmup_steps {
            let step = self.warmup_done;
            let batch = (0..bs)
                .map(|j| self.warmup_sample(gen, step * bs + j))
                .collect::<Result<Vec<_>, _>>()?;
            let refs: Vec<&PreparedSample> = batch.iter().collect();
            history.push(self.step(&refs, Stage::Warmup)?);
            self.warmup_done += 1;
            self.report(Stage::Warmup, step, &history);
        }
        Ok(history)
    }

    /// Sample indices for main step `step`: consecutive slices of one
    /// shuffled pass over the data per epoch.
    pub fn main_batch_indices(&self, step: usize, n: usize) -> Vec<usize> {
        let bs = self.config.batch_size;
        let mut out = Vec::with_capacity(bs);
        let mut cached: Option<(usize, Vec<usize>)> = None;
        for j in 0..bs {
            let flat = step * bs + j;
            let (epoch, pos) = (flat / n, flat % n);
            if cached.as_ref().map(|c| c.0) != Some(epoch) {
                let mut perm: Vec<usize> = (0..n).collect();
                perm.shuffle(&mut entry_rng(self.config.seed ^ MAIN_STREAM, epoch));
                cached = Some((epoch, perm));
            }
            out.push(cached.as_ref().expect("just set").1[pos]);
        }
        out
    }

    /// Runs the remaining main-stage steps on prepared samples, supervising
    /// the target only.
    pub fn main_stage(&mut self, data: &[PreparedSample]) -> Result<Vec<LossBreakdown>, TrainError> {
        self.fit(data, Stage::Main)
    }

    /// Main-stage loop with an explicit stage, so fixed sample sets can also
    /// be trained with warm-up supervision.
    pub fn fit(&mut self, data: &[PreparedSample], stage: Stage) -> Result<Vec<LossBreakdown>, TrainError> {
        if data.is_empty() {
            return Err(TrainError::Contract("empty dataset".into()));
        }
        let mut history = Vec::new();
        while self.main_done < self.config.main_steps {
            let step = self.main_done;
            let batch: Vec<&PreparedSample> = self
                .main_batch_indices(step, data.len())
                .into_iter()
                .map(|i| &data[i])
                .collect();
            let b = self.step(&batch, stage)?;
            if stage == Stage::Main && b.l_crd.is_some() {
                return Err(TrainError::Contract("main stage produced a coordinate loss".into()));
            }
            history.push(b);
            self.main_done += 1;
            self.report(stage, step, &history);
        }
        Ok(history)
    }
}

/// Fresh model and trainer for `config` over the generator vocabulary.
pub fn new_trainer(
    config: &TrainConfig,
    classes: std::sync::Arc<crate::scene::ClassVocab>,
) -> Result<Trainer, TrainError> {
    let words = crate::model::WordVocab::for_generator(&classes);
    let mc = crate::model::ModelConfig {
        d: config.d,
        blocks: config.blocks,
        n_heads: config.n_heads,
        points_per_proposal: config.points_per_proposal,
        seed: config.seed,
        ..crate::model::ModelConfig::new(&words, &classes)
    };
    Trainer::new(Model::new(mc, words, classes)?, config.clone())
}

/// Largest step tried by [`model_grad_check`] before shrinking.
pub const GRADCHECK_INITIAL_STEP: f64 = 1e-2;

/// Finite-difference check of every parameter of a small model (d = 8,
/// two blocks, five proposals) under the full warm-up loss.
pub fn model_grad_check(seed: u64) -> Result<crate::tensor::GradCheckReport, TrainError> {
    let config = TrainConfig {
        blocks: 2,
        d: 8,
        n_heads: 2,
        points_per_proposal: 4,
        seed,
        ..TrainConfig::default()
    };
    let trainer = new_trainer(&config, crate::synthgen::default_vocab())?;
    let gen = GenConfig {
        min_proposals: 5,
        max_proposals: 5,
        points_per_proposal: 4,
        order_len: 2,
        seed,
        ..GenConfig::default()
    };
    let sample = prepare_warmup(&GroundingSample::from(generate_entry(&gen, 0)?), 2)?;
    let report =
        crate::tensor::grad_check_extrapolated(
            trainer.model.params(),
            GRADCHECK_INITIAL_STEP,
            |tape, p| match trainer.sample_loss(tape, p, &sample, Stage::Warmup) {
                Ok((v, _)) => Ok(v),
                Err(TrainError::Tensor(e)) => Err(e),
                Err(e) => Err(TensorError::Contract {
                    op: "model_grad_check",
                    msg: e.to_string(),
                }),
            },
        )?;
    Ok(report)
}
