//! Flow-matching training with stochastic condition mixing.
//!
//! Each item independently keeps its edit triplet, drops the instruction to
//! `null` (target kept, so `null` learns the marginal over edits), or becomes
//! an identity pair with the `id` token and `target = source`.

use std::io::Write;

use rand::Rng as _;
use thiserror::Error;

use crate::flow::{noise_forward, velocity_target, TimePoint};
use crate::model::{DenoiserNet, ModelError, Query, TrainingEcho};
use crate::ndcore::{AdamState, Graph, NdError, Tensor};
use crate::rng::{self, domain, Rng};
use crate::task::{EditTriplet, Instruction, TaskKind};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: usize },
    #[error("step {step}: {source}")]
    Optimizer { step: usize, source: NdError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("writing loss curve: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixConfig {
    pub p_null: f64,
    pub p_id: f64,
}

impl Default for MixConfig {
    fn default() -> Self {
        Self {
            p_null: 0.10,
            p_id: 0.10,
        }
    }
}

impl MixConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let ok = self.p_null >= 0.0 && self.p_id >= 0.0 && self.p_null + self.p_id <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(TrainError::Config(format!(
                "mix probabilities p_null={} p_id={} must be non-negative and sum to at most 1",
                self.p_null, self.p_id
            )))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub mix: MixConfig,
}

impl TrainConfig {
    /// 5,000 steps for `vec`, 30,000 for `disc`; batch 64, lr 1e-3.
    pub fn for_task(task: TaskKind) -> Self {
        Self {
            task,
            steps: match task {
                TaskKind::Vec => 5_000,
                TaskKind::Disc => 30_000,
            },
            batch: 64,
            lr: 1e-3,
            seed: 0,
            mix: MixConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 {
            return Err(TrainError::Config("steps must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(TrainError::Config(format!("learning rate {} is invalid", self.lr)));
        }
        self.mix.validate()
    }

    pub fn echo(&self) -> TrainingEcho {
        TrainingEcho {
            steps: self.steps,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            p_null: self.mix.p_null,
            p_id: self.mix.p_id,
        }
    }
}

/// Which branch the mixer took for one item.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixBranch {
    Null,
    Identity,
    Standard,
}

pub fn mix_branch(rng: &mut Rng, cfg: &MixConfig) -> MixBranch {
    let u: f64 = rng.random();
    if u < cfg.p_null {
        MixBranch::Null
    } else if u < cfg.p_null + cfg.p_id {
        MixBranch::Identity
    } else {
        MixBranch::Standard
    }
}

pub fn mix_triplet(triplet: EditTriplet, rng: &mut Rng, cfg: &MixConfig) -> EditTriplet {
    match mix_branch(rng, cfg) {
        MixBranch::Null => EditTriplet {
            instruction: Instruction::NULL,
            ..triplet
        },
        MixBranch::Identity => EditTriplet {
            target: triplet.source.clone(),
            instruction: Instruction::ID,
            source: triplet.source,
        },
        MixBranch::Standard => triplet,
    }
}

/// One optimizer step on a batch of (already mixed) triplets. Times and
/// noise are drawn from `rng`. Returns the batch loss before the update.
pub fn train_step(
    net: &mut DenoiserNet,
    adam: &mut AdamState,
    batch: &[EditTriplet],
    rng: &mut Rng,
    step: usize,
) -> Result<f64, TrainError> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let dim = net.task().dim();
    let mut zs = Vec::with_capacity(batch.len());
    let mut ts = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len() * dim);
    for item in batch {
        // t ~ U(0, 1]; the open end keeps the time valid for the network.
        let t = 1.0 - rng.random::<f64>();
        let eps = rng::normal_vec(rng, dim);
        let tp = TimePoint::new(t).expect("t in (0, 1]");
        zs.push(noise_forward(&item.target, tp, &eps).expect("task dims").z);
        targets.extend(velocity_target(&item.target, &eps).expect("task dims"));
        ts.push(t);
    }
    let queries: Vec<Query<'_>> = batch
        .iter()
        .enumerate()
        .map(|(i, item)| Query {
            z: &zs[i],
            source: &item.source,
            instruction: item.instruction,
            t: ts[i],
        })
        .collect();

    let grads = {
        let mut g = Graph::new(net.params());
        let pred = net.forward(&mut g, &queries)?;
        let target = g.constant(Tensor::new(vec![batch.len(), dim], targets).map_err(ModelError::from)?);
        let loss = g.mse_loss(pred, target).map_err(ModelError::from)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step });
        }
        (g.backward(loss).map_err(ModelError::from)?, value)
    };
    adam.step(net.params_mut(), &grads.0)
        .map_err(|source| TrainError::Optimizer { step, source })?;
    Ok(grads.1)
}

/// Draws and mixes the triplets of one training step. Item `i` of step `s`
/// uses its own substream, so the batch does not depend on evaluation order.
pub fn make_batch(cfg: &TrainConfig, step: usize) -> Vec<EditTriplet> {
    (0..cfg.batch)
        .map(|i| {
            let mut r = rng::substream(cfg.seed, domain::TRAIN_ITEM, (step * cfg.batch + i) as u64);
            let triplet = cfg.task.make_triplet(&mut r, None);
            mix_triplet(triplet, &mut r, &cfg.mix)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: DenoiserNet,
    pub losses: Vec<f64>,
}

/// Trains from a seeded initialization. `progress` is called after every
/// step with `(step, loss)`.
pub fn train_with_progress(
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let mut net = DenoiserNet::init(cfg.seed, cfg.task);
    let mut adam = AdamState::new(net.params(), cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = make_batch(cfg, step);
        let mut noise_rng = rng::substream(cfg.seed, domain::TRAIN_NOISE, step as u64);
        let loss = train_step(&mut net, &mut adam, &batch, &mut noise_rng, step)?;
        losses.push(loss);
        progress(step, loss);
    }
    net.training = Some(cfg.echo());
    Ok(TrainOutcome { net, losses })
}

pub fn train(cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    train_with_progress(cfg, |_, _| {})
}

/// Loss curve as CSV: `step,loss`.
pub fn write_loss_csv(mut w: impl Write, losses: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in losses.iter().enumerate() {
        writeln!(w, "{i},{l}")?;
    }
    Ok(())
}
