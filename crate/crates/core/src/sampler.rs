//! Deterministic Euler integration from noise to data under a guidance
//! variant, and α-sweeps that share one initial noise draw.
//!
//! All lanes of a sweep advance in lockstep and their network queries are
//! evaluated as one batch per step. Rows of a batched forward pass do not
//! depend on each other, so a lane of a sweep is bit-identical to the same
//! α sampled alone.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{timestep_grid, FlowError, LatentState, TimePoint, DEFAULT_STEPS};
use crate::guidance::{assemble, guided, queries, GuidanceConfig, GuidanceError, Scheduler, Variant, DEFAULT_SCALE};
use crate::model::{ModelError, Query, VelocityModel};
use crate::rng::{domain, normal_vec, substream};
use crate::task::{Instruction, Sample};

/// A lane whose state RMS exceeds this bound, or turns non-finite, is
/// reported as diverged.
pub const DIVERGENCE_RMS: f64 = 1.0e3;

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("sampling diverged at step {step} (t = {t}) under {variant} with alpha = {alpha}")]
    Diverged {
        step: usize,
        t: f64,
        variant: Variant,
        alpha: f64,
    },
    #[error("alphas must be non-empty, ascending and within [0, 1]: {0:?}")]
    Alphas(Vec<f64>),
    #[error("instruction {0} is not an edit token")]
    NotAnEdit(usize),
    #[error("source has dimension {got}, model expects {expected}")]
    Dim { got: usize, expected: usize },
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub alphas: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub variant: Variant,
    pub w: f64,
    pub scheduler: Scheduler,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            alphas: uniform_alphas(6),
            steps: DEFAULT_STEPS,
            seed: 0,
            variant: Variant::Adaor,
            w: DEFAULT_SCALE,
            scheduler: Scheduler::Sqrt,
        }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        let ok = !self.alphas.is_empty()
            && self.alphas.iter().all(|a| (0.0..=1.0).contains(a))
            && self.alphas.windows(2).all(|p| p[0] <= p[1]);
        if !ok {
            return Err(SamplerError::Alphas(self.alphas.clone()));
        }
        if self.steps < 2 {
            return Err(FlowError::TooFewSteps(self.steps).into());
        }
        self.guidance(0.0).validate()?;
        Ok(())
    }

    pub fn guidance(&self, alpha: f64) -> GuidanceConfig {
        GuidanceConfig {
            variant: self.variant,
            w: self.w,
            alpha,
            scheduler: self.scheduler,
        }
    }
}

/// `count` evenly spaced strengths from 0 to 1 inclusive.
pub fn uniform_alphas(count: usize) -> Vec<f64> {
    match count {
        0 => Vec::new(),
        1 => vec![0.0],
        n => (0..n).map(|i| i as f64 / (n - 1) as f64).collect(),
    }
}

/// The initial state at `t = 1` for a seed.
pub fn initial_noise(seed: u64, dim: usize) -> Vec<f64> {
    normal_vec(&mut substream(seed, domain::SAMPLER_NOISE, 0), dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub source: Sample,
    pub instruction: Instruction,
    pub alphas: Vec<f64>,
    pub outputs: Vec<Sample>,
    /// Largest guided-prediction norm seen along each trajectory.
    pub norm_traces: Vec<f64>,
}

/// Integrates every guidance config from the same initial noise.
pub fn integrate(
    model: &dyn VelocityModel,
    source: &Sample,
    cond: Instruction,
    configs: &[GuidanceConfig],
    noise: &[f64],
    steps: usize,
) -> Result<(Vec<Sample>, Vec<f64>), SamplerError> {
    let dim = model.task().dim();
    if source.dim() != dim || noise.len() != dim {
        return Err(SamplerError::Dim {
            got: if source.dim() != dim { source.dim() } else { noise.len() },
            expected: dim,
        });
    }
    if !cond.is_edit() {
        return Err(SamplerError::NotAnEdit(cond.0));
    }
    for c in configs {
        c.validate()?;
    }
    let grid = timestep_grid(steps)?;
    let mut zs: Vec<Vec<f64>> = vec![noise.to_vec(); configs.len()];
    let mut traces = vec![0.0f64; configs.len()];
    for (step, pair) in grid.windows(2).enumerate() {
        let (t, t_next) = (pair[0], pair[1]);
        let dt = t - t_next;
        let time = TimePoint::new(t)?;
        let states: Vec<LatentState> = zs.iter().map(|z| LatentState { z: z.clone(), t: time }).collect();
        let batch: Vec<Query<'_>> = configs
            .iter()
            .zip(&states)
            .flat_map(|(c, s)| queries(c.variant, s, source, cond))
            .collect();
        let mut outputs = model.predict_batch(&batch)?.into_iter();
        for (lane, (c, state)) in configs.iter().zip(&states).enumerate() {
            let n = c.variant.network_roles().len();
            let preds = assemble(c.variant, outputs.by_ref().take(n), state, source)?;
            let v = guided(&preds, c)?;
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let z = &mut zs[lane];
            for (zi, vi) in z.iter_mut().zip(&v) {
                *zi -= dt * vi;
            }
            let rms = (z.iter().map(|x| x * x).sum::<f64>() / dim as f64).sqrt();
            if !(norm.is_finite() && rms.is_finite() && rms <= DIVERGENCE_RMS) {
                return Err(SamplerError::Diverged {
                    step,
                    t,
                    variant: c.variant,
                    alpha: c.alpha,
                });
            }
            traces[lane] = traces[lane].max(norm);
        }
    }
    Ok((zs.into_iter().map(Sample).collect(), traces))
}

/// Samples one output from the seeded initial noise.
pub fn sample_one(
    model: &dyn VelocityModel,
    source: &Sample,
    cond: Instruction,
    guidance: &GuidanceConfig,
    seed: u64,
    steps: usize,
) -> Result<Sample, SamplerError> {
    let noise = initial_noise(seed, model.task().dim());
    let (mut out, _) = integrate(model, source, cond, std::slice::from_ref(guidance), &noise, steps)?;
    Ok(out.remove(0))
}

/// One output per α, all from a single shared noise draw.
pub fn sweep(model: &dyn VelocityModel, source: &Sample, cond: Instruction, cfg: &SweepConfig) -> Result<Sweep, SamplerError> {
    cfg.validate()?;
    let configs: Vec<GuidanceConfig> = cfg.alphas.iter().map(|&a| cfg.guidance(a)).collect();
    let noise = initial_noise(cfg.seed, model.task().dim());
    let (outputs, norm_traces) = integrate(model, source, cond, &configs, &noise, cfg.steps)?;
    Ok(Sweep {
        source: source.clone(),
        instruction: cond,
        alphas: cfg.alphas.clone(),
        outputs,
        norm_traces,
    })
}

/// `‖a − b‖ / ‖b‖`.
pub fn relative_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let base: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / base.max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DenoiserNet;
    use crate::rng::seeded;
    use crate::task::TaskKind;

    fn setup() -> (DenoiserNet, Sample) {
        let net = DenoiserNet::init_with(3, TaskKind::Vec, 32, 2);
        let src = TaskKind::Vec.make_triplet(&mut seeded(11), Some(Instruction(0))).source;
        (net, src)
    }

    #[test]
    fn alpha_grid() {
        assert_eq!(uniform_alphas(6), vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0]);
        assert_eq!(uniform_alphas(1), vec![0.0]);
        assert_eq!(SweepConfig::default().alphas.len(), 6);
        assert_eq!(SweepConfig::default().steps, 64);
    }

    #[test]
    fn config_validation() {
        let bad = SweepConfig {
            alphas: vec![0.5, 0.2],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(SamplerError::Alphas(_))));
        let bad = SweepConfig {
            alphas: vec![1.5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SweepConfig {
            steps: 1,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rejects_reserved_instructions() {
        let (net, src) = setup();
        let cfg = SweepConfig::default();
        assert!(matches!(
            sweep(&net, &src, Instruction::ID, &cfg),
            Err(SamplerError::NotAnEdit(5))
        ));
    }

    #[test]
    fn deterministic() {
        let (net, src) = setup();
        for variant in Variant::ALL {
            let cfg = SweepConfig {
                variant,
                steps: 8,
                ..Default::default()
            };
            let a = sweep(&net, &src, Instruction(1), &cfg).unwrap();
            let b = sweep(&net, &src, Instruction(1), &cfg).unwrap();
            assert_eq!(a, b);
            assert!(a.outputs.iter().all(|o| o.iter().all(|x| x.is_finite())));
        }
    }

    #[test]
    fn lanes_match_single_samples_and_permutations() {
        let (net, src) = setup();
        let cfg = SweepConfig {
            steps: 8,
            seed: 5,
            ..Default::default()
        };
        let s = sweep(&net, &src, Instruction(2), &cfg).unwrap();
        for (alpha, out) in cfg.alphas.iter().zip(&s.outputs) {
            let one = sample_one(&net, &src, Instruction(2), &cfg.guidance(*alpha), 5, 8).unwrap();
            assert_eq!(&one, out);
        }
        let configs: Vec<GuidanceConfig> = [1.0, 0.2, 0.6].iter().map(|&a| cfg.guidance(a)).collect();
        let (permuted, _) = integrate(&net, &src, Instruction(2), &configs, &initial_noise(5, 8), 8).unwrap();
        assert_eq!(permuted[0], s.outputs[5]);
        assert_eq!(permuted[1], s.outputs[1]);
        assert_eq!(permuted[2], s.outputs[3]);
    }

    #[test]
    fn adaor_at_full_strength_matches_cfg() {
        let (net, src) = setup();
        let ada = GuidanceConfig::new(Variant::Adaor, 4.0, 1.0, Scheduler::Sqrt).unwrap();
        let cfg = GuidanceConfig::new(Variant::CfgSweep, 4.0, 1.0, Scheduler::Sqrt).unwrap();
        let a = sample_one(&net, &src, Instruction(0), &ada, 9, 16).unwrap();
        let b = sample_one(&net, &src, Instruction(0), &cfg, 9, 16).unwrap();
        assert!(relative_l2(&a, &b) < 1e-9);
    }

    #[test]
    fn different_seeds_differ() {
        let (net, src) = setup();
        let g = GuidanceConfig::new(Variant::Adaor, 4.0, 0.5, Scheduler::Sqrt).unwrap();
        let a = sample_one(&net, &src, Instruction(0), &g, 1, 8).unwrap();
        let b = sample_one(&net, &src, Instruction(0), &g, 2, 8).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn divergence_reports_step_and_variant() {
        let (net, src) = setup();
        let g = GuidanceConfig::new(Variant::CfgId, 1.0e9, 1.0, Scheduler::Sqrt).unwrap();
        match sample_one(&net, &src, Instruction(0), &g, 0, 8) {
            Err(SamplerError::Diverged { step, variant, alpha, .. }) => {
                assert_eq!(variant, Variant::CfgId);
                assert_eq!(alpha, 1.0);
                assert!(step < 8);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn relative_l2_basics() {
        assert_eq!(relative_l2(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((relative_l2(&[0.0, 0.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
    }
}
