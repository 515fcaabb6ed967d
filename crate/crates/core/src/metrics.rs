//! Trajectory metrics over an α-sweep, computed in a proxy embedding space.
//!
//! For embedded outputs `e_0 … e_{N−1}` with steps `d_i = e_{i+1} − e_i`:
//!
//! * stepwise distances `S_i = ‖d_i‖`
//! * linearity: `σ(S)/μ(S)` with population σ
//! * δ_smooth: `mean ‖e_{i+1} − 2e_i + e_{i−1}‖ / μ(S)`
//! * normalized direction: `mean cos(d_i, u) / cos(e_last − e_0, u)` for an
//!   instruction direction `u`
//! * trajectory consistency: `mean cos(d_i, e_last − e_0)`
//!
//! Steps shorter than [`ZERO_STEP`] are skipped by the cosine metrics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{domain, normal_vec, seeded, substream};
use crate::sampler::Sweep;
use crate::task::{DiscParams, Instruction, Sample, TaskError, TaskKind};

pub const ZERO_STEP: f64 = 1e-12;
pub const PROJECTION_SEED: u64 = 1234;
pub const PROJECTION_DIM: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("need at least {need} outputs, got {got}")]
    TooFew { need: usize, got: usize },
    #[error("instruction direction has zero length")]
    ZeroText,
    #[error("global trajectory direction has zero length")]
    ZeroGlobal,
    #[error("global direction is orthogonal to the instruction direction")]
    Orthogonal,
    #[error("embedding expects dimension {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("unknown embedding `{0}`; expected pixel or randproj")]
    UnknownEmbedding(String),
    #[error(transparent)]
    Task(#[from] TaskError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Pixel,
    RandProj,
}

impl EmbeddingKind {
    pub fn name(self) -> &'static str {
        match self {
            EmbeddingKind::Pixel => "pixel",
            EmbeddingKind::RandProj => "randproj",
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EmbeddingKind {
    type Err = MetricError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pixel" => Ok(EmbeddingKind::Pixel),
            "randproj" => Ok(EmbeddingKind::RandProj),
            other => Err(MetricError::UnknownEmbedding(other.to_string())),
        }
    }
}

/// Maps samples into the space where metrics are measured.
#[derive(Debug, Clone, PartialEq)]
pub enum Embedding {
    Pixel,
    /// Fixed `64 × D` projection, rows drawn `N(0, 1/D)` from seed 1234.
    RandProj { dim: usize, matrix: Vec<f64> },
}

impl Embedding {
    pub fn new(kind: EmbeddingKind, dim: usize) -> Self {
        match kind {
            EmbeddingKind::Pixel => Embedding::Pixel,
            EmbeddingKind::RandProj => {
                let scale = 1.0 / (dim as f64).sqrt();
                let matrix = normal_vec(&mut seeded(PROJECTION_SEED), PROJECTION_DIM * dim)
                    .into_iter()
                    .map(|x| x * scale)
                    .collect();
                Embedding::RandProj { dim, matrix }
            }
        }
    }

    pub fn kind(&self) -> EmbeddingKind {
        match self {
            Embedding::Pixel => EmbeddingKind::Pixel,
            Embedding::RandProj { .. } => EmbeddingKind::RandProj,
        }
    }

    pub fn embed(&self, x: &[f64]) -> Result<Vec<f64>, MetricError> {
        match self {
            Embedding::Pixel => Ok(x.to_vec()),
            Embedding::RandProj { dim, matrix } => {
                if x.len() != *dim {
                    return Err(MetricError::Dim {
                        expected: *dim,
                        got: x.len(),
                    });
                }
                Ok(matrix.chunks_exact(*dim).map(|row| dot(row, x)).collect())
            }
        }
    }

    pub fn embed_all(&self, outputs: &[Sample]) -> Result<Vec<Vec<f64>>, MetricError> {
        outputs.iter().map(|o| self.embed(o)).collect()
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn need(points: &[Vec<f64>], n: usize) -> Result<(), MetricError> {
    if points.len() < n {
        Err(MetricError::TooFew {
            need: n,
            got: points.len(),
        })
    } else {
        Ok(())
    }
}

/// `‖e_{i+1} − e_i‖` for each consecutive pair.
pub fn stepwise_distances(points: &[Vec<f64>]) -> Result<Vec<f64>, MetricError> {
    need(points, 2)?;
    Ok(points.windows(2).map(|p| norm(&sub(&p[1], &p[0]))).collect())
}

/// Coefficient of variation of the stepwise distances; NaN when the mean
/// step vanishes.
pub fn linearity_cv(points: &[Vec<f64>]) -> Result<f64, MetricError> {
    need(points, 3)?;
    let s = stepwise_distances(points)?;
    let mu = mean(&s);
    if mu <= ZERO_STEP {
        return Ok(f64::NAN);
    }
    let var = s.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / s.len() as f64;
    Ok(var.sqrt() / mu)
}

/// Mean second-difference norm over mean step length; NaN when the mean
/// step vanishes.
pub fn delta_smooth(points: &[Vec<f64>]) -> Result<f64, MetricError> {
    need(points, 3)?;
    let mu = mean(&stepwise_distances(points)?);
    if mu <= ZERO_STEP {
        return Ok(f64::NAN);
    }
    let second: Vec<f64> = points
        .windows(3)
        .map(|p| {
            let d: Vec<f64> = (0..p[0].len()).map(|k| p[2][k] - 2.0 * p[1][k] + p[0][k]).collect();
            norm(&d)
        })
        .collect();
    Ok(mean(&second) / mu)
}

fn global(points: &[Vec<f64>]) -> Result<Vec<f64>, MetricError> {
    let g = sub(&points[points.len() - 1], &points[0]);
    if norm(&g) <= ZERO_STEP {
        return Err(MetricError::ZeroGlobal);
    }
    Ok(g)
}

/// Mean cosine of non-degenerate steps against `dir`; NaN if every step
/// is degenerate.
fn mean_step_cosine(points: &[Vec<f64>], dir: &[f64]) -> f64 {
    let cos: Vec<f64> = points
        .windows(2)
        .map(|p| sub(&p[1], &p[0]))
        .filter(|d| norm(d) >= ZERO_STEP)
        .map(|d| cosine(&d, dir))
        .collect();
    if cos.is_empty() {
        f64::NAN
    } else {
        mean(&cos)
    }
}

pub fn normalized_dir(points: &[Vec<f64>], dir_text: &[f64]) -> Result<f64, MetricError> {
    need(points, 2)?;
    if norm(dir_text) <= ZERO_STEP {
        return Err(MetricError::ZeroText);
    }
    let g = global(points)?;
    let denom = cosine(&g, dir_text);
    if denom.abs() <= ZERO_STEP {
        return Err(MetricError::Orthogonal);
    }
    Ok(mean_step_cosine(points, dir_text) / denom)
}

pub fn traj_consistency(points: &[Vec<f64>]) -> Result<f64, MetricError> {
    need(points, 2)?;
    let g = global(points)?;
    Ok(mean_step_cosine(points, &g))
}

/// Unit-length mean of `E(full edit) − E(source)` over `m` seeded cases.
pub fn text_direction_proxy(
    task: TaskKind,
    instruction: Instruction,
    emb: &Embedding,
    m: usize,
    seed: u64,
) -> Result<Vec<f64>, MetricError> {
    if !instruction.is_edit() {
        return Err(TaskError::NotAnEdit(task.token_name(instruction)?.to_string()).into());
    }
    let mut acc: Option<Vec<f64>> = None;
    for i in 0..m {
        let case = task.sample_case(&mut substream(seed, domain::TEXT_DIRECTION, i as u64));
        let src = emb.embed(&case.render())?;
        let tgt = emb.embed(&case.edited(instruction, 1.0)?.render())?;
        let d = sub(&tgt, &src);
        match acc.as_mut() {
            None => acc = Some(d),
            Some(a) => a.iter_mut().zip(&d).for_each(|(x, y)| *x += y),
        }
    }
    let acc = acc.ok_or(MetricError::TooFew { need: 1, got: 0 })?;
    let n = norm(&acc);
    if n <= ZERO_STEP {
        return Err(MetricError::ZeroText);
    }
    Ok(acc.into_iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub delta_smooth: f64,
    pub linearity_cv: f64,
    pub norm_dir: f64,
    pub traj_consistency: f64,
    pub mean_step: f64,
    /// Best-fit re-render residual per output; empty for the vec task.
    pub manifold_residuals: Vec<f64>,
    /// Why any metric is NaN.
    pub flags: Vec<String>,
}

impl MetricsReport {
    pub fn mean_residual(&self) -> f64 {
        if self.manifold_residuals.is_empty() {
            f64::NAN
        } else {
            mean(&self.manifold_residuals)
        }
    }
}

/// Header of the per-sweep metrics CSV.
pub const CSV_HEADER: &str =
    "case_id,variant,scheduler,w,alpha_count,delta_smooth,linearity_cv,norm_dir,traj_consistency,mean_step,mean_residual";

/// Fit residual of a disc image.
pub fn manifold_residual(image: &[f64]) -> f64 {
    DiscParams::fit(image).1
}

/// All metrics for one sweep. Degenerate trajectories produce NaN fields
/// with an explanatory flag rather than an error.
pub fn evaluate_sweep(sweep: &Sweep, task: TaskKind, emb: &Embedding, dir_text: &[f64]) -> Result<MetricsReport, MetricError> {
    let points = emb.embed_all(&sweep.outputs)?;
    need(&points, 3)?;
    let mut flags = Vec::new();
    let mean_step = mean(&stepwise_distances(&points)?);
    let delta = delta_smooth(&points)?;
    let cv = linearity_cv(&points)?;
    if delta.is_nan() || cv.is_nan() {
        flags.push("zero mean step".to_string());
    }
    let mut soft = |r: Result<f64, MetricError>| match r {
        Ok(v) => {
            if v.is_nan() {
                flags.push("all steps degenerate".to_string());
            }
            v
        }
        Err(e @ (MetricError::ZeroGlobal | MetricError::Orthogonal | MetricError::ZeroText)) => {
            flags.push(e.to_string());
            f64::NAN
        }
        Err(_) => f64::NAN,
    };
    let norm_dir = soft(normalized_dir(&points, dir_text));
    let traj = soft(traj_consistency(&points));
    flags.dedup();
    let manifold_residuals = match task {
        TaskKind::Disc => sweep.outputs.iter().map(|o| manifold_residual(o)).collect(),
        TaskKind::Vec => Vec::new(),
    };
    Ok(MetricsReport {
        delta_smooth: delta,
        linearity_cv: cv,
        norm_dir,
        traj_consistency: traj,
        mean_step,
        manifold_residuals,
        flags,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::normal_vec;
    use proptest::prelude::*;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    fn line(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = seeded(seed);
        let a = normal_vec(&mut r, dim);
        let d = normal_vec(&mut r, dim);
        (0..n).map(|i| a.iter().zip(&d).map(|(x, y)| x + i as f64 * y).collect()).collect()
    }

    #[test]
    fn stepwise_examples() {
        assert_eq!(stepwise_distances(&pts(&[0.0, 1.0, 3.0])).unwrap(), vec![1.0, 2.0]);
        assert_eq!(stepwise_distances(&pts(&[2.0, 2.0])).unwrap(), vec![0.0]);
        assert_eq!(stepwise_distances(&line(6, 3, 0)).unwrap().len(), 5);
        assert!(matches!(stepwise_distances(&pts(&[1.0])), Err(MetricError::TooFew { .. })));
    }

    #[test]
    fn cv_examples() {
        assert!((linearity_cv(&pts(&[0.0, 1.0, 3.0])).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!(linearity_cv(&line(6, 4, 1)).unwrap().abs() < 1e-9);
        assert!(linearity_cv(&pts(&[1.0, 1.0, 1.0])).unwrap().is_nan());
    }

    #[test]
    fn delta_smooth_examples() {
        assert!((delta_smooth(&pts(&[0.0, 1.0, 3.0])).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(delta_smooth(&line(6, 4, 2)).unwrap().abs() < 1e-9);
        assert!(delta_smooth(&pts(&[0.0, 0.0, 0.0])).unwrap().is_nan());
    }

    #[test]
    fn direction_examples() {
        let rev = pts(&[0.0, 1.0, 0.5, 2.0]);
        assert!((normalized_dir(&rev, &[1.0]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((traj_consistency(&rev).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let l = line(5, 3, 3);
        let u = vec![0.3, -0.1, 0.7];
        assert!((normalized_dir(&l, &u).unwrap() - 1.0).abs() < 1e-9);
        assert!((traj_consistency(&l).unwrap() - 1.0).abs() < 1e-9);
        assert_eq!(traj_consistency(&pts(&[0.0, 1.0, 0.0])), Err(MetricError::ZeroGlobal));
        let flat = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![2.0, 0.0]];
        assert_eq!(normalized_dir(&flat, &[0.0, 1.0]), Err(MetricError::Orthogonal));
        assert_eq!(normalized_dir(&flat, &[0.0, 0.0]), Err(MetricError::ZeroText));
    }

    #[test]
    fn duplicate_steps_are_skipped() {
        let p = pts(&[0.0, 1.0, 1.0, 2.0]);
        assert_eq!(traj_consistency(&p).unwrap(), 1.0);
    }

    #[test]
    fn projection_is_fixed() {
        let a = Embedding::new(EmbeddingKind::RandProj, 256);
        let b = Embedding::new(EmbeddingKind::RandProj, 256);
        assert_eq!(a, b);
        let Embedding::RandProj { matrix, .. } = &a else { unreachable!() };
        assert_eq!(matrix.len(), 64 * 256);
        let var = matrix.iter().map(|x| x * x).sum::<f64>() / matrix.len() as f64;
        assert!((var - 1.0 / 256.0).abs() < 0.1 / 256.0);
        assert_eq!(a.embed(&vec![1.0; 256]).unwrap().len(), 64);
        assert!(a.embed(&[1.0; 8]).is_err());
        assert_eq!(Embedding::Pixel.embed(&[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn text_direction() {
        let emb = Embedding::Pixel;
        let brighten = TaskKind::Disc.instruction("brighten").unwrap();
        let u = text_direction_proxy(TaskKind::Disc, brighten, &emb, 16, 0).unwrap();
        assert!((norm(&u) - 1.0).abs() < 1e-12);
        assert!(mean(&u) >= 0.0);
        assert_eq!(u, text_direction_proxy(TaskKind::Disc, brighten, &emb, 16, 0).unwrap());
        assert!(text_direction_proxy(TaskKind::Disc, Instruction::NULL, &emb, 16, 0).is_err());
    }

    fn sweep_of(outputs: Vec<Sample>) -> Sweep {
        let n = outputs.len();
        Sweep {
            source: outputs[0].clone(),
            instruction: Instruction(0),
            alphas: crate::sampler::uniform_alphas(n),
            outputs,
            norm_traces: vec![0.0; n],
        }
    }

    #[test]
    fn identical_outputs_are_flagged() {
        let s = sweep_of(vec![Sample(vec![0.5; 8]); 4]);
        let r = evaluate_sweep(&s, TaskKind::Vec, &Embedding::Pixel, &[1.0; 8]).unwrap();
        assert!(r.delta_smooth.is_nan() && r.linearity_cv.is_nan());
        assert!(r.norm_dir.is_nan() && r.traj_consistency.is_nan());
        assert!(!r.flags.is_empty());
        assert!(r.mean_residual().is_nan());
    }

    #[test]
    fn ground_truth_vec_trajectory_is_linear() {
        let emb = Embedding::new(EmbeddingKind::RandProj, 8);
        for (k, ins) in Instruction::edits().enumerate() {
            let case = TaskKind::Vec.sample_case(&mut substream(0, domain::CASE, k as u64));
            let outputs = crate::sampler::uniform_alphas(6)
                .iter()
                .map(|&a| case.edited(ins, a).unwrap().render())
                .collect();
            let dir = text_direction_proxy(TaskKind::Vec, ins, &emb, 16, 0).unwrap();
            let r = evaluate_sweep(&sweep_of(outputs), TaskKind::Vec, &emb, &dir).unwrap();
            assert!(r.delta_smooth < 1e-9 && r.linearity_cv < 1e-9, "{ins:?} {r:?}");
            assert!((r.traj_consistency - 1.0).abs() < 1e-9);
            assert!(r.flags.is_empty() && r.manifold_residuals.is_empty());
        }
    }

    #[test]
    fn ground_truth_disc_trajectory_stays_on_manifold() {
        let emb = Embedding::new(EmbeddingKind::RandProj, 256);
        for (k, ins) in Instruction::edits().enumerate() {
            let case = TaskKind::Disc.sample_case(&mut substream(0, domain::CASE, k as u64));
            let outputs = crate::sampler::uniform_alphas(6)
                .iter()
                .map(|&a| case.edited(ins, a).unwrap().render())
                .collect();
            let dir = text_direction_proxy(TaskKind::Disc, ins, &emb, 16, 0).unwrap();
            let r = evaluate_sweep(&sweep_of(outputs), TaskKind::Disc, &emb, &dir).unwrap();
            assert!(r.flags.is_empty(), "{ins:?} {r:?}");
            assert!(r.delta_smooth.is_finite() && r.linearity_cv.is_finite());
            assert!(r.traj_consistency > 0.0 && r.norm_dir > 0.0);
            assert_eq!(r.manifold_residuals.len(), 6);
            assert!(r.mean_residual() < 1e-3, "{ins:?} {r:?}");
        }
    }

    proptest! {
        #[test]
        fn scale_invariance(seed in 0u64..200, k in 0.01f64..100.0) {
            let mut r = seeded(seed);
            let p: Vec<Vec<f64>> = (0..5).map(|_| normal_vec(&mut r, 3)).collect();
            let u = normal_vec(&mut r, 3);
            let q: Vec<Vec<f64>> = p.iter().map(|v| v.iter().map(|x| k * x).collect()).collect();
            let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + a.abs());
            prop_assert!(close(delta_smooth(&p).unwrap(), delta_smooth(&q).unwrap()));
            prop_assert!(close(linearity_cv(&p).unwrap(), linearity_cv(&q).unwrap()));
            prop_assert!(close(traj_consistency(&p).unwrap(), traj_consistency(&q).unwrap()));
            prop_assert!(close(normalized_dir(&p, &u).unwrap(), normalized_dir(&q, &u).unwrap()));
            let tc = traj_consistency(&p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&tc));
            prop_assert!(delta_smooth(&p).unwrap() >= 0.0 && linearity_cv(&p).unwrap() >= 0.0);
        }
    }
}
