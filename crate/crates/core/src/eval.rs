//! Evaluation protocol: seeded cases, per-variant sweeps with metrics and
//! median aggregates, and the identity-token oracle report.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{analytical_id_prediction, noise_forward, FlowError, TimePoint, DEFAULT_STEPS};
use crate::guidance::{Scheduler, Variant, DEFAULT_SCALE};
use crate::metrics::{evaluate_sweep, text_direction_proxy, Embedding, EmbeddingKind, MetricError, MetricsReport};
use crate::model::{DenoiserNet, ModelError, VelocityModel};
use crate::rng::{domain, normal_vec, substream};
use crate::sampler::{sweep, uniform_alphas, SamplerError, SweepConfig};
use crate::task::{CaseParams, Instruction, Sample, TaskKind};

/// Number of cases averaged into each instruction direction.
pub const DIRECTION_CASES: usize = 16;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("invalid evaluation config: {0}")]
    Config(String),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// The source case for `(seed, index)`.
pub fn case_params(task: TaskKind, seed: u64, index: u64) -> CaseParams {
    task.sample_case(&mut substream(seed, domain::CASE, index))
}

/// Initial-noise seed for evaluation case `index`.
pub fn case_noise_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(index)
}

/// Ground-truth partial edits of `case` at each strength.
pub fn references(case: &CaseParams, ins: Instruction, alphas: &[f64]) -> Result<Vec<Sample>, EvalError> {
    alphas
        .iter()
        .map(|&a| Ok(case.edited(ins, a).map_err(MetricError::from)?.render()))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub n_cases: usize,
    pub variants: Vec<Variant>,
    pub w: f64,
    pub scheduler: Scheduler,
    pub alphas: Vec<f64>,
    pub steps: usize,
    pub seed: u64,
    pub embedding: EmbeddingKind,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_cases: 32,
            variants: vec![Variant::Adaor, Variant::CfgSweep, Variant::CfgId],
            w: DEFAULT_SCALE,
            scheduler: Scheduler::Sqrt,
            alphas: uniform_alphas(6),
            steps: DEFAULT_STEPS,
            seed: 0,
            embedding: EmbeddingKind::RandProj,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<(), EvalError> {
        if self.n_cases == 0 {
            return Err(EvalError::Config("n_cases must be at least 1".into()));
        }
        if self.variants.is_empty() {
            return Err(EvalError::Config("at least one variant is required".into()));
        }
        if self.alphas.len() < 3 {
            return Err(EvalError::Config("metrics need at least 3 strengths".into()));
        }
        self.sweep_config(Variant::Adaor, 0).validate()?;
        Ok(())
    }

    pub fn sweep_config(&self, variant: Variant, noise_seed: u64) -> SweepConfig {
        SweepConfig {
            alphas: self.alphas.clone(),
            steps: self.steps,
            seed: noise_seed,
            variant,
            w: self.w,
            scheduler: self.scheduler,
        }
    }

    /// `# key=value` lines describing this config.
    pub fn comment_lines(&self) -> Vec<String> {
        let variants: Vec<&str> = self.variants.iter().map(|v| v.name()).collect();
        let alphas: Vec<String> = self.alphas.iter().map(|a| a.to_string()).collect();
        vec![
            format!("# n_cases={}", self.n_cases),
            format!("# variants={}", variants.join(";")),
            format!("# w={}", self.w),
            format!("# scheduler={}", self.scheduler),
            format!("# alphas={}", alphas.join(";")),
            format!("# steps={}", self.steps),
            format!("# seed={}", self.seed),
            format!("# embedding={}", self.embedding),
        ]
    }
}

/// One evaluated sweep.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalRow {
    /// `case_index · 4 + instruction`.
    pub case_id: usize,
    pub instruction: Instruction,
    pub variant: Variant,
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub enum Outcome {
    Done { report: MetricsReport, norm_traces: Vec<f64>, outputs: Vec<Sample> },
    Diverged { step: usize },
}

impl EvalRow {
    pub fn report(&self) -> Option<&MetricsReport> {
        match &self.outcome {
            Outcome::Done { report, .. } => Some(report),
            Outcome::Diverged { .. } => None,
        }
    }
}

/// Median metrics for one variant.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub variant: Variant,
    pub sweeps: usize,
    pub diverged: usize,
    pub delta_smooth: f64,
    pub linearity_cv: f64,
    pub norm_dir: f64,
    pub traj_consistency: f64,
    pub mean_step: f64,
    pub mean_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub task: TaskKind,
    pub config: EvalConfig,
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Aggregate>,
}

/// Median of the finite values; NaN when there are none.
pub fn median(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.into_iter().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Sweeps every case, instruction and variant and aggregates medians.
pub fn run_eval(model: &dyn VelocityModel, cfg: &EvalConfig) -> Result<EvalReport, EvalError> {
    cfg.validate()?;
    let task = model.task();
    let emb = Embedding::new(cfg.embedding, task.dim());
    let dirs: Vec<Vec<f64>> = Instruction::edits()
        .map(|ins| text_direction_proxy(task, ins, &emb, DIRECTION_CASES, cfg.seed))
        .collect::<Result<_, _>>()?;
    let mut rows = Vec::new();
    for index in 0..cfg.n_cases {
        let source = case_params(task, cfg.seed, index as u64).render();
        for ins in Instruction::edits() {
            let case_id = index * Instruction::edits().count() + ins.0;
            let noise_seed = case_noise_seed(cfg.seed, case_id as u64);
            for &variant in &cfg.variants {
                let outcome = match sweep(model, &source, ins, &cfg.sweep_config(variant, noise_seed)) {
                    Ok(s) => Outcome::Done {
                        report: evaluate_sweep(&s, task, &emb, &dirs[ins.0])?,
                        norm_traces: s.norm_traces,
                        outputs: s.outputs,
                    },
                    Err(SamplerError::Diverged { step, .. }) => Outcome::Diverged { step },
                    Err(e) => return Err(e.into()),
                };
                rows.push(EvalRow {
                    case_id,
                    instruction: ins,
                    variant,
                    outcome,
                });
            }
        }
    }
    let aggregates = cfg.variants.iter().map(|&v| aggregate(v, &rows)).collect();
    Ok(EvalReport {
        task,
        config: cfg.clone(),
        rows,
        aggregates,
    })
}

fn aggregate(variant: Variant, rows: &[EvalRow]) -> Aggregate {
    let mine: Vec<&EvalRow> = rows.iter().filter(|r| r.variant == variant).collect();
    let reports: Vec<&MetricsReport> = mine.iter().filter_map(|r| r.report()).collect();
    let med = |f: fn(&MetricsReport) -> f64| median(reports.iter().map(|r| f(r)));
    Aggregate {
        variant,
        sweeps: mine.len(),
        diverged: mine.len() - reports.len(),
        delta_smooth: med(|r| r.delta_smooth),
        linearity_cv: med(|r| r.linearity_cv),
        norm_dir: med(|r| r.norm_dir),
        traj_consistency: med(|r| r.traj_consistency),
        mean_step: med(|r| r.mean_step),
        mean_residual: med(|r| r.mean_residual()),
    }
}

/// Fixed-precision rendering shared by every CSV writer so reruns are
/// byte-identical.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".to_string()
    } else {
        format!("{x:.9}")
    }
}

/// One metrics CSV row in the shared column order.
pub fn metrics_row(case_id: usize, variant: Variant, scheduler: Scheduler, w: f64, alpha_count: usize, r: Option<&MetricsReport>) -> String {
    let vals = match r {
        Some(r) => [r.delta_smooth, r.linearity_cv, r.norm_dir, r.traj_consistency, r.mean_step, r.mean_residual()],
        None => [f64::NAN; 6],
    };
    let vals: Vec<String> = vals.iter().map(|&v| fmt_f64(v)).collect();
    format!("{case_id},{variant},{scheduler},{},{alpha_count},{}", fmt_f64(w), vals.join(","))
}

impl EvalReport {
    /// Per-sweep rows followed by one `median` row per variant.
    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "# task={}", self.task)?;
        for line in self.config.comment_lines() {
            writeln!(out, "{line}")?;
        }
        writeln!(out, "{}", crate::metrics::CSV_HEADER)?;
        let cfg = &self.config;
        for r in &self.rows {
            writeln!(out, "{}", metrics_row(r.case_id, r.variant, cfg.scheduler, cfg.w, cfg.alphas.len(), r.report()))?;
        }
        for a in &self.aggregates {
            let vals = [a.delta_smooth, a.linearity_cv, a.norm_dir, a.traj_consistency, a.mean_step, a.mean_residual];
            let vals: Vec<String> = vals.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(
                out,
                "median,{},{},{},{},{}",
                a.variant,
                cfg.scheduler,
                fmt_f64(cfg.w),
                cfg.alphas.len(),
                vals.join(",")
            )?;
        }
        Ok(())
    }

    /// Fixed-width table of the aggregates.
    pub fn summary(&self) -> String {
        let mut s = format!(
            "{:<16}{:>8}{:>10}{:>14}{:>14}{:>10}{:>12}{:>12}\n",
            "variant", "sweeps", "diverged", "delta_smooth", "linearity_cv", "norm_dir", "consistency", "residual"
        );
        for a in &self.aggregates {
            s.push_str(&format!(
                "{:<16}{:>8}{:>10}{:>14.4}{:>14.4}{:>10.4}{:>12.4}{:>12.4}\n",
                a.variant.name(),
                a.sweeps,
                a.diverged,
                a.delta_smooth,
                a.linearity_cv,
                a.norm_dir,
                a.traj_consistency,
                a.mean_residual
            ));
        }
        s
    }

    pub fn aggregate(&self, variant: Variant) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.variant == variant)
    }

    /// Rows of `variant` in case order.
    pub fn rows_of(&self, variant: Variant) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.variant == variant)
    }
}

/// One identity-oracle measurement.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleRow {
    pub case: usize,
    pub t: f64,
    /// Cosine between the learned and closed-form identity velocities.
    pub cosine: f64,
    /// `‖learned − closed form‖ / ‖closed form‖`.
    pub rel_l2: f64,
    /// `‖closed form‖ · t`.
    pub norm_times_t: f64,
    /// `‖z − c_I‖`.
    pub offset_norm: f64,
}

impl OracleRow {
    pub fn law_error(&self) -> f64 {
        (self.norm_times_t - self.offset_norm).abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub task: TaskKind,
    pub seed: u64,
    pub rows: Vec<OracleRow>,
}

impl OracleReport {
    pub fn median_cosine(&self, t: f64) -> f64 {
        median(self.rows.iter().filter(|r| r.t == t).map(|r| r.cosine))
    }

    pub fn max_law_error(&self) -> f64 {
        self.rows.iter().map(OracleRow::law_error).fold(0.0, f64::max)
    }

    pub fn t_grid(&self) -> Vec<f64> {
        let mut ts: Vec<f64> = Vec::new();
        for r in &self.rows {
            if !ts.contains(&r.t) {
                ts.push(r.t);
            }
        }
        ts
    }

    pub fn write_csv(&self, mut out: impl Write) -> io::Result<()> {
        writeln!(out, "# task={}", self.task)?;
        writeln!(out, "# seed={}", self.seed)?;
        let ts: Vec<String> = self.t_grid().iter().map(|t| t.to_string()).collect();
        writeln!(out, "# t_grid={}", ts.join(";"))?;
        writeln!(out, "case,t,cosine,rel_l2,norm_times_t,offset_norm,law_error")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.case,
                r.t,
                fmt_f64(r.cosine),
                fmt_f64(r.rel_l2),
                fmt_f64(r.norm_times_t),
                fmt_f64(r.offset_norm),
                format!("{:.3e}", r.law_error())
            )?;
        }
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut s = format!("{:>6}{:>16}{:>16}\n", "t", "median_cosine", "max_law_error");
        for t in self.t_grid() {
            let law = self.rows.iter().filter(|r| r.t == t).map(OracleRow::law_error).fold(0.0, f64::max);
            s.push_str(&format!("{:>6}{:>16.4}{:>16.3e}\n", t, self.median_cosine(t), law));
        }
        s
    }
}

fn norm(a: &[f64]) -> f64 {
    a.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the learned identity velocity with `(z − c_I)/t` on noised
/// copies of seeded sources.
pub fn oracle_id(net: &DenoiserNet, n_cases: usize, t_grid: &[f64], seed: u64) -> Result<OracleReport, EvalError> {
    let task = net.task();
    let mut rows = Vec::new();
    for case in 0..n_cases {
        let source = case_params(task, seed, case as u64).render();
        let eps = normal_vec(&mut substream(seed, domain::ORACLE, case as u64), task.dim());
        for &t in t_grid {
            let state = noise_forward(&source, TimePoint::new(t)?, &eps)?;
            let learned = net.predict(&state, &source, Instruction::ID)?;
            let exact = analytical_id_prediction(&state, &source)?;
            let diff: Vec<f64> = learned.iter().zip(&exact).map(|(a, b)| a - b).collect();
            let dot: f64 = learned.iter().zip(&exact).map(|(a, b)| a * b).sum();
            let offset: Vec<f64> = state.z.iter().zip(source.iter()).map(|(z, c)| z - c).collect();
            rows.push(OracleRow {
                case,
                t,
                cosine: dot / (norm(&learned) * norm(&exact)),
                rel_l2: norm(&diff) / norm(&exact),
                norm_times_t: norm(&exact) * t,
                offset_norm: norm(&offset),
            });
        }
    }
    Ok(OracleReport { task, seed, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DenoiserNet {
        DenoiserNet::init_with(0, TaskKind::Vec, 16, 1)
    }

    #[test]
    fn median_examples() {
        assert_eq!(median([3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median([4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median([f64::NAN, 1.0]), 1.0);
        assert!(median([f64::NAN]).is_nan());
    }

    #[test]
    fn one_aggregate_per_variant() {
        let cfg = EvalConfig {
            n_cases: 2,
            steps: 4,
            ..Default::default()
        };
        let r = run_eval(&tiny(), &cfg).unwrap();
        assert_eq!(r.rows.len(), 2 * 4 * 3);
        assert_eq!(r.aggregates.len(), 3);
        let mut csv = Vec::new();
        r.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert_eq!(text.lines().filter(|l| l.starts_with("median,")).count(), 3);
        assert!(text.lines().any(|l| l == crate::metrics::CSV_HEADER));
        assert!(text.lines().next().unwrap().starts_with('#'));
        let mut again = Vec::new();
        run_eval(&tiny(), &cfg).unwrap().write_csv(&mut again).unwrap();
        assert_eq!(text.as_bytes(), &again[..]);
    }

    #[test]
    fn config_validation() {
        let bad = EvalConfig {
            n_cases: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EvalConfig {
            alphas: vec![0.0, 1.0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oracle_law_is_exact_and_untrained_net_is_reported() {
        let r = oracle_id(&tiny(), 4, &[0.3, 0.5, 0.9], 0).unwrap();
        assert_eq!(r.rows.len(), 12);
        assert!(r.max_law_error() < 1e-9);
        assert!(r.median_cosine(0.5).is_finite());
        assert_eq!(r.t_grid(), vec![0.3, 0.5, 0.9]);
    }

    #[test]
    fn references_interpolate() {
        let case = case_params(TaskKind::Vec, 0, 0);
        let refs = references(&case, Instruction(0), &[0.0, 1.0]).unwrap();
        assert_eq!(refs[0], case.render());
        assert!(references(&case, Instruction::NULL, &[0.5]).is_err());
    }
}
