//! Guidance algebra over velocity predictions.
//!
//! All combinations are linear in the predictions, so they apply to
//! velocities exactly as they would to noise predictions.
//!
//! * CFG: `n + w·(c − n)`
//! * adaptive origin: `O(α) = s(α)·n + (1 − s(α))·i`
//! * AdaOr: `O(α) + α·w·(c − n)`
//! * CFG with identity origin: `i + w·(c − i)`
//!
//! where `c`, `n`, `i` are the conditional, null and identity predictions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{analytical_id_prediction, FlowError, LatentState};
use crate::model::{ModelError, Query, VelocityModel};
use crate::task::{Instruction, Sample};

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("edit strength {0} outside [0, 1]")]
    Alpha(f64),
    #[error("guidance scale {0} must be finite and non-negative")]
    Scale(f64),
    #[error("variant {0} needs the identity prediction")]
    MissingIdentity(Variant),
    #[error("prediction dimensions differ: {0} vs {1}")]
    Dim(usize, usize),
    #[error("unknown {kind} `{name}`; expected one of {expected}")]
    Parse {
        kind: &'static str,
        name: String,
        expected: &'static str,
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Standard CFG with the strength mapped to the scale, `w_eff = α·w`.
    #[serde(rename = "cfg")]
    CfgSweep,
    #[serde(rename = "adaor")]
    Adaor,
    /// CFG with the identity prediction as origin, `w_eff = α·w`.
    #[serde(rename = "cfgid")]
    CfgId,
    /// AdaOr with the closed-form `(z − c_I)/t` in place of the learned
    /// identity prediction.
    #[serde(rename = "adaor-analytic")]
    AdaorAnalytic,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::CfgSweep, Variant::Adaor, Variant::CfgId, Variant::AdaorAnalytic];

    pub fn name(self) -> &'static str {
        match self {
            Variant::CfgSweep => "cfg",
            Variant::Adaor => "adaor",
            Variant::CfgId => "cfgid",
            Variant::AdaorAnalytic => "adaor-analytic",
        }
    }

    /// Instructions whose network predictions this variant needs, in
    /// `(cond, null, id)` order.
    pub fn network_roles(self) -> &'static [Role] {
        match self {
            Variant::CfgSweep | Variant::AdaorAnalytic => &[Role::Cond, Role::Null],
            Variant::Adaor | Variant::CfgId => &[Role::Cond, Role::Null, Role::Id],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = GuidanceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| GuidanceError::Parse {
                kind: "variant",
                name: s.to_string(),
                expected: "adaor, cfg, cfgid, adaor-analytic",
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Cond,
    Null,
    Id,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheduler {
    Sqrt,
    Linear,
}

impl Scheduler {
    pub fn name(self) -> &'static str {
        match self {
            Scheduler::Sqrt => "sqrt",
            Scheduler::Linear => "linear",
        }
    }

    /// `s(α)`: monotone with `s(0) = 0` and `s(1) = 1`.
    pub fn eval(self, alpha: f64) -> Result<f64, GuidanceError> {
        check_alpha(alpha)?;
        Ok(match self {
            Scheduler::Sqrt => alpha.sqrt(),
            Scheduler::Linear => alpha,
        })
    }
}

impl fmt::Display for Scheduler {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheduler {
    type Err = GuidanceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sqrt" => Ok(Scheduler::Sqrt),
            "linear" => Ok(Scheduler::Linear),
            _ => Err(GuidanceError::Parse {
                kind: "scheduler",
                name: s.to_string(),
                expected: "sqrt, linear",
            }),
        }
    }
}

fn check_alpha(alpha: f64) -> Result<(), GuidanceError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(GuidanceError::Alpha(alpha))
    }
}

pub const DEFAULT_SCALE: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub variant: Variant,
    pub w: f64,
    pub alpha: f64,
    pub scheduler: Scheduler,
}

impl GuidanceConfig {
    pub fn new(variant: Variant, w: f64, alpha: f64, scheduler: Scheduler) -> Result<Self, GuidanceError> {
        let cfg = Self {
            variant,
            w,
            alpha,
            scheduler,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        check_alpha(self.alpha)?;
        if !(self.w.is_finite() && self.w >= 0.0) {
            return Err(GuidanceError::Scale(self.w));
        }
        Ok(())
    }
}

/// The predictions one guided step combines.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub eps_cond: Vec<f64>,
    pub eps_null: Vec<f64>,
    pub eps_id: Option<Vec<f64>>,
}

impl PredictionSet {
    fn check(&self) -> Result<(), GuidanceError> {
        let d = self.eps_cond.len();
        let mut lens = vec![self.eps_null.len()];
        lens.extend(self.eps_id.as_ref().map(Vec::len));
        for l in lens {
            if l != d {
                return Err(GuidanceError::Dim(d, l));
            }
        }
        Ok(())
    }

    fn id(&self, variant: Variant) -> Result<&[f64], GuidanceError> {
        self.eps_id.as_deref().ok_or(GuidanceError::MissingIdentity(variant))
    }
}

pub fn cfg_combine(p: &PredictionSet, w: f64) -> Result<Vec<f64>, GuidanceError> {
    p.check()?;
    Ok(p.eps_null
        .iter()
        .zip(&p.eps_cond)
        .map(|(n, c)| n + w * (c - n))
        .collect())
}

pub fn adaptive_origin(p: &PredictionSet, alpha: f64, scheduler: Scheduler) -> Result<Vec<f64>, GuidanceError> {
    p.check()?;
    let s = scheduler.eval(alpha)?;
    let id = p.id(Variant::Adaor)?;
    Ok(p.eps_null
        .iter()
        .zip(id)
        .map(|(n, i)| s * n + (1.0 - s) * i)
        .collect())
}

/// `O(α) + α·w·(c − n)`. Exactly the identity prediction at `α = 0` and
/// exactly [`cfg_combine`] at `α = 1`.
pub fn adaor_combine(p: &PredictionSet, cfg: &GuidanceConfig) -> Result<Vec<f64>, GuidanceError> {
    cfg.validate()?;
    p.id(cfg.variant)?;
    let origin = adaptive_origin(p, cfg.alpha, cfg.scheduler)?;
    let scale = cfg.alpha * cfg.w;
    Ok(origin
        .iter()
        .zip(p.eps_null.iter().zip(&p.eps_cond))
        .map(|(o, (n, c))| o + scale * (c - n))
        .collect())
}

pub fn cfgid_combine(p: &PredictionSet, w: f64) -> Result<Vec<f64>, GuidanceError> {
    p.check()?;
    let id = p.id(Variant::CfgId)?;
    Ok(id.iter()
        .zip(&p.eps_cond)
        .map(|(i, c)| i + w * (c - i))
        .collect())
}

/// The guided velocity for `cfg.variant`.
pub fn guided(p: &PredictionSet, cfg: &GuidanceConfig) -> Result<Vec<f64>, GuidanceError> {
    cfg.validate()?;
    match cfg.variant {
        Variant::CfgSweep => cfg_combine(p, cfg.alpha * cfg.w),
        Variant::CfgId => cfgid_combine(p, cfg.alpha * cfg.w),
        Variant::Adaor | Variant::AdaorAnalytic => adaor_combine(p, cfg),
    }
}

fn role_instruction(role: Role, cond: Instruction) -> Instruction {
    match role {
        Role::Cond => cond,
        Role::Null => Instruction::NULL,
        Role::Id => Instruction::ID,
    }
}

/// Network queries for one state, in [`Variant::network_roles`] order.
pub fn queries<'a>(
    variant: Variant,
    state: &'a LatentState,
    source: &'a Sample,
    cond: Instruction,
) -> impl Iterator<Item = Query<'a>> + 'a {
    variant.network_roles().iter().map(move |&role| Query {
        z: &state.z,
        source,
        instruction: role_instruction(role, cond),
        t: state.t.t(),
    })
}

/// Builds the prediction set from the outputs for [`queries`], filling the
/// identity slot analytically for [`Variant::AdaorAnalytic`].
pub fn assemble(
    variant: Variant,
    outputs: impl IntoIterator<Item = Vec<f64>>,
    state: &LatentState,
    source: &Sample,
) -> Result<PredictionSet, GuidanceError> {
    let mut outputs = outputs.into_iter();
    let mut next = || outputs.next().expect("one output per query");
    let eps_cond = next();
    let eps_null = next();
    let eps_id = match variant {
        Variant::CfgSweep => None,
        Variant::Adaor | Variant::CfgId => Some(next()),
        Variant::AdaorAnalytic => Some(analytical_id_prediction(state, source)?),
    };
    Ok(PredictionSet {
        eps_cond,
        eps_null,
        eps_id,
    })
}

/// Evaluates exactly the predictions `variant` needs at one state.
pub fn resolve_predictions(
    model: &dyn VelocityModel,
    state: &LatentState,
    source: &Sample,
    cond: Instruction,
    variant: Variant,
) -> Result<PredictionSet, GuidanceError> {
    let qs: Vec<Query<'_>> = queries(variant, state, source, cond).collect();
    let outs = model.predict_batch(&qs)?;
    assemble(variant, outs, state, source)
}
