//! Sweep request parsing with per-field validation messages.

use adaor_core::flow::DEFAULT_STEPS;
use adaor_core::guidance::{Scheduler, Variant, DEFAULT_SCALE};
use adaor_core::sampler::{uniform_alphas, SweepConfig};
use adaor_core::task::TaskKind;
use serde::Serialize;
use serde_json::{Map, Value};

pub const MAX_ALPHAS: usize = 32;
pub const MAX_STEPS: usize = 1024;
pub const MAX_SCALE: f64 = 100.0;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// A validated sweep request with defaults filled in.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRequest {
    pub instruction: String,
    pub variant: Variant,
    pub w: f64,
    pub scheduler: Scheduler,
    pub alphas: Vec<f64>,
    pub seed: u64,
    pub case_seed: u64,
    pub steps: usize,
}

const FIELDS: [&str; 8] = ["instruction", "variant", "w", "scheduler", "alphas", "seed", "case_seed", "steps"];

impl SweepRequest {
    pub fn sweep_config(&self) -> SweepConfig {
        SweepConfig {
            alphas: self.alphas.clone(),
            steps: self.steps,
            seed: self.seed,
            variant: self.variant,
            w: self.w,
            scheduler: self.scheduler,
        }
    }

    /// Parses a JSON body, collecting every field problem.
    pub fn parse(body: &[u8], task: TaskKind) -> Result<Self, Vec<FieldError>> {
        let obj: Map<String, Value> = match serde_json::from_slice::<Value>(body) {
            Ok(Value::Object(m)) => m,
            Ok(_) => return Err(vec![FieldError::new("body", "expected a JSON object")]),
            Err(e) => return Err(vec![FieldError::new("body", format!("invalid JSON: {e}"))]),
        };
        let mut errors: Vec<FieldError> = obj
            .keys()
            .filter(|k| !FIELDS.contains(&k.as_str()))
            .map(|k| FieldError::new(k.clone(), "unknown field"))
            .collect();
        let mut err = |field: &str, msg: String| errors.push(FieldError::new(field, msg));

        let instruction = match obj.get("instruction") {
            Some(Value::String(s)) => match task.instruction(s) {
                Ok(i) if i.is_edit() => s.clone(),
                Ok(_) => {
                    err("instruction", format!("`{s}` is reserved; choose an edit instruction"));
                    String::new()
                }
                Err(e) => {
                    err("instruction", e.to_string());
                    String::new()
                }
            },
            Some(_) => {
                err("instruction", "expected a string".into());
                String::new()
            }
            None => {
                err("instruction", "required".into());
                String::new()
            }
        };

        let variant = match obj.get("variant") {
            None => Variant::Adaor,
            Some(Value::String(s)) => s.parse().unwrap_or_else(|e: adaor_core::guidance::GuidanceError| {
                err("variant", e.to_string());
                Variant::Adaor
            }),
            Some(_) => {
                err("variant", "expected a string".into());
                Variant::Adaor
            }
        };

        let scheduler = match obj.get("scheduler") {
            None => Scheduler::Sqrt,
            Some(Value::String(s)) => s.parse().unwrap_or_else(|e: adaor_core::guidance::GuidanceError| {
                err("scheduler", e.to_string());
                Scheduler::Sqrt
            }),
            Some(_) => {
                err("scheduler", "expected a string".into());
                Scheduler::Sqrt
            }
        };

        let w = match obj.get("w") {
            None => DEFAULT_SCALE,
            Some(v) => match v.as_f64() {
                Some(w) if (0.0..=MAX_SCALE).contains(&w) => w,
                _ => {
                    err("w", format!("expected a number in [0, {MAX_SCALE}]"));
                    DEFAULT_SCALE
                }
            },
        };

        let alphas = match obj.get("alphas") {
            None => uniform_alphas(6),
            Some(Value::Array(items)) => {
                let vals: Vec<Option<f64>> = items.iter().map(Value::as_f64).collect();
                if items.is_empty() || items.len() > MAX_ALPHAS {
                    err("alphas", format!("expected 1 to {MAX_ALPHAS} values"));
                    Vec::new()
                } else if let Some(i) = vals.iter().position(|v| !matches!(v, Some(a) if (0.0..=1.0).contains(a))) {
                    err("alphas", format!("alphas[{i}] must be a number in [0, 1]"));
                    Vec::new()
                } else {
                    let vals: Vec<f64> = vals.into_iter().flatten().collect();
                    if vals.windows(2).any(|p| p[0] > p[1]) {
                        err("alphas", "values must be in ascending order".into());
                    }
                    vals
                }
            }
            Some(_) => {
                err("alphas", "expected an array of numbers".into());
                Vec::new()
            }
        };

        let mut uint = |field: &str, default: u64, max: u64| match obj.get(field) {
            None => default,
            Some(v) => match v.as_u64() {
                Some(x) if x <= max => x,
                _ => {
                    err(field, format!("expected an integer in [0, {max}]"));
                    default
                }
            },
        };
        let seed = uint("seed", 0, u64::MAX);
        let case_seed = uint("case_seed", 0, u64::MAX);
        let steps = uint("steps", DEFAULT_STEPS as u64, MAX_STEPS as u64) as usize;
        if steps < 2 {
            errors.push(FieldError::new("steps", "at least 2 steps are required"));
        }

        if errors.is_empty() {
            Ok(Self {
                instruction,
                variant,
                w,
                scheduler,
                alphas,
                seed,
                case_seed,
                steps,
            })
        } else {
            Err(errors)
        }
    }
}
