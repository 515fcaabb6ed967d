//! Synthetic paired-edit tasks with closed-form ground truth.
//!
//! Two families share one vocabulary layout: four edit tokens followed by
//! the reserved `null` and `id` tokens.
//!
//! * `disc`: 16×16 anti-aliased discs/rings; edits move, grow, brighten or
//!   hollow the shape.
//! * `vec`: 8-dim parameter vectors; edits are fixed affine maps.
//!
//! Partial-strength edits exist only as evaluation references. Training
//! triplets always use the full edit.

use std::fmt;
use std::ops::Deref;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::Rng;

pub const DISC_SIDE: usize = 16;
pub const DISC_DIM: usize = DISC_SIDE * DISC_SIDE;
pub const VEC_DIM: usize = 8;
pub const VOCAB_SIZE: usize = 6;
pub const NUM_EDITS: usize = 4;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TaskError {
    #[error("instruction `{0}` is not an edit token")]
    NotAnEdit(String),
    #[error("unknown task `{0}` (expected `vec` or `disc`)")]
    UnknownTask(String),
    #[error("unknown instruction `{name}`; available: {available}")]
    UnknownInstruction { name: String, available: String },
    #[error("token id {0} outside vocabulary")]
    TokenOutOfRange(usize),
    #[error("edit strength {0} outside [0, 1]")]
    Strength(f64),
}

/// One data item: flattened image pixels or a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Sample(pub Vec<f64>);

impl Sample {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Sample {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl From<Vec<f64>> for Sample {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// Instruction token id. Ids `0..4` are edits, then `null` and `id`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Instruction(pub usize);

impl Instruction {
    pub const NULL: Instruction = Instruction(4);
    pub const ID: Instruction = Instruction(5);

    pub fn is_edit(self) -> bool {
        self.0 < NUM_EDITS
    }

    pub fn edits() -> impl Iterator<Item = Instruction> {
        (0..NUM_EDITS).map(Instruction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Vec,
    Disc,
}

const DISC_TOKENS: [&str; VOCAB_SIZE] = ["shift_right", "grow", "brighten", "hollow", "null", "id"];
const VEC_TOKENS: [&str; VOCAB_SIZE] = ["translate", "scale", "rotate", "reflect", "null", "id"];

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Vec => "vec",
            TaskKind::Disc => "disc",
        }
    }

    pub fn dim(self) -> usize {
        match self {
            TaskKind::Vec => VEC_DIM,
            TaskKind::Disc => DISC_DIM,
        }
    }

    pub fn vocabulary(self) -> &'static [&'static str; VOCAB_SIZE] {
        match self {
            TaskKind::Vec => &VEC_TOKENS,
            TaskKind::Disc => &DISC_TOKENS,
        }
    }

    pub fn token_name(self, ins: Instruction) -> Result<&'static str, TaskError> {
        self.vocabulary()
            .get(ins.0)
            .copied()
            .ok_or(TaskError::TokenOutOfRange(ins.0))
    }

    pub fn instruction(self, name: &str) -> Result<Instruction, TaskError> {
        self.vocabulary()
            .iter()
            .position(|t| *t == name)
            .map(Instruction)
            .ok_or_else(|| TaskError::UnknownInstruction {
                name: name.to_string(),
                available: self.vocabulary().join(", "),
            })
    }

    /// Draws a source case from the task's parameter distribution.
    pub fn sample_case(self, rng: &mut Rng) -> CaseParams {
        match self {
            TaskKind::Vec => CaseParams::Vec(vec_task::sample(rng)),
            TaskKind::Disc => CaseParams::Disc(DiscParams::sample(rng)),
        }
    }

    /// Source and full-strength target for `instruction`; a random edit
    /// token when `None`.
    pub fn make_triplet(self, rng: &mut Rng, instruction: Option<Instruction>) -> EditTriplet {
        let instruction =
            instruction.unwrap_or_else(|| Instruction(rng.random_range(0..NUM_EDITS)));
        let case = self.sample_case(rng);
        let source = case.render();
        let target = if instruction.is_edit() {
            case.edited(instruction, 1.0).expect("edit token").render()
        } else {
            source.clone()
        };
        EditTriplet {
            source,
            target,
            instruction,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vec" => Ok(TaskKind::Vec),
            "disc" => Ok(TaskKind::Disc),
            other => Err(TaskError::UnknownTask(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditTriplet {
    pub source: Sample,
    pub target: Sample,
    pub instruction: Instruction,
}

/// Ground-truth parameters of one synthetic case.
#[derive(Debug, Clone, PartialEq)]
pub enum CaseParams {
    Vec(Vec<f64>),
    Disc(DiscParams),
}

impl CaseParams {
    pub fn render(&self) -> Sample {
        match self {
            CaseParams::Vec(v) => Sample(v.clone()),
            CaseParams::Disc(p) => p.render(),
        }
    }

    /// The case after a `strength`-partial edit.
    pub fn edited(&self, ins: Instruction, strength: f64) -> Result<CaseParams, TaskError> {
        match self {
            CaseParams::Vec(v) => vec_task::apply_edit(v, ins, strength).map(CaseParams::Vec),
            CaseParams::Disc(p) => p.apply_edit(ins, strength).map(CaseParams::Disc),
        }
    }
}

/// Disc/ring shape on the 16×16 canvas. Pixel `(col, row)` sits at
/// coordinates `(col, row)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiscParams {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub b: f64,
    pub hollow: f64,
}

pub const CX_RANGE: (f64, f64) = (4.0, 8.0);
pub const CY_RANGE: (f64, f64) = (5.0, 11.0);
pub const R_RANGE: (f64, f64) = (2.5, 4.5);
pub const B_RANGE: (f64, f64) = (0.4, 0.8);

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let u = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

/// Anti-aliased coverage of a disc of radius `radius` at distance `dist`
/// from its center, with a 1-pixel smoothstep band.
fn disc_coverage(dist: f64, radius: f64) -> f64 {
    1.0 - smoothstep(radius - 0.5, radius + 0.5, dist)
}

impl DiscParams {
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            cx: rng.random_range(CX_RANGE.0..=CX_RANGE.1),
            cy: rng.random_range(CY_RANGE.0..=CY_RANGE.1),
            r: rng.random_range(R_RANGE.0..=R_RANGE.1),
            b: rng.random_range(B_RANGE.0..=B_RANGE.1),
            hollow: 0.0,
        }
    }

    /// Radius of the hole. Grows continuously from nothing at `hollow = 0`
    /// to `0.6·r` at `hollow = 1`; the `-0.5` offset keeps the hole's
    /// smoothstep band entirely outside the canvas when `hollow = 0`.
    pub fn hole_radius(&self) -> f64 {
        self.hollow * (0.6 * self.r + 0.5) - 0.5
    }

    pub fn render(&self) -> Sample {
        let hole = self.hole_radius();
        let mut out = Vec::with_capacity(DISC_DIM);
        for row in 0..DISC_SIDE {
            for col in 0..DISC_SIDE {
                let dist = (col as f64 - self.cx).hypot(row as f64 - self.cy);
                let cov = (disc_coverage(dist, self.r) - disc_coverage(dist, hole)).clamp(0.0, 1.0);
                out.push((self.b * cov).clamp(0.0, 1.0));
            }
        }
        Sample(out)
    }

    /// `strength`-partial ground-truth edit.
    pub fn apply_edit(&self, ins: Instruction, strength: f64) -> Result<Self, TaskError> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(TaskError::Strength(strength));
        }
        let mut p = *self;
        match ins.0 {
            0 => p.cx += 4.0 * strength,
            1 => p.r *= 1.0 + 0.6 * strength,
            2 => p.b = (p.b + 0.4 * strength).min(1.0),
            3 => p.hollow = strength,
            _ => {
                return Err(TaskError::NotAnEdit(
                    TaskKind::Disc.token_name(ins).unwrap_or("?").to_string(),
                ))
            }
        }
        Ok(p)
    }

    /// Coarse-to-fine grid search for the shape parameters that best
    /// re-render `image`, followed by a local continuous polish, returning
    /// them with the L2 residual.
    pub fn fit(image: &[f64]) -> (DiscParams, f64) {
        fit::fit_params(image)
    }
}

mod fit {
    use super::*;

    // Fit ranges cover every fully edited case.
    const CX: (f64, f64) = (4.0, 12.0);
    const CY: (f64, f64) = (5.0, 11.0);
    const R: (f64, f64) = (2.5, 7.2);
    const B: (f64, f64) = (0.4, 1.0);
    const HOLLOW: (f64, f64) = (0.0, 1.0);

    // (cx, cy, r, hollow) steps per level; each level is a refinement of
    // the finest grid 0.25 / 0.25 / 0.1 / 0.05.
    const LEVELS: [[f64; 4]; 3] = [[1.0, 1.0, 0.5, 0.25], [0.5, 0.5, 0.2, 0.1], [0.25, 0.25, 0.1, 0.05]];
    const KEEP: usize = 4;

    fn axis(range: (f64, f64), step: f64, center: Option<(f64, f64)>) -> Vec<f64> {
        let n = ((range.1 - range.0) / step + 1e-9).floor() as i64;
        let (lo, hi) = match center {
            None => (0, n),
            Some((c, half)) => {
                let lo = ((c - half - range.0) / step).ceil() as i64;
                let hi = ((c + half - range.0) / step).floor() as i64;
                (lo.max(0), hi.min(n))
            }
        };
        (lo..=hi).map(|k| range.0 + k as f64 * step).collect()
    }

    /// Unit-brightness coverage for a shape, then the best brightness in
    /// closed form (the render is linear in `b`).
    fn score(image: &[f64], cx: f64, cy: f64, r: f64, hollow: f64) -> (f64, DiscParams) {
        let shape = DiscParams {
            cx,
            cy,
            r,
            b: 1.0,
            hollow,
        }
        .render();
        let dot: f64 = shape.iter().zip(image).map(|(s, x)| s * x).sum();
        let ss: f64 = shape.iter().map(|s| s * s).sum();
        let b = if ss > 0.0 { (dot / ss).clamp(B.0, B.1) } else { B.0 };
        let p = DiscParams { cx, cy, r, b, hollow };
        let resid: f64 = shape
            .iter()
            .zip(image)
            .map(|(s, x)| (b * s - x).powi(2))
            .sum::<f64>()
            .sqrt();
        (resid, p)
    }

    pub(super) fn fit_params(image: &[f64]) -> (DiscParams, f64) {
        let mut seeds: Vec<(f64, DiscParams)> = Vec::new();
        for (lvl, steps) in LEVELS.iter().enumerate() {
            let mut cands: Vec<(f64, DiscParams)> = Vec::new();
            let centers: Vec<Option<DiscParams>> = if lvl == 0 {
                vec![None]
            } else {
                seeds.iter().map(|s| Some(s.1)).collect()
            };
            let prev = if lvl == 0 { [0.0; 4] } else { LEVELS[lvl - 1] };
            for c in centers {
                let win = |v: fn(&DiscParams) -> f64, i: usize| c.map(|p| (v(&p), prev[i]));
                for cx in axis(CX, steps[0], win(|p| p.cx, 0)) {
                    for cy in axis(CY, steps[1], win(|p| p.cy, 1)) {
                        for r in axis(R, steps[2], win(|p| p.r, 2)) {
                            for h in axis(HOLLOW, steps[3], win(|p| p.hollow, 3)) {
                                cands.push(score(image, cx, cy, r, h));
                            }
                        }
                    }
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0));
            cands.dedup_by(|a, b| a.1 == b.1);
            cands.truncate(KEEP);
            seeds = cands;
        }
        seeds
            .into_iter()
            .map(|(resid, p)| polish(image, resid, p))
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("grid is non-empty")
    }

    /// Compass search from a grid optimum, halving the step when no move
    /// along any axis improves the residual.
    fn polish(image: &[f64], mut resid: f64, mut p: DiscParams) -> (DiscParams, f64) {
        let ranges = [CX, CY, R, HOLLOW];
        let mut step = LEVELS[LEVELS.len() - 1].map(|s| s / 2.0);
        while step[0] > POLISH_TOL {
            let mut moved = false;
            for axis in 0..4 {
                for sign in [1.0, -1.0] {
                    let mut x = [p.cx, p.cy, p.r, p.hollow];
                    x[axis] = (x[axis] + sign * step[axis]).clamp(ranges[axis].0, ranges[axis].1);
                    let (r, q) = score(image, x[0], x[1], x[2], x[3]);
                    if r < resid {
                        (resid, p, moved) = (r, q, true);
                        break;
                    }
                }
            }
            if !moved {
                step = step.map(|s| s / 2.0);
            }
        }
        (p, resid)
    }

    const POLISH_TOL: f64 = 1e-4;
}

/// The 8-dim affine task.
pub mod vec_task {
    use super::*;

    pub fn sample(rng: &mut Rng) -> Vec<f64> {
        (0..VEC_DIM).map(|_| rng.random_range(-1.0..=1.0)).collect()
    }

    /// Full-strength edit: translate, scale the first half, rotate two
    /// coordinate planes by 90°, or reflect the second half.
    pub fn full_edit(x: &[f64], ins: Instruction) -> Result<Vec<f64>, TaskError> {
        let mut y = x.to_vec();
        match ins.0 {
            0 => {
                const SHIFT: [f64; VEC_DIM] = [1.0, 0.5, 0.0, -0.5, 0.0, 0.0, 0.75, 0.0];
                y.iter_mut().zip(SHIFT).for_each(|(v, s)| *v += s);
            }
            1 => y[..4].iter_mut().for_each(|v| *v *= 1.8),
            2 => {
                for k in [0, 2] {
                    y[k] = -x[k + 1];
                    y[k + 1] = x[k];
                }
            }
            3 => y[4..].iter_mut().for_each(|v| *v = -*v),
            _ => {
                return Err(TaskError::NotAnEdit(
                    TaskKind::Vec.token_name(ins).unwrap_or("?").to_string(),
                ))
            }
        }
        Ok(y)
    }

    pub fn apply_edit(x: &[f64], ins: Instruction, strength: f64) -> Result<Vec<f64>, TaskError> {
        if !(0.0..=1.0).contains(&strength) {
            return Err(TaskError::Strength(strength));
        }
        let full = full_edit(x, ins)?;
        Ok(x.iter()
            .zip(&full)
            .map(|(a, b)| a + strength * (b - a))
            .collect())
    }
}
