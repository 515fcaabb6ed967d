//! Rectified-flow noising process and the closed-form identity velocity.
//!
//! `z_t = (1 − t)·x + t·ε`, velocity target `ε − x`, noise scale `σ_t = t`.
//! Under this convention the identity-token velocity `(z_t − c_I)/t` is exact
//! whenever the target equals the source.

use thiserror::Error;

use crate::task::Sample;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error("dimension mismatch: {left} vs {right}")]
    Dim { left: usize, right: usize },
    #[error("time {0} outside (0, 1]")]
    Domain(f64),
    #[error("timestep grid needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
}

/// A time in `(0, 1]`; the noise scale equals the time.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TimePoint(f64);

impl TimePoint {
    pub fn new(t: f64) -> Result<Self, FlowError> {
        if t > 0.0 && t <= 1.0 {
            Ok(Self(t))
        } else {
            Err(FlowError::Domain(t))
        }
    }

    pub fn t(self) -> f64 {
        self.0
    }

    pub fn sigma(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub z: Vec<f64>,
    pub t: TimePoint,
}

fn check_dim(a: usize, b: usize) -> Result<(), FlowError> {
    if a == b {
        Ok(())
    } else {
        Err(FlowError::Dim { left: a, right: b })
    }
}

pub fn noise_forward(x: &Sample, t: TimePoint, eps: &[f64]) -> Result<LatentState, FlowError> {
    check_dim(x.dim(), eps.len())?;
    let t_val = t.t();
    let z = x
        .iter()
        .zip(eps)
        .map(|(xi, ei)| (1.0 - t_val) * xi + t_val * ei)
        .collect();
    Ok(LatentState { z, t })
}

/// Regression target `ε − x`, the time derivative of `z_t`.
pub fn velocity_target(x: &Sample, eps: &[f64]) -> Result<Vec<f64>, FlowError> {
    check_dim(x.dim(), eps.len())?;
    Ok(eps.iter().zip(x.iter()).map(|(e, xi)| e - xi).collect())
}

/// `(z − c_I)/σ_t`: the velocity of the point-mass conditional at `c_I`.
/// Its norm scales as `1/t` for a fixed offset.
pub fn analytical_id_prediction(state: &LatentState, source: &Sample) -> Result<Vec<f64>, FlowError> {
    check_dim(state.z.len(), source.dim())?;
    let sigma = state.t.sigma();
    if sigma <= 0.0 {
        return Err(FlowError::Domain(sigma));
    }
    Ok(state
        .z
        .iter()
        .zip(source.iter())
        .map(|(z, c)| (z - c) / sigma)
        .collect())
}

/// Uniform grid `1 = t_K > … > t_0 = 0`.
pub fn timestep_grid(steps: usize) -> Result<Vec<f64>, FlowError> {
    if steps < 2 {
        return Err(FlowError::TooFewSteps(steps));
    }
    Ok((0..=steps).rev().map(|k| k as f64 / steps as f64).collect())
}

pub const DEFAULT_STEPS: usize = 64;
