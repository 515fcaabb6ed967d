//! Conditional velocity network `v̂(z_t, c_I, c_T, t)` and its checkpoint
//! format.
//!
//! The trunk is an MLP over `concat(z_t, c_I, embed(c_T), time(t))`. Two
//! per-coordinate gates add `g_z ⊙ z_t + g_s ⊙ c_I` to its output, where
//! each gate is a linear map of the instruction embedding, the time
//! features and the inverse time `1/max(t, 1/64)`. The instruction
//! embedding table has one learned row per vocabulary token, including
//! `null` and `id`.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "ADAOR1" | u64 header length | UTF-8 JSON header | f64 payload
//! ```
//!
//! The header names the task, vocabulary, architecture, every parameter
//! shape in declaration order, and the training configuration. The payload
//! holds the parameters in that order.

use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::LatentState;
use crate::ndcore::{gradcheck, Graph, GradcheckReport, NdError, ParamId, ParamStore, Tensor, Var};
use crate::rng::{self, domain};
use crate::task::{Instruction, Sample, TaskKind, VOCAB_SIZE};

pub const EMBED_DIM: usize = 16;
pub const TIME_DIM: usize = 8;
pub const MAGIC: &[u8; 6] = b"ADAOR1";
/// Floor on `t` in the inverse-time gate feature; the finest default
/// sampling step.
pub const GATE_T_FLOOR: f64 = 1.0 / 64.0;
/// Gate inputs: embedding, time features, inverse time, and the embedding
/// scaled by inverse time.
const GATE_FEATURES: usize = 2 * EMBED_DIM + TIME_DIM + 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nd(#[from] NdError),
    #[error("unknown instruction token id {0}")]
    UnknownToken(usize),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("time {0} outside (0, 1]")]
    Time(f64),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint: bad magic")]
    BadMagic,
    #[error("truncated checkpoint: need {expected} bytes, found {got}")]
    Truncated { expected: usize, got: usize },
    #[error("checkpoint has {0} unexpected trailing bytes")]
    TrailingBytes(usize),
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("checkpoint parameter `{name}` has shape {found:?}, architecture expects {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

/// Training settings echoed into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingEcho {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub p_null: f64,
    pub p_id: f64,
}

/// One network evaluation request.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub z: &'a [f64],
    pub source: &'a [f64],
    pub instruction: Instruction,
    pub t: f64,
}

/// Anything that predicts velocities for batches of queries.
pub trait VelocityModel: Sync {
    fn task(&self) -> TaskKind;
    fn predict_batch(&self, queries: &[Query<'_>]) -> Result<Vec<Vec<f64>>, ModelError>;
}

/// Sinusoidal time features: `sin, cos` of `2^k·π·t` for `k = 0..4`.
pub fn time_embedding(t: f64) -> [f64; TIME_DIM] {
    let mut out = [0.0; TIME_DIM];
    for k in 0..TIME_DIM / 2 {
        let f = (1u32 << k) as f64 * std::f64::consts::PI * t;
        out[2 * k] = f.sin();
        out[2 * k + 1] = f.cos();
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    task: TaskKind,
    hidden: usize,
    depth: usize,
    params: ParamStore,
    embed: ParamId,
    layers: Vec<(ParamId, ParamId)>,
    /// Per-coordinate gates on `z` and on the source, driven by the
    /// instruction and time features and added to the trunk output.
    gates: [(ParamId, ParamId); 2],
    pub training: Option<TrainingEcho>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    task: TaskKind,
    vocabulary: Vec<String>,
    hidden: usize,
    depth: usize,
    params: Vec<ParamHeader>,
    training: Option<TrainingEcho>,
}

#[derive(Serialize, Deserialize)]
struct ParamHeader {
    name: String,
    shape: Vec<usize>,
}

/// Hidden width and depth used for each task.
pub fn default_architecture(task: TaskKind) -> (usize, usize) {
    match task {
        TaskKind::Vec => (128, 3),
        TaskKind::Disc => (256, 3),
    }
}

impl DenoiserNet {
    pub fn init(seed: u64, task: TaskKind) -> Self {
        let (hidden, depth) = default_architecture(task);
        Self::init_with(seed, task, hidden, depth)
    }

    /// Weights `N(0, 1/fan_in)`, zero biases, embeddings `N(0, 0.02²)`.
    pub fn init_with(seed: u64, task: TaskKind, hidden: usize, depth: usize) -> Self {
        let mut rng = rng::substream(seed, domain::INIT, 0);
        let mut params = ParamStore::new();
        let emb_dist = Normal::new(0.0, 0.02).unwrap();
        let emb: Vec<f64> = (0..VOCAB_SIZE * EMBED_DIM).map(|_| emb_dist.sample(&mut rng)).collect();
        let embed = params.add("embed", Tensor::new(vec![VOCAB_SIZE, EMBED_DIM], emb).unwrap());

        let dim = task.dim();
        let mut widths = vec![2 * dim + EMBED_DIM + TIME_DIM];
        widths.extend(std::iter::repeat_n(hidden, depth));
        widths.push(dim);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let dist = Normal::new(0.0, (1.0 / w[0] as f64).sqrt()).unwrap();
                let data: Vec<f64> = (0..w[0] * w[1]).map(|_| dist.sample(&mut rng)).collect();
                let weight = params.add(format!("layer{i}.weight"), Tensor::new(vec![w[0], w[1]], data).unwrap());
                let bias = params.add(format!("layer{i}.bias"), Tensor::zeros(&[w[1]]));
                (weight, bias)
            })
            .collect();
        let gate_in = GATE_FEATURES;
        let mut gate = |name: &str| {
            let weight = params.add(format!("{name}.weight"), Tensor::zeros(&[gate_in, dim]));
            let bias = params.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
            (weight, bias)
        };
        let gates = [gate("gate_z"), gate("gate_source")];
        Self {
            task,
            hidden,
            depth,
            params,
            embed,
            layers,
            gates,
            training: None,
        }
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embed_id(&self) -> ParamId {
        self.embed
    }

    /// Embedding row for one token.
    pub fn embedding_row(&self, ins: Instruction) -> &[f64] {
        self.params.get(self.embed).row(ins.0)
    }

    fn check_query(&self, q: &Query<'_>) -> Result<(), ModelError> {
        let dim = self.task.dim();
        for len in [q.z.len(), q.source.len()] {
            if len != dim {
                return Err(ModelError::Dim { expected: dim, got: len });
            }
        }
        if q.instruction.0 >= VOCAB_SIZE {
            return Err(ModelError::UnknownToken(q.instruction.0));
        }
        if !(q.t > 0.0 && q.t <= 1.0) {
            return Err(ModelError::Time(q.t));
        }
        Ok(())
    }

    /// Records the forward pass for `queries` in `g`, returning the
    /// `[batch, dim]` output node.
    pub fn forward(&self, g: &mut Graph<'_>, queries: &[Query<'_>]) -> Result<Var, ModelError> {
        let dim = self.task.dim();
        let n = queries.len();
        let mut state = Vec::with_capacity(n * 2 * dim);
        let mut zs = Vec::with_capacity(n * dim);
        let mut sources = Vec::with_capacity(n * dim);
        let mut time = Vec::with_capacity(n * TIME_DIM);
        let mut ids = Vec::with_capacity(n);
        let mut inv_t = Vec::with_capacity(n);
        for q in queries {
            self.check_query(q)?;
            inv_t.push(1.0 / q.t.max(GATE_T_FLOOR));
            state.extend_from_slice(q.z);
            state.extend_from_slice(q.source);
            zs.extend_from_slice(q.z);
            sources.extend_from_slice(q.source);
            time.extend_from_slice(&time_embedding(q.t));
            ids.push(q.instruction.0);
        }
        let state = g.constant(Tensor::new(vec![n, 2 * dim], state)?);
        let time = g.constant(Tensor::new(vec![n, TIME_DIM], time)?);
        let table = g.param(self.embed);
        let emb = g.gather_rows(table, &ids)?;
        let mut h = g.concat_cols(&[state, emb, time])?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (g.param(w), g.param(b));
            h = g.linear(h, wv, bv)?;
            if i + 1 < self.layers.len() {
                h = g.silu(h);
            }
        }
        let inv = g.constant(Tensor::new(vec![n, 1], inv_t.clone())?);
        let inv_wide = g.constant(Tensor::new(
            vec![n, EMBED_DIM],
            inv_t.iter().flat_map(|&v| std::iter::repeat_n(v, EMBED_DIM)).collect(),
        )?);
        let emb_inv = g.mul(emb, inv_wide)?;
        let cond = g.concat_cols(&[emb, time, inv, emb_inv])?;
        for (&(w, b), x) in self.gates.iter().zip([zs, sources]) {
            let (wv, bv) = (g.param(w), g.param(b));
            let gate = g.linear(cond, wv, bv)?;
            let x = g.constant(Tensor::new(vec![n, dim], x)?);
            let skip = g.mul(gate, x)?;
            h = g.add(h, skip)?;
        }
        Ok(h)
    }

    pub fn predict(&self, state: &LatentState, source: &Sample, ins: Instruction) -> Result<Vec<f64>, ModelError> {
        let q = Query {
            z: &state.z,
            source,
            instruction: ins,
            t: state.t.t(),
        };
        Ok(self.predict_batch(&[q])?.pop().unwrap())
    }

    /// Full-network gradient check on a seeded random batch, with the MSE
    /// against a random target as the loss.
    pub fn gradcheck(&mut self, seed: u64, coords_per_tensor: usize) -> Result<GradcheckReport, ModelError> {
        let dim = self.task.dim();
        let mut r = rng::substream(seed, domain::GRADCHECK, 0);
        let batch = 3;
        let zs: Vec<Vec<f64>> = (0..batch).map(|_| rng::normal_vec(&mut r, dim)).collect();
        let srcs: Vec<Vec<f64>> = (0..batch).map(|_| rng::normal_vec(&mut r, dim)).collect();
        let target = Tensor::new(vec![batch, dim], rng::normal_vec(&mut r, batch * dim))?;
        let ts = [0.2, 0.55, 0.9];
        let ins = [Instruction(0), Instruction::NULL, Instruction::ID];
        let queries: Vec<Query<'_>> = (0..batch)
            .map(|i| Query {
                z: &zs[i],
                source: &srcs[i],
                instruction: ins[i],
                t: ts[i],
            })
            .collect();
        let this = self.clone();
        let report = gradcheck(
            &mut self.params,
            |g| {
                let out = this.forward(g, &queries).expect("gradcheck queries are valid");
                let tv = g.constant(target.clone());
                g.mse_loss(out, tv)
            },
            coords_per_tensor,
            seed,
        )?;
        Ok(report)
    }

    fn header(&self) -> Header {
        Header {
            task: self.task,
            vocabulary: self.task.vocabulary().iter().map(|s| s.to_string()).collect(),
            hidden: self.hidden,
            depth: self.depth,
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamHeader {
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
            training: self.training.clone(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        let mut out = Vec::with_capacity(14 + header.len() + 8 * self.params.num_scalars());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(ModelError::BadMagic);
        }
        let fixed = MAGIC.len() + 8;
        if bytes.len() < fixed {
            return Err(ModelError::Truncated {
                expected: fixed,
                got: bytes.len(),
            });
        }
        let header_len = u64::from_le_bytes(bytes[MAGIC.len()..fixed].try_into().unwrap()) as usize;
        let header_end = fixed
            .checked_add(header_len)
            .ok_or_else(|| ModelError::Header("header length overflows".into()))?;
        if bytes.len() < header_end {
            return Err(ModelError::Truncated {
                expected: header_end,
                got: bytes.len(),
            });
        }
        let header: Header =
            serde_json::from_slice(&bytes[fixed..header_end]).map_err(|e| ModelError::Header(e.to_string()))?;
        let payload: usize = header
            .params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        let expected = header_end + 8 * payload;
        if bytes.len() < expected {
            return Err(ModelError::Truncated {
                expected,
                got: bytes.len(),
            });
        }
        if bytes.len() > expected {
            return Err(ModelError::TrailingBytes(bytes.len() - expected));
        }

        let mut net = Self::init_with(0, header.task, header.hidden, header.depth);
        if header.params.len() != net.params.len() {
            return Err(ModelError::Header(format!(
                "{} parameters listed, architecture has {}",
                header.params.len(),
                net.params.len()
            )));
        }
        let mut offset = header_end;
        let ids: Vec<ParamId> = net.params.ids().collect();
        for (id, ph) in ids.into_iter().zip(&header.params) {
            let t = net.params.get_mut(id);
            if t.shape() != ph.shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: ph.name.clone(),
                    expected: t.shape().to_vec(),
                    found: ph.shape.clone(),
                });
            }
            for v in t.data_mut() {
                *v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().unwrap());
                offset += 8;
            }
        }
        net.training = header.training;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&fs::read(path)?)
    }
}

impl VelocityModel for DenoiserNet {
    fn task(&self) -> TaskKind {
        self.task
    }

    fn predict_batch(&self, queries: &[Query<'_>]) -> Result<Vec<Vec<f64>>, ModelError> {
        if queries.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new(&self.params);
        let out = self.forward(&mut g, queries)?;
        let out = g.value(out);
        Ok((0..queries.len()).map(|i| out.row(i).to_vec()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{noise_forward, TimePoint};

    fn state(task: TaskKind, seed: u64, t: f64) -> (LatentState, Sample) {
        let mut r = rng::seeded(seed);
        let c = Sample(rng::normal_vec(&mut r, task.dim()));
        let eps = rng::normal_vec(&mut r, task.dim());
        (noise_forward(&c, TimePoint::new(t).unwrap(), &eps).unwrap(), c)
    }

    #[test]
    fn predict_is_deterministic_and_finite() {
        let net = DenoiserNet::init(0, TaskKind::Vec);
        let (z, c) = state(TaskKind::Vec, 1, 0.4);
        let a = net.predict(&z, &c, Instruction(1)).unwrap();
        let b = net.predict(&z, &c, Instruction(1)).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
        let scale = a.iter().map(|v| v * v).sum::<f64>().sqrt() / (a.len() as f64).sqrt();
        assert!(scale > 0.0 && scale < 10.0, "{scale}");
    }

    #[test]
    fn batching_does_not_change_rows() {
        let net = DenoiserNet::init(3, TaskKind::Disc);
        let (z1, c1) = state(TaskKind::Disc, 1, 0.4);
        let (z2, c2) = state(TaskKind::Disc, 2, 0.9);
        let q1 = Query { z: &z1.z, source: &c1, instruction: Instruction(2), t: 0.4 };
        let q2 = Query { z: &z2.z, source: &c2, instruction: Instruction::ID, t: 0.9 };
        let both = net.predict_batch(&[q2, q1, q2, q2, q1]).unwrap();
        let single = net.predict_batch(&[q1]).unwrap();
        assert_eq!(both[1], single[0]);
        assert_eq!(both[4], single[0]);
    }

    #[test]
    fn init_seeds() {
        assert_eq!(DenoiserNet::init(5, TaskKind::Vec), DenoiserNet::init(5, TaskKind::Vec));
        assert_ne!(DenoiserNet::init(5, TaskKind::Vec), DenoiserNet::init(6, TaskKind::Vec));
        let net = DenoiserNet::init(5, TaskKind::Disc);
        let shapes: Vec<Vec<usize>> = net.params().iter().map(|(_, t)| t.shape().to_vec()).collect();
        assert_eq!(shapes[0], vec![VOCAB_SIZE, EMBED_DIM]);
        assert_eq!(shapes[1], vec![2 * 256 + EMBED_DIM + TIME_DIM, 256]);
        assert_eq!(shapes.last().unwrap(), &vec![256]);
        assert!(net.params().get(net.layers[0].1).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_rejects_bad_inputs() {
        let net = DenoiserNet::init(0, TaskKind::Vec);
        let (z, c) = state(TaskKind::Vec, 1, 0.4);
        assert!(matches!(net.predict(&z, &c, Instruction(6)), Err(ModelError::UnknownToken(6))));
        let short = Sample(vec![0.0; 3]);
        assert!(matches!(net.predict(&z, &short, Instruction(0)), Err(ModelError::Dim { expected: 8, got: 3 })));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut net = DenoiserNet::init(9, TaskKind::Vec);
        net.training = Some(TrainingEcho { steps: 10, batch: 4, lr: 1e-3, seed: 9, p_null: 0.1, p_id: 0.1 });
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        net.save(&path).unwrap();
        let back = DenoiserNet::load(&path).unwrap();
        assert_eq!(back, net);
        let (z, c) = state(TaskKind::Vec, 2, 0.7);
        assert_eq!(
            back.predict(&z, &c, Instruction::ID).unwrap(),
            net.predict(&z, &c, Instruction::ID).unwrap()
        );
        let bytes = net.to_bytes();
        let header_len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 14 + header_len + 8 * net.params().num_scalars());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let net = DenoiserNet::init(1, TaskKind::Vec);
        let mut bytes = net.to_bytes();
        let mut bad = bytes.clone();
        bad[0] ^= 0xff;
        assert!(matches!(DenoiserNet::from_bytes(&bad), Err(ModelError::BadMagic)));
        let n = bytes.len();
        assert!(matches!(
            DenoiserNet::from_bytes(&bytes[..n - 8]),
            Err(ModelError::Truncated { .. })
        ));
        bytes.push(0);
        assert!(matches!(DenoiserNet::from_bytes(&bytes), Err(ModelError::TrailingBytes(1))));
    }

    #[test]
    fn checkpoint_rejects_header_shape_mismatch() {
        let net = DenoiserNet::init(1, TaskKind::Vec);
        let mut header = net.header();
        header.params[1].shape = vec![128, 40];
        let hb = serde_json::to_vec(&header).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(hb.len() as u64).to_le_bytes());
        bytes.extend_from_slice(&hb);
        bytes.resize(bytes.len() + 8 * net.params().num_scalars(), 0);
        assert!(matches!(DenoiserNet::from_bytes(&bytes), Err(ModelError::ShapeMismatch { .. })));
    }

    #[test]
    fn gradcheck_small_denoiser() {
        let mut net = DenoiserNet::init_with(4, TaskKind::Vec, 16, 3);
        let report = net.gradcheck(1, usize::MAX).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn time_embedding_values() {
        let e = time_embedding(0.5);
        assert!((e[0] - 1.0).abs() < 1e-15);
        assert!(e[1].abs() < 1e-15);
        assert!((e[3] + 1.0).abs() < 1e-15);
    }
}
