//! Sequence datasets: in-memory batches, the JSON dataset file, synthetic
//! generators and missingness masks.

use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::gssm::{DmmConfig, GenerativeModel, LinearConfig, ModelConfig, NonlinearConfig};
use crate::rng::{self, substream, Rng, Stream};
use crate::tensor::Tensor;

pub const DATASET_VERSION: u64 = 1;

/// One observed sequence. `x`, `mask` are `[T, obs]`; `u` is `[T, actions]`
/// with `u[t]` the action taken at step `t` (it drives the transition into
/// step `t + 1`); `z_star` holds ground-truth latents for synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub x: Tensor,
    pub mask: Tensor,
    pub u: Option<Tensor>,
    pub dt: Option<Vec<f64>>,
    pub z_star: Option<Tensor>,
}

impl Sequence {
    pub fn fully_observed(x: Tensor) -> Self {
        let mask = Tensor::ones(x.shape());
        Sequence {
            x,
            mask,
            u: None,
            dt: None,
            z_star: None,
        }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `x` with every masked entry replaced by zero.
    pub fn observed_x(&self) -> Tensor {
        self.x.zip_map(&self.mask, |v, m| if m == 0.0 { 0.0 } else { v })
    }

    /// First `k` steps.
    pub fn prefix(&self, k: usize) -> Sequence {
        let cut = |t: &Tensor| {
            let c = t.cols();
            Tensor::new(vec![k, c], t.data()[..k * c].to_vec())
        };
        Sequence {
            x: cut(&self.x),
            mask: cut(&self.mask),
            u: self.u.as_ref().map(cut),
            dt: self.dt.as_ref().map(|d| d[..k].to_vec()),
            z_star: self.z_star.as_ref().map(cut),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceBatch {
    pub obs_dim: usize,
    pub action_dim: usize,
    pub sequences: Vec<Sequence>,
}

impl SequenceBatch {
    pub fn new(obs_dim: usize, action_dim: usize, sequences: Vec<Sequence>) -> Result<Self> {
        let batch = SequenceBatch {
            obs_dim,
            action_dim,
            sequences,
        };
        batch.validate()?;
        Ok(batch)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(Sequence::len).sum()
    }

    pub fn latent_dim(&self) -> Option<usize> {
        self.sequences.first()?.z_star.as_ref().map(Tensor::cols)
    }

    /// Fraction of mask entries equal to zero.
    pub fn missing_rate(&self) -> f64 {
        let total: usize = self.sequences.iter().map(|s| s.mask.len()).sum();
        if total == 0 {
            return 0.0;
        }
        let missing = self
            .sequences
            .iter()
            .flat_map(|s| s.mask.data())
            .filter(|&&m| m == 0.0)
            .count();
        missing as f64 / total as f64
    }

    pub fn select(&self, indices: &[usize]) -> SequenceBatch {
        SequenceBatch {
            obs_dim: self.obs_dim,
            action_dim: self.action_dim,
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
        }
    }

    /// Splits into the first `n` sequences and the rest.
    pub fn split(&self, n: usize) -> (SequenceBatch, SequenceBatch) {
        let n = n.min(self.len());
        let first: Vec<usize> = (0..n).collect();
        let rest: Vec<usize> = (n..self.len()).collect();
        (self.select(&first), self.select(&rest))
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            let schema = |field: &str, msg: String| Error::Schema {
                index: i,
                field: field.into(),
                msg,
            };
            let t = s.len();
            if t == 0 {
                return Err(schema("x", "sequence is empty".into()));
            }
            if s.x.shape() != [t, self.obs_dim] {
                return Err(schema("x", format!("shape {:?}, expected [{t}, {}]", s.x.shape(), self.obs_dim)));
            }
            if s.mask.shape() != s.x.shape() {
                return Err(schema("mask", format!("shape {:?} differs from x {:?}", s.mask.shape(), s.x.shape())));
            }
            if s.mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
                return Err(schema("mask", "entries must be 0 or 1".into()));
            }
            if !s.x.is_finite() {
                return Err(schema("x", "non-finite value".into()));
            }
            match (&s.u, self.action_dim) {
                (None, 0) => {}
                (Some(u), a) if a > 0 && u.shape() == [t, a] => {}
                (None, a) => return Err(schema("u", format!("missing; action_dim is {a}"))),
                (Some(u), a) => {
                    return Err(schema("u", format!("shape {:?}, expected [{t}, {a}]", u.shape())))
                }
            }
            if let Some(dt) = &s.dt {
                if dt.len() != t {
                    return Err(schema("dt", format!("{} entries, expected {t}", dt.len())));
                }
            }
            if let Some(z) = &s.z_star {
                if z.rows() != t {
                    return Err(schema("z_star", format!("{} rows, expected {t}", z.rows())));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Value {
        let mat = |t: &Tensor| -> Vec<Vec<f64>> { (0..t.rows()).map(|r| t.row(r).to_vec()).collect() };
        let sequences: Vec<SequenceDoc> = self
            .sequences
            .iter()
            .map(|s| SequenceDoc {
                x: mat(&s.x),
                mask: if s.mask.data().iter().all(|&m| m == 1.0) {
                    None
                } else {
                    Some(mat(&s.mask))
                },
                u: s.u.as_ref().map(mat),
                dt: s.dt.clone(),
                z_star: s.z_star.as_ref().map(mat),
            })
            .collect();
        serde_json::json!({
            "format_version": DATASET_VERSION,
            "obs_dim": self.obs_dim,
            "action_dim": self.action_dim,
            "sequences": sequences,
        })
    }

    pub fn from_json(doc: &Value) -> Result<Self> {
        let version = doc
            .get("format_version")
            .and_then(Value::as_u64)
            .ok_or_else(|| Error::Format("missing format_version".into()))?;
        if version != DATASET_VERSION {
            return Err(Error::Version {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let dim = |key: &str| {
            doc.get(key)
                .and_then(Value::as_u64)
                .map(|v| v as usize)
                .ok_or_else(|| Error::Format(format!("missing or invalid `{key}`")))
        };
        let obs_dim = dim("obs_dim")?;
        let action_dim = match doc.get("action_dim") {
            None | Some(Value::Null) => 0,
            Some(_) => dim("action_dim")?,
        };
        let seqs = doc
            .get("sequences")
            .and_then(Value::as_array)
            .ok_or_else(|| Error::Format("missing `sequences` array".into()))?;
        let mut sequences = Vec::with_capacity(seqs.len());
        for (i, s) in seqs.iter().enumerate() {
            let field = |name: &str| -> Result<Option<Tensor>> {
                match s.get(name) {
                    None | Some(Value::Null) => Ok(None),
                    Some(v) => parse_matrix(v).map(Some).map_err(|msg| Error::Schema {
                        index: i,
                        field: name.into(),
                        msg,
                    }),
                }
            };
            let x = field("x")?.ok_or_else(|| Error::Schema {
                index: i,
                field: "x".into(),
                msg: "missing".into(),
            })?;
            let mask = field("mask")?.unwrap_or_else(|| Tensor::ones(x.shape()));
            let dt = match s.get("dt") {
                None | Some(Value::Null) => None,
                Some(v) => Some(
                    serde_json::from_value::<Vec<f64>>(v.clone()).map_err(|e| Error::Schema {
                        index: i,
                        field: "dt".into(),
                        msg: e.to_string(),
                    })?,
                ),
            };
            sequences.push(Sequence {
                x,
                mask,
                u: field("u")?,
                dt,
                z_star: field("z_star")?,
            });
        }
        SequenceBatch::new(obs_dim, action_dim, sequences)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(&self.to_json())?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text)?;
        Self::from_json(&doc)
    }
}

#[derive(Serialize)]
struct SequenceDoc {
    x: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mask: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    u: Option<Vec<Vec<f64>>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    z_star: Option<Vec<Vec<f64>>>,
}

fn parse_matrix(v: &Value) -> std::result::Result<Tensor, String> {
    let rows = v.as_array().ok_or("expected an array of rows")?;
    let mut out = Vec::with_capacity(rows.len());
    for (r, row) in rows.iter().enumerate() {
        let row = row.as_array().ok_or(format!("row {r} is not an array"))?;
        let vals = row
            .iter()
            .map(|e| e.as_f64().ok_or(format!("row {r} holds a non-number")))
            .collect::<std::result::Result<Vec<f64>, String>>()?;
        out.push(vals);
    }
    let cols = out.first().map_or(0, Vec::len);
    if out.iter().any(|r| r.len() != cols) {
        return Err("ragged rows".into());
    }
    Ok(Tensor::from_rows(&out))
}

fn rngs(seed: u64) -> (Rng, Rng) {
    (substream(seed, Stream::Data, 0), substream(seed, Stream::Data, 1))
}

fn from_paths(model: &GenerativeModel, paths: Vec<(Tensor, Tensor)>, actions: Option<Vec<Tensor>>) -> SequenceBatch {
    let mut actions = actions.map(Vec::into_iter);
    let sequences = paths
        .into_iter()
        .map(|(z, x)| Sequence {
            u: actions.as_mut().and_then(Iterator::next),
            z_star: Some(z),
            ..Sequence::fully_observed(x)
        })
        .collect();
    SequenceBatch {
        obs_dim: model.obs_dim(),
        action_dim: model.action_dim(),
        sequences,
    }
}

/// Samples from a fixed model. Latent noise uses data stream 0 and
/// observation noise data stream 1 of `seed`. Action-conditioned models get
/// random actions, each bit on with probability 1/2.
pub fn sample_dataset(model: &GenerativeModel, n: usize, t: usize, seed: u64) -> Result<SequenceBatch> {
    let (mut rz, mut rx) = rngs(seed);
    let actions = if model.has_actions() {
        Some(gen_actions(n, t, model.action_dim(), seed, &Policy::RandomBernoulli { p: 0.5 }, None)?)
    } else {
        None
    };
    let paths = model.sample_paths(n, t, actions.as_deref(), &mut rz, &mut rx)?;
    Ok(from_paths(model, paths, actions))
}

/// The fixed 1-D linear system `z_t ~ N(z_{t-1} + 0.05, 10)`,
/// `x_t ~ N(0.5 z_t, 20)` with `z_1 ~ N(0, 1)`.
pub fn gen_linear_fig2(n: usize, t: usize, seed: u64) -> Result<SequenceBatch> {
    let model = GenerativeModel::new(ModelConfig::Linear(LinearConfig::fig2()), &mut rng::stream(seed, Stream::Init))?;
    sample_dataset(&model, n, t, seed)
}

/// The 2-D nonlinear system with transition parameters `alpha`, `beta`.
pub fn gen_nonlinear_fig3(n: usize, t: usize, alpha: f64, beta: f64, seed: u64) -> Result<SequenceBatch> {
    let model = GenerativeModel::new(
        ModelConfig::Nonlinear2d(NonlinearConfig::new(alpha, beta)),
        &mut rng::stream(seed, Stream::Init),
    )?;
    sample_dataset(&model, n, t, seed)
}

/// A randomly initialized DMM used as the generator of binary data.
pub fn toy_binary_model(d: usize, seed: u64) -> Result<GenerativeModel> {
    if d < 2 {
        return Err(Error::contract("toy binary data needs at least 2 observed dimensions"));
    }
    let cfg = DmmConfig {
        emission_hidden: 16,
        transition_hidden: 16,
        ..DmmConfig::new(2, d)
    };
    let mut model = GenerativeModel::new(ModelConfig::Dmm(cfg), &mut substream(seed, Stream::Init, 7))?;
    // Sharpen emissions so the data carry signal about the latent path.
    let w = model.params_mut().get_mut("emit.out.w")?;
    *w = w.map(|v| 3.0 * v);
    Ok(model)
}

/// Binary sequences from [`toy_binary_model`]; returns the data and the
/// generating model.
pub fn gen_toy_binary(n: usize, t: usize, d: usize, seed: u64) -> Result<(SequenceBatch, GenerativeModel)> {
    let model = toy_binary_model(d, seed)?;
    let batch = sample_dataset(&model, n, t, seed)?;
    Ok((batch, model))
}

/// How synthetic actions are chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "kebab-case")]
pub enum Policy {
    /// Every action bit is on independently with probability `p`.
    RandomBernoulli { p: f64 },
    /// Turns on bit `drug` while observed dimension `dim` exceeds `level`.
    Threshold { dim: usize, level: f64, drug: usize },
}

impl Policy {
    fn decide(&self, x_t: &[f64], action_dim: usize, rng: &mut Rng) -> Vec<f64> {
        match *self {
            Policy::RandomBernoulli { p } => (0..action_dim)
                .map(|_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
                .collect(),
            Policy::Threshold { dim, level, drug } => {
                let mut u = vec![0.0; action_dim];
                if x_t[dim] > level {
                    u[drug] = 1.0;
                }
                u
            }
        }
    }

    fn validate(&self, action_dim: usize, obs_dim: Option<usize>) -> Result<()> {
        match *self {
            Policy::RandomBernoulli { p } if !(0.0..=1.0).contains(&p) => {
                Err(Error::contract(format!("action probability {p} outside [0, 1]")))
            }
            Policy::Threshold { drug, .. } if drug >= action_dim => {
                Err(Error::contract(format!("drug index {drug} >= action_dim {action_dim}")))
            }
            Policy::Threshold { dim, .. } if obs_dim.is_some_and(|m| dim >= m) => {
                Err(Error::contract(format!("threshold dimension {dim} out of range")))
            }
            Policy::Threshold { .. } if obs_dim.is_none() => {
                Err(Error::contract("threshold policy needs observations"))
            }
            _ => Ok(()),
        }
    }
}

/// Binary action sequences `[T, action_dim]`. The threshold policy reads
/// the supplied observations; the random policy ignores them.
pub fn gen_actions(
    n: usize,
    t: usize,
    action_dim: usize,
    seed: u64,
    policy: &Policy,
    observations: Option<&[Tensor]>,
) -> Result<Vec<Tensor>> {
    policy.validate(action_dim, observations.and_then(|o| o.first()).map(Tensor::cols))?;
    if let Some(obs) = observations {
        if obs.len() != n || obs.iter().any(|x| x.rows() < t) {
            return Err(Error::contract("observations must cover every sequence and step"));
        }
    }
    let mut rng = substream(seed, Stream::Data, 2);
    Ok((0..n)
        .map(|i| {
            let data: Vec<f64> = (0..t)
                .flat_map(|step| {
                    let x_t = observations.map_or(&[][..], |o| o[i].row(step));
                    policy.decide(x_t, action_dim, &mut rng)
                })
                .collect();
            Tensor::new(vec![t, action_dim], data)
        })
        .collect())
}

/// Parameters of the action-augmented synthetic patient system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionSystem {
    /// Additive shift of latent 0 per unit of action 0 (negative lowers it).
    pub effect: f64,
    pub policy: Policy,
}

impl Default for ActionSystem {
    fn default() -> Self {
        ActionSystem {
            effect: -1.0,
            policy: Policy::RandomBernoulli { p: 0.5 },
        }
    }
}

impl ActionSystem {
    pub const LATENT_DIM: usize = 2;
    pub const OBS_DIM: usize = 4;
    pub const ACTION_DIM: usize = 2;
    /// Observed dimension driven by latent 0 (the "high indicator").
    pub const INDICATOR: usize = 0;

    const EMIT_W: [[f64; 2]; 4] = [[3.0, 0.0], [-2.0, 1.0], [0.0, 2.0], [1.0, 1.0]];
    const EMIT_B: [f64; 4] = [0.0, 0.0, 0.0, -0.5];

    fn emission_probs(z: &[f64]) -> Vec<f64> {
        Self::EMIT_W
            .iter()
            .zip(Self::EMIT_B)
            .map(|(w, b)| sigmoid(w[0] * z[0] + w[1] * z[1] + b))
            .collect()
    }

    fn step(&self, z: &[f64], u: &[f64], rng: &mut Rng) -> Vec<f64> {
        let sd = 0.2f64.sqrt();
        vec![
            0.8 * z[0] + 0.3 + self.effect * u[0] + sd * rng::normal(rng),
            0.8 * z[1] + sd * rng::normal(rng),
        ]
    }

    /// Simulates `n` sequences. Action 0 shifts latent 0 by `effect` at the
    /// next step; action 1 has no effect. Actions are chosen online from
    /// the current observation.
    pub fn generate(&self, n: usize, t: usize, seed: u64) -> Result<SequenceBatch> {
        self.policy.validate(Self::ACTION_DIM, Some(Self::OBS_DIM))?;
        if t == 0 {
            return Err(Error::contract("sequence length must be at least 1"));
        }
        let (mut rz, mut rx) = rngs(seed);
        let mut ru = substream(seed, Stream::Data, 2);
        let mut sequences = Vec::with_capacity(n);
        for _ in 0..n {
            let mut z = vec![rng::normal(&mut rz), rng::normal(&mut rz)];
            let (mut zs, mut xs, mut us): (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>) = (Vec::new(), Vec::new(), Vec::new());
            for step in 0..t {
                if step > 0 {
                    z = self.step(&z, us.last().unwrap(), &mut rz);
                }
                let x: Vec<f64> = Self::emission_probs(&z)
                    .into_iter()
                    .map(|p| if rx.random::<f64>() < p { 1.0 } else { 0.0 })
                    .collect();
                let u = self.policy.decide(&x, Self::ACTION_DIM, &mut ru);
                zs.push(z.clone());
                xs.push(x);
                us.push(u);
            }
            sequences.push(Sequence {
                u: Some(Tensor::from_rows(&us)),
                z_star: Some(Tensor::from_rows(&zs)),
                ..Sequence::fully_observed(Tensor::from_rows(&xs))
            });
        }
        SequenceBatch::new(Self::OBS_DIM, Self::ACTION_DIM, sequences)
    }
}

/// Drops observations i.i.d. with probability `rate` within `columns`
/// (all columns when `None`). Dropped entries get mask 0 and x 0.
pub fn apply_missingness(batch: &SequenceBatch, rate: f64, seed: u64, columns: Option<&[usize]>) -> Result<SequenceBatch> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::contract(format!("missingness rate {rate} outside [0, 1]")));
    }
    let all: Vec<usize> = (0..batch.obs_dim).collect();
    let cols = columns.unwrap_or(&all);
    if let Some(&c) = cols.iter().find(|&&c| c >= batch.obs_dim) {
        return Err(Error::contract(format!("column {c} >= obs_dim {}", batch.obs_dim)));
    }
    let mut rng = substream(seed, Stream::Data, 3);
    let mut out = batch.clone();
    for s in &mut out.sequences {
        let m = s.x.cols();
        for r in 0..s.len() {
            for &c in cols {
                if rng.random::<f64>() < rate {
                    s.mask.data_mut()[r * m + c] = 0.0;
                }
            }
        }
        s.x = s.observed_x();
    }
    Ok(out)
}
