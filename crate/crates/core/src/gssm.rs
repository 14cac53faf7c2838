//! Generative Gaussian state-space models.
//!
//! Four variants share one interface: a fixed linear system, the 2-D
//! nonlinear system with scalar parameters `alpha` and `beta`, the deep
//! Markov model (gated transition + MLP Bernoulli emission), and its
//! action-conditioned form in which the previous action enters the gate and
//! proposal networks.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp, Nonlinearity};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl Prior {
    pub fn standard(dim: usize) -> Self {
        Prior {
            mean: vec![0.0; dim],
            var: vec![1.0; dim],
        }
    }
}

/// Diagonal linear system `z_t ~ N(a z + c, q)`, `x_t ~ N(h z, r)` with
/// observation dimension equal to the latent dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearConfig {
    pub dim: usize,
    pub a: Vec<f64>,
    pub c: Vec<f64>,
    pub trans_var: Vec<f64>,
    pub emit_scale: Vec<f64>,
    pub emit_var: Vec<f64>,
    pub prior: Prior,
    #[serde(default)]
    pub trainable: Vec<String>,
}

impl LinearConfig {
    /// `z_t ~ N(z_{t-1} + 0.05, 10)`, `x_t ~ N(0.5 z_t, 20)`, `z_1 ~ N(0, 1)`.
    pub fn fig2() -> Self {
        LinearConfig {
            dim: 1,
            a: vec![1.0],
            c: vec![0.05],
            trans_var: vec![10.0],
            emit_scale: vec![0.5],
            emit_var: vec![20.0],
            prior: Prior::standard(1),
            trainable: vec![],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NonlinearConfig {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default = "one")]
    pub trans_var: f64,
    #[serde(default = "half")]
    pub emit_scale: f64,
    #[serde(default = "tenth")]
    pub emit_var: f64,
    #[serde(default = "standard_prior_2d")]
    pub prior: Prior,
    #[serde(default = "alpha_beta")]
    pub trainable: Vec<String>,
}

fn one() -> f64 {
    1.0
}
fn half() -> f64 {
    0.5
}
fn tenth() -> f64 {
    0.1
}
fn standard_prior_2d() -> Prior {
    Prior::standard(2)
}
fn alpha_beta() -> Vec<String> {
    vec!["alpha".into(), "beta".into()]
}

impl NonlinearConfig {
    pub fn new(alpha: f64, beta: f64) -> Self {
        NonlinearConfig {
            alpha,
            beta,
            trans_var: 1.0,
            emit_scale: 0.5,
            emit_var: 0.1,
            prior: Prior::standard(2),
            trainable: alpha_beta(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DmmConfig {
    pub latent_dim: usize,
    pub obs_dim: usize,
    #[serde(default)]
    pub action_dim: usize,
    #[serde(default = "emission_hidden")]
    pub emission_hidden: usize,
    #[serde(default = "transition_hidden")]
    pub transition_hidden: usize,
    #[serde(default = "tanh")]
    pub emission_nonlinearity: Nonlinearity,
    #[serde(default)]
    pub prior: Option<Prior>,
    /// Trainable parameter ids; `None` trains everything.
    #[serde(default)]
    pub trainable: Option<Vec<String>>,
}

fn emission_hidden() -> usize {
    100
}
fn transition_hidden() -> usize {
    200
}
fn tanh() -> Nonlinearity {
    Nonlinearity::Tanh
}

impl DmmConfig {
    pub fn new(latent_dim: usize, obs_dim: usize) -> Self {
        DmmConfig {
            latent_dim,
            obs_dim,
            action_dim: 0,
            emission_hidden: emission_hidden(),
            transition_hidden: transition_hidden(),
            emission_nonlinearity: Nonlinearity::Tanh,
            prior: None,
            trainable: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant")]
pub enum ModelConfig {
    #[serde(rename = "LinearGSSM")]
    Linear(LinearConfig),
    #[serde(rename = "NonlinearGSSM2D")]
    Nonlinear2d(NonlinearConfig),
    #[serde(rename = "DMM")]
    Dmm(DmmConfig),
    #[serde(rename = "DMM-Actions")]
    DmmActions(DmmConfig),
}

impl ModelConfig {
    pub fn variant_name(&self) -> &'static str {
        match self {
            ModelConfig::Linear(_) => "LinearGSSM",
            ModelConfig::Nonlinear2d(_) => "NonlinearGSSM2D",
            ModelConfig::Dmm(_) => "DMM",
            ModelConfig::DmmActions(_) => "DMM-Actions",
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            ModelConfig::Linear(c) => c.dim,
            ModelConfig::Nonlinear2d(_) => 2,
            ModelConfig::Dmm(c) | ModelConfig::DmmActions(c) => c.latent_dim,
        }
    }

    pub fn obs_dim(&self) -> usize {
        match self {
            ModelConfig::Linear(c) => c.dim,
            ModelConfig::Nonlinear2d(_) => 2,
            ModelConfig::Dmm(c) | ModelConfig::DmmActions(c) => c.obs_dim,
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            ModelConfig::DmmActions(c) => c.action_dim,
            _ => 0,
        }
    }

    pub fn prior(&self) -> Prior {
        match self {
            ModelConfig::Linear(c) => c.prior.clone(),
            ModelConfig::Nonlinear2d(c) => c.prior.clone(),
            ModelConfig::Dmm(c) | ModelConfig::DmmActions(c) => {
                c.prior.clone().unwrap_or_else(|| Prior::standard(c.latent_dim))
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let prior = self.prior();
        let d = self.latent_dim();
        if d == 0 || self.obs_dim() == 0 {
            return Err(Error::contract("latent and observation dimensions must be positive"));
        }
        if prior.mean.len() != d || prior.var.len() != d {
            return Err(Error::Dim {
                what: "prior",
                found: prior.mean.len().max(prior.var.len()),
                expected: d,
            });
        }
        if prior.var.iter().any(|&v| v < 0.0) {
            return Err(Error::contract("prior variance must be nonnegative"));
        }
        match self {
            ModelConfig::Linear(c) => {
                for (name, v) in [
                    ("a", &c.a),
                    ("c", &c.c),
                    ("trans_var", &c.trans_var),
                    ("emit_scale", &c.emit_scale),
                    ("emit_var", &c.emit_var),
                ] {
                    if v.len() != c.dim {
                        return Err(Error::contract(format!(
                            "LinearGSSM field `{name}` has {} entries, expected {}",
                            v.len(),
                            c.dim
                        )));
                    }
                }
                if c.trans_var.iter().chain(&c.emit_var).any(|&v| v < 0.0) {
                    return Err(Error::contract("variances must be nonnegative"));
                }
            }
            ModelConfig::Nonlinear2d(c) => {
                if c.trans_var < 0.0 || c.emit_var < 0.0 {
                    return Err(Error::contract("variances must be nonnegative"));
                }
            }
            ModelConfig::Dmm(c) => {
                if c.action_dim != 0 {
                    return Err(Error::contract("variant DMM takes no actions; use DMM-Actions"));
                }
            }
            ModelConfig::DmmActions(c) => {
                if c.action_dim == 0 {
                    return Err(Error::contract("DMM-Actions requires action_dim >= 1"));
                }
            }
        }
        Ok(())
    }
}

/// Named layers of a deep Markov model.
#[derive(Clone, Debug, PartialEq)]
struct DmmLayers {
    gate: Mlp,
    proposal: Mlp,
    skip: Linear,
    var: Linear,
    emit: Mlp,
    emit_out: Linear,
}

impl DmmLayers {
    fn new(c: &DmmConfig) -> Self {
        let input = c.latent_dim + c.action_dim;
        let (d, th, eh) = (c.latent_dim, c.transition_hidden, c.emission_hidden);
        let nl = c.emission_nonlinearity;
        DmmLayers {
            gate: Mlp::new("trans.gate", input, th, d, Nonlinearity::Relu, Nonlinearity::Sigmoid),
            proposal: Mlp::new("trans.proposal", input, th, d, Nonlinearity::Relu, Nonlinearity::Identity),
            skip: Linear::new("trans.skip", d, d),
            var: Linear::new("trans.var", d, d),
            emit: Mlp::new("emit.mlp", d, eh, eh, nl, nl),
            emit_out: Linear::new("emit.out", eh, c.obs_dim),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerativeModel {
    config: ModelConfig,
    params: ParamStore,
    layers: Option<DmmLayers>,
}

/// Transition mean and variance, each `[batch, latent]`.
#[derive(Clone, Copy, Debug)]
pub struct TransitionOut<'t> {
    pub mean: Var<'t>,
    pub var: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub enum EmissionOut<'t> {
    Bernoulli { logits: Var<'t> },
    Gaussian { mean: Var<'t>, var: Var<'t> },
}

impl<'t> EmissionOut<'t> {
    /// Expected observation: probabilities for Bernoulli, the mean otherwise.
    pub fn mean(&self) -> Var<'t> {
        match *self {
            EmissionOut::Bernoulli { logits } => logits.sigmoid(),
            EmissionOut::Gaussian { mean, .. } => mean,
        }
    }

    pub fn is_bernoulli(&self) -> bool {
        matches!(self, EmissionOut::Bernoulli { .. })
    }
}

impl GenerativeModel {
    /// Builds a model, initializing any learned weights from `rng`.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut layers = None;
        match &config {
            ModelConfig::Linear(c) => {
                params.insert("a", Tensor::vector(c.a.clone()));
                params.insert("c", Tensor::vector(c.c.clone()));
                params.insert("trans_var", Tensor::vector(c.trans_var.clone()));
                params.insert("emit_scale", Tensor::vector(c.emit_scale.clone()));
                params.insert("emit_var", Tensor::vector(c.emit_var.clone()));
            }
            ModelConfig::Nonlinear2d(c) => {
                params.insert("alpha", Tensor::scalar(c.alpha));
                params.insert("beta", Tensor::scalar(c.beta));
            }
            ModelConfig::Dmm(c) | ModelConfig::DmmActions(c) => {
                let l = DmmLayers::new(c);
                l.gate.init(&mut params, rng);
                l.proposal.init(&mut params, rng);
                params.insert(&l.skip.w, Tensor::eye(c.latent_dim));
                params.insert(&l.skip.b, Tensor::zeros(&[c.latent_dim]));
                l.var.init(&mut params, rng);
                l.emit.init(&mut params, rng);
                l.emit_out.init(&mut params, rng);
                layers = Some(l);
            }
        }
        let model = GenerativeModel {
            config,
            params,
            layers,
        };
        model.check_trainable()?;
        Ok(model)
    }

    /// Reassembles a model from a config and previously saved parameters.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut template = Self::new(config, &mut rng::stream(0, rng::Stream::Init))?;
        for (id, t) in template.params.iter() {
            let got = params.get(id)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "model parameters",
                    lhs: got.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if params.len() != template.params.len() {
            return Err(Error::Format("unexpected extra model parameters".into()));
        }
        template.params = params;
        Ok(template)
    }

    fn check_trainable(&self) -> Result<()> {
        for id in self.trainable_ids() {
            if !self.params.contains(&id) {
                return Err(Error::UnknownParam(id));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim()
    }

    pub fn obs_dim(&self) -> usize {
        self.config.obs_dim()
    }

    pub fn action_dim(&self) -> usize {
        self.config.action_dim()
    }

    pub fn has_actions(&self) -> bool {
        self.action_dim() > 0
    }

    pub fn is_bernoulli(&self) -> bool {
        matches!(self.config, ModelConfig::Dmm(_) | ModelConfig::DmmActions(_))
    }

    pub fn trainable_ids(&self) -> Vec<String> {
        match &self.config {
            ModelConfig::Linear(c) => c.trainable.clone(),
            ModelConfig::Nonlinear2d(c) => c.trainable.clone(),
            ModelConfig::Dmm(c) | ModelConfig::DmmActions(c) => match &c.trainable {
                Some(ids) => ids.clone(),
                None => self.params.ids().map(str::to_string).collect(),
            },
        }
    }

    pub fn bind<'m, 't>(&'m self, tape: &'t Tape) -> BoundModel<'m, 't> {
        BoundModel {
            model: self,
            tape,
            p: self.params.bind(tape),
        }
    }

    /// Samples `n` sequences of length `t`. Latent noise comes from `rng_z`,
    /// observation noise from `rng_x`, so emissions can be regenerated
    /// from the latent path alone.
    pub fn sample_paths(
        &self,
        n: usize,
        t: usize,
        actions: Option<&[Tensor]>,
        rng_z: &mut Rng,
        rng_x: &mut Rng,
    ) -> Result<Vec<(Tensor, Tensor)>> {
        if t == 0 {
            return Err(Error::contract("sequence length must be at least 1"));
        }
        if self.has_actions() {
            let us = actions.ok_or_else(|| Error::contract("DMM-Actions sampling requires actions"))?;
            if us.len() != n {
                return Err(Error::Dim {
                    what: "action sequences",
                    found: us.len(),
                    expected: n,
                });
            }
            for u in us {
                if u.shape() != [t, self.action_dim()] {
                    return Err(Error::Shape {
                        op: "sample actions",
                        lhs: u.shape().to_vec(),
                        rhs: vec![t, self.action_dim()],
                    });
                }
            }
        }
        let d = self.latent_dim();
        let tape = Tape::new();
        let bm = self.bind(&tape);
        let mut zs = Vec::with_capacity(t);
        let (pm, pv) = bm.prior(n);
        let mut z = sample_gaussian(&pm.value(), &pv.value(), rng_z);
        for step in 0..t {
            if step > 0 {
                let u = actions.filter(|_| self.has_actions()).map(|us| {
                    tape.constant(stack_rows(us.iter().map(|u| u.row(step - 1))))
                });
                let tr = bm.transition(tape.constant(z.clone()), u)?;
                z = sample_gaussian(&tr.mean.value(), &tr.var.value(), rng_z);
            }
            zs.push(z.clone());
        }
        let paths: Vec<Tensor> = (0..n)
            .map(|i| stack_rows(zs.iter().map(|zt| zt.row(i))).reshape(vec![t, d]))
            .collect();
        let xs = self.sample_emission_paths(&paths, rng_x)?;
        Ok(paths.into_iter().zip(xs).collect())
    }

    /// Draws observations for latent paths `[T, latent]` of equal length,
    /// consuming `rng_x` in the same order as [`Self::sample_paths`].
    pub fn sample_emission_paths(&self, paths: &[Tensor], rng_x: &mut Rng) -> Result<Vec<Tensor>> {
        let Some(first) = paths.first() else {
            return Ok(Vec::new());
        };
        let t = first.rows();
        if paths.iter().any(|p| p.shape() != [t, self.latent_dim()]) {
            return Err(Error::contract("latent paths must share shape [T, latent]"));
        }
        let tape = Tape::new();
        let bm = self.bind(&tape);
        let xs: Vec<Tensor> = (0..t)
            .map(|step| {
                let zt = stack_rows(paths.iter().map(|p| p.row(step)));
                bm.sample_emission(tape.constant(zt), rng_x)
            })
            .collect();
        Ok((0..paths.len())
            .map(|i| stack_rows(xs.iter().map(|xt| xt.row(i))))
            .collect())
    }

    /// One sequence `(z [T, latent], x [T, obs])`.
    pub fn sample_sequence(
        &self,
        t: usize,
        actions: Option<&Tensor>,
        rng: &mut Rng,
    ) -> Result<(Tensor, Tensor)> {
        let mut rz = rng::fork(rng);
        let mut rx = rng::fork(rng);
        let us = actions.map(|u| vec![u.clone()]);
        Ok(self
            .sample_paths(1, t, us.as_deref(), &mut rz, &mut rx)?
            .remove(0))
    }

}

pub(crate) fn stack_rows<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Tensor {
    let rows: Vec<Vec<f64>> = rows.map(<[f64]>::to_vec).collect();
    Tensor::from_rows(&rows)
}

pub(crate) fn sample_gaussian(mean: &Tensor, var: &Tensor, rng: &mut Rng) -> Tensor {
    let eps = rng::normal_tensor(rng, mean.shape());
    Tensor::new(
        mean.shape().to_vec(),
        mean.data()
            .iter()
            .zip(var.data())
            .zip(eps.data())
            .map(|((m, v), e)| m + v.sqrt() * e)
            .collect(),
    )
}

/// A model whose parameters are bound as leaves on a tape.
pub struct BoundModel<'m, 't> {
    model: &'m GenerativeModel,
    tape: &'t Tape,
    p: Bound<'t>,
}

impl<'m, 't> BoundModel<'m, 't> {
    pub fn model(&self) -> &'m GenerativeModel {
        self.model
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Prior over `z_1`, expanded to `batch` rows.
    pub fn prior(&self, batch: usize) -> (Var<'t>, Var<'t>) {
        let prior = self.model.config.prior();
        let d = prior.mean.len();
        let rep = |v: &[f64]| {
            let data = (0..batch).flat_map(|_| v.iter().copied()).collect();
            self.tape.constant(Tensor::new(vec![batch, d], data))
        };
        (rep(&prior.mean), rep(&prior.var))
    }

    fn ones(&self, like: Var<'t>) -> Var<'t> {
        self.tape.constant(Tensor::ones(&like.shape()))
    }

    /// `p(z_t | z_{t-1}, u_{t-1})` for a batch `z_prev: [B, latent]`.
    pub fn transition(&self, z_prev: Var<'t>, u_prev: Option<Var<'t>>) -> Result<TransitionOut<'t>> {
        let zs = z_prev.shape();
        if zs.len() != 2 || zs[1] != self.model.latent_dim() {
            return Err(Error::Dim {
                what: "z_prev width",
                found: *zs.last().unwrap_or(&0),
                expected: self.model.latent_dim(),
            });
        }
        match (self.model.has_actions(), u_prev) {
            (true, None) => return Err(Error::contract("DMM-Actions transition requires u_prev")),
            (false, Some(_)) => {
                return Err(Error::contract(format!(
                    "{} transition takes no actions",
                    self.model.config.variant_name()
                )))
            }
            (true, Some(u)) if u.shape() != [zs[0], self.model.action_dim()] => {
                return Err(Error::Shape {
                    op: "transition actions",
                    lhs: u.shape(),
                    rhs: vec![zs[0], self.model.action_dim()],
                })
            }
            _ => {}
        }
        let p = &self.p;
        Ok(match &self.model.config {
            ModelConfig::Linear(_) => TransitionOut {
                mean: z_prev * p.get("a") + p.get("c"),
                var: self.ones(z_prev) * p.get("trans_var"),
            },
            ModelConfig::Nonlinear2d(c) => {
                let z0 = z_prev.slice(0, 1);
                let z1 = z_prev.slice(1, 2);
                let m0 = z0.scale(0.2) + (z1 * p.get("alpha")).tanh();
                let m1 = z1.scale(0.2) + (z0 * p.get("beta")).sin();
                TransitionOut {
                    mean: self.tape.concat(&[m0, m1]),
                    var: self.ones(z_prev).scale(c.trans_var),
                }
            }
            ModelConfig::Dmm(_) | ModelConfig::DmmActions(_) => {
                let input = match u_prev {
                    Some(u) => self.tape.concat(&[z_prev, u]),
                    None => z_prev,
                };
                self.gated_transition(z_prev, input)
            }
        })
    }

    /// Gated transition: the linear skip path sees `z` only, the gate and
    /// proposal networks see `input` (`z`, or `[z; u]` with actions).
    pub fn gated_transition(&self, z: Var<'t>, input: Var<'t>) -> TransitionOut<'t> {
        let l = self.model.layers.as_ref().expect("gated transition on a DMM");
        let p = &self.p;
        let g = l.gate.forward(p, input);
        let h = l.proposal.forward(p, input);
        let lin = l.skip.forward(p, z);
        let mean = g.rsub_scalar(1.0) * lin + g * h;
        let var = l.var.forward(p, h.relu()).softplus();
        TransitionOut { mean, var }
    }

    pub fn emission(&self, z: Var<'t>) -> EmissionOut<'t> {
        let p = &self.p;
        match &self.model.config {
            ModelConfig::Linear(_) => EmissionOut::Gaussian {
                mean: z * p.get("emit_scale"),
                var: self.ones(z) * p.get("emit_var"),
            },
            ModelConfig::Nonlinear2d(c) => EmissionOut::Gaussian {
                mean: z.scale(c.emit_scale),
                var: self.ones(z).scale(c.emit_var),
            },
            ModelConfig::Dmm(_) | ModelConfig::DmmActions(_) => {
                let l = self.model.layers.as_ref().expect("dmm layers");
                EmissionOut::Bernoulli {
                    logits: l.emit_out.forward(p, l.emit.forward(p, z)),
                }
            }
        }
    }

    /// Masked log-likelihood `sum_d mask_d log p(x_d | z)`, one value per row.
    /// Entries with `mask == 0` never enter the computation.
    pub fn log_emission(&self, x: &Tensor, mask: &Tensor, z: Var<'t>) -> Result<Var<'t>> {
        let m = self.model.obs_dim();
        if x.shape() != mask.shape() || x.cols() != m || x.rank() != 2 {
            return Err(Error::Shape {
                op: "log_emission",
                lhs: x.shape().to_vec(),
                rhs: mask.shape().to_vec(),
            });
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("mask entries must be 0 or 1"));
        }
        let observed = Tensor::new(
            x.shape().to_vec(),
            x.data()
                .iter()
                .zip(mask.data())
                .map(|(&v, &k)| if k == 0.0 { 0.0 } else { v })
                .collect(),
        );
        let em = self.emission(z);
        if em.is_bernoulli() && observed.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::contract("Bernoulli emission requires binary observed x"));
        }
        let xv = self.tape.constant(observed);
        let mv = self.tape.constant(mask.clone());
        let per_dim = match em {
            EmissionOut::Bernoulli { logits } => xv * logits - logits.softplus(),
            EmissionOut::Gaussian { mean, var } => {
                let sq = (xv - mean).square() / var;
                (var.ln().add_scalar(LN_2PI) + sq).scale(-0.5)
            }
        };
        Ok((per_dim * mv).sum_axis(1))
    }

    fn sample_emission(&self, z: Var<'t>, rng: &mut Rng) -> Tensor {
        use rand::Rng as _;
        match self.emission(z) {
            EmissionOut::Bernoulli { logits } => {
                let mut probs = logits.sigmoid().value();
                for p in probs.data_mut() {
                    *p = if rng.random::<f64>() < *p { 1.0 } else { 0.0 };
                }
                probs
            }
            EmissionOut::Gaussian { mean, var } => sample_gaussian(&mean.value(), &var.value(), rng),
        }
    }
}
