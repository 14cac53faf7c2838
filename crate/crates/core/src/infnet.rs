//! Recurrent inference networks producing diagonal-Gaussian posteriors
//! `q(z_t | ...)` over latent paths.
//!
//! Five variants differ in which observations each step conditions on and
//! whether the previous sampled latent enters the combiner:
//!
//! | variant | encoder        | conditions on              |
//! |---------|----------------|----------------------------|
//! | MF-L    | forward        | `x_1..x_t`                 |
//! | MF-LR   | bidirectional  | `x_1..x_T`                 |
//! | ST-L    | forward        | `z_{t-1}, x_1..x_t`        |
//! | DKS     | backward       | `z_{t-1}, x_t..x_T`        |
//! | ST-LR   | bidirectional  | `z_{t-1}, x_1..x_T`        |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::gssm::stack_rows;
use crate::nn::{Linear, Lstm, Nonlinearity};
use crate::params::{Bound, ParamStore};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "MF-L")]
    MfL,
    #[serde(rename = "MF-LR")]
    MfLr,
    #[serde(rename = "ST-L")]
    StL,
    #[serde(rename = "DKS")]
    Dks,
    #[serde(rename = "ST-LR")]
    StLr,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::MfL, Variant::MfLr, Variant::StL, Variant::Dks, Variant::StLr];

    pub fn name(self) -> &'static str {
        match self {
            Variant::MfL => "MF-L",
            Variant::MfLr => "MF-LR",
            Variant::StL => "ST-L",
            Variant::Dks => "DKS",
            Variant::StLr => "ST-LR",
        }
    }

    pub fn uses_left(self) -> bool {
        !matches!(self, Variant::Dks)
    }

    pub fn uses_right(self) -> bool {
        matches!(self, Variant::MfLr | Variant::Dks | Variant::StLr)
    }

    /// Whether the previous latent sample enters the combiner.
    pub fn is_structured(self) -> bool {
        matches!(self, Variant::StL | Variant::Dks | Variant::StLr)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown inference network `{s}` (expected one of MF-L, MF-LR, ST-L, DKS, ST-LR)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfNetConfig {
    pub variant: Variant,
    pub obs_dim: usize,
    #[serde(default)]
    pub action_dim: usize,
    pub latent_dim: usize,
    /// Width of the per-step input layer.
    #[serde(default = "default_width")]
    pub embed_dim: usize,
    #[serde(default = "default_width")]
    pub rnn_dim: usize,
    #[serde(default = "default_embed_nl")]
    pub embed_nonlinearity: Nonlinearity,
}

fn default_width() -> usize {
    40
}

fn default_embed_nl() -> Nonlinearity {
    Nonlinearity::Tanh
}

impl InfNetConfig {
    pub fn new(variant: Variant, obs_dim: usize, action_dim: usize, latent_dim: usize) -> Self {
        InfNetConfig {
            variant,
            obs_dim,
            action_dim,
            latent_dim,
            embed_dim: default_width(),
            rnn_dim: default_width(),
            embed_nonlinearity: default_embed_nl(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.latent_dim == 0 || self.embed_dim == 0 || self.rnn_dim == 0 {
            return Err(Error::contract("inference network dimensions must be positive"));
        }
        Ok(())
    }
}

/// Per-step diagonal Gaussians over a latent path.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianSeq {
    /// `[T, latent]`
    pub means: Tensor,
    /// `[T, latent]`, strictly positive
    pub vars: Tensor,
}

impl GaussianSeq {
    pub fn new(means: Tensor, vars: Tensor) -> Result<Self> {
        if means.shape() != vars.shape() || means.rank() != 2 {
            return Err(Error::Shape {
                op: "GaussianSeq",
                lhs: means.shape().to_vec(),
                rhs: vars.shape().to_vec(),
            });
        }
        if vars.data().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::contract("posterior variances must be positive"));
        }
        Ok(GaussianSeq { means, vars })
    }

    pub fn len(&self) -> usize {
        self.means.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Head {
    mean: Linear,
    var: Linear,
}

impl Head {
    fn new(name: &str, inputs: usize, latent: usize) -> Self {
        Head {
            mean: Linear::new(&format!("{name}.mean"), inputs, latent),
            var: Linear::new(&format!("{name}.var"), inputs, latent),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.mean.init(store, rng);
        self.var.init(store, rng);
    }

    fn forward<'t>(&self, p: &Bound<'t>, h: Var<'t>) -> (Var<'t>, Var<'t>) {
        (self.mean.forward(p, h), self.var.forward(p, h).softplus())
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layers {
    embed: Linear,
    fwd: Option<Lstm>,
    bwd: Option<Lstm>,
    left: Option<Head>,
    right: Option<Head>,
    /// Structured variants: `tanh(W z_prev + b)` then one shared head.
    z_in: Option<Linear>,
    combined: Option<Head>,
}

impl Layers {
    fn new(c: &InfNetConfig) -> Self {
        let v = c.variant;
        let mf = !v.is_structured();
        Layers {
            embed: Linear::new("q.embed", c.obs_dim + c.action_dim, c.embed_dim),
            fwd: v.uses_left().then(|| Lstm::new("q.fwd", c.embed_dim, c.rnn_dim)),
            bwd: v.uses_right().then(|| Lstm::new("q.bwd", c.embed_dim, c.rnn_dim)),
            left: (mf && v.uses_left()).then(|| Head::new("q.left", c.rnn_dim, c.latent_dim)),
            right: (mf && v.uses_right()).then(|| Head::new("q.right", c.rnn_dim, c.latent_dim)),
            z_in: v.is_structured().then(|| Linear::new("q.comb.z", c.latent_dim, c.rnn_dim)),
            combined: v.is_structured().then(|| Head::new("q.comb", c.rnn_dim, c.latent_dim)),
        }
    }

    fn init(&self, store: &mut ParamStore, rng: &mut Rng) {
        self.embed.init(store, rng);
        for l in self.fwd.iter().chain(&self.bwd) {
            l.init(store, rng);
        }
        for h in self.left.iter().chain(&self.right).chain(&self.combined) {
            h.init(store, rng);
        }
        if let Some(z) = &self.z_in {
            z.init(store, rng);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InferenceNetwork {
    config: InfNetConfig,
    params: ParamStore,
    layers: Layers,
}

impl InferenceNetwork {
    pub fn new(config: InfNetConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let layers = Layers::new(&config);
        let mut params = ParamStore::new();
        layers.init(&mut params, rng);
        Ok(InferenceNetwork { config, params, layers })
    }

    pub fn from_parts(config: InfNetConfig, params: ParamStore) -> Result<Self> {
        let mut net = Self::new(config, &mut rng::stream(0, rng::Stream::Init))?;
        for (id, t) in net.params.iter() {
            let got = params.get(id)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "inference network parameters",
                    lhs: got.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        if params.len() != net.params.len() {
            return Err(Error::Format("unexpected extra inference network parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn config(&self) -> &InfNetConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind<'n, 't>(&'n self, tape: &'t Tape) -> BoundNet<'n, 't> {
        BoundNet {
            net: self,
            tape,
            p: self.params.bind(tape),
        }
    }

    /// Per-step encoder inputs `[B, obs + actions]` for equal-length
    /// sequences: observed `x` (masked entries zeroed) joined with `u`.
    pub fn inputs(&self, seqs: &[&Sequence]) -> Result<Vec<Tensor>> {
        let c = &self.config;
        let Some(first) = seqs.first() else {
            return Err(Error::contract("no sequences to encode"));
        };
        let t = first.len();
        if t == 0 {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        let mut observed = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.len() != t {
                return Err(Error::contract("batched sequences must share a length"));
            }
            if s.x.cols() != c.obs_dim {
                return Err(Error::Dim {
                    what: "observation width",
                    found: s.x.cols(),
                    expected: c.obs_dim,
                });
            }
            let u_width = s.u.as_ref().map_or(0, Tensor::cols);
            if u_width != c.action_dim {
                return Err(Error::Dim {
                    what: "action width",
                    found: u_width,
                    expected: c.action_dim,
                });
            }
            observed.push(s.observed_x());
        }
        Ok((0..t)
            .map(|step| {
                let rows: Vec<Vec<f64>> = seqs
                    .iter()
                    .zip(&observed)
                    .map(|(s, x)| {
                        let mut r = x.row(step).to_vec();
                        if let Some(u) = &s.u {
                            r.extend_from_slice(u.row(step));
                        }
                        r
                    })
                    .collect();
                Tensor::from_rows(&rows)
            })
            .collect())
    }

    /// Posterior over one sequence. With `sample` the path is drawn by
    /// reparameterization from `rng`; otherwise it follows the means.
    pub fn infer(&self, seq: &Sequence, rng: &mut Rng, sample: bool) -> Result<(GaussianSeq, Tensor)> {
        let tape = Tape::new();
        let bn = self.bind(&tape);
        let inputs = self.inputs(&[seq])?;
        let post = bn.infer(&inputs, if sample { Some(rng) } else { None })?;
        let cat = |vs: &[Var<'_>]| {
            let rows: Vec<Tensor> = vs.iter().map(Var::value).collect();
            stack_rows(rows.iter().map(Tensor::data))
        };
        let (means, vars, z) = (cat(&post.means), cat(&post.vars), cat(&post.z));
        Ok((GaussianSeq::new(means, vars)?, z))
    }

    /// Posterior means for every sequence in `seqs`.
    pub fn posterior_means(&self, seqs: &[Sequence]) -> Result<Vec<Tensor>> {
        let mut unused = rng::stream(0, rng::Stream::Eval);
        seqs.iter()
            .map(|s| self.infer(s, &mut unused, false).map(|(g, _)| g.means))
            .collect()
    }
}

/// Hidden states per step; `left[t]` summarizes `x_1..x_t`, `right[t]`
/// summarizes `x_t..x_T`.
pub struct EncoderState<'t> {
    pub left: Option<Vec<Var<'t>>>,
    pub right: Option<Vec<Var<'t>>>,
}

/// Posterior parameters and the latent path used on a tape, one entry per step.
pub struct Posterior<'t> {
    pub means: Vec<Var<'t>>,
    pub vars: Vec<Var<'t>>,
    pub z: Vec<Var<'t>>,
}

pub struct BoundNet<'n, 't> {
    net: &'n InferenceNetwork,
    tape: &'t Tape,
    p: Bound<'t>,
}

impl<'n, 't> BoundNet<'n, 't> {
    pub fn net(&self) -> &'n InferenceNetwork {
        self.net
    }

    pub fn encode(&self, inputs: &[Tensor]) -> Result<EncoderState<'t>> {
        if inputs.is_empty() {
            return Err(Error::contract("cannot encode an empty sequence"));
        }
        let c = &self.net.config;
        let width = c.obs_dim + c.action_dim;
        if let Some(bad) = inputs.iter().find(|x| x.rank() != 2 || x.cols() != width) {
            return Err(Error::Dim {
                what: "encoder input width",
                found: bad.cols(),
                expected: width,
            });
        }
        let l = &self.net.layers;
        let embedded: Vec<Var<'t>> = inputs
            .iter()
            .map(|x| c.embed_nonlinearity.apply(l.embed.forward(&self.p, self.tape.constant(x.clone()))))
            .collect();
        let left = l.fwd.as_ref().map(|cell| cell.run(&self.p, &embedded));
        let right = l.bwd.as_ref().map(|cell| {
            let rev: Vec<Var<'t>> = embedded.iter().rev().copied().collect();
            let mut hs = cell.run(&self.p, &rev);
            hs.reverse();
            hs
        });
        Ok(EncoderState { left, right })
    }

    /// Mean-field combiner. With both sides the two per-side Gaussians are
    /// multiplied; with one side its head is used directly.
    pub fn combine_mf(&self, left: Option<Var<'t>>, right: Option<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
        let l = &self.net.layers;
        let head = |h: &Option<Head>, s: Option<Var<'t>>, side: &str| -> Result<Option<(Var<'t>, Var<'t>)>> {
            match (h, s) {
                (Some(h), Some(s)) => Ok(Some(h.forward(&self.p, s))),
                (None, None) => Ok(None),
                (Some(_), None) => Err(Error::contract(format!("{} needs the {side} encoder state", self.net.variant()))),
                (None, Some(_)) => Err(Error::contract(format!("{} has no {side} head", self.net.variant()))),
            }
        };
        if self.net.variant().is_structured() {
            return Err(Error::contract(format!("{} uses the structured combiner", self.net.variant())));
        }
        match (head(&l.left, left, "left")?, head(&l.right, right, "right")?) {
            (Some((ml, vl)), Some((mr, vr))) => Ok(gaussian_product(ml, vl, mr, vr)),
            (Some(side), None) | (None, Some(side)) => Ok(side),
            (None, None) => Err(Error::contract("combiner received no encoder state")),
        }
    }

    /// Structured combiner: averages `tanh(W z_prev + b)` with the
    /// available encoder states, then applies the mean and variance heads.
    pub fn combine_st(&self, z_prev: Var<'t>, left: Option<Var<'t>>, right: Option<Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
        let v = self.net.variant();
        let l = &self.net.layers;
        let (Some(z_in), Some(head)) = (&l.z_in, &l.combined) else {
            return Err(Error::contract(format!("{v} uses the mean-field combiner")));
        };
        if v.uses_left() != left.is_some() || v.uses_right() != right.is_some() {
            return Err(Error::contract(format!("{v} received the wrong encoder sides")));
        }
        let mut h = z_in.forward(&self.p, z_prev).tanh();
        let mut n = 1.0;
        for s in [left, right].into_iter().flatten() {
            h = h + s;
            n += 1.0;
        }
        Ok(head.forward(&self.p, h.scale(1.0 / n)))
    }

    /// Left-to-right sweep over the encoded sequence. With `noise`, each
    /// `z_t = mu_t + sqrt(var_t) * eps_t`; structured variants feed the
    /// sampled `z_t` into the combiner at `t + 1`, starting from zero.
    pub fn infer(&self, inputs: &[Tensor], mut noise: Option<&mut Rng>) -> Result<Posterior<'t>> {
        let enc = self.encode(inputs)?;
        let batch = inputs[0].rows();
        let d = self.net.latent_dim();
        let structured = self.net.variant().is_structured();
        let mut z_prev = self.tape.constant(Tensor::zeros(&[batch, d]));
        let t_len = inputs.len();
        let mut post = Posterior {
            means: Vec::with_capacity(t_len),
            vars: Vec::with_capacity(t_len),
            z: Vec::with_capacity(t_len),
        };
        for t in 0..t_len {
            let left = enc.left.as_ref().map(|h| h[t]);
            let right = enc.right.as_ref().map(|h| h[t]);
            let (mean, var) = if structured {
                self.combine_st(z_prev, left, right)?
            } else {
                self.combine_mf(left, right)?
            };
            let z = match noise.as_deref_mut() {
                Some(rng) => {
                    let eps = self.tape.constant(rng::normal_tensor(rng, &[batch, d]));
                    mean + var.sqrt() * eps
                }
                None => mean,
            };
            post.means.push(mean);
            post.vars.push(var);
            post.z.push(z);
            z_prev = z;
        }
        Ok(post)
    }
}

/// Product of two diagonal Gaussians, renormalized.
pub fn gaussian_product<'t>(m1: Var<'t>, v1: Var<'t>, m2: Var<'t>, v2: Var<'t>) -> (Var<'t>, Var<'t>) {
    let total = v1 + v2;
    let mean = (m2 * v1 + m1 * v2) / total;
    let var = v1 * v2 / total;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};

    fn net(variant: Variant, obs: usize, latent: usize) -> InferenceNetwork {
        let mut c = InfNetConfig::new(variant, obs, 0, latent);
        c.embed_dim = 5;
        c.rnn_dim = 6;
        InferenceNetwork::new(c, &mut stream(1, Stream::Init)).unwrap()
    }

    fn seq(t: usize, m: usize, seed: u64) -> Sequence {
        Sequence::fully_observed(rng::normal_tensor(&mut stream(seed, Stream::Data), &[t, m]))
    }

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(vec![1, v.len()], v.to_vec())
    }

    #[test]
    fn variant_names_roundtrip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
            assert_eq!(serde_json::to_string(&v).unwrap(), format!("\"{}\"", v.name()));
        }
        assert!("ST-R".parse::<Variant>().is_err());
    }

    #[test]
    fn encoders_follow_the_variant() {
        for v in Variant::ALL {
            let n = net(v, 2, 3);
            let ids: Vec<&str> = n.params().ids().collect();
            assert_eq!(ids.iter().any(|i| i.starts_with("q.fwd")), v.uses_left(), "{v}");
            assert_eq!(ids.iter().any(|i| i.starts_with("q.bwd")), v.uses_right(), "{v}");
        }
    }

    #[test]
    fn gaussian_product_examples() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(row(&[v]));
        let (m, v) = gaussian_product(c(0.0), c(1.0), c(2.0), c(1.0));
        assert_eq!((m.item(), v.item()), (1.0, 0.5));
        let (m, v) = gaussian_product(c(0.0), c(2.0), c(3.0), c(1.0));
        assert!((m.item() - 2.0).abs() < 1e-15 && (v.item() - 2.0 / 3.0).abs() < 1e-15);
        let (m, v) = gaussian_product(c(5.0), c(1e12), c(3.0), c(1.5));
        assert!((m.item() / 3.0 - 1.0).abs() < 1e-6 && (v.item() / 1.5 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gaussian_product_matches_numerical_density_product() {
        let (ml, vl, mr, vr) = (0.0f64, 2.0f64, 3.0f64, 1.0f64);
        let density = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        let (lo, hi, n) = (-15.0, 20.0, 200_000);
        let dx = (hi - lo) / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let x = lo + (i as f64 + 0.5) * dx;
            let w = density(x, ml, vl) * density(x, mr, vr) * dx;
            z += w;
            m1 += w * x;
            m2 += w * x * x;
        }
        let mean = m1 / z;
        let var = m2 / z - mean * mean;
        let tape = Tape::new();
        let c = |v: f64| tape.constant(row(&[v]));
        let (m, v) = gaussian_product(c(ml), c(vl), c(mr), c(vr));
        assert!((m.item() - mean).abs() < 1e-8);
        assert!((v.item() - var).abs() < 1e-8);
    }

    #[test]
    fn product_variance_is_below_both_inputs() {
        let mut rng = stream(4, Stream::Eval);
        let tape = Tape::new();
        for _ in 0..100 {
            let v1 = rng::normal(&mut rng).exp();
            let v2 = rng::normal(&mut rng).exp();
            let c = |v: f64| tape.constant(row(&[v]));
            let (_, v) = gaussian_product(c(0.3), c(v1), c(-1.0), c(v2));
            assert!(v.item() < v1 && v.item() < v2);
        }
    }

    #[test]
    fn single_step_encoding_is_one_lstm_step() {
        let n = net(Variant::StLr, 2, 3);
        let tape = Tape::new();
        let bn = n.bind(&tape);
        let x = row(&[0.3, -0.7]);
        let enc = bn.encode(std::slice::from_ref(&x)).unwrap();
        let t2 = Tape::new();
        let p2 = n.params().bind(&t2);
        let e = n.layers.embed.forward(&p2, t2.constant(x)).tanh();
        let fwd = n.layers.fwd.as_ref().unwrap();
        let (h0, c0) = fwd.zero_state(&t2, 1);
        let (h, _) = fwd.step(&p2, e, h0, c0);
        assert_eq!(enc.left.unwrap()[0].value(), h.value());
    }

    #[test]
    fn backward_states_equal_forward_pass_over_reversed_input() {
        let n = net(Variant::Dks, 2, 3);
        let s = seq(6, 2, 3);
        let inputs = n.inputs(&[&s]).unwrap();
        let tape = Tape::new();
        let right = n.bind(&tape).encode(&inputs).unwrap().right.unwrap();
        let t2 = Tape::new();
        let p2 = n.params().bind(&t2);
        let cell = n.layers.bwd.as_ref().unwrap();
        let rev: Vec<Var<'_>> = inputs
            .iter()
            .rev()
            .map(|x| n.layers.embed.forward(&p2, t2.constant(x.clone())).tanh())
            .collect();
        let fwd_on_rev = cell.run(&p2, &rev);
        for t in 0..6 {
            assert_eq!(right[t].value(), fwd_on_rev[5 - t].value());
        }
    }

    #[test]
    fn zero_weights_give_zero_states() {
        let mut n = net(Variant::StLr, 2, 3);
        let ids: Vec<String> = n.params().ids().filter(|i| i.starts_with("q.fwd") || i.starts_with("q.bwd")).map(String::from).collect();
        for id in ids {
            let t = n.params_mut().get_mut(&id).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let inputs = n.inputs(&[&seq(4, 2, 1)]).unwrap();
        let tape = Tape::new();
        let enc = n.bind(&tape).encode(&inputs).unwrap();
        for h in enc.left.unwrap().into_iter().chain(enc.right.unwrap()) {
            assert!(h.value().data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn dks_combiner_at_zero_latent_halves_the_right_state() {
        let mut n = net(Variant::Dks, 2, 3);
        *n.params_mut().get_mut("q.comb.z.b").unwrap() = Tensor::zeros(&[6]);
        let tape = Tape::new();
        let bn = n.bind(&tape);
        let h = tape.constant(Tensor::new(vec![1, 6], vec![0.2, -0.4, 0.6, 0.1, 0.0, -1.0]));
        let (m, v) = bn.combine_st(tape.constant(Tensor::zeros(&[1, 3])), None, Some(h)).unwrap();
        let t2 = Tape::new();
        let p2 = n.params().bind(&t2);
        let head = n.layers.combined.as_ref().unwrap();
        let (m2, v2) = head.forward(&p2, t2.constant(h.value().map(|x| 0.5 * x)));
        assert_eq!(m.value(), m2.value());
        assert_eq!(v.value(), v2.value());
        assert!(bn.combine_st(tape.constant(Tensor::zeros(&[1, 3])), Some(h), Some(h)).is_err());
        assert!(bn.combine_mf(None, Some(h)).is_err());
    }

    #[test]
    fn st_lr_average_of_equal_terms_is_that_term() {
        let mut n = net(Variant::StLr, 2, 1);
        // W = 0, b = atanh(0.3) makes the latent term 0.3 everywhere.
        *n.params_mut().get_mut("q.comb.z.w").unwrap() = Tensor::zeros(&[1, 6]);
        *n.params_mut().get_mut("q.comb.z.b").unwrap() = Tensor::full(&[6], 0.3f64.atanh());
        let tape = Tape::new();
        let bn = n.bind(&tape);
        let v = tape.constant(Tensor::full(&[1, 6], 0.3));
        let (m, _) = bn.combine_st(tape.constant(Tensor::zeros(&[1, 1])), Some(v), Some(v)).unwrap();
        let t2 = Tape::new();
        let p2 = n.params().bind(&t2);
        let (m2, _) = n.layers.combined.as_ref().unwrap().forward(&p2, t2.constant(Tensor::full(&[1, 6], 0.3)));
        assert!((m.item() - m2.item()).abs() < 1e-15);
    }

    #[test]
    fn structured_variances_are_positive() {
        let n = net(Variant::StLr, 2, 3);
        let mut rng = stream(9, Stream::Eval);
        let tape = Tape::new();
        let bn = n.bind(&tape);
        for _ in 0..1000 {
            let z = tape.constant(rng::normal_tensor(&mut rng, &[1, 3]).map(|v| 10.0 * v));
            let h = tape.constant(rng::normal_tensor(&mut rng, &[1, 6]));
            let (_, var) = bn.combine_st(z, Some(h), Some(h)).unwrap();
            assert!(var.value().data().iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn deterministic_inference_returns_means() {
        let n = net(Variant::MfLr, 2, 3);
        let s = seq(5, 2, 2);
        let (g1, z1) = n.infer(&s, &mut stream(1, Stream::Noise), false).unwrap();
        let (g2, z2) = n.infer(&s, &mut stream(2, Stream::Noise), false).unwrap();
        assert_eq!(z1, g1.means);
        assert_eq!((g1, z1), (g2, z2));
    }

    #[test]
    fn sampling_is_seed_deterministic() {
        for v in Variant::ALL {
            let n = net(v, 2, 3);
            let s = seq(5, 2, 2);
            let a = n.infer(&s, &mut stream(1, Stream::Noise), true).unwrap();
            let b = n.infer(&s, &mut stream(1, Stream::Noise), true).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mean_field_distribution_ignores_the_seed() {
        for v in [Variant::MfL, Variant::MfLr] {
            let n = net(v, 2, 3);
            let s = seq(5, 2, 2);
            let (a, za) = n.infer(&s, &mut stream(1, Stream::Noise), true).unwrap();
            let (b, zb) = n.infer(&s, &mut stream(2, Stream::Noise), true).unwrap();
            assert_eq!(a, b);
            assert_ne!(za, zb);
        }
        for v in [Variant::StL, Variant::Dks, Variant::StLr] {
            let n = net(v, 2, 3);
            let s = seq(5, 2, 2);
            let (a, _) = n.infer(&s, &mut stream(1, Stream::Noise), true).unwrap();
            let (b, _) = n.infer(&s, &mut stream(2, Stream::Noise), true).unwrap();
            assert_eq!(a.means.row(0), b.means.row(0));
            assert_ne!(a.means.row(4), b.means.row(4));
        }
    }

    #[test]
    fn dks_step_ignores_past_observations() {
        let n = net(Variant::Dks, 2, 3);
        let s = seq(6, 2, 5);
        let mut perturbed = s.clone();
        for v in &mut perturbed.x.data_mut()[..6] {
            *v += 1e-3 + 7.0;
        }
        let z_prev = Tensor::new(vec![1, 3], vec![0.4, -1.0, 2.0]);
        let at_step_3 = |s: &Sequence| {
            let tape = Tape::new();
            let bn = n.bind(&tape);
            let right = bn.encode(&n.inputs(&[s]).unwrap()).unwrap().right.unwrap();
            let (m, v) = bn.combine_st(tape.constant(z_prev.clone()), None, Some(right[3])).unwrap();
            (m.value(), v.value())
        };
        assert_eq!(at_step_3(&s), at_step_3(&perturbed));
    }

    #[test]
    fn masked_inputs_are_inert() {
        let n = net(Variant::StLr, 2, 3);
        let mut s = seq(4, 2, 5);
        s.mask.data_mut()[3] = 0.0;
        let a = n.infer(&s, &mut stream(1, Stream::Noise), true).unwrap();
        s.x.data_mut()[3] = 123.0;
        let b = n.infer(&s, &mut stream(1, Stream::Noise), true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let n = net(Variant::Dks, 2, 3);
        let tape = Tape::new();
        assert!(n.bind(&tape).encode(&[]).is_err());
        assert!(matches!(n.inputs(&[&seq(3, 4, 1)]), Err(Error::Dim { .. })));
    }
}
