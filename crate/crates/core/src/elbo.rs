//! The variational objective, its Gaussian KL terms, and the
//! importance-sampled likelihood estimate.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::gssm::{BoundModel, GenerativeModel};
use crate::infnet::{BoundNet, InferenceNetwork};
use crate::rng::Rng;
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// `KL(N(mq, vq) || N(mp, vp))` summed over the last axis, one value per row.
pub fn kl_diag_gaussian<'t>(mq: Var<'t>, vq: Var<'t>, mp: Var<'t>, vp: Var<'t>) -> Result<Var<'t>> {
    for v in [vq, vp] {
        if v.value().data().iter().any(|&x| !(x > 0.0)) {
            return Err(Error::contract("KL requires strictly positive variances"));
        }
    }
    let terms = (vp.ln() - vq.ln()).add_scalar(-1.0) + vq / vp + (mp - mq).square() / vp;
    Ok(terms.scale(0.5).sum_axis(terms.shape().len() - 1))
}

/// Plain-float form of [`kl_diag_gaussian`] for a single pair.
pub fn kl_diag_gaussian_f64(mq: &[f64], vq: &[f64], mp: &[f64], vp: &[f64]) -> Result<f64> {
    let d = mq.len();
    if vq.len() != d || mp.len() != d || vp.len() != d {
        return Err(Error::contract("KL arguments must share a dimension"));
    }
    if vq.iter().chain(vp).any(|&x| !(x > 0.0)) {
        return Err(Error::contract("KL requires strictly positive variances"));
    }
    Ok((0..d)
        .map(|i| {
            // r - 1 - ln r with r = vq / vp, written to stay exact near r = 1
            let d = (vq[i] - vp[i]) / vp[i];
            0.5 * (d - d.ln_1p() + (mp[i] - mq[i]).powi(2) / vp[i])
        })
        .sum())
}

/// Linear KL warm-up: `min(1, step / horizon)`.
pub fn anneal_weight(step: u64, horizon: u64) -> f64 {
    assert!(horizon >= 1, "anneal horizon must be at least 1");
    (step as f64 / horizon as f64).min(1.0)
}

/// Per-sequence averages of the objective and its parts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub reconstruction: f64,
    pub kl_t1: f64,
    pub kl_rest: f64,
    pub anneal_weight: f64,
    pub objective: f64,
}

/// The objective on a tape; `objective` is the batch mean and
/// differentiates back to every bound parameter.
pub struct ElboGraph<'t> {
    pub objective: Var<'t>,
    pub breakdown: ElboBreakdown,
    /// Objective of each sequence, in input order.
    pub per_sequence: Vec<f64>,
}

/// Indices of `seqs` grouped by length, shortest first.
pub(crate) fn by_length(seqs: &[&Sequence]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, s) in seqs.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    groups
}

/// Row `t` of every sequence's `field`, stacked to `[B, cols]`.
pub(crate) fn step_rows(seqs: &[&Sequence], t: usize, field: impl Fn(&Sequence) -> &Tensor) -> Tensor {
    let rows: Vec<Vec<f64>> = seqs.iter().map(|s| field(s).row(t).to_vec()).collect();
    Tensor::from_rows(&rows)
}

fn check_dims(model: &GenerativeModel, net: &InferenceNetwork) -> Result<()> {
    let c = net.config();
    for (what, found, expected) in [
        ("inference network latent width", c.latent_dim, model.latent_dim()),
        ("inference network observation width", c.obs_dim, model.obs_dim()),
        ("inference network action width", c.action_dim, model.action_dim()),
    ] {
        if found != expected {
            return Err(Error::Dim { what, found, expected });
        }
    }
    Ok(())
}

struct PathTerms<'t> {
    recon: Var<'t>,
    kl_t1: Var<'t>,
    kl_rest: Option<Var<'t>>,
}

/// One reparameterized path per row for equal-length sequences.
fn path_terms<'t>(bm: &BoundModel<'_, 't>, bn: &BoundNet<'_, 't>, group: &[&Sequence], rng: &mut Rng) -> Result<PathTerms<'t>> {
    let net = bn.net();
    let inputs = net.inputs(group)?;
    let post = bn.infer(&inputs, Some(rng))?;
    let b = group.len();
    let mut recon = None;
    let mut kl_rest: Option<Var<'t>> = None;
    let (pm, pv) = bm.prior(b);
    let kl_t1 = kl_diag_gaussian(post.means[0], post.vars[0], pm, pv)?;
    for t in 0..inputs.len() {
        let x = step_rows(group, t, |s| &s.x);
        let mask = step_rows(group, t, |s| &s.mask);
        let le = bm.log_emission(&x, &mask, post.z[t])?;
        recon = Some(match recon {
            Some(r) => r + le,
            None => le,
        });
        if t > 0 {
            let u = if bm.model().has_actions() {
                Some(bm.tape().constant(step_rows(group, t - 1, |s| s.u.as_ref().expect("validated"))))
            } else {
                None
            };
            let tr = bm.transition(post.z[t - 1], u)?;
            let kl = kl_diag_gaussian(post.means[t], post.vars[t], tr.mean, tr.var)?;
            kl_rest = Some(match kl_rest {
                Some(k) => k + kl,
                None => kl,
            });
        }
    }
    Ok(PathTerms {
        recon: recon.expect("nonempty sequence"),
        kl_t1,
        kl_rest,
    })
}

/// Builds the objective `recon - anneal * (kl_t1 + kl_rest)` averaged over
/// sequences and over `n_samples` independent latent paths.
pub fn elbo_graph<'t>(
    bm: &BoundModel<'_, 't>,
    bn: &BoundNet<'_, 't>,
    seqs: &[&Sequence],
    anneal: f64,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ElboGraph<'t>> {
    check_dims(bm.model(), bn.net())?;
    if seqs.is_empty() {
        return Err(Error::contract("objective needs at least one sequence"));
    }
    if n_samples == 0 {
        return Err(Error::contract("n_samples must be at least 1"));
    }
    let n = seqs.len() as f64;
    let scale = 1.0 / (n * n_samples as f64);
    let mut total: Option<Var<'t>> = None;
    let mut bd = ElboBreakdown {
        anneal_weight: anneal,
        ..ElboBreakdown::default()
    };
    let mut per_sequence = vec![0.0; seqs.len()];
    for _ in 0..n_samples {
        for idx in by_length(seqs).into_values() {
            let group: Vec<&Sequence> = idx.iter().map(|&i| seqs[i]).collect();
            let terms = path_terms(bm, bn, &group, rng)?;
            let kl = match terms.kl_rest {
                Some(k) => terms.kl_t1 + k,
                None => terms.kl_t1,
            };
            let obj = terms.recon - kl.scale(anneal);
            let values = obj.value();
            for (&i, v) in idx.iter().zip(values.data()) {
                per_sequence[i] += v / n_samples as f64;
            }
            bd.reconstruction += terms.recon.value().sum() * scale;
            bd.kl_t1 += terms.kl_t1.value().sum() * scale;
            bd.kl_rest += terms.kl_rest.map_or(0.0, |k| k.value().sum()) * scale;
            let s = obj.sum();
            total = Some(match total {
                Some(t) => t + s,
                None => s,
            });
        }
    }
    let objective = total.expect("nonempty").scale(scale);
    bd.objective = objective.item();
    Ok(ElboGraph {
        objective,
        breakdown: bd,
        per_sequence,
    })
}

/// Value-only objective.
pub fn elbo(
    model: &GenerativeModel,
    net: &InferenceNetwork,
    seqs: &[&Sequence],
    anneal: f64,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<ElboBreakdown> {
    let tape = Tape::new();
    let (bm, bn) = (model.bind(&tape), net.bind(&tape));
    Ok(elbo_graph(&bm, &bn, seqs, anneal, n_samples, rng)?.breakdown)
}

/// Per-sequence objective values at full KL weight.
pub fn elbo_per_sequence(
    model: &GenerativeModel,
    net: &InferenceNetwork,
    seqs: &[&Sequence],
    n_samples: usize,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    let tape = Tape::new();
    let (bm, bn) = (model.bind(&tape), net.bind(&tape));
    Ok(elbo_graph(&bm, &bn, seqs, 1.0, n_samples, rng)?.per_sequence)
}

fn log_normal<'t>(z: Var<'t>, mean: Var<'t>, var: Var<'t>) -> Var<'t> {
    let terms = var.ln().add_scalar(LN_2PI) + (z - mean).square() / var;
    terms.scale(-0.5).sum_axis(1)
}

/// `log(mean_s exp(w_s))` computed by shifting by the maximum.
pub fn log_mean_exp(w: &[f64]) -> f64 {
    let max = w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    let s: f64 = w.iter().map(|v| (v - max).exp()).sum();
    max + (s / w.len() as f64).ln()
}

/// Importance weights `log p(x, z_s) - log q(z_s | x)` for `s` paths drawn
/// from the inference network.
pub fn log_weights(model: &GenerativeModel, net: &InferenceNetwork, seq: &Sequence, s: usize, rng: &mut Rng) -> Result<Vec<f64>> {
    check_dims(model, net)?;
    if s == 0 {
        return Err(Error::contract("importance sampling needs S >= 1"));
    }
    let tape = Tape::new();
    let (bm, bn) = (model.bind(&tape), net.bind(&tape));
    let copies: Vec<&Sequence> = vec![seq; s];
    let inputs = net.inputs(&copies)?;
    let post = bn.infer(&inputs, Some(rng))?;
    let (pm, pv) = bm.prior(s);
    let mut w = log_normal(post.z[0], pm, pv) - log_normal(post.z[0], post.means[0], post.vars[0]);
    for t in 0..inputs.len() {
        let x = step_rows(&copies, t, |s| &s.x);
        let mask = step_rows(&copies, t, |s| &s.mask);
        w = w + bm.log_emission(&x, &mask, post.z[t])?;
        if t > 0 {
            let u = seq.u.as_ref().filter(|_| model.has_actions()).map(|_| tape.constant(step_rows(&copies, t - 1, |s| s.u.as_ref().expect("checked"))));
            let tr = bm.transition(post.z[t - 1], u)?;
            w = w + log_normal(post.z[t], tr.mean, tr.var) - log_normal(post.z[t], post.means[t], post.vars[t]);
        }
    }
    Ok(w.value().into_data())
}

/// Importance-sampled estimate of `log p(x)` with `s` samples.
pub fn is_loglik(model: &GenerativeModel, net: &InferenceNetwork, seq: &Sequence, s: usize, rng: &mut Rng) -> Result<f64> {
    Ok(log_mean_exp(&log_weights(model, net, seq, s, rng)?))
}
