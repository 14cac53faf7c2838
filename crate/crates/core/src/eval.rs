//! Metrics and reports: posterior RMSE, held-out NLL, inference-network
//! comparisons and counterfactual rollouts.

use std::fmt;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Sequence, SequenceBatch};
use crate::elbo::{elbo, elbo_per_sequence, is_loglik};
use crate::error::{Error, Result};
use crate::exact::{smooth_all, LinearSystem};
use crate::gssm::{stack_rows, GenerativeModel, ModelConfig};
use crate::infnet::{InfNetConfig, InferenceNetwork, Variant};
use crate::rng::{self, stream, substream, Stream};
use crate::tensor::Tensor;
use crate::trainer::{train, TrainConfig};

/// `sqrt(sum_i sum_t |m_it - z_it|^2 / sum_i T_i)`, squared error summed
/// over latent dimensions.
pub fn rmse(means: &[Tensor], truth: &[Tensor]) -> Result<f64> {
    if means.len() != truth.len() || means.is_empty() {
        return Err(Error::contract("RMSE needs one ground-truth path per estimate"));
    }
    let (mut sq, mut steps) = (0.0, 0usize);
    for (m, z) in means.iter().zip(truth) {
        if m.shape() != z.shape() {
            return Err(Error::Shape {
                op: "rmse",
                lhs: m.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        sq += m.data().iter().zip(z.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        steps += m.rows();
    }
    Ok((sq / steps as f64).sqrt())
}

fn ground_truth(seqs: &[Sequence]) -> Result<Vec<Tensor>> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            s.z_star.clone().ok_or_else(|| Error::Schema {
                index: i,
                field: "z_star".into(),
                msg: "ground-truth latents are required for RMSE".into(),
            })
        })
        .collect()
}

/// RMSE of per-sequence posterior means against each sequence's `z_star`.
pub fn rmse_posterior(means: &[Tensor], seqs: &[Sequence]) -> Result<f64> {
    rmse(means, &ground_truth(seqs)?)
}

/// Held-out negative log-likelihood in three normalizations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NllReport {
    /// Importance-sampled NLL, summed over sequences and divided by total steps.
    pub a: f64,
    /// Bound-based NLL, `-sum_i L_i / sum_i T_i`.
    pub b: f64,
    /// Mean over sequences of the per-step bound NLL, `-(1/N) sum_i L_i / T_i`.
    pub c: f64,
    pub samples: usize,
    pub sequences: usize,
    pub steps: usize,
}

impl fmt::Display for NllReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4} ({:.4}) {{{:.4}}}", self.a, self.b, self.c)
    }
}

/// Per-sequence `(bound, importance-sampled log-likelihood)`. Sequence `i`
/// draws its noise from its own substreams, so results do not depend on
/// the thread count.
pub fn per_sequence_bounds(
    model: &GenerativeModel,
    net: &InferenceNetwork,
    seqs: &[Sequence],
    samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if samples == 0 {
        return Err(Error::contract("importance sampling needs S >= 1"));
    }
    seqs.par_iter()
        .enumerate()
        .map(|(i, s)| {
            let i = i as u64;
            let bound = elbo_per_sequence(model, net, &[s], 1, &mut substream(seed, Stream::Eval, 2 * i))?[0];
            let ll = is_loglik(model, net, s, samples, &mut substream(seed, Stream::Eval, 2 * i + 1))?;
            Ok((bound, ll))
        })
        .collect()
}

pub fn nll_report(
    model: &GenerativeModel,
    net: &InferenceNetwork,
    test: &SequenceBatch,
    samples: usize,
    seed: u64,
) -> Result<NllReport> {
    if test.is_empty() {
        return Err(Error::contract("NLL report needs at least one sequence"));
    }
    let vals = per_sequence_bounds(model, net, &test.sequences, samples, seed)?;
    let steps = test.total_steps();
    let (mut bound, mut ll, mut per_step) = (0.0, 0.0, 0.0);
    for ((l, is), s) in vals.iter().zip(&test.sequences) {
        bound += l;
        ll += is;
        per_step += l / s.len() as f64;
    }
    Ok(NllReport {
        a: -ll / steps as f64,
        b: -bound / steps as f64,
        c: -per_step / test.len() as f64,
        samples,
        sequences: test.len(),
        steps,
    })
}

/// Inference network against the exact smoother on a linear model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExactComparison {
    pub net_rmse: Option<f64>,
    pub smoother_rmse: Option<f64>,
    /// Mean bound per sequence.
    pub mean_bound: f64,
    /// Mean exact log-likelihood per sequence.
    pub mean_loglik: f64,
    /// `(loglik - bound) / |loglik|`.
    pub relative_gap: f64,
}

impl fmt::Display for ExactComparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let (Some(n), Some(s)) = (self.net_rmse, self.smoother_rmse) {
            writeln!(f, "rmse  net {n:.4}  smoother {s:.4}  ratio {:.4}", n / s)?;
        }
        write!(
            f,
            "bound {:.4}  exact loglik {:.4}  gap {:.2}%",
            self.mean_bound,
            self.mean_loglik,
            100.0 * self.relative_gap
        )
    }
}

/// RMSEs are reported only when every sequence carries `z_star`.
pub fn compare_exact(model: &GenerativeModel, net: &InferenceNetwork, data: &SequenceBatch, seed: u64) -> Result<ExactComparison> {
    let sys = LinearSystem::from_model(model)?;
    if data.sequences.iter().any(|s| s.mask.data().contains(&0.0)) {
        return Err(Error::contract("exact comparison needs fully observed sequences"));
    }
    let xs: Vec<&Tensor> = data.sequences.iter().map(|s| &s.x).collect();
    let (smoothed, loglik) = smooth_all(&sys, &xs)?;
    let seqs: Vec<&Sequence> = data.sequences.iter().collect();
    let n = data.len() as f64;
    let mean_bound = elbo(model, net, &seqs, 1.0, 1, &mut stream(seed, Stream::Eval))?.objective;
    let mean_loglik = loglik / n;
    let (net_rmse, smoother_rmse) = match ground_truth(&data.sequences) {
        Ok(truth) => (
            Some(rmse(&net.posterior_means(&data.sequences)?, &truth)?),
            Some(rmse(&smoothed, &truth)?),
        ),
        Err(_) => (None, None),
    };
    Ok(ExactComparison {
        net_rmse,
        smoother_rmse,
        mean_bound,
        mean_loglik,
        relative_gap: (mean_loglik - mean_bound) / mean_loglik.abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: Variant,
    pub seed: u64,
    pub updates: u64,
    pub valid_bound: Option<f64>,
    /// Mean held-out bound per sequence.
    pub test_bound: f64,
    /// Held-out bound NLL per step.
    pub test_nll: f64,
    pub rmse: Option<f64>,
}

/// Trains one model and network per (variant, seed) under the same budget
/// and scores each on `test`. Rows follow the order of `variants` then `seeds`.
#[allow(clippy::too_many_arguments)]
pub fn compare_variants(
    model_config: &ModelConfig,
    net_template: &InfNetConfig,
    variants: &[Variant],
    train_set: &SequenceBatch,
    valid_set: Option<&SequenceBatch>,
    test: &SequenceBatch,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<Vec<CompareRow>> {
    if seeds.is_empty() {
        return Err(Error::contract("compare_variants needs at least one seed"));
    }
    let runs: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    runs.par_iter()
        .map(|&(variant, seed)| {
            let mut init = stream(seed, Stream::Init);
            let model = GenerativeModel::new(model_config.clone(), &mut init)?;
            let net_cfg = InfNetConfig {
                variant,
                ..net_template.clone()
            };
            let net = InferenceNetwork::new(net_cfg, &mut init)?;
            let run_cfg = TrainConfig { seed, ..cfg.clone() };
            let (model, net, log) = train(model, net, train_set, valid_set, &run_cfg)?;
            let seqs: Vec<&Sequence> = test.sequences.iter().collect();
            let bound = elbo(&model, &net, &seqs, 1.0, 1, &mut stream(seed, Stream::Eval))?.objective;
            let rmse = match ground_truth(&test.sequences) {
                Ok(truth) => Some(rmse(&net.posterior_means(&test.sequences)?, &truth)?),
                Err(_) => None,
            };
            Ok(CompareRow {
                variant,
                seed,
                updates: log.updates.len() as u64,
                valid_bound: log.best_valid(),
                test_bound: bound,
                test_nll: -bound * test.len() as f64 / test.total_steps() as f64,
                rmse,
            })
        })
        .collect()
}

pub fn compare_csv(rows: &[CompareRow]) -> String {
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    let mut s = String::from("variant,seed,updates,valid_bound,test_bound,test_nll,rmse\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.variant,
            r.seed,
            r.updates,
            opt(r.valid_bound),
            r.test_bound,
            r.test_nll,
            opt(r.rmse)
        )
        .expect("write to string");
    }
    s
}

/// Median of the rows' held-out bounds for one variant.
pub fn median_bound(rows: &[CompareRow], variant: Variant) -> Option<f64> {
    let mut v: Vec<f64> = rows.iter().filter(|r| r.variant == variant).map(|r| r.test_bound).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { 0.5 * (v[m - 1] + v[m]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualSpec {
    /// Steps observed before the intervention.
    pub k: usize,
    pub horizon: usize,
    pub n_rollouts: usize,
    /// Observation dimension that is thresholded.
    pub dim: usize,
    /// An expected value above `cut` counts as "high".
    pub cut: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CounterfactualReport {
    pub k: usize,
    pub n_rollouts: usize,
    pub sequences: usize,
    pub dim: usize,
    pub cut: f64,
    /// Proportion of high indicators per future step under the recorded actions.
    pub factual: Vec<f64>,
    /// Same with every action from step `k` on set to zero.
    pub counterfactual: Vec<f64>,
}

impl CounterfactualReport {
    /// Columns `step,factual,counterfactual`; `step` is the 0-based row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,factual,counterfactual\n");
        for (j, (f, c)) in self.factual.iter().zip(&self.counterfactual).enumerate() {
            writeln!(s, "{},{},{}", self.k + j, f, c).expect("write to string");
        }
        s
    }
}

/// Infers the latent state at step `k - 1` from each sequence's first `k`
/// steps, then samples `n_rollouts` futures twice: once with the recorded
/// actions and once with zero actions, sharing the transition noise.
/// Actions at rows `k - 1 ..` drive the forecast steps.
pub fn counterfactual_rollout(
    model: &GenerativeModel,
    net: &InferenceNetwork,
    cohort: &[Sequence],
    spec: &CounterfactualSpec,
    seed: u64,
) -> Result<CounterfactualReport> {
    if !model.has_actions() {
        return Err(Error::contract(format!(
            "counterfactual rollouts need an action-conditioned model, got {}",
            model.config().variant_name()
        )));
    }
    if spec.dim >= model.obs_dim() {
        return Err(Error::Dim {
            what: "indicator dimension",
            found: spec.dim,
            expected: model.obs_dim(),
        });
    }
    let mut report = CounterfactualReport {
        k: spec.k,
        n_rollouts: spec.n_rollouts,
        sequences: cohort.len(),
        dim: spec.dim,
        cut: spec.cut,
        factual: Vec::new(),
        counterfactual: Vec::new(),
    };
    if spec.horizon == 0 {
        return Ok(report);
    }
    if spec.k == 0 || spec.n_rollouts == 0 || cohort.is_empty() {
        return Err(Error::contract("rollouts need k >= 1, at least one rollout and a nonempty cohort"));
    }
    for (i, s) in cohort.iter().enumerate() {
        if s.len() < spec.k + spec.horizon || s.u.is_none() {
            return Err(Error::Schema {
                index: i,
                field: "u".into(),
                msg: format!("needs actions and at least {} steps", spec.k + spec.horizon),
            });
        }
    }
    let counts: Vec<Vec<(usize, usize)>> = cohort
        .par_iter()
        .enumerate()
        .map(|(i, s)| rollout_one(model, net, s, spec, &mut substream(seed, Stream::Eval, i as u64)))
        .collect::<Result<_>>()?;
    let total = (cohort.len() * spec.n_rollouts) as f64;
    for j in 0..spec.horizon {
        let (f, c) = counts.iter().fold((0, 0), |(f, c), v| (f + v[j].0, c + v[j].1));
        report.factual.push(f as f64 / total);
        report.counterfactual.push(c as f64 / total);
    }
    Ok(report)
}

fn rollout_one(
    model: &GenerativeModel,
    net: &InferenceNetwork,
    seq: &Sequence,
    spec: &CounterfactualSpec,
    rng: &mut rng::Rng,
) -> Result<Vec<(usize, usize)>> {
    let (r, d) = (spec.n_rollouts, model.latent_dim());
    let (post, _) = net.infer(&seq.prefix(spec.k), rng, false)?;
    let start = post.means.row(spec.k - 1);
    let u = seq.u.as_ref().expect("checked by caller");
    let zero_u = Tensor::zeros(&[r, model.action_dim()]);
    let tape = Tape::new();
    let bm = model.bind(&tape);
    let mut zf = stack_rows(std::iter::repeat_n(start, r));
    let mut zc = zf.clone();
    let high = |z: &Tensor| -> usize {
        let p = bm.emission(tape.constant(z.clone())).mean().value();
        (0..r).filter(|&row| p.get2(row, spec.dim) > spec.cut).count()
    };
    let mut out = Vec::with_capacity(spec.horizon);
    for j in 0..spec.horizon {
        let row = spec.k - 1 + j;
        let uf = stack_rows(std::iter::repeat_n(u.row(row), r));
        let tf = bm.transition(tape.constant(zf), Some(tape.constant(uf)))?;
        let tc = bm.transition(tape.constant(zc), Some(tape.constant(zero_u.clone())))?;
        let eps = rng::normal_tensor(rng, &[r, d]);
        zf = shift(&tf.mean.value(), &tf.var.value(), &eps);
        zc = shift(&tc.mean.value(), &tc.var.value(), &eps);
        out.push((high(&zf), high(&zc)));
    }
    Ok(out)
}

/// `mean + sqrt(var) * eps`, elementwise.
fn shift(mean: &Tensor, var: &Tensor, eps: &Tensor) -> Tensor {
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
