//! Exact inference for linear-Gaussian state-space models: Kalman
//! filtering, Rauch-Tung-Striebel smoothing, and a dense joint-Gaussian
//! conditioning oracle for short sequences.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::gssm::{GenerativeModel, LinearConfig, ModelConfig};
use crate::infnet::GaussianSeq;
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Longest sequence the dense oracle accepts.
pub const ORACLE_MAX_T: usize = 8;

/// `z_1 ~ N(mu0, sigma0)`, `z_t ~ N(A z_{t-1} + c, Q)`, `x_t ~ N(H z_t, R)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearSystem {
    pub a: DMatrix<f64>,
    pub c: DVector<f64>,
    pub q: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub mu0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
}

impl LinearSystem {
    pub fn latent_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.h.nrows()
    }

    pub fn from_config(c: &LinearConfig) -> Self {
        let diag = |v: &[f64]| DMatrix::from_diagonal(&DVector::from_column_slice(v));
        LinearSystem {
            a: diag(&c.a),
            c: DVector::from_column_slice(&c.c),
            q: diag(&c.trans_var),
            h: diag(&c.emit_scale),
            r: diag(&c.emit_var),
            mu0: DVector::from_column_slice(&c.prior.mean),
            sigma0: diag(&c.prior.var),
        }
    }

    /// The system described by a linear model's current parameters.
    pub fn from_model(model: &GenerativeModel) -> Result<Self> {
        let ModelConfig::Linear(cfg) = model.config() else {
            return Err(Error::contract(format!(
                "exact inference requires a LinearGSSM model, got {}",
                model.config().variant_name()
            )));
        };
        let p = model.params();
        let v = |id: &str| p.get(id).map(|t| t.data().to_vec());
        let c = LinearConfig {
            a: v("a")?,
            c: v("c")?,
            trans_var: v("trans_var")?,
            emit_scale: v("emit_scale")?,
            emit_var: v("emit_var")?,
            ..cfg.clone()
        };
        Ok(Self::from_config(&c))
    }

    pub fn fig2() -> Self {
        Self::from_config(&LinearConfig::fig2())
    }

    /// A random system whose transition matrix has spectral norm at most
    /// `radius` (hence spectral radius at most `radius`).
    pub fn random_stable(d: usize, m: usize, radius: f64, rng: &mut Rng) -> Self {
        let gauss = |r: usize, c: usize, rng: &mut Rng| DMatrix::from_fn(r, c, |_, _| rng::normal(rng));
        let spd = |n: usize, rng: &mut Rng| {
            let b = gauss(n, n, rng);
            &b * b.transpose() + DMatrix::identity(n, n) * 0.5
        };
        let raw = gauss(d, d, rng);
        let norm = raw.clone().svd(false, false).singular_values.max();
        let scale = rng.random_range(0.3..=1.0) * radius / norm;
        LinearSystem {
            a: raw * scale,
            c: DVector::from_fn(d, |_, _| rng::normal(rng)),
            q: spd(d, rng),
            h: gauss(m, d, rng),
            r: spd(m, rng),
            mu0: DVector::from_fn(d, |_, _| rng::normal(rng)),
            sigma0: spd(d, rng),
        }
    }

    fn check_obs(&self, x: &Tensor) -> Result<usize> {
        if x.rank() != 2 || x.cols() != self.obs_dim() {
            return Err(Error::Dim {
                what: "observation width",
                found: x.cols(),
                expected: self.obs_dim(),
            });
        }
        if x.rows() == 0 {
            return Err(Error::contract("exact inference needs at least one observation"));
        }
        Ok(x.rows())
    }
}

#[derive(Clone, Debug)]
pub struct FilterOutput {
    /// Predicted `p(z_t | x_1..x_{t-1})`
    pub pred_means: Vec<DVector<f64>>,
    pub pred_covs: Vec<DMatrix<f64>>,
    /// Filtered `p(z_t | x_1..x_t)`
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    /// `log p(x_t | x_1..x_{t-1})`
    pub loglik_increments: Vec<f64>,
    pub loglik: f64,
}

#[derive(Clone, Debug)]
pub struct SmootherOutput {
    pub marginals: GaussianSeq,
    pub means: Vec<DVector<f64>>,
    pub covs: Vec<DMatrix<f64>>,
    pub loglik: f64,
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn chol(m: &DMatrix<f64>, step: usize, what: &str) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone()).ok_or_else(|| Error::Numerical {
        step,
        msg: format!("{what} is not positive definite"),
    })
}

/// `log N(x; mean, cov)` through a Cholesky factor of `cov`.
fn log_density(x: &DVector<f64>, mean: &DVector<f64>, cov: &Cholesky<f64, Dyn>) -> f64 {
    let diff = x - mean;
    let l = cov.l();
    let y = l.solve_lower_triangular(&diff).expect("nonsingular factor");
    let logdet: f64 = l.diagonal().iter().map(|v| 2.0 * v.ln()).sum();
    -0.5 * (diff.len() as f64 * LN_2PI + logdet + y.norm_squared())
}

fn column(x: &Tensor, t: usize) -> DVector<f64> {
    DVector::from_column_slice(x.row(t))
}

/// Kalman filter with Joseph-form covariance updates.
pub fn kalman_filter(sys: &LinearSystem, x: &Tensor) -> Result<FilterOutput> {
    let t_len = sys.check_obs(x)?;
    let d = sys.latent_dim();
    let eye = DMatrix::<f64>::identity(d, d);
    let mut out = FilterOutput {
        pred_means: Vec::with_capacity(t_len),
        pred_covs: Vec::with_capacity(t_len),
        means: Vec::with_capacity(t_len),
        covs: Vec::with_capacity(t_len),
        loglik_increments: Vec::with_capacity(t_len),
        loglik: 0.0,
    };
    for t in 0..t_len {
        let (mp, pp) = if t == 0 {
            (sys.mu0.clone(), sys.sigma0.clone())
        } else {
            let (m, p) = (&out.means[t - 1], &out.covs[t - 1]);
            (&sys.a * m + &sys.c, symmetrize(&(&sys.a * p * sys.a.transpose() + &sys.q)))
        };
        let s = symmetrize(&(&sys.h * &pp * sys.h.transpose() + &sys.r));
        let s_chol = chol(&s, t, "innovation covariance")?;
        let xt = column(x, t);
        let pred_x = &sys.h * &mp;
        let inc = log_density(&xt, &pred_x, &s_chol);
        // K = P H^T S^-1
        let k = s_chol.solve(&(&sys.h * &pp)).transpose();
        let m = &mp + &k * (xt - pred_x);
        let ikh = &eye - &k * &sys.h;
        let p = symmetrize(&(&ikh * &pp * ikh.transpose() + &k * &sys.r * k.transpose()));
        if p.diagonal().iter().any(|&v| !(v > 0.0)) {
            return Err(Error::Numerical {
                step: t,
                msg: "filtered covariance lost positivity".into(),
            });
        }
        out.loglik += inc;
        out.loglik_increments.push(inc);
        out.pred_means.push(mp);
        out.pred_covs.push(pp);
        out.means.push(m);
        out.covs.push(p);
    }
    Ok(out)
}

fn marginals(means: &[DVector<f64>], covs: &[DMatrix<f64>]) -> Result<GaussianSeq> {
    let d = means.first().map_or(0, |m| m.len());
    let t = means.len();
    let mu = means.iter().flat_map(|m| m.iter().copied()).collect();
    let var = covs.iter().flat_map(|c| c.diagonal().iter().copied().collect::<Vec<_>>()).collect();
    GaussianSeq::new(Tensor::new(vec![t, d], mu), Tensor::new(vec![t, d], var))
}

/// Rauch-Tung-Striebel smoothing over the filtered estimates.
pub fn rts_smooth(sys: &LinearSystem, x: &Tensor) -> Result<SmootherOutput> {
    let f = kalman_filter(sys, x)?;
    let t_len = f.means.len();
    let mut means = f.means.clone();
    let mut covs = f.covs.clone();
    for t in (0..t_len.saturating_sub(1)).rev() {
        let pred = &f.pred_covs[t + 1];
        let pc = chol(pred, t + 1, "predicted covariance")?;
        // G = P_t A^T P_{t+1|t}^-1
        let g = pc.solve(&(&sys.a * &f.covs[t])).transpose();
        let m = &f.means[t] + &g * (&means[t + 1] - &f.pred_means[t + 1]);
        let p = symmetrize(&(&f.covs[t] + &g * (&covs[t + 1] - pred) * g.transpose()));
        means[t] = m;
        covs[t] = p;
    }
    Ok(SmootherOutput {
        marginals: marginals(&means, &covs)?,
        means,
        covs,
        loglik: f.loglik,
    })
}

/// Posterior marginals and `log p(x)` from the full joint Gaussian over all
/// latents and observations, built by writing every variable as an affine
/// function of independent standard normals.
pub fn joint_conditioning_oracle(sys: &LinearSystem, x: &Tensor) -> Result<(GaussianSeq, f64)> {
    let t_len = sys.check_obs(x)?;
    if t_len > ORACLE_MAX_T {
        return Err(Error::contract(format!(
            "dense oracle supports T <= {ORACLE_MAX_T}, got {t_len}"
        )));
    }
    let (d, m) = (sys.latent_dim(), sys.obs_dim());
    let l0 = chol(&sys.sigma0, 0, "prior covariance")?.l();
    let lq = chol(&sys.q, 0, "process covariance")?.l();
    let lr = chol(&sys.r, 0, "observation covariance")?.l();
    // noise layout: prior (d), process for t >= 2 ((T-1) d), observation (T m)
    let n_noise = d + (t_len - 1) * d + t_len * m;
    let mut z_off = Vec::with_capacity(t_len);
    let mut z_coef: Vec<DMatrix<f64>> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let (off, mut coef) = if t == 0 {
            (sys.mu0.clone(), DMatrix::zeros(d, n_noise))
        } else {
            (&sys.a * &z_off[t - 1] + &sys.c, &sys.a * &z_coef[t - 1])
        };
        let start = if t == 0 { 0 } else { d + (t - 1) * d };
        let l = if t == 0 { &l0 } else { &lq };
        coef.view_mut((0, start), (d, d)).copy_from(l);
        z_off.push(off);
        z_coef.push(coef);
    }
    let obs_start = d + (t_len - 1) * d;
    let mut x_off = Vec::with_capacity(t_len);
    let mut x_coef = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let mut coef = &sys.h * &z_coef[t];
        coef.view_mut((0, obs_start + t * m), (m, m)).copy_from(&lr);
        x_off.push(&sys.h * &z_off[t]);
        x_coef.push(coef);
    }
    let stack = |blocks: &[DMatrix<f64>]| {
        let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut out = DMatrix::zeros(rows, n_noise);
        let mut r = 0;
        for b in blocks {
            out.view_mut((r, 0), (b.nrows(), n_noise)).copy_from(b);
            r += b.nrows();
        }
        out
    };
    let stack_vec = |parts: &[DVector<f64>]| DVector::from_iterator(parts.iter().map(|p| p.len()).sum(), parts.iter().flat_map(|p| p.iter().copied()));
    let (mz, mx) = (stack(&z_coef), stack(&x_coef));
    let (oz, ox) = (stack_vec(&z_off), stack_vec(&x_off));
    let szz = &mz * mz.transpose();
    let szx = &mz * mx.transpose();
    let sxx = symmetrize(&(&mx * mx.transpose()));
    let xv = DVector::from_iterator(t_len * m, (0..t_len).flat_map(|t| x.row(t).iter().copied()));
    let sxx_chol = chol(&sxx, 0, "joint observation covariance")?;
    let loglik = log_density(&xv, &ox, &sxx_chol);
    let mean = &oz + &szx * sxx_chol.solve(&(&xv - &ox));
    let cov = &szz - &szx * sxx_chol.solve(&szx.transpose());
    let means: Vec<DVector<f64>> = (0..t_len).map(|t| mean.rows(t * d, d).into_owned()).collect();
    let covs: Vec<DMatrix<f64>> = (0..t_len).map(|t| cov.view((t * d, t * d), (d, d)).into_owned()).collect();
    Ok((marginals(&means, &covs)?, loglik))
}

/// Smoothed means of every sequence and the summed exact log-likelihood.
pub fn smooth_all(sys: &LinearSystem, xs: &[&Tensor]) -> Result<(Vec<Tensor>, f64)> {
    let mut means = Vec::with_capacity(xs.len());
    let mut total = 0.0;
    for x in xs {
        let s = rts_smooth(sys, x)?;
        total += s.loglik;
        means.push(s.marginals.means);
    }
    Ok((means, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_linear_fig2;
    use crate::rng::{stream, Stream};

    fn scalar_system(a: f64, q: f64, h: f64, r: f64) -> LinearSystem {
        let s = |v: f64| DMatrix::from_element(1, 1, v);
        LinearSystem {
            a: s(a),
            c: DVector::zeros(1),
            q: s(q),
            h: s(h),
            r: s(r),
            mu0: DVector::zeros(1),
            sigma0: s(1.0),
        }
    }

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec())
    }

    #[test]
    fn single_conjugate_update() {
        let sys = scalar_system(1.0, 1e-12, 1.0, 1.0);
        let f = kalman_filter(&sys, &col(&[1.0])).unwrap();
        assert!((f.means[0][0] - 0.5).abs() < 1e-15);
        assert!((f.covs[0][(0, 0)] - 0.5).abs() < 1e-15);
        // x_1 ~ N(0, 2)
        let direct = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 0.5);
        assert!((f.loglik - direct).abs() < 1e-14);
    }

    #[test]
    fn single_step_smoother_equals_filter() {
        let sys = LinearSystem::fig2();
        let x = col(&[3.0]);
        let f = kalman_filter(&sys, &x).unwrap();
        let s = rts_smooth(&sys, &x).unwrap();
        assert_eq!(s.means[0], f.means[0]);
        assert_eq!(s.covs[0], f.covs[0]);
    }

    #[test]
    fn smoothing_never_increases_variance() {
        let sys = scalar_system(1.0, 0.5, 1.0, 2.0);
        let x = col(&[0.3, -1.0, 2.2, 0.7, 1.5, -0.4]);
        let f = kalman_filter(&sys, &x).unwrap();
        let s = rts_smooth(&sys, &x).unwrap();
        for t in 0..6 {
            assert!(s.covs[t][(0, 0)] <= f.covs[t][(0, 0)] + 1e-15);
        }
    }

    #[test]
    fn oracle_single_step_is_conjugate_update() {
        let sys = scalar_system(1.0, 1e-12, 1.0, 1.0);
        let (g, ll) = joint_conditioning_oracle(&sys, &col(&[1.0])).unwrap();
        assert!((g.means.item() - 0.5).abs() < 1e-15);
        assert!((g.vars.item() - 0.5).abs() < 1e-15);
        let direct = -0.5 * ((2.0 * std::f64::consts::PI * 2.0).ln() + 0.5);
        assert!((ll - direct).abs() < 1e-14);
    }

    fn agree(sys: &LinearSystem, x: &Tensor) {
        let s = rts_smooth(sys, x).unwrap();
        let (g, ll) = joint_conditioning_oracle(sys, x).unwrap();
        for (a, b) in s.marginals.means.data().iter().zip(g.means.data()) {
            assert!((a - b).abs() < 1e-8, "mean {a} vs {b}");
        }
        for (a, b) in s.marginals.vars.data().iter().zip(g.vars.data()) {
            assert!((a - b).abs() < 1e-8, "var {a} vs {b}");
        }
        assert!((s.loglik - ll).abs() < 1e-8, "loglik {} vs {ll}", s.loglik);
        let f = kalman_filter(sys, x).unwrap();
        assert!((f.loglik_increments.iter().sum::<f64>() - ll).abs() < 1e-8);
    }

    #[test]
    fn fig2_smoother_matches_oracle() {
        let batch = gen_linear_fig2(5, 6, 2).unwrap();
        for s in &batch.sequences {
            agree(&LinearSystem::fig2(), &s.x);
        }
    }

    #[test]
    fn random_systems_match_oracle() {
        let mut rng = stream(3, Stream::Eval);
        for i in 0..20 {
            let (d, m) = (1 + i % 3, 1 + (i / 3) % 3);
            let sys = LinearSystem::random_stable(d, m, 0.95, &mut rng);
            let t = 1 + i % 6;
            let x = rng::normal_tensor(&mut rng, &[t, m]);
            agree(&sys, &x);
            let s = rts_smooth(&sys, &x).unwrap();
            let f = kalman_filter(&sys, &x).unwrap();
            for t in 0..t {
                assert!(s.covs[t].trace() <= f.covs[t].trace() + 1e-12);
            }
        }
    }

    #[test]
    fn oracle_rejects_long_sequences() {
        let x = col(&[0.0; 9]);
        assert!(joint_conditioning_oracle(&LinearSystem::fig2(), &x).is_err());
    }

    #[test]
    fn non_pd_covariance_reports_the_step() {
        let mut sys = scalar_system(1.0, 1.0, 1.0, 1.0);
        sys.r = DMatrix::from_element(1, 1, -5.0);
        match kalman_filter(&sys, &col(&[1.0, 2.0])) {
            Err(Error::Numerical { step: 0, .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn model_conversion() {
        let model = GenerativeModel::new(ModelConfig::Linear(LinearConfig::fig2()), &mut stream(0, Stream::Init)).unwrap();
        assert_eq!(LinearSystem::from_model(&model).unwrap(), LinearSystem::fig2());
        let dmm = GenerativeModel::new(
            ModelConfig::Dmm(crate::gssm::DmmConfig::new(2, 3)),
            &mut stream(0, Stream::Init),
        )
        .unwrap();
        assert!(LinearSystem::from_model(&dmm).is_err());
    }
}
