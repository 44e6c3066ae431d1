//! Distributional N-step-return model: an MLP feature extractor feeding a
//! sparse variational Gaussian process with an RBF kernel.
//!
//! The variational posterior is `q(u) = N(m, S)` over `M` inducing outputs at
//! locations `Z` in embedding space, with `S = L Lᵀ` and prior
//! `p(u) = N(0, K_ZZ)`. Everything (extractor, kernel hyperparameters, `Z`,
//! `m`, `L`) is trained jointly by stochastic ascent on the ELBO using the
//! analytic gradients derived in [`NsrModel::elbo_with_grad`].

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, MlpGrad};
use crate::rng::rng_from_seed;

/// Added to the diagonal of `K_ZZ` before factorization.
pub const JITTER: f64 = 1e-6;
/// Lower bound on any predictive variance.
pub const VAR_FLOOR: f64 = 1e-9;
pub const CHECKPOINT_VERSION: u32 = 1;

/// Gaussian prediction of an N-step return.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussPred {
    pub mu: f64,
    pub var: f64,
}

/// Which parameter groups the optimizer may move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainGroups {
    pub extractor: bool,
    pub kernel: bool,
    pub inducing: bool,
    pub variational: bool,
}

impl Default for TrainGroups {
    fn default() -> Self {
        Self { extractor: true, kernel: true, inducing: true, variational: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NsrConfig {
    pub n_inducing: usize,
    pub hidden: Vec<usize>,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Train on a random subset of at most this many transitions.
    pub max_points: Option<usize>,
    pub groups: TrainGroups,
    /// Step size of natural-gradient updates for `q(u)`; `None` moves `m`
    /// and `L` with Adam like every other parameter.
    pub natural_step: Option<f64>,
}

impl Default for NsrConfig {
    fn default() -> Self {
        Self {
            n_inducing: 64,
            hidden: vec![128, 64, 32],
            epochs: 10,
            lr: 1e-3,
            batch_size: 256,
            seed: 0,
            max_points: None,
            groups: TrainGroups::default(),
            natural_step: Some(0.1),
        }
    }
}

/// Squared-exponential kernel `σ_f² exp(-‖x-y‖² / 2ℓ²)`.
pub fn rbf(x: &[f64], y: &[f64], signal_var: f64, lengthscale: f64) -> f64 {
    let d2: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    signal_var * (-d2 / (2.0 * lengthscale * lengthscale)).exp()
}

/// Kernel matrix between the columns of `a` and `b`.
pub fn rbf_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, signal_var: f64, lengthscale: f64) -> DMatrix<f64> {
    let d2 = sq_dists(a, b);
    let inv = 1.0 / (2.0 * lengthscale * lengthscale);
    d2.map(|d| signal_var * (-d * inv).exp())
}

fn sq_dists(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let an: Vec<f64> = a.column_iter().map(|c| c.norm_squared()).collect();
    let bn: Vec<f64> = b.column_iter().map(|c| c.norm_squared()).collect();
    let mut cross = a.tr_mul(b);
    for j in 0..cross.ncols() {
        for i in 0..cross.nrows() {
            cross[(i, j)] = (an[i] + bn[j] - 2.0 * cross[(i, j)]).max(0.0);
        }
    }
    cross
}

/// Trained or initialized N-step-return model.
///
/// `chol_raw` stores the Cholesky factor of `S` with its diagonal in log
/// space: strictly-lower entries are `L_ij`, diagonal entries are `ln L_ii`,
/// the upper triangle is unused and kept at zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NsrModel {
    pub version: u32,
    pub n_actions: usize,
    pub extractor: Mlp,
    pub log_signal_var: f64,
    pub log_lengthscale: f64,
    pub log_noise_var: f64,
    /// `d x M`, one inducing input per column.
    pub inducing: DMatrix<f64>,
    pub var_mean: DVector<f64>,
    pub chol_raw: DMatrix<f64>,
}

/// ELBO split into its two terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Elbo {
    pub value: f64,
    pub expected_loglik: f64,
    pub kl: f64,
}

/// Gradient of the ELBO, in the same layout as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct NsrGrad {
    pub extractor: MlpGrad,
    pub log_signal_var: f64,
    pub log_lengthscale: f64,
    pub log_noise_var: f64,
    pub inducing: DMatrix<f64>,
    pub var_mean: DVector<f64>,
    pub chol_raw: DMatrix<f64>,
}

impl NsrGrad {
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.extractor.slices();
        out.push(std::slice::from_ref(&self.log_signal_var));
        out.push(std::slice::from_ref(&self.log_lengthscale));
        out.push(std::slice::from_ref(&self.log_noise_var));
        out.push(self.inducing.as_slice());
        out.push(self.var_mean.as_slice());
        out.push(self.chol_raw.as_slice());
        out
    }

    fn mask(&mut self, groups: TrainGroups) {
        if !groups.extractor {
            for (w, b) in &mut self.extractor.layers {
                w.fill(0.0);
                b.fill(0.0);
            }
        }
        if !groups.kernel {
            self.log_signal_var = 0.0;
            self.log_lengthscale = 0.0;
            self.log_noise_var = 0.0;
        }
        if !groups.inducing {
            self.inducing.fill(0.0);
        }
        if !groups.variational {
            self.var_mean.fill(0.0);
            self.chol_raw.fill(0.0);
        }
    }
}

/// Model input: state features followed by a one-hot action.
pub fn model_input(state_feat: &[f64], action_index: usize, n_actions: usize) -> Vec<f64> {
    let mut x = Vec::with_capacity(state_feat.len() + n_actions);
    x.extend_from_slice(state_feat);
    x.extend((0..n_actions).map(|a| if a == action_index { 1.0 } else { 0.0 }));
    x
}

fn input_matrix(batch: &[&Transition], n_actions: usize) -> (DMatrix<f64>, Vec<f64>) {
    let dim = batch.first().map_or(0, |t| t.state_feat.len() + n_actions);
    let mut data = Vec::with_capacity(dim * batch.len());
    for t in batch {
        data.extend(model_input(&t.state_feat, t.action_index, n_actions));
    }
    let y = batch.iter().map(|t| t.r_n).collect();
    (DMatrix::from_vec(dim, batch.len(), data), y)
}

impl NsrModel {
    /// Fresh model with random extractor weights. Inducing points, kernel
    /// hyperparameters and `q(u)` are placed from `(x_init, y_init)`.
    pub fn init(
        n_actions: usize,
        input_dim: usize,
        hidden: &[usize],
        n_inducing: usize,
        x_init: &DMatrix<f64>,
        y_init: &[f64],
        seed: u64,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(Error::Config("extractor needs at least one hidden layer".into()));
        }
        if x_init.ncols() == 0 {
            return Err(Error::Usage("cannot initialize an NSR model from no data".into()));
        }
        let mut rng = rng_from_seed(seed);
        let extractor = Mlp::new(input_dim, hidden, None, Activation::Tanh, &mut rng);
        let m = n_inducing.min(x_init.ncols()).max(1);
        let mut idx: Vec<usize> = (0..x_init.ncols()).collect();
        idx.shuffle(&mut rng);
        idx.truncate(m);
        let xz = x_init.select_columns(&idx);
        let inducing = extractor.forward(&xz);

        let mut dists: Vec<f64> = Vec::new();
        let d2 = sq_dists(&inducing, &inducing);
        for j in 0..m {
            for i in 0..j {
                dists.push(d2[(i, j)].sqrt());
            }
        }
        dists.sort_by(f64::total_cmp);
        let median = dists.get(dists.len() / 2).copied().unwrap_or(1.0);
        let lengthscale = if median > 1e-6 { median } else { 1.0 };

        let n = y_init.len() as f64;
        let mean = y_init.iter().sum::<f64>() / n;
        let second = y_init.iter().map(|y| y * y).sum::<f64>() / n;
        let var = (second - mean * mean).max(1e-6);
        let signal_var = second.max(1e-3);
        let noise_var = (0.25 * var).max(1e-4);

        let var_mean = DVector::from_iterator(m, idx.iter().map(|&i| y_init[i]));
        let kzz = rbf_matrix(&inducing, &inducing, signal_var, lengthscale) + DMatrix::identity(m, m) * JITTER;
        let chol = Cholesky::new(kzz).ok_or_else(|| Error::Numerical("initial K_ZZ not positive definite".into()))?;
        let mut l = chol.l() * 0.3;
        for i in 0..m {
            l[(i, i)] = l[(i, i)].max(1e-6).ln();
        }
        Ok(Self {
            version: CHECKPOINT_VERSION,
            n_actions,
            extractor,
            log_signal_var: signal_var.ln(),
            log_lengthscale: lengthscale.ln(),
            log_noise_var: noise_var.ln(),
            inducing,
            var_mean,
            chol_raw: l,
        })
    }

    pub fn n_inducing(&self) -> usize {
        self.var_mean.len()
    }

    pub fn embedding_dim(&self) -> usize {
        self.extractor.output_dim()
    }

    pub fn signal_var(&self) -> f64 {
        self.log_signal_var.exp()
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn noise_var(&self) -> f64 {
        self.log_noise_var.exp()
    }

    /// Lower-triangular factor `L` of `S`.
    pub fn var_chol(&self) -> DMatrix<f64> {
        let m = self.n_inducing();
        DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => self.chol_raw[(i, j)],
            std::cmp::Ordering::Equal => self.chol_raw[(i, i)].exp(),
            std::cmp::Ordering::Less => 0.0,
        })
    }

    pub fn var_cov(&self) -> DMatrix<f64> {
        let l = self.var_chol();
        &l * l.transpose()
    }

    pub fn embed(&self, state_feat: &[f64], action_index: usize) -> Vec<f64> {
        let x = model_input(state_feat, action_index, self.n_actions);
        self.extractor.forward(&DMatrix::from_vec(x.len(), 1, x)).as_slice().to_vec()
    }

    /// Embeds the columns of an input matrix.
    pub fn embed_inputs(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.extractor.forward(x)
    }

    /// Kernel between two embeddings under the current hyperparameters.
    pub fn kernel(&self, x: &[f64], y: &[f64]) -> f64 {
        rbf(x, y, self.signal_var(), self.lengthscale())
    }

    pub fn kzz(&self) -> DMatrix<f64> {
        let m = self.n_inducing();
        rbf_matrix(&self.inducing, &self.inducing, self.signal_var(), self.lengthscale())
            + DMatrix::identity(m, m) * JITTER
    }

    fn kzz_chol(&self) -> Result<Cholesky<f64, Dyn>> {
        Cholesky::new(self.kzz()).ok_or_else(|| Error::Numerical("K_ZZ is not positive definite after jitter".into()))
    }

    /// `KL(q(u) || p(u))`.
    pub fn kl(&self) -> Result<f64> {
        let chol = self.kzz_chol()?;
        let kinv = chol.inverse();
        Ok(self.kl_with(&chol, &kinv, &self.var_cov()))
    }

    fn kl_with(&self, chol: &Cholesky<f64, Dyn>, kinv: &DMatrix<f64>, s: &DMatrix<f64>) -> f64 {
        let m = self.n_inducing();
        let alpha = kinv * &self.var_mean;
        let trace = kinv.component_mul(s).sum();
        let logdet_k = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        let logdet_s = 2.0 * (0..m).map(|i| self.chol_raw[(i, i)]).sum::<f64>();
        0.5 * (trace + self.var_mean.dot(&alpha) - m as f64 + logdet_k - logdet_s)
    }

    /// ELBO of a batch, scaled as if it were drawn from `dataset_size` points.
    pub fn elbo(&self, batch: &[&Transition], dataset_size: usize) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("ELBO needs a nonempty batch".into()));
        }
        let (x, y) = input_matrix(batch, self.n_actions);
        Ok(self.elbo_with_grad(&x, &y, dataset_size, false)?.0.value)
    }

    /// ELBO on raw inputs (`x` columns are model inputs, `y` are targets), and
    /// optionally its gradient w.r.t. every parameter.
    ///
    /// With `A = K_ZZ⁻¹ K_Zb`, `α = K_ZZ⁻¹ m`, `r_i = (y_i - μ_i)/σ_n²` and
    /// `c = -1/(2σ_n²)`, scale `s = n/b`:
    /// - `∂/∂m = s·A r - α`
    /// - `∂/∂L = 2cs·AAᵀL - K_ZZ⁻¹L`, plus `+1` on each log-diagonal entry
    /// - `∂/∂K_Zb = s·(α rᵀ + (A - K_ZZ⁻¹ S A)/σ_n²)`
    /// - `∂/∂K_ZZ = s·(-A r αᵀ + c(Q - Q S K⁻¹ - K⁻¹ S Q)) + ½(K⁻¹SK⁻¹ + ααᵀ - K⁻¹)`, `Q = AAᵀ`
    ///
    /// and the kernel matrices are chained back to the hyperparameters, `Z`
    /// and the embeddings, the latter through the extractor.
    pub fn elbo_with_grad(
        &self,
        x: &DMatrix<f64>,
        y: &[f64],
        dataset_size: usize,
        want_grad: bool,
    ) -> Result<(Elbo, Option<NsrGrad>)> {
        let b = y.len();
        if b == 0 || x.ncols() != b {
            return Err(Error::Usage("ELBO needs a nonempty batch with matching targets".into()));
        }
        let m_ind = self.n_inducing();
        let sf2 = self.signal_var();
        let ell = self.lengthscale();
        let ell2 = ell * ell;
        let sn2 = self.noise_var();
        let scale = dataset_size as f64 / b as f64;

        let cache = self.extractor.forward_cached(x);
        let h = cache.output();
        let kzz_raw = rbf_matrix(&self.inducing, &self.inducing, sf2, ell);
        let kzz = &kzz_raw + DMatrix::identity(m_ind, m_ind) * JITTER;
        let chol = Cholesky::new(kzz).ok_or_else(|| Error::Numerical("K_ZZ is not positive definite after jitter".into()))?;
        let kinv = chol.inverse();
        let kzb = rbf_matrix(&self.inducing, h, sf2, ell);
        let a = &kinv * &kzb;
        let alpha = &kinv * &self.var_mean;
        let l = self.var_chol();
        let s = &l * l.transpose();
        let sa = &s * &a;

        let mu = a.tr_mul(&self.var_mean);
        let mut var_f = vec![0.0; b];
        for i in 0..b {
            let knn = kzb.column(i).dot(&a.column(i));
            let snn = a.column(i).dot(&sa.column(i));
            var_f[i] = sf2 - knn + snn;
        }
        let resid: Vec<f64> = (0..b).map(|i| y[i] - mu[i]).collect();
        let expected_loglik: f64 = (0..b)
            .map(|i| -0.5 * (2.0 * PI * sn2).ln() - (resid[i] * resid[i] + var_f[i]) / (2.0 * sn2))
            .sum();
        let kl = self.kl_with(&chol, &kinv, &s);
        let value = scale * expected_loglik - kl;
        let elbo = Elbo { value, expected_loglik, kl };
        if !want_grad {
            return Ok((elbo, None));
        }

        let c = -1.0 / (2.0 * sn2);
        let r = DVector::from_iterator(b, resid.iter().map(|e| e / sn2));

        // variational parameters
        let ar = &a * &r;
        let g_mean = &ar * scale - &alpha;
        let q = &a * a.transpose();
        let g_l = (&q * &l) * (2.0 * c * scale) - &kinv * &l;
        let mut g_chol = DMatrix::zeros(m_ind, m_ind);
        for j in 0..m_ind {
            for i in j..m_ind {
                g_chol[(i, j)] = if i == j { g_l[(i, i)] * l[(i, i)] + 1.0 } else { g_l[(i, j)] };
            }
        }

        // kernel matrices
        let kinv_sa = &kinv * &sa;
        let mut g_kzb = (&a - &kinv_sa) * (scale / sn2);
        g_kzb.ger(scale, &alpha, &r, 1.0);
        let kinv_s = &kinv * &s;
        let qs_kinv = &q * kinv_s.transpose();
        let kinv_s_q = &kinv_s * &q;
        let mut g_kzz = (&q - &qs_kinv - &kinv_s_q) * (c * scale);
        g_kzz.ger(-scale, &ar, &alpha, 1.0);
        g_kzz += (&kinv_s * &kinv - &kinv) * 0.5;
        g_kzz.ger(0.5, &alpha, &alpha, 1.0);

        // hyperparameters
        let d2_zz = sq_dists(&self.inducing, &self.inducing);
        let d2_zb = sq_dists(&self.inducing, h);
        let w_zz = g_kzz.component_mul(&kzz_raw);
        let w_zb = g_kzb.component_mul(&kzb);
        let g_log_sf2 = w_zz.sum() + w_zb.sum() + scale * c * b as f64 * sf2;
        let g_log_ell = (w_zz.component_mul(&d2_zz).sum() + w_zb.component_mul(&d2_zb).sum()) / ell2;
        let g_log_sn2 = scale
            * (0..b)
                .map(|i| -0.5 + (resid[i] * resid[i] + var_f[i]) / (2.0 * sn2))
                .sum::<f64>();

        // inducing inputs and embeddings
        let w_sym = &w_zz + w_zz.transpose();
        let z = &self.inducing;
        let row_zz = DVector::from_iterator(m_ind, w_sym.row_iter().map(|r| r.sum()));
        let row_zb = DVector::from_iterator(m_ind, w_zb.row_iter().map(|r| r.sum()));
        let col_zb = DVector::from_iterator(b, w_zb.column_iter().map(|c| c.sum()));
        let mut g_z = z * DMatrix::from_diagonal(&(row_zz + row_zb));
        g_z -= z * &w_sym;
        g_z -= h * w_zb.transpose();
        g_z *= -1.0 / ell2;
        let mut g_h = h * DMatrix::from_diagonal(&col_zb);
        g_h -= z * &w_zb;
        g_h *= -1.0 / ell2;
        let (g_extractor, _) = self.extractor.backward(&cache, g_h);

        Ok((
            elbo,
            Some(NsrGrad {
                extractor: g_extractor,
                log_signal_var: g_log_sf2,
                log_lengthscale: g_log_ell,
                log_noise_var: g_log_sn2,
                inducing: g_z,
                var_mean: g_mean,
                chol_raw: g_chol,
            }),
        ))
    }

    /// Natural-gradient step of size `rho` on `q(u)` for a batch.
    ///
    /// With a Gaussian likelihood the batch optimum is available in closed
    /// form, `S*⁻¹ = K⁻¹ + c·AAᵀ`, `S*⁻¹m* = c·A y` with `c = (n/b)/σ_n²`; the
    /// step moves the natural parameters `(S⁻¹m, S⁻¹)` a fraction `rho`
    /// towards it. In full batch, any `rho` in `(0, 1]` raises the ELBO and
    /// `rho = 1` lands on the optimal `q(u)`.
    pub fn natural_step(&mut self, x: &DMatrix<f64>, y: &[f64], dataset_size: usize, rho: f64) -> Result<()> {
        if x.ncols() == 0 || x.ncols() != y.len() {
            return Err(Error::Usage("natural step needs a nonempty batch with one target per input".into()));
        }
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("natural step size {rho} outside (0, 1]")));
        }
        let m = self.n_inducing();
        let h = self.extractor.forward(x);
        let kzb = rbf_matrix(&self.inducing, &h, self.signal_var(), self.lengthscale());
        let chol = self.kzz_chol()?;
        let a = chol.solve(&kzb);
        let c = dataset_size as f64 / x.ncols() as f64 / self.noise_var();
        let mut prec = chol.inverse() + (&a * a.transpose()) * c;
        let mut lin = (&a * DVector::from_column_slice(y)) * c;
        if rho < 1.0 {
            let linv = self
                .var_chol()
                .solve_lower_triangular(&DMatrix::identity(m, m))
                .ok_or_else(|| Error::Numerical("variational factor is singular".into()))?;
            let prec_cur = linv.transpose() * &linv;
            lin = lin * rho + (&prec_cur * &self.var_mean) * (1.0 - rho);
            prec = prec * rho + prec_cur * (1.0 - rho);
        }
        let prec = (&prec + prec.transpose()) * 0.5;
        let pc = Cholesky::new(prec).ok_or_else(|| Error::Numerical("variational precision not positive definite".into()))?;
        let s = pc.inverse();
        let s = (&s + s.transpose()) * 0.5;
        let l = Cholesky::new(s).ok_or_else(|| Error::Numerical("variational covariance not positive definite".into()))?.l();
        self.var_mean = pc.solve(&lin);
        self.chol_raw = DMatrix::from_fn(m, m, |i, j| match i.cmp(&j) {
            std::cmp::Ordering::Greater => l[(i, j)],
            std::cmp::Ordering::Equal => l[(i, i)].ln(),
            std::cmp::Ordering::Less => 0.0,
        });
        Ok(())
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.extractor.param_slices_mut();
        out.push(std::slice::from_mut(&mut self.log_signal_var));
        out.push(std::slice::from_mut(&mut self.log_lengthscale));
        out.push(std::slice::from_mut(&mut self.log_noise_var));
        out.push(self.inducing.as_mut_slice());
        out.push(self.var_mean.as_mut_slice());
        out.push(self.chol_raw.as_mut_slice());
        out
    }

    /// Precomputes the factorizations needed for prediction.
    pub fn predictor(&self) -> Result<NsrPredictor<'_>> {
        let chol = self.kzz_chol()?;
        let kinv = chol.inverse();
        Ok(NsrPredictor { model: self, kinv, s: self.var_cov() })
    }

    pub fn predict(&self, state_feat: &[f64], action_index: usize) -> Result<GaussPred> {
        let x = model_input(state_feat, action_index, self.n_actions);
        Ok(self.predictor()?.predict_inputs(&DMatrix::from_vec(x.len(), 1, x))[0])
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let model: Self = serde_json::from_reader(f)?;
        if model.version != CHECKPOINT_VERSION {
            return Err(Error::Parse { line: 1, message: format!("unsupported NSR checkpoint version {}", model.version) });
        }
        Ok(model)
    }
}

/// Prediction-time view of a model with `K_ZZ⁻¹` and `S` cached.
pub struct NsrPredictor<'a> {
    model: &'a NsrModel,
    kinv: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl NsrPredictor<'_> {
    /// `μ = k_*ᵀ K⁻¹ m`, `σ² = k_** - k_*ᵀ K⁻¹ (K - S) K⁻¹ k_* + σ_n²`.
    pub fn predict_inputs(&self, x: &DMatrix<f64>) -> Vec<GaussPred> {
        let model = self.model;
        let h = model.extractor.forward(x);
        let kzb = rbf_matrix(&model.inducing, &h, model.signal_var(), model.lengthscale());
        let a = &self.kinv * &kzb;
        let sa = &self.s * &a;
        let mu = a.tr_mul(&model.var_mean);
        let base = model.signal_var() + model.noise_var();
        (0..x.ncols())
            .map(|i| {
                let var = base - kzb.column(i).dot(&a.column(i)) + a.column(i).dot(&sa.column(i));
                GaussPred { mu: mu[i], var: var.max(VAR_FLOOR) }
            })
            .collect()
    }

    /// Predictions for every transition, evaluated in parallel chunks.
    pub fn predict_transitions(&self, ts: &[Transition]) -> Vec<GaussPred> {
        const CHUNK: usize = 1024;
        let n_actions = self.model.n_actions;
        ts.par_chunks(CHUNK)
            .map(|chunk| {
                let refs: Vec<&Transition> = chunk.iter().collect();
                let (x, _) = input_matrix(&refs, n_actions);
                self.predict_inputs(&x)
            })
            .collect::<Vec<_>>()
            .concat()
    }
}

/// Per-epoch record of a training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStat {
    pub epoch: usize,
    /// Mean minibatch ELBO, or the exact full-data ELBO in full-batch mode.
    pub elbo: f64,
}

/// Trains an NSR model on an annotated dataset.
///
/// When the batch covers the whole training set, a step is accepted only if
/// it does not lower the ELBO; otherwise the step sizes are halved and retried.
pub fn train_nsr(dataset: &Dataset, n_actions: usize, cfg: &NsrConfig) -> Result<(NsrModel, Vec<EpochStat>)> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot train an NSR model on an empty dataset".into()));
    }
    if dataset.nsr.is_none() {
        return Err(Error::Usage("dataset has no N-step-return annotation".into()));
    }
    if cfg.batch_size == 0 || cfg.n_inducing == 0 {
        return Err(Error::Config("batch_size and n_inducing must be positive".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let mut idx: Vec<usize> = (0..dataset.len()).collect();
    if let Some(max) = cfg.max_points.filter(|&m| m < dataset.len()) {
        idx.shuffle(&mut rng);
        idx.truncate(max);
        idx.sort_unstable();
    }
    let refs: Vec<&Transition> = idx.iter().map(|&i| &dataset.transitions[i]).collect();
    let (x, y) = input_matrix(&refs, n_actions);
    let n = y.len();
    let mut model = NsrModel::init(n_actions, x.nrows(), &cfg.hidden, cfg.n_inducing, &x, &y, cfg.seed ^ 0x5eed)?;
    let mut adam = Adam::default();
    let mut stats = Vec::with_capacity(cfg.epochs);

    let natural = cfg.natural_step.filter(|_| cfg.groups.variational);
    if let Some(rho) = natural {
        if !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("natural step size {rho} outside (0, 1]")));
        }
    }
    // q(u) is left to the natural step when one is configured
    let adam_groups = TrainGroups { variational: cfg.groups.variational && natural.is_none(), ..cfg.groups };

    if cfg.batch_size >= n {
        let mut current = model.elbo_with_grad(&x, &y, n, false)?.0.value;
        for epoch in 0..cfg.epochs {
            let (_, grad) = model.elbo_with_grad(&x, &y, n, true)?;
            let mut grad = grad.expect("gradient requested");
            grad.mask(adam_groups);
            let neg: Vec<Vec<f64>> = grad.slices().iter().map(|g| g.iter().map(|v| -v).collect()).collect();
            let neg_refs: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
            let mut lr = cfg.lr;
            let mut rho = natural.unwrap_or(0.0);
            for _ in 0..20 {
                let mut trial = model.clone();
                let mut trial_adam = adam.clone();
                trial_adam.step(trial.param_slices_mut(), &neg_refs, lr);
                let stepped = if natural.is_some() { trial.natural_step(&x, &y, n, rho) } else { Ok(()) };
                if let (Ok(()), Ok((e, _))) = (stepped, trial.elbo_with_grad(&x, &y, n, false)) {
                    if e.value >= current {
                        model = trial;
                        adam = trial_adam;
                        current = e.value;
                        break;
                    }
                }
                lr *= 0.5;
                rho *= 0.5;
            }
            stats.push(EpochStat { epoch, elbo: current });
        }
        return Ok((model, stats));
    }

    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let xb = x.select_columns(chunk);
            let yb: Vec<f64> = chunk.iter().map(|&i| y[i]).collect();
            let (e, grad) = model.elbo_with_grad(&xb, &yb, n, true)?;
            let mut grad = grad.expect("gradient requested");
            grad.mask(adam_groups);
            let neg: Vec<Vec<f64>> = grad.slices().iter().map(|g| g.iter().map(|v| -v).collect()).collect();
            let neg_refs: Vec<&[f64]> = neg.iter().map(Vec::as_slice).collect();
            adam.step(model.param_slices_mut(), &neg_refs, cfg.lr);
            if let Some(rho) = natural {
                model.natural_step(&xb, &yb, n, rho)?;
            }
            sum += e.value;
            batches += 1;
        }
        stats.push(EpochStat { epoch, elbo: sum / batches as f64 });
    }
    Ok((model, stats))
}

/// Builds the input matrix and targets used by training.
pub fn training_inputs(dataset: &Dataset, n_actions: usize) -> (DMatrix<f64>, Vec<f64>) {
    let refs: Vec<&Transition> = dataset.iter().collect();
    input_matrix(&refs, n_actions)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn toy(n: usize, dim: usize, seed: u64) -> (DMatrix<f64>, Vec<f64>) {
        let mut rng = rng_from_seed(seed);
        let x: DMatrix<f64> = DMatrix::from_fn(dim, n, |_, _| rng.gen_range(-1.0..1.0));
        let y = (0..n).map(|j| (2.0 * x[(0, j)]).sin() + 0.5 * x[(1, j)] + 0.1 * rng.gen_range(-1.0..1.0)).collect();
        (x, y)
    }

    fn small_model(seed: u64) -> (NsrModel, DMatrix<f64>, Vec<f64>) {
        let (x, y) = toy(10, 4, seed);
        let mut model = NsrModel::init(2, 4, &[5, 3], 4, &x, &y, seed).unwrap();
        // move away from the symmetric initialization
        let mut rng = rng_from_seed(seed + 1);
        for v in model.var_mean.iter_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
        for j in 0..4 {
            for i in j + 1..4 {
                model.chol_raw[(i, j)] = rng.gen_range(-0.2..0.2);
            }
        }
        (model, x, y)
    }

    #[test]
    fn kernel_basics() {
        let x = [0.3, -1.0, 2.0];
        let y = [1.0, 0.5, -0.5];
        assert_eq!(rbf(&x, &x, 2.5, 0.7), 2.5);
        assert_eq!(rbf(&x, &y, 2.5, 0.7), rbf(&y, &x, 2.5, 0.7));
        let mut rng = rng_from_seed(4);
        let pts = DMatrix::from_fn(3, 10, |_, _| rng.gen_range(-2.0..2.0));
        let k = rbf_matrix(&pts, &pts, 1.3, 0.9) + DMatrix::identity(10, 10) * 1e-6;
        assert!(Cholesky::new(k.clone()).is_some());
        let eig = k.symmetric_eigenvalues();
        assert!(eig.iter().all(|&e| e > 0.0));
    }

    #[test]
    fn kl_vanishes_at_prior_and_is_nonnegative() {
        let (mut model, _, _) = small_model(3);
        assert!(model.kl().unwrap() >= 0.0);
        let chol = Cholesky::new(model.kzz()).unwrap();
        let l = chol.l();
        model.var_mean.fill(0.0);
        for j in 0..4 {
            for i in j..4 {
                model.chol_raw[(i, j)] = if i == j { l[(i, i)].ln() } else { l[(i, j)] };
            }
        }
        assert!(model.kl().unwrap().abs() < 1e-10);
    }

    #[test]
    fn elbo_gradient_matches_finite_differences() {
        let (model, x, y) = small_model(7);
        let n_total = 25;
        let (_, grad) = model.elbo_with_grad(&x, &y, n_total, true).unwrap();
        let grad = grad.unwrap();
        let analytic: Vec<Vec<f64>> = grad.slices().iter().map(|s| s.to_vec()).collect();
        let h = 1e-5;
        let m = model.n_inducing();
        let n_tensors = analytic.len();
        for t in 0..n_tensors {
            for j in 0..analytic[t].len() {
                // upper triangle of the Cholesky storage is not a parameter
                if t == n_tensors - 1 && j / m > j % m {
                    continue;
                }
                let mut plus = model.clone();
                plus.param_slices_mut()[t][j] += h;
                let mut minus = model.clone();
                minus.param_slices_mut()[t][j] -= h;
                let fp = plus.elbo_with_grad(&x, &y, n_total, false).unwrap().0.value;
                let fm = minus.elbo_with_grad(&x, &y, n_total, false).unwrap().0.value;
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[t][j];
                let rel = (fd - a).abs() / a.abs().max(fd.abs()).max(1e-3);
                assert!(rel < 1e-4, "tensor {t} entry {j}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn far_query_recovers_prior() {
        let (model, _, _) = small_model(2);
        let pred = model.predictor().unwrap();
        // embeddings are tanh-bounded, so push the inducing set away instead
        let mut far = model.clone();
        far.inducing.add_scalar_mut(50.0);
        let p = far.predictor().unwrap().predict_inputs(&DMatrix::from_element(4, 1, 0.1))[0];
        assert!(p.mu.abs() < 1e-12);
        assert!((p.var - (far.signal_var() + far.noise_var())).abs() < 1e-9);
        let q = pred.predict_inputs(&DMatrix::from_element(4, 1, 0.1))[0];
        assert!(q.var > 0.0);
    }

    #[test]
    fn natural_step_reaches_variational_optimum() {
        let (mut model, x, y) = small_model(5);
        let before = model.elbo_with_grad(&x, &y, 10, false).unwrap().0.value;
        model.natural_step(&x, &y, 10, 1.0).unwrap();
        let (e, g) = model.elbo_with_grad(&x, &y, 10, true).unwrap();
        let g = g.unwrap();
        assert!(e.value > before);
        let m = model.n_inducing();
        assert!(g.var_mean.iter().all(|v| v.abs() < 1e-5), "{:?}", g.var_mean);
        for j in 0..m {
            for i in j..m {
                assert!(g.chol_raw[(i, j)].abs() < 1e-5, "dL[{i},{j}] = {}", g.chol_raw[(i, j)]);
            }
        }
        // a partial step lands strictly between
        let (mut half, _, _) = small_model(5);
        half.natural_step(&x, &y, 10, 0.5).unwrap();
        let mid = half.elbo_with_grad(&x, &y, 10, false).unwrap().0.value;
        assert!(before < mid && mid < e.value);
    }

    #[test]
    fn full_batch_elbo_never_decreases() {
        let (x, y) = toy(30, 3, 9);
        let ts: Vec<Transition> = (0..30)
            .map(|j| Transition {
                entrance_id: "toy".into(),
                episode_id: j as u64,
                t: 0,
                state_feat: x.column(j).iter().copied().collect(),
                action_index: j % 2,
                r: y[j],
                r_ad: y[j],
                r_fee: 0.0,
                r_n: y[j],
                next_state_feat: None,
                w: None,
            })
            .collect();
        let mut ds = Dataset::new(ts);
        ds.nsr = Some(crate::dataset::NsrAnnotation { horizon: 1, gamma: 0.9 });
        let cfg = NsrConfig { n_inducing: 10, hidden: vec![8, 4], epochs: 200, lr: 1e-2, batch_size: 64, ..Default::default() };
        let (_, stats) = train_nsr(&ds, 2, &cfg).unwrap();
        for w in stats.windows(2) {
            assert!(w[1].elbo >= w[0].elbo - 1e-8);
        }
        assert!(stats.last().unwrap().elbo > stats[0].elbo);
    }

    #[test]
    fn empty_or_unannotated_dataset_rejected() {
        let cfg = NsrConfig::default();
        assert!(matches!(train_nsr(&Dataset::default(), 2, &cfg), Err(Error::Usage(_))));
    }
}
