//! Independent reference implementations used by the integration and
//! acceptance tests. None of these call into the code paths they check.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};

/// `KL(N(mp, vp) || N(mq, vq))` by composite Simpson quadrature of
/// `p(x) (ln p(x) - ln q(x))` over `mp ± 14 sd_p`.
pub fn kl_quadrature(mp: f64, vp: f64, mq: f64, vq: f64) -> f64 {
    let sd = vp.sqrt();
    let (a, b) = (mp - 14.0 * sd, mp + 14.0 * sd);
    let n = 40_000; // even
    let h = (b - a) / n as f64;
    let log_n = |x: f64, m: f64, v: f64| -0.5 * ((x - m) * (x - m) / v + (2.0 * std::f64::consts::PI * v).ln());
    let f = |x: f64| {
        let lp = log_n(x, mp, vp);
        lp.exp() * (lp - log_n(x, mq, vq))
    };
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Discounted N-step sums over one episode's rewards, truncated at the end,
/// written as the obvious double loop.
pub fn brute_force_nsr(rewards: &[f64], horizon: usize, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    for t in 0..rewards.len() {
        let mut acc = 0.0;
        for i in 0..horizon {
            if t + i >= rewards.len() {
                break;
            }
            acc += gamma.powi(i as i32) * rewards[t + i];
        }
        out[t] = acc;
    }
    out
}

/// Exact GP regression with an RBF kernel on inputs given as columns.
pub struct DenseGp {
    x: DMatrix<f64>,
    signal_var: f64,
    lengthscale: f64,
    alpha: DVector<f64>,
    pub log_evidence: f64,
}

fn rbf(a: &[f64], b: &[f64], sf2: f64, ell: f64) -> f64 {
    let mut d2 = 0.0;
    for (u, v) in a.iter().zip(b) {
        d2 += (u - v) * (u - v);
    }
    sf2 * (-0.5 * d2 / (ell * ell)).exp()
}

impl DenseGp {
    pub fn fit(x: &DMatrix<f64>, y: &[f64], signal_var: f64, lengthscale: f64, noise_var: f64) -> Self {
        let n = x.ncols();
        let mut k = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = rbf(x.column(i).as_slice(), x.column(j).as_slice(), signal_var, lengthscale);
            }
            k[(i, i)] += noise_var;
        }
        let chol = k.cholesky().expect("kernel matrix is positive definite");
        let yv = DVector::from_column_slice(y);
        let alpha = chol.solve(&yv);
        let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
        let log_evidence = -0.5 * yv.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
        Self { x: x.clone(), signal_var, lengthscale, alpha, log_evidence }
    }

    /// Posterior mean of the latent function at `q`.
    pub fn mean(&self, q: &[f64]) -> f64 {
        (0..self.x.ncols())
            .map(|i| rbf(self.x.column(i).as_slice(), q, self.signal_var, self.lengthscale) * self.alpha[i])
            .sum()
    }
}

/// A finite MDP for tabular value iteration. `outcomes[s][a]` lists
/// `(probability, reward, next state or None for terminal)`.
pub struct TabularMdp {
    pub outcomes: Vec<Vec<Vec<(f64, f64, Option<usize>)>>>,
    pub gamma: f64,
}

impl TabularMdp {
    pub fn q_star(&self) -> Vec<Vec<f64>> {
        let ns = self.outcomes.len();
        let na = self.outcomes[0].len();
        let mut q = vec![vec![0.0; na]; ns];
        for _ in 0..10_000 {
            let v: Vec<f64> = q.iter().map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
            let mut delta: f64 = 0.0;
            for s in 0..ns {
                for a in 0..na {
                    let new: f64 = self.outcomes[s][a]
                        .iter()
                        .map(|&(p, r, next)| p * (r + next.map_or(0.0, |n| self.gamma * v[n])))
                        .sum();
                    delta = delta.max((new - q[s][a]).abs());
                    q[s][a] = new;
                }
            }
            if delta < 1e-14 {
                break;
            }
        }
        q
    }
}

/// Relative error used by the gradient checks; the floor keeps exact zeros comparable.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / scale
}

/// Hand-built transition with all reward on the ads side.
pub fn transition(
    episode_id: u64,
    t: usize,
    state: Vec<f64>,
    action_index: usize,
    r: f64,
    next: Option<Vec<f64>>,
) -> hxfer::dataset::Transition {
    hxfer::dataset::Transition {
        entrance_id: "test".into(),
        episode_id,
        t,
        state_feat: state,
        action_index,
        r,
        r_ad: r,
        r_fee: 0.0,
        r_n: 0.0,
        next_state_feat: next,
        w: None,
    }
}
