//! L1-regularized logistic regression.
//!
//! Minimizes `C * sum_i log(1 + exp(-y_i (w.x_i + b))) + ||w||_1` with
//! `y_i` in {-1, +1} and an unpenalized intercept. The solver is an
//! accelerated proximal gradient method with backtracking whose iterates
//! are accepted only when the objective does not increase; a rejected
//! momentum step restarts from the last accepted point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub weights: Vec<f64>,
    pub intercept: f64,
    #[serde(rename = "C")]
    pub c: f64,
    pub objective: f64,
    pub n_iter: usize,
    pub converged: bool,
    /// Objective after every iteration, when requested.
    #[serde(skip)]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub record_trace: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 10_000,
            record_trace: false,
        }
    }
}

/// Per-iteration growth of the backtracking step.
const STEP_GROWTH: f64 = 1.3;

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(z))` without overflow.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

fn margins(x: &[Vec<f64>], w: &[f64], b: f64, out: &mut [f64]) {
    for (m, row) in out.iter_mut().zip(x) {
        *m = b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>();
    }
}

/// Smooth part `C * sum log(1 + exp(-y * margin))`.
pub fn smooth_objective(x: &[Vec<f64>], y: &[bool], c: f64, w: &[f64], b: f64) -> f64 {
    let mut m = vec![0.0; x.len()];
    margins(x, w, b, &mut m);
    c * m
        .iter()
        .zip(y)
        .map(|(&z, &pos)| softplus(if pos { -z } else { z }))
        .sum::<f64>()
}

/// Gradient of [`smooth_objective`] with respect to `(w, b)`.
pub fn smooth_gradient(x: &[Vec<f64>], y: &[bool], c: f64, w: &[f64], b: f64) -> (Vec<f64>, f64) {
    let mut m = vec![0.0; x.len()];
    margins(x, w, b, &mut m);
    let mut gw = vec![0.0; w.len()];
    let mut gb = 0.0;
    for ((row, &z), &pos) in x.iter().zip(&m).zip(y) {
        let r = c * (sigmoid(z) - if pos { 1.0 } else { 0.0 });
        gb += r;
        gw.iter_mut().zip(row).for_each(|(g, a)| *g += r * a);
    }
    (gw, gb)
}

pub fn objective(x: &[Vec<f64>], y: &[bool], c: f64, w: &[f64], b: f64) -> f64 {
    smooth_objective(x, y, c, w, b) + w.iter().map(|v| v.abs()).sum::<f64>()
}

fn validate(x: &[Vec<f64>], y: &[bool], c: f64) -> Result<usize> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "classifier::fit labels",
            expected: x.len(),
            got: y.len(),
        });
    }
    if x.len() < 2 {
        return Err(Error::Classifier("need at least two samples".into()));
    }
    if !(c.is_finite() && c > 0.0) {
        return Err(Error::Classifier(format!("C must be positive and finite, got {c}")));
    }
    let positives = y.iter().filter(|&&p| p).count();
    if positives == 0 || positives == y.len() {
        return Err(Error::Classifier("labels contain a single class".into()));
    }
    let d = x[0].len();
    for row in x {
        if row.len() != d {
            return Err(Error::DimensionMismatch {
                context: "classifier::fit",
                expected: d,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) {
            return Err(Error::Classifier("non-finite feature value".into()));
        }
    }
    Ok(d)
}

pub fn fit(x: &[Vec<f64>], y: &[bool], c: f64) -> Result<FitResult> {
    fit_with(x, y, c, None, &FitOptions::default())
}

/// Fits with an optional starting point `(w, b)`; `None` starts at zero.
pub fn fit_with(
    x: &[Vec<f64>],
    y: &[bool],
    c: f64,
    init: Option<(&[f64], f64)>,
    opts: &FitOptions,
) -> Result<FitResult> {
    let d = validate(x, y, c)?;
    let n = x.len();

    // w = 0 is optimal iff the intercept-only fit satisfies |grad_w| <= 1.
    let prior = y.iter().filter(|&&p| p).count() as f64 / n as f64;
    let b0 = (prior / (1.0 - prior)).ln();
    let zeros = vec![0.0; d];
    let (g0, _) = smooth_gradient(x, y, c, &zeros, b0);
    if g0.iter().all(|g| g.abs() <= 1.0) {
        let obj = objective(x, y, c, &zeros, b0);
        return Ok(FitResult {
            weights: zeros,
            intercept: b0,
            c,
            objective: obj,
            n_iter: 0,
            converged: true,
            trace: if opts.record_trace { vec![obj] } else { Vec::new() },
        });
    }

    let problem = Problem::new(x, y, c);
    let mut cur: Vec<f64> = match init {
        Some((w, b)) if w.len() == d => w.iter().copied().chain([b]).collect(),
        Some((w, _)) => {
            return Err(Error::DimensionMismatch {
                context: "classifier::fit init",
                expected: d,
                got: w.len(),
            })
        }
        None => vec![0.0; d + 1],
    };
    let l1 = |p: &[f64]| p[..d].iter().map(|v| v.abs()).sum::<f64>();

    let frob: f64 = x.iter().flatten().map(|v| v * v).sum::<f64>() + n as f64;
    let mut step = 4.0 * (d as f64 + 1.0) / (c * frob);
    // Signed margins are linear in the parameters, so the extrapolated
    // point's margins follow from those of the last two iterates.
    let mut m_cur = vec![0.0; n];
    problem.signed_margins(&cur, &mut m_cur);
    let mut f_cur = problem.loss_from(&m_cur) + l1(&cur);
    let mut m_prev = m_cur.clone();
    let mut m_look = m_cur.clone();
    let mut m_z = vec![0.0; n];
    let mut look = cur.clone();
    let mut momentum = 1.0f64;
    let mut at_cur = true;
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(f_cur);
    }
    let mut converged = false;
    let mut n_iter = 0;

    let mut z = vec![0.0; d + 1];
    let mut grad = vec![0.0; d + 1];
    let mut prev = vec![0.0; d + 1];
    while n_iter < opts.max_iter {
        n_iter += 1;
        // Let the step recover after backtracking shrank it.
        step *= STEP_GROWTH;
        let f_look = problem.loss_grad_from(&m_look, &mut grad);
        let f_z = loop {
            for j in 0..d {
                let v = look[j] - step * grad[j];
                z[j] = v.signum() * (v.abs() - step).max(0.0);
            }
            z[d] = look[d] - step * grad[d];
            problem.signed_margins(&z, &mut m_z);
            let f_z = problem.loss_from(&m_z);
            let mut lin = 0.0;
            let mut quad = 0.0;
            for j in 0..=d {
                let diff = z[j] - look[j];
                lin += grad[j] * diff;
                quad += diff * diff;
            }
            if f_z <= f_look + lin + quad / (2.0 * step) || step < 1e-300 {
                break f_z;
            }
            step *= 0.5;
        };
        let f_new = f_z + l1(&z);
        if f_new <= f_cur {
            let rel = (f_cur - f_new) / f_cur.abs().max(f64::MIN_POSITIVE);
            prev.copy_from_slice(&cur);
            cur.copy_from_slice(&z);
            std::mem::swap(&mut m_prev, &mut m_cur);
            m_cur.copy_from_slice(&m_z);
            f_cur = f_new;
            let next_momentum = (1.0 + (1.0 + 4.0 * momentum * momentum).sqrt()) / 2.0;
            let beta = (momentum - 1.0) / next_momentum;
            for j in 0..=d {
                look[j] = cur[j] + beta * (cur[j] - prev[j]);
            }
            for i in 0..n {
                m_look[i] = m_cur[i] + beta * (m_cur[i] - m_prev[i]);
            }
            momentum = next_momentum;
            at_cur = beta == 0.0;
            if opts.record_trace {
                trace.push(f_cur);
            }
            if rel < opts.tol {
                converged = true;
                break;
            }
        } else {
            if opts.record_trace {
                trace.push(f_cur);
            }
            if at_cur {
                // A plain proximal step from the accepted point made no progress.
                converged = true;
                break;
            }
            look.copy_from_slice(&cur);
            m_look.copy_from_slice(&m_cur);
            momentum = 1.0;
            at_cur = true;
        }
    }

    let intercept = cur[d];
    cur.truncate(d);
    Ok(FitResult {
        weights: cur,
        intercept,
        c,
        objective: f_cur,
        n_iter,
        converged,
        trace,
    })
}

/// Row-major copy of the training data for the solver's inner loop.
struct Problem {
    x: Vec<f64>,
    d: usize,
    /// `+1` for symptomatic, `-1` for healthy.
    sign: Vec<f64>,
    c: f64,
}

impl Problem {
    fn new(x: &[Vec<f64>], y: &[bool], c: f64) -> Problem {
        Problem {
            x: x.iter().flatten().copied().collect(),
            d: x[0].len(),
            sign: y.iter().map(|&p| if p { 1.0 } else { -1.0 }).collect(),
            c,
        }
    }

    /// Fills `margins` with `y * (w.x + b)` for packed parameters `p`.
    fn signed_margins(&self, p: &[f64], margins: &mut [f64]) {
        let (w, b) = (&p[..self.d], p[self.d]);
        for ((m, row), s) in margins.iter_mut().zip(self.x.chunks_exact(self.d)).zip(&self.sign) {
            *m = s * (b + row.iter().zip(w).map(|(a, c)| a * c).sum::<f64>());
        }
    }

    fn loss_from(&self, margins: &[f64]) -> f64 {
        self.c * margins.iter().map(|&m| softplus(-m)).sum::<f64>()
    }

    /// Smooth loss given signed margins, writing its gradient into `grad`.
    fn loss_grad_from(&self, margins: &[f64], grad: &mut [f64]) -> f64 {
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        for ((&m, row), s) in margins.iter().zip(self.x.chunks_exact(self.d)).zip(&self.sign) {
            let e = (-m.abs()).exp();
            loss += (-m).max(0.0) + e.ln_1p();
            let sig_neg = if m >= 0.0 { e / (1.0 + e) } else { 1.0 / (1.0 + e) };
            let r = -self.c * s * sig_neg;
            grad[..self.d].iter_mut().zip(row).for_each(|(g, a)| *g += r * a);
            grad[self.d] += r;
        }
        self.c * loss
    }
}

impl FitResult {
    /// Linear score `w.x + b` (log-odds of symptomatic).
    pub fn decision(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::DimensionMismatch {
                context: "classifier::predict_proba",
                expected: self.weights.len(),
                got: x.len(),
            });
        }
        Ok(self.intercept + x.iter().zip(&self.weights).map(|(a, w)| a * w).sum::<f64>())
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<f64> {
        self.decision(x).map(sigmoid)
    }

    pub fn nonzero_weights(&self) -> usize {
        self.weights.iter().filter(|w| **w != 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<bool>) {
        let x = vec![
            vec![0.5, 1.0, 0.0],
            vec![1.5, 0.2, 1.0],
            vec![2.0, 0.1, 0.3],
            vec![0.1, 1.4, 0.9],
            vec![1.8, 0.3, 0.2],
            vec![0.3, 0.9, 0.4],
        ];
        (x, vec![false, true, true, false, true, false])
    }

    #[test]
    fn tiny_c_gives_prior_intercept() {
        let (x, y) = toy();
        let f = fit(&x, &y, 1e-9).unwrap();
        assert!(f.weights.iter().all(|&w| w == 0.0));
        assert!((f.intercept - 0.0).abs() < 1e-3);
        let y2 = vec![true, false, false, false, false, true];
        let f = fit(&x, &y2, 1e-9).unwrap();
        assert!((f.intercept - (2.0f64 / 4.0).ln()).abs() < 1e-3);
    }

    #[test]
    fn separable_pair_is_ordered() {
        let x = vec![vec![1.0], vec![-1.0]];
        let y = vec![true, false];
        let f = fit(&x, &y, 10.0).unwrap();
        assert!(f.predict_proba(&[1.0]).unwrap() > f.predict_proba(&[-1.0]).unwrap());
    }

    #[test]
    fn objective_monotone_and_converges() {
        let (x, y) = toy();
        let opts = FitOptions { record_trace: true, ..Default::default() };
        for c in [0.1, 1.0, 10.0, 100.0] {
            let f = fit_with(&x, &y, c, None, &opts).unwrap();
            for w in f.trace.windows(2) {
                assert!(w[1] <= w[0], "C={c}");
            }
            assert!(f.objective.is_finite());
        }
    }

    #[test]
    fn warm_start_reaches_same_optimum() {
        let (x, y) = toy();
        let cold = fit(&x, &y, 3.0).unwrap();
        let warm_from = fit(&x, &y, 1.0).unwrap();
        let warm = fit_with(&x, &y, 3.0, Some((&warm_from.weights, warm_from.intercept)), &FitOptions::default()).unwrap();
        assert!((cold.objective - warm.objective).abs() < 1e-6 * cold.objective);
    }

    #[test]
    fn errors_and_predict_shape() {
        let (x, _) = toy();
        assert!(fit(&x, &[true; 6], 1.0).is_err());
        let mut bad = x.clone();
        bad[0][0] = f64::INFINITY;
        assert!(fit(&bad, &[true, false, true, false, true, false], 1.0).is_err());
        let f = FitResult {
            weights: vec![0.0, 0.0],
            intercept: 0.0,
            c: 1.0,
            objective: 0.0,
            n_iter: 0,
            converged: true,
            trace: vec![],
        };
        assert_eq!(f.predict_proba(&[3.0, -2.0]).unwrap(), 0.5);
        assert!(f.predict_proba(&[1.0]).is_err());
        let saturated = FitResult { intercept: 50.0, ..f };
        assert!(saturated.predict_proba(&[0.0, 0.0]).unwrap() >= 1.0 - 1e-20);
    }

    #[test]
    fn sigmoid_spot_value() {
        // 1 / (1 + e^-1.5), e^-1.5 = 0.22313016014842982
        assert!((sigmoid(1.5) - 1.0 / 1.223_130_160_148_43).abs() < 1e-15);
        assert!((sigmoid(1.5) - 0.817_574_476_193_643_7).abs() < 1e-15);
    }
}
