use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::{Mlp, NetError};

/// Why [`LbfgsState::minimize`] stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    GradientTolerance,
    LineSearchFailure,
    MaxIterations,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsOutcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub termination: Termination,
    /// Loss at every accepted iterate, starting with the initial point.
    pub history: Vec<f64>,
}

impl LbfgsOutcome {
    pub fn line_search_error(&self) -> Option<NetError> {
        (self.termination == Termination::LineSearchFailure)
            .then_some(NetError::LineSearch { trials: 25 })
    }
}

/// Limited-memory BFGS with a strong-Wolfe line search.
#[derive(Debug, Clone)]
pub struct LbfgsState {
    pub memory: usize,
    pub c1: f64,
    pub c2: f64,
    pub max_trials: usize,
    pub gradient_tolerance: f64,
    s_hist: VecDeque<Vec<f64>>,
    y_hist: VecDeque<Vec<f64>>,
}

impl Default for LbfgsState {
    fn default() -> Self {
        Self {
            memory: 10,
            c1: 1e-4,
            c2: 0.9,
            max_trials: 25,
            gradient_tolerance: 1e-8,
            s_hist: VecDeque::new(),
            y_hist: VecDeque::new(),
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn axpy(x: &[f64], alpha: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(a, b)| a + alpha * b).collect()
}

struct Probe {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    grad: Vec<f64>,
}

impl LbfgsState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn history_len(&self) -> usize {
        self.s_hist.len()
    }

    pub fn reset(&mut self) {
        self.s_hist.clear();
        self.y_hist.clear();
    }

    fn direction(&self, grad: &[f64]) -> Vec<f64> {
        let k = self.s_hist.len();
        let mut q: Vec<f64> = grad.to_vec();
        let mut alphas = vec![0.0; k];
        let rhos: Vec<f64> = (0..k)
            .map(|i| 1.0 / dot(&self.y_hist[i], &self.s_hist[i]))
            .collect();
        for i in (0..k).rev() {
            alphas[i] = rhos[i] * dot(&self.s_hist[i], &q);
            q.iter_mut()
                .zip(&self.y_hist[i])
                .for_each(|(q, y)| *q -= alphas[i] * y);
        }
        if k > 0 {
            let gamma = dot(&self.s_hist[k - 1], &self.y_hist[k - 1])
                / dot(&self.y_hist[k - 1], &self.y_hist[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = rhos[i] * dot(&self.y_hist[i], &q);
            q.iter_mut()
                .zip(&self.s_hist[i])
                .for_each(|(q, s)| *q += (alphas[i] - beta) * s);
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    fn push_pair(&mut self, s: Vec<f64>, y: Vec<f64>) {
        if dot(&s, &y) <= 1e-12 * norm(&s) * norm(&y) {
            return;
        }
        if self.s_hist.len() == self.memory {
            self.s_hist.pop_front();
            self.y_hist.pop_front();
        }
        self.s_hist.push_back(s);
        self.y_hist.push_back(y);
    }

    /// Minimize `f` from `x0`. `f` returns the value and gradient.
    pub fn minimize<F>(&mut self, x0: Vec<f64>, mut f: F, max_iters: usize) -> LbfgsOutcome
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let mut x = x0;
        let (mut fx, mut g) = f(&x);
        let mut history = vec![fx];
        let mut iterations = 0;
        let termination = loop {
            if norm(&g) <= self.gradient_tolerance {
                break Termination::GradientTolerance;
            }
            if iterations >= max_iters {
                break Termination::MaxIterations;
            }
            let mut d = self.direction(&g);
            let mut slope = dot(&g, &d);
            if !(slope < 0.0) {
                self.reset();
                d = g.iter().map(|v| -v).collect();
                slope = -dot(&g, &g);
            }
            let alpha0 = if self.s_hist.is_empty() {
                (1.0 / g.iter().map(|v| v.abs()).sum::<f64>()).min(1.0)
            } else {
                1.0
            };
            match self.line_search(&mut f, &x, fx, slope, &d, alpha0) {
                Some(p) => {
                    let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
                    let y: Vec<f64> = p.grad.iter().zip(&g).map(|(a, b)| a - b).collect();
                    self.push_pair(s, y);
                    x = p.x;
                    fx = p.value;
                    g = p.grad;
                    history.push(fx);
                    iterations += 1;
                }
                None => break Termination::LineSearchFailure,
            }
        };
        LbfgsOutcome {
            x,
            value: fx,
            iterations,
            termination,
            history,
        }
    }

    /// Minimize over a network's parameters; the network is left at the last
    /// accepted iterate.
    pub fn minimize_net<F>(&mut self, net: &mut Mlp, mut loss: F, max_iters: usize) -> LbfgsOutcome
    where
        F: FnMut(&Mlp) -> (f64, Vec<f64>),
    {
        let mut scratch = net.clone();
        let out = self.minimize(
            net.params(),
            |theta| {
                scratch.set_params(theta);
                loss(&scratch)
            },
            max_iters,
        );
        net.set_params(&out.x);
        out
    }

    fn line_search<F>(
        &self,
        f: &mut F,
        x: &[f64],
        f0: f64,
        slope0: f64,
        d: &[f64],
        alpha0: f64,
    ) -> Option<Probe>
    where
        F: FnMut(&[f64]) -> (f64, Vec<f64>),
    {
        let mut trials = 0;
        let mut eval = |alpha: f64, trials: &mut usize| -> Probe {
            *trials += 1;
            let xn = axpy(x, alpha, d);
            let (value, grad) = f(&xn);
            let slope = dot(&grad, d);
            Probe {
                alpha,
                value,
                slope,
                x: xn,
                grad,
            }
        };
        let armijo = |p: &Probe| p.value <= f0 + self.c1 * p.alpha * slope0;
        let curvature = |p: &Probe| p.slope.abs() <= -self.c2 * slope0;

        let mut prev = Probe {
            alpha: 0.0,
            value: f0,
            slope: slope0,
            x: x.to_vec(),
            grad: Vec::new(),
        };
        let mut alpha = alpha0;
        let (mut lo, mut hi);
        loop {
            if trials >= self.max_trials {
                return None;
            }
            let p = eval(alpha, &mut trials);
            if !p.value.is_finite() {
                // Step too long: shrink toward the last finite point.
                alpha = 0.5 * (prev.alpha + alpha);
                continue;
            }
            if !armijo(&p) || (prev.alpha > 0.0 && p.value >= prev.value) {
                lo = prev;
                hi = p;
                break;
            }
            if curvature(&p) {
                return Some(p);
            }
            if p.slope >= 0.0 {
                lo = p;
                hi = prev;
                break;
            }
            alpha = 2.0 * p.alpha;
            prev = p;
        }
        // Zoom: `lo` satisfies sufficient decrease with the lowest value so far.
        loop {
            if trials >= self.max_trials {
                return None;
            }
            let a = interpolate(&lo, &hi);
            let p = eval(a, &mut trials);
            if !p.value.is_finite() || !armijo(&p) || p.value >= lo.value {
                hi = p;
            } else {
                if curvature(&p) {
                    return Some(p);
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
            if (hi.alpha - lo.alpha).abs() < 1e-16 * lo.alpha.abs().max(1.0) {
                return (lo.alpha > 0.0 && lo.value < f0).then_some(lo);
            }
        }
    }
}

/// Cubic interpolation between two probes, safeguarded to the inner 80% of
/// the bracket.
fn interpolate(a: &Probe, b: &Probe) -> f64 {
    let (lo, hi) = if a.alpha < b.alpha { (a, b) } else { (b, a) };
    let width = hi.alpha - lo.alpha;
    let fallback = 0.5 * (lo.alpha + hi.alpha);
    if !(hi.value.is_finite() && hi.slope.is_finite()) || width <= 0.0 {
        return fallback;
    }
    let d1 = lo.slope + hi.slope - 3.0 * (lo.value - hi.value) / (lo.alpha - hi.alpha);
    let disc = d1 * d1 - lo.slope * hi.slope;
    if disc < 0.0 {
        return fallback;
    }
    let d2 = disc.sqrt();
    let t = hi.alpha - width * (hi.slope + d2 - d1) / (hi.slope - lo.slope + 2.0 * d2);
    let min = lo.alpha + 0.1 * width;
    let max = hi.alpha - 0.1 * width;
    if t.is_finite() {
        t.clamp(min, max)
    } else {
        fallback
    }
}
