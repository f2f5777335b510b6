//! Feed-forward tanh networks, exact gradients, and the Adam / L-BFGS
//! optimizers used to train them.

mod adam;
mod lbfgs;
mod mlp;

use rayon::prelude::*;

pub use adam::AdamState;
pub use lbfgs::{LbfgsOutcome, LbfgsState, Termination};
pub use mlp::{Mlp, MlpFile, TangentTrace};

use crate::linalg::DenseMatrix;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum NetError {
    #[error("input has dimension {got}, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("inconsistent network shape: {0}")]
    Shape(String),
    #[error("network parameters must be finite")]
    NonFinite,
    #[error("line search failed after {trials} trials")]
    LineSearch { trials: usize },
}

/// How a residual vector is penalised.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Penalty {
    /// `‖r‖²`
    Squared,
    /// `‖r‖` (subgradient 0 at `r = 0`)
    Norm,
}

/// One averaged term of a training loss.
#[derive(Debug, Clone, Copy)]
pub enum Objective<'a> {
    /// Mean of `‖target - net(x)‖²`.
    Fit {
        inputs: &'a [Vec<f64>],
        targets: &'a [Vec<f64>],
    },
    /// Mean penalty of `J(x)·direction - linear·net(x) - offset`.
    Residual {
        inputs: &'a [Vec<f64>],
        directions: &'a [Vec<f64>],
        offsets: &'a [Vec<f64>],
        linear: &'a DenseMatrix,
        penalty: Penalty,
    },
}

impl Objective<'_> {
    fn len(&self) -> usize {
        match self {
            Objective::Fit { inputs, .. } | Objective::Residual { inputs, .. } => inputs.len(),
        }
    }
}

/// `weight · mean(objective)`.
#[derive(Debug, Clone, Copy)]
pub struct Weighted<'a> {
    pub objective: Objective<'a>,
    pub weight: f64,
}

/// Points per parallel work unit. Fixed so the reduction order, and hence the
/// floating-point result, does not depend on the number of threads.
const CHUNK: usize = 64;

/// Value and exact parameter gradient of `Σ weight · mean(objective)`.
pub fn loss_gradient(net: &Mlp, terms: &[Weighted<'_>]) -> (f64, Vec<f64>) {
    let np = net.num_params();
    let mut total = 0.0;
    let mut grad = vec![0.0; np];
    for term in terms {
        let n = term.objective.len();
        if n == 0 || term.weight == 0.0 {
            continue;
        }
        let scale = term.weight / n as f64;
        let partials: Vec<(f64, Vec<f64>)> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                let mut g = vec![0.0; np];
                let mut v = 0.0;
                for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
                    v += point_loss_gradient(net, &term.objective, i, scale, &mut g);
                }
                (v, g)
            })
            .collect();
        for (v, g) in partials {
            total += scale * v;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
    }
    (total, grad)
}

/// Loss value only (no backward pass).
pub fn loss_value(net: &Mlp, terms: &[Weighted<'_>]) -> f64 {
    let mut total = 0.0;
    for term in terms {
        let n = term.objective.len();
        if n == 0 || term.weight == 0.0 {
            continue;
        }
        let partials: Vec<f64> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| {
                (c * CHUNK..((c + 1) * CHUNK).min(n))
                    .map(|i| point_value(net, &term.objective, i))
                    .sum::<f64>()
            })
            .collect();
        total += term.weight / n as f64 * partials.iter().sum::<f64>();
    }
    total
}

fn residual_of(trace: &TangentTrace, linear: &DenseMatrix, offset: &[f64]) -> Vec<f64> {
    let lin = linear.matvec(&trace.output);
    trace
        .output_tangent
        .iter()
        .zip(&lin)
        .zip(offset)
        .map(|((t, l), o)| t - l - o)
        .collect()
}

fn point_value(net: &Mlp, obj: &Objective<'_>, i: usize) -> f64 {
    match obj {
        Objective::Fit { inputs, targets } => {
            let out = net
                .forward(&inputs[i])
                .expect("input dimension checked by caller");
            out.iter()
                .zip(&targets[i])
                .map(|(o, t)| (t - o) * (t - o))
                .sum()
        }
        Objective::Residual {
            inputs,
            directions,
            offsets,
            linear,
            penalty,
        } => {
            let trace = net
                .forward_tangent(&inputs[i], &directions[i])
                .expect("input dimension checked by caller");
            let r = residual_of(&trace, linear, &offsets[i]);
            let sq: f64 = r.iter().map(|v| v * v).sum();
            match penalty {
                Penalty::Squared => sq,
                Penalty::Norm => sq.sqrt(),
            }
        }
    }
}

/// Unscaled loss of point `i`; its gradient times `scale` is added to `grad`.
fn point_loss_gradient(
    net: &Mlp,
    obj: &Objective<'_>,
    i: usize,
    scale: f64,
    grad: &mut [f64],
) -> f64 {
    match obj {
        Objective::Fit { inputs, targets } => {
            let trace = net
                .forward_trace(&inputs[i])
                .expect("input dimension checked by caller");
            let diff: Vec<f64> = trace
                .output
                .iter()
                .zip(&targets[i])
                .map(|(o, t)| o - t)
                .collect();
            let adj: Vec<f64> = diff.iter().map(|d| 2.0 * d * scale).collect();
            net.backward(&trace, &adj, None, grad);
            diff.iter().map(|d| d * d).sum()
        }
        Objective::Residual {
            inputs,
            directions,
            offsets,
            linear,
            penalty,
        } => {
            let trace = net
                .forward_tangent(&inputs[i], &directions[i])
                .expect("input dimension checked by caller");
            let r = residual_of(&trace, linear, &offsets[i]);
            let sq: f64 = r.iter().map(|v| v * v).sum();
            let (value, factor) = match penalty {
                Penalty::Squared => (sq, 2.0),
                Penalty::Norm => {
                    let n = sq.sqrt();
                    (n, if n > 0.0 { 1.0 / n } else { 0.0 })
                }
            };
            if factor == 0.0 {
                return value;
            }
            // R = ṫ - A·out - c: dR/dṫ = I, dR/dout = -A.
            let tan_adj: Vec<f64> = r.iter().map(|v| factor * scale * v).collect();
            let out_adj: Vec<f64> = linear.matvec_t(&tan_adj).iter().map(|v| -v).collect();
            net.backward(&trace, &out_adj, Some(&tan_adj), grad);
            value
        }
    }
}
