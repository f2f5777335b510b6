//! Sound enclosures of tanh networks over boxes: interval bound propagation,
//! backward linear relaxation, interval Jacobians and interval tangents.

use serde::{Deserialize, Serialize};

use crate::interval::{AxisBox, Interval};
use crate::linalg::DenseMatrix;
use crate::net::Mlp;

/// `W·v + b` for an interval vector, in center/radius form.
fn affine_interval(w: &DenseMatrix, b: Option<&[f64]>, v: &[Interval]) -> Vec<Interval> {
    let c: Vec<f64> = v.iter().map(Interval::mid).collect();
    let r: Vec<f64> = v.iter().map(Interval::radius).collect();
    (0..w.rows())
        .map(|i| {
            let row = w.row(i);
            let mut mc = b.map_or(0.0, |b| b[i]);
            let mut mr = 0.0;
            for j in 0..row.len() {
                mc += row[j] * c[j];
                mr += row[j].abs() * r[j];
            }
            Interval::new(mc - mr, mc + mr)
        })
        .collect()
}

pub fn interval_matvec(w: &DenseMatrix, v: &[Interval]) -> Vec<Interval> {
    affine_interval(w, None, v)
}

/// Plain interval propagation: affine layers in center/radius form, `tanh`
/// endpoint-wise.
pub fn ibp_forward(net: &Mlp, b: &AxisBox) -> Vec<Interval> {
    let last = net.num_layers() - 1;
    let mut a = b.intervals();
    for k in 0..=last {
        let z = affine_interval(&net.weights()[k], Some(&net.biases()[k]), &a);
        if k == last {
            return z;
        }
        a = z.iter().map(Interval::tanh).collect();
    }
    unreachable!("networks have at least one layer")
}

/// Sound affine bounds `slope·x + offset` on `tanh` over `[l, u]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TanhRelaxation {
    pub lower_slope: f64,
    pub lower_offset: f64,
    pub upper_slope: f64,
    pub upper_offset: f64,
}

fn dtanh(x: f64) -> f64 {
    let t = x.tanh();
    1.0 - t * t
}

/// Range of `tanh(x) - kx` over `[l, u]`, from the endpoints and the
/// stationary points `tanh'(x) = k`.
fn offset_range(k: f64, l: f64, u: f64) -> (f64, f64) {
    let g = |x: f64| x.tanh() - k * x;
    let mut lo = g(l).min(g(u));
    let mut hi = g(l).max(g(u));
    let mut visit = |x: f64| {
        if l < x && x < u {
            let v = g(x);
            lo = lo.min(v);
            hi = hi.max(v);
        }
    };
    if k > 0.0 && k < 1.0 {
        let c = (1.0 - k).sqrt().atanh();
        visit(c);
        visit(-c);
    } else if k >= 1.0 {
        visit(0.0);
    }
    (lo, hi)
}

/// Tangent at the midpoint on the side where `tanh` is concave (`l ≥ 0`, upper)
/// or convex (`u ≤ 0`, lower), chord otherwise. Offsets are the exact extrema of
/// `tanh(x) - slope·x`, so both lines are valid for any slope.
pub fn relax_tanh(l: f64, u: f64) -> TanhRelaxation {
    let m = 0.5 * (l + u);
    if u - l < 1e-12 {
        let k = dtanh(m);
        let off = m.tanh() - k * m;
        return TanhRelaxation {
            lower_slope: k,
            lower_offset: off,
            upper_slope: k,
            upper_offset: off,
        };
    }
    let chord = (u.tanh() - l.tanh()) / (u - l);
    let tangent = dtanh(m);
    let (ks_lo, ks_hi) = if l >= 0.0 {
        (chord, tangent)
    } else if u <= 0.0 {
        (tangent, chord)
    } else {
        (chord, chord)
    };
    TanhRelaxation {
        lower_slope: ks_lo,
        lower_offset: offset_range(ks_lo, l, u).0,
        upper_slope: ks_hi,
        upper_offset: offset_range(ks_hi, l, u).1,
    }
}

/// Affine bounds on a vector function of `x` valid over a box:
/// `lower_a·x + lower_b ≤ g(x) ≤ upper_a·x + upper_b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearBounds {
    pub lower_a: DenseMatrix,
    pub lower_b: Vec<f64>,
    pub upper_a: DenseMatrix,
    pub upper_b: Vec<f64>,
}

impl LinearBounds {
    /// Bounds of `g(x) - x` from bounds of `g(x)`.
    pub fn minus_identity(mut self) -> Self {
        for i in 0..self.lower_a.rows().min(self.lower_a.cols()) {
            self.lower_a[(i, i)] -= 1.0;
            self.upper_a[(i, i)] -= 1.0;
        }
        self
    }

    /// Worst case of the affine bounds over the box.
    pub fn concretize(&self, b: &AxisBox) -> Vec<Interval> {
        let c = b.center();
        let r = b.radius();
        (0..self.lower_a.rows())
            .map(|i| {
                let (lc, lr) = dot_cr(self.lower_a.row(i), &c, &r);
                let (uc, ur) = dot_cr(self.upper_a.row(i), &c, &r);
                let lo = lc - lr + self.lower_b[i];
                let hi = uc + ur + self.upper_b[i];
                Interval::new(lo.min(hi), hi.max(lo))
            })
            .collect()
    }

    pub fn lower_at(&self, x: &[f64]) -> Vec<f64> {
        self.lower_a
            .matvec(x)
            .iter()
            .zip(&self.lower_b)
            .map(|(a, b)| a + b)
            .collect()
    }

    pub fn upper_at(&self, x: &[f64]) -> Vec<f64> {
        self.upper_a
            .matvec(x)
            .iter()
            .zip(&self.upper_b)
            .map(|(a, b)| a + b)
            .collect()
    }
}

fn dot_cr(row: &[f64], c: &[f64], r: &[f64]) -> (f64, f64) {
    let mut mc = 0.0;
    let mut mr = 0.0;
    for j in 0..row.len() {
        mc += row[j] * c[j];
        mr += row[j].abs() * r[j];
    }
    (mc, mr)
}

/// Pre-activation enclosures of every layer plus the output's linear bounds.
#[derive(Debug, Clone)]
pub struct Propagation {
    /// `pre[k]` encloses layer `k`'s pre-activation; the last entry is the
    /// network output (CROWN ∩ IBP).
    pub pre: Vec<Vec<Interval>>,
    pub output_linear: LinearBounds,
    /// Output enclosure from plain interval propagation.
    pub output_ibp: Vec<Interval>,
}

impl Propagation {
    pub fn output(&self) -> &[Interval] {
        self.pre.last().expect("at least one layer")
    }
}

/// Backward pass from the pre-activation of layer `upto` to the input.
fn backward(net: &Mlp, upto: usize, relax: &[Vec<TanhRelaxation>]) -> LinearBounds {
    let n = net.layer_dims()[upto + 1];
    let mut lam_u = DenseMatrix::identity(n);
    let mut lam_l = DenseMatrix::identity(n);
    let mut c_u = vec![0.0; n];
    let mut c_l = vec![0.0; n];
    let mut j = upto;
    loop {
        let w = &net.weights()[j];
        let b = &net.biases()[j];
        for (c, lam) in [(&mut c_u, &lam_u), (&mut c_l, &lam_l)] {
            c.iter_mut().zip(lam.matvec(b)).for_each(|(c, v)| *c += v);
        }
        lam_u = lam_u.matmul(w);
        lam_l = lam_l.matmul(w);
        if j == 0 {
            break;
        }
        j -= 1;
        let rl = &relax[j];
        let cols = lam_u.cols();
        for r in 0..n {
            for i in 0..cols {
                let t = &rl[i];
                let lu = lam_u[(r, i)];
                let (k, o) = if lu >= 0.0 {
                    (t.upper_slope, t.upper_offset)
                } else {
                    (t.lower_slope, t.lower_offset)
                };
                lam_u[(r, i)] = lu * k;
                c_u[r] += lu * o;
                let ll = lam_l[(r, i)];
                let (k, o) = if ll >= 0.0 {
                    (t.lower_slope, t.lower_offset)
                } else {
                    (t.upper_slope, t.upper_offset)
                };
                lam_l[(r, i)] = ll * k;
                c_l[r] += ll * o;
            }
        }
    }
    LinearBounds {
        lower_a: lam_l,
        lower_b: c_l,
        upper_a: lam_u,
        upper_b: c_u,
    }
}

/// Layer-by-layer bounds. The first layer is affine in the input, so its
/// interval image is exact; later layers intersect the backward linear bounds
/// with interval propagation from the previous layer's enclosure.
pub fn propagate(net: &Mlp, b: &AxisBox) -> Propagation {
    let last = net.num_layers() - 1;
    let mut pre: Vec<Vec<Interval>> = Vec::with_capacity(last + 1);
    let mut relax: Vec<Vec<TanhRelaxation>> = Vec::with_capacity(last);
    let mut ibp = b.intervals();
    for k in 0..=last {
        let w = &net.weights()[k];
        let bias = &net.biases()[k];
        // Plain IBP chain, kept separately for the output comparison.
        ibp = affine_interval(w, Some(bias), &ibp);
        let from_prev = if k == 0 {
            affine_interval(w, Some(bias), &b.intervals())
        } else {
            let a: Vec<Interval> = pre[k - 1].iter().map(Interval::tanh).collect();
            affine_interval(w, Some(bias), &a)
        };
        let enclosure = if k == 0 && k < last {
            from_prev
        } else {
            let lb = backward(net, k, &relax);
            let crown = lb.concretize(b);
            if k == last {
                let output_ibp = ibp.clone();
                let out: Vec<Interval> = crown
                    .iter()
                    .zip(&from_prev)
                    .zip(&ibp)
                    .map(|((c, p), i)| c.intersect(p).intersect(i))
                    .collect();
                pre.push(out);
                return Propagation {
                    pre,
                    output_linear: lb,
                    output_ibp,
                };
            }
            crown
                .iter()
                .zip(&from_prev)
                .map(|(c, p)| c.intersect(p))
                .collect()
        };
        relax.push(
            enclosure
                .iter()
                .map(|iv| relax_tanh(iv.lo, iv.hi))
                .collect(),
        );
        pre.push(enclosure);
        ibp = ibp.iter().map(Interval::tanh).collect();
    }
    unreachable!("loop returns at the output layer")
}

/// Linear bounds on the network output over the box.
pub fn crown_bounds(net: &Mlp, b: &AxisBox) -> LinearBounds {
    propagate(net, b).output_linear
}

/// Output enclosure: backward linear bounds intersected with interval
/// propagation.
pub fn output_bounds(net: &Mlp, b: &AxisBox) -> Vec<Interval> {
    propagate(net, b).output().to_vec()
}

/// Interval matrix stored as elementwise lower and upper bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntervalMatrix {
    pub lower: DenseMatrix,
    pub upper: DenseMatrix,
}

impl IntervalMatrix {
    pub fn point(m: &DenseMatrix) -> Self {
        Self {
            lower: m.clone(),
            upper: m.clone(),
        }
    }

    pub fn rows(&self) -> usize {
        self.lower.rows()
    }

    pub fn cols(&self) -> usize {
        self.lower.cols()
    }

    pub fn get(&self, i: usize, j: usize) -> Interval {
        Interval::new(self.lower[(i, j)], self.upper[(i, j)])
    }

    /// Elementwise `max(|lo|, |hi|)`; its spectral norm bounds that of every
    /// member.
    pub fn max_abs(&self) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(self.rows(), self.cols());
        for i in 0..self.rows() {
            for j in 0..self.cols() {
                m[(i, j)] = self.get(i, j).mag();
            }
        }
        m
    }

    pub fn contains(&self, m: &DenseMatrix) -> bool {
        (0..self.rows()).all(|i| (0..self.cols()).all(|j| self.get(i, j).contains(m[(i, j)])))
    }

    /// `self · v` for an interval vector.
    pub fn matvec(&self, v: &[Interval]) -> Vec<Interval> {
        (0..self.rows())
            .map(|i| (0..self.cols()).fold(Interval::ZERO, |acc, j| acc + self.get(i, j) * v[j]))
            .collect()
    }
}

/// Enclosure of the input Jacobian over the box, accumulated from the input
/// side: `W₁`, then alternately row-scaling by the interval `tanh'` of each
/// hidden pre-activation and multiplying by the next weight matrix.
pub fn bound_jacobian(net: &Mlp, b: &AxisBox) -> IntervalMatrix {
    jacobian_from(net, &propagate(net, b).pre)
}

pub fn jacobian_from(net: &Mlp, pre: &[Vec<Interval>]) -> IntervalMatrix {
    let last = net.num_layers() - 1;
    let mut m = IntervalMatrix::point(&net.weights()[0]);
    for k in 0..last {
        let d: Vec<Interval> = pre[k].iter().map(Interval::tanh_derivative).collect();
        for i in 0..m.rows() {
            for j in 0..m.cols() {
                let p = d[i] * m.get(i, j);
                m.lower[(i, j)] = p.lo;
                m.upper[(i, j)] = p.hi;
            }
        }
        let w = &net.weights()[k + 1];
        let c = m.lower.add(&m.upper).scale(0.5);
        let r = m.upper.add(&m.lower.scale(-1.0)).scale(0.5);
        let wc = w.matmul(&c);
        let wr = w.map(f64::abs).matmul(&r);
        m = IntervalMatrix {
            lower: wc.add(&wr.scale(-1.0)),
            upper: wc.add(&wr),
        };
    }
    m
}

/// Enclosure of `J(x)·v` for `x` in the box (with enclosure `pre`) and `v` in
/// an interval vector, by forward propagation of interval tangents.
pub fn tangent_from(net: &Mlp, pre: &[Vec<Interval>], v: &[Interval]) -> Vec<Interval> {
    let last = net.num_layers() - 1;
    let mut t = interval_matvec(&net.weights()[0], v);
    for k in 0..last {
        let a: Vec<Interval> = pre[k]
            .iter()
            .zip(&t)
            .map(|(z, t)| z.tanh_derivative() * *t)
            .collect();
        t = interval_matvec(&net.weights()[k + 1], &a);
    }
    t
}

/// Enclosures of `J(x)` and of `∂/∂x [J(x)·f(x)]` over the box, column by
/// column, by an interval forward pass carrying first and mixed second
/// derivatives. `f` encloses the drift over the box and `jf[i][j]` its
/// Jacobian entries.
pub fn flow_jacobian_from(
    net: &Mlp,
    pre: &[Vec<Interval>],
    f: &[Interval],
    jf: &[Vec<Interval>],
) -> (Vec<Vec<Interval>>, Vec<Vec<Interval>>) {
    let last = net.num_layers() - 1;
    let n = net.input_dim();
    let m = net.output_dim();
    let mut jt = vec![vec![Interval::ZERO; n]; m];
    let mut jphi = vec![vec![Interval::ZERO; n]; m];
    for j in 0..n {
        let mut dot = f.to_vec();
        let mut prime: Vec<Interval> = (0..n)
            .map(|i| Interval::point(if i == j { 1.0 } else { 0.0 }))
            .collect();
        let mut dot_prime: Vec<Interval> = (0..n).map(|i| jf[i][j]).collect();
        for k in 0..=last {
            let w = &net.weights()[k];
            let zd = interval_matvec(w, &dot);
            let zp = interval_matvec(w, &prime);
            let zdp = interval_matvec(w, &dot_prime);
            if k == last {
                for i in 0..m {
                    jt[i][j] = zp[i];
                    jphi[i][j] = zdp[i];
                }
                break;
            }
            let mut nd = Vec::with_capacity(zd.len());
            let mut np = Vec::with_capacity(zd.len());
            let mut ndp = Vec::with_capacity(zd.len());
            for i in 0..zd.len() {
                let z = pre[k][i];
                let s = z.tanh_derivative();
                // tanh'' = -2·tanh·tanh'
                let s2 = (z.tanh() * s).scale(-2.0);
                nd.push(s * zd[i]);
                np.push(s * zp[i]);
                ndp.push(s * zdp[i] + s2 * zp[i] * zd[i]);
            }
            dot = nd;
            prime = np;
            dot_prime = ndp;
        }
    }
    (jt, jphi)
}
