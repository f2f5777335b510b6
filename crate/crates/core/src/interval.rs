//! Closed real intervals and axis-aligned boxes.
//!
//! Interval operations here are inclusion-isotone: shrinking an operand never
//! widens the result. Arithmetic is ordinary round-to-nearest `f64`; no outward
//! rounding is applied.

use std::ops::{Add, Mul, Neg, Sub};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A closed interval `[lo, hi]` with `lo <= hi`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn new(lo: f64, hi: f64) -> Self {
        debug_assert!(
            lo <= hi || lo.is_nan() || hi.is_nan(),
            "inverted interval [{lo}, {hi}]"
        );
        Self { lo, hi }
    }

    pub fn point(x: f64) -> Self {
        Self { lo: x, hi: x }
    }

    pub const ZERO: Interval = Interval { lo: 0.0, hi: 0.0 };

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.lo + self.hi)
    }

    pub fn radius(&self) -> f64 {
        0.5 * (self.hi - self.lo)
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lo <= x && x <= self.hi
    }

    /// Largest absolute value attained on the interval.
    pub fn mag(&self) -> f64 {
        self.lo.abs().max(self.hi.abs())
    }

    /// Smallest absolute value attained on the interval.
    pub fn mig(&self) -> f64 {
        if self.lo <= 0.0 && 0.0 <= self.hi {
            0.0
        } else {
            self.lo.abs().min(self.hi.abs())
        }
    }

    pub fn hull(&self, other: &Interval) -> Interval {
        Interval::new(self.lo.min(other.lo), self.hi.max(other.hi))
    }

    /// Intersection. Callers intersect two enclosures of the same set, so the
    /// result is non-empty up to rounding; a crossed result collapses to the
    /// midpoint of the overlap.
    pub fn intersect(&self, other: &Interval) -> Interval {
        let lo = self.lo.max(other.lo);
        let hi = self.hi.min(other.hi);
        if lo <= hi {
            Interval::new(lo, hi)
        } else {
            let m = 0.5 * (lo + hi);
            Interval::new(m, m)
        }
    }

    pub fn scale(&self, k: f64) -> Interval {
        if k >= 0.0 {
            Interval::new(k * self.lo, k * self.hi)
        } else {
            Interval::new(k * self.hi, k * self.lo)
        }
    }

    pub fn square(&self) -> Interval {
        let (a, b) = (self.lo * self.lo, self.hi * self.hi);
        if self.lo <= 0.0 && 0.0 <= self.hi {
            Interval::new(0.0, a.max(b))
        } else {
            Interval::new(a.min(b), a.max(b))
        }
    }

    /// `x³` is monotone, so endpoints map to endpoints.
    pub fn cube(&self) -> Interval {
        Interval::new(self.lo * self.lo * self.lo, self.hi * self.hi * self.hi)
    }

    pub fn tanh(&self) -> Interval {
        Interval::new(self.lo.tanh(), self.hi.tanh())
    }

    /// Exact range of `1 - tanh²` over the interval. The derivative is even and
    /// decreasing in `|x|`, so the max sits at the point closest to zero and the
    /// min at the endpoint farthest from it.
    pub fn tanh_derivative(&self) -> Interval {
        let near = self.mig();
        let far = self.mag();
        let d = |x: f64| {
            let t = x.tanh();
            1.0 - t * t
        };
        Interval::new(d(far), d(near))
    }
}

impl Add for Interval {
    type Output = Interval;
    fn add(self, rhs: Interval) -> Interval {
        Interval::new(self.lo + rhs.lo, self.hi + rhs.hi)
    }
}

impl Sub for Interval {
    type Output = Interval;
    fn sub(self, rhs: Interval) -> Interval {
        Interval::new(self.lo - rhs.hi, self.hi - rhs.lo)
    }
}

impl Neg for Interval {
    type Output = Interval;
    fn neg(self) -> Interval {
        Interval::new(-self.hi, -self.lo)
    }
}

impl Mul for Interval {
    type Output = Interval;
    fn mul(self, rhs: Interval) -> Interval {
        let p = [
            self.lo * rhs.lo,
            self.lo * rhs.hi,
            self.hi * rhs.lo,
            self.hi * rhs.hi,
        ];
        let lo = p.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Interval::new(lo, hi)
    }
}

/// Relative outward padding applied to scalar bounds the verifier reports.
/// Enclosures are computed with round-to-nearest and can miss by a few ulps;
/// this covers that with a wide margin.
pub const ROUNDING_PAD: f64 = 1e-12;

/// `v` nudged away from zero by [`ROUNDING_PAD`].
pub fn pad_up(v: f64) -> f64 {
    v + v.abs() * ROUNDING_PAD
}

/// Upper bound on the Euclidean norm of any vector drawn from a product of
/// intervals: `sqrt(Σ max(lᵢ², uᵢ²))`, padded for rounding.
pub fn norm_upper(v: &[Interval]) -> f64 {
    pad_up(v.iter().map(|i| i.mag() * i.mag()).sum::<f64>().sqrt())
}

/// An axis-aligned box `{x : lower ≤ x ≤ upper}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

/// An interval vector is stored the same way as a box.
pub type IntervalVector = AxisBox;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum BoxError {
    #[error("box bounds have different lengths ({lower} vs {upper})")]
    LengthMismatch { lower: usize, upper: usize },
    #[error("box coordinate {index} has lower {lower} > upper {upper}")]
    Inverted {
        index: usize,
        lower: f64,
        upper: f64,
    },
    #[error("box coordinate {index} is not finite")]
    NonFinite { index: usize },
}

impl AxisBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self, BoxError> {
        if lower.len() != upper.len() {
            return Err(BoxError::LengthMismatch {
                lower: lower.len(),
                upper: upper.len(),
            });
        }
        for (index, (&l, &u)) in lower.iter().zip(&upper).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(BoxError::NonFinite { index });
            }
            if l > u {
                return Err(BoxError::Inverted {
                    index,
                    lower: l,
                    upper: u,
                });
            }
        }
        Ok(Self { lower, upper })
    }

    /// The box `[-r, r]ⁿ`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        Self {
            lower: vec![-r.abs(); dim],
            upper: vec![r.abs(); dim],
        }
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn from_intervals(iv: &[Interval]) -> Self {
        Self {
            lower: iv.iter().map(|i| i.lo).collect(),
            upper: iv.iter().map(|i| i.hi).collect(),
        }
    }

    pub fn intervals(&self) -> Vec<Interval> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| Interval::new(l, u))
            .collect()
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .collect()
    }

    pub fn volume(&self) -> f64 {
        self.widths().iter().product()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }

    pub fn hull(&self, other: &AxisBox) -> AxisBox {
        AxisBox {
            lower: self
                .lower
                .iter()
                .zip(&other.lower)
                .map(|(a, b)| a.min(*b))
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a.max(*b))
                .collect(),
        }
    }

    /// Grow every side by `margin` on both ends.
    pub fn inflate(&self, margin: f64) -> AxisBox {
        AxisBox {
            lower: self.lower.iter().map(|l| l - margin).collect(),
            upper: self.upper.iter().map(|u| u + margin).collect(),
        }
    }

    pub fn widest_dim(&self) -> usize {
        let w = self.widths();
        let mut best = 0;
        for (i, wi) in w.iter().enumerate() {
            if *wi > w[best] {
                best = i;
            }
        }
        best
    }

    /// Bisect along the widest coordinate.
    pub fn bisect(&self) -> (AxisBox, AxisBox) {
        let d = self.widest_dim();
        let mid = 0.5 * (self.lower[d] + self.upper[d]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[d] = mid;
        right.lower[d] = mid;
        (left, right)
    }

    /// Split into a uniform grid with `per_dim` cells along every coordinate.
    pub fn grid(&self, per_dim: usize) -> Vec<AxisBox> {
        let per_dim = per_dim.max(1);
        let n = self.dim();
        let edge = |d: usize, i: usize| -> f64 {
            if i == 0 {
                self.lower[d]
            } else if i == per_dim {
                self.upper[d]
            } else {
                self.lower[d] + (self.upper[d] - self.lower[d]) * (i as f64 / per_dim as f64)
            }
        };
        let total = per_dim.pow(n as u32);
        let mut out = Vec::with_capacity(total);
        for flat in 0..total {
            let mut rem = flat;
            let mut lower = vec![0.0; n];
            let mut upper = vec![0.0; n];
            for d in 0..n {
                let i = rem % per_dim;
                rem /= per_dim;
                lower[d] = edge(d, i);
                upper[d] = edge(d, i + 1);
            }
            out.push(AxisBox { lower, upper });
        }
        out
    }

    /// Uniform point inside the box.
    pub fn sample_with<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(&l, &u)| if u > l { rng.random_range(l..=u) } else { l })
            .collect()
    }

    /// Corners of the box (2ⁿ of them).
    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|d| {
                        if mask & (1 << d) == 0 {
                            self.lower[d]
                        } else {
                            self.upper[d]
                        }
                    })
                    .collect()
            })
            .collect()
    }
}

/// Uniform i.i.d. samples from a box, deterministic in `seed`.
pub fn sample_box(b: &AxisBox, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| b.sample_with(&mut rng)).collect()
}
