//! Best-first branch and bound over input boxes for certified maxima.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::interval::AxisBox;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BabConfig {
    /// Total number of boxes the engine may evaluate (initial boxes included).
    pub max_subboxes: usize,
    /// Stop once `upper - witness ≤ max(target_gap, relative_gap·upper)`.
    pub target_gap: f64,
    pub relative_gap: f64,
    /// Random witness samples per box, on top of its centre.
    pub samples_per_box: usize,
    /// Boxes split per round; fixed so results do not depend on thread count.
    pub batch: usize,
    pub seed: u64,
}

impl Default for BabConfig {
    fn default() -> Self {
        Self {
            max_subboxes: 4096,
            target_gap: 0.0,
            relative_gap: 0.01,
            samples_per_box: 4,
            batch: 32,
            seed: 0,
        }
    }
}

impl BabConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_subboxes == 0 {
            return Err("max_subboxes must be at least 1".into());
        }
        if !(self.target_gap >= 0.0 && self.relative_gap >= 0.0) {
            return Err("gaps must be non-negative".into());
        }
        if self.batch == 0 {
            return Err("batch must be at least 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BabResult {
    /// Certified upper bound on the maximum over all input boxes.
    pub upper: f64,
    /// Largest sampled value: a lower bound on the true maximum.
    pub witness_lower: f64,
    pub witness_point: Vec<f64>,
    pub boxes_used: usize,
    pub gap_unmet: bool,
}

impl BabResult {
    pub fn gap(&self) -> f64 {
        self.upper - self.witness_lower
    }
}

struct Node {
    upper: f64,
    seq: usize,
    b: AxisBox,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    /// Largest upper bound first; earlier boxes first among ties.
    fn cmp(&self, other: &Self) -> Ordering {
        self.upper
            .total_cmp(&other.upper)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

struct Evaluated {
    upper: f64,
    witness: f64,
    point: Vec<f64>,
}

/// Maximize a quantity over a union of boxes. `bound` returns a sound upper
/// bound over a box; `value` evaluates the quantity at a point.
pub fn maximize<B, V>(boxes: &[AxisBox], bound: B, value: V, cfg: &BabConfig) -> BabResult
where
    B: Fn(&AxisBox) -> f64 + Sync,
    V: Fn(&[f64]) -> f64 + Sync,
{
    assert!(!boxes.is_empty(), "branch and bound needs at least one box");
    let evaluate = |b: &AxisBox, seq: usize| -> Evaluated {
        let mut point = b.center();
        let mut witness = value(&point);
        if cfg.samples_per_box > 0 {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(seq as u64);
            for _ in 0..cfg.samples_per_box {
                let p = b.sample_with(&mut rng);
                let v = value(&p);
                if v > witness {
                    witness = v;
                    point = p;
                }
            }
        }
        Evaluated {
            upper: bound(b).max(witness),
            witness,
            point,
        }
    };

    let mut heap = BinaryHeap::new();
    let mut seq = 0;
    let mut witness = f64::NEG_INFINITY;
    let mut witness_point = boxes[0].center();
    let initial: Vec<Evaluated> = boxes
        .par_iter()
        .enumerate()
        .map(|(i, b)| evaluate(b, i))
        .collect();
    for (b, e) in boxes.iter().zip(initial) {
        if e.witness > witness {
            witness = e.witness;
            witness_point = e.point;
        }
        heap.push(Node {
            upper: e.upper,
            seq,
            b: b.clone(),
        });
        seq += 1;
    }
    let mut used = boxes.len();
    let target = |upper: f64| cfg.target_gap.max(cfg.relative_gap * upper.abs());
    let mut gap_unmet = false;
    loop {
        let top = heap.peek().expect("non-empty").upper;
        if top - witness <= target(top) {
            break;
        }
        let room = cfg.max_subboxes.saturating_sub(used) / 2;
        if room == 0 {
            gap_unmet = true;
            break;
        }
        let mut parents = Vec::new();
        while parents.len() < cfg.batch.min(room) {
            match heap.peek() {
                Some(n)
                    if n.upper - witness > target(n.upper)
                        && n.b.widths().iter().any(|w| *w > 0.0) =>
                {
                    parents.push(heap.pop().expect("peeked"));
                }
                _ => break,
            }
        }
        if parents.is_empty() {
            // The top box is a point and cannot be refined.
            gap_unmet = true;
            break;
        }
        let children: Vec<(usize, AxisBox, f64)> = parents
            .iter()
            .flat_map(|p| {
                let (a, b) = p.b.bisect();
                [(p.seq, a, p.upper), (p.seq, b, p.upper)]
            })
            .enumerate()
            .map(|(i, (_, b, up))| (seq + i, b, up))
            .collect();
        let evals: Vec<Evaluated> = children
            .par_iter()
            .map(|(s, b, _)| evaluate(b, *s))
            .collect();
        for ((s, b, parent_upper), e) in children.into_iter().zip(evals) {
            if e.witness > witness {
                witness = e.witness;
                witness_point = e.point;
            }
            heap.push(Node {
                upper: e.upper.min(parent_upper).max(e.witness),
                seq: s,
                b,
            });
        }
        seq += 2 * parents.len();
        used += 2 * parents.len();
    }
    BabResult {
        upper: heap.peek().expect("non-empty").upper,
        witness_lower: witness,
        witness_point,
        boxes_used: used,
        gap_unmet,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interval::Interval;

    /// Interval extension of `f(x) = x₁·sin(3x₂)`-like toy: `x₁² - x₂²`.
    fn toy_bound(b: &AxisBox) -> f64 {
        let iv = b.intervals();
        (iv[0].square() - iv[1].square()).hi
    }

    fn toy(x: &[f64]) -> f64 {
        x[0] * x[0] - x[1] * x[1]
    }

    #[test]
    fn converges_to_true_max() {
        let b = AxisBox::symmetric(2, 1.0);
        let cfg = BabConfig {
            relative_gap: 0.0,
            target_gap: 1e-6,
            max_subboxes: 100_000,
            ..BabConfig::default()
        };
        let r = maximize(&[b], toy_bound, toy, &cfg);
        assert!(r.upper >= 1.0 && r.upper <= 1.0 + 1e-6, "{r:?}");
    }

    #[test]
    fn upper_monotone_in_budget() {
        let b = AxisBox::symmetric(2, 2.0);
        let bound = |b: &AxisBox| {
            let iv = b.intervals();
            (iv[0] * iv[1] - iv[1].square() + Interval::point(0.3) * iv[0]).hi
        };
        let value = |x: &[f64]| x[0] * x[1] - x[1] * x[1] + 0.3 * x[0];
        let mut prev = f64::INFINITY;
        for budget in [1, 2, 3, 5, 8, 16, 33, 64, 100, 256, 1000] {
            let cfg = BabConfig {
                max_subboxes: budget,
                relative_gap: 0.0,
                ..BabConfig::default()
            };
            let r = maximize(&[b.clone()], bound, value, &cfg);
            assert!(r.upper <= prev, "budget {budget}: {} > {prev}", r.upper);
            assert!(r.upper >= r.witness_lower);
            prev = r.upper;
        }
    }

    #[test]
    fn budget_exhaustion_is_flagged() {
        let cfg = BabConfig {
            max_subboxes: 3,
            relative_gap: 0.0,
            ..BabConfig::default()
        };
        let r = maximize(&[AxisBox::symmetric(2, 1.0)], toy_bound, toy, &cfg);
        assert!(r.gap_unmet);
        assert!(r.boxes_used <= 3);
    }

    #[test]
    fn independent_of_thread_count() {
        let b = AxisBox::symmetric(2, 1.5);
        let cfg = BabConfig {
            max_subboxes: 500,
            relative_gap: 0.0,
            ..BabConfig::default()
        };
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| maximize(&[b.clone()], toy_bound, toy, &cfg))
        };
        assert_eq!(run(1), run(3));
    }
}
