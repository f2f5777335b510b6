//! Box regions over which network quantities are certified.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ReverseDuffing, Rk4, System, VanDerPol};
use crate::interval::AxisBox;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RegionError {
    #[error("region is empty")]
    Empty,
    #[error("invalid region specification: {0}")]
    Invalid(String),
}

/// A finite union of boxes. `shell` lists the boxes touching the region's
/// boundary; samplers may over-weight them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub boxes: Vec<AxisBox>,
    pub provenance: String,
    #[serde(default)]
    pub shell: Vec<usize>,
}

/// How to construct a region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegionSpec {
    /// Bounding box of the reverse-Duffing energy sublevel set reached from
    /// the initial box (forward invariant, since energy is conserved).
    EnergyBox { initial: AxisBox },
    /// Grid cover, restricted to `bounds`, of the Van der Pol limit cycle's
    /// filled interior dilated by `margin`.
    LimitCycleCover {
        mu: f64,
        margin: f64,
        cell: f64,
        bounds: AxisBox,
    },
    /// Explicit boxes.
    Boxes { boxes: Vec<AxisBox> },
}

impl Region {
    pub fn new(boxes: Vec<AxisBox>, provenance: impl Into<String>) -> Result<Self, RegionError> {
        if boxes.is_empty() {
            return Err(RegionError::Empty);
        }
        let d = boxes[0].dim();
        if boxes.iter().any(|b| b.dim() != d) {
            return Err(RegionError::Invalid("boxes of mixed dimension".into()));
        }
        Ok(Self {
            boxes,
            provenance: provenance.into(),
            shell: Vec::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.boxes[0].dim()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.boxes.iter().any(|b| b.contains(x))
    }

    pub fn hull(&self) -> AxisBox {
        self.boxes[1..]
            .iter()
            .fold(self.boxes[0].clone(), |h, b| h.hull(b))
    }

    pub fn volume(&self) -> f64 {
        self.boxes.iter().map(AxisBox::volume).sum()
    }

    /// `count` points, volume-weighted over the boxes; a `shell_fraction` of
    /// them comes from the shell boxes when there are any.
    pub fn sample(&self, count: usize, seed: u64, shell_fraction: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let all: Vec<usize> = (0..self.boxes.len()).collect();
        let n_shell = if self.shell.is_empty() {
            0
        } else {
            (count as f64 * shell_fraction.clamp(0.0, 1.0)).round() as usize
        };
        let mut out = self.sample_from(&self.shell, n_shell, &mut rng);
        out.extend(self.sample_from(&all, count - n_shell, &mut rng));
        out
    }

    fn sample_from(&self, idx: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        if count == 0 || idx.is_empty() {
            return Vec::new();
        }
        let vols: Vec<f64> = idx.iter().map(|&i| self.boxes[i].volume()).collect();
        let total: f64 = vols.iter().sum();
        let mut cum = Vec::with_capacity(vols.len());
        let mut acc = 0.0;
        for v in &vols {
            acc += if total > 0.0 {
                v / total
            } else {
                1.0 / vols.len() as f64
            };
            cum.push(acc);
        }
        (0..count)
            .map(|_| {
                let u: f64 = rng.random::<f64>() * acc;
                let k = cum.partition_point(|c| *c <= u).min(idx.len() - 1);
                self.boxes[idx[k]].sample_with(rng)
            })
            .collect()
    }
}

/// `sup E` over a box, attained at a corner since `E` grows with each `|xᵢ|`.
pub fn energy_level(initial: &AxisBox) -> f64 {
    initial
        .corners()
        .iter()
        .map(|c| ReverseDuffing::energy(c))
        .fold(0.0, f64::max)
}

/// `[-√(2c), √(2c)] × [-(4c)^¼, (4c)^¼]`, the bounding box of `{E ≤ c}`.
pub fn energy_box(c: f64) -> AxisBox {
    let a = (2.0 * c).sqrt();
    let b = (4.0 * c).powf(0.25);
    AxisBox::new(vec![-a, -b], vec![a, b]).expect("c ≥ 0")
}

/// One period of the Van der Pol limit cycle, sampled every `dt`.
pub fn limit_cycle(mu: f64, dt: f64) -> Vec<Vec<f64>> {
    let sys = VanDerPol { mu };
    let rk = Rk4::new(dt);
    let settle = rk
        .forward(&sys, &[2.0, 0.0], (40.0 / dt) as usize)
        .expect("stable cycle");
    let start = settle.last().to_vec();
    // Walk until the trajectory next crosses x₂ = start's x₂ upward with x₁ > 0
    // after leaving the neighbourhood; a generous fixed span suffices.
    let span = rk
        .forward(&sys, &start, (20.0 / dt) as usize)
        .expect("stable cycle");
    let mut pts = vec![start.clone()];
    let mut left = false;
    for w in span.states.windows(2) {
        let d = ((w[1][0] - start[0]).powi(2) + (w[1][1] - start[1]).powi(2)).sqrt();
        if d > 0.5 {
            left = true;
        }
        pts.push(w[1].clone());
        if left && d < 2.0 * dt * 10.0 {
            break;
        }
    }
    pts
}

fn seg_dist(p: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

/// Distance from `p` to the filled closed polygon (0 inside).
pub fn polygon_distance(poly: &[Vec<f64>], p: &[f64]) -> f64 {
    let n = poly.len();
    let mut inside = false;
    let mut best = f64::INFINITY;
    for i in 0..n {
        let a = &poly[i];
        let b = &poly[(i + 1) % n];
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = a[0] + (p[1] - a[1]) / (b[1] - a[1]) * (b[0] - a[0]);
            if p[0] < x {
                inside = !inside;
            }
        }
        best = best.min(seg_dist(p, a, b));
    }
    if inside {
        0.0
    } else {
        best
    }
}

/// Grid cells of `bounds` meeting `{d ≤ margin}`; cells near its boundary are
/// quartered. Cells are kept when their centre is within `margin` plus the
/// half-diagonal, so every point of the dilated set inside `bounds` is covered.
pub fn cover_polygon(poly: &[Vec<f64>], margin: f64, cell: f64, bounds: &AxisBox) -> Region {
    let w = bounds.widths();
    let nx = (w[0] / cell).ceil().max(1.0) as usize;
    let ny = (w[1] / cell).ceil().max(1.0) as usize;
    let (hx, hy) = (w[0] / nx as f64, w[1] / ny as f64);
    let mut boxes = Vec::new();
    let mut shell = Vec::new();
    for i in 0..nx {
        for j in 0..ny {
            let lo = [
                bounds.lower[0] + i as f64 * hx,
                bounds.lower[1] + j as f64 * hy,
            ];
            let hi = [
                if i + 1 == nx {
                    bounds.upper[0]
                } else {
                    lo[0] + hx
                },
                if j + 1 == ny {
                    bounds.upper[1]
                } else {
                    lo[1] + hy
                },
            ];
            let b = AxisBox::new(lo.to_vec(), hi.to_vec()).expect("ordered");
            let half_diag = 0.5 * (b.widths()[0].hypot(b.widths()[1]));
            let d = polygon_distance(poly, &b.center());
            if d > margin + half_diag {
                continue;
            }
            if d < margin - half_diag {
                boxes.push(b);
                continue;
            }
            for q in b.grid(2) {
                let hd = 0.5 * (q.widths()[0].hypot(q.widths()[1]));
                if polygon_distance(poly, &q.center()) <= margin + hd {
                    shell.push(boxes.len());
                    boxes.push(q);
                }
            }
        }
    }
    Region {
        boxes,
        provenance: String::new(),
        shell,
    }
}

pub fn build_region(system: &dyn System, spec: &RegionSpec) -> Result<Region, RegionError> {
    let region = match spec {
        RegionSpec::EnergyBox { initial } => {
            if system.name() != "reverse_duffing" {
                return Err(RegionError::Invalid(format!(
                    "energy box needs the reverse Duffing system, got {}",
                    system.name()
                )));
            }
            let c = energy_level(initial);
            let mut r = Region::new(
                vec![energy_box(c)],
                format!("energy sublevel box, c = {c:.17e}"),
            )?;
            r.shell.clear();
            r
        }
        RegionSpec::LimitCycleCover {
            mu,
            margin,
            cell,
            bounds,
        } => {
            if !(*margin >= 0.0 && *cell > 0.0) || bounds.dim() != 2 {
                return Err(RegionError::Invalid(
                    "margin ≥ 0, cell > 0 and 2-D bounds required".into(),
                ));
            }
            let poly = limit_cycle(*mu, 1e-3);
            let mut r = cover_polygon(&poly, *margin, *cell, bounds);
            if r.boxes.is_empty() {
                return Err(RegionError::Empty);
            }
            r.provenance =
                format!("limit-cycle cover: mu = {mu}, margin = {margin}, cell = {cell}");
            r
        }
        RegionSpec::Boxes { boxes } => Region::new(boxes.clone(), "explicit boxes")?,
    };
    if region.dim() != system.state_dim() {
        return Err(RegionError::Invalid(
            "region dimension differs from the system's".into(),
        ));
    }
    Ok(region)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duffing_energy_box() {
        let spec = RegionSpec::EnergyBox {
            initial: AxisBox::symmetric(2, 1.0),
        };
        let r = build_region(&ReverseDuffing, &spec).unwrap();
        assert_eq!(r.boxes.len(), 1);
        let b = &r.boxes[0];
        assert!((b.upper[0] - 1.5f64.sqrt()).abs() < 1e-15);
        assert!((b.upper[1] - 3f64.powf(0.25)).abs() < 1e-15);
        assert!((energy_level(&AxisBox::symmetric(2, 1.0)) - 0.75).abs() < 1e-15);
    }

    #[test]
    fn degenerate_energy_box() {
        let r = build_region(
            &ReverseDuffing,
            &RegionSpec::EnergyBox {
                initial: AxisBox::point(&[0.0, 0.0]),
            },
        )
        .unwrap();
        assert_eq!(r.boxes[0], AxisBox::point(&[0.0, 0.0]));
    }

    #[test]
    fn limit_cycle_is_covered() {
        let bounds = AxisBox::new(vec![-2.1, -2.7], vec![2.1, 2.7]).unwrap();
        let spec = RegionSpec::LimitCycleCover {
            mu: 1.0,
            margin: 0.3,
            cell: 0.2,
            bounds: bounds.clone(),
        };
        let r = build_region(&VanDerPol { mu: 1.0 }, &spec).unwrap();
        let cycle = limit_cycle(1.0, 1e-3);
        for p in &cycle {
            if bounds.contains(p) {
                assert!(r.contains(p), "{p:?} uncovered");
            }
        }
        assert!(!r.shell.is_empty());
        assert!(r.contains(&[0.0, 0.0]), "filled interior");
    }

    #[test]
    fn sampling_stays_in_region() {
        let bounds = AxisBox::new(vec![-2.1, -2.7], vec![2.1, 2.7]).unwrap();
        let spec = RegionSpec::LimitCycleCover {
            mu: 1.0,
            margin: 0.3,
            cell: 0.2,
            bounds,
        };
        let r = build_region(&VanDerPol { mu: 1.0 }, &spec).unwrap();
        let pts = r.sample(2000, 3, 0.5);
        assert_eq!(pts.len(), 2000);
        assert!(pts.iter().all(|p| r.contains(p)));
        assert_eq!(pts, r.sample(2000, 3, 0.5));
    }
}
