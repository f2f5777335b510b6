//! Sound worst-case bounds for the learned observer over box regions.
//!
//! Three quantities are certified: the PDE residual sup `R̄` over the state
//! region, a Lipschitz constant `L` of the inverse network over an enclosure
//! of the forward network's image, and the reconstruction error sup `E`.

mod bab;
mod bounds;
mod region;

use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use bab::{maximize, BabConfig, BabResult};
pub use bounds::{
    bound_jacobian, crown_bounds, flow_jacobian_from, ibp_forward, interval_matvec, jacobian_from,
    output_bounds, propagate, relax_tanh, tangent_from, IntervalMatrix, LinearBounds, Propagation,
    TanhRelaxation,
};
pub use region::{
    build_region, cover_polygon, energy_box, energy_level, limit_cycle, polygon_distance, Region,
    RegionError, RegionSpec,
};

use crate::certificate::{BoundConstants, CertificateError};
use crate::dynamics::System;
use crate::interval::{norm_upper, pad_up, AxisBox, Interval};
use crate::kkl::{pde_residual, LearnedObserver};
use crate::linalg::{spectral_norm, spectral_norm_upper, ObserverDesign};
use crate::net::Mlp;

/// Outcome of certifying one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityReport {
    pub upper: f64,
    pub witness_lower: f64,
    pub gap: f64,
    pub boxes_used: usize,
    pub gap_unmet: bool,
    pub wall_time: f64,
    pub config_digest: String,
}

impl QuantityReport {
    fn from_bab(r: BabResult, started: Instant, digest: &str) -> Self {
        Self {
            upper: r.upper,
            witness_lower: r.witness_lower,
            gap: r.gap(),
            boxes_used: r.boxes_used,
            gap_unmet: r.gap_unmet,
            wall_time: started.elapsed().as_secs_f64(),
            config_digest: digest.to_string(),
        }
    }
}

/// Enclosure of `R(x) = J(x)f(x) - A·T̂(x) - B·h(x)` over a box: the direct
/// interval evaluation intersected with the mean-value form
/// `R(c) + ∂R(box)·(box - c)`, which keeps cancellations between the terms.
pub fn residual_enclosure(
    observer: &LearnedObserver,
    system: &dyn System,
    b: &AxisBox,
) -> Vec<Interval> {
    let net = &observer.forward_net;
    let d = &observer.design;
    let prop = propagate(net, b);
    let iv = b.intervals();
    let f = system.drift_interval(&iv);
    let jf = tangent_from(net, &prop.pre, &f);
    let at = interval_matvec(&d.a, prop.output());
    let bh = interval_matvec(&d.b, &system.output_interval(&iv));
    let direct: Vec<Interval> = (0..jf.len()).map(|i| jf[i] - at[i] - bh[i]).collect();

    let c = b.center();
    let rc = pde_residual(observer, system, &c).expect("box matches the system");
    let (jt, jphi) = flow_jacobian_from(net, &prop.pre, &f, &system.drift_jacobian_interval(&iv));
    let jh = system.output_jacobian_interval(&iv);
    let offsets: Vec<Interval> = b.radius().iter().map(|r| Interval::new(-r, *r)).collect();
    let (nz, nx, ny) = (jt.len(), b.dim(), jh.len());
    (0..nz)
        .map(|i| {
            let mut acc = Interval::point(rc[i]);
            for j in 0..nx {
                let mut g = jphi[i][j];
                for k in 0..nz {
                    g = g - jt[k][j].scale(d.a[(i, k)]);
                }
                for k in 0..ny {
                    g = g - jh[k][j].scale(d.b[(i, k)]);
                }
                acc = acc + g * offsets[j];
            }
            direct[i].intersect(&acc)
        })
        .collect()
}

pub fn residual_box_bound(observer: &LearnedObserver, system: &dyn System, b: &AxisBox) -> f64 {
    norm_upper(&residual_enclosure(observer, system, b))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

/// Certified `sup ‖R(x)‖` over the region.
pub fn certify_residual_sup(
    observer: &LearnedObserver,
    system: &dyn System,
    region: &Region,
    cfg: &BabConfig,
    digest: &str,
) -> QuantityReport {
    let started = Instant::now();
    let r = maximize(
        &region.boxes,
        |b| residual_box_bound(observer, system, b),
        |x| norm(&pde_residual(observer, system, x).expect("region matches the system")),
        cfg,
    );
    QuantityReport::from_bab(r, started, digest)
}

/// Spectral-norm bound of the Jacobian enclosure over a box.
pub fn lipschitz_box_bound(net: &Mlp, b: &AxisBox) -> f64 {
    pad_up(spectral_norm_upper(&bound_jacobian(net, b).max_abs()).upper)
}

/// Certified bound on `sup ‖J(z)‖₂` over the z-region: a Lipschitz constant
/// on every convex subset of it.
pub fn certify_lipschitz(
    inverse_net: &Mlp,
    z_region: &Region,
    cfg: &BabConfig,
    digest: &str,
) -> QuantityReport {
    let started = Instant::now();
    let r = maximize(
        &z_region.boxes,
        |b| lipschitz_box_bound(inverse_net, b),
        |z| {
            spectral_norm(
                &inverse_net
                    .input_jacobian(z)
                    .expect("z-region matches the network"),
            )
        },
        cfg,
    );
    QuantityReport::from_bab(r, started, digest)
}

/// How the z-domain of the Lipschitz certificate is formed from the image
/// enclosure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipschitzDomain {
    /// Single hull box of all image boxes: convex, so the Jacobian bound is a
    /// Lipschitz constant between any two image points.
    #[default]
    Hull,
    /// The image boxes themselves.
    Union,
}

/// Enclosure of `T̂(region)`: for each region box, the hull of the output
/// bounds over a `per_dim`-per-axis grid of sub-boxes, inflated by `margin`.
pub fn enclose_image(forward_net: &Mlp, region: &Region, per_dim: usize, margin: f64) -> Region {
    use rayon::prelude::*;
    let boxes: Vec<AxisBox> = region
        .boxes
        .par_iter()
        .map(|b| {
            let parts = b.grid(per_dim);
            let mut hull: Option<AxisBox> = None;
            for p in &parts {
                let out = AxisBox::from_intervals(&output_bounds(forward_net, p));
                hull = Some(match hull {
                    Some(h) => h.hull(&out),
                    None => out,
                });
            }
            hull.expect("grid is non-empty").inflate(margin)
        })
        .collect();
    Region {
        boxes,
        provenance: format!(
            "image enclosure of [{}], grid {per_dim}, margin {margin}",
            region.provenance
        ),
        shell: Vec::new(),
    }
}

pub fn lipschitz_domain(image: &Region, domain: LipschitzDomain) -> Region {
    match domain {
        LipschitzDomain::Hull => Region {
            boxes: vec![image.hull()],
            provenance: format!("hull of {}", image.provenance),
            shell: Vec::new(),
        },
        LipschitzDomain::Union => image.clone(),
    }
}

/// Enclosure of `T̂*(T̂(x)) - x` over a box, from the composed network.
pub fn reconstruction_enclosure(composed: &Mlp, b: &AxisBox) -> Vec<Interval> {
    let prop = propagate(composed, b);
    let lin = prop.output_linear.clone().minus_identity().concretize(b);
    let iv = b.intervals();
    prop.output()
        .iter()
        .zip(&iv)
        .zip(&lin)
        .map(|((o, x), l)| (*o - *x).intersect(l))
        .collect()
}

/// Certified `sup ‖T̂*(T̂(x)) - x‖` over the region.
pub fn certify_reconstruction(
    observer: &LearnedObserver,
    region: &Region,
    cfg: &BabConfig,
    digest: &str,
) -> QuantityReport {
    let started = Instant::now();
    let composed = observer
        .forward_net
        .then(&observer.inverse_net)
        .expect("observer shapes are validated");
    let r = maximize(
        &region.boxes,
        |b| norm_upper(&reconstruction_enclosure(&composed, b)),
        |x| {
            let y = observer
                .inverse_net
                .forward(&observer.forward_net.forward(x).expect("dims"))
                .expect("dims");
            norm(&y.iter().zip(x).map(|(a, b)| a - b).collect::<Vec<_>>())
        },
        cfg,
    );
    QuantityReport::from_bab(r, started, digest)
}

/// All three certified quantities with the settings that produced them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    pub residual: QuantityReport,
    pub lipschitz: QuantityReport,
    pub reconstruction: QuantityReport,
    pub region_provenance: String,
    pub region_boxes: usize,
    pub z_region_boxes: usize,
    pub z_region_hull: AxisBox,
    pub z_margin: f64,
    pub image_grid: usize,
    pub lipschitz_domain: LipschitzDomain,
    pub bab: BabConfig,
    pub notes: Vec<String>,
}

/// Settings of a full certification run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CertifyConfig {
    pub bab: BabConfig,
    /// Budget for the Lipschitz search; the z-domain is usually wider.
    pub lipschitz_bab: BabConfig,
    pub image_grid: usize,
    /// Inflation of the image enclosure. `None` derives it from the certified
    /// residual: `z_margin_factor` times the ultimate bound on `‖ẑ - T̂(x)‖`,
    /// so that the Lipschitz domain contains the segment from `T̂(x)` to `ẑ`
    /// once transients have decayed.
    pub z_margin: Option<f64>,
    pub z_margin_factor: f64,
    pub lipschitz_domain: LipschitzDomain,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            bab: BabConfig::default(),
            lipschitz_bab: BabConfig::default(),
            image_grid: 4,
            z_margin: None,
            z_margin_factor: 2.0,
            lipschitz_domain: LipschitzDomain::Hull,
        }
    }
}

/// Ultimate bound on `‖ẑ - T̂(x)‖` under noise `‖v‖ ≤ noise_bound`.
pub fn ez_ultimate_noisy(
    design: &ObserverDesign,
    residual: f64,
    noise_bound: f64,
) -> Result<f64, CertificateError> {
    let k = BoundConstants::new(design, design.gamma_choice)?;
    Ok(k.amplification().sqrt() * (k.qp * residual + k.qpb * noise_bound))
}

/// Certify the residual, the inverse Lipschitz constant and the
/// reconstruction error. `noise_bound` only enters the automatic z-margin.
pub fn certify_all(
    observer: &LearnedObserver,
    system: &dyn System,
    region: &Region,
    cfg: &CertifyConfig,
    noise_bound: f64,
    digest: &str,
) -> Result<CertificationReport, CertificateError> {
    let residual = certify_residual_sup(observer, system, region, &cfg.bab, digest);
    let z_margin = match cfg.z_margin {
        Some(m) => m,
        None => {
            cfg.z_margin_factor * ez_ultimate_noisy(&observer.design, residual.upper, noise_bound)?
        }
    };
    let image = enclose_image(&observer.forward_net, region, cfg.image_grid, z_margin);
    let z_region = lipschitz_domain(&image, cfg.lipschitz_domain);
    let lipschitz = certify_lipschitz(&observer.inverse_net, &z_region, &cfg.lipschitz_bab, digest);
    let reconstruction = certify_reconstruction(observer, region, &cfg.bab, digest);
    let mut notes = vec![format!(
        "Lipschitz constant certified on an enclosure of the forward image inflated by {z_margin:.6e}; \
         observer states farther than that from the image during transients are not covered"
    )];
    for (name, q) in [
        ("residual", &residual),
        ("lipschitz", &lipschitz),
        ("reconstruction", &reconstruction),
    ] {
        if q.gap_unmet {
            notes.push(format!(
                "{name}: box budget exhausted before the target gap; upper bound remains valid"
            ));
        }
    }
    Ok(CertificationReport {
        residual,
        lipschitz,
        reconstruction,
        region_provenance: region.provenance.clone(),
        region_boxes: region.boxes.len(),
        z_region_boxes: z_region.boxes.len(),
        z_region_hull: z_region.hull(),
        z_margin,
        image_grid: cfg.image_grid,
        lipschitz_domain: cfg.lipschitz_domain,
        bab: cfg.bab,
        notes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{LinearSystem, ReverseDuffing};
    use crate::interval::sample_box;
    use crate::linalg::{DenseMatrix, ObserverDesign};

    fn design() -> ObserverDesign {
        ObserverDesign::diagonal(&[1.0, 2.0, 3.0, 4.0, 5.0], DenseMatrix::column(&[1.0; 5]))
            .unwrap()
    }

    fn linear_observer() -> (LinearSystem, LearnedObserver) {
        let f = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![-1.0, 0.0]]).unwrap();
        let h = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let obs = LearnedObserver::exact_linear(design(), &f, &h).unwrap();
        (LinearSystem { f, h }, obs)
    }

    fn region(r: f64) -> Region {
        Region::new(vec![AxisBox::symmetric(2, r)], "test").unwrap()
    }

    #[test]
    fn zero_network_residual_closed_form() {
        let obs =
            LearnedObserver::new(design(), Mlp::zeros(&[2, 8, 5]), Mlp::zeros(&[5, 8, 2])).unwrap();
        let rep = certify_residual_sup(
            &obs,
            &ReverseDuffing,
            &region(3.0),
            &BabConfig::default(),
            "",
        );
        let truth = 3.0 * 5f64.sqrt();
        assert!(
            rep.upper >= truth - 1e-12 && rep.upper <= truth + 1e-6,
            "{rep:?}"
        );
    }

    #[test]
    fn zero_inverse_reconstruction_closed_form() {
        let obs =
            LearnedObserver::new(design(), Mlp::xavier(&[2, 8, 5], 1), Mlp::zeros(&[5, 8, 2]))
                .unwrap();
        let cfg = BabConfig {
            relative_gap: 0.0,
            target_gap: 1e-7,
            max_subboxes: 20_000,
            ..BabConfig::default()
        };
        let rep = certify_reconstruction(&obs, &region(3.0), &cfg, "");
        let truth = 3.0 * 2f64.sqrt();
        assert!(
            rep.upper >= truth - 1e-12 && rep.upper <= truth + 1e-6,
            "{rep:?}"
        );
    }

    #[test]
    fn exact_linear_observer_certifies_to_zero() {
        let (sys, obs) = linear_observer();
        let r = certify_residual_sup(&obs, &sys, &region(2.0), &BabConfig::default(), "");
        let e = certify_reconstruction(&obs, &region(2.0), &BabConfig::default(), "");
        assert!(r.upper <= 1e-9, "{r:?}");
        assert!(e.upper <= 1e-9, "{e:?}");
    }

    #[test]
    fn linear_inverse_lipschitz_bracket() {
        let m = DenseMatrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![0.3, 0.7, -1.1]]).unwrap();
        let net = Mlp::linear(m.clone(), vec![0.0, 0.0]).unwrap();
        let rep = certify_lipschitz(
            &net,
            &Region::new(vec![AxisBox::symmetric(3, 1.0)], "z").unwrap(),
            &BabConfig::default(),
            "",
        );
        let s = spectral_norm(&m);
        assert!(
            rep.upper >= s - 1e-12 && rep.upper <= 2f64.sqrt() * s + 1e-12,
            "{rep:?} vs {s}"
        );
        assert!((rep.witness_lower - s).abs() < 1e-12);
        let zero = certify_lipschitz(
            &Mlp::zeros(&[3, 4, 2]),
            &Region::new(vec![AxisBox::symmetric(3, 1.0)], "z").unwrap(),
            &BabConfig::default(),
            "",
        );
        assert_eq!(zero.upper, 0.0);
    }

    #[test]
    fn image_enclosure() {
        let r = region(1.0);
        let zero = enclose_image(&Mlp::zeros(&[2, 4, 5]), &r, 4, 0.0);
        assert_eq!(zero.boxes, vec![AxisBox::point(&[0.0; 5])]);
        let id = Mlp::linear(DenseMatrix::identity(2), vec![0.0; 2]).unwrap();
        assert_eq!(enclose_image(&id, &r, 4, 0.0).boxes, r.boxes);
        let net = Mlp::xavier(&[2, 16, 16, 5], 3);
        let img = enclose_image(&net, &r, 4, 0.0);
        for x in sample_box(&r.boxes[0], 10_000, 1) {
            assert!(img.contains(&net.forward(&x).unwrap()));
        }
    }

    #[test]
    fn point_box_consistency() {
        let obs = LearnedObserver::new(
            design(),
            Mlp::xavier(&[2, 16, 16, 5], 5),
            Mlp::xavier(&[5, 16, 16, 2], 6),
        )
        .unwrap();
        let composed = obs.forward_net.then(&obs.inverse_net).unwrap();
        for x in [[0.3, -0.7], [1.2, 0.1], [-2.0, 2.0]] {
            let b = AxisBox::point(&x);
            let direct = norm(&pde_residual(&obs, &ReverseDuffing, &x).unwrap());
            assert!((residual_box_bound(&obs, &ReverseDuffing, &b) - direct).abs() <= 1e-10);
            let y = composed.forward(&x).unwrap();
            let e = norm(&[y[0] - x[0], y[1] - x[1]]);
            assert!((norm_upper(&reconstruction_enclosure(&composed, &b)) - e).abs() <= 1e-10);
            let z = obs.forward_net.forward(&x).unwrap();
            let jz = obs.inverse_net.input_jacobian(&z).unwrap().map(f64::abs);
            let l = spectral_norm_upper(&jz).upper;
            assert!(
                (lipschitz_box_bound(&obs.inverse_net, &AxisBox::point(&z)) - l).abs() <= 1e-10
            );
        }
    }

    #[test]
    fn budget_monotone_residual() {
        let obs =
            LearnedObserver::new(design(), Mlp::xavier(&[2, 8, 8, 5], 7), Mlp::zeros(&[5, 2]))
                .unwrap();
        let mut prev = f64::INFINITY;
        for budget in [1, 4, 16, 64, 256] {
            let cfg = BabConfig {
                max_subboxes: budget,
                relative_gap: 0.0,
                ..BabConfig::default()
            };
            let r = certify_residual_sup(&obs, &ReverseDuffing, &region(1.5), &cfg, "");
            assert!(r.upper <= prev);
            assert!(r.upper >= r.witness_lower);
            prev = r.upper;
        }
    }
}
