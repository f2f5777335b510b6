//! Closed-form transient and ultimate error bounds assembled from the
//! certified quantities and the observer design.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::linalg::{
    inverse_sqrt, spectral_norm, GammaChoice, LinalgError, LyapunovConstants, ObserverDesign,
};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum CertificateError {
    #[error("certified quantities must be finite and non-negative: {0}")]
    Invalid(String),
    #[error("the noiseless bound needs v̄ = 0, got {0}; use the noisy bound")]
    Noisy(f64),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Worst-case quantities over the region plus the measurement-noise bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CertifiedQuantities {
    /// `R̄`: sup of the PDE residual norm.
    pub residual: f64,
    /// `L`: Lipschitz constant of the inverse network.
    pub lipschitz: f64,
    /// `E`: sup of the reconstruction error.
    pub reconstruction: f64,
    /// `v̄`: measurement-noise bound (0 when noiseless).
    #[serde(default)]
    pub noise_bound: f64,
    #[serde(default)]
    pub provenance: Vec<String>,
}

impl CertifiedQuantities {
    pub fn new(residual: f64, lipschitz: f64, reconstruction: f64) -> Self {
        Self {
            residual,
            lipschitz,
            reconstruction,
            noise_bound: 0.0,
            provenance: Vec::new(),
        }
    }

    pub fn with_noise(mut self, noise_bound: f64) -> Self {
        self.noise_bound = noise_bound;
        self
    }

    pub fn validate(&self) -> Result<(), CertificateError> {
        for (name, v) in [
            ("R", self.residual),
            ("L", self.lipschitz),
            ("E", self.reconstruction),
            ("v", self.noise_bound),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(CertificateError::Invalid(format!("{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Spectral constants of the Lyapunov pair entering every bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundConstants {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    /// `‖Q^{-1/2}P‖`
    pub qp: f64,
    /// `‖Q^{-1/2}PB‖`
    pub qpb: f64,
}

impl BoundConstants {
    pub fn new(design: &ObserverDesign, choice: GammaChoice) -> Result<Self, CertificateError> {
        let (p, q) = design.effective_pq(choice);
        let c = LyapunovConstants::new(&p, &q)?;
        let qpb = spectral_norm(&inverse_sqrt(&q)?.matmul(&p).matmul(&design.b));
        Ok(Self {
            p_min: c.p_min,
            p_max: c.p_max,
            q_min: c.q_min,
            qp: c.qp_norm,
            qpb,
        })
    }

    /// `4 λ_max(P) / (λ_min(Q) λ_min(P))`
    pub fn amplification(&self) -> f64 {
        4.0 * self.p_max / (self.q_min * self.p_min)
    }
}

/// `limsup ‖e_z‖ ≤ √(4λ_max(P)/(λ_min(Q)λ_min(P))) ‖Q^{-1/2}P‖ R̄`.
pub fn ez_ultimate(
    design: &ObserverDesign,
    choice: GammaChoice,
    residual: f64,
) -> Result<f64, CertificateError> {
    let k = BoundConstants::new(design, choice)?;
    Ok(k.amplification().sqrt() * k.qp * residual)
}

/// Decay rate `c = (1 - ε) λ_min(Q) / λ_max(P)` of the transient bound, `ε = ½`.
pub fn transient_rate(k: &BoundConstants) -> f64 {
    0.5 * k.q_min / k.p_max
}

/// `‖e_z(t)‖ ≤ √(V₀/λ_min(P)) e^{-ct/2} + √(1/(εcλ_min(P))) ‖Q^{-1/2}P‖ R̄`
/// with `ε = ½`.
pub fn ez_transient(
    design: &ObserverDesign,
    choice: GammaChoice,
    residual: f64,
    v0: f64,
    t: f64,
) -> Result<f64, CertificateError> {
    let k = BoundConstants::new(design, choice)?;
    let c = transient_rate(&k);
    let eps = 0.5;
    Ok((v0 / k.p_min).sqrt() * (-c * t / 2.0).exp()
        + (1.0 / (eps * c * k.p_min)).sqrt() * k.qp * residual)
}

/// Upper bound on `V(0) = e_z(0)ᵀPe_z(0)` when only `‖ẑ₀‖` and
/// `sup ‖T̂‖` over the region are known.
pub fn v0_upper(
    design: &ObserverDesign,
    choice: GammaChoice,
    z0_norm: f64,
    forward_sup: f64,
) -> Result<f64, CertificateError> {
    let k = BoundConstants::new(design, choice)?;
    Ok(k.p_max * (z0_norm + forward_sup).powi(2))
}

/// `V(0)` from a known initial error `e_z(0)`.
pub fn v0_exact(design: &ObserverDesign, choice: GammaChoice, ez0: &[f64]) -> f64 {
    let (p, _) = design.effective_pq(choice);
    let pe = p.matvec(ez0);
    ez0.iter().zip(&pe).map(|(a, b)| a * b).sum()
}

/// `limsup ‖x̂ - x‖ ≤ L √Γ R̄ + E` (noiseless).
pub fn x_ultimate(
    design: &ObserverDesign,
    q: &CertifiedQuantities,
) -> Result<f64, CertificateError> {
    q.validate()?;
    if q.noise_bound != 0.0 {
        return Err(CertificateError::Noisy(q.noise_bound));
    }
    Ok(q.lipschitz * design.gamma.sqrt() * q.residual + q.reconstruction)
}

/// Noisy ultimate bound and the optimal Young splits `(ε_R*, ε_v*)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoisyBound {
    pub bound: f64,
    pub eps_r: f64,
    pub eps_v: f64,
}

/// `L √(4λ_max(P)/(λ_min(Q)λ_min(P))) (‖Q^{-1/2}P‖R̄ + ‖Q^{-1/2}PB‖v̄) + E`.
pub fn x_ultimate_noisy(
    design: &ObserverDesign,
    choice: GammaChoice,
    q: &CertifiedQuantities,
) -> Result<NoisyBound, CertificateError> {
    q.validate()?;
    let k = BoundConstants::new(design, choice)?;
    let sa = k.qp * q.residual;
    let sb = k.qpb * q.noise_bound;
    let (eps_r, eps_v) = if sa + sb > 0.0 {
        (0.5 * sa / (sa + sb), 0.5 * sb / (sa + sb))
    } else {
        (0.25, 0.25)
    };
    Ok(NoisyBound {
        bound: q.lipschitz * k.amplification().sqrt() * (sa + sb) + q.reconstruction,
        eps_r,
        eps_v,
    })
}

/// The noisy bound before optimizing the Young parameters:
/// `L √(λ_max(P)/(λ_min(Q)λ_min(P))) √((a/ε_R + b/ε_v)/(1 - ε_R - ε_v)) + E`
/// with `a = ‖Q^{-1/2}P‖²R̄²`, `b = ‖Q^{-1/2}PB‖²v̄²`. A zero term contributes
/// nothing even at a zero parameter.
pub fn two_eps_bound(k: &BoundConstants, q: &CertifiedQuantities, eps_r: f64, eps_v: f64) -> f64 {
    let a = (k.qp * q.residual).powi(2);
    let b = (k.qpb * q.noise_bound).powi(2);
    let term = |num: f64, eps: f64| if num == 0.0 { 0.0 } else { num / eps };
    let inner = (term(a, eps_r) + term(b, eps_v)) / (1.0 - eps_r - eps_v);
    q.lipschitz * (k.p_max / (k.q_min * k.p_min)).sqrt() * inner.sqrt() + q.reconstruction
}

fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let g = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Numerical minimum of [`two_eps_bound`] over `ε_R, ε_v > 0`,
/// `ε_R + ε_v < 1`: nested golden-section search over `s = ε_R + ε_v` and the
/// split `t = ε_R / s`. Returns `(bound, ε_R, ε_v)`.
pub fn epsilon_grid_check(
    design: &ObserverDesign,
    choice: GammaChoice,
    q: &CertifiedQuantities,
) -> Result<(f64, f64, f64), CertificateError> {
    let k = BoundConstants::new(design, choice)?;
    let edge = 1e-12;
    let inner = |s: f64| {
        golden_min(
            |t| two_eps_bound(&k, q, s * t, s * (1.0 - t)),
            edge,
            1.0 - edge,
            1e-11,
        )
    };
    let (s, _) = golden_min(|s| inner(s).1, edge, 1.0 - edge, 1e-11);
    let (t, v) = inner(s);
    Ok((v, s * t, s * (1.0 - t)))
}

/// Summary of the observer design inside a certificate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSummary {
    pub rates: Vec<f64>,
    pub b: Vec<Vec<f64>>,
    pub gamma: f64,
    pub gamma_choice: GammaChoice,
    pub constants: BoundConstants,
}

/// Certified transient and ultimate estimation-error bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub design: DesignSummary,
    pub quantities: CertifiedQuantities,
    /// `limsup ‖e_z‖`, noiseless.
    pub ez_ultimate: f64,
    /// `limsup ‖x̂ - x‖` with `v̄` taken as 0.
    pub x_ultimate: f64,
    /// `limsup ‖x̂ - x‖` under noise `‖v‖ ≤ v̄`, when `v̄ > 0`.
    pub x_ultimate_noisy: Option<NoisyBound>,
    /// Transient decay rate `c` (with `ε = ½`).
    pub transient_rate: f64,
    pub transient_eps: f64,
    /// Bound on `V(0)` for the transient estimate, when one was supplied.
    pub v0: Option<f64>,
    pub notes: Vec<String>,
}

impl Certificate {
    pub fn new(
        design: &ObserverDesign,
        quantities: CertifiedQuantities,
    ) -> Result<Self, CertificateError> {
        quantities.validate()?;
        let choice = design.gamma_choice;
        let constants = BoundConstants::new(design, choice)?;
        let noiseless = CertifiedQuantities {
            noise_bound: 0.0,
            ..quantities.clone()
        };
        let x_ult = x_ultimate(design, &noiseless)?;
        let noisy = if quantities.noise_bound > 0.0 {
            Some(x_ultimate_noisy(design, choice, &quantities)?)
        } else {
            None
        };
        Ok(Self {
            design: DesignSummary {
                rates: design.rates(),
                b: design.b.to_rows(),
                gamma: design.gamma,
                gamma_choice: choice,
                constants,
            },
            ez_ultimate: ez_ultimate(design, choice, quantities.residual)?,
            x_ultimate: x_ult,
            x_ultimate_noisy: noisy,
            transient_rate: transient_rate(&constants),
            transient_eps: 0.5,
            v0: None,
            notes: Vec::new(),
            quantities,
        })
    }

    /// The bound that applies to the configured noise level.
    pub fn applicable_bound(&self) -> f64 {
        self.x_ultimate_noisy.map_or(self.x_ultimate, |n| n.bound)
    }
}

impl fmt::Display for Certificate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let q = &self.quantities;
        writeln!(f, "observer rates      {:?}", self.design.rates)?;
        writeln!(
            f,
            "Gamma ({:?})   {:.6e}",
            self.design.gamma_choice, self.design.gamma
        )?;
        writeln!(f, "R (residual sup)    {:.6e}", q.residual)?;
        writeln!(f, "L (Lipschitz)       {:.6e}", q.lipschitz)?;
        writeln!(f, "E (reconstruction)  {:.6e}", q.reconstruction)?;
        writeln!(f, "limsup |e_z|        {:.6e}", self.ez_ultimate)?;
        writeln!(f, "limsup |x_hat - x|  {:.6e}", self.x_ultimate)?;
        if let Some(n) = &self.x_ultimate_noisy {
            writeln!(
                f,
                "with |v| <= {:.4e}  {:.6e}  (eps_R = {:.4}, eps_v = {:.4})",
                q.noise_bound, n.bound, n.eps_r, n.eps_v
            )?;
        }
        writeln!(
            f,
            "transient rate c    {:.6e} (eps = {})",
            self.transient_rate, self.transient_eps
        )?;
        for n in &self.notes {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}
