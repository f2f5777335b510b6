//! Small dense linear algebra: Lyapunov solves, symmetric eigenvalues,
//! operator-norm bounds and the observer design `(A, B, P, Q)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("matrix is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("linear system is singular; the Lyapunov equation has no unique solution")]
    Singular,
    #[error("matrix is not positive definite (smallest eigenvalue {0:e})")]
    NotPositiveDefinite(f64),
    #[error("A must be diagonal with strictly negative entries: {0}")]
    NotHurwitzDiagonal(String),
    #[error("matrix contains non-finite entries")]
    NonFinite,
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn diag(d: &[f64]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, v) in d.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Dimension("ragged rows".into()));
        }
        Self::from_row_major(r, c, rows.concat())
    }

    /// A single column.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, x.len(), "matvec shape mismatch");
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `selfᵀ y`.
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, y.len(), "matvec_t shape mismatch");
        let mut out = vec![0.0; self.cols];
        for (i, yi) in y.iter().enumerate() {
            if *yi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * yi;
            }
        }
        out
    }

    pub fn add(&self, other: &DenseMatrix) -> DenseMatrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn scale(&self, k: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| a * k).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|a| f(*a)).collect(),
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Maximum absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// Maximum absolute row sum.
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|a| a.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst: f64 = 0.0;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.asymmetry() <= tol * self.frobenius_norm().max(1.0)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn is_diagonal(&self) -> bool {
        (0..self.rows).all(|i| (0..self.cols).all(|j| i == j || self[(i, j)] == 0.0))
    }
}

impl std::ops::Index<(usize, usize)> for DenseMatrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for DenseMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Gaussian elimination with partial pivoting. Consumes the system.
pub fn solve_linear(mut m: DenseMatrix, mut b: Vec<f64>) -> Result<Vec<f64>, LinalgError> {
    let n = m.rows;
    if !m.is_square() || b.len() != n {
        return Err(LinalgError::Dimension(
            "solve_linear needs square m and matching b".into(),
        ));
    }
    let scale = m.data.iter().fold(0.0f64, |s, a| s.max(a.abs()));
    let tol = scale * f64::EPSILON * n as f64;
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&a, &b| m[(a, col)].abs().total_cmp(&m[(b, col)].abs()))
            .expect("non-empty range");
        if m[(pivot, col)].abs() <= tol {
            return Err(LinalgError::Singular);
        }
        if pivot != col {
            for j in 0..n {
                m.data.swap(pivot * n + j, col * n + j);
            }
            b.swap(pivot, col);
        }
        let p = m[(col, col)];
        for r in col + 1..n {
            let factor = m[(r, col)] / p;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                m[(r, j)] -= factor * m[(col, j)];
            }
            b[r] -= factor * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let s: f64 = (i + 1..n).map(|j| m[(i, j)] * x[j]).sum();
        x[i] = (b[i] - s) / m[(i, i)];
    }
    Ok(x)
}

/// Solve `PA + AᵀP = -Q` for `P` as an `n²` linear system.
pub fn solve_lyapunov(a: &DenseMatrix, q: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let n = a.rows;
    if !a.is_square() || q.rows != n || q.cols != n {
        return Err(LinalgError::Dimension(
            "A and Q must be square of equal size".into(),
        ));
    }
    if !q.is_symmetric(1e-12) {
        return Err(LinalgError::NotSymmetric(q.asymmetry()));
    }
    let nn = n * n;
    let mut m = DenseMatrix::zeros(nn, nn);
    // Row (i, j): Σ_k P_ik A_kj + Σ_k A_ki P_kj = -Q_ij
    for i in 0..n {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                m[(row, i * n + k)] += a[(k, j)];
                m[(row, k * n + j)] += a[(k, i)];
            }
        }
    }
    let rhs: Vec<f64> = q.data.iter().map(|v| -v).collect();
    let sol = solve_linear(m, rhs)?;
    let p = DenseMatrix::from_row_major(n, n, sol)?;
    let p = p.add(&p.transpose()).scale(0.5);
    let eig = sym_eigenvalues(&p)?;
    if eig[0] <= 0.0 {
        return Err(LinalgError::NotPositiveDefinite(eig[0]));
    }
    Ok(p)
}

/// Relative Frobenius residual `‖PA + AᵀP + Q‖_F / ‖Q‖_F`.
pub fn lyapunov_residual(a: &DenseMatrix, p: &DenseMatrix, q: &DenseMatrix) -> f64 {
    let r = p.matmul(a).add(&a.transpose().matmul(p)).add(q);
    r.frobenius_norm() / q.frobenius_norm().max(f64::MIN_POSITIVE)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns ascending eigenvalues and the matching eigenvectors as columns.
pub fn sym_eigen(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix), LinalgError> {
    if !m.is_square() {
        return Err(LinalgError::Dimension(
            "eigenvalues need a square matrix".into(),
        ));
    }
    if !m.is_symmetric(1e-10) {
        return Err(LinalgError::NotSymmetric(m.asymmetry()));
    }
    let n = m.rows;
    let mut a = m.clone();
    let mut v = DenseMatrix::identity(n);
    let target = 1e-12 * m.frobenius_norm();
    let off = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };
    for _sweep in 0..100 {
        if off(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, new)] = v[(k, old)];
        }
    }
    Ok((values, vectors))
}

pub fn sym_eigenvalues(m: &DenseMatrix) -> Result<Vec<f64>, LinalgError> {
    sym_eigen(m).map(|(values, _)| values)
}

/// `M^{-1/2}` for symmetric positive definite `M`.
pub fn inverse_sqrt(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let (w, v) = sym_eigen(m)?;
    if w[0] <= 0.0 {
        return Err(LinalgError::NotPositiveDefinite(w[0]));
    }
    let n = m.rows;
    let mut out = DenseMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out[(i, j)] = (0..n).map(|k| v[(i, k)] * v[(j, k)] / w[k].sqrt()).sum();
        }
    }
    Ok(out)
}

/// Certified upper bound on `‖M‖₂` together with a lower witness.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectralNormBound {
    pub upper: f64,
    pub witness: f64,
}

/// `upper = min(sqrt(‖M‖₁‖M‖_∞), ‖M‖_F)`, both valid bounds on the operator
/// 2-norm; `witness = ‖Mv‖` after 50 power iterations on `MᵀM` from a fixed
/// pseudo-random unit start.
pub fn spectral_norm_upper(m: &DenseMatrix) -> SpectralNormBound {
    let upper = (m.norm_1() * m.norm_inf()).sqrt().min(m.frobenius_norm());
    SpectralNormBound {
        upper,
        witness: power_iteration(m, 50).min(upper),
    }
}

fn power_iteration(m: &DenseMatrix, iters: usize) -> f64 {
    if m.cols == 0 || m.rows == 0 {
        return 0.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut v: Vec<f64> = (0..m.cols).map(|_| rng.random_range(0.5..1.5)).collect();
    let mut best = 0.0f64;
    for _ in 0..iters {
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n == 0.0 {
            break;
        }
        v.iter_mut().for_each(|a| *a /= n);
        let mv = m.matvec(&v);
        best = best.max(mv.iter().map(|a| a * a).sum::<f64>().sqrt());
        v = m.matvec_t(&mv);
    }
    best
}

/// `‖M‖₂ = sqrt(λ_max(MᵀM))` via Jacobi.
pub fn spectral_norm(m: &DenseMatrix) -> f64 {
    let g = if m.rows >= m.cols {
        m.transpose().matmul(m)
    } else {
        m.matmul(&m.transpose())
    };
    let g = g.add(&g.transpose()).scale(0.5);
    sym_eigenvalues(&g)
        .map(|w| w.last().copied().unwrap_or(0.0).max(0.0).sqrt())
        .unwrap_or(f64::NAN)
}

/// Solve `T·F - A·T = C` for `T` (`A` is `m×m`, `F` is `n×n`, `C` is `m×n`)
/// as an `mn` linear system. Solvable when `A` and `F` share no eigenvalue.
pub fn solve_sylvester(
    a: &DenseMatrix,
    f: &DenseMatrix,
    c: &DenseMatrix,
) -> Result<DenseMatrix, LinalgError> {
    let (m, n) = (a.rows, f.rows);
    if !a.is_square() || !f.is_square() || c.rows != m || c.cols != n {
        return Err(LinalgError::Dimension(
            "solve_sylvester shape mismatch".into(),
        ));
    }
    let mut sys = DenseMatrix::zeros(m * n, m * n);
    // Row (i, j): Σ_k T_ik F_kj - Σ_k A_ik T_kj = C_ij
    for i in 0..m {
        for j in 0..n {
            let row = i * n + j;
            for k in 0..n {
                sys[(row, i * n + k)] += f[(k, j)];
            }
            for k in 0..m {
                sys[(row, k * n + j)] -= a[(i, k)];
            }
        }
    }
    let sol = solve_linear(sys, c.data.clone())?;
    DenseMatrix::from_row_major(m, n, sol)
}

/// Left inverse `(MᵀM)⁻¹Mᵀ` of a full-column-rank matrix.
pub fn left_inverse(m: &DenseMatrix) -> Result<DenseMatrix, LinalgError> {
    let gram = m.transpose().matmul(m);
    let n = m.cols;
    let mut cols = Vec::with_capacity(m.rows);
    for r in 0..m.rows {
        cols.push(solve_linear(gram.clone(), m.row(r).to_vec())?);
    }
    let mut out = DenseMatrix::zeros(n, m.rows);
    for (r, col) in cols.iter().enumerate() {
        for i in 0..n {
            out[(i, r)] = col[i];
        }
    }
    Ok(out)
}

/// How the residual-amplification factor Γ(P) is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaChoice {
    /// `P = cI`, the minimiser for diagonal `A`, giving `Γ = 1/λ_min(A)²`.
    #[default]
    Optimized,
    /// Evaluate Γ for the stored `(P, Q)`.
    Raw,
}

/// Observer matrices: diagonal Hurwitz `A`, input `B` and a Lyapunov pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObserverDesign {
    pub a: DenseMatrix,
    pub b: DenseMatrix,
    pub p: DenseMatrix,
    pub q: DenseMatrix,
    pub gamma: f64,
    pub gamma_choice: GammaChoice,
}

impl ObserverDesign {
    /// `A = -diag(rates)`, `P = I`, `Q = -2A`.
    pub fn diagonal(rates: &[f64], b: DenseMatrix) -> Result<Self, LinalgError> {
        let a = DenseMatrix::diag(&rates.iter().map(|r| -r).collect::<Vec<_>>());
        let q = a.scale(-2.0);
        let p = DenseMatrix::identity(rates.len());
        Self::from_parts(a, b, p, q, GammaChoice::Optimized)
    }

    /// Solve the Lyapunov equation for the given `Q`.
    pub fn with_q(
        a: DenseMatrix,
        b: DenseMatrix,
        q: DenseMatrix,
        choice: GammaChoice,
    ) -> Result<Self, LinalgError> {
        check_hurwitz_diagonal(&a)?;
        let p = solve_lyapunov(&a, &q)?;
        Self::from_parts(a, b, p, q, choice)
    }

    fn from_parts(
        a: DenseMatrix,
        b: DenseMatrix,
        p: DenseMatrix,
        q: DenseMatrix,
        choice: GammaChoice,
    ) -> Result<Self, LinalgError> {
        check_hurwitz_diagonal(&a)?;
        if b.rows != a.rows {
            return Err(LinalgError::Dimension(format!(
                "B has {} rows but A is {}x{}",
                b.rows, a.rows, a.cols
            )));
        }
        let mut d = Self {
            a,
            b,
            p,
            q,
            gamma: 0.0,
            gamma_choice: choice,
        };
        d.gamma = gamma_factor(&d, choice)?;
        Ok(d)
    }

    pub fn state_dim(&self) -> usize {
        self.a.rows
    }

    pub fn output_dim(&self) -> usize {
        self.b.cols
    }

    /// Decay rates `λᵢ > 0` with `A = -diag(λ)`.
    pub fn rates(&self) -> Vec<f64> {
        self.a.diagonal().iter().map(|a| -a).collect()
    }

    /// `λ_min(A)`: the slowest decay rate.
    pub fn lambda_min(&self) -> f64 {
        self.rates().into_iter().fold(f64::INFINITY, f64::min)
    }

    /// The Lyapunov pair entering the bounds under a Γ choice.
    pub fn effective_pq(&self, choice: GammaChoice) -> (DenseMatrix, DenseMatrix) {
        match choice {
            GammaChoice::Optimized => {
                let n = self.state_dim();
                (DenseMatrix::identity(n), self.a.scale(-2.0))
            }
            GammaChoice::Raw => (self.p.clone(), self.q.clone()),
        }
    }
}

fn check_hurwitz_diagonal(a: &DenseMatrix) -> Result<(), LinalgError> {
    if !a.is_square() || !a.is_diagonal() {
        return Err(LinalgError::NotHurwitzDiagonal(
            "A is not square diagonal".into(),
        ));
    }
    if let Some(bad) = a.diagonal().iter().find(|v| !(**v < 0.0)) {
        return Err(LinalgError::NotHurwitzDiagonal(format!(
            "diagonal entry {bad}"
        )));
    }
    Ok(())
}

/// Spectral quantities of a Lyapunov pair used by every bound.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LyapunovConstants {
    pub p_min: f64,
    pub p_max: f64,
    pub q_min: f64,
    /// `‖Q^{-1/2}P‖₂`
    pub qp_norm: f64,
}

impl LyapunovConstants {
    pub fn new(p: &DenseMatrix, q: &DenseMatrix) -> Result<Self, LinalgError> {
        let pe = sym_eigenvalues(p)?;
        let qe = sym_eigenvalues(q)?;
        let qis = inverse_sqrt(q)?;
        Ok(Self {
            p_min: pe[0],
            p_max: *pe.last().expect("non-empty"),
            q_min: qe[0],
            qp_norm: spectral_norm(&qis.matmul(p)),
        })
    }

    /// `4 λ_max(P) / (λ_min(Q) λ_min(P))`
    pub fn amplification(&self) -> f64 {
        4.0 * self.p_max / (self.q_min * self.p_min)
    }
}

/// Γ(P) = 4 λ_max(P) / (λ_min(Q) λ_min(P)) · ‖Q^{-1/2}P‖².
pub fn gamma_factor(design: &ObserverDesign, choice: GammaChoice) -> Result<f64, LinalgError> {
    match choice {
        GammaChoice::Optimized => {
            let l = design.lambda_min();
            Ok(1.0 / (l * l))
        }
        GammaChoice::Raw => {
            let c = LyapunovConstants::new(&design.p, &design.q)?;
            Ok(c.amplification() * c.qp_norm * c.qp_norm)
        }
    }
}
