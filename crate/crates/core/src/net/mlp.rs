use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::NetError;
use crate::linalg::DenseMatrix;

/// Dense feed-forward network: `tanh` on hidden layers, identity on the last.
///
/// Parameters are laid out flat, layer by layer, as the row-major weight
/// matrix followed by the bias vector. Gradients use the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    weights: Vec<DenseMatrix>,
    biases: Vec<Vec<f64>>,
}

/// Activations cached by a forward pass that also pushes a tangent direction.
#[derive(Debug, Clone)]
pub struct TangentTrace {
    /// `acts[0]` is the input, `acts[k]` the post-activation of hidden layer `k`.
    acts: Vec<Vec<f64>>,
    /// Tangents of `acts` along the input direction.
    tans: Vec<Vec<f64>>,
    /// Pre-activation tangents of the hidden layers (index `k-1` for layer `k`).
    pre_tans: Vec<Vec<f64>>,
    pub output: Vec<f64>,
    /// Directional derivative `J(x)·v`.
    pub output_tangent: Vec<f64>,
}

impl Mlp {
    pub fn from_layers(weights: Vec<DenseMatrix>, biases: Vec<Vec<f64>>) -> Result<Self, NetError> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(NetError::Shape(format!(
                "{} weight matrices and {} bias vectors",
                weights.len(),
                biases.len()
            )));
        }
        let mut dims = vec![weights[0].cols()];
        for (k, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.cols() != *dims.last().expect("non-empty") {
                return Err(NetError::Shape(format!(
                    "layer {k} expects {} inputs, previous layer gives {}",
                    w.cols(),
                    dims.last().expect("non-empty")
                )));
            }
            if b.len() != w.rows() {
                return Err(NetError::Shape(format!(
                    "layer {k} has {} rows but {} biases",
                    w.rows(),
                    b.len()
                )));
            }
            if w.as_slice().iter().chain(b).any(|v| !v.is_finite()) {
                return Err(NetError::NonFinite);
            }
            dims.push(w.rows());
        }
        Ok(Self {
            dims,
            weights,
            biases,
        })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        assert!(
            dims.len() >= 2,
            "a network needs at least input and output widths"
        );
        Self {
            dims: dims.to_vec(),
            weights: dims
                .windows(2)
                .map(|w| DenseMatrix::zeros(w[1], w[0]))
                .collect(),
            biases: dims[1..].iter().map(|d| vec![0.0; *d]).collect(),
        }
    }

    /// Xavier-uniform weights, zero biases.
    pub fn xavier(dims: &[usize], seed: u64) -> Self {
        let mut net = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in &mut net.weights {
            let limit = (6.0 / (w.rows() + w.cols()) as f64).sqrt();
            for v in w.as_mut_slice() {
                *v = rng.random_range(-limit..limit);
            }
        }
        net
    }

    /// A single affine layer `x ↦ Wx + b`.
    pub fn linear(w: DenseMatrix, b: Vec<f64>) -> Result<Self, NetError> {
        Self::from_layers(vec![w], vec![b])
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().expect("non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[DenseMatrix] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<f64>] {
        &self.biases
    }

    pub fn num_params(&self) -> usize {
        self.dims.windows(2).map(|w| w[1] * w[0] + w[1]).sum()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.num_params(), "parameter vector length");
        let mut off = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let n = w.as_slice().len();
            w.as_mut_slice().copy_from_slice(&theta[off..off + n]);
            off += n;
            let m = b.len();
            b.copy_from_slice(&theta[off..off + m]);
            off += m;
        }
    }

    /// Offsets of each layer's weights in the flat parameter vector.
    fn offsets(&self) -> Vec<usize> {
        let mut offs = Vec::with_capacity(self.weights.len());
        let mut off = 0;
        for w in &self.weights {
            offs.push(off);
            off += w.rows() * w.cols() + w.rows();
        }
        offs
    }

    fn check_input(&self, x: &[f64]) -> Result<(), NetError> {
        if x.len() != self.input_dim() {
            return Err(NetError::Dimension {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut a = x.to_vec();
        for (k, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.matvec(&a);
            z.iter_mut().zip(b).for_each(|(z, b)| *z += b);
            if k < last {
                z.iter_mut().for_each(|v| *v = v.tanh());
            }
            a = z;
        }
        Ok(a)
    }

    /// Exact Jacobian `W_L·D_{L-1}·W_{L-1}···D₁·W₁`, accumulated from the
    /// output side.
    pub fn input_jacobian(&self, x: &[f64]) -> Result<DenseMatrix, NetError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let mut acts = Vec::with_capacity(last);
        let mut a = x.to_vec();
        for k in 0..last {
            let mut z = self.weights[k].matvec(&a);
            z.iter_mut()
                .zip(&self.biases[k])
                .for_each(|(z, b)| *z = (*z + b).tanh());
            acts.push(z.clone());
            a = z;
        }
        let mut j = self.weights[last].clone();
        for k in (0..last).rev() {
            let s: Vec<f64> = acts[k].iter().map(|a| 1.0 - a * a).collect();
            for r in 0..j.rows() {
                for c in 0..j.cols() {
                    j[(r, c)] *= s[c];
                }
            }
            j = j.matmul(&self.weights[k]);
        }
        Ok(j)
    }

    /// Forward pass carrying a tangent `v` alongside the input, so that the
    /// trace holds both `net(x)` and `J(x)·v`.
    pub fn forward_tangent(&self, x: &[f64], v: &[f64]) -> Result<TangentTrace, NetError> {
        self.check_input(v)?;
        self.trace(x, Some(v))
    }

    /// Forward pass caching activations for [`Mlp::backward`], without a tangent.
    pub fn forward_trace(&self, x: &[f64]) -> Result<TangentTrace, NetError> {
        self.trace(x, None)
    }

    fn trace(&self, x: &[f64], v: Option<&[f64]>) -> Result<TangentTrace, NetError> {
        self.check_input(x)?;
        let last = self.weights.len() - 1;
        let with_tangent = v.is_some();
        let mut acts = vec![x.to_vec()];
        let mut tans = v.map(|v| vec![v.to_vec()]).unwrap_or_default();
        let mut pre_tans = Vec::with_capacity(if with_tangent { last } else { 0 });
        for k in 0..last {
            let w = &self.weights[k];
            let mut z = w.matvec(&acts[k]);
            z.iter_mut().zip(&self.biases[k]).for_each(|(z, b)| *z += b);
            let a: Vec<f64> = z.iter().map(|v| v.tanh()).collect();
            if with_tangent {
                let zt = w.matvec(&tans[k]);
                let at: Vec<f64> = a.iter().zip(&zt).map(|(a, t)| (1.0 - a * a) * t).collect();
                tans.push(at);
                pre_tans.push(zt);
            }
            acts.push(a);
        }
        let w = &self.weights[last];
        let mut output = w.matvec(&acts[last]);
        output
            .iter_mut()
            .zip(&self.biases[last])
            .for_each(|(z, b)| *z += b);
        let output_tangent = if with_tangent {
            w.matvec(&tans[last])
        } else {
            Vec::new()
        };
        Ok(TangentTrace {
            acts,
            tans,
            pre_tans,
            output,
            output_tangent,
        })
    }

    /// Accumulate into `grad` the parameter gradient of a scalar whose
    /// sensitivities to the output and to the output tangent are `out_adj`
    /// and `tan_adj`. The tangent direction at the input is treated as a
    /// constant.
    pub fn backward(
        &self,
        trace: &TangentTrace,
        out_adj: &[f64],
        tan_adj: Option<&[f64]>,
        grad: &mut [f64],
    ) {
        debug_assert_eq!(grad.len(), self.num_params());
        let offs = self.offsets();
        let last = self.weights.len() - 1;
        let mut zbar = out_adj.to_vec();
        let mut ztbar: Option<Vec<f64>> = tan_adj.map(<[f64]>::to_vec);
        for k in (0..=last).rev() {
            let w = &self.weights[k];
            let (rows, cols) = (w.rows(), w.cols());
            let off = offs[k];
            let input = &trace.acts[k];
            let input_tan = trace.tans.get(k);
            {
                let (gw, gb) = grad[off..off + rows * cols + rows].split_at_mut(rows * cols);
                for r in 0..rows {
                    let zr = zbar[r];
                    let tr = ztbar.as_ref().map_or(0.0, |t| t[r]);
                    let row = &mut gw[r * cols..(r + 1) * cols];
                    match input_tan {
                        Some(it) if tr != 0.0 => {
                            for c in 0..cols {
                                row[c] += zr * input[c] + tr * it[c];
                            }
                        }
                        _ if zr != 0.0 => {
                            for c in 0..cols {
                                row[c] += zr * input[c];
                            }
                        }
                        _ => {}
                    }
                    gb[r] += zr;
                }
            }
            if k == 0 {
                break;
            }
            // Adjoints of this layer's inputs, the activations of layer k.
            let abar = w.matvec_t(&zbar);
            let atbar = ztbar.as_ref().map(|t| w.matvec_t(t));
            let a = &trace.acts[k];
            let zt = trace.pre_tans.get(k - 1);
            let mut new_zbar = vec![0.0; a.len()];
            let mut new_ztbar = atbar.as_ref().map(|_| vec![0.0; a.len()]);
            for i in 0..a.len() {
                let s = 1.0 - a[i] * a[i];
                let mut ab = abar[i];
                if let (Some(atb), Some(nzt), Some(zt)) = (&atbar, &mut new_ztbar, zt) {
                    // ȧ = s·ż, s = 1 - a²
                    nzt[i] = s * atb[i];
                    ab += zt[i] * atb[i] * (-2.0 * a[i]);
                }
                new_zbar[i] = s * ab;
            }
            zbar = new_zbar;
            ztbar = new_ztbar;
        }
    }

    /// `other ∘ self` as a single network: the affine output layer of `self`
    /// folds into the first layer of `other`.
    pub fn then(&self, other: &Mlp) -> Result<Mlp, NetError> {
        if self.output_dim() != other.input_dim() {
            return Err(NetError::Dimension {
                expected: other.input_dim(),
                got: self.output_dim(),
            });
        }
        let last = self.weights.len() - 1;
        let mut weights: Vec<DenseMatrix> = self.weights[..last].to_vec();
        let mut biases: Vec<Vec<f64>> = self.biases[..last].to_vec();
        let merged_w = other.weights[0].matmul(&self.weights[last]);
        let mut merged_b = other.weights[0].matvec(&self.biases[last]);
        merged_b
            .iter_mut()
            .zip(&other.biases[0])
            .for_each(|(a, b)| *a += b);
        weights.push(merged_w);
        biases.push(merged_b);
        weights.extend(other.weights[1..].iter().cloned());
        biases.extend(other.biases[1..].iter().cloned());
        Mlp::from_layers(weights, biases)
    }

    pub fn to_file(&self, seed: u64, config_digest: &str) -> MlpFile {
        MlpFile {
            layer_dims: self.dims.clone(),
            activation: "tanh".into(),
            weights: self.weights.iter().map(DenseMatrix::to_rows).collect(),
            biases: self.biases.clone(),
            seed,
            config_digest: config_digest.to_string(),
        }
    }
}

/// JSON model document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpFile {
    pub layer_dims: Vec<usize>,
    pub activation: String,
    pub weights: Vec<Vec<Vec<f64>>>,
    pub biases: Vec<Vec<f64>>,
    pub seed: u64,
    pub config_digest: String,
}

impl MlpFile {
    pub fn into_mlp(self) -> Result<Mlp, NetError> {
        if self.activation != "tanh" {
            return Err(NetError::Shape(format!(
                "unsupported activation {:?}",
                self.activation
            )));
        }
        let weights = self
            .weights
            .iter()
            .map(|rows| DenseMatrix::from_rows(rows).map_err(|e| NetError::Shape(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        let net = Mlp::from_layers(weights, self.biases)?;
        if net.layer_dims() != self.layer_dims.as_slice() {
            return Err(NetError::Shape(format!(
                "declared layer_dims {:?} but weights imply {:?}",
                self.layer_dims,
                net.layer_dims()
            )));
        }
        Ok(net)
    }
}
