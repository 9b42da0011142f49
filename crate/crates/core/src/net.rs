//! Small feedforward embedding network with an explicit forward pass,
//! ℓ2-normalization onto the unit sphere, and exact parameter Jacobians.
//!
//! Parameter layout is layer-major: for each linear layer the weight matrix
//! `[d_out × d_in]` is stored row-major, followed by its bias `[d_out]`.

use std::ops::Range;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pre-normalization norms at or below this value are rejected.
pub const EPS_NORM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Relu => a.max(0.0),
            Activation::Tanh => a.tanh(),
        }
    }

    /// Derivative; relu'(0) is taken as 0.
    fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if a > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
        }
    }
}

/// Whether the ℓ2 layer is linearized together with the network
/// (`Euclidean`) or kept inside the loss (`Arccos`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Euclidean,
    Arccos,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetSpec {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    #[serde(default = "default_true")]
    pub normalize_output: bool,
}

fn default_true() -> bool {
    true
}

impl NetSpec {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = NetSpec {
            layer_dims,
            activation,
            normalize_output: true,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_dims.len() < 2 {
            return Err(Error::Argument(
                "a network needs at least one linear layer".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(Error::Argument("layer dimensions must be positive".into()));
        }
        if self.embedding_dim() < 2 {
            return Err(Error::Argument("embedding dimension must be at least 2".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn embedding_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated")
    }

    pub fn n_layers(&self) -> usize {
        self.layer_dims.len() - 1
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    /// Parameter index range covering layer `l` (weights then bias).
    pub fn layer_range(&self, l: usize) -> Range<usize> {
        let start: usize = self.layer_dims[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (d_in, d_out) = (self.layer_dims[l], self.layer_dims[l + 1]);
        start..start + d_in * d_out + d_out
    }

    pub fn last_layer_range(&self) -> Range<usize> {
        self.layer_range(self.n_layers() - 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(pub Vec<f64>);

impl ParamVector {
    pub fn zeros(spec: &NetSpec) -> Self {
        ParamVector(vec![0.0; spec.n_params()])
    }

    /// Uniform fan-in initialization, `U(-1/√d_in, 1/√d_in)` for weights
    /// and biases alike.
    pub fn init<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Self {
        let mut values = Vec::with_capacity(spec.n_params());
        for w in spec.layer_dims.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                values.push(rng.random_range(-bound..bound));
            }
        }
        ParamVector(values)
    }

    pub fn check(&self, spec: &NetSpec) -> Result<()> {
        if self.0.len() != spec.n_params() {
            return Err(Error::Dimension {
                what: "parameter vector",
                expected: spec.n_params(),
                got: self.0.len(),
            });
        }
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("parameter vector has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Which parameters a Jacobian, gradient or posterior refers to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ActiveSubset {
    #[default]
    LastLayer,
    All,
    Range { start: usize, end: usize },
}

impl ActiveSubset {
    pub fn resolve(&self, spec: &NetSpec) -> Result<Range<usize>> {
        let r = match self {
            ActiveSubset::LastLayer => spec.last_layer_range(),
            ActiveSubset::All => 0..spec.n_params(),
            ActiveSubset::Range { start, end } => *start..*end,
        };
        if r.start >= r.end || r.end > spec.n_params() {
            return Err(Error::Argument(format!(
                "active subset {r:?} is invalid for {} parameters",
                spec.n_params()
            )));
        }
        Ok(r)
    }
}

#[derive(Debug, Clone)]
pub struct JacobianBlock {
    /// `[embedding_dim × active.len()]`
    pub matrix: DMatrix<f64>,
    pub split: Split,
    pub active: Range<usize>,
}

/// Pre-activations of every layer from one forward pass.
struct Trace {
    /// `inputs[l]` is the input to linear layer `l` (the raw `x` for l = 0).
    inputs: Vec<Vec<f64>>,
    /// Pre-activation outputs of every linear layer; the last one is `u`.
    pre: Vec<Vec<f64>>,
}

fn trace(spec: &NetSpec, params: &ParamVector, x: &[f64]) -> Result<Trace> {
    if x.len() != spec.input_dim() {
        return Err(Error::Dimension {
            what: "network input",
            expected: spec.input_dim(),
            got: x.len(),
        });
    }
    if params.len() != spec.n_params() {
        return Err(Error::Dimension {
            what: "parameter vector",
            expected: spec.n_params(),
            got: params.len(),
        });
    }
    let p = params.as_slice();
    let n_layers = spec.n_layers();
    let mut inputs = Vec::with_capacity(n_layers);
    let mut pre = Vec::with_capacity(n_layers);
    let mut h = x.to_vec();
    for l in 0..n_layers {
        let (d_in, d_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
        let start = spec.layer_range(l).start;
        let w = &p[start..start + d_in * d_out];
        let b = &p[start + d_in * d_out..start + d_in * d_out + d_out];
        let a: Vec<f64> = (0..d_out)
            .map(|r| {
                let row = &w[r * d_in..(r + 1) * d_in];
                b[r] + row.iter().zip(&h).map(|(wi, hi)| wi * hi).sum::<f64>()
            })
            .collect();
        let next = if l + 1 < n_layers {
            a.iter().map(|&v| spec.activation.apply(v)).collect()
        } else {
            Vec::new()
        };
        inputs.push(std::mem::replace(&mut h, next));
        pre.push(a);
    }
    Ok(Trace { inputs, pre })
}

/// Pre-normalization embedding `u`.
pub fn forward(spec: &NetSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let mut t = trace(spec, params, x)?;
    Ok(t.pre.pop().expect("at least one layer"))
}

/// Forward pass followed by the ℓ2 layer (when the spec has one).
pub fn embed(spec: &NetSpec, params: &ParamVector, x: &[f64]) -> Result<Vec<f64>> {
    let u = forward(spec, params, x)?;
    if spec.normalize_output {
        normalize(&u)
    } else {
        Ok(u)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn normalize(u: &[f64]) -> Result<Vec<f64>> {
    let n = norm(u);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    Ok(u.iter().map(|a| a / n).collect())
}

/// Derivative of `u ↦ u/‖u‖`, i.e. `(I − ûûᵀ)/‖u‖`.
pub fn normalize_jacobian(u: &[f64]) -> Result<DMatrix<f64>> {
    let n = norm(u);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateEmbedding { norm: n });
    }
    let d = u.len();
    Ok(DMatrix::from_fn(d, d, |r, c| {
        let id = if r == c { 1.0 } else { 0.0 };
        (id - u[r] * u[c] / (n * n)) / n
    }))
}

/// Jacobian of `u` with respect to the parameters in `active`.
fn output_jacobian(
    spec: &NetSpec,
    params: &ParamVector,
    t: &Trace,
    active: &Range<usize>,
) -> DMatrix<f64> {
    let p = params.as_slice();
    let d = spec.embedding_dim();
    let n_layers = spec.n_layers();
    let mut jac = DMatrix::zeros(d, active.len());

    for out in 0..d {
        // delta holds ∂u_out/∂a_l for the current layer's pre-activation.
        let mut delta = vec![0.0; d];
        delta[out] = 1.0;
        for l in (0..n_layers).rev() {
            let range = spec.layer_range(l);
            if range.end <= active.start {
                break;
            }
            let (d_in, d_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            let input = &t.inputs[l];
            if range.start < active.end {
                for r in 0..d_out {
                    if delta[r] == 0.0 {
                        continue;
                    }
                    for c in 0..d_in {
                        let idx = range.start + r * d_in + c;
                        if active.contains(&idx) {
                            jac[(out, idx - active.start)] = delta[r] * input[c];
                        }
                    }
                    let idx = range.start + d_in * d_out + r;
                    if active.contains(&idx) {
                        jac[(out, idx - active.start)] = delta[r];
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = &p[range.start..range.start + d_in * d_out];
            let prev_pre = &t.pre[l - 1];
            delta = (0..d_in)
                .map(|c| {
                    let back: f64 = (0..d_out).map(|r| w[r * d_in + c] * delta[r]).sum();
                    back * spec.activation.derivative(prev_pre[c])
                })
                .collect();
        }
    }
    jac
}

/// Exact Jacobian of the network output with respect to `active`.
///
/// The Euclidean split differentiates the normalized output `z`; the Arccos
/// split differentiates the pre-normalization output `u`.
pub fn jacobian(
    spec: &NetSpec,
    params: &ParamVector,
    x: &[f64],
    split: Split,
    active: &ActiveSubset,
) -> Result<JacobianBlock> {
    let active = active.resolve(spec)?;
    let t = trace(spec, params, x)?;
    let du = output_jacobian(spec, params, &t, &active);
    let matrix = match split {
        Split::Arccos => du,
        Split::Euclidean => normalize_jacobian(t.pre.last().expect("layer"))? * du,
    };
    Ok(JacobianBlock {
        matrix,
        split,
        active,
    })
}

/// Pre-normalization output and its parameter Jacobian in one pass.
pub(crate) fn forward_with_jacobian(
    spec: &NetSpec,
    params: &ParamVector,
    x: &[f64],
    active: &Range<usize>,
) -> Result<(Vec<f64>, DMatrix<f64>)> {
    let t = trace(spec, params, x)?;
    let du = output_jacobian(spec, params, &t, active);
    Ok((t.pre.last().expect("layer").clone(), du))
}

/// Central-difference Jacobian; a test oracle for [`jacobian`].
pub fn finite_diff_jacobian(
    spec: &NetSpec,
    params: &ParamVector,
    x: &[f64],
    split: Split,
    active: &ActiveSubset,
    step: f64,
) -> Result<DMatrix<f64>> {
    let active = active.resolve(spec)?;
    let eval = |p: &ParamVector| -> Result<Vec<f64>> {
        let u = forward(spec, p, x)?;
        match split {
            Split::Arccos => Ok(u),
            Split::Euclidean => normalize(&u),
        }
    };
    let d = spec.embedding_dim();
    let mut jac = DMatrix::zeros(d, active.len());
    let mut work = params.clone();
    for (col, idx) in active.clone().enumerate() {
        let orig = work.0[idx];
        work.0[idx] = orig + step;
        let plus = eval(&work)?;
        work.0[idx] = orig - step;
        let minus = eval(&work)?;
        work.0[idx] = orig;
        for r in 0..d {
            jac[(r, col)] = (plus[r] - minus[r]) / (2.0 * step);
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_net() -> (NetSpec, ParamVector) {
        let spec = NetSpec::new(vec![2, 2], Activation::Relu).unwrap();
        (spec, ParamVector(vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]))
    }

    /// Matrix-by-matrix re-evaluation, independent of `trace`.
    fn brute_forward(spec: &NetSpec, params: &ParamVector, x: &[f64]) -> Vec<f64> {
        let mut h = nalgebra::DVector::from_column_slice(x);
        for l in 0..spec.n_layers() {
            let (d_in, d_out) = (spec.layer_dims[l], spec.layer_dims[l + 1]);
            let r = spec.layer_range(l);
            let w = DMatrix::from_row_slice(d_out, d_in, &params.0[r.start..r.start + d_in * d_out]);
            let b = nalgebra::DVector::from_column_slice(&params.0[r.start + d_in * d_out..r.end]);
            let a = w * h + b;
            h = if l + 1 < spec.n_layers() {
                a.map(|v| v.max(0.0))
            } else {
                a
            };
        }
        h.as_slice().to_vec()
    }

    #[test]
    fn param_count() {
        let spec = NetSpec::new(vec![4, 8, 3], Activation::Tanh).unwrap();
        assert_eq!(spec.n_params(), 4 * 8 + 8 + 8 * 3 + 3);
        assert_eq!(spec.last_layer_range(), 40..67);
        assert!(NetSpec::new(vec![4], Activation::Relu).is_err());
        assert!(NetSpec::new(vec![4, 1], Activation::Relu).is_err());
    }

    #[test]
    fn identity_layer_forward() {
        let (spec, p) = identity_net();
        assert_eq!(forward(&spec, &p, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn zero_weights_return_bias() {
        let spec = NetSpec::new(vec![3, 2], Activation::Relu).unwrap();
        let mut p = ParamVector::zeros(&spec);
        p.0[6] = 0.3;
        p.0[7] = -1.5;
        assert_eq!(forward(&spec, &p, &[5.0, -2.0, 7.0]).unwrap(), vec![0.3, -1.5]);
    }

    #[test]
    fn forward_matches_matrix_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let spec = NetSpec::new(vec![3, 5, 4], Activation::Relu).unwrap();
        for _ in 0..20 {
            let p = ParamVector::init(&spec, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            let a = forward(&spec, &p, &x).unwrap();
            let b = brute_forward(&spec, &p, &x);
            for (ai, bi) in a.iter().zip(&b) {
                assert!((ai - bi).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn forward_rejects_bad_dims() {
        let (spec, p) = identity_net();
        assert!(matches!(
            forward(&spec, &p, &[1.0]),
            Err(Error::Dimension { .. })
        ));
        let short = ParamVector(vec![0.0; 3]);
        assert!(forward(&spec, &short, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let z = normalize(&[0.6, 0.8]).unwrap();
        assert!((z[0] - 0.6).abs() < 1e-15 && (z[1] - 0.8).abs() < 1e-15);
        assert!(matches!(
            normalize(&[0.0, 0.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
    }

    #[test]
    fn normalize_jacobian_axis_and_projection() {
        let j = normalize_jacobian(&[1.0, 0.0]).unwrap();
        assert_eq!(j, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]));

        let u = [0.3, -1.2, 2.0];
        let j = normalize_jacobian(&u).unwrap();
        let ju = &j * nalgebra::DVector::from_column_slice(&u);
        assert!(ju.norm() < 1e-15);
        assert!((&j - j.transpose()).norm() < 1e-15);
    }

    #[test]
    fn normalize_jacobian_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let j = normalize_jacobian(&u).unwrap();
            let h = 1e-6;
            for c in 0..4 {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[c] += h;
                dn[c] -= h;
                let (zp, zm) = (normalize(&up).unwrap(), normalize(&dn).unwrap());
                for r in 0..4 {
                    let fd = (zp[r] - zm[r]) / (2.0 * h);
                    assert!((fd - j[(r, c)]).abs() <= 1e-6 * fd.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn last_layer_arccos_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = NetSpec::new(vec![2, 3, 2], Activation::Tanh).unwrap();
        let p = ParamVector::init(&spec, &mut rng);
        let x = [0.4, -0.7];
        let t = trace(&spec, &p, &x).unwrap();
        let h = &t.inputs[1];
        let jb = jacobian(&spec, &p, &x, Split::Arccos, &ActiveSubset::LastLayer).unwrap();
        // W block: row r has hᵀ in columns r*3..r*3+3; bias block is identity.
        for r in 0..2 {
            for rr in 0..2 {
                for c in 0..3 {
                    let expected = if r == rr { h[c] } else { 0.0 };
                    assert_eq!(jb.matrix[(r, rr * 3 + c)], expected);
                }
                assert_eq!(jb.matrix[(r, 6 + rr)], if r == rr { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn euclidean_rows_tangent_to_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = NetSpec::new(vec![3, 6, 4], Activation::Relu).unwrap();
        for _ in 0..10 {
            let p = ParamVector::init(&spec, &mut rng);
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let z = embed(&spec, &p, &x).unwrap();
            let jb = jacobian(&spec, &p, &x, Split::Euclidean, &ActiveSubset::All).unwrap();
            let zt = nalgebra::DVector::from_column_slice(&z).transpose();
            assert!((zt * &jb.matrix).norm() < 1e-10);
        }
    }

    #[test]
    fn linear_net_matches_finite_differences_tightly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let spec = NetSpec::new(vec![3, 4], Activation::Relu).unwrap();
        let p = ParamVector::init(&spec, &mut rng);
        let x = [0.5, -1.0, 2.0];
        let a = jacobian(&spec, &p, &x, Split::Arccos, &ActiveSubset::All).unwrap();
        let fd = finite_diff_jacobian(&spec, &p, &x, Split::Arccos, &ActiveSubset::All, 1e-3).unwrap();
        assert!((&a.matrix - fd).amax() < 1e-8);
    }

    #[test]
    fn finite_difference_error_is_second_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let spec = NetSpec::new(vec![2, 4, 3], Activation::Tanh).unwrap();
        let p = ParamVector::init(&spec, &mut rng);
        let x = [0.8, -0.3];
        let exact = jacobian(&spec, &p, &x, Split::Euclidean, &ActiveSubset::All).unwrap().matrix;
        let e1 = (finite_diff_jacobian(&spec, &p, &x, Split::Euclidean, &ActiveSubset::All, 1e-2).unwrap() - &exact).amax();
        let e2 = (finite_diff_jacobian(&spec, &p, &x, Split::Euclidean, &ActiveSubset::All, 5e-3).unwrap() - &exact).amax();
        let ratio = e1 / e2;
        assert!((3.0..5.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn dead_relu_net_has_zero_jacobian() {
        let spec = NetSpec::new(vec![2, 3, 2], Activation::Relu).unwrap();
        let p = ParamVector::zeros(&spec);
        let fd = finite_diff_jacobian(&spec, &p, &[0.3, 0.2], Split::Arccos, &ActiveSubset::Range { start: 0, end: 12 }, 1e-4)
            .unwrap();
        // With zero weights every hidden unit sits at the kink; only the
        // hidden layer is perturbed and the central stencil cancels.
        assert!(fd.amax() < 1e-12);
    }
}
