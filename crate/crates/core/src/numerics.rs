//! Dense linear algebra, the fixed-topology MLP with hand-written backward
//! pass, Adam, and a central-difference gradient checker.
//!
//! Everything here works in `f64`. Vectors are plain `Vec<f64>` / `&[f64]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix with fixed dimensions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have the same length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::shape(format!(
                    "row {i} has {} entries, expected {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self · x`.
    pub fn mat_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::shape(format!(
                "matrix has {} columns, vector has {} entries",
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    /// `selfᵀ · y`.
    pub fn mat_t_vec(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.rows {
            return Err(Error::shape(format!(
                "matrix has {} rows, vector has {} entries",
                self.rows,
                y.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            if yr == 0.0 {
                continue;
            }
            for (o, &w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        Ok(out)
    }
}

/// Dot product. Callers are responsible for equal lengths.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += scale * x`.
#[inline]
pub fn axpy(y: &mut [f64], scale: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += scale * xi;
    }
}

pub fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

pub fn relu(x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    /// `out × in`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::shape(format!(
                "weight has {} rows but bias has {} entries",
                weight.rows(),
                bias.len()
            )));
        }
        Ok(Self { weight, bias })
    }

    /// Fan-in scaled uniform init, `U(-1/sqrt(in), 1/sqrt(in))` for weight and bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input.max(1) as f64).sqrt();
        let weight = Matrix::from_fn(output, input, |_, _| rng.gen_range(-bound..bound));
        let bias = (0..output).map(|_| rng.gen_range(-bound..bound)).collect();
        Self { weight, bias }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weight.mat_vec(x)?;
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        Ok(y)
    }

    pub fn num_params(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

pub fn linear_forward(layer: &LinearLayer, x: &[f64]) -> Result<Vec<f64>> {
    layer.forward(x)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearGrads {
    pub fn zeros_like(layer: &LinearLayer) -> Self {
        Self {
            weight: Matrix::zeros(layer.output_dim(), layer.input_dim()),
            bias: vec![0.0; layer.output_dim()],
        }
    }

    /// Accumulates the gradient of `W·x + b` for upstream `dy`; returns `Wᵀ·dy`.
    pub fn accumulate(&mut self, layer: &LinearLayer, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let cols = layer.input_dim();
        let w = self.weight.as_mut_slice();
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            axpy(&mut w[r * cols..(r + 1) * cols], g, x);
        }
        axpy(&mut self.bias, 1.0, dy);
        layer
            .weight
            .mat_t_vec(dy)
            .expect("upstream gradient length checked by caller")
    }

    pub fn add(&mut self, other: &LinearGrads) {
        axpy(self.weight.as_mut_slice(), 1.0, other.weight.as_slice());
        axpy(&mut self.bias, 1.0, &other.bias);
    }
}

/// Stack of linear layers with ReLU between layers and none after the last.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    layers: Vec<LinearLayer>,
}

/// Per-layer inputs and pre-activations recorded by [`Mlp::forward`].
#[derive(Clone, Debug)]
pub struct MlpCache {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn pre_activations(&self) -> &[Vec<f64>] {
        &self.pre
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LinearGrads>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp.layers.iter().map(LinearGrads::zeros_like).collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.add(b);
        }
    }
}

impl Mlp {
    pub fn new(layers: Vec<LinearLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::shape("an MLP needs at least one layer"));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::shape(format!(
                    "layer {i} outputs {} values but layer {} expects {}",
                    pair[0].output_dim(),
                    i + 1,
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    /// Builds a randomly initialised MLP through the given widths
    /// (`widths[0]` is the input dimension).
    pub fn init<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::shape("need at least input and output width"));
        }
        let layers = widths
            .windows(2)
            .map(|w| LinearLayer::init(w[0], w[1], rng))
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LinearLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [LinearLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&h)?;
            let next = if i < last { relu(&z) } else { z.clone() };
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        Ok((h, MlpCache { inputs, pre }))
    }

    /// Forward pass without keeping the cache.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.forward(x).map(|(y, _)| y)
    }

    fn check_cache(&self, cache: &MlpCache, dy: &[f64]) -> Result<()> {
        if cache.inputs.len() != self.layers.len() || cache.pre.len() != self.layers.len() {
            return Err(Error::contract(format!(
                "cache holds {} layers, MLP has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if cache.inputs[i].len() != layer.input_dim() || cache.pre[i].len() != layer.output_dim()
            {
                return Err(Error::contract(format!(
                    "cache entry for layer {i} does not match the layer shape"
                )));
            }
        }
        if dy.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "upstream gradient has {} entries, MLP outputs {}",
                dy.len(),
                self.output_dim()
            )));
        }
        Ok(())
    }

    /// Backward pass accumulating parameter gradients into `grads`.
    /// Returns the gradient with respect to the MLP input.
    pub fn backward_into(
        &self,
        cache: &MlpCache,
        dy: &[f64],
        grads: &mut MlpGrads,
    ) -> Result<Vec<f64>> {
        self.check_cache(cache, dy)?;
        if grads.layers.len() != self.layers.len() {
            return Err(Error::shape("gradient buffer does not match the MLP"));
        }
        let last = self.layers.len() - 1;
        let mut g = dy.to_vec();
        for i in (0..self.layers.len()).rev() {
            if i < last {
                // ReLU: gradient passes only where the pre-activation was > 0.
                for (gi, &z) in g.iter_mut().zip(&cache.pre[i]) {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                }
            }
            g = grads.layers[i].accumulate(&self.layers[i], &cache.inputs[i], &g);
        }
        Ok(g)
    }

    pub fn backward(&self, cache: &MlpCache, dy: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
        let mut grads = MlpGrads::zeros_like(self);
        let dx = self.backward_into(cache, dy, &mut grads)?;
        Ok((dx, grads))
    }
}

pub fn mlp_forward(mlp: &Mlp, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    mlp.forward(x)
}

pub fn mlp_backward(mlp: &Mlp, cache: &MlpCache, dy: &[f64]) -> Result<(Vec<f64>, MlpGrads)> {
    mlp.backward(cache, dy)
}

/// Adam moments for a list of parameter tensors (each flattened).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(shapes: &[usize]) -> Self {
        Self::with_hyper(shapes, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(shapes: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            step: 0,
            beta1,
            beta2,
            epsilon,
        }
    }
}

/// One bias-corrected Adam update over every parameter tensor.
pub fn adam_step(
    params: &mut [&mut [f64]],
    grads: &[&[f64]],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(format!(
            "{} parameter tensors, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() || p.len() != state.v[i].len() {
            return Err(Error::shape(format!(
                "tensor {i}: {} params, {} grads, {} moments",
                p.len(),
                g.len(),
                state.m[i].len()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for k in 0..p.len() {
            let gk = g[k];
            m[k] = b1 * m[k] + (1.0 - b1) * gk;
            v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Result of a finite-difference comparison.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Relative error with a small floor on the denominator so coordinates whose
/// true gradient is zero compare on an absolute scale of `1e-6`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares `analytic` against central differences of `objective` at `params`.
pub fn grad_check<F>(mut objective: F, params: &[f64], analytic: &[f64], h: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    if params.len() != analytic.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} analytic gradient entries",
            params.len(),
            analytic.len()
        )));
    }
    let mut x = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for i in 0..x.len() {
        let orig = x[i];
        x[i] = orig + h;
        let fp = objective(&x);
        x[i] = orig - h;
        let fm = objective(&x);
        x[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::numeric(format!(
                "objective is not finite around coordinate {i}"
            )));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if i == 0 || err > report.max_rel_error {
            report = GradCheckReport {
                max_rel_error: err,
                worst_index: i,
                analytic: analytic[i],
                numeric,
            };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;

    #[test]
    fn linear_forward_examples() {
        let id = LinearLayer::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_forward(&id, &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);

        let zero = LinearLayer::new(Matrix::zeros(1, 4), vec![3.0]).unwrap();
        assert_eq!(linear_forward(&zero, &[9.0, -1.0, 2.0, 5.0]).unwrap(), vec![3.0]);

        let w = LinearLayer::new(Matrix::from_rows(&[vec![1.0, 1.0]]).unwrap(), vec![0.5]).unwrap();
        assert_eq!(linear_forward(&w, &[2.0, 3.0]).unwrap(), vec![5.5]);
    }

    #[test]
    fn linear_forward_rejects_bad_input() {
        let id = LinearLayer::new(Matrix::identity(2), vec![0.0, 0.0]).unwrap();
        assert!(matches!(linear_forward(&id, &[1.0]), Err(Error::Shape(_))));
        assert!(LinearLayer::new(Matrix::identity(2), vec![0.0]).is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(relu(&[-1.0, 0.0, 2.0]), vec![0.0, 0.0, 2.0]);
        assert_eq!(relu(&[1.0, 2.5]), vec![1.0, 2.5]);
        assert_eq!(relu(&[-1.0, -2.5]), vec![0.0, 0.0]);
    }

    #[test]
    fn mlp_forward_examples() {
        let single = Mlp::new(vec![LinearLayer::new(Matrix::identity(3), vec![0.0; 3]).unwrap()]).unwrap();
        let (y, _) = single.forward(&[1.0, -2.0, 3.0]).unwrap();
        assert_eq!(y, vec![1.0, -2.0, 3.0]);

        let mut rng = rng_for(1, "test");
        let first = LinearLayer::init(3, 4, &mut rng);
        let last = LinearLayer::new(Matrix::zeros(2, 4), vec![0.25, -1.0]).unwrap();
        let mlp = Mlp::new(vec![first, last]).unwrap();
        assert_eq!(mlp.apply(&[0.3, 0.1, -0.7]).unwrap(), vec![0.25, -1.0]);

        // Hand trace: W1 = [[1,0],[0,1],[1,1]], b1 = [0,-1,0]; x = [2,-3]
        // z1 = [2,-4,-1] -> relu [2,0,0]; W2 = [[1,1,1]], b2 = [0.5] -> 2.5
        let l1 = LinearLayer::new(
            Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]).unwrap(),
            vec![0.0, -1.0, 0.0],
        )
        .unwrap();
        let l2 = LinearLayer::new(Matrix::from_rows(&[vec![1.0, 1.0, 1.0]]).unwrap(), vec![0.5]).unwrap();
        let mlp = Mlp::new(vec![l1, l2]).unwrap();
        let (y, cache) = mlp.forward(&[2.0, -3.0]).unwrap();
        assert_eq!(y, vec![2.5]);
        assert_eq!(cache.pre_activations()[0], vec![2.0, -4.0, -1.0]);
    }

    #[test]
    fn mlp_rejects_inconsistent_chain() {
        let mut rng = rng_for(2, "test");
        let a = LinearLayer::init(3, 4, &mut rng);
        let b = LinearLayer::init(5, 2, &mut rng);
        assert!(matches!(Mlp::new(vec![a, b]), Err(Error::Shape(_))));
    }

    #[test]
    fn mlp_backward_zero_upstream() {
        let mut rng = rng_for(3, "test");
        let mlp = Mlp::init(&[4, 5, 3], &mut rng).unwrap();
        let (_, cache) = mlp.forward(&[0.1, -0.2, 0.3, 0.4]).unwrap();
        let (dx, grads) = mlp.backward(&cache, &[0.0; 3]).unwrap();
        assert!(dx.iter().all(|&v| v == 0.0));
        assert_eq!(grads, MlpGrads::zeros_like(&mlp));
    }

    #[test]
    fn mlp_backward_single_linear_layer() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![-1.0, 0.5], vec![0.0, 3.0]]).unwrap();
        let mlp = Mlp::new(vec![LinearLayer::new(w, vec![0.1, 0.2, 0.3]).unwrap()]).unwrap();
        let x = [0.7, -1.1];
        let g = [0.5, -2.0, 1.5];
        let (_, cache) = mlp.forward(&x).unwrap();
        let (dx, grads) = mlp.backward(&cache, &g).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                assert_eq!(grads.layers[0].weight.get(r, c), g[r] * x[c]);
            }
        }
        assert_eq!(grads.layers[0].bias, g.to_vec());
        assert!((dx[0] - (1.0 * 0.5 + -1.0 * -2.0 + 0.0)).abs() < 1e-15);
        assert!((dx[1] - (2.0 * 0.5 + 0.5 * -2.0 + 3.0 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn mlp_backward_rejects_mismatched_cache() {
        let mut rng = rng_for(4, "test");
        let a = Mlp::init(&[4, 5, 3], &mut rng).unwrap();
        let b = Mlp::init(&[4, 3], &mut rng).unwrap();
        let (_, cache) = b.forward(&[0.0; 4]).unwrap();
        assert!(matches!(a.backward(&cache, &[1.0; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_zero_gradient_is_noop() {
        let mut p = vec![0.5, -1.25, 3.0, -0.0];
        let before = p.clone();
        let g = vec![0.0; 4];
        let mut st = AdamState::new(&[4]);
        adam_step(&mut [&mut p[..]], &[&g[..]], &mut st, 3e-4).unwrap();
        assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_first_step_closed_form() {
        for g in [2.0, -0.03, 1e-3] {
            let mut p = vec![1.0];
            let mut st = AdamState::new(&[1]);
            let lr = 3e-4;
            adam_step(&mut [&mut p[..]], &[&[g][..]], &mut st, lr).unwrap();
            let expected = 1.0 - lr * g / (g.abs() + 1e-8);
            assert!((p[0] - expected).abs() < 1e-15, "{} vs {}", p[0], expected);
        }
    }

    #[test]
    fn adam_counts_steps_and_checks_shapes() {
        let mut p = vec![1.0, 2.0];
        let mut st = AdamState::new(&[2]);
        for _ in 0..2 {
            adam_step(&mut [&mut p[..]], &[&[0.1, 0.2][..]], &mut st, 0.01).unwrap();
        }
        assert_eq!(st.step, 2);
        assert!(adam_step(&mut [&mut p[..]], &[&[0.1][..]], &mut st, 0.01).is_err());
        assert_eq!(st.step, 2);
    }

    #[test]
    fn grad_check_quadratic_and_linear() {
        let r = grad_check(|x| x[0] * x[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let r = grad_check(|x| 2.0 * x[0] - 0.5 * x[1] + 1.0, &[0.3, -4.0], &[2.0, -0.5], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn grad_check_rejects_bad_input() {
        assert!(grad_check(|x| x[0], &[1.0], &[1.0], 0.0).is_err());
        assert!(matches!(
            grad_check(|x| x[0].ln(), &[0.0], &[1.0], 1e-5),
            Err(Error::Numeric(_))
        ));
    }
}
