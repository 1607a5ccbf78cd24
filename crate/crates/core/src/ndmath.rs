//! Dense numerical core: row-major matrices, fixed-topology MLPs with
//! hand-written reverse mode, and the Adam optimizer.
//!
//! Everything is `f64`. Batched products go through `matrixmultiply`, the
//! rest is plain loops.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2 {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "Tensor2::from_vec",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
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

    /// A single-row matrix holding `values`.
    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Column-wise concatenation `[self | other]`.
    pub fn hconcat(&self, other: &Tensor2) -> Result<Tensor2> {
        if self.rows != other.rows {
            return Err(Error::DimensionMismatch {
                context: "Tensor2::hconcat rows",
                expected: self.rows,
                actual: other.rows,
            });
        }
        let cols = self.cols + other.cols;
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in 0..self.rows {
            data.extend_from_slice(self.row(r));
            data.extend_from_slice(other.row(r));
        }
        Ok(Tensor2 {
            rows: self.rows,
            cols,
            data,
        })
    }
}

/// `c = alpha * op(a) * op(b) + beta * c`, with `op` an optional transpose.
pub fn gemm(
    alpha: f64,
    a: &Tensor2,
    trans_a: bool,
    b: &Tensor2,
    trans_b: bool,
    beta: f64,
    c: &mut Tensor2,
) -> Result<()> {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != kb {
        return Err(Error::DimensionMismatch {
            context: "gemm inner",
            expected: k,
            actual: kb,
        });
    }
    if c.rows != m || c.cols != n {
        return Err(Error::DimensionMismatch {
            context: "gemm output",
            expected: m * n,
            actual: c.rows * c.cols,
        });
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        c.data.iter_mut().for_each(|x| *x *= beta);
        return Ok(());
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the shapes and strides above describe in-bounds views of the
    // three buffers, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Layer sizes (input, hidden..., output) and activations of a fully
/// connected network.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least an input and an output size, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Config(format!(
                "MLP layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        Ok(Self {
            layer_sizes,
            activation,
            output_activation,
        })
    }

    /// `input`, then `hidden`, then `output`.
    pub fn with_hidden(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        output_activation: OutputActivation,
    ) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, activation, output_activation)
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_size(&self) -> usize {
        *self.layer_sizes.last().expect("validated non-empty")
    }

    pub fn num_linear_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

/// One affine layer. `weight` is `fan_in x fan_out` so a batch `X` maps to
/// `X * W + b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

/// Weights and biases of every layer of an MLP. Also used for gradients and
/// optimizer moments, which share the shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub layers: Vec<Layer>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = spec
            .layer_sizes
            .windows(2)
            .map(|w| Layer {
                weight: Tensor2::zeros(w[0], w[1]),
                bias: vec![0.0; w[1]],
            })
            .collect();
        Self { layers }
    }

    /// Uniform fan-in initialization, bound `1/sqrt(fan_in)`, for weights
    /// and biases alike.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        let mut params = Self::zeros(spec);
        for layer in &mut params.layers {
            let bound = 1.0 / (layer.weight.rows() as f64).sqrt();
            for w in layer.weight.data_mut() {
                *w = rng.random_range(-bound..bound);
            }
            for b in &mut layer.bias {
                *b = rng.random_range(-bound..bound);
            }
        }
        params
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: Tensor2::zeros(l.weight.rows(), l.weight.cols()),
                    bias: vec![0.0; l.bias.len()],
                })
                .collect(),
        }
    }

    pub fn conforms_to(&self, spec: &MlpSpec) -> bool {
        self.layers.len() == spec.num_linear_layers()
            && self.layers.iter().zip(spec.layer_sizes.windows(2)).all(|(l, w)| {
                l.weight.rows() == w[0] && l.weight.cols() == w[1] && l.bias.len() == w[1]
            })
    }

    fn same_shape(&self, other: &ParamSet) -> bool {
        self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.weight.rows() == b.weight.rows()
                    && a.weight.cols() == b.weight.cols()
                    && a.bias.len() == b.bias.len()
            })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// All parameters in layer order, weights before biases.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(&l.bias);
        }
        out
    }

    /// Mutable reference to the `index`-th entry of [`ParamSet::flatten`].
    pub fn flat_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let nw = l.weight.data().len();
            if index < nw {
                return &mut l.weight.data_mut()[index];
            }
            index -= nw;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
    }

    fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
    }

    pub fn set_zero(&mut self) {
        self.slices_mut().for_each(|s| s.fill(0.0));
    }

    pub fn scale(&mut self, factor: f64) {
        self.slices_mut()
            .for_each(|s| s.iter_mut().for_each(|x| *x *= factor));
    }

    /// `self += factor * other`.
    pub fn add_scaled(&mut self, other: &ParamSet, factor: f64) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::DimensionMismatch {
                context: "ParamSet::add_scaled",
                expected: self.num_params(),
                actual: other.num_params(),
            });
        }
        for (dst, src) in self.slices_mut().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += factor * s);
        }
        Ok(())
    }

    /// Polyak averaging: `self = (1 - tau) * self + tau * main`.
    pub fn soft_update_from(&mut self, main: &ParamSet, tau: f64) -> Result<()> {
        if !self.same_shape(main) {
            return Err(Error::DimensionMismatch {
                context: "ParamSet::soft_update_from",
                expected: self.num_params(),
                actual: main.num_params(),
            });
        }
        for (dst, src) in self.slices_mut().zip(main.slices()) {
            dst.iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d = (1.0 - tau) * *d + tau * s);
        }
        Ok(())
    }

    /// First non-finite entry, formatted as a parameter location.
    pub fn find_non_finite(&self) -> Option<String> {
        for (li, l) in self.layers.iter().enumerate() {
            if let Some(i) = l.weight.data().iter().position(|x| !x.is_finite()) {
                let (r, c) = (i / l.weight.cols(), i % l.weight.cols());
                return Some(format!("layer {li} weight[{r},{c}]"));
            }
            if let Some(i) = l.bias.iter().position(|x| !x.is_finite()) {
                return Some(format!("layer {li} bias[{i}]"));
            }
        }
        None
    }
}

/// Activations recorded by a batched forward pass, consumed by
/// [`Mlp::backward_batch`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    // [input, post-activation output of each layer]
    activations: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn output(&self) -> &Tensor2 {
        self.activations.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Tensor2 {
        &self.activations[0]
    }
}

/// A network: its architecture plus its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    params: ParamSet,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Self {
        let params = ParamSet::init(&spec, rng);
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: ParamSet) -> Result<Self> {
        if !params.conforms_to(&spec) {
            return Err(Error::DimensionMismatch {
                context: "Mlp::from_params",
                expected: ParamSet::zeros(&spec).num_params(),
                actual: params.num_params(),
            });
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Single-input forward pass.
    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self
            .forward_batch(&Tensor2::row_vector(input))?
            .into_data())
    }

    /// Single-input reverse pass: gradients of `upstream . output` with
    /// respect to every parameter and to the input.
    pub fn backward(&self, input: &[f64], upstream: &[f64]) -> Result<(ParamSet, Vec<f64>)> {
        let cache = self.forward_cached(&Tensor2::row_vector(input))?;
        let mut grads = self.params.zeros_like();
        let input_grad = self
            .backward_batch(&cache, &Tensor2::row_vector(upstream), Some(&mut grads), true)?
            .expect("input gradient requested");
        Ok((grads, input_grad.into_data()))
    }

    pub fn forward_batch(&self, input: &Tensor2) -> Result<Tensor2> {
        self.check_input(input)?;
        let last = self.params.layers.len() - 1;
        let mut x = input.clone();
        for (l, layer) in self.params.layers.iter().enumerate() {
            x = self.affine(&x, layer, l == last)?;
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Tensor2) -> Result<ForwardCache> {
        self.check_input(input)?;
        let last = self.params.layers.len() - 1;
        let mut activations = Vec::with_capacity(self.params.layers.len() + 1);
        activations.push(input.clone());
        for (l, layer) in self.params.layers.iter().enumerate() {
            let next = self.affine(activations.last().expect("non-empty"), layer, l == last)?;
            activations.push(next);
        }
        Ok(ForwardCache { activations })
    }

    fn check_input(&self, input: &Tensor2) -> Result<()> {
        if input.cols() != self.spec.input_size() {
            return Err(Error::DimensionMismatch {
                context: "mlp input",
                expected: self.spec.input_size(),
                actual: input.cols(),
            });
        }
        Ok(())
    }

    fn affine(&self, x: &Tensor2, layer: &Layer, is_output: bool) -> Result<Tensor2> {
        let mut z = Tensor2::zeros(x.rows(), layer.weight.cols());
        gemm(1.0, x, false, &layer.weight, false, 0.0, &mut z)?;
        let width = z.cols();
        for row in z.data_mut().chunks_exact_mut(width) {
            row.iter_mut().zip(&layer.bias).for_each(|(v, b)| *v += b);
        }
        match (is_output, self.spec.activation, self.spec.output_activation) {
            (true, _, OutputActivation::Identity) => {}
            (true, _, OutputActivation::Tanh) | (false, Activation::Tanh, _) => {
                z.data_mut().iter_mut().for_each(|v| *v = v.tanh())
            }
            (false, Activation::Relu, _) => z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0)),
        }
        Ok(z)
    }

    /// Batched reverse pass. Parameter gradients are accumulated into
    /// `grads` when given; the input gradient is returned when requested.
    pub fn backward_batch(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor2,
        mut grads: Option<&mut ParamSet>,
        want_input_grad: bool,
    ) -> Result<Option<Tensor2>> {
        let out = cache.output();
        if upstream.rows() != out.rows() || upstream.cols() != out.cols() {
            return Err(Error::DimensionMismatch {
                context: "mlp upstream gradient",
                expected: out.rows() * out.cols(),
                actual: upstream.rows() * upstream.cols(),
            });
        }
        if let Some(g) = grads.as_deref() {
            if !g.conforms_to(&self.spec) {
                return Err(Error::DimensionMismatch {
                    context: "mlp gradient buffer",
                    expected: self.params.num_params(),
                    actual: g.num_params(),
                });
            }
        }
        let n_layers = self.params.layers.len();
        let mut delta = upstream.clone();
        for l in (0..n_layers).rev() {
            let y = &cache.activations[l + 1];
            let tanh_like = if l == n_layers - 1 {
                match self.spec.output_activation {
                    OutputActivation::Identity => None,
                    OutputActivation::Tanh => Some(true),
                }
            } else {
                Some(self.spec.activation == Activation::Tanh)
            };
            match tanh_like {
                None => {}
                Some(true) => delta
                    .data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(d, y)| *d *= 1.0 - y * y),
                Some(false) => delta
                    .data_mut()
                    .iter_mut()
                    .zip(y.data())
                    .for_each(|(d, y)| {
                        if *y <= 0.0 {
                            *d = 0.0
                        }
                    }),
            }
            let layer = &self.params.layers[l];
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[l];
                gemm(1.0, &cache.activations[l], true, &delta, false, 1.0, &mut gl.weight)?;
                let width = delta.cols();
                for row in delta.data().chunks_exact(width) {
                    gl.bias.iter_mut().zip(row).for_each(|(b, d)| *b += d);
                }
            }
            if l > 0 || want_input_grad {
                let mut prev = Tensor2::zeros(delta.rows(), layer.weight.rows());
                gemm(1.0, &delta, false, &layer.weight, true, 0.0, &mut prev)?;
                delta = prev;
            } else {
                return Ok(None);
            }
        }
        Ok(Some(delta))
    }
}

/// Adam optimizer state for one [`ParamSet`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: ParamSet,
    v: ParamSet,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &ParamSet {
        &self.m
    }

    pub fn second_moment(&self) -> &ParamSet {
        &self.v
    }

    /// One bias-corrected Adam update. Rejects non-finite gradients before
    /// touching any state.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        if !params.same_shape(grads) || !params.same_shape(&self.m) {
            return Err(Error::DimensionMismatch {
                context: "Adam::step",
                expected: params.num_params(),
                actual: grads.num_params(),
            });
        }
        if let Some(location) = grads.find_non_finite() {
            return Err(Error::NonFinite {
                location: format!("gradient {location}"),
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m), v) in params
            .slices_mut()
            .zip(grads.slices())
            .zip(self.m.slices_mut())
            .zip(self.v.slices_mut())
        {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    // Independent forward pass: explicit triple loop, no gemm.
    fn oracle_forward(mlp: &Mlp, input: &[f64]) -> Vec<f64> {
        let spec = mlp.spec();
        let n = mlp.params().layers.len();
        let mut x = input.to_vec();
        for (l, layer) in mlp.params().layers.iter().enumerate() {
            let mut y = layer.bias.clone();
            for (o, yo) in y.iter_mut().enumerate() {
                for (i, xi) in x.iter().enumerate() {
                    *yo += xi * layer.weight.get(i, o);
                }
            }
            let is_out = l == n - 1;
            for v in &mut y {
                *v = match (is_out, spec.activation, spec.output_activation) {
                    (true, _, OutputActivation::Identity) => *v,
                    (true, _, OutputActivation::Tanh) => v.tanh(),
                    (false, Activation::Tanh, _) => v.tanh(),
                    (false, Activation::Relu, _) => v.max(0.0),
                };
            }
            x = y;
        }
        x
    }

    fn tanh_spec(sizes: Vec<usize>) -> MlpSpec {
        MlpSpec::new(sizes, Activation::Tanh, OutputActivation::Identity).unwrap()
    }

    #[test]
    fn zero_params_give_zero_output() {
        let spec = tanh_spec(vec![3, 5, 2]);
        let mlp = Mlp::from_params(spec.clone(), ParamSet::zeros(&spec)).unwrap();
        assert_eq!(mlp.forward(&[0.3, -7.0, 2.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer() {
        let spec = tanh_spec(vec![2, 2]);
        let mut params = ParamSet::zeros(&spec);
        params.layers[0].weight.set(0, 0, 1.0);
        params.layers[0].weight.set(1, 1, 1.0);
        let mlp = Mlp::from_params(spec, params).unwrap();
        assert_eq!(mlp.forward(&[1.5, -2.0]).unwrap(), vec![1.5, -2.0]);
    }

    #[test]
    fn forward_matches_loop_oracle() {
        let mut r = rng(11);
        for (sizes, act, out) in [
            (vec![4, 8, 8, 3], Activation::Tanh, OutputActivation::Identity),
            (vec![6, 16, 2], Activation::Relu, OutputActivation::Tanh),
            (vec![1, 1], Activation::Relu, OutputActivation::Identity),
        ] {
            let spec = MlpSpec::new(sizes.clone(), act, out).unwrap();
            let mlp = Mlp::new(spec, &mut r);
            let input: Vec<f64> = (0..sizes[0]).map(|_| r.random_range(-2.0..2.0)).collect();
            let got = mlp.forward(&input).unwrap();
            let want = oracle_forward(&mlp, &input);
            for (g, w) in got.iter().zip(&want) {
                assert!((g - w).abs() < 1e-12, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn input_dimension_is_checked() {
        let mlp = Mlp::new(tanh_spec(vec![3, 4, 1]), &mut rng(0));
        assert!(matches!(
            mlp.forward(&[1.0, 2.0]),
            Err(Error::DimensionMismatch { .. })
        ));
        assert!(mlp.backward(&[1.0, 2.0, 3.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Tanh, OutputActivation::Identity).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Tanh, OutputActivation::Identity).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mlp = Mlp::new(tanh_spec(vec![3, 7, 2]), &mut rng(1));
        let (g, gi) = mlp.backward(&[0.1, 0.2, 0.3], &[0.0, 0.0]).unwrap();
        assert!(g.flatten().iter().all(|&x| x == 0.0));
        assert!(gi.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn linear_layer_weight_grad_is_outer_product() {
        let spec = tanh_spec(vec![3, 2]);
        let mlp = Mlp::new(spec, &mut rng(2));
        let x = [0.5, -1.0, 2.0];
        let g = [3.0, -0.25];
        let (grads, _) = mlp.backward(&x, &g).unwrap();
        for i in 0..3 {
            for o in 0..2 {
                assert_eq!(grads.layers[0].weight.get(i, o), x[i] * g[o]);
            }
        }
        assert_eq!(grads.layers[0].bias, g.to_vec());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = tanh_spec(vec![9, 16, 1]);
        let a = ParamSet::init(&spec, &mut rng(5));
        let b = ParamSet::init(&spec, &mut rng(5));
        assert_eq!(a, b);
        let bound = 1.0 / 3.0;
        assert!(a.layers[0].weight.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let spec = tanh_spec(vec![2, 3, 1]);
        let mut p = ParamSet::init(&spec, &mut rng(3));
        let before = p.clone();
        let mut adam = Adam::new(&p, 1e-3);
        let z = p.zeros_like();
        adam.step(&mut p, &z).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.t(), 1);
        assert!(adam.first_moment().flatten().iter().all(|&m| m == 0.0));
        assert!(adam.second_moment().flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adam_first_step_has_magnitude_lr() {
        let spec = tanh_spec(vec![2, 1]);
        let mut p = ParamSet::zeros(&spec);
        let mut g = p.zeros_like();
        g.layers[0].weight.set(0, 0, 0.7);
        g.layers[0].weight.set(1, 0, -3.0);
        g.layers[0].bias[0] = 1e-3;
        let mut adam = Adam::new(&p, 1e-3);
        adam.step(&mut p, &g).unwrap();
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
        for (pv, gv) in p.flatten().iter().zip(g.flatten()) {
            let want = -1e-3 * gv / (gv.abs() + 1e-8);
            assert!((pv - want).abs() < 1e-15, "{pv} vs {want}");
            assert!((pv.abs() - 1e-3).abs() < 1e-7);
        }
    }

    #[test]
    fn adam_two_steps_match_scalar_reference() {
        // Hand-rolled scalar Adam for a fixed gradient g = 0.5, p0 = 1.0.
        let (lr, b1, b2, eps, g) = (0.01_f64, 0.9_f64, 0.999_f64, 1e-8_f64, 0.5_f64);
        let mut p_ref = 1.0;
        let (mut m, mut v) = (0.0, 0.0);
        for t in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            p_ref -= lr * mh / (vh.sqrt() + eps);
        }

        let spec = tanh_spec(vec![1, 1]);
        let mut p = ParamSet::zeros(&spec);
        p.layers[0].weight.set(0, 0, 1.0);
        let mut grads = p.zeros_like();
        grads.layers[0].weight.set(0, 0, g);
        let mut adam = Adam::new(&p, lr);
        adam.step(&mut p, &grads).unwrap();
        adam.step(&mut p, &grads).unwrap();
        assert!((p.layers[0].weight.get(0, 0) - p_ref).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradient_with_location() {
        let spec = tanh_spec(vec![2, 3, 1]);
        let mut p = ParamSet::init(&spec, &mut rng(4));
        let mut g = p.zeros_like();
        g.layers[1].weight.set(2, 0, f64::NAN);
        let mut adam = Adam::new(&p, 1e-3);
        match adam.step(&mut p, &g) {
            Err(Error::NonFinite { location }) => assert!(location.contains("layer 1 weight[2,0]")),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(adam.t(), 0);
    }

    #[test]
    fn soft_update_is_elementwise_polyak() {
        let spec = tanh_spec(vec![3, 4, 2]);
        let main = ParamSet::init(&spec, &mut rng(6));
        let mut target = ParamSet::init(&spec, &mut rng(7));
        let old = target.clone();
        target.soft_update_from(&main, 0.005).unwrap();
        for ((t, o), m) in target.flatten().iter().zip(old.flatten()).zip(main.flatten()) {
            assert!((t - (0.995 * o + 0.005 * m)).abs() < 1e-12);
        }
    }
}
