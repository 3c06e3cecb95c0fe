//! Feed-forward critic `f(x) = <v, h_K(x)>` with `h_k = σ(W_k h_{k-1} + b_k)`.
//!
//! Besides the usual forward and input-gradient passes, the network can
//! backpropagate a seed on `|∇_x f|²` into its parameters. That second-order
//! pass is written out by hand and works on whole batches (one column per
//! sample).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{check_dim, Result, UsdError};
use crate::rng::UsdRng;
use crate::scalar::Real;

const PAR_CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Softplus,
    Relu,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
            Activation::Relu => "relu",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            "relu" => Ok(Activation::Relu),
            other => Err(UsdError::InvalidParameter(format!("unknown activation {other:?}"))),
        }
    }

    /// `(σ(z), σ'(z), σ''(z))`.
    #[inline]
    fn eval<T: Real>(self, z: T) -> (T, T, T) {
        let one = T::one();
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = one - t * t;
                (t, d1, -T::lit(2.0) * t * d1)
            }
            Activation::Softplus => {
                // log(1 + e^z) = max(z, 0) + log(1 + e^{-|z|})
                let value = z.max(T::zero()) + (-z.abs()).exp().ln_1p();
                let s = one / (one + (-z).exp());
                (value, s, s * (one - s))
            }
            Activation::Relu => {
                if z > T::zero() {
                    (z, one, T::zero())
                } else {
                    (T::zero(), T::zero(), T::zero())
                }
            }
        }
    }
}

/// Values, squared gradient norms and the optional parameter gradient.
pub(crate) type SeededGrad<T> = (DVector<T>, DVector<T>, Option<NetParams<T>>);

/// All trainable parameters. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct NetParams<T: Real> {
    /// Hidden weights, `W_k` of shape `width_k × width_{k-1}`.
    pub weights: Vec<DMatrix<T>>,
    pub biases: Vec<DVector<T>>,
    /// Output weights `v` (no output bias).
    pub output: DVector<T>,
}

impl<T: Real> NetParams<T> {
    pub fn zeros_like(other: &Self) -> Self {
        Self {
            weights: other.weights.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            biases: other.biases.iter().map(|b| DVector::zeros(b.len())).collect(),
            output: DVector::zeros(other.output.len()),
        }
    }

    pub fn len(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>()
            + self.biases.iter().map(|b| b.len()).sum::<usize>()
            + self.output.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flattens as `W_1 (row-major), b_1, W_2, b_2, …, v`.
    pub fn to_flat(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.len());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            for r in 0..w.nrows() {
                out.extend(w.row(r).iter().copied());
            }
            out.extend(b.iter().copied());
        }
        out.extend(self.output.iter().copied());
        out
    }

    /// Inverse of [`NetParams::to_flat`] given the current shapes.
    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        check_dim(self.len(), flat.len())?;
        let mut it = flat.iter().copied();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            for r in 0..w.nrows() {
                for c in 0..w.ncols() {
                    w[(r, c)] = it.next().expect("length checked");
                }
            }
            b.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
        }
        self.output.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite_value()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite_value()))
            && self.output.iter().all(|v| v.is_finite_value())
    }

    pub fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
        self.output += &other.output;
    }
}

/// Per-batch forward quantities kept for the backward passes.
struct ForwardCache<T: Real> {
    /// `h_0 = x, h_1, …, h_K`, each `width × batch`.
    hs: Vec<DMatrix<T>>,
    /// `σ'(z_k)` and `σ''(z_k)`, dropout masks already folded in.
    d1: Vec<DMatrix<T>>,
    d2: Vec<DMatrix<T>>,
}

/// Optional train-time dropout applied after one hidden layer.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dropout {
    pub layer: usize,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeuralCritic<T: Real> {
    params: NetParams<T>,
    activation: Activation,
    dim_in: usize,
}

impl<T: Real> NeuralCritic<T> {
    /// Random initialization: every weight and bias of a layer with fan-in
    /// `k` is drawn from `U(−1/√k, 1/√k)`.
    pub fn new(dim_in: usize, hidden: &[usize], activation: Activation, rng: &mut UsdRng) -> Result<Self> {
        let mut net = Self::zeros(dim_in, hidden, activation)?;
        let mut fan_in = dim_in;
        for (w, b) in net.params.weights.iter_mut().zip(net.params.biases.iter_mut()) {
            let bound = 1.0 / (fan_in as f64).sqrt();
            w.iter_mut().for_each(|x| *x = T::lit(rng.random_range(-bound..bound)));
            b.iter_mut().for_each(|x| *x = T::lit(rng.random_range(-bound..bound)));
            fan_in = w.nrows();
        }
        let bound = 1.0 / (fan_in as f64).sqrt();
        net.params
            .output
            .iter_mut()
            .for_each(|x| *x = T::lit(rng.random_range(-bound..bound)));
        Ok(net)
    }

    /// All-zero network (`f ≡ 0`).
    pub fn zeros(dim_in: usize, hidden: &[usize], activation: Activation) -> Result<Self> {
        if dim_in == 0 || hidden.contains(&0) {
            return Err(UsdError::InvalidDimension(format!(
                "network widths must be >= 1 (input {dim_in}, hidden {hidden:?})"
            )));
        }
        let mut weights = Vec::with_capacity(hidden.len());
        let mut biases = Vec::with_capacity(hidden.len());
        let mut prev = dim_in;
        for &width in hidden {
            weights.push(DMatrix::zeros(width, prev));
            biases.push(DVector::zeros(width));
            prev = width;
        }
        Ok(Self {
            params: NetParams {
                weights,
                biases,
                output: DVector::zeros(prev),
            },
            activation,
            dim_in,
        })
    }

    /// Builds from explicit parameters.
    pub fn from_params(dim_in: usize, params: NetParams<T>, activation: Activation) -> Result<Self> {
        let mut prev = dim_in;
        if params.weights.len() != params.biases.len() {
            return Err(UsdError::InvalidParameter("one bias vector per hidden layer".into()));
        }
        for (w, b) in params.weights.iter().zip(&params.biases) {
            check_dim(prev, w.ncols())?;
            check_dim(w.nrows(), b.len())?;
            prev = w.nrows();
        }
        check_dim(prev, params.output.len())?;
        if !params.is_finite() {
            return Err(UsdError::NonFinite("network parameters".into()));
        }
        Ok(Self {
            params,
            activation,
            dim_in,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.dim_in
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn hidden_widths(&self) -> Vec<usize> {
        self.params.weights.iter().map(|w| w.nrows()).collect()
    }
    pub fn params(&self) -> &NetParams<T> {
        &self.params
    }
    pub fn params_mut(&mut self) -> &mut NetParams<T> {
        &mut self.params
    }
    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn to_columns(&self, points: &[T]) -> Result<DMatrix<T>> {
        if !points.len().is_multiple_of(self.dim_in) {
            return Err(UsdError::DimensionMismatch {
                expected: self.dim_in,
                got: points.len() % self.dim_in,
            });
        }
        if points.iter().any(|v| !v.is_finite_value()) {
            return Err(UsdError::NonFinite("critic input".into()));
        }
        // row-major n × d is column-major d × n
        Ok(DMatrix::from_column_slice(self.dim_in, points.len() / self.dim_in, points))
    }

    fn forward_cache(&self, x: DMatrix<T>, masks: Option<&[Option<DMatrix<T>>]>) -> ForwardCache<T> {
        let batch = x.ncols();
        let k = self.params.weights.len();
        let mut hs = Vec::with_capacity(k + 1);
        let mut d1 = Vec::with_capacity(k);
        let mut d2 = Vec::with_capacity(k);
        hs.push(x);
        for (layer, (w, b)) in self.params.weights.iter().zip(&self.params.biases).enumerate() {
            let mut z = w * &hs[layer];
            for mut col in z.column_iter_mut() {
                col += b;
            }
            let width = z.nrows();
            let mut h = DMatrix::zeros(width, batch);
            let mut g1 = DMatrix::zeros(width, batch);
            let mut g2 = DMatrix::zeros(width, batch);
            for idx in 0..z.len() {
                let (v, a, c) = self.activation.eval(z[idx]);
                h[idx] = v;
                g1[idx] = a;
                g2[idx] = c;
            }
            if let Some(mask) = masks.and_then(|m| m.get(layer)).and_then(Option::as_ref) {
                h.component_mul_assign(mask);
                g1.component_mul_assign(mask);
                g2.component_mul_assign(mask);
            }
            hs.push(h);
            d1.push(g1);
            d2.push(g2);
        }
        ForwardCache { hs, d1, d2 }
    }

    /// Input gradients `G_0` (d × batch) and the intermediate `G_k`, `S_k`.
    fn input_backward(&self, cache: &ForwardCache<T>) -> (Vec<DMatrix<T>>, Vec<DMatrix<T>>) {
        let k = self.params.weights.len();
        let batch = cache.hs[0].ncols();
        // gs[k] = ∂f/∂h_k, ss[k-1] = ∂f/∂z_k
        let mut gs = vec![DMatrix::zeros(0, 0); k + 1];
        let mut ss = vec![DMatrix::zeros(0, 0); k];
        gs[k] = DMatrix::from_fn(self.params.output.len(), batch, |r, _| self.params.output[r]);
        for layer in (0..k).rev() {
            let s = cache.d1[layer].component_mul(&gs[layer + 1]);
            gs[layer] = self.params.weights[layer].transpose() * &s;
            ss[layer] = s;
        }
        (gs, ss)
    }

    fn outputs(&self, cache: &ForwardCache<T>) -> DVector<T> {
        cache.hs.last().expect("input layer present").transpose() * &self.params.output
    }

    /// `f(x)` for one point.
    pub fn forward(&self, x: &[T]) -> Result<T> {
        check_dim(self.dim_in, x.len())?;
        Ok(self.forward_batch(x)?[0])
    }

    /// `f` at every point of a row-major `n × d` slice.
    pub fn forward_batch(&self, points: &[T]) -> Result<DVector<T>> {
        let x = self.to_columns(points)?;
        Ok(self.outputs(&self.forward_cache(x, None)))
    }

    /// [`NeuralCritic::forward_batch`] split into parallel chunks.
    pub fn forward_batch_par(&self, points: &[T]) -> Result<Vec<T>> {
        let chunks: Vec<DVector<T>> = points
            .par_chunks(PAR_CHUNK * self.dim_in)
            .map(|c| self.forward_batch(c))
            .collect::<Result<_>>()?;
        Ok(chunks.iter().flat_map(|c| c.iter().copied()).collect())
    }

    /// [`NeuralCritic::input_grad_batch`] split into parallel chunks, returned
    /// row-major `n × d`.
    pub fn input_grad_batch_par(&self, points: &[T]) -> Result<Vec<T>> {
        let chunks: Vec<DMatrix<T>> = points
            .par_chunks(PAR_CHUNK * self.dim_in)
            .map(|c| self.input_grad_batch(c))
            .collect::<Result<_>>()?;
        // each d × b column-major block is already row-major b × d
        Ok(chunks.iter().flat_map(|c| c.iter().copied()).collect())
    }

    /// `∇_x f(x)` for one point.
    pub fn input_grad(&self, x: &[T]) -> Result<DVector<T>> {
        check_dim(self.dim_in, x.len())?;
        let g = self.input_grad_batch(x)?;
        Ok(g.column(0).into_owned())
    }

    /// Input gradients at every point, one column per point (d × n).
    pub fn input_grad_batch(&self, points: &[T]) -> Result<DMatrix<T>> {
        let x = self.to_columns(points)?;
        let cache = self.forward_cache(x, None);
        let (mut gs, _) = self.input_backward(&cache);
        Ok(gs.swap_remove(0))
    }

    /// Values, squared input-gradient norms and, when `seeds = (f̄, r̄)` is
    /// given, the parameter gradient of `Σ_i f̄_i f(x_i) + r̄_i |∇_x f(x_i)|²`.
    pub(crate) fn seeded_param_grad(
        &self,
        points: &[T],
        masks: Option<&[Option<DMatrix<T>>]>,
        seeds: Option<(&DVector<T>, &DVector<T>)>,
    ) -> Result<SeededGrad<T>> {
        let x = self.to_columns(points)?;
        let cache = self.forward_cache(x, masks);
        let values = self.outputs(&cache);
        let (gs, ss) = self.input_backward(&cache);
        let sq_norms = DVector::from_iterator(gs[0].ncols(), gs[0].column_iter().map(|c| c.norm_squared()));
        let grad = seeds.map(|(f_bar, r_bar)| self.double_backward(&cache, &gs, &ss, f_bar, r_bar));
        Ok((values, sq_norms, grad))
    }

    fn double_backward(
        &self,
        cache: &ForwardCache<T>,
        gs: &[DMatrix<T>],
        ss: &[DMatrix<T>],
        f_bar: &DVector<T>,
        r_bar: &DVector<T>,
    ) -> NetParams<T> {
        let k = self.params.weights.len();
        let mut grad = NetParams::zeros_like(&self.params);
        let two = T::lit(2.0);

        // reverse through the input-gradient pass, from G_0 = ∇_x f upwards
        let mut g_bar = gs[0].clone();
        for (mut col, r) in g_bar.column_iter_mut().zip(r_bar.iter()) {
            col.scale_mut(two * *r);
        }
        let mut z_bar_bwd = Vec::with_capacity(k);
        for layer in 0..k {
            let w = &self.params.weights[layer];
            let s_bar = w * &g_bar;
            grad.weights[layer] += &ss[layer] * g_bar.transpose();
            z_bar_bwd.push(cache.d2[layer].component_mul(&gs[layer + 1]).component_mul(&s_bar));
            g_bar = cache.d1[layer].component_mul(&s_bar);
        }
        // G_K is the output weight broadcast over the batch
        grad.output += g_bar.column_sum();

        // reverse through the forward pass, seeded by f̄ on the output
        let h_last = cache.hs.last().expect("input layer present");
        grad.output += h_last * f_bar;
        let mut h_bar = &self.params.output * f_bar.transpose();
        for layer in (0..k).rev() {
            let z_hat = &z_bar_bwd[layer] + cache.d1[layer].component_mul(&h_bar);
            grad.weights[layer] += &z_hat * cache.hs[layer].transpose();
            grad.biases[layer] += z_hat.column_sum();
            h_bar = self.params.weights[layer].transpose() * &z_hat;
        }
        grad
    }

    /// Draws dropout masks (scaled by `1/(1−p)`) for a batch.
    pub(crate) fn dropout_masks(
        &self,
        dropout: Dropout,
        batch: usize,
        rng: &mut UsdRng,
    ) -> Vec<Option<DMatrix<T>>> {
        let keep = 1.0 - dropout.p;
        let scale = T::lit(1.0 / keep);
        self.params
            .weights
            .iter()
            .enumerate()
            .map(|(layer, w)| {
                (layer == dropout.layer).then(|| {
                    DMatrix::from_fn(w.nrows(), batch, |_, _| {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            T::zero()
                        }
                    })
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;

    /// Independent layer-by-layer evaluation.
    fn reference_forward(net: &NeuralCritic<f64>, x: &[f64]) -> f64 {
        let mut h = DVector::from_column_slice(x);
        for (w, b) in net.params().weights.iter().zip(&net.params().biases) {
            let z = w * &h + b;
            h = z.map(|v| match net.activation() {
                Activation::Tanh => v.tanh(),
                Activation::Softplus => (1.0 + v.exp()).ln(),
                Activation::Relu => v.max(0.0),
            });
        }
        h.dot(&net.params().output)
    }

    #[test]
    fn zero_network_is_zero() {
        let net = NeuralCritic::<f64>::zeros(3, &[4, 5, 2], Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[1.0, -2.0, 0.5]).unwrap(), 0.0);
        assert!(net.input_grad(&[1.0, -2.0, 0.5]).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linear_network() {
        let params = NetParams {
            weights: vec![],
            biases: vec![],
            output: DVector::from_row_slice(&[0.5, -2.0]),
        };
        let net = NeuralCritic::from_params(2, params, Activation::Tanh).unwrap();
        assert_eq!(net.forward(&[3.0, 1.0]).unwrap(), -0.5);
        assert_eq!(net.input_grad(&[7.0, 9.0]).unwrap().as_slice(), &[0.5, -2.0]);
    }

    #[test]
    fn forward_matches_reference() {
        let mut rng = seeded_rng(3);
        for act in [Activation::Tanh, Activation::Softplus, Activation::Relu] {
            let net = NeuralCritic::<f64>::new(2, &[6, 9, 4], act, &mut rng).unwrap();
            for x in [[0.3, -0.7], [2.0, 1.5], [-1.0, 0.0]] {
                let got = net.forward(&x).unwrap();
                assert!((got - reference_forward(&net, &x)).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn input_grad_matches_finite_differences() {
        let mut rng = seeded_rng(4);
        for act in [Activation::Tanh, Activation::Softplus] {
            let net = NeuralCritic::<f64>::new(3, &[8, 8, 8], act, &mut rng).unwrap();
            let x = [0.2, -0.4, 1.1];
            let g = net.input_grad(&x).unwrap();
            for a in 0..3 {
                let (mut xp, mut xm) = (x, x);
                xp[a] += 1e-5;
                xm[a] -= 1e-5;
                let fd = (net.forward(&xp).unwrap() - net.forward(&xm).unwrap()) / 2e-5;
                assert!((fd - g[a]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn batch_and_point_agree() {
        let mut rng = seeded_rng(1);
        let net = NeuralCritic::<f64>::new(2, &[5, 5], Activation::Tanh, &mut rng).unwrap();
        let pts = [0.1, 0.2, -0.5, 0.9, 1.3, -1.1];
        let vals = net.forward_batch(&pts).unwrap();
        let grads = net.input_grad_batch(&pts).unwrap();
        for i in 0..3 {
            assert_eq!(vals[i], net.forward(&pts[2 * i..2 * i + 2]).unwrap());
            assert_eq!(grads.column(i).into_owned(), net.input_grad(&pts[2 * i..2 * i + 2]).unwrap());
        }
    }

    #[test]
    fn flat_roundtrip_and_shapes() {
        let mut rng = seeded_rng(2);
        let net = NeuralCritic::<f64>::new(2, &[3, 4], Activation::Tanh, &mut rng).unwrap();
        assert_eq!(net.n_params(), 2 * 3 + 3 + 3 * 4 + 4 + 4);
        let flat = net.params().to_flat();
        let mut other = NeuralCritic::<f64>::zeros(2, &[3, 4], Activation::Tanh).unwrap();
        other.params_mut().set_flat(&flat).unwrap();
        assert_eq!(other, net);
        assert!(other.params_mut().set_flat(&flat[1..]).is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(NeuralCritic::<f64>::zeros(0, &[3], Activation::Tanh).is_err());
        assert!(NeuralCritic::<f64>::zeros(2, &[3, 0], Activation::Tanh).is_err());
        let params = NetParams::<f64> {
            weights: vec![DMatrix::zeros(3, 2)],
            biases: vec![DVector::zeros(3)],
            output: DVector::zeros(2),
        };
        assert!(NeuralCritic::from_params(2, params, Activation::Tanh).is_err());
        let net = NeuralCritic::<f64>::zeros(2, &[3], Activation::Tanh).unwrap();
        assert!(net.forward(&[1.0]).is_err());
    }

    #[test]
    fn activation_derivatives() {
        for act in [Activation::Tanh, Activation::Softplus] {
            for z in [-3.0, -0.4, 0.0, 0.7, 2.5] {
                let (v, d1, d2) = act.eval::<f64>(z);
                let (vp, d1p, _) = act.eval::<f64>(z + 1e-6);
                let (vm, d1m, _) = act.eval::<f64>(z - 1e-6);
                assert!(((vp - vm) / 2e-6 - d1).abs() < 1e-8);
                assert!(((d1p - d1m) / 2e-6 - d2).abs() < 1e-8);
                assert!(v.is_finite());
            }
        }
        assert_eq!(Activation::from_name("relu").unwrap(), Activation::Relu);
        assert!(Activation::from_name("gelu").is_err());
    }
}
