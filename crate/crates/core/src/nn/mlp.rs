use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Scalar;
use crate::error::{Error, Result};

/// Affine image of the `tanh` output activation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputRange {
    pub lo: f64,
    pub hi: f64,
}

impl OutputRange {
    pub const SIGNED_UNIT: OutputRange = OutputRange { lo: -1.0, hi: 1.0 };
    pub const UNIT: OutputRange = OutputRange { lo: 0.0, hi: 1.0 };
}

/// Architecture of a coordinate network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub frequency_bands: usize,
    pub output_range: OutputRange,
}

impl MlpSpec {
    /// Coordinate network defaults: 10 frequency bands, 4 hidden layers of width 256.
    pub fn coordinate(input_dim: usize, output_dim: usize, output_range: OutputRange) -> Self {
        MlpSpec {
            input_dim,
            output_dim,
            hidden_width: 256,
            hidden_layers: 4,
            frequency_bands: 10,
            output_range,
        }
    }

    pub fn encoded_dim(&self) -> usize {
        PositionalEncoding::new(self.frequency_bands).output_dim(self.input_dim)
    }

    /// `(fan_in, fan_out)` of every dense layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut shapes = Vec::with_capacity(self.hidden_layers + 1);
        let mut fan_in = self.encoded_dim();
        for _ in 0..self.hidden_layers {
            shapes.push((fan_in, self.hidden_width));
            fan_in = self.hidden_width;
        }
        shapes.push((fan_in, self.output_dim));
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_width == 0 {
            return Err(Error::invalid("network dimensions must be positive"));
        }
        if !(self.output_range.lo < self.output_range.hi) {
            return Err(Error::invalid("network output range must be increasing"));
        }
        Ok(())
    }
}

/// Fourier-feature encoding `[x, sin(2^k pi x), cos(2^k pi x)]` for `k < bands`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PositionalEncoding {
    bands: usize,
}

impl PositionalEncoding {
    pub fn new(bands: usize) -> Self {
        PositionalEncoding { bands }
    }

    pub fn output_dim(&self, input_dim: usize) -> usize {
        input_dim * (1 + 2 * self.bands)
    }

    fn frequency(k: usize) -> f64 {
        PI * (1u64 << k) as f64
    }

    pub fn encode<T: Scalar>(&self, x: ArrayView2<T>) -> Array2<T> {
        let (n, d) = x.dim();
        let mut out = Array2::<T>::zeros((n, self.output_dim(d)));
        for (src, mut dst) in x.outer_iter().zip(out.outer_iter_mut()) {
            for j in 0..d {
                dst[j] = src[j];
            }
            for k in 0..self.bands {
                let w = Self::frequency(k);
                let base = d + 2 * k * d;
                for j in 0..d {
                    let a = w * src[j].f64();
                    dst[base + j] = T::of(a.sin());
                    dst[base + d + j] = T::of(a.cos());
                }
            }
        }
        out
    }

    /// Pulls a gradient on the encoded features back to the raw coordinates.
    pub fn backward<T: Scalar>(&self, x: ArrayView2<T>, grad_encoded: ArrayView2<T>) -> Array2<T> {
        let (n, d) = x.dim();
        let mut grad = Array2::<T>::zeros((n, d));
        for ((src, g), mut dst) in x
            .outer_iter()
            .zip(grad_encoded.outer_iter())
            .zip(grad.outer_iter_mut())
        {
            for j in 0..d {
                let mut acc = g[j].f64();
                for k in 0..self.bands {
                    let w = Self::frequency(k);
                    let base = d + 2 * k * d;
                    let a = w * src[j].f64();
                    acc += g[base + j].f64() * w * a.cos() - g[base + d + j].f64() * w * a.sin();
                }
                dst[j] = T::of(acc);
            }
        }
        grad
    }
}

/// Positionally-encoded multilayer perceptron with SiLU hidden units and a
/// bounded `tanh` output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    spec: MlpSpec,
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
}

/// Activations retained by [`Mlp::forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Array2<T>,
    /// Inputs to each dense layer (the encoded input first).
    layer_inputs: Vec<Array2<T>>,
    /// Pre-activations of the hidden layers.
    hidden_pre: Vec<Array2<T>>,
    output_tanh: Array2<T>,
}

/// Parameter gradients, shaped like the network.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGradients<T> {
    pub weights: Vec<Array2<T>>,
    pub biases: Vec<Array1<T>>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn silu<T: Scalar>(z: T) -> T {
    let zf = z.f64();
    T::of(zf * sigmoid(zf))
}

fn silu_derivative<T: Scalar>(z: T) -> T {
    let zf = z.f64();
    let s = sigmoid(zf);
    T::of(s * (1.0 + zf * (1.0 - s)))
}

impl<T: Scalar> Mlp<T> {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new<R: Rng + ?Sized>(spec: MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (fan_in, fan_out) in spec.layer_shapes() {
            let bound = 1.0 / (fan_in as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((fan_in, fan_out), || {
                T::of(rng.random_range(-bound..bound))
            }));
            biases.push(Array1::from_shape_simple_fn(fan_out, || {
                T::of(rng.random_range(-bound..bound))
            }));
        }
        Ok(Mlp {
            spec,
            weights,
            biases,
        })
    }

    /// Rebuilds a network from a flat parameter vector in [`Mlp::flat_params`] order.
    pub fn from_flat(spec: MlpSpec, flat: &[T]) -> Result<Self> {
        spec.validate()?;
        if flat.len() != spec.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                spec.param_count(),
                flat.len()
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        let mut at = 0;
        for (fan_in, fan_out) in spec.layer_shapes() {
            let w = Array2::from_shape_vec((fan_in, fan_out), flat[at..at + fan_in * fan_out].to_vec())
                .expect("shape matches slice length");
            at += fan_in * fan_out;
            let b = Array1::from(flat[at..at + fan_out].to_vec());
            at += fan_out;
            weights.push(w);
            biases.push(b);
        }
        Ok(Mlp {
            spec,
            weights,
            biases,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn weights(&self) -> &[Array2<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<T>] {
        &self.biases
    }

    /// Every parameter, layer by layer: weight (row-major, fan_in x fan_out) then bias.
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.spec.param_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        Mlp {
            spec: self.spec.clone(),
            weights: self.weights.iter().map(|w| w.mapv(|v| U::of(v.f64()))).collect(),
            biases: self.biases.iter().map(|b| b.mapv(|v| U::of(v.f64()))).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub(crate) fn params_mut(&mut self) -> impl Iterator<Item = &mut [T]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| {
                [
                    w.as_slice_mut().expect("weights are contiguous"),
                    b.as_slice_mut().expect("biases are contiguous"),
                ]
            })
    }

    fn check_input(&self, x: &ArrayView2<T>) {
        assert_eq!(
            x.ncols(),
            self.spec.input_dim,
            "network expects {} input columns",
            self.spec.input_dim
        );
    }

    fn finish_output(&self, z: &mut Array2<T>) {
        let OutputRange { lo, hi } = self.spec.output_range;
        let half = 0.5 * (hi - lo);
        z.mapv_inplace(|v| {
            let t = T::of(v.f64().tanh());
            T::of(lo + half * (t.f64() + 1.0))
        });
    }

    /// Forward pass without keeping intermediate activations.
    pub fn infer(&self, x: ArrayView2<T>) -> Array2<T> {
        self.check_input(&x);
        let enc = PositionalEncoding::new(self.spec.frequency_bands);
        let mut h = enc.encode(x);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(w);
            z += b;
            if l < last {
                z.mapv_inplace(silu);
            }
            h = z;
        }
        self.finish_output(&mut h);
        h
    }

    pub fn forward(&self, x: ArrayView2<T>) -> (Array2<T>, ForwardCache<T>) {
        self.check_input(&x);
        let enc = PositionalEncoding::new(self.spec.frequency_bands);
        let mut h = enc.encode(x);
        let mut layer_inputs = Vec::with_capacity(self.weights.len());
        let mut hidden_pre = Vec::with_capacity(self.weights.len() - 1);
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = h.dot(w);
            z += b;
            layer_inputs.push(h);
            if l < last {
                h = z.mapv(silu);
                hidden_pre.push(z);
            } else {
                h = z;
            }
        }
        let output_tanh = h.mapv(|v| T::of(v.f64().tanh()));
        let OutputRange { lo, hi } = self.spec.output_range;
        let half = 0.5 * (hi - lo);
        let out = output_tanh.mapv(|t| T::of(lo + half * (t.f64() + 1.0)));
        let cache = ForwardCache {
            input: x.to_owned(),
            layer_inputs,
            hidden_pre,
            output_tanh,
        };
        (out, cache)
    }

    /// Reverse pass. Returns parameter gradients and, when requested, the
    /// gradient with respect to the raw (unencoded) input coordinates.
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        grad_out: ArrayView2<T>,
        want_input_grad: bool,
    ) -> (MlpGradients<T>, Option<Array2<T>>) {
        let OutputRange { lo, hi } = self.spec.output_range;
        let half = T::of(0.5 * (hi - lo));
        let mut g = Array2::<T>::zeros(grad_out.raw_dim());
        Zip::from(&mut g)
            .and(&grad_out)
            .and(&cache.output_tanh)
            .for_each(|g, &go, &t| *g = go * half * (T::one() - t * t));

        let n_layers = self.weights.len();
        let mut grad_w = vec![Array2::<T>::zeros((0, 0)); n_layers];
        let mut grad_b = vec![Array1::<T>::zeros(0); n_layers];
        let mut input_grad = None;
        for l in (0..n_layers).rev() {
            let gw = cache.layer_inputs[l].t().dot(&g);
            // single-column outputs make `dot` pick column-major storage
            grad_w[l] = if gw.is_standard_layout() {
                gw
            } else {
                gw.as_standard_layout().into_owned()
            };
            grad_b[l] = g.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = g.dot(&self.weights[l].t());
                Zip::from(&mut prev)
                    .and(&cache.hidden_pre[l - 1])
                    .for_each(|p, &z| *p *= silu_derivative(z));
                g = prev;
            } else if want_input_grad {
                let grad_enc = g.dot(&self.weights[0].t());
                let enc = PositionalEncoding::new(self.spec.frequency_bands);
                input_grad = Some(enc.backward(cache.input.view(), grad_enc.view()));
            }
        }
        (
            MlpGradients {
                weights: grad_w,
                biases: grad_b,
            },
            input_grad,
        )
    }
}

impl<T: Scalar> MlpGradients<T> {
    pub fn zeros_like(net: &Mlp<T>) -> Self {
        MlpGradients {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGradients<T>) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn flat(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub(crate) fn slices(&self) -> impl Iterator<Item = &[T]> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| {
            [
                w.as_slice().expect("gradients are contiguous"),
                b.as_slice().expect("gradients are contiguous"),
            ]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_spec() -> MlpSpec {
        MlpSpec {
            input_dim: 2,
            output_dim: 3,
            hidden_width: 8,
            hidden_layers: 2,
            frequency_bands: 2,
            output_range: OutputRange::UNIT,
        }
    }

    fn scalar_objective(net: &Mlp<f64>, x: &Array2<f64>, weights: &Array2<f64>) -> f64 {
        (net.infer(x.view()) * weights).sum()
    }

    #[test]
    fn encoding_layout_and_dimension() {
        let enc = PositionalEncoding::new(2);
        let x = array![[0.25f64, -0.5]];
        let e = enc.encode(x.view());
        assert_eq!(e.ncols(), 10);
        assert_eq!(e[[0, 0]], 0.25);
        assert!((e[[0, 2]] - (PI * 0.25).sin()).abs() < 1e-12);
        assert!((e[[0, 5]] - (PI * -0.5).cos()).abs() < 1e-12);
        assert!((e[[0, 6]] - (2.0 * PI * 0.25).sin()).abs() < 1e-12);
    }

    #[test]
    fn output_respects_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::<f32>::new(toy_spec(), &mut rng).unwrap();
        let x = Array2::from_shape_fn((200, 2), |(i, j)| ((i * 7 + j * 3) % 41) as f32 / 20.0 - 1.0);
        let y = net.infer(x.view());
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        let (y2, _) = net.forward(x.view());
        assert_eq!(y, y2);
    }

    #[test]
    fn parameter_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = Mlp::<f64>::new(toy_spec(), &mut rng).unwrap();
        let x = array![[0.1, -0.3], [0.7, 0.2], [-0.9, 0.5]];
        let upstream = Array2::from_shape_fn((3, 3), |(i, j)| (i as f64 - 1.0) * 0.5 + j as f64 * 0.2);
        let (_, cache) = net.forward(x.view());
        let (grads, _) = net.backward(&cache, upstream.view(), false);
        let analytic = grads.flat();
        let base = net.flat_params();
        let h = 1e-5;
        for idx in (0..base.len()).step_by(7) {
            let mut plus = base.clone();
            plus[idx] += h;
            let mut minus = base.clone();
            minus[idx] -= h;
            let fp = scalar_objective(&Mlp::from_flat(toy_spec(), &plus).unwrap(), &x, &upstream);
            let fm = scalar_objective(&Mlp::from_flat(toy_spec(), &minus).unwrap(), &x, &upstream);
            let fd = (fp - fm) / (2.0 * h);
            let err = (fd - analytic[idx]).abs() / fd.abs().max(analytic[idx].abs()).max(1e-6);
            assert!(err < 1e-5, "param {idx}: fd {fd} vs analytic {}", analytic[idx]);
        }
    }

    #[test]
    fn input_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::<f64>::new(toy_spec(), &mut rng).unwrap();
        let x = array![[0.15, -0.35], [-0.6, 0.45]];
        let upstream = array![[1.0, -0.5, 0.25], [0.3, 0.3, -1.0]];
        let (_, cache) = net.forward(x.view());
        let (_, gx) = net.backward(&cache, upstream.view(), true);
        let gx = gx.unwrap();
        let h = 1e-6;
        for i in 0..2 {
            for j in 0..2 {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (scalar_objective(&net, &xp, &upstream) - scalar_objective(&net, &xm, &upstream)) / (2.0 * h);
                assert!((fd - gx[[i, j]]).abs() < 1e-5 * fd.abs().max(1.0));
            }
        }
    }

    #[test]
    fn flat_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Mlp::<f32>::new(toy_spec(), &mut rng).unwrap();
        let back = Mlp::from_flat(toy_spec(), &net.flat_params()).unwrap();
        assert_eq!(net, back);
        assert!(Mlp::<f32>::from_flat(toy_spec(), &[0.0; 3]).is_err());
    }
}
