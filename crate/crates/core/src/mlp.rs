//! Fully connected networks with softplus hidden activations and
//! hand-written reverse- and forward-mode derivatives.
//!
//! Parameters live in one flat vector, layer by layer, each layer storing its
//! `out x in` row-major weight matrix followed by its bias. Gradients use the
//! same layout so optimizers and finite-difference checks can treat a network
//! as a plain `&mut [f64]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    sizes: Vec<usize>,
    params: Vec<f64>,
    beta: f64,
    input_shift: Vec<f64>,
    input_scale: Vec<f64>,
}

/// Activations recorded by [`Mlp::forward_batch`] for a later backward pass.
pub struct BatchCache {
    n: usize,
    input: Vec<f64>,
    /// Pre-activations per layer (`n x width`).
    pre: Vec<Vec<f64>>,
    /// Post-activations per hidden layer.
    post: Vec<Vec<f64>>,
}

impl BatchCache {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Output logits, `n x out` row-major.
    pub fn output(&self) -> &[f64] {
        self.pre.last().expect("network has layers")
    }
}

#[inline(always)]
fn softplus(z: f64, beta: f64) -> f64 {
    let bz = beta * z;
    (bz.max(0.0) + (-bz.abs()).exp().ln_1p()) / beta
}

#[inline(always)]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `C (m x n) = alpha A (m x k) B (k x n) + beta C` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the slices cover every strided element touched (checked above in
    // debug builds, guaranteed by the callers' shapes in release builds).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

impl Mlp {
    /// He-initialized network with layer widths `sizes = [in, h1, .., out]`.
    pub fn new(sizes: &[usize], beta: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut mlp = Self::zeros(sizes, beta)?;
        for l in 0..mlp.num_layers() {
            let (fan_in, fan_out) = (sizes[l], sizes[l + 1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
            let w = mlp.weight_offset(l);
            for p in &mut mlp.params[w..w + fan_in * fan_out] {
                *p = normal.sample(rng);
            }
        }
        Ok(mlp)
    }

    pub fn zeros(sizes: &[usize], beta: f64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "invalid layer sizes {sizes:?}"
            )));
        }
        if !(beta > 0.0) {
            return Err(Error::InvalidArgument("softplus beta must be positive".into()));
        }
        let count = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        Ok(Mlp {
            sizes: sizes.to_vec(),
            params: vec![0.0; count],
            beta,
            input_shift: vec![0.0; sizes[0]],
            input_scale: vec![1.0; sizes[0]],
        })
    }

    /// Rebuilds a network from its serialized pieces.
    pub fn from_parts(
        sizes: Vec<usize>,
        beta: f64,
        input_shift: Vec<f64>,
        input_scale: Vec<f64>,
        params: Vec<f64>,
    ) -> Result<Self> {
        let mut mlp = Self::zeros(&sizes, beta)?;
        if params.len() != mlp.params.len() {
            return Err(Error::dims("network parameters", mlp.params.len(), params.len()));
        }
        if input_shift.len() != sizes[0] || input_scale.len() != sizes[0] {
            return Err(Error::dims("input normalization", sizes[0], input_shift.len()));
        }
        mlp.params = params;
        mlp.input_shift = input_shift;
        mlp.input_scale = input_scale;
        Ok(mlp)
    }

    /// Inputs are mapped to `(x - shift) * scale` before the first layer.
    pub fn set_input_normalization(&mut self, shift: &[f64], scale: &[f64]) {
        assert_eq!(shift.len(), self.sizes[0]);
        assert_eq!(scale.len(), self.sizes[0]);
        self.input_shift = shift.to_vec();
        self.input_scale = scale.to_vec();
    }

    pub fn input_shift(&self) -> &[f64] {
        &self.input_shift
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn weight_offset(&self, layer: usize) -> usize {
        self.sizes
            .windows(2)
            .take(layer)
            .map(|w| w[0] * w[1] + w[1])
            .sum()
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.weight_offset(l);
        (&self.params[w..w + i * o], &self.params[w + i * o..w + i * o + o])
    }

    /// Zeroes the output layer's weights and bias.
    pub fn zero_output_layer(&mut self) {
        let l = self.num_layers() - 1;
        let w = self.weight_offset(l);
        let len = self.sizes[l] * self.sizes[l + 1] + self.sizes[l + 1];
        self.params[w..w + len].fill(0.0);
    }

    /// Multiplies the output layer's weights by `factor`.
    pub fn scale_output_layer(&mut self, factor: f64) {
        let l = self.num_layers() - 1;
        let w = self.weight_offset(l);
        let len = self.sizes[l] * self.sizes[l + 1];
        for p in &mut self.params[w..w + len] {
            *p *= factor;
        }
    }

    pub fn output_bias_mut(&mut self) -> &mut [f64] {
        let l = self.num_layers() - 1;
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.weight_offset(l) + i * o;
        &mut self.params[w..w + o]
    }

    /// Single-point forward pass writing the output logits into `out`.
    pub fn forward_point(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.input_dim());
        let mut cur: Vec<f64> = x
            .iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((v, s), c)| (v - s) * c)
            .collect();
        let mut next = Vec::with_capacity(64);
        let last = self.num_layers() - 1;
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let i = self.sizes[l];
            next.clear();
            for (row, bias) in w.chunks_exact(i).zip(b) {
                let z = bias + row.iter().zip(&cur).map(|(a, h)| a * h).sum::<f64>();
                next.push(if l == last { z } else { softplus(z, self.beta) });
            }
            std::mem::swap(&mut cur, &mut next);
        }
        out.copy_from_slice(&cur);
    }

    /// Forward pass plus the Jacobian of the output logits with respect to the
    /// first `k` inputs, written row-major into `jac` (`out x k`).
    pub fn forward_point_jacobian(&self, x: &[f64], k: usize, out: &mut [f64], jac: &mut [f64]) {
        let in_dim = self.input_dim();
        debug_assert!(k <= in_dim);
        let mut cur: Vec<f64> = x
            .iter()
            .zip(&self.input_shift)
            .zip(&self.input_scale)
            .map(|((v, s), c)| (v - s) * c)
            .collect();
        // Tangents stored width-major: tan[j * k + t].
        let mut tan = vec![0.0; in_dim * k];
        for t in 0..k {
            tan[t * k + t] = self.input_scale[t];
        }
        let last = self.num_layers() - 1;
        let mut next = Vec::new();
        let mut next_tan = Vec::new();
        for l in 0..=last {
            let (w, b) = self.layer(l);
            let i = self.sizes[l];
            let o = self.sizes[l + 1];
            next.clear();
            next_tan.clear();
            next_tan.resize(o * k, 0.0);
            for (r, (row, bias)) in w.chunks_exact(i).zip(b).enumerate() {
                let z = bias + row.iter().zip(&cur).map(|(a, h)| a * h).sum::<f64>();
                let dz = &mut next_tan[r * k..(r + 1) * k];
                for (j, a) in row.iter().enumerate() {
                    for t in 0..k {
                        dz[t] += a * tan[j * k + t];
                    }
                }
                if l == last {
                    next.push(z);
                } else {
                    let g = sigmoid(self.beta * z);
                    dz.iter_mut().for_each(|v| *v *= g);
                    next.push(softplus(z, self.beta));
                }
            }
            std::mem::swap(&mut cur, &mut next);
            std::mem::swap(&mut tan, &mut next_tan);
        }
        out.copy_from_slice(&cur);
        jac.copy_from_slice(&tan);
    }

    /// Batched forward pass over `n` row-major inputs (`n x in`).
    pub fn forward_batch(&self, inputs: &[f64]) -> BatchCache {
        let in_dim = self.input_dim();
        assert_eq!(inputs.len() % in_dim, 0);
        let n = inputs.len() / in_dim;
        let mut input = inputs.to_vec();
        for row in input.chunks_exact_mut(in_dim) {
            for (v, (s, c)) in row.iter_mut().zip(self.input_shift.iter().zip(&self.input_scale)) {
                *v = (*v - s) * c;
            }
        }
        let last = self.num_layers() - 1;
        let mut pre = Vec::with_capacity(last + 1);
        let mut post: Vec<Vec<f64>> = Vec::with_capacity(last);
        for l in 0..=last {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let (w, b) = self.layer(l);
            let h = if l == 0 { &input } else { &post[l - 1] };
            let mut z = Vec::with_capacity(n * o);
            for _ in 0..n {
                z.extend_from_slice(b);
            }
            // Z = H Wᵀ + 1 bᵀ
            gemm(n, i, o, 1.0, h, i, 1, w, 1, i, 1.0, &mut z, o, 1);
            if l < last {
                post.push(z.iter().map(|&v| softplus(v, self.beta)).collect());
            }
            pre.push(z);
        }
        BatchCache {
            n,
            input,
            pre,
            post,
        }
    }

    /// Output logits for a batch of inputs.
    pub fn forward_batch_output(&self, inputs: &[f64]) -> Vec<f64> {
        let mut cache = self.forward_batch(inputs);
        cache.pre.pop().unwrap_or_default()
    }

    /// Reverse pass. `d_out` is the loss gradient on the output logits
    /// (`n x out`). Parameter gradients are accumulated into `grad`; the
    /// gradient with respect to the raw inputs is written to `d_input` when
    /// given.
    pub fn backward_batch(
        &self,
        cache: &BatchCache,
        d_out: &[f64],
        grad: &mut [f64],
        d_input: Option<&mut [f64]>,
    ) {
        let n = cache.n;
        assert_eq!(grad.len(), self.params.len());
        assert_eq!(d_out.len(), n * self.output_dim());
        let mut dz = d_out.to_vec();
        for l in (0..self.num_layers()).rev() {
            let (i, o) = (self.sizes[l], self.sizes[l + 1]);
            let w_off = self.weight_offset(l);
            let (w, _) = self.layer(l);
            let h = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            {
                let (gw, gb) = grad[w_off..w_off + i * o + o].split_at_mut(i * o);
                // dW (o x i) += dZᵀ H
                gemm(o, n, i, 1.0, &dz, 1, o, h, i, 1, 1.0, gw, i, 1);
                for row in dz.chunks_exact(o) {
                    for (g, d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
            if l == 0 && d_input.is_none() {
                break;
            }
            // dH (n x i) = dZ W
            let mut dh = vec![0.0; n * i];
            gemm(n, o, i, 1.0, &dz, o, 1, w, i, 1, 0.0, &mut dh, i, 1);
            if l == 0 {
                let d_input = d_input.expect("checked above");
                assert_eq!(d_input.len(), n * i);
                for (row_out, row_in) in d_input.chunks_exact_mut(i).zip(dh.chunks_exact(i)) {
                    for ((d, g), s) in row_out.iter_mut().zip(row_in).zip(&self.input_scale) {
                        *d = g * s;
                    }
                }
                break;
            }
            let z_prev = &cache.pre[l - 1];
            for (g, z) in dh.iter_mut().zip(z_prev) {
                *g *= sigmoid(self.beta * z);
            }
            dz = dh;
        }
    }
}

/// Gradient descent with heavy-ball momentum: `v ← μ v + g`, `θ ← θ − η v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(num_params: usize, lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: vec![0.0; num_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.velocity.len());
        for ((p, v), g) in params.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g;
            *p -= self.lr * *v;
        }
    }
}
