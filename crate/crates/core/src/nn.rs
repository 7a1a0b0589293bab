//! Minimal dense feed-forward network with explicit reverse-mode gradients
//! and the Adam optimizer. Batched computation on dense row-major f64
//! matrices, batch dimension leading. One network instance plus its
//! optimizer state form a single-owner mutable unit.

use std::io::{self, Read, Write};

use crate::rng::CounterRng;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    Shape { expected: String, got: String, context: &'static str },
    #[error("parameter snapshot malformed: {0}")]
    Snapshot(String),
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == d), "ragged rows");
        Matrix { rows: n, cols: d, data: rows.into_iter().flatten().collect() }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn at_mut(&mut self, i: usize, j: usize) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&x| f(x)).collect() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    ReLU,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::ReLU => x.max(0.0),
            Activation::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
        }
    }

    /// Derivative at pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::ReLU => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => {
                let s = Activation::Sigmoid.apply(z);
                s * (1.0 - s)
            }
        }
    }
}

/// One affine layer `y = act(x W^T + b)` with `W: [out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub w: Matrix,
    pub b: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero biases.
    pub fn init(fan_in: usize, fan_out: usize, activation: Activation, rng: &mut CounterRng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let mut w = Matrix::zeros(fan_out, fan_in);
        for x in w.data.iter_mut() {
            *x = rng.uniform_range(-bound, bound);
        }
        DenseLayer { w, b: vec![0.0; fan_out], activation }
    }

    pub fn in_dim(&self) -> usize {
        self.w.cols
    }

    pub fn out_dim(&self) -> usize {
        self.w.rows
    }
}

/// Dense feed-forward network: an ordered list of layers with composing
/// shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

/// Per-layer inputs and pre-activations retained by [`Mlp::forward`] for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

/// Gradients mirroring an [`Mlp`]'s layers.
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub d_w: Vec<Matrix>,
    pub d_b: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            d_w: net.layers.iter().map(|l| Matrix::zeros(l.w.rows, l.w.cols)).collect(),
            d_b: net.layers.iter().map(|l| vec![0.0; l.b.len()]).collect(),
        }
    }
}

impl Mlp {
    /// Build a network from `widths = [in, h1, ..., out]` with `hidden_act`
    /// on every layer but the last, which gets `final_act`.
    pub fn new(
        widths: &[usize],
        hidden_act: Activation,
        final_act: Activation,
        rng: &mut CounterRng,
    ) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 2 == widths.len() { final_act } else { hidden_act };
                DenseLayer::init(w[0], w[1], act, rng)
            })
            .collect();
        Mlp { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.w.cols)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.rows)
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.data.len() + l.b.len()).sum()
    }

    /// Forward pass on a `[batch, in]` matrix; the cache retains what the
    /// backward pass needs.
    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, ForwardCache), NnError> {
        if x.cols != self.input_dim() {
            return Err(NnError::Shape {
                expected: format!("[batch, {}]", self.input_dim()),
                got: format!("[{}, {}]", x.rows, x.cols),
                context: "forward input",
            });
        }
        let mut cache = ForwardCache { inputs: Vec::new(), pre_activations: Vec::new() };
        let mut current = x.clone();
        for layer in &self.layers {
            let batch = current.rows;
            let (out_dim, in_dim) = (layer.w.rows, layer.w.cols);
            let mut z = Matrix::zeros(batch, out_dim);
            for b in 0..batch {
                let xin = current.row(b);
                for o in 0..out_dim {
                    let wrow = &layer.w.data[o * in_dim..(o + 1) * in_dim];
                    let mut acc = layer.b[o];
                    for k in 0..in_dim {
                        acc += wrow[k] * xin[k];
                    }
                    *z.at_mut(b, o) = acc;
                }
            }
            let a = z.map(|v| layer.activation.apply(v));
            cache.inputs.push(current);
            cache.pre_activations.push(z);
            current = a;
        }
        Ok((current, cache))
    }

    /// Exact reverse-mode gradients of the cached forward pass: returns the
    /// parameter gradients and the gradient with respect to the input.
    pub fn backward(&self, cache: &ForwardCache, d_y: &Matrix) -> Result<(MlpGrads, Matrix), NnError> {
        if cache.inputs.len() != self.layers.len() {
            return Err(NnError::Shape {
                expected: format!("{} cached layers", self.layers.len()),
                got: format!("{}", cache.inputs.len()),
                context: "backward cache",
            });
        }
        let last = self.layers.len() - 1;
        if d_y.cols != self.layers[last].w.rows || d_y.rows != cache.inputs[0].rows {
            return Err(NnError::Shape {
                expected: format!("[{}, {}]", cache.inputs[0].rows, self.layers[last].w.rows),
                got: format!("[{}, {}]", d_y.rows, d_y.cols),
                context: "backward output gradient",
            });
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut upstream = d_y.clone();
        for (idx, layer) in self.layers.iter().enumerate().rev() {
            let z = &cache.pre_activations[idx];
            let xin = &cache.inputs[idx];
            if z.rows != upstream.rows || z.cols != upstream.cols {
                return Err(NnError::Shape {
                    expected: format!("[{}, {}]", z.rows, z.cols),
                    got: format!("[{}, {}]", upstream.rows, upstream.cols),
                    context: "backward cache shape",
                });
            }
            let batch = z.rows;
            let (out_dim, in_dim) = (layer.w.rows, layer.w.cols);
            // dZ = dA * act'(Z)
            let mut dz = Matrix::zeros(batch, out_dim);
            for b in 0..batch {
                for o in 0..out_dim {
                    *dz.at_mut(b, o) = upstream.at(b, o) * layer.activation.derivative(z.at(b, o));
                }
            }
            let dw = &mut grads.d_w[idx];
            let db = &mut grads.d_b[idx];
            let mut dx = Matrix::zeros(batch, in_dim);
            for b in 0..batch {
                let xrow = xin.row(b);
                for o in 0..out_dim {
                    let g = dz.at(b, o);
                    db[o] += g;
                    let wrow = &layer.w.data[o * in_dim..(o + 1) * in_dim];
                    let dwrow = &mut dw.data[o * in_dim..(o + 1) * in_dim];
                    for k in 0..in_dim {
                        dwrow[k] += g * xrow[k];
                        *dx.at_mut(b, k) += g * wrow[k];
                    }
                }
            }
            upstream = dx;
        }
        Ok((grads, upstream))
    }

    pub fn flatten_params(&self, out: &mut Vec<f64>) {
        for layer in &self.layers {
            out.extend_from_slice(&layer.w.data);
            out.extend_from_slice(&layer.b);
        }
    }

    pub fn set_params(&mut self, flat: &[f64]) {
        let mut offset = 0;
        for layer in &mut self.layers {
            let nw = layer.w.data.len();
            layer.w.data.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            let nb = layer.b.len();
            layer.b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        assert_eq!(offset, flat.len(), "flat parameter length mismatch");
    }

    pub fn flatten_grads(grads: &MlpGrads, out: &mut Vec<f64>) {
        for (dw, db) in grads.d_w.iter().zip(&grads.d_b) {
            out.extend_from_slice(&dw.data);
            out.extend_from_slice(db);
        }
    }

    /// Flat binary parameter snapshot: little-endian u32 header with the
    /// layer count and each layer's `[out, in]` shape, then each layer's
    /// row-major weights followed by its biases as little-endian f64.
    pub fn save_params<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(&(self.layers.len() as u32).to_le_bytes())?;
        for layer in &self.layers {
            w.write_all(&(layer.w.rows as u32).to_le_bytes())?;
            w.write_all(&(layer.w.cols as u32).to_le_bytes())?;
        }
        for layer in &self.layers {
            for v in &layer.w.data {
                w.write_all(&v.to_le_bytes())?;
            }
            for v in &layer.b {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Load a snapshot produced by [`Mlp::save_params`] into this network;
    /// the stored shapes must match.
    pub fn load_params<R: Read>(&mut self, mut r: R) -> Result<(), NnError> {
        let io_err = |e: io::Error| NnError::Snapshot(format!("read failed: {e}"));
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(io_err)?;
        let n_layers = u32::from_le_bytes(u32buf) as usize;
        if n_layers != self.layers.len() {
            return Err(NnError::Snapshot(format!(
                "layer count {n_layers} does not match network with {}",
                self.layers.len()
            )));
        }
        let mut shapes = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let rows = u32::from_le_bytes(u32buf) as usize;
            r.read_exact(&mut u32buf).map_err(io_err)?;
            let cols = u32::from_le_bytes(u32buf) as usize;
            shapes.push((rows, cols));
        }
        for (layer, (rows, cols)) in self.layers.iter().zip(&shapes) {
            if layer.w.rows != *rows || layer.w.cols != *cols {
                return Err(NnError::Snapshot(format!(
                    "shape [{rows}, {cols}] does not match layer [{}, {}]",
                    layer.w.rows, layer.w.cols
                )));
            }
        }
        let mut f64buf = [0u8; 8];
        for layer in &mut self.layers {
            for v in layer.w.data.iter_mut() {
                r.read_exact(&mut f64buf).map_err(io_err)?;
                *v = f64::from_le_bytes(f64buf);
            }
            for v in layer.b.iter_mut() {
                r.read_exact(&mut f64buf).map_err(io_err)?;
                *v = f64::from_le_bytes(f64buf);
            }
        }
        Ok(())
    }
}

/// Adam optimizer state over a flat parameter vector.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
}

impl AdamState {
    pub fn new(n_params: usize, lr: f64) -> Self {
        AdamState {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
        }
    }

    /// One Adam update with bias correction, in place on `params`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), self.m.len(), "Adam state size mismatch");
        assert_eq!(params.len(), grads.len(), "gradient size mismatch");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps_hat);
        }
    }
}
