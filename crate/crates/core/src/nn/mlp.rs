//! Multilayer perceptrons with layer normalization and a recorded tape for
//! exact reverse-mode gradients.
//!
//! A hidden layer is `affine -> LayerNorm (optional) -> activation`; the
//! output layer is affine followed by the output transform. All operations
//! treat the leading axis as the batch axis.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::matrix::{accumulate_outer, mul_plain, mul_transposed, ColBlock, Matrix};
use crate::error::{Error, Result};

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_3;
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Selu,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA * z
                } else {
                    SELU_LAMBDA * SELU_ALPHA * z.exp_m1()
                }
            }
            Activation::Relu => z.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    #[inline]
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Selu => {
                if z > 0.0 {
                    SELU_LAMBDA
                } else {
                    a + SELU_LAMBDA * SELU_ALPHA
                }
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    fn code(self) -> u8 {
        match self {
            Activation::Selu => 0,
            Activation::Relu => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Selu),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputTransform {
    Identity,
    Sinh,
}

impl OutputTransform {
    fn code(self) -> u8 {
        match self {
            OutputTransform::Identity => 0,
            OutputTransform::Sinh => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(OutputTransform::Identity),
            1 => Some(OutputTransform::Sinh),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub in_dim: usize,
    pub hidden_dim: usize,
    pub n_hidden: usize,
    pub out_dim: usize,
    pub activation: Activation,
    pub layer_norm: bool,
    pub output_transform: OutputTransform,
}

impl MlpSpec {
    /// Input width of dense layer `l` (0-based, output layer last).
    pub fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.in_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn layer_out(&self, l: usize) -> usize {
        if l == self.n_hidden {
            self.out_dim
        } else {
            self.hidden_dim
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_hidden + 1
    }

    pub fn n_params(&self) -> usize {
        let dense: usize = (0..self.n_layers())
            .map(|l| self.layer_out(l) * (self.layer_in(l) + 1))
            .sum();
        let norms = if self.layer_norm {
            self.n_hidden * 2 * self.hidden_dim
        } else {
            0
        };
        dense + norms
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || (self.n_hidden > 0 && self.hidden_dim == 0) {
            return Err(Error::Shape(format!("degenerate MLP spec {self:?}")));
        }
        Ok(())
    }

    /// Fixed-width descriptor used by the checkpoint container.
    pub fn to_descriptor(&self) -> [u64; 7] {
        [
            self.in_dim as u64,
            self.hidden_dim as u64,
            self.n_hidden as u64,
            self.out_dim as u64,
            self.activation.code() as u64,
            self.layer_norm as u64,
            self.output_transform.code() as u64,
        ]
    }

    pub fn from_descriptor(d: [u64; 7]) -> Option<Self> {
        Some(Self {
            in_dim: d[0] as usize,
            hidden_dim: d[1] as usize,
            n_hidden: d[2] as usize,
            out_dim: d[3] as usize,
            activation: Activation::from_code(u8::try_from(d[4]).ok()?)?,
            layer_norm: match d[5] {
                0 => false,
                1 => true,
                _ => return None,
            },
            output_transform: OutputTransform::from_code(u8::try_from(d[6]).ok()?)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormParams {
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
    pub norms: Vec<LayerNormParams>,
}

impl MlpParams {
    pub fn zeros(spec: &MlpSpec) -> Self {
        let layers = (0..spec.n_layers())
            .map(|l| Dense {
                weight: Matrix::zeros(spec.layer_out(l), spec.layer_in(l)),
                bias: vec![0.0; spec.layer_out(l)],
            })
            .collect();
        let norms = if spec.layer_norm {
            (0..spec.n_hidden)
                .map(|_| LayerNormParams {
                    gain: vec![0.0; spec.hidden_dim],
                    offset: vec![0.0; spec.hidden_dim],
                })
                .collect()
        } else {
            Vec::new()
        };
        Self { layers, norms }
    }

    /// Parameter blocks in declaration order: for each layer its weight and
    /// bias, followed by that layer's norm gain and offset when present.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (l, d) in self.layers.iter().enumerate() {
            out.push(d.weight.data.as_slice());
            out.push(d.bias.as_slice());
            if let Some(n) = self.norms.get(l) {
                out.push(n.gain.as_slice());
                out.push(n.offset.as_slice());
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut norms = self.norms.iter_mut();
        for d in self.layers.iter_mut() {
            out.push(d.weight.data.as_mut_slice());
            out.push(d.bias.as_mut_slice());
            if let Some(n) = norms.next() {
                out.push(n.gain.as_mut_slice());
                out.push(n.offset.as_mut_slice());
            }
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for x in t {
                *x *= s;
            }
        }
    }
}

/// Shape of the first layer's input.
#[derive(Debug, Clone, PartialEq)]
pub enum TapeInput {
    /// One input row per batch item.
    Dense(Matrix),
    /// Row `e` is the concatenation `[nodes[recv[e]], nodes[send[e]]]`;
    /// the first affine layer is evaluated through per-node projections.
    Paired {
        nodes: Matrix,
        recv: Vec<usize>,
        send: Vec<usize>,
    },
}

impl TapeInput {
    fn width(&self) -> usize {
        match self {
            TapeInput::Dense(m) => m.cols,
            TapeInput::Paired { nodes, .. } => 2 * nodes.cols,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct HiddenRecord {
    /// Pre-activation (after LayerNorm when enabled).
    z: Matrix,
    /// Normalized pre-affine values and per-row inverse std, when LayerNorm
    /// is enabled.
    xhat: Option<Matrix>,
    inv_std: Vec<f64>,
    /// Activation output.
    a: Matrix,
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tape {
    spec: MlpSpec,
    input: TapeInput,
    hidden: Vec<HiddenRecord>,
    out_pre: Matrix,
    output: Matrix,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        &self.output
    }

    pub fn input(&self) -> &TapeInput {
        &self.input
    }
}

/// Gradient with respect to the MLP input.
#[derive(Debug, Clone, PartialEq)]
pub enum InputGrad {
    Dense(Matrix),
    /// Gradient per node row, summed over both roles (receiver and sender).
    Nodes(Matrix),
}

impl InputGrad {
    pub fn into_matrix(self) -> Matrix {
        match self {
            InputGrad::Dense(m) | InputGrad::Nodes(m) => m,
        }
    }
}

fn layer_norm_rows(pre: &Matrix, norm: &LayerNormParams) -> (Matrix, Matrix, Vec<f64>) {
    let h = pre.cols;
    let mut xhat = Matrix::zeros(pre.rows, h);
    let mut z = Matrix::zeros(pre.rows, h);
    let mut inv_std = Vec::with_capacity(pre.rows);
    for r in 0..pre.rows {
        let row = pre.row(r);
        let mean = row.iter().sum::<f64>() / h as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / h as f64;
        let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        inv_std.push(is);
        let xr = xhat.row_mut(r);
        for (o, x) in xr.iter_mut().zip(row) {
            *o = (x - mean) * is;
        }
        let xr = xhat.row(r).to_vec();
        for ((o, x), (g, b)) in z.row_mut(r).iter_mut().zip(&xr).zip(norm.gain.iter().zip(&norm.offset)) {
            *o = g * x + b;
        }
    }
    (xhat, z, inv_std)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    pub fn new(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        spec.validate()?;
        let expected = MlpParams::zeros(&spec);
        let shapes_match = expected.layers.len() == params.layers.len()
            && expected.norms.len() == params.norms.len()
            && expected
                .tensors()
                .iter()
                .zip(params.tensors())
                .all(|(a, b)| a.len() == b.len())
            && expected
                .layers
                .iter()
                .zip(&params.layers)
                .all(|(a, b)| a.weight.rows == b.weight.rows && a.weight.cols == b.weight.cols);
        if !shapes_match {
            return Err(Error::Shape(format!("parameters do not match spec {spec:?}")));
        }
        Ok(Self { spec, params })
    }

    /// Normal weights (std `1/sqrt(fan_in)` for SELU and the linear output
    /// layer, `sqrt(2/fan_in)` for ReLU), zero biases, unit gains.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = MlpParams::zeros(&spec);
        for (l, d) in params.layers.iter_mut().enumerate() {
            let fan_in = spec.layer_in(l) as f64;
            let std = if l == spec.n_hidden {
                1.0 / fan_in.sqrt()
            } else {
                match spec.activation {
                    Activation::Selu => 1.0 / fan_in.sqrt(),
                    Activation::Relu => (2.0 / fan_in).sqrt(),
                }
            };
            for w in &mut d.weight.data {
                let n: f64 = StandardNormal.sample(&mut rng);
                *w = std * n;
            }
        }
        for n in &mut params.norms {
            n.gain.iter_mut().for_each(|g| *g = 1.0);
        }
        Ok(Self { spec, params })
    }

    fn check_finite(m: &Matrix, layer: usize) -> Result<()> {
        if m.is_finite() {
            Ok(())
        } else {
            Err(Error::Numerical(format!("non-finite activation in layer {layer}")))
        }
    }

    fn first_affine(&self, input: &TapeInput) -> Matrix {
        let l0 = &self.params.layers[0];
        let mut pre = match input {
            TapeInput::Dense(x) => mul_transposed(x, ColBlock::all(&l0.weight)),
            TapeInput::Paired { nodes, recv, send } => {
                let d = nodes.cols;
                let pl = mul_transposed(
                    nodes,
                    ColBlock {
                        m: &l0.weight,
                        start: 0,
                        width: d,
                    },
                );
                let pr = mul_transposed(
                    nodes,
                    ColBlock {
                        m: &l0.weight,
                        start: d,
                        width: d,
                    },
                );
                let h = l0.weight.rows;
                let mut pre = Matrix::zeros(recv.len(), h);
                for (e, (&r, &s)) in recv.iter().zip(send).enumerate() {
                    let (a, b) = (pl.row(r), pr.row(s));
                    for ((o, x), y) in pre.row_mut(e).iter_mut().zip(a).zip(b) {
                        *o = x + y;
                    }
                }
                pre
            }
        };
        pre.add_row_vector(&l0.bias);
        pre
    }

    pub fn forward(&self, input: TapeInput) -> Result<(Matrix, Tape)> {
        let (output, tape) = self.forward_unchecked(input)?;
        Self::check_finite(&output, self.spec.n_hidden)?;
        Ok((output, tape))
    }

    /// Forward pass that leaves the output finiteness check to the caller.
    pub fn forward_unchecked(&self, input: TapeInput) -> Result<(Matrix, Tape)> {
        if input.width() != self.spec.in_dim {
            return Err(Error::Shape(format!(
                "input width {} does not match MLP input {}",
                input.width(),
                self.spec.in_dim
            )));
        }
        if let TapeInput::Paired { nodes, recv, send } = &input {
            if recv.len() != send.len() || recv.iter().chain(send).any(|&i| i >= nodes.rows) {
                return Err(Error::Shape("paired input indices out of range".into()));
            }
        }
        let mut pre = self.first_affine(&input);
        let mut hidden: Vec<HiddenRecord> = Vec::with_capacity(self.spec.n_hidden);
        for l in 0..self.spec.n_hidden {
            if l > 0 {
                let layer = &self.params.layers[l];
                pre = mul_transposed(&hidden[l - 1].a, ColBlock::all(&layer.weight));
                pre.add_row_vector(&layer.bias);
            }
            let (xhat, z, inv_std) = match self.params.norms.get(l) {
                Some(norm) => {
                    let (xh, z, is) = layer_norm_rows(&pre, norm);
                    (Some(xh), z, is)
                }
                None => (None, pre.clone(), Vec::new()),
            };
            let act = self.spec.activation;
            let a = Matrix::from_vec(z.rows, z.cols, z.data.iter().map(|&v| act.apply(v)).collect());
            Self::check_finite(&a, l)?;
            hidden.push(HiddenRecord { z, xhat, inv_std, a });
        }
        let out_pre = match hidden.last() {
            Some(last) => {
                let layer = &self.params.layers[self.spec.n_hidden];
                let mut o = mul_transposed(&last.a, ColBlock::all(&layer.weight));
                o.add_row_vector(&layer.bias);
                o
            }
            None => pre,
        };
        let output = match self.spec.output_transform {
            OutputTransform::Identity => out_pre.clone(),
            OutputTransform::Sinh => Matrix::from_vec(
                out_pre.rows,
                out_pre.cols,
                out_pre.data.iter().map(|v| v.sinh()).collect(),
            ),
        };
        Ok((
            output.clone(),
            Tape {
                spec: self.spec,
                input,
                hidden,
                out_pre,
                output,
            },
        ))
    }

    pub fn forward_dense(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward(TapeInput::Dense(input.clone()))?.0)
    }

    /// Reverse pass: accumulates parameter gradients into `grads` and
    /// returns the input gradient when `want_input_grad` is set.
    pub fn backward(
        &self,
        tape: &Tape,
        d_output: &Matrix,
        grads: &mut MlpParams,
        want_input_grad: bool,
    ) -> Result<Option<InputGrad>> {
        if tape.spec != self.spec {
            return Err(Error::Shape("tape was recorded with a different MLP spec".into()));
        }
        if d_output.rows != tape.output.rows || d_output.cols != tape.output.cols {
            return Err(Error::Shape(format!(
                "output gradient {}x{} vs output {}x{}",
                d_output.rows, d_output.cols, tape.output.rows, tape.output.cols
            )));
        }
        let n_hidden = self.spec.n_hidden;
        let mut d_pre = match self.spec.output_transform {
            OutputTransform::Identity => d_output.clone(),
            OutputTransform::Sinh => Matrix::from_vec(
                d_output.rows,
                d_output.cols,
                d_output
                    .data
                    .iter()
                    .zip(&tape.out_pre.data)
                    .map(|(g, p)| g * p.cosh())
                    .collect(),
            ),
        };

        for l in (0..=n_hidden).rev() {
            if l < n_hidden {
                // d_pre currently holds the gradient w.r.t. this layer's activation output.
                let rec = &tape.hidden[l];
                let act = self.spec.activation;
                let mut dz = d_pre;
                for ((g, &z), &a) in dz.data.iter_mut().zip(&rec.z.data).zip(&rec.a.data) {
                    *g *= act.derivative(z, a);
                }
                d_pre = match (&rec.xhat, self.params.norms.get(l)) {
                    (Some(xhat), Some(norm)) => {
                        let gn = &mut grads.norms[l];
                        let h = dz.cols as f64;
                        let mut out = Matrix::zeros(dz.rows, dz.cols);
                        for r in 0..dz.rows {
                            let dzr = dz.row(r);
                            let xr = xhat.row(r);
                            let mut mean_dx = 0.0;
                            let mut mean_dxx = 0.0;
                            for j in 0..dzr.len() {
                                gn.gain[j] += dzr[j] * xr[j];
                                gn.offset[j] += dzr[j];
                                let dx = dzr[j] * norm.gain[j];
                                mean_dx += dx;
                                mean_dxx += dx * xr[j];
                            }
                            mean_dx /= h;
                            mean_dxx /= h;
                            let is = rec.inv_std[r];
                            for (j, o) in out.row_mut(r).iter_mut().enumerate() {
                                let dx = dzr[j] * norm.gain[j];
                                *o = is * (dx - mean_dx - xr[j] * mean_dxx);
                            }
                        }
                        out
                    }
                    _ => dz,
                };
            }
            // d_pre: gradient w.r.t. the affine output of layer l.
            let layer = &self.params.layers[l];
            d_pre.col_sums_into(&mut grads.layers[l].bias);
            if l > 0 {
                let prev_a = &tape.hidden[l - 1].a;
                accumulate_outer(&mut grads.layers[l].weight, 0, &d_pre, prev_a);
                d_pre = mul_plain(&d_pre, ColBlock::all(&layer.weight));
            } else {
                return Ok(self.first_layer_backward(&tape.input, &d_pre, grads, want_input_grad));
            }
        }
        unreachable!("loop returns at layer 0")
    }

    fn first_layer_backward(
        &self,
        input: &TapeInput,
        d_pre: &Matrix,
        grads: &mut MlpParams,
        want_input_grad: bool,
    ) -> Option<InputGrad> {
        let w = &self.params.layers[0].weight;
        match input {
            TapeInput::Dense(x) => {
                accumulate_outer(&mut grads.layers[0].weight, 0, d_pre, x);
                want_input_grad.then(|| InputGrad::Dense(mul_plain(d_pre, ColBlock::all(w))))
            }
            TapeInput::Paired { nodes, recv, send } => {
                let d = nodes.cols;
                let h = d_pre.cols;
                let mut s_recv = Matrix::zeros(nodes.rows, h);
                let mut s_send = Matrix::zeros(nodes.rows, h);
                for (e, (&r, &s)) in recv.iter().zip(send).enumerate() {
                    let g = d_pre.row(e);
                    for (o, x) in s_recv.row_mut(r).iter_mut().zip(g) {
                        *o += x;
                    }
                    for (o, x) in s_send.row_mut(s).iter_mut().zip(g) {
                        *o += x;
                    }
                }
                accumulate_outer(&mut grads.layers[0].weight, 0, &s_recv, nodes);
                accumulate_outer(&mut grads.layers[0].weight, d, &s_send, nodes);
                want_input_grad.then(|| {
                    let mut g = mul_plain(
                        &s_recv,
                        ColBlock {
                            m: w,
                            start: 0,
                            width: d,
                        },
                    );
                    let g2 = mul_plain(
                        &s_send,
                        ColBlock {
                            m: w,
                            start: d,
                            width: d,
                        },
                    );
                    for (a, b) in g.data.iter_mut().zip(&g2.data) {
                        *a += b;
                    }
                    InputGrad::Nodes(g)
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(act: Activation, ln: bool, out: OutputTransform) -> MlpSpec {
        MlpSpec {
            in_dim: 6,
            hidden_dim: 8,
            n_hidden: 2,
            out_dim: 3,
            activation: act,
            layer_norm: ln,
            output_transform: out,
        }
    }

    fn input(rows: usize, cols: usize, s: f64) -> Matrix {
        Matrix::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|i| (i as f64 * 0.71 + s).sin()).collect(),
        )
    }

    /// Scalar objective sum(output * weights) for finite-difference checks.
    fn objective(mlp: &Mlp, x: &TapeInput, wts: &Matrix) -> f64 {
        let (y, _) = mlp.forward(x.clone()).unwrap();
        y.data.iter().zip(&wts.data).map(|(a, b)| a * b).sum()
    }

    fn check_gradients(mlp: &Mlp, x: TapeInput) {
        let (y, tape) = mlp.forward(x.clone()).unwrap();
        let wts = input(y.rows, y.cols, 3.0);
        let mut grads = MlpParams::zeros(&mlp.spec);
        let gin = mlp
            .backward(&tape, &wts, &mut grads, true)
            .unwrap()
            .unwrap()
            .into_matrix();
        let h = 1e-6;
        let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.to_vec()).collect();
        let n_tensors = analytic.len();
        for ti in 0..n_tensors {
            for pi in 0..analytic[ti].len() {
                let mut p = mlp.clone();
                p.params.tensors_mut()[ti][pi] += h;
                let fp = objective(&p, &x, &wts);
                p.params.tensors_mut()[ti][pi] -= 2.0 * h;
                let fm = objective(&p, &x, &wts);
                let fd = (fp - fm) / (2.0 * h);
                let a = analytic[ti][pi];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
                assert!(err < 1e-5, "tensor {ti} param {pi}: analytic {a} fd {fd}");
            }
        }
        // Input gradient.
        let base = match &x {
            TapeInput::Dense(m) => m.clone(),
            TapeInput::Paired { nodes, .. } => nodes.clone(),
        };
        for i in 0..base.data.len() {
            let perturb = |delta: f64| {
                let mut m = base.clone();
                m.data[i] += delta;
                match &x {
                    TapeInput::Dense(_) => TapeInput::Dense(m),
                    TapeInput::Paired { recv, send, .. } => TapeInput::Paired {
                        nodes: m,
                        recv: recv.clone(),
                        send: send.clone(),
                    },
                }
            };
            let fd = (objective(mlp, &perturb(h), &wts) - objective(mlp, &perturb(-h), &wts)) / (2.0 * h);
            let a = gin.data[i];
            assert!(
                (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7) < 1e-5,
                "input {i}: {a} vs {fd}"
            );
        }
    }

    #[test]
    fn zero_network_outputs_zero() {
        let s = spec(Activation::Selu, true, OutputTransform::Identity);
        let mlp = Mlp::new(s, MlpParams::zeros(&s)).unwrap();
        let y = mlp.forward_dense(&input(4, 6, 0.0)).unwrap();
        assert!(y.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_linear_layer_with_sinh() {
        let s = MlpSpec {
            in_dim: 1,
            hidden_dim: 0,
            n_hidden: 0,
            out_dim: 1,
            activation: Activation::Relu,
            layer_norm: false,
            output_transform: OutputTransform::Sinh,
        };
        let mut p = MlpParams::zeros(&s);
        p.layers[0].weight.data[0] = 2.0;
        p.layers[0].bias[0] = 1.0;
        let mlp = Mlp::new(s, p).unwrap();
        let (y, tape) = mlp
            .forward(TapeInput::Dense(Matrix::from_vec(1, 1, vec![0.5])))
            .unwrap();
        assert!((y.data[0] - 2.0f64.sinh()).abs() < 1e-15);
        assert!((y.data[0] - 3.6269).abs() < 1e-4);

        let mut g = MlpParams::zeros(&s);
        let gin = mlp
            .backward(&tape, &Matrix::from_vec(1, 1, vec![1.0]), &mut g, true)
            .unwrap()
            .unwrap();
        let c = 2.0f64.cosh();
        assert!((g.layers[0].weight.data[0] - 0.5 * c).abs() < 1e-14);
        assert!((g.layers[0].bias[0] - c).abs() < 1e-14);
        assert!((gin.into_matrix().data[0] - 2.0 * c).abs() < 1e-14);
    }

    #[test]
    fn linear_gradients_closed_form() {
        let s = MlpSpec {
            in_dim: 1,
            hidden_dim: 0,
            n_hidden: 0,
            out_dim: 1,
            activation: Activation::Relu,
            layer_norm: false,
            output_transform: OutputTransform::Identity,
        };
        let mut p = MlpParams::zeros(&s);
        p.layers[0].weight.data[0] = -1.5;
        p.layers[0].bias[0] = 0.25;
        let mlp = Mlp::new(s, p).unwrap();
        let (_, tape) = mlp
            .forward(TapeInput::Dense(Matrix::from_vec(1, 1, vec![0.8])))
            .unwrap();
        let mut g = MlpParams::zeros(&s);
        let gin = mlp
            .backward(&tape, &Matrix::from_vec(1, 1, vec![1.0]), &mut g, true)
            .unwrap()
            .unwrap();
        assert_eq!(g.layers[0].weight.data[0], 0.8);
        assert_eq!(g.layers[0].bias[0], 1.0);
        assert_eq!(gin.into_matrix().data[0], -1.5);
    }

    #[test]
    fn sinh_derivative_at_zero_is_one() {
        let s = MlpSpec {
            in_dim: 1,
            hidden_dim: 0,
            n_hidden: 0,
            out_dim: 1,
            activation: Activation::Relu,
            layer_norm: false,
            output_transform: OutputTransform::Sinh,
        };
        let mlp = Mlp::new(s, MlpParams::zeros(&s)).unwrap();
        let (_, tape) = mlp
            .forward(TapeInput::Dense(Matrix::from_vec(1, 1, vec![0.3])))
            .unwrap();
        let mut g = MlpParams::zeros(&s);
        mlp.backward(&tape, &Matrix::from_vec(1, 1, vec![1.0]), &mut g, false)
            .unwrap();
        assert_eq!(g.layers[0].bias[0], 1.0);
    }

    #[test]
    fn layer_norm_of_constant_row_is_zero() {
        let s = MlpSpec {
            in_dim: 2,
            hidden_dim: 4,
            n_hidden: 1,
            out_dim: 1,
            activation: Activation::Relu,
            layer_norm: true,
            output_transform: OutputTransform::Identity,
        };
        let mut p = MlpParams::zeros(&s);
        p.layers[0].bias = vec![3.0; 4];
        p.norms[0].gain = vec![1.0; 4];
        let mlp = Mlp::new(s, p).unwrap();
        let (_, tape) = mlp.forward(TapeInput::Dense(input(3, 2, 0.0))).unwrap();
        let xhat = tape.hidden[0].xhat.as_ref().unwrap();
        assert!(xhat.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for act in [Activation::Selu, Activation::Relu] {
            for ln in [true, false] {
                for out in [OutputTransform::Identity, OutputTransform::Sinh] {
                    let mlp = Mlp::init(spec(act, ln, out), 42).unwrap();
                    check_gradients(&mlp, TapeInput::Dense(input(5, 6, 0.3)));
                }
            }
        }
    }

    #[test]
    fn paired_input_matches_concatenated_dense_input() {
        let mlp = Mlp::init(spec(Activation::Selu, true, OutputTransform::Sinh), 9).unwrap();
        let nodes = input(4, 3, 1.0);
        let recv = vec![0, 1, 3, 3, 2];
        let send = vec![1, 0, 2, 0, 3];
        let mut dense = Matrix::zeros(5, 6);
        for e in 0..5 {
            dense.row_mut(e)[..3].copy_from_slice(nodes.row(recv[e]));
            dense.row_mut(e)[3..].copy_from_slice(nodes.row(send[e]));
        }
        let a = mlp
            .forward(TapeInput::Paired {
                nodes: nodes.clone(),
                recv: recv.clone(),
                send: send.clone(),
            })
            .unwrap()
            .0;
        let b = mlp.forward_dense(&dense).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((x - y).abs() < 1e-12);
        }
        check_gradients(&mlp, TapeInput::Paired { nodes, recv, send });
    }

    #[test]
    fn init_is_deterministic_with_expected_statistics() {
        let s = MlpSpec {
            in_dim: 128,
            hidden_dim: 128,
            n_hidden: 2,
            out_dim: 128,
            activation: Activation::Selu,
            layer_norm: true,
            output_transform: OutputTransform::Identity,
        };
        let a = Mlp::init(s, 1).unwrap();
        assert_eq!(a, Mlp::init(s, 1).unwrap());
        assert_ne!(a, Mlp::init(s, 2).unwrap());
        let w = &a.params.layers[1].weight.data;
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        let std = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std * 128f64.sqrt() - 1.0).abs() < 0.1);
        assert!(a.params.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        assert!(a.params.norms.iter().all(|n| n.gain.iter().all(|&g| g == 1.0)));

        let r = Mlp::init(
            MlpSpec {
                activation: Activation::Relu,
                ..s
            },
            1,
        )
        .unwrap();
        let w = &r.params.layers[0].weight.data;
        let std = (w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64).sqrt();
        assert!((std / (2.0f64 / 128.0).sqrt() - 1.0).abs() < 0.1);
    }

    #[test]
    fn deep_selu_stack_keeps_activation_scale() {
        let s = MlpSpec {
            in_dim: 64,
            hidden_dim: 64,
            n_hidden: 8,
            out_dim: 1,
            activation: Activation::Selu,
            layer_norm: false,
            output_transform: OutputTransform::Identity,
        };
        let mlp = Mlp::init(s, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::from_vec(
            256,
            64,
            (0..256 * 64).map(|_| StandardNormal.sample(&mut rng)).collect(),
        );
        let (_, tape) = mlp.forward(TapeInput::Dense(x)).unwrap();
        let a = &tape.hidden.last().unwrap().a.data;
        let mean = a.iter().sum::<f64>() / a.len() as f64;
        let std = (a.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / a.len() as f64).sqrt();
        assert!((0.5..=2.0).contains(&std), "std {std}");
    }

    #[test]
    fn sinh_is_odd() {
        for x in [0.1, 1.5, 7.25, 30.0] {
            assert_eq!(f64::sinh(-x), -f64::sinh(x));
        }
    }

    #[test]
    fn shape_errors() {
        let s = spec(Activation::Selu, true, OutputTransform::Identity);
        let mlp = Mlp::init(s, 0).unwrap();
        assert!(matches!(
            mlp.forward(TapeInput::Dense(input(2, 5, 0.0))),
            Err(Error::Shape(_))
        ));
        let (_, tape) = mlp.forward(TapeInput::Dense(input(2, 6, 0.0))).unwrap();
        let mut g = MlpParams::zeros(&s);
        assert!(mlp.backward(&tape, &Matrix::zeros(3, 3), &mut g, false).is_err());
        let other = Mlp::init(MlpSpec { hidden_dim: 4, ..s }, 0).unwrap();
        assert!(other
            .backward(&tape, &Matrix::zeros(2, 3), &mut MlpParams::zeros(&other.spec), false)
            .is_err());
        assert!(Mlp::new(s, MlpParams::zeros(&MlpSpec { out_dim: 2, ..s })).is_err());
    }

    #[test]
    fn non_finite_output_is_reported() {
        let s = spec(Activation::Relu, false, OutputTransform::Sinh);
        let mut mlp = Mlp::init(s, 0).unwrap();
        mlp.params.layers[2].bias = vec![1e5; 3];
        assert!(matches!(mlp.forward_dense(&input(1, 6, 0.0)), Err(Error::Numerical(_))));
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let mlp = Mlp::init(spec(Activation::Selu, true, OutputTransform::Sinh), 4).unwrap();
        let x = input(9, 6, 0.2);
        let (a, t1) = mlp.forward(TapeInput::Dense(x.clone())).unwrap();
        let (b, t2) = mlp.forward(TapeInput::Dense(x)).unwrap();
        assert_eq!(a, b);
        assert_eq!(t1, t2);
        assert_eq!(t1.output(), &a);
    }
}
