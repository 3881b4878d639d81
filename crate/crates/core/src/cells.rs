//! GRU, LSTM and dense layers with exact reverse-mode gradients through time.
//!
//! Gate weights act on the concatenation `[h_{t-1}, x_t]`, so every gate matrix
//! is `hidden × (hidden + input)` with the recurrent block in the leading
//! columns. Each gate also carries a bias column, zero at initialization.
//!
//! GRU step, with `m` the optional recurrent dropout mask held fixed over a
//! sequence and `h̄ = m ⊙ h_{t-1}`:
//!
//! ```text
//! z  = σ(W_z·[h̄, x] + b_z)
//! r  = σ(W_r·[h̄, x] + b_r)
//! h̃  = tanh(W·[r ⊙ h̄, x] + b)
//! h  = (1 − z) ⊙ h_{t-1} + z ⊙ h̃
//! ```
//!
//! The LSTM step uses the forget/input/output gate form
//! `c = f ⊙ c_{t-1} + i ⊙ c̃`, `h = o ⊙ tanh(c)`.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemv_acc, gemv_t_acc, outer_acc, Activation, Matrix, RandomStream};
use crate::scalar::Scalar;

/// The five model families compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    SimpleNN,
    LSTM1,
    GRU1,
    GRU1RecurrentDropout,
    GRU2Dropout,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::SimpleNN,
        Family::LSTM1,
        Family::GRU1,
        Family::GRU1RecurrentDropout,
        Family::GRU2Dropout,
    ];

    pub fn default_layer_sizes(self) -> Vec<usize> {
        match self {
            Family::SimpleNN => vec![25, 1],
            Family::LSTM1 | Family::GRU1 | Family::GRU1RecurrentDropout => vec![50, 1],
            Family::GRU2Dropout => vec![50, 10, 1],
        }
    }

    /// `(dropout, recurrent_dropout)` used by the family unless overridden.
    pub fn default_rates(self) -> (f64, f64) {
        match self {
            Family::SimpleNN | Family::GRU1 => (0.0, 0.0),
            Family::LSTM1 | Family::GRU1RecurrentDropout => (0.0, 0.1),
            Family::GRU2Dropout => (0.1, 0.1),
        }
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Family::SimpleNN => 125,
            _ => 100,
        }
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, Family::SimpleNN)
    }

    fn hidden_kinds(self) -> Vec<HiddenKind> {
        match self {
            Family::SimpleNN => vec![HiddenKind::Dense],
            Family::LSTM1 => vec![HiddenKind::Lstm],
            Family::GRU1 | Family::GRU1RecurrentDropout => vec![HiddenKind::Gru],
            Family::GRU2Dropout => vec![HiddenKind::Gru, HiddenKind::Gru],
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::SimpleNN => "SimpleNN",
            Family::LSTM1 => "LSTM1",
            Family::GRU1 => "GRU1",
            Family::GRU1RecurrentDropout => "GRU1RecurrentDropout",
            Family::GRU2Dropout => "GRU2Dropout",
        };
        f.write_str(s)
    }
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL
            .into_iter()
            .find(|f| f.to_string().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::Argument(format!("unknown model family '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum HiddenKind {
    Dense,
    Gru,
    Lstm,
}

/// Architecture descriptor. `layer_sizes` lists every layer output width,
/// ending with the single-node head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub family: Family,
    pub lookback: usize,
    pub input_width: usize,
    pub layer_sizes: Vec<usize>,
    pub dropout_rate: f64,
    pub recurrent_dropout_rate: f64,
}

impl NetworkSpec {
    /// Family topology with its default sizes and dropout rates.
    pub fn new(family: Family, lookback: usize, input_width: usize) -> Result<Self> {
        let (dropout_rate, recurrent_dropout_rate) = family.default_rates();
        let spec = Self {
            family,
            lookback,
            input_width,
            layer_sizes: family.default_layer_sizes(),
            dropout_rate,
            recurrent_dropout_rate,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_layer_sizes(mut self, sizes: Vec<usize>) -> Result<Self> {
        self.layer_sizes = sizes;
        self.validate()?;
        Ok(self)
    }

    pub fn with_dropout(mut self, dropout: f64, recurrent: f64) -> Result<Self> {
        self.dropout_rate = dropout;
        self.recurrent_dropout_rate = recurrent;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lookback == 0 || self.input_width == 0 {
            return Err(Error::Argument(
                "lookback and input width must be positive".into(),
            ));
        }
        for (name, rate) in [
            ("dropout", self.dropout_rate),
            ("recurrent dropout", self.recurrent_dropout_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Argument(format!("{name} rate {rate} outside [0,1)")));
            }
        }
        let hidden = self.family.hidden_kinds();
        if self.layer_sizes.len() != hidden.len() + 1 {
            return Err(Error::Argument(format!(
                "{} expects {} layer sizes, got {:?}",
                self.family,
                hidden.len() + 1,
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) || *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::Argument(format!(
                "layer sizes {:?} must be positive and end in a single output",
                self.layer_sizes
            )));
        }
        Ok(())
    }

    /// Width of the vector fed to the first layer.
    pub fn first_input_width(&self) -> usize {
        if self.family.is_recurrent() {
            self.input_width
        } else {
            self.lookback * self.input_width
        }
    }

    fn layer_shapes(&self) -> Vec<(LayerShape, usize, usize)> {
        let kinds = self.family.hidden_kinds();
        let mut out = Vec::with_capacity(self.layer_sizes.len());
        let mut input = self.first_input_width();
        for (kind, &size) in kinds.iter().zip(&self.layer_sizes) {
            let shape = match kind {
                HiddenKind::Dense => LayerShape::Dense(Activation::Tanh),
                HiddenKind::Gru => LayerShape::Gru,
                HiddenKind::Lstm => LayerShape::Lstm,
            };
            out.push((shape, input, size));
            input = size;
        }
        out.push((LayerShape::Dense(Activation::Identity), input, 1));
        out
    }

    /// Number of trainable scalars; a pure function of the spec.
    pub fn parameter_count(&self) -> usize {
        self.layer_shapes()
            .iter()
            .map(|&(shape, input, out)| match shape {
                LayerShape::Dense(_) => out * input + out,
                LayerShape::Gru => 3 * (out * (out + input) + out),
                LayerShape::Lstm => 4 * (out * (out + input) + out),
            })
            .sum()
    }

    /// Number of layers that take dropout masks (all but the head).
    pub fn hidden_layer_count(&self) -> usize {
        self.layer_sizes.len() - 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LayerShape {
    Dense(Activation),
    Gru,
    Lstm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T> {
    pub w_update: Matrix<T>,
    pub w_reset: Matrix<T>,
    pub w_cand: Matrix<T>,
    pub b_update: Matrix<T>,
    pub b_reset: Matrix<T>,
    pub b_cand: Matrix<T>,
}

impl<T: Scalar> GruParams<T> {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Matrix::zeros(hidden, hidden + input);
        let b = Matrix::zeros(hidden, 1);
        Self {
            w_update: w.clone(),
            w_reset: w.clone(),
            w_cand: w,
            b_update: b.clone(),
            b_reset: b.clone(),
            b_cand: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_update.rows()
    }

    pub fn input(&self) -> usize {
        self.w_update.cols() - self.hidden()
    }

    fn check(&self) -> Result<()> {
        let s = self.w_update.shape();
        for w in [&self.w_reset, &self.w_cand] {
            if w.shape() != s {
                return Err(Error::shape("gru weights", s, w.shape()));
            }
        }
        for b in [&self.b_update, &self.b_reset, &self.b_cand] {
            if b.shape() != (s.0, 1) {
                return Err(Error::shape("gru bias", (s.0, 1), b.shape()));
            }
        }
        Ok(())
    }
}

/// Intermediates of one GRU step, kept for backpropagation.
#[derive(Debug, Clone, PartialEq)]
pub struct GruStep<T> {
    pub z: Matrix<T>,
    pub r: Matrix<T>,
    pub cand: Matrix<T>,
    pub h: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    pub w_forget: Matrix<T>,
    pub w_input: Matrix<T>,
    pub w_cand: Matrix<T>,
    pub w_output: Matrix<T>,
    pub b_forget: Matrix<T>,
    pub b_input: Matrix<T>,
    pub b_cand: Matrix<T>,
    pub b_output: Matrix<T>,
}

impl<T: Scalar> LstmParams<T> {
    pub fn zeros(hidden: usize, input: usize) -> Self {
        let w = Matrix::zeros(hidden, hidden + input);
        let b = Matrix::zeros(hidden, 1);
        Self {
            w_forget: w.clone(),
            w_input: w.clone(),
            w_cand: w.clone(),
            w_output: w,
            b_forget: b.clone(),
            b_input: b.clone(),
            b_cand: b.clone(),
            b_output: b,
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_forget.rows()
    }

    pub fn input(&self) -> usize {
        self.w_forget.cols() - self.hidden()
    }

    fn check(&self) -> Result<()> {
        let s = self.w_forget.shape();
        for w in [&self.w_input, &self.w_cand, &self.w_output] {
            if w.shape() != s {
                return Err(Error::shape("lstm weights", s, w.shape()));
            }
        }
        for b in [&self.b_forget, &self.b_input, &self.b_cand, &self.b_output] {
            if b.shape() != (s.0, 1) {
                return Err(Error::shape("lstm bias", (s.0, 1), b.shape()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmStep<T> {
    pub f: Matrix<T>,
    pub i: Matrix<T>,
    pub cand: Matrix<T>,
    pub c: Matrix<T>,
    pub o: Matrix<T>,
    pub h: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<T> {
    pub w: Matrix<T>,
    pub b: Matrix<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseParams<T> {
    pub fn zeros(out: usize, input: usize, activation: Activation) -> Self {
        Self {
            w: Matrix::zeros(out, input),
            b: Matrix::zeros(out, 1),
            activation,
        }
    }

    fn forward(&self, x: &[T]) -> Vec<T> {
        let mut y = self.b.as_slice().to_vec();
        let mut acc = vec![T::zero(); y.len()];
        gemv_acc(&self.w, x, &mut acc);
        for (yi, ai) in y.iter_mut().zip(acc) {
            *yi = self.activation.apply(ai + *yi);
        }
        y
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer<T> {
    Dense(DenseParams<T>),
    Gru(GruParams<T>),
    Lstm(LstmParams<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        match self {
            Layer::Dense(p) => vec![&p.w, &p.b],
            Layer::Gru(p) => vec![
                &p.w_update,
                &p.w_reset,
                &p.w_cand,
                &p.b_update,
                &p.b_reset,
                &p.b_cand,
            ],
            Layer::Lstm(p) => vec![
                &p.w_forget,
                &p.w_input,
                &p.w_cand,
                &p.w_output,
                &p.b_forget,
                &p.b_input,
                &p.b_cand,
                &p.b_output,
            ],
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        match self {
            Layer::Dense(p) => vec![&mut p.w, &mut p.b],
            Layer::Gru(p) => vec![
                &mut p.w_update,
                &mut p.w_reset,
                &mut p.w_cand,
                &mut p.b_update,
                &mut p.b_reset,
                &mut p.b_cand,
            ],
            Layer::Lstm(p) => vec![
                &mut p.w_forget,
                &mut p.w_input,
                &mut p.w_cand,
                &mut p.w_output,
                &mut p.b_forget,
                &mut p.b_input,
                &mut p.b_cand,
                &mut p.b_output,
            ],
        }
    }

    fn output_size(&self) -> usize {
        match self {
            Layer::Dense(p) => p.w.rows(),
            Layer::Gru(p) => p.hidden(),
            Layer::Lstm(p) => p.hidden(),
        }
    }

    fn is_recurrent(&self) -> bool {
        !matches!(self, Layer::Dense(_))
    }
}

/// Ordered parameter tensors of a network. Gradients use the same container.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(T::zero());
        }
        z
    }

    pub fn tensors(&self) -> Vec<&Matrix<T>> {
        self.layers.iter().flat_map(Layer::tensors).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix<T>> {
        self.layers.iter_mut().flat_map(Layer::tensors_mut).collect()
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All scalars in storage order.
    pub fn flatten(&self) -> Vec<T> {
        self.tensors()
            .iter()
            .flat_map(|t| t.as_slice().iter().copied())
            .collect()
    }

    pub fn assign_flat(&mut self, values: &[T]) -> Result<()> {
        if values.len() != self.scalar_count() {
            return Err(Error::Consistency(format!(
                "expected {} parameters, got {}",
                self.scalar_count(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.as_mut_slice().copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &ParamSet<T>) -> Result<()> {
        let others = other.tensors();
        let mine = self.tensors_mut();
        if mine.len() != others.len() {
            return Err(Error::Consistency("parameter sets differ in layout".into()));
        }
        for (a, b) in mine.into_iter().zip(others) {
            if a.shape() != b.shape() {
                return Err(Error::shape("parameter add", a.shape(), b.shape()));
            }
            for (x, &y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, s: T) {
        for t in self.tensors_mut() {
            for x in t.as_mut_slice() {
                *x *= s;
            }
        }
    }

    /// Global L2 norm over every tensor.
    pub fn norm(&self) -> T {
        self.tensors()
            .iter()
            .fold(T::zero(), |acc, t| acc + t.sum_squares())
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }
}

/// Per-layer dropout masks for one sequence. Entries are 0 or `1/(1-rate)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    pub layers: Vec<LayerMasks<T>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerMasks<T> {
    /// Applied to the layer input; for recurrent layers the same mask is used at every timestep.
    pub input: Option<Vec<T>>,
    /// Applied to `h_{t-1}` inside the gate products, fixed over the sequence.
    pub recurrent: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentNetwork<T> {
    pub spec: NetworkSpec,
    pub params: ParamSet<T>,
}

fn glorot_limit(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn glorot_gate<T: Scalar>(hidden: usize, input: usize, rng: &mut RandomStream) -> Matrix<T> {
    let rec = glorot_limit(hidden, hidden);
    let inp = glorot_limit(input, hidden);
    Matrix::from_fn(hidden, hidden + input, |_, c| {
        let lim = if c < hidden { rec } else { inp };
        T::of(rng.next_uniform(-lim, lim).expect("positive limit"))
    })
}

impl<T: Scalar> RecurrentNetwork<T> {
    /// Network with every parameter zero.
    pub fn zeros(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(shape, input, out)| match shape {
                LayerShape::Dense(act) => Layer::Dense(DenseParams::zeros(out, input, act)),
                LayerShape::Gru => Layer::Gru(GruParams::zeros(out, input)),
                LayerShape::Lstm => Layer::Lstm(LstmParams::zeros(out, input)),
            })
            .collect();
        Ok(Self {
            spec,
            params: ParamSet { layers },
        })
    }

    /// Glorot-uniform weights (input and recurrent blocks limited separately), zero biases.
    pub fn init(spec: NetworkSpec, rng: &mut RandomStream) -> Result<Self> {
        let mut net = Self::zeros(spec)?;
        for layer in &mut net.params.layers {
            match layer {
                Layer::Dense(p) => {
                    let (out, input) = p.w.shape();
                    let lim = glorot_limit(input, out);
                    p.w = Matrix::from_fn(out, input, |_, _| {
                        T::of(rng.next_uniform(-lim, lim).expect("positive limit"))
                    });
                }
                Layer::Gru(p) => {
                    let (h, i) = (p.hidden(), p.input());
                    p.w_update = glorot_gate(h, i, rng);
                    p.w_reset = glorot_gate(h, i, rng);
                    p.w_cand = glorot_gate(h, i, rng);
                }
                Layer::Lstm(p) => {
                    let (h, i) = (p.hidden(), p.input());
                    p.w_forget = glorot_gate(h, i, rng);
                    p.w_input = glorot_gate(h, i, rng);
                    p.w_cand = glorot_gate(h, i, rng);
                    p.w_output = glorot_gate(h, i, rng);
                }
            }
        }
        Ok(net)
    }

    pub fn check(&self) -> Result<()> {
        self.spec.validate()?;
        let shapes = self.spec.layer_shapes();
        if shapes.len() != self.params.layers.len() {
            return Err(Error::Consistency(format!(
                "spec has {} layers, parameters have {}",
                shapes.len(),
                self.params.layers.len()
            )));
        }
        for ((shape, input, out), layer) in shapes.into_iter().zip(&self.params.layers) {
            let ok = match (shape, layer) {
                (LayerShape::Dense(act), Layer::Dense(p)) => {
                    p.activation == act
                        && p.w.shape() == (out, input)
                        && p.b.shape() == (out, 1)
                }
                (LayerShape::Gru, Layer::Gru(p)) => {
                    p.check()?;
                    p.w_update.shape() == (out, out + input)
                }
                (LayerShape::Lstm, Layer::Lstm(p)) => {
                    p.check()?;
                    p.w_forget.shape() == (out, out + input)
                }
                _ => false,
            };
            if !ok {
                return Err(Error::Consistency(
                    "parameter shapes do not match the network spec".into(),
                ));
            }
        }
        Ok(())
    }
}

fn mask_apply<T: Scalar>(x: &[T], mask: Option<&Vec<T>>) -> Vec<T> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(&a, &b)| a * b).collect(),
        None => x.to_vec(),
    }
}

fn concat<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let mut v = Vec::with_capacity(a.len() + b.len());
    v.extend_from_slice(a);
    v.extend_from_slice(b);
    v
}

fn gate<T: Scalar>(w: &Matrix<T>, b: &Matrix<T>, v: &[T], act: Activation) -> Vec<T> {
    let mut pre = vec![T::zero(); w.rows()];
    gemv_acc(w, v, &mut pre);
    pre.iter()
        .zip(b.as_slice())
        .map(|(&p, &bb)| act.apply(p + bb))
        .collect()
}

fn check_column<T: Scalar>(m: &Matrix<T>, rows: usize, what: &'static str) -> Result<()> {
    if m.shape() != (rows, 1) {
        return Err(Error::shape(what, (rows, 1), m.shape()));
    }
    Ok(())
}

struct GruRecord<T> {
    step: GruStep<T>,
    h_prev: Vec<T>,
    hm: Vec<T>,
    x: Vec<T>,
}

fn gru_forward<T: Scalar>(
    p: &GruParams<T>,
    x: &[T],
    h_prev: &[T],
    rec_mask: Option<&Vec<T>>,
) -> GruRecord<T> {
    let hm = mask_apply(h_prev, rec_mask);
    let v = concat(&hm, x);
    let z = gate(&p.w_update, &p.b_update, &v, Activation::Sigmoid);
    let r = gate(&p.w_reset, &p.b_reset, &v, Activation::Sigmoid);
    let rh: Vec<T> = r.iter().zip(&hm).map(|(&a, &b)| a * b).collect();
    let v2 = concat(&rh, x);
    let cand = gate(&p.w_cand, &p.b_cand, &v2, Activation::Tanh);
    let h: Vec<T> = (0..z.len())
        .map(|i| (T::one() - z[i]) * h_prev[i] + z[i] * cand[i])
        .collect();
    GruRecord {
        step: GruStep {
            z: Matrix::column(z),
            r: Matrix::column(r),
            cand: Matrix::column(cand),
            h: Matrix::column(h),
        },
        h_prev: h_prev.to_vec(),
        hm,
        x: x.to_vec(),
    }
}

/// One GRU step without dropout.
pub fn gru_step<T: Scalar>(p: &GruParams<T>, x: &Matrix<T>, h_prev: &Matrix<T>) -> Result<GruStep<T>> {
    p.check()?;
    check_column(x, p.input(), "gru input")?;
    check_column(h_prev, p.hidden(), "gru hidden state")?;
    Ok(gru_forward(p, x.as_slice(), h_prev.as_slice(), None).step)
}

/// Backward through one GRU step. `dh` is the total gradient reaching `h_t`;
/// returns `(d h_{t-1}, d x_t)` and accumulates into `g`.
fn gru_backward<T: Scalar>(
    p: &GruParams<T>,
    rec: &GruRecord<T>,
    dh: &[T],
    rec_mask: Option<&Vec<T>>,
    g: &mut GruParams<T>,
) -> (Vec<T>, Vec<T>) {
    let hsz = p.hidden();
    let z = rec.step.z.as_slice();
    let r = rec.step.r.as_slice();
    let cand = rec.step.cand.as_slice();
    let hp = &rec.h_prev;
    let hm = &rec.hm;

    let mut dhp = vec![T::zero(); hsz];
    let mut daz = vec![T::zero(); hsz];
    let mut dac = vec![T::zero(); hsz];
    for i in 0..hsz {
        let dz = dh[i] * (cand[i] - hp[i]);
        let dc = dh[i] * z[i];
        dhp[i] = dh[i] * (T::one() - z[i]);
        daz[i] = dz * z[i] * (T::one() - z[i]);
        dac[i] = dc * (T::one() - cand[i] * cand[i]);
    }

    let rh: Vec<T> = r.iter().zip(hm).map(|(&a, &b)| a * b).collect();
    let v2 = concat(&rh, &rec.x);
    outer_acc(&mut g.w_cand, &dac, &v2);
    for (b, &d) in g.b_cand.as_mut_slice().iter_mut().zip(&dac) {
        *b += d;
    }
    let mut dv2 = vec![T::zero(); v2.len()];
    gemv_t_acc(&p.w_cand, &dac, &mut dv2);

    let mut dhm = vec![T::zero(); hsz];
    let mut dar = vec![T::zero(); hsz];
    for i in 0..hsz {
        let drh = dv2[i];
        let dr = drh * hm[i];
        dhm[i] = drh * r[i];
        dar[i] = dr * r[i] * (T::one() - r[i]);
    }
    let mut dx = dv2[hsz..].to_vec();

    let v = concat(hm, &rec.x);
    outer_acc(&mut g.w_update, &daz, &v);
    outer_acc(&mut g.w_reset, &dar, &v);
    for (b, &d) in g.b_update.as_mut_slice().iter_mut().zip(&daz) {
        *b += d;
    }
    for (b, &d) in g.b_reset.as_mut_slice().iter_mut().zip(&dar) {
        *b += d;
    }
    let mut dv = vec![T::zero(); v.len()];
    gemv_t_acc(&p.w_update, &daz, &mut dv);
    gemv_t_acc(&p.w_reset, &dar, &mut dv);
    for i in 0..hsz {
        dhm[i] += dv[i];
    }
    for (a, &b) in dx.iter_mut().zip(&dv[hsz..]) {
        *a += b;
    }
    match rec_mask {
        Some(m) => {
            for i in 0..hsz {
                dhp[i] += dhm[i] * m[i];
            }
        }
        None => {
            for i in 0..hsz {
                dhp[i] += dhm[i];
            }
        }
    }
    (dhp, dx)
}

struct LstmRecord<T> {
    step: LstmStep<T>,
    c_prev: Vec<T>,
    hm: Vec<T>,
    x: Vec<T>,
    tanh_c: Vec<T>,
}

fn lstm_forward<T: Scalar>(
    p: &LstmParams<T>,
    x: &[T],
    h_prev: &[T],
    c_prev: &[T],
    rec_mask: Option<&Vec<T>>,
) -> LstmRecord<T> {
    let hm = mask_apply(h_prev, rec_mask);
    let v = concat(&hm, x);
    let f = gate(&p.w_forget, &p.b_forget, &v, Activation::Sigmoid);
    let i = gate(&p.w_input, &p.b_input, &v, Activation::Sigmoid);
    let cand = gate(&p.w_cand, &p.b_cand, &v, Activation::Tanh);
    let o = gate(&p.w_output, &p.b_output, &v, Activation::Sigmoid);
    let n = f.len();
    let c: Vec<T> = (0..n).map(|k| f[k] * c_prev[k] + i[k] * cand[k]).collect();
    let tanh_c: Vec<T> = c.iter().map(|&v| Activation::Tanh.apply(v)).collect();
    let h: Vec<T> = (0..n).map(|k| o[k] * tanh_c[k]).collect();
    LstmRecord {
        step: LstmStep {
            f: Matrix::column(f),
            i: Matrix::column(i),
            cand: Matrix::column(cand),
            c: Matrix::column(c),
            o: Matrix::column(o),
            h: Matrix::column(h),
        },
        c_prev: c_prev.to_vec(),
        hm,
        x: x.to_vec(),
        tanh_c,
    }
}

/// One LSTM step without dropout.
pub fn lstm_step<T: Scalar>(
    p: &LstmParams<T>,
    x: &Matrix<T>,
    h_prev: &Matrix<T>,
    c_prev: &Matrix<T>,
) -> Result<LstmStep<T>> {
    p.check()?;
    check_column(x, p.input(), "lstm input")?;
    check_column(h_prev, p.hidden(), "lstm hidden state")?;
    check_column(c_prev, p.hidden(), "lstm cell state")?;
    Ok(lstm_forward(p, x.as_slice(), h_prev.as_slice(), c_prev.as_slice(), None).step)
}

/// Returns `(d h_{t-1}, d c_{t-1}, d x_t)`.
fn lstm_backward<T: Scalar>(
    p: &LstmParams<T>,
    rec: &LstmRecord<T>,
    dh: &[T],
    dc_next: &[T],
    rec_mask: Option<&Vec<T>>,
    g: &mut LstmParams<T>,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hsz = p.hidden();
    let s = &rec.step;
    let (f, i, cand, o) = (
        s.f.as_slice(),
        s.i.as_slice(),
        s.cand.as_slice(),
        s.o.as_slice(),
    );
    let mut daf = vec![T::zero(); hsz];
    let mut dai = vec![T::zero(); hsz];
    let mut dag = vec![T::zero(); hsz];
    let mut dao = vec![T::zero(); hsz];
    let mut dcp = vec![T::zero(); hsz];
    for k in 0..hsz {
        let tc = rec.tanh_c[k];
        let d_o = dh[k] * tc;
        let dc = dc_next[k] + dh[k] * o[k] * (T::one() - tc * tc);
        daf[k] = dc * rec.c_prev[k] * f[k] * (T::one() - f[k]);
        dai[k] = dc * cand[k] * i[k] * (T::one() - i[k]);
        dag[k] = dc * i[k] * (T::one() - cand[k] * cand[k]);
        dao[k] = d_o * o[k] * (T::one() - o[k]);
        dcp[k] = dc * f[k];
    }
    let v = concat(&rec.hm, &rec.x);
    let mut dv = vec![T::zero(); v.len()];
    for (w, gw, gb, da) in [
        (&p.w_forget, &mut g.w_forget, &mut g.b_forget, &daf),
        (&p.w_input, &mut g.w_input, &mut g.b_input, &dai),
        (&p.w_cand, &mut g.w_cand, &mut g.b_cand, &dag),
        (&p.w_output, &mut g.w_output, &mut g.b_output, &dao),
    ] {
        outer_acc(gw, da, &v);
        for (b, &d) in gb.as_mut_slice().iter_mut().zip(da.iter()) {
            *b += d;
        }
        gemv_t_acc(w, da, &mut dv);
    }
    let dhp: Vec<T> = match rec_mask {
        Some(m) => (0..hsz).map(|k| dv[k] * m[k]).collect(),
        None => dv[..hsz].to_vec(),
    };
    (dhp, dcp, dv[hsz..].to_vec())
}

enum LayerTape<T> {
    Dense { input: Vec<T>, output: Vec<T> },
    Gru { steps: Vec<GruRecord<T>> },
    Lstm { steps: Vec<LstmRecord<T>> },
}

/// Activation record of one forward pass.
pub struct Tape<T> {
    layers: Vec<LayerTape<T>>,
    masked: bool,
    prediction: T,
}

impl<T: Scalar> Tape<T> {
    pub fn prediction(&self) -> T {
        self.prediction
    }

    /// GRU steps recorded for layer `layer`, in time order.
    pub fn gru_steps(&self, layer: usize) -> Option<Vec<&GruStep<T>>> {
        match self.layers.get(layer)? {
            LayerTape::Gru { steps } => Some(steps.iter().map(|r| &r.step).collect()),
            _ => None,
        }
    }

    /// `(step, h_{t-1}, c_{t-1})` triples for an LSTM layer.
    pub fn lstm_steps(&self, layer: usize) -> Option<Vec<(&LstmStep<T>, &[T])>> {
        match self.layers.get(layer)? {
            LayerTape::Lstm { steps } => {
                Some(steps.iter().map(|r| (&r.step, r.c_prev.as_slice())).collect())
            }
            _ => None,
        }
    }

    pub fn gru_prev_states(&self, layer: usize) -> Option<Vec<&[T]>> {
        match self.layers.get(layer)? {
            LayerTape::Gru { steps } => Some(steps.iter().map(|r| r.h_prev.as_slice()).collect()),
            _ => None,
        }
    }
}

fn layer_masks<T>(masks: Option<&DropoutMasks<T>>, idx: usize) -> (Option<&Vec<T>>, Option<&Vec<T>>) {
    match masks.and_then(|m| m.layers.get(idx)) {
        Some(lm) => (lm.input.as_ref(), lm.recurrent.as_ref()),
        None => (None, None),
    }
}

fn check_masks<T: Scalar>(net: &RecurrentNetwork<T>, masks: &DropoutMasks<T>) -> Result<()> {
    if masks.layers.len() > net.params.layers.len() {
        return Err(Error::Consistency("more mask layers than network layers".into()));
    }
    let mut input = net.spec.first_input_width();
    for (lm, layer) in masks.layers.iter().zip(&net.params.layers) {
        let out = layer.output_size();
        if let Some(m) = &lm.input {
            if m.len() != input {
                return Err(Error::shape("input mask", (input, 1), (m.len(), 1)));
            }
        }
        if let Some(m) = &lm.recurrent {
            if !layer.is_recurrent() || m.len() != out {
                return Err(Error::shape("recurrent mask", (out, 1), (m.len(), 1)));
            }
        }
        input = out;
    }
    Ok(())
}

/// Runs one window (`lookback × input_width`, one timestep per row) through
/// the network. Recurrent state starts at zero. `masks == None` is the
/// inference path.
pub fn forward<T: Scalar>(
    net: &RecurrentNetwork<T>,
    window: &Matrix<T>,
    masks: Option<&DropoutMasks<T>>,
) -> Result<(T, Tape<T>)> {
    let spec = &net.spec;
    if window.shape() != (spec.lookback, spec.input_width) {
        return Err(Error::shape(
            "forward window",
            (spec.lookback, spec.input_width),
            window.shape(),
        ));
    }
    if let Some(m) = masks {
        check_masks(net, m)?;
    }

    let mut tapes = Vec::with_capacity(net.params.layers.len());
    let mut seq: Vec<Vec<T>> = (0..window.rows()).map(|r| window.row(r).to_vec()).collect();
    let mut vector: Option<Vec<T>> = if spec.family.is_recurrent() {
        None
    } else {
        Some(window.as_slice().to_vec())
    };

    for (idx, layer) in net.params.layers.iter().enumerate() {
        let (in_mask, rec_mask) = layer_masks(masks, idx);
        match layer {
            Layer::Gru(p) => {
                let mut h = vec![T::zero(); p.hidden()];
                let mut steps = Vec::with_capacity(seq.len());
                let mut outs = Vec::with_capacity(seq.len());
                for x in &seq {
                    let xm = mask_apply(x, in_mask);
                    let rec = gru_forward(p, &xm, &h, rec_mask);
                    h = rec.step.h.as_slice().to_vec();
                    outs.push(h.clone());
                    steps.push(rec);
                }
                tapes.push(LayerTape::Gru { steps });
                seq = outs;
            }
            Layer::Lstm(p) => {
                let mut h = vec![T::zero(); p.hidden()];
                let mut c = vec![T::zero(); p.hidden()];
                let mut steps = Vec::with_capacity(seq.len());
                let mut outs = Vec::with_capacity(seq.len());
                for x in &seq {
                    let xm = mask_apply(x, in_mask);
                    let rec = lstm_forward(p, &xm, &h, &c, rec_mask);
                    h = rec.step.h.as_slice().to_vec();
                    c = rec.step.c.as_slice().to_vec();
                    outs.push(h.clone());
                    steps.push(rec);
                }
                tapes.push(LayerTape::Lstm { steps });
                seq = outs;
            }
            Layer::Dense(p) => {
                let x = match vector.take() {
                    Some(v) => v,
                    None => seq.last().cloned().unwrap_or_default(),
                };
                let xm = mask_apply(&x, in_mask);
                let y = p.forward(&xm);
                tapes.push(LayerTape::Dense {
                    input: xm,
                    output: y.clone(),
                });
                vector = Some(y);
            }
        }
    }
    let prediction = vector
        .and_then(|v| v.first().copied())
        .ok_or_else(|| Error::Consistency("network has no dense head".into()))?;
    Ok((
        prediction,
        Tape {
            layers: tapes,
            masked: masks.is_some(),
            prediction,
        },
    ))
}

/// Reverse-mode gradients of a scalar loss given `d loss / d prediction`.
pub fn backward<T: Scalar>(
    net: &RecurrentNetwork<T>,
    tape: &Tape<T>,
    d_loss_d_pred: T,
    masks: Option<&DropoutMasks<T>>,
) -> Result<ParamSet<T>> {
    if tape.layers.len() != net.params.layers.len() || tape.masked != masks.is_some() {
        return Err(Error::Consistency(
            "tape was not produced by this network and mask combination".into(),
        ));
    }
    let mut grads = net.params.zeros_like();
    let mut d_vec: Vec<T> = vec![d_loss_d_pred];
    let mut d_seq: Option<Vec<Vec<T>>> = None;

    for idx in (0..net.params.layers.len()).rev() {
        let (in_mask, rec_mask) = layer_masks(masks, idx);
        let layer = &net.params.layers[idx];
        let tape_layer = &tape.layers[idx];
        let g = &mut grads.layers[idx];
        match (layer, tape_layer, g) {
            (Layer::Dense(p), LayerTape::Dense { input, output }, Layer::Dense(gp)) => {
                let da: Vec<T> = d_vec
                    .iter()
                    .zip(output)
                    .map(|(&d, &y)| d * p.activation.derivative_from_output(y))
                    .collect();
                outer_acc(&mut gp.w, &da, input);
                for (b, &d) in gp.b.as_mut_slice().iter_mut().zip(&da) {
                    *b += d;
                }
                let mut dx = vec![T::zero(); input.len()];
                gemv_t_acc(&p.w, &da, &mut dx);
                let dx = mask_apply(&dx, in_mask);
                let prev_recurrent = idx > 0 && net.params.layers[idx - 1].is_recurrent();
                if prev_recurrent {
                    let steps = net.spec.lookback;
                    let mut seq = vec![vec![T::zero(); dx.len()]; steps];
                    seq[steps - 1] = dx;
                    d_seq = Some(seq);
                } else {
                    d_vec = dx;
                }
            }
            (Layer::Gru(p), LayerTape::Gru { steps }, Layer::Gru(gp)) => {
                let d_out = d_seq
                    .take()
                    .ok_or_else(|| Error::Consistency("missing upstream gradient".into()))?;
                let mut dh_next = vec![T::zero(); p.hidden()];
                let mut d_in = vec![Vec::new(); steps.len()];
                for t in (0..steps.len()).rev() {
                    let dh: Vec<T> = dh_next.iter().zip(&d_out[t]).map(|(&a, &b)| a + b).collect();
                    let (dhp, dx) = gru_backward(p, &steps[t], &dh, rec_mask, gp);
                    dh_next = dhp;
                    d_in[t] = mask_apply(&dx, in_mask);
                }
                d_seq = Some(d_in);
            }
            (Layer::Lstm(p), LayerTape::Lstm { steps }, Layer::Lstm(gp)) => {
                let d_out = d_seq
                    .take()
                    .ok_or_else(|| Error::Consistency("missing upstream gradient".into()))?;
                let mut dh_next = vec![T::zero(); p.hidden()];
                let mut dc_next = vec![T::zero(); p.hidden()];
                let mut d_in = vec![Vec::new(); steps.len()];
                for t in (0..steps.len()).rev() {
                    let dh: Vec<T> = dh_next.iter().zip(&d_out[t]).map(|(&a, &b)| a + b).collect();
                    let (dhp, dcp, dx) = lstm_backward(p, &steps[t], &dh, &dc_next, rec_mask, gp);
                    dh_next = dhp;
                    dc_next = dcp;
                    d_in[t] = mask_apply(&dx, in_mask);
                }
                d_seq = Some(d_in);
            }
            _ => {
                return Err(Error::Consistency(
                    "tape layer kind does not match network layer".into(),
                ))
            }
        }
    }
    Ok(grads)
}

impl<T: Scalar> RecurrentNetwork<T> {
    pub fn predict(&self, window: &Matrix<T>) -> Result<T> {
        forward(self, window, None).map(|(p, _)| p)
    }
}

const PARAMS_MAGIC: &str = "cryptoseq-params";
const PARAMS_VERSION: u32 = 1;

impl<T: Scalar> RecurrentNetwork<T> {
    /// Writes the text header followed by every parameter as a little-endian `f64`.
    pub fn write_params<W: Write>(&self, mut out: W) -> Result<()> {
        let s = &self.spec;
        let sizes: Vec<String> = s.layer_sizes.iter().map(usize::to_string).collect();
        let header = format!(
            "{PARAMS_MAGIC} {PARAMS_VERSION}\nfamily {}\nlookback {}\ninput_width {}\nlayer_sizes {}\ndropout_rate {}\nrecurrent_dropout_rate {}\nscalar_count {}\nend\n",
            s.family,
            s.lookback,
            s.input_width,
            sizes.join(","),
            s.dropout_rate,
            s.recurrent_dropout_rate,
            self.params.scalar_count()
        );
        out.write_all(header.as_bytes())?;
        let mut buf = Vec::with_capacity(self.params.scalar_count() * 8);
        for v in self.params.flatten() {
            buf.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    pub fn read_params<R: Read>(mut input: R) -> Result<Self> {
        let mut bytes = Vec::new();
        input.read_to_end(&mut bytes)?;
        let marker = b"\nend\n";
        let split = bytes
            .windows(marker.len())
            .position(|w| w == marker)
            .ok_or_else(|| Error::Format("header terminator not found".into()))?;
        let header = std::str::from_utf8(&bytes[..split])
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let body = &bytes[split + marker.len()..];

        let mut lines = header.lines();
        let first = lines.next().unwrap_or_default();
        if first != format!("{PARAMS_MAGIC} {PARAMS_VERSION}") {
            return Err(Error::Format(format!("unsupported header '{first}'")));
        }
        let mut fields = std::collections::BTreeMap::new();
        for line in lines {
            let (k, v) = line
                .split_once(' ')
                .ok_or_else(|| Error::Format(format!("malformed header line '{line}'")))?;
            fields.insert(k, v);
        }
        let get = |k: &str| {
            fields
                .get(k)
                .copied()
                .ok_or_else(|| Error::Format(format!("missing header field '{k}'")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad integer for '{k}'")))
        };
        let real = |k: &str| -> Result<f64> {
            get(k)?
                .parse()
                .map_err(|_| Error::Format(format!("bad real for '{k}'")))
        };
        let layer_sizes = get("layer_sizes")?
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format("bad layer_sizes".into()))?;
        let spec = NetworkSpec {
            family: get("family")?.parse()?,
            lookback: num("lookback")?,
            input_width: num("input_width")?,
            layer_sizes,
            dropout_rate: real("dropout_rate")?,
            recurrent_dropout_rate: real("recurrent_dropout_rate")?,
        };
        let mut net = Self::zeros(spec)?;
        let count = num("scalar_count")?;
        if count != net.params.scalar_count() || body.len() != count * 8 {
            return Err(Error::Format(format!(
                "expected {} parameters ({} bytes), header says {count}, body has {} bytes",
                net.params.scalar_count(),
                net.params.scalar_count() * 8,
                body.len()
            )));
        }
        let values: Vec<T> = body
            .chunks_exact(8)
            .map(|c| T::of(f64::from_le_bytes(c.try_into().expect("8-byte chunk"))))
            .collect();
        net.params.assign_flat(&values)?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn col(v: &[f64]) -> Matrix<f64> {
        Matrix::column(v.to_vec())
    }

    #[test]
    fn default_gru_shapes() {
        let spec = NetworkSpec::new(Family::GRU1, 30, 15).unwrap();
        let net = RecurrentNetwork::<f64>::init(spec, &mut RandomStream::new(1)).unwrap();
        match &net.params.layers[0] {
            Layer::Gru(p) => assert_eq!(p.w_update.shape(), (50, 65)),
            _ => panic!("expected GRU layer"),
        }
        assert_eq!(net.params.scalar_count(), net.spec.parameter_count());
        net.check().unwrap();
    }

    #[test]
    fn parameter_counts_by_family() {
        let count = |f| NetworkSpec::new(f, 30, 15).unwrap().parameter_count();
        // 3 gates × (50·65 + 50) + dense 50 + 1
        assert_eq!(count(Family::GRU1), 3 * (50 * 65 + 50) + 51);
        assert_eq!(count(Family::LSTM1), 4 * (50 * 65 + 50) + 51);
        assert_eq!(count(Family::SimpleNN), 450 * 25 + 25 + 26);
        assert_eq!(
            count(Family::GRU2Dropout),
            3 * (50 * 65 + 50) + 3 * (10 * 60 + 10) + 11
        );
    }

    #[test]
    fn spec_validation() {
        assert!(NetworkSpec::new(Family::GRU1, 0, 3).is_err());
        let s = NetworkSpec::new(Family::GRU1, 5, 3).unwrap();
        assert!(s.clone().with_dropout(1.0, 0.0).is_err());
        assert!(s.clone().with_dropout(0.0, -0.1).is_err());
        assert!(s.clone().with_layer_sizes(vec![4, 4, 1]).is_err());
        assert!(s.clone().with_layer_sizes(vec![4, 2]).is_err());
        assert!(s.with_layer_sizes(vec![4, 1]).is_ok());
        assert_eq!("gru2dropout".parse::<Family>().unwrap(), Family::GRU2Dropout);
        assert!("GRU3".parse::<Family>().is_err());
    }

    #[test]
    fn init_is_deterministic_and_centered() {
        let spec = NetworkSpec::new(Family::GRU1, 30, 15).unwrap();
        let a = RecurrentNetwork::<f64>::init(spec.clone(), &mut RandomStream::new(9)).unwrap();
        let b = RecurrentNetwork::<f64>::init(spec, &mut RandomStream::new(9)).unwrap();
        assert_eq!(a, b);
        let w = a.params.layers[0].tensors()[0].as_slice().to_vec();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        let b_update = a.params.layers[0].tensors()[3];
        assert!(b_update.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gru_halves_state() {
        let p = GruParams::<f64>::zeros(2, 3);
        let s = gru_step(&p, &col(&[1.0, -2.0, 3.0]), &col(&[0.4, -0.8])).unwrap();
        assert_eq!(s.z.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.r.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.cand.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.h.as_slice(), &[0.2, -0.4]);
    }

    #[test]
    fn scalar_gru_hand_case() {
        let mut p = GruParams::<f64>::zeros(1, 1);
        p.w_cand = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let s = gru_step(&p, &col(&[1.0]), &col(&[0.5])).unwrap();
        assert_abs_diff_eq!(s.z.get(0, 0), 0.5);
        assert_abs_diff_eq!(s.r.get(0, 0), 0.5);
        assert_abs_diff_eq!(s.cand.get(0, 0), 0.761594, epsilon = 1e-6);
        assert_abs_diff_eq!(s.h.get(0, 0), 0.630797, epsilon = 1e-6);
    }

    #[test]
    fn saturated_update_gate_takes_candidate() {
        let mut p = GruParams::<f64>::zeros(1, 1);
        p.w_cand = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        p.b_update = col(&[60.0]);
        let s = gru_step(&p, &col(&[1.0]), &col(&[0.9])).unwrap();
        assert_abs_diff_eq!(s.h.get(0, 0), s.cand.get(0, 0), epsilon = 1e-12);
    }

    #[test]
    fn gru_rejects_bad_shapes() {
        let p = GruParams::<f64>::zeros(2, 3);
        assert!(matches!(
            gru_step(&p, &col(&[1.0, 2.0]), &col(&[0.0, 0.0])),
            Err(Error::Shape { .. })
        ));
        assert!(gru_step(&p, &col(&[1.0, 2.0, 3.0]), &col(&[0.0])).is_err());
    }

    #[test]
    fn zero_lstm_cases() {
        let p = LstmParams::<f64>::zeros(2, 1);
        let s = lstm_step(&p, &col(&[3.0]), &col(&[0.7, 0.1]), &col(&[1.0, -2.0])).unwrap();
        assert_eq!(s.f.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.i.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.o.as_slice(), &[0.5, 0.5]);
        assert_eq!(s.cand.as_slice(), &[0.0, 0.0]);
        assert_eq!(s.c.as_slice(), &[0.5, -1.0]);
        assert_abs_diff_eq!(s.h.get(0, 0), 0.5 * 0.5f64.tanh(), epsilon = 1e-15);

        let s = lstm_step(&p, &col(&[3.0]), &col(&[0.7, 0.1]), &col(&[0.0, 0.0])).unwrap();
        assert_eq!(s.h.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn scalar_lstm_hand_case() {
        let mut p = LstmParams::<f64>::zeros(1, 1);
        p.w_cand = Matrix::new(1, 2, vec![0.0, 1.0]).unwrap();
        let c_prev = 0.3;
        let s = lstm_step(&p, &col(&[1.0]), &col(&[0.0]), &col(&[c_prev])).unwrap();
        assert_abs_diff_eq!(s.cand.get(0, 0), 0.761594, epsilon = 1e-6);
        assert_abs_diff_eq!(s.c.get(0, 0), 0.5 * c_prev + 0.380797, epsilon = 1e-6);
    }

    #[test]
    fn zero_network_predicts_zero() {
        for family in Family::ALL {
            let spec = NetworkSpec::new(family, 4, 3).unwrap();
            let net = RecurrentNetwork::<f64>::zeros(spec).unwrap();
            let window = Matrix::from_fn(4, 3, |r, c| (r * 3 + c) as f64 - 4.0);
            assert_eq!(net.predict(&window).unwrap(), 0.0, "{family}");
        }
    }

    #[test]
    fn two_step_gru_unroll_matches_hand_oracle() {
        // hidden 1, input 1, lookback 2, identity-weight head
        let spec = NetworkSpec::new(Family::GRU1, 2, 1)
            .unwrap()
            .with_layer_sizes(vec![1, 1])
            .unwrap();
        let mut net = RecurrentNetwork::<f64>::zeros(spec).unwrap();
        if let Layer::Gru(p) = &mut net.params.layers[0] {
            p.w_update = Matrix::new(1, 2, vec![0.3, -0.2]).unwrap();
            p.w_reset = Matrix::new(1, 2, vec![0.1, 0.4]).unwrap();
            p.w_cand = Matrix::new(1, 2, vec![0.5, 0.8]).unwrap();
            p.b_update = col(&[0.05]);
        }
        if let Layer::Dense(p) = &mut net.params.layers[1] {
            p.w = Matrix::new(1, 1, vec![1.0]).unwrap();
            p.b = col(&[0.25]);
        }
        let x = 0.7;
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let mut h = 0.0f64;
        for _ in 0..2 {
            let z = sig(0.3 * h - 0.2 * x + 0.05);
            let r = sig(0.1 * h + 0.4 * x);
            let c = (0.5 * r * h + 0.8 * x).tanh();
            h = (1.0 - z) * h + z * c;
        }
        let window = Matrix::new(2, 1, vec![x, x]).unwrap();
        assert_abs_diff_eq!(net.predict(&window).unwrap(), 0.25 + h, epsilon = 1e-14);
    }

    #[test]
    fn forward_rejects_wrong_lookback() {
        let spec = NetworkSpec::new(Family::GRU1, 5, 2).unwrap();
        let net = RecurrentNetwork::<f64>::zeros(spec).unwrap();
        assert!(matches!(
            net.predict(&Matrix::zeros(4, 2)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let spec = NetworkSpec::new(Family::GRU2Dropout, 3, 2)
            .unwrap()
            .with_layer_sizes(vec![4, 3, 1])
            .unwrap();
        let net = RecurrentNetwork::<f64>::init(spec, &mut RandomStream::new(2)).unwrap();
        let w = Matrix::from_fn(3, 2, |r, c| (r + c) as f64 * 0.3);
        let (_, tape) = forward(&net, &w, None).unwrap();
        let g = backward(&net, &tape, 0.0, None).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_mask_mismatch() {
        let spec = NetworkSpec::new(Family::GRU1, 3, 2).unwrap();
        let net = RecurrentNetwork::<f64>::zeros(spec).unwrap();
        let (_, tape) = forward(&net, &Matrix::zeros(3, 2), None).unwrap();
        let masks = DropoutMasks {
            layers: vec![LayerMasks::default()],
        };
        assert!(matches!(
            backward(&net, &tape, 1.0, Some(&masks)),
            Err(Error::Consistency(_))
        ));
    }

    #[test]
    fn params_round_trip_and_reject_truncation() {
        let spec = NetworkSpec::new(Family::LSTM1, 6, 3)
            .unwrap()
            .with_layer_sizes(vec![5, 1])
            .unwrap();
        let net = RecurrentNetwork::<f64>::init(spec, &mut RandomStream::new(4)).unwrap();
        let mut buf = Vec::new();
        net.write_params(&mut buf).unwrap();
        assert!(buf.starts_with(b"cryptoseq-params 1\nfamily LSTM1\n"));
        let back = RecurrentNetwork::<f64>::read_params(buf.as_slice()).unwrap();
        assert_eq!(back, net);
        buf.truncate(buf.len() - 8);
        assert!(matches!(
            RecurrentNetwork::<f64>::read_params(buf.as_slice()),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn f32_network_runs() {
        let spec = NetworkSpec::new(Family::GRU1, 3, 2)
            .unwrap()
            .with_layer_sizes(vec![4, 1])
            .unwrap();
        let net = RecurrentNetwork::<f32>::init(spec, &mut RandomStream::new(5)).unwrap();
        let w = Matrix::from_fn(3, 2, |r, c| (r as f32 - c as f32) * 0.1);
        let (p, tape) = forward(&net, &w, None).unwrap();
        assert!(p.is_finite());
        let g = backward(&net, &tape, 1.0f32, None).unwrap();
        assert!(g.is_finite());
    }
}
