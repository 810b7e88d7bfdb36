//! ConvLSTM cell with peephole connections, the sequence layer built on it,
//! and the two-layer network with a 1×1 linear head.
//!
//! Per time step, with `*` the same-padded convolution and `⊙` the Hadamard
//! product:
//!
//! ```text
//! I = σ(Wxi*X + Whi*H' + Wci⊙C' + bi)
//! F = σ(Wxf*X + Whf*H' + Wcf⊙C' + bf)
//! C = F⊙C' + I⊙g(Wxc*X + Whc*H' + bc)
//! O = σ(Wxo*X + Who*H' + Wco⊙C + bo)
//! H = O⊙g(C)
//! ```
//!
//! where `g` is the configured cell activation. States start at zero.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{conv_accumulate, sigmoid_scalar, ConvKernel, Grid3, SeqBatch};

/// Nonlinearity applied to the candidate and to the cell state before the
/// output gate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellActivation {
    Tanh,
    Relu,
}

impl CellActivation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            CellActivation::Tanh => z.tanh(),
            CellActivation::Relu => z.max(0.0),
        }
    }

    /// Derivative given the pre-activation `z` and the activation `a = g(z)`.
    /// The relu derivative at exactly zero is taken as 0.
    #[inline]
    pub fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            CellActivation::Tanh => 1.0 - a * a,
            CellActivation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for CellActivation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CellActivation::Tanh => "tanh",
            CellActivation::Relu => "relu",
        })
    }
}

impl FromStr for CellActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(CellActivation::Tanh),
            "relu" => Ok(CellActivation::Relu),
            other => Err(Error::InvalidArgument(format!(
                "unknown cell activation {other:?} (expected tanh or relu)"
            ))),
        }
    }
}

/// Weights of one ConvLSTM cell. Input kernels are `filters × in × kh × kw`,
/// recurrent kernels `filters × filters × kh × kw`, peepholes `filters × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmCellParams {
    pub w_xi: ConvKernel,
    pub w_xf: ConvKernel,
    pub w_xc: ConvKernel,
    pub w_xo: ConvKernel,
    pub w_hi: ConvKernel,
    pub w_hf: ConvKernel,
    pub w_hc: ConvKernel,
    pub w_ho: ConvKernel,
    pub w_ci: Grid3,
    pub w_cf: Grid3,
    pub w_co: Grid3,
    pub b_i: Vec<f64>,
    pub b_f: Vec<f64>,
    pub b_c: Vec<f64>,
    pub b_o: Vec<f64>,
}

impl ConvLstmCellParams {
    pub fn zeros(filters: usize, in_channels: usize, kernel: (usize, usize), grid: (usize, usize)) -> Self {
        let (kh, kw) = kernel;
        let (h, w) = grid;
        let wx = || ConvKernel::zeros(filters, in_channels, kh, kw);
        let wh = || ConvKernel::zeros(filters, filters, kh, kw);
        let peep = || Grid3::zeros(filters, h, w);
        Self {
            w_xi: wx(),
            w_xf: wx(),
            w_xc: wx(),
            w_xo: wx(),
            w_hi: wh(),
            w_hf: wh(),
            w_hc: wh(),
            w_ho: wh(),
            w_ci: peep(),
            w_cf: peep(),
            w_co: peep(),
            b_i: vec![0.0; filters],
            b_f: vec![0.0; filters],
            b_c: vec![0.0; filters],
            b_o: vec![0.0; filters],
        }
    }

    pub fn filters(&self) -> usize {
        self.w_xi.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.w_xi.in_channels()
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.w_xi.kh(), self.w_xi.kw())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.w_ci.height(), self.w_ci.width())
    }

    /// Checks that every tensor agrees with `(filters, in_channels, kernel, grid)`
    /// as read off `w_xi` and `w_ci`, and that the biases are finite.
    pub fn validate(&self) -> Result<()> {
        let (f, cin) = (self.filters(), self.in_channels());
        let (kh, kw) = self.kernel();
        let (h, w) = self.grid();
        for (name, k) in [("w_xi", &self.w_xi), ("w_xf", &self.w_xf), ("w_xc", &self.w_xc), ("w_xo", &self.w_xo)] {
            if k.shape() != [f, cin, kh, kw] {
                return Err(Error::Shape(format!("{name} is {:?}, expected {:?}", k.shape(), [f, cin, kh, kw])));
            }
        }
        for (name, k) in [("w_hi", &self.w_hi), ("w_hf", &self.w_hf), ("w_hc", &self.w_hc), ("w_ho", &self.w_ho)] {
            if k.shape() != [f, f, kh, kw] {
                return Err(Error::Shape(format!("{name} is {:?}, expected {:?}", k.shape(), [f, f, kh, kw])));
            }
        }
        for (name, p) in [("w_ci", &self.w_ci), ("w_cf", &self.w_cf), ("w_co", &self.w_co)] {
            if p.shape() != (f, h, w) {
                return Err(Error::Shape(format!("{name} is {:?}, expected {:?}", p.shape(), (f, h, w))));
            }
        }
        for (name, b) in [("b_i", &self.b_i), ("b_f", &self.b_f), ("b_c", &self.b_c), ("b_o", &self.b_o)] {
            if b.len() != f {
                return Err(Error::Shape(format!("{name} has {} entries, expected {f}", b.len())));
            }
            if b.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        Ok(())
    }
}

/// Hidden and cell state, both `filters × h × w`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Grid3,
    pub c: Grid3,
}

impl CellState {
    pub fn zeros(filters: usize, height: usize, width: usize) -> Self {
        Self {
            h: Grid3::zeros(filters, height, width),
            c: Grid3::zeros(filters, height, width),
        }
    }
}

/// Everything one cell step produced, kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct StepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub c_prev: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    /// Candidate pre-activation.
    pub cand_pre: Vec<f64>,
    /// Candidate `g(cand_pre)`.
    pub cand: Vec<f64>,
    pub c: Vec<f64>,
    /// `g(c)`.
    pub c_act: Vec<f64>,
    pub h: Vec<f64>,
}

fn gate_preactivation(
    x: &[f64],
    h_prev: &[f64],
    wx: &ConvKernel,
    wh: &ConvKernel,
    bias: &[f64],
    grid: (usize, usize),
) -> Vec<f64> {
    let hw = grid.0 * grid.1;
    let mut out = Vec::with_capacity(bias.len() * hw);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, hw));
    }
    conv_accumulate(x, grid.0, grid.1, wx, &mut out);
    conv_accumulate(h_prev, grid.0, grid.1, wh, &mut out);
    out
}

fn ensure_finite(v: &[f64], gate: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("ConvLSTM {gate}")))
    }
}

pub(crate) fn step_raw(
    p: &ConvLstmCellParams,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
    act: CellActivation,
) -> Result<StepCache> {
    let grid = p.grid();

    let mut i = gate_preactivation(x, h_prev, &p.w_xi, &p.w_hi, &p.b_i, grid);
    for ((v, w), c) in i.iter_mut().zip(p.w_ci.data()).zip(c_prev) {
        *v += w * c;
    }
    ensure_finite(&i, "input gate")?;
    i.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));

    let mut f = gate_preactivation(x, h_prev, &p.w_xf, &p.w_hf, &p.b_f, grid);
    for ((v, w), c) in f.iter_mut().zip(p.w_cf.data()).zip(c_prev) {
        *v += w * c;
    }
    ensure_finite(&f, "forget gate")?;
    f.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));

    let cand_pre = gate_preactivation(x, h_prev, &p.w_xc, &p.w_hc, &p.b_c, grid);
    ensure_finite(&cand_pre, "candidate")?;
    let cand: Vec<f64> = cand_pre.iter().map(|&z| act.apply(z)).collect();

    let c: Vec<f64> = (0..cand.len())
        .map(|n| f[n] * c_prev[n] + i[n] * cand[n])
        .collect();
    ensure_finite(&c, "cell state")?;

    let mut o = gate_preactivation(x, h_prev, &p.w_xo, &p.w_ho, &p.b_o, grid);
    for ((v, w), cv) in o.iter_mut().zip(p.w_co.data()).zip(&c) {
        *v += w * cv;
    }
    ensure_finite(&o, "output gate")?;
    o.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));

    let c_act: Vec<f64> = c.iter().map(|&z| act.apply(z)).collect();
    let h: Vec<f64> = o.iter().zip(&c_act).map(|(a, b)| a * b).collect();
    ensure_finite(&h, "hidden state")?;

    Ok(StepCache {
        x: x.to_vec(),
        h_prev: h_prev.to_vec(),
        c_prev: c_prev.to_vec(),
        i,
        f,
        o,
        cand_pre,
        cand,
        c,
        c_act,
        h,
    })
}

/// One ConvLSTM time step.
pub fn cell_step(
    params: &ConvLstmCellParams,
    x: &Grid3,
    prev: &CellState,
    activation: CellActivation,
) -> Result<CellState> {
    params.validate()?;
    let (h, w) = params.grid();
    let f = params.filters();
    if x.shape() != (params.in_channels(), h, w) {
        return Err(Error::Shape(format!(
            "cell input {:?} does not match ({}, {h}, {w})",
            x.shape(),
            params.in_channels()
        )));
    }
    if prev.h.shape() != (f, h, w) || prev.c.shape() != (f, h, w) {
        return Err(Error::Shape(format!(
            "previous state {:?}/{:?} does not match ({f}, {h}, {w})",
            prev.h.shape(),
            prev.c.shape()
        )));
    }
    let s = step_raw(params, x.data(), prev.h.data(), prev.c.data(), activation)?;
    Ok(CellState {
        h: Grid3::from_raw(f, h, w, s.h),
        c: Grid3::from_raw(f, h, w, s.c),
    })
}

/// Runs the cell over `steps` frames stored contiguously in `frames`,
/// starting from zero state.
pub(crate) fn layer_forward_cached(
    p: &ConvLstmCellParams,
    frames: &[f64],
    steps: usize,
    act: CellActivation,
) -> Result<Vec<StepCache>> {
    if steps == 0 {
        return Err(Error::InvalidArgument("empty input sequence".into()));
    }
    let (h, w) = p.grid();
    let frame_len = p.in_channels() * h * w;
    debug_assert_eq!(frames.len(), steps * frame_len);
    let state_len = p.filters() * h * w;
    let mut caches: Vec<StepCache> = Vec::with_capacity(steps);
    let zeros = vec![0.0; state_len];
    for t in 0..steps {
        let x = &frames[t * frame_len..(t + 1) * frame_len];
        let (hp, cp) = match caches.last() {
            Some(prev) => (&prev.h[..], &prev.c[..]),
            None => (&zeros[..], &zeros[..]),
        };
        let step = step_raw(p, x, hp, cp, act)?;
        caches.push(step);
    }
    Ok(caches)
}

/// Applies the cell across each sequence in `seq`. Returns every hidden
/// state when `return_sequences` is set, otherwise only the last one (as a
/// batch with a time dimension of 1).
pub fn layer_forward(
    params: &ConvLstmCellParams,
    seq: &SeqBatch,
    return_sequences: bool,
    activation: CellActivation,
) -> Result<SeqBatch> {
    params.validate()?;
    let (h, w) = params.grid();
    if seq.frame_shape() != (params.in_channels(), h, w) {
        return Err(Error::Shape(format!(
            "sequence frames {:?} do not match ({}, {h}, {w})",
            seq.frame_shape(),
            params.in_channels()
        )));
    }
    let f = params.filters();
    let mut out = Vec::new();
    for b in 0..seq.batch() {
        let caches = layer_forward_cached(params, seq.item(b), seq.time(), activation)?;
        if return_sequences {
            for c in &caches {
                out.extend_from_slice(&c.h);
            }
        } else {
            out.extend_from_slice(&caches[caches.len() - 1].h);
        }
    }
    let time = if return_sequences { seq.time() } else { 1 };
    SeqBatch::new(seq.batch(), time, f, h, w, out)
}

/// Architecture of the stacked network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub layer1_filters: usize,
    pub layer2_filters: usize,
    pub kernel: (usize, usize),
    pub activation: CellActivation,
    pub input_channels: usize,
    pub grid: (usize, usize),
    /// When false, peephole weights stay at zero and are never updated.
    pub peepholes: bool,
}

impl Default for NetworkSpec {
    /// 128 and 64 filters, 2×2 kernels, relu cell activation, 11 predictors
    /// on a 2×2 grid.
    fn default() -> Self {
        Self {
            layer1_filters: 128,
            layer2_filters: 64,
            kernel: (2, 2),
            activation: CellActivation::Relu,
            input_channels: 11,
            grid: (2, 2),
            peepholes: true,
        }
    }
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer1_filters == 0 || self.layer2_filters == 0 {
            return Err(Error::InvalidArgument("filter counts must be at least 1".into()));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::InvalidArgument("kernel dimensions must be at least 1".into()));
        }
        if self.input_channels == 0 || self.grid.0 == 0 || self.grid.1 == 0 {
            return Err(Error::InvalidArgument("input channels and grid must be positive".into()));
        }
        Ok(())
    }
}

/// All trainable tensors: two cells plus the `layer2_filters → 1` head.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub layer1: ConvLstmCellParams,
    pub layer2: ConvLstmCellParams,
    pub head_w: ConvKernel,
    pub head_b: Vec<f64>,
}

const CELL_TENSORS: [&str; 15] = [
    "w_xi", "w_xf", "w_xc", "w_xo", "w_hi", "w_hf", "w_hc", "w_ho", "w_ci", "w_cf", "w_co", "b_i", "b_f", "b_c",
    "b_o",
];

fn cell_slices(p: &ConvLstmCellParams) -> [(&'static str, Vec<usize>, &[f64]); 15] {
    let k = |k: &ConvKernel| k.shape().to_vec();
    let g = |g: &Grid3| vec![g.channels(), g.height(), g.width()];
    let b = |b: &Vec<f64>| vec![b.len()];
    [
        ("w_xi", k(&p.w_xi), p.w_xi.data()),
        ("w_xf", k(&p.w_xf), p.w_xf.data()),
        ("w_xc", k(&p.w_xc), p.w_xc.data()),
        ("w_xo", k(&p.w_xo), p.w_xo.data()),
        ("w_hi", k(&p.w_hi), p.w_hi.data()),
        ("w_hf", k(&p.w_hf), p.w_hf.data()),
        ("w_hc", k(&p.w_hc), p.w_hc.data()),
        ("w_ho", k(&p.w_ho), p.w_ho.data()),
        ("w_ci", g(&p.w_ci), p.w_ci.data()),
        ("w_cf", g(&p.w_cf), p.w_cf.data()),
        ("w_co", g(&p.w_co), p.w_co.data()),
        ("b_i", b(&p.b_i), &p.b_i),
        ("b_f", b(&p.b_f), &p.b_f),
        ("b_c", b(&p.b_c), &p.b_c),
        ("b_o", b(&p.b_o), &p.b_o),
    ]
}

fn cell_slices_mut(p: &mut ConvLstmCellParams) -> [&mut [f64]; 15] {
    [
        p.w_xi.data_mut(),
        p.w_xf.data_mut(),
        p.w_xc.data_mut(),
        p.w_xo.data_mut(),
        p.w_hi.data_mut(),
        p.w_hf.data_mut(),
        p.w_hc.data_mut(),
        p.w_ho.data_mut(),
        p.w_ci.data_mut(),
        p.w_cf.data_mut(),
        p.w_co.data_mut(),
        &mut p.b_i,
        &mut p.b_f,
        &mut p.b_c,
        &mut p.b_o,
    ]
}

/// A named parameter tensor view.
#[derive(Debug, Clone)]
pub struct NamedTensor<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

impl NetworkParams {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        Self {
            layer1: ConvLstmCellParams::zeros(spec.layer1_filters, spec.input_channels, spec.kernel, spec.grid),
            layer2: ConvLstmCellParams::zeros(spec.layer2_filters, spec.layer1_filters, spec.kernel, spec.grid),
            head_w: ConvKernel::zeros(1, spec.layer2_filters, 1, 1),
            head_b: vec![0.0],
        }
    }

    /// Every tensor in a fixed order, named `layer1.w_xi`, ..., `head.w`, `head.b`.
    pub fn tensors(&self) -> Vec<NamedTensor<'_>> {
        let mut out = Vec::with_capacity(32);
        for (prefix, cell) in [("layer1", &self.layer1), ("layer2", &self.layer2)] {
            for (name, shape, data) in cell_slices(cell) {
                out.push(NamedTensor {
                    name: format!("{prefix}.{name}"),
                    shape,
                    data,
                });
            }
        }
        out.push(NamedTensor {
            name: "head.w".into(),
            shape: self.head_w.shape().to_vec(),
            data: self.head_w.data(),
        });
        out.push(NamedTensor {
            name: "head.b".into(),
            shape: vec![self.head_b.len()],
            data: &self.head_b,
        });
        out
    }

    /// Mutable slices in the same order as [`NetworkParams::tensors`].
    pub(crate) fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(32);
        out.extend(cell_slices_mut(&mut self.layer1));
        out.extend(cell_slices_mut(&mut self.layer2));
        out.push(self.head_w.data_mut());
        out.push(&mut self.head_b);
        out
    }

    pub fn tensor_names() -> Vec<String> {
        let mut names = Vec::with_capacity(32);
        for prefix in ["layer1", "layer2"] {
            names.extend(CELL_TENSORS.iter().map(|n| format!("{prefix}.{n}")));
        }
        names.push("head.w".into());
        names.push("head.b".into());
        names
    }

    pub fn is_peephole(name: &str) -> bool {
        name.ends_with(".w_ci") || name.ends_with(".w_cf") || name.ends_with(".w_co")
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("parameter vector".into()));
        }
        let mut offset = 0;
        for s in self.slices_mut() {
            let n = s.len();
            s.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Shape check against `spec`.
    pub fn validate(&self, spec: &NetworkSpec) -> Result<()> {
        self.layer1.validate()?;
        self.layer2.validate()?;
        let want1 = (spec.layer1_filters, spec.input_channels, spec.kernel, spec.grid);
        let got1 = (
            self.layer1.filters(),
            self.layer1.in_channels(),
            self.layer1.kernel(),
            self.layer1.grid(),
        );
        let want2 = (spec.layer2_filters, spec.layer1_filters, spec.kernel, spec.grid);
        let got2 = (
            self.layer2.filters(),
            self.layer2.in_channels(),
            self.layer2.kernel(),
            self.layer2.grid(),
        );
        if got1 != want1 || got2 != want2 {
            return Err(Error::Shape(format!(
                "parameters {got1:?}/{got2:?} do not match spec {want1:?}/{want2:?}"
            )));
        }
        if self.head_w.shape() != [1, spec.layer2_filters, 1, 1] || self.head_b.len() != 1 {
            return Err(Error::Shape("head must be a 1x1 convolution to one channel".into()));
        }
        if !self.head_b[0].is_finite() {
            return Err(Error::NonFinite("head.b".into()));
        }
        Ok(())
    }
}

/// Forward trace of one sample through the network.
pub(crate) struct ForwardTrace {
    pub layer1: Vec<StepCache>,
    pub layer2: Vec<StepCache>,
    pub pred: Vec<f64>,
}

pub(crate) fn head_forward(params: &NetworkParams, h_last: &[f64], hw: usize) -> Vec<f64> {
    let mut pred = vec![params.head_b[0]; hw];
    conv_accumulate(h_last, hw, 1, &params.head_w, &mut pred);
    pred
}

pub(crate) fn forward_trace(
    spec: &NetworkSpec,
    params: &NetworkParams,
    frames: &[f64],
    steps: usize,
) -> Result<ForwardTrace> {
    let layer1 = layer_forward_cached(&params.layer1, frames, steps, spec.activation)?;
    let mut hidden = Vec::with_capacity(steps * layer1[0].h.len());
    for s in &layer1 {
        hidden.extend_from_slice(&s.h);
    }
    let layer2 = layer_forward_cached(&params.layer2, &hidden, steps, spec.activation)?;
    let hw = spec.grid.0 * spec.grid.1;
    // A 1x1 kernel only mixes channels, so the grid can be treated as a flat row.
    let pred = head_forward(params, &layer2[steps - 1].h, hw);
    Ok(ForwardTrace { layer1, layer2, pred })
}

pub(crate) fn check_batch(spec: &NetworkSpec, batch: &SeqBatch) -> Result<()> {
    let want = (spec.input_channels, spec.grid.0, spec.grid.1);
    if batch.frame_shape() != want {
        return Err(Error::Shape(format!(
            "batch frames {:?} do not match network input {want:?}",
            batch.frame_shape()
        )));
    }
    Ok(())
}

/// Layer 1 (all hidden states) → layer 2 (last hidden state) → 1×1 head.
/// Returns one `1 × h × w` prediction per batch item.
pub fn network_forward(spec: &NetworkSpec, params: &NetworkParams, batch: &SeqBatch) -> Result<Vec<Grid3>> {
    spec.validate()?;
    params.validate(spec)?;
    check_batch(spec, batch)?;
    let (h, w) = spec.grid;
    (0..batch.batch())
        .into_par_iter()
        .map(|b| {
            let trace = forward_trace(spec, params, batch.item(b), batch.time())?;
            ensure_finite(&trace.pred, "head output")?;
            Ok(Grid3::from_raw(1, h, w, trace.pred))
        })
        .collect()
}

fn glorot_fill(rng: &mut ChaCha8Rng, k: &mut ConvKernel) {
    let rf = k.kh() * k.kw();
    let bound = glorot_bound(k.in_channels() * rf, k.out_channels() * rf);
    for v in k.data_mut() {
        *v = rng.random_range(-bound..=bound);
    }
}

/// `sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_cell(rng: &mut ChaCha8Rng, cell: &mut ConvLstmCellParams) {
    for k in [
        &mut cell.w_xi,
        &mut cell.w_xf,
        &mut cell.w_xc,
        &mut cell.w_xo,
        &mut cell.w_hi,
        &mut cell.w_hf,
        &mut cell.w_hc,
        &mut cell.w_ho,
    ] {
        glorot_fill(rng, k);
    }
    cell.b_f.iter_mut().for_each(|b| *b = 1.0);
}

/// Glorot-uniform kernels, zero peepholes and biases, forget bias 1.
pub fn init_params(spec: &NetworkSpec, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = NetworkParams::zeros(spec);
    init_cell(&mut rng, &mut p.layer1);
    init_cell(&mut rng, &mut p.layer2);
    glorot_fill(&mut rng, &mut p.head_w);
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_cell(wx: f64) -> ConvLstmCellParams {
        let mut p = ConvLstmCellParams::zeros(1, 1, (1, 1), (1, 1));
        for k in [&mut p.w_xi, &mut p.w_xf, &mut p.w_xc, &mut p.w_xo] {
            k.data_mut()[0] = wx;
        }
        p
    }

    #[test]
    fn zero_params_give_half_gates_and_zero_state() {
        let p = ConvLstmCellParams::zeros(3, 2, (2, 2), (2, 2));
        let x = Grid3::new(2, 2, 2, vec![0.3, -1.0, 2.0, 0.5, 1.0, 1.0, -4.0, 0.1]).unwrap();
        let s = step_raw(&p, x.data(), &[0.0; 12], &[0.0; 12], CellActivation::Tanh).unwrap();
        assert!(s.i.iter().chain(&s.f).chain(&s.o).all(|&g| g == 0.5));
        assert!(s.c.iter().chain(&s.h).all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_hand_evaluation() {
        let p = scalar_cell(1.0);
        let x = Grid3::zeros(1, 1, 1);
        let prev = CellState {
            h: Grid3::zeros(1, 1, 1),
            c: Grid3::filled(1, 1, 1, 2.0),
        };
        let next = cell_step(&p, &x, &prev, CellActivation::Tanh).unwrap();
        assert!((next.c.data()[0] - 1.0).abs() < 1e-15);
        assert!((next.h.data()[0] - 0.380797).abs() < 1e-6);
        assert!((next.h.data()[0] - 0.5 * 1.0f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn cell_step_rejects_mismatched_shapes() {
        let p = ConvLstmCellParams::zeros(2, 3, (2, 2), (2, 2));
        let bad_x = Grid3::zeros(2, 2, 2);
        let prev = CellState::zeros(2, 2, 2);
        assert!(matches!(cell_step(&p, &bad_x, &prev, CellActivation::Tanh), Err(Error::Shape(_))));
        let x = Grid3::zeros(3, 2, 2);
        let bad_prev = CellState::zeros(3, 2, 2);
        assert!(matches!(cell_step(&p, &x, &bad_prev, CellActivation::Tanh), Err(Error::Shape(_))));
    }

    #[test]
    fn overflowing_state_names_the_gate() {
        let p = scalar_cell(1.0);
        let x = Grid3::filled(1, 1, 1, 1e308);
        let prev = CellState::zeros(1, 1, 1);
        let mut p2 = p.clone();
        p2.w_xc.data_mut()[0] = 10.0;
        let err = cell_step(&p2, &x, &prev, CellActivation::Relu).unwrap_err();
        assert!(err.to_string().contains("candidate"), "{err}");
    }

    #[test]
    fn layer_of_length_one_is_a_single_step() {
        let spec = NetworkSpec {
            layer1_filters: 3,
            layer2_filters: 2,
            input_channels: 2,
            ..NetworkSpec::default()
        };
        let params = init_params(&spec, 4);
        let x = Grid3::new(2, 2, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]).unwrap();
        let seq = SeqBatch::from_frames(&[vec![x.clone()]]).unwrap();
        let out = layer_forward(&params.layer1, &seq, false, CellActivation::Tanh).unwrap();
        let step = cell_step(&params.layer1, &x, &CellState::zeros(3, 2, 2), CellActivation::Tanh).unwrap();
        assert_eq!(out.frame(0, 0), step.h);
    }

    #[test]
    fn empty_sequence_rejected() {
        let p = ConvLstmCellParams::zeros(1, 1, (2, 2), (2, 2));
        assert!(layer_forward_cached(&p, &[], 0, CellActivation::Tanh).is_err());
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let spec = NetworkSpec {
            layer1_filters: 6,
            layer2_filters: 3,
            ..NetworkSpec::default()
        };
        let a = init_params(&spec, 99);
        assert_eq!(a, init_params(&spec, 99));
        assert_ne!(a, init_params(&spec, 100));
        assert!(a.layer1.b_f.iter().chain(&a.layer2.b_f).all(|&b| b == 1.0));
        for t in a.tensors() {
            let bound = match t.shape.as_slice() {
                [o, i, kh, kw] => glorot_bound(i * kh * kw, o * kh * kw),
                _ => {
                    if !t.name.ends_with("b_f") {
                        assert!(t.data.iter().all(|&v| v == 0.0), "{}", t.name);
                    }
                    continue;
                }
            };
            assert!(t.data.iter().all(|v| v.abs() <= bound), "{}", t.name);
            assert!(t.data.iter().any(|&v| v != 0.0), "{}", t.name);
        }
    }

    #[test]
    fn flat_round_trip_and_names() {
        let spec = NetworkSpec {
            layer1_filters: 2,
            layer2_filters: 2,
            input_channels: 3,
            ..NetworkSpec::default()
        };
        let p = init_params(&spec, 1);
        let names: Vec<String> = p.tensors().into_iter().map(|t| t.name).collect();
        assert_eq!(names, NetworkParams::tensor_names());
        let mut q = NetworkParams::zeros(&spec);
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p, q);
        assert!(q.set_flat(&[0.0]).is_err());
    }

    #[test]
    fn network_rejects_wrong_channel_count() {
        let spec = NetworkSpec {
            layer1_filters: 2,
            layer2_filters: 1,
            ..NetworkSpec::default()
        };
        let p = init_params(&spec, 0);
        let batch = SeqBatch::new(1, 2, 10, 2, 2, vec![0.0; 80]).unwrap();
        assert!(network_forward(&spec, &p, &batch).is_err());
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;
        use rand::Rng;

        fn cell(seed: u64, scale: f64) -> ConvLstmCellParams {
            let spec = NetworkSpec {
                layer1_filters: 3,
                layer2_filters: 1,
                input_channels: 2,
                ..NetworkSpec::default()
            };
            let mut p = init_params(&spec, seed).layer1;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for g in [&mut p.w_ci, &mut p.w_cf, &mut p.w_co] {
                g.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
            }
            for b in [&mut p.b_i, &mut p.b_f, &mut p.b_c, &mut p.b_o] {
                b.iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
            }
            p
        }

        proptest! {
            #[test]
            fn gates_lie_strictly_inside_unit_interval(
                seed in 0u64..10_000,
                x in prop::collection::vec(-5.0..5.0f64, 8),
                h in prop::collection::vec(-2.0..2.0f64, 12),
                c in prop::collection::vec(-2.0..2.0f64, 12),
                relu_mode in any::<bool>(),
            ) {
                let act = if relu_mode { CellActivation::Relu } else { CellActivation::Tanh };
                let s = step_raw(&cell(seed, 1.0), &x, &h, &c, act).unwrap();
                prop_assert!(s.i.iter().chain(&s.f).chain(&s.o).all(|&g| g > 0.0 && g < 1.0));
            }

            #[test]
            fn relu_cell_state_dominates_forget_term(
                seed in 0u64..10_000,
                x in prop::collection::vec(-5.0..5.0f64, 8),
                h in prop::collection::vec(0.0..2.0f64, 12),
                c in prop::collection::vec(0.0..2.0f64, 12),
            ) {
                let s = step_raw(&cell(seed, 1.0), &x, &h, &c, CellActivation::Relu).unwrap();
                for (n, &c_prev) in c.iter().enumerate() {
                    prop_assert!(s.c[n] >= s.f[n] * c_prev);
                    prop_assert!(s.h[n] >= 0.0);
                }
            }
        }
    }
}
