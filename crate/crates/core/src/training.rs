//! Loss, backpropagation through time, finite-difference checking, Adam and
//! the mini-batch training loop.
//!
//! Batch gradients are the mean of per-sample gradients. Samples are
//! processed in parallel in fixed-size chunks and the chunk sums are added
//! in index order, so results do not depend on the thread count.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::convlstm::{
    check_batch, forward_trace, init_params, layer_forward_cached, CellActivation, ConvLstmCellParams,
    NetworkParams, NetworkSpec, StepCache,
};
use crate::error::{Error, Result};
use crate::tensor::{conv_backward_accumulate, Grid3, SeqBatch};

/// Samples per parallel work unit. Fixed so the floating-point reduction
/// order is independent of how many threads run.
const CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Rescale the batch gradient to at most this global L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 32,
            max_epochs: 100,
            early_stop_patience: 10,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        // learning_rate == 0 is accepted: it freezes the parameters.
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument("learning_rate must be a finite value >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidArgument("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::InvalidArgument("clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Gradient of the loss with respect to every tensor of [`NetworkParams`],
/// in the same layout.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet(pub NetworkParams);

impl GradientSet {
    pub fn zeros(spec: &NetworkSpec) -> Self {
        GradientSet(NetworkParams::zeros(spec))
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.to_flat()
    }

    pub fn l2_norm(&self) -> f64 {
        self.0
            .tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.0.slices_mut().into_iter().zip(other.0.tensors()) {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for a in self.0.slices_mut() {
            a.iter_mut().for_each(|x| *x *= s);
        }
    }

    fn zero_peepholes(&mut self) {
        let names = NetworkParams::tensor_names();
        for (name, a) in names.iter().zip(self.0.slices_mut()) {
            if NetworkParams::is_peephole(name) {
                a.fill(0.0);
            }
        }
    }

    fn check_finite(&self) -> Result<()> {
        for t in self.0.tensors() {
            if t.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", t.name)));
            }
        }
        Ok(())
    }
}

/// Mean over items and cells of the squared error.
pub fn mse_loss(pred: &[Grid3], target: &[Grid3]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!(
            "mse_loss: {} predictions vs {} targets",
            pred.len(),
            target.len()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (p, t) in pred.iter().zip(target) {
        if p.shape() != t.shape() {
            return Err(Error::Shape(format!("mse_loss: {:?} vs {:?}", p.shape(), t.shape())));
        }
        sum += p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += p.data().len();
    }
    Ok(sum / count as f64)
}

fn sigmoid_grad(s: f64) -> f64 {
    s * (1.0 - s)
}

/// Reverse pass through one layer. `dh_out[t]` is the loss gradient flowing
/// into the hidden state emitted at step `t` from above. Parameter gradients
/// are added to `grads`; when `want_dx` is set the gradient with respect to
/// each input frame is returned.
fn layer_backward(
    p: &ConvLstmCellParams,
    caches: &[StepCache],
    dh_out: &[Vec<f64>],
    act: CellActivation,
    grads: &mut ConvLstmCellParams,
    want_dx: bool,
) -> Vec<Vec<f64>> {
    let (h, w) = p.grid();
    let state_len = p.filters() * h * w;
    let in_len = p.in_channels() * h * w;
    let hw = h * w;
    let steps = caches.len();

    let mut dx_all = if want_dx { vec![Vec::new(); steps] } else { Vec::new() };
    let mut dh_next = vec![0.0; state_len];
    let mut dc_next = vec![0.0; state_len];
    let mut dai = vec![0.0; state_len];
    let mut daf = vec![0.0; state_len];
    let mut dac = vec![0.0; state_len];
    let mut dao = vec![0.0; state_len];

    let (wci, wcf, wco) = (p.w_ci.data(), p.w_cf.data(), p.w_co.data());
    for t in (0..steps).rev() {
        let s = &caches[t];
        let mut dc_prev = vec![0.0; state_len];
        {
            let gci = grads.w_ci.data_mut();
            for n in 0..state_len {
                let dh = dh_out[t][n] + dh_next[n];
                let o = s.o[n];
                dao[n] = dh * s.c_act[n] * sigmoid_grad(o);
                let dct = dc_next[n] + dh * o * act.derivative(s.c[n], s.c_act[n]) + dao[n] * wco[n];
                daf[n] = dct * s.c_prev[n] * sigmoid_grad(s.f[n]);
                dai[n] = dct * s.cand[n] * sigmoid_grad(s.i[n]);
                dac[n] = dct * s.i[n] * act.derivative(s.cand_pre[n], s.cand[n]);
                dc_prev[n] = dct * s.f[n] + dai[n] * wci[n] + daf[n] * wcf[n];
                gci[n] += dai[n] * s.c_prev[n];
            }
        }
        for (g, d, src) in [
            (grads.w_cf.data_mut(), &daf, &s.c_prev),
            (grads.w_co.data_mut(), &dao, &s.c),
        ] {
            for n in 0..state_len {
                g[n] += d[n] * src[n];
            }
        }

        let mut dx = if want_dx { vec![0.0; in_len] } else { Vec::new() };
        let mut dh_prev = vec![0.0; state_len];
        let gates = [
            (&dai, &p.w_xi, &p.w_hi, &mut grads.w_xi, &mut grads.w_hi, &mut grads.b_i),
            (&daf, &p.w_xf, &p.w_hf, &mut grads.w_xf, &mut grads.w_hf, &mut grads.b_f),
            (&dac, &p.w_xc, &p.w_hc, &mut grads.w_xc, &mut grads.w_hc, &mut grads.b_c),
            (&dao, &p.w_xo, &p.w_ho, &mut grads.w_xo, &mut grads.w_ho, &mut grads.b_o),
        ];
        for (da, wx, wh, gwx, gwh, gb) in gates {
            conv_backward_accumulate(
                &s.x,
                h,
                w,
                wx,
                da,
                if want_dx { Some(&mut dx[..]) } else { None },
                gwx.data_mut(),
            );
            let dh_target = if t > 0 { Some(&mut dh_prev[..]) } else { None };
            conv_backward_accumulate(&s.h_prev, h, w, wh, da, dh_target, gwh.data_mut());
            for (f, b) in gb.iter_mut().enumerate() {
                *b += da[f * hw..(f + 1) * hw].iter().sum::<f64>();
            }
        }
        if want_dx {
            dx_all[t] = dx;
        }
        dh_next = dh_prev;
        dc_next = dc_prev;
    }
    dx_all
}

/// Loss of one sample; when `grads` is given, adds the sample's gradient
/// (scaled by `weight`) into it.
fn sample_loss_grad(
    spec: &NetworkSpec,
    params: &NetworkParams,
    frames: &[f64],
    steps: usize,
    target: &[f64],
    weight: f64,
    grads: Option<&mut GradientSet>,
) -> Result<f64> {
    let trace = forward_trace(spec, params, frames, steps)?;
    let hw = spec.grid.0 * spec.grid.1;
    let mut loss = 0.0;
    let mut dpred = vec![0.0; hw];
    for p in 0..hw {
        let e = trace.pred[p] - target[p];
        loss += e * e;
        dpred[p] = weight * 2.0 * e / hw as f64;
    }
    loss /= hw as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }
    let Some(grads) = grads else {
        return Ok(loss);
    };
    let g = &mut grads.0;

    let f2 = spec.layer2_filters;
    let h_last = &trace.layer2[steps - 1].h;
    g.head_b[0] += dpred.iter().sum::<f64>();
    let hw_grad = g.head_w.data_mut();
    let mut dh2 = vec![0.0; f2 * hw];
    for f in 0..f2 {
        for p in 0..hw {
            hw_grad[f] += dpred[p] * h_last[f * hw + p];
            dh2[f * hw + p] = dpred[p] * params.head_w.data()[f];
        }
    }
    let mut dh_out2 = vec![vec![0.0; f2 * hw]; steps];
    dh_out2[steps - 1] = dh2;
    let dx2 = layer_backward(&params.layer2, &trace.layer2, &dh_out2, spec.activation, &mut g.layer2, true);
    layer_backward(&params.layer1, &trace.layer1, &dx2, spec.activation, &mut g.layer1, false);
    Ok(loss)
}

/// Source of `(input frames, target)` training pairs.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Sequence length of every sample.
    fn steps(&self) -> usize;

    /// Input frames of sample `i`, `steps × channels × h × w`.
    fn input(&self, i: usize) -> Vec<f64>;

    /// Target grid of sample `i`, `h × w`.
    fn target(&self, i: usize) -> Vec<f64>;
}

/// Samples held fully in memory.
#[derive(Debug, Clone)]
pub struct InMemorySamples {
    pub steps: usize,
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl InMemorySamples {
    pub fn from_batch(batch: &SeqBatch, targets: &[Grid3]) -> Self {
        Self {
            steps: batch.time(),
            inputs: (0..batch.batch()).map(|b| batch.item(b).to_vec()).collect(),
            targets: targets.iter().map(|t| t.data().to_vec()).collect(),
        }
    }

    pub fn subset(&self, idx: impl IntoIterator<Item = usize>) -> Self {
        let idx: Vec<usize> = idx.into_iter().collect();
        Self {
            steps: self.steps,
            inputs: idx.iter().map(|&i| self.inputs[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

impl SampleSource for InMemorySamples {
    fn len(&self) -> usize {
        self.inputs.len()
    }

    fn steps(&self) -> usize {
        self.steps
    }

    fn input(&self, i: usize) -> Vec<f64> {
        self.inputs[i].clone()
    }

    fn target(&self, i: usize) -> Vec<f64> {
        self.targets[i].clone()
    }
}

/// Mean loss and mean gradient over the samples `idx` of `source`.
pub fn batch_loss_grad(
    spec: &NetworkSpec,
    params: &NetworkParams,
    source: &dyn SampleSource,
    idx: &[usize],
) -> Result<(f64, GradientSet)> {
    if idx.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let steps = source.steps();
    let partials: Vec<Result<(f64, GradientSet)>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut g = GradientSet::zeros(spec);
            let mut loss = 0.0;
            for &i in chunk {
                loss += sample_loss_grad(spec, params, &source.input(i), steps, &source.target(i), 1.0, Some(&mut g))?;
            }
            Ok((loss, g))
        })
        .collect();
    let mut total = GradientSet::zeros(spec);
    let mut loss = 0.0;
    for part in partials {
        let (l, g) = part?;
        loss += l;
        total.add_assign(&g);
    }
    let n = idx.len() as f64;
    total.scale(1.0 / n);
    total.check_finite()?;
    Ok((loss / n, total))
}

/// Mean loss over all samples of `source`, without gradients.
pub fn evaluate_loss(spec: &NetworkSpec, params: &NetworkParams, source: &dyn SampleSource) -> Result<f64> {
    if source.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    let steps = source.steps();
    let idx: Vec<usize> = (0..source.len()).collect();
    let partials: Vec<Result<f64>> = idx
        .par_chunks(CHUNK)
        .map(|chunk| {
            chunk.iter().try_fold(0.0, |acc, &i| {
                Ok(acc + sample_loss_grad(spec, params, &source.input(i), steps, &source.target(i), 1.0, None)?)
            })
        })
        .collect();
    let mut total = 0.0;
    for p in partials {
        total += p?;
    }
    Ok(total / source.len() as f64)
}

/// Network output for every sample of `source`, flattened `h × w` each.
pub fn predict(spec: &NetworkSpec, params: &NetworkParams, source: &dyn SampleSource) -> Result<Vec<Vec<f64>>> {
    let steps = source.steps();
    (0..source.len())
        .into_par_iter()
        .map(|i| Ok(forward_trace(spec, params, &source.input(i), steps)?.pred))
        .collect()
}

fn check_targets(spec: &NetworkSpec, batch: &SeqBatch, targets: &[Grid3]) -> Result<()> {
    check_batch(spec, batch)?;
    if targets.len() != batch.batch() {
        return Err(Error::Shape(format!(
            "{} targets for a batch of {}",
            targets.len(),
            batch.batch()
        )));
    }
    for t in targets {
        if t.shape() != (1, spec.grid.0, spec.grid.1) {
            return Err(Error::Shape(format!("target {:?} is not 1x{}x{}", t.shape(), spec.grid.0, spec.grid.1)));
        }
    }
    Ok(())
}

/// MSE loss of the network on `batch` and its exact gradient.
pub fn backward(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &SeqBatch,
    targets: &[Grid3],
) -> Result<(f64, GradientSet)> {
    spec.validate()?;
    params.validate(spec)?;
    check_targets(spec, batch, targets)?;
    let source = InMemorySamples::from_batch(batch, targets);
    let idx: Vec<usize> = (0..source.len()).collect();
    batch_loss_grad(spec, params, &source, &idx)
}

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over parameters of `|analytic - fd| / max(1, |fd|)`.
    pub max_relative_error: f64,
    pub worst_parameter: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks `analytic` against central differences of the batch loss.
pub fn grad_check_against(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &SeqBatch,
    targets: &[Grid3],
    analytic: &GradientSet,
    fd_step: f64,
) -> Result<GradCheckReport> {
    if fd_step.is_nan() || fd_step <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    check_targets(spec, batch, targets)?;
    let source = InMemorySamples::from_batch(batch, targets);
    let loss_at = |p: &NetworkParams| -> Result<f64> {
        let mut total = 0.0;
        for i in 0..source.len() {
            total += sample_loss_grad(spec, p, &source.inputs[i], source.steps, &source.targets[i], 1.0, None)?;
        }
        Ok(total / source.len() as f64)
    };

    let base = params.to_flat();
    let grad = analytic.to_flat();
    if grad.len() != base.len() {
        return Err(Error::Shape("gradient does not match parameters".into()));
    }
    let names: Vec<(String, usize)> = params
        .tensors()
        .iter()
        .flat_map(|t| (0..t.data.len()).map(move |k| (t.name.clone(), k)))
        .collect();

    let errors: Vec<Result<(f64, f64)>> = (0..base.len())
        .into_par_iter()
        .map(|n| {
            let mut p = params.clone();
            let mut flat = base.clone();
            flat[n] = base[n] + fd_step;
            p.set_flat(&flat)?;
            let up = loss_at(&p)?;
            flat[n] = base[n] - fd_step;
            p.set_flat(&flat)?;
            let down = loss_at(&p)?;
            Ok(((up - down) / (2.0 * fd_step), (grad[n])))
        })
        .collect();

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst_parameter: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (n, e) in errors.into_iter().enumerate() {
        let (fd, an) = e?;
        let rel = (an - fd).abs() / fd.abs().max(1.0);
        if rel > report.max_relative_error || report.worst_parameter.is_empty() {
            report = GradCheckReport {
                max_relative_error: rel,
                worst_parameter: names[n].0.clone(),
                worst_index: names[n].1,
                analytic: an,
                numeric: fd,
            };
        }
    }
    Ok(report)
}

/// Maximum relative error between [`backward`] and central differences.
pub fn grad_check(
    spec: &NetworkSpec,
    params: &NetworkParams,
    batch: &SeqBatch,
    targets: &[Grid3],
    fd_step: f64,
) -> Result<f64> {
    let (_, analytic) = backward(spec, params, batch, targets)?;
    Ok(grad_check_against(spec, params, batch, targets, &analytic, fd_step)?.max_relative_error)
}

/// Smallest distance from the relu kink over every candidate pre-activation
/// and every nonzero cell state the batch visits. Finite differences are
/// only meaningful when this is comfortably larger than the step.
pub fn relu_kink_margin(spec: &NetworkSpec, params: &NetworkParams, batch: &SeqBatch) -> Result<f64> {
    check_batch(spec, batch)?;
    let mut margin = f64::INFINITY;
    let visit = |caches: &[StepCache], margin: &mut f64| {
        for s in caches {
            for &z in &s.cand_pre {
                *margin = margin.min(z.abs());
            }
            for &c in &s.c {
                if c != 0.0 {
                    *margin = margin.min(c.abs());
                }
            }
        }
    };
    for b in 0..batch.batch() {
        let l1 = layer_forward_cached(&params.layer1, batch.item(b), batch.time(), spec.activation)?;
        let mut hidden = Vec::new();
        for s in &l1 {
            hidden.extend_from_slice(&s.h);
        }
        let l2 = layer_forward_cached(&params.layer2, &hidden, batch.time(), spec.activation)?;
        visit(&l1, &mut margin);
        visit(&l2, &mut margin);
    }
    Ok(margin)
}

/// First and second moment estimates, one entry per scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(num_params: usize) -> Self {
        Self {
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based).
pub fn adam_step(
    params: &mut NetworkParams,
    grads: &GradientSet,
    state: &mut AdamState,
    config: &TrainConfig,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(Error::InvalidArgument("Adam step index starts at 1".into()));
    }
    let n = params.num_params();
    if state.m.len() != n || state.v.len() != n || grads.0.num_params() != n {
        return Err(Error::Shape("Adam state does not match parameters".into()));
    }
    let bc1 = 1.0 - config.beta1.powi(t as i32);
    let bc2 = 1.0 - config.beta2.powi(t as i32);
    let grad_tensors = grads.0.tensors();
    let mut offset = 0;
    for (p, g) in params.slices_mut().into_iter().zip(grad_tensors) {
        for (k, (x, &gk)) in p.iter_mut().zip(g.data).enumerate() {
            let m = &mut state.m[offset + k];
            let v = &mut state.v[offset + k];
            *m = config.beta1 * *m + (1.0 - config.beta1) * gk;
            *v = config.beta2 * *v + (1.0 - config.beta2) * gk * gk;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            let denom = v_hat.sqrt() + config.epsilon;
            if denom > 0.0 {
                *x -= config.learning_rate * m_hat / denom;
            }
        }
        offset += p.len();
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopped,
    Diverged,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::MaxEpochs => "max_epochs",
            StopReason::EarlyStopped => "early_stopped",
            StopReason::Diverged => "diverged",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean mini-batch loss over the epoch, measured before each update.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub seconds: f64,
}

impl EpochRecord {
    /// `epoch train_loss val_loss seconds`; val_loss is `-` without a validation split.
    pub fn log_line(&self) -> String {
        let val = match self.val_loss {
            Some(v) => format!("{v:.10e}"),
            None => "-".into(),
        };
        format!("{} {:.10e} {} {:.3}", self.epoch, self.train_loss, val, self.seconds)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch (1-based) whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainHistory {
    /// Losses and stopping decision with wall-clock times stripped, for
    /// reproducibility comparisons.
    pub fn losses(&self) -> Vec<(f64, Option<f64>)> {
        self.epochs.iter().map(|e| (e.train_loss, e.val_loss)).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: NetworkParams,
    pub history: TrainHistory,
}

/// Trains from [`init_params`] with `config.seed`.
pub fn train(
    spec: &NetworkSpec,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(spec, init_params(spec, config.seed), train_set, val_set, config, &mut |_| {})
}

/// Mini-batch Adam over shuffled training samples with early stopping on
/// validation loss. `on_epoch` sees every completed epoch.
pub fn train_with(
    spec: &NetworkSpec,
    initial: NetworkParams,
    train_set: &dyn SampleSource,
    val_set: &dyn SampleSource,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    spec.validate()?;
    config.validate()?;
    initial.validate(spec)?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training split is empty".into()));
    }

    let mut params = initial;
    let mut adam = AdamState::new(params.num_params());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5348_5546_464c_4521);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step: u64 = 0;

    let mut epochs = Vec::new();
    let mut best: Option<(f64, usize, NetworkParams)> = None;
    let mut since_best = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let epoch_start = params.clone();
        order.shuffle(&mut rng);

        let mut loss_sum = 0.0;
        let mut diverged = false;
        for batch in order.chunks(config.batch_size) {
            let (loss, mut grads) = match batch_loss_grad(spec, &params, train_set, batch) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            if !spec.peepholes {
                grads.zero_peepholes();
            }
            if let Some(max_norm) = config.clip_norm {
                let norm = grads.l2_norm();
                if norm > max_norm {
                    grads.scale(max_norm / norm);
                }
            }
            step += 1;
            adam_step(&mut params, &grads, &mut adam, config, step)?;
            if params.to_flat().iter().any(|v| !v.is_finite()) {
                diverged = true;
                break;
            }
            loss_sum += loss * batch.len() as f64;
        }

        let val_loss = if diverged || val_set.is_empty() {
            None
        } else {
            match evaluate_loss(spec, &params, val_set) {
                Ok(v) => Some(v),
                Err(Error::NonFinite(_)) => {
                    diverged = true;
                    None
                }
                Err(e) => return Err(e),
            }
        };

        if diverged {
            stop_reason = StopReason::Diverged;
            let history_best = match best {
                Some((_, e, p)) => {
                    params = p;
                    e
                }
                None => {
                    params = epoch_start;
                    epoch - 1
                }
            };
            return Ok(TrainOutcome {
                params,
                history: TrainHistory {
                    epochs,
                    stop_reason,
                    best_epoch: history_best,
                },
            });
        }

        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        epochs.push(record);

        if let Some(v) = val_loss {
            let improved = best.as_ref().is_none_or(|(b, _, _)| v < *b);
            if improved {
                best = Some((v, epoch, params.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= config.early_stop_patience {
                    stop_reason = StopReason::EarlyStopped;
                    break;
                }
            }
        }
    }

    let best_epoch = match best {
        Some((_, e, p)) => {
            params = p;
            e
        }
        None => epochs.len(),
    };
    Ok(TrainOutcome {
        params,
        history: TrainHistory {
            epochs,
            stop_reason,
            best_epoch,
        },
    })
}
