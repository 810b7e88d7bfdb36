//! Synthetic gridded datasets with known predictive structure, plus naive
//! reference implementations used as test oracles (see [`reference`]).
//!
//! A unit-variance latent field `s` evolves on the 2×2 torus. Each predictor
//! at hour `t` is a monotone map of `s` at `t - lag` (lag 0..=3) plus
//! Gaussian noise with standard deviation `1 / signal_to_noise`, scaled into
//! a plausible physical range. Rainfall at hour `t` is
//! `1.5 · softplus(2 · (s[t - lead] - 0.5))` mm, so tp at `t + lead` is a
//! function of the lag-0 predictors at `t`.

use chrono::{DateTime, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::datapipe::{GridSeriesDataset, Variable, CELLS, GRID_COLS, GRID_ROWS, NUM_VARIABLES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dynamics {
    /// Cyclic shift of the field across the torus mixed with persistence.
    Advection,
    /// Spatially correlated AR(1) noise without transport.
    CorrelatedNoise,
}

impl std::str::FromStr for Dynamics {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "advection" => Ok(Dynamics::Advection),
            "correlated-noise" => Ok(Dynamics::CorrelatedNoise),
            _ => Err(Error::InvalidArgument(format!(
                "unknown dynamics {s:?} (expected advection or correlated-noise)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub hours: usize,
    pub dynamics: Dynamics,
    /// Latent-to-noise standard deviation ratio; `f64::INFINITY` for no noise.
    pub signal_to_noise: f64,
    /// Hours by which rainfall trails the latent field.
    pub lead: usize,
    /// Correlation between a predictor's driver and the latent field; the
    /// remainder of its variance comes from an independent field.
    pub planted_correlations: Vec<(Variable, f64)>,
    pub start_time: DateTime<Utc>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            hours: 2000,
            dynamics: Dynamics::Advection,
            signal_to_noise: 10.0,
            lead: 6,
            planted_correlations: Vec::new(),
            start_time: Utc.with_ymd_and_hms(2011, 1, 1, 0, 0, 0).unwrap(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hours < 48 {
            return Err(Error::InvalidArgument("synthetic datasets need at least 48 hours".into()));
        }
        if self.signal_to_noise.is_nan() || self.signal_to_noise <= 0.0 {
            return Err(Error::InvalidArgument("signal_to_noise must be positive (inf for no noise)".into()));
        }
        if self.lead == 0 {
            return Err(Error::InvalidArgument("lead must be at least 1".into()));
        }
        for &(v, rho) in &self.planted_correlations {
            if v == Variable::Tp {
                return Err(Error::InvalidArgument("tp is the target; it cannot carry a planted correlation".into()));
            }
            if !(-1.0..=1.0).contains(&rho) {
                return Err(Error::InvalidArgument(format!("planted correlation {rho} for {v} outside [-1, 1]")));
            }
        }
        Ok(())
    }
}

const PERSISTENCE: f64 = 0.95;
const ADVECTION_MIX: f64 = 0.4;
const SPATIAL_COHERENCE: f64 = 0.5;
const BURN_IN: usize = 200;
const MAX_LAG: usize = 3;

/// Torus neighbour that moves into cell `k` at hour `t`: along rows on even
/// hours, along columns on odd hours.
fn upstream(k: usize, t: usize) -> usize {
    let (r, c) = (k / GRID_COLS, k % GRID_COLS);
    if t.is_multiple_of(2) {
        r * GRID_COLS + (c + 1) % GRID_COLS
    } else {
        ((r + 1) % GRID_ROWS) * GRID_COLS + c
    }
}

/// `len` hours of a standardized latent field, `[hour][cell]`.
fn latent_field(rng: &mut ChaCha8Rng, dynamics: Dynamics, len: usize) -> Vec<[f64; CELLS]> {
    let innovation = (1.0 - PERSISTENCE * PERSISTENCE).sqrt();
    let mut s = [0.0; CELLS];
    let mut out = Vec::with_capacity(len);
    for t in 0..BURN_IN + len {
        let common: f64 = rng.sample(StandardNormal);
        let mut next = [0.0; CELLS];
        for (k, nk) in next.iter_mut().enumerate() {
            let local: f64 = rng.sample(StandardNormal);
            let eta = SPATIAL_COHERENCE.sqrt() * common + (1.0 - SPATIAL_COHERENCE).sqrt() * local;
            let carried = match dynamics {
                Dynamics::Advection => ADVECTION_MIX * s[upstream(k, t)] + (1.0 - ADVECTION_MIX) * s[k],
                Dynamics::CorrelatedNoise => s[k],
            };
            *nk = PERSISTENCE * carried + innovation * eta;
        }
        s = next;
        if t >= BURN_IN {
            out.push(s);
        }
    }
    let n = (len * CELLS) as f64;
    let mean = out.iter().flatten().sum::<f64>() / n;
    let var = out.iter().flatten().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    for row in &mut out {
        for v in row.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }
    out
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Rainfall (mm) produced by latent value `s`.
pub fn rain_from_latent(s: f64) -> f64 {
    1.5 * softplus(2.0 * (s - 0.5))
}

/// Lag in hours and monotone map from the (noisy) latent value to physical
/// units, per predictor.
fn predictor_map(var: Variable) -> (usize, fn(f64) -> f64) {
    match var {
        Variable::T250 => (3, |u| 228.0 + 2.0 * u),
        Variable::T500 => (2, |u| 266.0 + 1.5 * u),
        Variable::T850 => (1, |u| 292.0 - 1.2 * u),
        Variable::Rh250 => (2, |u| 100.0 * logistic(0.8 * u - 0.5)),
        Variable::Rh500 => (0, |u| 100.0 * logistic(1.2 * u)),
        Variable::Rh850 => (1, |u| 100.0 * logistic(u + 0.8)),
        Variable::Pv500 => (0, |u| 4.0e-7 + 1.5e-7 * (0.8 * u).tanh()),
        Variable::Pv850 => (2, |u| 6.0e-7 + 2.0e-7 * (0.7 * u).tanh()),
        Variable::Tcc => (0, |u| 100.0 * logistic(1.5 * u + 0.5)),
        Variable::Hcc => (1, |u| 100.0 * logistic(1.2 * u - 0.3)),
        Variable::Sp => (0, |u| 100_800.0 - 250.0 * u),
        Variable::Tp => unreachable!("tp is generated from the latent field directly"),
    }
}

/// Inverse of the surface-pressure map: latent value encoded by `sp` at zero noise.
pub fn latent_from_sp(sp: f64) -> f64 {
    (100_800.0 - sp) / 250.0
}

/// Generates a dataset with the structure described at module level.
pub fn gen_advection(config: &SynthConfig) -> Result<GridSeriesDataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    // Index 0 of the latent corresponds to hour -offset.
    let offset = MAX_LAG.max(config.lead);
    let total = config.hours + offset;
    let latent = latent_field(&mut rng, config.dynamics, total);

    let noise_sd = if config.signal_to_noise.is_infinite() {
        0.0
    } else {
        1.0 / config.signal_to_noise
    };

    let mut values = vec![0.0; config.hours * NUM_VARIABLES * CELLS];
    for var in Variable::PREDICTORS {
        let (lag, map) = predictor_map(var);
        let planted = config
            .planted_correlations
            .iter()
            .find(|(v, _)| *v == var)
            .map(|&(_, rho)| rho);
        let independent = planted.map(|_| latent_field(&mut rng, config.dynamics, total));
        for h in 0..config.hours {
            let li = h + offset - lag;
            for k in 0..CELLS {
                let mut driver = latent[li][k];
                if let (Some(rho), Some(other)) = (planted, independent.as_ref()) {
                    driver = rho * driver + (1.0 - rho * rho).sqrt() * other[li][k];
                }
                let noise: f64 = if noise_sd > 0.0 {
                    noise_sd * rng.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                values[(h * NUM_VARIABLES + var.index()) * CELLS + k] = map(driver + noise);
            }
        }
    }
    for h in 0..config.hours {
        let li = h + offset - config.lead;
        for k in 0..CELLS {
            values[(h * NUM_VARIABLES + Variable::Tp.index()) * CELLS + k] = rain_from_latent(latent[li][k]);
        }
    }
    GridSeriesDataset::new(config.start_time, config.hours, values)
}

/// `y = ρx + sqrt(1-ρ²)z` with `x`, `z` independent standard normals.
pub fn gen_correlated_pair(seed: u64, rho: f64, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(-1.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside [-1, 1]")));
    }
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two draws".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = (1.0 - rho * rho).sqrt();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let a: f64 = rng.sample(StandardNormal);
        let z: f64 = rng.sample(StandardNormal);
        x.push(a);
        y.push(rho * a + scale * z);
    }
    Ok((x, y))
}

/// Deliberately literal re-implementations of the primary numerics. They
/// share no helpers with the code they check; use them only as oracles.
#[allow(clippy::needless_range_loop)]
pub mod reference {
    use crate::convlstm::{CellActivation, CellState, ConvLstmCellParams};
    use crate::tensor::{ConvKernel, Grid3};

    /// Same-padded cross-correlation written as a loop over every output
    /// element, padding the input explicitly first.
    pub fn reference_conv2d(input: &Grid3, kernel: &ConvKernel, bias: &[f64]) -> Vec<f64> {
        let cin = input.channels();
        let h = input.height();
        let w = input.width();
        let [cout, _, kh, kw] = kernel.shape();
        let top = (kh - 1) / 2;
        let left = (kw - 1) / 2;
        let ph = h + kh - 1;
        let pw = w + kw - 1;
        let mut padded = vec![0.0; cin * ph * pw];
        for c in 0..cin {
            for i in 0..h {
                for j in 0..w {
                    padded[c * ph * pw + (i + top) * pw + (j + left)] = input.data()[c * h * w + i * w + j];
                }
            }
        }
        let mut out = vec![0.0; cout * h * w];
        for o in 0..cout {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = bias[o];
                    for c in 0..cin {
                        for a in 0..kh {
                            for b in 0..kw {
                                let k = kernel.data()[((o * cin + c) * kh + a) * kw + b];
                                acc += padded[c * ph * pw + (i + a) * pw + (j + b)] * k;
                            }
                        }
                    }
                    out[o * h * w + i * w + j] = acc;
                }
            }
        }
        out
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn act(a: CellActivation, x: f64) -> f64 {
        match a {
            CellActivation::Tanh => x.tanh(),
            CellActivation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
        }
    }

    /// One cell step, gate by gate. Returns `(H, C)` as flat vectors.
    pub fn reference_cell_step(
        p: &ConvLstmCellParams,
        x: &Grid3,
        prev: &CellState,
        activation: CellActivation,
    ) -> (Vec<f64>, Vec<f64>) {
        let f = p.w_xi.out_channels();
        let n = f * x.height() * x.width();
        let zero_bias = vec![0.0; f];
        let conv_sum = |wx: &ConvKernel, wh: &ConvKernel, b: &[f64]| -> Vec<f64> {
            let a = reference_conv2d(x, wx, b);
            let c = reference_conv2d(&prev.h, wh, &zero_bias);
            (0..n).map(|k| a[k] + c[k]).collect()
        };
        let cp = prev.c.data();

        let zi = conv_sum(&p.w_xi, &p.w_hi, &p.b_i);
        let zf = conv_sum(&p.w_xf, &p.w_hf, &p.b_f);
        let zc = conv_sum(&p.w_xc, &p.w_hc, &p.b_c);
        let zo = conv_sum(&p.w_xo, &p.w_ho, &p.b_o);

        let mut c_new = vec![0.0; n];
        let mut h_new = vec![0.0; n];
        for k in 0..n {
            let i_gate = sig(zi[k] + p.w_ci.data()[k] * cp[k]);
            let f_gate = sig(zf[k] + p.w_cf.data()[k] * cp[k]);
            c_new[k] = f_gate * cp[k] + i_gate * act(activation, zc[k]);
        }
        for k in 0..n {
            let o_gate = sig(zo[k] + p.w_co.data()[k] * c_new[k]);
            h_new[k] = o_gate * act(activation, c_new[k]);
        }
        (h_new, c_new)
    }

    fn avg(v: &[f64]) -> f64 {
        let mut s = 0.0;
        for i in 0..v.len() {
            s += v[i];
        }
        s / v.len() as f64
    }

    /// Two-pass Pearson correlation.
    pub fn reference_pearson(x: &[f64], y: &[f64]) -> f64 {
        let (mx, my) = (avg(x), avg(y));
        let mut num = 0.0;
        let mut dx = 0.0;
        let mut dy = 0.0;
        for i in 0..x.len() {
            num += (x[i] - mx) * (y[i] - my);
            dx += (x[i] - mx).powi(2);
            dy += (y[i] - my).powi(2);
        }
        num / (dx.sqrt() * dy.sqrt())
    }

    pub fn reference_nse(obs: &[f64], pred: &[f64]) -> f64 {
        let m = avg(obs);
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..obs.len() {
            num += (obs[i] - pred[i]).powi(2);
            den += (obs[i] - m).powi(2);
        }
        1.0 - num / den
    }

    pub fn reference_nrmse(obs: &[f64], pred: &[f64]) -> f64 {
        let mut sq = 0.0;
        for i in 0..obs.len() {
            sq += (obs[i] - pred[i]).powi(2);
        }
        (sq / obs.len() as f64).sqrt() / avg(obs)
    }

    /// Counts windows by testing every candidate anchor hour.
    pub fn count_windows_brute_force(hours: usize, input_length: usize, lead: usize) -> usize {
        let mut n = 0;
        for anchor in 0..hours {
            let first_input = anchor as i64 - input_length as i64 + 1;
            let target = anchor + lead;
            if first_input >= 0 && target < hours {
                n += 1;
            }
        }
        n
    }
}
