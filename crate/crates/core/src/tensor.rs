//! Dense 64-bit tensors and the handful of operations the ConvLSTM needs:
//! same-padded 2-D cross-correlation, pointwise activations and the
//! Hadamard product.
//!
//! Even kernels are padded on the trailing side: for a kernel of height `k`
//! the top pad is `(k - 1) / 2` and the bottom pad takes the remainder, so a
//! 2×2 kernel reads the cell itself, its right and lower neighbours, and
//! zeros past the edge. Kernels are not flipped.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(format!("{what} (flat index {i})"))),
        None => Ok(()),
    }
}

/// A `channels × height × width` field stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid3 {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Shape(format!(
                "grid dimensions must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::Shape(format!(
                "grid {channels}x{height}x{width} needs {} values, got {}",
                channels * height * width,
                data.len()
            )));
        }
        check_finite(&data, "grid")?;
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    /// Caller guarantees length and finiteness.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "grid dimensions must be positive");
        assert!(value.is_finite());
        Self::from_raw(channels, height, width, vec![value; channels * height * width])
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.data[(c * self.height + i) * self.width + j]
    }

    fn same_shape(&self, other: &Grid3, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Grid3 {
        Grid3::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Convolution weights laid out `[out][in][kh][kw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernel {
    out_channels: usize,
    in_channels: usize,
    kh: usize,
    kw: usize,
    data: Vec<f64>,
}

impl ConvKernel {
    pub fn new(out_channels: usize, in_channels: usize, kh: usize, kw: usize, data: Vec<f64>) -> Result<Self> {
        if out_channels == 0 || in_channels == 0 || kh == 0 || kw == 0 {
            return Err(Error::Shape(format!(
                "kernel dimensions must be positive, got {out_channels}x{in_channels}x{kh}x{kw}"
            )));
        }
        let n = out_channels * in_channels * kh * kw;
        if data.len() != n {
            return Err(Error::Shape(format!(
                "kernel {out_channels}x{in_channels}x{kh}x{kw} needs {n} values, got {}",
                data.len()
            )));
        }
        check_finite(&data, "kernel")?;
        Ok(Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data,
        })
    }

    pub fn zeros(out_channels: usize, in_channels: usize, kh: usize, kw: usize) -> Self {
        assert!(out_channels > 0 && in_channels > 0 && kh > 0 && kw > 0);
        Self {
            out_channels,
            in_channels,
            kh,
            kw,
            data: vec![0.0; out_channels * in_channels * kh * kw],
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn kh(&self) -> usize {
        self.kh
    }

    pub fn kw(&self) -> usize {
        self.kw
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kh, self.kw]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// A batch of frame sequences, laid out `[batch][time][channel][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqBatch {
    batch: usize,
    time: usize,
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SeqBatch {
    pub fn new(
        batch: usize,
        time: usize,
        channels: usize,
        height: usize,
        width: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if [batch, time, channels, height, width].contains(&0) {
            return Err(Error::Shape(format!(
                "sequence batch dimensions must be positive, got {batch}x{time}x{channels}x{height}x{width}"
            )));
        }
        let n = batch * time * channels * height * width;
        if data.len() != n {
            return Err(Error::Shape(format!("sequence batch needs {n} values, got {}", data.len())));
        }
        check_finite(&data, "sequence batch")?;
        Ok(Self {
            batch,
            time,
            channels,
            height,
            width,
            data,
        })
    }

    /// Stacks equally shaped frames `[item][time]` into a batch.
    pub fn from_frames(items: &[Vec<Grid3>]) -> Result<Self> {
        let first = items
            .first()
            .and_then(|seq| seq.first())
            .ok_or_else(|| Error::Shape("empty sequence batch".into()))?;
        let (c, h, w) = first.shape();
        let time = items[0].len();
        let mut data = Vec::with_capacity(items.len() * time * c * h * w);
        for seq in items {
            if seq.len() != time {
                return Err(Error::Shape("sequences in a batch must share a length".into()));
            }
            for frame in seq {
                if frame.shape() != (c, h, w) {
                    return Err(Error::Shape(format!(
                        "frame {:?} does not match {:?}",
                        frame.shape(),
                        (c, h, w)
                    )));
                }
                data.extend_from_slice(frame.data());
            }
        }
        Ok(Self {
            batch: items.len(),
            time,
            channels: c,
            height: h,
            width: w,
            data,
        })
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn time(&self) -> usize {
        self.time
    }

    pub fn frame_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// All frames of one batch item, contiguous.
    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.time * self.frame_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn frame(&self, b: usize, t: usize) -> Grid3 {
        let fl = self.frame_len();
        let start = (b * self.time + t) * fl;
        Grid3::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data[start..start + fl].to_vec(),
        )
    }
}

/// Leading pad for a same-padded kernel of extent `k`.
#[inline]
pub(crate) fn pad_before(k: usize) -> usize {
    (k - 1) / 2
}

/// In-bounds `(kernel offset, input index, output index)` triples for a
/// same-padded kernel on an `h × w` grid, within a single channel.
fn build_taps(h: usize, w: usize, kh: usize, kw: usize) -> Vec<(usize, usize, usize)> {
    let (pt, pl) = (pad_before(kh), pad_before(kw));
    let mut out = Vec::with_capacity(kh * kw * h * w);
    for a in 0..kh {
        for b in 0..kw {
            for i in 0..h {
                let si = i + a;
                if si < pt || si - pt >= h {
                    continue;
                }
                for j in 0..w {
                    let sj = j + b;
                    if sj < pl || sj - pl >= w {
                        continue;
                    }
                    out.push((a * kw + b, (si - pt) * w + (sj - pl), i * w + j));
                }
            }
        }
    }
    out
}

type TapKey = (usize, usize, usize, usize);
type Taps = Rc<[(usize, usize, usize)]>;

thread_local! {
    static TAPS: RefCell<Option<(TapKey, Taps)>> = const { RefCell::new(None) };
}

fn taps(h: usize, w: usize, kh: usize, kw: usize) -> Taps {
    TAPS.with(|cell| {
        let mut slot = cell.borrow_mut();
        match &*slot {
            Some((key, t)) if *key == (h, w, kh, kw) => t.clone(),
            _ => {
                let t: Rc<[_]> = build_taps(h, w, kh, kw).into();
                *slot = Some(((h, w, kh, kw), t.clone()));
                t
            }
        }
    })
}

/// `out += conv(input, kernel)` on raw buffers. `input` is `cin × h × w`,
/// `out` is `cout × h × w`.
pub(crate) fn conv_accumulate(input: &[f64], h: usize, w: usize, kernel: &ConvKernel, out: &mut [f64]) {
    let (cout, cin, kk) = (kernel.out_channels, kernel.in_channels, kernel.kh * kernel.kw);
    let hw = h * w;
    let taps = taps(h, w, kernel.kh, kernel.kw);
    for (o, out_o) in out[..cout * hw].chunks_exact_mut(hw).enumerate() {
        let k_o = &kernel.data[o * cin * kk..(o + 1) * cin * kk];
        for (in_c, k_oc) in input[..cin * hw].chunks_exact(hw).zip(k_o.chunks_exact(kk)) {
            for &(ki, ii, oi) in taps.iter() {
                out_o[oi] += k_oc[ki] * in_c[ii];
            }
        }
    }
}

/// Reverse of [`conv_accumulate`]: given `grad_out` (`cout × h × w`), adds
/// the input gradient into `grad_in` and the kernel gradient into
/// `grad_kernel` (same layout as the kernel data).
pub(crate) fn conv_backward_accumulate(
    input: &[f64],
    h: usize,
    w: usize,
    kernel: &ConvKernel,
    grad_out: &[f64],
    mut grad_in: Option<&mut [f64]>,
    grad_kernel: &mut [f64],
) {
    let (cout, cin, kk) = (kernel.out_channels, kernel.in_channels, kernel.kh * kernel.kw);
    let hw = h * w;
    let taps = taps(h, w, kernel.kh, kernel.kw);
    for o in 0..cout {
        let go = &grad_out[o * hw..(o + 1) * hw];
        if go.iter().all(|&g| g == 0.0) {
            continue;
        }
        for c in 0..cin {
            let in_c = &input[c * hw..(c + 1) * hw];
            let base = (o * cin + c) * kk;
            let gk = &mut grad_kernel[base..base + kk];
            for &(ki, ii, oi) in taps.iter() {
                gk[ki] += go[oi] * in_c[ii];
            }
            if let Some(gi) = grad_in.as_deref_mut() {
                let k_oc = &kernel.data[base..base + kk];
                let gi_c = &mut gi[c * hw..(c + 1) * hw];
                for &(ki, ii, oi) in taps.iter() {
                    gi_c[ii] += go[oi] * k_oc[ki];
                }
            }
        }
    }
}

/// Same-padded 2-D cross-correlation with per-output-channel bias.
pub fn conv2d_same(input: &Grid3, kernel: &ConvKernel, bias: &[f64]) -> Result<Grid3> {
    if kernel.in_channels != input.channels {
        return Err(Error::Shape(format!(
            "kernel expects {} input channels, grid has {}",
            kernel.in_channels, input.channels
        )));
    }
    if bias.len() != kernel.out_channels {
        return Err(Error::Shape(format!(
            "bias has {} entries for {} output channels",
            bias.len(),
            kernel.out_channels
        )));
    }
    check_finite(input.data(), "conv2d input")?;
    check_finite(bias, "conv2d bias")?;
    let (h, w) = (input.height, input.width);
    let mut out = Vec::with_capacity(kernel.out_channels * h * w);
    for &b in bias {
        out.extend(std::iter::repeat_n(b, h * w));
    }
    conv_accumulate(&input.data, h, w, kernel, &mut out);
    Ok(Grid3::from_raw(kernel.out_channels, h, w, out))
}

/// Gradients of [`conv2d_same`] with respect to its input, kernel and bias.
pub fn conv2d_same_backward(
    input: &Grid3,
    kernel: &ConvKernel,
    grad_out: &Grid3,
) -> Result<(Grid3, ConvKernel, Vec<f64>)> {
    if kernel.in_channels != input.channels
        || grad_out.shape() != (kernel.out_channels, input.height, input.width)
    {
        return Err(Error::Shape("conv2d_same_backward: inconsistent shapes".into()));
    }
    let (h, w) = (input.height, input.width);
    let mut gi = vec![0.0; input.data.len()];
    let mut gk = vec![0.0; kernel.data.len()];
    conv_backward_accumulate(&input.data, h, w, kernel, &grad_out.data, Some(&mut gi), &mut gk);
    let gb = grad_out
        .data
        .chunks(h * w)
        .map(|c| c.iter().sum())
        .collect();
    Ok((
        Grid3::from_raw(input.channels, h, w, gi),
        ConvKernel {
            data: gk,
            ..kernel.clone()
        },
        gb,
    ))
}

#[inline]
pub(crate) fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Grid3) -> Grid3 {
    x.map(sigmoid_scalar)
}

pub fn tanh_act(x: &Grid3) -> Grid3 {
    x.map(f64::tanh)
}

pub fn relu(x: &Grid3) -> Grid3 {
    x.map(|v| v.max(0.0))
}

pub fn hadamard(a: &Grid3, b: &Grid3) -> Result<Grid3> {
    a.same_shape(b, "hadamard")?;
    Ok(Grid3::from_raw(
        a.channels,
        a.height,
        a.width,
        a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    ))
}

pub fn add(a: &Grid3, b: &Grid3) -> Result<Grid3> {
    a.same_shape(b, "add")?;
    Ok(Grid3::from_raw(
        a.channels,
        a.height,
        a.width,
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    ))
}

pub fn scale(a: &Grid3, s: f64) -> Grid3 {
    a.map(|v| v * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(c: usize, h: usize, w: usize, d: &[f64]) -> Grid3 {
        Grid3::new(c, h, w, d.to_vec()).unwrap()
    }

    #[test]
    fn ones_kernel_on_2x2_pads_trailing_side() {
        let x = g(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let k = ConvKernel::new(1, 1, 2, 2, vec![1.0; 4]).unwrap();
        let y = conv2d_same(&x, &k, &[0.0]).unwrap();
        assert_eq!(y.data(), &[10.0, 6.0, 7.0, 4.0]);
    }

    #[test]
    fn identity_kernel() {
        let x = g(1, 3, 2, &[0.5, -1.0, 2.0, 7.0, 3.25, -0.125]);
        let k = ConvKernel::new(1, 1, 1, 1, vec![1.0]).unwrap();
        assert_eq!(conv2d_same(&x, &k, &[0.0]).unwrap(), x);
    }

    #[test]
    fn odd_kernel_is_centred() {
        // 3x3 ones on a 3x3 grid of ones counts in-bounds neighbours.
        let x = Grid3::filled(1, 3, 3, 1.0);
        let k = ConvKernel::new(1, 1, 3, 3, vec![1.0; 9]).unwrap();
        let y = conv2d_same(&x, &k, &[0.0]).unwrap();
        assert_eq!(y.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_rejects_bad_shapes_and_values() {
        let x = Grid3::zeros(2, 2, 2);
        let k = ConvKernel::zeros(1, 3, 2, 2);
        assert!(matches!(conv2d_same(&x, &k, &[0.0]), Err(Error::Shape(_))));
        let k = ConvKernel::zeros(1, 2, 2, 2);
        assert!(matches!(conv2d_same(&x, &k, &[0.0, 1.0]), Err(Error::Shape(_))));
        assert!(matches!(conv2d_same(&x, &k, &[f64::NAN]), Err(Error::NonFinite(_))));
        assert!(Grid3::new(1, 1, 2, vec![0.0, f64::INFINITY]).is_err());
        assert!(Grid3::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(ConvKernel::new(1, 1, 2, 2, vec![0.0; 5]).is_err());
    }

    #[test]
    fn activations_at_definition_points() {
        let z = Grid3::zeros(2, 2, 2);
        assert!(sigmoid(&z).data().iter().all(|&v| v == 0.5));
        assert!(tanh_act(&z).data().iter().all(|&v| v == 0.0));
        let x = g(1, 1, 2, &[-3.0, 3.0]);
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
        let two = Grid3::filled(1, 1, 1, 2.0);
        assert!((sigmoid(&two).data()[0] - 0.880797).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        let x = g(1, 1, 2, &[-800.0, 800.0]);
        let s = sigmoid(&x);
        assert!(s.data().iter().all(|v| v.is_finite()));
        assert_eq!(s.data()[1], 1.0);
    }

    #[test]
    fn hadamard_cases() {
        let a = g(1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(hadamard(&a, &Grid3::filled(1, 2, 2, 1.0)).unwrap(), a);
        assert_eq!(hadamard(&a, &Grid3::zeros(1, 2, 2)).unwrap(), Grid3::zeros(1, 2, 2));
        let b = Grid3::filled(1, 2, 2, 2.0);
        assert_eq!(hadamard(&a, &b).unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
        assert!(hadamard(&a, &Grid3::zeros(2, 2, 2)).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let x = g(2, 2, 3, &[0.3, -0.2, 0.9, 1.1, -0.7, 0.05, 0.4, 0.8, -1.3, 0.6, 0.2, -0.1]);
        let kd: Vec<f64> = (0..2 * 2 * 2 * 2).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let k = ConvKernel::new(2, 2, 2, 2, kd).unwrap();
        let go = g(2, 2, 3, &[1.0, -0.5, 0.25, 0.0, 2.0, -1.0, 0.5, 0.5, -0.25, 1.5, 0.1, 0.9]);
        let (gi, gk, gb) = conv2d_same_backward(&x, &k, &go).unwrap();
        let loss = |x: &Grid3, k: &ConvKernel, b: &[f64]| -> f64 {
            let y = conv2d_same(x, k, b).unwrap();
            y.data().iter().zip(go.data()).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-6;
        for n in 0..x.data().len() {
            let mut xp = x.clone();
            xp.data_mut()[n] += eps;
            let mut xm = x.clone();
            xm.data_mut()[n] -= eps;
            let fd = (loss(&xp, &k, &[0.0, 0.0]) - loss(&xm, &k, &[0.0, 0.0])) / (2.0 * eps);
            assert!((fd - gi.data()[n]).abs() < 1e-8);
        }
        for n in 0..k.data().len() {
            let mut kp = k.clone();
            kp.data_mut()[n] += eps;
            let mut km = k.clone();
            km.data_mut()[n] -= eps;
            let fd = (loss(&x, &kp, &[0.0, 0.0]) - loss(&x, &km, &[0.0, 0.0])) / (2.0 * eps);
            assert!((fd - gk.data()[n]).abs() < 1e-8);
        }
        assert!((gb[0] - 1.75).abs() < 1e-12);
        assert!((gb[1] - 3.25).abs() < 1e-12);
    }
}
