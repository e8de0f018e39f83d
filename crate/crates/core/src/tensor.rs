//! Dense row-major `f64` tensors and the differentiable operations used by
//! the filters and the toy network.
//!
//! Maps use the `(height, width, channel)` layout. Every differentiable
//! operation comes with a `*_backward` function that computes the
//! vector-Jacobian product for a given output gradient.

use crate::{Error, Result};

/// Additive mask that dominates any real score while keeping arithmetic finite.
pub const NEG_MASK: f64 = -1.0e30;

/// Default clamp used by [`logit`].
pub const DEFAULT_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor extents must be positive, got {dims:?}"
            )));
        }
        let len = checked_len(&dims)?;
        if len != data.len() {
            return Err(Error::DimMismatch(format!(
                "dims {dims:?} need {len} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite value {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let len = dims.iter().product();
        Self::from_parts(dims.to_vec(), vec![value; len])
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len = dims.iter().product();
        Self::from_parts(dims.to_vec(), (0..len).map(&mut f).collect())
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        Self::new(vec![values.len()], values)
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    /// Interprets the tensor as an `h×w×c` map.
    pub fn hwc(&self) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::DimMismatch(format!(
                "expected an h×w×c map, got dims {:?}",
                self.dims
            ))),
        }
    }

    pub fn at3(&self, y: usize, x: usize, k: usize) -> f64 {
        let (w, c) = (self.dims[1], self.dims[2]);
        self.data[(y * w + x) * c + k]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(self.dims.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.expect_same_dims(other)?;
        Ok(Tensor::from_parts(
            self.dims.clone(),
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Sum of elementwise products.
    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.expect_same_dims(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn reshape(self, dims: Vec<usize>) -> Result<Tensor> {
        let data = self.data;
        Tensor::new(dims, data)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn expect_same_dims(&self, other: &Tensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

fn checked_len(dims: &[usize]) -> Result<usize> {
    dims.iter().try_fold(1usize, |acc, &d| {
        acc.checked_mul(d)
            .ok_or_else(|| Error::InvalidArgument(format!("extent product overflows: {dims:?}")))
    })
}

/// A value together with its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradPair {
    pub value: Tensor,
    pub gradient: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, gradient: Tensor) -> Result<Self> {
        value.expect_same_dims(&gradient)?;
        Ok(Self { value, gradient })
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn sigmoid1(x: f64) -> f64 {
    sigmoid_scalar(x)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

/// Backward of [`sigmoid`] given its forward output.
pub fn sigmoid_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.zip_map(grad_out, |y, g| g * y * (1.0 - y))
}

pub(crate) fn check_eps(eps: f64) -> Result<()> {
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "logit eps must lie in (0, 0.5), got {eps}"
        )));
    }
    Ok(())
}

pub(crate) fn logit1(p: f64, eps: f64) -> f64 {
    let q = p.clamp(eps, 1.0 - eps);
    (q / (1.0 - q)).ln()
}

/// Derivative of the clamped logit; zero inside the clamp region.
pub(crate) fn logit1_grad(p: f64, eps: f64) -> f64 {
    if p < eps || p > 1.0 - eps {
        0.0
    } else {
        1.0 / (p * (1.0 - p))
    }
}

/// Inverse sigmoid with inputs clamped to `[eps, 1 - eps]`.
pub fn logit(p: &Tensor, eps: f64) -> Result<Tensor> {
    check_eps(eps)?;
    Ok(p.map(|v| logit1(v, eps)))
}

pub fn logit_backward(p: &Tensor, eps: f64, grad_out: &Tensor) -> Result<Tensor> {
    check_eps(eps)?;
    p.zip_map(grad_out, |v, g| g * logit1_grad(v, eps))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, |v, g| if v > 0.0 { g } else { 0.0 })
}

/// Geometry shared by the conv forward and backward passes.
#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    h: usize,
    w: usize,
    cin: usize,
    k: usize,
    cout: usize,
    dilation: usize,
    stride: usize,
    pad: isize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(input: &Tensor, kernel: &Tensor, dilation: usize, stride: usize) -> Result<Self> {
        let (h, w, cin) = input.hwc()?;
        let [k, k2, kcin, cout] = kernel.dims()[..] else {
            return Err(Error::DimMismatch(format!(
                "kernel must be k×k×cin×cout, got {:?}",
                kernel.dims()
            )));
        };
        if k != k2 || k % 2 == 0 {
            return Err(Error::DimMismatch(format!(
                "kernel must be square with odd size, got {k}×{k2}"
            )));
        }
        if kcin != cin {
            return Err(Error::DimMismatch(format!(
                "kernel expects {kcin} input channels, input has {cin}"
            )));
        }
        if dilation == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "dilation and stride must be positive".into(),
            ));
        }
        let effective = (k - 1) * dilation + 1;
        Ok(Self {
            h,
            w,
            cin,
            k,
            cout,
            dilation,
            stride,
            pad: ((effective - 1) / 2) as isize,
            oh: h.div_ceil(stride),
            ow: w.div_ceil(stride),
        })
    }

    /// Input coordinate read by output position `o` at kernel tap `t`, if inside.
    fn src(&self, o: usize, t: usize, extent: usize) -> Option<usize> {
        let p = (o * self.stride) as isize - self.pad + (t * self.dilation) as isize;
        (p >= 0 && (p as usize) < extent).then_some(p as usize)
    }
}

/// 2-D cross-correlation with "same" zero padding for the dilated kernel.
///
/// `input` is `h×w×cin`, `kernel` is `k×k×cin×cout`, `bias` has `cout`
/// entries. The output is `ceil(h/stride)×ceil(w/stride)×cout`.
pub fn conv2d(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    dilation: usize,
    stride: usize,
) -> Result<Tensor> {
    let g = ConvGeom::new(input, kernel, dilation, stride)?;
    if bias.dims() != [g.cout] {
        return Err(Error::DimMismatch(format!(
            "bias must have {} entries, got {:?}",
            g.cout,
            bias.dims()
        )));
    }
    let (x, wt, b) = (input.data(), kernel.data(), bias.data());
    let mut out = vec![0.0; g.oh * g.ow * g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let acc = &mut out[(oy * g.ow + ox) * g.cout..][..g.cout];
            acc.copy_from_slice(b);
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let px = &x[(iy * g.w + ix) * g.cin..][..g.cin];
                    let taps = &wt[(ky * g.k + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let row = &taps[ci * g.cout..][..g.cout];
                        for (a, &wv) in acc.iter_mut().zip(row) {
                            *a += v * wv;
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::from_parts(vec![g.oh, g.ow, g.cout], out))
}

#[derive(Clone, Debug)]
pub struct Conv2dGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    dilation: usize,
    stride: usize,
    grad_out: &Tensor,
) -> Result<Conv2dGrads> {
    let g = ConvGeom::new(input, kernel, dilation, stride)?;
    if grad_out.dims() != [g.oh, g.ow, g.cout] {
        return Err(Error::DimMismatch(format!(
            "conv output gradient must be {:?}, got {:?}",
            [g.oh, g.ow, g.cout],
            grad_out.dims()
        )));
    }
    let (x, wt, go) = (input.data(), kernel.data(), grad_out.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; wt.len()];
    let mut gb = vec![0.0; g.cout];
    for oy in 0..g.oh {
        for ox in 0..g.ow {
            let gcell = &go[(oy * g.ow + ox) * g.cout..][..g.cout];
            for (b, &v) in gb.iter_mut().zip(gcell) {
                *b += v;
            }
            for ky in 0..g.k {
                let Some(iy) = g.src(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(ox, kx, g.w) else { continue };
                    let base = (iy * g.w + ix) * g.cin;
                    let tap = (ky * g.k + kx) * g.cin * g.cout;
                    for ci in 0..g.cin {
                        let row = tap + ci * g.cout;
                        let xv = x[base + ci];
                        let mut acc = 0.0;
                        for co in 0..g.cout {
                            acc += wt[row + co] * gcell[co];
                            gw[row + co] += xv * gcell[co];
                        }
                        gx[base + ci] += acc;
                    }
                }
            }
        }
    }
    Ok(Conv2dGrads {
        input: Tensor::from_parts(input.dims().to_vec(), gx),
        kernel: Tensor::from_parts(kernel.dims().to_vec(), gw),
        bias: Tensor::from_parts(vec![g.cout], gb),
    })
}

/// Per-channel spatial maxima plus the flat spatial index that attained each.
#[derive(Clone, Debug, PartialEq)]
pub struct MaxPool {
    pub values: Tensor,
    /// Row-major spatial index (`y * w + x`) of the first maximum per channel.
    pub argmax: Vec<usize>,
}

pub fn global_max_pool(x: &Tensor) -> Result<MaxPool> {
    let (h, w, c) = x.hwc()?;
    let mut best = x.data()[..c].to_vec();
    let mut argmax = vec![0usize; c];
    for pos in 1..h * w {
        for (k, v) in x.data()[pos * c..][..c].iter().enumerate() {
            // strict: ties keep the earliest position
            if *v > best[k] {
                best[k] = *v;
                argmax[k] = pos;
            }
        }
    }
    Ok(MaxPool {
        values: Tensor::from_parts(vec![c], best),
        argmax,
    })
}

pub fn global_max_pool_backward(
    input_dims: &[usize],
    argmax: &[usize],
    grad_out: &Tensor,
) -> Result<Tensor> {
    let [h, w, c] = input_dims[..] else {
        return Err(Error::DimMismatch(format!(
            "max-pool input must be h×w×c, got {input_dims:?}"
        )));
    };
    if argmax.len() != c || grad_out.dims() != [c] {
        return Err(Error::DimMismatch(format!(
            "max-pool gradient must have {c} channels"
        )));
    }
    let mut g = vec![0.0; h * w * c];
    for (k, (&pos, &gv)) in argmax.iter().zip(grad_out.data()).enumerate() {
        g[pos * c + k] += gv;
    }
    Ok(Tensor::from_parts(input_dims.to_vec(), g))
}

/// Align-corners sampling positions: `(lower index, upper index, fraction)`.
fn interp_axis(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    (0..dst)
        .map(|o| {
            if src == 1 || dst == 1 {
                return (0, 0, 0.0);
            }
            let pos = o as f64 * (src - 1) as f64 / (dst - 1) as f64;
            let lo = (pos.floor() as usize).min(src - 1);
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resize with the align-corners convention. Works in both
/// directions; [`bilinear_upsample`] is the checked upsampling entry point.
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = x.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("resize extents must be positive".into()));
    }
    let ys = interp_axis(h, out_h);
    let xs = interp_axis(w, out_w);
    let d = x.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for k in 0..c {
                let v00 = d[(y0 * w + x0) * c + k];
                let v01 = d[(y0 * w + x1) * c + k];
                let v10 = d[(y1 * w + x0) * c + k];
                let v11 = d[(y1 * w + x1) * c + k];
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out.push(top + (bottom - top) * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![out_h, out_w, c], out))
}

pub fn bilinear_upsample(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, _) = x.hwc()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidArgument("upsample extents must be positive".into()));
    }
    if out_h < h || out_w < w {
        return Err(Error::InvalidArgument(format!(
            "upsample target {out_h}×{out_w} smaller than source {h}×{w}"
        )));
    }
    bilinear_resize(x, out_h, out_w)
}

pub fn bilinear_upsample_backward(input_dims: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let [h, w, c] = input_dims[..] else {
        return Err(Error::DimMismatch(format!(
            "upsample input must be h×w×c, got {input_dims:?}"
        )));
    };
    let (oh, ow, oc) = grad_out.hwc()?;
    if oc != c {
        return Err(Error::DimMismatch(format!(
            "upsample gradient has {oc} channels, expected {c}"
        )));
    }
    let ys = interp_axis(h, oh);
    let xs = interp_axis(w, ow);
    let go = grad_out.data();
    let mut g = vec![0.0; h * w * c];
    for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
            for k in 0..c {
                let v = go[(oy * ow + ox) * c + k];
                g[(y0 * w + x0) * c + k] += v * (1.0 - fy) * (1.0 - fx);
                g[(y0 * w + x1) * c + k] += v * (1.0 - fy) * fx;
                g[(y1 * w + x0) * c + k] += v * fy * (1.0 - fx);
                g[(y1 * w + x1) * c + k] += v * fy * fx;
            }
        }
    }
    Ok(Tensor::from_parts(input_dims.to_vec(), g))
}

/// Per-pixel softmax over the last axis.
pub fn softmax_channel(x: &Tensor) -> Tensor {
    let c = *x.dims().last().expect("tensor has rank >= 1");
    let mut out = x.data().to_vec();
    for cell in out.chunks_mut(c) {
        let m = cell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in cell.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in cell.iter_mut() {
            *v /= total;
        }
    }
    Tensor::from_parts(x.dims().to_vec(), out)
}

/// Backward of [`softmax_channel`] given its forward output.
pub fn softmax_channel_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    output.expect_same_dims(grad_out)?;
    let c = *output.dims().last().expect("tensor has rank >= 1");
    let mut g = vec![0.0; output.len()];
    for ((gc, yc), goc) in g
        .chunks_mut(c)
        .zip(output.data().chunks(c))
        .zip(grad_out.data().chunks(c))
    {
        let inner: f64 = yc.iter().zip(goc).map(|(y, g)| y * g).sum();
        for ((gv, y), go) in gc.iter_mut().zip(yc).zip(goc) {
            *gv = y * (go - inner);
        }
    }
    Ok(Tensor::from_parts(output.dims().to_vec(), g))
}

/// Default central-difference step for [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-4;

/// Compares the analytic gradient returned by `f` with central finite
/// differences and returns the maximum relative error
/// `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
///
/// `f` returns the objective (which must hold exactly one element) together
/// with its gradient with respect to `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<(Tensor, Tensor)>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::InvalidArgument(format!("step must be positive, got {step}")));
    }
    let (objective, analytic) = f(x)?;
    if objective.len() != 1 {
        return Err(Error::NonScalarObjective(objective.len()));
    }
    x.expect_same_dims(&analytic)?;
    let eval = |t: &Tensor| -> Result<f64> {
        let (v, _) = f(t)?;
        if v.len() != 1 {
            return Err(Error::NonScalarObjective(v.len()));
        }
        Ok(v.data()[0])
    };
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data[i];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(err);
    }
    Ok(worst)
}
