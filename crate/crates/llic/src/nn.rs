//! Neural layer primitives on NCHW tensors: static and dynamic (per-sample
//! generated kernel) convolutions, pooling, layer normalization,
//! activations, pixel shuffle, channel split/concat.
//!
//! Convolution is cross-correlation (no kernel flip). Stride-1 paths run
//! row-wise axpy/dot kernels; accumulation order is fixed, so results are
//! reproducible bit for bit.

use std::rc::Rc;

use crate::tensor::{record, Tensor};

/// Static convolution geometry. Depthwise <=> groups == in == out channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize, groups: usize) -> Self {
        let spec = ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            groups,
        };
        spec.validate();
        spec
    }

    /// Resolution-preserving conv: padding = floor(K/2), stride 1.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self::new(in_channels, out_channels, kernel, 1, kernel / 2, 1)
    }

    pub fn depthwise(channels: usize, kernel: usize) -> Self {
        Self::new(channels, channels, kernel, 1, kernel / 2, channels)
    }

    pub fn validate(&self) {
        assert!(self.kernel > 0 && self.stride > 0 && self.groups > 0);
        assert!(
            self.in_channels % self.groups == 0 && self.out_channels % self.groups == 0,
            "channels {}→{} not divisible by groups {}",
            self.in_channels,
            self.out_channels,
            self.groups
        );
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel,
            self.kernel,
        ]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding).checked_sub(self.kernel).map(|v| v / self.stride + 1);
        let ow = (w + 2 * self.padding).checked_sub(self.kernel).map(|v| v / self.stride + 1);
        match (oh, ow) {
            (Some(oh), Some(ow)) if oh > 0 && ow > 0 => (oh, ow),
            _ => panic!(
                "conv produces zero-size output for input {h}x{w} with K={} s={} p={}",
                self.kernel, self.stride, self.padding
            ),
        }
    }

    /// Multiply-accumulates for one forward application at the given input
    /// resolution (bias adds not counted).
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let (oh, ow) = self.out_hw(h, w);
        (self.kernel * self.kernel) as u64
            * (self.in_channels / self.groups) as u64
            * self.out_channels as u64
            * (oh * ow) as u64
    }
}

#[inline]
fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += c * s;
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b.iter()) {
        acc += x * y;
    }
    acc
}

/// Valid output-column interval [lo, hi) for a stride-1 row at kernel
/// column kx with padding p and input width w.
#[inline]
fn col_range(ow: usize, w: usize, kx: usize, p: usize) -> (usize, usize) {
    if kx >= w + p {
        return (0, 0); // kernel column never overlaps the row
    }
    let lo = p.saturating_sub(kx);
    let hi = (w + p - kx).min(ow);
    (lo, hi.max(lo))
}

/// Valid output-column interval for a strided row: 0 <= ox*s + kx - p < w.
#[inline]
fn strided_col_range(ow: usize, w: usize, kx: usize, p: usize, s: usize) -> Option<(usize, usize)> {
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    if kx > w - 1 + p {
        return None;
    }
    let hi = ((w - 1 + p - kx) / s + 1).min(ow);
    (lo < hi).then_some((lo, hi))
}

fn conv2d_forward(
    input: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
) -> Vec<f64> {
    let (oh, ow) = spec.out_hw(h, w);
    let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
    let cout = spec.out_channels;
    let cinpg = cin / spec.groups;
    let coutpg = cout / spec.groups;
    let mut out = vec![0.0; n * cout * oh * ow];

    for b in 0..n {
        for oc in 0..cout {
            let g = oc / coutpg;
            let oplane = &mut out[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
            if let Some(bias) = bias {
                oplane.fill(bias[oc]);
            }
            for icg in 0..cinpg {
                let ic = g * cinpg + icg;
                let iplane = &input[(b * cin + ic) * h * w..(b * cin + ic + 1) * h * w];
                let wbase = ((oc * cinpg + icg) * k) * k;
                if s == 1 {
                    for ky in 0..k {
                        let wrow = &weight[wbase + ky * k..wbase + (ky + 1) * k];
                        for oy in 0..oh {
                            let iy = oy as isize + ky as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                if wv == 0.0 {
                                    continue;
                                }
                                let (lo, hi) = col_range(ow, w, kx, p);
                                if lo < hi {
                                    let off = lo + kx - p;
                                    axpy(&mut orow[lo..hi], &irow[off..off + (hi - lo)], wv);
                                }
                            }
                        }
                    }
                } else {
                    for ky in 0..k {
                        let wrow = &weight[wbase + ky * k..wbase + (ky + 1) * k];
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                            let orow = &mut oplane[oy * ow..(oy + 1) * ow];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                if wv == 0.0 {
                                    continue;
                                }
                                let Some((lo, hi)) = strided_col_range(ow, w, kx, p, s) else {
                                    continue;
                                };
                                let mut ix = lo * s + kx - p;
                                for o in lo..hi {
                                    orow[o] += wv * irow[ix];
                                    ix += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// 2-D convolution (cross-correlation). Weight layout (cout, cin/g, K, K);
/// differentiable wrt input, weight and bias.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&Tensor>, spec: &ConvSpec) -> Tensor {
    spec.validate();
    let (n, cin, h, w) = input.dims4();
    assert_eq!(cin, spec.in_channels, "conv2d: input channel mismatch");
    assert_eq!(
        weight.shape(),
        &spec.weight_shape()[..],
        "conv2d: weight shape mismatch"
    );
    if let Some(b) = bias {
        assert_eq!(b.shape(), &[spec.out_channels], "conv2d: bias shape mismatch");
    }
    let (oh, ow) = spec.out_hw(h, w);
    let out = conv2d_forward(
        input.data(),
        weight.data(),
        bias.map(|b| b.data()),
        n,
        cin,
        h,
        w,
        spec,
    );

    let spec = *spec;
    let in_data: Rc<Vec<f64>> = input.share();
    let w_data: Rc<Vec<f64>> = weight.share();
    let cout = spec.out_channels;
    let cinpg = cin / spec.groups;
    let coutpg = cout / spec.groups;
    let has_bias = bias.is_some();

    let back = move |g: &[f64], needs: &[bool]| {
        let (k, s, p) = (spec.kernel, spec.stride, spec.padding);
        let mut gin = needs[0].then(|| vec![0.0; n * cin * h * w]);
        let mut gw = needs[1].then(|| vec![0.0; cout * cinpg * k * k]);
        let mut gb = (has_bias && needs[2]).then(|| vec![0.0; cout]);

        for b in 0..n {
            for oc in 0..cout {
                let grp = oc / coutpg;
                let gplane = &g[(b * cout + oc) * oh * ow..(b * cout + oc + 1) * oh * ow];
                if let Some(gb) = gb.as_mut() {
                    gb[oc] += gplane.iter().sum::<f64>();
                }
                for icg in 0..cinpg {
                    let ic = grp * cinpg + icg;
                    let wbase = ((oc * cinpg + icg) * k) * k;
                    let ibase = (b * cin + ic) * h * w;
                    if s == 1 {
                        for ky in 0..k {
                            for oy in 0..oh {
                                let iy = oy as isize + ky as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                for kx in 0..k {
                                    let (lo, hi) = col_range(ow, w, kx, p);
                                    if lo >= hi {
                                        continue;
                                    }
                                    let off = iy as usize * w + lo + kx - p;
                                    if let Some(gin) = gin.as_mut() {
                                        let wv = w_data[wbase + ky * k + kx];
                                        if wv != 0.0 {
                                            axpy(
                                                &mut gin[ibase + off..ibase + off + (hi - lo)],
                                                &grow[lo..hi],
                                                wv,
                                            );
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        gw[wbase + ky * k + kx] += dot(
                                            &grow[lo..hi],
                                            &in_data[ibase + off..ibase + off + (hi - lo)],
                                        );
                                    }
                                }
                            }
                        }
                    } else {
                        for ky in 0..k {
                            for oy in 0..oh {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let grow = &gplane[oy * ow..(oy + 1) * ow];
                                let roff = ibase + iy as usize * w;
                                for kx in 0..k {
                                    let Some((lo, hi)) = strided_col_range(ow, w, kx, p, s)
                                    else {
                                        continue;
                                    };
                                    if let Some(gin) = gin.as_mut() {
                                        let wv = w_data[wbase + ky * k + kx];
                                        if wv != 0.0 {
                                            let mut ix = roff + lo * s + kx - p;
                                            for o in lo..hi {
                                                gin[ix] += wv * grow[o];
                                                ix += s;
                                            }
                                        }
                                    }
                                    if let Some(gw) = gw.as_mut() {
                                        let mut acc = 0.0;
                                        let mut ix = roff + lo * s + kx - p;
                                        for o in lo..hi {
                                            acc += grow[o] * in_data[ix];
                                            ix += s;
                                        }
                                        gw[wbase + ky * k + kx] += acc;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![gin, gw, gb]
    };

    match bias {
        Some(b) => record(&[input, weight, b], vec![n, cout, oh, ow], out, back),
        None => {
            // Keep a three-slot parent convention; the bias slot is a dummy.
            let dummy = Tensor::scalar(0.0);
            record(&[input, weight, &dummy], vec![n, cout, oh, ow], out, back)
        }
    }
}

/// Depthwise convolution whose kernels are activations: sample i, channel j
/// is convolved with kernels[i, j]. Stride 1, padding floor(K/2), so the
/// resolution is preserved. Differentiable wrt both input and kernels.
pub fn conv2d_dynamic_depthwise(input: &Tensor, kernels: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dims4();
    let (kn, kc, k, k2) = kernels.dims4();
    assert_eq!(k, k2, "dynamic depthwise kernels must be square");
    assert!(k % 2 == 1, "dynamic depthwise kernel size must be odd, got {k}");
    assert!(
        kn == n && kc == c,
        "dynamic depthwise kernel batch/channel mismatch: input ({n},{c}), kernels ({kn},{kc})"
    );
    let p = k / 2;

    let kern: Rc<Vec<f64>> = kernels.share();
    let inp: Rc<Vec<f64>> = input.share();

    let mut out = vec![0.0; n * c * h * w];
    for b in 0..n {
        for ch in 0..c {
            let iplane = &inp[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            let kbase = (b * c + ch) * k * k;
            let oplane = &mut out[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for ky in 0..k {
                let wrow = &kern[kbase + ky * k..kbase + (ky + 1) * k];
                for oy in 0..h {
                    let iy = oy as isize + ky as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let irow = &iplane[iy as usize * w..(iy as usize + 1) * w];
                    let orow = &mut oplane[oy * w..(oy + 1) * w];
                    for (kx, &wv) in wrow.iter().enumerate() {
                        if wv == 0.0 {
                            continue;
                        }
                        let (lo, hi) = col_range(w, w, kx, p);
                        if lo < hi {
                            let off = lo + kx - p;
                            axpy(&mut orow[lo..hi], &irow[off..off + (hi - lo)], wv);
                        }
                    }
                }
            }
        }
    }

    let back = move |g: &[f64], needs: &[bool]| {
        let mut gin = needs[0].then(|| vec![0.0; n * c * h * w]);
        let mut gk = needs[1].then(|| vec![0.0; n * c * k * k]);
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                let kbase = (b * c + ch) * k * k;
                for ky in 0..k {
                    for oy in 0..h {
                        let iy = oy as isize + ky as isize - p as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let grow = &g[base + oy * w..base + (oy + 1) * w];
                        let ioff = base + iy as usize * w;
                        for kx in 0..k {
                            let (lo, hi) = col_range(w, w, kx, p);
                            if lo >= hi {
                                continue;
                            }
                            let off = ioff + lo + kx - p;
                            if let Some(gin) = gin.as_mut() {
                                let wv = kern[kbase + ky * k + kx];
                                if wv != 0.0 {
                                    axpy(&mut gin[off..off + (hi - lo)], &grow[lo..hi], wv);
                                }
                            }
                            if let Some(gk) = gk.as_mut() {
                                gk[kbase + ky * k + kx] +=
                                    dot(&grow[lo..hi], &inp[off..off + (hi - lo)]);
                            }
                        }
                    }
                }
            }
        }
        vec![gin, gk]
    };
    record(&[input, kernels], vec![n, c, h, w], out, back)
}

/// Adaptive average pooling: output cell (i, j) is the mean of the bin
/// [floor(i*h/oh), floor((i+1)*h/oh)) x [floor(j*w/ow), floor((j+1)*w/ow)).
pub fn adaptive_avg_pool(input: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (n, c, h, w) = input.dims4();
    assert!(
        h >= oh && w >= ow,
        "adaptive_avg_pool: input {h}x{w} smaller than output {oh}x{ow}"
    );
    let ybin = |i: usize| (i * h / oh, (i + 1) * h / oh);
    let xbin = |j: usize| (j * w / ow, (j + 1) * w / ow);
    let mut out = vec![0.0; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let iplane = &input.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for i in 0..oh {
                let (y0, y1) = ybin(i);
                for j in 0..ow {
                    let (x0, x1) = xbin(j);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        for x in x0..x1 {
                            acc += iplane[y * w + x];
                        }
                    }
                    out[((b * c + ch) * oh + i) * ow + j] =
                        acc / ((y1 - y0) * (x1 - x0)) as f64;
                }
            }
        }
    }
    let back = move |g: &[f64], _: &[bool]| {
        let mut gin = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for i in 0..oh {
                    let (y0, y1) = (i * h / oh, (i + 1) * h / oh);
                    for j in 0..ow {
                        let (x0, x1) = (j * w / ow, (j + 1) * w / ow);
                        let gv = g[((b * c + ch) * oh + i) * ow + j]
                            / ((y1 - y0) * (x1 - x0)) as f64;
                        for y in y0..y1 {
                            for x in x0..x1 {
                                gin[base + y * w + x] += gv;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gin)]
    };
    record(&[input], vec![n, c, oh, ow], out, back)
}

/// 2x2 mean pooling with replicate padding on odd extents, so the output is
/// ceil(h/2) x ceil(w/2). Used by the multi-scale SSIM pyramid.
pub fn avg_pool2(input: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dims4();
    let oh = h.div_ceil(2);
    let ow = w.div_ceil(2);
    let mut out = vec![0.0; n * c * oh * ow];
    for b in 0..n {
        for ch in 0..c {
            let iplane = &input.data()[(b * c + ch) * h * w..(b * c + ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let y = (2 * oy + dy).min(h - 1);
                            let x = (2 * ox + dx).min(w - 1);
                            acc += iplane[y * w + x];
                        }
                    }
                    out[((b * c + ch) * oh + oy) * ow + ox] = acc * 0.25;
                }
            }
        }
    }
    let back = move |g: &[f64], _: &[bool]| {
        let mut gin = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                let base = (b * c + ch) * h * w;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[((b * c + ch) * oh + oy) * ow + ox] * 0.25;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let y = (2 * oy + dy).min(h - 1);
                                let x = (2 * ox + dx).min(w - 1);
                                gin[base + y * w + x] += gv;
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gin)]
    };
    record(&[input], vec![n, c, oh, ow], out, back)
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Layer normalization across the channel dimension at every spatial
/// position, followed by the per-channel affine gamma * x_hat + beta.
pub fn layer_norm(input: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let (n, c, h, w) = input.dims4();
    assert_eq!(gamma.shape(), &[c], "layer_norm: gamma channel mismatch");
    assert_eq!(beta.shape(), &[c], "layer_norm: beta channel mismatch");
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    let mut xhat = vec![0.0; n * c * hw];
    let mut inv_std = vec![0.0; n * hw];
    let data = input.data();
    let gam = gamma.data();
    let bet = beta.data();
    // Channel-major passes keep memory access contiguous; the per-position
    // accumulation order over channels matches a channel-inner loop.
    let mut mean = vec![0.0; n * hw];
    for b in 0..n {
        for ch in 0..c {
            let row = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            let acc = &mut mean[b * hw..(b + 1) * hw];
            for (a, &v) in acc.iter_mut().zip(row.iter()) {
                *a += v;
            }
        }
    }
    for v in mean.iter_mut() {
        *v /= c as f64;
    }
    for b in 0..n {
        let m = &mean[b * hw..(b + 1) * hw];
        let acc = &mut inv_std[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let row = &data[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            for ((a, &v), &mu) in acc.iter_mut().zip(row.iter()).zip(m.iter()) {
                let d = v - mu;
                *a += d * d;
            }
        }
    }
    for v in inv_std.iter_mut() {
        *v = 1.0 / (*v / c as f64 + LAYER_NORM_EPS).sqrt();
    }
    for b in 0..n {
        let m = &mean[b * hw..(b + 1) * hw];
        let istd = &inv_std[b * hw..(b + 1) * hw];
        for ch in 0..c {
            let base = (b * c + ch) * hw;
            let (g, be) = (gam[ch], bet[ch]);
            for i in 0..hw {
                let xh = (data[base + i] - m[i]) * istd[i];
                xhat[base + i] = xh;
                out[base + i] = g * xh + be;
            }
        }
    }
    let xhat = Rc::new(xhat);
    let inv_std = Rc::new(inv_std);
    let gam: Rc<Vec<f64>> = gamma.share();
    let back = move |g: &[f64], needs: &[bool]| {
        let mut gin = needs[0].then(|| vec![0.0; n * c * hw]);
        let mut ggam = needs[1].then(|| vec![0.0; c]);
        let mut gbet = needs[2].then(|| vec![0.0; c]);
        let mut mean_gh = vec![0.0; hw];
        let mut mean_ghx = vec![0.0; hw];
        for b in 0..n {
            if gin.is_some() {
                mean_gh.fill(0.0);
                mean_ghx.fill(0.0);
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let ga = gam[ch];
                    for i in 0..hw {
                        let gh = ga * g[base + i];
                        mean_gh[i] += gh;
                        mean_ghx[i] += gh * xhat[base + i];
                    }
                }
                let inv_c = 1.0 / c as f64;
                for i in 0..hw {
                    mean_gh[i] *= inv_c;
                    mean_ghx[i] *= inv_c;
                }
                let gin = gin.as_mut().unwrap();
                let istd = &inv_std[b * hw..(b + 1) * hw];
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let ga = gam[ch];
                    for i in 0..hw {
                        let gh = ga * g[base + i];
                        gin[base + i] = (gh - mean_gh[i] - xhat[base + i] * mean_ghx[i]) * istd[i];
                    }
                }
            }
            for ch in 0..c {
                let base = (b * c + ch) * hw;
                if let Some(ggam) = ggam.as_mut() {
                    let mut acc = 0.0;
                    for i in 0..hw {
                        acc += g[base + i] * xhat[base + i];
                    }
                    ggam[ch] += acc;
                }
                if let Some(gbet) = gbet.as_mut() {
                    gbet[ch] += g[base..base + hw].iter().sum::<f64>();
                }
            }
        }
        vec![gin, ggam, gbet]
    };
    record(&[input, gamma, beta], vec![n, c, h, w], out, back)
}

/// Tanh approximation of GELU:
/// 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x^3))).
pub fn gelu_tanh(input: &Tensor) -> Tensor {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let f = |x: f64| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh());
    let out: Vec<f64> = input.data().iter().map(|&x| f(x)).collect();
    let xs: Rc<Vec<f64>> = input.share();
    let back = move |g: &[f64], _: &[bool]| {
        let gx = g
            .iter()
            .zip(xs.iter())
            .map(|(&gi, &x)| {
                let t = (C * (x + A * x * x * x)).tanh();
                let du = C * (1.0 + 3.0 * A * x * x);
                gi * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
            })
            .collect();
        vec![Some(gx)]
    };
    record(&[input], input.shape().to_vec(), out, back)
}

pub fn relu(input: &Tensor) -> Tensor {
    let out: Vec<f64> = input.data().iter().map(|&x| x.max(0.0)).collect();
    let xs: Rc<Vec<f64>> = input.share();
    let back = move |g: &[f64], _: &[bool]| {
        let gx = g
            .iter()
            .zip(xs.iter())
            .map(|(&gi, &x)| if x > 0.0 { gi } else { 0.0 })
            .collect();
        vec![Some(gx)]
    };
    record(&[input], input.shape().to_vec(), out, back)
}

pub const LEAKY_SLOPE: f64 = 0.01;

pub fn leaky_relu(input: &Tensor) -> Tensor {
    let out: Vec<f64> = input
        .data()
        .iter()
        .map(|&x| if x > 0.0 { x } else { LEAKY_SLOPE * x })
        .collect();
    let xs: Rc<Vec<f64>> = input.share();
    let back = move |g: &[f64], _: &[bool]| {
        let gx = g
            .iter()
            .zip(xs.iter())
            .map(|(&gi, &x)| if x > 0.0 { gi } else { LEAKY_SLOPE * gi })
            .collect();
        vec![Some(gx)]
    };
    record(&[input], input.shape().to_vec(), out, back)
}

/// Depth-to-space: (n, c*r^2, h, w) -> (n, c, h*r, w*r). Within each r x r
/// block the source channels are laid out row-major.
pub fn pixel_shuffle(input: &Tensor, r: usize) -> Tensor {
    let (n, cr2, h, w) = input.dims4();
    assert!(r > 0);
    assert_eq!(cr2 % (r * r), 0, "pixel_shuffle: channels {cr2} not divisible by r^2");
    let c = cr2 / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut out = vec![0.0; n * c * oh * ow];
    let data = input.data();
    for b in 0..n {
        for oc in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ic = oc * r * r + dy * r + dx;
                    for y in 0..h {
                        for x in 0..w {
                            out[((b * c + oc) * oh + y * r + dy) * ow + x * r + dx] =
                                data[((b * cr2 + ic) * h + y) * w + x];
                        }
                    }
                }
            }
        }
    }
    let back = move |g: &[f64], _: &[bool]| {
        let mut gin = vec![0.0; n * cr2 * h * w];
        for b in 0..n {
            for oc in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let ic = oc * r * r + dy * r + dx;
                        for y in 0..h {
                            for x in 0..w {
                                gin[((b * cr2 + ic) * h + y) * w + x] =
                                    g[((b * c + oc) * oh + y * r + dy) * ow + x * r + dx];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gin)]
    };
    record(&[input], vec![n, c, oh, ow], out, back)
}

/// Space-to-depth inverse of `pixel_shuffle`.
pub fn pixel_unshuffle(input: &Tensor, r: usize) -> Tensor {
    let (n, c, h, w) = input.dims4();
    assert!(r > 0);
    assert_eq!(h % r, 0, "pixel_unshuffle: height {h} not divisible by {r}");
    assert_eq!(w % r, 0, "pixel_unshuffle: width {w} not divisible by {r}");
    let (oh, ow) = (h / r, w / r);
    let oc = c * r * r;
    let mut out = vec![0.0; n * oc * oh * ow];
    let data = input.data();
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let o = ch * r * r + dy * r + dx;
                    for y in 0..oh {
                        for x in 0..ow {
                            out[((b * oc + o) * oh + y) * ow + x] =
                                data[((b * c + ch) * h + y * r + dy) * w + x * r + dx];
                        }
                    }
                }
            }
        }
    }
    let back = move |g: &[f64], _: &[bool]| {
        let mut gin = vec![0.0; n * c * h * w];
        for b in 0..n {
            for ch in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let o = ch * r * r + dy * r + dx;
                        for y in 0..oh {
                            for x in 0..ow {
                                gin[((b * c + ch) * h + y * r + dy) * w + x * r + dx] =
                                    g[((b * oc + o) * oh + y) * ow + x];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gin)]
    };
    record(&[input], vec![n, oc, oh, ow], out, back)
}

/// Split (n, 2c, h, w) into the first and second c channels.
pub fn channel_split(input: &Tensor) -> (Tensor, Tensor) {
    let (n, c2, h, w) = input.dims4();
    assert_eq!(c2 % 2, 0, "channel_split requires an even channel count, got {c2}");
    let c = c2 / 2;
    let hw = h * w;
    let data = input.data();
    let mut first = vec![0.0; n * c * hw];
    let mut second = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let src_a = ((b * c2 + ch) * hw, (b * c2 + ch + 1) * hw);
            let src_b = ((b * c2 + c + ch) * hw, (b * c2 + c + ch + 1) * hw);
            let dst = ((b * c + ch) * hw, (b * c + ch + 1) * hw);
            first[dst.0..dst.1].copy_from_slice(&data[src_a.0..src_a.1]);
            second[dst.0..dst.1].copy_from_slice(&data[src_b.0..src_b.1]);
        }
    }
    let mk_back = |offset: usize| {
        move |g: &[f64], _: &[bool]| {
            let mut gin = vec![0.0; n * c2 * hw];
            for b in 0..n {
                for ch in 0..c {
                    let dst = (b * c2 + offset + ch) * hw;
                    let src = (b * c + ch) * hw;
                    gin[dst..dst + hw].copy_from_slice(&g[src..src + hw]);
                }
            }
            vec![Some(gin)]
        }
    };
    let a = record(&[input], vec![n, c, h, w], first, mk_back(0));
    let b = record(&[input], vec![n, c, h, w], second, mk_back(c));
    (a, b)
}

/// Concatenate along the channel dimension; exact inverse of
/// `channel_split` when both halves match.
pub fn channel_concat(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, h, w) = a.dims4();
    let (nb, cb, hb, wb) = b.dims4();
    assert!(
        n == nb && h == hb && w == wb,
        "channel_concat: spatial/batch mismatch"
    );
    let hw = h * w;
    let c = ca + cb;
    let mut out = vec![0.0; n * c * hw];
    for bi in 0..n {
        let dst = bi * c * hw;
        out[dst..dst + ca * hw]
            .copy_from_slice(&a.data()[bi * ca * hw..(bi + 1) * ca * hw]);
        out[dst + ca * hw..dst + c * hw]
            .copy_from_slice(&b.data()[bi * cb * hw..(bi + 1) * cb * hw]);
    }
    let back = move |g: &[f64], needs: &[bool]| {
        let ga = needs[0].then(|| {
            let mut v = vec![0.0; n * ca * hw];
            for bi in 0..n {
                v[bi * ca * hw..(bi + 1) * ca * hw]
                    .copy_from_slice(&g[bi * c * hw..bi * c * hw + ca * hw]);
            }
            v
        });
        let gb = needs[1].then(|| {
            let mut v = vec![0.0; n * cb * hw];
            for bi in 0..n {
                v[bi * cb * hw..(bi + 1) * cb * hw]
                    .copy_from_slice(&g[bi * c * hw + ca * hw..(bi + 1) * c * hw]);
            }
            v
        });
        vec![ga, gb]
    };
    record(&[a, b], vec![n, c, h, w], out, back)
}

/// Replicate a (c, K, K) tensor across the batch dimension to (n, c, K, K).
/// Backward sums over the batch.
pub fn broadcast_batch(t: &Tensor, n: usize) -> Tensor {
    assert_eq!(t.shape().len(), 3, "broadcast_batch expects rank-3 input");
    let len = t.len();
    let mut shape = vec![n];
    shape.extend_from_slice(t.shape());
    let mut out = Vec::with_capacity(n * len);
    for _ in 0..n {
        out.extend_from_slice(t.data());
    }
    let back = move |g: &[f64], _: &[bool]| {
        let mut gt = vec![0.0; len];
        for b in 0..n {
            for (i, gv) in gt.iter_mut().enumerate() {
                *gv += g[b * len + i];
            }
        }
        vec![Some(gt)]
    };
    record(&[t], shape, out, back)
}

/// Multiply every spatial position of `main` (n, c, h, w) by the matching
/// per-sample per-channel factor (n, c, 1, 1).
pub fn mul_channel_factors(main: &Tensor, factors: &Tensor) -> Tensor {
    let (n, c, h, w) = main.dims4();
    let (fn_, fc, fh, fw) = factors.dims4();
    assert!(
        fn_ == n && fc == c && fh == 1 && fw == 1,
        "mul_channel_factors: expected factors ({n},{c},1,1), got ({fn_},{fc},{fh},{fw})"
    );
    let hw = h * w;
    let m: Rc<Vec<f64>> = main.share();
    let f: Rc<Vec<f64>> = factors.share();
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for ch in 0..c {
            let fv = f[b * c + ch];
            let base = (b * c + ch) * hw;
            for i in 0..hw {
                out[base + i] = m[base + i] * fv;
            }
        }
    }
    let back = move |g: &[f64], needs: &[bool]| {
        let gm = needs[0].then(|| {
            let mut v = vec![0.0; n * c * hw];
            for b in 0..n {
                for ch in 0..c {
                    let fv = f[b * c + ch];
                    let base = (b * c + ch) * hw;
                    for i in 0..hw {
                        v[base + i] = g[base + i] * fv;
                    }
                }
            }
            v
        });
        let gf = needs[1].then(|| {
            let mut v = vec![0.0; n * c];
            for b in 0..n {
                for ch in 0..c {
                    let base = (b * c + ch) * hw;
                    let mut acc = 0.0;
                    for i in 0..hw {
                        acc += g[base + i] * m[base + i];
                    }
                    v[b * c + ch] = acc;
                }
            }
            v
        });
        vec![gm, gf]
    };
    record(&[main, factors], vec![n, c, h, w], out, back)
}

/// Broadcast a per-channel vector (c) to (n, c, h, w). Backward sums over
/// batch and space.
pub fn broadcast_channel_vec(v: &Tensor, n: usize, h: usize, w: usize) -> Tensor {
    assert_eq!(v.shape().len(), 1, "broadcast_channel_vec expects rank-1 input");
    let c = v.len();
    let hw = h * w;
    let mut out = vec![0.0; n * c * hw];
    for b in 0..n {
        for (ch, &val) in v.data().iter().enumerate() {
            let base = (b * c + ch) * hw;
            out[base..base + hw].fill(val);
        }
    }
    let back = move |g: &[f64], _: &[bool]| {
        let mut gv = vec![0.0; c];
        for b in 0..n {
            for (ch, gval) in gv.iter_mut().enumerate() {
                let base = (b * c + ch) * hw;
                *gval += g[base..base + hw].iter().sum::<f64>();
            }
        }
        vec![Some(gv)]
    };
    record(&[v], vec![n, c, h, w], out, back)
}

/// Replicate-pad an NCHW tensor on the bottom/right edges to the target
/// resolution. Not differentiable; encode-side utility only.
pub fn replicate_pad(input: &Tensor, th: usize, tw: usize) -> Tensor {
    assert!(
        !input.requires_grad(),
        "replicate_pad is not differentiable; detach first"
    );
    let (n, c, h, w) = input.dims4();
    assert!(th >= h && tw >= w);
    let data = input.data();
    let mut out = vec![0.0; n * c * th * tw];
    for b in 0..n {
        for ch in 0..c {
            let src = (b * c + ch) * h * w;
            let dst = (b * c + ch) * th * tw;
            for y in 0..th {
                let sy = y.min(h - 1);
                for x in 0..tw {
                    let sx = x.min(w - 1);
                    out[dst + y * tw + x] = data[src + sy * w + sx];
                }
            }
        }
    }
    Tensor::from_vec(vec![n, c, th, tw], out)
}

/// Crop an NCHW tensor to the top-left th x tw region.
pub fn crop(input: &Tensor, th: usize, tw: usize) -> Tensor {
    assert!(
        !input.requires_grad(),
        "crop is not differentiable; detach first"
    );
    let (n, c, h, w) = input.dims4();
    assert!(th <= h && tw <= w);
    let data = input.data();
    let mut out = vec![0.0; n * c * th * tw];
    for b in 0..n {
        for ch in 0..c {
            let src = (b * c + ch) * h * w;
            let dst = (b * c + ch) * th * tw;
            for y in 0..th {
                out[dst + y * tw..dst + (y + 1) * tw]
                    .copy_from_slice(&data[src + y * w..src + y * w + tw]);
            }
        }
    }
    Tensor::from_vec(vec![n, c, th, tw], out)
}
