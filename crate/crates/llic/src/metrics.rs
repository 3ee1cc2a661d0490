//! Quality and rate metrics: PSNR, multi-scale SSIM, Bjøntegaard delta
//! rate and rate-saving curves.
//!
//! MS-SSIM follows Wang et al. (2003): five dyadic scales, an 11x11
//! Gaussian window (sigma 1.5), K1 = 0.01 / K2 = 0.03 on unit data range,
//! weights {0.0448, 0.2856, 0.3001, 0.2363, 0.1333}, luminance applied at
//! the coarsest scale only. Built on tensor ops, so it also serves as a
//! differentiable training distortion.
//!
//! BD-rate uses the classic cubic-polynomial fit of log10(bpp) against
//! quality; the rate-saving curves use a natural cubic spline instead and
//! compare bitrate at fixed PSNR.

use crate::error::{Error, Result};
use crate::nn::{avg_pool2, conv2d, ConvSpec};
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// PSNR
// ---------------------------------------------------------------------------

/// Peak signal-to-noise ratio in dB for [0, 1] images; capped at 100.
pub fn psnr(x: &Tensor, xhat: &Tensor) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(Error::Usage(format!(
            "psnr: shape mismatch {:?} vs {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    let mse = x
        .data()
        .iter()
        .zip(xhat.data().iter())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.len() as f64;
    if mse == 0.0 {
        return Ok(100.0);
    }
    Ok((-10.0 * mse.log10()).min(100.0))
}

// ---------------------------------------------------------------------------
// MS-SSIM
// ---------------------------------------------------------------------------

pub const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const MSSSIM_WINDOW: usize = 11;
pub const MSSSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window_2d() -> Vec<f64> {
    let n = MSSSIM_WINDOW;
    let c = (n / 2) as f64;
    let mut g1 = vec![0.0; n];
    let mut sum = 0.0;
    for (i, v) in g1.iter_mut().enumerate() {
        *v = (-(i as f64 - c) * (i as f64 - c) / (2.0 * MSSSIM_SIGMA * MSSSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in g1.iter_mut() {
        *v /= sum;
    }
    let mut g2 = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            g2[y * n + x] = g1[y] * g1[x];
        }
    }
    g2
}

/// Depthwise valid Gaussian blur with the shared window.
fn blur(t: &Tensor, window: &[f64], channels: usize) -> Tensor {
    let mut w = Vec::with_capacity(channels * window.len());
    for _ in 0..channels {
        w.extend_from_slice(window);
    }
    let weight = Tensor::from_vec(vec![channels, 1, MSSSIM_WINDOW, MSSSIM_WINDOW], w);
    let spec = ConvSpec::new(channels, channels, MSSSIM_WINDOW, 1, 0, channels);
    conv2d(t, &weight, None, &spec)
}

/// Mean contrast-structure and luminance comparison at one scale.
fn ssim_terms(x: &Tensor, y: &Tensor, window: &[f64]) -> (Tensor, Tensor) {
    let (_, c, _, _) = x.dims4();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let mu1 = blur(x, window, c);
    let mu2 = blur(y, window, c);
    let sxx = blur(&x.mul(x), window, c).sub(&mu1.mul(&mu1));
    let syy = blur(&y.mul(y), window, c).sub(&mu2.mul(&mu2));
    let sxy = blur(&x.mul(y), window, c).sub(&mu1.mul(&mu2));

    let cs_map = sxy.scale(2.0).add_scalar(c2).div(&sxx.add(&syy).add_scalar(c2));
    let l_map = mu1
        .mul(&mu2)
        .scale(2.0)
        .add_scalar(c1)
        .div(&mu1.mul(&mu1).add(&mu2.mul(&mu2)).add_scalar(c1));
    (cs_map.mean_all(), l_map.mean_all())
}

/// Multi-scale SSIM as a scalar tensor (differentiable when inputs are on
/// a tape). Requires five dyadic scales: min(h, w) must survive four
/// halvings with at least one 11x11 window left (>= 161 pixels).
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    if x.shape() != y.shape() {
        return Err(Error::Usage(format!(
            "ms_ssim: shape mismatch {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (_, _, h, w) = x.dims4();
    let mut sizes = (h, w);
    for _ in 0..4 {
        sizes = (sizes.0.div_ceil(2), sizes.1.div_ceil(2));
    }
    if sizes.0 < MSSSIM_WINDOW || sizes.1 < MSSSIM_WINDOW {
        return Err(Error::Numeric(format!(
            "ms_ssim: image {h}x{w} too small for 5 scales (needs >= 161 on each side)"
        )));
    }
    let window = gaussian_window_2d();
    let mut cur_x = x.clone();
    let mut cur_y = y.clone();
    let mut value = Tensor::scalar(1.0);
    for (scale, &weight) in MSSSIM_WEIGHTS.iter().enumerate() {
        let (cs, l) = ssim_terms(&cur_x, &cur_y, &window);
        let cs = cs.clamp(0.0, f64::INFINITY);
        value = value.mul(&cs.powf(weight));
        if scale == MSSSIM_WEIGHTS.len() - 1 {
            let l = l.clamp(0.0, f64::INFINITY);
            value = value.mul(&l.powf(weight));
        } else {
            cur_x = avg_pool2(&cur_x);
            cur_y = avg_pool2(&cur_y);
        }
    }
    Ok(value)
}

pub fn ms_ssim_value(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(ms_ssim(x, y)?.item())
}

// ---------------------------------------------------------------------------
// RD curves
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RdPoint {
    pub lambda_index: u32,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QualityField {
    Psnr,
    MsSsim,
}

impl RdPoint {
    fn quality(&self, field: QualityField) -> Result<f64> {
        match field {
            QualityField::Psnr => Ok(self.psnr),
            QualityField::MsSsim => self.msssim.ok_or_else(|| {
                Error::Numeric("rd point has no ms-ssim value".into())
            }),
        }
    }
}

/// Rate-distortion curve: points sorted by bpp, strictly increasing.
#[derive(Clone, Debug)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    /// Sorts internally; rejects non-positive or duplicate bpp. Returns a
    /// warning string (not an error) when PSNR is not non-decreasing.
    pub fn new(mut points: Vec<RdPoint>) -> Result<(Self, Option<String>)> {
        if points.is_empty() {
            return Err(Error::Numeric("empty RD curve".into()));
        }
        for p in &points {
            if !(p.bpp > 0.0) {
                return Err(Error::Numeric(format!("non-positive bpp {}", p.bpp)));
            }
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp == w[1].bpp) {
            return Err(Error::Numeric("duplicate bpp values in RD curve".into()));
        }
        let warn = points
            .windows(2)
            .any(|w| w[1].psnr < w[0].psnr)
            .then(|| "PSNR not non-decreasing in bpp".to_string());
        Ok((RdCurve { points }, warn))
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("lambda_index,bpp,psnr,msssim\n");
        for p in &self.points {
            let ms = p.msssim.map(|v| format!("{v:.8}")).unwrap_or_default();
            out.push_str(&format!("{},{:.8},{:.5},{}\n", p.lambda_index, p.bpp, p.psnr, ms));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        Ok(Self::from_csv_warn(text)?.0)
    }

    /// Parse and also return the non-monotonic-PSNR warning, if any.
    pub fn from_csv_warn(text: &str) -> Result<(Self, Option<String>)> {
        let mut points = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with("lambda") || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() < 3 {
                return Err(Error::Format(format!("csv line {}: too few fields", ln + 1)));
            }
            let parse = |s: &str, what: &str| -> Result<f64> {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Format(format!("csv line {}: bad {what} '{s}'", ln + 1)))
            };
            let lambda_index = parse(fields[0], "lambda_index")? as u32;
            let bpp = parse(fields[1], "bpp")?;
            let q = parse(fields[2], "psnr")?;
            let msssim = match fields.get(3).map(|s| s.trim()) {
                Some("") | None => None,
                Some(s) => Some(parse(s, "msssim")?),
            };
            points.push(RdPoint {
                lambda_index,
                bpp,
                psnr: q,
                msssim,
            });
        }
        Self::new(points)
    }
}

// ---------------------------------------------------------------------------
// BD-rate (cubic polynomial fit)
// ---------------------------------------------------------------------------

/// Solve a small dense linear system by Gaussian elimination with partial
/// pivoting. Errors on (near-)singular systems.
fn solve_linear(a: &mut [Vec<f64>], b: &mut [f64]) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let (pivot, max) = (col..n)
            .map(|r| (r, a[r][col].abs()))
            .max_by(|x, y| x.1.total_cmp(&y.1))
            .unwrap();
        if max < 1e-12 {
            return Err(Error::Numeric("degenerate fit: singular system".into()));
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in (col + 1)..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let mut acc = b[r];
        for c in (r + 1)..n {
            acc -= a[r][c] * x[c];
        }
        x[r] = acc / a[r][r];
    }
    Ok(x)
}

/// Least-squares cubic fit of y against (x - shift).
fn cubic_fit(xs: &[f64], ys: &[f64], shift: f64) -> Result<[f64; 4]> {
    let n = xs.len();
    let mut ata = vec![vec![0.0; 4]; 4];
    let mut atb = vec![0.0; 4];
    for i in 0..n {
        let t = xs[i] - shift;
        let row = [1.0, t, t * t, t * t * t];
        for r in 0..4 {
            for c in 0..4 {
                ata[r][c] += row[r] * row[c];
            }
            atb[r] += row[r] * ys[i];
        }
    }
    let c = solve_linear(&mut ata, &mut atb)?;
    Ok([c[0], c[1], c[2], c[3]])
}

fn cubic_integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let f = |t: f64| c[0] * t + c[1] * t * t / 2.0 + c[2] * t * t * t / 3.0 + c[3] * t * t * t * t / 4.0;
    f(hi) - f(lo)
}

fn quality_log_rate(curve: &RdCurve, field: QualityField) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pairs: Vec<(f64, f64)> = curve
        .points()
        .iter()
        .map(|p| Ok((p.quality(field)?, p.bpp.log10())))
        .collect::<Result<_>>()?;
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::Numeric("duplicate quality values".into()));
    }
    Ok(pairs.into_iter().unzip())
}

/// Bjøntegaard delta rate of `test` against `anchor` in percent: positive
/// means the test codec spends more bits at equal quality.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve, field: QualityField) -> Result<f64> {
    if anchor.points().len() < 4 || test.points().len() < 4 {
        return Err(Error::Numeric("bd_rate needs at least 4 points per curve".into()));
    }
    let (qa, ra) = quality_log_rate(anchor, field)?;
    let (qt, rt) = quality_log_rate(test, field)?;
    let lo = qa[0].max(qt[0]);
    let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
    if hi <= lo {
        return Err(Error::Numeric(format!(
            "no quality overlap: [{:.3}, {:.3}] vs [{:.3}, {:.3}]",
            qa[0],
            qa[qa.len() - 1],
            qt[0],
            qt[qt.len() - 1]
        )));
    }
    let shift = 0.5 * (lo + hi);
    let ca = cubic_fit(&qa, &ra, shift)?;
    let ct = cubic_fit(&qt, &rt, shift)?;
    let ia = cubic_integral(&ca, lo - shift, hi - shift);
    let it = cubic_integral(&ct, lo - shift, hi - shift);
    let avg_diff = (it - ia) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}

// ---------------------------------------------------------------------------
// Natural cubic spline and rate-saving curves
// ---------------------------------------------------------------------------

/// Natural cubic spline through (x, y) knots (x strictly increasing).
pub struct CubicSpline {
    xs: Vec<f64>,
    ys: Vec<f64>,
    second: Vec<f64>,
}

impl CubicSpline {
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<Self> {
        let n = xs.len();
        if n < 2 {
            return Err(Error::Numeric("spline needs at least 2 knots".into()));
        }
        if xs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Numeric("spline knots must strictly increase".into()));
        }
        // Tridiagonal solve for second derivatives, natural boundaries.
        let mut second = vec![0.0; n];
        if n > 2 {
            let m = n - 2;
            let mut diag = vec![0.0; m];
            let mut rhs = vec![0.0; m];
            let mut upper = vec![0.0; m];
            for i in 0..m {
                let h0 = xs[i + 1] - xs[i];
                let h1 = xs[i + 2] - xs[i + 1];
                diag[i] = 2.0 * (h0 + h1);
                upper[i] = h1;
                rhs[i] = 6.0 * ((ys[i + 2] - ys[i + 1]) / h1 - (ys[i + 1] - ys[i]) / h0);
            }
            // Thomas algorithm (sub-diagonal equals the previous upper).
            for i in 1..m {
                let sub = xs[i + 1] - xs[i];
                let w = sub / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            second[m] = rhs[m - 1] / diag[m - 1];
            for i in (0..m - 1).rev() {
                second[i + 1] = (rhs[i] - upper[i] * second[i + 2]) / diag[i];
            }
        }
        Ok(CubicSpline { xs, ys, second })
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.xs[0], self.xs[self.xs.len() - 1])
    }

    /// Evaluate inside the knot range; extrapolation is an error.
    pub fn eval(&self, x: f64) -> Result<f64> {
        let (lo, hi) = self.domain();
        if x < lo || x > hi {
            return Err(Error::Numeric(format!(
                "spline evaluation at {x} outside [{lo}, {hi}]"
            )));
        }
        let mut i = self.xs.partition_point(|&v| v <= x).saturating_sub(1);
        i = i.min(self.xs.len() - 2);
        let h = self.xs[i + 1] - self.xs[i];
        let a = (self.xs[i + 1] - x) / h;
        let b = (x - self.xs[i]) / h;
        Ok(a * self.ys[i]
            + b * self.ys[i + 1]
            + ((a * a * a - a) * self.second[i] + (b * b * b - b) * self.second[i + 1])
                * h
                * h
                / 6.0)
    }
}

/// Relative rate saving of `test` against `anchor` at fixed PSNR values:
/// (bpp_test / bpp_anchor - 1) * 100 per grid point. Grid points must lie
/// inside both curves' PSNR ranges.
pub fn rate_saving_curve(
    anchor: &RdCurve,
    test: &RdCurve,
    psnr_grid: &[f64],
) -> Result<Vec<(f64, f64)>> {
    let (qa, ra) = quality_log_rate(anchor, QualityField::Psnr)?;
    let (qt, rt) = quality_log_rate(test, QualityField::Psnr)?;
    let sa = CubicSpline::new(qa, ra)?;
    let st = CubicSpline::new(qt, rt)?;
    let mut out = Vec::with_capacity(psnr_grid.len());
    for &p in psnr_grid {
        let la = sa.eval(p)?;
        let lt = st.eval(p)?;
        out.push((p, (10f64.powf(lt - la) - 1.0) * 100.0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::Rng;

    fn rand_image(h: usize, w: usize, rng: &mut Rng) -> Tensor {
        Tensor::from_vec(
            vec![1, 3, h, w],
            (0..3 * h * w).map(|_| rng.next_f64()).collect(),
        )
    }

    #[test]
    fn psnr_closed_forms() {
        let mut rng = Rng::new(1);
        let x = rand_image(8, 8, &mut rng);
        assert_eq!(psnr(&x, &x).unwrap(), 100.0);

        // Uniform error of 1/255: 20 log10 255 = 48.1308 dB.
        let off = Tensor::from_vec(
            x.shape().to_vec(),
            x.data().iter().map(|v| v + 1.0 / 255.0).collect(),
        );
        assert!((psnr(&x, &off).unwrap() - 48.1308).abs() < 1e-3);

        // MSE 0.01 -> 20 dB.
        let y = Tensor::zeros(vec![1, 1, 2, 2]);
        let z = Tensor::full(vec![1, 1, 2, 2], 0.1);
        assert!((psnr(&y, &z).unwrap() - 20.0).abs() < 1e-9);

        assert!(psnr(&x, &Tensor::zeros(vec![1, 3, 4, 4])).is_err());
    }

    #[test]
    fn psnr_invariant_under_joint_permutation() {
        let mut rng = Rng::new(2);
        let x = rand_image(6, 6, &mut rng);
        let y = rand_image(6, 6, &mut rng);
        let base = psnr(&x, &y).unwrap();
        // Reverse both pixel orders identically.
        let xr = Tensor::from_vec(x.shape().to_vec(), x.data().iter().rev().copied().collect());
        let yr = Tensor::from_vec(y.shape().to_vec(), y.data().iter().rev().copied().collect());
        assert!((psnr(&xr, &yr).unwrap() - base).abs() < 1e-12);
    }

    // Independent MS-SSIM oracle: direct window loops on f64 planes.
    fn oracle_ms_ssim(x: &Tensor, y: &Tensor) -> f64 {
        let (_, c, h, w) = x.dims4();
        let n = MSSSIM_WINDOW;
        let half = n / 2;
        let mut g1 = vec![0.0; n];
        let mut sum = 0.0;
        for i in 0..n {
            g1[i] = (-((i as f64 - half as f64) * (i as f64 - half as f64))
                / (2.0 * MSSSIM_SIGMA * MSSSIM_SIGMA))
                .exp();
            sum += g1[i];
        }
        for v in g1.iter_mut() {
            *v /= sum;
        }
        let (c1, c2) = (0.01f64 * 0.01, 0.03f64 * 0.03);

        let downsample = |buf: &[f64], h: usize, w: usize| -> (Vec<f64>, usize, usize) {
            let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
            let mut out = vec![0.0; oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let yy = (2 * oy + dy).min(h - 1);
                            let xx = (2 * ox + dx).min(w - 1);
                            acc += buf[yy * w + xx];
                        }
                    }
                    out[oy * ow + ox] = acc * 0.25;
                }
            }
            (out, oh, ow)
        };

        let mut planes_x: Vec<Vec<f64>> = (0..c)
            .map(|ch| x.data()[ch * h * w..(ch + 1) * h * w].to_vec())
            .collect();
        let mut planes_y: Vec<Vec<f64>> = (0..c)
            .map(|ch| y.data()[ch * h * w..(ch + 1) * h * w].to_vec())
            .collect();
        let (mut ch_h, mut ch_w) = (h, w);

        let mut value = 1.0;
        for (scale, &weight) in MSSSIM_WEIGHTS.iter().enumerate() {
            let (oh, ow) = (ch_h - n + 1, ch_w - n + 1);
            let mut cs_sum = 0.0;
            let mut l_sum = 0.0;
            for ch in 0..c {
                let px = &planes_x[ch];
                let py = &planes_y[ch];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let (mut m1, mut m2, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                        for ky in 0..n {
                            for kx in 0..n {
                                let wgt = g1[ky] * g1[kx];
                                let a = px[(oy + ky) * ch_w + ox + kx];
                                let b = py[(oy + ky) * ch_w + ox + kx];
                                m1 += wgt * a;
                                m2 += wgt * b;
                                xx += wgt * a * a;
                                yy += wgt * b * b;
                                xy += wgt * a * b;
                            }
                        }
                        let sxx = xx - m1 * m1;
                        let syy = yy - m2 * m2;
                        let sxy = xy - m1 * m2;
                        cs_sum += (2.0 * sxy + c2) / (sxx + syy + c2);
                        l_sum += (2.0 * m1 * m2 + c1) / (m1 * m1 + m2 * m2 + c1);
                    }
                }
            }
            let count = (c * oh * ow) as f64;
            let cs = (cs_sum / count).max(0.0);
            value *= cs.powf(weight);
            if scale == MSSSIM_WEIGHTS.len() - 1 {
                value *= (l_sum / count).max(0.0).powf(weight);
            } else {
                for ch in 0..c {
                    let (nx, _, _) = downsample(&planes_x[ch], ch_h, ch_w);
                    let (ny, oh2, ow2) = downsample(&planes_y[ch], ch_h, ch_w);
                    planes_x[ch] = nx;
                    planes_y[ch] = ny;
                    if ch == c - 1 {
                        ch_h = oh2;
                        ch_w = ow2;
                    }
                }
            }
        }
        value
    }

    #[test]
    fn ms_ssim_identity_is_exactly_one() {
        let mut rng = Rng::new(3);
        let x = rand_image(176, 176, &mut rng);
        assert_eq!(ms_ssim_value(&x, &x).unwrap(), 1.0);
    }

    #[test]
    fn ms_ssim_less_than_one_when_different() {
        let mut rng = Rng::new(4);
        let x = rand_image(176, 176, &mut rng);
        let y = Tensor::from_vec(
            x.shape().to_vec(),
            x.data().iter().map(|v| (v + 0.05).min(1.0)).collect(),
        );
        let v = ms_ssim_value(&x, &y).unwrap();
        assert!(v < 1.0 && v > 0.0, "{v}");
    }

    #[test]
    fn ms_ssim_rejects_small_images() {
        let x = Tensor::zeros(vec![1, 3, 160, 160]);
        assert!(matches!(ms_ssim(&x, &x), Err(Error::Numeric(_))));
        let x = Tensor::full(vec![1, 3, 161, 161], 0.5);
        assert!(ms_ssim(&x, &x).is_ok());
    }

    #[test]
    fn ms_ssim_matches_independent_oracle() {
        let mut rng = Rng::new(5);
        for trial in 0..5 {
            // Correlated pair: reference plus structured noise.
            let x = rand_image(176, 184, &mut rng);
            let y = Tensor::from_vec(
                x.shape().to_vec(),
                x.data()
                    .iter()
                    .map(|v| (v * 0.9 + 0.05 + 0.08 * (rng.next_f64() - 0.5)).clamp(0.0, 1.0))
                    .collect(),
            );
            let mine = ms_ssim_value(&x, &y).unwrap();
            let oracle = oracle_ms_ssim(&x, &y);
            assert!(
                (mine - oracle).abs() < 1e-6,
                "trial {trial}: {mine} vs oracle {oracle}"
            );
        }
    }

    fn curve(points: &[(f64, f64)]) -> RdCurve {
        RdCurve::new(
            points
                .iter()
                .enumerate()
                .map(|(i, &(bpp, q))| RdPoint {
                    lambda_index: i as u32,
                    bpp,
                    psnr: q,
                    msssim: None,
                })
                .collect(),
        )
        .unwrap()
        .0
    }

    const BASE: [(f64, f64); 4] = [(0.25, 30.0), (0.5, 33.0), (1.0, 36.5), (2.0, 40.0)];

    #[test]
    fn bd_rate_identities() {
        let a = curve(&BASE);
        assert_eq!(bd_rate(&a, &a, QualityField::Psnr).unwrap(), 0.0);

        let doubled = curve(&BASE.map(|(b, q)| (2.0 * b, q)));
        let bd = bd_rate(&a, &doubled, QualityField::Psnr).unwrap();
        assert!((bd - 100.0).abs() < 1e-6, "doubled bpp bd {bd}");

        let halved = curve(&BASE.map(|(b, q)| (0.5 * b, q)));
        let bd = bd_rate(&a, &halved, QualityField::Psnr).unwrap();
        assert!((bd + 50.0).abs() < 1e-6, "halved bpp bd {bd}");
    }

    #[test]
    fn bd_rate_matches_dense_integration_oracle() {
        // Oracle: Neville interpolation + Simpson integration at high res.
        fn neville(xs: &[f64], ys: &[f64], x: f64) -> f64 {
            let mut p = ys.to_vec();
            let n = xs.len();
            for level in 1..n {
                for i in 0..n - level {
                    p[i] = ((x - xs[i + level]) * p[i] + (xs[i] - x) * p[i + 1])
                        / (xs[i] - xs[i + level]);
                }
            }
            p[0]
        }
        let cases: [(Vec<(f64, f64)>, Vec<(f64, f64)>); 2] = [
            (
                vec![(0.25, 30.0), (0.5, 33.0), (1.0, 36.5), (2.0, 40.0)],
                vec![(0.22, 30.2), (0.45, 33.4), (0.9, 36.9), (1.8, 40.3)],
            ),
            (
                vec![(0.1, 28.0), (0.3, 32.0), (0.7, 35.0), (1.5, 38.0)],
                vec![(0.12, 27.5), (0.33, 31.8), (0.8, 35.2), (1.7, 38.5)],
            ),
        ];
        for (pa, pt) in cases {
            let a = curve(&pa);
            let t = curve(&pt);
            let got = bd_rate(&a, &t, QualityField::Psnr).unwrap();

            let qa: Vec<f64> = pa.iter().map(|p| p.1).collect();
            let ra: Vec<f64> = pa.iter().map(|p| p.0.log10()).collect();
            let qt: Vec<f64> = pt.iter().map(|p| p.1).collect();
            let rt: Vec<f64> = pt.iter().map(|p| p.0.log10()).collect();
            let lo = qa[0].max(qt[0]);
            let hi = qa[qa.len() - 1].min(qt[qt.len() - 1]);
            let steps = 200_000;
            let mut acc = 0.0;
            for i in 0..=steps {
                let q = lo + (hi - lo) * i as f64 / steps as f64;
                let d = neville(&qt, &rt, q) - neville(&qa, &ra, q);
                let w = if i == 0 || i == steps {
                    0.5
                } else {
                    1.0
                };
                acc += w * d;
            }
            let avg = acc / steps as f64;
            let oracle = (10f64.powf(avg) - 1.0) * 100.0;
            assert!(
                (got - oracle).abs() < 0.01,
                "bd {got} vs oracle {oracle}"
            );
        }
    }

    #[test]
    fn bd_rate_reciprocal_identity() {
        let a = curve(&BASE);
        let t = curve(&[(0.22, 30.4), (0.46, 33.5), (0.93, 36.8), (1.9, 40.2)]);
        let ab = bd_rate(&a, &t, QualityField::Psnr).unwrap();
        let ba = bd_rate(&t, &a, QualityField::Psnr).unwrap();
        let implied = -ba / (1.0 + ba / 100.0);
        assert!((ab - implied).abs() < 0.05, "{ab} vs {implied}");
    }

    #[test]
    fn bd_rate_invariant_to_point_order() {
        let mut pts: Vec<RdPoint> = BASE
            .iter()
            .map(|&(b, q)| RdPoint {
                lambda_index: 0,
                bpp: b,
                psnr: q,
                msssim: None,
            })
            .collect();
        pts.reverse();
        pts.swap(0, 2);
        let shuffled = RdCurve::new(pts).unwrap().0;
        let a = curve(&BASE);
        let t = curve(&[(0.22, 30.4), (0.46, 33.5), (0.93, 36.8), (1.9, 40.2)]);
        let bd1 = bd_rate(&a, &t, QualityField::Psnr).unwrap();
        let bd2 = bd_rate(&shuffled, &t, QualityField::Psnr).unwrap();
        assert!((bd1 - bd2).abs() < 1e-12);
    }

    #[test]
    fn bd_rate_error_cases() {
        let a = curve(&BASE);
        let three = curve(&BASE[..3]);
        assert!(matches!(
            bd_rate(&a, &three, QualityField::Psnr),
            Err(Error::Numeric(_))
        ));
        let disjoint = curve(&[(0.1, 50.0), (0.2, 52.0), (0.4, 54.0), (0.8, 56.0)]);
        assert!(matches!(
            bd_rate(&a, &disjoint, QualityField::Psnr),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn spline_interpolates_knots_exactly() {
        let xs = vec![1.0, 2.0, 3.5, 5.0, 7.0];
        let ys = vec![0.3, -0.2, 0.9, 1.4, 0.1];
        let sp = CubicSpline::new(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(ys.iter()) {
            assert!((sp.eval(*x).unwrap() - y).abs() < 1e-12);
        }
        assert!(sp.eval(0.5).is_err());
        assert!(sp.eval(7.5).is_err());
    }

    #[test]
    fn rate_saving_identity_and_offset() {
        let a = curve(&BASE);
        let grid: Vec<f64> = (0..=20).map(|i| 30.0 + 0.5 * i as f64).collect();
        let zero = rate_saving_curve(&a, &a, &grid).unwrap();
        assert!(zero.iter().all(|&(_, s)| s.abs() < 1e-12));

        let doubled = curve(&BASE.map(|(b, q)| (2.0 * b, q)));
        let sav = rate_saving_curve(&a, &doubled, &grid).unwrap();
        assert!(sav.iter().all(|&(_, s)| (s - 100.0).abs() < 1e-9));
        // Sign agrees with bd_rate.
        let bd = bd_rate(&a, &doubled, QualityField::Psnr).unwrap();
        assert!(bd > 0.0 && sav[0].1 > 0.0);
    }

    #[test]
    fn csv_roundtrip() {
        let mut pts = BASE
            .iter()
            .enumerate()
            .map(|(i, &(b, q))| RdPoint {
                lambda_index: i as u32,
                bpp: b,
                psnr: q,
                msssim: if i % 2 == 0 { Some(0.97 + 0.001 * i as f64) } else { None },
            })
            .collect::<Vec<_>>();
        pts.reverse();
        let (c, _) = RdCurve::new(pts).unwrap();
        let text = c.to_csv();
        let back = RdCurve::from_csv(&text).unwrap();
        assert_eq!(back.points().len(), 4);
        for (p, q) in back.points().iter().zip(c.points().iter()) {
            assert!((p.bpp - q.bpp).abs() < 1e-9);
            assert!((p.psnr - q.psnr).abs() < 1e-5);
            assert_eq!(p.msssim.is_some(), q.msssim.is_some());
        }
    }
}
