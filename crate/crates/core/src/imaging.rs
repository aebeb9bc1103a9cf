//! Resolution-bridging primitives.
//!
//! * [`interpolate_band`]: separable Catmull-Rom upsampling by an integer
//!   ratio, low-resolution sample `n` landing on high-resolution pixel
//!   `R·n + ⌊R/2⌋`.
//! * [`mtf_lowpass`]: separable Gaussian whose response at the Nyquist
//!   frequency of the `R`-decimated grid equals the configured gain.
//! * [`degrade`]: low-pass followed by decimation with an offset, plus its
//!   exact adjoint for backpropagation.
//! * [`local_cc`]: windowed correlation coefficient.
//!
//! All filters use replicate-edge boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Variance below which a window is treated as flat.
pub const FLAT_VARIANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MtfFilterSpec {
    pub ratio: usize,
    pub nyquist_gain: f64,
    pub half_width: usize,
}

impl Default for MtfFilterSpec {
    fn default() -> Self {
        MtfFilterSpec {
            ratio: 6,
            nyquist_gain: 0.3,
            half_width: 20,
        }
    }
}

impl MtfFilterSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::Config("resolution ratio must be positive".into()));
        }
        if !(self.nyquist_gain > 0.0 && self.nyquist_gain < 1.0) {
            return Err(Error::Config(format!(
                "Nyquist gain must lie in (0, 1), got {}",
                self.nyquist_gain
            )));
        }
        Ok(())
    }

    /// Spatial standard deviation `(R/π)·√(−2 ln G)` in high-resolution pixels.
    pub fn sigma(&self) -> f64 {
        self.ratio as f64 / std::f64::consts::PI * (-2.0 * self.nyquist_gain.ln()).sqrt()
    }

    /// Normalized 1-D taps, length `2·half_width + 1`.
    pub fn kernel(&self) -> Vec<f64> {
        let s = self.sigma();
        let hw = self.half_width as isize;
        let taps: Vec<f64> = (-hw..=hw)
            .map(|i| (-(i * i) as f64 / (2.0 * s * s)).exp())
            .collect();
        let total: f64 = taps.iter().sum();
        taps.into_iter().map(|t| t / total).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecimationSpec {
    pub step: usize,
    pub offset: (usize, usize),
}

impl DecimationSpec {
    /// Offset `(⌊R/2⌋, ⌊R/2⌋)`, matching [`interpolate_band`]'s sample mapping.
    pub fn centered(step: usize) -> Self {
        DecimationSpec {
            step,
            offset: (step / 2, step / 2),
        }
    }

    pub fn output_dims(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let r = self.step;
        let (n0, m0) = self.offset;
        if r == 0 || n0 >= r || m0 >= r {
            return Err(Error::InvalidArgument(format!(
                "decimation offset {:?} incompatible with step {r}",
                self.offset
            )));
        }
        if height <= n0 || width <= m0 {
            return Err(Error::shape(
                "degrade",
                format!("image larger than offset {:?}", self.offset),
                format!("{height}x{width}"),
            ));
        }
        Ok(((height - n0 + r - 1) / r, (width - m0 + r - 1) / r))
    }
}

#[inline]
fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

/// Catmull-Rom taps `(first source index, weights)` for every output index.
fn cubic_taps(len_lr: usize, ratio: usize) -> Vec<([usize; 4], [f64; 4])> {
    let half = (ratio / 2) as f64;
    (0..len_lr * ratio)
        .map(|o| {
            let t = (o as f64 - half) / ratio as f64;
            let i0 = t.floor();
            let f = t - i0;
            let (f2, f3) = (f * f, f * f * f);
            let w = [
                0.5 * (-f3 + 2.0 * f2 - f),
                0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
                0.5 * (-3.0 * f3 + 4.0 * f2 + f),
                0.5 * (f3 - f2),
            ];
            let base = i0 as isize;
            let idx = [
                clamp_index(base - 1, len_lr),
                clamp_index(base, len_lr),
                clamp_index(base + 1, len_lr),
                clamp_index(base + 2, len_lr),
            ];
            (idx, w)
        })
        .collect()
}

/// Upsamples every channel by `ratio` with separable cubic interpolation.
pub fn interpolate_band(band: &Tensor, ratio: usize) -> Result<Tensor> {
    if ratio < 2 {
        return Err(Error::InvalidArgument(format!("interpolation ratio must be ≥ 2, got {ratio}")));
    }
    let (h, w) = (band.height(), band.width());
    if h < 4 || w < 4 {
        return Err(Error::shape("interpolate_band", "at least 4x4 pixels", format!("{h}x{w}")));
    }
    let (oh, ow) = (h * ratio, w * ratio);
    let tx = cubic_taps(w, ratio);
    let ty = cubic_taps(h, ratio);
    let mut out = Tensor::zeros(Shape::new(band.channels(), oh, ow));
    let mut rows = vec![0.0; h * ow];
    for c in 0..band.channels() {
        let src = band.plane(c);
        for y in 0..h {
            let s = &src[y * w..(y + 1) * w];
            let d = &mut rows[y * ow..(y + 1) * ow];
            for (o, (idx, wt)) in tx.iter().enumerate() {
                d[o] = wt[0] * s[idx[0]] + wt[1] * s[idx[1]] + wt[2] * s[idx[2]] + wt[3] * s[idx[3]];
            }
        }
        let dst = out.plane_mut(c);
        for (o, (idx, wt)) in ty.iter().enumerate() {
            let d = &mut dst[o * ow..(o + 1) * ow];
            let r = idx.map(|i| &rows[i * ow..(i + 1) * ow]);
            for x in 0..ow {
                d[x] = wt[0] * r[0][x] + wt[1] * r[1][x] + wt[2] * r[2][x] + wt[3] * r[3][x];
            }
        }
    }
    Ok(out)
}

/// Separable Gaussian low-pass of every channel.
pub fn mtf_lowpass(image: &Tensor, spec: &MtfFilterSpec) -> Result<Tensor> {
    spec.validate()?;
    let k = spec.kernel();
    let hw = spec.half_width as isize;
    let (h, w) = (image.height(), image.width());
    if h == 0 || w == 0 {
        return Err(Error::InvalidArgument("mtf_lowpass on empty image".into()));
    }
    let mut out = Tensor::zeros(image.shape());
    let mut tmp = vec![0.0; h * w];
    let mut padded = vec![0.0; w.max(h) + 2 * spec.half_width];
    for c in 0..image.channels() {
        let src = image.plane(c);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for (i, p) in padded[..w + 2 * spec.half_width].iter_mut().enumerate() {
                *p = row[clamp_index(i as isize - hw, w)];
            }
            for x in 0..w {
                tmp[y * w + x] = k.iter().zip(&padded[x..]).map(|(a, b)| a * b).sum();
            }
        }
        let dst = out.plane_mut(c);
        for (ky, &kv) in k.iter().enumerate() {
            for y in 0..h {
                let sy = clamp_index(y as isize + ky as isize - hw, h);
                let (s, d) = (&tmp[sy * w..(sy + 1) * w], &mut dst[y * w..(y + 1) * w]);
                for (dv, sv) in d.iter_mut().zip(s) {
                    *dv += kv * sv;
                }
            }
        }
    }
    Ok(out)
}

/// Low-pass filter then keep pixels `(n0 + R·n, m0 + R·m)`.
///
/// Only the retained samples are filtered.
pub fn degrade(band_hr: &Tensor, spec: &MtfFilterSpec, dec: &DecimationSpec) -> Result<Tensor> {
    spec.validate()?;
    let (h, w) = (band_hr.height(), band_hr.width());
    let (oh, ow) = dec.output_dims(h, w)?;
    let k = spec.kernel();
    let hw = spec.half_width as isize;
    let (n0, m0) = dec.offset;
    let r = dec.step;
    let mut out = Tensor::zeros(Shape::new(band_hr.channels(), oh, ow));
    let mut tmp = vec![0.0; h * ow];
    for c in 0..band_hr.channels() {
        let src = band_hr.plane(c);
        for y in 0..h {
            let row = &src[y * w..(y + 1) * w];
            for m in 0..ow {
                let cx = (m0 + r * m) as isize;
                tmp[y * ow + m] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| kv * row[clamp_index(cx + j as isize - hw, w)])
                    .sum();
            }
        }
        let dst = out.plane_mut(c);
        for n in 0..oh {
            let cy = (n0 + r * n) as isize;
            for (j, kv) in k.iter().enumerate() {
                let sy = clamp_index(cy + j as isize - hw, h);
                for m in 0..ow {
                    dst[n * ow + m] += kv * tmp[sy * ow + m];
                }
            }
        }
    }
    Ok(out)
}

/// Adjoint of [`degrade`] onto a `height × width` grid.
pub fn degrade_adjoint(
    grad_lr: &Tensor,
    spec: &MtfFilterSpec,
    dec: &DecimationSpec,
    height: usize,
    width: usize,
) -> Result<Tensor> {
    let (oh, ow) = dec.output_dims(height, width)?;
    if grad_lr.height() != oh || grad_lr.width() != ow {
        return Err(Error::shape(
            "degrade_adjoint",
            format!("{oh}x{ow}"),
            format!("{}x{}", grad_lr.height(), grad_lr.width()),
        ));
    }
    let k = spec.kernel();
    let hw = spec.half_width as isize;
    let (n0, m0) = dec.offset;
    let r = dec.step;
    let mut out = Tensor::zeros(Shape::new(grad_lr.channels(), height, width));
    let mut tmp = vec![0.0; height * ow];
    for c in 0..grad_lr.channels() {
        tmp.fill(0.0);
        let g = grad_lr.plane(c);
        for n in 0..oh {
            let cy = (n0 + r * n) as isize;
            for (j, kv) in k.iter().enumerate() {
                let sy = clamp_index(cy + j as isize - hw, height);
                for m in 0..ow {
                    tmp[sy * ow + m] += kv * g[n * ow + m];
                }
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..height {
            let row = &mut dst[y * width..(y + 1) * width];
            for m in 0..ow {
                let cx = (m0 + r * m) as isize;
                let t = tmp[y * ow + m];
                for (j, kv) in k.iter().enumerate() {
                    row[clamp_index(cx + j as isize - hw, width)] += kv * t;
                }
            }
        }
    }
    Ok(out)
}

/// Window offsets `[lo, hi]` of a `size`-wide window centered on a pixel.
#[inline]
pub(crate) fn window_bounds(size: usize) -> (isize, isize) {
    let lo = -((size / 2) as isize);
    (lo, lo + size as isize - 1)
}

/// Sum over the `size × size` window at every pixel (replicate edges).
pub(crate) fn box_sum(img: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let (lo, hi) = window_bounds(size);
    // horizontal pass via prefix sums over the replicate-padded row
    let plen = w + size;
    let mut prefix = vec![0.0; plen];
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let row = &img[y * w..(y + 1) * w];
        let mut acc = 0.0;
        for q in 0..w + size - 1 {
            acc += row[clamp_index(q as isize + lo, w)];
            prefix[q + 1] = acc;
        }
        for x in 0..w {
            tmp[y * w + x] = prefix[x + size] - prefix[x];
        }
    }
    // vertical pass: direct accumulation of clamped rows
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let d = &mut out[y * w..(y + 1) * w];
        for j in lo..=hi {
            let sy = clamp_index(y as isize + j, h);
            for (dv, sv) in d.iter_mut().zip(&tmp[sy * w..(sy + 1) * w]) {
                *dv += sv;
            }
        }
    }
    out
}

/// Adjoint of [`box_sum`].
pub(crate) fn box_sum_adjoint(g: &[f64], h: usize, w: usize, size: usize) -> Vec<f64> {
    let (lo, hi) = window_bounds(size);
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        let s = &g[y * w..(y + 1) * w];
        for j in lo..=hi {
            let sy = clamp_index(y as isize + j, h);
            for (dv, sv) in tmp[sy * w..(sy + 1) * w].iter_mut().zip(s) {
                *dv += sv;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    let plen = w + size - 1;
    let mut prefix = vec![0.0; w + 1];
    for y in 0..h {
        let row = &tmp[y * w..(y + 1) * w];
        let mut acc = 0.0;
        for (x, v) in row.iter().enumerate() {
            acc += v;
            prefix[x + 1] = acc;
        }
        let d = &mut out[y * w..(y + 1) * w];
        // padded cell q receives Σ g[x] over x ∈ [q − size + 1, q]
        for q in 0..plen {
            let a = (q + 1).saturating_sub(size);
            let b = (q + 1).min(w);
            let v = prefix[b] - prefix[a];
            d[clamp_index(q as isize + lo, w)] += v;
        }
    }
    out
}

/// Per-pixel window moments of a pair of single-band images.
pub(crate) struct WindowMoments {
    pub mean_x: Vec<f64>,
    pub mean_y: Vec<f64>,
    pub var_x: Vec<f64>,
    pub var_y: Vec<f64>,
    pub cov: Vec<f64>,
}

pub(crate) fn window_moments(x: &[f64], y: &[f64], h: usize, w: usize, size: usize) -> WindowMoments {
    let n = (size * size) as f64;
    let mean = |v: &[f64]| -> Vec<f64> { box_sum(v, h, w, size).into_iter().map(|s| s / n).collect() };
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mean_x = mean(x);
    let mean_y = mean(y);
    let mxx = mean(&xx);
    let myy = mean(&yy);
    let mxy = mean(&xy);
    let var_x = mxx.iter().zip(&mean_x).map(|(a, m)| (a - m * m).max(0.0)).collect();
    let var_y = myy.iter().zip(&mean_y).map(|(a, m)| (a - m * m).max(0.0)).collect();
    let cov = mxy
        .iter()
        .zip(mean_x.iter().zip(&mean_y))
        .map(|(a, (mx, my))| a - mx * my)
        .collect();
    WindowMoments {
        mean_x,
        mean_y,
        var_x,
        var_y,
        cov,
    }
}

/// Correlation coefficient on a `window × window` neighborhood of every pixel.
///
/// Flat windows (either variance below [`FLAT_VARIANCE`]) yield 0; values are
/// clamped to `[-1, 1]`.
pub fn local_cc(x: &Tensor, y: &Tensor, window: usize) -> Result<Tensor> {
    if x.channels() != 1 {
        return Err(Error::shape("local_cc", "1 channel", x.channels()));
    }
    y.ensure_shape("local_cc", x.shape())?;
    if window < 2 {
        return Err(Error::InvalidArgument(format!("local_cc window must be ≥ 2, got {window}")));
    }
    let (h, w) = (x.height(), x.width());
    let m = window_moments(x.data(), y.data(), h, w, window);
    let rho = (0..h * w)
        .map(|i| {
            let (vx, vy) = (m.var_x[i], m.var_y[i]);
            if vx < FLAT_VARIANCE || vy < FLAT_VARIANCE {
                0.0
            } else {
                (m.cov[i] / (vx * vy).sqrt()).clamp(-1.0, 1.0)
            }
        })
        .collect();
    Tensor::from_vec(x.shape(), rho)
}

/// Global correlation coefficient of two equally sized tensors; 0 if either is flat.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa / n < FLAT_VARIANCE || sbb / n < FLAT_VARIANCE {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(seed: u64, h: usize, w: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(Shape::new(1, h, w), |_, _, _| rng.gen_range(0.0..1.0))
    }

    fn bump(h: usize, w: usize, s: f64) -> Tensor {
        let (cy, cx) = (h as f64 / 2.0, w as f64 / 2.0);
        Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
            0.2 + (-d2 / (2.0 * s * s)).exp()
        })
    }

    fn rel_l1(a: &Tensor, reference: &Tensor) -> f64 {
        let num: f64 = a.data().iter().zip(reference.data()).map(|(x, y)| (x - y).abs()).sum();
        num / reference.data().iter().map(|v| v.abs()).sum::<f64>()
    }

    #[test]
    fn kernel_is_normalized_with_expected_sigma() {
        let spec = MtfFilterSpec::default();
        let k = spec.kernel();
        assert_eq!(k.len(), 41);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let expected = 6.0 / std::f64::consts::PI * (-2.0 * 0.3f64.ln()).sqrt();
        assert!((spec.sigma() - expected).abs() < 1e-15);
    }

    #[test]
    fn kernel_response_at_nyquist_equals_gain() {
        // impulse through the 2-D filter, then its DFT along x at f = 1/(2R)
        let spec = MtfFilterSpec::default();
        let n = 61;
        let mut img = Tensor::zeros(Shape::new(1, n, n));
        *img.at_mut(0, 30, 30) = 1.0;
        let out = mtf_lowpass(&img, &spec).unwrap();
        let k = spec.kernel();
        for (i, &kv) in k.iter().enumerate() {
            assert!((out.at(0, 30, 10 + i) - kv * k[20]).abs() < 1e-15);
        }
        let f = 1.0 / (2.0 * spec.ratio as f64);
        let mut re = 0.0;
        let mut im = 0.0;
        for y in 0..n {
            for x in 0..n {
                let ph = 2.0 * std::f64::consts::PI * f * (x as f64 - 30.0);
                re += out.at(0, y, x) * ph.cos();
                im += out.at(0, y, x) * ph.sin();
            }
        }
        let gain = (re * re + im * im).sqrt();
        assert!((gain - 0.3).abs() < 1e-3, "gain {gain}");
    }

    #[test]
    fn lowpass_preserves_constants_and_shrinks_variance() {
        let spec = MtfFilterSpec::default();
        let c = Tensor::filled(Shape::new(1, 30, 30), 0.7);
        for v in mtf_lowpass(&c, &spec).unwrap().data() {
            assert!((v - 0.7).abs() < 1e-12);
        }
        let noise = random(1, 64, 64);
        let var = |t: &Tensor| {
            let m = t.mean();
            t.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / t.len() as f64
        };
        let out = mtf_lowpass(&noise, &spec).unwrap();
        assert!(var(&out) < var(&noise));
    }

    #[test]
    fn interpolation_preserves_constants() {
        let c = Tensor::filled(Shape::new(1, 5, 7), 3.25);
        let up = interpolate_band(&c, 6).unwrap();
        assert_eq!(up.shape(), Shape::new(1, 30, 42));
        assert!(up.data().iter().all(|v| (v - 3.25).abs() < 1e-12));
    }

    #[test]
    fn interpolation_reproduces_linear_ramp() {
        let ramp = Tensor::from_fn(Shape::new(1, 6, 8), |_, _, x| 2.0 + 0.5 * x as f64);
        let up = interpolate_band(&ramp, 6).unwrap();
        for y in 0..36 {
            // mapped sample positions hold the original values
            for n in 0..8 {
                assert!((up.at(0, y, 6 * n + 3) - ramp.at(0, 0, n)).abs() < 1e-9);
            }
            // between the first and last samples the ramp is exact
            for x in 3..=45 {
                let t = (x as f64 - 3.0) / 6.0;
                let expect = 2.0 + 0.5 * t;
                if (1.0..=6.0).contains(&t) {
                    assert!((up.at(0, y, x) - expect).abs() < 1e-9, "x={x}");
                }
            }
        }
    }

    #[test]
    fn interpolation_rejects_tiny_bands() {
        assert!(interpolate_band(&Tensor::zeros(Shape::new(1, 3, 8)), 6).is_err());
        assert!(interpolate_band(&Tensor::zeros(Shape::new(1, 8, 8)), 1).is_err());
    }

    #[test]
    fn interpolation_overshoot_is_bounded() {
        let mut step = Tensor::zeros(Shape::new(1, 8, 8));
        for y in 0..8 {
            for x in 4..8 {
                *step.at_mut(0, y, x) = 1.0;
            }
        }
        let (lo, hi) = interpolate_band(&step, 6).unwrap().min_max();
        assert!(lo >= -0.1 && hi <= 1.1, "{lo} {hi}");
    }

    #[test]
    fn degrade_interpolate_roundtrip() {
        let band = bump(16, 16, 4.0);
        let spec = MtfFilterSpec::default();
        let back = degrade(&interpolate_band(&band, 6).unwrap(), &spec, &DecimationSpec::centered(6)).unwrap();
        assert_eq!(back.shape(), band.shape());
        let e = rel_l1(&back, &band);
        assert!(e < 0.02, "round-trip error {e}");
    }

    #[test]
    fn degrade_constant_and_dims() {
        let spec = MtfFilterSpec::default();
        let dec = DecimationSpec::centered(6);
        let c = Tensor::filled(Shape::new(1, 36, 48), 0.4);
        let out = degrade(&c, &spec, &dec).unwrap();
        assert_eq!(out.shape(), Shape::new(1, 6, 8));
        assert!(out.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        assert!(DecimationSpec { step: 6, offset: (6, 0) }.output_dims(36, 36).is_err());
    }

    #[test]
    fn degrade_impulse_train_reads_kernel() {
        // impulses on the sampled phase, spaced wider than the kernel support
        let spec = MtfFilterSpec::default();
        let dec = DecimationSpec::centered(6);
        let mut img = Tensor::zeros(Shape::new(1, 96, 96));
        *img.at_mut(0, 3 + 6 * 8, 3 + 6 * 8) = 1.0;
        let out = degrade(&img, &spec, &dec).unwrap();
        let k = spec.kernel();
        for n in 0..16 {
            for m in 0..16 {
                let dy = 6 * (n as isize - 8);
                let dx = 6 * (m as isize - 8);
                let tap = |d: isize| if d.abs() <= 20 { k[(d + 20) as usize] } else { 0.0 };
                assert!((out.at(0, n, m) - tap(dy) * tap(dx)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn degrade_adjoint_identity() {
        let spec = MtfFilterSpec::default();
        let dec = DecimationSpec::centered(6);
        let x = random(4, 30, 36);
        let g = random(5, 5, 6);
        let lhs = degrade(&x, &spec, &dec).unwrap().dot(&g).unwrap();
        let rhs = x.dot(&degrade_adjoint(&g, &spec, &dec, 30, 36).unwrap()).unwrap();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn box_sum_adjoint_identity_and_oracle() {
        let (h, w) = (9, 13);
        let x = random(6, h, w);
        let g = random(7, h, w);
        for size in [2, 5, 6, 36] {
            let bs = box_sum(x.data(), h, w, size);
            let (lo, hi) = window_bounds(size);
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = 0.0;
                    for dy in lo..=hi {
                        for dx in lo..=hi {
                            acc += x.at(0, clamp_index(y as isize + dy, h), clamp_index(xx as isize + dx, w));
                        }
                    }
                    assert!((acc - bs[y * w + xx]).abs() < 1e-9);
                }
            }
            let lhs: f64 = bs.iter().zip(g.data()).map(|(a, b)| a * b).sum();
            let adj = box_sum_adjoint(g.data(), h, w, size);
            let rhs: f64 = adj.iter().zip(x.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "size {size}");
        }
    }

    #[test]
    fn local_cc_self_and_affine() {
        let x = random(8, 20, 20);
        let r = local_cc(&x, &x, 6).unwrap();
        assert!(r.data().iter().all(|v| (v - 1.0).abs() < 1e-9));
        let y = x.map(|v| -2.0 * v + 7.0);
        let r = local_cc(&x, &y, 6).unwrap();
        assert!(r.data().iter().all(|v| (v + 1.0).abs() < 1e-9));
    }

    #[test]
    fn local_cc_matches_window_loop() {
        let x = random(9, 12, 12);
        let y = random(10, 12, 12);
        let r = local_cc(&x, &y, 6).unwrap();
        for i in 0..12 {
            for j in 0..12 {
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for dy in -3..=2 {
                    for dx in -3..=2 {
                        let (a, b) = (clamp_index(i as isize + dy, 12), clamp_index(j as isize + dx, 12));
                        xs.push(x.at(0, a, b));
                        ys.push(y.at(0, a, b));
                    }
                }
                let mx = xs.iter().sum::<f64>() / 36.0;
                let my = ys.iter().sum::<f64>() / 36.0;
                let cov = xs.iter().zip(&ys).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / 36.0;
                let vx = xs.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / 36.0;
                let vy = ys.iter().map(|b| (b - my).powi(2)).sum::<f64>() / 36.0;
                let expect = cov / (vx * vy).sqrt();
                assert!((r.at(0, i, j) - expect).abs() < 1e-12, "({i},{j})");
            }
        }
    }

    #[test]
    fn local_cc_flat_window_is_zero() {
        let x = Tensor::filled(Shape::new(1, 10, 10), 0.5);
        let y = random(11, 10, 10);
        assert!(local_cc(&x, &y, 6).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(local_cc(&x, &Tensor::zeros(Shape::new(1, 10, 11)), 6).is_err());
    }
}
