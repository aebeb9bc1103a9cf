//! Quality indexes for fused cubes.
//!
//! With a reference: SAM, ERGAS, PSNR and `Q_avg`, the band-averaged
//! universal image quality index on non-overlapping blocks. Without one:
//! spectral and spatial distortions `D_λ`, `D_S` and their combination `Q*`.
//! `Q_avg` stands in for the hypercomplex `Q2ⁿ` index and `D_S` is the
//! cross-scale correlation-difference form; reports name both.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{DataCube, PanImage};
use crate::error::{Error, Result};
use crate::imaging::{correlation, degrade, interpolate_band, DecimationSpec, MtfFilterSpec, FLAT_VARIANCE};
use crate::tensor::Tensor;

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;

pub const DEFAULT_Q_BLOCK: usize = 32;

/// Label emitted next to `q_avg`.
pub const Q_AVG_LABEL: &str = "per-band UIQI average (substitute for Q2n)";
/// Label emitted next to `d_s`.
pub const D_S_LABEL: &str = "mean |cc(fused_b, pan) - cc(hs_b, degraded pan)|";

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    a.ensure_shape(op, b.shape())
}

/// Mean spectral angle in degrees and the number of pixels skipped because
/// one of the two spectra was all zero.
pub fn sam(fused: &Tensor, gt: &Tensor) -> Result<(f64, usize)> {
    same_shape("sam", fused, gt)?;
    let nb = gt.channels();
    let plane = gt.height() * gt.width();
    let (f, g) = (fused.data(), gt.data());
    let mut total = 0.0;
    let mut counted = 0usize;
    for i in 0..plane {
        let (mut nf, mut ng) = (0.0, 0.0);
        for b in 0..nb {
            let (x, y) = (f[b * plane + i], g[b * plane + i]);
            nf += x * x;
            ng += y * y;
        }
        if nf == 0.0 || ng == 0.0 {
            continue;
        }
        // 2·atan2(|u − v|, |u + v|) on unit vectors; acos loses precision near 0
        let (nf, ng) = (nf.sqrt(), ng.sqrt());
        let (mut diff, mut sum) = (0.0, 0.0);
        for b in 0..nb {
            let (u, v) = (f[b * plane + i] / nf, g[b * plane + i] / ng);
            diff += (u - v) * (u - v);
            sum += (u + v) * (u + v);
        }
        total += (2.0 * diff.sqrt().atan2(sum.sqrt())).to_degrees();
        counted += 1;
    }
    let skipped = plane - counted;
    if skipped > 0 {
        log::warn!("sam: {skipped} pixels with an all-zero spectrum skipped");
    }
    Ok((if counted > 0 { total / counted as f64 } else { 0.0 }, skipped))
}

/// `(100/R)·√(mean_b (RMSE_b/μ_b)²)`; bands whose reference mean is zero are
/// left out.
pub fn ergas(fused: &Tensor, gt: &Tensor, ratio: usize) -> Result<f64> {
    same_shape("ergas", fused, gt)?;
    if ratio == 0 {
        return Err(Error::InvalidArgument("ERGAS ratio must be positive".into()));
    }
    let plane = gt.height() * gt.width();
    let mut acc = 0.0;
    let mut used = 0usize;
    for b in 0..gt.channels() {
        let (f, g) = (fused.plane(b), gt.plane(b));
        let mu = g.iter().sum::<f64>() / plane as f64;
        if mu == 0.0 {
            log::warn!("ergas: band {b} has zero mean and is excluded");
            continue;
        }
        let mse = f.iter().zip(g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / plane as f64;
        acc += mse / (mu * mu);
        used += 1;
    }
    if used == 0 {
        return Err(Error::InvalidArgument("ergas: every band has zero mean".into()));
    }
    Ok(100.0 / ratio as f64 * (acc / used as f64).sqrt())
}

/// Band-averaged PSNR with each band's peak taken from the reference.
pub fn psnr(fused: &Tensor, gt: &Tensor) -> Result<f64> {
    same_shape("psnr", fused, gt)?;
    let plane = (gt.height() * gt.width()) as f64;
    let mut acc = 0.0;
    for b in 0..gt.channels() {
        let (f, g) = (fused.plane(b), gt.plane(b));
        let peak = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mse = f.iter().zip(g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / plane;
        acc += if mse == 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
        };
    }
    Ok(acc / gt.channels() as f64)
}

/// Universal image quality index of two equally long samples.
pub fn uiqi(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let (vx, vy, cxy) = (sxx / n, syy / n, sxy / n);
    let (flat_x, flat_y) = (vx < FLAT_VARIANCE, vy < FLAT_VARIANCE);
    if flat_x && flat_y {
        return 1.0;
    }
    if flat_x || flat_y {
        return 0.0;
    }
    let lum_den = mx * mx + my * my;
    let luminance = if lum_den == 0.0 { 1.0 } else { 2.0 * mx * my / lum_den };
    4.0 * cxy / (vx + vy) * luminance / 2.0
}

/// UIQI on non-overlapping `block × block` tiles, averaged over tiles and
/// then over bands. Partial tiles at the right and bottom edges are ignored.
pub fn q_avg(fused: &Tensor, gt: &Tensor, block: usize) -> Result<f64> {
    same_shape("q_avg", fused, gt)?;
    let (h, w) = (gt.height(), gt.width());
    if block == 0 || h < block || w < block {
        return Err(Error::InvalidArgument(format!(
            "q_avg block {block} does not fit a {h}x{w} image"
        )));
    }
    let mut xs = Vec::with_capacity(block * block);
    let mut ys = Vec::with_capacity(block * block);
    let mut band_total = 0.0;
    for b in 0..gt.channels() {
        let (f, g) = (fused.plane(b), gt.plane(b));
        let mut acc = 0.0;
        let mut count = 0usize;
        for by in 0..h / block {
            for bx in 0..w / block {
                xs.clear();
                ys.clear();
                for y in by * block..(by + 1) * block {
                    let row = y * w + bx * block;
                    xs.extend_from_slice(&f[row..row + block]);
                    ys.extend_from_slice(&g[row..row + block]);
                }
                acc += uiqi(&xs, &ys);
                count += 1;
            }
        }
        band_total += acc / count as f64;
    }
    Ok(band_total / gt.channels() as f64)
}

/// `1 − Q_avg(degrade(fused), hs)`, clamped to `[0, 1]`. The block shrinks to
/// fit small low-resolution images.
pub fn d_lambda(fused: &Tensor, hs: &Tensor, mtf: &MtfFilterSpec, block: usize) -> Result<f64> {
    let low = degrade(fused, mtf, &DecimationSpec::centered(mtf.ratio))?;
    same_shape("d_lambda", &low, hs)?;
    let b = block.min(hs.height()).min(hs.width());
    Ok((1.0 - q_avg(&low, hs, b)?).clamp(0.0, 1.0))
}

/// Mean over bands of `|cc(fused_b, pan) − cc(hs_b, degrade(pan))|`, clamped
/// to `[0, 1]`.
pub fn d_s(fused: &Tensor, pan: &Tensor, hs: &Tensor, mtf: &MtfFilterSpec) -> Result<f64> {
    if pan.channels() != 1 {
        return Err(Error::shape("d_s pan", "1 channel", pan.channels()));
    }
    if fused.height() != pan.height() || fused.width() != pan.width() {
        return Err(Error::shape(
            "d_s",
            format!("fused {}x{}", pan.height(), pan.width()),
            format!("fused {}x{}", fused.height(), fused.width()),
        ));
    }
    let (lo, hi) = pan.min_max();
    if hi - lo == 0.0 {
        return Err(Error::InvalidArgument("d_s: PAN image is flat".into()));
    }
    let pan_low = degrade(pan, mtf, &DecimationSpec::centered(mtf.ratio))?;
    if pan_low.height() != hs.height() || pan_low.width() != hs.width() {
        return Err(Error::shape(
            "d_s",
            format!("HS {}x{}", pan_low.height(), pan_low.width()),
            format!("HS {}x{}", hs.height(), hs.width()),
        ));
    }
    if fused.channels() != hs.channels() {
        return Err(Error::shape("d_s bands", hs.channels(), fused.channels()));
    }
    let mut acc = 0.0;
    for b in 0..hs.channels() {
        let hr = correlation(fused.plane(b), pan.data());
        let lr = correlation(hs.plane(b), pan_low.data());
        acc += (hr - lr).abs();
    }
    Ok((acc / hs.channels() as f64).min(1.0))
}

pub fn q_star(d_lambda: f64, d_s: f64) -> f64 {
    (1.0 - d_lambda) * (1.0 - d_s)
}

/// Every band interpolated to PAN resolution; the result has ratio 1.
pub fn exp_baseline(hs: &DataCube) -> Result<DataCube> {
    let up = interpolate_band(hs.bands(), hs.ratio())?;
    hs.with_bands(up)?.with_ratio(1)
}

/// Global correlation between every pair of bands, diagonal 1; flat bands
/// correlate 0 with everything else.
pub fn band_correlation_matrix(cube: &Tensor) -> Result<Vec<Vec<f64>>> {
    let nb = cube.channels();
    if nb < 2 {
        return Err(Error::InvalidArgument(
            "band correlation needs at least two bands".into(),
        ));
    }
    let mut m = vec![vec![0.0; nb]; nb];
    for i in 0..nb {
        m[i][i] = 1.0;
        for j in i + 1..nb {
            let c = correlation(cube.plane(i), cube.plane(j));
            m[i][j] = c;
            m[j][i] = c;
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedMetrics {
    pub sam_deg: f64,
    pub ergas: f64,
    pub psnr_db: f64,
    pub q_avg: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FullMetrics {
    pub d_lambda: f64,
    pub d_s: f64,
    pub q_star: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum MetricsReport {
    Reduced(ReducedMetrics),
    Full(FullMetrics),
}

impl MetricsReport {
    /// `key=value` lines with fixed key names.
    pub fn to_key_value(&self) -> String {
        let mut s = String::new();
        match self {
            MetricsReport::Reduced(m) => {
                let _ = writeln!(s, "mode=reduced");
                let _ = writeln!(s, "sam_deg={}", m.sam_deg);
                let _ = writeln!(s, "ergas={}", m.ergas);
                let _ = writeln!(s, "psnr_db={}", m.psnr_db);
                let _ = writeln!(s, "q_avg={}", m.q_avg);
                let _ = writeln!(s, "q_avg_definition={Q_AVG_LABEL}");
            }
            MetricsReport::Full(m) => {
                let _ = writeln!(s, "mode=full");
                let _ = writeln!(s, "d_lambda={}", m.d_lambda);
                let _ = writeln!(s, "d_s={}", m.d_s);
                let _ = writeln!(s, "q_star={}", m.q_star);
                let _ = writeln!(s, "d_lambda_definition=1 - q_avg(degraded fused, hs)");
                let _ = writeln!(s, "d_s_definition={D_S_LABEL}");
            }
        }
        s
    }
}

/// Reference-based indexes of a fused cube.
pub fn evaluate_reduced(
    fused: &DataCube,
    gt: &DataCube,
    ratio: usize,
    block: usize,
) -> Result<ReducedMetrics> {
    let (f, g) = (fused.bands(), gt.bands());
    Ok(ReducedMetrics {
        sam_deg: sam(f, g)?.0,
        ergas: ergas(f, g, ratio)?,
        psnr_db: psnr(f, g)?,
        q_avg: q_avg(f, g, block.min(g.height()).min(g.width()))?,
    })
}

/// No-reference indexes of a fused cube against its inputs.
pub fn evaluate_full(
    fused: &DataCube,
    pan: &PanImage,
    hs: &DataCube,
    mtf: &MtfFilterSpec,
    block: usize,
) -> Result<FullMetrics> {
    let dl = d_lambda(fused.bands(), hs.bands(), mtf, block)?;
    let ds = d_s(fused.bands(), pan.image(), hs.bands(), mtf)?;
    Ok(FullMetrics {
        d_lambda: dl,
        d_s: ds,
        q_star: q_star(dl, ds),
    })
}
