//! Synthetic scenes with known ground truth, and reduced-resolution test
//! pairs derived from them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DataCube, PanImage};
use crate::error::{Error, Result};
use crate::imaging::{degrade, DecimationSpec, MtfFilterSpec};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    /// Band centers in nm, strictly increasing.
    pub wavelengths: Vec<f64>,
    pub endmembers: usize,
    /// Correlation length of the abundance fields, in pixels.
    pub smoothness: f64,
    /// Sharp-edged discs and rectangles per abundance map.
    pub shapes: usize,
    /// Standard deviation of additive Gaussian noise.
    pub noise: f64,
    /// Amplitude of PAN-only fine texture.
    pub pan_detail: f64,
    pub pan_band: (f64, f64),
    pub ratio: usize,
    pub seed: u64,
}

/// Sixteen bands: eight 10 nm steps inside the default PAN range, one
/// 90 nm jump out of it, then seven more 10 nm steps.
pub fn default_wavelengths() -> Vec<f64> {
    let mut wl: Vec<f64> = (0..8).map(|i| 560.0 + 10.0 * i as f64).collect();
    wl.extend((0..8).map(|i| 720.0 + 10.0 * i as f64));
    wl
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            height: 384,
            width: 384,
            wavelengths: default_wavelengths(),
            endmembers: 5,
            smoothness: 12.0,
            shapes: 10,
            noise: 0.002,
            pan_detail: 0.0,
            pan_band: (400.0, 700.0),
            ratio: 6,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            return Err(Error::Config(format!("ratio must be >= 2, got {}", self.ratio)));
        }
        if self.height == 0
            || self.width == 0
            || self.height % self.ratio != 0
            || self.width % self.ratio != 0
        {
            return Err(Error::Config(format!(
                "scene {}x{} must be a positive multiple of the ratio {}",
                self.height, self.width, self.ratio
            )));
        }
        if self.wavelengths.is_empty() || self.wavelengths.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::Config(
                "wavelength grid must be non-empty and strictly increasing".into(),
            ));
        }
        if self.endmembers == 0 {
            return Err(Error::Config("need at least one endmember".into()));
        }
        if !(self.smoothness > 0.0) || !(self.noise >= 0.0) || !(self.pan_detail >= 0.0) {
            return Err(Error::Config(
                "smoothness must be positive; noise and PAN detail non-negative".into(),
            ));
        }
        let (lo, hi) = self.pan_band;
        if !self.wavelengths.iter().any(|w| (lo..=hi).contains(w)) {
            return Err(Error::Config(format!(
                "no band falls inside the PAN range [{lo}, {hi}] nm"
            )));
        }
        Ok(())
    }
}

/// Separable Gaussian blur with replicate edges.
fn blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let hw = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-hw..=hw)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = taps.iter().sum();
    let at = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(j, t)| t * img[y * w + at(x as isize + j as isize - hw, w)])
                .sum::<f64>()
                / norm;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for (j, t) in taps.iter().enumerate() {
            let sy = at(y as isize + j as isize - hw, h);
            for x in 0..w {
                out[y * w + x] += t * tmp[sy * w + x] / norm;
            }
        }
    }
    out
}

fn rescale_unit(v: &mut [f64]) {
    let (lo, hi) = v
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let span = hi - lo;
    for x in v.iter_mut() {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.5 };
    }
}

/// Smooth random field in `[0, 1]` overlaid with sharp geometric shapes.
fn abundance_map(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (h, w) = (spec.height, spec.width);
    let white: Vec<f64> = (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut field = blur(&white, h, w, spec.smoothness);
    rescale_unit(&mut field);
    // cubing leaves each material dominant only in part of the scene
    for v in field.iter_mut() {
        *v = v.powi(3);
    }
    let scale = h.min(w) as f64;
    for _ in 0..spec.shapes {
        let value: f64 = rng.gen_range(0.0..1.0);
        let cy = rng.gen_range(0.0..h as f64);
        let cx = rng.gen_range(0.0..w as f64);
        let size = rng.gen_range(0.03..0.12) * scale;
        let disc = rng.gen_bool(0.5);
        let aspect = rng.gen_range(0.5..2.0);
        for y in 0..h {
            for x in 0..w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let inside = if disc {
                    dy * dy + dx * dx <= size * size
                } else {
                    dy.abs() <= size && dx.abs() <= size * aspect
                };
                if inside {
                    field[y * w + x] = value;
                }
            }
        }
    }
    field
}

/// Smooth reflectance-like spectrum in `[0.02, 1]`: a few Gaussian bumps on a
/// base level plus a logistic step near the red edge.
fn endmember_spectrum(wavelengths: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let lo = wavelengths[0] - 100.0;
    let hi = wavelengths[wavelengths.len() - 1] + 100.0;
    let bumps: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(lo..hi),
                rng.gen_range(40.0..200.0),
                rng.gen_range(-0.4..0.4),
            )
        })
        .collect();
    let base: f64 = rng.gen_range(0.1..0.6);
    let edge: f64 = rng.gen_range(680.0..740.0);
    let edge_width: f64 = rng.gen_range(8.0..20.0);
    let edge_height: f64 = rng.gen_range(-0.3..0.5);
    wavelengths
        .iter()
        .map(|&l| {
            let bump: f64 = bumps
                .iter()
                .map(|&(c, s, a)| a * (-(l - c) * (l - c) / (2.0 * s * s)).exp())
                .sum();
            let step = edge_height / (1.0 + (-(l - edge) / edge_width).exp());
            (base + bump + step).clamp(0.02, 1.0)
        })
        .collect()
}

/// Ground-truth cube and PAN at the same (PAN) resolution. The cube carries
/// ratio 1.
pub fn generate_scene(spec: &SceneSpec) -> Result<(DataCube, PanImage)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (h, w) = (spec.height, spec.width);
    let nb = spec.wavelengths.len();
    let k = spec.endmembers;
    let maps: Vec<Vec<f64>> = (0..k).map(|_| abundance_map(spec, &mut rng)).collect();
    let spectra: Vec<Vec<f64>> = (0..k)
        .map(|_| endmember_spectrum(&spec.wavelengths, &mut rng))
        .collect();

    let plane = h * w;
    let mut bands = vec![0.0; nb * plane];
    for b in 0..nb {
        let dst = &mut bands[b * plane..(b + 1) * plane];
        for (map, e) in maps.iter().zip(&spectra) {
            let c = e[b] / k as f64;
            for (d, a) in dst.iter_mut().zip(map) {
                *d += c * a;
            }
        }
    }

    let (lo, hi) = spec.pan_band;
    let inside: Vec<usize> = (0..nb)
        .filter(|&b| (lo..=hi).contains(&spec.wavelengths[b]))
        .collect();
    let mut pan = vec![0.0; plane];
    for &b in &inside {
        for (p, v) in pan.iter_mut().zip(&bands[b * plane..(b + 1) * plane]) {
            *p += v / inside.len() as f64;
        }
    }
    if spec.pan_detail > 0.0 {
        let white: Vec<f64> = (0..plane).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let texture = blur(&white, h, w, 1.0);
        for (p, t) in pan.iter_mut().zip(texture) {
            *p = (*p + spec.pan_detail * t).clamp(0.0, 1.0);
        }
    }

    if spec.noise > 0.0 {
        let normal = Normal::new(0.0, spec.noise).expect("positive finite std");
        for v in bands.iter_mut().chain(pan.iter_mut()) {
            *v = (*v + normal.sample(&mut rng)).max(0.0);
        }
    }

    let cube = DataCube::new(
        Tensor::from_vec(Shape::new(nb, h, w), bands)?,
        spec.wavelengths.clone(),
        1,
    )?;
    let pan = PanImage::new(Tensor::from_vec(Shape::new(1, h, w), pan)?)?;
    Ok((cube, pan))
}

/// Reduced-resolution triple: degraded cube, the PAN it pairs with, and the
/// cube to compare against.
#[derive(Clone, Debug)]
pub struct WaldTriple {
    pub hs_lr: DataCube,
    pub pan: PanImage,
    pub gt: DataCube,
}

/// The scene's cube plays the reference; every band is low-passed and
/// decimated to form the input, and the PAN is used at the reference scale.
pub fn wald_degrade(
    gt: &DataCube,
    pan: &PanImage,
    mtf: &MtfFilterSpec,
    dec: &DecimationSpec,
) -> Result<WaldTriple> {
    if pan.height() != gt.height() || pan.width() != gt.width() {
        return Err(Error::shape(
            "wald_degrade",
            format!("PAN {}x{}", gt.height(), gt.width()),
            format!("PAN {}x{}", pan.height(), pan.width()),
        ));
    }
    if gt.height() % dec.step != 0 || gt.width() % dec.step != 0 {
        return Err(Error::InvalidArgument(format!(
            "scene {}x{} not divisible by {}",
            gt.height(),
            gt.width(),
            dec.step
        )));
    }
    let low = degrade(gt.bands(), mtf, dec)?;
    let hs_lr = DataCube::new(low, gt.wavelengths().to_vec(), dec.step)?.with_scale(gt.scale())?;
    Ok(WaldTriple {
        hs_lr,
        pan: pan.clone(),
        gt: gt.clone(),
    })
}
