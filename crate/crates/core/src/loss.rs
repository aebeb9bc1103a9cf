//! Unsupervised per-band objective: spectral consistency at low resolution
//! plus a weighted spatial term that pulls the local correlation between the
//! PAN and the fused band towards an upper-bound map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{
    box_sum_adjoint, degrade, degrade_adjoint, interpolate_band, local_cc, mtf_lowpass,
    window_moments, DecimationSpec, MtfFilterSpec, FLAT_VARIANCE,
};
use crate::tensor::Tensor;

/// How the per-pixel correlation bound is obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RhoMaxMode {
    /// Bound of 1 everywhere.
    Constant,
    /// Correlation of the low-passed PAN with the interpolated band over
    /// windows six times wider than the loss window.
    #[default]
    Estimated,
}

impl std::str::FromStr for RhoMaxMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "const" | "constant" => Ok(RhoMaxMode::Constant),
            "estimated" => Ok(RhoMaxMode::Estimated),
            _ => Err(Error::Config(format!(
                "unknown rho-max mode {s:?} (expected const or estimated)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Spatial weight for bands inside the PAN bandwidth.
    pub beta_overlap: f64,
    pub beta_non_overlap: f64,
    /// Side of the correlation window, in PAN pixels.
    pub window: usize,
    pub rho_max_mode: RhoMaxMode,
    /// PAN spectral support in nm, inclusive.
    pub pan_band: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            beta_overlap: 0.5,
            beta_non_overlap: 0.25,
            window: 6,
            rho_max_mode: RhoMaxMode::Estimated,
            pan_band: (400.0, 700.0),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta_non_overlap > 0.0 && self.beta_non_overlap <= self.beta_overlap) {
            return Err(Error::Config(format!(
                "need 0 < beta_non_overlap <= beta_overlap, got {} and {}",
                self.beta_non_overlap, self.beta_overlap
            )));
        }
        if !self.beta_overlap.is_finite() {
            return Err(Error::Config("beta_overlap must be finite".into()));
        }
        if self.window < 2 {
            return Err(Error::Config(format!(
                "correlation window must be >= 2, got {}",
                self.window
            )));
        }
        let (lo, hi) = self.pan_band;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!(
                "PAN band [{lo}, {hi}] is not a valid interval"
            )));
        }
        Ok(())
    }

    pub fn beta_for(&self, wavelength_nm: f64) -> f64 {
        let (lo, hi) = self.pan_band;
        if (lo..=hi).contains(&wavelength_nm) {
            self.beta_overlap
        } else {
            self.beta_non_overlap
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iteration: usize,
    pub spectral: f64,
    pub spatial: f64,
    pub total: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn new(iteration: usize, spectral: f64, spatial: f64, beta: f64) -> Self {
        LossReport {
            iteration,
            spectral,
            spatial,
            total: spectral + beta * spatial,
            beta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.spectral.is_finite() && self.spatial.is_finite() && self.total.is_finite()
    }
}

fn single_channel(op: &'static str, t: &Tensor) -> Result<()> {
    if t.channels() != 1 {
        return Err(Error::shape(op, "1 channel", t.channels()));
    }
    Ok(())
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference between `degrade(fused)` and `band_lr`, and its
/// gradient with respect to `fused`.
pub fn spectral_loss(
    fused: &Tensor,
    band_lr: &Tensor,
    spec: &MtfFilterSpec,
    dec: &DecimationSpec,
) -> Result<(f64, Tensor)> {
    single_channel("spectral_loss fused", fused)?;
    let low = degrade(fused, spec, dec)?;
    band_lr.ensure_shape("spectral_loss band", low.shape())?;
    let n = low.len() as f64;
    let diff = low.sub(band_lr)?;
    let value = diff.data().iter().map(|d| d.abs()).sum::<f64>() / n;
    let g = diff.map(|d| sign(d) / n);
    let grad = degrade_adjoint(&g, spec, dec, fused.height(), fused.width())?;
    Ok((value, grad))
}

/// Per-pixel upper bound for the spatial term, in `[0, 1]`.
pub fn rho_max_map(
    pan: &Tensor,
    band_lr: &Tensor,
    cfg: &LossConfig,
    spec: &MtfFilterSpec,
) -> Result<Tensor> {
    single_channel("rho_max_map pan", pan)?;
    single_channel("rho_max_map band", band_lr)?;
    let r = spec.ratio;
    if band_lr.height() * r != pan.height() || band_lr.width() * r != pan.width() {
        return Err(Error::shape(
            "rho_max_map",
            format!("PAN {r}x the band size"),
            format!("PAN {} vs band {}", pan.shape(), band_lr.shape()),
        ));
    }
    match cfg.rho_max_mode {
        RhoMaxMode::Constant => Ok(Tensor::filled(pan.shape(), 1.0)),
        RhoMaxMode::Estimated => {
            let low_pan = mtf_lowpass(pan, spec)?;
            let up = interpolate_band(band_lr, r)?;
            Ok(local_cc(&low_pan, &up, 6 * cfg.window)?.map(|v| v.clamp(0.0, 1.0)))
        }
    }
}

/// Mean of `|ρ_max − cc(pan, fused)|` over `window`-sized neighborhoods, and
/// its gradient with respect to `fused`.
pub fn spatial_loss(
    fused: &Tensor,
    pan: &Tensor,
    rho_max: &Tensor,
    window: usize,
) -> Result<(f64, Tensor)> {
    single_channel("spatial_loss fused", fused)?;
    pan.ensure_shape("spatial_loss pan", fused.shape())?;
    rho_max.ensure_shape("spatial_loss rho_max", fused.shape())?;
    if window < 2 {
        return Err(Error::InvalidArgument(format!(
            "correlation window must be >= 2, got {window}"
        )));
    }
    let (h, w) = (fused.height(), fused.width());
    let np = (h * w) as f64;
    let (x, y) = (pan.data(), fused.data());
    let m = window_moments(x, y, h, w, window);

    let mut value = 0.0;
    // upstream gradients w.r.t. the window means E[y], E[y²], E[xy]
    let mut g_ey = vec![0.0; h * w];
    let mut g_eyy = vec![0.0; h * w];
    let mut g_exy = vec![0.0; h * w];
    for i in 0..h * w {
        let (vx, vy) = (m.var_x[i], m.var_y[i]);
        if vx < FLAT_VARIANCE || vy < FLAT_VARIANCE {
            value += rho_max.data()[i].abs();
            continue;
        }
        let s = (vx * vy).sqrt();
        let raw = m.cov[i] / s;
        let rho = raw.clamp(-1.0, 1.0);
        let d = rho_max.data()[i] - rho;
        value += d.abs();
        if raw != rho {
            continue;
        }
        let dl_drho = -sign(d) / np;
        g_ey[i] = dl_drho * (-m.mean_x[i] / s + rho * m.mean_y[i] / vy);
        g_eyy[i] = dl_drho * (-rho / (2.0 * vy));
        g_exy[i] = dl_drho / s;
    }
    let n = (window * window) as f64;
    let a_ey = box_sum_adjoint(&g_ey, h, w, window);
    let a_eyy = box_sum_adjoint(&g_eyy, h, w, window);
    let a_exy = box_sum_adjoint(&g_exy, h, w, window);
    let grad: Vec<f64> = (0..h * w)
        .map(|i| (a_ey[i] + 2.0 * y[i] * a_eyy[i] + x[i] * a_exy[i]) / n)
        .collect();
    Ok((value / np, Tensor::from_vec(fused.shape(), grad)?))
}

/// Everything about one band that stays fixed while its network is tuned.
#[derive(Clone, Debug)]
pub struct BandObjective {
    pub band_lr: Tensor,
    pub pan: Tensor,
    pub rho_max: Tensor,
    pub beta: f64,
    pub window: usize,
    pub mtf: MtfFilterSpec,
    pub decimation: DecimationSpec,
}

impl BandObjective {
    pub fn new(
        band_lr: &Tensor,
        pan: &Tensor,
        wavelength_nm: f64,
        cfg: &LossConfig,
        mtf: &MtfFilterSpec,
    ) -> Result<Self> {
        cfg.validate()?;
        let rho_max = rho_max_map(pan, band_lr, cfg, mtf)?;
        Ok(BandObjective {
            band_lr: band_lr.clone(),
            pan: pan.clone(),
            rho_max,
            beta: cfg.beta_for(wavelength_nm),
            window: cfg.window,
            mtf: *mtf,
            decimation: DecimationSpec::centered(mtf.ratio),
        })
    }

    /// Loss terms for `fused` and the gradient of the total.
    pub fn evaluate(&self, fused: &Tensor, iteration: usize) -> Result<(LossReport, Tensor)> {
        let (spec_v, mut grad) = spectral_loss(fused, &self.band_lr, &self.mtf, &self.decimation)?;
        let (spat_v, spat_g) = spatial_loss(fused, &self.pan, &self.rho_max, self.window)?;
        grad.axpy(self.beta, &spat_g)?;
        Ok((LossReport::new(iteration, spec_v, spat_v, self.beta), grad))
    }
}

/// One-shot evaluation of the band objective; builds the bound map each call.
pub fn combined_loss(
    fused: &Tensor,
    band_lr: &Tensor,
    pan: &Tensor,
    wavelength_nm: f64,
    cfg: &LossConfig,
    mtf: &MtfFilterSpec,
) -> Result<(LossReport, Tensor)> {
    BandObjective::new(band_lr, pan, wavelength_nm, cfg, mtf)?.evaluate(fused, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn textured(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phase: f64 = rng.gen_range(0.0..6.0);
        Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
            let (y, x) = (y as f64, x as f64);
            (0.31 * x + phase).sin() + (0.23 * y).cos() + 0.4 * (0.11 * (x + 2.0 * y)).sin()
                + 0.3 * rng.gen_range(-1.0..1.0)
        })
    }

    fn noise(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn beta_policy() {
        let cfg = LossConfig::default();
        assert_eq!(cfg.beta_for(550.0), 0.5);
        assert_eq!(cfg.beta_for(1600.0), 0.25);
        assert_eq!(cfg.beta_for(400.0), 0.5);
        assert_eq!(cfg.beta_for(700.0), 0.5);
    }

    #[test]
    fn report_arithmetic() {
        let r = LossReport::new(0, 0.004, 0.2, 0.5);
        assert!((r.total - 0.104).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = LossConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.beta_non_overlap = 0.6;
        assert!(cfg.validate().is_err());
        cfg.beta_non_overlap = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rho_mode_parsing() {
        assert_eq!("const".parse::<RhoMaxMode>().unwrap(), RhoMaxMode::Constant);
        assert_eq!(
            "estimated".parse::<RhoMaxMode>().unwrap(),
            RhoMaxMode::Estimated
        );
        assert!("maybe".parse::<RhoMaxMode>().is_err());
    }

    #[test]
    fn spectral_zero_on_constant_and_shift() {
        let spec = MtfFilterSpec::default();
        let dec = DecimationSpec::centered(6);
        let band = Tensor::filled(Shape::new(1, 6, 6), 0.7);
        let up = interpolate_band(&band, 6).unwrap();
        let (v, _) = spectral_loss(&up, &band, &spec, &dec).unwrap();
        assert!(v.abs() < 1e-12);
        let (v, _) = spectral_loss(&up.map(|x| x + 0.01), &band, &spec, &dec).unwrap();
        assert!((v - 0.01).abs() < 1e-9);
    }

    #[test]
    fn spectral_shape_mismatch() {
        let spec = MtfFilterSpec::default();
        let dec = DecimationSpec::centered(6);
        let fused = Tensor::zeros(Shape::new(1, 36, 36));
        let band = Tensor::zeros(Shape::new(1, 5, 6));
        assert!(spectral_loss(&fused, &band, &spec, &dec).is_err());
    }

    #[test]
    fn spectral_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let spec = MtfFilterSpec::default();
        let dec = DecimationSpec::centered(6);
        let fused = noise(Shape::new(1, 24, 24), &mut rng);
        let band = noise(Shape::new(1, 4, 4), &mut rng);
        let (_, g) = spectral_loss(&fused, &band, &spec, &dec).unwrap();
        let h = 1e-6;
        for i in 0..fused.len() {
            let (mut p, mut m) = (fused.clone(), fused.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (spectral_loss(&p, &band, &spec, &dec).unwrap().0
                - spectral_loss(&m, &band, &spec, &dec).unwrap().0)
                / (2.0 * h);
            let a = g.data()[i];
            assert!(
                (fd - a).abs() <= 1e-5 * fd.abs().max(a.abs()).max(1e-8),
                "{i}: {fd} vs {a}"
            );
        }
    }

    #[test]
    fn spectral_depends_only_on_degraded_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let spec = MtfFilterSpec::default();
        let dec = DecimationSpec::centered(6);
        let fused = noise(Shape::new(1, 24, 24), &mut rng);
        let band = noise(Shape::new(1, 4, 4), &mut rng);
        // move along a direction orthogonal to the row space of degrade:
        // v − Dᵀ(DDᵀ)⁻¹Dv, approximated by projecting out a few times
        let mut v = noise(Shape::new(1, 24, 24), &mut rng);
        for _ in 0..200 {
            let dv = degrade(&v, &spec, &dec).unwrap();
            let back = degrade_adjoint(&dv, &spec, &dec, 24, 24).unwrap();
            v.axpy(-1.0 / back.data().iter().map(|x| x.abs()).fold(1.0, f64::max), &back)
                .unwrap();
        }
        let dv = degrade(&v, &spec, &dec).unwrap();
        let resid = dv.data().iter().map(|x| x.abs()).fold(0.0, f64::max);
        let mut moved = fused.clone();
        moved.axpy(1.0, &v).unwrap();
        let a = spectral_loss(&fused, &band, &spec, &dec).unwrap().0;
        let b = spectral_loss(&moved, &band, &spec, &dec).unwrap().0;
        assert!((a - b).abs() <= resid + 1e-12, "{a} {b} residual {resid}");
    }

    #[test]
    fn rho_max_constant_mode() {
        let cfg = LossConfig {
            rho_max_mode: RhoMaxMode::Constant,
            ..Default::default()
        };
        let pan = textured(36, 36, 1);
        let band = Tensor::zeros(Shape::new(1, 6, 6));
        let m = rho_max_map(&pan, &band, &cfg, &MtfFilterSpec::default()).unwrap();
        assert!(m.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn rho_max_self_correlation() {
        let spec = MtfFilterSpec::default();
        let pan = Tensor::from_fn(Shape::new(1, 120, 120), |_, y, x| {
            ((x as f64) * 0.05).sin() + ((y as f64) * 0.04).cos()
        });
        let band = degrade(&pan, &spec, &DecimationSpec::centered(6)).unwrap();
        let m = rho_max_map(&pan, &band, &LossConfig::default(), &spec).unwrap();
        let low = mtf_lowpass(&pan, &spec).unwrap();
        let mm = window_moments(low.data(), low.data(), 120, 120, 36);
        let mut checked = 0;
        for (i, &v) in m.data().iter().enumerate() {
            if mm.var_x[i] > 1e-6 {
                assert!(v >= 0.99, "pixel {i}: {v}");
                checked += 1;
            }
        }
        assert!(checked > 1000);
    }

    #[test]
    fn rho_max_independent_noise_is_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let spec = MtfFilterSpec::default();
        let pan = noise(Shape::new(1, 144, 144), &mut rng);
        let band = noise(Shape::new(1, 24, 24), &mut rng);
        let m = rho_max_map(&pan, &band, &LossConfig::default(), &spec).unwrap();
        assert!(m.mean() < 0.3, "mean {}", m.mean());
        assert!(m.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn spatial_perfect_and_anti_correlation() {
        let pan = textured(30, 30, 2);
        let ones = Tensor::filled(pan.shape(), 1.0);
        let (v, _) = spatial_loss(&pan, &pan, &ones, 6).unwrap();
        assert!(v < 1e-6, "{v}");
        let (v, _) = spatial_loss(&pan.scale(-1.0), &pan, &ones, 6).unwrap();
        assert!(v < 2.0 + 1e-6 && v > 2.0 - 1e-3, "{v}");
    }

    #[test]
    fn spatial_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pan = noise(Shape::new(1, 16, 16), &mut rng);
        let fused = noise(Shape::new(1, 16, 16), &mut rng);
        let rho = Tensor::from_fn(pan.shape(), |_, _, _| rng.gen_range(0.0..1.0));
        let (_, g) = spatial_loss(&fused, &pan, &rho, 6).unwrap();
        // the window moments cancel heavily; below this step roundoff dominates
        let h = 1e-5;
        for i in 0..fused.len() {
            let (mut p, mut m) = (fused.clone(), fused.clone());
            p.data_mut()[i] += h;
            m.data_mut()[i] -= h;
            let fd = (spatial_loss(&p, &pan, &rho, 6).unwrap().0
                - spatial_loss(&m, &pan, &rho, 6).unwrap().0)
                / (2.0 * h);
            let a = g.data()[i];
            assert!(
                (fd - a).abs() <= 1e-5 * fd.abs().max(a.abs()).max(1e-8),
                "{i}: {fd} vs {a}"
            );
        }
    }

    #[test]
    fn spatial_affine_invariance_in_pan() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pan = textured(24, 24, 3);
        let fused = noise(pan.shape(), &mut rng);
        let rho = Tensor::filled(pan.shape(), 0.8);
        let a = spatial_loss(&fused, &pan, &rho, 6).unwrap().0;
        let b = spatial_loss(&fused, &pan.map(|v| 3.5 * v + 2.0), &rho, 6)
            .unwrap()
            .0;
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn flat_fused_contributes_no_gradient() {
        let pan = textured(18, 18, 4);
        let flat = Tensor::filled(pan.shape(), 0.3);
        let rho = Tensor::filled(pan.shape(), 0.9);
        let (v, g) = spatial_loss(&flat, &pan, &rho, 6).unwrap();
        assert!((v - 0.9).abs() < 1e-12);
        assert!(g.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn combined_is_sum_of_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let spec = MtfFilterSpec::default();
        let pan = textured(36, 36, 5);
        let band = noise(Shape::new(1, 6, 6), &mut rng);
        let fused = noise(pan.shape(), &mut rng);
        let cfg = LossConfig::default();
        for lambda in [550.0, 1600.0] {
            let (rep, g) = combined_loss(&fused, &band, &pan, lambda, &cfg, &spec).unwrap();
            let rho = rho_max_map(&pan, &band, &cfg, &spec).unwrap();
            let (sv, sg) =
                spectral_loss(&fused, &band, &spec, &DecimationSpec::centered(6)).unwrap();
            let (pv, pg) = spatial_loss(&fused, &pan, &rho, 6).unwrap();
            let beta = cfg.beta_for(lambda);
            assert_eq!(rep.beta, beta);
            assert!((rep.total - (sv + beta * pv)).abs() < 1e-12);
            assert!(rep.spectral >= 0.0 && rep.spatial >= 0.0 && rep.spatial <= 2.0);
            for i in 0..g.len() {
                let want = sg.data()[i] + beta * pg.data()[i];
                assert!((g.data()[i] - want).abs() < 1e-12);
            }
        }
    }
}
