//! Band-by-band tuning with the network handed from one band to the next,
//! the per-band iteration schedule, and patch-based pretraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::data::{check_pairing, DataCube, PanImage};
use crate::error::{Error, Result};
use crate::imaging::{interpolate_band, MtfFilterSpec};
use crate::loss::{BandObjective, LossConfig, LossReport};
use crate::network::{backward, forward, forward_with_cache, NetParams};
use crate::tensor::{Shape, Tensor};

/// Order in which bands are visited.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Ascending wavelength.
    #[default]
    Forward,
    Backward,
}

impl std::str::FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Direction::Forward),
            "backward" => Ok(Direction::Backward),
            _ => Err(Error::Config(format!(
                "unknown direction {s:?} (expected forward or backward)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningConfig {
    /// Iterations per nm of wavelength gap.
    pub alpha: f64,
    pub first_band_iterations: usize,
    pub max_iterations: usize,
    pub learning_rate: f64,
    pub direction: Direction,
    /// Restart every band from the initial parameters instead of the
    /// previous band's. Only useful as a comparison baseline.
    pub reset_each_band: bool,
    /// Hand the Adam moment estimates on to the next band together with the
    /// weights. By default every band starts with fresh moments.
    #[serde(default)]
    pub carry_optimizer_state: bool,
    pub loss: LossConfig,
    pub mtf: MtfFilterSpec,
}

impl Default for TuningConfig {
    fn default() -> Self {
        TuningConfig {
            alpha: 1.5,
            first_band_iterations: 20,
            max_iterations: 80,
            learning_rate: 1e-5,
            direction: Direction::Forward,
            reset_each_band: false,
            carry_optimizer_state: false,
            loss: LossConfig::default(),
            mtf: MtfFilterSpec::default(),
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.first_band_iterations == 0 || self.max_iterations == 0 {
            return Err(Error::Config("iteration counts must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be non-negative, got {}",
                self.learning_rate
            )));
        }
        self.loss.validate()?;
        self.mtf.validate()
    }
}

/// Record of one band's tuning run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandTrace {
    /// Index of the band in ascending-wavelength order.
    pub band: usize,
    pub wavelength: f64,
    pub iterations: usize,
    /// Loss before each update.
    pub reports: Vec<LossReport>,
    /// Loss of the returned prediction.
    pub final_report: LossReport,
    pub aborted: bool,
}

#[derive(Serialize)]
struct TraceRecord {
    band: usize,
    wavelength: f64,
    iter: usize,
    l_spectral: f64,
    l_spatial: f64,
    l_total: f64,
    beta: f64,
}

impl BandTrace {
    /// One JSON object per iteration, newline-terminated.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.reports {
            let rec = TraceRecord {
                band: self.band,
                wavelength: self.wavelength,
                iter: r.iteration,
                l_spectral: r.spectral,
                l_spatial: r.spatial,
                l_total: r.total,
                beta: r.beta,
            };
            out.push_str(&serde_json::to_string(&rec).expect("plain struct"));
            out.push('\n');
        }
        out
    }
}

/// Iteration budget for the `b`-th band visited (1-based), given the gap to
/// the previously visited band.
pub fn schedule_iterations(
    b: usize,
    wavelength: f64,
    previous_wavelength: f64,
    cfg: &TuningConfig,
) -> Result<usize> {
    if b == 0 {
        return Err(Error::InvalidArgument("band positions are 1-based".into()));
    }
    if b == 1 {
        return Ok(cfg.first_band_iterations);
    }
    let gap = wavelength - previous_wavelength;
    if !(gap > 0.0 && gap.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "wavelength gap must be positive, got {gap} nm ({previous_wavelength} -> {wavelength})"
        )));
    }
    let n = (cfg.alpha * gap).min(cfg.max_iterations as f64).round();
    Ok((n as usize).max(1))
}

/// Runs exactly `iterations` full-image Adam steps on one band.
///
/// On a non-finite loss or gradient the band stops early and the last state
/// with a finite loss is returned, with `trace.aborted` set.
pub fn tune_band(
    band_lr: &Tensor,
    pan: &Tensor,
    band_index: usize,
    wavelength: f64,
    params_in: &NetParams,
    iterations: usize,
    cfg: &TuningConfig,
) -> Result<(NetParams, Tensor, BandTrace)> {
    let (params, fused, trace, _) =
        tune_band_from(band_lr, pan, band_index, wavelength, params_in, None, iterations, cfg)?;
    Ok((params, fused, trace))
}

/// [`tune_band`] continuing from an existing optimizer state (fresh when
/// `None`); also returns the state after the last update.
#[allow(clippy::too_many_arguments)]
pub fn tune_band_from(
    band_lr: &Tensor,
    pan: &Tensor,
    band_index: usize,
    wavelength: f64,
    params_in: &NetParams,
    optimizer: Option<AdamState>,
    iterations: usize,
    cfg: &TuningConfig,
) -> Result<(NetParams, Tensor, BandTrace, AdamState)> {
    if iterations == 0 {
        return Err(Error::InvalidArgument("a band needs at least one iteration".into()));
    }
    cfg.validate()?;
    let objective = BandObjective::new(band_lr, pan, wavelength, &cfg.loss, &cfg.mtf)?;
    let interp = interpolate_band(band_lr, cfg.mtf.ratio)?;
    let mut params = params_in.clone();
    let mut flat = params.to_flat();
    let mut adam = match optimizer {
        Some(state) if state.len() == flat.len() => state,
        Some(state) => {
            return Err(Error::shape("tune_band optimizer", flat.len(), state.len()));
        }
        None => AdamState::new(flat.len(), cfg.learning_rate),
    };
    let mut reports = Vec::with_capacity(iterations);
    let mut last_good: Option<(NetParams, Tensor, LossReport)> = None;
    let mut aborted = false;

    for it in 0..iterations {
        let (fused, cache) = forward_with_cache(pan, &interp, &params)?;
        let (report, grad) = objective.evaluate(&fused, it)?;
        if !report.is_finite() || !fused.is_finite() {
            log::warn!("band {band_index}: non-finite loss at iteration {it}, band aborted");
            aborted = true;
            break;
        }
        reports.push(report);
        let grads = backward(&params, &cache, &grad, false)?;
        last_good = Some((params.clone(), fused, report));
        match adam.update(&mut flat, &grads.params) {
            Ok(()) => params.set_flat(&flat)?,
            Err(Error::Numeric(msg)) => {
                log::warn!("band {band_index}: {msg} at iteration {it}, band aborted");
                aborted = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    let (params, fused, final_report) = if aborted {
        match last_good {
            Some(state) => state,
            None => {
                let fused = forward(pan, &interp, params_in)?;
                let (report, _) = objective.evaluate(&fused, 0)?;
                (params_in.clone(), fused, report)
            }
        }
    } else {
        let fused = forward(pan, &interp, &params)?;
        let (report, _) = objective.evaluate(&fused, iterations)?;
        if report.is_finite() && fused.is_finite() {
            (params, fused, report)
        } else {
            log::warn!("band {band_index}: final update produced non-finite output, reverted");
            aborted = true;
            last_good.expect("at least one finite iteration ran")
        }
    };
    let trace = BandTrace {
        band: band_index,
        wavelength,
        iterations,
        reports,
        final_report,
        aborted,
    };
    Ok((params, fused, trace, adam))
}

#[derive(Clone, Debug)]
pub struct SharpenResult {
    /// Fused bands at PAN resolution (ratio 1), same wavelengths and scale
    /// as the input.
    pub fused: DataCube,
    /// In visiting order.
    pub traces: Vec<BandTrace>,
    /// Indices of bands whose tuning stopped early.
    pub aborted: Vec<usize>,
    /// Parameters after the last visited band.
    pub params: NetParams,
}

/// Sharpens every band in turn, each starting from the previous band's
/// tuned parameters.
pub fn sharpen_cube(
    cube: &DataCube,
    pan: &PanImage,
    initial: &NetParams,
    cfg: &TuningConfig,
) -> Result<SharpenResult> {
    cfg.validate()?;
    check_pairing(cube, pan)?;
    if cube.ratio() != cfg.mtf.ratio {
        return Err(Error::Config(format!(
            "cube ratio {} differs from the filter ratio {}",
            cube.ratio(),
            cfg.mtf.ratio
        )));
    }
    let nb = cube.band_count();
    let order: Vec<usize> = match cfg.direction {
        Direction::Forward => (0..nb).collect(),
        Direction::Backward => (0..nb).rev().collect(),
    };
    let wl = cube.wavelengths();
    let (h, w) = (pan.height(), pan.width());
    let mut fused_data = vec![0.0; nb * h * w];
    let mut traces = Vec::with_capacity(nb);
    let mut aborted = Vec::new();
    let mut params = initial.clone();
    let mut optimizer: Option<AdamState> = None;

    for (pos, &b) in order.iter().enumerate() {
        // the gap is always measured as a positive distance along the chain
        let n = if pos == 0 {
            schedule_iterations(1, wl[b], wl[b], cfg)?
        } else {
            let prev = wl[order[pos - 1]];
            let (lo, hi) = if prev < wl[b] { (prev, wl[b]) } else { (wl[b], prev) };
            schedule_iterations(pos + 1, hi, lo, cfg)?
        };
        let start = if cfg.reset_each_band { initial } else { &params };
        let carried = if cfg.carry_optimizer_state { optimizer.take() } else { None };
        let (next, fused, trace, state) =
            tune_band_from(&cube.band(b), pan.image(), b, wl[b], start, carried, n, cfg)?;
        optimizer = Some(state);
        log::info!(
            "band {b} ({} nm): {n} iterations, loss {:.5} -> {:.5}",
            wl[b],
            trace.reports.first().map_or(f64::NAN, |r| r.total),
            trace.final_report.total
        );
        if trace.aborted {
            aborted.push(b);
        }
        fused_data[b * h * w..(b + 1) * h * w].copy_from_slice(fused.data());
        traces.push(trace);
        params = next;
    }
    let bands = Tensor::from_vec(Shape::new(nb, h, w), fused_data)?;
    Ok(SharpenResult {
        fused: cube.with_bands(bands)?.with_ratio(1)?,
        traces,
        aborted,
        params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    /// Patches per side of the sampling grid.
    pub grid: usize,
    pub validation_patches: usize,
    /// Patch side in PAN pixels; shrunk if the image is too small.
    pub patch_size: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            grid: 10,
            validation_patches: 10,
            patch_size: 240,
            epochs: 200,
            batch_size: 4,
            learning_rate: 1e-5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PretrainResult {
    /// Parameters with the lowest validation loss seen (epoch 0 included).
    pub params: NetParams,
    pub best_epoch: usize,
    /// Mean validation `L_total` per epoch; entry 0 is before any update.
    pub validation_loss: Vec<f64>,
    /// Mean training `L_total` over each epoch's minibatches.
    pub training_loss: Vec<f64>,
    pub patch_size: usize,
    pub training_patches: usize,
    pub validation_patches: usize,
}

struct Patch {
    objective: BandObjective,
    pan: Tensor,
    interp: Tensor,
}

fn crop(t: &Tensor, y0: usize, x0: usize, size: usize) -> Tensor {
    Tensor::from_fn(Shape::new(1, size, size), |_, y, x| t.at(0, y0 + y, x0 + x))
}

/// Grid of patches over a band/PAN pair; returns the patches and the PAN
/// patch side actually used.
fn extract_patches(
    band_lr: &Tensor,
    pan: &Tensor,
    wavelength: f64,
    cfg: &PretrainConfig,
    tuning: &TuningConfig,
) -> Result<(Vec<Patch>, usize)> {
    let r = tuning.mtf.ratio;
    let g = cfg.grid;
    let (lh, lw) = (band_lr.height(), band_lr.width());
    let mut size_lr = cfg.patch_size / r;
    if g * size_lr > lh.min(lw) {
        let shrunk = lh.min(lw) / g;
        log::warn!(
            "image {}x{} too small for {} patches of {} px; using {} px patches",
            pan.height(),
            pan.width(),
            g * g,
            cfg.patch_size,
            shrunk * r
        );
        size_lr = shrunk;
    }
    if size_lr < 4 {
        return Err(Error::InvalidArgument(format!(
            "pretraining patches would be {} px, need at least {}",
            size_lr * r,
            4 * r
        )));
    }
    let step = |len: usize| if g > 1 { (len - size_lr) / (g - 1) } else { 0 };
    let (sy, sx) = (step(lh), step(lw));
    let mut patches = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let (y, x) = (i * sy, j * sx);
            let b = crop(band_lr, y, x, size_lr);
            let p = crop(pan, y * r, x * r, size_lr * r);
            let objective = BandObjective::new(&b, &p, wavelength, &tuning.loss, &tuning.mtf)?;
            let interp = interpolate_band(&b, r)?;
            patches.push(Patch {
                objective,
                pan: p,
                interp,
            });
        }
    }
    Ok((patches, size_lr * r))
}

fn mean_loss(patches: &[&Patch], params: &NetParams) -> Result<f64> {
    let mut total = 0.0;
    for p in patches {
        let fused = forward(&p.pan, &p.interp, params)?;
        total += p.objective.evaluate(&fused, 0)?.0.total;
    }
    Ok(total / patches.len() as f64)
}

/// Minibatch Adam on a grid of patches from one band/PAN pair, starting from
/// `initial`. The split into training and validation patches is seeded.
pub fn pretrain(
    band_lr: &Tensor,
    pan: &Tensor,
    wavelength: f64,
    initial: &NetParams,
    cfg: &PretrainConfig,
    tuning: &TuningConfig,
) -> Result<PretrainResult> {
    tuning.validate()?;
    if cfg.grid == 0 || cfg.batch_size == 0 {
        return Err(Error::Config("grid and batch size must be positive".into()));
    }
    if cfg.validation_patches == 0 || cfg.validation_patches >= cfg.grid * cfg.grid {
        return Err(Error::Config(format!(
            "validation patches must be between 1 and {}",
            cfg.grid * cfg.grid - 1
        )));
    }
    let (patches, patch_size) = extract_patches(band_lr, pan, wavelength, cfg, tuning)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..patches.len()).collect();
    idx.shuffle(&mut rng);
    let (val_idx, train_idx) = idx.split_at(cfg.validation_patches);
    let val: Vec<&Patch> = val_idx.iter().map(|&i| &patches[i]).collect();
    let mut train: Vec<&Patch> = train_idx.iter().map(|&i| &patches[i]).collect();

    let mut params = initial.clone();
    let mut flat = params.to_flat();
    let mut adam = AdamState::new(flat.len(), cfg.learning_rate);
    let mut best = (mean_loss(&val, &params)?, 0, params.clone());
    let mut validation_loss = vec![best.0];
    let mut training_loss = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        train.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in train.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; flat.len()];
            for p in batch {
                let (fused, cache) = forward_with_cache(&p.pan, &p.interp, &params)?;
                let (report, g) = p.objective.evaluate(&fused, epoch)?;
                epoch_loss += report.total;
                let gp = backward(&params, &cache, &g, false)?;
                for (a, b) in grad.iter_mut().zip(&gp.params) {
                    *a += b / batch.len() as f64;
                }
            }
            match adam.update(&mut flat, &grad) {
                Ok(()) => params.set_flat(&flat)?,
                // skipped step; the next minibatch continues from here
                Err(Error::Numeric(_)) => {}
                Err(e) => return Err(e),
            }
        }
        training_loss.push(epoch_loss / train.len() as f64);
        let v = mean_loss(&val, &params)?;
        validation_loss.push(v);
        log::info!(
            "pretrain epoch {epoch}: train {:.5} validation {v:.5}",
            training_loss[epoch - 1]
        );
        if v < best.0 {
            best = (v, epoch, params.clone());
        }
    }
    Ok(PretrainResult {
        params: best.2,
        best_epoch: best.1,
        validation_loss,
        training_loss,
        patch_size,
        training_patches: train.len(),
        validation_patches: val.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::{degrade, DecimationSpec};

    fn scene(h: usize, w: usize, seed: u64) -> (Tensor, Tensor) {
        let s = seed as f64;
        let pan = Tensor::from_fn(Shape::new(1, h, w), |_, y, x| {
            let (y, x) = (y as f64, x as f64);
            0.5 + 0.2 * (0.21 * x + s).sin() * (0.17 * y).cos()
                + 0.1 * ((0.05 * (x - y) + s).sin() > 0.3) as u8 as f64
        });
        let band = degrade(
            &pan.map(|v| 0.8 * v + 0.05),
            &MtfFilterSpec::default(),
            &DecimationSpec::centered(6),
        )
        .unwrap();
        (band, pan)
    }

    #[test]
    fn schedule_examples() {
        let cfg = TuningConfig::default();
        assert_eq!(schedule_iterations(1, 500.0, 0.0, &cfg).unwrap(), 20);
        assert_eq!(schedule_iterations(2, 510.0, 500.0, &cfg).unwrap(), 15);
        assert_eq!(schedule_iterations(2, 700.0, 500.0, &cfg).unwrap(), 80);
        assert_eq!(schedule_iterations(2, 500.2, 500.0, &cfg).unwrap(), 1);
        assert!(schedule_iterations(2, 500.0, 500.0, &cfg).is_err());
        assert!(schedule_iterations(3, 490.0, 500.0, &cfg).is_err());
    }

    #[test]
    fn direction_parsing() {
        assert_eq!("backward".parse::<Direction>().unwrap(), Direction::Backward);
        assert!("sideways".parse::<Direction>().is_err());
    }

    #[test]
    fn zero_iterations_rejected() {
        let (band, pan) = scene(36, 36, 0);
        let p = NetParams::init(0);
        let cfg = TuningConfig::default();
        assert!(tune_band(&band, &pan, 0, 500.0, &p, 0, &cfg).is_err());
    }

    #[test]
    fn one_iteration_is_one_update() {
        let (band, pan) = scene(36, 36, 1);
        let p = NetParams::init(1);
        let cfg = TuningConfig {
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (out, _, trace) = tune_band(&band, &pan, 0, 500.0, &p, 1, &cfg).unwrap();
        assert_eq!(trace.reports.len(), 1);
        assert!(!trace.aborted);
        // a single Adam step moves every parameter with a non-zero gradient by ≈ lr
        let moved: Vec<f64> = out
            .to_flat()
            .iter()
            .zip(p.to_flat())
            .map(|(a, b)| (a - b).abs())
            .collect();
        assert!(moved.iter().all(|&d| d <= 1e-3 * (1.0 + 1e-6)));
        assert!(moved.iter().any(|&d| d > 0.9e-3));
    }

    #[test]
    fn zero_learning_rate_is_forward_only() {
        let (band, pan) = scene(36, 42, 2);
        let p = NetParams::init(2);
        let cfg = TuningConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        let (out, fused, trace) = tune_band(&band, &pan, 0, 500.0, &p, 3, &cfg).unwrap();
        let bits = |v: Vec<f64>| v.into_iter().map(f64::to_bits).collect::<Vec<_>>();
        assert_eq!(bits(out.to_flat()), bits(p.to_flat()));
        let interp = interpolate_band(&band, 6).unwrap();
        assert_eq!(fused, forward(&pan, &interp, &p).unwrap());
        assert_eq!(trace.reports.len(), 3);
        assert_eq!(trace.final_report.total, trace.reports[0].total);
    }

    #[test]
    fn trace_json_lines() {
        let (band, pan) = scene(36, 36, 3);
        let (_, _, trace) = tune_band(
            &band,
            &pan,
            4,
            800.0,
            &NetParams::zeros(),
            2,
            &TuningConfig::default(),
        )
        .unwrap();
        let text = trace.to_json_lines();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        let v: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(v["band"], 4);
        assert_eq!(v["iter"], 1);
        assert_eq!(v["beta"], 0.25);
        assert!(v["l_total"].as_f64().unwrap() >= 0.0);
    }

    #[test]
    fn pretrain_zero_epochs_returns_initial() {
        let (band, pan) = scene(240, 240, 4);
        let init = NetParams::init(4);
        let cfg = PretrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let res = pretrain(&band, &pan, 550.0, &init, &cfg, &TuningConfig::default()).unwrap();
        assert_eq!(res.params, init);
        assert_eq!(res.best_epoch, 0);
        assert_eq!(res.validation_loss.len(), 1);
        assert_eq!(res.training_patches, 90);
        assert_eq!(res.validation_patches, 10);
        // 240 px image cannot hold 10 × 240 px patches
        assert_eq!(res.patch_size, 24);
    }

    #[test]
    fn pretrain_rejects_tiny_images() {
        let (band, pan) = scene(120, 120, 5);
        let res = pretrain(
            &band,
            &pan,
            550.0,
            &NetParams::zeros(),
            &PretrainConfig::default(),
            &TuningConfig::default(),
        );
        assert!(res.is_err());
    }
}
