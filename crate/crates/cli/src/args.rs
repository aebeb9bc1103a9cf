use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rpnn_core::{Direction, RhoMaxMode, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "rpnn",
    version,
    about = "Band-wise hyperspectral pansharpening with model propagation",
    propagate_version = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic ground-truth cube and PAN
    Synth(SynthArgs),
    /// Reduced-resolution protocol: low-pass and decimate a cube
    Degrade(DegradeArgs),
    /// Pretrain starting weights on one band of a training pair
    Pretrain(PretrainArgs),
    /// Sharpen every band of a cube with its PAN
    Sharpen(SharpenArgs),
    /// Interpolation baseline (no sharpening)
    Exp(ExpArgs),
    /// Reference-based indexes of a fused cube
    EvalRr(EvalRrArgs),
    /// No-reference indexes of a fused cube
    EvalFr(EvalFrArgs),
    /// Columnar loss table from a trace file
    TracePlot(TracePlotArgs),
    /// Repeat a run recorded in a manifest
    Rerun(RerunArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scene description (TOML)
    #[arg(long)]
    pub scene: Option<PathBuf>,
    /// Side of the square scene in PAN pixels
    #[arg(long)]
    pub size: Option<usize>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Low-resolution training cube
    #[arg(long)]
    pub hs: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    /// Start from these weights instead of a seeded initialization
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Checkpoint to write
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SharpenArgs {
    #[arg(long)]
    pub hs: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    /// Starting weights; a seeded initialization when absent
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Fused cube to write
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Per-iteration loss trace (JSON lines); defaults to <out>.trace.jsonl
    #[arg(long)]
    pub trace: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExpArgs {
    #[arg(long)]
    pub hs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalRrArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub gt: PathBuf,
    /// Side of the Q_avg blocks
    #[arg(long, default_value_t = rpnn_core::metrics::DEFAULT_Q_BLOCK)]
    pub block: usize,
    /// Also write the report here
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalFrArgs {
    #[arg(long)]
    pub fused: PathBuf,
    #[arg(long)]
    pub pan: PathBuf,
    #[arg(long)]
    pub hs: PathBuf,
    #[arg(long, default_value_t = rpnn_core::metrics::DEFAULT_Q_BLOCK)]
    pub block: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TracePlotArgs {
    #[arg(long)]
    pub trace: PathBuf,
    /// Write the table here instead of standard output
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RerunArgs {
    pub manifest: PathBuf,
}

fn parse_pan_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s
        .split_once(',')
        .ok_or_else(|| format!("expected LO,HI in nm, got {s:?}"))?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("{lo:?}: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("{hi:?}: {e}"))?;
    Ok((lo, hi))
}

/// Settings shared by every subcommand. Flags override `--config`.
#[derive(Debug, Default, Args)]
pub struct RunArgs {
    /// Run configuration file (flat TOML)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub alpha: Option<f64>,
    /// Tuning learning rate
    #[arg(long, global = true)]
    pub lr: Option<f64>,
    #[arg(long, global = true)]
    pub beta_overlap: Option<f64>,
    #[arg(long = "beta-nonoverlap", global = true)]
    pub beta_non_overlap: Option<f64>,
    /// Correlation window side in PAN pixels
    #[arg(long, global = true)]
    pub sigma: Option<usize>,
    /// const or estimated
    #[arg(long, global = true)]
    pub rho_max: Option<RhoMaxMode>,
    /// PAN spectral support as LO,HI in nm
    #[arg(long, global = true, value_parser = parse_pan_band)]
    pub pan_band: Option<(f64, f64)>,
    /// MTF gain at the Nyquist frequency
    #[arg(long, global = true)]
    pub mtf_gain: Option<f64>,
    #[arg(long, global = true)]
    pub ratio: Option<usize>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// forward or backward
    #[arg(long, global = true)]
    pub direction: Option<Direction>,
    /// Restart every band from the starting weights
    #[arg(long, global = true)]
    pub reset_each_band: bool,
    /// Pass Adam moment estimates along the band chain
    #[arg(long, global = true)]
    pub carry_optimizer_state: bool,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    #[arg(long, global = true)]
    pub patch_size: Option<usize>,
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    #[arg(long, global = true)]
    pub validation_patches: Option<usize>,
    #[arg(long, global = true)]
    pub batch_size: Option<usize>,
    #[arg(long, global = true)]
    pub pretrain_lr: Option<f64>,
    #[arg(long, global = true)]
    pub pretrain_band: Option<usize>,
}

impl RunArgs {
    /// Effective configuration: defaults, then the file, then flags.
    pub fn resolve(&self) -> rpnn_core::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag { cfg.$field = v; })*
            };
        }
        set!(
            alpha => alpha,
            lr => learning_rate,
            beta_overlap => beta_overlap,
            beta_non_overlap => beta_non_overlap,
            sigma => window,
            rho_max => rho_max_mode,
            pan_band => pan_band,
            mtf_gain => nyquist_gain,
            ratio => ratio,
            seed => seed,
            direction => direction,
            epochs => pretrain_epochs,
            patch_size => pretrain_patch_size,
            grid => pretrain_grid,
            validation_patches => pretrain_validation_patches,
            batch_size => pretrain_batch_size,
            pretrain_lr => pretrain_learning_rate,
            pretrain_band => pretrain_band,
        );
        if self.reset_each_band {
            cfg.reset_each_band = true;
        }
        if self.carry_optimizer_state {
            cfg.carry_optimizer_state = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("rpnn").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_defaults() {
        let cli = parse(&[
            "eval-rr", "--fused", "f", "--gt", "g", "--alpha", "2", "--rho-max", "const",
            "--pan-band", "450,650", "--direction", "backward",
        ]);
        let cfg = cli.run.resolve().unwrap();
        assert_eq!(cfg.alpha, 2.0);
        assert_eq!(cfg.rho_max_mode, RhoMaxMode::Constant);
        assert_eq!(cfg.pan_band, (450.0, 650.0));
        assert_eq!(cfg.direction, Direction::Backward);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "alpha = 3.0\nlearning_rate = 0.001\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = parse(&["eval-rr", "--fused", "f", "--gt", "g", "--config", p])
            .run
            .resolve()
            .unwrap();
        assert_eq!((cfg.alpha, cfg.learning_rate), (3.0, 0.001));
        let cfg = parse(&["eval-rr", "--fused", "f", "--gt", "g", "--config", p, "--alpha", "1"])
            .run
            .resolve()
            .unwrap();
        assert_eq!((cfg.alpha, cfg.learning_rate), (1.0, 0.001));
    }

    #[test]
    fn conflicting_settings_rejected() {
        let cli = parse(&[
            "eval-rr", "--fused", "f", "--gt", "g", "--beta-overlap", "0.1",
            "--beta-nonoverlap", "0.3",
        ]);
        assert!(matches!(cli.run.resolve(), Err(rpnn_core::Error::Config(_))));
    }

    #[test]
    fn malformed_values_are_usage_errors() {
        for bad in [
            vec!["eval-rr", "--fused", "f", "--gt", "g", "--pan-band", "400"],
            vec!["eval-rr", "--fused", "f", "--gt", "g", "--rho-max", "maybe"],
            vec!["eval-rr", "--fused", "f", "--gt", "g", "--bogus"],
            vec!["sharpen", "--pan", "p"],
        ] {
            let args = std::iter::once("rpnn").chain(bad.iter().copied());
            assert!(Cli::try_parse_from(args).is_err(), "{bad:?}");
        }
    }
}
