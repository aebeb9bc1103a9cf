mod args;
mod manifest;

use std::fmt;
use std::io::Write as _;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{CommandFactory, Parser};
use rpnn_core::data::{self, DataCube, PanImage};
use rpnn_core::metrics::{self, MetricsReport};
use rpnn_core::{rolling, synth, DecimationSpec, NetParams, RunConfig, SceneSpec};
use serde::Deserialize;

use args::{Cli, Command};
use manifest::{manifest_path, RunManifest};

#[derive(Debug)]
struct UsageError(String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Values taken from a manifest instead of the command line and files.
#[derive(Default)]
struct Replay {
    config: Option<RunConfig>,
    scene: Option<SceneSpec>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: class=usage message={first:?}");
            return ExitCode::from(2);
        }
    };
    let result = configure_threads().and_then(|()| run(cli, &argv[1..], Replay::default()));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}

fn configure_threads() -> anyhow::Result<()> {
    let Ok(raw) = std::env::var("RPNN_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError(format!("RPNN_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .context("configuring the worker pool")?;
    Ok(())
}

fn classify(e: &anyhow::Error) -> (&'static str, bool) {
    for cause in e.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return ("usage", true);
        }
        if let Some(core) = cause.downcast_ref::<rpnn_core::Error>() {
            let usage = match core {
                rpnn_core::Error::Config(_) => true,
                rpnn_core::Error::Io(io) => io.kind() == std::io::ErrorKind::NotFound,
                _ => false,
            };
            return (core.class(), usage);
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            return ("io", io.kind() == std::io::ErrorKind::NotFound);
        }
    }
    ("internal", false)
}

fn report(e: &anyhow::Error) -> ExitCode {
    let (class, usage) = classify(e);
    if usage {
        eprintln!("{}", Cli::command().render_usage());
    }
    eprintln!("error: class={class} message={:?}", format!("{e:#}"));
    ExitCode::from(if usage { 2 } else { 1 })
}

fn read_cube(path: &Path) -> anyhow::Result<DataCube> {
    data::read_cube(path).with_context(|| format!("reading {}", path.display()))
}

fn read_pan(path: &Path) -> anyhow::Result<PanImage> {
    data::read_pan(path).with_context(|| format!("reading {}", path.display()))
}

fn write_cube(cube: &DataCube, path: &Path) -> anyhow::Result<()> {
    data::write_cube(cube, path).with_context(|| format!("writing {}", path.display()))
}

fn ensure_ratio(cube: &DataCube, cfg: &RunConfig) -> anyhow::Result<()> {
    if cube.ratio() != cfg.ratio {
        return Err(rpnn_core::Error::Config(format!(
            "cube ratio {} differs from the configured ratio {} (set --ratio)",
            cube.ratio(),
            cfg.ratio
        ))
        .into());
    }
    Ok(())
}

fn starting_params(path: Option<&Path>, seed: u64) -> anyhow::Result<NetParams> {
    match path {
        Some(p) => NetParams::load(p).with_context(|| format!("reading {}", p.display())),
        None => {
            log::warn!("no starting weights given; using a seeded initialization (seed {seed})");
            Ok(NetParams::init(seed))
        }
    }
}

fn run(cli: Cli, argv: &[String], replay: Replay) -> anyhow::Result<()> {
    let cfg = match replay.config {
        Some(cfg) => cfg,
        None => cli.run.resolve()?,
    };
    let started = Instant::now();
    let name = subcommand_name(&cli.command);
    let mut m = RunManifest::new(name, argv, &cfg);
    let mut stdout = std::io::stdout().lock();

    let manifest_at = match cli.command {
        Command::Synth(a) => {
            let mut spec: SceneSpec = match (replay.scene, &a.scene) {
                (Some(spec), _) => spec,
                (None, Some(path)) => {
                    let text = std::fs::read_to_string(path)
                        .with_context(|| format!("reading {}", path.display()))?;
                    toml::from_str(&text).map_err(|e| {
                        rpnn_core::Error::Config(format!("{}: {}", path.display(), e.to_string().trim()))
                    })?
                }
                (None, None) => SceneSpec::default(),
            };
            if let Some(seed) = cli.run.seed {
                spec.seed = seed;
            }
            if let Some(n) = a.size {
                spec.height = n;
                spec.width = n;
            }
            if let Some(r) = cli.run.ratio {
                spec.ratio = r;
            }
            let (gt, pan) = synth::generate_scene(&spec)?;
            std::fs::create_dir_all(&a.out)?;
            let (gt_path, pan_path) = (a.out.join("gt.rpnc"), a.out.join("pan.rpnc"));
            write_cube(&gt, &gt_path)?;
            data::write_pan(&pan, &pan_path)?;
            writeln!(
                stdout,
                "bands={} height={} width={} seed={}",
                gt.band_count(),
                gt.height(),
                gt.width(),
                spec.seed
            )?;
            m.seed = spec.seed;
            m.scene = Some(spec);
            m.output("gt", &gt_path);
            m.output("pan", &pan_path);
            Some(manifest_path(&a.out, true))
        }
        Command::Degrade(a) => {
            let gt = read_cube(&a.gt)?;
            let pan = read_pan(&a.pan)?;
            let triple = synth::wald_degrade(
                &gt,
                &pan,
                &cfg.mtf(),
                &DecimationSpec::centered(cfg.ratio),
            )?;
            std::fs::create_dir_all(&a.out)?;
            let hs_path = a.out.join("hs_lr.rpnc");
            let pan_path = a.out.join("pan.rpnc");
            let gt_path = a.out.join("gt.rpnc");
            write_cube(&triple.hs_lr, &hs_path)?;
            data::write_pan(&triple.pan, &pan_path)?;
            write_cube(&triple.gt, &gt_path)?;
            writeln!(
                stdout,
                "hs_height={} hs_width={} pan_height={} pan_width={} ratio={}",
                triple.hs_lr.height(),
                triple.hs_lr.width(),
                triple.pan.height(),
                triple.pan.width(),
                cfg.ratio
            )?;
            m.input("gt", &a.gt);
            m.input("pan", &a.pan);
            m.output("hs", &hs_path);
            m.output("pan", &pan_path);
            m.output("gt", &gt_path);
            Some(manifest_path(&a.out, true))
        }
        Command::Pretrain(a) => {
            let hs = read_cube(&a.hs)?;
            let pan = read_pan(&a.pan)?;
            ensure_ratio(&hs, &cfg)?;
            let (hs, pan, _) = data::normalize_pair(&hs, &pan)?;
            let b = cfg.pretrain_band;
            if b >= hs.band_count() {
                return Err(rpnn_core::Error::Config(format!(
                    "pretrain_band {b} out of range for a {}-band cube",
                    hs.band_count()
                ))
                .into());
            }
            let initial = match &a.init {
                Some(p) => starting_params(Some(p), cfg.seed)?,
                None => NetParams::init(cfg.seed),
            };
            let r = rolling::pretrain(
                &hs.band(b),
                pan.image(),
                hs.wavelengths()[b],
                &initial,
                &cfg.pretraining(),
                &cfg.tuning(),
            )?;
            writeln!(stdout, "band={b} wavelength={}", hs.wavelengths()[b])?;
            writeln!(stdout, "patch_size={}", r.patch_size)?;
            writeln!(stdout, "training_patches={}", r.training_patches)?;
            writeln!(stdout, "validation_patches={}", r.validation_patches)?;
            writeln!(stdout, "best_epoch={}", r.best_epoch)?;
            writeln!(stdout, "validation_loss_initial={}", r.validation_loss[0])?;
            writeln!(stdout, "validation_loss_best={}", r.validation_loss[r.best_epoch])?;
            m.input("hs", &a.hs);
            m.input("pan", &a.pan);
            if let Some(p) = &a.init {
                m.input("init", p);
            }
            match &a.out {
                Some(out) => {
                    r.params
                        .save(out)
                        .with_context(|| format!("writing {}", out.display()))?;
                    m.output("checkpoint", out);
                    Some(manifest_path(out, false))
                }
                None => None,
            }
        }
        Command::Sharpen(a) => {
            let hs = read_cube(&a.hs)?;
            let pan = read_pan(&a.pan)?;
            ensure_ratio(&hs, &cfg)?;
            let initial = starting_params(a.checkpoint.as_deref(), cfg.seed)?;
            let (nhs, npan, s) = data::normalize_pair(&hs, &pan)?;
            log::info!("normalization scale {s}");
            let result = rolling::sharpen_cube(&nhs, &npan, &initial, &cfg.tuning())?;
            let fused = data::denormalize_cube(&result.fused)?;
            for t in &result.traces {
                writeln!(
                    stdout,
                    "band={} wavelength={} iterations={} l_total_first={} l_total_final={}{}",
                    t.band,
                    t.wavelength,
                    t.iterations,
                    t.reports.first().map_or(f64::NAN, |r| r.total),
                    t.final_report.total,
                    if t.aborted { " aborted=true" } else { "" }
                )?;
            }
            let aborted: Vec<String> = result.aborted.iter().map(|b| b.to_string()).collect();
            writeln!(stdout, "aborted_bands={}", aborted.join(","))?;
            m.input("hs", &a.hs);
            m.input("pan", &a.pan);
            if let Some(p) = &a.checkpoint {
                m.input("checkpoint", p);
            }
            let trace_path = a.trace.clone().or_else(|| {
                a.out.as_ref().map(|o| {
                    let mut s = o.as_os_str().to_owned();
                    s.push(".trace.jsonl");
                    s.into()
                })
            });
            if let Some(tp) = &trace_path {
                let text: String = result.traces.iter().map(|t| t.to_json_lines()).collect();
                std::fs::write(tp, text).with_context(|| format!("writing {}", tp.display()))?;
                m.output("trace", tp);
            }
            match &a.out {
                Some(out) => {
                    write_cube(&fused, out)?;
                    m.output("fused", out);
                    Some(manifest_path(out, false))
                }
                None => trace_path.map(|tp| manifest_path(&tp, false)),
            }
        }
        Command::Exp(a) => {
            let hs = read_cube(&a.hs)?;
            let up = metrics::exp_baseline(&hs)?;
            write_cube(&up, &a.out)?;
            writeln!(stdout, "bands={} height={} width={}", up.band_count(), up.height(), up.width())?;
            m.input("hs", &a.hs);
            m.output("exp", &a.out);
            Some(manifest_path(&a.out, false))
        }
        Command::EvalRr(a) => {
            let fused = read_cube(&a.fused)?;
            let gt = read_cube(&a.gt)?;
            let r = MetricsReport::Reduced(metrics::evaluate_reduced(&fused, &gt, cfg.ratio, a.block)?);
            let text = r.to_key_value();
            stdout.write_all(text.as_bytes())?;
            m.input("fused", &a.fused);
            m.input("gt", &a.gt);
            write_report(&text, a.out.as_deref(), &mut m)?
        }
        Command::EvalFr(a) => {
            let fused = read_cube(&a.fused)?;
            let pan = read_pan(&a.pan)?;
            let hs = read_cube(&a.hs)?;
            ensure_ratio(&hs, &cfg)?;
            let r = MetricsReport::Full(metrics::evaluate_full(&fused, &pan, &hs, &cfg.mtf(), a.block)?);
            let text = r.to_key_value();
            stdout.write_all(text.as_bytes())?;
            m.input("fused", &a.fused);
            m.input("pan", &a.pan);
            m.input("hs", &a.hs);
            write_report(&text, a.out.as_deref(), &mut m)?
        }
        Command::TracePlot(a) => {
            let text = std::fs::read_to_string(&a.trace)
                .with_context(|| format!("reading {}", a.trace.display()))?;
            let table = trace_table(&text)?;
            m.input("trace", &a.trace);
            match &a.out {
                Some(out) => {
                    std::fs::write(out, &table).with_context(|| format!("writing {}", out.display()))?;
                    m.output("table", out);
                    Some(manifest_path(out, false))
                }
                None => {
                    stdout.write_all(table.as_bytes())?;
                    None
                }
            }
        }
        Command::Rerun(a) => {
            drop(stdout);
            let recorded = RunManifest::read(&a.manifest)
                .with_context(|| format!("reading {}", a.manifest.display()))?;
            let cli = Cli::try_parse_from(std::iter::once("rpnn".to_string()).chain(recorded.argv.iter().cloned()))
                .map_err(|e| UsageError(format!("manifest arguments no longer parse: {e}")))?;
            if matches!(cli.command, Command::Rerun(_)) {
                bail!(UsageError("a manifest cannot point at another rerun".into()));
            }
            return run(
                cli,
                &recorded.argv,
                Replay {
                    config: Some(recorded.config),
                    scene: recorded.scene,
                },
            );
        }
    };

    if let Some(path) = manifest_at {
        m.elapsed_seconds = started.elapsed().as_secs_f64();
        m.write(&path)?;
    }
    Ok(())
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Synth(_) => "synth",
        Command::Degrade(_) => "degrade",
        Command::Pretrain(_) => "pretrain",
        Command::Sharpen(_) => "sharpen",
        Command::Exp(_) => "exp",
        Command::EvalRr(_) => "eval-rr",
        Command::EvalFr(_) => "eval-fr",
        Command::TracePlot(_) => "trace-plot",
        Command::Rerun(_) => "rerun",
    }
}

fn write_report(
    text: &str,
    out: Option<&Path>,
    m: &mut RunManifest,
) -> anyhow::Result<Option<std::path::PathBuf>> {
    let Some(out) = out else { return Ok(None) };
    std::fs::write(out, text).with_context(|| format!("writing {}", out.display()))?;
    m.output("report", out);
    Ok(Some(manifest_path(out, false)))
}

#[derive(Deserialize)]
struct TraceLine {
    band: usize,
    wavelength: f64,
    iter: usize,
    l_spectral: f64,
    l_spatial: f64,
    l_total: f64,
    beta: f64,
}

/// Tab-separated columns with a running step index across bands, ready for
/// loss-versus-iteration plots.
fn trace_table(jsonl: &str) -> anyhow::Result<String> {
    let mut out = String::from("step\tband\twavelength\titer\tl_spectral\tl_spatial\tl_total\tbeta\n");
    for (i, line) in jsonl.lines().filter(|l| !l.trim().is_empty()).enumerate() {
        let t: TraceLine = serde_json::from_str(line).map_err(|e| {
            rpnn_core::Error::Format(format!("trace line {}: {e}", i + 1))
        })?;
        out.push_str(&format!(
            "{i}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            t.band, t.wavelength, t.iter, t.l_spectral, t.l_spatial, t.l_total, t.beta
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_table_columns() {
        let text = "{\"band\":0,\"wavelength\":560.0,\"iter\":0,\"l_spectral\":0.1,\"l_spatial\":0.2,\"l_total\":0.2,\"beta\":0.5}\n\
                    {\"band\":1,\"wavelength\":570.0,\"iter\":0,\"l_spectral\":0.05,\"l_spatial\":0.1,\"l_total\":0.1,\"beta\":0.5}\n";
        let table = trace_table(text).unwrap();
        let rows: Vec<&str> = table.lines().collect();
        assert_eq!(rows.len(), 3);
        assert!(rows[0].starts_with("step\tband"));
        assert_eq!(rows[2].split('\t').next(), Some("1"));
        assert!(trace_table("{not json}\n").is_err());
    }

    #[test]
    fn error_classes() {
        let e: anyhow::Error = UsageError("x".into()).into();
        assert_eq!(classify(&e), ("usage", true));
        let e: anyhow::Error = rpnn_core::Error::Numeric("nan".into()).into();
        assert_eq!(classify(&e), ("numeric", false));
        let e = anyhow::Error::from(rpnn_core::Error::Format("bad".into())).context("reading x");
        assert_eq!(classify(&e), ("format", false));
    }
}
