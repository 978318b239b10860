//! depthscope: residual-stream probing and effective-depth reports for
//! pre-norm transformers.
//!
//! Subcommands: `init-model` writes a seeded weight container,
//! `run` executes probes over a corpus and emits one curve file per
//! probe, `detect` turns curves into an effective-depth report,
//! `report` renders a report as CSV or SVG, and `validate` checks the
//! detectors against planted synthetic ground truth.
//!
//! Exit codes: 0 success, 2 input error, 3 insufficient data,
//! 1 internal error. DEPTHSCOPE_THREADS caps probe workers.

mod runner;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use depthscope_core::container::{load_weights, save_weights};
use depthscope_core::corpus::{compute_baseline, load_baseline, load_jsonl, save_baseline};
use depthscope_core::detect::DetectorConfig;
use depthscope_core::model::{init_random, Preset};
use depthscope_core::probes::{AttributionVariant, KlDirection, PositionSelection};
use depthscope_core::report::{
    build_report, curves_to_csv, digest_file, load_curves, load_report, render_svg, render_table,
    save_curves, write_canonical_json, FileDigest, RunManifest, TOOL_VERSION,
};
use depthscope_core::synthetic::{validate_detectors, ValidationConfig};
use depthscope_core::{Error, Result};
use runner::{run_probes, RunOptions, ALL_PROBES};

#[derive(Parser)]
#[command(name = "depthscope", version, about = "Effective-depth profiling for pre-norm transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KlDirectionArg {
    /// KL(final || early): weighted by the final distribution.
    FinalFromEarly,
    /// KL(early || final).
    EarlyFromFinal,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttrVariantArg {
    Plain,
    Path,
}

#[derive(Clone, Copy, ValueEnum)]
enum LensPositionsArg {
    /// Answer-span positions when present, all positions otherwise.
    Answer,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Svg,
}

#[derive(Subcommand)]
enum Command {
    /// Initialize a randomly seeded model in container format.
    InitModel {
        /// Architecture preset: 1.5B-shape, 7B-shape, 14B-shape,
        /// 32B-shape, or tiny.
        #[arg(long)]
        preset: String,
        /// Width multiplier on the desk-scale base (head dim 16).
        #[arg(long, default_value_t = 1.0)]
        scale_factor: f64,
        #[arg(long, default_value_t = 512)]
        vocab: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run probes over a corpus, writing one curves file per probe.
    Run {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated list or "all":
        /// cosine,lens,skip,erasure,attribution.
        #[arg(long, default_value = "all")]
        probes: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = KlDirectionArg::FinalFromEarly)]
        kl_direction: KlDirectionArg,
        #[arg(long, value_enum, default_value_t = AttrVariantArg::Plain)]
        attr_variant: AttrVariantArg,
        #[arg(long, default_value_t = 32)]
        attr_steps: usize,
        /// Skip cutoffs sampled per prompt.
        #[arg(long, default_value_t = 4)]
        skip_samples: usize,
        #[arg(long, value_enum, default_value_t = LensPositionsArg::Answer)]
        lens_positions: LensPositionsArg,
        /// Load baseline residual statistics instead of computing them.
        #[arg(long)]
        baseline: Option<PathBuf>,
        /// Persist the baseline statistics used by this run.
        #[arg(long)]
        save_baseline: Option<PathBuf>,
        /// Position cap per prompt when computing the baseline.
        #[arg(long, default_value_t = 64)]
        max_baseline_positions: usize,
        /// Embed per-prompt curves for dispersion reporting.
        #[arg(long)]
        per_prompt: bool,
    },
    /// Estimate effective depth from curve files.
    Detect {
        /// Directories holding curve files (.json or .csv).
        #[arg(long, required = true, num_args = 1..)]
        curves: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        overlap_threshold: f64,
        #[arg(long, default_value_t = 0.5)]
        kl_fraction: f64,
        /// Summarize per-prompt estimates when curves carry them.
        #[arg(long)]
        dispersion: bool,
    },
    /// Render a report as CSV or SVG charts.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long, value_enum)]
        format: ReportFormat,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate depth detectors against planted synthetic transitions.
    Validate {
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Comma-separated noise levels; runs one validation per level.
        #[arg(long)]
        noise_sweep: Option<String>,
        #[arg(long, default_value = "8,16,28,48,64")]
        layer_counts: String,
        #[arg(long, default_value_t = 32)]
        dim: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::Input(_) | Error::Shape(_) | Error::Format(_) | Error::Io { .. } => 2,
        Error::Insufficient(_) => 3,
        Error::Lookup(_) | Error::Json(_) => 1,
    }
}

fn dispatch(command: Command) -> Result<ExitCode> {
    match command {
        Command::InitModel {
            preset,
            scale_factor,
            vocab,
            seed,
            out,
        } => cmd_init_model(&preset, scale_factor, vocab, seed, &out),
        Command::Run {
            model,
            corpus,
            probes,
            seed,
            out,
            kl_direction,
            attr_variant,
            attr_steps,
            skip_samples,
            lens_positions,
            baseline,
            save_baseline,
            max_baseline_positions,
            per_prompt,
        } => cmd_run(RunArgs {
            model,
            corpus,
            probes,
            seed,
            out,
            kl_direction,
            attr_variant,
            attr_steps,
            skip_samples,
            lens_positions,
            baseline,
            save_baseline,
            max_baseline_positions,
            per_prompt,
        }),
        Command::Detect {
            curves,
            out,
            overlap_threshold,
            kl_fraction,
            dispersion,
        } => cmd_detect(&curves, &out, overlap_threshold, kl_fraction, dispersion),
        Command::Report { report, format, out } => cmd_report(&report, format, &out),
        Command::Validate {
            seeds,
            out,
            noise,
            noise_sweep,
            layer_counts,
            dim,
        } => cmd_validate(seeds, &out, noise, noise_sweep.as_deref(), &layer_counts, dim),
    }
}

fn cmd_init_model(
    preset: &str,
    scale_factor: f64,
    vocab: usize,
    seed: u64,
    out: &Path,
) -> Result<ExitCode> {
    let preset = Preset::parse(preset)?;
    let config = preset.config(scale_factor, vocab)?;
    let weights = init_random(&config, seed)?;
    save_weights(&weights, out)?;
    println!(
        "wrote {} ({}): layers={} d_model={} heads={}/{} d_ff={} vocab={} seed={}",
        out.display(),
        preset.name(),
        config.n_layers,
        config.d_model,
        config.n_q_heads,
        config.n_kv_heads,
        config.d_ff,
        config.vocab_size,
        seed,
    );
    Ok(ExitCode::SUCCESS)
}

struct RunArgs {
    model: PathBuf,
    corpus: PathBuf,
    probes: String,
    seed: u64,
    out: PathBuf,
    kl_direction: KlDirectionArg,
    attr_variant: AttrVariantArg,
    attr_steps: usize,
    skip_samples: usize,
    lens_positions: LensPositionsArg,
    baseline: Option<PathBuf>,
    save_baseline: Option<PathBuf>,
    max_baseline_positions: usize,
    per_prompt: bool,
}

fn parse_probes(spec: &str) -> Result<Vec<String>> {
    if spec == "all" {
        return Ok(ALL_PROBES.iter().map(|s| s.to_string()).collect());
    }
    let probes: Vec<String> = spec
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect();
    if probes.is_empty() {
        return Err(Error::input("no probes selected".to_string()));
    }
    for p in &probes {
        if !ALL_PROBES.contains(&p.as_str()) {
            return Err(Error::input(format!(
                "unknown probe {p:?}; expected one of {} or \"all\"",
                ALL_PROBES.join(", ")
            )));
        }
    }
    Ok(probes)
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let weights = load_weights(&args.model)?;
    let corpus = load_jsonl(&args.corpus)?;
    if corpus.is_empty() {
        eprintln!("warning: corpus {} is empty", args.corpus.display());
    }
    let probes = parse_probes(&args.probes)?;

    let kl_direction = match args.kl_direction {
        KlDirectionArg::FinalFromEarly => KlDirection::FinalFromEarly,
        KlDirectionArg::EarlyFromFinal => KlDirection::EarlyFromFinal,
    };
    let attr_variant = match args.attr_variant {
        AttrVariantArg::Plain => AttributionVariant::Plain,
        AttrVariantArg::Path => AttributionVariant::Path,
    };
    let lens_positions = match args.lens_positions {
        LensPositionsArg::Answer => PositionSelection::AnswerSpan,
        LensPositionsArg::All => PositionSelection::All,
    };

    // Baseline statistics: loaded when given, computed over this corpus
    // when the erasure probe needs them.
    let needs_baseline = probes.iter().any(|p| p == "erasure");
    let stats = match (&args.baseline, needs_baseline || args.save_baseline.is_some()) {
        (Some(path), _) => {
            let (stats, baseline_config) = load_baseline(path)?;
            if baseline_config.n_layers != weights.config.n_layers
                || baseline_config.d_model != weights.config.d_model
            {
                return Err(Error::input(format!(
                    "baseline {} was computed for a different architecture",
                    path.display()
                )));
            }
            Some(stats)
        }
        (None, true) => Some(compute_baseline(
            &weights,
            &corpus,
            args.max_baseline_positions,
            args.seed,
        )?),
        (None, false) => None,
    };
    if let (Some(path), Some(stats)) = (&args.save_baseline, &stats) {
        save_baseline(stats, &weights.config, path)?;
    }

    let mut parameters = BTreeMap::new();
    parameters.insert("kl_direction".to_string(), serde_json::to_value(kl_direction)?);
    parameters.insert("attr_variant".to_string(), serde_json::to_value(attr_variant)?);
    parameters.insert("attr_steps".to_string(), serde_json::json!(args.attr_steps));
    parameters.insert("skip_samples".to_string(), serde_json::json!(args.skip_samples));
    parameters.insert(
        "max_baseline_positions".to_string(),
        serde_json::json!(args.max_baseline_positions),
    );
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        seed: args.seed,
        model: digest_file(&args.model)?,
        corpus: digest_file(&args.corpus)?,
        probes: probes.clone(),
        parameters,
    };

    let opts = RunOptions {
        probes,
        seed: args.seed,
        kl_direction,
        attr_variant,
        attr_steps: args.attr_steps,
        skip_samples: args.skip_samples,
        lens_positions,
        per_prompt: args.per_prompt,
    };
    let sets = run_probes(&weights, &corpus, stats.as_ref(), &opts, &manifest)?;

    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    for cs in &sets {
        let path = args.out.join(format!("{}.json", cs.probe));
        save_curves(cs, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_detect(
    curve_dirs: &[PathBuf],
    out: &Path,
    overlap_threshold: f64,
    kl_fraction: f64,
    dispersion: bool,
) -> Result<ExitCode> {
    let cfg = DetectorConfig {
        overlap_threshold,
        kl_fraction,
    };
    cfg.validate()?;

    let mut paths = Vec::new();
    for dir in curve_dirs {
        let entries = std::fs::read_dir(dir)
            .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?;
        for entry in entries {
            let path = entry
                .map_err(|e| Error::io(format!("reading {}", dir.display()), e))?
                .path();
            let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
            if ext == "json" || ext == "csv" {
                paths.push(path);
            }
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Insufficient(format!(
            "no curve files found under {}",
            curve_dirs
                .iter()
                .map(|d| d.display().to_string())
                .collect::<Vec<_>>()
                .join(", ")
        )));
    }

    let mut sets = Vec::new();
    let mut inputs: Vec<FileDigest> = Vec::new();
    for path in &paths {
        sets.extend(load_curves(path)?);
        inputs.push(digest_file(path)?);
    }
    let report = build_report(sets, &cfg, inputs, dispersion)?;
    write_canonical_json(&report, out)?;
    print!("{}", render_table(&report));
    println!("wrote {}", out.display());
    Ok(ExitCode::SUCCESS)
}

fn sanitize_filename(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn cmd_report(report_path: &Path, format: ReportFormat, out: &Path) -> Result<ExitCode> {
    let report = load_report(report_path)?;
    std::fs::create_dir_all(out)
        .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    match format {
        ReportFormat::Csv => {
            let path = out.join("curves.csv");
            std::fs::write(&path, curves_to_csv(&report.curves))
                .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            println!("wrote {}", path.display());
        }
        ReportFormat::Svg => {
            let unique_probe = |probe: &str| {
                report.curves.iter().filter(|c| c.probe == probe).count() == 1
            };
            for cs in &report.curves {
                let name = if unique_probe(&cs.probe) {
                    format!("{}.svg", sanitize_filename(&cs.probe))
                } else {
                    format!(
                        "{}_{}.svg",
                        sanitize_filename(&cs.probe),
                        sanitize_filename(&cs.dataset)
                    )
                };
                let path = out.join(name);
                std::fs::write(&path, render_svg(cs))
                    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_validate(
    seeds: u64,
    out: &Path,
    noise: f64,
    noise_sweep: Option<&str>,
    layer_counts: &str,
    dim: usize,
) -> Result<ExitCode> {
    let layer_counts: Vec<usize> = layer_counts
        .split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|e| Error::input(format!("bad layer count {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;

    let sigmas: Vec<f64> = match noise_sweep {
        Some(spec) => spec
            .split(',')
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|e| Error::input(format!("bad noise level {s:?}: {e}")))
            })
            .collect::<Result<_>>()?,
        None => vec![noise],
    };

    let mut reports = Vec::with_capacity(sigmas.len());
    let mut zero_noise_ok = true;
    for sigma in sigmas {
        let cfg = ValidationConfig {
            layer_counts: layer_counts.clone(),
            dim,
            noise_sigma: sigma,
        };
        let report = validate_detectors(seeds, &cfg)?;
        println!(
            "noise={sigma}: cases={} recovery cosine={:.3} kl={:.3} overlap={:.3}",
            report.cases,
            report.cosine.recovery_rate,
            report.kl.recovery_rate,
            report.overlap.recovery_rate,
        );
        if sigma == 0.0 && !report.all_exact() {
            zero_noise_ok = false;
        }
        reports.push(report);
    }

    if reports.len() == 1 {
        write_canonical_json(&reports[0], out)?;
    } else {
        write_canonical_json(&serde_json::json!({ "sweeps": reports }), out)?;
    }
    println!("wrote {}", out.display());
    if zero_noise_ok {
        Ok(ExitCode::SUCCESS)
    } else {
        eprintln!("error: zero-noise recovery rate below 1.0");
        Ok(ExitCode::from(1))
    }
}
