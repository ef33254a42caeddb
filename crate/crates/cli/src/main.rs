//! `ttaq` — desk-scale quantization-under-adaptation experiments.
//!
//! Verbs mirror the pipeline: `gen-data` writes the synthetic datasets,
//! `train` fits the source model to the clean-accuracy gate, `ptq`
//! quantizes with block reconstruction, `adapt` runs the corruption stream
//! online, `matrix` sweeps methods x bits x seeds, and `report` rebuilds
//! the CSV tables from completed matrix cells.
//!
//! Exit codes: 0 ok, 2 gate failure, 3 config error, 1 anything else.

use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use ttaq_core::harness::{
    self, ExperimentConfig, MatrixPaths, Toggles,
};
use ttaq_core::recon::QuantizedModel;
use ttaq_core::tta::{evaluate_stream, Objective};
use ttaq_core::{io, Error};

#[derive(Parser)]
#[command(name = "ttaq", version, about = "Quantization hardened for continual test-time adaptation")]
struct Cli {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for checkpoints and reports.
    #[arg(long, global = true, default_value = "ttaq-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train/test datasets and stream description.
    GenData,
    /// Train the source model until it clears the clean-accuracy gate.
    Train,
    /// Post-training quantization with block reconstruction.
    Ptq {
        /// Weight bits (32 = bypass). Defaults to the config value.
        #[arg(long)]
        wbits: Option<u8>,
        /// Activation bits (32 = bypass).
        #[arg(long)]
        abits: Option<u8>,
        /// Disable the weight-regularization stage.
        #[arg(long)]
        no_pem: bool,
        /// Disable the perturbation-consistency terms (local-only recon).
        #[arg(long)]
        no_pcr: bool,
    },
    /// Adapt the quantized model over the corruption stream, online.
    Adapt {
        /// Adaptation objective: "abl" or "entropy".
        #[arg(long)]
        objective: Option<String>,
        #[arg(long)]
        wbits: Option<u8>,
        #[arg(long)]
        abits: Option<u8>,
        #[arg(long)]
        no_pem: bool,
        #[arg(long)]
        no_pcr: bool,
    },
    /// Run the full method x bits x seed matrix.
    Matrix,
    /// Rebuild CSV reports from completed matrix cells.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)?;
            ExperimentConfig::from_toml_str(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(out)?;
    let data = harness::prepare_data(cfg)?;
    io::save_dataset(
        &out.join("train.data"),
        &out.join("train.manifest.json"),
        &data.train,
        cfg.seed,
    )?;
    io::save_dataset(
        &out.join("test.data"),
        &out.join("test.manifest.json"),
        &data.test,
        cfg.seed,
    )?;
    // Stream description: per-segment kind/severity/weights.
    let segments: Result<Vec<_>, Error> = cfg
        .stream
        .domains
        .iter()
        .enumerate()
        .map(|(d, spec)| {
            let weights = cfg.stream.imbalance.weights(d, cfg.data.classes)?;
            Ok(serde_json::json!({
                "kind": spec.kind,
                "severity": spec.severity,
                "weights": weights,
            }))
        })
        .collect();
    let desc = serde_json::json!({
        "config": cfg.hash(),
        "segments": segments?,
    });
    std::fs::write(out.join("stream_description.json"), serde_json::to_string_pretty(&desc)? + "\n")?;
    println!("wrote {} train / {} test samples to {}", data.train.len(), data.test.len(), out.display());
    Ok(())
}

fn train(cfg: &ExperimentConfig, out: &Path) -> Result<(), Error> {
    let paths = MatrixPaths { out_dir: out.to_path_buf() };
    std::fs::create_dir_all(out)?;
    let data = harness::prepare_data(cfg)?;
    let model = harness::source_model(cfg, &data, &paths)?;
    let err = QuantizedModel::bypass(model).eval_error(&data.test.images, &data.test.labels, 128)?;
    println!("source model at {} — clean accuracy {:.2}%", paths.source_ckpt().display(), 100.0 - err);
    Ok(())
}

fn toggles_from_flags(no_pem: bool, no_pcr: bool, abl: bool) -> Toggles {
    Toggles { pem: !no_pem, pcr: !no_pcr, abl }
}

#[allow(clippy::too_many_arguments)]
fn ptq(
    cfg: &ExperimentConfig,
    out: &Path,
    wbits: Option<u8>,
    abits: Option<u8>,
    no_pem: bool,
    no_pcr: bool,
) -> Result<QuantizedModel, Error> {
    let paths = MatrixPaths { out_dir: out.to_path_buf() };
    std::fs::create_dir_all(out.join("ptq"))?;
    let data = harness::prepare_data(cfg)?;
    let source = harness::source_model(cfg, &data, &paths)?;
    let toggles = toggles_from_flags(no_pem, no_pcr, cfg.adapt.objective == Objective::Abl);
    let (w, a) = (wbits.unwrap_or(cfg.ptq.weight_bits), abits.unwrap_or(cfg.ptq.act_bits));
    let qm = harness::ptq_arm(cfg, &source, &data.calib, toggles, w, a, &paths)?;
    let src_err = qm.eval_error(&data.test.images, &data.test.labels, 128)?;
    println!(
        "quantized w{}a{} ({}) — clean error {:.2}% — {}",
        w,
        a,
        toggles.method_name(),
        src_err,
        paths.ptq_ckpt(&toggles.method_name(), w, a).display()
    );
    Ok(qm)
}

#[allow(clippy::too_many_arguments)]
fn adapt(
    cfg: &ExperimentConfig,
    out: &Path,
    objective: Option<String>,
    wbits: Option<u8>,
    abits: Option<u8>,
    no_pem: bool,
    no_pcr: bool,
) -> Result<(), Error> {
    let mut cfg = cfg.clone();
    if let Some(obj) = objective {
        cfg.adapt.objective = match obj.as_str() {
            "abl" => Objective::Abl,
            "entropy" => Objective::Entropy,
            other => return Err(Error::Config(format!("unknown objective '{}'", other))),
        };
    }
    let qm = ptq(&cfg, out, wbits, abits, no_pem, no_pcr)?;
    let data = harness::prepare_data(&cfg)?;
    let stream = harness::stream_for_seed(&cfg, &data.test, cfg.seed)?;
    let (report, _) = evaluate_stream(qm, &stream, &cfg.adapt)?;

    let mut trace = String::new();
    for t in &report.trace {
        trace.push_str(&serde_json::to_string(t)?);
        trace.push('\n');
    }
    std::fs::write(out.join("stream_trace.jsonl"), trace)?;

    let mut csv = format!("# config {}\n", cfg.hash());
    csv.push_str("domain,severity,error,samples\n");
    for d in &report.domains {
        csv.push_str(&format!("{},{},{:.4},{}\n", d.kind, d.severity, d.error, d.samples));
    }
    csv.push_str(&format!("mean,,{:.4},\n", report.mean_error));
    std::fs::write(out.join("domain_errors.csv"), csv)?;

    let summary = serde_json::json!({
        "config": cfg.hash(),
        "objective": cfg.adapt.objective,
        "mean_error": report.mean_error,
        "final_pi": report.final_pi,
        "final_phi": report.final_phi,
    });
    std::fs::write(out.join("adapt_summary.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("stream mean error {:.2}% — reports in {}", report.mean_error, out.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<bool, Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::GenData => {
            gen_data(&cfg, &cli.out_dir)?;
            Ok(true)
        }
        Command::Train => {
            train(&cfg, &cli.out_dir)?;
            Ok(true)
        }
        Command::Ptq { wbits, abits, no_pem, no_pcr } => {
            ptq(&cfg, &cli.out_dir, *wbits, *abits, *no_pem, *no_pcr)?;
            Ok(true)
        }
        Command::Adapt { objective, wbits, abits, no_pem, no_pcr } => {
            adapt(&cfg, &cli.out_dir, objective.clone(), *wbits, *abits, *no_pem, *no_pcr)?;
            Ok(true)
        }
        Command::Matrix => {
            let summary = harness::run_matrix(&cfg, &cli.out_dir)?;
            println!(
                "matrix: {} cells ({} failed) — reports in {}",
                summary.cells,
                summary.failures,
                cli.out_dir.display()
            );
            if let Some(detail) = &summary.gate_detail {
                println!("gate: {}", detail);
            }
            Ok(summary.gate_passed.unwrap_or(true))
        }
        Command::Report => {
            let paths = MatrixPaths { out_dir: cli.out_dir.clone() };
            harness::write_reports(&cfg, &paths)?;
            println!("reports rebuilt in {}", cli.out_dir.display());
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("gate failed");
            ExitCode::from(2)
        }
        Err(Error::GateFailed(msg)) => {
            eprintln!("gate failed: {}", msg);
            ExitCode::from(2)
        }
        Err(Error::Config(msg)) => {
            eprintln!("config error: {}", msg);
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {}", e);
            ExitCode::FAILURE
        }
    }
}
