use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::{error, info};

use fesvibs::data::{generate_synthetic, read_container, save_container, SyntheticSpec, CONTAINER_MAGIC};
use fesvibs::harness::{balanced_accuracy, mean_std, write_outputs, Checkpoint, ExperimentConfig, CHECKPOINT_MAGIC};
use fesvibs::protocol::{predict, run_experiment, ExperimentError, Settings};
use fesvibs::transport::TransportKind;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser)]
#[command(name = "fesvibs", version, about = "Federated split vision-transformer experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    Inproc,
    Stream,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset container.
    GenerateData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 800)]
        samples: usize,
        /// Image shape as C,H,W.
        #[arg(long, default_value = "1,16,16", value_parser = parse_shape)]
        image: [usize; 3],
        #[arg(long, default_value_t = 0.35)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate one configuration.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long, value_enum)]
        transport: Option<TransportArg>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        emit_plots: bool,
    },
    /// Score a checkpoint on a dataset container.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Print the header of a container or checkpoint.
    Inspect { path: PathBuf },
}

fn parse_shape(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    parts.try_into().map_err(|v: Vec<usize>| format!("expected C,H,W, got {} values", v.len()))
}

enum Failure {
    Config(String),
    Runtime(String),
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("FESVIBS_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenerateData { out, classes, samples, image, noise, seed } => {
            generate(&out, SyntheticSpec { classes, samples, image, noise, seed })
        }
        Command::Run { config, seed_override, transport, out, emit_plots } => {
            run(config.as_deref(), seed_override, transport, out, emit_plots)
        }
        Command::Evaluate { checkpoint, data } => evaluate(&checkpoint, &data),
        Command::Inspect { path } => inspect(&path),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            error!("{msg}");
            ExitCode::from(EXIT_CONFIG)
        }
        Err(Failure::Runtime(msg)) => {
            error!("{msg}");
            ExitCode::from(EXIT_RUNTIME)
        }
    }
}

fn generate(out: &Path, spec: SyntheticSpec) -> Result<(), Failure> {
    let data = generate_synthetic(&spec).map_err(|e| Failure::Config(e.to_string()))?;
    save_container(&data, out).map_err(|e| Failure::Runtime(e.to_string()))?;
    info!("wrote {} samples to {}", data.len(), out.display());
    Ok(())
}

fn run(
    config: Option<&Path>,
    seed_override: Option<u64>,
    transport: Option<TransportArg>,
    out: Option<PathBuf>,
    emit_plots: bool,
) -> Result<(), Failure> {
    let mut cfg = match config {
        Some(p) => ExperimentConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = seed_override {
        cfg.override_seed(seed);
    }
    if let Some(t) = transport {
        cfg.transport.kind = match t {
            TransportArg::Inproc => TransportKind::Inproc,
            TransportArg::Stream => TransportKind::Stream,
        };
    }
    if let Some(dir) = out {
        cfg.output.dir = dir;
    }
    cfg.output.emit_plots |= emit_plots;

    let result = run_experiment(&cfg).map_err(|e| match e {
        ExperimentError::Config(_) => Failure::Config(e.to_string()),
        ExperimentError::Runtime(_) => Failure::Runtime(e.to_string()),
    })?;
    let dir = &cfg.output.dir;
    let written = write_outputs(dir, &cfg, &result.records, &result.init, &result.last, cfg.output.emit_plots)
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let ckpt = dir.join("checkpoint.fsvc");
    if let Err(e) = result.checkpoint.save(&ckpt) {
        for p in &written {
            let _ = std::fs::remove_file(p);
        }
        return Err(Failure::Runtime(e.to_string()));
    }
    info!(
        "{} after {} rounds: balanced accuracy {:.4} ± {:.4}; results in {}",
        cfg.variant,
        cfg.rounds,
        result.last.mean,
        result.last.std,
        dir.display()
    );
    Ok(())
}

fn evaluate(checkpoint: &Path, data: &Path) -> Result<(), Failure> {
    let ckpt = Checkpoint::load(checkpoint).map_err(|e| Failure::Runtime(e.to_string()))?;
    let bytes = std::fs::read(data).map_err(|e| Failure::Runtime(format!("{}: {e}", data.display())))?;
    let set = read_container(&bytes).map_err(|e| Failure::Runtime(e.to_string()))?;
    let h = &ckpt.header;
    if set.image_shape() != h.model.image || set.classes() != h.model.classes {
        return Err(Failure::Config(format!(
            "data is {:?} with {} classes, checkpoint expects {:?} with {}",
            set.image_shape(),
            set.classes(),
            h.model.image,
            h.model.classes
        )));
    }
    let settings = Settings::new(h.variant, h.model.clone());
    let mut per_client = Vec::with_capacity(ckpt.models.len());
    for model in &ckpt.models {
        let pred = predict(&settings, model, set.images(), h.eval_ensemble).map_err(|e| Failure::Runtime(e.to_string()))?;
        per_client.push(balanced_accuracy(set.labels(), &pred, set.classes()).map_err(|e| Failure::Runtime(e.to_string()))?);
    }
    let (mean, std) = mean_std(&per_client).unwrap_or((0.0, 0.0));
    let report = serde_json::json!({
        "variant": h.variant,
        "round": h.round,
        "samples": set.len(),
        "per_client": per_client,
        "mean": mean,
        "std": std,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}

fn inspect(path: &Path) -> Result<(), Failure> {
    let bytes = std::fs::read(path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    let report = if bytes.starts_with(CONTAINER_MAGIC) {
        let set = read_container(&bytes).map_err(|e| Failure::Runtime(e.to_string()))?;
        serde_json::json!({
            "kind": "dataset",
            "classes": set.classes(),
            "samples": set.len(),
            "image": set.image_shape(),
            "dtype": "f32",
            "class_counts": set.histogram(),
        })
    } else if bytes.starts_with(CHECKPOINT_MAGIC) {
        let ckpt = Checkpoint::from_bytes(&bytes).map_err(|e| Failure::Runtime(e.to_string()))?;
        serde_json::json!({ "kind": "checkpoint", "header": ckpt.header })
    } else {
        return Err(Failure::Runtime(format!("{}: not a dataset container or checkpoint", path.display())));
    };
    println!("{}", serde_json::to_string_pretty(&report).expect("json"));
    Ok(())
}
