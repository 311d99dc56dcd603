use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use planogram_core::config::PipelineConfig;
use planogram_core::eval::synth::{generate_synthetic, load_dataset, PerturbationKind, SynthSpec, PIPELINE_FILE};
use planogram_core::eval::evaluate_racks;
use planogram_core::ingest::StoreConfig;
use planogram_core::model::Catalog;
use planogram_core::power::{battery_life, daily_consumption, harvest_offset, simulate_node, PowerConfig};
use planogram_service::{AppState, ServiceConfig};

#[derive(Parser)]
#[command(name = "planogram", version, about = "Shelf planogram compliance")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP ingestion service.
    Serve(ServeArgs),
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long, default_value = "0.0.0.0")]
    host: String,
    #[arg(long, default_value = "storage")]
    storage_root: PathBuf,
    #[arg(long)]
    store_config: PathBuf,
    /// Pipeline thresholds and provider selection.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    workers: usize,
    #[arg(long, default_value_t = 64)]
    queue_capacity: usize,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Run the pipeline over a dataset directory and score it.
    Run {
        #[arg(long)]
        dataset: PathBuf,
        /// Defaults to the dataset's own pipeline.toml.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// TOML file with generator settings.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        racks: Option<usize>,
        #[arg(long, value_parser = parse_perturbation)]
        perturbation: Option<PerturbationKind>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Energy budget and node simulation; prints a per-day ledger as JSON lines.
    Power {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        days: Option<u64>,
    },
}

fn parse_perturbation(s: &str) -> Result<PerturbationKind, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_")))
        .map_err(|_| format!("unknown perturbation {s:?}"))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Serve(args) => serve(args),
        Command::Eval(EvalCommand::Run { dataset, config, out }) => eval_run(&dataset, config.as_deref(), &out),
        Command::Eval(EvalCommand::Synth { seed, spec, racks, perturbation, out }) => {
            let mut spec = match spec {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p)?).with_context(|| p.display().to_string())?,
                None => SynthSpec::default(),
            };
            if let Some(n) = racks {
                spec.racks = n;
            }
            if let Some(k) = perturbation {
                spec.perturbation = k;
            }
            let ds = generate_synthetic(seed, &spec)?;
            ds.write(&out)?;
            println!("wrote {} racks to {}", ds.racks.len(), out.display());
            Ok(())
        }
        Command::Eval(EvalCommand::Power { config, days }) => power(config.as_deref(), days),
    }
}

fn serve(args: ServeArgs) -> Result<()> {
    let pipeline = match &args.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let store_config = StoreConfig::load(&args.store_config)?;
    let catalog = Catalog::load(&store_config.catalog)
        .with_context(|| format!("loading catalog {}", store_config.catalog.display()))?;
    let (detector, features) = pipeline.providers.build()?;
    let config = ServiceConfig {
        storage_root: args.storage_root,
        workers: args.workers,
        queue_capacity: args.queue_capacity,
    };
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let state = AppState::start(&config, store_config, catalog, detector, features, pipeline.search)?;
        let listener = tokio::net::TcpListener::bind((args.host.as_str(), args.port)).await?;
        log::info!("listening on {}", listener.local_addr()?);
        planogram_service::serve(listener, state).await?;
        Ok(())
    })
}

fn eval_run(dataset: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let config_path = config.map(Path::to_path_buf).unwrap_or_else(|| dataset.join(PIPELINE_FILE));
    let pipeline = if config_path.exists() {
        PipelineConfig::load(&config_path)?
    } else if config.is_some() {
        bail!("config {} not found", config_path.display());
    } else {
        PipelineConfig::default()
    };
    let (_, catalog, racks) = load_dataset(dataset)?;
    let (detector, features) = pipeline.providers.build()?;
    let started = std::time::Instant::now();
    let report = evaluate_racks(&racks, &catalog, detector.as_ref(), features.as_ref(), &pipeline.search)?;
    let elapsed = started.elapsed();

    std::fs::create_dir_all(out)?;
    let text = report.render();
    std::fs::write(out.join("report.txt"), &text)?;
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let mut traces = std::io::BufWriter::new(std::fs::File::create(out.join("traces.jsonl"))?);
    for r in &report.racks {
        for t in &r.trace {
            serde_json::to_writer(&mut traces, &serde_json::json!({ "rack": r.key, "trace": t }))?;
            traces.write_all(b"\n")?;
        }
    }
    traces.flush()?;
    print!("{text}");
    println!("evaluated {} racks in {:.2}s", report.racks.len(), elapsed.as_secs_f64());
    Ok(())
}

fn power(config: Option<&Path>, days: Option<u64>) -> Result<()> {
    let mut cfg: PowerConfig = match config {
        Some(p) => toml::from_str(&std::fs::read_to_string(p)?).with_context(|| p.display().to_string())?,
        None => PowerConfig::default(),
    };
    if let Some(d) = days {
        cfg.days = d;
    }
    cfg.node.validate().map_err(anyhow::Error::msg)?;
    cfg.change.validate()?;

    let mut feed = cfg.scene.build(cfg.frame_width, cfg.frame_height);
    let trace = simulate_node(cfg.days, feed.as_mut(), &cfg.node, &cfg.sources, &cfg.change);
    let stdout = std::io::stdout();
    let mut out = std::io::BufWriter::new(stdout.lock());
    for day in &trace.days {
        serde_json::to_writer(&mut out, day)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;

    eprintln!("daily consumption  {:.4} mAh", daily_consumption(&cfg.node));
    eprintln!("harvest offset     {:.4} mAh", harvest_offset(&cfg.sources, &cfg.node));
    eprintln!("battery life       {}", battery_life(&cfg.node, &cfg.sources));
    eprintln!(
        "simulated          {} days, {} wakes, {} uploads, {:.2} mAh left{}",
        trace.days.len(),
        trace.state.wakes,
        trace.state.transfers,
        trace.state.charge_mah(),
        trace
            .depleted_months()
            .map(|m| format!(", depleted after {m:.2} months"))
            .unwrap_or_default()
    );
    Ok(())
}
