use std::fs;
use std::io::BufReader;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use protoflow::assembler::export_project_json;
use protoflow::evalkit::{
    self, AblationConfig, EvalEnv, FeatureExtractor, FeatureSet, ProjectionExtractor,
};
use protoflow::kb::{load_knowledge_base, stats};
use protoflow::retrieval::{retrieve_knowledge, RetrievalConfig};
use protoflow::{DesignInput, Layout, Prototype};
use protoflow_service::api::{router, AppState};
use protoflow_service::config::ServiceConfig;
use protoflow_service::engine::Engine;
use protoflow_service::store::ProjectStore;

/// Writes a line to stdout; a closed pipe (`| head`) is not an error.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        match writeln!(std::io::stdout().lock(), $($arg)*) {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => {}
            r => r?,
        }
    }};
}

#[derive(Parser)]
#[command(name = "protoflow", version, about = "Generate editable UI prototypes from a prompt and a wireframe")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML service configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the HTTP API.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate one prototype and write it to a file.
    Generate {
        #[arg(long)]
        prompt: String,
        /// Layout JSON file.
        #[arg(long)]
        layout: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, value_enum, default_value_t = Format::Svg)]
        format: Format,
        #[command(flatten)]
        common: Common,
    },
    /// Export a stored project.
    Export {
        #[arg(long)]
        project: String,
        #[arg(long, value_enum, default_value_t = Format::Svg)]
        format: Format,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Inspect a knowledge base.
    Kb {
        #[command(subcommand)]
        command: KbCommand,
    },
    /// Evaluation metrics.
    Eval {
        #[command(subcommand)]
        command: EvalCommand,
    },
}

#[derive(Subcommand)]
enum KbCommand {
    /// Parse a knowledge base file or directory and report the first error.
    Validate { path: PathBuf },
    /// Record, component and category counts as JSON.
    Stats { path: Option<PathBuf> },
    /// Top-k records for a prompt and layout.
    Query {
        #[arg(long)]
        prompt: String,
        #[arg(long)]
        layout: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Rasterize SVG files and write their feature vectors.
    Features {
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        svgs: Vec<PathBuf>,
    },
    /// FID between two feature files.
    Fid {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        gen: PathBuf,
    },
    /// Mean pairwise distance within one feature file.
    Gd {
        #[arg(long)]
        features: PathBuf,
    },
    /// Generate under each configuration and score against a reference.
    Ablate {
        /// JSON list of {"name", "flags"}; the standard table when omitted.
        #[arg(long)]
        configs: Option<PathBuf>,
        /// JSON array (or one object per line) of design inputs.
        #[arg(long)]
        inputs: PathBuf,
        /// Reference feature file; defaults to the full pipeline at --reference-seed.
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long, default_value_t = 1001)]
        reference_seed: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the report as JSON here as well as printing the table.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Svg,
    Json,
}

fn load_config(common: &Common) -> anyhow::Result<ServiceConfig> {
    match &common.config {
        Some(path) => ServiceConfig::load(path),
        None => Ok(ServiceConfig {
            data_dir: PathBuf::from("data"),
            ..ServiceConfig::default()
        }),
    }
}

fn read_layout(path: &Path) -> anyhow::Result<Layout> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading layout {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing layout {}", path.display()))
}

fn read_inputs(path: &Path) -> anyhow::Result<Vec<DesignInput>> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading inputs {}", path.display()))?;
    if text.trim_start().starts_with('[') {
        return serde_json::from_str(&text)
            .with_context(|| format!("parsing inputs {}", path.display()));
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .with_context(|| format!("{}: line {}", path.display(), i + 1))
        })
        .collect()
}

fn read_features(path: &Path) -> anyhow::Result<FeatureSet> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (header, features) = evalkit::read_feature_file(BufReader::new(file))
        .with_context(|| format!("reading features {}", path.display()))?;
    log::info!(
        "{}: {} vectors, d={}, extractor {}",
        path.display(),
        features.len(),
        header.d,
        header.extractor_id
    );
    Ok(features)
}

fn write_prototype(prototype: &Prototype, format: Format, out: &Path) -> anyhow::Result<()> {
    let body = match format {
        Format::Svg => prototype.svg.clone(),
        Format::Json => export_project_json(prototype)?,
    };
    fs::write(out, body).with_context(|| format!("writing {}", out.display()))
}

async fn serve(
    host: String,
    port: u16,
    data_dir: Option<PathBuf>,
    common: Common,
) -> anyhow::Result<()> {
    let mut config = load_config(&common)?;
    if let Some(dir) = data_dir {
        config.data_dir = dir;
    }
    let engine = tokio::task::spawn_blocking(move || {
        let engine = Engine::from_config(&config)?;
        anyhow::Ok((engine, config))
    })
    .await??;
    let (engine, config) = engine;
    let store = ProjectStore::open(&config.data_dir)?;
    log::info!(
        "{} projects loaded from {}",
        store.list().len(),
        store.dir().display()
    );
    let app = router(AppState::new(Arc::new(engine), Arc::new(store)));
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .with_context(|| format!("bad listen address {host}:{port}"))?;
    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .with_context(|| format!("binding {addr}"))?;
    log::info!("listening on http://{}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Serve {
            port,
            host,
            data_dir,
            common,
        } => tokio::runtime::Builder::new_multi_thread()
            .enable_all()
            .build()?
            .block_on(serve(host, port, data_dir, common)),
        Command::Generate {
            prompt,
            layout,
            out,
            seed,
            format,
            common,
        } => {
            let mut config = load_config(&common)?;
            if let Some(seed) = seed {
                config.pipeline.seed = Some(seed);
            }
            let engine = Engine::from_config(&config)?;
            let input = DesignInput {
                prompt,
                layout: read_layout(&layout)?,
            };
            let trace = engine.pipeline().generate_prototype(&input).map_err(|e| {
                anyhow::anyhow!("generation failed at stage {}: {e}", e.stage())
            })?;
            for warning in &trace.warnings {
                log::warn!("{warning}");
            }
            write_prototype(&Prototype::from_trace(&input, &trace)?, format, &out)?;
            out!("{}", out.display());
            Ok(())
        }
        Command::Export {
            project,
            format,
            out,
            data_dir,
            common,
        } => {
            let config = load_config(&common)?;
            let store = ProjectStore::open(data_dir.unwrap_or(config.data_dir))?;
            let project = store.get(&project)?;
            let Some(trace) = &project.trace else {
                bail!("project `{}` has not been generated yet", project.id);
            };
            write_prototype(&Prototype::from_trace(&project.input, trace)?, format, &out)?;
            out!("{}", out.display());
            Ok(())
        }
        Command::Kb { command } => match command {
            KbCommand::Validate { path } => {
                let records = load_knowledge_base(&path)?;
                out!("{}: {} records ok", path.display(), records.len());
                Ok(())
            }
            KbCommand::Stats { path } => {
                let records = match path {
                    Some(p) => load_knowledge_base(&p)?,
                    None => protoflow::kb::sample_knowledge_base(),
                };
                out!("{}", serde_json::to_string_pretty(&stats(&records))?);
                Ok(())
            }
            KbCommand::Query {
                prompt,
                layout,
                k,
                common,
            } => {
                if k == 0 {
                    bail!("--k must be positive");
                }
                let engine = Engine::from_config(&load_config(&common)?)?;
                let input = DesignInput {
                    prompt,
                    layout: read_layout(&layout)?,
                };
                input.validate()?;
                let result = retrieve_knowledge(
                    engine.knowledge.index(),
                    &input,
                    engine.backends.embed.as_ref(),
                    RetrievalConfig { k },
                )?;
                out!("{}", serde_json::to_string_pretty(&result.hits)?);
                Ok(())
            }
        },
        Command::Eval { command } => eval(command),
    }
}

fn eval(command: EvalCommand) -> anyhow::Result<()> {
    match command {
        EvalCommand::Features { out, svgs } => {
            let extractor = ProjectionExtractor::default();
            let mut vectors = Vec::with_capacity(svgs.len());
            for path in &svgs {
                let svg = fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                let raster = evalkit::rasterize_svg(&svg, evalkit::RASTER_SIZE)
                    .with_context(|| format!("rasterizing {}", path.display()))?;
                vectors.push(extractor.extract(&raster));
            }
            let features = FeatureSet::with_dim(extractor.dim(), &vectors)?;
            let file =
                fs::File::create(&out).with_context(|| format!("creating {}", out.display()))?;
            evalkit::write_feature_file(std::io::BufWriter::new(file), &extractor.id(), &features)?;
            out!("{} vectors -> {}", features.len(), out.display());
            Ok(())
        }
        EvalCommand::Fid { real, gen } => {
            let value = evalkit::fid_from_features(&read_features(&real)?, &read_features(&gen)?)?;
            out!("{value:.6}");
            Ok(())
        }
        EvalCommand::Gd { features } => {
            out!("{:.6}", evalkit::gd(&read_features(&features)?)?);
            Ok(())
        }
        EvalCommand::Ablate {
            configs,
            inputs,
            reference,
            reference_seed,
            seed,
            out,
            common,
        } => {
            let configs = match configs {
                Some(path) => evalkit::parse_ablation_configs(
                    &fs::read_to_string(&path)
                        .with_context(|| format!("reading {}", path.display()))?,
                )?,
                None => evalkit::standard_configs(),
            };
            let inputs = read_inputs(&inputs)?;
            let mut config = load_config(&common)?;
            config.pipeline.seed = Some(seed);
            let engine = Engine::from_config(&config)?;
            let env = EvalEnv {
                backends: &engine.backends,
                knowledge: &engine.knowledge,
                icons: &engine.icons,
                base: &engine.config,
            };
            let extractor = ProjectionExtractor::default();
            let reference = match reference {
                Some(path) => read_features(&path)?,
                None => {
                    evalkit::generate_features(
                        &env,
                        &AblationConfig::full(),
                        reference_seed,
                        &inputs,
                        &extractor,
                    )?
                    .features
                }
            };
            let report = evalkit::run_ablation(&configs, &inputs, &env, &reference, &extractor)?;
            out!("{}", report.to_table().trim_end());
            if let Some(out) = out {
                fs::write(&out, serde_json::to_string_pretty(&report)?)
                    .with_context(|| format!("writing {}", out.display()))?;
            }
            Ok(())
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info,usvg=error")).init();
    if let Err(e) = run(Cli::parse().command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
