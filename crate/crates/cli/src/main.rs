use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sgg_core::backends::{serve_mock, HttpTransport, MockScript, MockTransport, ModelClient, Transport};
use sgg_core::graph::{parse_graph_lines, ImageRecord};
use sgg_core::pipeline::{load_config, load_manifest, BatchResult, Pipeline, PipelineConfig};
use sgg_core::retrieval::{evaluate, parse_caption_query, parse_query_lines, QueryGraph};
use sgg_core::stats::predicate_stats;
use sgg_core::Error;
use tracing_subscriber::EnvFilter;

/// Zero-shot scene graph generation against remote model backends.
#[derive(Parser)]
#[command(name = "sgg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the scene graph of a single image.
    Run {
        #[arg(long)]
        image: PathBuf,
        /// Image id written into the graph; defaults to the file stem.
        #[arg(long)]
        id: Option<String>,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Build scene graphs for every image in a JSONL manifest.
    Batch {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Predicate histogram, top-k mass and entropy of a graphs file.
    Stats {
        #[arg(long)]
        graphs: PathBuf,
        #[arg(long, default_value_t = 50)]
        top_k: usize,
    },
    /// Serve a mock script over the backend wire protocol.
    MockServe {
        #[arg(long)]
        script: PathBuf,
        #[arg(long, default_value_t = 8700)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Sentence-to-graph retrieval: rank a gallery of graphs for each query.
    S2gr {
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "20,100")]
        k: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Turn query captions into triplets with the completion backend.
        #[arg(long)]
        parse_captions: bool,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        mock: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Graphs JSONL output; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run report (resolved config, telemetry, timings) as JSON.
    #[arg(long)]
    report: Option<PathBuf>,
    #[arg(long)]
    debug_artifacts: bool,
    #[arg(long)]
    max_in_flight: Option<usize>,
    /// Answer backend calls from a mock script instead of HTTP.
    #[arg(long)]
    mock: Option<PathBuf>,
}

/// Failures that map to exit code 2.
#[derive(Debug)]
struct ConfigError(anyhow::Error);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for ConfigError {}

fn config_err(e: impl Into<anyhow::Error>) -> anyhow::Error {
    ConfigError(e.into()).into()
}

fn resolve_config(path: Option<&Path>, max_in_flight: Option<usize>, debug: bool) -> anyhow::Result<PipelineConfig> {
    let mut cfg = match path {
        Some(p) => load_config(p).map_err(config_err)?,
        None => PipelineConfig::default(),
    };
    cfg.endpoints.apply_env();
    if let Some(n) = max_in_flight {
        cfg.max_in_flight = n;
    }
    cfg.debug_artifacts |= debug;
    cfg.validate().map_err(config_err)?;
    Ok(cfg)
}

fn make_client(cfg: &PipelineConfig, mock: Option<&Path>) -> anyhow::Result<ModelClient> {
    let transport: Arc<dyn Transport> = match mock {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display())).map_err(config_err)?;
            Arc::new(MockTransport::new(MockScript::from_jsonl(&text).map_err(config_err)?))
        }
        None => Arc::new(HttpTransport::new(cfg.endpoints.clone()).map_err(config_err)?),
    };
    Ok(ModelClient::new(transport, cfg.endpoints.max_retries, cfg.endpoints.backoff()))
}

fn write_or_print(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

async fn run_images(images: Vec<ImageRecord>, args: &RunArgs) -> anyhow::Result<ExitCode> {
    let cfg = resolve_config(args.config.as_deref(), args.max_in_flight, args.debug_artifacts)?;
    let client = make_client(&cfg, args.mock.as_deref())?;
    let pipeline = Pipeline::new(cfg, client).map_err(config_err)?;
    let result: BatchResult = pipeline.run_batch(&images).await?;

    write_or_print(args.out.as_deref(), &result.graphs_jsonl()?)?;
    let report = serde_json::to_string_pretty(&result.report)?;
    if let Some(p) = &args.report {
        fs::write(p, &report).with_context(|| format!("writing {}", p.display()))?;
    }
    if let Some(dir) = &pipeline.config().artifact_dir {
        result.write_artifacts(dir, pipeline.config().debug_artifacts)?;
        fs::write(dir.join("report.json"), &report)?;
    }
    let c = result.report.counts;
    eprintln!("graphs={} discarded={} failed={}", c.graphs, c.discarded, c.failed);
    for r in result.report.images.iter().filter(|r| r.error.is_some()) {
        eprintln!("{}: {}", r.image_id, r.error.as_deref().unwrap_or_default());
    }
    Ok(if result.has_failures() { ExitCode::from(1) } else { ExitCode::SUCCESS })
}

async fn s2gr(
    gallery: &Path,
    queries: &Path,
    ks: &[usize],
    out: Option<&Path>,
    parse_captions: bool,
    config: Option<&Path>,
    mock: Option<&Path>,
) -> anyhow::Result<ExitCode> {
    let graphs = parse_graph_lines(&fs::read_to_string(gallery).with_context(|| format!("reading {}", gallery.display()))?)
        .map_err(config_err)?;
    let inputs = parse_query_lines(&fs::read_to_string(queries).with_context(|| format!("reading {}", queries.display()))?)
        .map_err(config_err)?;
    let client = if parse_captions {
        let cfg = resolve_config(config, None, false)?;
        Some((make_client(&cfg, mock)?, cfg.completion_max_tokens))
    } else {
        None
    };
    let mut parsed = Vec::with_capacity(inputs.len());
    for q in inputs {
        let triplets = match (q.triplets, q.caption, &client) {
            (Some(t), _, _) => t,
            (None, Some(caption), Some((client, max_tokens))) => parse_caption_query(client, &caption, *max_tokens).await?,
            (None, Some(_), None) => bail!(config_err(anyhow::anyhow!(
                "query {} has only a caption; pass --parse-captions",
                q.query_id
            ))),
            (None, None, _) => bail!(config_err(anyhow::anyhow!("query {} has neither triplets nor caption", q.query_id))),
        };
        parsed.push(QueryGraph {
            query_id: q.query_id,
            gold: q.gold,
            triplets,
        });
    }
    let report = evaluate(&parsed, &graphs, ks).map_err(config_err)?;
    for (k, r) in &report.recall_at {
        eprintln!("R@{k} = {r:.4}");
    }
    eprintln!("median rank = {}", report.median_rank);
    write_or_print(out, &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(ExitCode::SUCCESS)
}

async fn dispatch(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run { image, id, common } => {
            let id = match id {
                Some(id) => id,
                None => image
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .context("image path has no file name")?,
            };
            let record = ImageRecord::from_path(id, &image).map_err(config_err)?;
            run_images(vec![record], &common).await
        }
        Command::Batch { manifest, common } => {
            let images = load_manifest(&manifest).map_err(config_err)?;
            run_images(images, &common).await
        }
        Command::Stats { graphs, top_k } => {
            let text = fs::read_to_string(&graphs).with_context(|| format!("reading {}", graphs.display()))?;
            let parsed = parse_graph_lines(&text).map_err(config_err)?;
            let stats = predicate_stats(&parsed, top_k).map_err(config_err)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::MockServe { script, port, host } => {
            let text = fs::read_to_string(&script)
                .with_context(|| format!("reading {}", script.display()))
                .map_err(config_err)?;
            let script = MockScript::from_jsonl(&text).map_err(config_err)?;
            let listener = tokio::net::TcpListener::bind((host.as_str(), port))
                .await
                .with_context(|| format!("binding {host}:{port}"))?;
            eprintln!("mock backend on http://{} ({} scripted responses)", listener.local_addr()?, script.len());
            serve_mock(Arc::new(script), listener).await?;
            Ok(ExitCode::SUCCESS)
        }
        Command::S2gr {
            gallery,
            queries,
            k,
            out,
            parse_captions,
            config,
            mock,
        } => s2gr(&gallery, &queries, &k, out.as_deref(), parse_captions, config.as_deref(), mock.as_deref()).await,
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("warn")))
        .with_writer(std::io::stderr)
        .init();
    match dispatch(Cli::parse()).await {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let config = e.is::<ConfigError>()
                || matches!(e.downcast_ref::<Error>(), Some(Error::Config(_) | Error::Field { .. }));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
