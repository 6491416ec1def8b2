use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use dante_core::cluster::Algorithm;
use dante_core::concepts::{AnnotationEvent, ConceptId, Severity};
use dante_core::ingest::{parse_flow_log, FlowReader, LogFormat};
use dante_core::pipeline::{training_corpus, ConceptView, Pipeline, PipelineConfig, StateStore};
use dante_core::port2vec::{train, EmbeddingTable, TrainConfig};
use dante_core::simgen::{catalog, generate, parse_scenario, write_csv};
use dante_core::window::{KeyMode, WindowConfig};
use dante_service::{router, ApiState};

#[derive(Parser)]
#[command(name = "dante", version, about = "Darknet port-sequence clustering and threat tracking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Process a flow log window by window, optionally serving the API.
    Run(RunArgs),
    /// Train a port embedding table from a flow log.
    TrainEmbeddings(TrainArgs),
    /// Ports closest to a port in an embedding table.
    Nearest {
        #[arg(long)]
        table: PathBuf,
        #[arg(long)]
        port: u16,
        #[arg(short, default_value_t = 10)]
        k: usize,
    },
    /// Generate a synthetic flow log with planted campaigns.
    Simgen(SimArgs),
    /// Inspect or annotate the concept registry of a stopped pipeline.
    Registry {
        #[command(subcommand)]
        action: RegistryAction,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Flow log path, or `-` for stdin.
    #[arg(long)]
    input: String,
    #[arg(long)]
    format: Option<LogFormat>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    state_dir: Option<PathBuf>,
    #[arg(long)]
    min_packets: Option<u64>,
    #[arg(long)]
    lateness_min: Option<u32>,
    #[arg(long)]
    window_min: Option<u32>,
    #[arg(long)]
    step_min: Option<u32>,
    #[arg(long)]
    sequence_key: Option<KeyMode>,
    #[arg(long)]
    max_seq_len: Option<usize>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    min_pts: Option<usize>,
    #[arg(long)]
    clusterer: Option<Algorithm>,
    #[arg(long)]
    jaccard_threshold: Option<f64>,
    /// Serve the HTTP API on this address, and keep serving after the
    /// input ends.
    #[arg(long)]
    serve: Option<SocketAddr>,
    /// Static dashboard assets served under /ui/.
    #[arg(long, requires = "serve")]
    ui_dir: Option<PathBuf>,
    /// Stop once this window index has been committed.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "csv")]
    format: LogFormat,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 5)]
    epochs: usize,
    #[arg(long, default_value_t = 5)]
    min_count: u64,
    #[arg(long, default_value_t = 3)]
    min_packets: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SimArgs {
    /// Scenario file, or the name of a built-in scenario.
    #[arg(long)]
    scenario: String,
    #[arg(long)]
    seed: Option<u64>,
    /// Flow log output path, or `-` for stdout.
    #[arg(long)]
    out: String,
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Subcommand)]
enum RegistryAction {
    List {
        #[arg(long)]
        state: PathBuf,
    },
    Show {
        id: String,
        #[arg(long)]
        state: PathBuf,
    },
    Annotate {
        id: String,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        severity: Severity,
        #[arg(long, default_value = "")]
        note: String,
        #[arg(long, default_value = "cli")]
        author: String,
    },
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::TrainEmbeddings(a) => train_embeddings(a),
        Command::Nearest { table, port, k } => nearest(&table, port, k),
        Command::Simgen(a) => simgen(a),
        Command::Registry { action } => registry(action),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn open_input(path: &str) -> io::Result<Box<dyn BufRead>> {
    if path == "-" {
        Ok(Box::new(BufReader::new(io::stdin())))
    } else {
        Ok(Box::new(BufReader::new(File::open(path).map_err(|e| io::Error::new(e.kind(), format!("{path}: {e}")))?)))
    }
}

fn run_config(a: &RunArgs) -> Result<PipelineConfig, Box<dyn std::error::Error>> {
    let mut c = match &a.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($field:expr, $arg:expr) => {
            if let Some(v) = $arg.clone() {
                $field = v;
            }
        };
    }
    set!(c.format, a.format);
    set!(c.embeddings, a.embeddings);
    set!(c.state_dir, a.state_dir);
    set!(c.min_packets, a.min_packets);
    set!(c.lateness_min, a.lateness_min);
    set!(c.key_mode, a.sequence_key);
    set!(c.max_sequence_len, a.max_seq_len);
    set!(c.clusterer.eps, a.eps);
    set!(c.clusterer.min_pts, a.min_pts);
    set!(c.clusterer.algorithm, a.clusterer);
    set!(c.tracker.jaccard_threshold, a.jaccard_threshold);
    if a.window_min.is_some() || a.step_min.is_some() {
        c.window = WindowConfig::new(
            a.window_min.unwrap_or(c.window.length_min()),
            a.step_min.unwrap_or(c.window.step_min()),
        )?;
    }
    Ok(c)
}

fn run(a: RunArgs) -> CliResult {
    let config = run_config(&a)?;
    let mut pipeline = Pipeline::open(config)?;
    let table = pipeline.table();
    let shared = pipeline.shared();

    let stop = Arc::new(AtomicBool::new(false));
    let runtime = match a.serve {
        Some(addr) => {
            let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(2).enable_all().build()?;
            let listener = rt
                .block_on(tokio::net::TcpListener::bind(addr))
                .map_err(|e| format!("cannot bind {addr}: {e}"))?;
            log::info!("serving API on http://{}", listener.local_addr()?);
            let app = router(
                ApiState {
                    shared: shared.clone(),
                    table: Some(table),
                },
                a.ui_dir.as_deref(),
            );
            rt.spawn(async move {
                if let Err(e) = axum::serve(listener, app).await {
                    log::error!("API server stopped: {e}");
                }
            });
            let flag = stop.clone();
            rt.spawn(async move {
                if tokio::signal::ctrl_c().await.is_ok() {
                    flag.store(true, Ordering::SeqCst);
                }
            });
            Some(rt)
        }
        None => None,
    };

    let format = pipeline.config().format;
    let mut reader = FlowReader::new(open_input(&a.input)?, format);
    let summary = pipeline.run_with(&mut reader, a.stop_after, |report, _| {
        log::info!(
            "window {}: {} sequences, {} clusters, {} noise, {} alerts",
            report.window,
            report.sequences,
            report.clusters.len(),
            report.noise,
            report.alerts
        );
    })?;
    let rejects = reader.rejects();
    if rejects.count > 0 {
        log::warn!("{} malformed lines skipped ({} IPv6)", rejects.count, rejects.ipv6());
    }
    println!("{}", serde_json::to_string(&summary)?);

    if runtime.is_some() {
        log::info!("input finished; serving until interrupted");
        while !stop.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(500));
            let n = pipeline.apply_pending_labels()?;
            if n > 0 {
                log::info!("applied {n} label(s)");
            }
        }
    }
    Ok(())
}

fn train_embeddings(a: TrainArgs) -> CliResult {
    let (records, rejects) = parse_flow_log(BufReader::new(File::open(&a.corpus)?), a.format)?;
    if rejects.count > 0 {
        log::warn!("{} malformed lines skipped", rejects.count);
    }
    let pc = PipelineConfig {
        min_packets: a.min_packets,
        ..Default::default()
    };
    let corpus = training_corpus(records, &pc);
    let config = TrainConfig {
        dim: a.dim,
        seed: a.seed,
        epochs: a.epochs,
        min_count: a.min_count,
        ..Default::default()
    };
    let table = train(&corpus, &config)?;
    let mut out = BufWriter::new(File::create(&a.out)?);
    table.export(&mut out)?;
    out.flush()?;
    log::info!("{} sequences, {} ports → {}", corpus.len(), table.len(), a.out.display());
    Ok(())
}

fn nearest(table: &Path, port: u16, k: usize) -> CliResult {
    let table = EmbeddingTable::import(BufReader::new(File::open(table)?))?;
    for (p, cos) in table.nearest_ports(port, k)? {
        println!("{p}\t{cos:.4}");
    }
    Ok(())
}

fn simgen(a: SimArgs) -> CliResult {
    let mut scenario = if Path::new(&a.scenario).is_file() {
        parse_scenario(&std::fs::read_to_string(&a.scenario)?)?
    } else {
        catalog::scenario(&a.scenario).ok_or_else(|| {
            format!(
                "`{}` is neither a file nor a built-in scenario ({})",
                a.scenario,
                catalog::SCENARIOS.join(", ")
            )
        })?
    };
    if let Some(seed) = a.seed {
        scenario.seed = seed;
    }
    let (records, truth) = generate(&scenario)?;
    if a.out == "-" {
        write_csv(&records, BufWriter::new(io::stdout().lock()))?;
    } else {
        write_csv(&records, BufWriter::new(File::create(&a.out)?))?;
    }
    if let Some(path) = a.truth {
        serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), &truth)?;
    }
    log::info!("{} records, {} campaign sources", records.len(), truth.sources.len());
    Ok(())
}

fn registry(action: RegistryAction) -> CliResult {
    let state_dir = match &action {
        RegistryAction::List { state } | RegistryAction::Show { state, .. } | RegistryAction::Annotate { state, .. } => state,
    };
    let store = StateStore::open(state_dir)?;
    let mut state = store
        .load_state()?
        .ok_or_else(|| format!("no pipeline state in {}", state_dir.display()))?;
    match action {
        RegistryAction::List { .. } => {
            println!("id\tseverity\tcategory\tfirst_seen\tlast_seen\toccurrences\tfirst_size\texemplar");
            for m in state.registry.models() {
                let ex = m.exemplars.first().map(|e| format!("{e:?}")).unwrap_or_default();
                println!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                    m.id,
                    m.severity(),
                    m.category,
                    m.first_seen,
                    m.last_seen,
                    m.occurrence_count,
                    m.first_size,
                    ex
                );
            }
        }
        RegistryAction::Show { id, .. } => {
            let m = state.registry.get(&ConceptId::from(id.as_str())).ok_or_else(|| format!("concept {id} not found"))?;
            println!("{}", serde_json::to_string_pretty(&ConceptView::from(m))?);
        }
        RegistryAction::Annotate {
            id,
            severity,
            note,
            author,
            ..
        } => {
            let event = AnnotationEvent {
                severity,
                note,
                author,
                at_ms: chrono::Utc::now().timestamp_millis(),
                idempotency_key: None,
            };
            let m = state.registry.annotate(&ConceptId::from(id.as_str()), event)?;
            println!("{} → {}", m.id, m.severity());
            store.save_state(&state)?;
        }
    }
    Ok(())
}
