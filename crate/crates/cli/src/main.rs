//! `fedseg`: generate phantom data, train and evaluate segmentation models,
//! and run federated sessions over TCP.

use std::fs;
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use fedseg_core::experiment::{self, ClinicalReference, EvalProtocol, RunConfig, TrainMode};
use fedseg_core::fedavg::{self, TransportMode};
use fedseg_core::phantom::{self, PhantomConfig, SignalDropout};
use fedseg_core::pipeline::{CoordinateMode, PostProcess};
use fedseg_core::report;
use fedseg_core::transport::{self, ClientHello, ClientOptions, ServerOptions};
use fedseg_core::weights;

const SEED_ENV: &str = "FEDSEG_SEED";

#[derive(Parser)]
#[command(name = "fedseg", version, about = "Federated IVUS plaque segmentation on synthetic phantoms")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Centralized,
    Federated,
}

#[derive(Clone, Copy, ValueEnum)]
enum Coords {
    Cartesian,
    Polar,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Holdout,
    Cv,
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    InProcess,
    Wire,
}

#[derive(clap::Args, Clone)]
struct RunArgs {
    /// JSON run configuration (fed, unet, pipeline sections).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<Mode>,
    #[arg(long, value_enum)]
    coords: Option<Coords>,
    /// Post-processing of binarised masks.
    #[arg(long, value_enum)]
    post: Option<Switch>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a phantom dataset.
    Gen {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 45)]
        cases: usize,
        /// Low,moderate,high case proportions.
        #[arg(long, value_delimiter = ',', num_args = 3)]
        bands: Option<Vec<f64>>,
        /// JSON phantom configuration.
        #[arg(long)]
        phantom: Option<PathBuf>,
        /// Suppress echoes in lateral sectors.
        #[arg(long)]
        dropout: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate on a dataset.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum)]
        protocol: Option<Protocol>,
        /// Fold count for cross-validation.
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, value_enum)]
        transport: Option<Transport>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated server: waits for clients, aggregates, evaluates the holdout.
    Serve {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        manifest: PathBuf,
        /// Seconds to wait for all clients to join.
        #[arg(long, default_value_t = 120)]
        timeout: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Federated client holding one partition of the training cases.
    Client {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value = "127.0.0.1:7878")]
        connect: String,
        #[arg(long)]
        id: u32,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Evaluate saved weights on every case of a dataset.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rewrite CSV and SVG outputs from a saved report.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(p) => serde_json::from_slice(&fs::read(p).with_context(|| format!("reading {}", p.display()))?)
            .with_context(|| format!("parsing {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(m) = args.mode {
        cfg.mode = match m {
            Mode::Centralized => TrainMode::Centralized,
            Mode::Federated => TrainMode::Federated,
        };
    }
    if let Some(c) = args.coords {
        cfg.pipeline.coordinate_mode = match c {
            Coords::Cartesian => CoordinateMode::Cartesian,
            Coords::Polar => CoordinateMode::Polar,
        };
    }
    let post_on = match args.post {
        Some(s) => matches!(s, Switch::On),
        None => cfg.pipeline.postprocess != PostProcess::None,
    };
    cfg.pipeline.postprocess = match (post_on, cfg.pipeline.coordinate_mode) {
        (false, _) => PostProcess::None,
        (true, CoordinateMode::Polar) => PostProcess::RadialConsolidate,
        (true, CoordinateMode::Cartesian) => PostProcess::LargestComponentFill,
    };
    if let Ok(s) = std::env::var(SEED_ENV) {
        cfg.fed.seed = s.trim().parse().with_context(|| format!("{SEED_ENV}={s:?} is not an integer"))?;
    }
    Ok(cfg)
}

#[derive(Serialize)]
struct RunInfo<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    label: String,
    seed: u64,
    dataset_seed: u64,
    manifest: String,
    config: &'a RunConfig,
    weights: Vec<String>,
    timings_s: std::collections::BTreeMap<String, f64>,
    reference: ClinicalReference,
}

fn write_run_info(out: &Path, info: &RunInfo) -> Result<()> {
    fs::write(out.join("run.json"), serde_json::to_string_pretty(info)? + "\n")?;
    Ok(())
}

fn weight_names(n: usize) -> Vec<String> {
    if n == 1 {
        vec!["weights.ivwt".into()]
    } else {
        (0..n).map(|f| format!("weights_fold{f}.ivwt")).collect()
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { seed, cases, bands, phantom: phantom_cfg, dropout, out } => {
            let mut cfg: PhantomConfig = match phantom_cfg {
                Some(p) => serde_json::from_slice(&fs::read(&p)?)?,
                None => PhantomConfig::default(),
            };
            if dropout {
                cfg.dropout = Some(SignalDropout::lateral());
            }
            let mix = match bands {
                Some(b) => [b[0], b[1], b[2]],
                None => phantom::DEFAULT_BAND_MIX,
            };
            let manifest = phantom::gen_dataset(seed, cases, mix, &cfg, &out)?;
            let frames: usize = manifest.cases.iter().map(|c| c.frame_count).sum();
            println!("wrote {} cases ({frames} frames) to {}", manifest.cases.len(), out.display());
        }
        Command::Train { run, manifest, protocol, folds, transport, out } => {
            let mut cfg = load_config(&run)?;
            if let Some(p) = protocol {
                cfg.protocol = match p {
                    Protocol::Holdout => EvalProtocol::Holdout,
                    Protocol::Cv => EvalProtocol::CrossValidation { k: folds },
                };
            }
            if let Some(t) = transport {
                cfg.transport = match t {
                    Transport::InProcess => TransportMode::InProcess,
                    Transport::Wire => TransportMode::Wire,
                };
            }
            let (meta, cases) = phantom::load_dataset(&manifest)?;
            let started = Instant::now();
            let output = experiment::run_experiment(&cases, &cfg)?;
            fs::create_dir_all(&out)?;
            let names = weight_names(output.weights.len());
            for (p, name) in output.weights.iter().zip(&names) {
                weights::write_file(p, out.join(name))?;
            }
            report::emit_report(&output.report, &out)?;
            let mut timings = output.timings_s.clone();
            timings.insert("total".into(), started.elapsed().as_secs_f64());
            write_run_info(
                &out,
                &RunInfo {
                    tool: "fedseg",
                    version: env!("CARGO_PKG_VERSION"),
                    command: "train",
                    label: cfg.label(),
                    seed: cfg.fed.seed,
                    dataset_seed: meta.seed,
                    manifest: manifest.display().to_string(),
                    config: &cfg,
                    weights: names,
                    timings_s: timings,
                    reference: ClinicalReference::default(),
                },
            )?;
            let a = &output.report.aggregate;
            println!(
                "{}: DSC eem {:.4} lumen {:.4} plaque {:.4}",
                cfg.label(),
                a.eem.dsc,
                a.lumen.dsc,
                a.plaque.dsc
            );
        }
        Command::Serve { run, listen, manifest, timeout, out } => {
            let cfg = load_config(&run)?;
            let (meta, cases) = phantom::load_dataset(&manifest)?;
            let (_, hold, unet) = experiment::holdout_plan(&cases, &cfg)?;
            let listener = TcpListener::bind(&listen).with_context(|| format!("binding {listen}"))?;
            println!("listening on {} for {} clients", listener.local_addr()?, cfg.fed.n_clients);
            let opts = ServerOptions {
                n_clients: cfg.fed.n_clients,
                rounds: cfg.fed.rounds,
                handshake_timeout: Duration::from_secs(timeout),
                io_timeout: None,
            };
            let started = Instant::now();
            let initial = fedavg::init_pair(&unet, cfg.fed.seed)?;
            let params = transport::run_server(&listener, &opts, initial, |round, hellos, updates| {
                let counts: Vec<u64> = hellos.iter().map(|h| h.sample_count).collect();
                println!("round {round}: aggregating {} updates", updates.len());
                fedavg::aggregate(&updates, &counts)
            })?;
            fs::create_dir_all(&out)?;
            weights::write_file(&params, out.join("weights.ivwt"))?;
            let hold_cases: Vec<_> = hold.iter().map(|&i| &cases[i]).collect();
            let mut rep = experiment::Report {
                label: format!("{} (tcp)", cfg.label()),
                cases: experiment::evaluate_params(&params, &hold_cases, &unet, &cfg.pipeline, 0)?,
                ..Default::default()
            };
            rep.finalize()?;
            report::emit_report(&rep, &out)?;
            let mut timings = std::collections::BTreeMap::new();
            timings.insert("total".into(), started.elapsed().as_secs_f64());
            write_run_info(
                &out,
                &RunInfo {
                    tool: "fedseg",
                    version: env!("CARGO_PKG_VERSION"),
                    command: "serve",
                    label: cfg.label(),
                    seed: cfg.fed.seed,
                    dataset_seed: meta.seed,
                    manifest: manifest.display().to_string(),
                    config: &cfg,
                    weights: vec!["weights.ivwt".into()],
                    timings_s: timings,
                    reference: ClinicalReference::default(),
                },
            )?;
        }
        Command::Client { run, connect, id, manifest } => {
            let cfg = load_config(&run)?;
            if cfg.mode != TrainMode::Federated {
                bail!("client sessions need federated mode");
            }
            let (_, cases) = phantom::load_dataset(&manifest)?;
            let (train, _, unet) = experiment::holdout_plan(&cases, &cfg)?;
            let mut sets = experiment::client_datasets(&cases, &train, &cfg)?;
            let Some(data) = sets.get_mut(id as usize).map(std::mem::take) else {
                bail!("client id {id} out of range for {} clients", cfg.fed.n_clients);
            };
            let hello = ClientHello { client_id: id, sample_count: data.len() as u64 };
            let opts = ClientOptions { connect_timeout: Duration::from_secs(60), io_timeout: None };
            let addr: std::net::SocketAddr = connect.parse().with_context(|| format!("bad address {connect}"))?;
            transport::run_client(addr, hello, &opts, |round, global| {
                let u = fedavg::client_update(id, round, &global, &data, &unet, &cfg.fed)?;
                println!("client {id} round {round}: loss eem {:.4} lumen {:.4}", u.eem_loss, u.lumen_loss);
                Ok(u.params)
            })?;
        }
        Command::Eval { run, weights: wpath, manifest, out } => {
            let cfg = load_config(&run)?;
            let (_, cases) = phantom::load_dataset(&manifest)?;
            let params = weights::read_file(&wpath)?;
            let rep = experiment::evaluate_dataset(&params, &cases, &cfg)?;
            report::emit_report(&rep, &out)?;
            let a = &rep.aggregate;
            println!("DSC eem {:.4} lumen {:.4} plaque {:.4}", a.eem.dsc, a.lumen.dsc, a.plaque.dsc);
        }
        Command::Report { input, out } => {
            let rep = report::load_report(&input)?;
            report::emit_report(&rep, &out)?;
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
