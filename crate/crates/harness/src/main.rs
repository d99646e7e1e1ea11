//! `lwpr2`: dataset generation, model initialization and experiment runs.

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};

use lwpr2_core::sim::{read_jsonl, write_jsonl, Track, TrainingPair};
use lwpr2_core::trainer::{InitializedModels, Method, Trainer};

use lwpr2_harness::active::active_protocol;
use lwpr2_harness::bench::{flop_tables, measure_throughput};
use lwpr2_harness::config::ExperimentConfig;
use lwpr2_harness::protocols::{
    catastrophic_interference, evaluate_offline, init_models, modified_dynamics, run_online, trainer_config, MethodRow,
};
use lwpr2_harness::{report, scenario, soak};

#[derive(Parser)]
#[command(name = "lwpr2", version, about = "Online dynamics-model adaptation experiments")]
struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set stream.laps=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Experiment seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    Sysid,
    Stream,
    Validation,
    Shift,
    Soak,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Interference,
    Shift,
}

#[derive(Subcommand)]
enum Command {
    /// Print every config key with its effective value.
    ShowConfig,
    /// Simulate a dataset and write it as JSON lines.
    GenData {
        #[arg(long, value_enum)]
        scenario: Scenario,
        /// Regime for the sysid and shift scenarios.
        #[arg(long)]
        regime: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the network, mixture and regression models on a sysid dataset.
    TrainInit {
        /// Sysid dataset; simulated from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate the frozen initial network on a dataset.
    RunOffline {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Prequential adaptation, on a dataset or a full protocol.
    RunOnline {
        #[arg(long)]
        init: PathBuf,
        #[arg(long, conflicts_with = "protocol", requires = "method")]
        data: Option<PathBuf>,
        #[arg(long)]
        method: Option<String>,
        #[arg(long, value_enum, required_unless_present = "data")]
        protocol: Option<Protocol>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Closed-loop laps under MPPI for every configured method.
    RunActive {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Long alternating-regime run with checkpoint and restore cycles.
    RunSoak {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-layer and per-field FLOP tables plus measured throughput.
    BenchFlops {
        #[arg(long)]
        init: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let base = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut cfg = base.with_overrides(cli.overrides.iter().map(String::as_str))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn load_init(path: &Path) -> Result<InitializedModels> {
    InitializedModels::load(path).with_context(|| format!("loading initialized models from {}", path.display()))
}

fn load_pairs(path: &Path) -> Result<Vec<TrainingPair>> {
    let pairs = read_jsonl(path).with_context(|| format!("reading {}", path.display()))?;
    if pairs.is_empty() {
        bail!("{} holds no training pairs", path.display());
    }
    Ok(pairs)
}

fn gen_data(cfg: &ExperimentConfig, scenario: Scenario, regime: Option<&str>) -> Result<Vec<TrainingPair>> {
    let seed = cfg.seed;
    match scenario {
        Scenario::Sysid => scenario::sysid_dataset(cfg, regime.unwrap_or(&cfg.sysid.regime), seed),
        Scenario::Stream => scenario::cw_stream(cfg, seed),
        Scenario::Validation => scenario::ccw_validation(cfg, seed),
        Scenario::Shift => scenario::shift_stream(cfg, regime.unwrap_or(&cfg.shift.regime), seed),
        Scenario::Soak => Ok(scenario::soak_stream(cfg, seed)?.into_iter().flat_map(|(_, p)| p).collect()),
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let seed = cfg.seed;
    match cli.command {
        Command::ShowConfig => print!("{}", cfg.to_kv_string()),
        Command::GenData { scenario, regime, out } => {
            let pairs = gen_data(&cfg, scenario, regime.as_deref())?;
            write_jsonl(&out, &pairs)?;
            println!("wrote {} pairs to {}", pairs.len(), out.display());
        }
        Command::TrainInit { data, out } => {
            let init = match data {
                Some(p) => {
                    let pairs = load_pairs(&p)?;
                    let init_cfg = lwpr2_core::trainer::InitConfig { seed: cfg.init.seed ^ seed, ..cfg.init.clone() };
                    lwpr2_core::trainer::initialize_joint(&pairs, &init_cfg)?
                }
                None => init_models(&cfg, &cfg.sysid.regime, seed)?,
            };
            init.save(&out)?;
            println!("fields per channel {:?}, mixture components {}", init.lwpr.field_counts(), init.gmm.k());
        }
        Command::RunOffline { init, data, out } => {
            let init = load_init(&init)?;
            let pairs = load_pairs(&data)?;
            let trainer = Trainer::new(trainer_config(&cfg, Method::None, seed), &init)?;
            let before = trainer.snapshot().params.checksum();
            let summary = evaluate_offline(&trainer, &pairs)?;
            if trainer.snapshot().params.checksum() != before {
                bail!("offline evaluation changed the model");
            }
            let rows = [MethodRow { method: "base".into(), summary }];
            report::write_mse_tables(&out.join("offline.csv"), &[("offline", &rows)])?;
            print!("{}", report::format_mse_table("Offline", &rows));
        }
        Command::RunOnline { init, data, method, protocol, out } => {
            let init = load_init(&init)?;
            match (data, protocol) {
                (Some(data), _) => {
                    let method = Method::parse(method.as_deref().unwrap_or("lwpr2"))?;
                    let pairs = load_pairs(&data)?;
                    let run = run_online(&init, trainer_config(&cfg, method, seed), &pairs)?;
                    let rows = [MethodRow { method: method.name().into(), summary: run.summary }];
                    report::write_mse_tables(&out.join("online.csv"), &[("online", &rows)])?;
                    report::write_steps(&out.join("steps.csv"), &run.steps)?;
                    print!("{}", report::format_mse_table("Online", &rows));
                }
                (None, Some(Protocol::Interference)) => {
                    let r = catastrophic_interference(&cfg, &init, seed)?;
                    report::write_mse_tables(&out.join("interference.csv"), &[("online", &r.online), ("retention", &r.retention)])?;
                    print!("{}", report::format_mse_table("Online adaptation (clockwise stream)", &r.online));
                    print!("{}", report::format_mse_table("Retention (counter-clockwise laps)", &r.retention));
                }
                (None, Some(Protocol::Shift)) => {
                    let r = modified_dynamics(&cfg, &init, &cfg.shift.regime, seed)?;
                    report::write_mse_tables(&out.join("shift.csv"), &[("shift", &r.rows)])?;
                    print!("{}", report::format_mse_table(&format!("Online adaptation ({})", r.regime), &r.rows));
                }
                (None, None) => bail!("give --data or --protocol"),
            }
        }
        Command::RunActive { init, out } => {
            let init = load_init(&init)?;
            let r = active_protocol(&cfg, &init, seed)?;
            report::write_active(&out, &r)?;
            report::write_telemetry(&out.join("telemetry.jsonl"), &r)?;
            print!("{}", report::format_active(&r));
        }
        Command::RunSoak { init, out } => {
            let init = load_init(&init)?;
            std::fs::create_dir_all(&out)?;
            let r = soak::soak_protocol(&cfg, &init, seed, Some(&out))?;
            report::write_soak(&out.join("soak.csv"), &r)?;
            print!("{}", report::format_soak(&r));
        }
        Command::BenchFlops { init, out } => {
            let init = load_init(&init)?;
            let tables = flop_tables(&init);
            if let Some(out) = out {
                report::write_flops(&out.join("flops.csv"), &tables)?;
            }
            print!("{}", report::format_flops(&tables));
            let track = Track::new(cfg.track.spec())?;
            let t = measure_throughput(&init, &track, &cfg.mppi, 20_000)?;
            println!(
                "predictions/s: network {:.3e}, regression ensemble {:.3e} ({:.1}x), controller {:.3e}",
                t.network_per_s,
                t.lwpr_per_s,
                t.network_speedup(),
                t.controller_per_s
            );
        }
    }
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
