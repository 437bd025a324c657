//! `ebl` command-line entry point.
//!
//! Configuration is TOML written as flat dotted keys (`train.lambda = 0.23`).
//! A config file only needs the keys it changes; `--print-config` dumps every
//! key with its default. The run seed resolves as `--seed` flag, then the
//! `EBL_SEED` environment variable, then the file's top-level `seed`.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use ebl_core::ebl::EblPair;
use ebl_core::margin::{verify_margin, MarginConfig};
use ebl_core::metrics::{
    evaluate, result_aucs, run_sweep, summarize_sweep, write_results_csv, write_sweep_csv, EvalConfig, PipelineConfig, SweepKind,
};
use ebl_core::numerics::Rng;
use ebl_core::stream::{
    detect_stream, inject_attack, session_to_frames, write_stream, DetectionReport, DetectorConfig, StreamHeader, StreamMeta,
    StreamReader,
};
use ebl_core::temporal::{train_fusion, FusionConfig, FusionModel};
use ebl_core::trainer::{train_ebl, TrainConfig};
use ebl_core::world::{World, WorldConfig};
use ebl_core::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Config {
    /// Seeds the world and every training and evaluation stream.
    seed: u64,
    /// Fraction of identities held out for evaluation.
    test_fraction: f64,
    /// Training seeds of a sweep; `seed` still fixes the world.
    sweep_seeds: Vec<u64>,
    world: WorldConfig,
    train: TrainConfig,
    fusion: FusionConfig,
    eval: EvalConfig,
    detect: DetectorConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            test_fraction: 0.2,
            sweep_seeds: vec![0, 1, 2],
            world: WorldConfig::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            eval: EvalConfig::default(),
            detect: DetectorConfig::default(),
        }
    }
}

impl Config {
    fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.world.seed = seed;
        self.train.seed = seed;
        self.fusion.seed = seed;
        self.eval.seed = seed;
        self
    }

    fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            world: self.world.clone(),
            test_fraction: self.test_fraction,
            train: self.train.clone(),
            fusion: self.fusion.clone(),
            eval: self.eval.clone(),
        }
    }
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::ConfigInvalid(_) | Error::BadArchitecture(_) | Error::TooFewIdentities(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "ebl", version, about = "Latent-space puppeteering detection on a synthetic talking-head world")]
struct Cli {
    /// Overrides EBL_SEED and the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Option<Command>,
    /// Print the full default configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build a latent world and write it to disk.
    GenWorld {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the twin EBL heads on the train identities.
    TrainEbl {
        #[arg(long)]
        world: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the pose regressor and the LSTM fusion on frozen heads.
    TrainFusion {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        ebl: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score balanced sessions and print the session-level AUC.
    Eval {
        #[arg(long)]
        world: PathBuf,
        #[arg(long)]
        ebl: PathBuf,
        #[arg(long)]
        lstm: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one call as a latent stream, optionally with a swapped reference.
    Simulate {
        #[arg(long)]
        world: PathBuf,
        #[arg(long, conflicts_with = "self_reenact", required_unless_present = "self_reenact")]
        attack: bool,
        #[arg(long = "self")]
        self_reenact: bool,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the online detector over a stream file.
    Detect {
        #[arg(long)]
        stream: PathBuf,
        #[arg(long)]
        ebl: PathBuf,
        #[arg(long)]
        lstm: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo check of the angular margin bound.
    VerifyMargin {
        #[arg(long, default_value_t = 0.05)]
        epsilon: f64,
        #[arg(long, default_value_t = 0.05)]
        gamma: f64,
        #[arg(long, default_value_t = 100_000)]
        trials: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        /// Largest impostor-to-center angle in degrees.
        #[arg(long, default_value_t = 0.0)]
        xi: f64,
    },
    /// Retrain and evaluate over a grid of one setting.
    Sweep {
        #[arg(long)]
        kind: String,
        /// Comma-separated values, or a file holding them.
        #[arg(long)]
        grid: String,
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Split {
    Train,
    Test,
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut Vec<String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        _ if prefix.ends_with(".seed") => {}
        _ => out.push(format!("{prefix} = {v}")),
    }
}

fn overlay(base: &mut toml::Value, user: toml::Value, path: &str) -> CliResult<()> {
    match (base, user) {
        (toml::Value::Table(b), toml::Value::Table(u)) => {
            for (k, v) in u {
                let key = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                if k == "seed" && !path.is_empty() {
                    return Err(CliError::Usage(format!("{key}: per-stage seeds follow the top-level seed")));
                }
                match b.get_mut(&k) {
                    Some(slot) => overlay(slot, v, &key)?,
                    None => return Err(CliError::Usage(format!("unknown config key {key}"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            *slot = v;
            Ok(())
        }
    }
}

fn default_value() -> toml::Value {
    toml::Value::try_from(Config::default()).expect("default config serializes")
}

fn load_config(arg: &ConfigArg, seed_flag: Option<u64>) -> CliResult<Config> {
    let mut value = default_value();
    if let Some(path) = &arg.config {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let user: toml::Value = toml::from_str(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        overlay(&mut value, user, "")?;
    }
    let cfg: Config = value.try_into().map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))?;
    let env = match std::env::var("EBL_SEED") {
        Ok(s) => Some(s.trim().parse::<u64>().map_err(|_| CliError::Usage(format!("EBL_SEED={s:?} is not a u64")))?),
        Err(_) => None,
    };
    let seed = seed_flag.or(env).unwrap_or(cfg.seed);
    let cfg = cfg.with_seed(seed);
    if !(0.0..1.0).contains(&cfg.test_fraction) || cfg.test_fraction == 0.0 {
        return Err(CliError::Usage(format!("test_fraction {} outside (0, 1)", cfg.test_fraction)));
    }
    Ok(cfg)
}

fn read_input(path: &Path, what: &str) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::Usage(format!("{what} {}: {e}", path.display())))
}

fn load_world(path: &Path) -> CliResult<World> {
    Ok(World::from_bytes(&read_input(path, "world")?)?)
}

fn load_ebl(path: &Path) -> CliResult<EblPair> {
    Ok(EblPair::from_bytes(&read_input(path, "EBL checkpoint")?)?)
}

fn load_fusion(path: &Path) -> CliResult<FusionModel> {
    Ok(FusionModel::from_bytes(&read_input(path, "LSTM checkpoint")?)?)
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn split_ids(world: &World, cfg: &Config) -> CliResult<(Vec<usize>, Vec<usize>)> {
    Ok(world.make_split(cfg.test_fraction)?)
}

fn parse_grid(arg: &str) -> CliResult<Vec<f64>> {
    let text = match fs::read_to_string(arg) {
        Ok(t) => t,
        Err(_) => arg.to_string(),
    };
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty() && *s != "setting")
        .map(|s| s.parse::<f64>().map_err(|_| CliError::Usage(format!("grid value {s:?} is not a number"))))
        .collect()
}

fn run(cli: Cli) -> CliResult<()> {
    if cli.print_config {
        let mut lines = Vec::new();
        flatten("", &default_value(), &mut lines);
        println!("{}", lines.join("\n"));
        return Ok(());
    }
    let Some(cmd) = cli.cmd else {
        return Err(CliError::Usage("no command given (see --help)".into()));
    };
    match cmd {
        Command::GenWorld { config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let world = World::build(cfg.world.clone())?;
            write_file(&out, &world.to_bytes())?;
            println!(
                "identities={} latent_dim={} id_dim={} pose_dim={} leakage_gain={}",
                world.num_identities(),
                world.latent_dim(),
                cfg.world.id_dim,
                cfg.world.pose_dim,
                cfg.world.leakage_gain
            );
        }
        Command::TrainEbl { world, config, out, report } => {
            let cfg = load_config(&config, cli.seed)?;
            if !(cfg.train.lambda > 0.0 && cfg.train.lambda <= 1.0) {
                return Err(CliError::Usage(format!("train.lambda {} outside (0, 1]", cfg.train.lambda)));
            }
            let world = load_world(&world)?;
            let (train, _) = split_ids(&world, &cfg)?;
            let (pair, rep) = train_ebl(&world, &train, &cfg.train)?;
            write_file(&out, &pair.to_bytes())?;
            if let Some(path) = report {
                rep.write_csv(create(&path)?)?;
            }
            let last = rep.last();
            println!("epsilon_hat={:.6} gamma_hat={:.6}", last.eps_stat, last.gamma_stat);
        }
        Command::TrainFusion { world, ebl, config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            cfg.fusion.validate()?;
            let pair = load_ebl(&ebl)?;
            let world = load_world(&world)?;
            let (train, _) = split_ids(&world, &cfg)?;
            let (model, rep) = train_fusion(&pair, &world, &train, &cfg.fusion)?;
            write_file(&out, &model.to_bytes())?;
            println!(
                "windows={} skipped_sessions={} final_loss={:.6}",
                rep.windows,
                rep.skipped_sessions,
                rep.epoch_loss.last().copied().unwrap_or(f64::NAN)
            );
        }
        Command::Eval { world, ebl, lstm, split, config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let pair = load_ebl(&ebl)?;
            let fusion = load_fusion(&lstm)?;
            let world = load_world(&world)?;
            let (train, test) = split_ids(&world, &cfg)?;
            let ids = match split {
                Split::Train => train,
                Split::Test => test,
            };
            let results = evaluate(&world, &ids, &pair, &fusion, &cfg.fusion.walk, &cfg.eval)?;
            write_results_csv(&results, create(&out)?)?;
            let (auc, raw) = result_aucs(&results)?;
            println!("auc={auc:.6}");
            println!("raw_auc={raw:.6}");
        }
        Command::Simulate { world, attack, self_reenact: _, config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let world = load_world(&world)?;
            let (_, test) = split_ids(&world, &cfg)?;
            if test.len() < 2 {
                return Err(CliError::Usage("simulate needs at least 2 held-out identities".into()));
            }
            let mut rng = Rng::new(cfg.seed).split(0x5349_4d55);
            let driving = test[rng.below(test.len())];
            let target = if attack {
                let others: Vec<usize> = test.iter().copied().filter(|&k| k != driving).collect();
                others[rng.below(others.len())]
            } else {
                driving
            };
            let session = world.sample_session(driving, driving, cfg.eval.session_frames, &cfg.fusion.walk, &mut rng)?;
            let session_id = rng.next_u64();
            let frames = inject_attack(session_to_frames(&session, session_id), &world.reference(target)?)?;
            let header = StreamHeader::new(world.latent_dim(), session_id)?;
            let mut w = create(&out)?;
            write_stream(&header, &frames, &mut w)?;
            w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
            let meta = StreamMeta {
                session_id,
                driving_id: driving,
                target_id: target,
                label: u8::from(driving != target),
                frames: session.frames.len(),
            };
            let meta_path = meta_path(&out);
            write_file(&meta_path, serde_json::to_string_pretty(&meta).map_err(Error::from)?.as_bytes())?;
            println!("session_id={session_id} driving_id={driving} target_id={target} label={}", meta.label);
        }
        Command::Detect { stream, ebl, lstm, config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let pair = load_ebl(&ebl)?;
            let fusion = load_fusion(&lstm)?;
            let file = File::open(&stream).map_err(|e| CliError::Usage(format!("stream {}: {e}", stream.display())))?;
            let reader = StreamReader::new(BufReader::new(file))?;
            let session_id = reader.header.session_id;
            let verdicts = detect_stream(reader, &pair, &fusion, &cfg.detect)?;
            let report = DetectionReport::new(session_id, verdicts, cfg.detect.threshold);
            let mut w = create(&out)?;
            serde_json::to_writer_pretty(&mut w, &report).map_err(Error::from)?;
            w.flush().map_err(|e| CliError::Runtime(e.to_string()))?;
            println!(
                "windows={} mean_probability={:.6} decision={}",
                report.windows,
                report.mean_probability,
                serde_json::to_value(report.decision).map_err(Error::from)?.as_str().unwrap_or("?")
            );
        }
        Command::VerifyMargin { epsilon, gamma, trials, dim, xi } => {
            let seed = match cli.seed {
                Some(s) => s,
                None => match std::env::var("EBL_SEED") {
                    Ok(s) => s.trim().parse().map_err(|_| CliError::Usage(format!("EBL_SEED={s:?} is not a u64")))?,
                    Err(_) => 0,
                },
            };
            let r = verify_margin(&MarginConfig { epsilon, gamma, xi_max_deg: xi, dim, trials, seed })?;
            println!("bound={:.6} trials={} checked={} min_gap={:.6e}", r.bound, r.trials, r.checked, r.min_gap);
            if !r.in_stated_regime {
                println!("note: epsilon or gamma above 0.1");
            }
            println!("violations={}", r.violations);
            if r.violations > 0 {
                return Err(CliError::Runtime(format!("{} violations", r.violations)));
            }
        }
        Command::Sweep { kind, grid, config, out } => {
            let cfg = load_config(&config, cli.seed)?;
            let kind: SweepKind = kind.parse()?;
            let grid = parse_grid(&grid)?;
            if grid.is_empty() {
                return Err(CliError::Usage("empty sweep grid".into()));
            }
            let rows = run_sweep(kind, &grid, &cfg.sweep_seeds, &cfg.pipeline())?;
            write_sweep_csv(&rows, create(&out)?)?;
            let summary = summarize_sweep(kind, &grid, &rows);
            println!("{}", serde_json::to_string(&summary).map_err(Error::from)?);
        }
    }
    Ok(())
}

fn meta_path(stream: &Path) -> PathBuf {
    let mut s = stream.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
