use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};

use mesh_core::checkpoint::{load_model, save_model};
use mesh_core::config::KEYS;
use mesh_core::harness::{
    gen_synthetic_shift, load_dataset, run_experiment, run_sweep, save_dataset, split_nshot,
    DataSource, Dataset, ExperimentSpec, Method, Split, SyntheticSpec,
};
use mesh_core::trainer::{adapt, evaluate, init_and_pretrain, TargetTask};
use mesh_core::{AdaptConfig, Error, Result};

#[derive(Parser)]
#[command(
    name = "mesh",
    version,
    about = "Source-free semi-supervised domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic source/target pair.
    GenData(GenData),
    /// Train a source model and save a checkpoint.
    Pretrain(Pretrain),
    /// Adapt a source checkpoint to a target dataset.
    Adapt(AdaptCmd),
    /// Accuracy of a checkpoint on a dataset.
    Eval(Eval),
    /// Pretrain, adapt and score one method over several seeds.
    Experiment(ExperimentCmd),
    /// Repeat an experiment while varying one setting.
    Sweep(SweepCmd),
}

const BOOL_KEYS: &[&str] = &[
    "train-dropout",
    "no-augmentation",
    "no-ent",
    "no-ps",
    "no-vat",
    "no-div",
];

/// One `--<key> VALUE` flag per config key, plus `--config FILE`.
struct ConfigArgs {
    file: Option<PathBuf>,
    overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<AdaptConfig> {
        let mut cfg = match &self.file {
            Some(p) => AdaptConfig::load(p)?,
            None => AdaptConfig::default(),
        };
        for (k, v) in &self.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl FromArgMatches for ConfigArgs {
    fn from_arg_matches(m: &ArgMatches) -> std::result::Result<Self, clap::Error> {
        let mut overrides = Vec::new();
        for k in KEYS {
            if let Some(v) = m.get_one::<String>(k) {
                overrides.push((k.to_string(), v.clone()));
            }
        }
        Ok(Self {
            file: m.get_one::<PathBuf>("config").cloned(),
            overrides,
        })
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> std::result::Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigArgs {
    fn augment_args(cmd: Command) -> Command {
        let mut cmd = cmd.arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value config file; flags override it"),
        );
        for k in KEYS {
            let mut arg = Arg::new(*k)
                .long(*k)
                .value_name("VALUE")
                .action(ArgAction::Set)
                .help_heading("Config");
            if BOOL_KEYS.contains(k) {
                arg = arg.num_args(0..=1).default_missing_value("true");
            }
            cmd = cmd.arg(arg);
        }
        cmd
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = SyntheticSpec::default().num_classes)]
    classes: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().n_source)]
    n_source: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().m_target)]
    m_target: usize,
    #[arg(long, default_value_t = SyntheticSpec::default().dim)]
    dim: usize,
    /// Target rotation in degrees.
    #[arg(long, default_value_t = SyntheticSpec::default().rotation_deg, allow_hyphen_values = true)]
    rotation: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().translation)]
    translation: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().noise)]
    noise: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().radius)]
    radius: f64,
    #[arg(long, default_value_t = SyntheticSpec::default().val_fraction)]
    val_fraction: f64,
}

impl SynthArgs {
    fn spec(&self) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: self.classes,
            n_source: self.n_source,
            m_target: self.m_target,
            dim: self.dim,
            rotation_deg: self.rotation,
            translation: self.translation,
            noise: self.noise,
            radius: self.radius,
            val_fraction: self.val_fraction,
        }
    }
}

#[derive(Args)]
struct GenData {
    #[command(flatten)]
    synth: SynthArgs,
    #[arg(long, default_value_t = 2021)]
    seed: u64,
    /// Tag this many labeled target rows per class.
    #[arg(long)]
    shots: Option<usize>,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Output directory for source.csv and target.csv.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    source: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AdaptCmd {
    /// Source checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long, default_value = "MESH")]
    method: Method,
    /// Used when the target has no labeled rows yet.
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Adapted checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch training log.
    #[arg(long)]
    report: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Score only this split.
    #[arg(long)]
    split: Option<Split>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long, default_value = "MESH")]
    method: Method,
    #[arg(long, value_delimiter = ',', default_value = "2021,2022,2023")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = 3)]
    shots: usize,
    #[arg(long, default_value_t = 0.25)]
    test_fraction: f64,
    /// Source dataset file; synthetic data is generated when absent.
    #[arg(long, requires = "target")]
    source: Option<PathBuf>,
    #[arg(long, requires = "source")]
    target: Option<PathBuf>,
    #[command(flatten)]
    synth: SynthArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
}

impl ExperimentArgs {
    fn spec(&self, out: Option<PathBuf>) -> Result<ExperimentSpec> {
        let data = match (&self.source, &self.target) {
            (Some(s), Some(t)) => DataSource::Files {
                source: s.clone(),
                target: t.clone(),
            },
            _ => DataSource::Synthetic(self.synth.spec()),
        };
        Ok(ExperimentSpec {
            data,
            method: self.method,
            cfg: self.cfg.resolve()?,
            seeds: self.seeds.clone(),
            shots: self.shots,
            test_fraction: self.test_fraction,
            out,
        })
    }
}

#[derive(Args)]
struct ExperimentCmd {
    #[command(flatten)]
    exp: ExperimentArgs,
    /// Report path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepCmd {
    /// Setting to vary: `shots` or any config key.
    #[arg(long)]
    key: String,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    exp: ExperimentArgs,
}

fn gen_data(a: &GenData) -> Result<()> {
    let (source, mut target) = gen_synthetic_shift(&a.synth.spec(), a.seed)?;
    if let Some(n) = a.shots {
        target = split_nshot(&target, n, a.test_fraction, a.seed)?;
    }
    std::fs::create_dir_all(&a.out).map_err(|e| io_error(&a.out, e))?;
    save_dataset(&source, &a.out.join("source.csv"))?;
    save_dataset(&target, &a.out.join("target.csv"))?;
    println!(
        "wrote {} source and {} target rows to {}",
        source.len(),
        target.len(),
        a.out.display()
    );
    Ok(())
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn pretrain(a: &Pretrain) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    let source = load_dataset(&a.source)?;
    let model = init_and_pretrain(&source, &cfg)?;
    save_model(&model, &a.out)?;
    let val = source.split(Split::Val);
    if val.is_empty() {
        println!("saved {}", a.out.display());
    } else {
        println!(
            "saved {} (source val acc {:.4})",
            a.out.display(),
            evaluate(&model, &val)?
        );
    }
    Ok(())
}

fn scoring_split(target: &Dataset) -> Dataset {
    let test = target.split(Split::Test);
    if test.is_empty() {
        target.split(Split::Unlabeled)
    } else {
        test
    }
}

fn adapt_cmd(a: &AdaptCmd) -> Result<()> {
    let cfg = a.method.configure(&a.cfg.resolve()?);
    let model = load_model(&a.model)?;
    let mut target = load_dataset(&a.target)?;
    if target.indices_of(Split::Labeled).is_empty() {
        target = split_nshot(&target, a.shots, a.test_fraction, cfg.seed)?;
    }
    let (task, diagnostics) = TargetTask::from_dataset(&target)?;
    let (adapted, report) = adapt(model, &task, &cfg, &diagnostics)?;
    save_model(&adapted, &a.out)?;
    if let Some(p) = &a.report {
        std::fs::write(p, report.to_text()).map_err(|e| io_error(p, e))?;
    }
    let scoring = scoring_split(&target);
    if scoring.scoring_labels().is_ok() {
        println!(
            "{}: saved {} (target acc {:.4})",
            a.method,
            a.out.display(),
            evaluate(&adapted, &scoring)?
        );
    } else {
        println!("{}: saved {}", a.method, a.out.display());
    }
    Ok(())
}

fn eval(a: &Eval) -> Result<()> {
    let model = load_model(&a.model)?;
    let data = load_dataset(&a.data)?;
    let data = match a.split {
        Some(s) => data.split(s),
        None => data,
    };
    println!("{:.6}", evaluate(&model, &data)?);
    Ok(())
}

fn experiment(a: &ExperimentCmd) -> Result<()> {
    let spec = a.exp.spec(a.out.clone())?;
    let report = run_experiment(&spec)?;
    print!("{}", report.body_text());
    Ok(())
}

fn sweep(a: &SweepCmd) -> Result<()> {
    let spec = a.exp.spec(None)?;
    let points = run_sweep(&spec, &a.key, &a.values, a.out.as_deref())?;
    println!("{}\tfinal_acc_mean\tfinal_acc_std", a.key);
    for p in points {
        let (m, s) = p.report.final_acc();
        println!("{}\t{m:.6}\t{s:.6}", p.value);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Pretrain(a) => pretrain(a),
        Cmd::Adapt(a) => adapt_cmd(a),
        Cmd::Eval(a) => eval(a),
        Cmd::Experiment(a) => experiment(a),
        Cmd::Sweep(a) => sweep(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let line = msg
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("{}", line.trim());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
