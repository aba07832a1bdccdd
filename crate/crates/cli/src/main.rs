use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use promptformer::experiment::{self, EvalTarget, ExperimentConfig};
use promptformer::metrics::append_jsonl;
use promptformer::Error;

#[derive(Parser)]
#[command(name = "promptformer", version, about = "Desk-scale P-Former pipeline")]
struct Cli {
    /// TOML experiment config; the preset fills missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base settings the config file and overrides apply to.
    #[arg(long, global = true, value_enum, default_value = "default")]
    preset: Preset,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate every split and sentence corpus.
    GenData(Overrides),
    /// Pretrain and freeze the tiny LM.
    TrainLm(Overrides),
    /// Train and freeze the P-Former against the frozen LM.
    TrainPformer(Overrides),
    /// Stage 1 on the Q-Former (pretrains the vision encoder on first use).
    TrainStage1(Overrides),
    /// Stage 2 through the frozen LM.
    TrainStage2(Overrides),
    /// Sequence adaptor with the two-phase video schedule.
    TrainVideo(Overrides),
    /// Evaluate a trained adaptor on its held-out split.
    Eval {
        #[arg(long, value_enum, default_value = "stage2")]
        target: Target,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Stage 1 + stage 2 + eval over an omega grid.
    Sweep {
        #[arg(long, value_delimiter = ',', required = true)]
        omega1: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        omega2: Vec<f64>,
        #[command(flatten)]
        rest: Overrides,
    },
    /// Print the resolved config as TOML.
    ShowConfig(Overrides),
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Preset {
    Default,
    Desk,
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Target {
    Stage1,
    Stage2,
    Video,
}

#[derive(clap::Args)]
struct Overrides {
    /// `--dotted.key value` pairs applied on top of the config file.
    #[arg(
        trailing_var_arg = true,
        allow_hyphen_values = true,
        value_name = "--KEY VALUE"
    )]
    overrides: Vec<String>,
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<(), Error> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut table = root;
    for p in parents {
        table = match table.get_mut(*p) {
            Some(toml::Value::Table(t)) => t,
            _ => return Err(Error::Config(format!("unknown config key {key}"))),
        };
    }
    table.insert((*last).to_string(), value);
    Ok(())
}

fn has_path(root: &toml::Table, key: &str) -> bool {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        match cur.get(*p) {
            Some(toml::Value::Table(t)) if i + 1 < parts.len() => cur = t,
            Some(_) if i + 1 == parts.len() => return true,
            _ => return false,
        }
    }
    false
}

fn merge(into: &mut toml::Table, from: toml::Table) {
    for (k, v) in from {
        match (into.get_mut(&k), v) {
            (Some(toml::Value::Table(a)), toml::Value::Table(b)) => merge(a, b),
            (_, v) => {
                into.insert(k, v);
            }
        }
    }
}

fn resolve_config(
    preset: Preset,
    file: Option<&PathBuf>,
    overrides: &[String],
) -> Result<ExperimentConfig, Error> {
    let base = match preset {
        Preset::Default => ExperimentConfig::default(),
        Preset::Desk => ExperimentConfig::desk(),
    };
    let mut table = toml::Table::try_from(&base).map_err(|e| Error::Config(e.to_string()))?;
    let mut keys = Vec::new();
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => {
                Error::MissingInput(format!("config {}", path.display()))
            }
            _ => Error::io(path, e),
        })?;
        let file_table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        collect_keys(&file_table, "", &mut keys);
        merge(&mut table, file_table);
    }
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let key = flag
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key, found {flag:?}")))?;
        let (key, raw) = match key.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = it
                    .next()
                    .ok_or_else(|| Error::Config(format!("--{key} needs a value")))?;
                (key.to_string(), v.clone())
            }
        };
        set_path(&mut table, &key, parse_value(&raw))?;
        keys.push(key);
    }
    let cfg: ExperimentConfig = table.try_into().map_err(|e| Error::Config(e.to_string()))?;
    let check = toml::Table::try_from(&cfg).map_err(|e| Error::Config(e.to_string()))?;
    if let Some(bad) = keys.iter().find(|k| !has_path(&check, k)) {
        return Err(Error::Config(format!("unknown config key {bad}")));
    }
    Ok(cfg)
}

fn collect_keys(table: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in table {
        let key = format!("{prefix}{k}");
        match v {
            toml::Value::Table(t) => collect_keys(t, &format!("{key}."), out),
            _ => out.push(key),
        }
    }
}

/// One line of `<root>/manifest.jsonl`: what ran, under which seed, and
/// what it produced.
#[derive(serde::Serialize)]
struct ManifestEntry<'a, T> {
    command: &'a str,
    seed: u64,
    output: &'a T,
}

/// Prints `value` as JSON and records it in the run manifest.
fn emit<T: serde::Serialize>(
    cfg: &ExperimentConfig,
    command: &str,
    value: &T,
) -> Result<(), Error> {
    println!(
        "{}",
        serde_json::to_string(value).map_err(|e| Error::Config(e.to_string()))?
    );
    let entry = ManifestEntry {
        command,
        seed: cfg.seed,
        output: value,
    };
    append_jsonl(&cfg.paths.root.join("manifest.jsonl"), &[entry])
}

fn run(cli: Cli) -> Result<(), Error> {
    let overrides = match &cli.command {
        Command::GenData(o)
        | Command::TrainLm(o)
        | Command::TrainPformer(o)
        | Command::TrainStage1(o)
        | Command::TrainStage2(o)
        | Command::TrainVideo(o)
        | Command::ShowConfig(o) => &o.overrides,
        Command::Eval { rest, .. } | Command::Sweep { rest, .. } => &rest.overrides,
    };
    let cfg = resolve_config(cli.preset, cli.config.as_ref(), overrides)?;
    cfg.validate()?;
    match &cli.command {
        Command::GenData(_) => emit(&cfg, "gen-data", &experiment::gen_data(&cfg)?)?,
        Command::TrainLm(_) => emit(&cfg, "train-lm", &experiment::train_lm(&cfg)?)?,
        Command::TrainPformer(_) => {
            emit(&cfg, "train-pformer", &experiment::train_pformer_cmd(&cfg)?)?
        }
        Command::TrainStage1(_) => {
            emit(&cfg, "train-stage1", &experiment::train_stage1_cmd(&cfg)?)?
        }
        Command::TrainStage2(_) => {
            emit(&cfg, "train-stage2", &experiment::train_stage2_cmd(&cfg)?)?
        }
        Command::TrainVideo(_) => emit(&cfg, "train-video", &experiment::train_video_cmd(&cfg)?)?,
        Command::Eval { target, .. } => {
            let target = match target {
                Target::Stage1 => EvalTarget::Stage1,
                Target::Stage2 => EvalTarget::Stage2,
                Target::Video => EvalTarget::Video,
            };
            emit(
                &cfg,
                &format!("eval {}", target.name()),
                &experiment::evaluate(&cfg, target)?,
            )?;
        }
        Command::Sweep { omega1, omega2, .. } => {
            for cell in experiment::sweep(&cfg, omega1, omega2)? {
                emit(&cfg, "sweep", &cell)?;
            }
        }
        Command::ShowConfig(_) => {
            print!(
                "{}",
                toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?
            );
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err.class() {
        "config_error" => 2,
        "input_missing" | "malformed_input" => 3,
        "numerical_abort" => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let msg = err.to_string().replace('\n', " ");
            eprintln!("error class={} msg={msg:?}", err.class());
            ExitCode::from(exit_code(&err))
        }
    }
}
