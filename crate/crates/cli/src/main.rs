mod args;
mod commands;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use args::{Cli, Command, Global};

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(satseg::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(satseg::Error::Config(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

impl From<satseg::Error> for CliError {
    fn from(e: satseg::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn load_config(g: &Global, command: &str) -> CliResult<Map<String, Value>> {
    let Some(path) = &g.config else {
        return Ok(Map::new());
    };
    let text = commands::read_file(path)?;
    let Value::Object(mut top) = serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
    else {
        return Err(CliError::Usage(format!(
            "{}: expected a JSON object",
            path.display()
        )));
    };
    // A section named after the subcommand overrides top-level keys.
    if let Some(Value::Object(section)) = top.remove(command) {
        top.extend(section);
    }
    Ok(top)
}

/// Fills options missing on the command line from the config. Unset
/// flags serialize as null, false or an empty list.
fn overlay<T: Serialize + DeserializeOwned>(
    flags: &T,
    config: &Map<String, Value>,
) -> CliResult<T> {
    let Value::Object(given) = serde_json::to_value(flags)? else {
        return Err(CliError::Usage(
            "options must serialize to an object".into(),
        ));
    };
    let mut merged = config.clone();
    for (k, v) in given {
        let unset =
            v.is_null() || v == Value::Bool(false) || v.as_array().is_some_and(|a| a.is_empty());
        if !unset || !merged.contains_key(&k) {
            merged.insert(k, v);
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| CliError::Usage(format!("config: {e}")))
}

fn run(cli: Cli) -> CliResult<()> {
    let config = load_config(&cli.global, cli.command.name())?;
    let mut global: Global = overlay(&cli.global, &config)?;
    global.config = cli.global.config.clone();
    if let Some(n) = global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    match &cli.command {
        Command::TokenizerTrain(a) => commands::tokenizer_train(&global, overlay(a, &config)?),
        Command::Pretrain(a) => commands::train(
            satseg::train::Stage::Pretrain,
            &global,
            overlay(a, &config)?,
        ),
        Command::TrainSm(a) => {
            commands::train(satseg::train::Stage::Sm, &global, overlay(a, &config)?)
        }
        Command::AdaptLora(a) => commands::adapt_lora(&global, overlay(a, &config)?),
        Command::TuneThreshold(a) => commands::tune_threshold(&global, overlay(a, &config)?),
        Command::Segment(a) => commands::segment(&global, overlay(a, &config)?),
        Command::Evaluate(a) => commands::evaluate(&global, overlay(a, &config)?),
        Command::Baseline(a) => commands::baseline(&global, overlay(a, &config)?),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
