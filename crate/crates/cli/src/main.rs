use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use cryptoseq_cli::{parse_config, CliError, Command, Experiment, ExperimentConfig};

#[derive(Debug, Parser)]
#[command(name = "cryptoseq", version, about = "Recurrent-network price forecasting experiments")]
struct Args {
    #[arg(value_enum)]
    command: Command,

    /// Experiment configuration (`key = value` lines); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Root directory for experiment outputs.
    #[arg(long, default_value = "runs")]
    out: PathBuf,

    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

fn load(args: &Args) -> Result<(ExperimentConfig, PathBuf), CliError> {
    let Some(path) = &args.config else {
        return Ok((ExperimentConfig::default(), PathBuf::from(".")));
    };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::MissingInput {
        path: path.clone(),
        reason: e.to_string(),
    })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((parse_config(&text)?, base))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CRYPTOSEQ_LOG", "warn")).init();
    let args = Args::parse();
    let result = load(&args).and_then(|(mut cfg, base)| {
        if let Some(seed) = args.seed {
            cfg.seed = seed;
        }
        let exp = Experiment::create(cfg, &args.out, &base)?;
        exp.run(args.command)?;
        Ok(exp.dir)
    });
    match result {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
