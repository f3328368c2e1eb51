use std::process::ExitCode;

use clap::Parser;
use mmbias_cli::{cmd_audit, cmd_plan, cmd_survey, Cli, CliError, Command, EXIT_FATAL};

fn run(cli: Cli) -> Result<u8, CliError> {
    match cli.command {
        Command::Plan(args) => {
            let config = args.resolve()?;
            let summary = cmd_plan(&config)?;
            if config.sources.is_empty() {
                log::warn!("no bias sources selected; the plan is empty");
            }
            for skip in &summary.skipped {
                log::warn!("not covered: {skip}");
            }
            print!("{summary}");
            Ok(mmbias_cli::EXIT_OK)
        }
        Command::Audit(args) => {
            let config = args.resolve()?;
            if config.sources.is_empty() {
                log::warn!("no bias sources selected; the report will be empty");
            }
            let outcome = cmd_audit(&config)?;
            let run = &outcome.run;
            for skip in &run.report.skipped {
                log::warn!("skipped {} ({}): {}", skip.entity, skip.source, skip.reason);
            }
            eprintln!(
                "{} planned probes, {} wire requests, {} score rows, {} skipped",
                run.plan.len(),
                run.wire_requests,
                run.report.rows.len(),
                run.report.skipped.len()
            );
            for path in &outcome.files {
                println!("{}", path.display());
            }
            Ok(outcome.exit_code())
        }
        Command::Survey(args) => {
            let outcome = cmd_survey(&args)?;
            if args.out.is_none() {
                print!("{}", outcome.table);
            }
            eprintln!("{} labels retained", outcome.labels.len());
            Ok(mmbias_cli::EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}
