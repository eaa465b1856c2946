//! `rdmkit` command-line interface.

mod args;
mod commands;
mod failure;
mod output;
mod selftest;

use std::process::ExitCode;

use clap::{CommandFactory, Parser};

use args::{Cli, Command};
use failure::Failure;

fn init_logging(verbose: u8, quiet: bool) {
    let level = match (quiet, verbose) {
        (true, _) => log::LevelFilter::Error,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        (false, _) => log::LevelFilter::Trace,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .target(env_logger::Target::Stderr)
        .init();
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Distances(a) => commands::distances(&a),
        Command::Whiten(a) => commands::whiten(&a),
        Command::Compare(a) => commands::compare(&a),
        Command::Simulate(a) => commands::simulate(&a),
        Command::Selftest(a) => selftest::run(&a),
    }
}

/// Parse arguments; on a usage error also print the usage of the subcommand involved.
fn parse() -> Cli {
    let argv: Vec<String> = std::env::args().collect();
    match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() => {
            let _ = e.print();
            let mut cmd = Cli::command();
            cmd.build();
            let sub = argv.iter().skip(1).find_map(|a| cmd.find_subcommand(a).map(|c| c.get_name().to_string()));
            let usage = match sub {
                Some(name) => cmd.find_subcommand_mut(&name).expect("known subcommand").render_usage(),
                None => cmd.render_usage(),
            };
            eprintln!("\n{usage}");
            std::process::exit(e.exit_code());
        }
        Err(e) => e.exit(),
    }
}

fn main() -> ExitCode {
    let cli = parse();
    if let Err(msg) = cli.check_conflicts() {
        Cli::command()
            .error(clap::error::ErrorKind::ArgumentConflict, msg)
            .exit();
    }
    init_logging(cli.verbose, cli.quiet);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            log::error!("{}", f.message);
            ExitCode::from(f.code)
        }
    }
}
