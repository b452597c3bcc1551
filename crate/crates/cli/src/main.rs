mod cli;
mod commands;
mod io;
mod svg;

use std::process::ExitCode;
use std::time::Instant;

use clap::error::ErrorKind;
use clap::Parser;

use cli::{Cli, Command};
use io::RunRecord;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_DEGRADED: u8 = 3;

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    env_logger::Builder::new().filter_level(cli.log_level).format_timestamp(None).init();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("thread pool already configured: {e}");
        }
    }

    let start = Instant::now();
    let mut run = match &cli.command {
        Command::Report(a) => RunRecord::in_dir(&a.out),
        Command::Simulate(a) => RunRecord::new(&a.out),
        Command::Lut(a) => RunRecord::new(&a.out),
        Command::Dcr(a) => RunRecord::new(&a.out),
        Command::Coincidence(a) => RunRecord::new(&a.out),
        Command::Fit(a) => RunRecord::new(&a.out),
        Command::CtScan(a) => RunRecord::new(&a.out),
        Command::Calibrate(a) => RunRecord::new(&a.out),
    };
    let result = match &cli.command {
        Command::Simulate(a) => commands::simulate(a, &mut run),
        Command::Lut(a) => commands::lut(a, &mut run),
        Command::Dcr(a) => commands::dcr(a, &mut run),
        Command::Coincidence(a) => commands::coincidence(a, &mut run),
        Command::Fit(a) => commands::fit(a, &mut run),
        Command::CtScan(a) => commands::ct_scan_cmd(a, &mut run),
        Command::Calibrate(a) => commands::calibrate(a, &mut run),
        Command::Report(a) => commands::report(a, &mut run),
    }
    .and_then(|()| run.write_manifest(cli.command.name(), argv.clone(), start.elapsed().as_secs_f64()));

    match result {
        Ok(()) => match &run.degraded {
            Some(why) => {
                log::warn!("{why}");
                eprintln!("{}", serde_json::json!({"status": "degraded", "subcommand": cli.command.name(), "message": why}));
                ExitCode::from(EXIT_DEGRADED)
            }
            None => ExitCode::SUCCESS,
        },
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!(
                "{}",
                serde_json::json!({"status": "error", "subcommand": cli.command.name(), "message": e.to_string(), "causes": causes})
            );
            ExitCode::from(EXIT_DATA)
        }
    }
}
