use std::process::ExitCode;

use clap::Parser;
use fedsim::cli::{cmd_grid, cmd_run, cmd_validate, Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => match cmd_run(&args) {
            Ok(summary) => {
                match summary.post_attack_mean_accuracy {
                    Some(acc) => println!(
                        "{} / {}: post-attack mean accuracy {:.4} (config {})",
                        summary.defense, summary.attack, acc, summary.config_hash
                    ),
                    None => println!("run complete (config {})", summary.config_hash),
                }
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Grid(args) => match cmd_grid(&args) {
            Ok(rows) => {
                let mut failed = false;
                for r in &rows {
                    match (&r.error, r.mean, r.std) {
                        (None, Some(m), Some(s)) => println!(
                            "{:<14} {:<15} {:<10} {:6.2} +- {:.2}",
                            r.defense,
                            r.attack,
                            r.dataset,
                            100.0 * m,
                            100.0 * s
                        ),
                        (Some(e), _, _) => {
                            failed = true;
                            eprintln!("{} / {} / {}: {e}", r.defense, r.attack, r.dataset);
                        }
                        _ => println!("{:<14} {:<15} {:<10} n/a", r.defense, r.attack, r.dataset),
                    }
                }
                if failed {
                    ExitCode::FAILURE
                } else {
                    ExitCode::SUCCESS
                }
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
        Command::Validate(args) => match cmd_validate(&args) {
            Ok(cfg) => {
                println!("ok (config {})", cfg.hash());
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                ExitCode::FAILURE
            }
        },
    }
}
