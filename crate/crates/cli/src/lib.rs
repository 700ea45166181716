//! Command-line front end: configuration, the subcommands and their
//! report files.

pub mod commands;
pub mod config;
pub mod report;

use c2r_core::Error;

pub use config::{Cli, Command, RunArgs, RunConfig};

/// Process exit status for a failed command.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 2,
        Error::Io { .. } => 3,
        Error::Internal(_) => 4,
    }
}

/// Runs one subcommand and returns the text report to print.
pub fn run(command: &Command) -> c2r_core::Result<String> {
    let cfg = RunConfig::from_args(command.args())?;
    Ok(match command {
        Command::Profile(_) => commands::cmd_profile(&cfg)?.summary.to_text(),
        Command::Route(_) => {
            let out = commands::cmd_route(&cfg)?;
            let tokens: usize = out.layers.iter().map(|l| l.decisions.len()).sum();
            format!(
                "routed {tokens} tokens over {} layers with {}\n",
                out.layers.len(),
                cfg.strategy.label()
            )
        }
        Command::Simulate(_) => commands::cmd_simulate(&cfg)?.report.to_text(),
        Command::SweepT(_) => commands::cmd_sweep_t(&cfg)?.report.to_text(),
        Command::Table3(_) => commands::cmd_table3(&cfg)?.report.to_text(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_by_kind() {
        assert_eq!(exit_code(&Error::config("x")), 2);
        assert_eq!(exit_code(&Error::parse(3, "x")), 2);
        assert_eq!(exit_code(&Error::io("/p", std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::internal("x")), 4);
    }
}
