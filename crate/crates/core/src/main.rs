use clap::error::ErrorKind;
use clap::Parser;

use patchhint::cli::{error_line, execute, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => e.exit(),
            _ => {
                let msg = e.to_string();
                let detail: Vec<&str> = msg
                    .lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
                    .collect();
                eprintln!("{}", error_line("usage", &detail.join(" ")));
                std::process::exit(2);
            }
        },
    };
    match execute(cli.command) {
        Ok(m) => {
            let summary = serde_json::json!({"ok": {"command": m.command, "metrics": m.metrics}});
            println!("{summary}");
        }
        Err(e) => {
            eprintln!("{}", error_line(e.kind(), &e.to_string()));
            std::process::exit(1);
        }
    }
}
