//! Command-line driver: `dxformer <subcommand> [--config FILE] [--key=value ...]`.
//!
//! Every setting is a key of one closed schema. A config file supplies
//! values and flags override them. Output is line-oriented `key=value`
//! records on stdout; failures are a single `error: ...` line on stderr.

pub mod commands;
pub mod schema;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use clap::{Arg, ArgMatches};

use schema::{keys_for, parse_config, Command, RunConfig};

fn value_name(kind: schema::Kind) -> &'static str {
    use schema::Kind::*;
    match kind {
        Uint => "N",
        Float => "X",
        Bool => "BOOL",
        Text => "NAME",
        Path => "PATH",
        Choice(_) => "CHOICE",
    }
}

/// The clap command tree, with one flag per schema key.
pub fn cli() -> clap::Command {
    let mut app = clap::Command::new("dxformer")
        .about("Temporal action segmentation with dual-attention transformers")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for cmd in Command::ALL {
        let mut sub = clap::Command::new(cmd.name()).about(cmd.about()).arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override its values"),
        );
        for key in keys_for(cmd) {
            let help = match key.default {
                Some(d) => format!("{} [default: {d}]", key.help),
                None => key.help.to_string(),
            };
            let kind = key.kind;
            sub = sub.arg(
                Arg::new(key.name)
                    .long(key.name)
                    .value_name(value_name(kind))
                    .help(help)
                    .value_parser(move |s: &str| kind.check(s).map(|_| s.to_string()))
                    .overrides_with(key.name),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(cmd: Command, m: &ArgMatches) -> Result<RunConfig, String> {
    let mut values = match m.get_one::<String>("config") {
        Some(path) => {
            let path = Path::new(path);
            let text =
                std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
            parse_config(path, &text)?
        }
        None => BTreeMap::new(),
    };
    for key in keys_for(cmd) {
        if let Some(v) = m.get_one::<String>(key.name) {
            values.insert(key.name.to_string(), v.clone());
        }
    }
    Ok(RunConfig::new(cmd, values))
}

fn run(cmd: Command, rc: &RunConfig, out: &mut dyn Write) -> Result<(), String> {
    let start = Instant::now();
    match cmd {
        Command::Synth => commands::synth(rc, out),
        Command::Train => commands::train(rc, out),
        Command::Predict => commands::predict_cmd(rc, out),
        Command::Eval => commands::eval(rc, out),
        Command::Metrics => commands::metrics(rc, out),
        Command::GradCheck => commands::gradcheck(rc, out),
    }?;
    if rc.get_or("timing", false)? {
        writeln!(out, "elapsed_s={:.3}", start.elapsed().as_secs_f64())
            .map_err(|e| format!("writing output: {e}"))?;
    }
    Ok(())
}

/// Runs one invocation (`argv[0]` is the program name) and returns the
/// process exit status.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match cli().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            use clap::error::ErrorKind::*;
            return match e.kind() {
                DisplayHelp | DisplayVersion => {
                    let _ = e.print();
                    0
                }
                DisplayHelpOnMissingArgumentOrSubcommand => {
                    let _ = e.print();
                    2
                }
                _ => {
                    let text = e.to_string();
                    let line = text.lines().next().unwrap_or("invalid arguments");
                    eprintln!("{}", line.trim());
                    2
                }
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    let cmd = Command::ALL
        .into_iter()
        .find(|c| c.name() == name)
        .expect("clap only accepts known subcommands");
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match resolve(cmd, sub).and_then(|rc| run(cmd, &rc, &mut out)) {
        Ok(()) => 0,
        Err(msg) => {
            let _ = out.flush();
            eprintln!("error: {}", msg.replace('\n', " "));
            1
        }
    }
}
