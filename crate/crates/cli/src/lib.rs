//! Command-line driver for the `scalebound` toolkit.
//!
//! Every setting is a dotted configuration key (see [`config::KEYS`]). A key
//! can come from a JSON config file given with `--config`, and a flag named
//! after the key in kebab case overrides it; `fusion.prominence_threshold`
//! is `--fusion-prominence-threshold`, or `--prominence` for short.
//!
//! Exit codes: 0 on success, 1 for invalid input or configuration, 2 when
//! detection finds fewer than two qualifying peaks.

pub mod config;
pub mod logging;
mod run;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Arg, ArgAction, ArgMatches};

pub use config::{validate_config, Command, ConfigError, RunConfig, Sources};
pub use run::{infer_family, run, RunError, SYNTH_DUMP_DIR};

/// A parsed command line, before validation.
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config_file: Option<PathBuf>,
    pub flags: Vec<(String, String)>,
}

pub fn cli() -> clap::Command {
    let mut args = vec![Arg::new("config")
        .long("config")
        .value_name("FILE")
        .help("JSON file of dotted configuration keys")
        .global(true)];
    for k in config::KEYS {
        let mut a = Arg::new(k.name).long(k.flag()).help(k.help).global(true);
        if let Some(alias) = k.alias {
            a = a.visible_alias(alias);
        }
        a = if k.is_switch() {
            a.num_args(0..=1).require_equals(true).default_missing_value("true").value_name("BOOL")
        } else if k.repeatable() {
            a.action(ArgAction::Append).value_name("VALUE")
        } else {
            a.value_name("VALUE")
        };
        args.push(a);
    }
    clap::Command::new("scalebound")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Locate semantic scale boundaries in transformer layers and test them")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .args(args)
        .subcommands(Command::ALL.map(|c| clap::Command::new(c.name()).about(c.about())))
}

fn flags_from(m: &ArgMatches) -> Vec<(String, String)> {
    let mut out = Vec::new();
    for k in config::KEYS {
        if m.value_source(k.name) != Some(clap::parser::ValueSource::CommandLine) {
            continue;
        }
        if let Some(vals) = m.get_many::<String>(k.name) {
            out.extend(vals.map(|v| (k.name.to_string(), v.clone())));
        }
    }
    out
}

pub fn parse_args<I, T>(args: I) -> Result<Invocation, clap::Error>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = cli().try_get_matches_from(args)?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    Ok(Invocation {
        command: name.parse().expect("clap only accepts known subcommands"),
        config_file: sub.get_one::<String>("config").map(PathBuf::from),
        flags: flags_from(sub),
    })
}

/// Parses, validates and runs; returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let inv = match parse_args(args) {
        Ok(inv) => inv,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => 0,
                _ => 1,
            };
        }
    };
    let file = match inv.config_file.as_deref().map(config::load_config_file).transpose() {
        Ok(f) => f,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            return 1;
        }
    };
    let sources = Sources {
        file,
        flags: inv.flags,
        grammar_url_env: std::env::var("GRAMMAR_URL").ok(),
    };
    match validate_config(inv.command, &sources) {
        Ok(cfg) => run(&cfg),
        Err(e) => {
            eprintln!("error[{}]: {e}", e.kind());
            1
        }
    }
}
