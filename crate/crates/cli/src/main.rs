mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{RunConfig, KEYS};

const SUBCOMMANDS: &[(&str, &str)] = &[
    (
        "gen-corpus",
        "Generate the synthetic emotion corpus and noise bank",
    ),
    (
        "mix",
        "Contaminate a clean manifest with noise at the given SNR levels",
    ),
    (
        "train-teacher",
        "Train a teacher with cross-entropy on clean audio",
    ),
    (
        "distill",
        "Distill a half-depth student from a teacher on noisy audio",
    ),
    (
        "eval",
        "Evaluate a checkpoint on clean audio and over the noise x SNR grid",
    ),
    (
        "gradcheck",
        "Check every gradient against central finite differences",
    ),
    (
        "loso",
        "Leave-one-speaker-out comparison of distilled and independent students",
    ),
];

fn cli() -> Command {
    let mut shared = vec![
        Arg::new("out")
            .long("out")
            .required(true)
            .value_name("DIR")
            .value_parser(clap::value_parser!(PathBuf))
            .help("run directory for every output of this invocation"),
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .value_parser(clap::value_parser!(PathBuf))
            .help("key = value configuration file; flags override it"),
    ];
    for (key, default, help) in KEYS {
        let help = if default.is_empty() {
            help.to_string()
        } else {
            format!("{help} [default: {default}]")
        };
        shared.push(
            Arg::new(*key)
                .long(key.replace('_', "-"))
                .value_name("VALUE")
                .help(help),
        );
    }
    let mut app = Command::new("mlkd")
        .about("Multi-level knowledge distillation for noise-robust speech emotion recognition")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about).args(shared.clone());
        if *name == "gradcheck" {
            sub = sub.arg(
                Arg::new("all")
                    .long("all")
                    .action(ArgAction::SetTrue)
                    .help("include the training losses, not only the primitives"),
            );
        }
        app = app.subcommand(sub);
    }
    app
}

fn resolve(m: &ArgMatches) -> Result<RunConfig, String> {
    let file = match m.get_one::<PathBuf>("config") {
        Some(p) => config::read_file(p)?,
        None => Vec::new(),
    };
    let flags: Vec<(String, String)> = KEYS
        .iter()
        .filter_map(|(k, _, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(&file, &flags)
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    let (name, m) = matches.subcommand().expect("a subcommand is required");
    let out = m
        .get_one::<PathBuf>("out")
        .expect("--out is required")
        .clone();
    let result = resolve(m)
        .and_then(|cfg| commands::run(name, &cfg, &out, name == "gradcheck" && m.get_flag("all")));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
