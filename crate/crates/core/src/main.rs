use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use i2c_core::cli::{cmd_eval, cmd_generate, cmd_render, cmd_sweep, cmd_train};
use i2c_core::config::RunConfig;
use i2c_core::dataset::{read_spec, set_spec_key};
use i2c_core::synthdata::DatasetSpec;
use i2c_core::{Error, Result};

fn command(name: &'static str, about: &'static str) -> Command {
    Command::new(name)
        .about(about)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .help("key = value file; flags override its values"),
        )
        .arg(
            Arg::new("settings")
                .value_name("--KEY VALUE")
                .help("any configuration key as a flag, e.g. --lambda1 0.008")
                .num_args(0..)
                .trailing_var_arg(true)
                .allow_hyphen_values(true)
                .action(ArgAction::Append),
        )
}

fn cli() -> Command {
    Command::new("i2c")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Weakly supervised localization with inter-image consistency on synthetic shapes")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(command("generate", "write the synthetic dataset"))
        .subcommand(command("train", "train a model and write a checkpoint"))
        .subcommand(command("eval", "calibrate the box threshold and report test metrics"))
        .subcommand(command("sweep", "train and evaluate once per value of one parameter"))
        .subcommand(command("render", "write heatmap overlays for chosen test images"))
}

/// `--key value` and `--key=value` pairs.
fn flag_pairs(m: &ArgMatches) -> Result<Vec<(String, String)>> {
    let raw: Vec<&String> = m.get_many::<String>("settings").map(|v| v.collect()).unwrap_or_default();
    let mut out = Vec::new();
    let mut it = raw.into_iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Usage(format!("expected --key, got `{a}`")))?;
        match key.split_once('=') {
            Some((k, v)) => out.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| Error::Usage(format!("--{key} needs a value")))?;
                out.push((key.to_string(), v.clone()));
            }
        }
    }
    Ok(out)
}

fn generate(file: Option<&Path>, flags: &[(String, String)]) -> Result<()> {
    let mut spec = DatasetSpec::default();
    let mut data_dir = PathBuf::from("data");
    let mut pairs = Vec::new();
    if let Some(path) = file {
        // a dataset manifest carries its hashes; they are outputs, not settings
        let (s, rest) = read_spec(path)?;
        spec = s;
        pairs.extend(rest.into_iter().filter(|(k, _)| !(k.starts_with("sha256_") || k == "dataset_hash")));
    }
    pairs.extend_from_slice(flags);
    for (k, v) in &pairs {
        if k == "data_dir" {
            data_dir = PathBuf::from(v);
        } else if !set_spec_key(&mut spec, k, v)? {
            return Err(Error::Config(format!("unknown key `{k}`")));
        }
    }
    let hash = cmd_generate(&data_dir, &spec)?;
    println!("dataset {} written to {}", hash, data_dir.display());
    Ok(())
}

fn run(name: &str, m: &ArgMatches) -> Result<()> {
    let file = m.get_one::<String>("config").map(PathBuf::from);
    let flags = flag_pairs(m)?;
    if name == "generate" {
        return generate(file.as_deref(), &flags);
    }
    let cfg = RunConfig::load(file.as_deref(), &flags)?;
    let log = |e: &i2c_core::trainer::EpochLog| {
        eprintln!(
            "epoch {:>3}  cls {:.4}  sc {:.4}  gc {:.4}  train_err {:.2}%",
            e.epoch, e.cls_loss, e.sc_loss, e.gc_loss, e.train_cls_err
        )
    };
    match name {
        "train" => {
            cmd_train(&cfg, log)?;
            println!("checkpoint written to {}", cfg.checkpoint_path().display());
        }
        "eval" => {
            let r = cmd_eval(&cfg)?;
            for (metric, v) in r.metric_rows() {
                println!("{metric:<24} {v:.6}");
            }
        }
        "sweep" => {
            for (value, r) in cmd_sweep(&cfg, |v, e| {
                eprint!("[{}={v}] ", cfg.sweep_param);
                log(e)
            })? {
                println!(
                    "{}={value}: gtknown_loc_err {:.6}  top1_loc_err {:.6}",
                    cfg.sweep_param, r.gtknown_loc_err, r.top1_loc_err
                );
            }
        }
        "render" => {
            for p in cmd_render(&cfg)? {
                println!("{}", p.display());
            }
        }
        _ => unreachable!("subcommands are fixed"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
