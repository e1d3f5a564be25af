use clap::{Arg, ArgAction, ArgMatches, Command};
use fsistab::commands::{cmd_hautus, cmd_simulate, cmd_spectrum, cmd_synthesize, cmd_verify};
use fsistab::config::RunConfig;
use fsistab::numerics::fmt_f64;
use fsistab::verification::report_text;
use fsistab::{FsiError, Result};
use std::path::PathBuf;
use std::process::ExitCode;

fn cli() -> Command {
    Command::new("fsistab")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Spectrum, Hautus test, delayed feedback synthesis and closed-loop simulation for a fluid-plate system")
        .subcommand_required(true)
        .arg(
            Arg::new("config").long("config").value_name("PATH").global(true).help("config file (key = value or JSON)"),
        )
        .arg(Arg::new("out").long("out").value_name("DIR").global(true).help("output directory"))
        .arg(
            Arg::new("seed")
                .long("seed")
                .value_name("N")
                .value_parser(clap::value_parser!(u64))
                .global(true)
                .help("random seed"),
        )
        .arg(
            Arg::new("override")
                .long("override")
                .value_name("KEY=VALUE")
                .action(ArgAction::Append)
                .global(true)
                .help("override one config key (repeatable)"),
        )
        .subcommand(Command::new("spectrum").about("eigenvalues and eigenvectors of the linearized generator"))
        .subcommand(Command::new("hautus").about("numerical Fattorini-Hautus test at sigma = gamma"))
        .subcommand(Command::new("synthesize").about("delayed finite-dimensional feedback law"))
        .subcommand(Command::new("simulate").about("open- or closed-loop trajectory"))
        .subcommand(Command::new("verify").about("run the full property battery"))
}

fn load_config(m: &ArgMatches) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(p) => RunConfig::load(p.as_ref())?,
        None => RunConfig::default(),
    };
    for kv in m.get_many::<String>("override").into_iter().flatten() {
        cfg.apply_override(kv)?;
    }
    if let Some(seed) = m.get_one::<u64>("seed") {
        cfg.seed = *seed;
    }
    let out = m.get_one::<String>("out").cloned().unwrap_or_else(|| cfg.output.clone());
    Ok((cfg, PathBuf::from(out)))
}

fn run(name: &str, sub: &ArgMatches) -> Result<()> {
    let (cfg, out) = load_config(sub)?;
    match name {
        "spectrum" => {
            let s = cmd_spectrum(&cfg, &out)?;
            println!("{} eigenvalues, abscissa {}", s.pairs.len(), fmt_f64(s.abscissa()));
        }
        "hautus" => {
            let r = cmd_hautus(&cfg, &out)?;
            println!("Hautus test passed at sigma={}: min ratio {}", fmt_f64(r.sigma), fmt_f64(r.min_ratio));
        }
        "synthesize" => {
            let l = cmd_synthesize(&cfg, &out)?;
            println!("feedback law on {} modes, {} actuators, delay {}", l.n_gamma, l.n_act(), fmt_f64(l.t0));
        }
        "simulate" => {
            let r = cmd_simulate(&cfg, &out)?;
            let rate = r.fit.map(|f| fmt_f64(f.rate)).unwrap_or_else(|| "n/a".into());
            println!("final norm {}, decay rate {rate}", fmt_f64(*r.trajectory.norms.last().unwrap_or(&0.0)));
        }
        "verify" => {
            let reports = cmd_verify(&cfg, &out)?;
            print!("{}", report_text(&reports));
            let failed = reports.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(FsiError::Criterion(format!("{failed} of {} checks failed", reports.len())));
            }
        }
        _ => unreachable!("subcommand is required"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 3 } else { 0 });
        }
    };
    faer::set_global_parallelism(faer::Par::Seq);
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match run(name, sub) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("fsistab {name}: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
