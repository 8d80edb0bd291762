//! `unlearn-stab`: reproducible stability experiments for gradient-based
//! unlearning.

mod error;
mod modes;
mod params;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};
use unlearn_core::verify::{run_criteria, tampered_boundaries, Scale, VerifyOptions, CRITERIA};

use error::CliError;
use params::{parse_config_file, Mode, Settings, GLOBAL_KEYS};

const SEED_ENV: &str = "UNLEARN_STAB_SEED";

fn global_args() -> Vec<Arg> {
    vec![
        Arg::new("config")
            .long("config")
            .display_order(100)
            .value_name("FILE")
            .global(true)
            .help("Flat key=value config file; flags override it"),
        Arg::new("seed")
            .long("seed")
            .display_order(101)
            .value_name("N")
            .global(true)
            .help(format!("Master seed [default: ${SEED_ENV}, else 0]")),
        Arg::new("output")
            .long("output")
            .display_order(102)
            .short('o')
            .value_name("PATH")
            .global(true)
            .help("Output file, written atomically; '-' is stdout [default: -]"),
        Arg::new("workers")
            .long("workers")
            .display_order(103)
            .value_name("N")
            .global(true)
            .value_parser(clap::value_parser!(usize))
            .help("Worker threads; results do not depend on it [default: all cores]"),
        Arg::new("emit-plot-data")
            .long("emit-plot-data")
            .display_order(104)
            .global(true)
            .action(ArgAction::SetTrue)
            .help("Also write gnuplot-ready .dat files next to the output [default: off]"),
    ]
}

fn cli() -> Command {
    let mut cmd = Command::new("unlearn-stab")
        .version(env!("CARGO_PKG_VERSION"))
        .about("Stability experiments for gradient-based machine unlearning")
        .long_about(
            "Stability experiments for gradient-based machine unlearning.\n\n\
             Without a subcommand the mode is taken from the config file's `mode` key, \
             falling back to `simulate` on the demo ensemble.\n\
             Exit codes: 0 success, 1 verification failure, 2 config error, 3 runtime error.",
        )
        .args(global_args());
    for mode in Mode::ALL {
        let mut sub = Command::new(mode.name()).about(mode.about());
        for p in mode.params() {
            let mut arg = Arg::new(p.key).long(p.key).value_name("VALUE").help(p.help);
            arg = if p.default.is_empty() {
                arg.help(format!("{} [default: empty]", p.help))
            } else {
                arg.default_value(p.default)
            };
            sub = sub.arg(arg);
        }
        cmd = cmd.subcommand(sub);
    }
    cmd.subcommand(
        Command::new("verify")
            .about("Run the acceptance criteria and print PASS/FAIL per criterion")
            .arg(
                Arg::new("quick")
                    .long("quick")
                    .action(ArgAction::SetTrue)
                    .conflicts_with("full")
                    .help("Reduced repeat counts (the default scale)"),
            )
            .arg(
                Arg::new("full")
                    .long("full")
                    .action(ArgAction::SetTrue)
                    .help("Documented acceptance settings, including 10^4 Monte-Carlo trajectories"),
            )
            .arg(
                Arg::new("criteria")
                    .long("criteria")
                    .value_name("LIST")
                    .default_value("1,2,3,4,5,6,7,8")
                    .help("Comma-separated criterion numbers"),
            )
            .arg(
                Arg::new("tamper")
                    .long("tamper")
                    .action(ArgAction::SetTrue)
                    .help("Scale the divergence curve by 4 before bracketing; criterion 1 must then fail"),
            ),
    )
}

struct Globals {
    seed: Option<u64>,
    output: String,
    workers: Option<usize>,
    emit_plot_data: bool,
}

fn parse_seed(v: &str) -> Result<u64, CliError> {
    v.trim()
        .parse()
        .map_err(|e| CliError::Config(format!("invalid seed '{v}': {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool, CliError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" | "" => Ok(false),
        _ => Err(CliError::Config(format!(
            "invalid value '{v}' for {key}: expected true or false"
        ))),
    }
}

fn resolve(m: &ArgMatches) -> Result<(Option<Settings>, Globals, Option<&ArgMatches>), CliError> {
    let file = match m.get_one::<String>("config") {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("cannot read config {path}: {e}")))?;
            parse_config_file(&text)?
        }
        None => Vec::new(),
    };
    let file_value = |key: &str| file.iter().rev().find(|(k, _, _)| k == key).map(|(_, v, _)| v.as_str());

    let sub = m.subcommand();
    // Global flags may sit before or after the subcommand.
    let flags = sub.map_or(m, |(_, s)| s);
    let mut g = Globals {
        seed: file_value("seed").map(parse_seed).transpose()?,
        output: file_value("output").unwrap_or("-").to_string(),
        workers: file_value("workers")
            .map(|v| {
                v.parse()
                    .map_err(|e| CliError::Config(format!("invalid workers '{v}': {e}")))
            })
            .transpose()?,
        emit_plot_data: file_value("emit-plot-data").map_or(Ok(false), |v| parse_bool("emit-plot-data", v))?,
    };
    if let Some(v) = flags.get_one::<String>("seed") {
        g.seed = Some(parse_seed(v)?);
    }
    if let Some(v) = flags.get_one::<String>("output") {
        g.output = v.clone();
    }
    if let Some(&w) = flags.get_one::<usize>("workers") {
        g.workers = Some(w);
    }
    g.emit_plot_data |= flags.get_flag("emit-plot-data");

    if let Some(("verify", vm)) = sub {
        if let Some((k, _, line)) = file.iter().find(|(k, _, _)| !GLOBAL_KEYS.contains(&k.as_str())) {
            return Err(CliError::Config(format!(
                "unknown config key '{k}' (line {line}) for verify"
            )));
        }
        return Ok((None, g, Some(vm)));
    }

    let mode: Mode = match sub {
        Some((name, _)) => name.parse()?,
        None => file_value("mode").unwrap_or("simulate").parse()?,
    };
    let seed = match g.seed {
        Some(s) => s,
        None => match std::env::var(SEED_ENV) {
            Ok(v) => parse_seed(&v)?,
            Err(_) => 0,
        },
    };
    let mut settings = Settings::defaults(mode, seed);
    for (k, v, line) in &file {
        if GLOBAL_KEYS.contains(&k.as_str()) {
            continue;
        }
        if !mode.params().iter().any(|p| p.key == k) {
            return Err(CliError::Config(format!(
                "unknown config key '{k}' (line {line}) for mode {}",
                mode.name()
            )));
        }
        settings.set(k, v)?;
    }
    if let Some((_, sm)) = sub {
        for p in mode.params() {
            if sm.value_source(p.key) == Some(ValueSource::CommandLine) {
                settings.set(p.key, sm.get_one::<String>(p.key).expect("present"))?;
            }
        }
    }
    Ok((Some(settings), g, None))
}

/// Writes through a sibling temp file and renames, so a failed run never
/// leaves a partial output behind.
fn write_atomic(path: &str, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = format!("{path}.tmp{}", std::process::id());
    std::fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        CliError::io(path, e)
    })
}

fn plot_path(output: &str, suffix: &str) -> String {
    let p = Path::new(output);
    let stem = p.with_extension("");
    format!("{}.{suffix}", stem.display())
}

fn run_verify(vm: &ArgMatches, g: &Globals) -> Result<(), CliError> {
    let scale = if vm.get_flag("full") { Scale::Full } else { Scale::Quick };
    let raw = vm.get_one::<String>("criteria").expect("defaulted");
    let ids = raw
        .split(',')
        .map(|s| match s.trim().parse::<u8>() {
            Ok(id) if CRITERIA.iter().any(|(c, _)| *c == id) => Ok(id),
            _ => Err(CliError::Config(format!("unknown criterion '{s}'"))),
        })
        .collect::<Result<Vec<u8>, _>>()?;
    let seed = match g.seed {
        Some(s) => s,
        None => std::env::var(SEED_ENV)
            .ok()
            .map(|v| parse_seed(&v))
            .transpose()?
            .unwrap_or(1),
    };
    let mut opts = VerifyOptions::new(scale, seed);
    if vm.get_flag("tamper") {
        opts.boundaries = tampered_boundaries();
    }
    println!("# verify scale={scale:?} seed={seed}");
    let reports = run_criteria(&opts, &ids, |r| {
        println!("{r}");
        let _ = std::io::stdout().flush();
    });
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("# {}/{} criteria passed", reports.len() - failed, reports.len());
    if failed > 0 {
        Err(CliError::Verify { failed })
    } else {
        Ok(())
    }
}

fn run(m: &ArgMatches) -> Result<(), CliError> {
    let (settings, g, verify) = resolve(m)?;
    if let Some(w) = g.workers.filter(|&w| w > 0) {
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot set up {w} workers: {e}")))?;
    }
    if let Some(vm) = verify {
        return run_verify(vm, &g);
    }
    let settings = settings.expect("non-verify mode");
    if g.emit_plot_data && g.output == "-" {
        return Err(CliError::Config(
            "--emit-plot-data needs --output to name the data files".into(),
        ));
    }
    let out = modes::run(&settings)?;
    let body = format!("{}{}", settings.echo(), out.body);
    if g.output == "-" {
        std::io::stdout()
            .write_all(body.as_bytes())
            .map_err(|e| CliError::io("stdout", e))?;
    } else {
        write_atomic(&g.output, body.as_bytes())?;
        if g.emit_plot_data {
            for (suffix, data) in &out.plot_data {
                write_atomic(
                    &plot_path(&g.output, suffix),
                    format!("{}{data}", settings.echo()).as_bytes(),
                )?;
            }
        }
    }
    if !out.summary.is_empty() {
        eprintln!("{}: {}", settings.mode.name(), out.summary);
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = cli().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, CliError::Verify { .. }) {
                eprintln!("unlearn-stab: {e}");
            }
            ExitCode::from(e.exit_code())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn plot_files_sit_next_to_output() {
        assert_eq!(plot_path("out/phase.csv", "curves.dat"), "out/phase.curves.dat");
        assert_eq!(plot_path("phase", "grid.dat"), "phase.grid.dat");
    }
}
