use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};

use surfloc::cli::{self, LocalizeInputs, RunConfig, KEYS};
use surfloc::{Error, Result};

fn command() -> Command {
    let mut cmd = Command::new("surfloc")
        .about("Direct photometric localization of a monocular camera in a surfel map")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .help("Run configuration file (key = value per line)"),
        );
    for (key, doc) in KEYS {
        let long: &'static str = Box::leak(key.replace('_', "-").into_boxed_str());
        cmd = cmd.arg(Arg::new(*key).long(long).value_name("VALUE").global(true).hide_short_help(true).help(*doc));
    }
    let path = |name: &'static str, help: &'static str| Arg::new(name).required(true).help(help);
    cmd.subcommand(
        Command::new("build-map")
            .about("Build a surfel map from a point-cloud PLY")
            .arg(path("input", "point cloud (PLY)"))
            .arg(path("output", "surfel map to write (PLY)")),
    )
    .subcommand(
        Command::new("simulate")
            .about("Render a synthetic dataset with ground truth and a surfel map")
            .arg(path("out", "output directory")),
    )
    .subcommand(
        Command::new("localize")
            .about("Localize an image sequence against a surfel map")
            .arg(Arg::new("dataset").long("dataset").value_name("DIR").help("directory written by `simulate`"))
            .arg(Arg::new("index").long("index").value_name("FILE").required_unless_present("dataset").help("image index file"))
            .arg(Arg::new("map").long("map").value_name("FILE").required_unless_present("dataset").help("surfel map (PLY)"))
            .arg(Arg::new("camera").long("camera").value_name("FILE").required_unless_present("dataset").help("camera intrinsics file"))
            .arg(
                Arg::new("groundtruth")
                    .long("groundtruth")
                    .value_name("FILE")
                    .help("TUM trajectory whose first pose initializes the run"),
            )
            .arg(path("out", "output directory")),
    )
    .subcommand(
        Command::new("eval")
            .about("Trajectory metrics (ATE, RPE) as CSV")
            .arg(path("estimate", "estimated TUM trajectory"))
            .arg(path("groundtruth", "ground-truth TUM trajectory"))
            .arg(Arg::new("output").short('o').long("output").value_name("FILE").help("write the CSV here instead of stdout")),
    )
    .subcommand(
        Command::new("degen-report")
            .about("Gauge degeneracy of the map constraints along a trajectory")
            .arg(Arg::new("map").long("map").value_name("FILE").required(true))
            .arg(Arg::new("trajectory").long("trajectory").value_name("FILE").required(true))
            .arg(Arg::new("camera").long("camera").value_name("FILE").required(true))
            .arg(path("out", "output directory")),
    )
    .subcommand(Command::new("print-config").about("Print the effective configuration").arg(
        Arg::new("keys").long("keys").action(ArgAction::SetTrue).help("list the keys with their descriptions instead"),
    ))
}

fn config(m: &ArgMatches) -> Result<RunConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => RunConfig::load(Path::new(path))?,
        None => RunConfig::default(),
    };
    for (key, _) in KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            cfg.set(key, v)?;
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn file(m: &ArgMatches, name: &str) -> PathBuf {
    PathBuf::from(m.get_one::<String>(name).expect("required argument"))
}

fn run(m: &ArgMatches) -> Result<()> {
    let (name, sub) = m.subcommand().expect("subcommand required");
    let cfg = config(sub)?;
    match name {
        "build-map" => {
            let map = cli::cmd_build_map(&file(sub, "input"), &file(sub, "output"), &cfg)?;
            println!("surfels: {}", map.len());
        }
        "simulate" => {
            let s = cli::cmd_simulate(&cfg, &file(sub, "out"))?;
            println!("frames: {}\nsurfels: {}\ncloud points: {}", s.frames, s.surfels, s.cloud_points);
        }
        "localize" => {
            let inputs = match sub.get_one::<String>("dataset") {
                Some(dir) => LocalizeInputs::from_dataset(Path::new(dir)),
                None => LocalizeInputs {
                    index: file(sub, "index"),
                    map: file(sub, "map"),
                    camera: file(sub, "camera"),
                    groundtruth: None,
                },
            };
            let inputs = LocalizeInputs {
                groundtruth: sub.get_one::<String>("groundtruth").map(PathBuf::from).or(inputs.groundtruth),
                ..inputs
            };
            let out = cli::cmd_localize(&inputs, &cfg, &file(sub, "out"))?;
            println!(
                "frames: {}\nkeyframes: {}\nseconds: {:.2}",
                out.trajectory.len(),
                out.localizer.constraint_log.len(),
                out.elapsed.as_secs_f64()
            );
            if let Some(e) = out.failure {
                return Err(e);
            }
        }
        "eval" => {
            let metrics = cli::cmd_eval(&file(sub, "estimate"), &file(sub, "groundtruth"), &cfg)?;
            let csv = cli::commands::eval_csv(&metrics);
            match sub.get_one::<String>("output") {
                Some(path) => std::fs::write(path, csv).map_err(|e| Error::io(path, e))?,
                None => print!("{csv}"),
            }
        }
        "degen-report" => {
            let windows = cli::cmd_degen_report(
                &file(sub, "map"),
                &file(sub, "trajectory"),
                &file(sub, "camera"),
                &cfg,
                &file(sub, "out"),
            )?;
            println!("windows: {}", windows.len());
            if let Some(c) = cli::dominant_classification(&windows) {
                println!("dominant classification: {c}");
            }
        }
        "print-config" => {
            if sub.get_flag("keys") {
                for (key, doc) in KEYS {
                    println!("{key:<28} {doc}");
                }
            } else {
                print!("{}", cfg.to_text());
            }
        }
        _ => unreachable!("unknown subcommand {name}"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let matches = command().get_matches();
    match run(&matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(cli::exit_code(&e))
        }
    }
}
