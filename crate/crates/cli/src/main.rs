use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::{ContextKind, ContextValue, ErrorKind};
use clap::{Arg, ArgMatches, Command};
use gmgenet::config::RunConfig;
use gmgenet::dataio::load_manifest;
use gmgenet::pipeline::run::{self, RunDir, RunLog};
use gmgenet::{Error, ErrorCategory};

const SUBCOMMANDS: &[(&str, &str)] = &[
    ("synth", "Generate the phantom data set and its manifest"),
    ("preprocess", "Preprocess every manifest volume and write the split"),
    ("train-extractor", "Train the Grad-CAM extractor on full volumes"),
    ("extract-voi", "Compute heatmaps and extract a VOI per patient"),
    ("train-classifier", "Train VOI and full-volume classifiers on every fold"),
    ("evaluate", "Compute metrics, ROC curves and the paired t-test"),
    ("gradcam", "Heatmap and slice images for one volume"),
    ("run-all", "Every stage end to end, synthesizing data if needed"),
];

fn flag(key: &str) -> String {
    key.replace('_', "-")
}

fn cli() -> Command {
    let mut cmd = Command::new("gmgenet")
        .about("Grad-CAM guided VOI extraction and 3D DenseNet classification of CT volumes")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .value_name("FILE")
                .global(true)
                .value_parser(clap::value_parser!(PathBuf))
                .help("key = value configuration file"),
        );
    for (key, doc) in RunConfig::KEYS {
        cmd = cmd.arg(
            Arg::new(*key)
                .long(flag(key))
                .value_name("VALUE")
                .global(true)
                .help(*doc),
        );
    }
    for (name, about) in SUBCOMMANDS {
        let mut sub = Command::new(*name).about(*about);
        if *name == "gradcam" {
            sub = sub
                .arg(
                    Arg::new("checkpoint")
                        .long("checkpoint")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Model checkpoint (default: <run-dir>/extractor.gmgm)"),
                )
                .arg(
                    Arg::new("volume")
                        .long("volume")
                        .required(true)
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("GMGV volume, raw or preprocessed"),
                )
                .arg(
                    Arg::new("out")
                        .long("out")
                        .value_parser(clap::value_parser!(PathBuf))
                        .help("Output directory (default: <run-dir>/gradcam/<volume name>)"),
                );
        }
        cmd = cmd.subcommand(sub);
    }
    cmd
}

fn fail(category: ErrorCategory, reason: &str) -> ExitCode {
    let (name, code) = match category {
        ErrorCategory::Validation => ("validation", 1),
        ErrorCategory::Io => ("io", 2),
        ErrorCategory::Numerical => ("numerical", 3),
    };
    let reason = reason.replace('\n', " ");
    eprintln!("error[{name}]: {reason}");
    ExitCode::from(code)
}

fn parse_error(e: clap::Error) -> ExitCode {
    match e.kind() {
        ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
            let _ = e.print();
            ExitCode::SUCCESS
        }
        _ => {
            let token = match e.get(ContextKind::InvalidArg) {
                Some(ContextValue::String(s)) => Some(s.clone()),
                _ => None,
            };
            let reason = match (e.kind(), token) {
                (ErrorKind::UnknownArgument, Some(t)) => format!("unknown flag {t}"),
                (ErrorKind::InvalidSubcommand, Some(t)) => format!("unknown subcommand {t}"),
                (_, Some(t)) => format!("{t}: {}", e.kind()),
                (_, None) => e.kind().to_string(),
            };
            fail(ErrorCategory::Validation, &reason)
        }
    }
}

fn resolve(m: &ArgMatches) -> gmgenet::Result<RunConfig> {
    let overrides: Vec<(String, String)> = RunConfig::KEYS
        .iter()
        .filter_map(|(k, _)| m.get_one::<String>(k).map(|v| (k.to_string(), v.clone())))
        .collect();
    RunConfig::resolve(
        m.get_one::<PathBuf>("config").map(PathBuf::as_path),
        std::env::vars(),
        &overrides,
    )
}

fn init_logger() {
    env_logger::Builder::new()
        .filter_level(log::LevelFilter::Info)
        .parse_default_env()
        .target(env_logger::Target::Stdout)
        .format(|buf, r| writeln!(buf, "{}: {}", r.level().as_str().to_ascii_lowercase(), r.args()))
        .try_init()
        .ok();
}

fn dispatch(name: &str, sub: &ArgMatches, cfg: &RunConfig) -> gmgenet::Result<()> {
    if name == "synth" {
        let m = run::synth(cfg)?;
        println!("synth: {} volumes written to {}", m.entries.len(), cfg.data_dir.display());
        return Ok(());
    }
    if name == "run-all" {
        let report = run::run_all(cfg)?;
        print!("{}", run::render_report(&report, cfg));
        return Ok(());
    }
    let dir = run::init_run(cfg)?;
    let log = RunLog::open(&dir)?;
    if name == "gradcam" {
        let volume = sub.get_one::<PathBuf>("volume").expect("required");
        let checkpoint = sub.get_one::<PathBuf>("checkpoint").cloned().unwrap_or_else(|| dir.extractor());
        let out = sub.get_one::<PathBuf>("out").cloned().unwrap_or_else(|| default_out(&dir, volume));
        let (_, slices) = log.stage("gradcam", || run::gradcam_single(cfg, &checkpoint, volume, &out))?;
        println!("gradcam: heatmap and {} slice triples written to {}", slices.len(), out.display());
        return Ok(());
    }
    let manifest = load_manifest(&cfg.manifest_path())?;
    match name {
        "preprocess" => {
            log.stage("preprocess", || run::preprocess_all(cfg, &manifest, &dir))?;
            let plan = log.stage("split", || run::split_stage(cfg, &manifest, &dir))?;
            println!(
                "preprocess: {} volumes; split extractor {}, train {}, test {}",
                manifest.entries.len(),
                plan.extractor_ids.len(),
                plan.train_ids.len(),
                plan.test_ids.len()
            );
        }
        "train-extractor" => {
            let plan = run::read_split(cfg, &manifest, &dir)?;
            let s = log.stage(name, || run::train_extractor(cfg, &manifest, &plan, &dir))?;
            println!("train-extractor: final validation accuracy {:.4}", s.final_accuracy());
        }
        "extract-voi" => {
            let plan = run::read_split(cfg, &manifest, &dir)?;
            let ex = log.stage(name, || run::extract_all(cfg, &manifest, &plan, &dir))?;
            let failed = ex.iter().filter(|e| e.voi.is_none()).count();
            println!("extract-voi: {} patients, {failed} without signal", ex.len());
        }
        "train-classifier" => {
            let plan = run::read_split(cfg, &manifest, &dir)?;
            let ex = run::read_extractions(cfg, &dir)?;
            let p = log.stage(name, || run::train_classifiers(cfg, &manifest, &plan, &ex, &dir))?;
            println!("train-classifier: {} test predictions", p.len());
        }
        "evaluate" => {
            let plan = run::read_split(cfg, &manifest, &dir)?;
            let report = log.stage(name, || run::evaluate(cfg, &manifest, &plan, &dir))?;
            print!("{}", run::render_report(&report, cfg));
        }
        other => unreachable!("subcommand {other} is registered but not handled"),
    }
    Ok(())
}

fn default_out(dir: &RunDir, volume: &Path) -> PathBuf {
    let stem = volume.file_stem().map_or_else(|| "volume".into(), |s| s.to_string_lossy().into_owned());
    dir.root.join("gradcam").join(stem)
}

fn run(args: Vec<OsString>) -> ExitCode {
    let matches = match cli().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => return parse_error(e),
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let result = resolve(sub).and_then(|cfg| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| Error::Validation(format!("worker pool: {e}")))?;
        dispatch(name, sub, &cfg)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.category(), &e.to_string()),
    }
}

fn main() -> ExitCode {
    init_logger();
    run(std::env::args_os().collect())
}
