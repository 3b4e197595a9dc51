//! `bread`: train, run, score, and ablate the low-light enhancement
//! pipeline from the command line.
//!
//! Exit codes: 0 on success, 2 for configuration errors (including bad
//! flags), 3 for broken or missing data, 4 for missing trained artifacts,
//! 1 for anything else.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use bread_core::imagecore::{load_png, save_png};
use bread_core::nnkit::StageTag;
use bread_core::pipeline::{
    enhance, evaluate, run_ablation, train_stage_from, AblationVariant, BreadBundle, EvalOptions,
    RunConfig,
};
use bread_core::{Error, Result};

#[derive(Parser)]
#[command(name = "bread", version, about = "Low-light image enhancement pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage from a run config.
    Train {
        /// Which sub-network to train.
        #[arg(long, value_enum)]
        stage: StageArg,
        /// Run config file (key=value lines).
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint instead of fresh parameters.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Enhance one image or every .png in a directory.
    Enhance {
        /// Directory holding the trained stage checkpoints.
        #[arg(long)]
        bundle: PathBuf,
        /// Input image file, or a directory of .png files.
        #[arg(long)]
        input: PathBuf,
        /// Output directory; enhanced images keep their file names.
        #[arg(long)]
        output: PathBuf,
        /// Use the multi-exposure color checkpoint (can_me.ckpt).
        #[arg(long)]
        me: bool,
    },
    /// Enhance and score every pair in a manifest.
    Evaluate {
        /// Directory holding the trained stage checkpoints.
        #[arg(long)]
        bundle: PathBuf,
        /// Tab-separated low/reference manifest.
        #[arg(long)]
        manifest: PathBuf,
        /// Where report.csv and report.json are written.
        #[arg(long)]
        out: PathBuf,
        /// Fitted naturalness model; adds the niqe column.
        #[arg(long)]
        niqe_model: Option<PathBuf>,
        /// Use the multi-exposure color checkpoint (can_me.ckpt).
        #[arg(long)]
        me: bool,
    },
    /// Train whatever a reduced variant needs, then score it.
    Ablate {
        /// Which reduced pipeline to run.
        #[arg(long, value_enum)]
        variant: VariantArg,
        /// Run config file (key=value lines).
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StageArg {
    Ian,
    Ansn,
    Nfm,
    Can,
    #[value(name = "can_me")]
    CanMe,
}

impl From<StageArg> for StageTag {
    fn from(s: StageArg) -> StageTag {
        match s {
            StageArg::Ian => StageTag::Ian,
            StageArg::Ansn => StageTag::Ansn,
            StageArg::Nfm => StageTag::Nfm,
            StageArg::Can => StageTag::Can,
            StageArg::CanMe => StageTag::CanMe,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    #[value(name = "no_dn")]
    NoDn,
    #[value(name = "no_nfm")]
    NoNfm,
    #[value(name = "no_sep")]
    NoSep,
    Fgn,
    Pn,
}

impl From<VariantArg> for AblationVariant {
    fn from(v: VariantArg) -> AblationVariant {
        match v {
            VariantArg::NoDn => AblationVariant::NoDn,
            VariantArg::NoNfm => AblationVariant::NoNfm,
            VariantArg::NoSep => AblationVariant::NoSep,
            VariantArg::Fgn => AblationVariant::Fgn,
            VariantArg::Pn => AblationVariant::Pn,
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Image { .. } => 3,
        Error::Dependency(_) | Error::Bundle(_) => 4,
        _ => 1,
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Train {
            stage,
            config,
            resume,
        } => train(stage.into(), &config, resume.as_deref()),
        Command::Enhance {
            bundle,
            input,
            output,
            me,
        } => enhance_cmd(&bundle, &input, &output, me),
        Command::Evaluate {
            bundle,
            manifest,
            out,
            niqe_model,
            me,
        } => evaluate_cmd(&bundle, &manifest, out, niqe_model, me),
        Command::Ablate { variant, config } => ablate_cmd(variant.into(), &config),
    }
}

fn train(stage: StageTag, config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::parse(config)?;
    if let Some(file_stage) = cfg.stage {
        if file_stage != stage {
            return Err(Error::Config(format!(
                "config sets stage={file_stage} but --stage {stage} was given"
            )));
        }
    }
    let ckpt = train_stage_from(stage, &cfg, resume)?;
    println!(
        "trained {stage} to step {} in {}",
        ckpt.step,
        cfg.out_dir.display()
    );
    Ok(())
}

/// A single file is enhanced as-is; a directory means every `.png` inside,
/// in name order.
fn input_images(input: &Path) -> Result<Vec<PathBuf>> {
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|e| Error::io(input, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "png") && p.is_file())
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Data(format!(
                "no .png files in {}",
                input.display()
            )));
        }
        return Ok(files);
    }
    if !input.is_file() {
        return Err(Error::Data(format!("no such input {}", input.display())));
    }
    Ok(vec![input.to_path_buf()])
}

fn enhance_cmd(bundle_dir: &Path, input: &Path, output: &Path, me: bool) -> Result<()> {
    let bundle = BreadBundle::load(bundle_dir, me)?;
    let inputs = input_images(input)?;
    std::fs::create_dir_all(output).map_err(|e| Error::io(output, e))?;
    for path in &inputs {
        let name = path.file_name().expect("input paths name files");
        let img = load_png(path)?;
        let out = enhance(&bundle, &img)?;
        let dst = output.join(name);
        save_png(&dst, &out)?;
        log::info!("{} -> {}", path.display(), dst.display());
    }
    println!("enhanced {} image(s) into {}", inputs.len(), output.display());
    Ok(())
}

fn evaluate_cmd(
    bundle_dir: &Path,
    manifest: &Path,
    out: PathBuf,
    niqe_model: Option<PathBuf>,
    me: bool,
) -> Result<()> {
    let bundle = BreadBundle::load(bundle_dir, me)?;
    let options = EvalOptions {
        out_dir: Some(out.clone()),
        niqe_model,
    };
    let report = evaluate(&bundle, manifest, &options)?;
    print_aggregate(&report);
    println!("report written to {}", out.join("report.csv").display());
    Ok(())
}

fn ablate_cmd(variant: AblationVariant, config: &Path) -> Result<()> {
    let cfg = RunConfig::parse(config)?;
    if cfg.variant != AblationVariant::None && cfg.variant != variant {
        return Err(Error::Config(format!(
            "config sets variant={} but --variant {variant} was given",
            cfg.variant
        )));
    }
    let report = run_ablation(variant, &cfg)?;
    print_aggregate(&report);
    println!(
        "report written to {}",
        cfg.out_dir.join(format!("ablation_{variant}.csv")).display()
    );
    Ok(())
}

fn print_aggregate(report: &bread_core::metrics::MetricReport) {
    let scored = report.rows().iter().filter(|r| r.error.is_none()).count();
    let failed = report.rows().len() - scored;
    println!("scored {scored} image(s), {failed} failed");
    for (metric, mean) in report.aggregate() {
        println!("  {metric}: {mean:.4}");
    }
}
