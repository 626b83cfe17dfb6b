//! `dualseg`: phantom data generation, training, inference, the
//! coarse-to-fine pipeline, evaluation, distance-transform tools, and
//! gradient checks — one deterministic command per task.
//!
//! Every command exits nonzero on failure with a single
//! `error: <message>` line on stderr. Given the same config and seed,
//! every command produces byte-identical output files.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use dualseg_core::error::{Error, Result};
use dualseg_core::grid::Mask;
use dualseg_core::io::checkpoint::{load_checkpoint, save_checkpoint};
use dualseg_core::io::config::RunConfig;
use dualseg_core::io::csv::{
    read_manifest, write_loss_log, write_metrics, ManifestEntry, MetricsRow,
};
use dualseg_core::io::dsv1::{read_distance, read_mask, read_volume, write_distance, write_mask};
use dualseg_core::metrics::{asd, centroid_distance, dsc, hd95};
use dualseg_core::net::{BranchOutputs, Network};
use dualseg_core::phantom::{gen_dataset, DomainStyle};
use dualseg_core::pipeline::{binarize, infer_patchwise, run_two_stage, Predictor, RoiMode};
use dualseg_core::sdt::{distmap_to_mask, signed_distance_map};
use dualseg_core::trainer::{train, Arm, TrainCase};

#[derive(Parser)]
#[command(
    name = "dualseg",
    version,
    about = "Dual-task lesion segmentation toolchain",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArmArg {
    Bl,
    Idr,
    Dtl,
    Dsl,
    Full,
}

impl From<ArmArg> for Arm {
    fn from(a: ArmArg) -> Arm {
        match a {
            ArmArg::Bl => Arm::Bl,
            ArmArg::Idr => Arm::Idr,
            ArmArg::Dtl => Arm::Dtl,
            ArmArg::Dsl => Arm::Dsl,
            ArmArg::Full => Arm::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RoiArg {
    Seg,
    Mask,
}

#[derive(Clone, Copy, ValueEnum)]
enum TargetArg {
    Lesion,
    Organ,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic dataset tools.
    Phantom {
        #[command(subcommand)]
        cmd: PhantomCmd,
    },
    /// Train one ablation arm and write a checkpoint plus a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Dataset manifest (CSV) to train from.
        #[arg(long)]
        data: PathBuf,
        /// Which loss arm to train.
        #[arg(long, value_enum)]
        arm: ArmArg,
        /// Which mask column is the training label.
        #[arg(long, value_enum, default_value = "lesion")]
        target: TargetArg,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Loss log path (default: checkpoint path with .loss.csv).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Patch-wise inference of one volume into a binary mask.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Probability threshold (default from config, 0.5).
        #[arg(long)]
        threshold: Option<f64>,
        /// Optional run config for patch and overlap settings.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Coarse-to-fine cascade commands.
    Pipeline {
        #[command(subcommand)]
        cmd: PipelineCmd,
    },
    /// Compare prediction masks against reference masks.
    Eval {
        /// Directory of predicted .dsv1 masks.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of reference masks with the same file names.
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Signed distance transform of a mask, or its inverse.
    Sdt {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Distance cap in mm.
        #[arg(long, default_value_t = 30.0)]
        cap: f64,
        /// Threshold a distance map back into a mask.
        #[arg(long)]
        invert: bool,
    },
    /// Finite-difference verification of the analytic gradients.
    Gradcheck {
        /// Check only the loss terms.
        #[arg(long)]
        losses: bool,
        /// Check only the network parameter gradients.
        #[arg(long)]
        net: bool,
        #[arg(long, default_value_t = 17)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum PhantomCmd {
    /// Generate the three-domain dataset with a manifest.
    Gen {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum PipelineCmd {
    /// Run the cascade on one manifest case.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Case id to process.
        #[arg(long)]
        case: String,
        #[arg(long)]
        out: PathBuf,
        /// Organ region source: predicted (seg) or ground truth (mask).
        #[arg(long, value_enum)]
        roi: Option<RoiArg>,
        #[arg(long)]
        organ_coarse: Option<PathBuf>,
        #[arg(long)]
        organ_fine: Option<PathBuf>,
        #[arg(long)]
        lesion_coarse: PathBuf,
        #[arg(long)]
        lesion_fine: PathBuf,
    },
}

/// Stand-in for checkpoints that were not supplied; the cascade only
/// consults it on paths that genuinely need the model.
struct Unavailable(&'static str);

impl Predictor for Unavailable {
    fn predict_patch(
        &mut self,
        _patch: &dualseg_core::grid::Volume,
        _origin: [usize; 3],
    ) -> Result<BranchOutputs> {
        Err(Error::StateError(format!(
            "{} checkpoint was not provided but the pipeline needs it",
            self.0
        )))
    }
}

fn find_case<'a>(entries: &'a [ManifestEntry], case: &str) -> Result<&'a ManifestEntry> {
    entries.iter().find(|e| e.case_id == case).ok_or_else(|| {
        Error::ConfigError(format!("case {case:?} not found in the manifest"))
    })
}

fn load_net(path: &Path) -> Result<Network> {
    load_checkpoint(path)
}

fn cmd_phantom_gen(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let styles = [
        DomainStyle::domain_a(),
        DomainStyle::domain_b(),
        DomainStyle::domain_c(),
    ];
    let counts = [cfg.phantom_count_a, cfg.phantom_count_b, cfg.phantom_count_c];
    let entries = gen_dataset(
        &styles,
        &counts,
        cfg.seed,
        cfg.phantom_dims,
        cfg.spacing()?,
        out,
    )?;
    println!("wrote {} cases to {}", entries.len(), out.display());
    Ok(())
}

fn load_cases(
    data: &Path,
    domains: &[String],
    target: TargetArg,
) -> Result<Vec<TrainCase>> {
    let entries = read_manifest(data)?;
    let base = data.parent().unwrap_or(Path::new("."));
    let mut cases = Vec::new();
    for e in &entries {
        if !domains.iter().any(|d| d == &e.domain) {
            continue;
        }
        let volume = read_volume(&ManifestEntry::resolve(base, &e.volume_path))?;
        let label_path = match target {
            TargetArg::Lesion => &e.lesion_path,
            TargetArg::Organ => &e.organ_path,
        };
        let label = read_mask(&ManifestEntry::resolve(base, label_path))?;
        cases.push(TrainCase { id: e.case_id.clone(), volume, label });
    }
    if cases.is_empty() {
        return Err(Error::ConfigError(format!(
            "no manifest cases in domains {domains:?}"
        )));
    }
    Ok(cases)
}

fn cmd_train(
    config: &Path,
    data: &Path,
    arm: ArmArg,
    target: TargetArg,
    out: &Path,
    log: Option<PathBuf>,
) -> Result<()> {
    let cfg = RunConfig::from_file(config)?;
    let cases = load_cases(data, &cfg.domains()?, target)?;
    let mut net = Network::build(&cfg.net_config())?;
    let rows = train(&mut net, &cases, &cfg.train_config(arm.into())?)?;
    save_checkpoint(&mut net, out)?;
    let log_path = log.unwrap_or_else(|| out.with_extension("loss.csv"));
    write_loss_log(&rows, &log_path)?;
    println!(
        "trained arm {} for {} iterations on {} cases; checkpoint {}, loss log {}",
        Arm::from(arm).as_str(),
        rows.len(),
        cases.len(),
        out.display(),
        log_path.display()
    );
    Ok(())
}

fn cmd_infer(
    ckpt: &Path,
    input: &Path,
    out: &Path,
    threshold: Option<f64>,
    config: Option<PathBuf>,
) -> Result<()> {
    let cfg = match config {
        Some(p) => RunConfig::from_file(&p)?,
        None => RunConfig::default(),
    };
    let mut net = load_net(ckpt)?;
    let vol = read_volume(input)?;
    let grids = infer_patchwise(&mut net, &vol, cfg.pipeline_patch, cfg.pipeline_overlap)?;
    let mask = binarize(&grids.seg_prob, threshold.unwrap_or(cfg.pipeline_threshold))?;
    write_mask(&mask, out)?;
    println!(
        "wrote {} ({} foreground voxels)",
        out.display(),
        mask.count_fg()
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_pipeline_run(
    config: &Path,
    data: &Path,
    case: &str,
    out: &Path,
    roi: Option<RoiArg>,
    organ_coarse: Option<PathBuf>,
    organ_fine: Option<PathBuf>,
    lesion_coarse: &Path,
    lesion_fine: &Path,
) -> Result<()> {
    let mut cfg = RunConfig::from_file(config)?;
    if let Some(r) = roi {
        cfg.pipeline_roi = match r {
            RoiArg::Seg => RoiMode::Seg,
            RoiArg::Mask => RoiMode::Mask,
        };
    }
    let entries = read_manifest(data)?;
    let entry = find_case(&entries, case)?;
    let base = data.parent().unwrap_or(Path::new("."));
    let vol = read_volume(&ManifestEntry::resolve(base, &entry.volume_path))?;
    let gt_organ: Option<Mask> = match cfg.pipeline_roi {
        RoiMode::Mask => Some(read_mask(&ManifestEntry::resolve(base, &entry.organ_path))?),
        RoiMode::Seg => None,
    };

    let mut lc = load_net(lesion_coarse)?;
    let mut lf = load_net(lesion_fine)?;
    let mut oc_net;
    let mut of_net;
    let mut oc_stub = Unavailable("organ-coarse");
    let mut of_stub = Unavailable("organ-fine");
    let oc: &mut dyn Predictor = match organ_coarse {
        Some(p) => {
            oc_net = load_net(&p)?;
            &mut oc_net
        }
        None => &mut oc_stub,
    };
    let of: &mut dyn Predictor = match organ_fine {
        Some(p) => {
            of_net = load_net(&p)?;
            &mut of_net
        }
        None => &mut of_stub,
    };

    let result = run_two_stage(
        &vol,
        oc,
        of,
        &mut lc,
        &mut lf,
        gt_organ.as_ref(),
        &cfg.pipeline_config(),
    )?;

    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;
    let organ_path = out.join(format!("{case}_organ.dsv1"));
    let lesion_path = out.join(format!("{case}_lesion.dsv1"));
    write_mask(&result.organ, &organ_path)?;
    write_mask(&result.lesion, &lesion_path)?;

    for s in &result.stages {
        println!(
            "stage {} seconds {:.3} roi ({},{},{})..({},{},{})",
            s.stage,
            s.seconds,
            s.roi.min[0],
            s.roi.min[1],
            s.roi.min[2],
            s.roi.max[0],
            s.roi.max[1],
            s.roi.max[2]
        );
    }
    println!("organ_fallback {}", result.organ_fallback);
    println!("lesion_roi_fallback {}", result.lesion_roi_fallback);
    println!(
        "wrote {} and {}",
        organ_path.display(),
        lesion_path.display()
    );
    Ok(())
}

fn cmd_eval(pred: &Path, reference: &Path, out: &Path) -> Result<()> {
    let mut names: Vec<String> = std::fs::read_dir(pred)
        .map_err(|e| Error::io(pred.display().to_string(), e))?
        .filter_map(|r| r.ok())
        .filter(|e| e.path().extension().is_some_and(|x| x == "dsv1"))
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::ConfigError(format!(
            "no .dsv1 files in {}",
            pred.display()
        )));
    }
    let mut rows = Vec::new();
    for name in &names {
        let p = read_mask(&pred.join(name))?;
        let r = read_mask(&reference.join(name))?;
        let spacing = p.spacing();
        let stem = name.trim_end_matches(".dsv1").to_string();
        let fallback = (p.count_fg() == 0) != (r.count_fg() == 0);
        rows.push(MetricsRow {
            case_id: stem,
            stage: "mask".into(),
            dsc: dsc(&p, &r)?,
            asd: asd(&p, &r, spacing)?,
            hd95: hd95(&p, &r, spacing)?,
            centroid_mm: centroid_distance(&p, &r, spacing)?,
            fallback,
        });
    }
    write_metrics(&rows, out)?;
    let mean_dsc = rows.iter().map(|r| r.dsc).sum::<f64>() / rows.len() as f64;
    println!(
        "evaluated {} masks; mean dsc {:.2}; report {}",
        rows.len(),
        mean_dsc,
        out.display()
    );
    Ok(())
}

fn cmd_sdt(input: &Path, out: &Path, cap: f64, invert: bool) -> Result<()> {
    if invert {
        let d = read_distance(input)?;
        let m = distmap_to_mask(&d);
        write_mask(&m, out)?;
        println!("wrote mask {} ({} foreground voxels)", out.display(), m.count_fg());
    } else {
        let m = read_mask(input)?;
        let d = signed_distance_map(&m, cap)?;
        write_distance(&d, out)?;
        println!("wrote distance map {}", out.display());
    }
    Ok(())
}

fn cmd_gradcheck(losses: bool, net: bool, seed: u64) -> Result<()> {
    let both = losses == net; // neither or both flags → run everything
    let mut reports = Vec::new();
    if losses || both {
        reports.push(dualseg_core::gradcheck::check_losses(seed, 50)?);
    }
    if net || both {
        reports.push(dualseg_core::gradcheck::check_net(seed, 30)?);
    }
    let mut ok = true;
    for report in &reports {
        for e in &report.entries {
            println!(
                "gradcheck {} points {} max_rel_err {:.3e} tol {:.0e} {}",
                e.name,
                e.points,
                e.max_rel_err,
                e.tol,
                if e.pass() { "pass" } else { "FAIL" }
            );
            ok &= e.pass();
        }
    }
    if !ok {
        return Err(Error::StateError(
            "gradient check exceeded tolerance".into(),
        ));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Phantom { cmd: PhantomCmd::Gen { config, out } } => cmd_phantom_gen(&config, &out),
        Cmd::Train { config, data, arm, target, out, log } => {
            cmd_train(&config, &data, arm, target, &out, log)
        }
        Cmd::Infer { ckpt, input, out, threshold, config } => {
            cmd_infer(&ckpt, &input, &out, threshold, config)
        }
        Cmd::Pipeline {
            cmd:
                PipelineCmd::Run {
                    config,
                    data,
                    case,
                    out,
                    roi,
                    organ_coarse,
                    organ_fine,
                    lesion_coarse,
                    lesion_fine,
                },
        } => cmd_pipeline_run(
            &config,
            &data,
            &case,
            &out,
            roi,
            organ_coarse,
            organ_fine,
            &lesion_coarse,
            &lesion_fine,
        ),
        Cmd::Eval { pred, reference, out } => cmd_eval(&pred, &reference, &out),
        Cmd::Sdt { input, out, cap, invert } => cmd_sdt(&input, &out, cap, invert),
        Cmd::Gradcheck { losses, net, seed } => cmd_gradcheck(losses, net, seed),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
