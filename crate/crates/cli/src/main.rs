//! Command-line front end: phantom generation, ROI detection, training,
//! segmentation, clinical indices, evaluation and pruning reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use lconet::checkpoint;
use lconet::lg_conv::prune_report_csv;
use lconet::clinical::{report, SegmentationResult, CSV_HEADER};
use lconet::net::CountMode;
use lconet::pipeline::{
    emit_report_csv, evaluate, generate_cohort, load_dataset, metrics_csv, prepare_subject, save_dataset,
    segment_frames, train, train_val_test_split, Split, TrainConfig,
};
use lconet::roi::{detect_roi, first_harmonic_map, saliency_pgm, HoughConfig};
use lconet::volume::{CineVolume, Geometry, MaskVolume};

#[derive(Parser)]
#[command(name = "lconet", version, about = "Condensed group-convolution cardiac segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    All,
    Train,
    Validation,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cine cohort with ground-truth masks.
    Phantom {
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Locate the left ventricle in a cine volume.
    Roi {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the summed first-harmonic map as a PGM image.
        #[arg(long)]
        pgm: Option<PathBuf>,
    },
    /// Train on a dataset directory and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Segment every frame of a cine volume (or the listed ones).
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        frames: Option<Vec<usize>>,
    },
    /// Clinical indices from ED and ES label volumes.
    Params {
        #[arg(long)]
        ed: PathBuf,
        #[arg(long)]
        es: PathBuf,
        /// Geometry JSON; defaults to the geometry stored in the ED volume.
        #[arg(long)]
        geom: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-subject, per-class metrics CSV. Clinical rows go to
        /// `<stem>_clinical.csv` and their summary next to it.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
        /// Training config whose seed and fractions define the split.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Per-layer alive counts and pruned channels of a checkpoint.
    PruneReport {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(TrainConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?)
        }
        None => Ok(TrainConfig::default()),
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let ext = path.extension().map(|e| format!(".{}", e.to_string_lossy())).unwrap_or_default();
    path.with_file_name(format!("{stem}_{suffix}{ext}"))
}

fn phantom(count: usize, out: &Path, seed: u64) -> Result<()> {
    let subjects = generate_cohort(count, seed)?;
    save_dataset(out, &subjects)?;
    println!("wrote {count} subjects to {}", out.display());
    Ok(())
}

fn roi(input: &Path, out: &Path, pgm: Option<&Path>) -> Result<()> {
    let cine = CineVolume::load(input).with_context(|| format!("loading {}", input.display()))?;
    let d = detect_roi(&cine, &HoughConfig::default())?;
    let json = serde_json::json!({
        "center": d.roi.center,
        "radius": d.roi.radius,
        "crop_corner": d.roi.crop_corner,
        "size": d.roi.size,
        "padded": d.roi.padded,
        "fallback": d.fallback,
    });
    write(out, serde_json::to_string_pretty(&json)? + "\n")?;
    if let Some(p) = pgm {
        write(p, saliency_pgm(&first_harmonic_map(&cine)?))?;
    }
    if d.fallback {
        log::warn!("no circle found; window placed at the image centre");
    }
    Ok(())
}

fn select(groups: &[String], split: SplitArg, cfg: &TrainConfig) -> Result<Vec<bool>> {
    let wanted = match split {
        SplitArg::All => return Ok(vec![true; groups.len()]),
        SplitArg::Train => Split::Train,
        SplitArg::Validation => Split::Validation,
        SplitArg::Test => Split::Test,
    };
    let s = train_val_test_split(groups, cfg.train_fraction, cfg.val_fraction, cfg.seed)?;
    Ok(s.into_iter().map(|x| x == wanted).collect())
}

fn train_cmd(data: &Path, config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    cfg.validate()?;
    let subjects = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let groups: Vec<String> = subjects.iter().map(|s| s.group.clone()).collect();
    let split = train_val_test_split(&groups, cfg.train_fraction, cfg.val_fraction, cfg.seed)?;
    let (mut train_set, mut val_set) = (Vec::new(), Vec::new());
    for (s, which) in subjects.iter().zip(&split) {
        match which {
            Split::Train => train_set.push(prepare_subject(s, &cfg.hough, cfg.net.input_size)?),
            Split::Validation => val_set.push(prepare_subject(s, &cfg.hough, cfg.net.input_size)?),
            Split::Test => {}
        }
    }
    if train_set.is_empty() {
        bail!("the split leaves no training subjects");
    }
    log::info!("{} training and {} validation subjects", train_set.len(), val_set.len());
    let outcome = train(&train_set, &val_set, &cfg)?;
    checkpoint::save(out, &outcome.network, cfg.epochs)?;
    let history = sibling(out, "history");
    write(&history.with_extension("json"), serde_json::to_string_pretty(&outcome.history)? + "\n")?;
    if let Some(last) = outcome.history.last() {
        println!(
            "epoch {} loss {:.4} val LV Dice {} alive params {}",
            last.epoch,
            last.loss,
            last.val_lv_dice.map(|d| format!("{d:.4}")).unwrap_or_else(|| "n/a".into()),
            last.alive_params
        );
    }
    Ok(())
}

fn segment(ckpt: &Path, input: &Path, out: &Path, frames: Option<Vec<usize>>) -> Result<()> {
    let mut net = checkpoint::load::<f32>(ckpt)?.network;
    if net.lg_layers().iter().all(|l| l.is_fully_condensed()) {
        net.compile_inference()?;
    }
    let cine = CineVolume::load(input).with_context(|| format!("loading {}", input.display()))?;
    let [t_len, z, h, w] = cine.dims();
    let frames = frames.unwrap_or_else(|| (0..t_len).collect());
    if frames.is_empty() {
        bail!("no frames selected");
    }
    let (d, masks) = segment_frames(&net, &cine, &frames, &HoughConfig::default())?;
    if d.fallback {
        log::warn!("ROI detection fell back to the image centre");
    }
    let data: Vec<u8> = masks.into_iter().flatten().collect();
    MaskVolume::new([frames.len(), z, h, w], data, cine.geometry().clone())?
        .with_label_names(MaskVolume::standard_label_names())
        .save(out)?;
    Ok(())
}

fn params(ed: &Path, es: &Path, geom: Option<&Path>, out: &Path) -> Result<()> {
    let ed_vol = MaskVolume::load(ed).with_context(|| format!("loading {}", ed.display()))?;
    let es_vol = MaskVolume::load(es).with_context(|| format!("loading {}", es.display()))?;
    if ed_vol.frames() != 1 || es_vol.frames() != 1 {
        bail!("ED and ES masks must hold exactly one frame each");
    }
    let geometry = match geom {
        Some(p) => Geometry::from_json(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => ed_vol.geometry().clone(),
    };
    let r = report(&SegmentationResult {
        ed: Some(ed_vol.data().to_vec()),
        es: Some(es_vol.data().to_vec()),
        geometry,
    })?;
    write(out, serde_json::to_string_pretty(&r)? + "\n")?;
    write(&out.with_extension("csv"), format!("{CSV_HEADER}\n{}\n", r.csv_row()))?;
    println!("{CSV_HEADER}\n{}", r.csv_row());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, out: &Path, split: SplitArg, config: Option<&Path>) -> Result<()> {
    let cfg = load_config(config)?;
    let mut net = checkpoint::load::<f32>(ckpt)?.network;
    if net.lg_layers().iter().all(|l| l.is_fully_condensed()) {
        net.compile_inference()?;
    }
    let subjects = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let groups: Vec<String> = subjects.iter().map(|s| s.group.clone()).collect();
    let keep = select(&groups, split, &cfg)?;
    let chosen: Vec<_> = subjects.into_iter().zip(keep).filter(|(_, k)| *k).map(|(s, _)| s).collect();
    if chosen.is_empty() {
        bail!("no subjects in the selected split");
    }
    let ev = evaluate(&net, &chosen, &cfg.hough)?;
    write(out, metrics_csv(&ev))?;
    let files = emit_report_csv(&ev, &sibling(out, "clinical"))?;
    for class in ["LV", "myocardium", "RV"] {
        if let Some(d) = ev.mean_dice(class) {
            println!("mean Dice {class}: {d:.4}");
        }
    }
    for row in ev.summary() {
        println!("{}: rho {:.4}, mean abs error {:.4} (n = {})", row.parameter, row.rho, row.mean_abs_error, row.n);
    }
    if ev.roi_fallbacks > 0 {
        log::warn!("{} subjects used the centre ROI fallback", ev.roi_fallbacks);
    }
    log::info!("wrote {}, {} and {}", out.display(), files.clinical.display(), files.summary.display());
    Ok(())
}

fn prune_report(ckpt: &Path, csv: Option<&Path>) -> Result<()> {
    let c = checkpoint::load::<f32>(ckpt)?;
    let net = &c.network;
    let layers = net.lg_layers();
    let mut text = String::new();
    writeln!(text, "checkpoint epoch {}", c.epoch)?;
    for l in &layers {
        writeln!(
            text,
            "{}: stage {}/{} alive {}/{} weights, {} of {} input channels per group",
            l.name(),
            l.stage(),
            l.condensation_factor().saturating_sub(1),
            l.alive_weight_count(),
            l.dense_weight_count(),
            l.alive_channels(0).len(),
            l.in_channels()
        )?;
        for rec in l.history() {
            for (g, pruned) in rec.pruned.iter().enumerate() {
                let list: Vec<String> = pruned.iter().map(usize::to_string).collect();
                writeln!(text, "  stage {} group {g}: pruned {}", rec.stage, list.join(" "))?;
            }
        }
    }
    writeln!(
        text,
        "total parameters: {} alive of {} dense; LG-Conv weights {} of {}",
        net.param_count(CountMode::Alive),
        net.param_count(CountMode::Dense),
        net.lg_param_count(CountMode::Alive),
        net.lg_param_count(CountMode::Dense)
    )?;
    print!("{text}");
    if let Some(p) = csv {
        write(p, prune_report_csv(&layers))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Phantom { count, out, seed } => phantom(count, &out, seed),
        Command::Roi { input, out, pgm } => roi(&input, &out, pgm.as_deref()),
        Command::Train { data, config, out } => train_cmd(&data, config.as_deref(), &out),
        Command::Segment { ckpt, input, out, frames } => segment(&ckpt, &input, &out, frames),
        Command::Params { ed, es, geom, out } => params(&ed, &es, geom.as_deref(), &out),
        Command::Eval { ckpt, data, out, split, config } => eval(&ckpt, &data, &out, split, config.as_deref()),
        Command::PruneReport { ckpt, csv } => prune_report(&ckpt, csv.as_deref()),
    }
}
