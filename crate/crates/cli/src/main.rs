//! Command-line front end for the multi-view segmentation pipeline.

mod config;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use config::RunConfig;
use ssnet::checkpoint::Checkpoint;
use ssnet::manifest::{Manifest, ManifestEntry, TEST_SPLIT, TRAIN_SPLIT};
use ssnet::metrics::{
    dice_coefficient, format_summary, hausdorff_distance, mean_surface_distance, read_scores_csv,
    summarize, write_scores_csv, ScanScore,
};
use ssnet::phantom::generate_cohort;
use ssnet::preprocess::{
    normalize_intensity, resample_cube_intensity, resample_cube_label, resample_to_original,
    DEFAULT_HIGH_PCT, DEFAULT_LOW_PCT,
};
use ssnet::training::{kfold_split, predict_cube, train_view_with, TrainEvent};
use ssnet::volume::{IntensityVolume, LabelVolume, ViewAxis, Volume};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "ssnet",
    about = "Multi-view volumetric segmentation: phantoms, preprocessing, training, \
             prediction, fusion, and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom cohort with a manifest.
    Phantom {
        /// TOML run configuration (phantom section).
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Number of phantoms (styles alternate).
        #[arg(long, default_value_t = 24)]
        count: usize,
        /// Trailing scans marked as the held-out test split.
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Normalize intensities and resample every volume to an isotropic cube.
    Preprocess {
        #[arg(long)]
        in_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 512)]
        cube_side: usize,
    },
    /// Train per-view networks on a preprocessed cohort.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory with preprocessed volumes and manifest.json.
        #[arg(long)]
        data_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// axial | coronal | sagittal | all
        #[arg(long, default_value = "all")]
        view: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Predict masks for a volume from one (single view) or three (fused)
    /// checkpoints.
    Predict {
        /// Checkpoint file; repeat for the three-view fused protocol.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        volume: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Score predictions against reference masks.
    Evaluate {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        truth_dir: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Per-scan CSV of a reference method for paired significance tests.
        #[arg(long)]
        reference_csv: Option<PathBuf>,
    },
    /// Subject-grouped k-fold assignment from a manifest.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    match Cli::parse().command {
        Command::Phantom { config, out_dir, count, holdout, seed } => {
            cmd_phantom(config.as_deref(), &out_dir, count, holdout, seed)
        }
        Command::Preprocess { in_dir, out_dir, cube_side } => {
            cmd_preprocess(&in_dir, &out_dir, cube_side)
        }
        Command::Train { config, data_dir, out_dir, view, seed } => {
            cmd_train(config.as_deref(), &data_dir, &out_dir, &view, seed)
        }
        Command::Predict { checkpoints, volume, out_dir } => {
            cmd_predict(&checkpoints, &volume, &out_dir)
        }
        Command::Evaluate { pred_dir, truth_dir, out_dir, reference_csv } => {
            cmd_evaluate(&pred_dir, &truth_dir, &out_dir, reference_csv.as_deref())
        }
        Command::Split { manifest, k, seed, out } => cmd_split(&manifest, k, seed, &out),
    }
}

fn cmd_phantom(
    config: Option<&Path>,
    out_dir: &Path,
    count: usize,
    holdout: usize,
    seed: Option<u64>,
) -> Result<()> {
    if holdout >= count {
        bail!("holdout {holdout} must be smaller than count {count}");
    }
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed(seed);
    let spec = cfg.phantom_spec();
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let cohort = generate_cohort(count, &spec, seed)?;
    let mut entries = Vec::with_capacity(count);
    for (idx, scan) in cohort.iter().enumerate() {
        let image_name = format!("{}.nii.gz", scan.scan_id);
        let label_name = format!("{}_label.nii.gz", scan.scan_id);
        ssnet::io::save_volume(
            &Volume::Intensity(scan.image.clone()),
            out_dir.join(&image_name),
        )?;
        ssnet::io::save_volume(&Volume::Label(scan.label.clone()), out_dir.join(&label_name))?;
        entries.push(ManifestEntry {
            scan_id: scan.scan_id.clone(),
            subject_id: scan.subject_id.clone(),
            modality: scan.style.modality(),
            seed: scan.seed,
            image: image_name,
            label: label_name,
            split: Some(if idx + holdout >= count {
                TEST_SPLIT.to_string()
            } else {
                TRAIN_SPLIT.to_string()
            }),
        });
        println!(
            "phantom scan={} subject={} modality={}",
            scan.scan_id,
            scan.subject_id,
            scan.style.modality().as_str()
        );
    }
    Manifest { entries }.save(out_dir.join("manifest.json"))?;
    println!("phantom cohort={count} holdout={holdout} dir={}", out_dir.display());
    Ok(())
}

fn is_volume_file(name: &str) -> bool {
    name.ends_with(".nii") || name.ends_with(".nii.gz") || name.ends_with(".raw")
}

fn cmd_preprocess(in_dir: &Path, out_dir: &Path, cube_side: usize) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut names: Vec<String> = std::fs::read_dir(in_dir)
        .with_context(|| format!("reading {}", in_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| is_volume_file(n))
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no volume files found in {}", in_dir.display());
    }
    for name in &names {
        let path = in_dir.join(name);
        let volume = ssnet::io::load_volume(&path)
            .with_context(|| format!("loading {}", path.display()))?;
        let out = match volume {
            Volume::Intensity(v) => {
                let v = normalize_intensity(&v, DEFAULT_LOW_PCT, DEFAULT_HIGH_PCT)
                    .with_context(|| format!("normalizing {}", path.display()))?;
                Volume::Intensity(resample_cube_intensity(&v, cube_side)?)
            }
            Volume::Label(v) => Volume::Label(resample_cube_label(&v, cube_side)?),
        };
        ssnet::io::save_volume(&out, out_dir.join(name))?;
        println!("preprocess file={name} cube={cube_side}");
    }
    // Keep the manifest alongside the preprocessed volumes.
    let manifest = in_dir.join("manifest.json");
    if manifest.exists() {
        std::fs::copy(&manifest, out_dir.join("manifest.json"))
            .with_context(|| "copying manifest.json")?;
    }
    Ok(())
}

fn load_split(
    data_dir: &Path,
    manifest: &Manifest,
    which: &str,
) -> Result<Vec<(IntensityVolume, LabelVolume)>> {
    let mut out = Vec::new();
    for entry in manifest.split(which) {
        let image = ssnet::io::load_intensity(data_dir.join(&entry.image))?;
        let label = ssnet::io::load_label(data_dir.join(&entry.label))?;
        out.push((image, label));
    }
    Ok(out)
}

fn parse_views(view: &str) -> Result<Vec<ViewAxis>> {
    if view == "all" {
        return Ok(ViewAxis::ALL.to_vec());
    }
    match ViewAxis::parse(view) {
        Some(v) => Ok(vec![v]),
        None => bail!("unknown view {view:?} (expected axial, coronal, sagittal, or all)"),
    }
}

fn cmd_train(
    config: Option<&Path>,
    data_dir: &Path,
    out_dir: &Path,
    view: &str,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let seed = cfg.seed(seed);
    let views = parse_views(view)?;
    let manifest_path = data_dir.join("manifest.json");
    let manifest = Manifest::load(&manifest_path)
        .with_context(|| format!("loading manifest {}", manifest_path.display()))?;
    let train = load_split(data_dir, &manifest, TRAIN_SPLIT)?;
    let test = load_split(data_dir, &manifest, TEST_SPLIT)?;
    if train.is_empty() {
        bail!("manifest {} has no training scans", manifest_path.display());
    }
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let validation = (!test.is_empty()).then_some(test.as_slice());

    for v in views {
        let tcfg = cfg.train_config(v, seed);
        let gcfg = cfg.generator_config();
        println!(
            "train view={} scans={} epochs={} batch={} lr={} lambda={} k={}",
            v.as_str(),
            train.len(),
            tcfg.epochs,
            tcfg.batch_size,
            tcfg.learning_rate,
            tcfg.loss.lambda,
            tcfg.loss.gate_period
        );
        let mut epoch_rows = vec!["epoch,mean_dice_loss,val_median_dsc".to_string()];
        let (ckpt, _) = train_view_with(&train, validation, &gcfg, &tcfg, |event| match event {
            TrainEvent::Step(s) => {
                println!(
                    "step batch={} dice={:.6} gan_g={} disc={} d_updated={}",
                    s.batch_index,
                    s.dice_loss,
                    s.gan_generator_loss
                        .map_or("-".to_string(), |v| format!("{v:.6}")),
                    s.discriminator_loss
                        .map_or("-".to_string(), |v| format!("{v:.6}")),
                    s.discriminator_updated
                );
            }
            TrainEvent::Epoch(e) => {
                println!(
                    "epoch index={} mean_dice={:.6} val_dsc={}",
                    e.epoch,
                    e.mean_dice_loss,
                    e.val_median_dsc
                        .map_or("-".to_string(), |v| format!("{v:.6}"))
                );
                epoch_rows.push(format!(
                    "{},{:.6},{}",
                    e.epoch,
                    e.mean_dice_loss,
                    e.val_median_dsc.map_or(String::new(), |v| format!("{v:.6}"))
                ));
            }
        })?;
        let ckpt_path = out_dir.join(format!("{}.ckpt", v.as_str()));
        ckpt.save(&ckpt_path)?;
        std::fs::write(
            out_dir.join(format!("{}_epochs.csv", v.as_str())),
            epoch_rows.join("\n") + "\n",
        )?;
        println!("checkpoint view={} path={}", v.as_str(), ckpt_path.display());
    }
    Ok(())
}

fn volume_stem(path: &Path) -> String {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz")
        .trim_end_matches(".nii")
        .trim_end_matches(".raw")
        .to_string()
}

fn cmd_predict(checkpoints: &[PathBuf], volume: &Path, out_dir: &Path) -> Result<()> {
    if checkpoints.len() != 1 && checkpoints.len() != 3 {
        bail!(
            "expected 1 checkpoint (single view) or 3 (fused multi-view), got {}",
            checkpoints.len()
        );
    }
    let original = ssnet::io::load_intensity(volume)
        .with_context(|| format!("loading {}", volume.display()))?;
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let stem = volume_stem(volume);

    let mut cube_masks: BTreeMap<&'static str, LabelVolume> = BTreeMap::new();
    let mut prepped: Option<(usize, IntensityVolume)> = None;
    for path in checkpoints {
        let ckpt = Checkpoint::load(path)?;
        let side = ckpt.train_config.cube_side;
        if prepped.as_ref().map(|(s, _)| *s) != Some(side) {
            let v = normalize_intensity(&original, DEFAULT_LOW_PCT, DEFAULT_HIGH_PCT)?;
            prepped = Some((side, resample_cube_intensity(&v, side)?));
        }
        let (_, cube) = prepped.as_ref().unwrap();
        let gen = ckpt.build_generator()?;
        let view = ckpt.train_config.view;
        if cube_masks.contains_key(view.as_str()) {
            bail!("two checkpoints carry the same view {}", view.as_str());
        }
        let mask = predict_cube(&gen, cube, view)?;
        println!(
            "predict view={} foreground={} of {}",
            view.as_str(),
            mask.foreground_count(),
            mask.header.voxel_count()
        );
        cube_masks.insert(view.as_str(), mask);
    }

    for (view, mask) in &cube_masks {
        let out = resample_to_original(mask, &original.header)?;
        let path = out_dir.join(format!("{stem}_{view}.nii.gz"));
        ssnet::io::save_volume(&Volume::Label(out), &path)?;
        println!("wrote {}", path.display());
    }
    if checkpoints.len() == 3 {
        let fused = ssnet::fusion::fuse_multiview(
            &cube_masks["axial"],
            &cube_masks["coronal"],
            &cube_masks["sagittal"],
        )?;
        let fused = resample_to_original(&fused, &original.header)?;
        let path = out_dir.join(format!("{stem}_fused.nii.gz"));
        ssnet::io::save_volume(&Volume::Label(fused), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn cmd_evaluate(
    pred_dir: &Path,
    truth_dir: &Path,
    out_dir: &Path,
    reference_csv: Option<&Path>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let mut truth_names: Vec<String> = std::fs::read_dir(truth_dir)
        .with_context(|| format!("reading {}", truth_dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| is_volume_file(n) && volume_stem(Path::new(n)).ends_with("_label"))
        .collect();
    truth_names.sort();
    if truth_names.is_empty() {
        bail!(
            "no reference masks (*_label volumes) found in {}",
            truth_dir.display()
        );
    }

    let mut scores = Vec::new();
    for name in &truth_names {
        let stem = volume_stem(Path::new(name));
        let scan_id = stem.trim_end_matches("_label").to_string();
        let truth = ssnet::io::load_label(truth_dir.join(name))?;
        let mut candidates = Vec::new();
        for suffix in ["_fused", ""] {
            for ext in ["nii.gz", "nii", "raw"] {
                candidates.push(pred_dir.join(format!("{scan_id}{suffix}.{ext}")));
            }
        }
        let pred_path = candidates
            .iter()
            .find(|p| p.exists())
            .with_context(|| {
                format!(
                    "no prediction for scan {scan_id:?} in {} \
                     (tried {scan_id}_fused.* and {scan_id}.*)",
                    pred_dir.display()
                )
            })?;
        let pred = ssnet::io::load_label(pred_path)?;
        let dsc = dice_coefficient(&pred, &truth)?;
        let msd = mean_surface_distance(&pred, &truth)?;
        let hd = hausdorff_distance(&pred, &truth)?;
        println!("evaluate scan={scan_id} dsc={dsc:.4} msd_mm={msd:.3} hd_mm={hd:.3}");
        scores.push(ScanScore { scan_id, dsc, msd_mm: msd, hd_mm: hd });
    }

    let reference = match reference_csv {
        Some(path) => Some(read_scores_csv(path)?),
        None => None,
    };
    let summary = summarize(&scores, reference.as_deref())?;
    write_scores_csv(out_dir.join("scores.csv"), &scores)?;
    let text = format_summary(&summary);
    std::fs::write(out_dir.join("summary.txt"), &text)?;
    print!("{text}");
    Ok(())
}

fn cmd_split(manifest_path: &Path, k: usize, seed: u64, out: &Path) -> Result<()> {
    let manifest = Manifest::load(manifest_path)?;
    let folds = kfold_split(&manifest.scan_meta(), k, seed)?;
    let json = serde_json::json!({
        "k": k,
        "seed": seed,
        "folds": folds,
    });
    std::fs::write(out, serde_json::to_string_pretty(&json)?)
        .with_context(|| format!("writing {}", out.display()))?;
    for (i, fold) in folds.iter().enumerate() {
        println!("fold index={i} scans={}", fold.len());
    }
    Ok(())
}
