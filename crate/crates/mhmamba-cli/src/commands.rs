//! Workflow subcommands: train, infer, eval, phantom.
//!
//! Each command resolves its config, delegates the actual work to the
//! library, writes its artifacts under `--out`, and drops a manifest beside
//! them. All randomness descends from the global seed.

use std::fs;
use std::path::{Path, PathBuf};

use mhmamba::error::{Error, Result};
use mhmamba::io::{
    generate_phantom, read_labels, read_volume, sliding_window_infer, write_labels, write_volume,
    PhantomSpec, VolumeFile,
};
use mhmamba::metrics::MetricsReport;
use mhmamba::network::{Network, NetworkConfig, Precision};
use mhmamba::params::ParamStore;
use mhmamba::scalar::Scalar;
use mhmamba::train::train;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::manifest::{write_manifest, RunInfo};

pub const MODALITIES: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Pairs every `*.vol` in the directory with its `*.seg` sibling, sorted by
/// file name so the training order is stable across platforms.
fn paired_cases(data: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let mut vols: Vec<PathBuf> = Vec::new();
    for entry in fs::read_dir(data)
        .map_err(|e| Error::config(format!("cannot read data dir {}: {e}", data.display())))?
    {
        let path = entry?.path();
        if path.extension().is_some_and(|e| e == "vol") {
            vols.push(path);
        }
    }
    vols.sort();
    if vols.is_empty() {
        return Err(Error::config(format!("no .vol files under {}", data.display())));
    }
    let mut pairs = Vec::with_capacity(vols.len());
    for vol in vols {
        let seg = vol.with_extension("seg");
        if !seg.exists() {
            return Err(Error::config(format!("{} has no matching {}", vol.display(), seg.display())));
        }
        pairs.push((vol, seg));
    }
    Ok(pairs)
}

fn train_typed<T: Scalar>(
    cfg: &mut Config,
    net_cfg: &NetworkConfig,
    pairs: &[(PathBuf, PathBuf)],
    out: &Path,
    run: &RunInfo,
) -> Result<()> {
    let mut data = Vec::with_capacity(pairs.len());
    for (vol_path, seg_path) in pairs {
        let file: VolumeFile<T> = read_volume(vol_path)?;
        let (labels, _) = read_labels(seg_path)?;
        data.push((file.volume, labels));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut store = ParamStore::<T>::new();
    let net = Network::register(&mut store, &mut rng, net_cfg)?;
    let tcfg = cfg.train(run.seed, net_cfg.patch)?;
    let outcome = train(&net, &mut store, &data, &tcfg)?;
    let ckpt = out.join("checkpoint.bin");
    let log = out.join("loss.csv");
    store.save(&ckpt)?;
    fs::write(&log, &outcome.log)?;
    write_manifest(out, run, cfg.resolved(), &[ckpt.clone(), log.clone()])?;
    let last = outcome.epoch_losses.last().expect("validated: at least one epoch");
    println!("trained {} case(s), final loss {}", data.len(), last.total);
    println!("wrote {}", ckpt.display());
    println!("wrote {}", log.display());
    Ok(())
}

pub fn cmd_train(cfg: &mut Config, data: &Path, out: &Path, run: &RunInfo) -> Result<()> {
    let net_cfg = cfg.network()?;
    let pairs = paired_cases(data)?;
    ensure_dir(out)?;
    match net_cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, &net_cfg, &pairs, out, run),
        Precision::F64 => train_typed::<f64>(cfg, &net_cfg, &pairs, out, run),
    }
}

fn infer_typed<T: Scalar>(
    cfg: &mut Config,
    net_cfg: &NetworkConfig,
    model: &Path,
    input: &Path,
    out: &Path,
    run: &RunInfo,
) -> Result<()> {
    let overlap = cfg.overlap()?;
    let file: VolumeFile<T> = read_volume(input)?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut store = ParamStore::<T>::new();
    let net = Network::register(&mut store, &mut rng, net_cfg)?;
    store.load(model)?;
    let labels = sliding_window_infer(&net, &store, &file.volume, net_cfg.patch, overlap)?;
    let pred = out.join("prediction.seg");
    write_labels(&pred, &labels, file.spacing)?;
    write_manifest(out, run, cfg.resolved(), &[pred.clone()])?;
    println!("wrote {}", pred.display());
    Ok(())
}

pub fn cmd_infer(
    cfg: &mut Config,
    model: &Path,
    input: &Path,
    out: &Path,
    run: &RunInfo,
) -> Result<()> {
    let net_cfg = cfg.network()?;
    ensure_dir(out)?;
    match net_cfg.precision {
        Precision::F32 => infer_typed::<f32>(cfg, &net_cfg, model, input, out, run),
        Precision::F64 => infer_typed::<f64>(cfg, &net_cfg, model, input, out, run),
    }
}

/// Scores prediction files against references pairwise and reports the
/// mean over cases. Spacing comes from the reference; a prediction whose
/// grid disagrees is a hard error, not a resampling opportunity.
pub fn cmd_eval(
    cfg: &mut Config,
    preds: &[PathBuf],
    gts: &[PathBuf],
    out: Option<&Path>,
    run: &RunInfo,
) -> Result<String> {
    if preds.len() != gts.len() || preds.is_empty() {
        return Err(Error::config(format!(
            "eval needs matching --pred/--gt lists, got {} and {}",
            preds.len(),
            gts.len()
        )));
    }
    let mut reports = Vec::with_capacity(preds.len());
    for (p, g) in preds.iter().zip(gts) {
        let (pred, pred_spacing) = read_labels(p)?;
        let (gt, gt_spacing) = read_labels(g)?;
        if pred_spacing != gt_spacing {
            return Err(Error::config(format!(
                "{}: spacing {:?} disagrees with reference {:?}",
                p.display(),
                pred_spacing,
                gt_spacing
            )));
        }
        reports.push(MetricsReport::evaluate(&pred, &gt, gt_spacing)?);
    }
    let merged =
        if reports.len() == 1 { reports.pop().unwrap() } else { MetricsReport::mean_of(&reports)? };
    let csv = merged.csv();
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let path = dir.join("metrics.csv");
        fs::write(&path, &csv)?;
        write_manifest(dir, run, cfg.resolved(), &[path])?;
    }
    Ok(csv)
}

/// Writes `caseNNN.vol`/`caseNNN.seg` pairs. Case i draws its noise from
/// seed + i, so a fixed seed reproduces the exact corpus while cases still
/// differ from each other.
pub fn cmd_phantom(cfg: &mut Config, out: &Path, run: &RunInfo) -> Result<()> {
    let (base, count) = cfg.phantom(run.seed)?;
    ensure_dir(out)?;
    let mut outputs = Vec::with_capacity(2 * count);
    for i in 0..count {
        let spec = PhantomSpec { seed: run.seed.wrapping_add(i as u64), ..base.clone() };
        let (image, labels) = generate_phantom::<f32>(&spec)?;
        let vol = out.join(format!("case{i:03}.vol"));
        let seg = out.join(format!("case{i:03}.seg"));
        let file = VolumeFile {
            volume: image,
            spacing: [1.0; 3],
            modalities: MODALITIES.iter().map(|s| s.to_string()).collect(),
        };
        write_volume(&vol, &file)?;
        write_labels(&seg, &labels, [1.0; 3])?;
        outputs.push(vol);
        outputs.push(seg);
    }
    write_manifest(out, run, cfg.resolved(), &outputs)?;
    println!("wrote {count} case(s) under {}", out.display());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_info(seed: u64) -> RunInfo {
        RunInfo { subcommand: "test", seed, deterministic: true }
    }

    #[test]
    fn phantom_writes_paired_reproducible_cases() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let over = vec!["phantom.dims=24".to_string(), "phantom.count=2".to_string()];
        for dir in [&dir_a, &dir_b] {
            let mut cfg = Config::load(None, &over).unwrap();
            cmd_phantom(&mut cfg, dir.path(), &run_info(7)).unwrap();
        }
        for name in ["case000.vol", "case000.seg", "case001.vol", "case001.seg", "manifest.txt"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        // Different cases must differ: same geometry, different noise.
        let c0 = fs::read(dir_a.path().join("case000.vol")).unwrap();
        let c1 = fs::read(dir_a.path().join("case001.vol")).unwrap();
        assert_ne!(c0, c1);
        let file: VolumeFile<f32> = read_volume(&dir_a.path().join("case000.vol")).unwrap();
        assert_eq!(file.volume.shape(), [1, 4, 24, 24, 24]);
        assert_eq!(file.modalities.len(), 4);
    }

    #[test]
    fn eval_identity_scores_dice_100() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = Config::load(None, &["phantom.dims=20".to_string()]).unwrap();
        cmd_phantom(&mut cfg, dir.path(), &run_info(3)).unwrap();
        let seg = dir.path().join("case000.seg");
        let mut cfg2 = Config::load(None, &[]).unwrap();
        let csv = cmd_eval(
            &mut cfg2,
            &[seg.clone()],
            &[seg.clone()],
            Some(dir.path()),
            &run_info(3),
        )
        .unwrap();
        for region in ["WT", "TC", "ET"] {
            let row = csv.lines().find(|l| l.starts_with(region)).unwrap();
            let dice: f64 = row.split(',').nth(1).unwrap().parse().unwrap();
            assert_eq!(dice, 100.0, "{row}");
        }
        assert!(dir.path().join("metrics.csv").exists());
        assert!(dir.path().join("manifest.txt").exists());
    }

    #[test]
    fn eval_rejects_mismatched_lists() {
        let mut cfg = Config::load(None, &[]).unwrap();
        let err = cmd_eval(&mut cfg, &[PathBuf::from("a.seg")], &[], None, &run_info(0)).unwrap_err();
        assert!(err.to_string().contains("matching --pred/--gt"), "{err}");
    }

    #[test]
    fn train_then_infer_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let run_dir = dir.path().join("run");
        let overrides = vec![
            "phantom.dims=16".to_string(),
            "network.patch=16".to_string(),
            "network.blocks_per_stage=1".to_string(),
            "network.heads=2".to_string(),
            "network.d_state=2".to_string(),
            "train.epochs=1".to_string(),
        ];
        let mut cfg = Config::load(None, &overrides).unwrap();
        cmd_phantom(&mut cfg, &data, &run_info(1)).unwrap();
        let mut cfg = Config::load(None, &overrides).unwrap();
        cmd_train(&mut cfg, &data, &run_dir, &run_info(1)).unwrap();
        let ckpt = run_dir.join("checkpoint.bin");
        assert!(ckpt.exists());
        let log = fs::read_to_string(run_dir.join("loss.csv")).unwrap();
        assert!(log.starts_with("epoch,total,dice,ce,lr"), "{log}");
        assert_eq!(log.lines().count(), 2, "one header plus one epoch");
        let manifest = fs::read_to_string(run_dir.join("manifest.txt")).unwrap();
        assert!(manifest.contains("config train.epochs=1"), "{manifest}");
        assert!(manifest.contains("output checkpoint.bin"), "{manifest}");

        let infer_dir = dir.path().join("pred");
        let mut cfg = Config::load(None, &overrides).unwrap();
        cmd_infer(&mut cfg, &ckpt, &data.join("case000.vol"), &infer_dir, &run_info(1)).unwrap();
        let (pred, spacing) = read_labels(&infer_dir.join("prediction.seg")).unwrap();
        assert_eq!(pred.shape(), [1, 16, 16, 16]);
        assert_eq!(spacing, [1.0; 3]);
    }

    #[test]
    fn train_requires_paired_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("orphan.vol"), b"not a volume").unwrap();
        let mut cfg = Config::load(None, &[]).unwrap();
        let err =
            cmd_train(&mut cfg, dir.path(), &dir.path().join("out"), &run_info(0)).unwrap_err();
        assert!(err.to_string().contains("no matching"), "{err}");
    }
}
