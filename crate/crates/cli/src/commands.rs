use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use patchframe_core::attack::{optimize_patch, AdversarialPatch};
use patchframe_core::dataset::{load_dataset, save_dataset, LabeledDataset, Split, ANNOTATION_FILE};
use patchframe_core::defense::{optimize_swf, optimize_uwf, WhiteFrame};
use patchframe_core::detector::{generate_synthetic_dataset, train_toy_detector, DetectorHandle, SynthConfig};
use patchframe_core::eval::{
    adaptive_attack_eval, emit_plots, evaluate_condition, objectness_map_report, per_image_attack_eval, thickness_sweep, Artifacts, AttackKind,
    DefenseKind, EvalCondition, EvalReport,
};

use crate::config::{RunConfig, RESOLVED_FILE};
use crate::{usage, CliError};

type CliResult<T = ()> = Result<T, CliError>;

/// Creates the output directory and records the resolved config in it.
fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.path("out").ok_or_else(|| usage("--out must not be empty"))?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let path = out.join(RESOLVED_FILE);
    fs::write(&path, cfg.resolved()).with_context(|| format!("writing {}", path.display()))?;
    Ok(out)
}

fn existing_path(cfg: &RunConfig, key: &str, flag: &str) -> CliResult<PathBuf> {
    let p = cfg.path(key).ok_or_else(|| usage(format!("{flag} is required")))?;
    if !p.exists() {
        return Err(usage(format!("{flag}: {} does not exist", p.display())));
    }
    Ok(p)
}

fn open_dataset(dir: &Path, flag: &str) -> CliResult<LabeledDataset> {
    if !dir.join(ANNOTATION_FILE).is_file() {
        return Err(usage(format!("{flag}: {} has no {ANNOTATION_FILE}", dir.display())));
    }
    Ok(load_dataset(dir, &dir.join(ANNOTATION_FILE))?)
}

fn dataset(cfg: &RunConfig) -> CliResult<LabeledDataset> {
    open_dataset(&existing_path(cfg, "dataset", "--dataset")?, "--dataset")
}

fn detector(cfg: &RunConfig) -> CliResult<DetectorHandle> {
    let path = existing_path(cfg, "detector", "--detector")?;
    Ok(DetectorHandle::load_toy(&path)?.with_threshold(cfg.get("eval.detection_threshold")?))
}

fn optional_artifact(cfg: &RunConfig, key: &str, flag: &str) -> CliResult<Option<PathBuf>> {
    match cfg.path(key) {
        None => Ok(None),
        Some(_) => existing_path(cfg, key, flag).map(Some),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult {
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn synth(cfg: &RunConfig) -> CliResult {
    let n: usize = cfg.get("synth.n")?;
    if n == 0 {
        return Err(usage("--n must be at least 1"));
    }
    let out = prepare_out(cfg)?;
    let data = generate_synthetic_dataset(n, cfg.seed()?, &SynthConfig::default());
    save_dataset(&data, &out)?;
    println!("wrote {n} images and {} boxes to {}", data.box_count(), out.display());
    Ok(())
}

pub fn train_toy(cfg: &RunConfig) -> CliResult {
    let data = dataset(cfg)?;
    let train_cfg = cfg.train()?;
    let out = prepare_out(cfg)?;
    let (det, report) = train_toy_detector(&data, &train_cfg)?;
    let path = out.join("detector.bin");
    det.save_toy(&path, train_cfg.seed, &cfg.digest())?;
    write_json(
        &out.join("train_report.json"),
        &serde_json::json!({
            "epochs_run": report.epochs_run,
            "holdout_ap": report.holdout_ap,
            "epoch_losses": report.epoch_losses,
            "weights_digest": report.weights_digest,
        }),
    )?;
    println!("holdout_ap={}", report.holdout_ap);
    println!("weights={}", path.display());
    Ok(())
}

pub fn attack(cfg: &RunConfig) -> CliResult {
    let acfg = cfg.attack()?;
    acfg.validate().map_err(|e| usage(e.to_string()))?;
    let det = detector(cfg)?;
    let data = dataset(cfg)?;
    let frame = optional_artifact(cfg, "frame", "--frame")?.map(|p| WhiteFrame::load(&p)).transpose()?;
    let out = prepare_out(cfg)?;
    let run = optimize_patch(std::slice::from_ref(&det), &data, &acfg, frame.as_ref())?;
    let path = out.join("patch.png");
    let final_loss = run.loss_trace.last().copied().unwrap_or(f64::NAN);
    run.patch.save(
        &path,
        acfg.seed,
        &cfg.digest(),
        &[
            ("variant", cfg.raw("attack.variant").to_string()),
            ("steps", run.steps_run.to_string()),
            ("adaptive", frame.is_some().to_string()),
            ("final_loss", final_loss.to_string()),
        ],
    )?;
    write_json(&out.join("loss_trace.json"), &run.loss_trace)?;
    println!("final_loss={final_loss}");
    println!("patch={}", path.display());
    Ok(())
}

pub fn defend(cfg: &RunConfig) -> CliResult {
    let dcfg = cfg.defense()?;
    dcfg.validate().map_err(|e| usage(e.to_string()))?;
    let mode = cfg.raw("defense.mode");
    if mode != "swf" && mode != "uwf" {
        return Err(usage(format!("unknown defense mode `{mode}` (expected swf or uwf)")));
    }
    let image = cfg.raw("image").to_string();
    if mode == "swf" && image.is_empty() {
        return Err(usage("--mode swf needs --image"));
    }
    let det = detector(cfg)?;
    let data = dataset(cfg)?;
    let out = prepare_out(cfg)?;
    let digest = cfg.digest();
    let (frame, patch) = if mode == "swf" {
        let s = data.get(&image).ok_or_else(|| usage(format!("image `{image}` is not in the dataset")))?;
        let run = optimize_swf(&det, &s.image, &s.boxes, &dcfg)?;
        (run.frame, run.patch)
    } else {
        let run = optimize_uwf(&det, &data, &dcfg)?;
        write_json(&out.join("err_trace.json"), &run.inner)?;
        write_json(&out.join("subset.json"), &run.subset_ids)?;
        if let Some(last) = run.inner.last() {
            println!("final_err={}", last.err_exit);
        }
        (run.frame, run.patch)
    };
    let path = out.join("frame.png");
    frame.save(&path, dcfg.seed, &digest, Some(dcfg.thickness))?;
    patch.save(&out.join("cotrained_patch.png"), dcfg.seed, &digest, &[("defense_mode", mode.to_string())])?;
    println!("frame={}", path.display());
    Ok(())
}

pub fn eval(cfg: &RunConfig) -> CliResult {
    let conditions = cfg.conditions()?;
    let thicknesses = cfg.thicknesses()?;
    let adaptive: bool = cfg.get("eval.adaptive")?;
    let per_image: bool = cfg.get("eval.per_image")?;
    let maps: usize = cfg.get("eval.maps")?;
    let acfg = cfg.attack()?;
    acfg.validate().map_err(|e| usage(e.to_string()))?;
    let ecfg = cfg.eval()?;

    let patch_path = optional_artifact(cfg, "patch", "--patch")?;
    let frame_path = optional_artifact(cfg, "frame", "--frame")?;
    if (adaptive || per_image) && frame_path.is_none() {
        return Err(usage("--adaptive and --per-image need --frame"));
    }
    if (!thicknesses.is_empty() || maps > 0) && patch_path.is_none() {
        return Err(usage("--sweep and --maps need --patch"));
    }
    if maps > 0 && frame_path.is_none() {
        return Err(usage("--maps needs --frame"));
    }
    let needs_train = adaptive || !thicknesses.is_empty();
    let train = if needs_train {
        let p = existing_path(cfg, "train_dataset", "--train-dataset")?;
        Some(open_dataset(&p, "--train-dataset")?)
    } else {
        None
    };
    if conditions.is_empty() && !adaptive && !per_image && thicknesses.is_empty() {
        return Err(usage("nothing to evaluate: --conditions is empty"));
    }

    let det = detector(cfg)?;
    let test = dataset(cfg)?.with_split(Split::Test);
    let patch = patch_path.map(|p| AdversarialPatch::load(&p)).transpose()?;
    let frame = frame_path.map(|p| WhiteFrame::load(&p)).transpose()?;
    let out = prepare_out(cfg)?;
    let art = Artifacts {
        patch: patch.as_ref(),
        frame: frame.as_ref(),
        ..Artifacts::default()
    };

    let mut reports: Vec<EvalReport> = Vec::new();
    for &cond in &conditions {
        let cond = EvalCondition {
            thickness: if cond.defense == DefenseKind::None { 0 } else { cond.thickness },
            ..cond
        };
        if cond.attack == AttackKind::PerImagePatch || cond.attack == AttackKind::AdaptivePatch {
            return Err(usage(format!(
                "condition `{}` is produced by --per-image or --adaptive, not --conditions",
                cond.label()
            )));
        }
        reports.push(evaluate_condition(&det, &test, cond, art, &ecfg)?);
    }
    if let (true, Some(frame), Some(train)) = (adaptive, frame.as_ref(), train.as_ref()) {
        let acfg_adaptive = patchframe_core::attack::AttackConfig {
            seed: cfg.component_seed("adaptive")?,
            ..acfg.clone()
        };
        let outcome = adaptive_attack_eval(&det, train, &test, frame, &acfg_adaptive, &ecfg)?;
        outcome.patch.save(&out.join("adaptive_patch.png"), acfg_adaptive.seed, &cfg.digest(), &[("adaptive", "true".into())])?;
        reports.push(outcome.defended);
    }
    if let (true, Some(frame)) = (per_image, frame.as_ref()) {
        let pcfg = patchframe_core::attack::AttackConfig {
            steps: cfg.get("eval.per_image_steps")?,
            ..acfg.clone()
        };
        let subset = test.take(cfg.get("eval.per_image_count")?);
        let outcome = per_image_attack_eval(&det, &subset, frame, &pcfg, &ecfg)?;
        reports.push(outcome.undefended);
        reports.push(outcome.defended);
    }
    if let (false, Some(patch), Some(train)) = (thicknesses.is_empty(), patch.as_ref(), train.as_ref()) {
        let dcfg = cfg.defense()?;
        dcfg.validate().map_err(|e| usage(e.to_string()))?;
        for entry in thickness_sweep(&det, train, &test, &thicknesses, &dcfg, patch, &ecfg)? {
            entry
                .frame
                .save(&out.join(format!("frame_t{}.png", entry.nominal_thickness)), dcfg.seed, &cfg.digest(), Some(entry.nominal_thickness))?;
            reports.push(entry.report);
        }
    }
    if let (true, Some(patch), Some(frame)) = (maps > 0, patch.as_ref(), frame.as_ref()) {
        for s in test.iter().filter(|s| !s.boxes.is_empty()).take(maps) {
            let dir = out.join("maps").join(&s.image_id);
            objectness_map_report(&det, &s.image, &s.boxes, patch, frame, &ecfg.transform_for(&s.image_id), ecfg.patch_scale_factor, &dir)?;
        }
    }

    let files = emit_plots(&reports, &out, cfg.seed()?, &cfg.digest())?;
    for r in &reports {
        println!("{:<28} t={:<3} ap={:.4}", r.condition.label(), r.condition.thickness, r.ap);
    }
    println!("results={}", files.csv.display());
    Ok(())
}

pub fn report(cfg: &RunConfig, input: Option<PathBuf>) -> CliResult {
    let dir = match input {
        Some(p) => p,
        None => cfg.path("out").ok_or_else(|| usage("--input or --out is required"))?,
    };
    let path = dir.join("reports.json");
    if !path.is_file() {
        return Err(usage(format!("{} not found; run `patchframe eval` first", path.display())));
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let reports: Vec<EvalReport> = serde_json::from_str(&text).map_err(anyhow::Error::from)?;
    let clean = reports
        .iter()
        .find(|r| r.condition.attack == AttackKind::None && r.condition.defense == DefenseKind::None)
        .map(|r| r.ap);
    let mut by_label: HashMap<String, usize> = HashMap::new();
    println!("{:<28} {:>9} {:>8} {:>10} {:>12}", "condition", "thickness", "ap", "delta", "ms/image");
    for r in &reports {
        *by_label.entry(r.condition.label()).or_default() += 1;
        let delta = clean.map(|c| format!("{:+.4}", r.ap - c)).unwrap_or_else(|| "-".into());
        println!(
            "{:<28} {:>9} {:>8.4} {:>10} {:>12.2}",
            r.condition.label(),
            r.condition.thickness,
            r.ap,
            delta,
            r.runtime_ms_per_image
        );
        if let Some(w) = &r.warning {
            println!("  warning: {w}");
        }
    }
    println!("{} reports over {} conditions", reports.len(), by_label.len());
    Ok(())
}
