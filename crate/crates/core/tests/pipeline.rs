use patchframe_core::attack::{optimize_patch, AdversarialPatch, AttackConfig};
use patchframe_core::dataset::{load_dataset, save_dataset, Split, ANNOTATION_FILE};
use patchframe_core::defense::{optimize_uwf, DefenseConfig, WhiteFrame};
use patchframe_core::detector::{generate_synthetic_dataset, train_toy_detector, DetectorHandle, SynthConfig, ToyTrainConfig};
use patchframe_core::eval::{emit_plots, evaluate_condition, Artifacts, EvalCondition, EvalConfig};
use patchframe_core::nn::ToyArch;

const SIZE: usize = 40;

fn small_train_config() -> ToyTrainConfig {
    ToyTrainConfig {
        arch: ToyArch {
            input_size: SIZE,
            channels: [4, 6, 8, 8, 8],
        },
        epochs: 2,
        min_ap: 0.0,
        seed: 5,
        ..ToyTrainConfig::default()
    }
}

fn small_attack() -> AttackConfig {
    AttackConfig {
        steps: 3,
        patch_side: 8,
        batch_size: 2,
        seed: 6,
        ..AttackConfig::default()
    }
}

fn small_defense() -> DefenseConfig {
    DefenseConfig {
        thickness: 42,
        epochs: 2,
        patch_steps: 1,
        frame_steps: 1,
        subset_m: 4,
        max_sweeps: 2,
        seed: 7,
        attack: small_attack(),
        ..DefenseConfig::default()
    }
}

#[test]
fn artifacts_survive_disk_and_score_every_condition() {
    let dir = tempfile::tempdir().unwrap();
    let synth = SynthConfig {
        size: SIZE,
        ..SynthConfig::default()
    };
    let generated = generate_synthetic_dataset(16, 1, &synth);
    let data_dir = dir.path().join("train");
    save_dataset(&generated, &data_dir).unwrap();
    let train = load_dataset(&data_dir, &data_dir.join(ANNOTATION_FILE)).unwrap();
    assert_eq!(train.len(), generated.len());
    assert_eq!(train.samples.iter().map(|s| &s.boxes).collect::<Vec<_>>(), generated.samples.iter().map(|s| &s.boxes).collect::<Vec<_>>());
    let test = generate_synthetic_dataset(4, 2, &synth).with_split(Split::Test);

    let (det, report) = train_toy_detector(&train, &small_train_config()).unwrap();
    let det_path = dir.path().join("detector.bin");
    det.save_toy(&det_path, 5, "digest").unwrap();
    let det = DetectorHandle::load_toy(&det_path).unwrap();
    assert_eq!(det.weights_digest().unwrap(), report.weights_digest);

    let patch = optimize_patch(std::slice::from_ref(&det), &train, &small_attack(), None).unwrap().patch;
    let patch_path = dir.path().join("patch.png");
    patch.save(&patch_path, 6, "digest", &[]).unwrap();
    let patch = AdversarialPatch::load(&patch_path).unwrap();

    let run = optimize_uwf(&det, &train, &small_defense()).unwrap();
    assert_eq!(run.inner.len(), 2);
    assert_eq!(run.subset_ids.len(), 4);
    let frame_path = dir.path().join("frame.png");
    run.frame.save(&frame_path, 7, "digest", Some(42)).unwrap();
    let frame = WhiteFrame::load(&frame_path).unwrap();
    assert!(frame.universal);
    assert_eq!(frame.thickness, 4);
    assert_eq!(frame.err_trace.len(), 2);

    let art = Artifacts {
        patch: Some(&patch),
        frame: Some(&frame),
        ..Artifacts::default()
    };
    let cfg = EvalConfig::from_attack(&small_attack(), 8);
    let reports: Vec<_> = ["none+none", "none+uwf", "shared-patch+none", "shared-patch+uwf"]
        .iter()
        .map(|c| evaluate_condition(&det, &test, c.parse::<EvalCondition>().unwrap(), art, &cfg).unwrap())
        .collect();
    assert!(reports.iter().all(|r| (0.0..=1.0).contains(&r.ap)));
    assert_eq!(reports[1].condition.thickness, 4);
    let files = emit_plots(&reports, &dir.path().join("eval"), 8, "digest").unwrap();
    assert_eq!(files.curves.len(), 4);
    assert_eq!(std::fs::read_to_string(files.csv).unwrap().lines().count(), 5);
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let synth = SynthConfig {
        size: SIZE,
        ..SynthConfig::default()
    };
    let train = generate_synthetic_dataset(12, 3, &synth);
    let run = || {
        let (det, _) = train_toy_detector(&train, &small_train_config()).unwrap();
        let patch = optimize_patch(std::slice::from_ref(&det), &train, &small_attack(), None).unwrap().patch;
        let frame = optimize_uwf(&det, &train, &small_defense()).unwrap().frame;
        (det.weights_digest().unwrap(), patch.digest().unwrap(), frame.digest().unwrap())
    };
    assert_eq!(run(), run());
}
