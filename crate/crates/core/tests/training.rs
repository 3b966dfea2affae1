//! Small end-to-end training runs.

use beacon_core::backbone::{
    evaluate_accuracy, train_backbone, train_exit_branch, ArchConfig, BackboneTrainConfig,
    ExitPoint, ExitTrainConfig,
};
use beacon_core::criteria::ScoreKind;
use beacon_core::iqgen::{generate_dataset, GenConfig, Split};
use beacon_core::pipeline::{Pipeline, RunConfig};
use beacon_core::tensornet::Parameters;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn backbone_overfits_a_small_clean_set() {
    let ds = generate_dataset(&GenConfig {
        frames_per_scheme_per_snr: 7,
        snr_grid: vec![16, 18, 20],
        ..GenConfig::default()
    })
    .unwrap();
    let mut cfg = BackboneTrainConfig {
        augment: false,
        ..BackboneTrainConfig::default()
    };
    cfg.hyper.epochs = 25;
    cfg.hyper.batch_size = 16;
    let (model, log) = train_backbone(&ds, &ArchConfig::default(), &cfg).unwrap();
    let train = ds.indices(Split::Train);
    assert!(train.len() >= 100);
    let (_, fe) = evaluate_accuracy(&model, &ds, &train).unwrap();
    assert!(fe > 0.8, "train accuracy {fe}, log {log:?}");

    let before = model.trunk().checksum();
    let mut exit_cfg = ExitTrainConfig::default();
    exit_cfg.hyper.epochs = 20;
    let attached = model.with_exit_point(ExitPoint::Stage3, &mut ChaCha8Rng::seed_from_u64(1));
    let (with_exit, _) = train_exit_branch(&attached, &ds, &exit_cfg).unwrap();
    assert_eq!(with_exit.trunk().checksum(), before);
    let (ee, _) = evaluate_accuracy(&with_exit, &ds, &train).unwrap();
    assert!(ee > 0.3, "early-exit train accuracy {ee}");
}

const TINY: &str = r#"
seed = 4
[data]
frames_per_scheme_per_snr = 10
snr_grid = [-16, -6, 4, 14]
[arch]
stem_channels = 4
stage_widths = [4, 6, 8]
blocks_per_stage = 1
[backbone.hyper]
epochs = 2
[exit.hyper]
epochs = 4
[lbap.hyper]
epochs = 6
batch_size = 32
"#;

#[test]
fn reopened_pipeline_loads_the_same_models() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml(TINY).unwrap();
    let exits = [ExitPoint::Stage1, ExitPoint::Stage3];
    let mut p = Pipeline::open(&cfg, dir.path()).unwrap();
    p.run_all(&exits).unwrap();
    let manifest = p.manifest().clone();
    let curves = p.curves(ExitPoint::Stage1, &[ScoreKind::Beacon]).unwrap();
    drop(p);

    let mut q = Pipeline::open(&cfg, dir.path()).unwrap();
    for e in exits {
        let m = q.model(e).unwrap();
        assert_eq!(manifest.model_checksums[e.label()], m.checksum());
    }
    assert_eq!(q.curves(ExitPoint::Stage1, &[ScoreKind::Beacon]).unwrap(), curves);
    for name in ["summary.csv", "calibration.csv", "tradeoff_rs3.csv", "scores_rs1_beacon.csv"] {
        assert!(manifest.artifacts.contains_key(name), "{name} not in manifest");
    }
    let text = std::fs::read_to_string(dir.path().join("tradeoff_rs1.csv")).unwrap();
    assert!(text.contains("# protocol: thresholds calibrated on the validation split"));
}
