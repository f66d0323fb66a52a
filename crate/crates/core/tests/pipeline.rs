use fast_core::dataset::SynthSpec;
use fast_core::harness::{build_models, predict_branches};
use fast_core::trainer::{load_checkpoint, save_checkpoint};
use fast_core::{
    few_shot_split, resolve_source, run_experiment, save_dataset, synth_generate, train,
    ExperimentConfig, SourceConfig, TrainConfig,
};

fn spec() -> SynthSpec {
    SynthSpec {
        bags_per_class: 3,
        instances_per_bag: 40,
        noise_sigma: 0.3,
        seed: 5,
        ..SynthSpec::default()
    }
}

#[test]
fn dataset_on_disk_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let train_manifest =
        save_dataset(&synth_generate(&spec()).unwrap(), &tmp.path().join("train")).unwrap();
    let test_spec = SynthSpec {
        seed: 6,
        bags_per_class: 2,
        ..spec()
    };
    let test_manifest = save_dataset(
        &synth_generate(&test_spec).unwrap(),
        &tmp.path().join("test"),
    )
    .unwrap();
    let cfg = ExperimentConfig {
        source: SourceConfig::File {
            manifest: train_manifest,
            test_manifest: Some(test_manifest),
            prompts: None,
        },
        bag_shots: vec![1, 2],
        instance_shots: vec![4],
        repeats: 2,
        train: TrainConfig {
            steps: 30,
            ..TrainConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let record = run_experiment(&cfg).unwrap();
    assert_eq!(record.cells.len(), 4);
    assert!(record.cells.iter().all(|c| c.error.is_none()));
    let row = record.table.row(2, 4).unwrap();
    assert_eq!(row.total_instances, 240);
    assert!(row.stats[0].instance_auc_mean.unwrap() > 0.8);
}

#[test]
fn checkpoint_restores_identical_predictions() {
    let cfg = ExperimentConfig {
        source: SourceConfig::Synthetic {
            spec: spec(),
            test_bags_per_class: 1,
            prompts: None,
        },
        ..ExperimentConfig::default()
    };
    let src = resolve_source(&cfg.source).unwrap();
    let split = few_shot_split(&src.train, &cfg.few_shot_spec(2, 4, 0)).unwrap();
    let (cache, prior) = build_models(&cfg, &src, &split, 0).unwrap();
    let tc = TrainConfig {
        steps: 25,
        ..TrainConfig::default()
    };
    let (cache, prior, _) = train(cache, prior, &split, &src.train.store, &tc).unwrap();

    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("model.fckp");
    save_checkpoint(&path, &cache, &prior).unwrap();
    let (cache2, prior2) = load_checkpoint(&path, Some(cfg.prior.mode)).unwrap();
    let queries = &src.test.as_ref().unwrap().store.rows;
    assert_eq!(
        predict_branches(&cache, &prior, queries).unwrap(),
        predict_branches(&cache2, &prior2, queries).unwrap()
    );
}
