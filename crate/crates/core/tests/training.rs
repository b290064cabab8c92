use std::collections::BTreeSet;

use protoadapt_core::finetune::{init_params, prototypes_of, EpochLosses};
use protoadapt_core::params::Module;
use protoadapt_core::{
    finetune, sample_episode, synth_pack, AdaptationParams, Episode, EpisodeSpec, Error, FinetuneConfig, Stage,
    SynthConfig,
};

fn episode(n: usize, k: usize, n_bg: usize, seed: u64) -> Episode {
    let pack = synth_pack(&SynthConfig {
        n_classes: n,
        instances_per_class: k + 6,
        n_background: n_bg + 10,
        dim: 16,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    sample_episode(&pack, &EpisodeSpec::new(n, k, n_bg, seed)).unwrap()
}

fn config(n_bg: usize, seed: u64, epochs: usize) -> FinetuneConfig {
    FinetuneConfig {
        n_bg,
        seed,
        epochs: Some(epochs),
        ..FinetuneConfig::default()
    }
}

fn changed_groups(before: &AdaptationParams, after: &AdaptationParams) -> BTreeSet<Module> {
    before
        .group_checksums()
        .into_iter()
        .zip(after.group_checksums())
        .filter(|(a, b)| a.1 != b.1)
        .map(|(a, _)| a.0)
        .collect()
}

#[test]
fn only_enabled_groups_change() {
    let ep = episode(3, 2, 12, 5);
    for stage in Stage::ORDER.into_iter().filter(|s| *s != Stage::Frozen) {
        let cfg = config(12, 5, 4).with_modules(stage.modules());
        let before = init_params(&ep, &cfg).unwrap();
        let (after, _) = finetune(&ep, &cfg).unwrap();
        let expected: BTreeSet<Module> = stage.modules().into_iter().collect();
        assert_eq!(changed_groups(&before, &after), expected, "stage {}", stage.label());
    }
}

#[test]
fn heads_only_leaves_instances_bit_identical() {
    let ep = episode(3, 2, 12, 1);
    let cfg = config(12, 1, 5).with_modules([Module::FtHeads]);
    let before = init_params(&ep, &cfg).unwrap();
    let (after, _) = finetune(&ep, &cfg).unwrap();
    assert_eq!(before.instances.matrix, after.instances.matrix);
}

#[test]
fn zero_learning_rate_is_a_fixed_point() {
    let ep = episode(3, 2, 12, 2);
    let cfg = FinetuneConfig {
        lr: 0.0,
        ..config(12, 2, 6)
    };
    let before = init_params(&ep, &cfg).unwrap();
    let (after, log) = finetune(&ep, &cfg).unwrap();
    assert_eq!(before.checkpoint_bytes().unwrap(), after.checkpoint_bytes().unwrap());
    let totals = log.totals();
    assert_eq!(totals.len(), 6);
    assert!(log.epochs.iter().all(|e| e == &EpochLosses { epoch: e.epoch, ..log.epochs[0] }));
    assert!(log.epochs[0].proto > 0.0 && log.epochs[0].domain > 0.0);
}

#[test]
fn one_shot_runs_eighty_epochs() {
    let ep = episode(2, 1, 8, 3);
    let cfg = FinetuneConfig {
        n_bg: 8,
        seed: 3,
        ..FinetuneConfig::default()
    };
    let (_, log) = finetune(&ep, &cfg).unwrap();
    assert_eq!(log.epochs.len(), 80);
    let ep5 = episode(2, 5, 8, 3);
    assert_eq!(finetune(&ep5, &cfg).unwrap().1.epochs.len(), 40);
}

#[test]
fn dp_on_single_class_is_a_config_error() {
    let ep = episode(1, 2, 8, 0);
    let cfg = config(8, 0, 2);
    assert!(matches!(finetune(&ep, &cfg), Err(Error::Config(_))));
    let resolved = cfg.resolved_for(1);
    assert!(!resolved.enabled(Module::Dp));
    assert!(finetune(&ep, &resolved).is_ok());
}

#[test]
fn repeated_runs_are_identical() {
    let ep = episode(3, 2, 12, 9);
    let cfg = config(12, 9, 8);
    let (a, la) = finetune(&ep, &cfg).unwrap();
    let (b, lb) = finetune(&ep, &cfg).unwrap();
    assert_eq!(la.epochs, lb.epochs);
    assert_eq!(a.checkpoint_bytes().unwrap(), b.checkpoint_bytes().unwrap());
}

#[test]
fn checkpoint_round_trip_preserves_prototypes() {
    let ep = episode(3, 2, 12, 4);
    let (p, _) = finetune(&ep, &config(12, 4, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ckpt.bin");
    p.save_checkpoint(&path).unwrap();
    let back = AdaptationParams::load_checkpoint(&path).unwrap();
    assert_eq!(back.checkpoint_bytes().unwrap(), p.checkpoint_bytes().unwrap());
    assert_eq!(
        prototypes_of(&back).unwrap().object_prototypes,
        prototypes_of(&p).unwrap().object_prototypes
    );
}

#[test]
fn total_loss_trends_down_on_the_benchmark() {
    let median = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    for seed in 0..10 {
        let pack = synth_pack(&SynthConfig {
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        let ep = sample_episode(&pack, &EpisodeSpec::new(5, 5, 530, seed)).unwrap();
        let cfg = FinetuneConfig {
            seed,
            ..FinetuneConfig::default()
        };
        let totals = finetune(&ep, &cfg).unwrap().1.totals();
        let (first, last) = (median(&totals[..5]), median(&totals[totals.len() - 5..]));
        assert!(last < first, "seed {seed}: first {first} last {last}");
    }
}
