use mixlab::backbones::SceneSpec;
use mixlab::bench::{target_action, TrainConfig};
use mixlab::experiment::runner::{check_protocol, pilot_configs};
use mixlab::experiment::{
    run_ablation, run_experiment, run_pilot, AblationKind, ExperimentConfig, RunRecord,
};
use mixlab::fusion::FusionSchemeId;
use mixlab::policy::Arch;
use mixlab::Error;

fn tiny() -> ExperimentConfig {
    ExperimentConfig {
        dataset_size: 32,
        eval_episodes: 8,
        train: TrainConfig {
            steps: 8,
            batch_size: 4,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn strip_time(mut r: RunRecord) -> RunRecord {
    r.wall_time_secs = 0.0;
    r
}

#[test]
fn reach_from_home_to_cube_centre() {
    let scene = SceneSpec {
        object_positions: vec![[0.5, 0.5, 0.5]],
        object_ids: vec![2],
        instruction_id: 0,
    };
    let a = target_action(&scene).actions;
    assert_eq!(a.shape(), &[1, 4, 7]);
    #[rustfmt::skip]
    let golden = [
        0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 0.0,
        0.0, 0.0, -0.5, 0.0, 0.0, 0.0, 1.0,
    ];
    assert_eq!(a.data(), &golden);
}

#[test]
fn pilot_covers_every_scheme_and_matches_single_runs() {
    let base = tiny();
    let configs = pilot_configs(&base);
    assert_eq!(configs.len(), 10);
    let outs = run_pilot(&configs, 2).unwrap();
    assert_eq!(outs.len(), 10);
    for (o, scheme) in outs.iter().zip(FusionSchemeId::ALL) {
        assert_eq!(o.record.config.scheme, scheme);
        assert_eq!(o.record.label, scheme.display_name());
    }
    // The pilot path and a standalone run of the same config agree exactly.
    for i in [0, 5, 9] {
        let single = run_experiment(&configs[i], configs[i].scheme.display_name()).unwrap();
        assert_eq!(
            strip_time(single.record),
            strip_time(outs[i].record.clone())
        );
    }
    let hashes: Vec<&str> = outs
        .iter()
        .map(|o| o.record.dataset_hash.as_str())
        .collect();
    assert!(
        hashes.windows(2).all(|w| w[0] == w[1]),
        "pilot runs saw different data"
    );
}

#[test]
fn pilot_rejects_mixed_protocols() {
    let mut configs = pilot_configs(&tiny());
    configs[2].eval_episodes = 9;
    match run_pilot(&configs, 1) {
        Err(Error::Protocol(m)) => assert!(m.contains("eval_episodes"), "{m}"),
        Err(e) => panic!("unexpected error {e}"),
        Ok(_) => panic!("mixed protocol accepted"),
    }
    assert!(check_protocol(&[]).is_err());
}

#[test]
fn ablations_have_the_expected_rows() {
    let base = tiny();
    let frozen = run_ablation(AblationKind::FrozenVsTrainable, &base, 1).unwrap();
    let labels: Vec<&str> = frozen.iter().map(|o| o.record.label.as_str()).collect();
    assert_eq!(labels, ["Frozen", "Trainable"]);
    let geo_equal = |a: &mixlab::policy::Policy, b: &mixlab::policy::Policy| {
        a.store
            .iter()
            .filter(|p| p.id.starts_with("geo."))
            .zip(b.store.iter().filter(|p| p.id.starts_with("geo.")))
            .all(|(x, y)| x.value.bit_eq(&y.value))
    };
    let fresh = mixlab::policy::Policy::new(base.policy_config(), base.seed).unwrap();
    assert!(geo_equal(&frozen[0].policy, &fresh));
    assert!(!geo_equal(&frozen[1].policy, &fresh));

    let corrupt = run_ablation(AblationKind::Corruption, &base, 1).unwrap();
    let labels: Vec<&str> = corrupt.iter().map(|o| o.record.label.as_str()).collect();
    assert_eq!(labels, ["none", "zeros", "gaussian:1"]);
    assert_eq!(corrupt[0].record.loss_curve, corrupt[2].record.loss_curve);

    let sparse = run_ablation(AblationKind::SparseDepth, &base, 1).unwrap();
    let labels: Vec<&str> = sparse.iter().map(|o| o.record.label.as_str()).collect();
    assert_eq!(labels, ["k=0", "k=1", "k=2", "k=3"]);
    assert!(sparse.iter().all(|o| o.record.config.arch == Arch::Pi));
}
