mod common;

use dcs_core::io::{generate_dataset, Checkpoint, DataConfig, Dataset, RunConfig, Stage};
use dcs_core::rng::Rng;
use dcs_core::tensor::{AdamW, ParamKind, ParamStore, Tensor};
use dcs_core::Error;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn checkpoint_bytes_round_trip(
        shapes in prop::collection::vec(prop::collection::vec(1usize..4, 1..3), 1..5),
        seed in any::<u64>(),
        epoch in 0u64..1000,
    ) {
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        for (i, s) in shapes.iter().enumerate() {
            let n: usize = s.iter().product();
            let t = Tensor::new(s.clone(), (0..n).map(|_| rng.normal()).collect()).unwrap();
            store.add(&format!("p{i}.weight"), t, ParamKind::Weight).unwrap();
        }
        store.snap_to_f32();
        let opt = AdamW::new(1e-3, 0.0);
        let ck = Checkpoint::capture(Stage::Stage2, &store).with_state(&store, &opt, &rng, epoch);
        let back = Checkpoint::from_bytes(&ck.to_bytes(), "mem".as_ref()).unwrap();
        prop_assert_eq!(&back, &ck);
        let mut other = store.clone();
        for (id, _) in store.iter() {
            other.get_mut(id).tensor.data_mut().fill(0.0);
        }
        back.apply(&mut other).unwrap();
        prop_assert_eq!(other.hash_prefix(""), store.hash_prefix(""));
    }

    #[test]
    fn truncated_checkpoints_are_rejected(cut in 1usize..64) {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, 2.0, 3.0]), ParamKind::Weight).unwrap();
        let bytes = Checkpoint::capture(Stage::Stage1, &store).to_bytes();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - cut], "mem".as_ref()).is_err());
    }
}

#[test]
fn config_errors_name_the_line() {
    let text = "seed = 3\n[sampler]\ngroups = 16\nbogus = 1\n";
    match RunConfig::parse(text, "run.toml") {
        Err(Error::Parse { path, line, .. }) => assert_eq!((path.as_str(), line), ("run.toml", 4)),
        other => panic!("expected a parse error, got {other:?}"),
    }
    let bad_type = "[stage1]\nepochs = \"many\"\n";
    assert!(matches!(RunConfig::parse(bad_type, "x"), Err(Error::Parse { line: 2, .. })));
    assert!(matches!(RunConfig::parse("[sampler]\ngroups = 0\n", "x"), Err(Error::Config(_))));
}

#[test]
fn config_round_trips_through_toml() {
    let cfg = common::tiny_config();
    assert_eq!(RunConfig::parse(&cfg.to_toml(), "x").unwrap(), cfg);
}

#[test]
fn datasets_are_deterministic_on_disk_and_in_memory() {
    let cfg = DataConfig {
        per_class: 3,
        holdout_per_class: 1,
        points: 32,
        ..DataConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = generate_dataset(a.path(), &cfg, 8).unwrap();
    let fb = generate_dataset(b.path(), &cfg, 8).unwrap();
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
    }
    let disk = Dataset::load(a.path(), 1).unwrap();
    let mem = Dataset::synthesize(&cfg, 8).unwrap();
    assert_eq!(disk.classes, mem.classes);
    assert_eq!(disk.train.len(), mem.train.len());
    for (x, y) in disk.train.iter().zip(&mem.train) {
        assert_eq!(x.label, y.label);
        for (p, q) in x.points.iter().zip(&y.points) {
            for k in 0..3 {
                assert!((p[k] - q[k]).abs() < 1e-6);
            }
        }
    }
    assert_ne!(
        Dataset::synthesize(&cfg, 9).unwrap().train[0].points,
        mem.train[0].points
    );
}
