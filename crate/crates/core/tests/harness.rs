use std::path::Path;

use stgd_core::checkpoint::{load_checkpoint, save_checkpoint, FROZEN, TRAINABLE};
use stgd_core::data::{generate_dataset, matched_filter_accuracy, read_jsonl, write_jsonl};
use stgd_core::eval::{evaluate, report_from_predictions};
use stgd_core::train::{batch_order, train, TrainHistory};
use stgd_core::{Error, ParamStore, StgdModel, TrainConfig};

fn quick_cfg(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        log_every: 10,
        text_ffn_hidden: 64,
        ..TrainConfig::default()
    }
}

fn run(cfg: &TrainConfig, n: usize) -> (StgdModel, ParamStore, TrainHistory) {
    let data = generate_dataset(cfg, n, 5).unwrap();
    let (model, mut store) = StgdModel::build(cfg).unwrap();
    let h = train(&model, &mut store, &data, None, |_| {}).unwrap();
    (model, store, h)
}

#[test]
fn dataset_is_deterministic_and_valid() {
    let cfg = TrainConfig::default();
    let a = generate_dataset(&cfg, 40, 9).unwrap();
    assert_eq!(a, generate_dataset(&cfg, 40, 9).unwrap());
    assert_ne!(a, generate_dataset(&cfg, 40, 10).unwrap());
    for s in &a {
        assert!(s.tube.t_s <= s.tube.t_e && s.tube.t_e < cfg.frames);
        s.tube.validate().unwrap();
        assert!(s
            .tube
            .boxes
            .iter()
            .flatten()
            .all(|v| (0.0..=1.0).contains(v)));
    }
    assert!(matches!(
        generate_dataset(
            &TrainConfig {
                frames: 1,
                ..cfg.clone()
            },
            4,
            1
        ),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        generate_dataset(&cfg, 0, 1),
        Err(Error::Config(_))
    ));
}

#[test]
fn matched_filter_solves_the_task() {
    let cfg = TrainConfig::default();
    let acc = matched_filter_accuracy(&cfg, &generate_dataset(&cfg, 200, 3).unwrap()).unwrap();
    assert!(acc >= 0.95, "{acc}");
}

#[test]
fn jsonl_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.jsonl");
    let cfg = TrainConfig::default();
    let a = generate_dataset(&cfg, 5, 2).unwrap();
    write_jsonl(&path, &a).unwrap();
    assert_eq!(read_jsonl(&path).unwrap(), a);
    let first: serde_json::Value = serde_json::from_str(
        std::fs::read_to_string(&path)
            .unwrap()
            .lines()
            .next()
            .unwrap(),
    )
    .unwrap();
    for key in [
        "id",
        "seed",
        "T",
        "H",
        "W",
        "C",
        "L",
        "video_features",
        "text_tokens",
        "t_s",
        "t_e",
        "boxes",
    ] {
        assert!(first.get(key).is_some(), "{key}");
    }
    std::fs::write(&path, "{\"id\": 1}\n").unwrap();
    assert!(matches!(read_jsonl(&path), Err(Error::Validation(_))));
}

#[test]
fn checkpoint_round_trip_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let cfg = quick_cfg(3);
    let (_, store, _) = run(&cfg, 4);
    save_checkpoint(&path, &cfg, &store).unwrap();
    assert!(dir.path().join("m.bin").is_file());
    let ck = load_checkpoint(&path).unwrap();
    assert_eq!(ck.manifest.config, cfg);
    let (_, mut fresh) = StgdModel::build(&cfg).unwrap();
    ck.restore_into(&mut fresh).unwrap();
    for ((_, name, a), (_, _, b)) in store.iter().zip(fresh.iter()) {
        let bits = |t: &stgd_core::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b), "{name}");
    }
    assert_eq!(ck.count(TRAINABLE), store.count_trainable());
    assert_eq!(ck.count(FROZEN) + ck.count(TRAINABLE), store.count_total());
}

#[test]
fn shape_mismatch_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.json");
    let cfg = quick_cfg(1);
    let (_, store) = StgdModel::build(&cfg).unwrap();
    save_checkpoint(&path, &cfg, &store).unwrap();
    let ck = load_checkpoint(&path).unwrap();
    let (_, mut other) = StgdModel::build(&TrainConfig {
        lora_rank: cfg.lora_rank + 1,
        ..cfg.clone()
    })
    .unwrap();
    let err = ck.restore_into(&mut other).unwrap_err();
    assert!(matches!(err, Error::Load(_)));
    assert!(err.to_string().contains("adapters.text"), "{err}");

    // A truncated payload is also a load error.
    let bin = dir.path().join("m.bin");
    let bytes = std::fs::read(&bin).unwrap();
    std::fs::write(&bin, &bytes[..bytes.len() - 8]).unwrap();
    assert!(matches!(load_checkpoint(&path), Err(Error::Load(_))));
}

#[test]
fn batch_order_covers_each_epoch() {
    let order = batch_order(1, 10, 5, 4);
    let flat: Vec<usize> = order.concat();
    for epoch in flat.chunks(10) {
        let mut e = epoch.to_vec();
        e.sort();
        assert_eq!(e, (0..10).collect::<Vec<_>>());
    }
    assert_eq!(order, batch_order(1, 10, 5, 4));
    assert_ne!(order, batch_order(2, 10, 5, 4));
}

#[test]
fn training_is_deterministic_and_keeps_backbone_frozen() {
    let cfg = TrainConfig {
        steps: 100,
        log_every: 25,
        ..TrainConfig::default()
    };
    let data = generate_dataset(&cfg, 8, 5).unwrap();
    let (model, mut store) = StgdModel::build(&cfg).unwrap();
    let before = store.clone();
    let mut logs = Vec::new();
    let h = train(&model, &mut store, &data, Some(&data[..2]), |l| {
        logs.push(l.step)
    })
    .unwrap();
    assert_eq!(logs, vec![25, 50, 75, 100]);
    assert!(h.logs.iter().all(|l| l.val.is_some()));
    assert_eq!(h.losses.len(), 100);
    for ((_, name, a), (_, _, b)) in before.iter().zip(store.iter()) {
        if a.requires_grad() {
            continue;
        }
        assert!(
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()),
            "{name}"
        );
    }
    assert!(before
        .iter()
        .zip(store.iter())
        .any(|((_, _, a), (_, _, b))| a.requires_grad() && a.data() != b.data()));

    let short = quick_cfg(15);
    let (_, s1, h1) = run(&short, 6);
    let (_, s2, h2) = run(&short, 6);
    assert_eq!(h1, h2);
    assert!(s1
        .iter()
        .zip(s2.iter())
        .all(|((_, _, a), (_, _, b))| a.data() == b.data()));
}

fn golden_path() -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/train_curve_8.json")
}

#[test]
fn eight_sample_loss_drops_below_a_tenth() {
    let cfg = TrainConfig {
        steps: 500,
        log_every: 100,
        ..TrainConfig::default()
    };
    let (_, _, h) = run(&cfg, 8);
    let curve: Vec<f64> = h
        .losses
        .iter()
        .step_by(50)
        .copied()
        .chain(h.losses.last().copied())
        .collect();
    if std::env::var_os("STGD_BLESS").is_some() {
        std::fs::create_dir_all(golden_path().parent().unwrap()).unwrap();
        std::fs::write(
            golden_path(),
            serde_json::to_string_pretty(&curve).unwrap() + "\n",
        )
        .unwrap();
    }
    let first = h.losses[0];
    let last = *h.losses.last().unwrap();
    assert!(last <= 0.1 * first, "loss {first} -> {last}");
    let golden: Vec<f64> =
        serde_json::from_str(&std::fs::read_to_string(golden_path()).unwrap()).unwrap();
    assert_eq!(golden.len(), curve.len());
    for (i, (g, c)) in golden.iter().zip(&curve).enumerate() {
        assert!(
            (g - c).abs() <= 1e-6 * g.abs(),
            "point {i}: golden {g}, got {c}"
        );
    }
}

#[test]
fn non_finite_loss_aborts_with_step_and_term() {
    let cfg = quick_cfg(5);
    let data = generate_dataset(&cfg, 2, 5).unwrap();
    let (model, mut store) = StgdModel::build(&cfg).unwrap();
    let id = store.lookup("heads.boundary.start.bias").unwrap();
    store.get_mut(id).data_mut()[0] = f64::NAN;
    match train(&model, &mut store, &data, None, |_| {}) {
        Err(Error::NonFiniteLoss { step, term }) => {
            assert_eq!(step, 0);
            assert!(term.starts_with("forward"), "{term}");
        }
        other => panic!("expected NonFiniteLoss, got {other:?}"),
    }
    let err = train(&model, &mut store, &[], None, |_| {}).unwrap_err();
    assert!(matches!(err, Error::Validation(_)));
}

#[test]
fn evaluation_of_ground_truth_and_order_invariance() {
    let cfg = quick_cfg(2);
    let data = generate_dataset(&cfg, 6, 4).unwrap();
    let items = data
        .iter()
        .map(|s| (s.id, s.tube.clone(), s.tube.clone()))
        .collect();
    let r = report_from_predictions(items, 3, 10).unwrap();
    assert_eq!(
        (r.m_tiou, r.m_viou, r.viou_at_03, r.viou_at_05),
        (1.0, 1.0, 1.0, 1.0)
    );
    assert_eq!((r.tp_trainable, r.tp_total, r.n_samples), (3, 10, 6));

    let (model, mut store) = StgdModel::build(&cfg).unwrap();
    stgd_core::train::jitter_trainable(&mut store, 1, 0.3);
    let a = evaluate(&model, &store, &data).unwrap();
    let mut rev = data.clone();
    rev.reverse();
    assert_eq!(a, evaluate(&model, &store, &rev).unwrap());
    assert_eq!(a.n_samples, 6);
    assert_eq!(a.tp_trainable, store.count_trainable());
}
