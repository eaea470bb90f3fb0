//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng;
use stgd_core::adapters::{
    init_adapter, init_lora, lora_linear, st_adapter, temporal_adapter, temporal_diff_adapter,
    AdapterKind,
};
use stgd_core::checkpoint::{load_checkpoint, save_checkpoint, FROZEN, TRAINABLE};
use stgd_core::data::{generate_dataset, write_jsonl};
use stgd_core::eval::evaluate;
use stgd_core::heads::{aggregate_queries, relevance_scores, top_k_select};
use stgd_core::losses::{bce_mask, giou, kl_div, spatial_loss_value, LossWeights, KL_EPS};
use stgd_core::metrics::{box_iou, t_iou, v_iou, BoxCxcywh, Tube};
use stgd_core::rng::{normal, seeded};
use stgd_core::tensor::GradCheckOptions;
use stgd_core::train::{check_model_gradients, train};
use stgd_core::{Graph, ParamStore, StgdModel, Tensor, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = (&'static str, &'static str, Duration, fn() -> Outcome);

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn run_graph(
    store: &ParamStore,
    x: &Tensor,
    f: impl Fn(&mut Graph<'_>, stgd_core::Var) -> stgd_core::Result<stgd_core::Var>,
) -> Result<Tensor, String> {
    let mut g = Graph::new(store);
    let v = g.constant(x.clone());
    let out = f(&mut g, v).map_err(err)?;
    Ok(g.value(out).clone())
}

fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn c1_zero_init_identity() -> Outcome {
    let mut rng = seeded(101);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let dim = [8, 16, 32, 64][i % 4];
        let ratio = [2, 4, 8][i % 3];
        let frames = 1 + i % 9;
        let mut store = ParamStore::new();
        let seed = 1000 + i as u64;
        let ta =
            init_adapter(&mut store, "t", AdapterKind::Temporal, dim, ratio, seed).map_err(err)?;
        let da = init_adapter(&mut store, "d", AdapterKind::TemporalDiff, dim, ratio, seed)
            .map_err(err)?;
        let sa = init_adapter(
            &mut store,
            "s",
            AdapterKind::SpatioTemporal,
            dim,
            ratio,
            seed,
        )
        .map_err(err)?;
        let rank = 1 + i % 4;
        let lora = init_lora(&mut store, "l", dim, dim + 3, rank, 8.0, seed).map_err(err)?;
        let w = store
            .frozen("w", normal(&[dim, dim + 3], 1.0, &mut rng))
            .map_err(err)?;

        let scale = 10f64.powi(rng.random_range(-3..4));
        let z = normal(&[frames, dim], scale, &mut rng);
        worst = worst.max(max_abs(
            &run_graph(&store, &z, |g, x| temporal_adapter(g, x, &ta))?,
            &z,
        ));
        worst = worst.max(max_abs(
            &run_graph(&store, &z, |g, x| temporal_diff_adapter(g, x, &da))?,
            &z,
        ));
        let side = 1 + i % 5;
        let v = normal(&[frames, side, side + 1, dim], scale, &mut rng);
        worst = worst.max(max_abs(
            &run_graph(&store, &v, |g, x| st_adapter(g, x, &sa))?,
            &v,
        ));
        let with = run_graph(&store, &z, |g, x| {
            let wv = g.param(w);
            lora_linear(g, x, wv, &lora)
        })?;
        let plain = run_graph(&store, &z, |g, x| {
            let wv = g.param(w);
            stgd_core::tensor::linear(g, x, wv, None)
        })?;
        worst = worst.max(max_abs(&with, &plain));
    }
    ensure(worst == 0.0, format!("max |adapter(x) - x| = {worst:e}"))?;
    Ok("S-T, Temporal, Temporal-Diff and LoRA: 50 inputs each, max abs diff 0".into())
}

fn c2_gradient_fidelity() -> Outcome {
    let cfg = TrainConfig::default();
    let opts = GradCheckOptions {
        seed: cfg.seed,
        ..GradCheckOptions::default()
    };
    let report = check_model_gradients(&cfg, &opts).map_err(err)?;
    let (_, store) = StgdModel::build(&cfg).map_err(err)?;
    let trainable = store.trainable_ids();
    ensure(
        report.tensors.len() == trainable.len(),
        "not every trainable tensor was checked",
    )?;
    for (t, id) in report.tensors.iter().zip(&trainable) {
        let n = store.get(*id).numel();
        ensure(
            t.coords >= 20.min(n),
            format!("{} checked on {} coordinates", t.name, t.coords),
        )?;
    }
    ensure(
        report.passed && report.max_rel_error < 1e-4,
        format!(
            "max relative error {:.3e} (worst tensor {:?})",
            report.max_rel_error,
            report
                .tensors
                .iter()
                .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
                .map(|t| &t.name)
        ),
    )?;
    Ok(format!(
        "{} tensors, {} coordinates, max rel error {:.2e} < 1e-4",
        report.tensors.len(),
        report.coords_checked(),
        report.max_rel_error
    ))
}

fn c3_frozen_contract() -> Outcome {
    let cfg = TrainConfig {
        steps: 200,
        log_every: 200,
        ..TrainConfig::default()
    };
    let data = generate_dataset(&cfg, 64, 1).map_err(err)?;
    let (model, mut store) = StgdModel::build(&cfg).map_err(err)?;
    let dir = tempfile::tempdir().map_err(err)?;
    save_checkpoint(&dir.path().join("init.json"), &cfg, &store).map_err(err)?;
    train(&model, &mut store, &data, None, |_| {}).map_err(err)?;
    save_checkpoint(&dir.path().join("final.json"), &cfg, &store).map_err(err)?;
    let before = load_checkpoint(&dir.path().join("init.json")).map_err(err)?;
    let after = load_checkpoint(&dir.path().join("final.json")).map_err(err)?;
    let mut frozen = 0;
    let mut moved = 0;
    for ((e, a), b) in before
        .manifest
        .tensors
        .iter()
        .zip(&before.tensors)
        .zip(&after.tensors)
    {
        let same = a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits());
        if e.group == FROZEN {
            ensure(same, format!("{} changed during training", e.name))?;
            frozen += 1;
        } else if !same {
            moved += 1;
        }
    }
    ensure(moved > 0, "no trainable tensor changed")?;
    let trainable = stgd_core::metrics::count_trainable_params(&store);
    ensure(
        trainable == after.count(TRAINABLE),
        "count_trainable_params disagrees with the manifest",
    )?;
    let frac = trainable as f64 / store.count_total() as f64;
    ensure(frac < 0.10, format!("trainable fraction {frac:.4}"))?;
    Ok(format!(
        "{frozen} frozen tensors bitwise unchanged after 200 steps; trainable {trainable}/{} = {:.2}%",
        store.count_total(),
        100.0 * frac
    ))
}

fn brute_force_refine(v: &Tensor, c: &Tensor, k: usize) -> Vec<f64> {
    let (frames, nq, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let cn = c.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::with_capacity(frames * d);
    for f in 0..frames {
        let mut scored: Vec<(f64, usize)> = (0..nq)
            .map(|j| {
                let row = &v.data()[(f * nq + j) * d..(f * nq + j + 1) * d];
                let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(c.data()).map(|(a, b)| a * b).sum();
                (if n > 0.0 { dot / (n * cn) } else { 0.0 }, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let top = &scored[..k];
        let m = top.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = top.iter().map(|p| (p.0 - m).exp()).sum();
        for i in 0..d {
            out.push(
                top.iter()
                    .map(|&(s, j)| (s - m).exp() / z * v.data()[(f * nq + j) * d + i])
                    .sum(),
            );
        }
    }
    out
}

fn c4_refinement_oracle() -> Outcome {
    let mut rng = seeded(404);
    let mut worst: f64 = 0.0;
    let store = ParamStore::new();
    for _ in 0..200 {
        let frames = rng.random_range(1..10);
        let nq = rng.random_range(1..12);
        let d = rng.random_range(1..40);
        let k = rng.random_range(1..=nq);
        let v = normal(&[frames, nq, d], 1.0, &mut rng);
        let c = normal(&[d], 1.0, &mut rng);
        let mut g = Graph::new(&store);
        let (vv, cc) = (g.constant(v.clone()), g.constant(c.clone()));
        let s = relevance_scores(&mut g, vv, cc).map_err(err)?;
        let idx = top_k_select(g.value(s), k).map_err(err)?;
        let agg = aggregate_queries(&mut g, vv, s, &idx).map_err(err)?;
        let want = brute_force_refine(&v, &c, k);
        worst = worst.max(
            g.data(agg)
                .iter()
                .zip(&want)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max),
        );
    }
    ensure(worst <= 1e-12, format!("max abs deviation {worst:e}"))?;
    Ok(format!(
        "200 random (T, N_q, d, K) instances, max abs deviation {worst:.1e}"
    ))
}

fn random_tube(rng: &mut impl Rng) -> Tube {
    let s = rng.random_range(0..16);
    let e = s + rng.random_range(0..10);
    let boxes: Vec<BoxCxcywh> = (s..=e)
        .map(|_| {
            [
                rng.random_range(0.1..0.9),
                rng.random_range(0.1..0.9),
                rng.random_range(0.05..0.7),
                rng.random_range(0.05..0.7),
            ]
        })
        .collect();
    Tube::new(s, e, boxes).unwrap()
}

fn c5_metric_oracles() -> Outcome {
    let mut rng = seeded(505);
    for i in 0..100 {
        let (a, b) = (random_tube(&mut rng), random_tube(&mut rng));
        let top = a.t_e.max(b.t_e);
        let (mut inter, mut union, mut sum) = (0usize, 0usize, 0.0);
        for t in 0..=top {
            match (a.box_at(t), b.box_at(t)) {
                (Some(x), Some(y)) => {
                    inter += 1;
                    union += 1;
                    sum += box_iou(x, y);
                }
                (None, None) => {}
                _ => union += 1,
            }
        }
        let ti = t_iou((a.t_s, a.t_e), (b.t_s, b.t_e)).map_err(err)?;
        let vi = v_iou(&a, &b).map_err(err)?;
        ensure(
            ti == inter as f64 / union as f64,
            format!("pair {i}: tIoU {ti} vs oracle"),
        )?;
        ensure(
            vi == sum / union as f64,
            format!("pair {i}: vIoU {vi} vs oracle {}", sum / union as f64),
        )?;
    }
    let ex1 = t_iou((2, 6), (4, 8)).map_err(err)?;
    ensure(
        (ex1 - 3.0 / 7.0).abs() < 1e-9,
        format!("[2,6] vs [4,8] gave {ex1}"),
    )?;
    let b = [0.5, 0.5, 0.3, 0.3];
    let gt = Tube::new(0, 3, vec![b; 4]).map_err(err)?;
    let pred = Tube::new(2, 5, vec![b; 4]).map_err(err)?;
    let ex2 = v_iou(&pred, &gt).map_err(err)?;
    ensure(
        (ex2 - 2.0 / 6.0).abs() < 1e-9,
        format!("vIoU example gave {ex2}"),
    )?;
    Ok(format!(
        "100 random pairs exact; 3/7 -> {ex1:.6}, 2/6 -> {ex2:.6}"
    ))
}

fn c6_loss_unit_values() -> Outcome {
    let ln2 = std::f64::consts::LN_2;
    let kl = kl_div(&[1.0, 0.0], &[0.5, 0.5], KL_EPS).map_err(err)?;
    ensure((kl - ln2).abs() <= 1e-9, format!("KL = {kl}"))?;
    let bce = bce_mask(&[1.0], &[0.5]).map_err(err)?;
    ensure((bce - ln2).abs() <= 1e-9, format!("BCE = {bce}"))?;
    let gi = giou(&[0.0, 0.0, 1.0, 1.0], &[1.0, 1.0, 2.0, 2.0]).map_err(err)?;
    ensure((gi + 0.5).abs() <= 1e-9, format!("GIoU = {gi}"))?;

    let mut rng = seeded(606);
    let w = LossWeights::default();
    for _ in 0..50 {
        let frames = rng.random_range(3..12);
        let t_s = rng.random_range(1..frames - 1);
        let t_e = rng.random_range(t_s..frames - 1);
        let rand_box = |rng: &mut stgd_core::rng::SeededRng| -> BoxCxcywh {
            [
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.5),
                rng.random_range(0.1..0.5),
            ]
        };
        let gt =
            Tube::new(t_s, t_e, (t_s..=t_e).map(|_| rand_box(&mut rng)).collect()).map_err(err)?;
        let pred: Vec<BoxCxcywh> = (0..frames).map(|_| rand_box(&mut rng)).collect();
        let mut moved = pred.clone();
        for (t, b) in moved.iter_mut().enumerate() {
            if t < t_s || t > t_e {
                *b = rand_box(&mut rng);
            }
        }
        let a = spatial_loss_value(&pred, &gt, &w, 1.0 / 9.0).map_err(err)?;
        let m = spatial_loss_value(&moved, &gt, &w, 1.0 / 9.0).map_err(err)?;
        ensure(
            a.to_bits() == m.to_bits(),
            format!("spatial loss moved from {a} to {m}"),
        )?;
    }
    Ok(format!(
        "KL {kl:.9}, BCE {bce:.9}, GIoU {gi:.9}; spatial loss bitwise stable on 50 cases"
    ))
}

fn c7_learnability() -> Outcome {
    let base = TrainConfig {
        steps: 1200,
        log_every: 1200,
        ..TrainConfig::default()
    };
    let train_set = generate_dataset(&base, 64, 1).map_err(err)?;
    let val_set = generate_dataset(&base, 16, 2).map_err(err)?;
    let fit = |use_adapters: bool| -> Result<_, String> {
        let cfg = TrainConfig {
            use_adapters,
            ..base.clone()
        };
        let (model, mut store) = StgdModel::build(&cfg).map_err(err)?;
        train(&model, &mut store, &train_set, None, |_| {}).map_err(err)?;
        Ok((
            evaluate(&model, &store, &train_set).map_err(err)?,
            evaluate(&model, &store, &val_set).map_err(err)?,
        ))
    };
    let (tr, va) = fit(true)?;
    let (_, va0) = fit(false)?;
    let detail = format!(
        "{} steps: train m_tIoU {:.3}, m_vIoU {:.3}; val m_vIoU {:.3} vs baseline {:.3}",
        base.steps, tr.m_tiou, tr.m_viou, va.m_viou, va0.m_viou
    );
    ensure(
        tr.m_tiou >= 0.80 && tr.m_viou >= 0.60 && va.m_viou > va0.m_viou,
        detail.clone(),
    )?;
    Ok(detail)
}

fn pipeline(dir: &std::path::Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let cfg = TrainConfig {
        steps: 30,
        log_every: 10,
        ..TrainConfig::default()
    };
    let data = generate_dataset(&cfg, 12, 77).map_err(err)?;
    write_jsonl(&dir.join("data.jsonl"), &data).map_err(err)?;
    let reread = stgd_core::data::read_jsonl(&dir.join("data.jsonl")).map_err(err)?;
    let (model, mut store) = StgdModel::build(&cfg).map_err(err)?;
    train(&model, &mut store, &reread, None, |_| {}).map_err(err)?;
    save_checkpoint(&dir.join("model.json"), &cfg, &store).map_err(err)?;
    let report = evaluate(&model, &store, &reread).map_err(err)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report).map_err(err)?,
    )
    .map_err(err)?;
    ["data.jsonl", "model.json", "model.bin", "report.json"]
        .iter()
        .map(|f| Ok((f.to_string(), std::fs::read(dir.join(f)).map_err(err)?)))
        .collect()
}

fn c8_determinism() -> Outcome {
    let (a, b) = (
        tempfile::tempdir().map_err(err)?,
        tempfile::tempdir().map_err(err)?,
    );
    let (fa, fb) = (pipeline(a.path())?, pipeline(b.path())?);
    for ((name, x), (_, y)) in fa.iter().zip(&fb) {
        ensure(x == y, format!("{name} differs between runs"))?;
    }
    let sizes: Vec<String> = fa
        .iter()
        .map(|(n, b)| format!("{n} {}B", b.len()))
        .collect();
    Ok(format!("byte-identical: {}", sizes.join(", ")))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (
            "C1",
            "zero-init identity",
            Duration::from_secs(5),
            c1_zero_init_identity,
        ),
        (
            "C2",
            "gradient fidelity",
            Duration::from_secs(120),
            c2_gradient_fidelity,
        ),
        (
            "C3",
            "frozen contract",
            Duration::from_secs(120),
            c3_frozen_contract,
        ),
        (
            "C4",
            "refinement oracle",
            Duration::from_secs(10),
            c4_refinement_oracle,
        ),
        (
            "C5",
            "metric oracles",
            Duration::from_secs(5),
            c5_metric_oracles,
        ),
        (
            "C6",
            "loss unit values",
            Duration::from_secs(5),
            c6_loss_unit_values,
        ),
        (
            "C7",
            "desk-scale learnability",
            Duration::from_secs(600),
            c7_learnability,
        ),
        (
            "C8",
            "determinism",
            Duration::from_secs(120),
            c8_determinism,
        ),
    ];
    let mut failed = 0;
    for (id, name, budget, f) in criteria {
        let start = Instant::now();
        let outcome = f();
        let secs = start.elapsed().as_secs_f64();
        let over = start.elapsed() > budget;
        let (tag, detail) = match (&outcome, over) {
            (Ok(d), false) => ("PASS", d.clone()),
            (Ok(d), true) => (
                "FAIL",
                format!("{d}; over the {}s budget", budget.as_secs()),
            ),
            (Err(e), _) => ("FAIL", e.clone()),
        };
        if tag == "FAIL" {
            failed += 1;
        }
        println!("{tag} {id} {name}: {detail} [{secs:.1}s]");
    }
    println!("acceptance: {} of 8 criteria passed", 8 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
