use proptest::prelude::*;
use stgd_core::heads::{
    aggregate_queries, argmax_rows, extract_tube, fuse_global_local, init_fuse_projection,
    predict_boundaries, predict_boxes, relevance_scores, top_k_select, BoundaryHead,
    BoundaryPrediction, BoxHead, TemporalDecoder,
};
use stgd_core::rng::{normal, seeded};
use stgd_core::tensor::{grad_check, GradCheckOptions};
use stgd_core::{Error, Graph, ParamStore, Tensor};

fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).unwrap()
}

fn scores_of(v: &Tensor, c: &Tensor) -> Tensor {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (vv, cc) = (g.constant(v.clone()), g.constant(c.clone()));
    let s = relevance_scores(&mut g, vv, cc).unwrap();
    g.value(s).clone()
}

#[test]
fn relevance_examples() {
    let c = t(&[2], vec![1.0, 0.0]);
    let v = t(&[1, 3, 2], vec![1.0, 0.0, 0.0, 2.0, 1.0, 1.0]);
    let s = scores_of(&v, &c);
    assert!((s.data()[0] - 1.0).abs() < 1e-15);
    assert_eq!(s.data()[1], 0.0);
    assert!((s.data()[2] - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    // Zero-norm queries score 0.
    assert_eq!(scores_of(&t(&[1, 1, 2], vec![0.0, 0.0]), &c).data(), &[0.0]);

    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (vv, cc) = (g.constant(v), g.constant(Tensor::zeros(&[2])));
    assert!(matches!(
        relevance_scores(&mut g, vv, cc),
        Err(Error::DegenerateInput(_))
    ));
}

#[test]
fn top_k_examples() {
    let s = t(&[1, 3], vec![0.1, 0.9, 0.5]);
    assert_eq!(top_k_select(&s, 2).unwrap(), vec![vec![1, 2]]);
    assert_eq!(top_k_select(&s, 3).unwrap(), vec![vec![1, 2, 0]]);
    assert_eq!(
        top_k_select(&Tensor::full(&[2, 4], 0.3), 2).unwrap(),
        vec![vec![0, 1]; 2]
    );
    assert!(matches!(top_k_select(&s, 0), Err(Error::Config(_))));
    assert!(matches!(top_k_select(&s, 4), Err(Error::Config(_))));
}

fn aggregate(v: &Tensor, s: &Tensor, idx: &[Vec<usize>]) -> Tensor {
    let store = ParamStore::new();
    let mut g = Graph::new(&store);
    let (vv, ss) = (g.constant(v.clone()), g.constant(s.clone()));
    let out = aggregate_queries(&mut g, vv, ss, idx).unwrap();
    g.value(out).clone()
}

#[test]
fn aggregation_examples() {
    let v = t(&[1, 3, 2], vec![1.0, 2.0, 3.0, 5.0, -1.0, 0.0]);
    let s = t(&[1, 3], vec![1.0, 0.0, 1.0]);
    assert_eq!(aggregate(&v, &s, &[vec![1]]).data(), &[3.0, 5.0]);
    let mean = aggregate(&v, &s, &[vec![0, 2]]);
    assert!((mean.data()[0] - 0.0).abs() < 1e-15 && (mean.data()[1] - 1.0).abs() < 1e-15);
    let w = aggregate(&v, &s, &[vec![0, 1]]);
    let (a1, a2) = (0.73106, 0.26894);
    assert!((w.data()[0] - (a1 * 1.0 + a2 * 3.0)).abs() < 1e-4);
    assert!((w.data()[1] - (a1 * 2.0 + a2 * 5.0)).abs() < 1e-4);
}

/// Explicit cosine, full sort, explicit softmax, explicit weighted sum.
fn brute_force_refine(v: &Tensor, c: &Tensor, k: usize) -> Vec<f64> {
    let (frames, nq, d) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let cn: f64 = c.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut out = Vec::new();
    for f in 0..frames {
        let mut scored: Vec<(f64, usize)> = (0..nq)
            .map(|j| {
                let row: Vec<f64> = (0..d).map(|i| v.at(&[f, j, i])).collect();
                let n: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dot: f64 = row.iter().zip(c.data()).map(|(a, b)| a * b).sum();
                (if n > 0.0 { dot / (n * cn) } else { 0.0 }, j)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let top = &scored[..k];
        let m = top.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = top.iter().map(|p| (p.0 - m).exp()).sum();
        for i in 0..d {
            out.push(
                top.iter()
                    .map(|&(s, j)| (s - m).exp() / z * v.at(&[f, j, i]))
                    .sum(),
            );
        }
    }
    out
}

#[test]
fn refinement_matches_brute_force() {
    let mut rng = seeded(3);
    for case in 0..60 {
        let (frames, nq, d) = (1 + case % 5, 1 + case % 9, 1 + case % 7);
        let k = 1 + case % nq;
        let v = normal(&[frames, nq, d], 1.0, &mut rng);
        let c = normal(&[d], 1.0, &mut rng);
        let s = scores_of(&v, &c);
        let idx = top_k_select(&s, k).unwrap();
        let got = aggregate(&v, &s, &idx);
        let want = brute_force_refine(&v, &c, k);
        let err = got
            .data()
            .iter()
            .zip(&want)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-12, "case {case}: {err}");
    }
}

#[test]
fn fusion_projection_starts_as_identity_slice() {
    let mut store = ParamStore::new();
    let proj = init_fuse_projection(&mut store, "fuse", 3).unwrap();
    let mut rng = seeded(1);
    let agg = normal(&[2, 3], 1.0, &mut rng);
    let mem = normal(&[2, 1, 3], 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let (a, m) = (g.constant(agg.clone()), g.constant(mem.clone()));
    let (glob, fused) = fuse_global_local(&mut g, a, m, &proj).unwrap();
    assert_eq!(g.value(fused).shape(), &[2, 3]);
    assert_eq!(g.data(fused), agg.data());
    // One visual token: the global feature is that token.
    assert_eq!(g.data(glob), mem.data());
}

fn decoder(store: &mut ParamStore, d: usize, layers: usize) -> TemporalDecoder {
    TemporalDecoder::new(store, "td", d, 2, layers, 32, &mut seeded(4)).unwrap()
}

#[test]
fn temporal_decoder_single_frame_and_uniform_attention() {
    let mut store = ParamStore::new();
    let dec = decoder(&mut store, 8, 2);
    let mut g = Graph::new(&store);
    let x = g.constant(Tensor::full(&[5, 8], 0.3));
    let (_, weights) = dec.forward_with_weights(&mut g, x).unwrap();
    for w in weights.iter().flatten() {
        assert!(g.data(*w).iter().all(|p| (p - 0.2).abs() < 1e-12));
    }
    let mut rng = seeded(2);
    let one = g.constant(normal(&[1, 8], 1.0, &mut rng));
    let (out, weights) = dec.forward_with_weights(&mut g, one).unwrap();
    assert_eq!(g.value(out).shape(), &[1, 8]);
    for w in weights.iter().flatten() {
        assert_eq!(g.data(*w), &[1.0]);
    }
}

#[test]
fn temporal_decoder_gradients() {
    let mut store = ParamStore::new();
    let dec = decoder(&mut store, 8, 2);
    // Nonzero relative biases so their gradients are exercised at a generic point.
    stgd_core::train::jitter_trainable(&mut store, 8, 0.3);
    let x = normal(&[4, 8], 1.0, &mut seeded(12));
    let ids = store.trainable_ids();
    let report = grad_check(
        &mut store,
        &ids,
        |g| {
            let xv = g.constant(x.clone());
            let h = dec.forward(g, xv)?;
            let w = g.constant(normal(&[4, 8], 1.0, &mut seeded(13)));
            let p = g.mul(h, w)?;
            g.sum(p)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn relative_index_depends_only_on_offset() {
    let mut store = ParamStore::new();
    let dec = decoder(&mut store, 8, 1);
    for shift in 0..10 {
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(
                    dec.relative_index(i, j),
                    dec.relative_index(i + shift, j + shift)
                );
            }
        }
    }
    assert_eq!(dec.relative_index(100, 0), dec.relative_index(40, 0));
}

#[test]
fn boundary_and_box_heads_with_zero_weights() {
    let mut store = ParamStore::new();
    let head = BoundaryHead::new(&mut store, "b", 4, &mut seeded(1)).unwrap();
    let boxes = BoxHead::new(&mut store, "x", 4, &mut seeded(1)).unwrap();
    for id in store.trainable_ids() {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let mut rng = seeded(7);
    let h = normal(&[6, 4], 1.0, &mut rng);
    let v = normal(&[6, 3, 4], 1.0, &mut rng);
    let scores = normal(&[6, 3], 1.0, &mut rng);
    let mut g = Graph::new(&store);
    let hv = g.constant(h);
    let (s, e, c) = predict_boundaries(&mut g, hv, &head).unwrap();
    for v in [s, e] {
        assert_eq!(g.value(v).shape(), &[6]);
        assert!(g.data(v).iter().all(|p| (p - 1.0 / 6.0).abs() < 1e-15));
    }
    assert!(g.data(c).iter().all(|p| *p == 0.5));
    let vv = g.constant(v);
    let (b, best) = predict_boxes(&mut g, vv, &scores, &boxes).unwrap();
    assert!(g.data(b).iter().all(|p| *p == 0.5));
    assert_eq!(best, argmax_rows(&scores));
    for (f, &j) in best.iter().enumerate() {
        let row = &scores.data()[f * 3..f * 3 + 3];
        assert!(row.iter().all(|x| *x <= row[j]));
    }
}

fn prediction(start: Vec<f64>, end: Vec<f64>) -> BoundaryPrediction {
    let n = start.len();
    BoundaryPrediction {
        start_dist: t(&[n], start),
        end_dist: t(&[n], end),
        temporal_conf: Tensor::full(&[n], 0.5),
        boxes: t(
            &[n, 4],
            (0..n * 4)
                .map(|i| 0.1 + i as f64 / (10.0 * n as f64))
                .collect(),
        ),
    }
}

#[test]
fn tube_extraction_examples() {
    let peak = |i: usize| {
        (0..8)
            .map(|j| if j == i { 0.9 } else { 0.1 / 7.0 })
            .collect::<Vec<_>>()
    };
    let p = prediction(peak(2), peak(5));
    let tube = extract_tube(&p);
    assert_eq!((tube.t_s, tube.t_e), (2, 5));
    assert_eq!(tube.boxes.len(), 4);
    assert_eq!(tube.boxes[0].to_vec(), p.boxes.data()[8..12].to_vec());
    let tube = extract_tube(&prediction(peak(4), peak(4)));
    assert_eq!((tube.t_s, tube.t_e), (4, 4));
    let tube = extract_tube(&prediction(vec![0.25; 4], vec![0.25; 4]));
    assert_eq!((tube.t_s, tube.t_e), (0, 0));
}

fn dist(raw: &[f64]) -> Vec<f64> {
    let s: f64 = raw.iter().sum();
    raw.iter().map(|x| x / s).collect()
}

proptest! {
    #[test]
    fn cosine_scores_are_scale_invariant(seed in 0u64..1000, lambda in 0.01f64..100.0, j in 0usize..5) {
        let mut rng = seeded(seed);
        let v = normal(&[3, 5, 4], 1.0, &mut rng);
        let c = normal(&[4], 1.0, &mut rng);
        let mut scaled = v.clone();
        for f in 0..3 {
            for i in 0..4 {
                scaled.data_mut()[(f * 5 + j) * 4 + i] *= lambda;
            }
        }
        let (a, b) = (scores_of(&v, &c), scores_of(&scaled, &c));
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
        prop_assert!(a.data().iter().all(|s| (-1.0 - 1e-12..=1.0 + 1e-12).contains(s)));
        // Ties aside, the selection cannot change.
        let (ka, kb) = (top_k_select(&a, 2).unwrap(), top_k_select(&b, 2).unwrap());
        if a.data() == b.data() {
            prop_assert_eq!(ka, kb);
        }
    }

    #[test]
    fn boundaries_are_distributions_for_any_weights(seed in 0u64..1000, scale in 0.1f64..20.0) {
        let mut store = ParamStore::new();
        let head = BoundaryHead::new(&mut store, "b", 5, &mut seeded(seed)).unwrap();
        stgd_core::train::jitter_trainable(&mut store, seed, scale);
        let h = normal(&[7, 5], scale, &mut seeded(seed + 1));
        let mut g = Graph::new(&store);
        let hv = g.constant(h);
        let (s, e, c) = predict_boundaries(&mut g, hv, &head).unwrap();
        for v in [s, e] {
            let sum: f64 = g.data(v).iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(g.data(v).iter().all(|p| *p >= 0.0));
        }
        prop_assert!(g.data(c).iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn extracted_tube_is_ordered_joint_argmax(
        s in proptest::collection::vec(0.001f64..1.0, 1..10),
        seed in 0u64..100,
    ) {
        let n = s.len();
        let e: Vec<f64> = normal(&[n], 1.0, &mut seeded(seed)).data().iter().map(|x| x.abs() + 1e-3).collect();
        let (s, e) = (dist(&s), dist(&e));
        let tube = extract_tube(&prediction(s.clone(), e.clone()));
        prop_assert!(tube.t_s <= tube.t_e && tube.t_e < n);
        let best = s[tube.t_s] * e[tube.t_e];
        for a in 0..n {
            for b in a..n {
                prop_assert!(s[a] * e[b] <= best);
            }
        }
    }
}
