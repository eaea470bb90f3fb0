"""Smoke test for the stgd extension module.

Build and run:
    cd crates/py && maturin develop --release && python python/smoke_test.py
"""

import json
import math
import os
import tempfile

import stgd


def check(cond, msg):
    if not cond:
        raise SystemExit(f"FAIL: {msg}")
    print(f"ok   {msg}")


def main():
    check(abs(stgd.t_iou((2, 6), (4, 8)) - 3 / 7) < 1e-12, "t_iou worked example")
    box = [0.5, 0.5, 0.3, 0.3]
    check(abs(stgd.v_iou((2, 5, [box] * 4), (0, 3, [box] * 4)) - 2 / 6) < 1e-12, "v_iou worked example")
    check(abs(stgd.giou([0, 0, 1, 1], [1, 1, 2, 2]) + 0.5) < 1e-12, "giou of touching boxes")
    check(abs(stgd.kl_div([1, 0], [0.5, 0.5]) - math.log(2)) < 1e-9, "kl_div")
    check(abs(stgd.bce_mask([1.0], [0.5]) - math.log(2)) < 1e-9, "bce_mask")
    check(abs(sum(stgd.gt_boundary_distribution(2, 5)) - 1) < 1e-12, "boundary distribution sums to 1")
    try:
        stgd.t_iou((5, 2), (0, 1))
        check(False, "inverted interval raises")
    except stgd.StgdError:
        check(True, "inverted interval raises StgdError")

    cfg = stgd.Config(frames=4, text_ffn_hidden=32, steps=20, batch_size=4, log_every=10)
    check(cfg.to_dict()["frames"] == 4, "config overrides")
    try:
        stgd.Config(top_k=9)
        check(False, "invalid config raises")
    except stgd.StgdError:
        check(True, "invalid config raises StgdError")

    data = stgd.generate_dataset(cfg, 8, 1)
    check(len(data) == 8 and all(0 <= s.t_s <= s.t_e < 4 for s in data), "dataset tubes are valid")
    check([s.to_json() for s in data] == [s.to_json() for s in stgd.generate_dataset(cfg, 8, 1)], "dataset is deterministic")
    check(set(json.loads(data[0].to_json())) >= {"id", "T", "video_features", "boxes"}, "record schema")

    model = stgd.Model(cfg)
    total, trainable = model.count_params()
    check(0 < trainable < total, f"parameter counts {trainable}/{total}")
    losses = model.train(data)
    check(len(losses) == 20 and losses[-1] < losses[0], f"loss {losses[0]:.3f} -> {losses[-1]:.3f}")
    report = model.evaluate(data)
    check(0 <= report["m_tiou"] <= 1 and report["n_samples"] == 8, "evaluation report")
    t_s, t_e, boxes = model.predict(data[0])
    check(t_s <= t_e and len(boxes) == t_e - t_s + 1, "prediction is a tube")

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "ck.json")
        model.save(path)
        again = stgd.Model.load(path)
        check(again.evaluate(data) == report, "checkpoint round trip")
        stgd.write_jsonl(os.path.join(d, "d.jsonl"), data)
        back = stgd.read_jsonl(os.path.join(d, "d.jsonl"))
        check([s.to_json() for s in back] == [s.to_json() for s in data], "jsonl round trip")

    passed, err, coords = stgd.gradcheck(cfg)
    check(passed and err < 1e-4, f"gradcheck max rel error {err:.2e} on {coords} coordinates")
    print("smoke test passed")


if __name__ == "__main__":
    main()
