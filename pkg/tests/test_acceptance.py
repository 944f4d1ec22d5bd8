"""One test per acceptance criterion, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict that is echoed in the
terminal summary. Criteria 6 and 7 train 50 models in total and take a
few minutes each.
"""

import itertools
import time

import numpy as np
import pytest

from conftest import record_acceptance
from mgml.boxes import Box, iou
from mgml.data import builtin_splits, get_split, sample_episode
from mgml.evaluation import Detection, GroundTruth, average_precision, evaluate, write_detections
from mgml.experiments import interior_peak, per_seed_curve, synthetic_ablation
from mgml.inference import detect
from mgml.model import MGML, ClassAttentiveBank, ModelConfig, orthogonality_loss
from mgml.synthworld import WorldSpec, build_world, generate_dataset
from mgml.tensorcore import Tensor
from mgml.training import COMPONENT_GRID, TrainConfig, adapt_few_shot, lambda_grid, prepare_episode, train_base
from mgml.verify import run_suites


def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = run_suites(range(20), h=1e-6)
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 10.0
    detail = ", ".join(f"{k}={v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f}s"
    record_acceptance(1, "finite-difference gradients over 20 seeds", ok, detail)
    assert max(worst.values()) < 1e-4, worst
    assert elapsed < 10.0, f"gradient suites took {elapsed:.1f}s"


def _oc_oracle(x, labels):
    same, diff = [], []
    for i, j in itertools.combinations(range(len(labels)), 2):
        c = x[i] @ x[j] / (np.linalg.norm(x[i]) * np.linalg.norm(x[j]))
        (same if labels[i] == labels[j] else diff).append(c)
    return sum(1 - c for c in same) / len(same) + sum(diff) / len(diff)


def test_criterion_2_orthogonality_cases():
    results = {}
    results["parallel same-class"] = orthogonality_loss(Tensor([[1.0, 2.0], [2.0, 4.0]]), [0, 0]).item() == pytest.approx(0.0, abs=1e-15)
    results["orthogonal cross-class"] = orthogonality_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 1]).item() == 0.0
    results["orthogonal same-class"] = orthogonality_loss(Tensor([[1.0, 0.0], [0.0, 1.0]]), [0, 0]).item() == 1.0
    rng = np.random.default_rng(0)
    x = rng.normal(size=(6, 4))
    labels = [0, 0, 1, 1, 2, 2]
    plain = orthogonality_loss(Tensor(x), labels, background=3).item()
    with_bg = np.vstack([x, rng.normal(size=(3, 4))])
    results["background ignored bitwise"] = orthogonality_loss(Tensor(with_bg), labels + [3, 3, 3], background=3).item() == plain
    results["oracle 3-class K=2"] = abs(plain - _oc_oracle(x, labels)) <= 1e-12
    ok = all(results.values())
    record_acceptance(2, "orthogonality analytic cases", ok, ", ".join(k for k, v in results.items() if not v) or "all 5 cases hold")
    assert ok, results


@pytest.fixture(scope="module")
def small_world():
    w = build_world(WorldSpec(rng_seed=0))
    return w, generate_dataset(w, w.split, 15, 10, rng_seed=0)


def test_criterion_3_se_identity(small_world):
    w, d = small_world
    model = MGML.initialize(ModelConfig(input_width=d.train.input_width), seed=0)
    model.add_adaptation_params(1.0, np.random.default_rng(0).normal(size=(w.split.num_classes + 1, 16)))
    worst = 0.0
    for seed in range(10):
        ep = sample_episode(d.train, w.split, w.split.num_classes, 5, 8, "adaptation", rng_seed=seed)
        batch = prepare_episode(ep, w.split, d.train.payload_dim, np.random.default_rng(seed))
        support = model.encode(batch.support_inputs)
        query = model.encode(batch.query_inputs)
        bank = model.build_support_bank(support, batch.support_labels, batch.class_ids, w.split.num_base)
        on = model.meta_logits(query, bank, True).numpy()
        off = model.meta_logits(query, bank, False).numpy()
        worst = max(worst, float(np.abs(on - off).max()))
    ok = worst <= 1e-12
    record_acceptance(3, "SE with unit scale equals SE disabled", ok, f"max |diff| = {worst:.1e} over 10 episodes")
    assert ok


def test_criterion_4_aggregation_segments():
    rng = np.random.default_rng(4)
    d = 16
    model = MGML.initialize(ModelConfig(input_width=10, feature_dim=d), seed=4)
    model.add_adaptation_params(2.0, rng.normal(size=(6, d)))
    model.params["se.scale"].assign(rng.uniform(0.5, 3.0, size=d))
    q = rng.uniform(size=(7, d))
    v = rng.uniform(size=(5, d))
    bank = ClassAttentiveBank(Tensor(v), (0, 1, 2, 3, 4), 3, 2, model.params["se.scale"])
    agg = model.aggregate(Tensor(q), bank, model.split_and_excite(bank, True)).numpy()
    lam = model.params["se.scale"].numpy()
    excited = np.vstack([v[:3], v[3:] * lam])
    worst, shapes_ok = 0.0, agg.shape == (7 * 5, 3 * d)
    for r in range(7):
        for c in range(5):
            row = agg[r * 5 + c]
            shapes_ok &= row.shape == (3 * d,)
            worst = max(
                worst,
                np.abs(row[:d] - q[r] * excited[c]).max(),
                np.abs(row[d : 2 * d] - (q[r] - v[c])).max(),
                np.abs(row[2 * d :] - q[r]).max(),
            )
    ok = shapes_ok and worst <= 1e-12
    record_acceptance(4, "aggregated feature is 3d with exact segments", ok, f"shape {agg.shape}, max |diff| = {worst:.1e}")
    assert ok


def _rank_oracle(dets, gts):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    used = [False] * len(gts)
    prec, rec, tp = [], [], 0
    for k, di in enumerate(order, start=1):
        cands = [(iou(dets[di].box, g.box), -gi) for gi, g in enumerate(gts) if g.scene_id == dets[di].scene_id and not used[gi]]
        best = max(cands) if cands else (0.0, 0)
        if best[0] >= 0.5:
            used[-best[1]] = True
            tp += 1
        prec.append(tp / k)
        rec.append(tp / len(gts))
    ap, prev = 0.0, 0.0
    for k in range(len(order)):
        if rec[k] > prev:
            ap += (rec[k] - prev) * max(prec[k:])
            prev = rec[k]
    return ap


def test_criterion_5_ap_oracle():
    worst = 0.0
    n = 200
    for seed in range(n):
        rng = np.random.default_rng(seed)
        gts = []
        for _ in range(rng.integers(1, 6)):
            x, y = rng.uniform(0, 20, size=2)
            gts.append(GroundTruth(f"s{rng.integers(2)}", 0, Box(x, y, x + rng.uniform(2, 8), y + rng.uniform(2, 8))))
        dets = []
        for _ in range(rng.integers(0, 9)):
            g = gts[rng.integers(len(gts))]
            b = g.box.as_array() + rng.normal(0, 1.5, size=4)
            b[2:] = np.maximum(b[2:], b[:2] + 0.5)
            dets.append(Detection(g.scene_id if rng.random() < 0.8 else "s9", 0, float(rng.integers(0, 5)) / 4, Box(*b)))
        worst = max(worst, abs(average_precision(dets, gts) - _rank_oracle(dets, gts)))
    exact = iou(Box(0, 0, 10, 10), Box(5, 5, 15, 15)) == 25 / 175
    ok = worst <= 1e-10 and exact
    record_acceptance(5, "AP matches rank-by-rank oracle", ok, f"{n} scenarios, max |diff| = {worst:.1e}; IoU 25/175 exact: {exact}")
    assert ok


@pytest.mark.slow
def test_criterion_6_ablation_ordering():
    t0 = time.perf_counter()
    rows = synthetic_ablation(COMPONENT_GRID, seeds=range(5))
    elapsed = time.perf_counter() - t0
    mean = {r["cell"]: r for r in rows if r["seed"] == "mean"}
    full, se, mm = (mean[c]["mAP_novel"] for c in ("meta+metric+SE+OC", "meta+metric+SE", "meta+metric"))
    conf_full, conf_metric = mean["meta+metric+SE+OC"]["mean_confusion"], mean["metric-only"]["mean_confusion"]
    checks = {
        "full >= +SE": full >= se,
        "+SE >= meta+metric": se >= mm,
        "confusion full < metric-only": conf_full < conf_metric,
        "under 15 min": elapsed <= 900,
    }
    ok = all(checks.values())
    detail = (
        f"novel mAP full={full:.3f} +SE={se:.3f} meta+metric={mm:.3f}; "
        f"confusion full={conf_full:.2f} metric-only={conf_metric:.2f}; {elapsed:.0f}s"
    )
    failed = [k for k, v in checks.items() if not v]
    record_acceptance(6, "component ablation ordering", ok, detail + (f"; failed: {', '.join(failed)}" if failed else ""))
    assert ok, checks


@pytest.mark.slow
def test_criterion_7_lambda_sweep():
    grid = lambda_grid((1.0, 1.5, 2.0, 2.5))
    names = [c.name for c in grid]
    rows = synthetic_ablation(grid, seeds=range(5))
    curves = per_seed_curve(rows, names)
    interior = {s: interior_peak(v) for s, v in curves.items()}
    mean = [next(r["mAP_novel"] for r in rows if r["seed"] == "mean" and r["cell"] == n) for n in names]
    hits = sum(interior.values())
    ok = hits >= 4
    detail = f"interior peak in {hits}/5 seeds; seed-mean novel mAP " + " ".join(f"{v:.3f}" for v in mean)
    record_acceptance(7, "lambda0 sweep peaks inside the range", ok, detail)
    assert ok, curves


def _pipeline(tmp, seed=3):
    w = build_world(WorldSpec(rng_seed=seed))
    d = generate_dataset(w, w.split, 15, 10, rng_seed=seed)
    base = train_base(d.train, w.split, TrainConfig(stage="base", epochs=2, episodes_per_epoch=5, rng_seed=seed))
    ad = adapt_few_shot(base, d.train, w.split, TrainConfig(stage="adaptation", epochs=2, episodes_per_epoch=5, rng_seed=seed))
    ad.save(tmp / "ckpt.mgck")
    dets = detect(ad, d.val, seed=seed)
    write_detections(dets, w.split, tmp / "dets.jsonl")
    evaluate(dets, d.val, w.split).write(tmp)
    return [tmp / n for n in ("ckpt.mgck", "dets.jsonl", "report.json", "confusion.csv")]


def test_criterion_8_determinism(tmp_path):
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    same = {p.name: p.read_bytes() == q.read_bytes() for p, q in zip(a, b)}
    ok = all(same.values())
    record_acceptance(8, "byte-identical reruns", ok, ", ".join(f"{k}:{'same' if v else 'DIFF'}" for k, v in same.items()))
    assert ok


def test_criterion_9_split_registry():
    expected = {
        "IDD-10-split1": ("bicycle", "bus", "truck"),
        "IDD-10-split2": ("autorickshaw", "motorcycle", "truck"),
        "IDD-OS": ("street cart", "tractor", "water tanker", "excavator"),
        "VOC-split1": ("bird", "bus", "cow", "motorbike", "sofa"),
        "VOC-split2": ("aeroplane", "bottle", "cow", "horse", "sofa"),
        "VOC-split3": ("boat", "cat", "motorbike", "sheep", "sofa"),
    }
    sizes = {"IDD-10-split1": (7, 3), "IDD-10-split2": (7, 3), "IDD-OS": (10, 4)}
    sizes.update({f"VOC-split{i}": (15, 5) for i in (1, 2, 3)})
    problems = []
    if [s.name for s in builtin_splits()] != list(expected):
        problems.append("registry names")
    for name, novel in expected.items():
        s = get_split(name)
        if s.novel_classes != novel:
            problems.append(f"{name} novel")
        if (s.num_base, s.num_novel) != sizes[name]:
            problems.append(f"{name} sizes")
        if set(s.base_classes) & set(novel):
            problems.append(f"{name} overlap")
    voc = set(get_split("VOC-split1").classes)
    if voc != {
        "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow", "diningtable",
        "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa", "train", "tvmonitor",
    }:
        problems.append("VOC universe")
    ok = not problems
    record_acceptance(9, "split registry strings", ok, "; ".join(problems) or "6 splits match")
    assert ok, problems
