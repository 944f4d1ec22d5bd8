"""Finite-difference suites for every loss term on a tiny two-class model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc
from .model import MGML, ModelConfig, metric_loss, meta_loss, orthogonality_loss, regression_targets
from .tensorcore import Tensor

LOSS_TERMS = ("L_oc", "L_meta", "L_metric", "L_reg", "total")
TOLERANCE = 1e-4


@dataclass
class ToyProblem:
    """A 2-class, d=4 model with adaptation parameters and one fixed episode."""

    model: MGML
    support_inputs: np.ndarray
    support_labels: np.ndarray
    query_inputs: np.ndarray
    query_labels: np.ndarray
    positive: np.ndarray
    reg_targets: np.ndarray
    alpha: float = 0.5

    @property
    def class_ids(self) -> tuple[int, int]:
        return (0, 1)

    @property
    def background(self) -> int:
        return 2

    def losses(self) -> dict[str, Tensor]:
        m = self.model
        support = m.encode(self.support_inputs)
        query = m.encode(self.query_inputs)
        # class 0 is base, class 1 is novel so the excite scale is exercised
        bank = m.build_support_bank(support, self.support_labels, self.class_ids, num_base=1)
        ce = tc.softmax_cross_entropy(m.meta_logits(query, bank, True), self.query_labels)
        oc = orthogonality_loss(support, self.support_labels)
        meta = meta_loss(ce, oc, self.alpha)
        metric = metric_loss(query, self.query_labels, m, self.class_ids, self.background)
        deltas = tc.gather_rows(m.regress_box(query), self.positive)
        reg = tc.smooth_l1(deltas, self.reg_targets)
        total = tc.add(tc.add(meta, metric), reg)
        return {"L_oc": oc, "L_meta": meta, "L_metric": metric, "L_reg": reg, "total": total}


def toy_problem(seed: int, input_width: int = 6, d: int = 4) -> ToyProblem:
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(input_width=input_width, hidden=5, feature_dim=d, scorer_hidden=5)
    model = MGML.initialize(cfg, seed)
    # random biases keep every ReLU away from its kink for the perturbation size used
    for name in ("backbone.b1", "backbone.b2", "scorer.b1"):
        p = model.params[name]
        p.assign(rng.uniform(0.5, 1.0, size=p.shape))
    model.add_adaptation_params(rng.uniform(1.0, 3.0), rng.normal(size=(3, d)))
    model.params["se.scale"].assign(rng.uniform(1.0, 3.0, size=d))
    support_labels = np.array([0, 0, 1, 1])
    query_labels = np.array([0, 1, 2, 0, 1])
    positive = np.flatnonzero(query_labels < 2)
    proposals = np.array([[10, 10, 30, 30]] * len(positive), dtype=np.float64)
    gt = proposals + rng.uniform(-4.0, 4.0, size=proposals.shape)
    return ToyProblem(
        model,
        rng.uniform(0.0, 1.0, size=(4, input_width)),
        support_labels,
        rng.uniform(0.0, 1.0, size=(5, input_width)),
        query_labels,
        positive,
        regression_targets(gt, proposals),
    )


def _suite_errors(prob: ToyProblem, h: float) -> dict[str, float]:
    """Relative error per loss term; one perturbation pass feeds all terms."""
    params = prob.model.trainable()
    analytic = {}
    for name in LOSS_TERMS:
        for p in params.values():
            p.zero_grad()
        prob.losses()[name].backward()
        analytic[name] = {k: (p.grad.copy() if p.grad is not None else np.zeros(p.shape)) for k, p in params.items()}
    numeric = {name: {} for name in LOSS_TERMS}
    for key, p in params.items():
        base = p.numpy()
        flat = base.reshape(-1)
        grads = {name: np.zeros(flat.size) for name in LOSS_TERMS}
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            p.assign(base)
            plus = {n: v.item() for n, v in prob.losses().items()}
            flat[i] = orig - h
            p.assign(base)
            minus = {n: v.item() for n, v in prob.losses().items()}
            flat[i] = orig
            for n in LOSS_TERMS:
                grads[n][i] = (plus[n] - minus[n]) / (2.0 * h)
        p.assign(base)
        for n in LOSS_TERMS:
            numeric[n][key] = grads[n].reshape(p.shape)
    for p in params.values():
        p.zero_grad()
    return {
        n: max(tc.relative_error(analytic[n][k], numeric[n][k]) for k in params) for n in LOSS_TERMS
    }


def run_suites(seeds=range(20), h: float = 1e-6) -> dict[str, float]:
    """Worst relative error per loss term across ``seeds``."""
    worst = {name: 0.0 for name in LOSS_TERMS}
    for seed in seeds:
        for name, err in _suite_errors(toy_problem(seed), h).items():
            worst[name] = max(worst[name], err)
    return worst


def format_table(worst: dict[str, float], tol: float = TOLERANCE, seconds: float | None = None) -> str:
    lines = [f"{'loss':<10} {'max_rel_err':>12}  status"]
    for name, err in worst.items():
        lines.append(f"{name:<10} {err:>12.3e}  {'PASS' if err < tol else 'FAIL'}")
    if seconds is not None:
        lines.append(f"elapsed {seconds:.2f}s")
    return "\n".join(lines)


def gradcheck_report(seeds=range(20), tol: float = TOLERANCE) -> tuple[bool, str]:
    t0 = time.perf_counter()
    worst = run_suites(seeds)
    ok = all(v < tol for v in worst.values())
    return ok, format_table(worst, tol, time.perf_counter() - t0)
