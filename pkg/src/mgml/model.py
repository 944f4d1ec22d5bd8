"""The meta guided metric learner head.

A two-layer perceptron stands in for the detector backbone. Per episode,
support regions are encoded into per-class attentive vectors, novel vectors
are optionally excited by a learnable channel scale, every query region is
combined with every class vector, and a shared scorer turns each combined
feature into a class logit. A cosine-similarity head gives the metric
branch its own logits.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .boxes import apply_deltas, encode_deltas
from .tensorcore import ContractError, DimensionError, Tensor

BASE_PARAMS = (
    "backbone.w1", "backbone.b1", "backbone.w2", "backbone.b2",
    "scorer.w1", "scorer.b1", "scorer.w2", "scorer.b2",
    "bg.w", "bg.b",
    "reg.w", "reg.b",
)
ADAPT_PARAMS = ("se.scale", "metric.directions")


@dataclass(frozen=True)
class ModelConfig:
    input_width: int
    hidden: int = 32
    feature_dim: int = 16
    scorer_hidden: int = 32
    temperature: float = 20.0
    oc_normalized: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ClassAttentiveBank:
    """Per-class support vectors (base first, then novel) plus the excite scale."""

    vectors: Tensor
    class_ids: tuple[int, ...]
    base_count: int
    novel_count: int
    excite_scale: Tensor | None = None

    def __post_init__(self):
        if self.vectors.shape[0] != self.base_count + self.novel_count:
            raise DimensionError("bank must hold exactly one vector per foreground class")
        if len(self.class_ids) != self.vectors.shape[0]:
            raise DimensionError("class_ids must label every bank vector")


def _he(rng, fan_in, fan_out):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))


class MGML:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    @classmethod
    def initialize(cls, config: ModelConfig, seed: int) -> "MGML":
        rng = np.random.default_rng(seed)
        d, h, hs = config.feature_dim, config.hidden, config.scorer_hidden
        raw = {
            "backbone.w1": _he(rng, config.input_width, h),
            "backbone.b1": np.zeros(h),
            "backbone.w2": _he(rng, h, d),
            "backbone.b2": np.zeros(d),
            "scorer.w1": _he(rng, 3 * d, hs),
            "scorer.b1": np.zeros(hs),
            "scorer.w2": rng.normal(0.0, np.sqrt(1.0 / hs), size=(hs, 1)),
            "scorer.b2": np.zeros(1),
            "bg.w": rng.normal(0.0, np.sqrt(1.0 / d), size=(d, 1)),
            "bg.b": np.zeros(1),
            "reg.w": rng.normal(0.0, 0.01, size=(d, 4)),
            "reg.b": np.zeros(4),
        }
        return cls(config, {k: Tensor(v, requires_grad=True) for k, v in raw.items()})

    @property
    def adapted(self) -> bool:
        return "se.scale" in self.params

    def add_adaptation_params(self, lambda0: float, directions: np.ndarray) -> None:
        """Create the excite scale and metric-head directions (adaptation stage only)."""
        d = self.config.feature_dim
        directions = np.asarray(directions, dtype=np.float64)
        if directions.ndim != 2 or directions.shape[1] != d:
            raise DimensionError(f"metric directions must be [classes+1, {d}], got {directions.shape}")
        self.params["se.scale"] = Tensor(np.full(d, float(lambda0)), requires_grad=True)
        self.params["metric.directions"] = Tensor(directions, requires_grad=True)

    def trainable(self) -> dict[str, Tensor]:
        return dict(self.params)

    # --- meta branch -----------------------------------------------------

    def encode(self, x) -> Tensor:
        """Backbone features for one input vector ``[in]`` or a batch ``[n, in]``."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[-1] != self.config.input_width:
            raise DimensionError(
                f"encode: input width {x.shape[-1]} != configured {self.config.input_width}"
            )
        p = self.params
        h = tc.relu(tc.add(tc.matmul(x, p["backbone.w1"]), p["backbone.b1"]))
        # linear output: signed features let cross-class cosines reach 0 without dead channels
        return tc.add(tc.matmul(h, p["backbone.w2"]), p["backbone.b2"])

    def build_support_bank(
        self, support_features: Tensor, support_labels: Sequence[int], class_ids: Sequence[int], num_base: int
    ) -> ClassAttentiveBank:
        """Mean support feature per class, ordered as ``class_ids``."""
        labels = np.asarray(support_labels)
        class_ids = tuple(int(c) for c in class_ids)
        avg = np.zeros((len(class_ids), len(labels)))
        for row, c in enumerate(class_ids):
            members = labels == c
            if not members.any():
                raise ContractError(f"no support examples for class {c}")
            avg[row, members] = 1.0 / members.sum()
        vectors = tc.matmul(Tensor(avg), support_features)
        n_base = sum(1 for c in class_ids if c < num_base)
        return ClassAttentiveBank(vectors, class_ids, n_base, len(class_ids) - n_base, self.params.get("se.scale"))

    def split_and_excite(self, bank: ClassAttentiveBank, enabled: bool) -> Tensor:
        """Scale novel vectors channel-wise by the excite scale; base vectors pass through."""
        if not enabled or bank.novel_count == 0:
            return bank.vectors
        if bank.excite_scale is None:
            raise ContractError("split_and_excite enabled but the model has no excite scale")
        parts = []
        if bank.base_count:
            parts.append(tc.gather_rows(bank.vectors, range(bank.base_count)))
        novel = tc.gather_rows(bank.vectors, range(bank.base_count, bank.base_count + bank.novel_count))
        parts.append(tc.mul(novel, bank.excite_scale))
        return tc.concat(parts, axis=0) if len(parts) > 1 else parts[0]

    def aggregate(self, query_features: Tensor, bank: ClassAttentiveBank, excited: Tensor) -> Tensor:
        """Combined features for every (region, class) pair, rows ordered region-major.

        Row ``r * C + c`` is ``[q_r * excited_c, q_r - raw_c, q_r]``.
        """
        R, C = query_features.shape[0], bank.vectors.shape[0]
        q = tc.gather_rows(query_features, np.repeat(np.arange(R), C))
        cls_idx = np.tile(np.arange(C), R)
        e = tc.gather_rows(excited, cls_idx)
        s = tc.gather_rows(bank.vectors, cls_idx)
        return tc.concat([tc.mul(q, e), tc.sub(q, s), q], axis=-1)

    def classify(self, query_features: Tensor, aggregated: Tensor) -> Tensor:
        """Logits ``[R, C + 1]``: a shared scorer per class, background last."""
        p = self.params
        R = query_features.shape[0]
        C = aggregated.shape[0] // R
        hidden = tc.relu(tc.add(tc.matmul(aggregated, p["scorer.w1"]), p["scorer.b1"]))
        fg = tc.reshape(tc.add(tc.matmul(hidden, p["scorer.w2"]), p["scorer.b2"]), (R, C))
        bg = tc.add(tc.matmul(query_features, p["bg.w"]), p["bg.b"])
        return tc.concat([fg, bg], axis=1)

    def meta_logits(self, query_features: Tensor, bank: ClassAttentiveBank, se_enabled: bool) -> Tensor:
        excited = self.split_and_excite(bank, se_enabled)
        return self.classify(query_features, self.aggregate(query_features, bank, excited))

    # --- metric branch ---------------------------------------------------

    def metric_logits(self, query_features: Tensor, class_ids: Sequence[int], background: int) -> Tensor:
        """Temperature-scaled cosine logits against the class directions, background last."""
        if "metric.directions" not in self.params:
            raise ContractError("metric head is only available after adaptation starts")
        rows = list(class_ids) + [background]
        dirs = tc.gather_rows(self.params["metric.directions"], rows)
        return tc.scale(tc.cosine_matrix(query_features, dirs), self.config.temperature)

    # --- box regression --------------------------------------------------

    def regress_box(self, query_features: Tensor) -> Tensor:
        """(dx, dy, dw, dh) per region."""
        return tc.add(tc.matmul(query_features, self.params["reg.w"]), self.params["reg.b"])

    # --- snapshots -------------------------------------------------------

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.numpy() for k, v in self.params.items()}

    @classmethod
    def from_state(cls, config: ModelConfig, state: dict[str, np.ndarray]) -> "MGML":
        missing = [k for k in BASE_PARAMS if k not in state]
        if missing:
            raise KeyError(f"checkpoint lacks parameters {missing}")
        names = [k for k in BASE_PARAMS + ADAPT_PARAMS if k in state]
        return cls(config, {k: Tensor(state[k], requires_grad=True) for k in names})


def meta_combine(query_feature: Tensor, bank: ClassAttentiveBank, excited: Tensor, class_index: int, background: int | None = None) -> Tensor:
    """``[q * excited_c, q - raw_c, q]`` for one query vector and one bank row.

    ``class_index`` indexes the bank rows; passing the background index
    is a contract error since background is scored from the raw query alone.
    """
    C = bank.vectors.shape[0]
    if (background is not None and class_index == background) or not 0 <= class_index < C:
        raise ContractError(f"meta_combine needs a foreground class, got {class_index}")
    e = tc.reshape(tc.gather_rows(excited, [class_index]), (-1,))
    s = tc.reshape(tc.gather_rows(bank.vectors, [class_index]), (-1,))
    return tc.concat([tc.mul(query_feature, e), tc.sub(query_feature, s), query_feature])


def orthogonality_loss(
    features: Tensor,
    labels: Sequence[int],
    background: int | None = None,
    normalized: bool = True,
) -> Tensor:
    """Pull same-class support features together and push classes apart.

    Over unordered pairs ``i < j`` of foreground examples: ``1 - cos`` for
    same-class pairs plus ``cos`` for cross-class pairs. With ``normalized``
    each sum is divided by its pair count. Background-labelled rows are
    skipped; fewer than two foreground rows gives exactly 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    keep = np.flatnonzero(labels != background) if background is not None else np.arange(len(labels))
    if len(keep) < 2:
        return Tensor(0.0)
    if len(keep) != len(labels):
        features = tc.gather_rows(features, keep)
    lab = labels[keep]
    cos = tc.cosine_matrix(features, features)
    upper = np.triu(np.ones((len(lab), len(lab)), dtype=bool), k=1)
    same = upper & (lab[:, None] == lab[None, :])
    diff = upper & (lab[:, None] != lab[None, :])
    n_same, n_diff = int(same.sum()), int(diff.sum())
    terms = []
    if n_same:
        pull = tc.tsum(tc.mul(cos, Tensor(same.astype(np.float64))))
        pull = tc.sub(Tensor(float(n_same)), pull)
        terms.append(tc.scale(pull, 1.0 / n_same) if normalized else pull)
    if n_diff:
        push = tc.tsum(tc.mul(cos, Tensor(diff.astype(np.float64))))
        terms.append(tc.scale(push, 1.0 / n_diff) if normalized else push)
    return terms[0] if len(terms) == 1 else tc.add(terms[0], terms[1])


def meta_loss(ce_term: Tensor, oc_term: Tensor, alpha: float) -> Tensor:
    """Cross-entropy plus ``alpha`` times the orthogonality term."""
    if alpha < 0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0:
        return ce_term
    return tc.add(ce_term, tc.scale(oc_term, alpha))


def metric_loss(query_features: Tensor, targets, model: MGML, class_ids: Sequence[int], background: int) -> Tensor:
    """Cross-entropy over cosine logits; ``targets`` index ``class_ids`` with background last."""
    logits = model.metric_logits(query_features, class_ids, background)
    return tc.softmax_cross_entropy(logits, targets)


def regression_targets(gt_boxes: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    return encode_deltas(gt_boxes, proposals)


def decode_boxes(deltas: np.ndarray, proposals: np.ndarray) -> np.ndarray:
    return apply_deltas(deltas, proposals)
