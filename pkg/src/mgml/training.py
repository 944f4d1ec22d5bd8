"""Two-stage episodic training: base training, then few-shot adaptation."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import arrays
from . import tensorcore as tc
from .data import (
    ClassSplit,
    Dataset,
    Episode,
    EpisodeSampler,
    InsufficientShotsError,
    assign_targets,
    generate_proposals,
    region_inputs,
    scene_region_inputs,
)
from .model import MGML, ModelConfig, metric_loss, meta_loss, orthogonality_loss, regression_targets
from .tensorcore import DimensionError, Tensor

logger = logging.getLogger(__name__)

DEFAULT_EPOCHS = {"base": 20, "adaptation": 12}


class InsufficientDataError(InsufficientShotsError):
    pass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "base"
    epochs: int = 0  # 0 -> stage default
    episodes_per_epoch: int = 20
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    alpha: float = 0.5
    lambda0: float = 2.0
    enable_meta: bool = True
    enable_metric: bool = True
    enable_se: bool = True
    enable_oc: bool = True
    N: int = 0  # 0 -> every class available to the stage
    K: int = 10
    Q: int = 12
    rng_seed: int = 0
    hidden: int = 32
    feature_dim: int = 16
    scorer_hidden: int = 32
    temperature: float = 20.0
    oc_normalized: bool = True
    n_jitter: int = 2
    n_background: int = 4
    min_support_frac: float = 0.1

    def __post_init__(self):
        if self.stage not in ("base", "adaptation"):
            raise ConfigError(f"stage: expected base or adaptation, got {self.stage!r}")
        if self.epochs == 0:
            object.__setattr__(self, "epochs", DEFAULT_EPOCHS[self.stage])
        if self.epochs < 1:
            raise ConfigError(f"epochs: must be >= 1, got {self.epochs}")
        if self.episodes_per_epoch < 1:
            raise ConfigError(f"episodes_per_epoch: must be >= 1, got {self.episodes_per_epoch}")
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate: must be > 0, got {self.learning_rate}")
        if self.alpha < 0:
            raise ConfigError(f"alpha: must be >= 0, got {self.alpha}")
        if self.Q <= self.K:
            raise ConfigError(f"Q: must exceed K ({self.K}), got {self.Q}")
        if not (self.enable_meta or self.enable_metric):
            raise ConfigError("enable_meta/enable_metric: at least one classifier branch must be on")

    # The metric branch and SE only exist during adaptation, and the meta
    # classifier is the only one available to base training.
    @property
    def use_meta(self) -> bool:
        return self.enable_meta or self.stage == "base"

    @property
    def use_metric(self) -> bool:
        return self.enable_metric and self.stage == "adaptation"

    @property
    def use_se(self) -> bool:
        return self.enable_se and self.stage == "adaptation"

    def model_config(self, input_width: int) -> ModelConfig:
        return ModelConfig(
            input_width=input_width,
            hidden=self.hidden,
            feature_dim=self.feature_dim,
            scorer_hidden=self.scorer_hidden,
            temperature=self.temperature,
            oc_normalized=self.oc_normalized,
        )

    def for_stage(self, stage: str, **overrides) -> "TrainConfig":
        """Same settings for another stage; epochs fall back to that stage's default."""
        raw = asdict(self)
        raw.update(stage=stage, epochs=0)
        raw.update(overrides)
        return TrainConfig(**raw)

    def to_text(self) -> str:
        return "".join(f"{f.name}={_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        raw: dict = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ConfigError(f"{key}: unknown config key (line {lineno})")
            raw[key] = _parse_value(key, value, known[key].type)
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**raw)

    @classmethod
    def from_file(cls, path: str | Path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), **overrides)


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key: str, value: str, typ) -> object:
    typ = typ if isinstance(typ, str) else typ.__name__
    try:
        if typ == "bool":
            low = value.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(value)
        if typ == "int":
            return int(value)
        if typ == "float":
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ}") from None


# --- optimizer -----------------------------------------------------------


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    t = state.step + 1
    new_params, m_out, v_out = {}, {}, {}
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else np.asarray(g, dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"adam: grad {g.shape} does not match param {name} {p.shape}")
        m = state.m.get(name, np.zeros_like(p))
        v = state.v.get(name, np.zeros_like(p))
        if m.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"adam: state for {name} has wrong shape")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        new_params[name] = p - lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
        m_out[name], v_out[name] = m, v
    return new_params, AdamState(t, m_out, v_out)


# --- episode losses ------------------------------------------------------


@dataclass
class EpisodeBatch:
    """Numeric inputs of one episode, independent of model parameters."""

    class_ids: tuple[int, ...]
    num_base_in_episode: int
    support_inputs: np.ndarray
    support_labels: np.ndarray
    query_inputs: np.ndarray
    query_labels: np.ndarray  # local: index into class_ids, background = len(class_ids)
    proposals: np.ndarray
    reg_targets: np.ndarray  # rows aligned with positive query regions
    positive: np.ndarray


def prepare_episode(
    episode: Episode,
    split: ClassSplit,
    payload_dim: int,
    rng: np.random.Generator,
    n_jitter: int = 2,
    n_background: int = 4,
) -> EpisodeBatch:
    classes = tuple(episode.classes)
    support_inputs = np.concatenate(
        [region_inputs(s.scene, s.box.as_array()) for s in episode.support], axis=0
    )
    support_labels = np.array([s.class_id for s in episode.support])
    label_of = {c: i for i, c in enumerate(classes)}
    q_in, q_lab, props, gts = [], [], [], []
    for scene in episode.query:
        p = generate_proposals(scene, rng, n_jitter, n_background)
        lab, gt = assign_targets(p, scene, label_of, len(classes))
        q_in.append(scene_region_inputs(scene, p, payload_dim))
        q_lab.append(lab)
        props.append(p)
        gts.append(gt)
    labels = np.concatenate(q_lab)
    proposals = np.concatenate(props)
    gt = np.concatenate(gts)
    positive = np.flatnonzero(labels < len(classes))
    targets = regression_targets(gt[positive], proposals[positive]) if len(positive) else np.zeros((0, 4))
    return EpisodeBatch(
        classes,
        sum(1 for c in classes if c < split.num_base),
        support_inputs,
        support_labels,
        np.concatenate(q_in),
        labels,
        proposals,
        targets,
        positive,
    )


def episode_losses(model: MGML, batch: EpisodeBatch, config: TrainConfig, split: ClassSplit) -> dict[str, Tensor]:
    """Every loss term for one episode; ``total`` follows the stage's recipe.

    Adaptation: total = L_meta + L_metric + L_reg (terms of disabled branches
    are omitted). Base: total = L_meta + L_reg.
    """
    support = model.encode(batch.support_inputs)
    query = model.encode(batch.query_inputs)
    out: dict[str, Tensor] = {}
    parts = []
    if config.use_meta:
        bank = model.build_support_bank(support, batch.support_labels, batch.class_ids, split.num_base)
        logits = model.meta_logits(query, bank, config.use_se)
        out["ce"] = tc.softmax_cross_entropy(logits, batch.query_labels)
        alpha = config.alpha if config.enable_oc else 0.0
        if config.enable_oc:
            out["oc"] = orthogonality_loss(support, batch.support_labels, normalized=config.oc_normalized)
        out["meta"] = meta_loss(out["ce"], out.get("oc", Tensor(0.0)), alpha)
        parts.append(out["meta"])
    if config.use_metric:
        out["metric"] = metric_loss(query, batch.query_labels, model, batch.class_ids, split.background)
        parts.append(out["metric"])
    if len(batch.positive):
        deltas = tc.gather_rows(model.regress_box(query), batch.positive)
        out["reg"] = tc.smooth_l1(deltas, batch.reg_targets)
    else:
        out["reg"] = Tensor(0.0)
    parts.append(out["reg"])
    total = parts[0]
    for p in parts[1:]:
        total = tc.add(total, p)
    out["total"] = total
    return out


# --- checkpoints ---------------------------------------------------------


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    bank: np.ndarray
    bank_class_ids: tuple[int, ...]
    config: TrainConfig
    model_config: ModelConfig
    split: ClassSplit
    stage: str
    epoch: int
    loss_log: list[float] = field(default_factory=list)

    def model(self) -> MGML:
        return MGML.from_state(self.model_config, self.params)

    def to_arrays(self) -> dict[str, np.ndarray]:
        meta = {
            "stage": self.stage,
            "epoch": self.epoch,
            "config": self.config.to_text(),
            "model_config": self.model_config.to_dict(),
            "split": self.split.to_dict(),
            "bank_class_ids": list(self.bank_class_ids),
            "loss_log": [float(x) for x in self.loss_log],
        }
        out = {k: self.params[k] for k in sorted(self.params)}
        out["bank.vectors"] = self.bank
        out["__meta__"] = arrays.encode_text(json.dumps(meta, sort_keys=True))
        return out

    @classmethod
    def from_arrays(cls, blob: dict[str, np.ndarray]) -> "Checkpoint":
        if "__meta__" not in blob:
            raise arrays.ArrayFileError("not a checkpoint: missing __meta__")
        meta = json.loads(arrays.decode_text(blob["__meta__"]))
        params = {k: v for k, v in blob.items() if k not in ("__meta__", "bank.vectors")}
        return cls(
            params=params,
            bank=blob["bank.vectors"],
            bank_class_ids=tuple(meta["bank_class_ids"]),
            config=TrainConfig.from_text(meta["config"]),
            model_config=ModelConfig(**meta["model_config"]),
            split=ClassSplit.from_dict(meta["split"]),
            stage=meta["stage"],
            epoch=int(meta["epoch"]),
            loss_log=list(meta["loss_log"]),
        )

    def save(self, path: str | Path) -> None:
        arrays.save(path, self.to_arrays())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        return cls.from_arrays(arrays.load(path))


# --- training loops ------------------------------------------------------


def _stage_classes(split: ClassSplit, stage: str) -> list[int]:
    return list(split.base_ids) if stage == "base" else list(range(split.num_classes))


def _check_coverage(dataset: Dataset, classes: Iterable[int], K: int, min_frac: float, err=InsufficientShotsError):
    for c in classes:
        usable = 0
        for si, oi in dataset.instances[c]:
            s = dataset.scenes[si]
            b = s.objects[oi].box
            if b.width >= min_frac * s.width and b.height >= min_frac * s.height:
                usable += 1
        if usable < K:
            raise err(f"class {dataset.split.classes[c]!r} has {usable} usable instances, need K={K}")


def support_inputs_for_bank(
    dataset: Dataset, classes: Sequence[int], K: int, seed: int, min_frac: float
) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic K-shot support draw over ``classes`` (used for inference banks)."""
    rng = np.random.default_rng(seed)
    xs, labels = [], []
    for c in classes:
        pool = [
            (si, oi)
            for si, oi in dataset.instances[c]
            if dataset.scenes[si].objects[oi].box.width >= min_frac * dataset.scenes[si].width
            and dataset.scenes[si].objects[oi].box.height >= min_frac * dataset.scenes[si].height
        ]
        if len(pool) < K:
            raise InsufficientShotsError(f"class {dataset.split.classes[c]!r}: {len(pool)} usable instances < K={K}")
        for j in sorted(rng.choice(len(pool), size=K, replace=False)):
            si, oi = pool[j]
            scene = dataset.scenes[si]
            xs.append(region_inputs(scene, scene.objects[oi].box.as_array()))
            labels.append(c)
    return np.concatenate(xs), np.array(labels)


def compute_bank(model: MGML, dataset: Dataset, classes: Sequence[int], config: TrainConfig, seed: int) -> np.ndarray:
    x, labels = support_inputs_for_bank(dataset, classes, config.K, seed, config.min_support_frac)
    feats = model.encode(x)
    bank = model.build_support_bank(feats, labels, classes, dataset.split.num_base)
    return bank.vectors.numpy()


def _run_episodes(model: MGML, dataset: Dataset, config: TrainConfig, n_way: int, on_step=None) -> list[float]:
    split = dataset.split
    sampler = EpisodeSampler(
        dataset, n_way, config.K, config.Q, config.stage, seed=config.rng_seed, min_size_frac=config.min_support_frac
    )
    rng = np.random.default_rng([config.rng_seed, 1])
    state = AdamState()
    names = sorted(model.params)
    log = []
    for epoch in range(config.epochs):
        total = 0.0
        for _ in range(config.episodes_per_epoch):
            batch = prepare_episode(
                sampler.sample(), split, dataset.payload_dim, rng, config.n_jitter, config.n_background
            )
            for p in model.params.values():
                p.zero_grad()
            losses = episode_losses(model, batch, config, split)
            losses["total"].backward()
            if on_step is not None:
                on_step(losses, model)
            params = {k: model.params[k].numpy() for k in names}
            grads = {k: model.params[k].grad for k in names if model.params[k].grad is not None}
            params, state = adam_step(
                params, grads, state, config.learning_rate, config.adam_beta1, config.adam_beta2, config.adam_eps
            )
            for k in names:
                model.params[k].assign(params[k])
            total += losses["total"].item()
        log.append(total / config.episodes_per_epoch)
        logger.info("%s epoch %d/%d loss %.5f", config.stage, epoch + 1, config.epochs, log[-1])
    return log


def initial_checkpoint(dataset: Dataset, config: TrainConfig) -> Checkpoint:
    """An untrained base-stage checkpoint (fresh weights, bank from K shots)."""
    split = dataset.split
    model = MGML.initialize(config.model_config(dataset.input_width), config.rng_seed)
    classes = _stage_classes(split, "base")
    bank = compute_bank(model, dataset, classes, config, config.rng_seed)
    return Checkpoint(model.state(), bank, tuple(classes), config, model.config, split, "base", 0, [])


def train_base(dataset: Dataset, split: ClassSplit, config: TrainConfig, on_step=None) -> Checkpoint:
    """Episodic base training on base classes with L_meta (+ OC if enabled) + L_reg."""
    if config.stage != "base":
        raise ConfigError(f"stage: train_base needs stage=base, got {config.stage}")
    if dataset.split != split:
        raise ValueError(f"dataset split {dataset.split.name} != {split.name}")
    classes = _stage_classes(split, "base")
    _check_coverage(dataset, classes, config.K, config.min_support_frac, InsufficientDataError)
    model = MGML.initialize(config.model_config(dataset.input_width), config.rng_seed)
    n_way = config.N or len(classes)
    log = _run_episodes(model, dataset, config, n_way, on_step)
    bank = compute_bank(model, dataset, classes, config, config.rng_seed)
    return Checkpoint(model.state(), bank, tuple(classes), config, model.config, split, "base", config.epochs, log)


def few_shot_subset(dataset: Dataset, K: int, seed: int) -> Dataset:
    """Scenes holding at least K instances of every class (novel classes first)."""
    split = dataset.split
    rng = np.random.default_rng([seed, 2])
    chosen: list[int] = []
    counts = np.zeros(split.num_classes, dtype=int)
    for c in list(split.novel_ids) + list(split.base_ids):
        order = rng.permutation(dataset.scenes_by_class[c])
        for si in order:
            if counts[c] >= K:
                break
            if si in chosen:
                continue
            chosen.append(int(si))
            for o in dataset.scenes[si].objects:
                counts[o.class_id] += 1
    return dataset.subset(sorted(chosen))


def _background_direction(model: MGML, dataset: Dataset, config: TrainConfig) -> np.ndarray:
    rng = np.random.default_rng([config.rng_seed, 3])
    feats = []
    for scene in dataset.scenes[: max(1, config.Q)]:
        p = generate_proposals(scene, rng, 0, config.n_background)
        x = scene_region_inputs(scene, p, dataset.payload_dim)
        feats.append(model.encode(x).numpy())
    f = np.concatenate(feats)
    d = f.mean(axis=0)
    if np.linalg.norm(d) < 1e-8:
        d = np.full(f.shape[1], 1.0 / np.sqrt(f.shape[1]))
    return d


def prepare_adaptation(base_ckpt: Checkpoint, dataset: Dataset, config: TrainConfig) -> tuple[MGML, Dataset]:
    """Fresh excite scale and warm-started metric directions on the K-shot subset."""
    split = dataset.split
    for c in split.novel_ids:
        if not dataset.instances[c]:
            raise InsufficientShotsError(f"novel class {split.classes[c]!r} is missing from the dataset")
    _check_coverage(dataset, range(split.num_classes), config.K, config.min_support_frac)
    subset = few_shot_subset(dataset, config.K, config.rng_seed)
    model = base_ckpt.model()
    classes = list(range(split.num_classes))
    bank = compute_bank(model, subset, classes, config, config.rng_seed)
    directions = np.vstack([bank, _background_direction(model, subset, config)])
    model.add_adaptation_params(config.lambda0, directions)
    return model, subset


def adapt_few_shot(base_ckpt: Checkpoint, dataset: Dataset, split: ClassSplit, config: TrainConfig, on_step=None) -> Checkpoint:
    """Few-shot adaptation on K-shot data from base and novel classes."""
    if config.stage != "adaptation":
        raise ConfigError(f"stage: adapt_few_shot needs stage=adaptation, got {config.stage}")
    if base_ckpt.stage != "base":
        raise ConfigError(f"adaptation must start from a base checkpoint, got stage {base_ckpt.stage}")
    if base_ckpt.split != split or dataset.split != split:
        raise ValueError("split mismatch between base checkpoint, dataset and requested split")
    model, subset = prepare_adaptation(base_ckpt, dataset, config)
    n_way = config.N or split.num_classes
    log = _run_episodes(model, subset, config, n_way, on_step)
    classes = list(range(split.num_classes))
    bank = compute_bank(model, subset, classes, config, config.rng_seed)
    return Checkpoint(model.state(), bank, tuple(classes), config, model.config, split, "adaptation", config.epochs, log)


# --- ablations -----------------------------------------------------------

ABLATION_COLUMNS = ("cell", "seed", "meta", "metric", "se", "oc", "lambda0", "alpha", "mAP_base", "mAP_novel", "mean_confusion")


@dataclass(frozen=True)
class AblationCell:
    name: str
    meta: bool = True
    metric: bool = True
    se: bool = True
    oc: bool = True
    lambda0: float | None = None
    alpha: float | None = None

    def overrides(self) -> dict:
        out = dict(enable_meta=self.meta, enable_metric=self.metric, enable_se=self.se, enable_oc=self.oc)
        if self.lambda0 is not None:
            out["lambda0"] = self.lambda0
        if self.alpha is not None:
            out["alpha"] = self.alpha
        return out


COMPONENT_GRID = (
    AblationCell("metric-only", meta=False, metric=True, se=False, oc=False),
    AblationCell("meta+metric", se=False, oc=False),
    AblationCell("meta+metric+SE", se=True, oc=False),
    AblationCell("meta+metric+OC", se=False, oc=True),
    AblationCell("meta+metric+SE+OC"),
)


def lambda_grid(values: Sequence[float] = (1.0, 1.5, 2.0, 2.5)) -> tuple[AblationCell, ...]:
    return tuple(AblationCell(f"lambda={v:g}", se=True, oc=False, lambda0=v, alpha=0.0) for v in values)


def alpha_grid(values: Sequence[float] = (0.0, 0.05, 0.1, 0.5, 1.0, 2.0)) -> tuple[AblationCell, ...]:
    return tuple(AblationCell(f"alpha={v:g}", se=True, oc=v > 0, alpha=v) for v in values)


def run_cell(
    cell: AblationCell,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    seed: int,
    base_cache: dict | None = None,
    adapt_epochs: int | None = None,
) -> dict:
    """Base-train, adapt and evaluate one grid cell for one seed."""
    from .evaluation import evaluate
    from .inference import detect

    split = train.split
    ov = cell.overrides()
    base_cfg = config.for_stage("base", epochs=config.epochs, rng_seed=seed, **ov)
    key = (base_cfg.enable_oc, base_cfg.alpha if base_cfg.enable_oc else None, seed)
    if base_cache is not None and key in base_cache:
        base = base_cache[key]
    else:
        # only the OC switch and alpha reach base training; other switches are adaptation-only
        base = train_base(train, split, base_cfg)
        if base_cache is not None:
            base_cache[key] = base
    ad_cfg = config.for_stage("adaptation", rng_seed=seed, **ov)
    if adapt_epochs is not None:
        ad_cfg = replace(ad_cfg, epochs=adapt_epochs)
    ckpt = adapt_few_shot(base, train, split, ad_cfg)
    report = evaluate(detect(ckpt, val, seed=seed), val, split)
    return {
        "cell": cell.name,
        "seed": seed,
        "meta": int(cell.meta),
        "metric": int(cell.metric),
        "se": int(cell.se),
        "oc": int(cell.oc),
        "lambda0": ad_cfg.lambda0,
        "alpha": ad_cfg.alpha,
        "mAP_base": report.mAP_base,
        "mAP_novel": report.mAP_novel,
        "mean_confusion": report.mean_confusion,
    }


def run_ablation(
    train: Dataset,
    val: Dataset,
    grid: Sequence[AblationCell],
    config: TrainConfig,
    seeds: Sequence[int],
    adapt_epochs: int | None = None,
) -> list[dict]:
    """One row per (cell, seed), then one seed-mean summary row per cell."""
    if not grid:
        raise ValueError("ablation grid is empty")
    rows = []
    cache: dict = {}
    for seed in seeds:
        for cell in grid:
            rows.append(run_cell(cell, train, val, config, seed, cache, adapt_epochs))
    return rows + summarize(rows)


def summarize(rows: Sequence[dict]) -> list[dict]:
    out = []
    for name in dict.fromkeys(r["cell"] for r in rows if r["seed"] != "mean"):
        group = [r for r in rows if r["cell"] == name and r["seed"] != "mean"]
        s = dict(group[0], seed="mean")
        for k in ("mAP_base", "mAP_novel", "mean_confusion"):
            vals = [r[k] for r in group if r[k] is not None]
            s[k] = float(np.mean(vals)) if vals else None
        out.append(s)
    return out
