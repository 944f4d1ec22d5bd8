"""Seeded ablation runs on freshly drawn synthetic worlds."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .synthworld import WorldSpec, build_world, generate_dataset
from .training import AblationCell, TrainConfig, run_ablation, summarize


@dataclass(frozen=True)
class DeskScale:
    """Budget that keeps a 5-cell, 5-seed grid well inside 15 minutes on one core."""

    base_epochs: int = 10
    adapt_epochs: int = 12
    episodes_per_epoch: int = 60
    scenes_per_class: int = 40
    shots: int = 10
    confusability: float = 0.7
    noise_sigma: float = 0.1

    def train_config(self, **overrides) -> TrainConfig:
        kw = dict(stage="base", epochs=self.base_epochs, episodes_per_epoch=self.episodes_per_epoch, K=self.shots)
        kw.update(overrides)
        return TrainConfig(**kw)


def synthetic_ablation(
    grid: Sequence[AblationCell],
    seeds: Sequence[int] = range(5),
    scale: DeskScale = DeskScale(),
    **config_overrides,
) -> list[dict]:
    """Per seed: draw a world and dataset from that seed, then run every cell.

    Returns per-(cell, seed) rows followed by one seed-mean row per cell.
    """
    rows = []
    for seed in seeds:
        world = build_world(
            WorldSpec(confusability=scale.confusability, noise_sigma=scale.noise_sigma, rng_seed=seed)
        )
        data = generate_dataset(world, world.split, scale.scenes_per_class, scale.shots, rng_seed=seed)
        cfg = scale.train_config(**config_overrides)
        out = run_ablation(data.train, data.val, grid, cfg, [seed], adapt_epochs=scale.adapt_epochs)
        rows.extend(r for r in out if r["seed"] != "mean")
    return rows + summarize(rows)


def per_seed_curve(rows: Sequence[dict], cells: Sequence[str], key: str = "mAP_novel") -> dict[int, list[float]]:
    """seed -> metric values in ``cells`` order."""
    out: dict[int, list[float]] = {}
    for r in rows:
        if r["seed"] == "mean":
            continue
        out.setdefault(r["seed"], [np.nan] * len(cells))[cells.index(r["cell"])] = r[key]
    return out


def interior_peak(values: Sequence[float]) -> bool:
    """True when the best interior value strictly beats both endpoints."""
    v = list(values)
    return len(v) >= 3 and max(v[1:-1]) > max(v[0], v[-1])
