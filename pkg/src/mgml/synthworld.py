"""Synthetic detection worlds with tunable novel/base class similarity.

Objects are flat intensity patches. Every class owns a disjoint block of
pixels, so base templates are exactly orthogonal; novel templates are then
mixed toward a paired base template to make them confusable.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .boxes import Box, iou_matrix
from .data import AnnotatedObject, ClassSplit, Dataset, Scene


class WorldError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldSpec:
    num_base: int = 6
    num_novel: int = 3
    patch_dim: int = 8
    confusability: float = 0.7
    noise_sigma: float = 0.1
    scene_extent: tuple[float, float] = (100.0, 100.0)
    objects_per_scene: tuple[int, int] = (1, 3)
    object_size: tuple[float, float] = (0.15, 0.35)
    rng_seed: int = 0

    def validate(self) -> None:
        if self.num_base < 2:
            raise WorldError(f"num_base must be >= 2, got {self.num_base}")
        if self.num_novel < 1:
            raise WorldError(f"num_novel must be >= 1, got {self.num_novel}")
        if not 0.0 <= self.confusability < 1.0:
            raise WorldError(f"confusability must lie in [0, 1), got {self.confusability}")
        if self.noise_sigma < 0:
            raise WorldError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        lo, hi = self.objects_per_scene
        if not 1 <= lo <= hi:
            raise WorldError(f"bad objects_per_scene range {self.objects_per_scene}")
        slo, shi = self.object_size
        if not 0 < slo <= shi < 1:
            raise WorldError(f"bad object_size range {self.object_size}")


@dataclass(frozen=True)
class ClassPrototype:
    class_id: int
    template: np.ndarray


class World(NamedTuple):
    spec: WorldSpec
    prototypes: list[ClassPrototype]
    split: ClassSplit
    pairing: dict[int, int]  # novel class id -> paired base class id


class GeneratedData(NamedTuple):
    train: Dataset
    val: Dataset


def world_split(spec: WorldSpec) -> ClassSplit:
    return ClassSplit(
        f"synth-{spec.num_base}b{spec.num_novel}n",
        tuple(f"base{i}" for i in range(spec.num_base)),
        tuple(f"novel{i}" for i in range(spec.num_novel)),
    )


def build_world(spec: WorldSpec) -> World:
    """Draw class templates.

    Base templates are positive intensities on disjoint pixel blocks. Novel
    template i is ``normalize((1 - c) * fresh + c * paired_base)`` with
    ``c = confusability``; because all base templates are equidistant from
    a fresh draw, the pairing is a seeded draw.
    """
    spec.validate()
    npix = spec.patch_dim**2
    nclass = spec.num_base + spec.num_novel
    if npix < nclass:
        raise WorldError(
            f"cannot orthogonalize {nclass} templates in {npix} pixels; increase patch_dim"
        )
    rng = np.random.default_rng(spec.rng_seed)
    blocks = np.array_split(rng.permutation(npix), nclass)

    def block_template(block):
        t = np.zeros(npix)
        t[block] = rng.uniform(0.5, 1.0, size=len(block))
        return t / np.linalg.norm(t)

    base = [block_template(blocks[i]) for i in range(spec.num_base)]
    c = spec.confusability
    protos = [ClassPrototype(i, t) for i, t in enumerate(base)]
    pairing = {}
    for j in range(spec.num_novel):
        fresh = block_template(blocks[spec.num_base + j])
        sims = np.array([fresh @ b for b in base])
        ties = np.flatnonzero(sims == sims.max())
        partner = int(ties[rng.integers(len(ties))])
        mixed = (1.0 - c) * fresh + c * base[partner]
        cid = spec.num_base + j
        protos.append(ClassPrototype(cid, mixed / np.linalg.norm(mixed)))
        pairing[cid] = partner
    return World(spec, protos, world_split(spec), pairing)


def _instance_patch(template: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma == 0:
        return template.copy()
    return np.clip(template + rng.normal(0.0, sigma, size=template.shape), 0.0, 1.0)


def _place_boxes(spec: WorldSpec, count: int, rng: np.random.Generator, max_iou: float = 0.3) -> list[Box]:
    W, H = spec.scene_extent
    lo, hi = spec.object_size
    boxes: list[Box] = []
    for _ in range(count):
        for _attempt in range(200):
            w, h = rng.uniform(lo, hi) * W, rng.uniform(lo, hi) * H
            x1, y1 = rng.uniform(0, W - w), rng.uniform(0, H - h)
            cand = Box(x1, y1, x1 + w, y1 + h)
            if not boxes or iou_matrix(cand.as_array(), np.array([b.as_list() for b in boxes])).max() <= max_iou:
                boxes.append(cand)
                break
        else:
            raise PlacementError(
                f"could not place {count} objects in a {W}x{H} scene without overlap; use a larger scene_extent"
            )
    return boxes


def _make_scene(scene_id, class_ids, world: World, rng) -> Scene:
    spec = world.spec
    boxes = _place_boxes(spec, len(class_ids), rng)
    objects = tuple(AnnotatedObject(int(c), b) for c, b in zip(class_ids, boxes))
    payload = {
        i: _instance_patch(world.prototypes[c].template, spec.noise_sigma, rng) for i, c in enumerate(class_ids)
    }
    W, H = spec.scene_extent
    return Scene(scene_id, float(W), float(H), objects, payload, "patch")


def generate_dataset(
    world: World,
    split: ClassSplit,
    scenes_per_class_base: int,
    shots_per_novel: int,
    rng_seed: int,
    val_fraction: float = 0.2,
) -> GeneratedData:
    """Sample train/val scenes from ``world``.

    Base data is abundant and split 80/20 by scene. Each novel class gets
    exactly ``shots_per_novel`` train instances (one per scene, alongside
    base objects); val keeps abundant novel instances so novel mAP is a
    stable statistic.
    """
    if scenes_per_class_base < 1 or shots_per_novel < 1:
        raise ValueError("scenes_per_class_base and shots_per_novel must be positive")
    if split != world.split:
        raise ValueError(f"split {split.name} does not match the world's split {world.split.name}")
    spec = world.spec
    rng = np.random.default_rng(rng_seed)
    lo, hi = spec.objects_per_scene
    base_ids = list(split.base_ids)

    # every base class leads scenes_per_class_base scenes
    leaders = [c for c in base_ids for _ in range(scenes_per_class_base)]
    leaders = [leaders[i] for i in rng.permutation(len(leaders))]
    base_scenes = []
    for n, lead in enumerate(leaders):
        count = int(rng.integers(lo, hi + 1))
        extra = rng.choice(base_ids, size=count - 1).tolist() if count > 1 else []
        base_scenes.append(_make_scene(f"b{n:05d}", [lead] + extra, world, rng))
    n_val = int(round(val_fraction * len(base_scenes)))
    order = rng.permutation(len(base_scenes))
    val_idx, train_idx = sorted(order[:n_val]), sorted(order[n_val:])

    def with_base_fill(cid):
        count = int(rng.integers(lo, hi + 1))
        extra = rng.choice(base_ids, size=count - 1).tolist() if count > 1 else []
        return [cid] + extra

    train = [base_scenes[i] for i in train_idx]
    for cid in split.novel_ids:
        for k in range(shots_per_novel):
            train.append(_make_scene(f"n{cid}-t{k:03d}", with_base_fill(cid), world, rng))
    val = [base_scenes[i] for i in val_idx]
    n_novel_val = max(shots_per_novel, int(round(val_fraction * scenes_per_class_base)))
    for cid in split.novel_ids:
        for k in range(n_novel_val):
            val.append(_make_scene(f"n{cid}-v{k:03d}", with_base_fill(cid), world, rng))
    return GeneratedData(Dataset(split, tuple(train)), Dataset(split, tuple(val)))
