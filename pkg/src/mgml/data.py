"""Scenes, class splits, annotation files and episodic sampling."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import arrays
from .boxes import Box, BoxError, iou_matrix

logger = logging.getLogger(__name__)

STAGES = ("base", "adaptation")
GEOMETRY_WIDTH = 4


class AnnotationParseError(ValueError):
    pass


class AnnotationValidationError(ValueError):
    pass


class InsufficientShotsError(ValueError):
    pass


@dataclass(frozen=True)
class AnnotatedObject:
    class_id: int
    box: Box


@dataclass(frozen=True, eq=False)
class Scene:
    """One annotated scene.

    ``payload`` maps object index to that object's patch (synthetic world)
    or precomputed feature vector (ingested data); ``None`` when absent.
    """

    scene_id: str
    width: float
    height: float
    objects: tuple[AnnotatedObject, ...]
    payload: dict[int, np.ndarray] | None = None
    payload_kind: str | None = None

    def __eq__(self, other):
        if not isinstance(other, Scene):
            return NotImplemented
        if (self.scene_id, self.width, self.height, self.objects, self.payload_kind) != (
            other.scene_id,
            other.width,
            other.height,
            other.objects,
            other.payload_kind,
        ):
            return False
        if (self.payload is None) != (other.payload is None):
            return False
        if self.payload is None:
            return True
        return self.payload.keys() == other.payload.keys() and all(
            np.array_equal(self.payload[k], other.payload[k]) for k in self.payload
        )

    __hash__ = object.__hash__

    @cached_property
    def box_array(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, 4))
        return np.array([o.box.as_list() for o in self.objects])

    @cached_property
    def payload_matrix(self) -> np.ndarray:
        if self.payload is None:
            raise AnnotationValidationError(f"scene {self.scene_id} has no payload")
        if not self.objects:
            return np.zeros((0, 0))
        return np.stack([self.payload[i] for i in range(len(self.objects))])

    def class_ids(self) -> set[int]:
        return {o.class_id for o in self.objects}


@dataclass(frozen=True)
class ClassSplit:
    """Ordered base and novel class names.

    Class indices run base-first, then novel; the background index is
    ``num_classes`` (one past the last foreground class).
    """

    name: str
    base_classes: tuple[str, ...]
    novel_classes: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "base_classes", tuple(self.base_classes))
        object.__setattr__(self, "novel_classes", tuple(self.novel_classes))
        if not self.base_classes or not self.novel_classes:
            raise ValueError(f"split {self.name}: base and novel lists must be non-empty")
        if set(self.base_classes) & set(self.novel_classes):
            raise ValueError(f"split {self.name}: base and novel classes overlap")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"split {self.name}: duplicate class names")

    @property
    def classes(self) -> tuple[str, ...]:
        return self.base_classes + self.novel_classes

    @property
    def num_base(self) -> int:
        return len(self.base_classes)

    @property
    def num_novel(self) -> int:
        return len(self.novel_classes)

    @property
    def num_classes(self) -> int:
        return self.num_base + self.num_novel

    @property
    def background(self) -> int:
        return self.num_classes

    @property
    def base_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_base))

    @property
    def novel_ids(self) -> tuple[int, ...]:
        return tuple(range(self.num_base, self.num_classes))

    def index_of(self, name: str) -> int:
        return self.classes.index(name)

    def is_novel(self, class_id: int) -> bool:
        return self.num_base <= class_id < self.num_classes

    def to_dict(self) -> dict:
        return {"name": self.name, "base": list(self.base_classes), "novel": list(self.novel_classes)}

    @classmethod
    def from_dict(cls, d: dict) -> "ClassSplit":
        return cls(d["name"], tuple(d["base"]), tuple(d["novel"]))


_IDD10 = (
    "person", "rider", "car", "truck", "bus",
    "motorcycle", "bicycle", "autorickshaw", "animal", "traffic light",
)
_VOC = (
    "aeroplane", "bicycle", "bird", "boat", "bottle", "bus", "car", "cat", "chair", "cow",
    "diningtable", "dog", "horse", "motorbike", "person", "pottedplant", "sheep", "sofa",
    "train", "tvmonitor",
)


def _split(name: str, universe: Sequence[str], novel: Sequence[str]) -> ClassSplit:
    base = tuple(c for c in universe if c not in novel)
    return ClassSplit(name, base, tuple(novel))


def builtin_splits() -> list[ClassSplit]:
    """The six few-shot splits: two IDD-10 splits, IDD-OS and three VOC splits."""
    return [
        _split("IDD-10-split1", _IDD10, ("bicycle", "bus", "truck")),
        _split("IDD-10-split2", _IDD10, ("autorickshaw", "motorcycle", "truck")),
        ClassSplit("IDD-OS", _IDD10, ("street cart", "tractor", "water tanker", "excavator")),
        _split("VOC-split1", _VOC, ("bird", "bus", "cow", "motorbike", "sofa")),
        _split("VOC-split2", _VOC, ("aeroplane", "bottle", "cow", "horse", "sofa")),
        _split("VOC-split3", _VOC, ("boat", "cat", "motorbike", "sheep", "sofa")),
    ]


def get_split(name_or_path: str) -> ClassSplit:
    """Look up a builtin split by name, or read a split JSON file."""
    for s in builtin_splits():
        if s.name == name_or_path:
            return s
    path = Path(name_or_path)
    if path.is_file():
        return ClassSplit.from_dict(json.loads(path.read_text(encoding="utf-8")))
    names = ", ".join(s.name for s in builtin_splits())
    raise KeyError(f"unknown split {name_or_path!r} (builtin: {names})")


@dataclass(frozen=True, eq=False)
class Dataset:
    split: ClassSplit
    scenes: tuple[Scene, ...]
    dropped: int = 0

    def __len__(self) -> int:
        return len(self.scenes)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.split == other.split and self.scenes == other.scenes

    __hash__ = object.__hash__

    @cached_property
    def instances(self) -> dict[int, list[tuple[int, int]]]:
        """class id -> [(scene index, object index)] in file order."""
        out: dict[int, list[tuple[int, int]]] = {c: [] for c in range(self.split.num_classes)}
        for si, scene in enumerate(self.scenes):
            for oi, obj in enumerate(scene.objects):
                out[obj.class_id].append((si, oi))
        return out

    @cached_property
    def scenes_by_class(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {c: [] for c in range(self.split.num_classes)}
        for si, scene in enumerate(self.scenes):
            for c in sorted(scene.class_ids()):
                out[c].append(si)
        return out

    @cached_property
    def payload_dim(self) -> int:
        for scene in self.scenes:
            if scene.payload:
                return len(next(iter(scene.payload.values())))
        raise AnnotationValidationError("dataset carries no object payloads")

    @property
    def input_width(self) -> int:
        return self.payload_dim + GEOMETRY_WIDTH

    def subset(self, scene_indices: Iterable[int]) -> "Dataset":
        return Dataset(self.split, tuple(self.scenes[i] for i in scene_indices), self.dropped)


# --- annotation files ----------------------------------------------------


def _parse_scene(rec: dict, split: ClassSplit, lineno: int) -> tuple[Scene, int]:
    try:
        scene_id = str(rec["scene_id"])
        width, height = float(rec["width"]), float(rec["height"])
        raw_objects = rec.get("objects", [])
        features = rec.get("features")
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationParseError(f"line {lineno}: missing or invalid field ({exc})") from None
    objects = []
    payload: dict[int, np.ndarray] | None = {} if features is not None else None
    dropped = 0
    for idx, o in enumerate(raw_objects):
        try:
            name = o["class"]
            coords = o["bbox"]
        except (KeyError, TypeError):
            raise AnnotationParseError(f"line {lineno}: object {idx} needs 'class' and 'bbox'") from None
        try:
            box = Box.from_seq(coords)
        except (BoxError, TypeError, ValueError) as exc:
            raise AnnotationValidationError(f"scene {scene_id}: object {idx}: {exc}") from None
        if not box.within(width, height):
            raise AnnotationValidationError(f"scene {scene_id}: object {idx} box {coords} outside extent")
        if name not in split.classes:
            dropped += 1
            continue
        if payload is not None:
            vec = features.get(str(idx))
            if vec is None:
                raise AnnotationValidationError(f"scene {scene_id}: no feature vector for object {idx}")
            payload[len(objects)] = np.asarray(vec, dtype=np.float64)
        objects.append(AnnotatedObject(split.index_of(name), box))
    scene = Scene(scene_id, width, height, tuple(objects), payload, "feature" if payload is not None else None)
    return scene, dropped


def load_annotations(path: str | Path, split: ClassSplit, sidecar: str | Path | None = None) -> Dataset:
    """Parse a JSON-lines annotation file against ``split``.

    Objects whose class is not in the split are dropped (and counted).
    Patch payloads are read from ``sidecar`` or, when omitted, from a
    ``<path>.patches`` file next to the annotations if one exists.
    """
    path = Path(path)
    scenes: list[Scene] = []
    dropped = 0
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise AnnotationParseError(f"{path}: line {lineno}: {exc.msg}") from None
            if not isinstance(rec, dict):
                raise AnnotationParseError(f"{path}: line {lineno}: expected a JSON object")
            scene, n = _parse_scene(rec, split, lineno)
            scenes.append(scene)
            dropped += n
    if dropped:
        logger.warning("%s: dropped %d objects with classes outside split %s", path, dropped, split.name)
    sidecar = Path(sidecar) if sidecar is not None else patch_sidecar_path(path)
    if sidecar.exists():
        scenes = _attach_patches(scenes, arrays.load(sidecar))
    return Dataset(split, tuple(scenes), dropped)


def patch_sidecar_path(annotation_path: str | Path) -> Path:
    p = Path(annotation_path)
    return p.with_name(p.name + ".patches")


def _attach_patches(scenes: list[Scene], blob: dict[str, np.ndarray]) -> list[Scene]:
    out = []
    for s in scenes:
        if s.payload_kind == "feature":
            out.append(s)
            continue
        payload = {}
        for i in range(len(s.objects)):
            key = f"patch/{s.scene_id}/{i}"
            if key not in blob:
                raise AnnotationValidationError(f"scene {s.scene_id}: sidecar lacks {key}")
            payload[i] = blob[key]
        out.append(Scene(s.scene_id, s.width, s.height, s.objects, payload, "patch"))
    return out


def scene_to_record(scene: Scene, split: ClassSplit) -> dict:
    rec = {
        "scene_id": scene.scene_id,
        "width": scene.width,
        "height": scene.height,
        "objects": [{"class": split.classes[o.class_id], "bbox": o.box.as_list()} for o in scene.objects],
    }
    if scene.payload_kind == "feature":
        rec["features"] = {str(i): scene.payload[i].tolist() for i in range(len(scene.objects))}
    return rec


def save_annotations(dataset: Dataset, path: str | Path) -> list[Path]:
    """Write ``dataset`` as JSON-lines; patch payloads go to the sidecar file.

    Returns the paths written.
    """
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for scene in dataset.scenes:
            fh.write(json.dumps(scene_to_record(scene, dataset.split), sort_keys=True) + "\n")
    written = [path]
    patches = {
        f"patch/{s.scene_id}/{i}": s.payload[i]
        for s in dataset.scenes
        if s.payload_kind == "patch"
        for i in range(len(s.objects))
    }
    if patches:
        arrays.save(patch_sidecar_path(path), patches)
        written.append(patch_sidecar_path(path))
    return written


# --- region inputs and proposals ----------------------------------------


def region_inputs(scene: Scene, boxes: np.ndarray) -> np.ndarray:
    """Backbone inputs for proposal boxes in ``scene``.

    Each row is the IoU-weighted sum of object payloads overlapping the
    box, followed by the dominant object's edge offsets in box-normalised
    units (scaled by the same IoU). Empty regions map to zeros.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if not scene.objects:
        raise AnnotationValidationError(f"scene {scene.scene_id} has no objects to describe regions")
    payload = scene.payload_matrix
    w = iou_matrix(boxes, scene.box_array)
    content = w @ payload
    dom = np.argmax(w, axis=1)
    wd = w[np.arange(n), dom]
    obj = scene.box_array[dom]
    bw = (boxes[:, 2] - boxes[:, 0])[:, None]
    bh = (boxes[:, 3] - boxes[:, 1])[:, None]
    offsets = (obj - boxes) / np.concatenate([bw, bh, bw, bh], axis=1)
    geometry = wd[:, None] * offsets
    return np.concatenate([content, geometry], axis=1)


def empty_region_inputs(n: int, payload_dim: int) -> np.ndarray:
    return np.zeros((n, payload_dim + GEOMETRY_WIDTH))


def scene_region_inputs(scene: Scene, boxes: np.ndarray, payload_dim: int) -> np.ndarray:
    if not scene.objects:
        return empty_region_inputs(len(np.reshape(boxes, (-1, 4))), payload_dim)
    return region_inputs(scene, boxes)


def generate_proposals(
    scene: Scene,
    rng: np.random.Generator,
    n_jitter: int = 2,
    n_background: int = 4,
    jitter: float = 0.15,
) -> np.ndarray:
    """Desk-scale stand-in for a region proposal network.

    Returns every ground-truth box, ``n_jitter`` perturbed copies of each,
    and ``n_background`` random boxes sized like typical objects.
    """
    out = []
    W, H = scene.width, scene.height
    for obj in scene.objects:
        b = obj.box
        out.append(b.as_list())
        for _ in range(n_jitter):
            cx = (b.x1 + b.x2) / 2 + rng.normal(0, jitter) * b.width
            cy = (b.y1 + b.y2) / 2 + rng.normal(0, jitter) * b.height
            w = b.width * float(np.exp(rng.normal(0, jitter)))
            h = b.height * float(np.exp(rng.normal(0, jitter)))
            out.append(_clip_box(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2, W, H))
    lo, hi = 0.1, 0.35
    for _ in range(n_background):
        w = rng.uniform(lo, hi) * W
        h = rng.uniform(lo, hi) * H
        x1 = rng.uniform(0, W - w)
        y1 = rng.uniform(0, H - h)
        out.append([x1, y1, x1 + w, y1 + h])
    return np.array(out, dtype=np.float64)


def _clip_box(x1, y1, x2, y2, W, H, min_side=1e-3):
    x1, x2 = max(0.0, x1), min(W, x2)
    y1, y2 = max(0.0, y1), min(H, y2)
    if x2 - x1 < min_side:
        x2 = min(W, x1 + min_side)
        x1 = x2 - min_side
    if y2 - y1 < min_side:
        y2 = min(H, y1 + min_side)
        y1 = y2 - min_side
    return [x1, y1, x2, y2]


def assign_targets(
    proposals: np.ndarray,
    scene: Scene,
    label_of: dict[int, int],
    background: int,
    fg_iou: float = 0.5,
) -> tuple[np.ndarray, np.ndarray]:
    """Label each proposal with the class of its best-IoU ground truth.

    Proposals below ``fg_iou`` (or whose best match has a class missing from
    ``label_of``) get ``background``. Returns (labels, matched gt boxes);
    gt rows are only meaningful for foreground labels.
    """
    n = len(proposals)
    labels = np.full(n, background, dtype=np.int64)
    gt = np.zeros((n, 4))
    if not scene.objects:
        return labels, gt
    w = iou_matrix(proposals, scene.box_array)
    best = np.argmax(w, axis=1)
    for i in range(n):
        obj = scene.objects[best[i]]
        if w[i, best[i]] >= fg_iou and obj.class_id in label_of:
            labels[i] = label_of[obj.class_id]
            gt[i] = obj.box.as_list()
    return labels, gt


# --- episodes ------------------------------------------------------------


@dataclass(frozen=True)
class SupportRegion:
    scene: Scene
    object_index: int
    class_id: int

    @property
    def box(self) -> Box:
        return self.scene.objects[self.object_index].box


@dataclass(frozen=True)
class Episode:
    stage: str
    classes: tuple[int, ...]
    shots: int
    support: tuple[SupportRegion, ...]
    query: tuple[Scene, ...]

    def support_keys(self) -> list[tuple[str, int, int]]:
        return [(s.scene.scene_id, s.object_index, s.class_id) for s in self.support]


def _large_enough(scene: Scene, box: Box, min_frac: float) -> bool:
    return box.width >= min_frac * scene.width and box.height >= min_frac * scene.height


@dataclass
class EpisodeSampler:
    """Draws N-way K-shot episodes; owns its RNG and is not shareable."""

    dataset: Dataset
    n_way: int
    shots: int
    queries: int
    stage: str
    seed: int = 0
    min_size_frac: float = 0.1
    rng: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.queries <= self.shots:
            raise ValueError(f"need Q > K, got Q={self.queries}, K={self.shots}")
        split = self.dataset.split
        pool = split.num_base if self.stage == "base" else split.num_classes
        if not 1 <= self.n_way <= pool:
            raise ValueError(f"N={self.n_way} outside 1..{pool} for the {self.stage} stage")
        self.rng = np.random.default_rng(self.seed)
        self._eligible = {
            c: [
                (si, oi)
                for si, oi in insts
                if _large_enough(self.dataset.scenes[si], self.dataset.scenes[si].objects[oi].box, self.min_size_frac)
            ]
            for c, insts in self.dataset.instances.items()
        }
        novel = set(split.novel_ids)
        self._base_only_scene = [not (s.class_ids() & novel) for s in self.dataset.scenes]

    def _choose_classes(self) -> list[int]:
        split = self.dataset.split
        base, novel = list(split.base_ids), list(split.novel_ids)
        if self.stage == "base":
            picked = self.rng.choice(base, size=self.n_way, replace=False).tolist()
        elif self.n_way >= len(novel):
            extra = self.rng.choice(base, size=self.n_way - len(novel), replace=False).tolist()
            picked = novel + extra
        else:
            picked = self.rng.choice(novel, size=self.n_way, replace=False).tolist()
        return sorted(int(c) for c in picked)

    def sample(self) -> Episode:
        ds = self.dataset
        classes = self._choose_classes()
        support = []
        for c in classes:
            pool = self._eligible[c]
            if len(pool) < self.shots:
                raise InsufficientShotsError(
                    f"class {ds.split.classes[c]!r} has {len(pool)} usable instances, need K={self.shots}"
                )
            for j in self.rng.choice(len(pool), size=self.shots, replace=False):
                si, oi = pool[j]
                support.append(SupportRegion(ds.scenes[si], oi, c))
        query = self._choose_queries(classes)
        return Episode(self.stage, tuple(classes), self.shots, tuple(support), tuple(ds.scenes[i] for i in query))

    def _choose_queries(self, classes: list[int]) -> list[int]:
        candidates = {}
        for c in classes:
            scenes = self.dataset.scenes_by_class[c]
            if self.stage == "base":
                scenes = [s for s in scenes if self._base_only_scene[s]]
            candidates[c] = list(self.rng.permutation(scenes)) if scenes else []
        chosen: list[int] = []
        taken: set[int] = set()
        order = list(classes)
        while len(chosen) < self.queries:
            progressed = False
            for c in order:
                while candidates[c]:
                    si = int(candidates[c].pop())
                    if si not in taken:
                        taken.add(si)
                        chosen.append(si)
                        progressed = True
                        break
                if len(chosen) == self.queries:
                    break
            if not progressed:
                raise InsufficientShotsError(
                    f"only {len(chosen)} query scenes available for classes {classes}, need Q={self.queries}"
                )
        return chosen


def sample_episode(
    dataset: Dataset,
    split: ClassSplit,
    n_way: int,
    shots: int,
    queries: int,
    stage: str,
    rng_seed: int,
    min_size_frac: float = 0.1,
) -> Episode:
    if dataset.split != split:
        raise ValueError(f"dataset was loaded with split {dataset.split.name}, not {split.name}")
    return EpisodeSampler(dataset, n_way, shots, queries, stage, rng_seed, min_size_frac).sample()
