"""Run a trained checkpoint over scenes and emit scored detections."""

from __future__ import annotations

import numpy as np

from .boxes import Box
from .data import Dataset, generate_proposals, scene_region_inputs
from .evaluation import Detection, nms
from .model import ClassAttentiveBank, decode_boxes
from .tensorcore import Tensor
from .tensorcore.ops import log_softmax
from .training import Checkpoint


class SplitMismatchError(ValueError):
    pass


def class_logits(ckpt: Checkpoint, model, features: Tensor) -> np.ndarray:
    """Combined logits ``[R, C + 1]`` for the checkpoint's classes.

    With both branches on, the meta and metric logits are summed.
    """
    cfg = ckpt.config
    split = ckpt.split
    classes = list(ckpt.bank_class_ids)
    logits = None
    if cfg.use_meta:
        n_base = sum(1 for c in classes if c < split.num_base)
        bank = ClassAttentiveBank(
            Tensor(ckpt.bank), tuple(classes), n_base, len(classes) - n_base, model.params.get("se.scale")
        )
        logits = model.meta_logits(features, bank, cfg.use_se).numpy()
    if cfg.use_metric:
        m = model.metric_logits(features, classes, split.background).numpy()
        logits = m if logits is None else logits + m
    return logits


def detect(
    ckpt: Checkpoint,
    dataset: Dataset,
    seed: int = 0,
    score_thresh: float = 0.05,
    nms_iou: float = 0.5,
    max_per_scene: int = 100,
) -> list[Detection]:
    if dataset.split != ckpt.split:
        raise SplitMismatchError(
            f"checkpoint was trained on split {ckpt.split.name} but data uses {dataset.split.name}"
        )
    if not dataset.scenes:
        return []
    cfg = ckpt.config
    model = ckpt.model()
    props, inputs, owner = [], [], []
    for si, scene in enumerate(dataset.scenes):
        rng = np.random.default_rng([seed, si])
        p = generate_proposals(scene, rng, cfg.n_jitter, cfg.n_background)
        props.append(p)
        inputs.append(scene_region_inputs(scene, p, dataset.payload_dim))
        owner.append(np.full(len(p), si))
    proposals = np.concatenate(props)
    owner = np.concatenate(owner)
    feats = model.encode(np.concatenate(inputs))
    probs = np.exp(log_softmax(class_logits(ckpt, model, feats)))
    boxes = decode_boxes(model.regress_box(feats).numpy(), proposals)
    classes = list(ckpt.bank_class_ids)
    out: list[Detection] = []
    for si, scene in enumerate(dataset.scenes):
        rows = np.flatnonzero(owner == si)
        b = boxes[rows]
        b[:, [0, 2]] = np.clip(b[:, [0, 2]], 0.0, scene.width)
        b[:, [1, 3]] = np.clip(b[:, [1, 3]], 0.0, scene.height)
        valid = (b[:, 2] - b[:, 0] > 1e-6) & (b[:, 3] - b[:, 1] > 1e-6)
        scene_dets = []
        for col, cid in enumerate(classes):
            sel = np.flatnonzero(valid & (probs[rows, col] >= score_thresh))
            if not len(sel):
                continue
            keep = nms(b[sel], probs[rows[sel], col], nms_iou)
            for k in keep:
                j = sel[k]
                scene_dets.append(Detection(scene.scene_id, int(cid), float(probs[rows[j], col]), Box(*b[j].tolist())))
        scene_dets.sort(key=lambda d: -d.score)
        out.extend(scene_dets[:max_per_scene])
    return out
