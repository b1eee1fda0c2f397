"""Inference decoding and mean-average-precision evaluation.

Decoding scores every (query, interaction) pair by the query's best
non-background object probability times the interaction probability and
keeps the top k (ties: lower query index, then lower interaction
index).

AP per HOI class (object class x interaction class): predictions sweep
in descending score; a prediction is a true positive when it matches a
not-yet-matched ground truth of its class in the same image with IoU of
BOTH boxes >= 0.5 (among several candidates, the one with the largest
min(IoU_h, IoU_o) wins). AP is the trapezoidal area under the monotone
precision envelope sampled at each achieved recall, anchored at
recall 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import HOIInstance, iou_np

IOU_THRESHOLD = 0.5
RARE_THRESHOLD = 10  # training instances below which an HOI class is "rare"


@dataclass(frozen=True)
class ScoredInstance:
    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]
    obj_class: int
    int_class: int
    score: float
    query: int


def decode_topk(preds, k: int, num_obj_classes: int) -> list[ScoredInstance]:
    """Top-k scored instances from one layer's predictions.

    The background column (last) is dropped before taking the argmax
    object class; scores are not renormalized.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    p_obj = preds.object_prob.data[:, :num_obj_classes]
    p_int = preds.interaction_prob.data
    n = p_obj.shape[0]
    best_cls = p_obj.argmax(axis=1)
    best_p = p_obj[np.arange(n), best_cls]
    hboxes = preds.human_box.data
    oboxes = preds.object_box.data
    cands = [
        ScoredInstance(
            human_box=tuple(hboxes[i]),
            object_box=tuple(oboxes[i]),
            obj_class=int(best_cls[i]),
            int_class=t,
            score=float(best_p[i] * p_int[i, t]),
            query=i,
        )
        for i in range(n)
        for t in range(p_int.shape[1])
    ]
    cands.sort(key=lambda s: (-s.score, s.query, s.int_class))
    return cands[:k]


def _ap_from_hits(hits: list[bool], n_gt: int) -> float:
    if n_gt == 0 or not any(hits):
        return 0.0
    recalls = []
    precisions = []
    tp = 0
    for rank, hit in enumerate(hits, start=1):
        if hit:
            tp += 1
            recalls.append(tp / n_gt)
            precisions.append(tp / rank)
    # monotone envelope from the right, then trapezoids anchored at recall 0
    env = precisions[:]
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    area = recalls[0] * env[0]
    for i in range(1, len(env)):
        area += (recalls[i] - recalls[i - 1]) * (env[i] + env[i - 1]) / 2.0
    return float(area)


def ap_per_class(scored: list[tuple[int, ScoredInstance]],
                 gts_by_image: dict[int, list[tuple]],
                 iou_threshold: float = IOU_THRESHOLD) -> float:
    """AP for one HOI class.

    `scored`: (image id, instance) records of this class across images.
    `gts_by_image`: image id -> list of (human_box, object_box).
    """
    n_gt = sum(len(v) for v in gts_by_image.values())
    order = sorted(scored, key=lambda r: (-r[1].score, r[0], r[1].query, r[1].int_class))
    taken = {img: [False] * len(v) for img, v in gts_by_image.items()}
    hits = []
    for img, inst in order:
        gts = gts_by_image.get(img, [])
        best_idx = -1
        best_quality = -1.0
        for gi, (gh, go) in enumerate(gts):
            if taken[img][gi]:
                continue
            iou_h = float(iou_np(np.asarray(inst.human_box), np.asarray(gh)))
            iou_o = float(iou_np(np.asarray(inst.object_box), np.asarray(go)))
            if iou_h >= iou_threshold and iou_o >= iou_threshold:
                quality = min(iou_h, iou_o)
                if quality > best_quality:
                    best_quality = quality
                    best_idx = gi
        if best_idx >= 0:
            taken[img][best_idx] = True
            hits.append(True)
        else:
            hits.append(False)
    return _ap_from_hits(hits, n_gt)


@dataclass
class ClassAP:
    obj_class: int
    int_class: int
    ap: float
    n_gt: int


@dataclass
class EvalReport:
    map_full: float
    map_rare: float | None
    per_class: list[ClassAP]

    def to_json(self) -> dict:
        return {
            "map_full": self.map_full,
            "map_rare": self.map_rare,
            "per_class": [{"obj": c.obj_class, "int": c.int_class, "ap": c.ap,
                           "n_gt": c.n_gt} for c in self.per_class],
        }


def evaluate(per_image_preds: list[list[ScoredInstance]],
             per_image_gts: list[list[HOIInstance]],
             train_census: dict[tuple[int, int], int] | None = None,
             rare_threshold: int = RARE_THRESHOLD) -> EvalReport:
    """Aggregate AP over every HOI class present in the ground truth.

    `train_census` maps (obj, int) class pairs to training-set instance
    counts; classes with fewer than `rare_threshold` samples form the
    rare split. Without a census, map_rare is None.
    """
    if not per_image_gts:
        raise ValueError("empty dataset: nothing to evaluate")
    classes = sorted({(g.obj_class, g.int_class) for gts in per_image_gts for g in gts})
    preds_by_class: dict[tuple[int, int], list[tuple[int, ScoredInstance]]] = {c: [] for c in classes}
    for img, preds in enumerate(per_image_preds):
        for inst in preds:
            key = (inst.obj_class, inst.int_class)
            if key in preds_by_class:
                preds_by_class[key].append((img, inst))
    per_class = []
    for cls in classes:
        gts_by_image = {}
        for img, gts in enumerate(per_image_gts):
            boxes = [(g.human_box, g.object_box) for g in gts
                     if (g.obj_class, g.int_class) == cls]
            if boxes:
                gts_by_image[img] = boxes
        ap = ap_per_class(preds_by_class[cls], gts_by_image)
        per_class.append(ClassAP(obj_class=cls[0], int_class=cls[1], ap=ap,
                                 n_gt=sum(len(v) for v in gts_by_image.values())))
    map_full = float(np.mean([c.ap for c in per_class]))
    map_rare = None
    if train_census is not None:
        rare = [c.ap for c in per_class
                if train_census.get((c.obj_class, c.int_class), 0) < rare_threshold]
        map_rare = float(np.mean(rare)) if rare else None
    return EvalReport(map_full=map_full, map_rare=map_rare, per_class=per_class)
