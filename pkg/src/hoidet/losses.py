"""Matched-set training losses: box L1, generalized IoU, object
cross-entropy with a background class, and focal interaction loss.

Boxes are (cx, cy, w, h) in [0, 1]. The matching cost reuses the four
loss weights; class cost terms use (1 - p) so the matrix stays bounded.
Aggregation weights each summed component once (left to right), so the
reported total is exactly the weighted dot product of the breakdown.

Focal convention (fixed by the bce-at-(alpha=1, gamma=0) identity):
positive entries contribute alpha * (1-p)^gamma * -log(p), negative
entries contribute (p)^gamma * -log(1-p) unweighted.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .matching import MatchResult, hungarian


@dataclass(frozen=True)
class HOIInstance:
    """One ground-truth or decoded (human, object, interaction) tuple."""

    human_box: tuple[float, float, float, float]
    object_box: tuple[float, float, float, float]
    obj_class: int
    int_class: int


@dataclass
class LossTensors:
    """Per-component loss values still attached to the graph."""

    l1: Tensor
    giou: Tensor
    oc: Tensor
    ic: Tensor
    total: Tensor


@dataclass
class LossBreakdown:
    l1: float
    giou: float
    oc: float
    ic: float
    total: float
    per_layer: list["LossBreakdown"] | None = None

    @classmethod
    def from_tensors(cls, t: LossTensors, per_layer=None) -> "LossBreakdown":
        return cls(l1=t.l1.item(), giou=t.giou.item(), oc=t.oc.item(),
                   ic=t.ic.item(), total=t.total.item(), per_layer=per_layer)


def weighted_total(l1: Tensor, giou: Tensor, oc: Tensor, ic: Tensor, cfg) -> Tensor:
    """Left-to-right weighted sum; the same fold is used everywhere so
    float equality of total vs. dot(weights, components) holds."""
    return l1 * cfg.w_l1 + giou * cfg.w_giou + oc * cfg.w_obj + ic * cfg.w_int


# ---------------------------------------------------------------------------
# box geometry


def _check_positive_wh(arr: np.ndarray, who: str) -> None:
    if np.any(arr[..., 2] <= 0) or np.any(arr[..., 3] <= 0):
        raise ValueError(f"{who}: boxes must have positive width and height")


def corners_np(boxes: np.ndarray) -> np.ndarray:
    """(..., 4) cxcywh -> (..., 4) x0 y0 x1 y1."""
    half = boxes[..., 2:4] / 2.0
    return np.concatenate([boxes[..., 0:2] - half, boxes[..., 0:2] + half], axis=-1)


def iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise IoU of broadcast-compatible cxcywh boxes."""
    ca, cb = corners_np(a), corners_np(b)
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return inter / union


def giou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise generalized IoU of broadcast-compatible cxcywh boxes."""
    ca, cb = corners_np(a), corners_np(b)
    iw = np.minimum(ca[..., 2], cb[..., 2]) - np.maximum(ca[..., 0], cb[..., 0])
    ih = np.minimum(ca[..., 3], cb[..., 3]) - np.maximum(ca[..., 1], cb[..., 1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    ew = np.maximum(ca[..., 2], cb[..., 2]) - np.minimum(ca[..., 0], cb[..., 0])
    eh = np.maximum(ca[..., 3], cb[..., 3]) - np.minimum(ca[..., 1], cb[..., 1])
    enclosure = ew * eh
    return inter / union - (enclosure - union) / enclosure


def giou(box_a, box_b) -> float:
    """GIoU of two cxcywh boxes; in (-1, 1], 1 iff identical."""
    a = np.asarray(box_a, dtype=np.float64)
    b = np.asarray(box_b, dtype=np.float64)
    if a.shape != (4,) or b.shape != (4,):
        raise ValueError(f"giou expects 4-vectors, got {a.shape} and {b.shape}")
    _check_positive_wh(a[None], "giou")
    _check_positive_wh(b[None], "giou")
    return float(giou_np(a, b))


def giou_pairs(pred: Tensor, gt: Tensor) -> Tensor:
    """Differentiable row-wise GIoU of two (G, 4) cxcywh tensors."""
    _check_positive_wh(pred.data, "giou_pairs")
    _check_positive_wh(gt.data, "giou_pairs")

    def split(b):
        cx, cy = ad.slice_last(b, 0, 1), ad.slice_last(b, 1, 2)
        w, h = ad.slice_last(b, 2, 3), ad.slice_last(b, 3, 4)
        hw, hh = w * 0.5, h * 0.5
        return cx - hw, cy - hh, cx + hw, cy + hh, w, h

    ax0, ay0, ax1, ay1, aw, ah = split(pred)
    bx0, by0, bx1, by1, bw, bh = split(gt)
    iw = ad.relu(ad.minimum(ax1, bx1) - ad.maximum(ax0, bx0))
    ih = ad.relu(ad.minimum(ay1, by1) - ad.maximum(ay0, by0))
    inter = iw * ih
    union = aw * ah + bw * bh - inter
    ew = ad.maximum(ax1, bx1) - ad.minimum(ax0, bx0)
    eh = ad.maximum(ay1, by1) - ad.minimum(ay0, by0)
    enclosure = ew * eh
    return ad.div(inter, union) - ad.div(enclosure - union, enclosure)


# ---------------------------------------------------------------------------
# matching cost


def _gt_arrays(gts: list[HOIInstance], cfg):
    gh = np.array([g.human_box for g in gts], dtype=np.float64).reshape(-1, 4)
    go = np.array([g.object_box for g in gts], dtype=np.float64).reshape(-1, 4)
    cls = np.array([g.obj_class for g in gts], dtype=np.intp)
    icls = np.array([g.int_class for g in gts], dtype=np.intp)
    if cls.size and (cls.min() < 0 or cls.max() >= cfg.num_obj_classes):
        raise ValueError(f"object class out of range [0, {cfg.num_obj_classes})")
    if icls.size and (icls.min() < 0 or icls.max() >= cfg.num_interactions):
        raise ValueError(f"interaction class out of range [0, {cfg.num_interactions})")
    return gh, go, cls, icls


def _cost_arrays(bh: np.ndarray, bo: np.ndarray, po: np.ndarray, pi: np.ndarray,
                 gts: list[HOIInstance], cfg) -> np.ndarray:
    gh, go, cls, icls = _gt_arrays(gts, cfg)
    g = len(gts)
    if g == 0:
        return np.zeros((0, bh.shape[0]))
    l1 = (np.abs(bh[None, :, :] - gh[:, None, :]).sum(-1)
          + np.abs(bo[None, :, :] - go[:, None, :]).sum(-1))
    gi = (2.0 - giou_np(bh[None, :, :], gh[:, None, :])
          - giou_np(bo[None, :, :], go[:, None, :]))
    p_obj = po[:, cls].T  # (G, N)
    p_int = pi[:, icls].T
    return (cfg.w_l1 * l1 + cfg.w_giou * gi
            + cfg.w_obj * (1.0 - p_obj) + cfg.w_int * (1.0 - p_int))


def matching_cost(preds, gts: list[HOIInstance], cfg) -> np.ndarray:
    """Cost matrix [G, N]: weighted box L1 + (2 - GIoU_h - GIoU_o)
    + (1 - p_obj[class]) + (1 - p_int[class])."""
    return _cost_arrays(preds.human_box.data, preds.object_box.data,
                        preds.object_prob.data, preds.interaction_prob.data,
                        gts, cfg)


# ---------------------------------------------------------------------------
# losses


def losses(preds, gts: list[HOIInstance], match: MatchResult, cfg) -> LossTensors:
    """Loss components for one layer of predictions under a fixed match.

    l1/giou: means over the 2*G matched boxes. oc: weighted-mean
    cross-entropy over all queries, background targets weighted by
    cfg.bg_class_weight. ic: focal loss summed over all (query, class)
    entries, normalized by max(G, 1).
    """
    gh, go, cls, icls = _gt_arrays(gts, cfg)
    n = preds.human_box.data.shape[0]
    num_obj = cfg.num_obj_classes
    g = len(match.pairs)

    if g > 0:
        gt_order = [p[0] for p in match.pairs]
        q_idx = [p[1] for p in match.pairs]
        ph = ad.gather_rows(preds.human_box, q_idx)
        po = ad.gather_rows(preds.object_box, q_idx)
        th = Tensor(gh[gt_order])
        to = Tensor(go[gt_order])
        scale = 1.0 / (2 * g)
        l1 = (ad.sum_all(ad.absolute(ph - th)) + ad.sum_all(ad.absolute(po - to))) * scale
        giou_loss = (ad.sum_all(1.0 - giou_pairs(ph, th))
                     + ad.sum_all(1.0 - giou_pairs(po, to))) * scale
    else:
        l1 = Tensor(0.0)
        giou_loss = Tensor(0.0)

    # object cross-entropy: matched queries target their class at weight 1,
    # the rest target the background column at reduced weight
    ce_mask = np.zeros((n, num_obj + 1))
    ce_mask[:, num_obj] = cfg.bg_class_weight
    for gt_i, q in match.pairs:
        ce_mask[q, :] = 0.0
        ce_mask[q, cls[gt_i]] = 1.0
    weight_sum = float(ce_mask.sum())
    oc = ad.sum_all(ad.mul(ad.log(preds.object_prob), Tensor(ce_mask))) * (-1.0 / weight_sum)

    # focal interaction loss over every (query, class) entry
    pos_mask = np.zeros((n, cfg.num_interactions))
    for gt_i, q in match.pairs:
        pos_mask[q, icls[gt_i]] = 1.0
    p = preds.interaction_prob
    gamma = cfg.focal_gamma
    pos_terms = ad.mul(ad.mul(ad.power(1.0 - p, gamma), ad.log(p)),
                       Tensor(-cfg.focal_alpha * pos_mask))
    neg_terms = ad.mul(ad.mul(ad.power(p, gamma), ad.log(1.0 - p)),
                       Tensor(-(1.0 - pos_mask)))
    ic = (ad.sum_all(pos_terms) + ad.sum_all(neg_terms)) * (1.0 / max(g, 1))

    total = weighted_total(l1, giou_loss, oc, ic, cfg)
    return LossTensors(l1=l1, giou=giou_loss, oc=oc, ic=ic, total=total)


def match_layer(preds, gts: list[HOIInstance], cfg) -> MatchResult:
    return hungarian(matching_cost(preds, gts, cfg))


def total_loss(layer_preds: list, gts: list[HOIInstance], cfg,
               matches: list[MatchResult] | None = None) -> tuple[LossTensors, LossBreakdown]:
    """Sum of per-layer losses (intermediate supervision), matching
    recomputed independently per layer unless `matches` pins it."""
    if not layer_preds:
        raise ValueError("need at least one prediction layer")
    per_layer_terms = []
    for li, preds in enumerate(layer_preds):
        match = matches[li] if matches is not None else match_layer(preds, gts, cfg)
        per_layer_terms.append(losses(preds, gts, match, cfg))
    l1 = _fold_sum([t.l1 for t in per_layer_terms])
    giou_loss = _fold_sum([t.giou for t in per_layer_terms])
    oc = _fold_sum([t.oc for t in per_layer_terms])
    ic = _fold_sum([t.ic for t in per_layer_terms])
    total = weighted_total(l1, giou_loss, oc, ic, cfg)
    terms = LossTensors(l1=l1, giou=giou_loss, oc=oc, ic=ic, total=total)
    breakdown = LossBreakdown.from_tensors(
        terms, per_layer=[LossBreakdown.from_tensors(t) for t in per_layer_terms])
    return terms, breakdown


def _fold_sum(items: list[Tensor]) -> Tensor:
    acc = items[0]
    for t in items[1:]:
        acc = acc + t
    return acc


# ---------------------------------------------------------------------------
# batched losses (training path)


def _batch_layer_losses(preds, gts_per_image: list[list[HOIInstance]], cfg) -> LossTensors:
    """Loss components for one layer of batched predictions (B, N, ...);
    every component is the mean of the per-image losses."""
    b, n = preds.human_box.data.shape[:2]
    num_obj = cfg.num_obj_classes
    inv_b = 1.0 / b
    rows: list[int] = []
    gt_h: list[np.ndarray] = []
    gt_o: list[np.ndarray] = []
    box_w: list[float] = []
    ce_mask = np.zeros((b, n, num_obj + 1))
    ce_mask[:, :, num_obj] = cfg.bg_class_weight
    pos_mask = np.zeros((b, n, cfg.num_interactions))
    ic_w = np.zeros((b, 1, 1))
    for img, gts in enumerate(gts_per_image):
        gh, go, cls, icls = _gt_arrays(gts, cfg)
        match = hungarian(_cost_arrays(
            preds.human_box.data[img], preds.object_box.data[img],
            preds.object_prob.data[img], preds.interaction_prob.data[img], gts, cfg))
        g = len(match.pairs)
        for gt_i, q in match.pairs:
            rows.append(img * n + q)
            gt_h.append(gh[gt_i])
            gt_o.append(go[gt_i])
            box_w.append(1.0 / (2 * g))
            ce_mask[img, q, :] = 0.0
            ce_mask[img, q, cls[gt_i]] = 1.0
            pos_mask[img, q, icls[gt_i]] = 1.0
        ic_w[img] = 1.0 / max(g, 1)
    ce_mask *= inv_b / ce_mask.sum(axis=(1, 2), keepdims=True)

    if rows:
        w4 = np.repeat(np.array(box_w)[:, None], 4, axis=1) * inv_b
        w1 = np.array(box_w)[:, None] * inv_b
        ph = ad.gather_rows(ad.reshape(preds.human_box, (b * n, 4)), rows)
        po = ad.gather_rows(ad.reshape(preds.object_box, (b * n, 4)), rows)
        th = Tensor(np.array(gt_h))
        to = Tensor(np.array(gt_o))
        l1 = (ad.sum_all(ad.mul(ad.absolute(ph - th), Tensor(w4)))
              + ad.sum_all(ad.mul(ad.absolute(po - to), Tensor(w4))))
        giou_loss = (ad.sum_all(ad.mul(1.0 - giou_pairs(ph, th), Tensor(w1)))
                     + ad.sum_all(ad.mul(1.0 - giou_pairs(po, to), Tensor(w1))))
    else:
        l1 = Tensor(0.0)
        giou_loss = Tensor(0.0)

    oc = ad.sum_all(ad.mul(ad.log(preds.object_prob), Tensor(-ce_mask)))
    p = preds.interaction_prob
    gamma = cfg.focal_gamma
    pos_w = -cfg.focal_alpha * pos_mask * ic_w * inv_b
    neg_w = -(1.0 - pos_mask) * ic_w * inv_b
    ic = (ad.sum_all(ad.mul(ad.mul(ad.power(1.0 - p, gamma), ad.log(p)), Tensor(pos_w)))
          + ad.sum_all(ad.mul(ad.mul(ad.power(p, gamma), ad.log(1.0 - p)), Tensor(neg_w))))
    total = weighted_total(l1, giou_loss, oc, ic, cfg)
    return LossTensors(l1=l1, giou=giou_loss, oc=oc, ic=ic, total=total)


def batch_total_loss(layer_preds: list, gts_per_image: list[list[HOIInstance]],
                     cfg) -> LossTensors:
    """Batched twin of `total_loss`: per-layer per-image matching, every
    component averaged over the batch and summed across layers."""
    per_layer = [_batch_layer_losses(preds, gts_per_image, cfg) for preds in layer_preds]
    l1 = _fold_sum([t.l1 for t in per_layer])
    giou_loss = _fold_sum([t.giou for t in per_layer])
    oc = _fold_sum([t.oc for t in per_layer])
    ic = _fold_sum([t.ic for t in per_layer])
    return LossTensors(l1=l1, giou=giou_loss, oc=oc, ic=ic,
                       total=weighted_total(l1, giou_loss, oc, ic, cfg))
