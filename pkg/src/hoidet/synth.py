"""Seeded synthetic scene generator with rule-derived interaction labels.

Scenes hold 1-2 humans and 1-3 colored geometric objects on a gray
canvas; every interaction label is a deterministic function of the
stored geometry, so labels can be re-derived from any saved scene:

  hold (0):     IoU(human, object) > 0.05
  ride (1):     human center above object center and IoU > 0.05
  next_to (2):  center distance < 0.25 and IoU <= 0.05
  look_at (3):  object center inside a 90-degree cone along the
                human's facing direction
  class 4 ("none") is reserved and never labeled.

"Above" means smaller y, with y growing downward (row order); facing
angles are radians in screen coordinates (x right, y down). Datasets
serialize as JSON Lines of scene specs (one scene per line), optionally
with a `pixels.bin` sidecar holding rendered images; images are
re-rendered from specs on load when no sidecar exists.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .losses import HOIInstance
from .rng import Rng

NUM_OBJECT_CLASSES = 4
NUM_INTERACTIONS = 5
INTERACTION_NAMES = ("hold", "ride", "next_to", "look_at", "none")
HOLD, RIDE, NEXT_TO, LOOK_AT = 0, 1, 2, 3

IOU_CONTACT = 0.05
NEXT_TO_DIST = 0.25
LOOK_CONE_COS = math.cos(math.pi / 4)  # 90-degree full cone
MAX_INSTANCES = 8  # keep every scene coverable by the toy query budget

BACKGROUND = (0.5, 0.5, 0.5)
HUMAN_BODY = (0.90, 0.75, 0.10)
HUMAN_HEAD = (0.75, 0.55, 0.05)
HUMAN_TICK = (1.0, 1.0, 1.0)
OBJECT_COLORS = (
    (0.85, 0.10, 0.10),  # 0: filled rectangle
    (0.10, 0.70, 0.15),  # 1: hollow rectangle
    (0.15, 0.25, 0.90),  # 2: disk
    (0.85, 0.15, 0.75),  # 3: triangle
)

Box = tuple[float, float, float, float]  # (cx, cy, w, h), normalized


class GenerationError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class GroundTruth:
    h_idx: int
    o_idx: int
    obj_class: int
    int_class: int


@dataclass
class SceneSpec:
    seed: int
    canvas: tuple[int, int]  # (H, W)
    humans: list[Box]
    facings: list[float]
    objects: list[tuple[Box, int]]
    gts: list[GroundTruth]

    def instances(self) -> list[HOIInstance]:
        out = []
        for gt in self.gts:
            box_o, _cls = self.objects[gt.o_idx]
            out.append(HOIInstance(human_box=self.humans[gt.h_idx], object_box=box_o,
                                   obj_class=gt.obj_class, int_class=gt.int_class))
        return out


# ---------------------------------------------------------------------------
# geometry and predicates


def box_iou(a: Box, b: Box) -> float:
    ax0, ay0 = a[0] - a[2] / 2, a[1] - a[3] / 2
    ax1, ay1 = a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0 = b[0] - b[2] / 2, b[1] - b[3] / 2
    bx1, by1 = b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


def _contains(a: Box, b: Box) -> bool:
    return (a[0] - a[2] / 2 <= b[0] - b[2] / 2 and a[1] - a[3] / 2 <= b[1] - b[3] / 2
            and a[0] + a[2] / 2 >= b[0] + b[2] / 2 and a[1] + a[3] / 2 >= b[1] + b[3] / 2)


def active_interactions(human: Box, facing: float, obj: Box) -> list[int]:
    """Interaction classes whose predicate holds for one (human, object) pair."""
    out = []
    iou = box_iou(human, obj)
    dx, dy = obj[0] - human[0], obj[1] - human[1]
    dist = math.hypot(dx, dy)
    if iou > IOU_CONTACT:
        out.append(HOLD)
        if human[1] < obj[1]:
            out.append(RIDE)
    elif dist < NEXT_TO_DIST:
        out.append(NEXT_TO)
    if dist > 0.0:
        cos = (math.cos(facing) * dx + math.sin(facing) * dy) / dist
        if cos >= LOOK_CONE_COS:
            out.append(LOOK_AT)
    return out


def derive_gts(humans: list[Box], facings: list[float],
               objects: list[tuple[Box, int]]) -> list[GroundTruth]:
    gts = []
    for h_idx, human in enumerate(humans):
        for o_idx, (obox, ocls) in enumerate(objects):
            for int_class in active_interactions(human, facings[h_idx], obox):
                gts.append(GroundTruth(h_idx=h_idx, o_idx=o_idx,
                                       obj_class=ocls, int_class=int_class))
    return gts


# ---------------------------------------------------------------------------
# sampling


SIZE_GRID = 16   # widths/heights snap to multiples of 1/16
POS_GRID = 32    # centers snap to multiples of 1/32


def _snap(v: float, grid: int) -> float:
    return round(v * grid) / grid


def _sample_box(rng: Rng, w_range, h_range, center=None, jitter=None) -> Box:
    w = _snap(float(rng.uniform((), *w_range)), SIZE_GRID)
    h = _snap(float(rng.uniform((), *h_range)), SIZE_GRID)
    if center is None:
        cx = float(rng.uniform((), w / 2, 1 - w / 2))
        cy = float(rng.uniform((), h / 2, 1 - h / 2))
    else:
        cx, cy = center
        if jitter:
            cx += float(rng.uniform((), -jitter, jitter))
            cy += float(rng.uniform((), -jitter, jitter))
    cx = _snap(min(max(cx, w / 2), 1 - w / 2), POS_GRID)
    cy = _snap(min(max(cy, h / 2), 1 - h / 2), POS_GRID)
    return (cx, cy, w, h)


def generate_scene(seed: int, canvas: tuple[int, int] = (64, 64)) -> SceneSpec:
    """Sample one scene; fully determined by the seed.

    Objects are placed in one of three modes (overlapping a human, near
    a human, uniform) so that every labelable interaction class stays
    frequent; a placement that would fully contain a human box (or be
    contained by one) is rejected and resampled, erroring out after
    1000 attempts.
    """
    rng = Rng(seed).split("scene")
    for _ in range(1000):
        n_humans = 1 + (1 if float(rng.uniform()) < 0.35 else 0)
        n_objects = 1 + rng.integers(3)
        humans = [_sample_box(rng, (0.14, 0.26), (0.28, 0.45)) for _ in range(n_humans)]
        facings = [float(rng.uniform((), 0.0, 2.0 * math.pi)) for _ in range(n_humans)]
        objects: list[tuple[Box, int]] = []
        for _ in range(n_objects):
            cls = rng.integers(NUM_OBJECT_CLASSES)
            for attempt in range(1000):
                mode = rng.choice([0.34, 0.38, 0.28])
                if mode == 0:  # overlap a human
                    anchor = humans[rng.integers(n_humans)]
                    box = _sample_box(rng, (0.16, 0.30), (0.16, 0.30),
                                      center=(anchor[0], anchor[1]), jitter=0.06)
                elif mode == 1:  # near a human but apart
                    anchor = humans[rng.integers(n_humans)]
                    ang = float(rng.uniform((), 0.0, 2.0 * math.pi))
                    dist = float(rng.uniform((), 0.16, 0.24))
                    center = (anchor[0] + dist * math.cos(ang), anchor[1] + dist * math.sin(ang))
                    box = _sample_box(rng, (0.16, 0.30), (0.16, 0.30), center=center)
                else:
                    box = _sample_box(rng, (0.16, 0.30), (0.16, 0.30))
                if not any(_contains(h, box) or _contains(box, h) for h in humans):
                    objects.append((box, cls))
                    break
            else:
                raise GenerationError(f"seed {seed}: no valid object placement in 1000 attempts")
        gts = derive_gts(humans, facings, objects)
        if len(gts) <= MAX_INSTANCES:
            return SceneSpec(seed=seed, canvas=canvas, humans=humans, facings=facings,
                             objects=objects, gts=gts)
    raise GenerationError(f"seed {seed}: no scene under {MAX_INSTANCES} instances in 1000 attempts")


# ---------------------------------------------------------------------------
# rendering


def _px(v: float, n: int) -> int:
    return min(max(int(math.floor(v * n + 0.5)), 0), n)


def _px_rect(box: Box, h: int, w: int) -> tuple[int, int, int, int]:
    """(y0, y1, x0, x1) pixel bounds, at least one pixel each way."""
    x0 = _px(box[0] - box[2] / 2, w)
    x1 = max(_px(box[0] + box[2] / 2, w), x0 + 1)
    y0 = _px(box[1] - box[3] / 2, h)
    y1 = max(_px(box[1] + box[3] / 2, h), y0 + 1)
    return y0, min(y1, h), x0, min(x1, w)


def _draw_human(img: np.ndarray, box: Box, facing: float) -> None:
    h, w = img.shape[:2]
    y0, y1, x0, x1 = _px_rect(box, h, w)
    head_end = min(y1, y0 + max(1, int(round((y1 - y0) * 0.3))))
    quarter = (x1 - x0) // 4
    img[y0:head_end, x0 + quarter:max(x0 + quarter + 1, x1 - quarter)] = HUMAN_HEAD
    img[head_end:y1, x0:x1] = HUMAN_BODY
    cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
    length = max(2, min(y1 - y0, x1 - x0) // 2)
    for step in range(length):
        py = int(round(cy + step * math.sin(facing)))
        px = int(round(cx + step * math.cos(facing)))
        if 0 <= py < h and 0 <= px < w:
            img[py, px] = HUMAN_TICK


def _draw_object(img: np.ndarray, box: Box, cls: int) -> None:
    h, w = img.shape[:2]
    y0, y1, x0, x1 = _px_rect(box, h, w)
    color = OBJECT_COLORS[cls]
    if cls == 0:  # filled rectangle
        img[y0:y1, x0:x1] = color
    elif cls == 1:  # hollow rectangle
        t = max(1, min(y1 - y0, x1 - x0) // 5)
        img[y0:y1, x0:x1][:t, :] = color
        img[y0:y1, x0:x1][-t:, :] = color
        img[y0:y1, x0:x1][:, :t] = color
        img[y0:y1, x0:x1][:, -t:] = color
    elif cls == 2:  # disk
        cy, cx = (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0
        r = min(y1 - y0, x1 - x0) / 2.0
        ys, xs = np.ogrid[y0:y1, x0:x1]
        mask = (ys - cy) ** 2 + (xs - cx) ** 2 <= r * r
        img[y0:y1, x0:x1][mask] = color
    else:  # triangle, apex at top center
        rows = y1 - y0
        cx = (x0 + x1 - 1) / 2.0
        for i, row in enumerate(range(y0, y1)):
            frac = (i + 1) / rows
            half = frac * (x1 - x0) / 2.0
            a = max(x0, int(math.floor(cx - half + 0.5)))
            b = min(x1, int(math.floor(cx + half + 0.5)) + 1)
            img[row, a:b] = color


def render(spec: SceneSpec) -> np.ndarray:
    """Paint the scene: gray background, humans first, then objects in
    list order (later entities over-paint earlier ones)."""
    h, w = spec.canvas
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:, :] = BACKGROUND
    for box, facing in zip(spec.humans, spec.facings):
        _draw_human(img, box, facing)
    for box, cls in spec.objects:
        _draw_object(img, box, cls)
    return img


# ---------------------------------------------------------------------------
# dataset io

PIXELS_SIDECAR = "pixels.bin"


@dataclass
class LoadedScene:
    image: np.ndarray | None
    spec: SceneSpec


def _spec_to_json(spec: SceneSpec, pixels_offset: int | None = None) -> dict:
    rec = {
        "seed": spec.seed,
        "canvas": list(spec.canvas),
        "humans": [list(b) for b in spec.humans],
        "facings": list(spec.facings),
        "objects": [{"box": list(b), "cls": c} for b, c in spec.objects],
        "gts": [{"h_idx": g.h_idx, "o_idx": g.o_idx, "obj_class": g.obj_class,
                 "int_class": g.int_class} for g in spec.gts],
    }
    if pixels_offset is not None:
        rec["pixels_offset"] = pixels_offset
    return rec


def save_dataset(specs: list[SceneSpec], path: str, include_pixels: bool = False) -> None:
    """One scene per JSON line; with `include_pixels`, rendered images go
    to a `pixels.bin` sidecar next to the dataset file (row-major
    little-endian float64) referenced by byte offset."""
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    chunks = []
    offset = 0
    lines = []
    for spec in specs:
        po = None
        if include_pixels:
            raw = render(spec).astype("<f8").tobytes(order="C")
            po = offset
            offset += len(raw)
            chunks.append(raw)
        lines.append(json.dumps(_spec_to_json(spec, po), sort_keys=True,
                                separators=(",", ":")))
    with open(path, "w", encoding="utf-8") as fh:
        for line in lines:
            fh.write(line + "\n")
    if include_pixels:
        with open(os.path.join(parent, PIXELS_SIDECAR), "wb") as fh:
            fh.write(b"".join(chunks))


def _require(cond: bool, lineno: int, msg: str) -> None:
    if not cond:
        raise DatasetError(f"line {lineno}: {msg}")


def _parse_box(raw, lineno: int, what: str) -> Box:
    _require(isinstance(raw, list) and len(raw) == 4
             and all(isinstance(v, (int, float)) for v in raw), lineno,
             f"{what} must be a [cx, cy, w, h] list, got {raw!r}")
    cx, cy, w, h = (float(v) for v in raw)
    eps = 1e-9
    _require(w > 0 and h > 0, lineno, f"{what} must have positive width/height")
    _require(cx - w / 2 >= -eps and cx + w / 2 <= 1 + eps
             and cy - h / 2 >= -eps and cy + h / 2 <= 1 + eps, lineno,
             f"{what} exceeds the unit canvas")
    return (cx, cy, w, h)


_ALLOWED_KEYS = {"seed", "canvas", "humans", "facings", "objects", "gts", "pixels_offset"}


def parse_scene_line(line: str, lineno: int) -> tuple[SceneSpec, int | None]:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"line {lineno}: invalid JSON: {exc}") from exc
    _require(isinstance(rec, dict), lineno, "record must be a JSON object")
    unknown = set(rec) - _ALLOWED_KEYS
    _require(not unknown, lineno, f"unknown keys {sorted(unknown)}")
    for key in ("seed", "canvas", "humans", "facings", "objects", "gts"):
        _require(key in rec, lineno, f"missing key '{key}'")
    _require(isinstance(rec["canvas"], list) and len(rec["canvas"]) == 2
             and all(isinstance(v, int) and v > 0 for v in rec["canvas"]),
             lineno, "canvas must be [H, W] of positive ints")
    humans = [_parse_box(b, lineno, f"humans[{i}]") for i, b in enumerate(rec["humans"])]
    _require(len(humans) >= 1, lineno, "need at least one human")
    facings = rec["facings"]
    _require(isinstance(facings, list) and len(facings) == len(humans)
             and all(isinstance(v, (int, float)) for v in facings), lineno,
             "facings must be one float per human")
    objects = []
    for i, o in enumerate(rec["objects"]):
        _require(isinstance(o, dict) and set(o) == {"box", "cls"}, lineno,
                 f"objects[{i}] must be {{box, cls}}")
        _require(isinstance(o["cls"], int) and 0 <= o["cls"] < NUM_OBJECT_CLASSES,
                 lineno, f"objects[{i}]: unknown object class {o['cls']!r}")
        objects.append((_parse_box(o["box"], lineno, f"objects[{i}].box"), o["cls"]))
    _require(len(objects) >= 1, lineno, "need at least one object")
    gts = []
    for i, g in enumerate(rec["gts"]):
        _require(isinstance(g, dict)
                 and set(g) == {"h_idx", "o_idx", "obj_class", "int_class"},
                 lineno, f"gts[{i}] must be {{h_idx, o_idx, obj_class, int_class}}")
        _require(0 <= g["h_idx"] < len(humans), lineno, f"gts[{i}]: h_idx out of range")
        _require(0 <= g["o_idx"] < len(objects), lineno, f"gts[{i}]: o_idx out of range")
        _require(g["obj_class"] == objects[g["o_idx"]][1], lineno,
                 f"gts[{i}]: obj_class disagrees with the referenced object")
        _require(isinstance(g["int_class"], int) and 0 <= g["int_class"] < NUM_INTERACTIONS - 1,
                 lineno, f"gts[{i}]: unknown interaction id {g['int_class']!r} "
                         f"(class {NUM_INTERACTIONS - 1} is never labeled)")
        gts.append(GroundTruth(h_idx=g["h_idx"], o_idx=g["o_idx"],
                               obj_class=g["obj_class"], int_class=g["int_class"]))
    spec = SceneSpec(seed=int(rec["seed"]), canvas=tuple(rec["canvas"]),
                     humans=humans, facings=[float(v) for v in facings],
                     objects=objects, gts=gts)
    return spec, rec.get("pixels_offset")


def load_dataset(path: str, render_images: bool = True) -> list[LoadedScene]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    sidecar_path = os.path.join(os.path.dirname(os.path.abspath(path)), PIXELS_SIDECAR)
    blob = None
    if os.path.exists(sidecar_path):
        with open(sidecar_path, "rb") as fh:
            blob = fh.read()
    scenes = []
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        spec, offset = parse_scene_line(line, lineno)
        image = None
        if offset is not None and blob is not None:
            h, w = spec.canvas
            count = h * w * 3
            if offset + count * 8 > len(blob):
                raise DatasetError(f"line {lineno}: pixels_offset beyond sidecar size")
            image = np.frombuffer(blob, dtype="<f8", count=count,
                                  offset=offset).reshape(h, w, 3).copy()
        elif render_images:
            image = render(spec)
        scenes.append(LoadedScene(image=image, spec=spec))
    return scenes


# ---------------------------------------------------------------------------
# census


def hoi_class_census(specs: list[SceneSpec]) -> dict[tuple[int, int], int]:
    """Instance counts per (object class, interaction class)."""
    census: dict[tuple[int, int], int] = {}
    for spec in specs:
        for gt in spec.gts:
            key = (gt.obj_class, gt.int_class)
            census[key] = census.get(key, 0) + 1
    return census


def interaction_scene_frequency(specs: list[SceneSpec]) -> dict[int, float]:
    """Fraction of scenes containing each labelable interaction class."""
    counts = dict.fromkeys(range(NUM_INTERACTIONS - 1), 0)
    for spec in specs:
        for int_class in {gt.int_class for gt in spec.gts}:
            counts[int_class] += 1
    n = max(len(specs), 1)
    return {k: v / n for k, v in counts.items()}
