"""Command-line entry point.

Subcommands: `synth` (dataset generation), `train`, `eval`,
`gradcheck` (finite-difference verification of every parameter group),
`dump-attn` (attention-map images). Exit codes: 0 success, 1 usage or
config error, 2 numeric failure (non-finite loss, gradient check above
tolerance).

The config file is JSON: {"profile": "toy"|"paper", "model": {...},
"train": {...}}; the profile supplies defaults, explicit keys override,
unknown keys are rejected before any file is written.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from .autodiff import NumericsError, grad_check
from . import autodiff as ad
from . import losses as L
from . import nn
from .evaluation import decode_topk, evaluate
from .losses import HOIInstance
from .matching import MatchingError
from .model import (BRANCHES, ConfigError, ModelConfig, build_params,
                    expected_shapes, extract_patches, forward)
from .nn import CheckpointError, ParamStore, load_checkpoint, save_checkpoint
from .rng import Rng
from .synth import (DatasetError, GenerationError, INTERACTION_NAMES,
                    _px_rect, generate_scene, hoi_class_census,
                    interaction_scene_frequency, load_dataset, save_dataset)
from .training import prepare_scenes, train_loop

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2

_MODEL_FIELDS = {f.name for f in dataclasses.fields(ModelConfig)}


class _UsageError(Exception):
    pass


@dataclass
class RunConfig:
    """Model config plus everything a run needs."""

    model: ModelConfig
    steps: int = 1000
    batch_size: int = 8
    lr_rest: float = 1e-4
    lr_encoder: float | None = None  # defaults to lr_rest / 10
    weight_decay: float = 1e-4
    seed: int = 0
    train_data: str | None = None
    eval_data: str | None = None
    checkpoint: str | None = None
    k: int | None = None  # defaults to model.top_k
    save_every: int | None = None
    metrics: str | None = None

    def __post_init__(self):
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr_rest <= 0 or (self.lr_encoder is not None and self.lr_encoder <= 0):
            raise ConfigError("learning rates must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.save_every is not None and self.save_every < 1:
            raise ConfigError("save_every must be >= 1")

    @property
    def lr_encoder_value(self) -> float:
        return self.lr_encoder if self.lr_encoder is not None else self.lr_rest / 10.0

    @property
    def k_value(self) -> int:
        return self.k if self.k is not None else self.model.top_k


_TRAIN_FIELDS = {f.name for f in dataclasses.fields(RunConfig)} - {"model"}


def load_run_config(path: str | None, args=None) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(raw) - {"profile", "model", "train"}
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    profile = raw.get("profile", "toy")
    if profile not in ("toy", "paper"):
        raise ConfigError(f"profile must be 'toy' or 'paper', got {profile!r}")
    model_over = raw.get("model", {})
    if not isinstance(model_over, dict):
        raise ConfigError("'model' section must be an object")
    unknown = set(model_over) - _MODEL_FIELDS
    if unknown:
        raise ConfigError(f"unknown model fields {sorted(unknown)}")
    model = ModelConfig.toy(**model_over) if profile == "toy" else ModelConfig(**model_over)
    train_over = raw.get("train", {})
    if not isinstance(train_over, dict):
        raise ConfigError("'train' section must be an object")
    unknown = set(train_over) - _TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"unknown train fields {sorted(unknown)}")
    rc = RunConfig(model=model, **train_over)
    if args is not None:
        if getattr(args, "seed", None) is not None:
            rc.seed = args.seed
            rc.__post_init__()
        if getattr(args, "steps", None) is not None:
            rc.steps = args.steps
            rc.__post_init__()
        if getattr(args, "k", None) is not None:
            rc.k = args.k
            rc.__post_init__()
        if getattr(args, "checkpoint", None) is not None:
            rc.checkpoint = args.checkpoint
    return rc


# ---------------------------------------------------------------------------
# image writers


def write_pgm(path: str, arr: np.ndarray) -> None:
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def write_ppm(path: str, arr: np.ndarray) -> None:
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.astype(np.uint8).tobytes())


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi <= lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.floor((m - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def _draw_outline(img: np.ndarray, box, color) -> None:
    h, w = img.shape[:2]
    y0, y1, x0, x1 = _px_rect(box, h, w)
    img[y0:y1, x0] = color
    img[y0:y1, x1 - 1] = color
    img[y0, x0:x1] = color
    img[y1 - 1, x0:x1] = color


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    rc = load_run_config(args.config, args)
    if args.out is None:
        raise ConfigError("synth requires --out")
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    canvas = (rc.model.image_h, rc.model.image_w)
    seeds = Rng(rc.seed).split("scene-seeds")
    specs = [generate_scene(seeds.split(i).integers(1 << 63), canvas=canvas)
             for i in range(args.count)]
    save_dataset(specs, args.out, include_pixels=args.pixels)
    freq = interaction_scene_frequency(specs)
    print(f"wrote {len(specs)} scenes to {args.out}")
    for int_class, share in sorted(freq.items()):
        print(f"interaction {int_class} ({INTERACTION_NAMES[int_class]}): "
              f"{share:.1%} of scenes")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = load_run_config(args.config, args)
    if rc.train_data is None:
        raise ConfigError("train requires train_data in the config")
    if rc.checkpoint is None:
        raise ConfigError("train requires a checkpoint path (config or --checkpoint)")
    scenes = prepare_scenes(load_dataset(rc.train_data), rc.model)
    metrics_path = args.out or rc.metrics or os.path.join(rc.checkpoint, "metrics.jsonl")

    def on_step(step, store, _row):
        if rc.save_every is not None and (step + 1) % rc.save_every == 0:
            save_checkpoint(store, rc.checkpoint)

    store, metrics = train_loop(
        rc.model, scenes, steps=rc.steps, batch_size=rc.batch_size,
        lr_rest=rc.lr_rest, lr_encoder=rc.lr_encoder_value,
        weight_decay=rc.weight_decay, seed=rc.seed, on_step=on_step)
    save_checkpoint(store, rc.checkpoint)
    os.makedirs(os.path.dirname(os.path.abspath(metrics_path)), exist_ok=True)
    with open(metrics_path, "w", encoding="utf-8") as fh:
        for row in metrics:
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    final = metrics[-1]["total"] if metrics else float("nan")
    print(f"trained {rc.steps} steps; final total loss {final}; "
          f"checkpoint at {rc.checkpoint}; metrics at {metrics_path}")
    return EXIT_OK


def _run_inference(rc: RunConfig, store: ParamStore, scenes) -> tuple[list, list]:
    per_image_preds = []
    per_image_gts = []
    for item in scenes:
        patches = extract_patches(item.image, rc.model.patch_size)
        result = forward(store, rc.model, patches)
        per_image_preds.append(decode_topk(result.final, rc.k_value,
                                           rc.model.num_obj_classes))
        per_image_gts.append(item.spec.instances())
    return per_image_preds, per_image_gts


def cmd_eval(args) -> int:
    rc = load_run_config(args.config, args)
    if rc.checkpoint is None:
        raise ConfigError("eval requires a checkpoint path (config or --checkpoint)")
    if rc.eval_data is None:
        raise ConfigError("eval requires eval_data in the config")
    store = load_checkpoint(rc.checkpoint, expected_shapes(rc.model))
    scenes = load_dataset(rc.eval_data)
    if not scenes:
        raise DatasetError(f"empty dataset: {rc.eval_data}")
    census = None
    if rc.train_data is not None:
        census = hoi_class_census([s.spec for s in load_dataset(rc.train_data,
                                                                render_images=False)])
    preds, gts = _run_inference(rc, store, scenes)
    report = evaluate(preds, gts, train_census=census)
    out = args.out or "eval_report.json"
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(report.to_json(), separators=(",", ":")) + "\n")
    print(f"mAP full: {report.map_full:.4f}"
          + (f", mAP rare: {report.map_rare:.4f}" if report.map_rare is not None else "")
          + f"; report at {out}")
    return EXIT_OK


# -- gradient checking ------------------------------------------------------


def _block_checks(rng: Rng):
    """Isolated gradient checks for every differentiable block."""
    import typing

    def t(shape, stream, scale=1.0):
        return ad.Tensor(rng.split(stream).uniform(shape, -scale, scale), requires_grad=True)

    checks: list[tuple[str, typing.Callable, dict]] = []

    w_mix = Rng(7).uniform((3, 5), -1, 1)
    checks.append(("matmul", lambda ts: ad.sum_all(ad.mul(ad.matmul(ts["a"], ts["b"]), ad.Tensor(w_mix))),
                   {"a": t((3, 4), "mm.a"), "b": t((4, 5), "mm.b")}))

    def elementwise_f(ts):
        x, y = ts["x"], ts["y"]
        z = ad.relu(x) * ad.sigmoid(y) + ad.absolute(x - y) * 0.5
        z = z + ad.power(ad.sigmoid(x), 3.0) + ad.log(ad.sigmoid(y) + 0.1)
        z = z + ad.maximum(x, y) - ad.minimum(x, y) + ad.div(x, ad.sigmoid(y) + 1.5)
        return ad.mean_all(ad.concat_last([z, x * y]))

    checks.append(("elementwise", elementwise_f, {"x": t((4, 3), "ew.x"), "y": t((4, 3), "ew.y")}))

    w_soft = Rng(11).uniform((5, 6), -1, 1)
    checks.append(("softmax", lambda ts: ad.sum_all(ad.mul(ad.softmax(ts["x"], axis=-1), ad.Tensor(w_soft))),
                   {"x": t((5, 6), "sm.x", 2.0)}))

    w_ln = Rng(13).uniform((6, 8), -1, 1)
    checks.append(("layer_norm",
                   lambda ts: ad.sum_all(ad.mul(ad.layer_norm(ts["x"], ts["g"], ts["b"]), ad.Tensor(w_ln))),
                   {"x": t((6, 8), "ln.x", 2.0), "g": t((8,), "ln.g"), "b": t((8,), "ln.b")}))

    w_g = Rng(17).uniform((5, 1), -1, 1)
    checks.append(("giou",
                   lambda ts: ad.sum_all(ad.mul(L.giou_pairs(ad.sigmoid(ts["p"]), ad.sigmoid(ts["q"])),
                                                ad.Tensor(w_g))),
                   {"p": t((5, 4), "gi.p"), "q": t((5, 4), "gi.q")}))
    return checks


def _store_check(name: str, store: ParamStore, f) -> tuple[str, object, dict]:
    return name, f, store.as_tensor_dict()


def _model_block_checks(rng: Rng):
    """Blocks that own parameters: mlp, attention, encoder/decoder
    layers, relation module, fusion, heads."""
    d = 8
    cfg = ModelConfig.micro()
    checks = []

    s = ParamStore()
    nn.add_mlp_params(s, "mlp", rng, 6, 4)
    x = ad.Tensor(rng.split("mlp.x").uniform((3, 6), -1, 1))
    checks.append(_store_check("mlp", s, lambda ts, s=s, x=x: ad.sum_all(nn.mlp(x, s, "mlp"))))

    s = ParamStore()
    nn.add_attention_params(s, "attn", rng, d)
    q = ad.Tensor(rng.split("attn.q").uniform((3, d), -1, 1))
    kv = ad.Tensor(rng.split("attn.kv").uniform((5, d), -1, 1))
    checks.append(_store_check(
        "attention", s,
        lambda ts, s=s: ad.sum_all(nn.attention(q, kv, nn.attention_weights(s, "attn", 2))[0])))

    s = ParamStore()
    nn.add_attention_params(s, "battn", rng, d)
    qb = ad.Tensor(rng.split("battn.q").uniform((4, 1, d), -1, 1))
    kvb = ad.Tensor(rng.split("battn.kv").uniform((4, 3, d), -1, 1))
    checks.append(_store_check(
        "attention_batched", s,
        lambda ts, s=s: ad.sum_all(nn.attention(qb, kvb, nn.attention_weights(s, "battn", 2))[0])))

    s = ParamStore()
    nn.add_encoder_layer_params(s, "enc", rng, d)
    xe = ad.Tensor(rng.split("enc.x").uniform((4, d), -1, 1))
    checks.append(_store_check(
        "encoder_layer", s, lambda ts, s=s: ad.sum_all(nn.encoder_layer(xe, s, "enc", 2))))

    s = ParamStore()
    nn.add_decoder_layer_params(s, "dec", rng, d)
    qd = ad.Tensor(rng.split("dec.q").uniform((2, d), -1, 1))
    xd = ad.Tensor(rng.split("dec.x").uniform((4, d), -1, 1))
    checks.append(_store_check(
        "decoder_layer", s, lambda ts, s=s: ad.sum_all(nn.decoder_layer(qd, xd, s, "dec", 2)[0])))

    from .model import fuse_context, predict_heads, relation_context

    s = build_params(cfg, seed=3)
    fh = ad.Tensor(rng.split("rel.fh").uniform((2, d), -1, 1))
    fo = ad.Tensor(rng.split("rel.fo").uniform((2, d), -1, 1))
    fi = ad.Tensor(rng.split("rel.fi").uniform((2, d), -1, 1))
    xt = ad.Tensor(rng.split("rel.x").uniform((4, d), -1, 1))
    rel_names = {n: s[n] for n in s.names() if n.startswith("relation.0.")}
    checks.append(("relation", lambda ts, s=s: ad.sum_all(
        relation_context(fh, fo, fi, xt, s, cfg, 0)[0]), rel_names))

    fuse_names = {n: s[n] for n in s.names() if n.startswith("fusion.human.0.")}
    m = ad.Tensor(rng.split("fuse.m").uniform((2, d), -1, 1))
    checks.append(("fusion", lambda ts, s=s: ad.sum_all(
        fuse_context(fh, m, s, cfg, "human", 0)), fuse_names))

    def heads_f(ts, s=s):
        preds = predict_heads(fh, fo, fi, s, cfg)
        parts = [preds.human_box, preds.object_box, preds.object_prob,
                 preds.interaction_prob]
        return ad.sum_all(ad.concat_last([ad.mul(p, ad.Tensor(Rng(23 + i).uniform(p.shape, -1, 1)))
                                          for i, p in enumerate(parts)]))

    head_names = {n: s[n] for n in s.names() if n.startswith("heads.")}
    checks.append(("heads", heads_f, head_names))
    return checks


def _full_model_check(cfg: ModelConfig, seed: int, tolerance: float):
    """Gradient-check the whole forward + loss against central
    differences, with the per-layer matching frozen at the base point."""
    store = build_params(cfg, seed)
    rng = Rng(seed).split("gradcheck")
    image = rng.split("image").uniform((cfg.image_h, cfg.image_w, cfg.image_c), 0.0, 1.0)
    patches = extract_patches(image, cfg.patch_size)
    gts = [
        HOIInstance(human_box=(0.3, 0.4, 0.25, 0.35), object_box=(0.55, 0.6, 0.2, 0.2),
                    obj_class=0, int_class=1),
        HOIInstance(human_box=(0.7, 0.3, 0.2, 0.3), object_box=(0.3, 0.75, 0.25, 0.2),
                    obj_class=cfg.num_obj_classes - 1, int_class=0),
    ]
    base = forward(store, cfg, patches)
    matches = [L.match_layer(preds, gts, cfg) for preds in base.layers]

    def f(_tensors):
        result = forward(store, cfg, patches)
        terms, _ = L.total_loss(result.layers, gts, cfg, matches=matches)
        return terms.total

    return grad_check(f, store.as_tensor_dict(), tolerance=tolerance)


def group_errors(errors: dict[str, float]) -> dict[str, float]:
    groups: dict[str, float] = {}
    for name, err in errors.items():
        group = name.rsplit(".", 1)[0] if "." in name else name
        groups[group] = max(groups.get(group, 0.0), err)
    return groups


def cmd_gradcheck(args) -> int:
    if args.config is not None:
        cfg = load_run_config(args.config, args).model
    else:
        cfg = ModelConfig.micro()
    tol = 1e-4
    rng = Rng(args.seed if args.seed is not None else 0).split("blocks")
    failed = False
    for name, f, tensors in _block_checks(rng) + _model_block_checks(rng):
        report = grad_check(f, tensors, tolerance=tol)
        status = "PASS" if report.passed else "FAIL"
        failed = failed or not report.passed
        print(f"block {name}: worst rel_err {report.worst:.3e} {status}")
    report = _full_model_check(cfg, seed=args.seed if args.seed is not None else 0,
                               tolerance=tol)
    for group, err in sorted(group_errors(report.errors).items()):
        status = "PASS" if err <= tol else "FAIL"
        failed = failed or err > tol
        print(f"group {group}: worst rel_err {err:.3e} {status}")
    print(f"full model worst rel_err {report.worst:.3e} "
          + ("PASS" if report.passed and not failed else "FAIL"))
    return EXIT_OK if (report.passed and not failed) else EXIT_NUMERIC


def cmd_dump_attn(args) -> int:
    rc = load_run_config(args.config, args)
    if rc.checkpoint is None:
        raise ConfigError("dump-attn requires a checkpoint path (config or --checkpoint)")
    data_path = rc.eval_data or rc.train_data
    if data_path is None:
        raise ConfigError("dump-attn requires eval_data or train_data in the config")
    if args.out is None:
        raise ConfigError("dump-attn requires --out (output directory)")
    store = load_checkpoint(rc.checkpoint, expected_shapes(rc.model))
    scenes = load_dataset(data_path)
    if not 0 <= args.index < len(scenes):
        raise ConfigError(f"--index {args.index} out of range for dataset of {len(scenes)} scenes")
    item = scenes[args.index]
    cfg = rc.model
    result = forward(store, cfg, extract_patches(item.image, cfg.patch_size),
                     collect_trace=True)
    os.makedirs(args.out, exist_ok=True)
    grid = (cfg.grid_h, cfg.grid_w)
    written = []

    def dump_maps(tag: str, attn: np.ndarray) -> None:
        # attn: (heads, N, T); rows must be softmax-normalized
        sums = attn.sum(axis=-1)
        if not np.allclose(sums, 1.0, atol=1e-9):
            raise NumericsError(f"{tag}: attention rows do not sum to 1")
        mean = attn.mean(axis=0)
        for q in range(mean.shape[0]):
            path = os.path.join(args.out, f"{tag}_q{q:02d}.pgm")
            write_pgm(path, normalize_map(mean[q].reshape(grid)))
            written.append(path)

    last = cfg.branch_layers - 1
    for br in BRANCHES:
        dump_maps(f"branch_{br}", result.trace.branch_cross_attn[br][last])
    rel = result.trace.relation[last]
    if rel is not None and rel.image_attn is not None:
        dump_maps("relation", rel.image_attn)
    scene_img = np.floor(np.clip(item.image, 0.0, 1.0) * 255.0 + 0.5)
    for inst in decode_topk(result.final, rc.k_value, cfg.num_obj_classes):
        _draw_outline(scene_img, inst.human_box, (0.0, 0.0, 0.0))
        _draw_outline(scene_img, inst.object_box, (255.0, 255.0, 255.0))
    scene_path = os.path.join(args.out, "scene.ppm")
    write_ppm(scene_path, scene_img)
    written.append(scene_path)
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def build_parser() -> _Parser:
    parser = _Parser(prog="hoidet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", type=str, default=None)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", type=str, default=None)
        p.add_argument("--checkpoint", type=str, default=None)
        p.add_argument("--k", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    common(p)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--pixels", action="store_true", help="also store rendered pixels")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-attn", help="write attention maps and the decoded scene")
    common(p)
    p.add_argument("--index", type=int, default=0)
    p.set_defaults(func=cmd_dump_attn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except (ConfigError, DatasetError, CheckpointError, GenerationError,
            MatchingError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
