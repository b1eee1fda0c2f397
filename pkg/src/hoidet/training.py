"""Seeded mini-batch training loop shared by the CLI and the test suite.

Batches are index lists drawn from reshuffled epochs of one RNG stream;
the optimized quantity is the weighted sum of batch-averaged loss
components, so each logged total equals the weight/component dot
product exactly. Everything is deterministic under (config, seed).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .autodiff import NumericsError, Tape, backward
from .losses import HOIInstance, LossTensors, batch_total_loss
from .model import ModelConfig, build_params, extract_patches, forward_batch
from .nn import AdamW, ParamStore
from .rng import Rng
from .synth import LoadedScene


@dataclass
class TrainScene:
    patches: np.ndarray  # (T, patch_dim), extracted once
    gts: list[HOIInstance]


def prepare_scenes(loaded: list[LoadedScene], cfg: ModelConfig) -> list[TrainScene]:
    scenes = []
    for item in loaded:
        if item.image is None:
            raise ValueError("scene has no image; load the dataset with render_images=True")
        if item.image.shape != (cfg.image_h, cfg.image_w, cfg.image_c):
            raise ValueError(f"scene canvas {item.image.shape} does not match config "
                             f"({cfg.image_h}, {cfg.image_w}, {cfg.image_c})")
        scenes.append(TrainScene(patches=extract_patches(item.image, cfg.patch_size),
                                 gts=item.spec.instances()))
    return scenes


def batch_iterator(n_scenes: int, batch_size: int, rng: Rng):
    """Endless batches from reshuffled epochs; the tail batch of an
    epoch may be short."""
    while True:
        order = list(range(n_scenes))
        rng.shuffle(order)
        for start in range(0, n_scenes, batch_size):
            yield order[start:start + batch_size]


def batch_loss(store: ParamStore, cfg: ModelConfig, scenes: list[TrainScene],
               indices: list[int]) -> LossTensors:
    """Batched forward + loss; components are batch means."""
    patches = np.stack([scenes[idx].patches for idx in indices], axis=0)
    result = forward_batch(store, cfg, patches)
    return batch_total_loss(result.layers, [scenes[idx].gts for idx in indices], cfg)


def train_loop(cfg: ModelConfig, scenes: list[TrainScene], steps: int,
               batch_size: int, lr_rest: float, lr_encoder: float,
               weight_decay: float, seed: int,
               store: Optional[ParamStore] = None,
               on_step: Optional[Callable[[int, ParamStore, dict], None]] = None,
               ) -> tuple[ParamStore, list[dict]]:
    """Run AdamW for `steps` optimizer steps; returns the store and one
    metrics row per step. Raises NumericsError on a non-finite loss."""
    if not scenes:
        raise ValueError("no training scenes")
    if store is None:
        store = build_params(cfg, seed)
    opt = AdamW(store, lr=lr_rest, weight_decay=weight_decay,
                lr_overrides={"patch_embed": lr_encoder, "encoder": lr_encoder})
    batches = batch_iterator(len(scenes), batch_size, Rng(seed).split("batches"))
    metrics: list[dict] = []
    for step in range(steps):
        indices = next(batches)
        with Tape():
            terms = batch_loss(store, cfg, scenes, indices)
            backward(terms.total)
        # subtrees disabled by ablation flags get no grad from backward
        for _name, p in store.items():
            if p.grad is None:
                p.grad = np.zeros_like(p.data)
        row = {"step": step, "l1": terms.l1.item(), "giou": terms.giou.item(),
               "oc": terms.oc.item(), "ic": terms.ic.item(), "total": terms.total.item()}
        if not np.isfinite(row["total"]):
            raise NumericsError(
                f"non-finite loss at step {step}: l1={row['l1']} giou={row['giou']} "
                f"oc={row['oc']} ic={row['ic']}")
        opt.step()
        metrics.append(row)
        if on_step is not None:
            on_step(step, store, row)
    return store, metrics
