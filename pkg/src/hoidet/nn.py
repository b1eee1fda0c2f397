"""Neural building blocks on top of the autodiff core.

Parameters live in a `ParamStore` under hierarchical dot-separated
names and are initialized deterministically from a per-name RNG stream,
so values depend only on (seed, name, shape), never on creation order.
Blocks are plain functions taking (tensor, store, prefix); pre-norm
residual wiring is used throughout.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import backend as kern
from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import Rng


class MissingGradientError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


class ParamStore:
    """Named trainable tensors; iteration is always lexicographic."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params:
            raise ValueError(f"duplicate parameter name '{name}'")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._params[name]
        except KeyError:
            raise KeyError(f"no parameter named '{name}'") from None

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self):
        return [(n, self._params[n]) for n in sorted(self._params)]

    def names_under(self, prefix: str) -> list[str]:
        dotted = prefix if prefix.endswith(".") else prefix + "."
        return [n for n in sorted(self._params) if n.startswith(dotted) or n == prefix]

    def size(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grads(self) -> None:
        for t in self._params.values():
            t.grad = None

    def as_tensor_dict(self) -> dict[str, Tensor]:
        return dict(self._params)


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(rng: Rng, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -bound, bound)


def add_weight(store: ParamStore, name: str, rng: Rng, fan_in: int, fan_out: int, shape) -> None:
    store.add(name, glorot_uniform(rng.split(name), fan_in, fan_out, shape))


def add_linear_params(store: ParamStore, prefix: str, rng: Rng, d_in: int, d_out: int) -> None:
    add_weight(store, f"{prefix}.weight", rng, d_in, d_out, (d_in, d_out))
    store.add(f"{prefix}.bias", np.zeros(d_out))


def linear(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return ad.add_rowvec(ad.matmul(x, store[f"{prefix}.weight"]), store[f"{prefix}.bias"])


def add_mlp_params(store: ParamStore, prefix: str, rng: Rng, d_in: int, d_out: int,
                   hidden: int | None = None) -> None:
    # two layers; hidden width = output width unless overridden
    h = d_out if hidden is None else hidden
    add_linear_params(store, f"{prefix}.lin1", rng, d_in, h)
    add_linear_params(store, f"{prefix}.lin2", rng, h, d_out)


def mlp(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    h = ad.relu(linear(x, store, f"{prefix}.lin1"))
    return linear(h, store, f"{prefix}.lin2")


def add_layer_norm_params(store: ParamStore, prefix: str, d: int) -> None:
    store.add(f"{prefix}.gain", np.ones(d))
    store.add(f"{prefix}.bias", np.zeros(d))


def layer_normed(x: Tensor, store: ParamStore, prefix: str) -> Tensor:
    return ad.layer_norm(x, store[f"{prefix}.gain"], store[f"{prefix}.bias"])


# ---------------------------------------------------------------------------
# attention


@dataclass
class AttentionWeights:
    """Packed head projections: columns [i*dh:(i+1)*dh] belong to head i."""

    q_proj: Tensor
    k_proj: Tensor
    v_proj: Tensor
    out_proj: Tensor
    heads: int

    def __post_init__(self):
        d = self.q_proj.data.shape[0]
        if d % self.heads != 0:
            raise ShapeError(f"model dim {d} not divisible by {self.heads} heads")


def add_attention_params(store: ParamStore, prefix: str, rng: Rng, d: int) -> None:
    for leaf in ("q_proj", "k_proj", "v_proj", "out_proj"):
        add_weight(store, f"{prefix}.{leaf}", rng, d, d, (d, d))


def attention_weights(store: ParamStore, prefix: str, heads: int) -> AttentionWeights:
    return AttentionWeights(
        q_proj=store[f"{prefix}.q_proj"],
        k_proj=store[f"{prefix}.k_proj"],
        v_proj=store[f"{prefix}.v_proj"],
        out_proj=store[f"{prefix}.out_proj"],
        heads=heads,
    )


def attention(q: Tensor, kv: Tensor, w: AttentionWeights, mode: str = "cross"):
    """Scaled dot-product attention.

    Queries may be [m, D] or batched [B, m, D]; keys/values may be
    [n, D] or [B, n, D] (a 2-d kv is shared across the batch). Returns
    (output, per-head attention matrices); each attention matrix row
    sums to 1.
    """
    if mode not in ("self", "cross"):
        raise ValueError(f"attention mode must be 'self' or 'cross', got {mode!r}")
    if mode == "self" and kv is not q:
        raise ValueError("self-attention requires kv to be the query tensor itself")
    d = w.q_proj.data.shape[0]
    if q.data.shape[-1] != d or kv.data.shape[-1] != d:
        raise ShapeError(f"attention: token dim must be {d}, got q {q.data.shape}, kv {kv.data.shape}")
    dh = d // w.heads
    scale = 1.0 / math.sqrt(dh)
    qp = ad.matmul(q, w.q_proj)
    kp = ad.matmul(kv, w.k_proj)
    vp = ad.matmul(kv, w.v_proj)
    outs = []
    attns = []
    for i in range(w.heads):
        lo, hi = i * dh, (i + 1) * dh
        qh = ad.slice_last(qp, lo, hi)
        kh = ad.slice_last(kp, lo, hi)
        vh = ad.slice_last(vp, lo, hi)
        scores = ad.matmul(qh, ad.transpose2(kh)) * scale
        a = ad.softmax(scores, axis=-1)
        outs.append(ad.matmul(a, vh))
        attns.append(a)
    merged = outs[0] if len(outs) == 1 else ad.concat_last(outs)
    return ad.matmul(merged, w.out_proj), attns


# ---------------------------------------------------------------------------
# transformer layers


def add_encoder_layer_params(store: ParamStore, prefix: str, rng: Rng, d: int) -> None:
    add_layer_norm_params(store, f"{prefix}.ln1", d)
    add_attention_params(store, f"{prefix}.attn", rng, d)
    add_layer_norm_params(store, f"{prefix}.ln2", d)
    add_mlp_params(store, f"{prefix}.mlp", rng, d, d)


def encoder_layer(x: Tensor, store: ParamStore, prefix: str, heads: int) -> Tensor:
    a = layer_normed(x, store, f"{prefix}.ln1")
    x = x + attention(a, a, attention_weights(store, f"{prefix}.attn", heads), mode="self")[0]
    h = layer_normed(x, store, f"{prefix}.ln2")
    return x + mlp(h, store, f"{prefix}.mlp")


def add_decoder_layer_params(store: ParamStore, prefix: str, rng: Rng, d: int) -> None:
    add_layer_norm_params(store, f"{prefix}.ln1", d)
    add_attention_params(store, f"{prefix}.self_attn", rng, d)
    add_layer_norm_params(store, f"{prefix}.ln2", d)
    add_attention_params(store, f"{prefix}.cross_attn", rng, d)
    add_layer_norm_params(store, f"{prefix}.ln3", d)
    add_mlp_params(store, f"{prefix}.mlp", rng, d, d)


def decoder_layer(q: Tensor, tokens: Tensor, store: ParamStore, prefix: str, heads: int):
    """Self-attention, cross-attention into `tokens`, MLP; all pre-norm
    residual. Returns (output, per-head cross-attention matrices)."""
    a = layer_normed(q, store, f"{prefix}.ln1")
    q = q + attention(a, a, attention_weights(store, f"{prefix}.self_attn", heads), mode="self")[0]
    b = layer_normed(q, store, f"{prefix}.ln2")
    cross_out, cross_attn = attention(
        b, tokens, attention_weights(store, f"{prefix}.cross_attn", heads), mode="cross")
    q = q + cross_out
    h = layer_normed(q, store, f"{prefix}.ln3")
    return q + mlp(h, store, f"{prefix}.mlp"), cross_attn


def positional_encoding(grid_h: int, grid_w: int, d: int) -> np.ndarray:
    """2-d sinusoidal encoding over a patch grid, token order row-major.

    First d/2 channels encode the row index, last d/2 the column index;
    within each half, even channels are sin and odd are cos over
    geometrically spaced frequencies.
    """
    if d % 4 != 0:
        raise ShapeError(f"positional encoding needs d divisible by 4, got {d}")
    half = d // 2
    dim_t = 10000.0 ** (2.0 * (np.arange(half) // 2) / half)
    ys, xs = np.meshgrid(np.arange(grid_h, dtype=np.float64),
                         np.arange(grid_w, dtype=np.float64), indexing="ij")
    out = np.empty((grid_h * grid_w, d))
    for flat_pos, half_slice in ((ys.reshape(-1), slice(0, half)), (xs.reshape(-1), slice(half, d))):
        args = flat_pos[:, None] / dim_t[None, :]
        block = np.where(np.arange(half) % 2 == 0, np.sin(args), np.cos(args))
        out[:, half_slice] = block
    return out


# ---------------------------------------------------------------------------
# optimizer


class AdamW:
    """Decoupled weight decay plus bias-corrected moment update.

    `lr_overrides` maps name prefixes to learning rates (longest match
    wins); everything else uses `lr`. Gradients must be populated for
    every parameter and are cleared after the step.
    """

    def __init__(self, store: ParamStore, lr: float = 1e-4, weight_decay: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 lr_overrides: dict[str, float] | None = None):
        self.store = store
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(t.data) for name, t in store.items()}
        self.v = {name: np.zeros_like(t.data) for name, t in store.items()}
        overrides = lr_overrides or {}
        self.lr_by_name: dict[str, float] = {}
        for name, _ in store.items():
            chosen = lr
            best_len = -1
            for prefix, rate in overrides.items():
                if (name == prefix or name.startswith(prefix + ".")) and len(prefix) > best_len:
                    chosen = rate
                    best_len = len(prefix)
            self.lr_by_name[name] = chosen

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.store.items():
            g = p.grad
            if g is None:
                raise MissingGradientError(f"parameter '{name}' has no gradient")
            kern.adamw_update(p.data, np.ascontiguousarray(g), self.m[name], self.v[name],
                              self.lr_by_name[name], self.beta1, self.beta2, self.eps,
                              self.weight_decay, self.step_count)
            p.grad = None


def adamw_step(store: ParamStore, opt: AdamW) -> None:
    if opt.store is not store:
        raise ValueError("optimizer was built for a different store")
    opt.step()


# ---------------------------------------------------------------------------
# checkpoints


CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_WEIGHTS = "weights.bin"
_CHECKPOINT_VERSION = 1


def save_checkpoint(store: ParamStore, path: str) -> None:
    """Write `manifest.json` + `weights.bin` (little-endian float64,
    parameters concatenated in lexicographic name order)."""
    os.makedirs(path, exist_ok=True)
    entries = []
    blobs = []
    offset = 0
    for name, p in store.items():
        raw = p.data.astype("<f8", copy=False).tobytes(order="C")
        entries.append({"name": name, "shape": list(p.data.shape),
                        "offset": offset, "count": int(p.data.size)})
        blobs.append(raw)
        offset += len(raw)
    manifest = {"format_version": _CHECKPOINT_VERSION, "params": entries}
    with open(os.path.join(path, CHECKPOINT_MANIFEST), "w", encoding="utf-8") as fh:
        fh.write(json.dumps(manifest, separators=(",", ":")) + "\n")
    with open(os.path.join(path, CHECKPOINT_WEIGHTS), "wb") as fh:
        fh.write(b"".join(blobs))


def load_checkpoint(path: str, expected_shapes: dict[str, tuple[int, ...]] | None = None) -> ParamStore:
    manifest_path = os.path.join(path, CHECKPOINT_MANIFEST)
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest at {manifest_path}: {exc}") from exc
    version = manifest.get("format_version")
    if version != _CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}, expected {_CHECKPOINT_VERSION}")
    entries = manifest.get("params")
    if not isinstance(entries, list):
        raise CheckpointError("checkpoint manifest has no 'params' list")
    expected_offset = 0
    for e in entries:
        if e["count"] != int(np.prod(e["shape"])):
            raise CheckpointError(f"corrupt manifest: count of '{e['name']}' does not match its shape")
        if e["offset"] != expected_offset:
            raise CheckpointError(f"corrupt manifest: offset of '{e['name']}' is not contiguous")
        expected_offset += e["count"] * 8
    weights_path = os.path.join(path, CHECKPOINT_WEIGHTS)
    try:
        with open(weights_path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint weights at {weights_path}: {exc}") from exc
    if len(blob) != expected_offset:
        raise CheckpointError(
            f"truncated checkpoint: weights.bin holds {len(blob)} bytes, manifest expects {expected_offset}")
    if expected_shapes is not None:
        stored = {e["name"]: tuple(e["shape"]) for e in entries}
        for name in sorted(set(stored) | set(expected_shapes)):
            if name not in stored:
                raise CheckpointError(f"checkpoint/config mismatch at '{name}': missing from checkpoint")
            if name not in expected_shapes:
                raise CheckpointError(f"checkpoint/config mismatch at '{name}': not part of this config")
            if stored[name] != tuple(expected_shapes[name]):
                raise CheckpointError(
                    f"checkpoint/config mismatch at '{name}': stored shape {stored[name]}, "
                    f"config expects {tuple(expected_shapes[name])}")
    store = ParamStore()
    for e in entries:
        arr = np.frombuffer(blob, dtype="<f8", count=e["count"], offset=e["offset"])
        store.add(e["name"], arr.reshape(e["shape"]))
    return store
