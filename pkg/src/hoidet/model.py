"""Three-branch set-prediction architecture with relational context
exchange.

Per layer, each branch refines its queries through a decoder layer over
the image tokens; a relation module then builds one context vector per
query slot from the three branch tokens (ternary concat-MLP, optional
unary and pairwise attention stages, final cross-attention into the
image tokens), and a gated fusion adds the context back into each
branch that has propagation enabled. Shared FFN heads decode every
layer's tokens for intermediate supervision.

All ablation switches gate dataflow only: the full parameter set exists
for any flag combination (so disabled subtrees verifiably receive zero
gradient). The one exception is `fusion_conditioning`, which changes
the fusion MLP input width and therefore parameter shapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import ShapeError, Tensor
from .nn import ParamStore
from .rng import Rng

BRANCHES = ("human", "object", "interaction")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture shape, loss weights, and ablation flags.

    Bare defaults document the full-scale reference setup (6 branch
    layers, weights 2.5/1/1/1); `toy()` is the desk-scale profile used
    by tests and `micro()` the smallest gradient-checkable one.
    """

    d_model: int = 256
    patch_size: int = 16
    image_h: int = 256
    image_w: int = 256
    image_c: int = 3
    encoder_layers: int = 6
    branch_layers: int = 6
    num_queries: int = 64
    num_heads: int = 8
    num_obj_classes: int = 4
    num_interactions: int = 5
    top_k: int = 100
    w_l1: float = 2.5
    w_giou: float = 1.0
    w_obj: float = 1.0
    w_int: float = 1.0
    use_ternary: bool = True
    use_unary: bool = True
    use_pairwise: bool = True
    propagate_human: bool = True
    propagate_object: bool = True
    propagate_interaction: bool = True
    fusion_conditioning: bool = True
    fusion_channel: bool = True
    bare_relation_attention: bool = False
    bg_class_weight: float = 0.1
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "patch_size", "image_h", "image_w", "image_c",
                     "branch_layers", "num_queries", "num_heads", "num_obj_classes",
                     "num_interactions", "top_k"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.encoder_layers < 0:
            raise ConfigError("encoder_layers must be >= 0")
        if self.image_h % self.patch_size or self.image_w % self.patch_size:
            raise ConfigError(
                f"image {self.image_h}x{self.image_w} not divisible by patch size {self.patch_size}")
        if self.d_model % (4 * self.num_heads):
            raise ConfigError(
                f"d_model {self.d_model} must be divisible by 4*num_heads ({4 * self.num_heads})")
        if (self.use_unary or self.use_pairwise) and not self.use_ternary:
            raise ConfigError("unary/pairwise relation stages embed into the ternary context; "
                              "enable use_ternary")
        if self.any_propagation and not self.use_ternary:
            raise ConfigError("context propagation requires use_ternary (no context to propagate)")
        for name in ("w_l1", "w_giou", "w_obj", "w_int", "bg_class_weight",
                     "focal_alpha", "focal_gamma"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    @property
    def grid_h(self) -> int:
        return self.image_h // self.patch_size

    @property
    def grid_w(self) -> int:
        return self.image_w // self.patch_size

    @property
    def num_tokens(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.image_c

    @property
    def any_propagation(self) -> bool:
        return self.propagate_human or self.propagate_object or self.propagate_interaction

    @property
    def exchange_active(self) -> bool:
        return self.use_ternary and self.any_propagation

    def propagates(self, branch: str) -> bool:
        return getattr(self, f"propagate_{branch}")

    @classmethod
    def toy(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=32, patch_size=8, image_h=64, image_w=64, image_c=3,
                    encoder_layers=2, branch_layers=2, num_queries=8, num_heads=2,
                    num_obj_classes=4, num_interactions=5, top_k=16)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        base = dict(d_model=8, patch_size=8, image_h=16, image_w=16, image_c=3,
                    encoder_layers=1, branch_layers=1, num_queries=2, num_heads=2,
                    num_obj_classes=2, num_interactions=2, top_k=4)
        base.update(overrides)
        return cls(**base)

    def with_flags(self, **flags) -> "ModelConfig":
        return replace(self, **flags)


# ---------------------------------------------------------------------------
# parameters


def build_params(cfg: ModelConfig, seed: int) -> ParamStore:
    """Create every parameter of the architecture. Values depend only on
    (seed, name, shape); boolean ablation flags do not change the census."""
    rng = Rng(seed).split("params")
    store = ParamStore()
    d = cfg.d_model
    nn.add_linear_params(store, "patch_embed", rng, cfg.patch_dim, d)
    for e in range(cfg.encoder_layers):
        nn.add_encoder_layer_params(store, f"encoder.{e}", rng, d)
    for br in BRANCHES:
        nn.add_weight(store, f"queries.{br}", rng, d, d, (cfg.num_queries, d))
        for l in range(cfg.branch_layers):
            nn.add_decoder_layer_params(store, f"branch.{br}.{l}", rng, d)
    fusion_in = 2 * d if cfg.fusion_conditioning else d
    for l in range(cfg.branch_layers):
        p = f"relation.{l}"
        nn.add_mlp_params(store, f"{p}.ternary", rng, 3 * d, d)
        nn.add_layer_norm_params(store, f"{p}.unary_self_ln", d)
        nn.add_attention_params(store, f"{p}.unary_self_attn", rng, d)
        nn.add_layer_norm_params(store, f"{p}.unary_cross_ln", d)
        nn.add_attention_params(store, f"{p}.unary_cross_attn", rng, d)
        for pair in ("ho", "hi", "oi"):
            nn.add_mlp_params(store, f"{p}.pair_{pair}", rng, 2 * d, d)
        nn.add_layer_norm_params(store, f"{p}.pair_self_ln", d)
        nn.add_attention_params(store, f"{p}.pair_self_attn", rng, d)
        nn.add_layer_norm_params(store, f"{p}.pair_cross_ln", d)
        nn.add_attention_params(store, f"{p}.pair_cross_attn", rng, d)
        nn.add_layer_norm_params(store, f"{p}.image_ln", d)
        nn.add_attention_params(store, f"{p}.image_attn", rng, d)
        for br in BRANCHES:
            nn.add_mlp_params(store, f"fusion.{br}.{l}.gate", rng, fusion_in, d)
            nn.add_mlp_params(store, f"fusion.{br}.{l}.value", rng, fusion_in, d)
    # narrow outputs keep the full model width in the hidden layer; a
    # 4-unit hidden bottleneck stalls box regression at desk scale
    nn.add_mlp_params(store, "heads.human_box", rng, d, 4, hidden=d)
    nn.add_mlp_params(store, "heads.object_box", rng, d, 4, hidden=d)
    nn.add_mlp_params(store, "heads.object_class", rng, d, cfg.num_obj_classes + 1, hidden=d)
    nn.add_mlp_params(store, "heads.interaction", rng, d, cfg.num_interactions, hidden=d)
    return store


def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    probe = build_params(cfg, seed=0)
    return {name: t.data.shape for name, t in probe.items()}


# ---------------------------------------------------------------------------
# image encoding

_POSENC_CACHE: dict[tuple[int, int, int], np.ndarray] = {}


def _posenc(cfg: ModelConfig) -> np.ndarray:
    key = (cfg.grid_h, cfg.grid_w, cfg.d_model)
    if key not in _POSENC_CACHE:
        _POSENC_CACHE[key] = nn.positional_encoding(*key)
    return _POSENC_CACHE[key]


def extract_patches(image: np.ndarray, patch: int) -> np.ndarray:
    """(H, W, C) image -> (T, patch*patch*C) rows in row-major grid order."""
    h, w, c = image.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    tiles = image.reshape(gh, patch, gw, patch, c).transpose(0, 2, 1, 3, 4)
    return np.ascontiguousarray(tiles.reshape(gh * gw, patch * patch * c))


def encode_image(image, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Patch-embed, add positional encoding, run the encoder stack.

    `image` is either an (H, W, C) array or pre-extracted patch rows of
    shape (T, patch_dim).
    """
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3:
        if arr.shape != (cfg.image_h, cfg.image_w, cfg.image_c):
            raise ShapeError(f"image shape {arr.shape} does not match config "
                             f"({cfg.image_h}, {cfg.image_w}, {cfg.image_c})")
        arr = extract_patches(arr, cfg.patch_size)
    if arr.shape != (cfg.num_tokens, cfg.patch_dim):
        raise ShapeError(f"patch matrix shape {arr.shape}, expected "
                         f"({cfg.num_tokens}, {cfg.patch_dim})")
    x = nn.linear(Tensor(arr), store, "patch_embed") + Tensor(_posenc(cfg))
    for e in range(cfg.encoder_layers):
        x = nn.encoder_layer(x, store, f"encoder.{e}", cfg.num_heads)
    return x


# ---------------------------------------------------------------------------
# relation context


@dataclass
class RelationTrace:
    """Intermediates of one relation-module application (detached)."""

    ternary: np.ndarray
    after_unary: np.ndarray
    after_pairwise: np.ndarray
    context: np.ndarray
    unary_tokens: Optional[np.ndarray] = None
    pair_tokens: Optional[np.ndarray] = None
    unary_self_attn: Optional[np.ndarray] = None
    unary_cross_attn: Optional[np.ndarray] = None
    pair_self_attn: Optional[np.ndarray] = None
    pair_cross_attn: Optional[np.ndarray] = None
    image_attn: Optional[np.ndarray] = None


def _stack_attn(attns) -> np.ndarray:
    return np.stack([a.data for a in attns], axis=0)


def _self_block(tokens: Tensor, store, prefix: str, ln_prefix: str, cfg: ModelConfig):
    w = nn.attention_weights(store, prefix, cfg.num_heads)
    if cfg.bare_relation_attention:
        return nn.attention(tokens, tokens, w, mode="self")
    a = nn.layer_normed(tokens, store, ln_prefix)
    out, attn = nn.attention(a, a, w, mode="self")
    return tokens + out, attn


def _cross_block(q: Tensor, kv: Tensor, store, prefix: str, ln_prefix: str, cfg: ModelConfig):
    w = nn.attention_weights(store, prefix, cfg.num_heads)
    if cfg.bare_relation_attention:
        return nn.attention(q, kv, w, mode="cross")
    a = nn.layer_normed(q, store, ln_prefix)
    out, attn = nn.attention(a, kv, w, mode="cross")
    return q + out, attn


def relation_context(f_h: Tensor, f_o: Tensor, f_i: Tensor, tokens: Tensor,
                     store: ParamStore, cfg: ModelConfig, layer: int,
                     collect_trace: bool = False):
    """Build one context vector per query slot from the three branch
    tokens (ternary concat-MLP, optional unary/pairwise attention
    stages, cross-attention into the image tokens).

    With `bare_relation_attention` the attention stages run without
    residual/normalization wrappers; the concat-MLPs change width and
    never carry residuals in either mode. Everything is batched over
    the query index, so slot i only ever sees tokens of slot i plus the
    shared image tokens.
    """
    p = f"relation.{layer}"
    d = f_h.data.shape[-1]
    lead = f_h.data.shape[:-1]  # (N,) per image, (B, N) batched
    slots = int(np.prod(lead))
    cat3 = ad.concat_last([f_h, f_o, f_i])
    cur = nn.mlp(cat3, store, f"{p}.ternary")
    trace_vals = {"ternary": cur.data.copy()} if collect_trace else None

    if cfg.use_unary:
        set3 = ad.reshape(cat3, (slots, 3, d))
        unary, self_attn = _self_block(set3, store, f"{p}.unary_self_attn",
                                       f"{p}.unary_self_ln", cfg)
        q3 = ad.reshape(cur, (slots, 1, d))
        out3, cross_attn = _cross_block(q3, unary, store, f"{p}.unary_cross_attn",
                                        f"{p}.unary_cross_ln", cfg)
        cur = ad.reshape(out3, lead + (d,))
        if collect_trace:
            trace_vals.update(unary_tokens=unary.data.copy(),
                              unary_self_attn=_stack_attn(self_attn),
                              unary_cross_attn=_stack_attn(cross_attn))
    if collect_trace:
        trace_vals["after_unary"] = cur.data.copy()

    if cfg.use_pairwise:
        pair_ho = nn.mlp(ad.concat_last([f_h, f_o]), store, f"{p}.pair_ho")
        pair_hi = nn.mlp(ad.concat_last([f_h, f_i]), store, f"{p}.pair_hi")
        pair_oi = nn.mlp(ad.concat_last([f_o, f_i]), store, f"{p}.pair_oi")
        pair_cat = ad.concat_last([pair_ho, pair_hi, pair_oi])
        pair_set = ad.reshape(pair_cat, (slots, 3, d))
        pairwise, pself_attn = _self_block(pair_set, store, f"{p}.pair_self_attn",
                                           f"{p}.pair_self_ln", cfg)
        q3 = ad.reshape(cur, (slots, 1, d))
        out3, pcross_attn = _cross_block(q3, pairwise, store, f"{p}.pair_cross_attn",
                                         f"{p}.pair_cross_ln", cfg)
        cur = ad.reshape(out3, lead + (d,))
        if collect_trace:
            trace_vals.update(pair_tokens=pairwise.data.copy(),
                              pair_self_attn=_stack_attn(pself_attn),
                              pair_cross_attn=_stack_attn(pcross_attn))
    if collect_trace:
        trace_vals["after_pairwise"] = cur.data.copy()

    # one-token queries over shared image tokens = plain rows of a
    # cross-attention, so no per-slot expansion is needed
    context, image_attn = _cross_block(cur, tokens, store, f"{p}.image_attn",
                                       f"{p}.image_ln", cfg)

    trace = None
    if collect_trace:
        trace_vals["context"] = context.data.copy()
        trace_vals["image_attn"] = _stack_attn(image_attn)
        trace = RelationTrace(**trace_vals)
    return context, trace


def fuse_context(f: Tensor, context: Tensor, store: ParamStore, cfg: ModelConfig,
                 branch: str, layer: int) -> Tensor:
    """Residually add the (optionally gated) transformed context into
    one branch's tokens."""
    p = f"fusion.{branch}.{layer}"
    inp = ad.concat_last([f, context]) if cfg.fusion_conditioning else context
    value = nn.mlp(inp, store, f"{p}.value")
    if cfg.fusion_channel:
        gate = ad.sigmoid(nn.mlp(inp, store, f"{p}.gate"))
        return f + gate * value
    return f + value


# ---------------------------------------------------------------------------
# heads and forward


@dataclass
class PredictionSet:
    """One layer's decoded predictions, per query slot."""

    human_box: Tensor        # (N, 4) in (0, 1)
    object_box: Tensor       # (N, 4) in (0, 1)
    object_prob: Tensor      # (N, num_obj+1), rows sum to 1, background last
    interaction_prob: Tensor  # (N, num_int) in (0, 1)


def predict_heads(q_h: Tensor, q_o: Tensor, q_i: Tensor, store: ParamStore,
                  cfg: ModelConfig) -> PredictionSet:
    return PredictionSet(
        human_box=ad.sigmoid(nn.mlp(q_h, store, "heads.human_box")),
        object_box=ad.sigmoid(nn.mlp(q_o, store, "heads.object_box")),
        object_prob=ad.softmax(nn.mlp(q_o, store, "heads.object_class"), axis=-1),
        interaction_prob=ad.sigmoid(nn.mlp(q_i, store, "heads.interaction")),
    )


@dataclass
class ForwardTrace:
    image_tokens: np.ndarray
    task_tokens: dict[str, list[np.ndarray]] = field(default_factory=dict)
    refined_tokens: dict[str, list[np.ndarray]] = field(default_factory=dict)
    branch_cross_attn: dict[str, list[np.ndarray]] = field(default_factory=dict)
    relation: list[Optional[RelationTrace]] = field(default_factory=list)


@dataclass
class ForwardResult:
    layers: list[PredictionSet]
    trace: Optional[ForwardTrace]

    @property
    def final(self) -> PredictionSet:
        return self.layers[-1]


def encode_image_batch(patches: np.ndarray, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """Encode a stack of pre-extracted patch matrices (B, T, patch_dim)."""
    b, t, pd = patches.shape
    if (t, pd) != (cfg.num_tokens, cfg.patch_dim):
        raise ShapeError(f"patch stack shape {patches.shape}, expected "
                         f"(B, {cfg.num_tokens}, {cfg.patch_dim})")
    pos = np.broadcast_to(_posenc(cfg), (b, t, cfg.d_model))
    x = nn.linear(Tensor(patches), store, "patch_embed") + Tensor(np.ascontiguousarray(pos))
    for e in range(cfg.encoder_layers):
        x = nn.encoder_layer(x, store, f"encoder.{e}", cfg.num_heads)
    return x


def forward_batch(store: ParamStore, cfg: ModelConfig, patches: np.ndarray) -> ForwardResult:
    """Batched twin of `forward` over stacked patch matrices; every
    prediction tensor gains a leading batch axis. Numerically it matches
    per-image forwards up to float summation order."""
    b = patches.shape[0]
    tokens = encode_image_batch(patches, store, cfg)
    q = {br: ad.broadcast_rows(store[f"queries.{br}"], b) for br in BRANCHES}
    layers = []
    for l in range(cfg.branch_layers):
        f = {}
        for br in BRANCHES:
            f[br], _ = nn.decoder_layer(q[br], tokens, store,
                                        f"branch.{br}.{l}", cfg.num_heads)
        if cfg.exchange_active:
            context, _ = relation_context(f["human"], f["object"], f["interaction"],
                                          tokens, store, cfg, l)
            q = {br: fuse_context(f[br], context, store, cfg, br, l)
                 if cfg.propagates(br) else f[br] for br in BRANCHES}
        else:
            q = f
        layers.append(predict_heads(q["human"], q["object"], q["interaction"], store, cfg))
    return ForwardResult(layers=layers, trace=None)


def forward(store: ParamStore, cfg: ModelConfig, image,
            collect_trace: bool = False) -> ForwardResult:
    """Full pass: encode, L rounds of (decode per branch, relation
    context, gated fusion per enabled branch), shared heads per layer."""
    tokens = encode_image(image, store, cfg)
    trace = None
    if collect_trace:
        trace = ForwardTrace(image_tokens=tokens.data.copy(),
                             task_tokens={br: [] for br in BRANCHES},
                             refined_tokens={br: [] for br in BRANCHES},
                             branch_cross_attn={br: [] for br in BRANCHES})
    q = {br: store[f"queries.{br}"] for br in BRANCHES}
    layers = []
    for l in range(cfg.branch_layers):
        f = {}
        for br in BRANCHES:
            f[br], cross_attn = nn.decoder_layer(q[br], tokens, store,
                                                 f"branch.{br}.{l}", cfg.num_heads)
            if collect_trace:
                trace.task_tokens[br].append(f[br].data.copy())
                trace.branch_cross_attn[br].append(_stack_attn(cross_attn))
        if cfg.exchange_active:
            context, rel_trace = relation_context(
                f["human"], f["object"], f["interaction"], tokens, store, cfg, l,
                collect_trace=collect_trace)
            q = {br: fuse_context(f[br], context, store, cfg, br, l)
                 if cfg.propagates(br) else f[br] for br in BRANCHES}
            if collect_trace:
                trace.relation.append(rel_trace)
        else:
            q = f
            if collect_trace:
                trace.relation.append(None)
        if collect_trace:
            for br in BRANCHES:
                trace.refined_tokens[br].append(q[br].data.copy())
        layers.append(predict_heads(q["human"], q["object"], q["interaction"], store, cfg))
    return ForwardResult(layers=layers, trace=trace)
