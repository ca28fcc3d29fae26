"""Pre-norm Vision Transformer whose attention can be read out and overridden.

Each MSA block can emit its attention maps and Q/K/V activations, and can
accept externally supplied maps (or Q/K/V) for any subset of heads.  The
injected values are constants in the autodiff graph, so nothing upstream
of an injected map receives gradient through it.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np
from scipy.stats import truncnorm

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

MAP_ROW_TOL = 1e-9
INIT_STD = 0.02


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 4
    depth: int = 6
    heads: int = 4
    dim: int = 128
    mlp_ratio: float = 4.0
    num_classes: int = 10
    channels: int = 3
    use_cls_token: bool = True

    def __post_init__(self):
        if self.depth < 0 or min(self.heads, self.num_classes, self.patch_size, self.dim, self.channels) < 1:
            raise ShapeError("depth must be >= 0; heads, num_classes, patch_size, dim, channels >= 1")
        if self.image_size % self.patch_size:
            raise ShapeError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.dim % self.heads:
            raise ShapeError(f"dim {self.dim} not divisible by heads {self.heads}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def num_tokens(self) -> int:
        return self.num_patches + int(self.use_cls_token)

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ViTConfig":
        return cls(**d)


def vit_tiny_desk(num_classes: int = 10) -> ViTConfig:
    """Desk-scale default: L=6, H=4, C=128, patch 4 on 32x32 inputs."""
    return ViTConfig(image_size=32, patch_size=4, depth=6, heads=4, dim=128, num_classes=num_classes)


def vit_large() -> ViTConfig:
    """ViT-L/16 geometry at 224px (24 layers, 16 heads, 197 tokens)."""
    return ViTConfig(image_size=224, patch_size=16, depth=24, heads=16, dim=1024, num_classes=1000)


class ViTParams:
    """Ordered name -> Tensor table holding every learnable weight."""

    def __init__(self, cfg: ViTConfig, tensors: dict[str, Tensor]):
        self.cfg = cfg
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def items(self):
        return self.tensors.items()

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.tensors.items()}

    def copy(self, requires_grad: bool = True) -> "ViTParams":
        return ViTParams(self.cfg, {k: Tensor(v.data.copy(), requires_grad=requires_grad) for k, v in self.items()})

    def frozen(self) -> "ViTParams":
        """A view sharing data but never tracking gradients."""
        return ViTParams(self.cfg, {k: Tensor(v.data) for k, v in self.items()})

    @classmethod
    def from_arrays(cls, cfg: ViTConfig, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> "ViTParams":
        expected = param_shapes(cfg)
        missing = set(expected) - set(arrays)
        extra = set(arrays) - set(expected)
        if missing or extra:
            raise ShapeError(f"parameter table mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        out = {}
        for name, shape in expected.items():
            a = np.asarray(arrays[name])
            if a.shape != shape:
                raise ShapeError(f"{name}: expected shape {shape}, got {a.shape}")
            out[name] = Tensor(np.ascontiguousarray(a, dtype=np.float64), requires_grad=requires_grad)
        return cls(cfg, out)

    def layer_group(self, name: str) -> int:
        """0 for embeddings, l for block l-1, depth+1 for final norm and head."""
        if name.startswith("blocks."):
            return int(name.split(".")[1]) + 1
        if name.startswith(("patch_embed", "pos_embed", "cls_token")):
            return 0
        return self.cfg.depth + 1


def param_shapes(cfg: ViTConfig) -> dict[str, tuple[int, ...]]:
    C, P = cfg.dim, cfg.patch_size
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (cfg.channels * P * P, C),
        "patch_embed.bias": (C,),
        "pos_embed": (cfg.num_tokens, C),
    }
    if cfg.use_cls_token:
        shapes["cls_token"] = (C,)
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        shapes[p + "norm1.weight"] = (C,)
        shapes[p + "norm1.bias"] = (C,)
        for proj in ("q", "k", "v", "proj"):
            shapes[p + f"attn.{proj}.weight"] = (C, C)
            shapes[p + f"attn.{proj}.bias"] = (C,)
        shapes[p + "norm2.weight"] = (C,)
        shapes[p + "norm2.bias"] = (C,)
        shapes[p + "mlp.fc1.weight"] = (C, cfg.mlp_hidden)
        shapes[p + "mlp.fc1.bias"] = (cfg.mlp_hidden,)
        shapes[p + "mlp.fc2.weight"] = (cfg.mlp_hidden, C)
        shapes[p + "mlp.fc2.bias"] = (C,)
    shapes["norm.weight"] = (C,)
    shapes["norm.bias"] = (C,)
    shapes["head.weight"] = (C, cfg.num_classes)
    shapes["head.bias"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ViTConfig, rng: np.random.Generator | int = 0) -> ViTParams:
    """Truncated-normal(0.02) weights and embeddings, zero biases, unit LN scales."""
    rng = np.random.default_rng(rng)
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".bias"):
            arrays[name] = np.zeros(shape)
        elif "norm" in name:
            arrays[name] = np.ones(shape)
        else:
            arrays[name] = truncnorm.rvs(-2.0, 2.0, scale=INIT_STD, size=shape, random_state=rng)
    return ViTParams.from_arrays(cfg, arrays)


# ----------------------------------------------------------------------
# overrides and records
# ----------------------------------------------------------------------
@dataclass
class LayerOverride:
    """Per-layer substitutions; each ``*_heads`` mask selects the heads affected.

    Arrays are full-width over heads: maps are [B|1, H, N, N] and Q/K/V are
    [B|1, H, N, head_dim].  Only masked heads read from them.
    """

    map: np.ndarray | None = None
    map_heads: np.ndarray | None = None
    q: np.ndarray | None = None
    q_heads: np.ndarray | None = None
    k: np.ndarray | None = None
    k_heads: np.ndarray | None = None
    v: np.ndarray | None = None
    v_heads: np.ndarray | None = None

    def mask(self, kind: str, H: int) -> np.ndarray:
        arr = getattr(self, kind)
        m = getattr(self, kind + "_heads")
        if arr is None:
            return np.zeros(H, dtype=bool)
        if m is None:
            return np.ones(H, dtype=bool)
        return np.asarray(m, dtype=bool)

    def is_empty(self, H: int) -> bool:
        return not any(self.mask(k, H).any() for k in ("map", "q", "k", "v"))

    def validate(self, B: int, cfg: ViTConfig) -> None:
        H, N, d = cfg.heads, cfg.num_tokens, cfg.head_dim
        map_m = self.mask("map", H)
        if (map_m & (self.mask("q", H) | self.mask("k", H))).any():
            raise ContractError("a head cannot take both a map override and a Q/K override")
        for kind, tail in (("map", (N, N)), ("q", (N, d)), ("k", (N, d)), ("v", (N, d))):
            arr = getattr(self, kind)
            if arr is None:
                continue
            if arr.ndim != 4 or arr.shape[0] not in (1, B) or arr.shape[1] != H or arr.shape[2:] != tail:
                raise ShapeError(f"{kind} override has shape {arr.shape}, expected [{B}|1, {H}, {tail[0]}, {tail[1]}]")
        if self.map is not None and map_m.any():
            sel = self.map[:, map_m]
            if np.any(sel < 0) or np.max(np.abs(sel.sum(axis=-1) - 1.0)) > MAP_ROW_TOL:
                raise ContractError("injected attention map rows must be probability distributions")


AttentionOverride = list  # list[LayerOverride | None], one entry per layer


@dataclass
class AttentionRecord:
    """What a forward pass computed, layer by layer.

    ``maps[l]`` is [B, H, N, N], the maps actually applied.  ``q/k/v`` are
    [B, H, N, head_dim] when QKV capture was on.  ``scores[l]`` is the live
    (graph-connected) scaled QK^T tensor, or None when no head computed its
    own map; ``queries[l]`` is the live Q tensor.  ``features[l]`` is the residual stream after block l.
    """

    maps: list = field(default_factory=list)
    q: list = field(default_factory=list)
    k: list = field(default_factory=list)
    v: list = field(default_factory=list)
    scores: list = field(default_factory=list)
    queries: list = field(default_factory=list)
    features: list = field(default_factory=list)

    @property
    def depth(self) -> int:
        return len(self.maps)

    def map(self, layer: int, head: int) -> np.ndarray:
        return self.maps[layer][:, head]

    def stacked_maps(self) -> np.ndarray:
        """All maps as one [L, B, H, N, N] array."""
        return np.stack(self.maps, axis=0)


# ----------------------------------------------------------------------
# forward
# ----------------------------------------------------------------------
def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, Ch, H, W] -> [B, (H/p)*(W/p), Ch*p*p], row-major over the patch grid."""
    B, Ch, Hi, Wi = images.shape
    if Hi % patch or Wi % patch:
        raise ShapeError(f"image {Hi}x{Wi} not divisible by patch size {patch}")
    gh, gw = Hi // patch, Wi // patch
    x = images.reshape(B, Ch, gh, patch, gw, patch).transpose(0, 2, 4, 1, 3, 5)
    return x.reshape(B, gh * gw, Ch * patch * patch)


def patchify(images, params: ViTParams, cfg: ViTConfig) -> Tensor:
    """Patch projection, optional CLS prepend and positional embedding -> [B, N, C]."""
    imgs = images.data if isinstance(images, Tensor) else np.asarray(images, dtype=np.float64)
    if imgs.ndim != 4 or imgs.shape[1] != cfg.channels or imgs.shape[2] != cfg.image_size or imgs.shape[3] != cfg.image_size:
        raise ShapeError(f"expected images [B, {cfg.channels}, {cfg.image_size}, {cfg.image_size}], got {imgs.shape}")
    B = imgs.shape[0]
    x = Tensor(extract_patches(imgs, cfg.patch_size)) @ params["patch_embed.weight"] + params["patch_embed.bias"]
    if cfg.use_cls_token:
        cls = params["cls_token"].reshape(1, 1, cfg.dim) + np.zeros((B, 1, cfg.dim))
        x = T.concat([cls, x], axis=1)
    return x + params["pos_embed"]


def _split_heads(t: Tensor, B: int, N: int, H: int, d: int) -> Tensor:
    return t.reshape(B, N, H, d).transpose(0, 2, 1, 3)


def _head_mask(m: np.ndarray) -> np.ndarray:
    return m[None, :, None, None]


def msa_forward(
    X: Tensor,
    params: ViTParams,
    layer: int,
    override: LayerOverride | None = None,
    capture: bool = False,
) -> tuple[Tensor, dict]:
    """One multi-head self-attention block (no residual, no norm).

    Returns the projected output [B, N, C] and a dict with the used maps,
    optional Q/K/V, and the live score tensor.
    """
    cfg = params.cfg
    B, N, C = X.shape
    H, d = cfg.heads, cfg.head_dim
    p = f"blocks.{layer}.attn."
    if override is not None:
        override.validate(B, cfg)
        map_m = override.mask("map", H)
    else:
        map_m = np.zeros(H, dtype=bool)

    def proj(name: str) -> Tensor:
        return _split_heads(X @ params[p + name + ".weight"] + params[p + name + ".bias"], B, N, H, d)

    V = proj("v")
    if override is not None and override.mask("v", H).any():
        V = T.where(_head_mask(override.mask("v", H)), override.v, V)

    scores = Q = K = None
    if map_m.all():
        A = Tensor(np.broadcast_to(override.map, (B, H, N, N)))
    else:
        Q, K = proj("q"), proj("k")
        if override is not None:
            if override.mask("q", H).any():
                Q = T.where(_head_mask(override.mask("q", H)), override.q, Q)
            if override.mask("k", H).any():
                K = T.where(_head_mask(override.mask("k", H)), override.k, K)
        scores = (Q @ T.swapaxes(K, -1, -2)) * (1.0 / np.sqrt(d))
        A = T.softmax(scores, axis=-1)
        if map_m.any():
            A = T.where(_head_mask(map_m), override.map, A)

    out = (A @ V).transpose(0, 2, 1, 3).reshape(B, N, C)
    Y = out @ params[p + "proj.weight"] + params[p + "proj.bias"]
    rec = {"map": A.data, "scores": scores, "q_live": Q}
    if capture:
        rec["q"] = Q.data if Q is not None else None
        rec["k"] = K.data if K is not None else None
        rec["v"] = V.data
    return Y, rec


def mlp_forward(X: Tensor, params: ViTParams, layer: int) -> Tensor:
    p = f"blocks.{layer}.mlp."
    h = T.gelu(X @ params[p + "fc1.weight"] + params[p + "fc1.bias"])
    return h @ params[p + "fc2.weight"] + params[p + "fc2.bias"]


def vit_forward(
    images,
    params: ViTParams,
    overrides: AttentionOverride | None = None,
    capture: bool = False,
) -> tuple[Tensor, AttentionRecord]:
    """Classify a batch; returns logits [B, num_classes] and the attention record."""
    cfg = params.cfg
    if overrides is not None and len(overrides) != cfg.depth:
        raise ShapeError(f"got {len(overrides)} layer overrides for depth {cfg.depth}")
    x = patchify(images, params, cfg)
    rec = AttentionRecord()
    for i in range(cfg.depth):
        p = f"blocks.{i}."
        ov = overrides[i] if overrides is not None else None
        h = T.layernorm(x, params[p + "norm1.weight"], params[p + "norm1.bias"])
        y, r = msa_forward(h, params, i, ov, capture=capture)
        x = x + y
        h = T.layernorm(x, params[p + "norm2.weight"], params[p + "norm2.bias"])
        x = x + mlp_forward(h, params, i)
        rec.maps.append(r["map"])
        rec.scores.append(r["scores"])
        rec.queries.append(r["q_live"])
        rec.features.append(x)
        if capture:
            rec.q.append(r["q"])
            rec.k.append(r["k"])
            rec.v.append(r["v"])
    x = T.layernorm(x, params["norm.weight"], params["norm.bias"])
    pooled = x[:, 0] if cfg.use_cls_token else x.mean(axis=1)
    logits = pooled @ params["head.weight"] + params["head.bias"]
    return logits, rec


def predict_proba(images: np.ndarray, params: ViTParams, overrides=None, batch_size: int = 256) -> np.ndarray:
    """Softmax class probabilities, forwarded in chunks without a graph."""
    frozen = params.frozen()
    out = []
    for s in range(0, len(images), batch_size):
        ov = None
        if overrides is not None:
            ov = overrides(s, s + batch_size) if callable(overrides) else overrides
        logits, _ = vit_forward(images[s : s + batch_size], frozen, ov)
        out.append(T.softmax_array(logits.data, axis=1))
    return np.concatenate(out, axis=0)
