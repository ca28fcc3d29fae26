"""Attention transfer: copy, distill, Q/K/V transfer, partial and aggregated variants."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, GeometryError
from .tensor import Tensor
from .vit import AttentionRecord, LayerOverride, ViTConfig, ViTParams, vit_forward

MODES = ("none", "copy", "distill", "feature_distill")
TARGETS = ("attn_map", "Q", "K", "V", "QK")
AGGREGATE_AXES = ("none", "examples", "layers", "heads", "query_tokens")
REFERENCE_SET_SIZE = 1024


def parse_layer_selector(selector: str | None, depth: int, default: str = "all") -> list[int]:
    """Resolve ``all``, ``first:k``, ``last:k`` or ``i,j,...`` to sorted layer indices."""
    sel = (selector or default).strip()
    if sel == "all":
        return list(range(depth))
    if sel == "none":
        return []
    if sel.startswith(("first:", "last:")):
        kind, _, k = sel.partition(":")
        k = int(k)
        if not 0 <= k <= depth:
            raise ConfigurationError(f"layer selector {sel!r} out of range for depth {depth}")
        return list(range(k)) if kind == "first" else list(range(depth - k, depth))
    try:
        idx = sorted({int(s) for s in sel.split(",") if s.strip()})
    except ValueError as exc:
        raise ConfigurationError(f"bad layer selector {sel!r}") from exc
    if idx and (idx[0] < 0 or idx[-1] >= depth):
        raise ConfigurationError(f"layer selector {sel!r} out of range for depth {depth}")
    return idx


def default_distill_layers(depth: int) -> str:
    # 18 of 24 in the reference recipe, scaled proportionally
    return f"first:{int(np.floor(0.75 * depth))}"


@dataclass
class TransferSpec:
    mode: str = "none"
    target: str = "attn_map"
    layers: str | None = None
    heads_per_layer: int | None = None
    aggregate_axis: str = "none"
    distill_weight: float = 3.0
    teacher_checkpoint: str | None = None
    reference_size: int = REFERENCE_SET_SIZE

    def validate(self) -> "TransferSpec":
        if self.mode not in MODES:
            raise ConfigurationError(f"unknown transfer mode {self.mode!r}")
        if self.target not in TARGETS:
            raise ConfigurationError(f"unknown transfer target {self.target!r}")
        if self.aggregate_axis not in AGGREGATE_AXES:
            raise ConfigurationError(f"unknown aggregate axis {self.aggregate_axis!r}")
        if self.distill_weight < 0:
            raise ConfigurationError("distill_weight must be >= 0")
        if self.mode == "distill" and self.target not in ("attn_map", "Q"):
            raise ConfigurationError("distillation supports target attn_map or Q only")
        if self.aggregate_axis != "none" and not (self.mode == "copy" and self.target == "attn_map"):
            raise ConfigurationError("aggregated transfer requires mode=copy and target=attn_map")
        if self.heads_per_layer is not None and self.heads_per_layer < 0:
            raise ConfigurationError("heads_per_layer must be >= 0")
        return self

    def resolve_layers(self, depth: int) -> list[int]:
        default = default_distill_layers(depth) if self.mode in ("distill", "feature_distill") else "all"
        return parse_layer_selector(self.layers, depth, default)

    def head_mask(self, heads: int) -> np.ndarray:
        k = heads if self.heads_per_layer is None else self.heads_per_layer
        if k > heads:
            raise ConfigurationError(f"heads_per_layer={k} exceeds head count {heads}")
        m = np.zeros(heads, dtype=bool)
        m[:k] = True
        return m

    def to_dict(self) -> dict:
        return asdict(self)


def check_geometry(teacher: ViTConfig, student: ViTConfig) -> None:
    for name in ("depth", "heads", "num_tokens", "head_dim"):
        a, b = getattr(student, name), getattr(teacher, name)
        if a != b:
            raise GeometryError(name, a, b)


@dataclass
class TeacherContext:
    """A frozen teacher plus a one-batch record cache."""

    params: ViTParams
    reference_maps: np.ndarray | None = None
    _cache_key: object = field(default=None, repr=False)
    _cache: AttentionRecord | None = field(default=None, repr=False)

    def __post_init__(self):
        self.params = self.params.frozen()

    @property
    def cfg(self) -> ViTConfig:
        return self.params.cfg

    def record(self, images: np.ndarray, key=None) -> AttentionRecord:
        """Forward without gradients, capturing maps and Q/K/V."""
        if key is not None and key == self._cache_key and self._cache is not None:
            return self._cache
        _, rec = vit_forward(images, self.params, capture=True)
        self._cache_key, self._cache = key, rec
        return rec

    def set_reference(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Average maps over a fixed reference set; reused for every input."""
        total = None
        for s in range(0, len(images), batch_size):
            _, rec = vit_forward(images[s : s + batch_size], self.params, capture=False)
            part = rec.stacked_maps().sum(axis=1, keepdims=True)
            total = part if total is None else total + part
        self.reference_maps = total / len(images)
        return self.reference_maps


def aggregate_maps(maps, axis: str) -> np.ndarray:
    """Mean over one axis of an [L, B, H, N, N] stack, broadcast back to full shape."""
    stack = maps.stacked_maps() if isinstance(maps, AttentionRecord) else np.asarray(maps)
    if stack.ndim != 5:
        raise ContractError(f"expected an [L, B, H, N, N] stack, got shape {stack.shape}")
    axes = {"examples": 1, "layers": 0, "heads": 2, "query_tokens": 3}
    if axis not in axes:
        raise ConfigurationError(f"unknown aggregate axis {axis!r}")
    return np.broadcast_to(stack.mean(axis=axes[axis], keepdims=True), stack.shape)


def build_overrides(
    spec: TransferSpec,
    teacher_rec: AttentionRecord,
    student_cfg: ViTConfig,
    maps: np.ndarray | None = None,
) -> list[LayerOverride | None]:
    """Per-layer overrides from a teacher record.

    ``maps`` optionally replaces the record's maps with an [L, B|1, H, N, N]
    stack (used for aggregated transfer).
    """
    L, H, N = student_cfg.depth, student_cfg.heads, student_cfg.num_tokens
    if teacher_rec.depth != L:
        raise GeometryError("depth", L, teacher_rec.depth)
    t_map = teacher_rec.maps[0] if L else None
    if t_map is not None and (t_map.shape[1] != H or t_map.shape[2] != N):
        raise GeometryError("heads/tokens", (H, N), t_map.shape[1:3])
    layers = set(spec.resolve_layers(L))
    mask = spec.head_mask(H)
    out: list[LayerOverride | None] = []
    for l in range(L):
        if l not in layers or not mask.any():
            out.append(None)
            continue
        if spec.target == "attn_map":
            src = maps[l] if maps is not None else teacher_rec.maps[l]
            out.append(LayerOverride(map=src, map_heads=mask))
            continue
        if spec.target in ("Q", "K", "V", "QK") and not teacher_rec.q:
            raise ConfigurationError("Q/K/V transfer needs a teacher record captured with capture=True")
        ov = LayerOverride()
        if spec.target in ("Q", "QK"):
            ov.q, ov.q_heads = teacher_rec.q[l], mask
        if spec.target in ("K", "QK"):
            ov.k, ov.k_heads = teacher_rec.k[l], mask
        if spec.target == "V":
            ov.v, ov.v_heads = teacher_rec.v[l], mask
        out.append(ov)
    return out


def teacher_overrides(spec: TransferSpec, teacher: TeacherContext, images: np.ndarray, student_cfg: ViTConfig, key=None):
    """Teacher forward followed by override construction, honoring aggregation."""
    check_geometry(teacher.cfg, student_cfg)
    rec = teacher.record(images, key=key)
    maps = None
    if spec.aggregate_axis == "examples":
        if teacher.reference_maps is None:
            raise ConfigurationError("examples aggregation needs TeacherContext.set_reference() first")
        maps = teacher.reference_maps
    elif spec.aggregate_axis != "none":
        maps = aggregate_maps(rec, spec.aggregate_axis)
    return build_overrides(spec, rec, student_cfg, maps=maps), rec


def copy_forward(student: ViTParams, teacher: TeacherContext, images: np.ndarray, spec: TransferSpec, key=None):
    """Teacher forward, override construction, then the overridden student forward.

    Returns ``(logits, teacher_record, student_record)``.
    """
    if spec.mode != "copy":
        raise ConfigurationError(f"copy_forward needs mode=copy, got {spec.mode!r}")
    overrides, trec = teacher_overrides(spec, teacher, images, student.cfg, key=key)
    logits, srec = vit_forward(images, student, overrides, capture=True)
    return logits, trec, srec


# ----------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------
def _selected_slots(spec: TransferSpec, depth: int, heads: int) -> tuple[list[int], np.ndarray]:
    return spec.resolve_layers(depth), spec.head_mask(heads)


def attention_distill_loss(student_scores, teacher_maps, spec: TransferSpec) -> Tensor:
    """Cross entropy of student attention against teacher maps as soft targets.

    ``student_scores[l]`` is the live scaled QK^T tensor [B, H, N, N] of layer
    l; ``teacher_maps[l]`` the teacher's map for the same layer.  Summed over
    the selected (layer, head) slots, averaged over batch and query rows.
    """
    depth = len(teacher_maps)
    if len(student_scores) != depth:
        raise ConfigurationError(f"student has {len(student_scores)} layers, teacher {depth}")
    if depth == 0:
        return Tensor(0.0)
    heads = teacher_maps[0].shape[1]
    layers, mask = _selected_slots(spec, depth, heads)
    total = None
    for l in layers:
        s = student_scores[l]
        if s is None:
            raise ConfigurationError(f"layer {l} has no student scores (map fully overridden?)")
        t = np.asarray(teacher_maps[l])
        if s.shape != t.shape:
            raise ConfigurationError(f"layer {l}: student scores {s.shape} vs teacher maps {t.shape}")
        B, _, N, _ = t.shape
        weight = np.where(mask[None, :, None, None], t, 0.0) * (-1.0 / (B * N))
        term = T.tsum(T.log_softmax(s, axis=-1) * weight)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def mean_map_entropy(maps, spec: TransferSpec) -> float:
    """Entropy of the teacher maps under the distillation loss's reduction (the loss floor)."""
    depth = len(maps)
    if depth == 0:
        return 0.0
    layers, mask = _selected_slots(spec, depth, maps[0].shape[1])
    total = 0.0
    for l in layers:
        t = np.asarray(maps[l])[:, mask]
        B, N = t.shape[0], t.shape[2]
        plogp = np.where(t > 0, t * np.log(np.where(t > 0, t, 1.0)), 0.0)
        total += -plogp.sum() / (B * N)
    return total


def q_distill_loss(student_q, teacher_q, spec: TransferSpec) -> Tensor:
    """Mean-squared error between student and teacher queries on the selected slots."""
    depth = len(teacher_q)
    heads = teacher_q[0].shape[1]
    layers, mask = _selected_slots(spec, depth, heads)
    total = None
    for l in layers:
        sq = student_q[l]
        diff = (sq - teacher_q[l]) * mask[None, :, None, None].astype(float)
        term = T.mean(diff * diff) * (heads / max(mask.sum(), 1))
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def feature_distill_loss(student_feats, teacher_feats, layers: list[int] | None = None) -> Tensor:
    """Sum over selected layers of the MSE between residual-stream outputs."""
    if len(student_feats) != len(teacher_feats):
        raise GeometryError("depth", len(teacher_feats), len(student_feats))
    layers = range(len(student_feats)) if layers is None else layers
    total = None
    for l in layers:
        s, t = student_feats[l], np.asarray(getattr(teacher_feats[l], "data", teacher_feats[l]))
        if s.shape != t.shape:
            raise GeometryError(f"features[{l}]", t.shape, s.shape)
        diff = s - t
        term = T.mean(diff * diff)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def combined_loss(task_loss, dist_loss, lam: float):
    """task + lam * dist."""
    if lam < 0:
        raise ContractError("distillation weight must be nonnegative")
    if lam == 0:
        return task_loss
    return task_loss + dist_loss * lam
