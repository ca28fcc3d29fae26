"""Representation and attention analysis: CKA, head-matched JSD, ensembles, overlays."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.special import rel_entr

from .errors import ContractError, GeometryError
from .vit import AttentionRecord, ViTConfig, ViTParams, vit_forward

STRATEGIES = ("direct", "bipartite", "minimum", "averaged")
DIST_TOL = 1e-6


# ----------------------------------------------------------------------
# CKA
# ----------------------------------------------------------------------
def _center(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ContractError(f"CKA needs a [B>=2, D] feature matrix, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ContractError("CKA features must be finite")
    xc = x - x.mean(axis=0, keepdims=True)
    if not np.any(xc):
        raise ContractError("CKA is undefined for zero-variance features (all rows identical)")
    return xc


def _unbiased_hsic(K: np.ndarray, L: np.ndarray) -> float:
    n = K.shape[0]
    K = K.copy()
    L = L.copy()
    np.fill_diagonal(K, 0.0)
    np.fill_diagonal(L, 0.0)
    kl = K @ L
    return float(
        (np.trace(kl) + K.sum() * L.sum() / ((n - 1) * (n - 2)) - 2.0 * kl.sum() / (n - 2)) / (n * (n - 3))
    )


def linear_cka(x: np.ndarray, y: np.ndarray, debiased: bool = False) -> float:
    """Linear CKA between two [B, D] feature matrices (rows are examples)."""
    if len(x) != len(y):
        raise ContractError(f"CKA inputs need the same number of rows ({len(x)} vs {len(y)})")
    xc, yc = _center(x), _center(y)
    if debiased:
        if len(x) < 4:
            raise ContractError("debiased CKA needs at least 4 examples")
        K, L = xc @ xc.T, yc @ yc.T
        return _unbiased_hsic(K, L) / np.sqrt(_unbiased_hsic(K, K) * _unbiased_hsic(L, L))
    if xc.shape[1] + yc.shape[1] > 2 * len(x):
        # wide features: work with B x B Gram matrices instead
        K, L = xc @ xc.T, yc @ yc.T
        return float(np.vdot(K, L) / (np.linalg.norm(K) * np.linalg.norm(L)))
    cross = np.linalg.norm(yc.T @ xc) ** 2
    return float(cross / (np.linalg.norm(xc.T @ xc) * np.linalg.norm(yc.T @ yc)))


def feature_stack(params: ViTParams, images: np.ndarray, pool: str = "cls", batch_size: int = 256) -> list[np.ndarray]:
    """Per-layer residual-stream features, [B, C] each; ``pool`` is ``cls`` or ``mean`` (patch tokens)."""
    if pool not in ("cls", "mean"):
        raise ContractError(f"unknown pooling {pool!r}")
    if pool == "cls" and not params.cfg.use_cls_token:
        raise ContractError("cls pooling needs a CLS token")
    frozen = params.frozen()
    per_layer: list[list[np.ndarray]] = [[] for _ in range(params.cfg.depth)]
    start = 1 if params.cfg.use_cls_token else 0
    for s in range(0, len(images), batch_size):
        _, rec = vit_forward(images[s : s + batch_size], frozen)
        for l, f in enumerate(rec.features):
            per_layer[l].append(f.data[:, 0] if pool == "cls" else f.data[:, start:].mean(axis=1))
    return [np.concatenate(chunks) for chunks in per_layer]


def cka_by_layer(stack_a: Sequence[np.ndarray], stack_b: Sequence[np.ndarray], debiased: bool = False) -> np.ndarray:
    if len(stack_a) != len(stack_b):
        raise GeometryError("depth", len(stack_a), len(stack_b))
    return np.array([linear_cka(a, b, debiased) for a, b in zip(stack_a, stack_b)])


def write_cka_csv(path: str | Path, scores: np.ndarray, label: str = "") -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["layer", "model", "cka"])
        for l, s in enumerate(scores):
            w.writerow([l, label, repr(float(s))])


# ----------------------------------------------------------------------
# JSD and head matching
# ----------------------------------------------------------------------
def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or np.max(np.abs(p.sum(axis=-1) - 1.0)) > DIST_TOL:
        raise ContractError(f"{name} rows must be probability distributions")


def jsd(p, q, axis: int = -1) -> np.ndarray | float:
    """Jensen-Shannon divergence (natural log) along ``axis``; in [0, ln 2]."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p, q = np.moveaxis(p, axis, -1), np.moveaxis(q, axis, -1)
    _check_distribution(p, "p")
    _check_distribution(q, "q")
    m = 0.5 * (p + q)
    out = 0.5 * rel_entr(p, m).sum(axis=-1) + 0.5 * rel_entr(q, m).sum(axis=-1)
    out = np.clip(out, 0.0, np.log(2.0))
    return float(out) if out.ndim == 0 else out


def head_jsd_matrix(maps_a: np.ndarray, maps_b: np.ndarray) -> np.ndarray:
    """[H, H] matrix: entry (i, j) is the mean row JSD between head i of A and head j of B.

    Inputs are one layer's maps, [B, H, N, N].
    """
    if maps_a.shape != maps_b.shape:
        raise GeometryError("maps", maps_a.shape, maps_b.shape)
    H = maps_a.shape[1]
    out = np.empty((H, H))
    for i in range(H):
        for j in range(H):
            out[i, j] = np.mean(jsd(maps_a[:, i], maps_b[:, j]))
    return out


@dataclass
class HeadMatchSlice:
    layer: int
    strategy: str
    pairs: list[tuple[int, int]]
    pair_jsd: list[float]

    @property
    def total(self) -> float:
        return float(np.sum(self.pair_jsd))

    @property
    def mean(self) -> float:
        return float(np.mean(self.pair_jsd)) if self.pair_jsd else float("nan")


@dataclass
class HeadMatchReport:
    strategy: str
    layers: list[HeadMatchSlice] = field(default_factory=list)

    def layer_means(self) -> np.ndarray:
        return np.array([s.mean for s in self.layers])

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["strategy", "layer", "head_a", "head_b", "jsd", "layer_mean_jsd"])
            for s in self.layers:
                for (a, b), v in zip(s.pairs, s.pair_jsd):
                    w.writerow([s.strategy, s.layer, a, b, repr(float(v)), repr(s.mean)])


def _layer_maps(rec, layer: int) -> np.ndarray:
    if isinstance(rec, AttentionRecord):
        return rec.maps[layer]
    return np.asarray(rec[layer])


def match_heads(rec_a, rec_b, layer: int, strategy: str) -> HeadMatchSlice:
    """Pair up heads of one layer across two models and report per-pair JSD.

    ``averaged`` compares head-averaged maps and reports a single pair
    ``(-1, -1)``.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    a, b = _layer_maps(rec_a, layer), _layer_maps(rec_b, layer)
    if a.shape != b.shape:
        raise GeometryError(f"layer {layer} maps", a.shape, b.shape)
    if strategy == "averaged":
        v = float(np.mean(jsd(a.mean(axis=1), b.mean(axis=1))))
        return HeadMatchSlice(layer, strategy, [(-1, -1)], [v])
    cost = head_jsd_matrix(a, b)
    H = cost.shape[0]
    if strategy == "direct":
        cols = np.arange(H)
    elif strategy == "bipartite":
        rows, cols = linear_sum_assignment(cost)
        cols = cols[np.argsort(rows)]
    else:
        cols = np.argmin(cost, axis=1)
    pairs = [(i, int(j)) for i, j in enumerate(cols)]
    return HeadMatchSlice(layer, strategy, pairs, [float(cost[i, j]) for i, j in pairs])


def brute_force_assignment(cost: np.ndarray) -> tuple[tuple[int, ...], float]:
    """Exhaustive minimum-cost permutation; only for small H."""
    H = cost.shape[0]
    best, best_perm = np.inf, None
    for perm in permutations(range(H)):
        c = sum(cost[i, perm[i]] for i in range(H))
        if c < best:
            best, best_perm = c, perm
    return best_perm, float(best)


def head_match_report(rec_a, rec_b, strategy: str, layers: Sequence[int] | None = None) -> HeadMatchReport:
    depth = rec_a.depth if isinstance(rec_a, AttentionRecord) else len(rec_a)
    layers = range(depth) if layers is None else layers
    return HeadMatchReport(strategy, [match_heads(rec_a, rec_b, l, strategy) for l in layers])


# ----------------------------------------------------------------------
# ensembles
# ----------------------------------------------------------------------
def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    """Top-1 accuracy; argmax ties go to the lowest class index."""
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels)))


def ensemble_eval(p_a: np.ndarray, p_b: np.ndarray, labels: np.ndarray) -> float:
    """Accuracy of the averaged softmax ``(p_a + p_b) / 2``."""
    p_a, p_b = np.asarray(p_a), np.asarray(p_b)
    if p_a.shape != p_b.shape:
        raise ContractError(f"prediction shapes differ: {p_a.shape} vs {p_b.shape}")
    _check_distribution(p_a, "p_a")
    _check_distribution(p_b, "p_b")
    return accuracy(0.5 * (p_a + p_b), labels)


# ----------------------------------------------------------------------
# activation accounting
# ----------------------------------------------------------------------
def count_transferred_activations(cfg: ViTConfig | None = None, accounting: str = "map_size", *,
                                  depth: int | None = None, heads: int | None = None,
                                  tokens: int | None = None, head_dim: int | None = None) -> int:
    """Activations transferred per example: ``qk_sizes`` = L*H*N*d*2, ``map_size`` = L*H*N*N."""
    if cfg is not None:
        depth = cfg.depth if depth is None else depth
        heads = cfg.heads if heads is None else heads
        tokens = cfg.num_tokens if tokens is None else tokens
        head_dim = cfg.head_dim if head_dim is None else head_dim
    L, H, N = int(depth), int(heads), int(tokens)
    if accounting == "qk_sizes":
        return L * H * N * int(head_dim) * 2
    if accounting == "map_size":
        return L * H * N * N
    raise ContractError(f"unknown accounting {accounting!r}")


# ----------------------------------------------------------------------
# attention overlays
# ----------------------------------------------------------------------
def cls_attention_grid(rec: AttentionRecord, layer: int, index: int, grid: int) -> np.ndarray:
    """Head-averaged attention from the CLS query to each patch, as a [grid, grid] array."""
    row = rec.maps[layer][index, :, 0, 1:].mean(axis=0)
    if row.size != grid * grid:
        raise GeometryError("patches", grid * grid, row.size)
    return row.reshape(grid, grid)


def attention_pixels(grid_vals: np.ndarray, image_size: int) -> np.ndarray:
    """Min-max normalize, invert (darker = more attention), upsample by nearest; uint8 [S, S]."""
    lo, hi = float(grid_vals.min()), float(grid_vals.max())
    norm = np.full(grid_vals.shape, 0.5) if hi - lo <= 0 else (grid_vals - lo) / (hi - lo)
    level = np.rint(255.0 * (1.0 - norm)).astype(np.uint8)
    rep = image_size // grid_vals.shape[0]
    return np.repeat(np.repeat(level, rep, axis=0), rep, axis=1)


def write_pnm(path: str | Path, pixels: np.ndarray) -> None:
    """Binary PGM (P5) for [H, W] or PPM (P6) for [H, W, 3] uint8 arrays."""
    pixels = np.asarray(pixels, dtype=np.uint8)
    magic = b"P5" if pixels.ndim == 2 else b"P6"
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + f"\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_pnm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError(f"unsupported PNM header {tokens}")
    ch = 1 if magic == b"P5" else 3
    arr = np.frombuffer(raw, dtype=np.uint8, offset=pos, count=w * h * ch)
    return arr.reshape(h, w) if ch == 1 else arr.reshape(h, w, 3)


def _display_image(image: np.ndarray) -> np.ndarray:
    """[C, H, W] float -> uint8 [H, W, 3] by per-image min-max scaling."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] == 1:
        img = np.repeat(img, 3, axis=0)
    lo, hi = img.min(), img.max()
    img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    return np.rint(255.0 * img).transpose(1, 2, 0).astype(np.uint8)


def export_cls_attention(rec: AttentionRecord, image: np.ndarray, layers: Sequence[int], out_dir: str | Path,
                         cfg: ViTConfig, index: int = 0, prefix: str = "attn", alpha: float = 0.6) -> list[Path]:
    """Write ``<prefix>_layer<l>.pgm`` and a blended ``<prefix>_layer<l>_overlay.ppm`` per layer."""
    if not cfg.use_cls_token:
        raise ContractError("CLS attention export needs use_cls_token=True")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = _display_image(image).astype(np.float64)
    written = []
    for l in layers:
        px = attention_pixels(cls_attention_grid(rec, l, index, cfg.grid), cfg.image_size)
        pgm = out_dir / f"{prefix}_layer{l}.pgm"
        write_pnm(pgm, px)
        blend = np.rint((1 - alpha) * base + alpha * px[..., None].astype(np.float64)).astype(np.uint8)
        ppm = out_dir / f"{prefix}_layer{l}_overlay.ppm"
        write_pnm(ppm, blend)
        written += [pgm, ppm]
    return written
