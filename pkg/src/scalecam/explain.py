"""Grad-CAM saliency, heatmap masks and intermediate activation grids."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import resize
from .layers import Network
from .netpbm import encode_pgm, encode_ppm
from .tensor import ShapeError, Tape, Tensor, backward, take

OVERLAY_ALPHA = 0.4

# Ramp anchors (position in 0-255, RGB). Zero stays black so an empty heatmap
# leaves only the dimmed input; low intensities are blue, high are red.
_RAMP_ANCHORS = (
    (0, (0, 0, 0)),
    (51, (0, 0, 255)),
    (102, (0, 255, 255)),
    (153, (0, 255, 0)),
    (204, (255, 255, 0)),
    (255, (255, 0, 0)),
)


def _build_ramp() -> np.ndarray:
    pos = [p for p, _ in _RAMP_ANCHORS]
    idx = np.arange(256)
    channels = [np.interp(idx, pos, [rgb[ch] for _, rgb in _RAMP_ANCHORS]) for ch in range(3)]
    return np.rint(np.stack(channels, axis=1)).astype(np.uint8)


COLOR_RAMP = _build_ramp()


def color_ramp_text() -> str:
    """The ramp as ``index,r,g,b`` lines."""
    lines = ["index,r,g,b"] + [f"{i},{r},{g},{b}" for i, (r, g, b) in enumerate(COLOR_RAMP)]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Grad-CAM


@dataclass(frozen=True)
class Heatmap:
    raw: np.ndarray  # ReLU(sum_k w_k A^k) at the layer's spatial size
    normalized: np.ndarray  # raw / max(raw), or zeros
    upsampled: np.ndarray  # normalized, bilinearly resized to the input
    weights: np.ndarray  # one importance weight per filter
    target_class: int
    layer: str


def weight_combine(weights, maps) -> np.ndarray:
    """ReLU(sum_k w_k A^k) for weights [C] and maps [C,h,w]."""
    w = np.asarray(weights, dtype=np.float64).ravel()
    a = np.asarray(maps.data if isinstance(maps, Tensor) else maps, dtype=np.float64)
    if a.ndim != 3:
        raise ShapeError(f"maps must be [C,h,w], got shape {a.shape}")
    if w.size != a.shape[0]:
        raise ShapeError(f"{w.size} weights for {a.shape[0]} maps")
    return np.maximum(np.tensordot(w, a, axes=1), 0.0)


def normalize_heatmap(raw: np.ndarray) -> np.ndarray:
    peak = raw.max(initial=0.0)
    return raw / peak if peak > 0 else np.zeros_like(raw)


def default_layer(network: Network) -> str:
    """Name of the last convolution with spatial output."""
    names = [leaf.name for leaf in network.leaves() if leaf.kind == "conv"]
    if not names:
        raise ValueError("network has no convolutional layer")
    return names[-1]


def score_layer(network: Network, use_probability: bool = False) -> str:
    """Layer whose output supplies Y^c: the final softmax input, or the softmax itself."""
    names = network.layer_names
    return names[-1] if use_probability else names[-2]


def _as_batch(network: Network, image) -> Tensor:
    arr = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None, None]
    elif arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1:
        raise ShapeError(f"expected a single image, got shape {arr.shape}")
    return Tensor(arr)


def _check_layer(network: Network, layer: str) -> None:
    if layer not in network.layer_names:
        raise KeyError(f"unknown layer {layer!r}; valid layers: {', '.join(network.layer_names)}")


def gradcam(
    network: Network,
    image,
    target_class: int,
    layer: str | None = None,
    use_probability: bool = False,
) -> Heatmap:
    """Grad-CAM for one rescaled image ([H,W], [C,H,W] or [1,C,H,W]).

    Y^c is the pre-softmax logit unless ``use_probability`` is set.
    """
    layer = layer or default_layer(network)
    _check_layer(network, layer)
    if not 0 <= target_class < network.classes:
        raise ValueError(f"class {target_class} out of range for K={network.classes}")
    x = _as_batch(network, image)
    record: dict[str, Tensor] = {}
    with Tape() as tape:
        tape.watch(x)
        network.forward(x, training=False, record=record)
        acts = record[layer]
        if acts.ndim != 4:
            raise ShapeError(f"layer {layer!r} has non-spatial output of shape {acts.shape}")
        score = record[score_layer(network, use_probability)]
        y = take(score.reshape((score.size,)), target_class)
    grads = backward(tape, y)
    g = grads[acts].data[0]
    weights = g.mean(axis=(1, 2))
    raw = weight_combine(weights, acts.data[0])
    normalized = normalize_heatmap(raw)
    upsampled = resize(normalized, x.shape[2], x.shape[3])
    return Heatmap(raw, normalized, upsampled, weights, target_class, layer)


def class_score(network: Network, layer: str, activation, target_class: int, use_probability: bool = False) -> float:
    """Y^c computed from a (possibly perturbed) activation at top-level ``layer``."""
    record: dict[str, Tensor] = {}
    a = activation if isinstance(activation, Tensor) else Tensor(activation)
    probs = network.forward_from(layer, a, record=record)
    if use_probability:
        return float(probs.data.ravel()[target_class])
    return float(record[score_layer(network)].data.ravel()[target_class])


# ---------------------------------------------------------------------------
# masks


@dataclass(frozen=True)
class MaskStats:
    mean: float
    std: float  # population
    threshold: float
    mask: np.ndarray  # boolean, same shape as the map
    mask_mean: float  # 0.0 when the mask is empty
    empty: bool

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.mask)


def mask_stats(values) -> MaskStats:
    m = np.asarray(values, dtype=np.float64)
    if m.size == 0:
        raise ValueError("empty map")
    mu = float(m.mean())
    sigma = float(m.std())
    threshold = mu + sigma
    mask = m > threshold
    empty = not mask.any()
    return MaskStats(mu, sigma, threshold, mask, 0.0 if empty else float(m[mask].mean()), empty)


@dataclass(frozen=True)
class MaskComparison:
    mask: np.ndarray
    template_mean: float
    other_mean: float
    empty: bool


def mask_compare(template, other) -> MaskComparison:
    """Apply the template's mean+std mask to both maps."""
    t = np.asarray(template, dtype=np.float64)
    o = np.asarray(other, dtype=np.float64)
    if t.shape != o.shape:
        raise ShapeError(f"heatmap shapes differ: {t.shape} vs {o.shape}")
    stats = mask_stats(t)
    if stats.empty:
        return MaskComparison(stats.mask, 0.0, 0.0, True)
    return MaskComparison(stats.mask, float(t[stats.mask].mean()), float(o[stats.mask].mean()), False)


def to_u8(unit_map) -> np.ndarray:
    """[0,1] map to 0-255 integers."""
    return np.rint(np.clip(np.asarray(unit_map, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def colorize(heat_u8) -> np.ndarray:
    return COLOR_RAMP[np.asarray(heat_u8, dtype=np.uint8)]


def colorized_mask_mean(heat_u8, mask) -> float:
    """Mean over mask pixels and RGB channels of the ramp-colored heatmap."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return 0.0
    return float(colorize(heat_u8)[mask].astype(np.float64).mean())


def overlay(heat_u8, gray, alpha: float = OVERLAY_ALPHA) -> np.ndarray:
    """Blend ramp colors over a grayscale copy: (1-alpha)*gray + alpha*ramp."""
    heat_u8 = np.asarray(heat_u8, dtype=np.uint8)
    g = np.asarray(gray, dtype=np.float64)
    if g.shape != heat_u8.shape:
        raise ShapeError(f"heatmap {heat_u8.shape} and image {g.shape} differ in size")
    rgb = (1.0 - alpha) * g[..., None] + alpha * colorize(heat_u8)
    return np.rint(np.clip(rgb, 0, 255)).astype(np.uint8)


# ---------------------------------------------------------------------------
# activation maps


@dataclass(frozen=True)
class ActivationDump:
    layer: str
    filters: int
    tiles: np.ndarray  # [C,h,w] uint8
    grid: np.ndarray  # uint8 tiled image


def normalize_map(m: np.ndarray) -> np.ndarray:
    lo, hi = float(m.min()), float(m.max())
    if hi == lo:
        return np.zeros(m.shape, dtype=np.uint8)
    return np.rint((m - lo) * (255.0 / (hi - lo))).astype(np.uint8)


def tile_grid(tiles: np.ndarray, separator: int = 255) -> np.ndarray:
    """Row-major grid with ceil(sqrt(C)) columns and 1-pixel separators."""
    n, h, w = tiles.shape
    cols = math.ceil(math.sqrt(n))
    rows = math.ceil(n / cols)
    grid = np.full((rows * h + rows - 1, cols * w + cols - 1), separator, dtype=np.uint8)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * (h + 1) : r * (h + 1) + h, c * (w + 1) : c * (w + 1) + w] = tiles[i]
    return grid


def spatial_layers(network: Network) -> list[str]:
    return [leaf.name for leaf in network.leaves() if leaf.kind == "conv"]


def activation_dump(network: Network, image, layers=None) -> dict[str, ActivationDump]:
    """Normalized per-filter maps for each selected layer (default: every convolution)."""
    selected = spatial_layers(network) if layers is None else list(layers)
    for name in selected:
        _check_layer(network, name)
    x = _as_batch(network, image)
    record: dict[str, Tensor] = {}
    network.forward(x, training=False, record=record)
    out = {}
    for name in selected:
        a = record[name].data
        if a.ndim != 4:
            raise ShapeError(f"layer {name!r} has non-spatial output of shape {a.shape}")
        tiles = np.stack([normalize_map(f) for f in a[0]])
        out[name] = ActivationDump(name, tiles.shape[0], tiles, tile_grid(tiles))
    return out


# ---------------------------------------------------------------------------
# export


def export_image(values, path, fmt: str | None = None) -> Path:
    """Write [H,W] 0-255 data as PGM or [H,W,3] as PPM."""
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt == "pgm":
        data = encode_pgm(values)
    elif fmt == "ppm":
        data = encode_ppm(values)
    else:
        raise ValueError(f"unsupported image format {fmt!r}; use pgm or ppm")
    path.write_bytes(data)
    return path
