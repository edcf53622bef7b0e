"""The three sparsity visualisations, written as dependency-free files.

Heatmaps and stripe plots are binary PPM (P6) images so golden-file tests can
compare bytes; the line plot is a CSV table plus a simple standalone SVG.
Every rendered sparsity value passes through the single map_colors path, and
identical inputs always produce byte-identical files.
"""

from __future__ import annotations

import numpy as np

from ._colortable import TABLE
from .errors import ConfigurationError, FormatError
from .history import RunHistory, check_aligned
from .metrics import LayerNasSnapshot

_TABLE = np.array(TABLE, dtype=np.float64)

# low -> high sparsity endpoints of the shipped table
COLOR_LOW = tuple(int(v) for v in _TABLE[0])
COLOR_HIGH = tuple(int(v) for v in _TABLE[255])


def map_colors(values: np.ndarray) -> np.ndarray:
    """Colour-encode sparsity values in [0, 1] (clamped) as uint8 RGB,
    linearly interpolating between adjacent table entries."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    x = v * 255.0
    idx = np.minimum(x.astype(np.int64), 254)
    frac = (x - idx)[..., None]
    rgb = _TABLE[idx] * (1.0 - frac) + _TABLE[idx + 1] * frac
    return np.rint(rgb).astype(np.uint8)


def map_color(s: float) -> tuple[int, int, int]:
    """Scalar convenience wrapper around map_colors."""
    r, g, b = map_colors(np.array(s))
    return int(r), int(g), int(b)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write uint8 RGB pixels [H, W, 3] as binary PPM (P6, maxval 255)."""
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ConfigurationError(f"expected uint8 [H, W, 3] pixels, got "
                                 f"{pixels.dtype} {pixels.shape}")
    h, w = pixels.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.tobytes())


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM (P6, maxval 255) back into uint8 [H, W, 3]."""
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise FormatError(f"{path}: truncated PPM header")
        tokens.append(data[start:i])
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a binary PPM (got {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval}")
    payload = data[i + 1:i + 1 + w * h * 3]
    if len(payload) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)


def render_heatmap(snapshot: LayerNasSnapshot | np.ndarray, path, scale: int = 1) -> None:
    """Spatial sparsity grid of one layer as a PPM image, nearest-neighbour
    upscaled by ``scale``. Fully connected layers yield a 1x1 grid."""
    grid = snapshot.grid if isinstance(snapshot, LayerNasSnapshot) else np.asarray(snapshot)
    if grid.ndim != 2:
        raise ConfigurationError(f"heatmap grid must be 2D, got shape {grid.shape}")
    if scale < 1:
        raise ConfigurationError(f"scale must be >= 1, got {scale}")
    pixels = map_colors(grid)
    if scale > 1:
        pixels = pixels.repeat(scale, axis=0).repeat(scale, axis=1)
    write_ppm(path, pixels)


def render_stripe_plot(history: RunHistory, path,
                       cell_width: int = 4, cell_height: int = 10) -> None:
    """Layer-by-epoch colour matrix of median sparsity: one row per layer
    (top = shallowest), one column per epoch."""
    if not history.records or not history.layers:
        raise ConfigurationError("stripe plot needs at least one layer and one epoch")
    values = np.stack([history.layer_series(layer, "median") for layer in history.layers])
    pixels = map_colors(values)
    pixels = pixels.repeat(cell_height, axis=0).repeat(cell_width, axis=1)
    write_ppm(path, pixels)


def _depth_color(index: int, total: int) -> tuple[int, int, int]:
    """Layer depth encoded as brightness: shallow layers dark blue, deep
    layers bright blue."""
    t = index / (total - 1) if total > 1 else 0.0
    dark = (10, 30, 92)
    bright = (110, 178, 255)
    return tuple(int(round(a + (b - a) * t)) for a, b in zip(dark, bright))


def _band_stats(values: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    return values.min(axis=0), np.median(values, axis=0), values.max(axis=0)


def export_lineplot(histories: list[RunHistory], csv_path, svg_path) -> None:
    """Median-sparsity time series per layer with a min/median/max band over
    the repeated runs, plus the (median) test loss, as a CSV table and a
    standalone SVG. A single run is valid; its band collapses to the line."""
    check_aligned(histories)
    layers = histories[0].layers
    epochs = histories[0].epochs
    layer_bands = {}
    for layer in layers:
        series = np.stack([h.layer_series(layer, "median") for h in histories])
        layer_bands[layer] = _band_stats(series)
    loss_series = np.stack([h.test_loss_series() for h in histories])
    loss_lo, loss_med, loss_hi = _band_stats(loss_series)

    with open(csv_path, "w", newline="") as f:
        f.write("epoch,layer,nas_min,nas_median,nas_max,"
                "test_loss_min,test_loss_median,test_loss_max\n")
        for i, epoch in enumerate(epochs):
            for layer in layers:
                lo, med, hi = (float(layer_bands[layer][j][i]) for j in range(3))
                f.write(f"{epoch},{layer},{lo!r},{med!r},{hi!r},"
                        f"{float(loss_lo[i])!r},{float(loss_med[i])!r},"
                        f"{float(loss_hi[i])!r}\n")

    _write_lineplot_svg(svg_path, epochs, layers, layer_bands,
                        (loss_lo, loss_med, loss_hi))


def _fmt(v: float) -> str:
    return f"{v:.3f}"


def _write_lineplot_svg(path, epochs, layers, layer_bands, loss_band) -> None:
    width, height = 860, 520
    left, right, top, bottom = 70, 190, 30, 50
    plot_w = width - left - right
    plot_h = height - top - bottom
    n = len(epochs)
    xs = [left + (plot_w * i / (n - 1) if n > 1 else plot_w / 2) for i in range(n)]

    def y_nas(v: float) -> float:
        return top + plot_h * (1.0 - min(max(v, 0.0), 1.0))

    loss_lo, loss_med, loss_hi = loss_band
    loss_max = max(float(loss_hi.max()), 1e-12)

    def y_loss(v: float) -> float:
        return top + plot_h * (1.0 - min(max(v / loss_max, 0.0), 1.0))

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" '
        f'fill="none" stroke="#333" stroke-width="1"/>',
    ]
    for tick in (0.0, 0.25, 0.5, 0.75, 1.0):
        y = y_nas(tick)
        parts.append(f'<line x1="{left - 4}" y1="{_fmt(y)}" x2="{left}" y2="{_fmt(y)}" '
                     f'stroke="#333"/>')
        parts.append(f'<text x="{left - 8}" y="{_fmt(y + 4)}" font-size="11" '
                     f'text-anchor="end" font-family="sans-serif">{tick:g}</text>')
    for tick_i in range(0, n, max(1, (n - 1) // 6 or 1)):
        x = xs[tick_i]
        parts.append(f'<line x1="{_fmt(x)}" y1="{top + plot_h}" x2="{_fmt(x)}" '
                     f'y2="{top + plot_h + 4}" stroke="#333"/>')
        parts.append(f'<text x="{_fmt(x)}" y="{top + plot_h + 18}" font-size="11" '
                     f'text-anchor="middle" font-family="sans-serif">{epochs[tick_i]}</text>')
    parts.append(f'<text x="{left - 50}" y="{top + plot_h / 2}" font-size="12" '
                 f'font-family="sans-serif" transform="rotate(-90 {left - 50} '
                 f'{top + plot_h / 2})" text-anchor="middle">median activation sparsity</text>')
    parts.append(f'<text x="{left + plot_w / 2}" y="{height - 12}" font-size="12" '
                 f'font-family="sans-serif" text-anchor="middle">epoch</text>')

    for i, layer in enumerate(layers):
        r, g, b = _depth_color(i, len(layers))
        color = f"rgb({r},{g},{b})"
        lo, med, hi = layer_bands[layer]
        upper = " ".join(f"{_fmt(xs[j])},{_fmt(y_nas(hi[j]))}" for j in range(n))
        lower = " ".join(f"{_fmt(xs[j])},{_fmt(y_nas(lo[j]))}" for j in reversed(range(n)))
        parts.append(f'<polygon points="{upper} {lower}" fill="{color}" '
                     f'fill-opacity="0.25" stroke="none"/>')
        line = " ".join(f"{_fmt(xs[j])},{_fmt(y_nas(med[j]))}" for j in range(n))
        parts.append(f'<polyline points="{line}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        ly = top + 14 + 16 * i
        parts.append(f'<line x1="{width - right + 12}" y1="{ly - 4}" '
                     f'x2="{width - right + 34}" y2="{ly - 4}" stroke="{color}" '
                     f'stroke-width="3"/>')
        parts.append(f'<text x="{width - right + 40}" y="{ly}" font-size="11" '
                     f'font-family="sans-serif">{layer}</text>')

    loss_line = " ".join(f"{_fmt(xs[j])},{_fmt(y_loss(float(loss_med[j])))}" for j in range(n))
    parts.append(f'<polyline points="{loss_line}" fill="none" stroke="red" '
                 f'stroke-width="1.5"/>')
    ly = top + 14 + 16 * len(layers)
    parts.append(f'<line x1="{width - right + 12}" y1="{ly - 4}" x2="{width - right + 34}" '
                 f'y2="{ly - 4}" stroke="red" stroke-width="3"/>')
    parts.append(f'<text x="{width - right + 40}" y="{ly}" font-size="11" '
                 f'font-family="sans-serif">test loss (right max {_fmt(loss_max)})</text>')
    parts.append("</svg>")
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(parts) + "\n")
