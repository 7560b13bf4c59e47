"""SVG emission: dataset contact sheets and trajectory overlays on scene images.

SVG is written as plain text with frames embedded as base64 PNG, so plots are
byte-deterministic and need no plotting library.
"""
from __future__ import annotations

import base64
from typing import Dict, Optional, Sequence
from xml.sax.saxutils import escape

import cv2
import numpy as np

from .data import TrajectoryDataset

OBSERVED_COLOR = "#1f77b4"
TRUTH_COLOR = "#2ca02c"
PREDICTED_COLOR = "#d62728"


def _png_data_uri(image: np.ndarray) -> str:
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    ok, buf = cv2.imencode(".png", cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    if not ok:
        raise ValueError("PNG encoding failed")
    return "data:image/png;base64," + base64.b64encode(buf.tobytes()).decode("ascii")


def _polyline(xy: np.ndarray, size: float, color: str, width: float = 1.5, dash: Optional[str] = None,
              ox: float = 0.0, oy: float = 0.0, opacity: float = 1.0) -> str:
    pts = " ".join(f"{ox + x * size:.2f},{oy + y * size:.2f}" for x, y in np.asarray(xy, dtype=float))
    extra = f' stroke-dasharray="{dash}"' if dash else ""
    return (f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"'
            f' stroke-opacity="{opacity}"{extra}/>')


def contact_sheet_svg(dataset: TrajectoryDataset, frames: Dict[int, np.ndarray], n_tiles: int = 12,
                      columns: int = 4, tile: int = 128) -> str:
    """Grid of evenly spaced frames with the annotated agent positions marked."""
    keys = sorted(frames)
    if keys:
        picks = sorted({keys[int(i)] for i in np.linspace(0, len(keys) - 1, min(n_tiles, len(keys)))})
    else:
        picks = []
    rows = max(1, -(-len(picks) // columns))
    width, height = columns * tile, rows * (tile + 16)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<title>{escape(dataset.name)}</title>']
    for n, f in enumerate(picks):
        ox, oy = (n % columns) * tile, (n // columns) * (tile + 16)
        parts.append(f'<image x="{ox}" y="{oy}" width="{tile}" height="{tile}" href="{_png_data_uri(frames[f])}"/>')
        sel = dataset.frame_idx == f
        for x, y in dataset.xy[sel]:
            parts.append(f'<circle cx="{ox + x * tile:.2f}" cy="{oy + y * tile:.2f}" r="2" fill="none" '
                         f'stroke="{OBSERVED_COLOR}"/>')
        parts.append(f'<text x="{ox + 2}" y="{oy + tile + 12}" font-size="10">frame {f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def trajectory_svg(image: Optional[np.ndarray], observed: np.ndarray, truth: np.ndarray,
                   predicted: Sequence[np.ndarray], size: int = 256, title: str = "") -> str:
    """Observed track, ground truth and one or more predicted tracks over the scene image.

    Coordinates are normalized to [0, 1]; the last observed point is prepended to each
    future track so the lines join up.
    """
    observed = np.asarray(observed, dtype=float)
    anchor = observed[-1:]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
             f'viewBox="0 0 {size} {size}">']
    if title:
        parts.append(f"<title>{escape(title)}</title>")
    if image is not None:
        parts.append(f'<image x="0" y="0" width="{size}" height="{size}" href="{_png_data_uri(image)}"/>')
    parts.append(_polyline(observed, size, OBSERVED_COLOR, 2.0))
    parts.append(_polyline(np.vstack([anchor, truth]), size, TRUTH_COLOR, 2.0))
    opacity = 1.0 if len(predicted) == 1 else 0.5
    for track in predicted:
        parts.append(_polyline(np.vstack([anchor, track]), size, PREDICTED_COLOR, 1.5, "4,2", opacity=opacity))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
