"""Deterministic artifact writers (JSON, CSV, SVG) and run-directory metadata."""

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from . import __version__


def jsonable(obj: Any) -> Any:
    """Convert numpy scalars/arrays, dataclasses and non-finite floats into plain JSON values."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return None
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        if hasattr(obj, "to_dict"):
            return jsonable(obj.to_dict())
        return jsonable(dataclasses.asdict(obj))
    if hasattr(obj, "to_dict"):
        return jsonable(obj.to_dict())
    if obj is None or isinstance(obj, str):
        return obj
    return str(obj)


def dumps(obj: Any) -> str:
    return json.dumps(jsonable(obj), indent=2, sort_keys=True) + "\n"


def write_json(path, obj: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def read_json(path) -> Any:
    with open(path) as fh:
        return json.load(fh)


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def write_run_meta(outdir, config: Any) -> None:
    """Every run directory carries its resolved config and the tool version."""
    outdir = Path(outdir)
    write_json(outdir / "config.json", config)
    (outdir / "VERSION").write_text(f"orbigeo {__version__}\n")


# ---------------------------------------------------------------------------
# SVG


def _svg(width: int, height: int, body: Sequence[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
            f'viewBox="0 0 {width} {height}">')
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def _polyline(xs, ys, color: str, closed: bool = False, width: float = 1.0) -> str:
    pts = " ".join(f"{x:.3f},{y:.3f}" for x, y in zip(xs, ys))
    tag = "polygon" if closed else "polyline"
    return f'<{tag} points="{pts}" fill="none" stroke="{color}" stroke-width="{width}"/>'


def curves_svg(path, curves: Sequence[np.ndarray], surface, closed: Optional[Sequence[bool]] = None,
               size: int = 480) -> Path:
    """Curves given as (r, theta) arrays drawn in the azimuthal projection about the north pole."""
    from .geodesic import azimuthal_projection
    closed = closed or [False] * len(curves)
    xy = [azimuthal_projection(surface, c[:, 0], c[:, 1]) for c in curves]
    R = max([float(np.max(np.hypot(x, y))) for x, y in xy] + [1e-12])
    sc = 0.45 * size / R
    colors = ["#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad", "#d35400", "#555555"]
    body = [f'<circle cx="{size / 2}" cy="{size / 2}" r="2" fill="black"/>']
    for k, (x, y) in enumerate(xy):
        body.append(_polyline(size / 2 + sc * x, size / 2 - sc * y, colors[k % len(colors)], closed[k]))
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(_svg(size, size, body))
    return p


def phase_portrait_svg(path, orbits: Sequence[np.ndarray], length: float, size: int = 480) -> Path:
    """Orbits of the return map as dots in the (t, cos alpha) rectangle."""
    body = [f'<rect x="0" y="0" width="{size}" height="{size}" fill="none" stroke="black"/>']
    colors = ["#1f4e9c", "#c0392b", "#2e8b57", "#8e44ad", "#d35400", "#555555"]
    for k, orb in enumerate(orbits):
        col = colors[k % len(colors)]
        for t, a in orb:
            if not (math.isfinite(t) and math.isfinite(a)):
                continue
            x = size * (t % length) / length
            y = size * 0.5 * (1.0 - math.cos(a))
            body.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1" fill="{col}"/>')
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(_svg(size, size, body))
    return p
