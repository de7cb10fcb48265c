"""Procedural blob world with a six-parameter style space.

A style vector ``s`` has the components listed in :data:`ATTRIBUTES`.  The
renderer draws one anisotropic Gaussian blob on a constant background::

    pixel(u, v) = background + intensity * exp(-q / 2)
    q = ((u - cx) / radius)**2 + ((v - cy) / (radius * aspect))**2

on a 16x16 grid of pixel centres ``(j + 0.5) / 16``; ``u`` runs along columns
and ``v`` along rows.  Style components are clamped into :data:`RANGES` before
rendering and pixels are clipped to ``[0, 1.2]``.

:func:`read_attributes` inverts the renderer: closed-form moment estimates,
optionally refined by a bounded least-squares fit of the render model.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

ATTRIBUTES = ("center_x", "center_y", "radius", "intensity", "aspect", "background")
SHORT_NAMES = ("cx", "cy", "radius", "intensity", "aspect", "bg")
RANGES = np.array(
    [
        [0.2, 0.8],
        [0.2, 0.8],
        [0.08, 0.3],
        [0.3, 1.0],
        [0.5, 2.0],
        [0.0, 0.25],
    ]
)
SPAN = RANGES[:, 1] - RANGES[:, 0]
SIZE = 16
N_PIXELS = SIZE * SIZE
PIXEL_MAX = 1.2
DETECT_THRESHOLD = 0.05

_coords = (np.arange(SIZE) + 0.5) / SIZE
GRID_V, GRID_U = np.meshgrid(_coords, _coords, indexing="ij")
_U = GRID_U.ravel()
_V = GRID_V.ravel()

# least-squares search box: wider than RANGES so edits past the sampling range
# remain measurable
_FIT_LO = np.array([-0.2, -0.2, 0.02, 0.0, 0.2, -0.3])
_FIT_HI = np.array([1.2, 1.2, 0.7, 2.0, 5.0, 0.6])


def attribute_index(name: str) -> int:
    return ATTRIBUTES.index(name)


@dataclass(frozen=True)
class GroundTruthDirection:
    """A known style-space displacement ``delta`` that edits one attribute."""

    name: str
    delta: np.ndarray
    nominal_scale: float

    def __post_init__(self):
        delta = np.asarray(self.delta, dtype=np.float64)
        if delta.shape != (len(ATTRIBUTES),) or not np.any(delta):
            raise ValueError(f"direction {self.name!r}: delta must be a non-zero 6-vector")
        object.__setattr__(self, "delta", delta)

    @property
    def attribute(self) -> str:
        return ATTRIBUTES[int(np.argmax(np.abs(self.delta) / SPAN))]

    def to_json(self) -> dict:
        return {"name": self.name, "delta": self.delta.tolist(), "nominal_scale": self.nominal_scale}


def _single(name: str, amount: float) -> GroundTruthDirection:
    delta = np.zeros(len(ATTRIBUTES))
    i = attribute_index(name)
    delta[i] = amount
    return GroundTruthDirection(name, delta, amount / SPAN[i])


# nominal_scale is the edit size in units of the attribute's range
DIRECTIONS: dict[str, GroundTruthDirection] = {
    d.name: d
    for d in (
        _single("radius", 0.06),
        _single("intensity", 0.25),
        _single("aspect", 0.5),
        _single("center_x", 0.15),
    )
}


def clamp_style(s) -> tuple[np.ndarray, np.ndarray]:
    """Clamp into RANGES; also return a boolean mask of clamped components."""
    s = np.asarray(s, dtype=np.float64)
    out = np.clip(s, RANGES[:, 0], RANGES[:, 1])
    return out, out != s


def _blob(s: np.ndarray) -> np.ndarray:
    cx, cy, r, inten, asp, bg = (s[..., i : i + 1] for i in range(6))
    q = ((_U - cx) / r) ** 2 + ((_V - cy) / (r * asp)) ** 2
    return bg + inten * np.exp(-0.5 * q)


def render(s, return_clamped: bool = False):
    """Render one style vector ([6] -> [256]) or a batch ([n, 6] -> [n, 256])."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape[-1] != len(ATTRIBUTES) or s.ndim > 2:
        raise ValueError(f"style vectors must have shape [6] or [n, 6], got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise ValueError("style vector is not finite")
    sc, clamped = clamp_style(s)
    img = np.clip(_blob(sc), 0.0, PIXEL_MAX)
    return (img, clamped) if return_clamped else img


def as_grid(x) -> np.ndarray:
    return np.asarray(x).reshape(*np.shape(x)[:-1], SIZE, SIZE)


def sample_styles(rng: np.random.Generator, n: int) -> np.ndarray:
    return rng.uniform(RANGES[:, 0], RANGES[:, 1], size=(n, len(ATTRIBUTES)))


@dataclass
class PairSet:
    """Index-aligned (input, edited) renders for one ground-truth direction."""

    direction: GroundTruthDirection
    seed: int
    styles: np.ndarray
    inputs: np.ndarray
    edited: np.ndarray

    def __len__(self) -> int:
        return len(self.styles)


def make_pairs(seed: int, n: int, direction: GroundTruthDirection) -> PairSet:
    if n < 1:
        raise ValueError("need at least one pair")
    rng = np.random.default_rng([int(seed), 0x5EED])
    styles = sample_styles(rng, n)
    return PairSet(direction, int(seed), styles, render(styles), render(styles + direction.delta))


def write_dataset(outdir, pairs: PairSet, extra_meta: dict | None = None) -> list[Path]:
    """Write ``meta.json`` and ``pairs.f32`` ([N, 2, 256] little-endian float32)."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    meta = {
        "attributes": list(ATTRIBUTES),
        "ranges": RANGES.tolist(),
        "image_size": [SIZE, SIZE],
        "seed": pairs.seed,
        "n": len(pairs),
        "layout": "[N, 2, 256] float32 little-endian, input then edited",
        "direction": pairs.direction.name,
        "registry": {k: d.to_json() for k, d in DIRECTIONS.items()},
        "styles": pairs.styles.tolist(),
    }
    meta.update(extra_meta or {})
    blob = np.stack([pairs.inputs, pairs.edited], axis=1).astype("<f4")
    meta_path, data_path = outdir / "meta.json", outdir / "pairs.f32"
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    data_path.write_bytes(blob.tobytes())
    return [meta_path, data_path]


def read_dataset(outdir) -> tuple[dict, np.ndarray]:
    outdir = Path(outdir)
    meta = json.loads((outdir / "meta.json").read_text())
    raw = np.frombuffer((outdir / "pairs.f32").read_bytes(), dtype="<f4")
    n = meta["n"]
    if raw.size != n * 2 * N_PIXELS:
        raise ValueError(f"pairs.f32 holds {raw.size} floats, expected {n * 2 * N_PIXELS}")
    return meta, raw.reshape(n, 2, N_PIXELS).astype(np.float64)


@dataclass
class AttributeEstimate:
    values: np.ndarray
    confidence: float
    residual: float = 0.0


def moment_estimate(x) -> AttributeEstimate:
    """Closed-form estimator.

    background: 8th-smallest pixel.  Centre: centroid of the
    background-subtracted image ``w``.  radius: sqrt of the column-direction
    second central moment; aspect: ratio of row to column spreads.
    intensity: peak of ``w``.
    """
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape != (N_PIXELS,) or not np.all(np.isfinite(x)):
        raise ValueError("expected a finite 256-pixel image")
    bg = float(np.partition(x, 7)[7])
    w = np.clip(x - bg, 0.0, None)
    peak = float(w.max())
    vals = np.full(len(ATTRIBUTES), np.nan)
    vals[5] = bg
    if peak < DETECT_THRESHOLD:
        return AttributeEstimate(vals, 0.0)
    m = w.sum()
    cx = float(w @ _U / m)
    cy = float(w @ _V / m)
    sx = float(np.sqrt(w @ (_U - cx) ** 2 / m))
    sy = float(np.sqrt(w @ (_V - cy) ** 2 / m))
    vals[:5] = [cx, cy, sx, peak, sy / max(sx, 1e-6)]
    return AttributeEstimate(vals, 1.0)


def _residuals(p, x):
    return np.clip(_blob(p), 0.0, PIXEL_MAX) - x


def read_attributes(x, refine: bool = True) -> AttributeEstimate:
    """Estimate the style vector that produced image ``x``.

    With ``refine`` the moment estimate seeds a bounded least-squares fit of
    the (unclamped) render model.  Undetectable blobs return confidence 0 with
    NaN blob attributes and only the background filled in.
    """
    est = moment_estimate(x)
    if not refine or est.confidence == 0.0:
        return est
    x = np.asarray(x, dtype=np.float64).ravel()
    p0 = np.clip(est.values, _FIT_LO + 1e-9, _FIT_HI - 1e-9)
    fit = least_squares(_residuals, p0, bounds=(_FIT_LO, _FIT_HI), args=(x,), x_scale=SPAN / 4)
    rms = float(np.sqrt(np.mean(fit.fun**2)))
    return AttributeEstimate(fit.x, 1.0, rms)


def read_attributes_batch(xs, refine: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise :func:`read_attributes`; returns ``(values [n, 6], confidence [n])``."""
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    ests = [read_attributes(x, refine) for x in xs]
    return np.stack([e.values for e in ests]), np.array([e.confidence for e in ests])
