"""Sampling-time editing with learned directions.

For an active set of directions the noise prediction becomes

    eps_bar = base + sum_i lambda_i * (eps(x_t, d_i) - eps(x_t, null))

where ``base`` is the classifier-free guided prediction for condition ``c``,
or the plain unconditional prediction when no base condition is given (the
mode used for editing inverted real images).  Direction ``i`` contributes only
while ``t`` lies in its window ``(lo * T, hi * T]``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffusion as dm
from . import world
from .diffusion import Denoiser, NoiseSchedule
from .transfer import DirectionEmbedding

DEFAULT_WINDOW = (0.0, 0.4)


@dataclass
class EditTerm:
    direction: DirectionEmbedding
    lambda_e: float
    window: tuple[float, float] = DEFAULT_WINDOW

    def __post_init__(self):
        lo, hi = self.window
        if not 0.0 <= lo < hi <= 1.0:
            raise ValueError(f"edit window must satisfy 0 <= lo < hi <= 1, got {self.window}")
        self.window = (float(lo), float(hi))

    def active(self, t: int, T: int) -> bool:
        lo, hi = self.window
        return lo * T + 1e-9 < t <= hi * T + 1e-9


@dataclass
class EditSpec:
    edits: list[EditTerm] = field(default_factory=list)
    condition: np.ndarray | None = None
    guidance: float = 1.0

    def __post_init__(self):
        names = [e.direction.name for e in self.edits]
        if len(set(names)) != len(names):
            raise ValueError(f"directions in one edit spec must be distinct: {names}")
        if self.guidance < 0:
            raise ValueError("guidance scale must be >= 0")


def single(direction: DirectionEmbedding, lambda_e: float | None = None, window=None, **kw) -> EditSpec:
    lam = direction.lambda_e if lambda_e is None else lambda_e
    return EditSpec([EditTerm(direction, lam, window or direction.window)], **kw)


def edited_noise(m: Denoiser, x_t: np.ndarray, t: int, spec: EditSpec, T: int) -> np.ndarray:
    eps_null = dm._eps(m, x_t, t, None)
    if spec.condition is None or dm.is_null(spec.condition):
        out = eps_null
    else:
        out = dm.combine_guidance(eps_null, dm._eps(m, x_t, t, spec.condition), spec.guidance)
    for term in spec.edits:
        if term.direction.k != m.k:
            raise ValueError(f"direction {term.direction.name!r} has width {term.direction.k}, model expects {m.k}")
        if term.lambda_e != 0.0 and term.active(t, T):
            out = out + term.lambda_e * (dm._eps(m, x_t, t, term.direction.d) - eps_null)
    return out


def _predictor(m: Denoiser, schedule: NoiseSchedule, spec: EditSpec):
    def predict(x, t):
        return edited_noise(m, x, t, spec, schedule.T)

    return predict


def edit_generate(m: Denoiser, schedule: NoiseSchedule, seed: int, spec: EditSpec, runs=(0,)) -> np.ndarray:
    """Generate one image per run index with the edit applied; [n, 256] pixels."""
    noise = dm.SeededNoise(seed, runs)
    return dm.sample(m, schedule, noise, predictor=_predictor(m, schedule, spec))


def edit_real(
    m: Denoiser,
    schedule: NoiseSchedule,
    x0,
    spec: EditSpec,
    seed: int = 0,
    record: dm.InversionRecord | None = None,
) -> np.ndarray:
    """Invert ``x0`` unconditionally, then replay its noise maps with edits."""
    if spec.condition is not None:
        raise ValueError("real-image editing uses an unconditional base; spec.condition must be None")
    if record is None:
        record = dm.invert(m, schedule, x0, seed=seed)
    return dm.sample(m, schedule, record.replay(), predictor=_predictor(m, schedule, spec))


@dataclass
class Interpolation:
    lambdas: np.ndarray
    images: np.ndarray  # [len(lambdas), n, 256]
    attributes: np.ndarray  # [len(lambdas), n, 6]

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["lambda", *world.SHORT_NAMES])
            for lam, rows in zip(self.lambdas, self.attributes):
                for row in rows:
                    w.writerow([repr(float(lam)), *(f"{v:.9g}" for v in row)])
        return path


def interpolate_edit(
    m: Denoiser,
    schedule: NoiseSchedule,
    seed: int,
    direction: DirectionEmbedding,
    lambdas: Sequence[float],
    condition=None,
    window=None,
    runs=(0,),
    guidance: float = 1.0,
) -> Interpolation:
    lambdas = np.asarray(lambdas, dtype=np.float64)
    if np.any(np.diff(lambdas) < 0):
        raise ValueError("lambda grid must be sorted")
    images = []
    for lam in lambdas:
        spec = single(direction, float(lam), window, condition=condition, guidance=guidance)
        images.append(edit_generate(m, schedule, seed, spec, runs))
    images = np.stack(images)
    attrs = np.stack([world.read_attributes_batch(batch)[0] for batch in images])
    return Interpolation(lambdas, images, attrs)
