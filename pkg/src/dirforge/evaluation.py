"""Quantitative evaluation: re-scoring, content preservation and ablations.

Every shift is measured with the analytic oracle (:func:`world.read_attributes`)
and normalised by the attribute's world range, so entries are dimensionless
and rows are comparable across attributes.  Edited and unedited images share
conditions and noise streams, so a shift isolates the edit.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import editing, world
from . import transfer as tr
from .diffusion import Denoiser, NoiseSchedule
from .encoder import EmbeddingEncoder, embed

log = logging.getLogger(__name__)

STREAM_EVAL = 0xE7
STREAM_CALIBRATE = 0xCA
UNDETECTED_LIMIT = 0.2
LAMBDA_GRID = (0.05, 0.1, 0.15, 0.2, 0.3, 0.5, 0.75, 1.0, 1.5, 2.0, 3.0, 4.0)
UNITS = "mean oracle shift divided by the attribute's world range"

TIMESTEP_CELLS = {"all": (0.0, 1.0), "low": (0.0, 0.4), "high": (0.6, 1.0)}
SAMPLE_CELLS = (10, 100)
LOSS_CELLS = {"full": {}, "no_latent": {"w_latent": 0.0}, "no_sem": {"w_sem": 0.0}}
AXES = ("timesteps", "samples", "loss_terms")


def eval_conditions(enc: EmbeddingEncoder, seed: int, n: int, stream: int = STREAM_EVAL) -> np.ndarray:
    """Embeddings of ``n`` seeded world renders, used as base conditions."""
    styles = world.sample_styles(np.random.default_rng([seed, stream]), n)
    return embed(enc, world.render(styles)).data


@dataclass
class EvalSet:
    """Base generations shared by every edit evaluated against them."""

    conditions: np.ndarray
    images: np.ndarray
    attributes: np.ndarray
    seed: int
    guidance: float = 1.0

    @property
    def runs(self) -> range:
        return range(len(self.conditions))

    def __len__(self) -> int:
        return len(self.conditions)


def make_eval_set(m: Denoiser, schedule: NoiseSchedule, conditions: np.ndarray, seed: int, guidance: float = 1.0) -> EvalSet:
    spec = editing.EditSpec([], conditions, guidance)
    images = editing.edit_generate(m, schedule, seed, spec, runs=range(len(conditions)))
    return EvalSet(conditions, images, world.read_attributes_batch(images)[0], seed, guidance)


@dataclass
class ShiftResult:
    shifts: np.ndarray  # [6] normalised mean shift
    images: np.ndarray
    undetected: float

    @property
    def flagged(self) -> bool:
        return self.undetected > UNDETECTED_LIMIT


def normalized_shift(before: np.ndarray, after: np.ndarray) -> tuple[np.ndarray, float]:
    """Mean per-attribute shift over images detected in both sets."""
    ok = ~(np.isnan(before).any(axis=1) | np.isnan(after).any(axis=1))
    undetected = 1.0 - ok.mean()
    if not ok.any():
        return np.full(len(world.ATTRIBUTES), np.nan), undetected
    return np.mean((after[ok] - before[ok]) / world.SPAN, axis=0), float(undetected)


def edit_shift(m: Denoiser, schedule: NoiseSchedule, base: EvalSet, edits: Sequence[editing.EditTerm]) -> ShiftResult:
    spec = editing.EditSpec(list(edits), base.conditions, base.guidance)
    images = editing.edit_generate(m, schedule, base.seed, spec, runs=base.runs)
    shifts, undetected = normalized_shift(base.attributes, world.read_attributes_batch(images)[0])
    if undetected > UNDETECTED_LIMIT:
        warnings.warn(f"blob undetected in {undetected:.0%} of evaluation images", RuntimeWarning)
    return ShiftResult(shifts, images, undetected)


def target_index(direction: tr.DirectionEmbedding) -> int:
    """Attribute a direction was learned for, taken from its provenance."""
    name = direction.provenance.get("direction", direction.name)
    return world.attribute_index(world.DIRECTIONS[name].attribute if name in world.DIRECTIONS else name)


def off_target_mean(shifts: np.ndarray, target: int) -> float:
    """Mean absolute shift over the five attributes the edit should leave alone."""
    return float(np.mean(np.abs(np.delete(shifts, target))))


def is_dominant(row: np.ndarray, target: int) -> bool:
    """Target entry is positive and the largest of its row in magnitude."""
    return bool(row[target] > 0 and np.abs(row[target]) >= np.max(np.abs(row)))


def oracle_noise_floor(images: np.ndarray, seed: int = 0, repeats: int = 2) -> float:
    """Largest mean normalised read-back change under fit-residual pixel jitter.

    Each image is perturbed with Gaussian noise at its own fit residual level and
    re-read; the floor is the largest |mean shift| over attributes and repeats.
    """
    rng = np.random.default_rng([seed, STREAM_EVAL, 0xF1])
    fits = [world.read_attributes(x) for x in images]
    before = np.array([f.values for f in fits])
    resid = np.array([f.residual for f in fits])
    worst = 0.0
    for _ in range(repeats):
        jitter = images + rng.standard_normal(images.shape) * resid[:, None]
        after = world.read_attributes_batch(np.clip(jitter, 0.0, world.PIXEL_MAX))[0]
        shift, _ = normalized_shift(before, after)
        worst = max(worst, float(np.nanmax(np.abs(shift))))
    return worst


# ---------------------------------------------------------------- calibration


def calibrate_lambda(
    m: Denoiser,
    schedule: NoiseSchedule,
    enc: EmbeddingEncoder,
    direction: tr.DirectionEmbedding,
    n_images: int = 32,
    seed: int = 0,
    window=None,
    grid: Sequence[float] = LAMBDA_GRID,
) -> tuple[float, list[dict]]:
    """Smallest grid value whose mean on-target shift reaches the nominal scale.

    The nominal scale is the ground-truth edit amount over the attribute range.
    Falls back to the grid value with the largest on-target shift.  Uses its own
    conditions, disjoint from the evaluation stream.
    """
    name = direction.provenance.get("direction", direction.name)
    nominal = world.DIRECTIONS[name].nominal_scale
    ti = target_index(direction)
    window = window or direction.window
    base = make_eval_set(m, schedule, eval_conditions(enc, seed, n_images, STREAM_CALIBRATE), seed)
    trace = []
    for lam in grid:
        res = edit_shift(m, schedule, base, [editing.EditTerm(direction, lam, window)])
        trace.append({"lambda_e": lam, "on_target": float(res.shifts[ti])})
        if res.shifts[ti] >= nominal:
            return float(lam), trace
    best = max(trace, key=lambda r: r["on_target"])
    log.warning("direction %s never reached nominal shift %.3f; using lambda_e=%g", direction.name, nominal, best["lambda_e"])
    return float(best["lambda_e"]), trace


# ---------------------------------------------------------------- rescoring


@dataclass
class RescoringMatrix:
    """Rows: edited direction.  ``shifts`` covers all six measured attributes;
    ``entries`` is the square block restricted to the edited attributes."""

    rows: list[str]
    targets: list[int]
    shifts: np.ndarray  # [n_rows, 6]
    lambdas: list[float]
    n_images: int
    undetected: list[float]
    config_hash: str = ""
    name: str = "rescoring"

    @property
    def cols(self) -> list[str]:
        return [world.SHORT_NAMES[i] for i in self.targets]

    @property
    def entries(self) -> np.ndarray:
        return self.shifts[:, self.targets]

    @property
    def flagged(self) -> bool:
        return any(u > UNDETECTED_LIMIT for u in self.undetected)

    def dominance(self, full: bool = False) -> list[bool]:
        """Per-row dominance on the square block (or on all six attributes)."""
        if full:
            return [is_dominant(r, t) for r, t in zip(self.shifts, self.targets)]
        return [is_dominant(r, i) for i, r in enumerate(self.entries)]

    def off_target(self) -> list[float]:
        return [off_target_mean(r, t) for r, t in zip(self.shifts, self.targets)]

    def to_json(self) -> dict:
        return {
            "kind": "rescoring",
            "units": UNITS,
            "rows": self.rows,
            "cols": self.cols,
            "entries": _round(self.entries),
            "measured": list(world.SHORT_NAMES),
            "shifts": _round(self.shifts),
            "lambda_e": self.lambdas,
            "n_images": self.n_images,
            "undetected": _round(self.undetected),
            "flagged": self.flagged,
            "dominant": self.dominance(),
            "dominant_all_attributes": self.dominance(full=True),
            "off_target_mean": _round(self.off_target()),
            "config_hash": self.config_hash,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["direction", "lambda_e", *world.SHORT_NAMES, "off_target_mean", "dominant", "config_hash"])
        for i, name in enumerate(self.rows):
            w.writerow([name, _fmt(self.lambdas[i]), *(_fmt(v) for v in self.shifts[i]),
                        _fmt(self.off_target()[i]), int(self.dominance()[i]), self.config_hash])
        return buf.getvalue()

    def to_svg(self) -> str:
        return heatmap_svg(self.entries, self.rows, self.cols, "normalised oracle shift")


def rescoring(
    m: Denoiser,
    schedule: NoiseSchedule,
    directions: Sequence[tr.DirectionEmbedding],
    base: EvalSet,
    lambdas: Sequence[float] | None = None,
    window=None,
    config_hash: str = "",
) -> RescoringMatrix:
    """Edit each base image with each direction and tabulate the mean shifts.

    ``lambdas`` defaults to each direction's calibrated ``lambda_e``.
    """
    if len(base) < 1:
        raise ValueError("rescoring needs at least one evaluation image")
    if lambdas is None:
        lambdas = [d.lambda_e for d in directions]
    if len(lambdas) != len(directions):
        raise ValueError("one lambda_e per direction")
    rows, undetected = [], []
    for d, lam in zip(directions, lambdas):
        res = edit_shift(m, schedule, base, [editing.EditTerm(d, lam, window or d.window)])
        rows.append(res.shifts)
        undetected.append(res.undetected)
    shifts = np.array(rows)
    if not np.all(np.isfinite(shifts)):
        raise ValueError("rescoring produced non-finite entries")
    return RescoringMatrix([d.name for d in directions], [target_index(d) for d in directions], shifts,
                           [float(x) for x in lambdas], len(base), undetected, config_hash)


# ---------------------------------------------------------------- distances


@dataclass
class DistanceReport:
    label: str
    pixel_l2: float
    embedding_l2: float
    n: int
    config_hash: str = ""

    COLUMNS = ("label", "n", "pixel_l2", "embedding_l2", "config_hash")

    def row(self) -> list:
        return [self.label, self.n, _fmt(self.pixel_l2), _fmt(self.embedding_l2), self.config_hash]

    def to_json(self) -> dict:
        return {"kind": "distance", "label": self.label, "n": self.n, "pixel_l2": _round(self.pixel_l2),
                "embedding_l2": _round(self.embedding_l2), "config_hash": self.config_hash}


def distance_report(enc: EmbeddingEncoder, before: np.ndarray, after: np.ndarray, label: str = "", config_hash: str = "") -> DistanceReport:
    """Mean per-pair pixel L2 and raw (unnormalised) embedding L2."""
    before, after = np.atleast_2d(before), np.atleast_2d(after)
    if before.shape != after.shape:
        raise ValueError(f"paired sets differ in shape: {before.shape} vs {after.shape}")
    pix = np.linalg.norm(after - before, axis=1)
    e0 = embed(enc, before, normalize=False).data
    e1 = embed(enc, after, normalize=False).data
    emb = np.linalg.norm(e1 - e0, axis=1)
    return DistanceReport(label, float(pix.mean()), float(emb.mean()), len(before), config_hash)


def distances_csv(reports: Sequence[DistanceReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(DistanceReport.COLUMNS)
    for r in reports:
        w.writerow(r.row())
    return buf.getvalue()


# ---------------------------------------------------------------- ablations


@dataclass
class AblationContext:
    """Everything a grid cell needs; directions are learned lazily and cached."""

    m: Denoiser
    enc: EmbeddingEncoder
    schedule: NoiseSchedule
    base: EvalSet
    transfer: tr.TransferConfig
    seed: int = 0
    direction: str = "radius"
    lambda_e: float | None = None
    window: tuple[float, float] = editing.DEFAULT_WINDOW
    config_hash: str = ""
    cache: dict = field(default_factory=dict, repr=False)

    def learned(self, **overrides) -> tr.DirectionEmbedding:
        defaults = dataclasses.asdict(self.transfer)
        key = tuple(sorted((k, v) for k, v in overrides.items() if defaults.get(k) != v))
        if key not in self.cache:
            cfg = dataclasses.replace(self.transfer, **dict(key))
            pairs = world.make_pairs(self.seed, cfg.n_pairs, world.DIRECTIONS[self.direction])
            self.cache[key] = tr.learn_direction(pairs, self.m, self.enc, self.schedule, cfg)
        return self.cache[key]

    def matched_lambda(self) -> float:
        if self.lambda_e is None:
            self.lambda_e, _ = calibrate_lambda(self.m, self.schedule, self.enc, self.learned(), seed=self.seed,
                                                window=self.window)
        return self.lambda_e


@dataclass
class AblationCell:
    axis: str
    cell: str
    settings: dict
    shifts: np.ndarray
    target: int
    lambda_e: float
    distance: DistanceReport
    direction_norm: float

    @property
    def diagonal(self) -> float:
        return float(self.shifts[self.target])

    @property
    def off_target(self) -> float:
        return off_target_mean(self.shifts, self.target)

    @property
    def dominant(self) -> bool:
        return is_dominant(self.shifts, self.target)

    def to_json(self) -> dict:
        return {
            "axis": self.axis,
            "cell": self.cell,
            "settings": self.settings,
            "lambda_e": self.lambda_e,
            "direction_norm": _round(self.direction_norm),
            "shifts": dict(zip(world.SHORT_NAMES, _round(self.shifts))),
            "diagonal": _round(self.diagonal),
            "off_target_mean": _round(self.off_target),
            "dominant": self.dominant,
            "pixel_l2": _round(self.distance.pixel_l2),
            "embedding_l2": _round(self.distance.embedding_l2),
        }


@dataclass
class AblationReport:
    axis: str
    cells: list[AblationCell]
    config_hash: str = ""
    units: str = UNITS

    @property
    def name(self) -> str:
        return f"ablation_{self.axis}"

    def cell(self, name: str) -> AblationCell:
        for c in self.cells:
            if c.cell == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"kind": "ablation", "axis": self.axis, "units": self.units, "config_hash": self.config_hash,
                "cells": [c.to_json() for c in self.cells]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["axis", "cell", "lambda_e", "diagonal", "off_target_mean", "dominant", "pixel_l2",
                    "embedding_l2", "direction_norm", "config_hash"])
        for c in self.cells:
            w.writerow([self.axis, c.cell, _fmt(c.lambda_e), _fmt(c.diagonal), _fmt(c.off_target), int(c.dominant),
                        _fmt(c.distance.pixel_l2), _fmt(c.distance.embedding_l2), _fmt(c.direction_norm),
                        self.config_hash])
        return buf.getvalue()

    def to_svg(self) -> str:
        series = {"diagonal": [c.diagonal for c in self.cells], "off-target": [c.off_target for c in self.cells]}
        return bar_svg([c.cell for c in self.cells], series, f"{self.axis} ablation")


def _cell_grid(axis: str) -> list[tuple[str, dict]]:
    if axis == "timesteps":
        return [(k, {"window": list(v)}) for k, v in TIMESTEP_CELLS.items()]
    if axis == "samples":
        return [(f"n{n}", {"n_pairs": n}) for n in SAMPLE_CELLS]
    if axis == "loss_terms":
        return [(k, dict(v)) for k, v in LOSS_CELLS.items()]
    raise ValueError(f"unknown ablation axis {axis!r}; expected one of {AXES}")


def ablate(axis: str, ctx: AblationContext, outdir=None) -> AblationReport:
    """Run one predefined grid; every finished cell is written to ``outdir``
    immediately so an interrupted run keeps its partial results."""
    grid = _cell_grid(axis)
    lam = ctx.matched_lambda()
    cells = []
    for name, settings in grid:
        if axis == "timesteps":
            d, window = ctx.learned(), tuple(settings["window"])
        else:
            d, window = ctx.learned(**settings), ctx.window
        res = edit_shift(ctx.m, ctx.schedule, ctx.base, [editing.EditTerm(d, lam, window)])
        dist = distance_report(ctx.enc, ctx.base.images, res.images, f"{axis}:{name}", ctx.config_hash)
        cell = AblationCell(axis, name, settings, res.shifts, target_index(d), lam, dist, float(np.linalg.norm(d.d)))
        cells.append(cell)
        if outdir is not None:
            _write_text(Path(outdir) / "cells" / f"{axis}-{name}.json",
                        _dumps({**cell.to_json(), "config_hash": ctx.config_hash}))
    return AblationReport(axis, cells, ctx.config_hash)


# ---------------------------------------------------------------- reports


def _round(x, digits: int = 9):
    """Round through repr of a 9-significant-digit string so JSON is stable."""
    if isinstance(x, (list, tuple, np.ndarray)):
        return [_round(v, digits) for v in np.asarray(x, dtype=np.float64).tolist()] if np.ndim(x) == 1 else [
            _round(r, digits) for r in x]
    return float(f"{float(x):.{digits}g}")


def _fmt(x) -> str:
    return f"{float(x):.9g}"


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _svg(width: int, height: int, body: list[str]) -> str:
    head = f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">'
    return "\n".join([head, '<rect width="100%" height="100%" fill="white"/>', *body, "</svg>"]) + "\n"


def _colour(v: float, vmax: float) -> str:
    """Diverging blue-white-red scale."""
    a = 0.0 if vmax == 0 else max(-1.0, min(1.0, v / vmax))
    if a >= 0:
        r, g, b = 255, round(255 * (1 - a)), round(255 * (1 - a))
    else:
        r, g, b = round(255 * (1 + a)), round(255 * (1 + a)), 255
    return f"#{r:02x}{g:02x}{b:02x}"


def heatmap_svg(values: np.ndarray, rows: Sequence[str], cols: Sequence[str], title: str = "") -> str:
    values = np.atleast_2d(np.asarray(values, dtype=np.float64))
    cell, left, top = 60, 90, 50
    width, height = left + cell * len(cols) + 20, top + cell * len(rows) + 20
    vmax = float(np.max(np.abs(values))) if values.size else 0.0
    body = [f'<text x="{left}" y="20" font-size="13">{_esc(title)}</text>']
    for j, c in enumerate(cols):
        body.append(f'<text x="{left + j * cell + cell // 2}" y="{top - 8}" font-size="11" text-anchor="middle">{_esc(c)}</text>')
    for i, r in enumerate(rows):
        y = top + i * cell
        body.append(f'<text x="{left - 6}" y="{y + cell // 2 + 4}" font-size="11" text-anchor="end">{_esc(r)}</text>')
        for j in range(len(cols)):
            v = values[i, j]
            x = left + j * cell
            body.append(f'<rect x="{x}" y="{y}" width="{cell}" height="{cell}" fill="{_colour(v, vmax)}" stroke="#888"/>')
            body.append(f'<text x="{x + cell // 2}" y="{y + cell // 2 + 4}" font-size="10" text-anchor="middle">{v:.3f}</text>')
    return _svg(width, height, body)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def bar_svg(labels: Sequence[str], series: dict[str, Sequence[float]], title: str = "") -> str:
    n, k = len(labels), max(1, len(series))
    group, bar, left, top, plot_h = 90, 24, 50, 40, 200
    width, height = left + group * max(n, 1) + 120, top + plot_h + 40
    allv = [v for vals in series.values() for v in vals] or [0.0]
    vmax = max(abs(v) for v in allv) or 1.0
    zero = top + plot_h / 2
    scale = (plot_h / 2) / vmax
    body = [f'<text x="{left}" y="20" font-size="13">{_esc(title)}</text>',
            f'<line x1="{left}" y1="{zero:.2f}" x2="{left + group * n}" y2="{zero:.2f}" stroke="black"/>']
    for s, (name, vals) in enumerate(series.items()):
        colour = _PALETTE[s % len(_PALETTE)]
        body.append(f'<rect x="{left + group * n + 10}" y="{top + 16 * s}" width="10" height="10" fill="{colour}"/>')
        body.append(f'<text x="{left + group * n + 24}" y="{top + 16 * s + 9}" font-size="11">{_esc(name)}</text>')
        for i, v in enumerate(vals):
            x = left + i * group + 10 + s * (bar * 2 // k)
            h = abs(v) * scale
            y = zero - h if v >= 0 else zero
            body.append(f'<rect x="{x}" y="{y:.2f}" width="{bar * 2 // k - 2}" height="{h:.2f}" fill="{colour}"/>')
    for i, lab in enumerate(labels):
        body.append(f'<text x="{left + i * group + group // 2 - 10}" y="{top + plot_h + 20}" font-size="11" text-anchor="middle">{_esc(lab)}</text>')
    return _svg(width, height, body)


def line_svg(x: Sequence[float], series: dict[str, Sequence[float]], title: str = "", xlabel: str = "") -> str:
    left, top, plot_w, plot_h = 50, 40, 320, 200
    width, height = left + plot_w + 130, top + plot_h + 50
    xs = np.asarray(x, dtype=np.float64)
    allv = np.array([v for vals in series.values() for v in vals] or [0.0])
    lo, hi = float(np.min(allv)), float(np.max(allv))
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    x0, x1 = (float(xs.min()), float(xs.max())) if len(xs) else (0.0, 1.0)
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0

    def px(v):
        return left + (v - x0) / (x1 - x0) * plot_w

    def py(v):
        return top + plot_h - (v - lo) / (hi - lo) * plot_h

    body = [f'<text x="{left}" y="20" font-size="13">{_esc(title)}</text>',
            f'<rect x="{left}" y="{top}" width="{plot_w}" height="{plot_h}" fill="none" stroke="black"/>',
            f'<text x="{left + plot_w // 2}" y="{top + plot_h + 35}" font-size="11" text-anchor="middle">{_esc(xlabel)}</text>',
            f'<text x="{left - 4}" y="{top + 4}" font-size="10" text-anchor="end">{hi:.3g}</text>',
            f'<text x="{left - 4}" y="{top + plot_h}" font-size="10" text-anchor="end">{lo:.3g}</text>']
    for v in xs:
        body.append(f'<text x="{px(v):.2f}" y="{top + plot_h + 15}" font-size="10" text-anchor="middle">{v:g}</text>')
    for s, (name, vals) in enumerate(series.items()):
        colour = _PALETTE[s % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(xs, vals))
        body.append(f'<polyline points="{pts}" fill="none" stroke="{colour}" stroke-width="2"/>')
        body.append(f'<text x="{left + plot_w + 10}" y="{top + 14 * s + 10}" font-size="11" fill="{colour}">{_esc(name)}</text>')
    return _svg(width, height, body)


@dataclass
class TraceReport:
    """Mean oracle attributes along an interpolation grid."""

    direction: str
    lambdas: np.ndarray
    attributes: np.ndarray  # [len(lambdas), n, 6]
    config_hash: str = ""

    @property
    def name(self) -> str:
        return f"interp_{self.direction}"

    def means(self) -> np.ndarray:
        return np.nanmean(self.attributes, axis=1)

    def to_json(self) -> dict:
        return {"kind": "interpolation", "direction": self.direction, "lambda_e": _round(self.lambdas),
                "mean_attributes": {a: _round(col) for a, col in zip(world.SHORT_NAMES, self.means().T)},
                "config_hash": self.config_hash}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lambda", *world.SHORT_NAMES, "config_hash"])
        for lam, rows in zip(self.lambdas, self.attributes):
            for row in rows:
                w.writerow([_fmt(lam), *(_fmt(v) for v in row), self.config_hash])
        return buf.getvalue()

    def to_svg(self) -> str:
        span_norm = (self.means() - world.RANGES[:, 0]) / world.SPAN
        series = {a: list(col) for a, col in zip(world.SHORT_NAMES, span_norm.T)}
        return line_svg(self.lambdas, series, f"{self.direction} interpolation (range-normalised)", "lambda_e")


@dataclass
class DistanceTable:
    reports: list[DistanceReport]
    name: str = "distance"

    def to_json(self) -> dict:
        return {"kind": "distance_table", "rows": [r.to_json() for r in self.reports]}

    def to_csv(self) -> str:
        return distances_csv(self.reports)

    def to_svg(self) -> str:
        labels = [r.label for r in self.reports]
        return bar_svg(labels, {"pixel L2": [r.pixel_l2 for r in self.reports],
                                "embedding L2": [r.embedding_l2 for r in self.reports]}, "content preservation")


def emit_report(reports: Sequence, outdir, provenance: dict | None = None) -> list[Path]:
    """Write CSV, JSON and SVG for each report plus an ``index.json``.

    ``provenance`` is embedded in every JSON and as a comment in every SVG.
    """
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write reports to {outdir}: {exc}") from exc
    written, index = [], []
    for rep in reports:
        files = []
        doc, svg = rep.to_json(), rep.to_svg()
        if provenance:
            doc = {**doc, "provenance": provenance}
            svg = svg.replace("\n", f"\n<!-- config_hash={provenance['config_hash']} seed={provenance['seed']} -->\n", 1)
        for ext, text in (("json", _dumps(doc)), ("csv", rep.to_csv()), ("svg", svg)):
            path = _write_text(outdir / f"{rep.name}.{ext}", text)
            files.append(path.name)
            written.append(path)
        index.append({"name": rep.name, "kind": rep.to_json().get("kind"), "files": files})
    head = {"provenance": provenance} if provenance else {}
    written.append(_write_text(outdir / "index.json", _dumps({"reports": index, **head})))
    return written
