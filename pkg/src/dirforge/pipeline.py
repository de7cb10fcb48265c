"""End-to-end experiment stages and the ``reproduce`` run.

Each stage is a plain function so the CLI subcommands can call them one at a
time; :func:`reproduce` chains them into one output tree.  Files inside a tree
never contain timestamps or durations, so two runs with the same config are
byte-identical apart from the directory name.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import checkpoint, editing, imageio, world
from . import diffusion as dm
from . import encoder as en
from . import evaluation as ev
from . import transfer as tr
from .config import RunConfig, stamp

log = logging.getLogger(__name__)

STREAM_WORLD = 0x3D
STREAM_HELDOUT = 0x3E
STREAM_REAL = 0x4E

INTERP_LAMBDAS = (-2.0, -1.0, 0.0, 1.0, 2.0)
INTERP_IMAGES = 16
REAL_IMAGES = 8
PREVIEW_IMAGES = 8
COMPOSE = ("radius", "intensity")


# ---------------------------------------------------------------- output trees


class Tree:
    """An output directory whose files all carry the same provenance stamp."""

    def __init__(self, root, cfg: RunConfig):
        self.root = Path(root)
        self.cfg = cfg
        self.hash = cfg.hash()
        self.provenance = stamp(self.hash, cfg.seed)
        self.written: list[Path] = []
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, rel) -> Path:
        p = self.root / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def add(self, *paths) -> None:
        for p in paths:
            if isinstance(p, (list, tuple)):
                self.add(*p)
            else:
                self.written.append(Path(p))

    def json(self, rel, obj: dict) -> Path:
        p = self.path(rel)
        p.write_text(json.dumps({**obj, "provenance": self.provenance}, sort_keys=True, indent=1) + "\n")
        self.add(p)
        return p

    def pgm(self, rel, image) -> Path:
        comment = f"config_hash={self.hash} seed={self.cfg.seed} dirforge={self.provenance['versions']['dirforge']}"
        p = imageio.write_pgm(self.path(rel), image, comment)
        self.add(p)
        return p

    def images(self, stem, images, pgm_count: int | None = None) -> list[Path]:
        """Raw float32 stack plus one PGM per image (the first ``pgm_count``)."""
        images = np.atleast_2d(images)
        out = [imageio.write_raw(self.path(f"{stem}.f32"), images)]
        self.add(out[0])
        for i, img in enumerate(images[:pgm_count]):
            out.append(self.pgm(f"{stem}_{i:03d}.pgm", img))
        return out

    def reports(self, rel, reports) -> list[Path]:
        paths = ev.emit_report(reports, self.root / rel, self.provenance)
        self.add(paths)
        return paths

    def manifest(self) -> Path:
        files = {}
        for p in sorted(set(self.written)):
            files[p.relative_to(self.root).as_posix()] = hashlib.sha256(p.read_bytes()).hexdigest()
        return self.json("manifest.json", {"files": files})


def run_dir(out, cfg: RunConfig, prefix: str = "") -> Path:
    """``<out>/<prefix><timestamp>-<hash>``, suffixed if that name is taken."""
    base = f"{prefix}{time.strftime('%Y%m%dT%H%M%S', time.gmtime())}-{cfg.hash()}"
    root = Path(out) / base
    n = 1
    while root.exists():
        root = Path(out) / f"{base}.{n}"
        n += 1
    return root


@contextmanager
def thread_cap():
    """Cap BLAS threads at ``DIRFORGE_THREADS`` (default 1) for bit stability."""
    from threadpoolctl import threadpool_limits

    raw = os.environ.get("DIRFORGE_THREADS", "1")
    try:
        limit = max(1, int(raw))
    except ValueError:
        raise ValueError(f"DIRFORGE_THREADS must be a positive integer, got {raw!r}") from None
    with threadpool_limits(limits=limit):
        yield


@contextmanager
def stage(name: str):
    t0 = time.perf_counter()
    log.info("%s ...", name)
    yield
    log.info("%s done in %.1fs", name, time.perf_counter() - t0)


def paper_defaults(cfg: RunConfig | None = None) -> RunConfig:
    """Transfer hyperparameters of the reference protocol at seed 0."""
    cfg = cfg or RunConfig()
    cfg = cfg.with_seed(0)
    cfg.schedule = dataclasses.replace(cfg.schedule, T=100)
    cfg.transfer = dataclasses.replace(cfg.transfer, lr=5e-3, batch_size=8, iterations=1000, n_pairs=100, seed=0)
    return cfg


# ---------------------------------------------------------------- stages


def training_world(cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    styles = world.sample_styles(np.random.default_rng([cfg.seed, STREAM_WORLD]), cfg.world.n_train)
    return world.render(styles), styles


def heldout_world(cfg: RunConfig, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    styles = world.sample_styles(np.random.default_rng([cfg.seed, STREAM_HELDOUT]), n or cfg.world.n_heldout)
    return world.render(styles), styles


def fit_encoder(cfg: RunConfig, images, styles) -> tuple[en.EmbeddingEncoder, dict]:
    n = min(cfg.encoder.n_train, len(images))
    enc = en.train_encoder(images[:n], styles[:n], cfg.encoder)
    held_x, held_s = heldout_world(cfg)
    r2 = en.probe_r2(enc, images[:n], styles[:n], held_x, held_s)
    return enc, {"probe_r2": dict(zip(world.SHORT_NAMES, ev._round(r2)))}


def fit_denoiser(cfg: RunConfig, images, enc: en.EmbeddingEncoder) -> tuple[dm.Denoiser, dict]:
    schedule = cfg.schedule.build()
    conditions = en.embed(enc, images).data
    m = dm.train_denoiser(images, conditions, schedule, cfg.denoiser)
    held_x, _ = heldout_world(cfg)
    held_c = en.embed(enc, held_x).data
    meta = {
        "heldout_loss_conditional": ev._round(dm.denoising_loss(m, schedule, held_x, held_c, cfg.seed)),
        "heldout_loss_unconditional": ev._round(dm.denoising_loss(m, schedule, held_x, None, cfg.seed)),
    }
    return m, meta


def fit_direction(
    cfg: RunConfig,
    name: str,
    m: dm.Denoiser,
    enc: en.EmbeddingEncoder,
    pairs: world.PairSet | None = None,
    calibrate: bool = True,
    **overrides,
) -> tuple[tr.DirectionEmbedding, list[dict]]:
    """Learn one registered direction and (optionally) calibrate its lambda_e."""
    tcfg = dataclasses.replace(cfg.transfer, **overrides)
    if pairs is None:
        pairs = world.make_pairs(cfg.seed, tcfg.n_pairs, world.DIRECTIONS[name])
    d = tr.learn_direction(pairs, m, enc, m.schedule, tcfg, name=name, provenance=stamp(cfg.hash(), cfg.seed))
    d.window = tuple(cfg.edit.window)
    trace: list[dict] = []
    if cfg.edit.lambda_e is not None:
        d.lambda_e = float(cfg.edit.lambda_e)
    elif calibrate:
        d.lambda_e, trace = ev.calibrate_lambda(m, m.schedule, enc, d, cfg.eval.calibration_images, cfg.seed)
    d.provenance["calibration"] = trace
    return d, trace


def eval_set(cfg: RunConfig, m: dm.Denoiser, enc: en.EmbeddingEncoder, n: int | None = None) -> ev.EvalSet:
    conditions = ev.eval_conditions(enc, cfg.seed, n or cfg.eval.m_images)
    return ev.make_eval_set(m, m.schedule, conditions, cfg.seed, cfg.edit.guidance)


def model_meta(tree: Tree, **extra) -> dict:
    return {"provenance": tree.provenance, **extra}


# ---------------------------------------------------------------- reproduce


def reproduce(cfg: RunConfig, root) -> tuple[Path, dict]:
    """Run every stage into ``root``; returns the tree root and the summary."""
    tree = Tree(root, cfg)
    summary: dict = {"config_hash": tree.hash, "seed": cfg.seed}
    tree.json("config.json", {"config": cfg.to_dict()})
    with thread_cap():
        with stage("world"):
            images, styles = training_world(cfg)
            for name, gt in world.DIRECTIONS.items():
                pairs = world.make_pairs(cfg.seed, cfg.transfer.n_pairs, gt)
                tree.add(world.write_dataset(tree.root / "world" / name, pairs, {"provenance": tree.provenance}))

        with stage("encoder"):
            enc, enc_meta = fit_encoder(cfg, images, styles)
            tree.add(en.save_encoder(tree.path("models/encoder.gtfw"), enc, model_meta(tree, **enc_meta)))
            summary["encoder"] = enc_meta

        with stage("denoiser"):
            m, m_meta = fit_denoiser(cfg, images, enc)
            tree.add(dm.save_denoiser(tree.path("models/denoiser.gtfw"), m, model_meta(tree, **m_meta)))
            summary["denoiser"] = m_meta
            del images, styles

        directions = {}
        for name in world.DIRECTIONS:
            with stage(f"direction {name}"):
                d, _ = fit_direction(cfg, name, m, enc)
                tree.add(tr.save_direction(tree.path(f"directions/{name}.gtd"), d))
                directions[name] = d
        summary["directions"] = {
            n: {"lambda_e": d.lambda_e, "norm": ev._round(np.linalg.norm(d.d)),
                "final_loss": ev._round(d.history[-1]["loss"]) if d.history else None}
            for n, d in directions.items()
        }

        with stage("evaluation set"):
            base = eval_set(cfg, m, enc)
            floor = ev.oracle_noise_floor(base.images, cfg.seed)
            summary["noise_floor"] = ev._round(floor)
            tree.images("samples/base", base.images, PREVIEW_IMAGES)

        reports = []
        with stage("rescoring"):
            matrix = ev.rescoring(m, m.schedule, list(directions.values()), base, config_hash=tree.hash)
            reports.append(matrix)
            summary["rescoring"] = {
                "rows": matrix.rows, "dominant": matrix.dominance(),
                "dominant_all_attributes": matrix.dominance(full=True),
                "diagonal": ev._round(np.diag(matrix.entries)), "off_target_mean": ev._round(matrix.off_target()),
                "flagged": matrix.flagged,
            }

        with stage("ablations"):
            ctx = ev.AblationContext(m, enc, m.schedule, base, cfg.transfer, cfg.seed, "radius",
                                     directions["radius"].lambda_e, tuple(cfg.edit.window), tree.hash)
            ctx.cache[()] = directions["radius"]
            ablations = {}
            for axis in ev.AXES:
                rep = ev.ablate(axis, ctx, tree.root / "reports")
                tree.add(sorted((tree.root / "reports" / "cells").glob(f"{axis}-*.json")))
                ablations[axis] = rep
                reports.append(rep)
            t_all, t_low = ablations["timesteps"].cell("all"), ablations["timesteps"].cell("low")
            reports.append(ev.DistanceTable([t_low.distance, t_all.distance]))
            summary["ablations"] = {
                axis: {c.cell: {"diagonal": ev._round(c.diagonal), "off_target_mean": ev._round(c.off_target),
                                "dominant": c.dominant, "pixel_l2": ev._round(c.distance.pixel_l2),
                                "embedding_l2": ev._round(c.distance.embedding_l2), "lambda_e": c.lambda_e,
                                "direction_norm": ev._round(c.direction_norm)}
                       for c in rep.cells}
                for axis, rep in ablations.items()
            }

        with stage("interpolation"):
            d = directions["radius"]
            sub = ev.EvalSet(base.conditions[:INTERP_IMAGES], base.images[:INTERP_IMAGES],
                             base.attributes[:INTERP_IMAGES], base.seed, base.guidance)
            interp = editing.interpolate_edit(m, m.schedule, cfg.seed, d, INTERP_LAMBDAS, sub.conditions,
                                              d.window, sub.runs, sub.guidance)
            trace = ev.TraceReport(d.name, interp.lambdas, interp.attributes, tree.hash)
            reports.append(trace)
            zero = list(interp.lambdas).index(0.0)
            means = np.nanmean(interp.attributes[:, :, ev.target_index(d)], axis=1)
            summary["interpolation"] = {
                "direction": d.name, "lambda_e": list(INTERP_LAMBDAS), "target_mean": ev._round(means),
                "zero_matches_unedited": bool(np.array_equal(interp.images[zero], sub.images)),
            }
            for lam, imgs in zip(interp.lambdas, interp.images):
                tree.images(f"edits/interp/{d.name}_lambda{lam:+g}", imgs, 2)

        with stage("composition"):
            terms = [editing.EditTerm(directions[n], directions[n].lambda_e, directions[n].window) for n in COMPOSE]
            both = ev.edit_shift(m, m.schedule, base, terms)
            single = {n: float(matrix.shifts[matrix.rows.index(n), ev.target_index(directions[n])]) for n in COMPOSE}
            joint = {n: float(both.shifts[ev.target_index(directions[n])]) for n in COMPOSE}
            summary["composition"] = {
                "directions": list(COMPOSE), "lambda_e": [directions[n].lambda_e for n in COMPOSE],
                "single_shift": {n: ev._round(v) for n, v in single.items()},
                "joint_shift": {n: ev._round(v) for n, v in joint.items()},
                "ratio": {n: ev._round(joint[n] / single[n]) if single[n] != 0 else None for n in COMPOSE},
                "shifts": dict(zip(world.SHORT_NAMES, ev._round(both.shifts))),
            }
            tree.images("edits/compose/radius_intensity", both.images, PREVIEW_IMAGES)

        with stage("real-image edit"):
            summary["real_edit"] = real_edit(tree, cfg, m, directions["radius"])

        with stage("reports"):
            tree.reports("reports", reports)
        tree.json("summary.json", summary)
    tree.manifest()
    return tree.root, summary


def real_edit(tree: Tree, cfg: RunConfig, m: dm.Denoiser, d: tr.DirectionEmbedding) -> dict:
    """Invert held-out renders, check the replay, then apply one edit."""
    styles = world.sample_styles(np.random.default_rng([cfg.seed, STREAM_REAL]), REAL_IMAGES)
    x0 = world.render(styles)
    record = dm.invert(m, m.schedule, x0, seed=cfg.seed)
    replay = editing.edit_real(m, m.schedule, x0, editing.EditSpec([]), record=record.replay())
    edited = editing.edit_real(m, m.schedule, x0, editing.single(d), record=record.replay())
    shifts, undetected = ev.normalized_shift(world.read_attributes_batch(x0)[0], world.read_attributes_batch(edited)[0])
    tree.images("edits/real/input", x0, REAL_IMAGES)
    tree.images(f"edits/real/{d.name}", edited, REAL_IMAGES)
    return {
        "n": REAL_IMAGES, "direction": d.name, "lambda_e": d.lambda_e,
        "reconstruction_max_abs": float(np.max(np.abs(replay - x0))),
        "shifts": dict(zip(world.SHORT_NAMES, ev._round(shifts))), "undetected": undetected,
    }


# ---------------------------------------------------------------- verification


def _hashes_in(path: Path) -> list[str]:
    """Config hashes embedded in one artifact file (empty if it carries none)."""
    suffix = path.suffix
    if suffix == ".json":
        doc = json.loads(path.read_text())
        found = []
        if isinstance(doc.get("provenance"), dict):
            found.append(doc["provenance"].get("config_hash"))
        if "config_hash" in doc and doc["config_hash"]:
            found.append(doc["config_hash"])
        return found
    if suffix in (".gtfw", ".gtd"):
        _, header = checkpoint.read_checkpoint(path)
        return [header.get("provenance", {}).get("config_hash")]
    if suffix == ".pgm":
        comments = imageio.read_pgm(path)[1]
        return [c.split("config_hash=")[1].split()[0] for c in comments if "config_hash=" in c]
    if suffix == ".svg":
        text = path.read_text()
        return [text.split("config_hash=")[1].split()[0]] if "config_hash=" in text else []
    if suffix == ".csv":
        lines = path.read_text().splitlines()
        if lines and "config_hash" in lines[0].split(","):
            col = lines[0].split(",").index("config_hash")
            return sorted({ln.split(",")[col] for ln in lines[1:]})
        return []
    return []


def verify_tree(root) -> dict:
    """Check that every stamped file names the same config hash and that the
    manifest checksums (if present) match."""
    root = Path(root)
    hashes: dict[str, list[str]] = {}
    unstamped, problems = [], []
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        rel = p.relative_to(root).as_posix()
        try:
            found = _hashes_in(p)
        except (ValueError, checkpoint.CheckpointError, json.JSONDecodeError) as exc:
            problems.append(f"{rel}: unreadable ({exc})")
            continue
        if found:
            hashes[rel] = found
        else:
            unstamped.append(rel)
    distinct = sorted({h for hs in hashes.values() for h in hs})
    if len(distinct) > 1:
        problems.append(f"config hashes disagree: {distinct}")
    if any(h is None for hs in hashes.values() for h in hs):
        problems.append("some files have provenance without a config hash")
    manifest = root / "manifest.json"
    if manifest.exists():
        files = json.loads(manifest.read_text())["files"]
        for rel, digest in sorted(files.items()):
            p = root / rel
            if not p.exists():
                problems.append(f"{rel}: listed in manifest but missing")
            elif hashlib.sha256(p.read_bytes()).hexdigest() != digest:
                problems.append(f"{rel}: checksum differs from manifest")
    return {"root": str(root), "config_hash": distinct[0] if len(distinct) == 1 else None,
            "stamped": len(hashes), "unstamped": unstamped, "problems": problems, "ok": not problems}
