"""Command-line interface.

Every subcommand reads the same global flags, writes under ``--out`` and
finishes by printing one JSON line listing the files it wrote.  Exit codes:
0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, editing, imageio, world
from . import diffusion as dm
from . import encoder as en
from . import evaluation as ev
from . import pipeline as pl
from . import transfer as tr
from .config import RunConfig, stamp

log = logging.getLogger("dirforge")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """ArgumentParser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo,hi (e.g. 0,0.4), got {text!r}") from None
    if not 0.0 <= lo < hi <= 1.0:
        raise argparse.ArgumentTypeError(f"window must satisfy 0 <= lo < hi <= 1, got {text!r}")
    return lo, hi


def _count(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive count, got {text!r}")
    return value


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be a u64, got {text!r}")
    return value


def build_parser() -> Parser:
    common = Parser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--config", type=Path, help="JSON run configuration")
    g.add_argument("--seed", type=_seed, help="global seed (overrides the config)")
    g.add_argument("--out", type=Path, help="output root (default: the config's 'out')")
    g.add_argument("--model", type=Path, help="denoiser checkpoint (default: <out>/models/denoiser.gtfw)")
    g.add_argument("--encoder", type=Path, help="encoder checkpoint (default: <out>/models/encoder.gtfw)")
    g.add_argument("--n", type=_count, help="number of pairs, images or evaluation samples")
    g.add_argument("--iters", type=_count, help="training steps or transfer iterations")
    g.add_argument("--window", type=_window, help="edit window lo,hi as fractions of T")
    g.add_argument("--lambda-g", type=float, help="classifier-free guidance scale")
    g.add_argument("-v", "--verbose", action="store_true", help="progress logging on stderr")

    directions = Parser(add_help=False)
    directions.add_argument("--direction", action="append", type=Path, default=[],
                            help="direction file (repeatable)")
    directions.add_argument("--lambda-e", action="append", type=float, default=[],
                            help="edit strength, matched to --direction by position (repeatable)")

    p = Parser(prog="dirforge", description="Learn and apply conditioning-space edit directions.")
    p.add_argument("--version", action="version", version=f"dirforge {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    w = sub.add_parser("world", help="synthetic world datasets")
    wsub = w.add_subparsers(dest="action", required=True, parser_class=Parser)
    wg = wsub.add_parser("gen", parents=[common], help="write paired renders for registered directions")
    wg.add_argument("--name", action="append", choices=sorted(world.DIRECTIONS), default=[],
                    help="registered direction (repeatable; default all)")

    t = sub.add_parser("train", help="train models")
    tsub = t.add_subparsers(dest="action", required=True, parser_class=Parser)
    tsub.add_parser("encoder", parents=[common], help="train the embedding encoder")
    tsub.add_parser("diffusion", parents=[common], help="train the conditional denoiser")

    d = sub.add_parser("direction", help="direction embeddings")
    dsub = d.add_subparsers(dest="action", required=True, parser_class=Parser)
    dl = dsub.add_parser("learn", parents=[common], help="learn a direction from paired renders")
    dl.add_argument("--name", required=True, choices=sorted(world.DIRECTIONS), help="registered direction")
    dl.add_argument("--data", type=Path, help="pair dataset directory written by 'world gen'")
    dl.add_argument("--no-calibrate", action="store_true", help="keep lambda_e=1 instead of calibrating")

    s = sub.add_parser("sample", parents=[common], help="generate images")
    s.add_argument("--unconditional", action="store_true", help="sample with the null condition")

    e = sub.add_parser("edit", parents=[common, directions], help="edit generated images")
    e.add_argument("--spec", type=Path, help="JSON edit spec (replaces --direction/--lambda-e/--window)")

    er = sub.add_parser("edit-real", parents=[common, directions], help="invert and edit given images")
    er.add_argument("--input", type=Path, required=True, help=".pgm image or raw .f32 stack")

    sub.add_parser("interp", parents=[common, directions], help="sweep lambda_e for one direction")

    ev_ = sub.add_parser("eval", help="evaluation reports")
    esub = ev_.add_subparsers(dest="action", required=True, parser_class=Parser)
    esub.add_parser("rescoring", parents=[common, directions], help="re-scoring matrix")
    ed = esub.add_parser("distance", parents=[common], help="content-preservation distances")
    ed.add_argument("--before", type=Path, required=True, help=".pgm or .f32 images before editing")
    ed.add_argument("--after", type=Path, required=True, help=".pgm or .f32 images after editing")
    ed.add_argument("--label", default="edit")

    ab = sub.add_parser("ablate", parents=[common, directions], help="ablation grids")
    ab.add_argument("--axis", action="append", choices=ev.AXES, default=[], help="grid to run (repeatable; default all)")
    ab.add_argument("--name", default="radius", choices=sorted(world.DIRECTIONS), help="registered direction")

    rp = sub.add_parser("report", parents=[common], help="verify an output tree's provenance")
    rp.add_argument("tree", type=Path, help="output directory to verify")

    rr = sub.add_parser("reproduce", parents=[common], help="run the whole pipeline")
    rr.add_argument("--paper-defaults", action="store_true",
                    help="lr 5e-3, batch 8, 1000 iterations, N=100, seed 0")

    return p


# ---------------------------------------------------------------- helpers


@dataclasses.dataclass
class Context:
    args: argparse.Namespace
    cfg: RunConfig
    out: Path
    outputs: list = dataclasses.field(default_factory=list)

    @property
    def hash(self) -> str:
        return self.cfg.hash()

    @property
    def provenance(self) -> dict:
        return stamp(self.hash, self.cfg.seed)

    def tree(self) -> pl.Tree:
        return pl.Tree(self.out, self.cfg)

    def denoiser(self) -> dm.Denoiser:
        return dm.load_denoiser(self.args.model or self.out / "models" / "denoiser.gtfw")

    def encoder(self) -> en.EmbeddingEncoder:
        return en.load_encoder(self.args.encoder or self.out / "models" / "encoder.gtfw")

    def directions(self, k: int, required: bool = True) -> list[tr.DirectionEmbedding]:
        paths = list(self.args.direction)
        if not paths and not required:
            paths = sorted((self.out / "directions").glob("*.gtd"))
        if not paths:
            raise UsageError("the following arguments are required: --direction")
        lams = list(self.args.lambda_e)
        if lams and len(lams) != len(paths):
            raise UsageError(f"--lambda-e given {len(lams)} times for {len(paths)} --direction values")
        out = []
        for i, path in enumerate(paths):
            d = tr.load_direction(path, k)
            if lams:
                d.lambda_e = lams[i]
            if self.args.window:
                d.window = self.args.window
            out.append(d)
        return out


def make_context(args) -> Context:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if getattr(args, "paper_defaults", False):
        cfg = pl.paper_defaults(cfg)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.window:
        cfg.edit = dataclasses.replace(cfg.edit, window=args.window)
    if args.lambda_g is not None:
        if args.lambda_g < 0:
            raise UsageError("--lambda-g must be >= 0")
        cfg.edit = dataclasses.replace(cfg.edit, guidance=args.lambda_g)
    return Context(args, cfg, args.out or Path(cfg.out))


def _oracle_csv(path: Path, groups: dict[str, np.ndarray], cfg_hash: str) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "set", *world.SHORT_NAMES, "residual", "config_hash"])
    for label, images in groups.items():
        for i, x in enumerate(images):
            est = world.read_attributes(x)
            w.writerow([i, label, *(ev._fmt(v) for v in est.values), ev._fmt(est.residual), cfg_hash])
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(buf.getvalue())
    return path


def _load_spec(ctx: Context, k: int) -> editing.EditSpec | list:
    doc = json.loads(ctx.args.spec.read_text())
    terms = []
    for item in doc.get("edits", []):
        d = tr.load_direction(item["direction"], k)
        terms.append(editing.EditTerm(d, float(item.get("lambda_e", d.lambda_e)),
                                      tuple(item.get("window", d.window))))
    if "guidance" in doc:
        ctx.cfg.edit = dataclasses.replace(ctx.cfg.edit, guidance=float(doc["guidance"]))
    return terms


# ---------------------------------------------------------------- commands


def cmd_world_gen(ctx: Context):
    tree = ctx.tree()
    n = ctx.args.n or ctx.cfg.transfer.n_pairs
    for name in ctx.args.name or list(world.DIRECTIONS):
        pairs = world.make_pairs(ctx.cfg.seed, n, world.DIRECTIONS[name])
        tree.add(world.write_dataset(ctx.out / "world" / name, pairs, {"provenance": tree.provenance}))
    return tree.written


def cmd_train_encoder(ctx: Context):
    if ctx.args.iters:
        ctx.cfg.encoder = dataclasses.replace(ctx.cfg.encoder, steps=ctx.args.iters)
    images, styles = pl.training_world(ctx.cfg)
    enc, meta = pl.fit_encoder(ctx.cfg, images, styles)
    log.info("probe R^2: %s", meta["probe_r2"])
    return [en.save_encoder(ctx.out / "models" / "encoder.gtfw", enc, {"provenance": ctx.provenance, **meta})]


def cmd_train_diffusion(ctx: Context):
    if ctx.args.iters:
        ctx.cfg.denoiser = dataclasses.replace(ctx.cfg.denoiser, steps=ctx.args.iters)
    enc = ctx.encoder()
    images, _ = pl.training_world(ctx.cfg)
    m, meta = pl.fit_denoiser(ctx.cfg, images, enc)
    log.info("held-out loss: %s", meta)
    return [dm.save_denoiser(ctx.out / "models" / "denoiser.gtfw", m, {"provenance": ctx.provenance, **meta})]


def cmd_direction_learn(ctx: Context):
    overrides = {}
    if ctx.args.n:
        overrides["n_pairs"] = ctx.args.n
    if ctx.args.iters:
        overrides["iterations"] = ctx.args.iters
    m, enc = ctx.denoiser(), ctx.encoder()
    pairs = None
    if ctx.args.data:
        meta, blob = world.read_dataset(ctx.args.data)
        if meta["direction"] != ctx.args.name:
            raise ValueError(f"{ctx.args.data} holds {meta['direction']!r} pairs, not {ctx.args.name!r}")
        pairs = world.PairSet(world.DIRECTIONS[ctx.args.name], meta["seed"], np.array(meta["styles"]),
                              blob[:, 0], blob[:, 1])
    d, _ = pl.fit_direction(ctx.cfg, ctx.args.name, m, enc, pairs, calibrate=not ctx.args.no_calibrate, **overrides)
    log.info("direction %s: |d|=%.3f lambda_e=%g", d.name, np.linalg.norm(d.d), d.lambda_e)
    return [tr.save_direction(ctx.out / "directions" / f"{d.name}.gtd", d)]


def cmd_sample(ctx: Context):
    m = ctx.denoiser()
    n = ctx.args.n or 8
    tree = ctx.tree()
    if ctx.args.unconditional:
        images = dm.sample(m, m.schedule, dm.SeededNoise(ctx.cfg.seed, range(n)))
        conditions = None
    else:
        conditions = ev.eval_conditions(ctx.encoder(), ctx.cfg.seed, n)
        images = dm.sample(m, m.schedule, dm.SeededNoise(ctx.cfg.seed, range(n)), conditions, ctx.cfg.edit.guidance)
    tree.images("samples/sample", images, n)
    attrs, conf = world.read_attributes_batch(images)
    tree.json("samples/samples.json", {"n": n, "guidance": ctx.cfg.edit.guidance,
                                       "conditional": conditions is not None,
                                       "attributes": [dict(zip(world.SHORT_NAMES, ev._round(a))) for a in attrs]})
    return tree.written


def cmd_edit(ctx: Context):
    m = ctx.denoiser()
    if ctx.args.spec:
        terms = _load_spec(ctx, m.k)
        if not terms:
            raise UsageError("edit spec lists no edits")
    else:
        terms = [editing.EditTerm(d, d.lambda_e, d.window) for d in ctx.directions(m.k)]
    n = ctx.args.n or 8
    conditions = ev.eval_conditions(ctx.encoder(), ctx.cfg.seed, n)
    base = ev.make_eval_set(m, m.schedule, conditions, ctx.cfg.seed, ctx.cfg.edit.guidance)
    res = ev.edit_shift(m, m.schedule, base, terms)
    label = "+".join(t.direction.name for t in terms)
    tree = ctx.tree()
    tree.images(f"edits/{label}/before", base.images, n)
    tree.images(f"edits/{label}/after", res.images, n)
    tree.add(_oracle_csv(ctx.out / "edits" / label / "oracle.csv", {"before": base.images, "after": res.images}, ctx.hash))
    tree.json(f"edits/{label}/edit.json", {
        "edits": [{"direction": t.direction.name, "lambda_e": t.lambda_e, "window": list(t.window)} for t in terms],
        "guidance": ctx.cfg.edit.guidance, "n": n, "undetected": res.undetected,
        "shifts": dict(zip(world.SHORT_NAMES, ev._round(res.shifts))), "units": ev.UNITS,
    })
    return tree.written


def cmd_edit_real(ctx: Context):
    m = ctx.denoiser()
    ds = ctx.directions(m.k)
    x0 = imageio.read_images(ctx.args.input)
    spec = editing.EditSpec([editing.EditTerm(d, d.lambda_e, d.window) for d in ds])
    record = dm.invert(m, m.schedule, x0, seed=ctx.cfg.seed)
    recon = editing.edit_real(m, m.schedule, x0, editing.EditSpec([]), record=record.replay())
    edited = editing.edit_real(m, m.schedule, x0, spec, record=record.replay())
    label = "+".join(d.name for d in ds)
    tree = ctx.tree()
    stem = f"edits/real/{ctx.args.input.stem}_{label}"
    tree.images(f"{stem}/input", x0, len(x0))
    tree.images(f"{stem}/edited", edited, len(x0))
    tree.add(_oracle_csv(ctx.out / stem / "oracle.csv", {"input": x0, "edited": edited}, ctx.hash))
    tree.json(f"{stem}/edit.json", {
        "input": str(ctx.args.input), "edits": [{"direction": d.name, "lambda_e": d.lambda_e,
                                                  "window": list(d.window)} for d in ds],
        "reconstruction_max_abs": float(np.max(np.abs(recon - x0))),
    })
    return tree.written


def _report_tree(ctx: Context, prefix: str = "") -> pl.Tree:
    return pl.Tree(pl.run_dir(ctx.out / "reports", ctx.cfg, prefix), ctx.cfg)


def cmd_interp(ctx: Context):
    m = ctx.denoiser()
    if len(ctx.args.direction) != 1:
        raise UsageError("interp takes exactly one --direction")
    d = tr.load_direction(ctx.args.direction[0], m.k)
    if ctx.args.window:
        d.window = ctx.args.window
    grid = sorted(ctx.args.lambda_e) if ctx.args.lambda_e else list(pl.INTERP_LAMBDAS)
    n = ctx.args.n or pl.INTERP_IMAGES
    conditions = ev.eval_conditions(ctx.encoder(), ctx.cfg.seed, n)
    res = editing.interpolate_edit(m, m.schedule, ctx.cfg.seed, d, grid, conditions, d.window, range(n),
                                   ctx.cfg.edit.guidance)
    tree = _report_tree(ctx)
    tree.reports(".", [ev.TraceReport(d.name, res.lambdas, res.attributes, ctx.hash)])
    for lam, imgs in zip(res.lambdas, res.images):
        tree.images(f"images/{d.name}_lambda{lam:+g}", imgs, min(n, 4))
    tree.manifest()
    return tree.written


def cmd_eval_rescoring(ctx: Context):
    m, enc = ctx.denoiser(), ctx.encoder()
    ds = ctx.directions(m.k, required=False)
    base = pl.eval_set(ctx.cfg, m, enc, ctx.args.n)
    matrix = ev.rescoring(m, m.schedule, ds, base, window=ctx.args.window, config_hash=ctx.hash)
    if matrix.flagged:
        log.warning("rescoring flagged: blob undetected in more than %d%% of images", ev.UNDETECTED_LIMIT * 100)
    tree = _report_tree(ctx)
    tree.reports(".", [matrix])
    tree.manifest()
    return tree.written


def cmd_eval_distance(ctx: Context):
    before, after = imageio.read_images(ctx.args.before), imageio.read_images(ctx.args.after)
    rep = ev.distance_report(ctx.encoder(), before, after, ctx.args.label, ctx.hash)
    tree = _report_tree(ctx)
    tree.reports(".", [ev.DistanceTable([rep])])
    tree.manifest()
    return tree.written


def cmd_ablate(ctx: Context):
    m, enc = ctx.denoiser(), ctx.encoder()
    tcfg = ctx.cfg.transfer
    if ctx.args.iters:
        tcfg = dataclasses.replace(tcfg, iterations=ctx.args.iters)
    base = pl.eval_set(ctx.cfg, m, enc, ctx.args.n)
    lam = ctx.args.lambda_e[0] if ctx.args.lambda_e else None
    tree = _report_tree(ctx)
    cx = ev.AblationContext(m, enc, m.schedule, base, tcfg, ctx.cfg.seed, ctx.args.name, lam,
                            tuple(ctx.cfg.edit.window), ctx.hash)
    if ctx.args.direction:
        cx.cache[()] = tr.load_direction(ctx.args.direction[0], m.k)
    reports = []
    for axis in ctx.args.axis or list(ev.AXES):
        reports.append(ev.ablate(axis, cx, tree.root))
    tree.add(sorted((tree.root / "cells").glob("*.json")))
    tree.reports(".", reports)
    tree.manifest()
    return tree.written


def cmd_report(ctx: Context):
    result = pl.verify_tree(ctx.args.tree)
    print(json.dumps(result, sort_keys=True), file=sys.stderr)
    if not result["ok"]:
        raise RuntimeError(f"{ctx.args.tree}: " + "; ".join(result["problems"]))
    return []


def cmd_reproduce(ctx: Context):
    root, summary = pl.reproduce(ctx.cfg, pl.run_dir(ctx.out, ctx.cfg))
    log.info("rescoring dominance: %s", summary["rescoring"]["dominant"])
    return sorted(p for p in root.rglob("*") if p.is_file())


COMMANDS = {
    ("world", "gen"): cmd_world_gen,
    ("train", "encoder"): cmd_train_encoder,
    ("train", "diffusion"): cmd_train_diffusion,
    ("direction", "learn"): cmd_direction_learn,
    ("sample", None): cmd_sample,
    ("edit", None): cmd_edit,
    ("edit-real", None): cmd_edit_real,
    ("interp", None): cmd_interp,
    ("eval", "rescoring"): cmd_eval_rescoring,
    ("eval", "distance"): cmd_eval_distance,
    ("ablate", None): cmd_ablate,
    ("report", None): cmd_report,
    ("reproduce", None): cmd_reproduce,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    command = COMMANDS[(args.command, getattr(args, "action", None))]
    try:
        ctx = make_context(args)
        with pl.thread_cap():
            outputs = command(ctx)
    except UsageError as exc:
        print(f"dirforge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # runtime failures map to exit code 2
        log.debug("runtime failure", exc_info=True)
        print(f"dirforge: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"command": " ".join(filter(None, [args.command, getattr(args, "action", None)])),
                      "outputs": [str(p) for p in outputs]}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
