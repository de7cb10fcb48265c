"""Apply learned directions while sampling: single edits, sweeps, composition,
and editing an inverted real image."""

import numpy as np

from dirforge import diffusion as dm
from dirforge import editing
from dirforge import evaluation as ev
from dirforge import transfer as tr
from dirforge import world
from _small import small_denoiser, small_encoder, small_world

images, styles = small_world()
enc = small_encoder(images, styles)
m = small_denoiser(images, enc)
dirs = {}
for name in ("radius", "intensity"):
    pairs = world.make_pairs(0, 40, world.DIRECTIONS[name])
    dirs[name] = tr.learn_direction(pairs, m, enc, m.schedule, tr.TransferConfig(n_pairs=40, iterations=200),
                                    name=name)

cond = ev.eval_conditions(enc, 0, 8)
interp = editing.interpolate_edit(m, m.schedule, 0, dirs["radius"], [-1.0, -0.5, 0.0, 0.5, 1.0], cond,
                                  runs=range(8))
for lam, attrs in zip(interp.lambdas, interp.attributes):
    print(f"lambda_e {lam:+.1f}  mean radius {np.nanmean(attrs[:, 2]):.4f}")

base = ev.make_eval_set(m, m.schedule, cond, 0)
for spec in ([("radius", 0.5)], [("intensity", 0.5)], [("radius", 0.5), ("intensity", 0.5)]):
    terms = [editing.EditTerm(dirs[n], lam) for n, lam in spec]
    res = ev.edit_shift(m, m.schedule, base, terms)
    print("+".join(n for n, _ in spec).ljust(18), np.round(res.shifts, 3))

x0 = world.render(world.sample_styles(np.random.default_rng(5), 4))
recon = editing.edit_real(m, m.schedule, x0, editing.EditSpec())
edited = editing.edit_real(m, m.schedule, x0, editing.single(dirs["radius"], 0.5))
print("real images: reconstruction error", float(np.max(np.abs(recon - x0))))
print("real images: radius before", np.round(world.read_attributes_batch(x0)[0][:, 2], 3),
      "after", np.round(world.read_attributes_batch(edited)[0][:, 2], 3))
