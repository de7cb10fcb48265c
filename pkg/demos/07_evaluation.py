"""Re-scoring matrix, content distances and one ablation grid, written as
CSV, JSON and SVG reports."""

import numpy as np

from dirforge import evaluation as ev
from dirforge import transfer as tr
from dirforge import world
from _small import small_denoiser, small_encoder, small_world

images, styles = small_world()
enc = small_encoder(images, styles)
m = small_denoiser(images, enc)
cfg = tr.TransferConfig(n_pairs=40, iterations=200)
dirs = []
for name, gt in world.DIRECTIONS.items():
    d = tr.learn_direction(world.make_pairs(0, 40, gt), m, enc, m.schedule, cfg, name=name)
    d.lambda_e, _ = ev.calibrate_lambda(m, m.schedule, enc, d, n_images=8)
    dirs.append(d)

base = ev.make_eval_set(m, m.schedule, ev.eval_conditions(enc, 0, 24), 0)
print("oracle noise floor", round(ev.oracle_noise_floor(base.images), 4))
matrix = ev.rescoring(m, m.schedule, dirs, base)
print("rows", matrix.rows, "cols", matrix.cols)
print(np.round(matrix.entries, 3))
print("dominant", matrix.dominance())

ctx = ev.AblationContext(m, enc, m.schedule, base, cfg, lambda_e=dirs[0].lambda_e)
ctx.cache[()] = dirs[0]
timesteps = ev.ablate("timesteps", ctx)
for c in timesteps.cells:
    print(f"window {c.cell:4s} diagonal {c.diagonal:.3f} off-target {c.off_target:.3f} pixel L2 {c.distance.pixel_l2:.3f}")
print(ev.emit_report([matrix, timesteps], "demo_reports"))
