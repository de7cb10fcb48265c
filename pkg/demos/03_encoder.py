"""Train the embedding encoder and probe what its 16-d embeddings know.

A linear probe on held-out renders should recover every attribute; the same
probe on an untrained encoder should do much worse.
"""

import numpy as np

from dirforge import encoder as en
from dirforge import world
from _small import small_encoder, small_world

images, styles = small_world()
enc = small_encoder(images, styles)
held = world.sample_styles(np.random.default_rng(9), 300)
held_x = world.render(held)

trained = en.probe_r2(enc, images[:1500], styles[:1500], held_x, held)
untrained = en.probe_r2(en.init_encoder(np.random.default_rng(1)), images[:1500], styles[:1500], held_x, held)
for name, a, b in zip(world.SHORT_NAMES, trained, untrained):
    print(f"{name:10s} probe R^2 trained {a:.3f}  untrained {b:.3f}")

for name, gt in world.DIRECTIONS.items():
    p = world.make_pairs(1, 40, gt)
    diff = en.embed(enc, p.edited).data - en.embed(enc, p.inputs).data
    print(f"{name:10s} mean embedding change norm {np.linalg.norm(diff.mean(0)):.3f}")
