"""Learn an edit direction in conditioning space from paired renders.

Only the 16-d vector d is optimised; the denoiser and encoder stay frozen.
The loss has a semantic term (cosine to edited versus input embeddings) and
a latent term (difference of noise predictions across the pair).
"""

import numpy as np

from dirforge import transfer as tr
from dirforge import world
from _small import small_denoiser, small_encoder, small_world

images, styles = small_world()
enc = small_encoder(images, styles)
m = small_denoiser(images, enc)

pairs = world.make_pairs(0, 40, world.DIRECTIONS["radius"])
before = (m.checksum(), enc.checksum())
cfg = tr.TransferConfig(n_pairs=40, iterations=200)
d = tr.learn_direction(pairs, m, enc, m.schedule, cfg, name="radius")
assert (m.checksum(), enc.checksum()) == before
for h in d.history[::40]:
    print(f"iter {h['iteration']:4d} loss {h['loss']:9.4f} sem {h['sem']:.4f} latent {h['latent']:9.4f} |d| {h['norm']:.3f}")

sem_only = tr.learn_direction(pairs, m, enc, m.schedule, tr.TransferConfig(n_pairs=40, iterations=200, w_latent=0.0))
print(f"|d| full loss {np.linalg.norm(d.d):.3f}, semantic term only {np.linalg.norm(sem_only.d):.3f}")
tr.save_direction("radius_demo.gtd", d)
print("saved radius_demo.gtd; reloaded norm", np.linalg.norm(tr.load_direction("radius_demo.gtd").d))
