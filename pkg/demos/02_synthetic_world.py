"""The procedural world: render styles, make edit pairs, read attributes back.

Each image is a 16x16 Gaussian blob described by six style attributes.  The
analytic oracle fits the blob and recovers the attributes, which is how every
later evaluation measures an edit.
"""

import numpy as np

from dirforge import world
from _small import ascii_image

s = np.array([0.5, 0.5, 0.15, 0.8, 1.0, 0.1])
print(dict(zip(world.SHORT_NAMES, s)))
print(ascii_image(world.render(s)))

for name, gt in world.DIRECTIONS.items():
    pairs = world.make_pairs(0, 50, gt)
    before = world.read_attributes_batch(pairs.inputs)[0]
    after = world.read_attributes_batch(pairs.edited)[0]
    shift = np.mean((after - before) / world.SPAN, axis=0)
    print(f"{name:10s} nominal {gt.nominal_scale:.3f}  oracle shift", np.round(shift, 3))

est = world.read_attributes(world.render(s))
print("read back", np.round(est.values, 6), "confidence", round(est.confidence, 3))
