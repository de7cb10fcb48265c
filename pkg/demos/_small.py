"""Small models shared by the demos so each script runs in seconds."""

import numpy as np

from dirforge import diffusion as dm
from dirforge import encoder as en
from dirforge import world


def small_world(n=2000, seed=0):
    styles = world.sample_styles(np.random.default_rng(seed), n)
    return world.render(styles), styles


def small_encoder(images, styles, steps=1500):
    return en.train_encoder(images[:1500], styles[:1500], en.EncoderConfig(steps=steps, n_train=1500))


def small_denoiser(images, enc, steps=1500):
    cfg = dm.DenoiserConfig(hidden=128, n_layers=3, components=32, steps=steps, batch_size=64)
    return dm.train_denoiser(images, en.embed(enc, images).data, dm.cosine_schedule(100), cfg)


def ascii_image(x, chars=" .:-=+*#%@"):
    g = world.as_grid(x)
    g = (g - g.min()) / max(g.max() - g.min(), 1e-9)
    return "\n".join("".join(chars[int(v * (len(chars) - 1))] * 2 for v in row) for row in g)
