import numpy as np
import pytest

from dirforge import autodiff as ad
from dirforge import encoder as en
from dirforge import world

from gradcheck import numeric_grad, rel_error


@pytest.fixture(scope="module")
def heldout():
    styles = world.sample_styles(np.random.default_rng(99), 400)
    return world.render(styles), styles


def test_embeddings_unit_norm(tiny_encoder, tiny_world):
    e = en.embed(tiny_encoder, tiny_world[0][:50]).data
    np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-12)
    assert e.shape == (50, en.EMBED_DIM)


def test_embed_single_and_deterministic(tiny_encoder, tiny_world):
    x = tiny_world[0][3]
    a, b = en.embed(tiny_encoder, x).data, en.embed(tiny_encoder, x).data
    np.testing.assert_array_equal(a, b)
    assert a.shape == (en.EMBED_DIM,)
    assert ad.cosine_similarity(a, b).item() == pytest.approx(1.0, abs=1e-12)


def test_embed_rejects_wrong_shape(tiny_encoder):
    with pytest.raises(ad.ShapeError):
        en.embed(tiny_encoder, np.zeros(255))


def test_trained_probe_beats_threshold_and_untrained(tiny_encoder, tiny_world, heldout):
    images, styles = tiny_world
    r2 = en.probe_r2(tiny_encoder, images[:1000], styles[:1000], *heldout)
    assert np.all(r2 > 0.8), r2
    untrained = en.init_encoder(np.random.default_rng(5))
    r2_0 = en.probe_r2(untrained, images[:1000], styles[:1000], *heldout)
    assert r2_0.mean() < r2.mean() - 0.2


def test_probe_r2_matches_pseudoinverse_fit():
    rng = np.random.default_rng(0)
    styles = world.sample_styles(rng, 200)
    images = world.render(styles)
    enc = en.init_encoder(rng)
    r2 = en.probe_r2(enc, images[:150], styles[:150], images[150:], styles[150:])
    e_tr = np.hstack([en.embed(enc, images[:150]).data, np.ones((150, 1))])
    e_te = np.hstack([en.embed(enc, images[150:]).data, np.ones((50, 1))])
    coef = np.linalg.pinv(e_tr) @ styles[:150]
    resid = styles[150:] - e_te @ coef
    expect = 1 - (resid**2).sum(0) / ((styles[150:] - styles[150:].mean(0)) ** 2).sum(0)
    np.testing.assert_allclose(r2, expect, atol=1e-8)


def test_training_loss_decreases(tiny_encoder):
    losses = [h["loss"] for h in tiny_encoder.history]
    assert len(losses) >= 2
    assert losses[-1] < losses[0] / 3


def test_training_diverges_loudly(tiny_world):
    images, styles = tiny_world
    bad = styles[:64].copy()
    bad[0, 0] = np.nan
    with pytest.raises(en.TrainingDivergedError):
        en.train_encoder(images[:64], bad, en.EncoderConfig(steps=5, batch_size=64))


def test_embedding_gradient_wrt_input(tiny_encoder, tiny_world):
    x = tiny_world[0][0]
    probe = np.random.default_rng(2).standard_normal(en.EMBED_DIM)
    xt = ad.Tensor(x, requires_grad=True)
    ad.backward(ad.tensor_sum(ad.mul(en.embed(tiny_encoder, xt), probe)))
    idx = np.arange(0, 256, 37)

    def f(xi):
        full = x.copy()
        full[idx] = xi
        return float(en.embed(tiny_encoder, full).data @ probe)

    assert rel_error(xt.grad[idx], numeric_grad(f, x[idx])) < 1e-6


def test_direction_pairs_separate_in_embedding_space(tiny_encoder):
    diffs = {}
    for name, gt in world.DIRECTIONS.items():
        p = world.make_pairs(4, 40, gt)
        diffs[name] = en.embed(tiny_encoder, p.edited).data - en.embed(tiny_encoder, p.inputs).data
    unit = {k: v / np.linalg.norm(v, axis=1, keepdims=True) for k, v in diffs.items()}
    names = list(unit)
    within = np.mean([np.mean(unit[k] @ unit[k].T) for k in names])
    across = np.mean([np.mean(unit[a] @ unit[b].T) for a in names for b in names if a != b])
    assert within > across


def test_save_load_round_trip(tmp_path, tiny_encoder):
    p = en.save_encoder(tmp_path / "e.gtfw", tiny_encoder, {"provenance": {"config_hash": "x"}})
    back = en.load_encoder(p)
    assert back.checksum() == tiny_encoder.checksum()
    with pytest.raises(ValueError):
        en.load_encoder(p, k=8)
