import numpy as np
import pytest

from dirforge import diffusion as dm
from dirforge import encoder as en
from dirforge import world


@pytest.fixture(scope="session")
def tiny_world():
    styles = world.sample_styles(np.random.default_rng(11), 1500)
    return world.render(styles), styles


@pytest.fixture(scope="session")
def tiny_encoder(tiny_world):
    images, styles = tiny_world
    cfg = en.EncoderConfig(steps=1500, n_train=1000, seed=1)
    return en.train_encoder(images[:1000], styles[:1000], cfg)


@pytest.fixture(scope="session")
def tiny_denoiser(tiny_world, tiny_encoder):
    images, _ = tiny_world
    cfg = dm.DenoiserConfig(hidden=64, n_layers=3, components=24, steps=300, batch_size=64, seed=1)
    return dm.train_denoiser(images, en.embed(tiny_encoder, images).data, dm.cosine_schedule(100), cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY_RUN = {
    "world": {"n_train": 1500, "n_heldout": 100},
    "encoder": {"steps": 200, "n_train": 1000},
    "denoiser": {"steps": 150, "hidden": 64, "n_layers": 3, "components": 24},
    "transfer": {"iterations": 10, "n_pairs": 10},
    "eval": {"m_images": 6, "calibration_images": 4},
}


@pytest.fixture(scope="session")
def tiny_config_path(tmp_path_factory):
    import json

    path = tmp_path_factory.mktemp("cfg") / "tiny.json"
    path.write_text(json.dumps(TINY_RUN))
    return path


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(RESULTS):
        ok, title, detail = RESULTS[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n:2d} {title}: {detail}")
