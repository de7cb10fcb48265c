"""Conditional DDPM on flattened 16x16 images.

Images enter the model in a centred space, ``m = (x - 0.5) / 0.5``.  The
forward process is ``x_t = sqrt(abar_t) x_0 + sqrt(1 - abar_t) eps`` and the
reverse step is the ancestral update

    x_{t-1} = c0_t * x0_hat + ct_t * x_t + sigma_t * xi

where ``x0_hat`` is recovered from the noise prediction and clipped to the
data range, ``(c0_t, ct_t)`` are the posterior-mean coefficients and
``sigma_t`` the posterior standard deviation (``sigma_1 = 0``).

The denoiser works in the principal-component basis of the training images:
a closed-form skip term handles each component as if the data were Gaussian,
and an MLP conditioned on ``(t, c)`` learns a correction on the leading
components.  The null condition is the zero vector of the conditioning space.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol

import numpy as np

from . import autodiff as ad
from . import nn, world
from .autodiff import Tensor
from .encoder import EMBED_DIM, TrainingDivergedError

log = logging.getLogger(__name__)

DATA_SHIFT = 0.5
DATA_SCALE = 0.5
TEMB_DIM = 32
# used in place of sigma_1 = 0 when replaying an inversion record, so the
# final step can absorb the reconstruction residual
SIGMA_FLOOR = 1e-4
P_UNCOND = 0.1
# unit-norm conditions have entries ~ 1/sqrt(k); scale them to O(1)
COND_GAIN = float(np.sqrt(EMBED_DIM))
# std of Gaussian noise added to kept training conditions
COND_NOISE = 0.15
# x0 predictions are clipped to the model-space image of [0, PIXEL_MAX]
X0_CLIP = (-1.0, (world.PIXEL_MAX - DATA_SHIFT) / DATA_SCALE)

# RNG stream tags, combined with (seed, run index)
STREAM_SAMPLE = 0x5A
STREAM_INVERT = 0x1F
STREAM_TRAIN = 0x7D


def to_model(x):
    return (np.asarray(x, dtype=np.float64) - DATA_SHIFT) / DATA_SCALE


def to_pixels(m):
    return np.asarray(m, dtype=np.float64) * DATA_SCALE + DATA_SHIFT


@dataclass
class NoiseSchedule:
    """Arrays of length T+1; index 0 is clean data."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray = field(init=False)
    alpha_bars: np.ndarray = field(init=False)
    sigmas: np.ndarray = field(init=False)

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.shape != (self.T + 1,) or b[0] != 0.0:
            raise ValueError("betas must have length T+1 with betas[0] == 0")
        if not (np.all(b[1:] > 0) and np.all(b[1:] < 1) and np.all(np.diff(b[1:]) >= 0)):
            raise ValueError("betas must satisfy 0 < beta_1 <= ... <= beta_T < 1")
        self.betas = b
        self.alphas = 1.0 - b
        self.alpha_bars = np.cumprod(self.alphas)
        var = np.zeros(self.T + 1)
        var[1:] = b[1:] * (1.0 - self.alpha_bars[:-1]) / (1.0 - self.alpha_bars[1:])
        self.sigmas = np.sqrt(var)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")

    def to_json(self) -> dict:
        return {"T": self.T, "betas": [float(b) for b in self.betas]}

    @classmethod
    def from_json(cls, d: dict) -> "NoiseSchedule":
        return cls(int(d["T"]), np.asarray(d["betas"], dtype=np.float64))


def make_schedule(kind: str = "cosine", T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    if kind == "cosine":
        return cosine_schedule(T)
    if kind == "linear":
        return linear_schedule(T, beta_start, beta_end)
    raise ValueError(f"unknown schedule kind {kind!r}")


def linear_schedule(T: int = 100, beta_start: float = 1e-3, beta_end: float = 0.2) -> NoiseSchedule:
    return NoiseSchedule(T, np.concatenate([[0.0], np.linspace(beta_start, beta_end, T)]))


def cosine_schedule(T: int = 100, offset: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Betas from a squared-cosine ``abar`` curve, clipped at ``max_beta``."""

    def f(t):
        return np.cos((t / T + offset) / (1.0 + offset) * np.pi / 2.0) ** 2

    steps = np.arange(1, T + 1, dtype=np.float64)
    betas = np.minimum(1.0 - f(steps) / f(steps - 1.0), max_beta)
    return NoiseSchedule(T, np.concatenate([[0.0], betas]))


def forward_noise(schedule: NoiseSchedule, x0, t, eps) -> np.ndarray:
    """Noised sample at step ``t`` (scalar or one per row)."""
    x0, eps = np.asarray(x0, dtype=np.float64), np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ad.ShapeError("forward_noise", x0.shape, eps.shape)
    schedule.check_t(t)
    ab = schedule.alpha_bars[np.asarray(t)]
    if np.ndim(ab) == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def timestep_embedding(t, dim: int = TEMB_DIM) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(1000.0) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


@dataclass
class DenoiserConfig:
    hidden: int = 256
    n_layers: int = 4
    activation: str = "silu"
    k: int = EMBED_DIM
    components: int = 48
    steps: int = 8000
    batch_size: int = 128
    lr: float = 2e-3
    weight_decay: float = 0.0
    p_uncond: float = P_UNCOND
    cond_noise: float = COND_NOISE
    seed: int = 0


@dataclass
class DataBasis:
    """Principal axes of the training images in model space.

    ``axes`` is orthogonal with one component per column, ordered by variance;
    ``std`` holds the per-component standard deviation of the training data.
    """

    mean: np.ndarray
    axes: np.ndarray
    std: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {"basis_mean": self.mean, "basis_axes": self.axes, "basis_std": self.std}


def fit_basis(data: np.ndarray) -> DataBasis:
    """PCA of model-space images with a deterministic sign per axis."""
    data = np.asarray(data, dtype=np.float64)
    mean = data.mean(axis=0)
    centred = data - mean
    var, axes = np.linalg.eigh(centred.T @ centred / len(data))
    order = np.argsort(var)[::-1]
    var, axes = np.clip(var[order], 0.0, None), axes[:, order]
    # fix the sign ambiguity: largest-magnitude entry of each axis positive
    flip = np.sign(axes[np.argmax(np.abs(axes), axis=0), np.arange(axes.shape[1])])
    axes = axes * np.where(flip == 0, 1.0, flip)
    # stored as float32 so a saved model reloads bit-identically
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return DataBasis(f32(mean), f32(axes), f32(np.sqrt(var)))


def _identity_basis() -> DataBasis:
    return DataBasis(np.zeros(world.N_PIXELS), np.eye(world.N_PIXELS), np.full(world.N_PIXELS, 0.5))


@dataclass
class Denoiser:
    """MLP noise predictor over the leading principal components.

    ``basis`` is a fixed buffer fitted to the training data; only ``params``
    are learned.
    """

    params: nn.Params
    schedule: NoiseSchedule
    basis: DataBasis = field(default_factory=_identity_basis)
    k: int = EMBED_DIM
    n_layers: int = 4
    activation: str = "silu"
    components: int = 48
    history: list = field(default_factory=list, repr=False)

    def checksum(self) -> str:
        return nn.checksum({**self.params, **self.basis.arrays()})

    @property
    def null_condition(self) -> np.ndarray:
        return np.zeros(self.k)


def init_denoiser(
    rng: np.random.Generator,
    schedule: NoiseSchedule,
    cfg: DenoiserConfig | None = None,
    basis: DataBasis | None = None,
) -> Denoiser:
    cfg = cfg or DenoiserConfig()
    basis = basis or _identity_basis()
    if not 1 <= cfg.components <= world.N_PIXELS:
        raise ValueError(f"components must be in [1, {world.N_PIXELS}]")
    extra = TEMB_DIM + cfg.k
    fan_in = [cfg.components + extra] + [cfg.hidden + extra] * (cfg.n_layers - 1)
    fan_out = [cfg.hidden] * (cfg.n_layers - 1) + [cfg.components]
    params: nn.Params = {}
    for i, (a, b) in enumerate(zip(fan_in, fan_out)):
        params.update(nn.init_mlp(rng, [a, b], prefix=f"l{i}_"))
    params = {k.replace("_w0", "_w").replace("_b0", "_b"): v for k, v in params.items()}
    # zero output layer: the untrained model is the pure skip path
    params[f"l{cfg.n_layers - 1}_w"][:] = 0.0
    return Denoiser(params, schedule, basis, cfg.k, cfg.n_layers, cfg.activation, cfg.components)


def predict_noise(m: Denoiser, x_t, t, c=None, params=None) -> Tensor:
    """eps_theta(x_t, t, c) in model space.

    ``x_t`` is [256] or [n, 256]; ``t`` a scalar or one step per row; ``c`` is
    None (null condition), a [k] vector shared by all rows, or [n, k].
    """
    x_t = ad.as_tensor(x_t)
    single = x_t.ndim == 1
    if single:
        x_t = ad.reshape(x_t, (1, x_t.shape[0]))
    if x_t.ndim != 2 or x_t.shape[1] != world.N_PIXELS:
        raise ad.ShapeError("predict_noise", x_t.shape, (world.N_PIXELS,))
    n = x_t.shape[0]
    t = np.asarray(t)
    tt = np.full(n, int(t)) if t.ndim == 0 else t
    if tt.shape != (n,):
        raise ad.ShapeError("predict_noise (timesteps)", tt.shape, (n,))
    if c is None:
        c = Tensor._wrap(np.zeros((n, m.k)), False)
    else:
        c = ad.as_tensor(c)
        if c.shape[-1] != m.k:
            raise ad.ShapeError("predict_noise (condition width)", c.shape, (m.k,))
        if c.ndim == 1:
            c = ad.repeat_rows(c, n)
        elif c.shape[0] != n:
            raise ad.ShapeError("predict_noise (condition rows)", c.shape, (n, m.k))
    ab = schedule_alpha_bars(m, tt)
    basis, kc = m.basis, m.components
    # coordinates of x_t - sqrt(ab) * mean along the principal axes
    centred = x_t - Tensor._wrap(np.sqrt(ab)[:, None] * basis.mean[None, :], False)
    z = ad.matmul(centred, Tensor._wrap(basis.axes, False))
    c_in, c_skip, c_out = _preconditioning(ab, basis.std)
    u = ad.mul(z, Tensor._wrap(c_in, False))
    # (t, c) are re-injected at every layer
    tc = ad.concat([Tensor._wrap(timestep_embedding(tt), False), ad.scale(c, COND_GAIN)], axis=1)
    p = params if params is not None else nn.constants(m.params)
    h = ad.matmul(u, Tensor._wrap(np.eye(world.N_PIXELS)[:, :kc], False)) if kc < world.N_PIXELS else u
    for i in range(m.n_layers):
        h = ad.linear(ad.concat([h, tc], axis=1), p[f"l{i}_w"], p[f"l{i}_b"])
        if i < m.n_layers - 1:
            h = ad.nonlinearity(m.activation, h)
    skip = ad.matmul(ad.mul(u, Tensor._wrap(c_skip, False)), Tensor._wrap(basis.axes.T, False))
    learned = ad.matmul(ad.mul(h, Tensor._wrap(c_out[:, :kc], False)), Tensor._wrap(basis.axes[:, :kc].T, False))
    out = skip + learned
    return ad.reshape(out, (world.N_PIXELS,)) if single else out


def schedule_alpha_bars(m: Denoiser, t: np.ndarray) -> np.ndarray:
    if np.any(t < 1) or np.any(t > m.schedule.T):
        raise ValueError(f"timestep out of range [1, {m.schedule.T}]")
    return m.schedule.alpha_bars[t]


def _preconditioning(ab: np.ndarray, std: np.ndarray):
    """Per-row, per-component input scale and skip/output mixing.

    Along an axis with data std ``v`` the noised coordinate has variance
    ``s^2 = (1 - ab) + ab * v^2``.  The skip term ``sqrt(1 - ab) / s * u`` with
    ``u = z / s`` is the optimal linear noise estimate for Gaussian data, so the
    network only learns a correction scaled by ``v * sqrt(ab) / s``.  Axes with
    (near) zero data variance are denoised exactly by the skip term alone.
    """
    ab = ab[:, None]
    s = np.sqrt((1.0 - ab) + ab * std[None, :] ** 2)
    return 1.0 / s, np.sqrt(1.0 - ab) / s, std[None, :] * np.sqrt(ab) / s


def _eps(m: Denoiser, x_t, t, c) -> np.ndarray:
    with ad.no_grad():
        return predict_noise(m, x_t, t, c).data


def is_null(c) -> bool:
    return c is None or not np.any(np.asarray(c.data if isinstance(c, Tensor) else c))


def combine_guidance(eps_null: np.ndarray, eps_cond: np.ndarray, guidance: float) -> np.ndarray:
    """(1 - g) eps_null + g eps_cond; exact at g = 0 and g = 1."""
    g = float(guidance)
    return (1.0 - g) * eps_null + g * eps_cond


def cfg_predict(m: Denoiser, x_t, t, c, guidance: float) -> np.ndarray:
    """Classifier-free guided noise prediction."""
    if guidance < 0:
        raise ValueError("guidance scale must be >= 0")
    eps_null = _eps(m, x_t, t, None)
    if is_null(c):
        return eps_null
    return combine_guidance(eps_null, _eps(m, x_t, t, c), guidance)


# ---------------------------------------------------------------- training


def train_denoiser(
    images: np.ndarray,
    conditions: np.ndarray,
    schedule: NoiseSchedule,
    cfg: DenoiserConfig | None = None,
    eval_every: int = 200,
) -> Denoiser:
    """Minimise E || eps - eps_theta(x_t, t, c) ||^2 with condition dropout."""
    cfg = cfg or DenoiserConfig()
    if conditions.shape[1] != cfg.k:
        raise ValueError(f"condition width {conditions.shape[1]} != denoiser k {cfg.k}")
    rng = np.random.default_rng([cfg.seed, STREAM_TRAIN])
    data = to_model(images)
    m = init_denoiser(rng, schedule, cfg, fit_basis(data))
    params = m.params
    opt = nn.AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)
    history = []
    running, count = 0.0, 0
    decay_from = int(0.7 * cfg.steps)
    for step in range(cfg.steps):
        if step >= decay_from:
            # linear decay to 10% over the final 30% of steps
            frac = (step - decay_from) / max(1, cfg.steps - decay_from)
            opt.lr = cfg.lr * (1.0 - 0.9 * frac)
        idx = rng.integers(0, len(data), cfg.batch_size)
        t = rng.integers(1, schedule.T + 1, cfg.batch_size)
        eps = rng.standard_normal((cfg.batch_size, world.N_PIXELS))
        cond = conditions[idx].copy()
        if cfg.cond_noise > 0:
            # blurred conditions make guidance toward an arbitrary d act
            # like a push along d rather than toward one exact image
            cond += cfg.cond_noise * rng.standard_normal(cond.shape)
        cond[rng.random(cfg.batch_size) < cfg.p_uncond] = 0.0
        x_t = forward_noise(schedule, data[idx], t, eps)
        tp = nn.trainable(params)
        pred = predict_noise(m, x_t, t, cond, params=tp)
        loss = ad.scale(ad.sq_l2_norm(pred - eps), 1.0 / cfg.batch_size)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"denoiser loss {value} at step {step}")
        ad.backward(loss)
        params = opt.step(params, {k: v.grad for k, v in tp.items()})
        running += value
        count += 1
        if (step + 1) % eval_every == 0 or step + 1 == cfg.steps:
            history.append({"step": step + 1, "loss": running / count})
            log.debug("denoiser step %d loss %.3f", step + 1, running / count)
            running, count = 0.0, 0
    return Denoiser(nn.quantize_f32(params), schedule, m.basis, cfg.k, cfg.n_layers, cfg.activation, cfg.components, history)


def denoising_loss(
    m: Denoiser, schedule: NoiseSchedule, images: np.ndarray, conditions, seed: int = 0
) -> float:
    """Mean per-image squared error of eps prediction on held-out images."""
    rng = np.random.default_rng([seed, STREAM_TRAIN, 1])
    n = len(images)
    t = rng.integers(1, schedule.T + 1, n)
    eps = rng.standard_normal((n, world.N_PIXELS))
    x_t = forward_noise(schedule, to_model(images), t, eps)
    pred = _eps(m, x_t, t, conditions)
    return float(np.sum((pred - eps) ** 2) / n)


# ---------------------------------------------------------------- sampling


class NoiseSource(Protocol):
    draws: int
    final_step_noise: bool

    def initial(self) -> np.ndarray: ...

    def step_noise(self, t: int) -> np.ndarray: ...


class SeededNoise:
    """Independent Gaussian streams keyed by (seed, run index), one row per run."""

    final_step_noise = False

    def __init__(self, seed: int, runs, stream: int = STREAM_SAMPLE):
        self.runs = [int(r) for r in np.atleast_1d(runs)]
        self._rngs = [np.random.default_rng([int(seed), stream, r]) for r in self.runs]
        self.draws = 0

    def _draw(self) -> np.ndarray:
        self.draws += 1
        return np.stack([g.standard_normal(world.N_PIXELS) for g in self._rngs])

    def initial(self) -> np.ndarray:
        return self._draw()

    def step_noise(self, t: int) -> np.ndarray:
        return self._draw()


@dataclass
class InversionRecord:
    """x_T plus the per-step noise maps that replay a given trajectory."""

    x_T: np.ndarray
    xis: dict[int, np.ndarray]
    draws: int = 0
    final_step_noise: bool = True

    def initial(self) -> np.ndarray:
        self.draws += 1
        return self.x_T.copy()

    def step_noise(self, t: int) -> np.ndarray:
        self.draws += 1
        return self.xis[t]

    def replay(self) -> "InversionRecord":
        return InversionRecord(self.x_T, self.xis)


Predictor = Callable[[np.ndarray, int], np.ndarray]
Hook = Callable[[np.ndarray, int, np.ndarray], np.ndarray]


def predict_x0(schedule: NoiseSchedule, x_t: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    ab = schedule.alpha_bars[t]
    return np.clip((x_t - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab), *X0_CLIP)


def posterior_mean(schedule: NoiseSchedule, x_t: np.ndarray, eps: np.ndarray, t: int) -> np.ndarray:
    """Mean of q(x_{t-1} | x_t, x0_hat) with x0_hat clipped to the data range."""
    ab, ab_prev = schedule.alpha_bars[t], schedule.alpha_bars[t - 1]
    x0 = predict_x0(schedule, x_t, eps, t)
    c0 = np.sqrt(ab_prev) * schedule.betas[t] / (1.0 - ab)
    ct = np.sqrt(schedule.alphas[t]) * (1.0 - ab_prev) / (1.0 - ab)
    return c0 * x0 + ct * x_t


def step_sigma(schedule: NoiseSchedule, t: int) -> float:
    return max(float(schedule.sigmas[t]), SIGMA_FLOOR)


def sample(
    m: Denoiser,
    schedule: NoiseSchedule,
    noise: NoiseSource,
    c=None,
    guidance: float = 1.0,
    hook: Hook | None = None,
    predictor: Predictor | None = None,
) -> np.ndarray:
    """Ancestral sampling; returns pixel-space images [n, 256].

    ``predictor(x_t, t)`` replaces the default classifier-free guided
    prediction; ``hook(x_t, t, eps)`` may then modify the prediction.
    """
    if predictor is None:

        def predictor(x, t):
            return cfg_predict(m, x, t, c, guidance)

    x = noise.initial()
    for t in range(schedule.T, 0, -1):
        eps = predictor(x, t)
        if hook is not None:
            new = np.asarray(hook(x, t, eps))
            if new.shape != eps.shape:
                raise ad.ShapeError("sample hook", eps.shape, new.shape)
            eps = new
        mu = posterior_mean(schedule, x, eps, t)
        if t > 1 or noise.final_step_noise:
            x = mu + step_sigma(schedule, t) * noise.step_noise(t)
        else:
            x = mu
    return to_pixels(x)


def invert(m: Denoiser, schedule: NoiseSchedule, x0, seed: int = 0, runs=None) -> InversionRecord:
    """Edit-friendly DDPM inversion under the null condition.

    Builds x_1..x_T with independent noise per step, then solves each reverse
    step for the xi_t that lands exactly on the next trajectory point.  The
    running state is re-derived through the same arithmetic the sampler uses,
    so replaying the record reproduces ``x0`` up to rounding.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    if x0.shape[1] != world.N_PIXELS:
        raise ad.ShapeError("invert", x0.shape, (world.N_PIXELS,))
    n = len(x0)
    runs = range(n) if runs is None else runs
    rngs = [np.random.default_rng([int(seed), STREAM_INVERT, int(r)]) for r in runs]
    m0 = to_model(x0)
    traj = {0: m0}
    for t in range(1, schedule.T + 1):
        eps = np.stack([g.standard_normal(world.N_PIXELS) for g in rngs])
        traj[t] = forward_noise(schedule, m0, t, eps)
    x = traj[schedule.T].copy()
    xis = {}
    for t in range(schedule.T, 0, -1):
        eps_hat = _eps(m, x, t, None)
        mu = posterior_mean(schedule, x, eps_hat, t)
        sig = step_sigma(schedule, t)
        xi = (traj[t - 1] - mu) / sig
        xis[t] = xi
        x = mu + sig * xi
    return InversionRecord(traj[schedule.T].copy(), xis)


def config_dict(cfg: DenoiserConfig) -> dict:
    return asdict(cfg)


def save_denoiser(path, m: Denoiser, meta: dict | None = None):
    from . import checkpoint

    header = {
        "kind": "denoiser",
        "k": m.k,
        "n_layers": m.n_layers,
        "activation": m.activation,
        "components": m.components,
        "schedule": m.schedule.to_json(),
        "history": m.history,
        **(meta or {}),
    }
    return checkpoint.write_checkpoint(path, {**dict(sorted(m.params.items())), **m.basis.arrays()}, header)


def load_denoiser(path, k: int | None = None) -> Denoiser:
    from . import checkpoint

    tensors, header = checkpoint.read_checkpoint(path)
    if header.get("kind") != "denoiser":
        raise checkpoint.CheckpointError(f"{path} is not a denoiser checkpoint")
    if k is not None and header["k"] != k:
        raise ValueError(f"denoiser conditioning width {header['k']} does not match expected {k}")
    basis = DataBasis(tensors.pop("basis_mean"), tensors.pop("basis_axes"), tensors.pop("basis_std"))
    return Denoiser(tensors, NoiseSchedule.from_json(header["schedule"]), basis, header["k"], header["n_layers"],
                    header["activation"], header["components"], header.get("history", []))
