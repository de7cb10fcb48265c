"""Learn a conditioning-space direction from paired renders.

The direction ``d`` is optimised with everything else frozen, minimising

    L = w_sem * L_sem + w_latent * L_latent
    L_sem    = 1 - cos(E(x'), d) + cos(E(x), d)
    L_latent = -|| eps(x'_t, t, d) - eps(x_t, t, d) ||^2

where ``x_t`` and ``x'_t`` share both the timestep and the noise draw.  Both
terms are averaged over the batch.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, world
from .autodiff import Tensor
from .diffusion import Denoiser, NoiseSchedule, forward_noise, predict_noise, to_model
from .encoder import EmbeddingEncoder, embed

log = logging.getLogger(__name__)

STREAM_TRANSFER = 0xD1


class FrozenModelError(RuntimeError):
    """Model or encoder parameters changed during direction learning."""


class DirectionDivergedError(RuntimeError):
    def __init__(self, message: str, last_good: np.ndarray):
        super().__init__(message)
        self.last_good = last_good


class DirectionFormatError(ValueError):
    """A stored direction does not fit the expected conditioning width."""


@dataclass
class TransferConfig:
    n_pairs: int = 100
    batch_size: int = 8
    iterations: int = 1000
    lr: float = 5e-3
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    t_min: int = 1
    t_max: int | None = None
    w_sem: float = 1.0
    w_latent: float = 1.0
    init_scale: float = 0.01
    grad_clip: float | None = None
    norm_ceiling: float = 4.0
    seed: int = 0

    def __post_init__(self):
        if self.n_pairs < 1 or self.batch_size < 1 or self.iterations < 0:
            raise ValueError("pair count, batch size and iterations must be positive")
        if self.w_sem < 0 or self.w_latent < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class DirectionEmbedding:
    name: str
    d: np.ndarray
    provenance: dict = field(default_factory=dict)
    lambda_e: float = 1.0
    window: tuple[float, float] = (0.0, 0.4)
    history: list = field(default_factory=list, repr=False)

    @property
    def k(self) -> int:
        return self.d.shape[0]


def latent_loss(m: Denoiser, x_t, x_t_edit, t, d, expected_checksum: str | None = None) -> Tensor:
    """Negated batch-mean squared distance between the two noise predictions."""
    if expected_checksum is not None and m.checksum() != expected_checksum:
        raise FrozenModelError("denoiser parameters changed while learning a direction")
    x_t = np.atleast_2d(x_t)
    x_t_edit = np.atleast_2d(x_t_edit)
    diff = predict_noise(m, x_t_edit, t, d) - predict_noise(m, x_t, t, d)
    return ad.scale(ad.sq_l2_norm(diff), -1.0 / len(x_t))


def semantic_loss_from_embeddings(e_input: np.ndarray, e_edited: np.ndarray, d) -> Tensor:
    e_input, e_edited = np.atleast_2d(e_input), np.atleast_2d(e_edited)
    pos = ad.tensor_mean(ad.cosine_similarity_rows(e_edited, d))
    negs = ad.tensor_mean(ad.cosine_similarity_rows(e_input, d))
    return 1.0 - pos + negs


def semantic_loss(enc: EmbeddingEncoder, x, x_edit, d) -> Tensor:
    with ad.no_grad():
        e, e_edit = embed(enc, np.atleast_2d(x)).data, embed(enc, np.atleast_2d(x_edit)).data
    return semantic_loss_from_embeddings(e, e_edit, d)


def transfer_loss(
    m: Denoiser,
    e_input: np.ndarray,
    e_edited: np.ndarray,
    x_t: np.ndarray,
    x_t_edit: np.ndarray,
    t,
    d: Tensor,
    w_sem: float = 1.0,
    w_latent: float = 1.0,
) -> tuple[Tensor, float, float]:
    """Weighted objective; terms with zero weight are not evaluated."""
    total = None
    sem = lat = 0.0
    if w_sem:
        ls = semantic_loss_from_embeddings(e_input, e_edited, d)
        sem = ls.item()
        total = ad.scale(ls, w_sem)
    if w_latent:
        ll = latent_loss(m, x_t, x_t_edit, t, d)
        lat = ll.item()
        total = ad.scale(ll, w_latent) if total is None else total + ad.scale(ll, w_latent)
    if total is None:
        raise ValueError("both loss weights are zero")
    return total, sem, lat


def _batches(rng: np.random.Generator, n: int, size: int):
    """Endless fixed-size batches drawn from consecutive shuffled epochs."""
    buf = np.empty(0, dtype=np.int64)
    while True:
        while len(buf) < size:
            buf = np.concatenate([buf, rng.permutation(n)])
        yield buf[:size]
        buf = buf[size:]


def learn_direction(
    pairs: world.PairSet,
    m: Denoiser,
    enc: EmbeddingEncoder,
    schedule: NoiseSchedule,
    cfg: TransferConfig | None = None,
    name: str | None = None,
    provenance: dict | None = None,
) -> DirectionEmbedding:
    cfg = cfg or TransferConfig()
    n = min(cfg.n_pairs, len(pairs))
    if n < 1:
        raise ValueError("no pairs to learn from")
    if enc.k != m.k:
        raise ValueError(f"encoder width {enc.k} != denoiser conditioning width {m.k}")
    t_max = cfg.t_max or schedule.T
    m_sum, e_sum = m.checksum(), enc.checksum()
    x_in = to_model(pairs.inputs[:n])
    x_ed = to_model(pairs.edited[:n])
    with ad.no_grad():
        e_in = embed(enc, pairs.inputs[:n]).data
        e_ed = embed(enc, pairs.edited[:n]).data

    rng = np.random.default_rng([cfg.seed, STREAM_TRANSFER])
    d = rng.standard_normal(m.k) * cfg.init_scale
    state = ad.AdamState.zeros_like([d])
    batches = _batches(rng, n, cfg.batch_size)
    history = []
    warned = False
    for it in range(cfg.iterations):
        idx = next(batches)
        t = rng.integers(cfg.t_min, t_max + 1, len(idx))
        eps = rng.standard_normal((len(idx), world.N_PIXELS))
        x_t = forward_noise(schedule, x_in[idx], t, eps)
        x_t_edit = forward_noise(schedule, x_ed[idx], t, eps)
        dt = Tensor(d, requires_grad=True)
        loss, sem, lat = transfer_loss(m, e_in[idx], e_ed[idx], x_t, x_t_edit, t, dt, cfg.w_sem, cfg.w_latent)
        value = loss.item()
        ad.backward(loss)
        grad = dt.grad
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise DirectionDivergedError(f"non-finite loss at iteration {it}", d.copy())
        if cfg.grad_clip is not None:
            gn = float(np.linalg.norm(grad))
            if gn > cfg.grad_clip:
                grad = grad * (cfg.grad_clip / gn)
        (d,), state = ad.adamw_step([d], [grad], state, cfg.lr, cfg.betas, cfg.weight_decay)
        norm = float(np.linalg.norm(d))
        if norm > cfg.norm_ceiling and not warned:
            warnings.warn(f"direction norm {norm:.2f} exceeds ceiling {cfg.norm_ceiling}", RuntimeWarning)
            warned = True
        history.append({"iteration": it + 1, "loss": value, "sem": sem, "latent": lat, "norm": norm})

    if m.checksum() != m_sum or enc.checksum() != e_sum:
        raise FrozenModelError("denoiser or encoder parameters changed while learning a direction")
    d = d.astype(np.float32).astype(np.float64)
    prov = {
        "direction": pairs.direction.name,
        "world_seed": pairs.seed,
        "n_pairs": n,
        "iterations": cfg.iterations,
        "transfer_config": _jsonable(dataclasses.asdict(cfg)),
        "denoiser_checksum": m_sum,
        "encoder_checksum": e_sum,
    }
    prov.update(provenance or {})
    return DirectionEmbedding(name or pairs.direction.name, d, prov, history=history)


def _jsonable(d: dict) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def direction_meta(direction: DirectionEmbedding) -> dict:
    return {
        "kind": "direction",
        "name": direction.name,
        "k": direction.k,
        "lambda_e": direction.lambda_e,
        "window": list(direction.window),
        "provenance": direction.provenance,
    }


def save_direction(path, direction: DirectionEmbedding):
    return checkpoint.write_checkpoint(path, {"d": direction.d}, direction_meta(direction))


def load_direction(path, k: int | None = None) -> DirectionEmbedding:
    tensors, header = checkpoint.read_checkpoint(path)
    if header.get("kind") != "direction" or "d" not in tensors:
        raise DirectionFormatError(f"{path} is not a direction file")
    d = tensors["d"]
    if d.ndim != 1 or d.shape[0] != header["k"]:
        raise DirectionFormatError(f"direction tensor shape {d.shape} disagrees with header k={header['k']}")
    if k is not None and d.shape[0] != k:
        raise DirectionFormatError(f"direction width {d.shape[0]} does not match model conditioning width {k}")
    return DirectionEmbedding(
        header["name"], d, header["provenance"], float(header["lambda_e"]), tuple(header["window"])
    )
