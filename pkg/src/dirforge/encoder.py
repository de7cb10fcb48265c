"""Image encoder into the shared k-dimensional embedding/conditioning space.

The encoder is a 256 -> 64 -> k MLP.  It is pretrained by regressing the
range-normalised style vector through a linear head applied to the
unit-normalised embedding; the head is discarded afterwards.  At inference
embeddings are unit-normalised (``normalize=True``).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn, world
from .autodiff import Tensor

log = logging.getLogger(__name__)

EMBED_DIM = 16


class TrainingDivergedError(RuntimeError):
    """Loss became non-finite during training."""


@dataclass
class EncoderConfig:
    hidden: int = 64
    k: int = EMBED_DIM
    activation: str = "silu"
    n_train: int = 4096
    steps: int = 3000
    batch_size: int = 128
    lr: float = 3e-3
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class EmbeddingEncoder:
    params: nn.Params
    k: int = EMBED_DIM
    activation: str = "silu"
    normalize: bool = True
    history: list = field(default_factory=list, repr=False)

    def embed(self, x, normalize: bool | None = None, params=None) -> Tensor:
        return embed(self, x, normalize=normalize, params=params)

    def checksum(self) -> str:
        return nn.checksum(self.params)


def init_encoder(rng: np.random.Generator, cfg: EncoderConfig | None = None) -> EmbeddingEncoder:
    cfg = cfg or EncoderConfig()
    params = nn.init_mlp(rng, [world.N_PIXELS, cfg.hidden, cfg.k])
    return EmbeddingEncoder(params, cfg.k, cfg.activation)


def embed(enc: EmbeddingEncoder, x, normalize: bool | None = None, params=None) -> Tensor:
    """Embed one image ([256] -> [k]) or a batch ([n, 256] -> [n, k])."""
    x = ad.as_tensor(x)
    single = x.ndim == 1
    if x.shape[-1] != world.N_PIXELS or x.ndim > 2:
        raise ad.ShapeError("embed", x.shape, (world.N_PIXELS,))
    if single:
        x = ad.reshape(x, (1, world.N_PIXELS))
    p = params if params is not None else nn.constants(enc.params)
    h = nn.mlp_forward(p, x, 2, enc.activation)
    if enc.normalize if normalize is None else normalize:
        h = ad.normalize_rows(h)
    return ad.reshape(h, (enc.k,)) if single else h


def normalized_styles(styles: np.ndarray) -> np.ndarray:
    return (np.asarray(styles) - world.RANGES[:, 0]) / world.SPAN


def train_encoder(images: np.ndarray, styles: np.ndarray, cfg: EncoderConfig | None = None) -> EmbeddingEncoder:
    cfg = cfg or EncoderConfig()
    rng = np.random.default_rng([cfg.seed, 0xE1C])
    enc = init_encoder(rng, cfg)
    head = nn.init_mlp(rng, [cfg.k, len(world.ATTRIBUTES)], prefix="head_")
    params = {**enc.params, **head}
    targets = normalized_styles(styles)
    opt = nn.AdamW(params, cfg.lr, weight_decay=cfg.weight_decay)
    n = len(images)
    steps_per_epoch = max(1, n // cfg.batch_size)
    history = []
    running = 0.0
    for step in range(cfg.steps):
        idx = rng.integers(0, n, cfg.batch_size)
        tp = nn.trainable(params)
        emb = embed(enc, images[idx], normalize=True, params=tp)
        pred = nn.mlp_forward(tp, emb, 1, prefix="head_")
        loss = ad.scale(ad.sq_l2_norm(pred - targets[idx]), 1.0 / cfg.batch_size)
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingDivergedError(f"encoder loss {value} at step {step}")
        ad.backward(loss)
        params = opt.step(params, {k: t.grad for k, t in tp.items()})
        running += value
        if (step + 1) % steps_per_epoch == 0:
            epoch_loss = running / steps_per_epoch
            history.append({"step": step + 1, "loss": epoch_loss})
            log.debug("encoder epoch %d loss %.5f", len(history), epoch_loss)
            running = 0.0
    enc_params = nn.quantize_f32({k: v for k, v in params.items() if not k.startswith("head_")})
    return EmbeddingEncoder(enc_params, cfg.k, cfg.activation, True, history)


def probe_r2(
    enc: EmbeddingEncoder,
    train_images: np.ndarray,
    train_styles: np.ndarray,
    test_images: np.ndarray,
    test_styles: np.ndarray,
) -> np.ndarray:
    """Per-attribute held-out R^2 of a least-squares linear probe on embeddings."""

    def design(images):
        e = embed(enc, images).data
        return np.hstack([e, np.ones((len(e), 1))])

    coef, *_ = np.linalg.lstsq(design(train_images), train_styles, rcond=None)
    pred = design(test_images) @ coef
    ss_res = np.sum((test_styles - pred) ** 2, axis=0)
    ss_tot = np.sum((test_styles - test_styles.mean(axis=0)) ** 2, axis=0)
    return 1.0 - ss_res / ss_tot


def config_dict(cfg: EncoderConfig) -> dict:
    return asdict(cfg)


def save_encoder(path, enc: EmbeddingEncoder, meta: dict | None = None):
    from . import checkpoint

    header = {"kind": "encoder", "k": enc.k, "activation": enc.activation, "normalize": enc.normalize,
              "history": enc.history, **(meta or {})}
    return checkpoint.write_checkpoint(path, dict(sorted(enc.params.items())), header)


def load_encoder(path, k: int | None = None) -> EmbeddingEncoder:
    from . import checkpoint

    tensors, header = checkpoint.read_checkpoint(path)
    if header.get("kind") != "encoder":
        raise checkpoint.CheckpointError(f"{path} is not an encoder checkpoint")
    if k is not None and header["k"] != k:
        raise ValueError(f"encoder width {header['k']} does not match expected {k}")
    return EmbeddingEncoder(tensors, header["k"], header["activation"], header["normalize"], header.get("history", []))
