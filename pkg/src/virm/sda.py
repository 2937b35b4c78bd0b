"""Domain-shared semantic data augmentation in feature space.

A small encoder maps a feature row z to a per-coordinate log-variance; the
translation xi is drawn by reparameterization, a Bernoulli(lambda) mask picks
which coordinates move, and the augmented feature is ``z + d * xi``.  A mirrored
decoder reconstructs z from xi, giving the VAE-style estimator loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, DimensionError


@dataclass
class SdaConfig:
    lam: float = 0.8
    U: int = 10
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if int(self.U) != self.U or self.U < 1:
            raise ConfigError(f"U must be a positive integer, got {self.U}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")


# The first affine of each branch has no bias: batch norm removes it anyway.
_NAMES = ("enc_w1", "enc_gamma", "enc_beta", "enc_w2", "enc_b2",
          "dec_w1", "dec_gamma", "dec_beta", "dec_w2", "dec_b2")


@dataclass
class SdaParams:
    k: int
    tensors: dict[str, Tensor]

    def parameters(self) -> list[Tensor]:
        return [self.tensors[n] for n in _NAMES]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(f"sda.{n}", self.tensors[n]) for n in _NAMES]

    def __getitem__(self, name) -> Tensor:
        return self.tensors[name]


def init_sda(k: int, rng: np.random.Generator, zero_final: bool = True) -> SdaParams:
    """Fresh estimator; with ``zero_final`` the encoder starts at logvar = 0 and the decoder at 0."""
    bound = 1.0 / np.sqrt(k)

    def w():
        return rng.uniform(-bound, bound, size=(k, k))

    def final():
        return np.zeros((k, k)) if zero_final else w()

    arrays = {
        "enc_w1": w(), "enc_gamma": np.ones(k), "enc_beta": np.zeros(k),
        "enc_w2": final(), "enc_b2": np.zeros(k),
        "dec_w1": w(), "dec_gamma": np.ones(k), "dec_beta": np.zeros(k),
        "dec_w2": final(), "dec_b2": np.zeros(k),
    }
    return SdaParams(k, {n: Tensor(arrays[n], requires_grad=True, name=f"sda.{n}") for n in _NAMES})


def _check_width(params: SdaParams, x: Tensor, what: str):
    if x.ndim != 2 or x.shape[1] != params.k:
        raise DimensionError(f"{what}: expected rows of width {params.k}, got shape {list(x.shape)}")


def encode_logvar(params: SdaParams, z: Tensor) -> Tensor:
    _check_width(params, z, "encode_logvar")
    p = params.tensors
    h = dc.gelu(dc.batchnorm_train(dc.affine(z, p["enc_w1"], None), p["enc_gamma"], p["enc_beta"]))
    return dc.affine(h, p["enc_w2"], p["enc_b2"])


def reconstruct(params: SdaParams, xi: Tensor) -> Tensor:
    _check_width(params, xi, "reconstruct")
    p = params.tensors
    h = dc.gelu(dc.batchnorm_train(dc.affine(xi, p["dec_w1"], None), p["dec_gamma"], p["dec_beta"]))
    return dc.affine(h, p["dec_w2"], p["dec_b2"])


def sample_xi(logvar: Tensor, rng: np.random.Generator) -> Tensor:
    """``exp(logvar / 2) * eps`` with eps ~ N(0, I); eps is a constant of the graph."""
    eps = rng.standard_normal(logvar.shape)
    return dc.exp(logvar * 0.5) * Tensor(eps)


def bernoulli_mask(k: int, lam: float, rng: np.random.Generator) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    return (rng.random(k) < lam).astype(np.float64)


def augment(z: Tensor, xi: Tensor, d) -> Tensor:
    """``z + d * xi``; ``d`` is a length-k mask or a per-row mask matrix."""
    d = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    if z.shape != xi.shape:
        raise DimensionError(f"augment: z{list(z.shape)} and xi{list(xi.shape)} differ")
    if d.shape not in (z.shape[-1:], z.shape):
        raise DimensionError(f"augment: mask d{list(d.shape)} does not fit z{list(z.shape)}")
    return z + xi * Tensor(d)


def kl_term(logvar: Tensor) -> Tensor:
    """Sum over entries of KL(N(0, sigma^2) || N(0, 1))."""
    return (1.0 + logvar - dc.exp(logvar)).sum() * -0.5


def sda_loss(logvar: Tensor, z_hat: Tensor, z) -> Tensor:
    z = dc.as_tensor(z)
    if not logvar.shape == z_hat.shape == z.shape:
        raise DimensionError(f"sda_loss: shapes {list(logvar.shape)}, {list(z_hat.shape)}, "
                             f"{list(z.shape)} must agree")
    return kl_term(logvar) + dc.mse(z_hat, z)


@dataclass
class VicinalBatch:
    z_aug: Tensor      # (U*b) x k, copy u in rows u*b:(u+1)*b
    logvar: Tensor     # b x k
    xi: Tensor         # (U*b) x k
    masks: np.ndarray  # (U*b) x k
    loss: Tensor       # estimator loss over all U*b rows


def vicinal_batch(params: SdaParams, z: Tensor, config: SdaConfig, rng: np.random.Generator,
                  estimator_input: np.ndarray | None = None) -> VicinalBatch:
    """Augment every row of ``z`` U times, each copy with its own xi and mask.

    The estimator sees ``z`` detached, so its loss trains only the estimator;
    the augmented features stay attached to ``z`` for the classifier.
    ``estimator_input`` overrides that detached copy (it must match ``z`` in shape).
    """
    b, k = z.shape
    U = config.U
    if estimator_input is None:
        z_in = z.detach()
    else:
        z_in = Tensor(estimator_input)
        if z_in.shape != z.shape:
            raise DimensionError(f"estimator input {list(z_in.shape)} does not match z {list(z.shape)}")
    logvar = encode_logvar(params, z_in)
    # Copies share logvar, so scale and KL are computed once per base row.
    std = dc.exp(logvar * 0.5)
    xi = dc.tile_rows(std, U) * Tensor(rng.standard_normal((U * b, k)))
    per_copy = np.stack([bernoulli_mask(k, config.lam, rng) for _ in range(U)])
    masks = np.broadcast_to(per_copy[:, None, :], (U, b, k)).reshape(U * b, k)
    z_aug = augment(dc.tile_rows(z, U), xi, masks)
    z_hat = reconstruct(params, xi)
    loss = kl_term(logvar) * float(U) + dc.mse(z_hat, np.tile(z_in.data, (U, 1)))
    return VicinalBatch(z_aug, logvar, xi, masks, loss)
