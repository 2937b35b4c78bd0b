"""Per-environment risks, invariance penalties and the composite VIRM loss."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError


class AblationMode(str, Enum):
    ERM = "ERM"
    A = "A"                # SDA consistency only
    V = "V"                # invariance penalty on original features
    VA = "VA"              # invariance penalty on augmented features
    A_plus_V = "A_plus_V"  # SDA consistency + penalty on original features

    @property
    def uses_sda(self) -> bool:
        return self in (AblationMode.A, AblationMode.VA, AblationMode.A_plus_V)

    @property
    def uses_penalty(self) -> bool:
        return self in (AblationMode.V, AblationMode.VA, AblationMode.A_plus_V)


@dataclass
class ModelParams:
    """Featurizer (affine+GeLU hidden layers, then affine to k) and linear classifier."""

    layers: list[tuple[Tensor, Tensor]]
    classifier: tuple[Tensor, Tensor]

    @property
    def k(self) -> int:
        return self.layers[-1][0].shape[1]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (W, b) in enumerate(self.layers):
            out += [(f"phi.{i}.W", W), (f"phi.{i}.b", b)]
        return out + [("clf.W", self.classifier[0]), ("clf.b", self.classifier[1])]

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def detached(self) -> "ModelParams":
        return ModelParams([(W.detach(), b.detach()) for W, b in self.layers],
                           (self.classifier[0].detach(), self.classifier[1].detach()))


def init_model(in_dim: int, hidden: Sequence[int], k: int, n_classes: int,
               rng: np.random.Generator) -> ModelParams:
    dims = [in_dim, *hidden, k]

    def layer(fan_in, fan_out):
        bound = 1.0 / np.sqrt(fan_in)
        return (Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)), requires_grad=True),
                Tensor(rng.uniform(-bound, bound, fan_out), requires_grad=True))

    layers = [layer(a, b) for a, b in zip(dims[:-1], dims[1:])]
    return ModelParams(layers, layer(k, n_classes))


def featurize(params: ModelParams, x) -> Tensor:
    h = dc.as_tensor(x)
    last = len(params.layers) - 1
    for i, (W, b) in enumerate(params.layers):
        h = dc.affine(h, W, b)
        if i < last:
            h = dc.gelu(h)
    return h


def classify(params: ModelParams, z: Tensor) -> Tensor:
    return dc.affine(z, *params.classifier)


def env_risk(params: ModelParams, x, y) -> Tensor:
    if len(y) == 0:
        raise ContractError("env_risk needs a nonempty batch")
    return dc.softmax_cross_entropy(classify(params, featurize(params, x)), y)


def vrex_penalty(risks: Sequence[Tensor], beta: float) -> Tensor:
    """``beta * Var(risks) + sum(risks)``."""
    if len(risks) == 0:
        raise ContractError("vrex_penalty needs at least one environment")
    return dc.population_variance(risks) * beta + dc.stack(risks).sum()


def irmv1_env_penalty(logits: Tensor, labels) -> Tensor:
    """Squared derivative of CE(s * logits, labels) w.r.t. the scalar s at s = 1.

    The derivative has the closed form ``mean_i sum_c (p_ic - y_ic) * logit_ic``,
    which keeps the penalty differentiable with first-order machinery only.
    """
    labels = np.asarray(labels, dtype=np.int64)
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    grad_s = ((dc.softmax(logits) - onehot) * logits).sum() / logits.shape[0]
    return dc.square(grad_s)


def irmv1_penalty(per_env_logits: Sequence[Tensor], labels: Sequence) -> Tensor:
    if len(per_env_logits) == 0:
        raise ContractError("irmv1_penalty needs at least one environment")
    return dc.stack([irmv1_env_penalty(lg, y) for lg, y in zip(per_env_logits, labels)]).sum()


def consistency_loss(params: ModelParams, z_aug: Tensor, labels_rep) -> Tensor:
    labels_rep = np.asarray(labels_rep)
    if z_aug.shape[0] != len(labels_rep):
        raise DimensionError(f"{z_aug.shape[0]} augmented rows but {len(labels_rep)} labels")
    return dc.softmax_cross_entropy(classify(params, z_aug), labels_rep)


def virm_total_loss(mode: AblationMode | str, risks: Sequence[Tensor],
                    aug_risks: Sequence[Tensor] | None = None, sda_l: Tensor | None = None,
                    alpha: float = 0.5, beta: float = 1.0,
                    irm: Sequence[Tensor] | None = None,
                    aug_irm: Sequence[Tensor] | None = None) -> Tensor:
    """Compose the training objective for one ablation mode.

    ``risks`` are per-environment risks on original features and ``aug_risks``
    the matching consistency risks on augmented features.  The invariance term
    is ``beta * Var`` of the relevant risks (VREx) unless per-environment IRMv1
    penalties are supplied via ``irm`` / ``aug_irm``, in which case it is
    ``beta * sum`` of those.

    When SDA is active the consistency risk is averaged with the original risk
    of the same environment, so with no augmentation (lambda = 0) every mode
    reduces to its SDA-free counterpart plus ``alpha * sda_l``.
    """
    mode = AblationMode(mode)
    if len(risks) == 0:
        raise ContractError("virm_total_loss needs at least one environment risk")

    def invariance(rs, penalties):
        if penalties is not None:
            if len(penalties) != len(rs):
                raise ContractError(f"{len(penalties)} IRMv1 penalties for {len(rs)} environments")
            return dc.stack(penalties).sum() * beta
        return dc.population_variance(rs) * beta

    if mode is AblationMode.ERM:
        return dc.stack(risks).sum()
    if mode is AblationMode.V:
        return invariance(risks, irm) + dc.stack(risks).sum()

    if aug_risks is None or sda_l is None:
        raise ConfigError(f"mode {mode.value} needs augmented risks and the SDA loss")
    if len(aug_risks) != len(risks):
        raise ContractError(f"{len(aug_risks)} augmented risks for {len(risks)} environments")
    sda_term = sda_l * alpha
    if mode is AblationMode.VA:
        return invariance(aug_risks, aug_irm) + dc.stack(aug_risks).sum() + sda_term
    folded = (dc.stack(risks) + dc.stack(aug_risks)).sum() * 0.5
    if mode is AblationMode.A:
        return folded + sda_term
    return invariance(risks, irm) + folded + sda_term
