"""Adam, the multi-environment training loop, evaluation and leave-one-domain-out."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .datasets import EnvDataset
from .diffcore import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .objectives import (AblationMode, ModelParams, classify, featurize, init_model,
                         irmv1_env_penalty, virm_total_loss)
from .sda import SdaConfig, SdaParams, init_sda, vicinal_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "virm-checkpoint"
CHECKPOINT_VERSION = 1


# Adam --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray], lr: float = 1e-3, **kw) -> "AdamState":
        return cls([np.zeros_like(p, dtype=np.float64) for p in params],
                   [np.zeros_like(p, dtype=np.float64) for p in params], lr=lr, **kw)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray],
              state: AdamState) -> tuple[list[np.ndarray], AdamState]:
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError(f"adam_step: {len(params)} params, {len(grads)} grads, "
                             f"{len(state.m)} moment slots")
    t = state.t + 1
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    new_params, ms, vs = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        p, g = np.asarray(p, dtype=np.float64), np.asarray(g, dtype=np.float64)
        if p.shape != g.shape or p.shape != m.shape:
            raise DimensionError(f"adam_step: param {list(p.shape)} vs grad {list(g.shape)}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        new_params.append(p - state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps))
        ms.append(m)
        vs.append(v)
    return new_params, AdamState(ms, vs, t, state.lr, state.beta1, state.beta2, state.eps)


# config / report -----------------------------------------------------------------

@dataclass
class VirmConfig:
    mode: AblationMode = AblationMode.A_plus_V
    steps: int = 2000
    batch_size: int = 64
    seed: int = 0
    sda: SdaConfig = field(default_factory=SdaConfig)
    beta: float = 10.0
    lr: float = 1e-3
    eval_every: int = 100
    penalty: str = "vrex"
    penalty_anneal_steps: int = 0
    hidden: tuple[int, ...] = (128, 128)
    k: int = 64

    def __post_init__(self):
        self.mode = AblationMode(self.mode)
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2 for batch norm, got {self.batch_size}")
        if self.penalty not in ("vrex", "irmv1"):
            raise ConfigError(f"penalty must be 'vrex' or 'irmv1', got {self.penalty!r}")
        if self.beta < 0 or self.lr <= 0 or self.k < 1 or self.eval_every < 1:
            raise ConfigError("beta must be >= 0, lr > 0, k >= 1, eval_every >= 1")
        if self.penalty_anneal_steps < 0:
            raise ConfigError("penalty_anneal_steps must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = self.mode.value
        d["hidden"] = list(self.hidden)
        d["sda"] = {"lambda": self.sda.lam, "U": self.sda.U, "alpha": self.sda.alpha}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "VirmConfig":
        d = dict(d)
        sda = d.pop("sda", {}) or {}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config key {sorted(unknown)[0]!r}")
        return cls(sda=SdaConfig(lam=sda.get("lambda", 0.8), U=sda.get("U", 10),
                                 alpha=sda.get("alpha", 0.5)), **d)


@dataclass
class TrainReport:
    per_env_accuracy: dict[int, float]
    avg_accuracy: float
    loss_trace: list[tuple[int, float]]
    config: dict
    seed: int
    train_env_ids: list[int] = field(default_factory=list)
    heldout_env: int | None = None
    accuracy_trace: list[tuple[int, dict[int, float]]] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return self.config["mode"]


def evaluate_accuracy(params: ModelParams, env: EnvDataset, chunk: int = 4096) -> float:
    """Fraction of examples whose argmax logit equals the label; SDA plays no part."""
    if len(env) == 0:
        raise ContractError("cannot evaluate on an empty environment")
    frozen = params.detached()
    correct = 0
    for start in range(0, len(env), chunk):
        logits = classify(frozen, featurize(frozen, env.features[start:start + chunk])).data
        correct += int((logits.argmax(axis=1) == env.labels[start:start + chunk]).sum())
    return correct / len(env)


# training -------------------------------------------------------------------------

class Trainer:
    """Stateful training run; ``state_dict`` / ``from_state`` give bit-exact resumption."""

    def __init__(self, config: VirmConfig, envs: Sequence[EnvDataset]):
        if not envs:
            raise ConfigError("need at least one training environment")
        if config.mode.uses_penalty and len(envs) < 2:
            raise ConfigError(f"mode {config.mode.value} needs at least 2 training environments")
        dims = {e.features.shape[1] for e in envs}
        classes = {e.n_classes for e in envs}
        if len(dims) != 1 or len(classes) != 1:
            raise DimensionError("training environments disagree on feature width or class count")
        self.config = config
        self.envs = list(envs)
        init_seq, data_seq, noise_seq = np.random.SeedSequence(config.seed).spawn(3)
        init_rng = np.random.default_rng(init_seq)
        self.model = init_model(dims.pop(), config.hidden, config.k, classes.pop(), init_rng)
        self.sda = init_sda(config.k, init_rng)
        self.data_rng = np.random.default_rng(data_seq)
        self.noise_rng = np.random.default_rng(noise_seq)
        self.adam = AdamState.zeros_like([p.data for p in self.parameters()], lr=config.lr)
        self.step_count = 0
        self.loss_trace: list[tuple[int, float]] = []
        self.accuracy_trace: list[tuple[int, dict[int, float]]] = []
        self.seen_env_ids: set[int] = set()

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return self.model.named_parameters() + self.sda.named_parameters()

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def penalty_weight(self) -> float:
        return self.config.beta if self.step_count >= self.config.penalty_anneal_steps else 1.0

    def sample_batches(self) -> list[tuple[np.ndarray, np.ndarray, int]]:
        out = []
        for env in self.envs:
            n = len(env)
            idx = self.data_rng.choice(n, self.config.batch_size, replace=n < self.config.batch_size)
            out.append((env.features[idx], env.labels[idx], env.env_id))
        return out

    def loss(self, batches) -> Tensor:
        cfg = self.config
        mode = cfg.mode
        beta = self.penalty_weight()
        zs = [featurize(self.model, x) for x, _, _ in batches]
        labels = [y for _, y, _ in batches]
        logits = [classify(self.model, z) for z in zs]
        risks = [dc.softmax_cross_entropy(lg, y) for lg, y in zip(logits, labels)]
        irm = ([irmv1_env_penalty(lg, y) for lg, y in zip(logits, labels)]
               if cfg.penalty == "irmv1" else None)
        if not mode.uses_sda:
            return virm_total_loss(mode, risks, beta=beta, irm=irm)

        sizes = [len(y) for y in labels]
        offsets = np.cumsum([0] + sizes)
        total = int(offsets[-1])
        vb = vicinal_batch(self.sda, dc.concat_rows(zs), cfg.sda, self.noise_rng)
        all_aug_logits = classify(self.model, vb.z_aug)
        aug_logits, aug_labels = [], []
        for e, y in enumerate(labels):
            idx = np.concatenate([u * total + np.arange(offsets[e], offsets[e + 1])
                                  for u in range(cfg.sda.U)])
            aug_logits.append(dc.take_rows(all_aug_logits, idx))
            aug_labels.append(np.tile(y, cfg.sda.U))
        aug_risks = [dc.softmax_cross_entropy(lg, y) for lg, y in zip(aug_logits, aug_labels)]
        aug_irm = ([irmv1_env_penalty(lg, y) for lg, y in zip(aug_logits, aug_labels)]
                   if cfg.penalty == "irmv1" else None)
        return virm_total_loss(mode, risks, aug_risks, vb.loss, alpha=cfg.sda.alpha, beta=beta,
                               irm=irm, aug_irm=aug_irm)

    def step(self) -> float:
        cfg = self.config
        if cfg.penalty_anneal_steps and self.step_count == cfg.penalty_anneal_steps:
            # the penalty weight jumps here; stale moments would overshoot
            self.adam = AdamState.zeros_like([p.data for p in self.parameters()], lr=cfg.lr)
        batches = self.sample_batches()
        self.seen_env_ids.update(e for _, _, e in batches)
        loss = self.loss(batches)
        params = self.parameters()
        grads = dc.backward(loss, params)
        new, self.adam = adam_step([p.data for p in params], grads, self.adam)
        for p, value in zip(params, new):
            p.data = value
        self.step_count += 1
        value = loss.item()
        self.loss_trace.append((self.step_count, value))
        if self.step_count % cfg.eval_every == 0:
            self.accuracy_trace.append((self.step_count, self.accuracies(self.envs)))
        return value

    def run(self, steps: int | None = None) -> "Trainer":
        remaining = self.config.steps - self.step_count if steps is None else steps
        for _ in range(max(remaining, 0)):
            self.step()
        return self

    def accuracies(self, envs: Sequence[EnvDataset]) -> dict[int, float]:
        return {e.env_id: evaluate_accuracy(self.model, e) for e in envs}

    def report(self, eval_envs: Sequence[EnvDataset] = (), heldout_env: int | None = None) -> TrainReport:
        accs = self.accuracies([*self.envs, *eval_envs])
        return TrainReport(per_env_accuracy=accs, avg_accuracy=float(np.mean(list(accs.values()))),
                           loss_trace=list(self.loss_trace), config=self.config.to_dict(),
                           seed=self.config.seed, train_env_ids=sorted(self.seen_env_ids),
                           heldout_env=heldout_env, accuracy_trace=list(self.accuracy_trace))

    # checkpointing -----------------------------------------------------------

    def state_dict(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "config": self.config.to_dict(),
            "env_ids": [e.env_id for e in self.envs],
            "step": self.step_count,
            "tensors": [{"name": n, "shape": list(t.shape), "values": t.data.reshape(-1).tolist()}
                        for n, t in self.named_parameters()],
            "adam": {"t": self.adam.t, "lr": self.adam.lr, "beta1": self.adam.beta1,
                     "beta2": self.adam.beta2, "eps": self.adam.eps,
                     "m": [m.reshape(-1).tolist() for m in self.adam.m],
                     "v": [v.reshape(-1).tolist() for v in self.adam.v]},
            "rng": {"data": self.data_rng.bit_generator.state,
                    "noise": self.noise_rng.bit_generator.state},
            "loss_trace": [[s, v] for s, v in self.loss_trace],
            "seen_env_ids": sorted(self.seen_env_ids),
        }

    @classmethod
    def from_state(cls, state: dict, envs: Sequence[EnvDataset]) -> "Trainer":
        if state.get("format") != CHECKPOINT_FORMAT or state.get("version") != CHECKPOINT_VERSION:
            raise ConfigError(f"not a v{CHECKPOINT_VERSION} {CHECKPOINT_FORMAT} file")
        if state["env_ids"] != [e.env_id for e in envs]:
            raise ConfigError(f"checkpoint trained on envs {state['env_ids']}, got "
                              f"{[e.env_id for e in envs]}")
        tr = cls(VirmConfig.from_dict(state["config"]), envs)
        named = dict(tr.named_parameters())
        for rec in state["tensors"]:
            named[rec["name"]].data = np.array(rec["values"], dtype=np.float64).reshape(rec["shape"])
        shapes = [p.shape for p in tr.parameters()]
        a = state["adam"]
        tr.adam = AdamState([np.array(m).reshape(s) for m, s in zip(a["m"], shapes)],
                            [np.array(v).reshape(s) for v, s in zip(a["v"], shapes)],
                            a["t"], a["lr"], a["beta1"], a["beta2"], a["eps"])
        tr.data_rng.bit_generator.state = state["rng"]["data"]
        tr.noise_rng.bit_generator.state = state["rng"]["noise"]
        tr.step_count = state["step"]
        tr.loss_trace = [(int(s), float(v)) for s, v in state["loss_trace"]]
        tr.seen_env_ids = set(state["seen_env_ids"])
        return tr


def save_checkpoint(trainer: Trainer, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(trainer.state_dict()))
    return path


def load_checkpoint(path, envs: Sequence[EnvDataset]) -> Trainer:
    return Trainer.from_state(json.loads(Path(path).read_text()), envs)


def train_run(config: VirmConfig, envs: Sequence[EnvDataset],
              eval_envs: Sequence[EnvDataset] = ()) -> tuple[ModelParams, SdaParams, TrainReport]:
    """Train on ``envs`` for ``config.steps`` steps; ``eval_envs`` are only scored."""
    tr = Trainer(config, envs).run()
    return tr.model, tr.sda, tr.report(eval_envs)


def leave_one_domain_out(config: VirmConfig, all_envs: Sequence[EnvDataset]) -> list[TrainReport]:
    """One run per environment, each trained on all the others; fold i uses seed + i."""
    if len(all_envs) < 3:
        raise ConfigError(f"leave-one-domain-out needs >= 3 environments, got {len(all_envs)}")
    reports = []
    for i, held in enumerate(all_envs):
        fold_cfg = VirmConfig.from_dict({**config.to_dict(), "seed": config.seed + i})
        train = [e for e in all_envs if e.env_id != held.env_id]
        tr = Trainer(fold_cfg, train).run()
        rep = tr.report([held], heldout_env=held.env_id)
        log.info("fold %d held out env %d: acc %.4f", i, held.env_id, rep.per_env_accuracy[held.env_id])
        reports.append(rep)
    return reports


def lodo_table_row(reports: Sequence[TrainReport]) -> dict:
    """Held-out accuracy per environment plus their mean, as one table row."""
    row = {r.heldout_env: r.per_env_accuracy[r.heldout_env] for r in reports}
    row["avg"] = float(np.mean(list(row.values())))
    return row
