"""Multi-environment datasets: IDX ingestion, ColoredMNIST, and a 2-D spurious-feature toy."""

from __future__ import annotations

import csv
import gzip
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, IdxFormatError, IdxLengthError, IdxUnsupportedTypeError


@dataclass
class EnvDataset:
    env_id: int
    features: np.ndarray
    labels: np.ndarray
    n_classes: int = 2
    meta: str = ""

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be a matrix, got shape {self.features.shape}")
        if len(self.labels) < 1:
            raise ValueError("an environment needs at least one example")
        if self.features.shape[0] != len(self.labels):
            raise ValueError(f"{self.features.shape[0]} feature rows but {len(self.labels)} labels")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError(f"labels must lie in [0, {self.n_classes})")

    def __len__(self):
        return len(self.labels)


@dataclass
class ColoredMnistSpec:
    env_color_flip: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.9])
    label_noise: float = 0.25
    downsample: bool = True

    def __post_init__(self):
        for p in [*self.env_color_flip, self.label_noise]:
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"probability {p} outside [0, 1]")
        if not self.env_color_flip:
            raise ConfigError("env_color_flip needs at least one environment")


@dataclass
class Sem2dSpec:
    n_per_env: int = 10000
    inv_mean: float = 1.0
    inv_std: float = 0.8
    spurious_corr: list[float] = field(default_factory=lambda: [0.95, 0.85, -0.9])
    spurious_std: float = 0.7
    seed: int = 0

    def __post_init__(self):
        if any(not -1.0 <= r <= 1.0 for r in self.spurious_corr):
            raise ConfigError(f"spurious correlations must lie in [-1, 1]: {self.spurious_corr}")
        if self.inv_std <= 0 or self.spurious_std <= 0:
            raise ConfigError("inv_std and spurious_std must be positive")
        if self.n_per_env < 1:
            raise ConfigError("n_per_env must be positive")


# IDX -------------------------------------------------------------------------

_UBYTE = 0x08


def parse_idx(data: bytes) -> np.ndarray:
    """Decode an unsigned-byte IDX payload into float64 values scaled to [0, 1]."""
    if len(data) < 4:
        raise IdxLengthError(f"IDX header truncated: {len(data)} bytes")
    if data[0] != 0 or data[1] != 0:
        raise IdxFormatError(f"bad IDX magic prefix {data[:2].hex()}")
    if data[2] != _UBYTE:
        raise IdxUnsupportedTypeError(f"unsupported IDX element type 0x{data[2]:02x}")
    ndim = data[3]
    header = 4 + 4 * ndim
    if len(data) < header:
        raise IdxLengthError(f"IDX dimension block truncated: need {header} bytes, have {len(data)}")
    shape = struct.unpack(f">{ndim}I", data[4:header])
    count = int(np.prod(shape, dtype=np.int64))
    payload = data[header:]
    if len(payload) != count:
        raise IdxLengthError(f"IDX payload has {len(payload)} bytes, shape {list(shape)} needs {count}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(shape).astype(np.float64) / 255.0


def encode_idx(values: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for arrays whose values are multiples of 1/255 in [0, 1]."""
    values = np.asarray(values, dtype=np.float64)
    raw = np.rint(values * 255.0)
    if raw.min(initial=0) < 0 or raw.max(initial=0) > 255:
        raise ValueError("values must lie in [0, 1]")
    header = bytes([0, 0, _UBYTE, values.ndim]) + struct.pack(f">{values.ndim}I", *values.shape)
    return header + raw.astype(np.uint8).tobytes()


def read_idx_file(path) -> np.ndarray:
    """Read an IDX file (optionally gzip-compressed) from disk."""
    data = Path(path).read_bytes()
    if data[:2] == b"\x1f\x8b":
        data = gzip.decompress(data)
    return parse_idx(data)


def load_mnist(directory, prefix: str = "train") -> tuple[np.ndarray, np.ndarray]:
    """Load ``<prefix>-images-idx3-ubyte[.gz]`` / ``<prefix>-labels-idx1-ubyte[.gz]``.

    Returns images of shape (n, 28, 28) in [0, 1] and integer digit labels.
    """
    directory = Path(directory)

    def find(stem):
        for name in (stem, stem + ".gz"):
            if (directory / name).exists():
                return directory / name
        raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")

    images = read_idx_file(find(f"{prefix}-images-idx3-ubyte"))
    digits = np.rint(read_idx_file(find(f"{prefix}-labels-idx1-ubyte")) * 255.0).astype(np.int64)
    if len(images) != len(digits):
        raise IdxFormatError(f"{len(images)} images but {len(digits)} labels")
    return images, digits


# ColoredMNIST -----------------------------------------------------------------

def _env_name(flip: float) -> str:
    corr = 1.0 - flip
    return f"{'+' if corr >= 0.5 else '-'}{round(100 * max(corr, flip))}%"


def build_colored_mnist(images, digits, spec: ColoredMnistSpec, seed: int) -> list[EnvDataset]:
    """Split MNIST into color-biased environments.

    Binary label is ``digit < 5`` flipped with probability ``label_noise``; the
    color agrees with that label except with probability ``env_color_flip[e]``.
    Color 0 keeps the image in channel 0, color 1 in channel 1.
    """
    images = np.asarray(images, dtype=np.float64)
    digits = np.asarray(digits, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("empty image set")
    if len(images) != len(digits):
        raise ValueError(f"{len(images)} images but {len(digits)} digits")
    if digits.min() < 0 or digits.max() >= 10:
        raise ValueError("digits must lie in [0, 10)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(images))
    n_env = len(spec.env_color_flip)
    envs = []
    for e, flip in enumerate(spec.env_color_flip):
        idx = order[e::n_env]
        img = images[idx]
        if spec.downsample:
            img = img[:, ::2, ::2]
        labels = (digits[idx] < 5).astype(np.int64)
        labels ^= (rng.random(len(idx)) < spec.label_noise).astype(np.int64)
        colors = labels ^ (rng.random(len(idx)) < flip).astype(np.int64)
        two = np.zeros((len(idx), 2) + img.shape[1:])
        two[np.arange(len(idx)), colors] = img
        envs.append(EnvDataset(env_id=e, features=two.reshape(len(idx), -1), labels=labels,
                               n_classes=2, meta=f"colored_mnist {_env_name(flip)} flip={flip}"))
    return envs


# 2-D structural toy -------------------------------------------------------------

def gen_sem_2d(spec: Sem2dSpec) -> list[EnvDataset]:
    """Two features per example: an invariant one and one whose link to the label varies.

    With class sign s = +-1, ``x_inv = s*inv_mean + N(0, inv_std^2)`` and
    ``x_sp = rho_e*s*inv_mean + N(0, spurious_std^2)``.
    """
    rng = np.random.default_rng(spec.seed)
    envs = []
    for e, rho in enumerate(spec.spurious_corr):
        y = rng.integers(0, 2, size=spec.n_per_env)
        s = 2.0 * y - 1.0
        x_inv = s * spec.inv_mean + spec.inv_std * rng.standard_normal(spec.n_per_env)
        x_sp = rho * s * spec.inv_mean + spec.spurious_std * rng.standard_normal(spec.n_per_env)
        envs.append(EnvDataset(env_id=e, features=np.column_stack([x_inv, x_sp]), labels=y,
                               n_classes=2, meta=f"sem2d rho={rho}"))
    return envs


# CSV -----------------------------------------------------------------------------

def envs_to_csv(envs: list[EnvDataset]) -> str:
    k = envs[0].features.shape[1]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["env", "label"] + [f"f{j}" for j in range(k)])
    for env in envs:
        for x, y in zip(env.features, env.labels):
            w.writerow([env.env_id, int(y)] + [repr(float(v)) for v in x])
    return buf.getvalue()


def envs_from_csv(text: str, n_classes: int | None = None) -> list[EnvDataset]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if header[:2] != ["env", "label"]:
        raise ValueError(f"expected header env,label,f0,...; got {header[:3]}")
    env_ids, labels, feats = [], [], []
    for row in reader:
        env_ids.append(int(row[0]))
        labels.append(int(row[1]))
        feats.append([float(v) for v in row[2:]])
    env_ids = np.array(env_ids)
    labels = np.array(labels)
    feats = np.array(feats, dtype=np.float64).reshape(len(labels), len(header) - 2)
    c = n_classes or int(labels.max()) + 1
    return [EnvDataset(env_id=int(e), features=feats[env_ids == e], labels=labels[env_ids == e],
                       n_classes=c, meta="csv") for e in np.unique(env_ids)]
