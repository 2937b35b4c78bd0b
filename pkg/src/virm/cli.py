"""Command-line front end: ``python -m virm <command> ...``.

Every command is a pure function of its config file, input files and seed, so
rerunning it reproduces its outputs byte for byte.  Errors go to stderr as a
single JSON line and the exit code is nonzero.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import analysis
from .datasets import (ColoredMnistSpec, EnvDataset, Sem2dSpec, build_colored_mnist, envs_from_csv,
                       envs_to_csv, gen_sem_2d, load_mnist)
from .errors import ConfigError, VirmError
from .objectives import AblationMode
from .sda import SdaConfig, init_sda
from .trainer import TrainReport, Trainer, VirmConfig, leave_one_domain_out

COMMANDS = ("gen-data", "train", "ablate", "rademacher", "overlap", "report")
ABLATION_ORDER = [AblationMode.ERM, AblationMode.A, AblationMode.V, AblationMode.VA, AblationMode.A_plus_V]
DEFAULT_MNIST_DIR = "data/mnist"


# config parsing ----------------------------------------------------------------

_INT, _REAL, _STR, _BOOL = "integer", "number", "string", "boolean"
_INT_LIST, _REAL_LIST = "list of integers", "list of numbers"

_TOP_KEYS = {
    "mode": _STR, "steps": _INT, "batch_size": _INT, "seed": _INT, "beta": _REAL, "lr": _REAL,
    "eval_every": _INT, "penalty": _STR, "penalty_anneal_steps": _INT, "hidden": _INT_LIST,
    "k": _INT, "n_seeds": _INT, "protocol": _STR,
}
_SDA_KEYS = {"lambda": _REAL, "U": _INT, "alpha": _REAL}
_DATASET_KEYS = {
    "sem2d": {"kind": _STR, "n_per_env": _INT, "inv_mean": _REAL, "inv_std": _REAL,
              "spurious_corr": _REAL_LIST, "spurious_std": _REAL, "seed": _INT, "test_envs": _INT_LIST},
    "colored_mnist": {"kind": _STR, "mnist_dir": _STR, "subset": _INT, "env_color_flip": _REAL_LIST,
                      "label_noise": _REAL, "downsample": _BOOL, "seed": _INT, "test_envs": _INT_LIST},
    "csv": {"kind": _STR, "path": _STR, "test_envs": _INT_LIST},
}


def _is(value, kind) -> bool:
    def integer(v):
        return isinstance(v, int) and not isinstance(v, bool)

    def real(v):
        return isinstance(v, (int, float)) and not isinstance(v, bool)

    if kind == _INT:
        return integer(value)
    if kind == _REAL:
        return real(value)
    if kind == _STR:
        return isinstance(value, str)
    if kind == _BOOL:
        return isinstance(value, bool)
    if kind == _INT_LIST:
        return isinstance(value, list) and all(integer(v) for v in value)
    if kind == _REAL_LIST:
        return isinstance(value, list) and all(real(v) for v in value)
    raise AssertionError(kind)


def _check_block(block, schema: dict, where: str):
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    for key, value in block.items():
        if key not in schema:
            raise ConfigError(f"unknown key {where}{key!r}")
        if not _is(value, schema[key]):
            raise ConfigError(f"{where}{key!r} has type {type(value).__name__}, expected {schema[key]}")


@dataclass
class DatasetConfig:
    kind: str = "sem2d"
    options: dict = field(default_factory=dict)
    test_envs: list[int] = field(default_factory=list)

    def to_dict(self, seed: int) -> dict:
        d = {"kind": self.kind, **self.options, "test_envs": list(self.test_envs)}
        if self.kind == "sem2d":
            spec = self.sem2d_spec(seed)
            d.update(n_per_env=spec.n_per_env, inv_mean=spec.inv_mean, inv_std=spec.inv_std,
                     spurious_corr=list(spec.spurious_corr), spurious_std=spec.spurious_std, seed=spec.seed)
        elif self.kind == "colored_mnist":
            spec = self.colored_spec()
            d.update(mnist_dir=self.options.get("mnist_dir", DEFAULT_MNIST_DIR),
                     env_color_flip=list(spec.env_color_flip), label_noise=spec.label_noise,
                     downsample=spec.downsample, seed=self.options.get("seed", seed))
        return dict(sorted(d.items()))

    def sem2d_spec(self, seed: int) -> Sem2dSpec:
        opts = {k: v for k, v in self.options.items() if k != "seed"}
        return Sem2dSpec(**opts, seed=self.options.get("seed", seed))

    def colored_spec(self) -> ColoredMnistSpec:
        keys = ("env_color_flip", "label_noise", "downsample")
        return ColoredMnistSpec(**{k: self.options[k] for k in keys if k in self.options})

    def load(self, seed: int) -> list[EnvDataset]:
        if self.kind == "sem2d":
            return gen_sem_2d(self.sem2d_spec(seed))
        if self.kind == "colored_mnist":
            images, digits = load_mnist(self.options.get("mnist_dir", DEFAULT_MNIST_DIR))
            subset = self.options.get("subset")
            if subset is not None:
                if subset < 1:
                    raise ConfigError(f"subset must be positive, got {subset}")
                images, digits = images[:subset], digits[:subset]
            return build_colored_mnist(images, digits, self.colored_spec(), self.options.get("seed", seed))
        return envs_from_csv(Path(self.options["path"]).read_text())


@dataclass
class ExperimentConfig:
    virm: VirmConfig
    dataset: DatasetConfig
    n_seeds: int = 1
    protocol: str = "lodo"

    @property
    def seeds(self) -> list[int]:
        return [self.virm.seed + i for i in range(self.n_seeds)]

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return ExperimentConfig(VirmConfig.from_dict({**self.virm.to_dict(), "seed": seed}),
                                self.dataset, self.n_seeds, self.protocol)

    def to_dict(self) -> dict:
        d = self.virm.to_dict()
        d.update(n_seeds=self.n_seeds, protocol=self.protocol, dataset=self.dataset.to_dict(self.virm.seed))
        return d


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON experiment config; missing keys take their defaults."""
    try:
        raw = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    raw = dict(raw)
    sda = raw.pop("sda", {})
    dataset = raw.pop("dataset", {})
    _check_block(raw, _TOP_KEYS, "")
    _check_block(sda, _SDA_KEYS, "sda.")
    if not isinstance(dataset, dict):
        raise ConfigError("dataset must be a JSON object")
    kind = dataset.get("kind", "sem2d")
    if kind not in _DATASET_KEYS:
        raise ConfigError(f"dataset.kind must be one of {sorted(_DATASET_KEYS)}, got {kind!r}")
    _check_block(dataset, _DATASET_KEYS[kind], "dataset.")
    if kind == "csv" and "path" not in dataset:
        raise ConfigError("dataset.path is required for kind 'csv'")

    if "mode" in raw and raw["mode"] not in [m.value for m in AblationMode]:
        raise ConfigError(f"mode must be one of {[m.value for m in AblationMode]}, got {raw['mode']!r}")
    n_seeds = raw.pop("n_seeds", 1)
    protocol = raw.pop("protocol", "lodo")
    if n_seeds < 1:
        raise ConfigError(f"n_seeds must be >= 1, got {n_seeds}")
    if protocol not in ("lodo", "holdout"):
        raise ConfigError(f"protocol must be 'lodo' or 'holdout', got {protocol!r}")
    virm = VirmConfig.from_dict({**raw, "sda": {"lambda": 0.8, "U": 10, "alpha": 0.5, **sda}})
    options = {k: v for k, v in dataset.items() if k not in ("kind", "test_envs")}
    ds = DatasetConfig(kind, options, list(dataset.get("test_envs", [])))
    if kind == "sem2d":
        ds.sem2d_spec(virm.seed)
    elif kind == "colored_mnist":
        ds.colored_spec()
    return ExperimentConfig(virm, ds, n_seeds, protocol)


def resolve_seed(flag: int | None, env=None) -> int | None:
    """Explicit flag first, then ``VIRM_SEED``."""
    if flag is not None:
        return flag
    value = (os.environ if env is None else env).get("VIRM_SEED")
    if value is None or value == "":
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"VIRM_SEED must be an integer, got {value!r}") from None


# output helpers ----------------------------------------------------------------

def fmt(x) -> str:
    """Shortest round-trip text for a number."""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def _csv_text(header: Sequence[str], rows: Sequence[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt(v) for v in row])
    return buf.getvalue()


class OutputDir:
    """Collects files for one command; refuses to clobber existing ones unless forced."""

    def __init__(self, path, force: bool = False):
        self.path = Path(path)
        self.force = force
        self.path.mkdir(parents=True, exist_ok=True)

    def write(self, name: str, text: str) -> Path:
        target = self.path / name
        if target.exists() and not self.force:
            raise FileExistsError(f"{target} exists; pass --force to overwrite")
        try:
            target.parent.mkdir(parents=True, exist_ok=True)
            target.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write {target}: {exc.strerror or exc}") from None
        return target


def _headline(report: TrainReport) -> float:
    if report.heldout_env is not None:
        return report.per_env_accuracy[report.heldout_env]
    return report.avg_accuracy


def trace_name(report: TrainReport, unique_seeds: bool = True) -> str:
    if unique_seeds or report.heldout_env is None:
        return f"trace_{report.seed}.csv"
    return f"trace_{report.seed}_env{report.heldout_env}.csv"


def results_csv(reports: Sequence[TrainReport]) -> str:
    rows = []
    for r in reports:
        for env_id, acc in sorted(r.per_env_accuracy.items()):
            rows.append([r.mode, r.seed, env_id, acc])
    for mode in dict.fromkeys(r.mode for r in reports):
        picked = [_headline(r) for r in reports if r.mode == mode]
        rows.append([mode, "summary", "avg", float(np.mean(picked))])
    return _csv_text(["mode", "seed", "env_id", "accuracy"], rows)


def parse_results_csv(text: str) -> list[dict]:
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        out.append({"mode": row["mode"], "seed": row["seed"], "env_id": row["env_id"],
                    "accuracy": float(row["accuracy"])})
    return out


def emit_report(reports: Sequence[TrainReport], out: OutputDir | str | Path,
                config_echo: dict | None = None) -> list[Path]:
    """Write ``results.csv``, ``config_echo.json`` and one trace CSV per run."""
    if not reports:
        raise ConfigError("emit_report needs at least one report")
    if not isinstance(out, OutputDir):
        out = OutputDir(out)
    echo = config_echo if config_echo is not None else reports[0].config
    paths = [out.write("results.csv", results_csv(reports)),
             out.write("config_echo.json", json.dumps(echo, indent=2, sort_keys=True) + "\n")]
    unique = len({r.seed for r in reports}) == len(reports)
    for r in reports:
        paths.append(out.write(trace_name(r, unique), _csv_text(["step", "loss"], r.loss_trace)))
    return paths


# commands ------------------------------------------------------------------------

def _split(envs, test_ids):
    ids = {e.env_id for e in envs}
    missing = set(test_ids) - ids
    if missing:
        raise ConfigError(f"test_envs {sorted(missing)} not among dataset envs {sorted(ids)}")
    train = [e for e in envs if e.env_id not in test_ids]
    test = [e for e in envs if e.env_id in test_ids]
    if not train:
        raise ConfigError("every environment is held out; nothing to train on")
    return train, test


def run_train(exp: ExperimentConfig) -> list[TrainReport]:
    reports = []
    for seed in exp.seeds:
        run = exp.with_seed(seed)
        train, test = _split(run.dataset.load(seed), run.dataset.test_envs)
        tr = Trainer(run.virm, train).run()
        heldout = test[0].env_id if len(test) == 1 else None
        reports.append(tr.report(test, heldout_env=heldout))
    return reports


def run_ablate(exp: ExperimentConfig, data: Sequence[EnvDataset] | None = None
               ) -> tuple[dict[str, list[TrainReport]], str]:
    """Train every ablation mode for every seed; returns the reports and the mode x env table CSV.

    Under ``protocol="lodo"`` the env columns hold held-out accuracies; under
    ``"holdout"`` they hold the accuracy on every env after training on the
    non-test ones.  Cells are means over seeds and Avg is the row mean.
    """
    by_mode: dict[str, list[TrainReport]] = {}
    env_ids: list[int] = []
    for mode in ABLATION_ORDER:
        reports = []
        for seed in exp.seeds:
            cfg = VirmConfig.from_dict({**exp.virm.to_dict(), "mode": mode.value, "seed": seed})
            envs = list(data) if data is not None else exp.dataset.load(seed)
            env_ids = sorted(e.env_id for e in envs)
            if exp.protocol == "lodo":
                reports += leave_one_domain_out(cfg, envs)
            else:
                train, test = _split(envs, exp.dataset.test_envs)
                reports.append(Trainer(cfg, train).run().report(test))
        by_mode[mode.value] = reports

    rows = []
    for mode, reports in by_mode.items():
        cells = []
        for env_id in env_ids:
            if exp.protocol == "lodo":
                vals = [r.per_env_accuracy[env_id] for r in reports if r.heldout_env == env_id]
            else:
                vals = [r.per_env_accuracy[env_id] for r in reports]
            cells.append(float(np.mean(vals)))
        rows.append([mode, *cells, float(np.mean(cells))])
    table = _csv_text(["mode", *[f"env{e}" for e in env_ids], "avg"], rows)
    return by_mode, table


def rademacher_rows(m: int, k: int, U: int, draws: int, seed: int, lam: float = 0.8) -> list[list]:
    """Original vs augmented empirical complexity for m unit-norm Gaussian rows."""
    if m < 2 or k < 1 or U < 1:
        raise ConfigError("rademacher needs m >= 2, k >= 1, U >= 1")
    rng = np.random.default_rng(seed)
    S = rng.standard_normal((m, k))
    S /= np.linalg.norm(S, axis=1, keepdims=True)
    params = init_sda(k, rng)
    S_aug = analysis.build_augmented_set(S, params, U, lam, rng)
    base = float(np.max(np.sum(S * S, axis=1)))
    t1 = analysis.theorem1_bound(S_aug, base, k)
    orig = analysis.empirical_rademacher_linear(S, draws, rng)
    aug = analysis.empirical_rademacher_linear(S_aug, draws, rng)
    return [["original", m, m, k, orig.draws, orig.mean, orig.stderr, analysis.lemma2_bound(S), t1],
            ["augmented", m, len(S_aug), k, aug.draws, aug.mean, aug.stderr,
             analysis.lemma2_bound(S_aug), t1]]


def read_feature_csv(path) -> np.ndarray:
    """Columns named f0, f1, ... of a CSV (other columns are ignored)."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ConfigError(f"{path} is empty")
        cols = [i for i, h in enumerate(header) if h.startswith("f") and h[1:].isdigit()]
        if not cols:
            raise ConfigError(f"{path} has no f0, f1, ... columns")
        rows = [[float(row[i]) for i in cols] for row in reader]
    return np.array(rows, dtype=np.float64).reshape(len(rows), len(cols))


def overlap_files(A, B, bandwidth=None, grid=512) -> dict[str, str]:
    rep = analysis.kde_overlap(A, B, bandwidth=bandwidth, grid=grid)
    rows = [[j, v] for j, v in enumerate(rep.per_dim)]
    if rep.pca2 is not None:
        rows.append(["pca2", rep.pca2])
    rows.append(["mean", rep.mean])
    files = {"overlap.csv": _csv_text(["dim", "overlap"], rows)}
    for j, dg in enumerate(rep.densities):
        files[f"density_dim{j}.csv"] = _csv_text(["x", "density_A", "density_B"],
                                                 list(zip(dg.x, dg.density_a, dg.density_b)))
    return files


def summarize_results(texts: Sequence[str]) -> str:
    """Fold one or more results.csv files into a mode x env table of mean accuracies."""
    acc: dict[str, dict[str, list[float]]] = {}
    for text in texts:
        for row in parse_results_csv(text):
            if row["seed"] == "summary":
                continue
            acc.setdefault(row["mode"], {}).setdefault(row["env_id"], []).append(row["accuracy"])
    env_ids = sorted({e for per in acc.values() for e in per}, key=int)
    rows = []
    for mode, per in acc.items():
        cells = [float(np.mean(per[e])) if e in per else float("nan") for e in env_ids]
        rows.append([mode, *cells, float(np.nanmean(cells))])
    return _csv_text(["mode", *[f"env{e}" for e in env_ids], "avg"], rows)


# argparse --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="virm", description="Vicinal invariant risk minimization experiments")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--force", action="store_true", help="overwrite existing output files")

    g = sub.add_parser("gen-data", help="write a generated dataset as CSV")
    g.add_argument("--spec", required=True, help="JSON dataset block (kind sem2d or colored_mnist)")
    common(g, config=False)
    common(sub.add_parser("train", help="train one mode, one run per seed"))
    common(sub.add_parser("ablate", help="all five modes x seeds"))
    r = sub.add_parser("rademacher", help="empirical Rademacher complexity and bounds")
    for name in ("m", "k", "U", "draws"):
        r.add_argument(f"--{name}", type=int, required=True)
    r.add_argument("--lam", type=float, default=0.8)
    common(r, config=False)
    o = sub.add_parser("overlap", help="KDE overlap between two feature CSVs")
    o.add_argument("--features-a", required=True)
    o.add_argument("--features-b", required=True)
    o.add_argument("--bandwidth", type=float)
    o.add_argument("--grid", type=int, default=512)
    common(o, config=False)
    s = sub.add_parser("report", help="summarize results.csv files into one table")
    s.add_argument("--results", nargs="+", required=True)
    common(s, config=False)
    return p


def _load_experiment(path, seed) -> ExperimentConfig:
    exp = parse_config(Path(path).read_text())
    return exp.with_seed(seed) if seed is not None else exp


def dispatch(args) -> list[Path]:
    seed = resolve_seed(args.seed)
    out = OutputDir(args.out, force=args.force)

    if args.command == "gen-data":
        spec_text = Path(args.spec).read_text()
        exp = parse_config(json.dumps({"dataset": json.loads(spec_text or "{}")}))
        base = seed if seed is not None else 0
        if exp.dataset.kind == "csv":
            raise ConfigError("gen-data builds sem2d or colored_mnist datasets")
        envs = exp.dataset.load(base)
        return [out.write("envs.csv", envs_to_csv(envs)),
                out.write("spec_echo.json", json.dumps(exp.dataset.to_dict(base), indent=2, sort_keys=True) + "\n")]

    if args.command == "train":
        exp = _load_experiment(args.config, seed)
        return emit_report(run_train(exp), out, exp.to_dict())

    if args.command == "ablate":
        exp = _load_experiment(args.config, seed)
        by_mode, table = run_ablate(exp)
        paths = [out.write("ablation.csv", table)]
        for mode, reports in by_mode.items():
            paths += emit_report(reports, OutputDir(out.path / mode, out.force),
                                 {**exp.to_dict(), "mode": mode})
        paths.append(out.write("config_echo.json", json.dumps(exp.to_dict(), indent=2, sort_keys=True) + "\n"))
        return paths

    if args.command == "rademacher":
        rows = rademacher_rows(args.m, args.k, args.U, args.draws, seed if seed is not None else 0, args.lam)
        header = ["quantity", "m", "n", "k", "draws", "estimate", "stderr", "lemma2_bound", "theorem1_bound"]
        return [out.write("rademacher.csv", _csv_text(header, rows))]

    if args.command == "overlap":
        files = overlap_files(read_feature_csv(args.features_a), read_feature_csv(args.features_b),
                              args.bandwidth, args.grid)
        return [out.write(name, text) for name, text in files.items()]

    if args.command == "report":
        texts = [Path(p).read_text() for p in args.results]
        return [out.write("summary.csv", summarize_results(texts))]

    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except ConfigError as exc:
        sys.stderr.write(json.dumps({"error": "UsageError", "message": str(exc)}) + "\n")
        return 2
    try:
        dispatch(args)
    except (VirmError, OSError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(msg)}) + "\n")
        return 1
    return 0
