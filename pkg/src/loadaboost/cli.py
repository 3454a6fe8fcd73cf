"""Command line entry point: ``loadaboost run | synth | inspect``."""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional

from . import __version__
from .data import DataError, Dataset, load_csv, synth_generate, write_csv
from .evaluation import (NONIID_SHARING, SCENARIOS, CrossValidation, Scenario, cross_validate,
                         monotone_max)
from .federation import ALGORITHMS, FederationConfig, InvariantError

log = logging.getLogger("loadaboost")

EXIT_CONFIG, EXIT_DATA, EXIT_INVARIANT = 2, 3, 4


class ConfigError(ValueError):
    pass


def _fraction(text: str) -> float:
    text = str(text).strip()
    value = float(text[:-1]) / 100.0 if text.endswith("%") else float(text)
    if not 0 < value <= 1:
        raise ConfigError(f"fraction must lie in (0, 1], got {text}")
    return value


def _positive_int(text: str) -> int:
    value = int(str(text).strip())
    if value < 1:
        raise ConfigError(f"expected a positive integer, got {text}")
    return value


def _bool(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text}")


def _int_list(text: str) -> tuple[int, ...]:
    text = str(text).strip()
    return tuple(_positive_int(x) for x in text.split(",")) if text else ()


def _algorithms(text: str) -> tuple[str, ...]:
    algs = tuple(a.strip().lower() for a in str(text).split(",") if a.strip())
    if not algs or any(a not in ALGORITHMS for a in algs) or len(set(algs)) != len(algs):
        raise ConfigError(f"algorithms must be distinct entries of {ALGORITHMS}, got {text}")
    return algs


def _scenario(text: str) -> str:
    t = str(text).strip().lower()
    if t not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {text}")
    return t


def _optional(parse: Callable[[str], Any]) -> Callable[[str], Any]:
    return lambda text: None if str(text).strip() in ("", "none") else parse(text)


# key -> (parser, default, help); order is the order of config.resolved
KEYS: dict[str, tuple[Callable[[str], Any], Any, str]] = {
    "data": (_optional(str), None, "CSV file to load; synthetic data is generated when unset"),
    "synth_n": (_positive_int, 9000, "synthetic example count"),
    "synth_d": (_positive_int, 100, "synthetic feature count"),
    "synth_seed": (int, 1, "synthetic data seed"),
    "scenario": (_scenario, "iid", "iid | noniid | noniid_sharing"),
    "alpha": (_optional(_fraction), None, "fraction of G given to each client (sharing only)"),
    "beta": (_optional(_fraction), None, "|G| relative to all client data (sharing only)"),
    "holdout_fraction": (_fraction, 0.1, "share of the data reserved as the G pool (sharing only)"),
    "clients": (_positive_int, 30, "K, number of clients"),
    "fraction": (_fraction, 0.1, "C, fraction of training clients selected per round"),
    "epochs": (_positive_int, 5, "E, local epochs"),
    "batch_size": (_positive_int, 30, "B, minibatch size"),
    "rounds": (_positive_int, 30, "T, global rounds"),
    "algorithms": (_algorithms, ALGORITHMS, "comma-separated subset of fedavg,loadaboost"),
    "hidden": (_int_list, (20, 10, 5), "hidden layer widths"),
    "learning_rate": (float, 1e-3, "Adam step size"),
    "folds": (_positive_int, 10, "cross-validation folds over clients"),
    "repetitions": (_positive_int, 5, "cross-validation repetitions"),
    "seed": (int, 0, "master seed"),
    "paired": (_bool, True, "reuse initial weights and client selections across algorithms"),
    "jobs": (_positive_int, 1, "worker processes"),
    "out": (str, "results", "output directory"),
}


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    raw = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        raw[key] = value
    return raw


def resolve(raw: dict[str, str]) -> dict[str, Any]:
    cfg = {}
    for key, (parse, default, _) in KEYS.items():
        if key in raw:
            try:
                cfg[key] = parse(raw[key])
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            cfg[key] = default
    sharing = cfg["scenario"] == NONIID_SHARING
    if sharing and (cfg["alpha"] is None or cfg["beta"] is None):
        raise ConfigError("scenario noniid_sharing requires alpha and beta")
    if not sharing and (cfg["alpha"] is not None or cfg["beta"] is not None):
        raise ConfigError("alpha and beta are only valid with scenario noniid_sharing")
    if cfg["folds"] < 2:
        raise ConfigError("folds must be >= 2")
    if cfg["folds"] > cfg["clients"]:
        raise ConfigError("folds cannot exceed clients")
    return cfg


def render_config(cfg: dict[str, Any]) -> str:
    return "".join(f"{key} = {_render(cfg[key])}\n" for key in KEYS)


@dataclass
class ResultBundle:
    config: dict[str, Any]
    cv: CrossValidation
    dataset: Dataset
    wall_clock: float

    def to_json(self) -> dict[str, Any]:
        cv = self.cv
        algs = {}
        for name, res in cv.results.items():
            algs[name] = {
                "auc_per_repetition": res.auc_per_repetition,
                "mean_auc": res.mean_auc,
                "std_auc": res.std_auc,
                "average_epochs": res.average_epochs,
                "average_epochs_per_repetition": res.average_epochs_per_repetition,
                "fold_aucs": res.fold_aucs,
                "p_value": res.p_value,
            }
        comparison = None
        if cv.comparison is not None:
            first, second = self.config["algorithms"]
            c = cv.comparison
            diff = cv.results[second].mean_auc - cv.results[first].mean_auc
            comparison = {
                "test": "wilcoxon signed-rank, exact, one-sided",
                "alternative": f"{second} > {first}",
                "statistic": c.statistic,
                "n": c.n,
                "p_value": c.p_value,
                "degenerate": c.degenerate,
                "direction": "greater" if diff > 0 else "less" if diff < 0 else "equal",
                "mean_auc_difference": diff,
            }
        return {
            "tool_version": __version__,
            "config": {k: _render(v) for k, v in self.config.items()},
            "geometry": {
                "n_examples": len(self.dataset),
                "n_features": self.dataset.n_features,
                "n_client_examples": cv.n_client_examples,
                "clients": self.config["clients"],
                "folds": self.config["folds"],
                "repetitions": self.config["repetitions"],
                "shared_holdout_size": cv.holdout_size,
                "shared_per_client": cv.shared_per_client,
                "runs_per_algorithm": len(cv.runs) // max(len(cv.results), 1),
            },
            "algorithms": algs,
            "comparison": comparison,
            "wall_clock_seconds": self.wall_clock,
        }


def load_dataset(cfg: dict[str, Any]) -> Dataset:
    if cfg["data"] is not None:
        return load_csv(cfg["data"])
    return synth_generate(cfg["synth_n"], cfg["synth_d"], cfg["synth_seed"])


def cmd_run(cfg: dict[str, Any]) -> ResultBundle:
    start = time.perf_counter()
    dataset = load_dataset(cfg)
    scenario = Scenario(cfg["scenario"], cfg["alpha"], cfg["beta"], cfg["holdout_fraction"])
    base = FederationConfig(cfg["clients"], cfg["fraction"], cfg["epochs"], cfg["batch_size"],
                            cfg["rounds"], ALGORITHMS[0], cfg["seed"], cfg["hidden"],
                            eta=cfg["learning_rate"])
    executor = ProcessPoolExecutor(cfg["jobs"]) if cfg["jobs"] > 1 else None
    try:
        cv = cross_validate(base, dataset, cfg["clients"], cfg["folds"], cfg["repetitions"],
                            scenario, cfg["algorithms"], cfg["paired"], executor)
    finally:
        if executor is not None:
            executor.shutdown()
    bundle = ResultBundle(cfg, cv, dataset, time.perf_counter() - start)

    out = Path(cfg["out"])
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        write_bundle(bundle, tmp)
        if out.exists():
            shutil.rmtree(out)
        tmp.rename(out)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return bundle


def write_bundle(bundle: ResultBundle, directory: Path) -> None:
    curves = directory / "curves"
    curves.mkdir()
    for run in bundle.cv.runs:
        raw = run.curve
        name = f"{run.algorithm}_rep{run.repetition}_fold{run.fold}.csv"
        lines = ["round,auc_raw,auc_monotone"]
        lines += [f"{p.round},{p.auc!r},{q.auc!r}" for p, q in zip(raw, monotone_max(raw))]
        (curves / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
    (directory / "config.resolved").write_text(render_config(bundle.config), encoding="utf-8")
    payload = json.dumps(bundle.to_json(), indent=2, sort_keys=True)
    (directory / "results.json").write_text(payload + "\n", encoding="utf-8")


def cmd_synth(n: int, d: int, seed: int, out_path) -> Path:
    out_path = Path(out_path)
    write_csv(synth_generate(n, d, seed), out_path)
    return out_path


def cmd_inspect(csv_path, stream=None) -> Dataset:
    stream = stream or sys.stdout
    ds = load_csv(csv_path)
    n_pos = int(ds.labels.sum())
    print(f"examples     {len(ds)}", file=stream)
    print(f"features     {ds.n_features}", file=stream)
    if ds.ids is not None:
        print(f"SUBJECT_ID   {len(ds.ids)} ids, range {ds.ids.min()}..{ds.ids.max()}", file=stream)
    if ds.has_covariates:
        for name, col in (("GENDER", ds.gender), ("AGE_GROUP", ds.age_group)):
            ones = int(col.sum())
            print(f"{name:<12} 0/1 counts {len(ds) - ones}/{ones}", file=stream)
    print(f"MORTALITY    0/1 counts {len(ds) - n_pos}/{n_pos}", file=stream)
    print(f"DRUGS        {ds.n_features} dimensions, density {ds.features.mean():.4f}", file=stream)
    return ds


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="loadaboost", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="cross-validate federated algorithms")
    run.add_argument("--config", help="key = value config file; flags override it")
    for key, (_, default, help_text) in KEYS.items():
        run.add_argument(f"--{key.replace('_', '-')}", dest=key, default=None,
                         help=f"{help_text} (default: {_render(default)})")

    synth = sub.add_parser("synth", help="write a synthetic dataset as CSV")
    synth.add_argument("--n", type=int, default=9000)
    synth.add_argument("--d", type=int, default=100)
    synth.add_argument("--seed", type=int, default=1)
    synth.add_argument("--out", required=True)

    inspect = sub.add_parser("inspect", help="summarise a dataset CSV")
    inspect.add_argument("csv")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            raw = read_config_file(args.config) if args.config else {}
            raw.update({k: getattr(args, k) for k in KEYS if getattr(args, k) is not None})
            bundle = cmd_run(resolve(raw))
            print(f"wrote {bundle.config['out']}")
            for name, res in bundle.cv.results.items():
                print(f"{name:<11} AUC {res.mean_auc:.4f} +- {res.std_auc:.4f}  "
                      f"average epochs {res.average_epochs:.1f}")
            if bundle.cv.comparison is not None:
                print(f"wilcoxon p = {bundle.cv.comparison.p_value:.4g}")
        elif args.command == "synth":
            if args.n < 1 or args.d < 1:
                raise ConfigError("--n and --d must be >= 1")
            print(f"wrote {cmd_synth(args.n, args.d, args.seed, args.out)}")
        else:
            cmd_inspect(args.csv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except InvariantError as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    return 0


if __name__ == "__main__":
    sys.exit(main())
