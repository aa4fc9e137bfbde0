"""Experiment specs, sweeps over runs, CSV/manifest output and SVG plots.

An experiment spec is a YAML (or JSON) mapping::

    name: ls-demo
    problem: {kind: least_squares, kappa: 80, rng_seed: 0}
    topology: {n: 30, S: 6, radius_range: [0.5, 3.5], seed: 0}
    algorithms:
      SD-GT: {gamma: 0.012, T: 200}
      SD-FedAvg: {gamma: 0.012, T: 200}
    sweep: {K: [40], sample_rate: [0.4, 1.0], seed: [0, 1]}
    output_dir: out
    diagnostics: true

Every combination of algorithm and sweep values is one run. The ``seed``
axis seeds the sampling, batching and init streams of that run; the problem
and topology seeds are fixed by the spec. Keys of an algorithm block are
:class:`~sdgt.algorithms.RunConfig` fields.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from functools import lru_cache
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .algorithms import ALGORITHMS, DivergenceError, RunConfig, Seeds, run
from .diagnostics import CSV_COLUMNS, records_to_csv
from .problems import make_problem
from .topology import build_topology

logger = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "SDGT_OUTPUT_DIR"
ENV_THREADS = "SDGT_THREADS"
SWEEP_AXES = ("K", "sample_rate", "seed")
_RUN_FIELDS = {f.name for f in fields(RunConfig)} - {"algorithm", "seeds"}


class SpecError(ValueError):
    pass


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


@dataclass
class ExperimentSpec:
    name: str
    problem: dict
    topology: dict
    algorithms: dict
    sweep: dict
    output_dir: str = "results"
    diagnostics: bool = True

    def __post_init__(self):
        self.validate()

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentSpec":
        if not isinstance(doc, dict):
            raise SpecError("experiment spec must be a mapping")
        missing = [k for k in ("name", "problem", "topology", "algorithms", "sweep") if k not in doc]
        if missing:
            raise SpecError(f"experiment spec is missing {missing}")
        unknown = set(doc) - {"name", "problem", "topology", "algorithms", "sweep",
                              "output_dir", "diagnostics"}
        if unknown:
            raise SpecError(f"unknown spec keys {sorted(unknown)}")
        algos = doc["algorithms"]
        if isinstance(algos, list):
            algos = {a: {} for a in algos}
        return cls(
            name=str(doc["name"]),
            problem=dict(doc["problem"]),
            topology=dict(doc["topology"]),
            algorithms={k: dict(v or {}) for k, v in algos.items()},
            sweep={k: list(v) if isinstance(v, (list, tuple)) else [v] for k, v in doc["sweep"].items()},
            output_dir=str(doc.get("output_dir", "results")),
            diagnostics=bool(doc.get("diagnostics", True)),
        )

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def to_dict(self) -> dict:
        return {
            "name": self.name, "problem": self.problem, "topology": self.topology,
            "algorithms": self.algorithms, "sweep": self.sweep,
            "output_dir": self.output_dir, "diagnostics": self.diagnostics,
        }

    def sha256(self) -> str:
        # output_dir is where results go, not what they are
        doc = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        return hashlib.sha256(canonical_json(doc).encode()).hexdigest()

    def validate(self) -> None:
        if not self.name or "/" in self.name:
            raise SpecError(f"invalid experiment name {self.name!r}")
        if "kind" not in self.problem:
            raise SpecError("problem spec needs a 'kind'")
        if "rng_seed" not in self.problem:
            raise SpecError("problem spec needs 'rng_seed'")
        for key in ("n", "S", "seed"):
            if key not in self.topology:
                raise SpecError(f"topology spec needs {key!r}")
        n, S = int(self.topology["n"]), int(self.topology["S"])
        if S < 1 or n < S:
            raise SpecError(f"need 1 <= S <= n, got n={n}, S={S}")
        if self.topology.get("sizes") is None and n % S:
            raise SpecError(f"equal-size subnets need n divisible by S (n={n}, S={S})")
        if int(self.problem.get("n", n)) != n:
            raise SpecError(f"problem has n={self.problem['n']} clients but topology has n={n}")
        self.problem.setdefault("n", n)
        if not self.algorithms:
            raise SpecError("no algorithms listed")
        for algo, overrides in self.algorithms.items():
            if algo not in ALGORITHMS:
                raise SpecError(f"unknown algorithm {algo!r}")
            bad = set(overrides) - _RUN_FIELDS
            if bad:
                raise SpecError(f"{algo}: unknown run settings {sorted(bad)}")
        if not self.sweep:
            raise SpecError("sweep axes are empty")
        for axis, values in self.sweep.items():
            if axis not in SWEEP_AXES:
                raise SpecError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
            if not values:
                raise SpecError(f"sweep axis {axis!r} is empty")
        for seed in self.sweep.get("seed", [0]):
            if int(seed) != seed or seed < 0:
                raise SpecError(f"run seeds must be non-negative integers, got {seed!r}")
        # fail early on bad combinations rather than mid-sweep
        for job in self.jobs():
            job.config()

    def jobs(self) -> list["RunJob"]:
        out = []
        for algo, overrides in self.algorithms.items():
            Ks = self.sweep.get("K", [overrides.get("K", RunConfig.K)])
            rates = self.sweep.get("sample_rate", [overrides.get("sample_rate") or 1.0])
            for K, rate, seed in itertools.product(Ks, rates, self.sweep.get("seed", [0])):
                out.append(RunJob(self.name, algo, int(K), float(rate), int(seed), overrides,
                                  self.diagnostics))
        return out


@dataclass(frozen=True)
class RunJob:
    experiment: str
    algorithm: str
    K: int
    sample_rate: float
    seed: int
    overrides: dict = field(hash=False, compare=False)
    diagnostics: bool = True

    @property
    def filename(self) -> str:
        return f"{self.algorithm}_K{self.K}_sr{self.sample_rate:g}_seed{self.seed}.csv"

    def config(self) -> RunConfig:
        settings = {k: v for k, v in self.overrides.items() if k not in ("K", "sample_rate", "h")}
        settings.setdefault("diagnostics", self.diagnostics)
        settings["record_wall_clock"] = False
        try:
            return RunConfig(algorithm=self.algorithm, K=self.K, sample_rate=self.sample_rate,
                             seeds=Seeds(sampling=self.seed, batching=self.seed, init=self.seed),
                             **settings)
        except (TypeError, ValueError) as exc:
            raise SpecError(f"{self.filename}: {exc}") from exc


def _publish(tmp: str, path: Path) -> None:
    # mkstemp files are private; give the result the usual umask permissions
    mask = os.umask(0)
    os.umask(mask)
    os.chmod(tmp, 0o666 & ~mask)
    os.replace(tmp, path)


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        _publish(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


@lru_cache(maxsize=4)
def _setup(problem_json: str, topology_json: str):
    topo = json.loads(topology_json)
    topology = build_topology(
        int(topo["n"]), int(topo["S"]), int(topo["seed"]),
        radius_range=tuple(topo.get("radius_range", (0.5, 3.5))),
        sizes=topo.get("sizes"),
    )
    return make_problem(json.loads(problem_json)), topology


def _execute(args) -> dict:
    problem_json, topology_json, job, out_dir = args
    problem, topology = _setup(problem_json, topology_json)
    config = job.config()
    diverged = False
    try:
        records = run(config, topology, problem).records
    except DivergenceError as exc:
        logger.warning("%s: %s", job.filename, exc)
        records, diverged = list(exc.records), True
    text = records_to_csv(records)
    _atomic_write(Path(out_dir) / job.filename, text)
    final = {c: getattr(records[-1], c) for c in CSV_COLUMNS} if records else None
    return {
        "file": job.filename, "algorithm": job.algorithm, "K": job.K,
        "sample_rate": job.sample_rate, "seed": job.seed, "rounds": len(records),
        "diverged": diverged, "final": final,
        "csv_sha256": hashlib.sha256(text.encode()).hexdigest(),
    }


def default_workers() -> int:
    value = os.environ.get(ENV_THREADS)
    if value:
        return max(1, int(value))
    return 1


def run_experiment(spec: ExperimentSpec, output_dir=None, workers: int = 1) -> Path:
    """Run every job of ``spec`` and write CSVs plus ``manifest.json``.

    Files land in ``<output_dir>/<name>/``. ``output_dir`` defaults to
    ``$SDGT_OUTPUT_DIR`` and then to the spec's own ``output_dir``. Runs are
    independent, so ``workers > 1`` executes them in separate processes;
    the outputs do not depend on the worker count or completion order.
    Returns the manifest path.
    """
    base = Path(output_dir or os.environ.get(ENV_OUTPUT_DIR) or spec.output_dir)
    out = base / spec.name
    out.mkdir(parents=True, exist_ok=True)
    problem_json = canonical_json(spec.problem)
    topology_json = canonical_json(spec.topology)
    jobs = spec.jobs()
    args = [(problem_json, topology_json, job, str(out)) for job in jobs]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            results = list(pool.map(_execute, args))
    else:
        results = [_execute(a) for a in args]
    results.sort(key=lambda r: r["file"])
    manifest = {
        "experiment": spec.name,
        "spec_sha256": spec.sha256(),
        "code_version": __version__,
        "spec": spec.to_dict(),
        "runs": results,
    }
    path = out / "manifest.json"
    _atomic_write(path, json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return path


# ----------------------------------------------------------------------------
# plots

class PlotError(ValueError):
    pass


def read_columns(path) -> dict[str, np.ndarray]:
    text = Path(path).read_text()
    rows = list(csv.reader(text.splitlines()))
    if not rows:
        raise PlotError(f"{path}: empty CSV")
    header, body = rows[0], [r for r in rows[1:] if r]
    if not body:
        raise PlotError(f"{path}: CSV has no data rows")
    return {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header)}


def emit_plot(csv_files, output, metric: str = "dist_to_opt_sq", x: str = "t",
              log_y: bool = True, labels=None, title: str | None = None) -> Path:
    """Draw one polyline per CSV and write a standalone SVG to ``output``.

    ``x`` is ``t`` (global round) or ``comm_cost_cum``. Every CSV must
    carry both columns; nothing is written if any input is unusable.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    csv_files = [Path(p) for p in csv_files]
    if not csv_files:
        raise PlotError("no CSV files given")
    labels = list(labels) if labels else [p.stem for p in csv_files]
    if len(labels) != len(csv_files):
        raise PlotError("need one label per CSV file")
    series = []
    for path in csv_files:
        cols = read_columns(path)
        for name in (x, metric):
            if name not in cols:
                raise PlotError(f"{path}: missing column {name!r}")
        series.append((cols[x], cols[metric]))

    fig, ax = plt.subplots(figsize=(6.4, 4.2))
    for (xs, ys), label in zip(series, labels):
        if log_y:
            ys = np.where(ys > 0, ys, np.nan)
        ax.plot(xs, ys, label=label, linewidth=1.2)
    if log_y:
        ax.set_yscale("log")
    ax.set_xlabel("global round" if x == "t" else "cumulative communication cost")
    ax.set_ylabel(metric)
    if title:
        ax.set_title(title)
    ax.legend(fontsize="small")
    fig.tight_layout()

    output = Path(output)
    output.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=output.parent, prefix=f".{output.name}.", suffix=".svg")
    os.close(fd)
    try:
        with matplotlib.rc_context({"svg.hashsalt": "sdgt", "svg.fonttype": "none"}):
            fig.savefig(tmp, format="svg", metadata={"Date": None})
        _publish(tmp, output)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise
    finally:
        plt.close(fig)
    return output


def plot_from_spec(doc: dict, base_dir=None) -> Path:
    """Render a plot spec: ``{csv: [...], output: ..., metric, x, log_y, labels, title}``.

    Relative paths resolve against ``base_dir``; CSV entries may be globs.
    """
    base = Path(base_dir or ".")
    if "csv" not in doc or "output" not in doc:
        raise PlotError("plot spec needs 'csv' and 'output'")
    entries = doc["csv"] if isinstance(doc["csv"], list) else [doc["csv"]]
    files = []
    for entry in entries:
        matches = sorted(base.glob(entry)) if any(c in entry for c in "*?[") else [base / entry]
        if not matches:
            raise PlotError(f"no CSV matches {entry!r}")
        files.extend(matches)
    return emit_plot(files, base / doc["output"], metric=doc.get("metric", "dist_to_opt_sq"),
                     x=doc.get("x", "t"), log_y=bool(doc.get("log_y", True)),
                     labels=doc.get("labels"), title=doc.get("title"))
