"""Experiment grids over training configurations.

Each kind expands a base config into cells that differ only in the grid
variable, trains every cell once per seed and writes

* ``<out>/<kind>.csv``: one row per (dataset, seed, cell);
* ``<out>/<kind>_summary.csv``: mean and standard deviation over seeds per cell;
* ``<out>/<kind>_plot.csv``: per-iteration traces ``cell,iteration,metric,value``.
"""

from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import corpus as cp
from .autodiff import Rng
from .config import TrainConfig
from .metrics import MetricsReport
from .trainer import adversarial_train, synth_from_config

KINDS = (
    "ablation-score", "behavioral-combos", "regularization-convergence",
    "supervision-sweep", "cross-dataset", "generated-vs-human-only",
)
METRICS = ("ap", "auc", "accuracy")
CONVERGENCE_AUC = 0.85
SUPERVISION_LEVELS = (0.1, 0.3, 0.5, 0.7)
SAMPLE_FRACTIONS = (0.25, 0.5, 0.75, 1.0)


class ExperimentError(ValueError):
    pass


@dataclass
class Cell:
    name: str
    params: dict
    changes: dict
    sample_fraction: float = 1.0


def _flag(v: bool) -> str:
    return "+" if v else "-"


def grid(kind: str) -> list[Cell]:
    """The cells of an experiment kind, in report order."""
    if kind == "ablation-score":
        cells = []
        for g in (False, True):
            for d in (False, True):
                # without the score in G there is nothing for the regulariser to enforce
                cells.append(Cell(f"G{_flag(g)}score/D{_flag(d)}score", {"score_in_g": g, "score_in_d": d},
                                  {"score_in_g": g, "regularizer_on": g, "score_in_d": d}))
        return cells
    if kind == "behavioral-combos":
        cells = [Cell("WE", {"features": "WE"}, {"score_in_d": False, "features": ""}),
                 Cell("WE+score", {"features": "WE+score"}, {"score_in_d": True, "features": ""})]
        for f in cp.FEATURE_NAMES:
            label = f"WE+score+{f.upper()}"
            cells.append(Cell(label, {"features": label}, {"score_in_d": True, "features": f}))
        return cells
    if kind == "regularization-convergence":
        return [Cell(f"regularizer{_flag(on)}", {"regularizer_on": on}, {"regularizer_on": on})
                for on in (False, True)]
    if kind == "supervision-sweep":
        return [Cell(f"supervision={s}", {"supervision": s}, {"supervision": s}) for s in SUPERVISION_LEVELS]
    if kind == "cross-dataset":
        return [Cell(f"fraction={f}", {"sample_fraction": f}, {}, f) for f in SAMPLE_FRACTIONS]
    if kind == "generated-vs-human-only":
        return [Cell("human-only", {"augment": False}, {"augment": False}),
                Cell("human+generated", {"augment": True}, {"augment": True})]
    raise ExperimentError(f"unknown experiment kind {kind!r}; choose from {', '.join(KINDS)}")


def subsample(corpus: Sequence[cp.Review], fraction: float, seed: int) -> list[cp.Review]:
    """Label-stratified subsample keeping corpus order."""
    if fraction >= 1.0:
        return list(corpus)
    keep: set[int] = set()
    rng = Rng(seed, "subsample")
    for label in cp.LABELS:
        idx = [i for i, r in enumerate(corpus) if r.label == label]
        if not idx:
            continue
        k = max(2, int(round(fraction * len(idx))))
        keep.update(idx[j] for j in rng.permutation(len(idx))[:k])
    return [r for i, r in enumerate(corpus) if i in keep]


def iterations_to_converge(reports: Sequence[MetricsReport], threshold: float = CONVERGENCE_AUC) -> int | None:
    """First reported iteration whose AUC reaches ``threshold``."""
    for r in reports:
        if r.auc >= threshold:
            return r.iteration
    return None


@dataclass
class Dataset:
    name: str
    path: str = ""  # empty: synthetic corpus from the base config

    def load(self, cfg: TrainConfig) -> list[cp.Review]:
        return list(cp.load_corpus(self.path, cfg.T)) if self.path else synth_from_config(cfg)


@dataclass
class ExperimentReport:
    kind: str
    rows: list[dict] = field(default_factory=list)
    traces: list[dict] = field(default_factory=list)

    @property
    def param_columns(self) -> list[str]:
        cols: list[str] = []
        for row in self.rows:
            for k in row["params"]:
                if k not in cols:
                    cols.append(k)
        return cols

    def header(self) -> list[str]:
        return ["experiment", "dataset", "seed", "cell", *self.param_columns, *METRICS, "iterations_to_converge"]

    def table(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for row in self.rows:
            conv = row["iterations_to_converge"]
            w.writerow([self.kind, row["dataset"], row["seed"], row["cell"],
                        *(row["params"].get(k, "") for k in self.param_columns),
                        *(_fmt(row[m]) for m in METRICS), "" if conv is None else conv])
        return buf.getvalue()

    def summary(self) -> str:
        """Mean and standard deviation (population, over seeds) per dataset and cell."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["experiment", "dataset", "cell", "n_seeds",
                    *(f"{m}_{s}" for m in METRICS for s in ("mean", "std_over_seeds"))])
        groups: dict[tuple[str, str], list[dict]] = {}
        for row in self.rows:
            groups.setdefault((row["dataset"], row["cell"]), []).append(row)
        for (dataset, cell), rows in groups.items():
            stats = []
            for m in METRICS:
                vals = np.array([r[m] for r in rows])
                stats += [_fmt(vals.mean()), _fmt(vals.std())]
            w.writerow([self.kind, dataset, cell, len(rows), *stats])
        return buf.getvalue()

    def plot_data(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["cell", "iteration", "metric", "value"])
        for t in self.traces:
            w.writerow([t["cell"], t["iteration"], t["metric"], _fmt(t["value"])])
        return buf.getvalue()

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        files = {f"{self.kind}.csv": self.table(), f"{self.kind}_summary.csv": self.summary(),
                 f"{self.kind}_plot.csv": self.plot_data()}
        paths = []
        for name, text in files.items():
            (out / name).write_text(text, encoding="utf-8")
            paths.append(out / name)
        return paths


def _fmt(x: float) -> str:
    return repr(float(x))


def _run_cell(job: tuple) -> list[MetricsReport]:
    train, cfg, ds, fraction = job
    corpus = subsample(ds.load(cfg), fraction, cfg.seed)
    return train(cfg, corpus).reports


def run_experiment(kind: str, base: TrainConfig, seeds: Sequence[int] = (0,),
                   datasets: Sequence[Dataset] | None = None, out_dir: str | Path | None = None,
                   train: Callable = adversarial_train, workers: int = 1) -> ExperimentReport:
    """Run every cell of ``kind`` for every seed and dataset.

    ``train`` is the training entry point (``adversarial_train`` signature);
    tests substitute a cheaper one. Cells are independent, so ``workers > 1``
    runs them in separate processes without changing any result.
    """
    cells = grid(kind)
    base.validate()
    datasets = list(datasets or [Dataset("synthetic")])
    plan = [(ds, seed, cell, base.with_(seed=seed, **cell.changes).validate())
            for ds in datasets for seed in seeds for cell in cells]
    jobs = [(train, cfg, ds, cell.sample_fraction) for ds, _, cell, cfg in plan]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]
    report = ExperimentReport(kind)
    for (ds, seed, cell, _), reports in zip(plan, results):
        final = reports[-1]
        report.rows.append({
            "dataset": ds.name, "seed": seed, "cell": cell.name, "params": cell.params,
            "ap": final.ap, "auc": final.auc, "accuracy": final.accuracy,
            "iterations_to_converge": iterations_to_converge(reports),
        })
        for r in reports:
            for m in METRICS:
                report.traces.append({"cell": f"{ds.name}/{cell.name}/seed={seed}", "iteration": r.iteration,
                                      "metric": m, "value": getattr(r, m)})
    if out_dir is not None:
        report.write(out_dir)
    return report
