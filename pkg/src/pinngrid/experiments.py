"""Metrics, the three evaluation experiments and report writing.

Every model here is anything with ``predict(inputs) -> targets`` where an
input row is ``state ++ action`` and a target row is the predicted part of the
next state (loads excluded).
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import make_policy, rollout
from .grid import GridCase, build_admittance
from .pinn import PinnModel
from .powerflow import PfConfig, transition_arrays

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class MetricSet:
    """Pooled scores; ``r2`` is ``None`` when the targets have zero variance."""

    mse: float
    mae: float
    r2: float | None

    def __post_init__(self):
        if self.mse < 0 or self.mae < 0:
            raise ValueError("mse and mae must be non-negative")
        if self.r2 is not None and self.r2 > 1.0 + 1e-12:
            raise ValueError("r2 cannot exceed 1")


def metrics(pred, target) -> MetricSet:
    """MSE and MAE over every sample and output; R² pooled across outputs."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    if pred.shape != target.shape or pred.size == 0:
        raise ValueError(f"prediction {pred.shape} and target {target.shape} must match and be non-empty")
    err = pred - target
    sst = float(((target - target.mean(axis=0)) ** 2).sum())
    r2 = 1.0 - float((err ** 2).sum()) / sst if sst > 0 else None
    return MetricSet(float(np.mean(err ** 2)), float(np.mean(np.abs(err))), r2)


def per_output_r2(pred, target) -> np.ndarray:
    """R² per output column, ``nan`` where a column is constant."""
    pred = np.asarray(pred, dtype=float)
    target = np.asarray(target, dtype=float)
    sst = ((target - target.mean(axis=0)) ** 2).sum(axis=0)
    sse = ((pred - target) ** 2).sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(sst > 0, 1.0 - sse / sst, np.nan)


def average(sets) -> MetricSet:
    sets = list(sets)
    r2 = None if any(m.r2 is None for m in sets) else float(np.mean([m.r2 for m in sets]))
    return MetricSet(float(np.mean([m.mse for m in sets])), float(np.mean([m.mae for m in sets])), r2)


# --------------------------------------------------------------------------- model adapters

class PinnRegressor:
    """Adapts a :class:`PinnModel` to the ``predict(inputs)`` protocol."""

    def __init__(self, model: PinnModel):
        self.model = model

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lay = self.model.case.layout
        sd = lay.state_dim
        return self.model.predict_arrays(X[:, :sd], X[:, sd:])[:, :lay.target_dim]


class OracleModel:
    """The power-flow transition itself, for harness sanity checks."""

    def __init__(self, case: GridCase, cfg: PfConfig | None = None):
        self.case, self.cfg = case, cfg
        self._Y = build_admittance(case)

    def predict(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=float))
        lay = self.case.layout
        sd = lay.state_dim
        return np.array([transition_arrays(self.case, x[:sd], x[sd:], self.cfg, Y=self._Y)[0][:lay.target_dim]
                         for x in X])


def _check_models(models: dict):
    if not models:
        raise ValueError("no models to evaluate")
    for name, m in models.items():
        if m is None or not callable(getattr(m, "predict", None)):
            raise ValueError(f"model {name!r} is not trained (no predict method)")


# --------------------------------------------------------------------------- reports

@dataclass
class ExperimentReport:
    """Metric grid keyed by (model, dataset), per-model averages and optional series."""

    experiment: str
    grid: dict = field(default_factory=dict)
    averages: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    truncated: dict = field(default_factory=dict)

    @property
    def models(self):
        return list(dict.fromkeys(m for m, _ in self.grid))

    @property
    def datasets(self):
        return list(dict.fromkeys(d for _, d in self.grid))

    def metric(self, model, dataset) -> MetricSet:
        return self.grid[(model, dataset)]

    def finalize(self):
        for m in self.models:
            self.averages[m] = average(v for (mm, _), v in self.grid.items() if mm == m)
        return self


def run_interpolation(models: dict, bins) -> ExperimentReport:
    """Each generative-trained model scored on every bin test set."""
    _check_models(models)
    rep = ExperimentReport("interpolation")
    for name, model in models.items():
        for ds in bins:
            pred = model.predict(ds.inputs)
            rep.grid[(name, ds.name)] = metrics(pred, ds.targets)
            log.debug("%s on %s: per-output r2 %s", name, ds.name, np.round(per_output_r2(pred, ds.targets), 4))
    return rep.finalize()


def run_cross_validation(models: dict, test_sets: dict) -> ExperimentReport:
    """Every model (one entry per training regime) on every test set."""
    _check_models(models)
    rep = ExperimentReport("cross_validation")
    for name, model in models.items():
        for ds_name, ds in test_sets.items():
            rep.grid[(name, ds_name)] = metrics(model.predict(ds.inputs), ds.targets)
    return rep.finalize()


def run_episodic(models: dict, case: GridCase, policies=("expert", "random"), horizon: int = 96, seed: int = 0,
                 noise: float = 0.0, mode: str = "teacher", cfg: PfConfig | None = None) -> ExperimentReport:
    """Per-step MAE along one oracle episode per policy.

    ``mode="teacher"`` feeds the true state at every step. ``mode="free"``
    feeds each model its own previous prediction (loads still follow the
    profile) and scores it against the oracle trajectory.
    """
    _check_models(models)
    if mode not in ("teacher", "free"):
        raise ValueError("mode must be 'teacher' or 'free'")
    rep = ExperimentReport("episodic" if mode == "teacher" else "episodic_free")
    lay = case.layout
    td = lay.target_dim
    for k, policy in enumerate(policies):
        rng = np.random.default_rng([seed, k])
        S, A, N = rollout(case, make_policy(case, policy, rng), horizon, noise, rng, cfg)
        if len(S) < horizon:
            rep.truncated[policy] = len(S)
        for name, model in models.items():
            if mode == "teacher":
                pred = model.predict(np.hstack([S, A]))
            else:
                pred = _free_run(model, case, S, A)
            rep.series[(name, policy)] = np.mean(np.abs(pred - N[:, :td]), axis=1)
            rep.grid[(name, policy)] = metrics(pred, N[:, :td])
    return rep.finalize()


def _free_run(model, case, S, A):
    lay = case.layout
    td = lay.target_dim
    s = S[0].copy()
    out = np.empty((len(S), td))
    for t in range(len(S)):
        out[t] = model.predict(np.hstack([s, A[t]])[None, :])[0]
        if t + 1 < len(S):
            s = S[t + 1].copy()
            s[:td] = out[t]
    return out


def _fmt(x, r2=False):
    if x is None:
        return "undefined"
    return f"{x:.4f}" if r2 else f"{x:.4e}"


def write_report(rep: ExperimentReport, out_dir) -> list:
    """``<experiment>.csv`` and ``.md``; episodic series go to ``<experiment>_series.csv``.

    Both files carry the same rounded numbers: MSE and MAE to four decimals
    in scientific notation, R² to four fixed decimals.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    rows = [(m, d, v) for (m, d), v in rep.grid.items()] + [(m, "average", v) for m, v in rep.averages.items()]
    p = out / f"{rep.experiment}.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model", "dataset", "mse", "mae", "r2"])
        for m, d, v in rows:
            w.writerow([m, d, _fmt(v.mse), _fmt(v.mae), _fmt(v.r2, r2=True)])
    paths.append(p)

    lines = [f"# {rep.experiment}", "", "| model | dataset | MSE | MAE | R² |", "|---|---|---|---|---|"]
    for m, d, v in rows:
        lines.append(f"| {m} | {d} | {_fmt(v.mse)} | {_fmt(v.mae)} | {_fmt(v.r2, r2=True)} |")
    if rep.series:
        lines += ["", "| model | episode | mean step MAE | std step MAE |", "|---|---|---|---|"]
        for (m, pol), s in rep.series.items():
            lines.append(f"| {m} | {pol} | {_fmt(float(np.mean(s)))} | {_fmt(float(np.std(s)))} |")
    for pol, n in rep.truncated.items():
        lines.append(f"\n{pol} episode truncated after {n} steps (power flow diverged).")
    p = out / f"{rep.experiment}.md"
    p.write_text("\n".join(lines) + "\n")
    paths.append(p)

    if rep.series:
        p = out / f"{rep.experiment}_series.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "model", "policy", "mae"])
            for (m, pol), s in rep.series.items():
                for t, v in enumerate(s):
                    w.writerow([t, m, pol, _fmt(float(v))])
        paths.append(p)
    return paths


def read_report_csv(path) -> dict:
    """``{(model, dataset): MetricSet}`` from a report CSV."""
    out = {}
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            r2 = None if row["r2"] == "undefined" else float(row["r2"])
            out[(row["model"], row["dataset"])] = MetricSet(float(row["mse"]), float(row["mae"]), r2)
    return out
