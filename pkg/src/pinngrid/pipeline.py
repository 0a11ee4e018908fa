"""End-to-end orchestration: data generation, training, evaluation and gates.

Output layout under ``RunConfig.out``::

    data/      11 dataset CSVs with manifests
    models/    baseline JSON (gzip), PINN checkpoint and training log
    reports/   interpolation, cross_validation and episodic CSV + markdown
    acceptance.json   gate verdicts (``check`` runs only)
"""
from __future__ import annotations

import csv
import gzip
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .baselines import ForestConfig, GbtConfig, fit_forest, fit_gbt, fit_linear, model_from_dict
from .datasets import (
    Dataset,
    generate_agent_dataset,
    generate_bin_dataset,
    generate_generative,
    merge,
    partition_bins,
    binned_variables,
    read_dataset,
    rollout,
    ExpertPolicy,
    write_dataset,
)
from .experiments import (
    ExperimentReport,
    PinnRegressor,
    run_cross_validation,
    run_episodic,
    run_interpolation,
    write_report,
)
from .grid import GridCase, default_state_bounds, load_case, load_default_case
from .nn import TrainConfig
from .pinn import PhysicsLossWeights, PinnConfig, PinnModel, feasibility_rate, train_pinn

log = logging.getLogger(__name__)

BASELINES = ("lr", "rf", "gbt")
MODEL_LABELS = {"lr": "LR", "rf": "RF", "gbt": "GBT", "pinn": "PINN"}
POLICIES = ("random", "expert")


@dataclass(frozen=True)
class DataSizes:
    generative: int = 25_000
    generative_test_frac: float = 0.2
    bins: int = 8
    per_bin: int = 2_500
    episodes: int = 20
    horizon: int = 96
    agent_noise: float = 0.05
    agent_test_frac: float = 0.2


@dataclass(frozen=True)
class RunConfig:
    """Everything a run depends on; JSON round-trippable."""

    case: str | None = None
    seed: int = 0
    out: str = "runs/default"
    data: DataSizes = DataSizes()
    ridge: float = 1e-10
    forest: ForestConfig = ForestConfig(trees=100, max_depth=12, min_leaf=1, feature_frac=0.7)
    gbt: GbtConfig = GbtConfig(rounds=100, shrinkage=0.1, max_depth=6)
    pinn: PinnConfig = PinnConfig(inputs="physics", soc_squash="hard")
    train: TrainConfig = TrainConfig(max_steps=20_000, batch_size=256, lr=2e-3, check_every=100,
                                     patience=40, lr_patience=5, min_lr=1e-5)
    weights: PhysicsLossWeights = PhysicsLossWeights(balance=300.0, flow=1.0, limits=30.0, soc=30.0)
    episode_seed: int = 7

    def to_dict(self):
        d = asdict(self)
        d["pinn"]["hidden"] = list(self.pinn.hidden)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = cls()
        kw = {}
        for f in fields(cls):
            if f.name not in doc:
                continue
            cur = getattr(base, f.name)
            val = doc[f.name]
            if hasattr(cur, "__dataclass_fields__") and isinstance(val, dict):
                bad = set(val) - set(cur.__dataclass_fields__)
                if bad:
                    raise ValueError(f"unknown keys in {f.name!r}: {sorted(bad)}")
                if f.name == "pinn" and "hidden" in val:
                    val = dict(val, hidden=tuple(val["hidden"]))
                val = replace(cur, **val)
            kw[f.name] = val
        return cls(**kw)

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"config file not found: {path}")
        return cls.from_dict(json.loads(path.read_text()))

    def load_case(self) -> GridCase:
        return load_default_case() if self.case is None else load_case(self.case)

    def seeds(self) -> dict:
        """Per-stage seeds derived from the run seed."""
        s = self.seed
        return {"generative": s, "bins": s + 1000, "agent": s + 2000, "split": s + 3000,
                "forest": s + 4000, "gbt": s + 5000, "pinn": s, "episodes": s + self.episode_seed}


# --------------------------------------------------------------------------- data

def _paths(cfg: RunConfig):
    out = Path(cfg.out)
    return {"data": out / "data", "models": out / "models", "reports": out / "reports"}


def dataset_names(cfg: RunConfig):
    return ["generative"] + [f"bin{i + 1}" for i in range(cfg.data.bins)] + [f"agent-{p}" for p in POLICIES]


def build_datasets(cfg: RunConfig, case: GridCase, jobs: int = 1) -> dict:
    seeds = cfg.seeds()
    d = cfg.data
    out = {"generative": generate_generative(case, d.generative, seeds["generative"], jobs=jobs)}
    part = partition_bins(default_state_bounds(case), d.bins, binned_variables(case))
    for i in range(d.bins):
        out[f"bin{i + 1}"] = generate_bin_dataset(case, part, i, d.per_bin, seeds["bins"] + i, jobs=jobs)
    for k, pol in enumerate(POLICIES):
        out[f"agent-{pol}"] = generate_agent_dataset(case, pol, d.episodes, d.horizon, seeds["agent"] + k,
                                                     d.agent_noise)
    return out


def cmd_gen_data(cfg: RunConfig, jobs: int = 1) -> dict:
    case = cfg.load_case()
    dsets = build_datasets(cfg, case, jobs)
    folder = _paths(cfg)["data"]
    for name, ds in dsets.items():
        write_dataset(ds, folder / f"{name}.csv")
    return dsets


def load_datasets(cfg: RunConfig, case: GridCase, names=None) -> dict:
    folder = _paths(cfg)["data"]
    out = {}
    for name in names or dataset_names(cfg):
        path = folder / f"{name}.csv"
        if not path.exists():
            raise FileNotFoundError(f"dataset not found: {path} (run gen-data first)")
        out[name] = read_dataset(path, case)
    return out


def split_generative(cfg: RunConfig, ds: Dataset):
    """Random train/test split of the generative set."""
    rng = np.random.default_rng(cfg.seeds()["split"])
    idx = rng.permutation(len(ds))
    n_test = int(round(cfg.data.generative_test_frac * len(ds)))
    return ds.subset(np.sort(idx[n_test:]), "generative-train"), ds.subset(np.sort(idx[:n_test]), "generative-test")


def split_agent(cfg: RunConfig, dsets: dict):
    """Hold out the last episodes of every policy; returns merged (train, test)."""
    train, test = [], []
    for pol in POLICIES:
        ds = dsets[f"agent-{pol}"]
        ep = ds.provenance.get("episodes", cfg.data.episodes)
        per = len(ds) // ep if len(ds) % ep == 0 else None
        n_test_ep = max(1, int(round(cfg.data.agent_test_frac * ep)))
        cut = len(ds) - n_test_ep * per if per else int(round(len(ds) * (1 - cfg.data.agent_test_frac)))
        train.append(ds.subset(np.arange(cut)))
        test.append(ds.subset(np.arange(cut, len(ds))))
    return merge(train, "agent-train"), merge(test, "agent-test")


# --------------------------------------------------------------------------- training

def fit_baseline(cfg: RunConfig, kind: str, ds: Dataset, jobs: int = 1):
    t0 = time.perf_counter()
    if kind == "lr":
        model = fit_linear(ds.inputs, ds.targets, cfg.ridge)
    elif kind == "rf":
        model = fit_forest(ds.inputs, ds.targets, replace(cfg.forest, seed=cfg.forest.seed + cfg.seeds()["forest"]),
                           jobs=jobs)
    elif kind == "gbt":
        model = fit_gbt(ds.inputs, ds.targets, replace(cfg.gbt, seed=cfg.gbt.seed + cfg.seeds()["gbt"]), jobs=jobs)
    else:
        raise ValueError(f"unknown baseline {kind!r}; choose from {BASELINES}")
    log.info("fitted %s on %s (%d samples) in %.1fs", kind, ds.name, len(ds), time.perf_counter() - t0)
    return model


def fit_pinn(cfg: RunConfig, case: GridCase):
    t0 = time.perf_counter()
    res = train_pinn(case, cfg.weights, replace(cfg.train, seed=cfg.seeds()["pinn"]),
                     replace(cfg.pinn, seed=cfg.seeds()["pinn"]))
    log.info("trained pinn for %d steps in %.1fs", res.steps, time.perf_counter() - t0)
    return res


def _pinn_extra(res) -> dict:
    return {"steps": res.steps, "stopped_early": res.stopped_early,
            "initial_monitor": res.initial_monitor, "final_monitor": res.final_monitor}


def save_baseline(model, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # level 1: a 100-tree forest is ~300 MB of JSON; level 9 costs ~10x the time for ~8% less disk
    with gzip.open(path, "wt", compresslevel=1) as fh:
        json.dump(model.to_dict(), fh)
    return path


def load_baseline(path):
    with gzip.open(path, "rt") as fh:
        doc = json.load(fh)
    if doc.get("kind") == "linear":
        from .baselines import LinearModel
        return LinearModel.from_dict(doc)
    return model_from_dict(doc)


def write_training_log(history, path) -> Path:
    keys = ["step", "lr", "monitor", "best", "balance", "flow", "limits", "soc", "total"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for row in history:
            w.writerow([row.get(k, "") for k in keys])
    return Path(path)


def cmd_train(cfg: RunConfig, model_id: str, dataset: str = "generative", jobs: int = 1) -> Path:
    """Fit one model and write its checkpoint; ``pinn`` reads no dataset."""
    case = cfg.load_case()
    models = _paths(cfg)["models"]
    if model_id == "pinn":
        res = fit_pinn(cfg, case)
        models.mkdir(parents=True, exist_ok=True)
        write_training_log(res.history, models / "pinn_log.csv")
        return res.model.save(models / "pinn.json", extra=_pinn_extra(res))
    if model_id not in BASELINES:
        raise ValueError(f"unknown model {model_id!r}")
    if dataset == "generative":
        ds = split_generative(cfg, load_datasets(cfg, case, ["generative"])["generative"])[0]
    elif dataset == "agent":
        ds = split_agent(cfg, load_datasets(cfg, case, [f"agent-{p}" for p in POLICIES]))[0]
    else:
        raise ValueError("dataset must be 'generative' or 'agent'")
    return save_baseline(fit_baseline(cfg, model_id, ds, jobs), models / f"{model_id}_{dataset}.json.gz")


# --------------------------------------------------------------------------- evaluation

@dataclass
class StudyResult:
    interpolation: ExperimentReport
    cross_validation: ExperimentReport
    episodic: ExperimentReport
    feasibility: float
    expert_soc: np.ndarray
    timings: dict = field(default_factory=dict)


def evaluate(cfg: RunConfig, case: GridCase, dsets: dict, gen_models: dict, agent_models: dict,
             pinn: PinnModel) -> StudyResult:
    """Run the three experiments; ``*_models`` map baseline kind -> fitted model."""
    bins = [dsets[f"bin{i + 1}"] for i in range(cfg.data.bins)]
    pinn_reg = PinnRegressor(pinn)
    main = {MODEL_LABELS[k]: gen_models[k] for k in BASELINES}
    main["PINN"] = pinn_reg
    interp = run_interpolation(main, bins)

    gen_test = split_generative(cfg, dsets["generative"])[1]
    agent_test = split_agent(cfg, dsets)[1]
    cv_models = {}
    for k in BASELINES:
        cv_models[f"{MODEL_LABELS[k]} (generative)"] = gen_models[k]
        cv_models[f"{MODEL_LABELS[k]} (agent)"] = agent_models[k]
    cv_models["PINN (physics)"] = pinn_reg
    cv = run_cross_validation(cv_models, {"generative": gen_test, "agent": agent_test})

    epi = run_episodic(main, case, ("expert", "random"), cfg.data.horizon, cfg.seeds()["episodes"])
    S, _, N = rollout(case, ExpertPolicy(case), cfg.data.horizon)
    soc = N[:, case.layout.state["des_soc"]][:, 0]
    return StudyResult(interp, cv, epi, feasibility_rate(pinn), soc)


def cmd_eval(cfg: RunConfig) -> StudyResult:
    case = cfg.load_case()
    dsets = load_datasets(cfg, case)
    models = _paths(cfg)["models"]
    gen = {k: load_baseline(models / f"{k}_generative.json.gz") for k in BASELINES}
    agent = {k: load_baseline(models / f"{k}_agent.json.gz") for k in BASELINES}
    pinn = PinnModel.load(models / "pinn.json", case)
    res = evaluate(cfg, case, dsets, gen, agent, pinn)
    write_reports(cfg, res)
    return res


def write_reports(cfg: RunConfig, res: StudyResult) -> list:
    folder = _paths(cfg)["reports"]
    paths = []
    for rep in (res.interpolation, res.cross_validation, res.episodic):
        paths += write_report(rep, folder)
    return paths


def cmd_reproduce(cfg: RunConfig, jobs: int = 1, save_models: bool = False) -> StudyResult:
    """Full study in one process: data, all models, all experiments, reports."""
    timings = {}
    t0 = time.perf_counter()
    case = cfg.load_case()
    dsets = cmd_gen_data(cfg, jobs)
    timings["data"] = time.perf_counter() - t0
    gen_train = split_generative(cfg, dsets["generative"])[0]
    agent_train = split_agent(cfg, dsets)[0]
    gen, agent = {}, {}
    for k in BASELINES:
        t = time.perf_counter()
        gen[k] = fit_baseline(cfg, k, gen_train, jobs)
        agent[k] = fit_baseline(cfg, k, agent_train, jobs)
        timings[k] = time.perf_counter() - t
    t = time.perf_counter()
    pres = fit_pinn(cfg, case)
    timings["pinn"] = time.perf_counter() - t
    models = _paths(cfg)["models"]
    models.mkdir(parents=True, exist_ok=True)
    pres.model.save(models / "pinn.json", extra=_pinn_extra(pres))
    write_training_log(pres.history, models / "pinn_log.csv")
    if save_models:
        for k in BASELINES:
            save_baseline(gen[k], models / f"{k}_generative.json.gz")
            save_baseline(agent[k], models / f"{k}_agent.json.gz")
    t = time.perf_counter()
    res = evaluate(cfg, case, dsets, gen, agent, pres.model)
    timings["evaluate"] = time.perf_counter() - t
    timings["total"] = time.perf_counter() - t0
    res.timings = timings
    write_reports(cfg, res)
    log.info("reproduce finished in %.1fs (%s)", timings["total"],
             ", ".join(f"{k} {v:.0f}s" for k, v in timings.items()))
    return res


# --------------------------------------------------------------------------- gates

@dataclass(frozen=True)
class GateResult:
    name: str
    passed: bool
    detail: str


def acceptance_gates(res: StudyResult, soc_max: float = 1.0, ramp_steps: int | None = None) -> list:
    """Ordering and threshold checks over a finished study."""
    gates = []
    it = res.interpolation
    bins = it.datasets
    for name in ("GBT", "PINN"):
        worst = min(it.metric(name, b).r2 for b in bins)
        gates.append(GateResult(f"interpolation: {name} r2 >= 0.99 on every bin", worst >= 0.99,
                                f"lowest bin r2 {worst:.5f}"))
    lr_avg = it.averages["LR"].r2
    gates.append(GateResult("interpolation: LR average r2 < 0.8", lr_avg < 0.8, f"LR average r2 {lr_avg:.5f}"))
    p, g = it.averages["PINN"].mse, it.averages["GBT"].mse
    gates.append(GateResult("interpolation: PINN avg mse <= 0.5 x GBT avg mse", p <= 0.5 * g,
                            f"PINN {p:.4e} vs GBT {g:.4e} (ratio {p / g:.3f})"))

    cv = res.cross_validation
    r2 = cv.metric("LR (agent)", "generative").r2
    gates.append(GateResult("cross-validation: agent-trained LR r2 < 0 on generative test", r2 < 0,
                            f"r2 {r2:.4f}"))
    best = min(cv.averages, key=lambda m: cv.averages[m].mse)
    gates.append(GateResult("cross-validation: PINN has the best average mse", best == "PINN (physics)",
                            ", ".join(f"{m} {v.mse:.3e}" for m, v in cv.averages.items())))

    ep = res.episodic
    pinn_std = {pol: float(np.std(ep.series[("PINN", pol)])) for pol in ("expert", "random")}
    ok_std, detail = True, []
    for (m, pol), s in ep.series.items():
        if m == "PINN":
            continue
        sd = float(np.std(s))
        ok_std &= pinn_std[pol] < sd
        detail.append(f"{m}/{pol} {sd:.3e}")
    gates.append(GateResult("episodic: PINN per-step MAE std below every baseline", ok_std,
                            f"PINN {pinn_std}; " + ", ".join(detail)))
    means = {m: float(np.mean(s)) for (m, pol), s in ep.series.items() if pol == "random"}
    gates.append(GateResult("episodic: PINN lowest mean MAE on the random episode",
                            min(means, key=means.get) == "PINN",
                            ", ".join(f"{m} {v:.3e}" for m, v in means.items())))
    ok_soc, why = expert_soc_pattern(res.expert_soc, soc_max)
    gates.append(GateResult("episodic: expert SOC ramps up then stays in [20%, 80%]", ok_soc, why))
    gates.append(GateResult("feasibility: >= 99% of PINN predictions within limits", res.feasibility >= 0.99,
                            f"feasible share {res.feasibility:.4f}"))
    return gates


def expert_soc_pattern(soc, soc_max: float = 1.0, low: float = 0.2, high: float = 0.8, tol: float = 1e-9):
    """Strict rise from empty until the band is entered, then never leaving it."""
    soc = np.asarray(soc)
    inside = (soc >= low * soc_max - tol) & (soc <= high * soc_max + tol)
    if not inside.any():
        return False, "SOC never reaches the band"
    first = int(np.argmax(inside))
    ramp = np.concatenate([[0.0], soc[:first + 1]])
    rising = bool(np.all(np.diff(ramp) > 0))
    stays = bool(inside[first:].all())
    return rising and stays, (f"ramp of {first + 1} steps (strictly rising: {rising}); "
                              f"in band afterwards: {stays}; range after ramp [{soc[first:].min():.3f}, "
                              f"{soc[first:].max():.3f}]")


def write_gates(gates, path) -> Path:
    doc = [{"name": g.name, "passed": g.passed, "detail": g.detail} for g in gates]
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
    return Path(path)
