"""Experiment orchestration: configs, multi-seed runs, evaluation, sweeps and plot data."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParamStore
from .envs import EnvSpec, Perturbation, make_env
from .training import Learner, RunRecord, TrainConfig, mean_stderr, run_greedy_episodes, train_run

SCHEMA = "drmarl-experiment/1"
OUTPUT_ROOT_ENV = "DRMARL_OUTPUT_ROOT"
CSV_COLUMNS = ["run_id", "env", "seed", "checkpoint_step", "mean_return", "stderr_return",
               "rho", "algorithm", "uncertainty"]


class ConfigError(ValueError):
    """Invalid experiment configuration; the message starts with the offending field path."""


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))


def resolve_output(path: str | Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else output_root() / p


# configuration -------------------------------------------------------------------------------------


_EXPERIMENT_KEYS = {"schema", "name", "train_env", "eval_envs", "train", "seeds", "rho_sweep", "baseline",
                    "output_dir", "workers"}


def _env_spec(d, path: str) -> EnvSpec:
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    unknown = set(d) - {"kind", "params", "perturbation", "name"}
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}: unknown key")
    pert = d.get("perturbation")
    if pert is not None:
        if not isinstance(pert, dict):
            raise ConfigError(f"{path}.perturbation: expected an object")
        bad = set(pert) - {f.name for f in fields(Perturbation)}
        if bad:
            raise ConfigError(f"{path}.perturbation.{sorted(bad)[0]}: unknown key")
    try:
        return EnvSpec.from_dict(d)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass
class ExperimentConfig:
    train_env: EnvSpec
    eval_envs: list
    train: dict
    seeds: list
    output_dir: str = "runs"
    name: str = "experiment"
    rho_sweep: Optional[list] = None
    baseline: bool = False
    workers: int = 1

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("<root>: expected a JSON object")
        unknown = set(d) - _EXPERIMENT_KEYS
        if unknown:
            raise ConfigError(f"{sorted(unknown)[0]}: unknown key")
        if d.get("schema") != SCHEMA:
            raise ConfigError(f"schema: expected {SCHEMA!r}, got {d.get('schema')!r}")
        for key in ("train_env", "eval_envs", "train", "seeds"):
            if key not in d:
                raise ConfigError(f"{key}: missing")
        train_env = _env_spec(d["train_env"], "train_env")
        if not isinstance(d["eval_envs"], list) or not d["eval_envs"]:
            raise ConfigError("eval_envs: must be a nonempty list")
        evals = [_env_spec(e, f"eval_envs[{i}]") for i, e in enumerate(d["eval_envs"])]
        seeds = d["seeds"]
        if not isinstance(seeds, list) or not seeds or not all(isinstance(s, int) for s in seeds):
            raise ConfigError("seeds: must be a nonempty list of integers")
        train = d["train"]
        if not isinstance(train, dict):
            raise ConfigError("train: expected an object")
        if "seed" in train:
            raise ConfigError("train.seed: set seeds through the top-level 'seeds' list")
        known = {f.name for f in fields(TrainConfig)}
        bad = set(train) - known
        if bad:
            raise ConfigError(f"train.{sorted(bad)[0]}: unknown key")
        sweep = d.get("rho_sweep")
        if sweep is not None:
            if not isinstance(sweep, list) or not sweep or not all(isinstance(r, (int, float)) for r in sweep):
                raise ConfigError("rho_sweep: must be a nonempty list of numbers")
            if any(not 0.0 <= r <= 1.0 for r in sweep):
                raise ConfigError("rho_sweep: values must lie in [0,1]")
            if train.get("uncertainty", "none") == "none":
                raise ConfigError("rho_sweep: needs train.uncertainty 'contamination' or 'tv'")
        # a sweep supplies rho itself, so validate the block once per swept value
        overrides = [{}] if sweep is None else [{"rho": float(r)} for r in sweep if r > 0] or [{}]
        for extra in overrides:
            try:
                TrainConfig(**{**train, **extra})
            except (ValueError, TypeError) as exc:
                msg = str(exc)
                field_name = msg.split(":", 1)[0] if ":" in msg else ""
                raise ConfigError(f"train.{msg}" if field_name.isidentifier() else f"train: {msg}") from None
        workers = d.get("workers", 1)
        if not isinstance(workers, int) or workers < 1:
            raise ConfigError("workers: must be a positive integer")
        return cls(train_env, evals, dict(train), list(seeds), d.get("output_dir", "runs"),
                   d.get("name", "experiment"), sweep, bool(d.get("baseline", False)), workers)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"<root>: invalid JSON ({exc})") from None
        return cls.from_dict(doc)

    def to_dict(self) -> dict:
        return {"schema": SCHEMA, "name": self.name, "train_env": self.train_env.to_dict(),
                "eval_envs": [e.to_dict() for e in self.eval_envs], "train": self.train,
                "seeds": self.seeds, "rho_sweep": self.rho_sweep, "baseline": self.baseline,
                "output_dir": self.output_dir, "workers": self.workers}

    def expand(self) -> list[tuple[str, TrainConfig]]:
        """One (run_id, TrainConfig) per seed and, for sweeps, per rho value.

        rho = 0 in a sweep runs the non-robust algorithm; ``baseline`` adds
        non-robust runs alongside the robust ones.
        """
        variants: list[dict] = []
        if self.rho_sweep is not None:
            for rho in self.rho_sweep:
                variants.append({"uncertainty": "none", "rho": 0.0} if rho == 0
                                else {"rho": float(rho)})
        else:
            variants.append({})
        if self.baseline and self.train.get("uncertainty", "none") != "none":
            if not any(v.get("uncertainty") == "none" for v in variants):
                variants.append({"uncertainty": "none", "rho": 0.0})
        runs, seen = [], set()
        for v in variants:
            for seed in self.seeds:
                cfg = TrainConfig(**{**self.train, **v, "seed": seed})
                rid = run_id_for(cfg)
                if rid not in seen:
                    seen.add(rid)
                    runs.append((rid, cfg))
        return runs

    @property
    def out_path(self) -> Path:
        return resolve_output(self.output_dir)


def run_id_for(cfg: TrainConfig) -> str:
    return f"{cfg.algorithm}-{cfg.uncertainty}-rho{cfg.effective_rho:g}-seed{cfg.seed}"


# training ------------------------------------------------------------------------------------------------


def _train_one(args) -> dict:
    run_id, cfg_dict, train_env, eval_envs, out_dir = args
    env = make_env(EnvSpec.from_dict(train_env))
    evals = [make_env(EnvSpec.from_dict(e)) for e in eval_envs]
    rec = train_run(TrainConfig(**cfg_dict), env, evals, run_id=run_id, out_dir=out_dir)
    return rec.to_dict()


def run_experiment(exp: ExperimentConfig, overwrite: bool = False, log=print) -> list[RunRecord]:
    """Train every expanded run; existing run records are kept unless ``overwrite``."""
    out = exp.out_path / "runs"
    out.mkdir(parents=True, exist_ok=True)
    (exp.out_path / "experiment.json").write_text(json.dumps(exp.to_dict(), indent=1))
    jobs, records = [], {}
    for rid, cfg in exp.expand():
        path = out / f"{rid}.json"
        if path.exists() and not overwrite:
            records[rid] = RunRecord.load(path)
            log(f"{rid}: existing record kept")
            continue
        jobs.append((rid, cfg.to_dict(), exp.train_env.to_dict(), [e.to_dict() for e in exp.eval_envs], str(out)))
    if exp.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=exp.workers) as pool:
            results = list(pool.map(_train_one, jobs))
    else:
        results = [_train_one(j) for j in jobs]
    for doc in results:
        rec = RunRecord.from_dict(doc)
        records[rec.run_id] = rec
        log(f"{rec.run_id}: {rec.status} {rec.message}".rstrip())
    return [records[rid] for rid, _ in exp.expand()]


def load_records(directory: str | Path) -> list[RunRecord]:
    d = Path(directory)
    if (d / "runs").is_dir():
        d = d / "runs"
    files = sorted(p for p in d.glob("*.json") if not p.name.endswith(".params.json"))
    if not files:
        raise FileNotFoundError(f"no run records under {directory}")
    return [RunRecord.load(p) for p in files]


# evaluation -------------------------------------------------------------------------------------------------


@dataclass
class EvalRow:
    run_id: str
    env: str
    seed: object
    checkpoint_step: int
    mean_return: float
    stderr_return: float
    rho: float
    algorithm: str
    uncertainty: str

    def as_list(self) -> list:
        return [getattr(self, c) for c in CSV_COLUMNS]


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)           # per (run, env)
    aggregate: list = field(default_factory=list)      # per (algorithm, uncertainty, rho, env) over seeds

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_COLUMNS)
            for r in self.rows + self.aggregate:
                w.writerow(r.as_list())
        return path

    def lookup(self, env: str, algorithm: str, uncertainty: str, rho: float) -> Optional[EvalRow]:
        for r in self.aggregate:
            if (r.env, r.algorithm, r.uncertainty) == (env, algorithm, uncertainty) and math.isclose(r.rho, rho):
                return r
        return None


def aggregate_rows(rows: Sequence[EvalRow]) -> list[EvalRow]:
    """Mean and standard error across seeds of the per-run means (one row per group and env)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.algorithm, r.uncertainty, r.rho, r.env), []).append(r)
    out = []
    for (alg, unc, rho, env), rs in groups.items():
        m, se = mean_stderr([r.mean_return for r in rs])
        step = max(r.checkpoint_step for r in rs)
        out.append(EvalRow(f"{alg}-{unc}-rho{rho:g}", env, "all", step, m, se, rho, alg, unc))
    return out


def report_from_records(records: Sequence[RunRecord]) -> EvalReport:
    """EvalReport built from each record's final in-training evaluation."""
    rows = []
    for rec in records:
        if not rec.checkpoints:
            continue
        cfg = TrainConfig.from_dict(rec.config)
        last = rec.checkpoints[-1]
        for env, (m, se) in last.eval.items():
            rows.append(EvalRow(rec.run_id, env, cfg.seed, last.step, m, se, cfg.effective_rho,
                                cfg.algorithm, cfg.uncertainty))
    return EvalReport(rows, aggregate_rows(rows))


def load_learner(rec: RunRecord, env) -> Learner:
    cfg = TrainConfig.from_dict(rec.config)
    learner = Learner(cfg, env, np.random.default_rng(0))
    if rec.checkpoint_path is None:
        raise FileNotFoundError(f"{rec.run_id}: no parameter checkpoint recorded")
    learner.store.load_from(ParamStore.load(rec.checkpoint_path))
    return learner


def evaluate_records(records: Sequence[RunRecord], env_specs: Sequence[EnvSpec], episodes: int = 32,
                     eval_seed: int = 12345) -> EvalReport:
    """Greedy evaluation of saved parameters on (possibly held-out) environments.

    Every run sees the same episode seeds per environment so comparisons are paired.
    """
    rows = []
    envs = [make_env(s) for s in env_specs]
    for rec in records:
        if rec.status != "ok":
            continue
        cfg = TrainConfig.from_dict(rec.config)
        learner = None
        for k, env in enumerate(envs):
            if learner is None:
                learner = load_learner(rec, env)
            learner.env = env
            rng = np.random.default_rng([eval_seed, k])
            m, se = mean_stderr(run_greedy_episodes(learner, env, episodes, rng, cfg.horizon))
            rows.append(EvalRow(rec.run_id, env.name, cfg.seed, rec.checkpoints[-1].step if rec.checkpoints else 0,
                                m, se, cfg.effective_rho, cfg.algorithm, cfg.uncertainty))
    return EvalReport(rows, aggregate_rows(rows))


# sweep ------------------------------------------------------------------------------------------------------


@dataclass
class SweepPoint:
    rho: float
    env: str
    mean: float
    stderr: float
    n_seeds: int
    improvement: float        # over the rho = 0 (non-robust) point on the same env


def sweep_report(report: EvalReport, env: Optional[str] = None) -> list[SweepPoint]:
    """Final return vs rho per environment, with improvement over rho = 0."""
    by_env: dict = {}
    for r in report.aggregate:
        if env is None or r.env == env:
            by_env.setdefault(r.env, []).append(r)
    counts: dict = {}
    for r in report.rows:
        counts[(r.env, r.rho)] = counts.get((r.env, r.rho), 0) + 1
    out = []
    for e, rs in by_env.items():
        rs = sorted(rs, key=lambda r: r.rho)
        base = next((r.mean_return for r in rs if r.rho == 0.0), float("nan"))
        for r in rs:
            out.append(SweepPoint(r.rho, e, r.mean_return, r.stderr_return, counts.get((e, r.rho), 0),
                                  r.mean_return - base))
    return out


def rise_then_fall(points: Sequence[SweepPoint]) -> Optional[bool]:
    """Soft shape check: does the improvement peak strictly above both ends of the rho range?

    A plateau that never comes down is not a rise-then-fall.
    """
    if len(points) < 3:
        return None
    imp = [p.improvement for p in sorted(points, key=lambda p: p.rho)]
    peak = max(imp[1:-1])
    return peak > imp[0] + 1e-12 and peak > imp[-1] + 1e-12


def write_sweep_csv(points: Sequence[SweepPoint], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "rho", "mean_return", "stderr_return", "n_seeds", "improvement"])
        for p in points:
            w.writerow([p.env, p.rho, p.mean, p.stderr, p.n_seeds, p.improvement])
    return path


# plotting ---------------------------------------------------------------------------------------------------


def learning_curves(records: Sequence[RunRecord]) -> dict:
    """{env: {series label: [(step, mean over seeds, stderr over seeds)]}}."""
    acc: dict = {}
    for rec in records:
        cfg = TrainConfig.from_dict(rec.config)
        label = f"{cfg.algorithm}-{cfg.uncertainty}-rho{cfg.effective_rho:g}"
        for c in rec.checkpoints:
            for env, (m, _) in c.eval.items():
                acc.setdefault(env, {}).setdefault(label, {}).setdefault(c.step, []).append(m)
    out: dict = {}
    for env, series in acc.items():
        out[env] = {lab: [(step, *mean_stderr(v)) for step, v in sorted(pts.items())]
                    for lab, pts in series.items()}
    return out


def robustness_gain(curves: dict) -> dict:
    """{env: {robust label: [(step, robust mean - non-robust mean)]}} per matching algorithm."""
    out: dict = {}
    for env, series in curves.items():
        for lab, pts in series.items():
            alg, unc = lab.split("-")[:2]
            if unc == "none":
                continue
            base = next((p for l, p in series.items() if l.startswith(f"{alg}-none-")), None)
            if base is None:
                continue
            bmap = {s: m for s, m, _ in base}
            out.setdefault(env, {})[lab] = [(s, m - bmap[s]) for s, m, _ in pts if s in bmap]
    return out


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def svg_line_chart(series: dict, title: str, xlabel: str = "step", ylabel: str = "return",
                   width: int = 640, height: int = 400) -> str:
    """Minimal SVG polyline chart; ``series`` maps label -> [(x, y), ...]."""
    pts = [(x, y) for s in series.values() for x, y in s]
    if not pts:
        raise ValueError("nothing to plot")
    xs, ys = [p[0] for p in pts], [p[1] for p in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x1 = x0 + 1
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    L, R, T, B = 60, 160, 40, 50
    sx = lambda x: L + (x - x0) / (x1 - x0) * (width - L - R)
    sy = lambda y: height - B - (y - y0) / (y1 - y0) * (height - T - B)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'font-family="sans-serif" font-size="11">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>',
             f'<line x1="{L}" y1="{height - B}" x2="{width - R}" y2="{height - B}" stroke="black"/>',
             f'<line x1="{L}" y1="{T}" x2="{L}" y2="{height - B}" stroke="black"/>',
             f'<text x="{(L + width - R) / 2}" y="{height - 12}" text-anchor="middle">{_esc(xlabel)}</text>',
             f'<text x="15" y="{height / 2}" transform="rotate(-90 15 {height / 2})" '
             f'text-anchor="middle">{_esc(ylabel)}</text>']
    for k in range(5):
        yv = y0 + k * (y1 - y0) / 4
        xv = x0 + k * (x1 - x0) / 4
        parts.append(f'<text x="{L - 5}" y="{sy(yv) + 4:.1f}" text-anchor="end">{yv:.3g}</text>')
        parts.append(f'<text x="{sx(xv):.1f}" y="{height - B + 15}" text-anchor="middle">{xv:.3g}</text>')
    for i, (label, s) in enumerate(series.items()):
        color = _COLORS[i % len(_COLORS)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in sorted(s))
        parts.append(f'<polyline class="series" fill="none" stroke="{color}" stroke-width="2" points="{coords}">'
                     f'<title>{_esc(label)}</title></polyline>')
        ly = T + 15 * i
        parts.append(f'<line x1="{width - R + 10}" y1="{ly}" x2="{width - R + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{width - R + 35}" y="{ly + 4}">{_esc(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def _esc(s: str) -> str:
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _slug(s: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in s)


def write_plots(records: Sequence[RunRecord], out_dir: str | Path) -> list[Path]:
    """Learning-curve and robustness-gain CSV + SVG files, one pair per environment."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    curves = learning_curves(records)
    gains = robustness_gain(curves)
    written = []
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "series", "step", "mean_return", "stderr_return"])
        for env, series in curves.items():
            for lab, pts in series.items():
                for s, m, se in pts:
                    w.writerow([env, lab, s, m, se])
    written.append(out / "curves.csv")
    with open(out / "gain.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["env", "series", "step", "gain"])
        for env, series in gains.items():
            for lab, pts in series.items():
                for s, g in pts:
                    w.writerow([env, lab, s, g])
    written.append(out / "gain.csv")
    for env, series in curves.items():
        svg = svg_line_chart({lab: [(s, m) for s, m, _ in pts] for lab, pts in series.items()},
                             f"return on {env}")
        p = out / f"curves_{_slug(env)}.svg"
        p.write_text(svg)
        written.append(p)
    for env, series in gains.items():
        if any(series.values()):
            p = out / f"gain_{_slug(env)}.svg"
            p.write_text(svg_line_chart(series, f"robustness gain on {env}", ylabel="robust - non-robust"))
            written.append(p)
    return written
