"""The ten acceptance criteria, each at its stated tolerance and runtime budget.

Every test records a single PASS/FAIL line (printed immediately and repeated in
the pytest terminal summary) before asserting.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from drmarl import cli, envs, harness, solver, verify
from drmarl.autodiff import ParamStore, Tensor
from drmarl.envs import EnvSpec, make_env
from drmarl.factorization import AgentNets, AgentNetSpec, QMixer, VDNMixer
from drmarl.training import HistoryEncoder, TrainConfig, train_run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def record(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'} -- {detail}"
    ACCEPTANCE[n] = line
    print(line)


def suite_rows(fn, *args, **kw):
    t = time.perf_counter()
    rows = fn(*args, **kw)
    return rows, time.perf_counter() - t


def summarize(rows) -> str:
    return "; ".join(f"{r.check}: {r.detail}" for r in rows)


def test_criterion_01_example_b1_goldens():
    rows, dt = suite_rows(verify.suite_example_b1)
    ok = all(r.passed for r in rows) and dt < 1.0
    record(1, ok, f"{sum(r.passed for r in rows)}/{len(rows)} checks in {dt:.2f}s (< 1 s)")
    assert ok, summarize(rows)


def test_criterion_02_example_b2_decomposition():
    rows, dt = suite_rows(verify.suite_example_b2)
    ok = all(r.passed for r in rows) and dt < 1.0
    record(2, ok, f"{summarize(rows)}; {dt:.2f}s (< 1 s)")
    assert ok


def test_criterion_03_operator_properties():
    rows, dt = suite_rows(verify.suite_contraction, pairs=100)
    ok = all(r.passed for r in rows) and dt < 10.0 and len(rows) == 7
    record(3, ok, f"100 pairs x 3 sets, order + monotonicity for 2 sets on 11-point rho grid; "
                  f"{sum(r.passed for r in rows)}/{len(rows)} checks in {dt:.2f}s (< 10 s)")
    assert ok, summarize(rows)


def test_criterion_04_tv_dual_vs_lp():
    rows, dt = suite_rows(verify.suite_dual_lp, instances=200)
    ok = all(r.passed for r in rows) and dt < 30.0
    record(4, ok, f"{summarize(rows)}; {dt:.2f}s (< 30 s)")
    assert ok


def test_criterion_05_lower_bound():
    rows, dt = suite_rows(verify.suite_lower_bound, members=20)
    ok = all(r.passed for r in rows) and dt < 60.0
    record(5, ok, f"{summarize(rows)}; {dt:.2f}s (< 60 s)")
    assert ok


def test_criterion_06_gradient_suite():
    rows, dt = suite_rows(verify.suite_gradcheck, draws=50)
    ok = all(r.passed for r in rows) and len(rows) == 6 and dt < 60.0
    worst = max(float(r.detail.split()[3]) for r in rows)
    record(6, ok, f"6 losses x 50 draws, worst relative error {worst:.2e} (<= 1e-4); {dt:.1f}s (< 60 s)")
    assert ok, summarize(rows)


def test_criterion_07_monotonicity_and_vdn_consistency():
    rng = np.random.default_rng(0)
    worst = np.inf
    for _ in range(1000):
        n = int(rng.integers(2, 5))
        sdim = int(rng.integers(1, 6))
        store = ParamStore()
        mixer = QMixer(store, n, sdim, rng, embed=int(rng.integers(2, 9)), hyper_hidden=int(rng.integers(2, 9)))
        scale = rng.uniform(0.1, 5.0)
        for name in store.names():
            store[name].data = rng.normal(size=store[name].data.shape) * scale
        B = int(rng.integers(1, 6))
        qs = [Tensor(rng.normal(size=B) * 5, requires_grad=True) for _ in range(n)]
        mixer(store, qs, rng.normal(size=(B, sdim))).sum().backward()
        worst = min(worst, min(float(q.grad.min()) for q in qs))
    mono_ok = worst >= -1e-9

    spaces = [(2, 2), (3, 2), (5, 5), (2, 3, 4), (4,)]
    vdn_ok = True
    for acts in spaces:
        store = ParamStore()
        nets = AgentNets(store, AgentNetSpec((3,) * len(acts), acts, hidden=8), rng)
        for _ in range(20):
            xs = [rng.normal(size=(1, 3)) for _ in acts]
            _, qs = nets.forward(store, xs)
            joints = list(np.ndindex(*acts))
            total = VDNMixer()(store, [Tensor(np.array([qs[i].data[0, a[i]] for a in joints]))
                                       for i in range(len(acts))]).data
            best = {joints[k] for k in np.flatnonzero(total >= total.max() - 1e-9)}
            vdn_ok &= tuple(int(np.argmax(q.data[0])) for q in qs) in best
    ok = mono_ok and vdn_ok
    record(7, ok, f"min dQ_tot/dQ_i over 1000 QMIX draws {worst:.3g} (>= -1e-9); "
                  f"VDN decentralized greedy = joint argmax on {len(spaces)} action spaces: {vdn_ok}")
    assert ok


def test_criterion_08_single_agent_learning_sanity():
    spec = EnvSpec("random_decpomdp", {"seed": 7, "n_states": 5, "n_agents": 1, "actions": 3})
    env = make_env(spec)
    exact = solver.solve_nominal(env.model, tol=1e-10).values.argmax(axis=1)
    live = [s for s in range(env.model.n_states) if s != env.model.fail_state]
    matches, t0 = [], time.perf_counter()
    for seed in range(3):
        out = []
        rec = train_run(TrainConfig(steps=20_000, eps_anneal=10_000, eval_every=20_000, seed=seed),
                        env, learner_out=out)
        assert rec.status == "ok", rec.message
        learner = out[0]
        hits = 0
        for s in live:
            enc = HistoryEncoder(env, learner.cfg.window)
            enc.reset(env.observe(s))
            hits += int(np.argmax(learner.q_rows(enc.features())[0])) == exact[s]
        matches.append(float(hits / len(live)))
    ok = all(m == 1.0 for m in matches)
    record(8, ok, f"policy match per seed {matches} on {len(live)} live states after 20k steps "
                  f"({time.perf_counter() - t0:.0f}s)")
    assert ok


def test_criterion_09_ood_robustness(tmp_path):
    doc = json.loads((CONFIGS / "coop_grid_ood.json").read_text())
    doc["output_dir"] = str(tmp_path / "ood")
    exp = harness.ExperimentConfig.from_dict(doc)
    assert len(exp.seeds) >= 5
    t0 = time.perf_counter()
    records = harness.run_experiment(exp, log=print)
    dt = time.perf_counter() - t0
    assert all(r.status == "ok" for r in records), [r.message for r in records]
    label = exp.eval_envs[0].label
    by = {}
    for r in records:
        cfg = TrainConfig.from_dict(r.config)
        by.setdefault(cfg.uncertainty, {})[cfg.seed] = r.final_eval(label)
    seeds = sorted(by["tv"])
    robust = np.array([by["tv"][s] for s in seeds])
    plain = np.array([by["none"][s] for s in seeds])
    n = len(seeds)
    se_r, se_n = robust.std(ddof=1) / math.sqrt(n), plain.std(ddof=1) / math.sqrt(n)
    pooled = math.sqrt(se_r ** 2 + se_n ** 2)
    diff = robust - plain
    effect = diff.mean()
    d_z = effect / diff.std(ddof=1) if diff.std(ddof=1) > 0 else float("inf")
    not_worse = robust.mean() >= plain.mean() - pooled
    ok = not_worse and dt <= 30 * 60
    record(9, ok, f"{label}: robust {robust.mean():.3f} vs non-robust {plain.mean():.3f} over {n} seeds "
                  f"(paired diff {effect:+.3f}, pooled SE {pooled:.3f}, d_z {d_z:.2f}, "
                  f"robust >= non-robust: {robust.mean() >= plain.mean()}); {dt / 60:.1f} min (<= 30)")
    assert ok


def test_criterion_10_rho_sweep_cli(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("DRMARL_OUTPUT_ROOT", str(tmp_path))
    shift = {"kind": "coop_grid", "perturbation": {"kind": "kernel_tv_shift", "rho": 0.2, "seed": 0}}
    train = {"algorithm": "vdn", "uncertainty": "tv", "steps": 10_000, "eps_anneal": 6_000, "eval_every": 5_000}
    sweep = {"schema": harness.SCHEMA, "train_env": {"kind": "coop_grid"}, "eval_envs": [shift],
             "train": train, "seeds": [0, 1, 2], "rho_sweep": [0.0, 0.05, 0.1, 0.2], "output_dir": "sweep"}
    # the baseline uses disjoint seeds, so agreement at rho = 0 is a statement about seed noise
    base = {**sweep, "train": {**train, "uncertainty": "none"}, "seeds": [3, 4, 5], "output_dir": "baseline"}
    base.pop("rho_sweep")
    (tmp_path / "sweep.json").write_text(json.dumps(sweep))
    (tmp_path / "base.json").write_text(json.dumps(base))
    assert cli.main(["sweep", "--config", str(tmp_path / "sweep.json"), "--train"]) == 0
    assert cli.main(["train", "--config", str(tmp_path / "base.json")]) == 0
    out = capsys.readouterr().out
    label = EnvSpec.from_dict(shift).label
    pts = [p for p in harness.sweep_report(harness.report_from_records(harness.load_records(tmp_path / "sweep")))
           if p.env == label]
    curve_ok = [p.rho for p in pts] == [0.0, 0.05, 0.1, 0.2] and (tmp_path / "sweep/sweep/sweep.csv").exists()
    rep = harness.report_from_records(harness.load_records(tmp_path / "baseline"))
    b = rep.lookup(label, "vdn", "none", 0.0)
    zero = pts[0]
    noise = 2 * math.sqrt(zero.stderr ** 2 + b.stderr_return ** 2)
    match = abs(zero.mean - b.mean_return) <= noise
    shape = harness.rise_then_fall(pts)
    ok = curve_ok and match and "reported, not asserted" in out
    curve = ", ".join(f"{p.rho:g}:{p.improvement:+.3f}" for p in pts)
    record(10, ok, f"improvement vs rho [{curve}]; rho=0 {zero.mean:.3f} vs baseline {b.mean_return:.3f} "
                   f"(|diff| <= 2 pooled SE {noise:.3f}: {match}); rise-then-fall {shape} (soft, not asserted)")
    assert ok
