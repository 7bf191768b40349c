"""Acceptance gate.

Each test prints one ``PASS``/``FAIL`` line.  Desk-scale training runs are
cached under ``$TAXDQN_ACCEPTANCE_CACHE`` (default ``.acceptance_cache`` in the
repository root) so the full gate only trains each job once.  A cold run
trains about forty desk-scale policies and takes several hours on one core.
"""
import os
from pathlib import Path

import numpy as np
import pytest

from taxdqn import analysis, cli, dp, nn
from taxdqn.config import CALIBRATED_DISCOUNT, CachedTrainer, ExperimentConfig
from taxdqn.dqn import evaluate_policy
from taxdqn.env import BatchEnv, ClosureScenario, TaxParams, builtin_transition_model

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("TAXDQN_ACCEPTANCE_CACHE", ROOT / ".acceptance_cache"))
SCENARIOS = ("never", "bernoulli:0.2", "periodic", "always")
REFERENCE_VALUES = {"never": 3254.6, "bernoulli:0.2": 3307.9, "periodic": 3319.7, "always": 3358.3}


@pytest.fixture(scope="module")
def desk():
    return ExperimentConfig.load("desk")


@pytest.fixture(scope="module")
def trainer():
    return CachedTrainer(CACHE)


@pytest.fixture
def report(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}")
        return ok
    return emit


def tax(desk, scenario, lam):
    return desk.tax.with_(scenario=ClosureScenario.parse(scenario), risk_aversion=float(lam))


def trained_eval(desk, trainer, p):
    net = trainer(p, desk.train, desk.network_spec(p))
    return net, evaluate_policy(net, p, desk.eval.episodes, desk.eval.steps,
                                seed=analysis.eval_seed(desk.train))


# --- 1 ----------------------------------------------------------------------------

def test_transition_model_audit(report):
    model = builtin_transition_model()
    n = 1_000_000
    rng = np.random.default_rng(2024)
    worst = 0.0
    ok = True
    for k, mat in enumerate(model):
        ok &= bool(np.allclose(mat.sum(axis=0), 1.0, rtol=0, atol=1e-12)) and mat.min() >= 0
        env = BatchEnv(TaxParams(), n)
        for j in range(15):
            env.reset(rng)
            env.status[:] = j + 1
            env.offered[:] = k > 0
            env.step(np.zeros(n, int), np.full(n, k == 1), rng)
            counts = np.bincount(env.status - 1, minlength=15)
            p = mat[:, j]
            sigma = np.sqrt(n * p * (1 - p))
            zero = p == 0
            ok &= bool(np.all(counts[zero] == 0))
            z = np.abs(counts[~zero] - n * p[~zero]) / np.where(sigma[~zero] > 0, sigma[~zero], 1)
            worst = max(worst, float(z.max()))
    ok &= set(np.unique(model.accepted)) <= {0.0, 1.0}
    ok &= worst <= 3.0
    assert report(1, ok, f"column-stochastic, boolean closure matrix, worst deviation {worst:.2f} sigma")


# --- 2 ----------------------------------------------------------------------------

def test_gradient_oracle(report):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        trunk = tuple(int(w) for w in rng.integers(3, 9, rng.integers(1, 4)))
        net = nn.Network.init(nn.NetworkSpec(4, trunk, (3, 2)), rng)
        for _, b, _, o in net.layout:
            net.flat[b:b + o] = rng.normal(scale=0.5, size=o)
        err = nn.gradient_check(net, rng.normal(size=(5, 4)), rng.normal(size=(5, 3)),
                                rng.normal(size=(5, 2)))
        worst = max(worst, err)
    assert report(2, worst < 1e-4, f"max relative error {worst:.2e} over 20 networks")


# --- 3 ----------------------------------------------------------------------------

def test_risk_neutral_dp_oracle(report):
    base = TaxParams(discount=CALIBRATED_DISCOUNT)
    vals = {}
    for sc in SCENARIOS:
        p = base.with_(scenario=ClosureScenario.parse(sc))
        vals[sc] = dp.solve(p).start_value(p)
    ok = abs(vals["never"] / REFERENCE_VALUES["never"] - 1) <= 1e-3
    ok &= all(abs(vals[sc] / REFERENCE_VALUES[sc] - 1) <= 0.02 for sc in SCENARIOS[1:])
    ok &= vals["never"] < vals["bernoulli:0.2"] < vals["periodic"] < vals["always"]
    detail = ", ".join(f"{sc} {v:.2f}" for sc, v in vals.items())
    assert report(3, ok, detail)


# --- 4 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_dqn_matches_dp(desk, trainer, report):
    p = tax(desk, "never", 0)
    _, ev = trained_eval(desk, trainer, p)
    v_dp = dp.solve(p).start_value(p)
    gap = abs(ev.discounted_utility / v_dp - 1)
    s = ev.samples
    full = bool(np.all(s.u1 == 1.0))
    u2_ok = bool(np.all(s.u2 == s.closure_offered))
    ok = gap <= 0.02 and full and u2_ok
    assert report(4, ok, f"DQN {ev.discounted_utility:.2f} vs DP {v_dp:.2f} ({100 * gap:.2f}%), "
                         f"u1=1 in {np.mean(s.u1 == 1.0):.1%} of samples "
                         f"(mean {ev.mean_u1:.3f}, min {s.u1.min():.2f})")


# --- 5 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_always_closure_fixed_point(desk, trainer, report):
    _, ev = trained_eval(desk, trainer, tax(desk, "always", 2.6))
    s = ev.samples
    n_ok = int(np.sum((s.u1 == 1.0) & s.u2))
    assert report(5, n_ok == len(s), f"{n_ok}/{len(s)} samples at u1=1, u2=1")


# --- 6 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_constant_policy_dominance(desk, trainer, report):
    ok = True
    parts = []
    for sc in ("never", "bernoulli:0.2"):
        p = tax(desk, sc, 2.6)
        net = trainer(p, desk.train, desk.network_spec(p))
        cmp = analysis.compare_constant_policy(net, p, desk.eval.episodes, desk.eval.steps,
                                               seed=analysis.eval_seed(desk.train))
        ok &= cmp.margin >= 0
        parts.append(f"{sc}: trained {cmp.trained_utility:.5g} (mean u1 {cmp.trained_mean_u1:.2f}) "
                     f"vs constant u1={cmp.best_u1:.2f} {cmp.best_utility:.5g}")
    assert report(6, ok, "; ".join(parts))


# --- 7 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_lambda_trend(desk, trainer, report):
    ok = True
    parts = []
    for sc in SCENARIOS:
        p = tax(desk, sc, 0)
        rows = analysis.sweep_lambda(desk.sweep.lambdas, p, desk.train, desk.network_spec(p), trainer)
        rho = analysis.spearman_trend(rows)
        ok &= all(r.ok for r in rows) and bool(rho < 0)
        parts.append(f"{sc} rho={rho:.3f} u1=[" + " ".join(f"{r.mean_u1:.2f}" for r in rows) + "]")
    assert report(7, ok, "; ".join(parts))


# --- 8 ----------------------------------------------------------------------------

@pytest.mark.slow
def test_calibration(desk, trainer, report):
    p = tax(desk, "bernoulli:0.2", 0)
    c = desk.calibrate
    try:
        cal = analysis.calibrate_lambda(0.4, p, desk.train, desk.network_spec(p), c.lo, c.hi,
                                        c.tolerance, c.max_probes, trainer)
    except analysis.BracketError as exc:
        assert report(8, False, str(exc))
        return
    ok = cal.converged and 2.0 <= cal.lam <= 3.2
    trace = " ".join(f"{r.lam:.3g}:{r.mean_u1:.2f}" for r in cal.probes)
    assert report(8, ok, f"lambda {cal.lam:.4f} mean u1 {cal.mean_u1:.3f} "
                         f"converged {cal.converged} probes [{trace}]")


# --- 9 ----------------------------------------------------------------------------

SMALL = """
seed = 7
[tax]
scenario = "bernoulli:0.2"
risk_aversion = 2.6
[train]
episodes = 6
steps = 30
batch_size = 16
eps_anneal = 6
eval_interval = 3
eval_episodes = 3
[network]
trunk = [16, 16]
[eval]
episodes = 10
steps = 30
[sweep]
lambdas = [0, 2, 4]
[calibrate]
target = 0.6
tolerance = 0.05
max_probes = 4
"""


def test_determinism(tmp_path, report):
    cfg = tmp_path / "small.toml"
    cfg.write_text(SMALL)
    commands = [["dp", "--scenario", "periodic", "--risk-aversion", "0"], ["train"], ["eval"],
                ["analyze"], ["sweep"], ["calibrate"]]
    outs = []
    for name in ("first", "second"):
        out = tmp_path / name
        for argv in commands:
            code = cli.main(argv[:1] + ["--config", str(cfg), "--out", str(out)] + argv[1:])
            assert code in (cli.EXIT_OK, cli.EXIT_CHECK), argv
        outs.append(out)
    files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*")
                   if p.suffix in (".csv", ".txt", ".dot"))
    same = [(outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files]
    diff = [str(f) for f, s in zip(files, same) if not s]
    assert report(9, all(same) and len(files) >= 15,
                  f"{sum(same)}/{len(files)} artifacts bit-identical" + (f", differ: {diff}" if diff else ""))
