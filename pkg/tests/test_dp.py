import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from taxdqn import dp
from taxdqn.config import CALIBRATED_DISCOUNT
from taxdqn.dqn import evaluate_policy
from taxdqn.env import ClosureScenario, FirmState, TaxParams

NEVER = TaxParams(discount=CALIBRATED_DISCOUNT)


def params(label, **kw):
    return NEVER.with_(scenario=ClosureScenario.parse(label), **kw)


@pytest.fixture(scope="module")
def never_table():
    return dp.solve(NEVER)


def test_state_count():
    assert dp.StateSpace((0, 1)).size == 15 * 2 * 32
    assert dp.StateSpace((0, 1), periodic=True).size == 15 * 2 * 32 * 5
    assert dp.StateSpace((0, 0.5, 1)).size == 15 * 2 * 243


@given(st.integers(0, 15 * 2 * 243 * 5 - 1))
def test_encode_decode_roundtrip(idx):
    sp = dp.StateSpace((0, 0.5, 1), periodic=True)
    s, c, digits, p = sp.decode(idx)
    assert sp.encode(s, c, digits, p) == idx


def test_empty_grid_rejected():
    with pytest.raises(ValueError):
        dp.StateSpace(())


def test_constant_reward_geometric_series():
    # no tax and free closure: every status pays R, so V = R / (1 - gamma)
    p = TaxParams(tax_rate=0.0, closure_cost=0.0, revenue=1.0, discount=0.5,
                  scenario=ClosureScenario.parse("bernoulli:0.3"))
    table = dp.solve(p, tolerance=1e-12)
    assert np.allclose(table.values, 2.0, atol=1e-10)


def test_residuals_contract():
    backup = dp.Backup(NEVER)
    table = dp.empty_table(backup.space)
    res = []
    for _ in range(40):
        table, r = dp.bellman_backup(table, NEVER, backup=backup)
        res.append(r)
    g = NEVER.discount
    for a, b in zip(res, res[1:]):
        assert b <= a + 1e-9
        assert b <= g * a + 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.sampled_from(["never", "bernoulli:0.2", "always", "periodic"]))
def test_contraction_property(seed, label):
    p = params(label)
    backup = dp.Backup(p)
    rng = np.random.default_rng(seed)
    v = rng.normal(scale=100, size=backup.space.shape)
    w = rng.normal(scale=100, size=backup.space.shape)
    lhs = np.abs(backup(v) - backup(w)).max()
    assert lhs <= p.discount * np.abs(v - w).max() + 1e-9


def test_never_policy_full_evasion(never_table):
    assert np.all(never_table.space.grid[never_table.policy_u1] == 1.0)


def test_never_start_value(never_table):
    assert never_table.start_value(NEVER) == pytest.approx(dp.NEVER_REFERENCE_VALUE, rel=1e-3)
    assert never_table.residual <= 1e-9


def test_value_lookup_and_action(never_table):
    s = FirmState(15, False, (0.0,) * 5)
    assert never_table.value(s) == pytest.approx(never_table.start_value(NEVER))
    assert never_table.action(s).evasion_level == 100


@pytest.mark.parametrize("label", ["never", "always", "periodic"])
def test_bang_bang_on_finer_grid(label):
    p = params(label)
    coarse = dp.solve(p, (0.0, 1.0), tolerance=1e-8)
    fine = dp.solve(p, (0.0, 0.5, 1.0), tolerance=1e-8)
    # coarse grid states embed in the fine grid at digits {0, 2}
    sel = np.array([all(d in (0, 2) for d in digits) for digits in fine.space.digits])
    assert np.allclose(fine.values[:, :, sel], coarse.values, atol=1e-6)


def test_revenue_homogeneity(never_table):
    doubled = dp.solve(NEVER.with_(revenue=200.0))
    assert np.allclose(doubled.values, 2 * never_table.values, rtol=1e-9, atol=1e-6)


def test_scenario_ordering():
    vals = {lab: dp.solve(params(lab)).start_value(params(lab))
            for lab in ("never", "bernoulli:0.2", "periodic", "always")}
    assert vals["never"] < vals["bernoulli:0.2"] < vals["periodic"] < vals["always"]


def test_calibrate_discount():
    g = dp.calibrate_discount(TaxParams())
    assert 0.9 < g < 0.999
    v = dp.solve(TaxParams(discount=g)).start_value(TaxParams())
    assert v == pytest.approx(dp.NEVER_REFERENCE_VALUE, rel=1e-3)
    assert g == pytest.approx(CALIBRATED_DISCOUNT, rel=1e-6)


def test_calibrate_discount_unbracketed():
    with pytest.raises(ValueError):
        dp.calibrate_discount(TaxParams(), target=1e9)


def test_non_convergence_reported():
    with pytest.raises(dp.ConvergenceError):
        dp.solve(NEVER, max_iter=3)


@pytest.mark.parametrize("label", ["never", "bernoulli:0.2", "always", "periodic"])
def test_greedy_policy_monte_carlo(label):
    p = params(label)
    table = dp.solve(p)
    ev = evaluate_policy(table.batch_policy(), p, episodes=10_000, steps=250, seed=11, keep_samples=False)
    assert ev.discounted_utility == pytest.approx(table.start_value(p), rel=0.01)


def test_export_csv_row_count(tmp_path, never_table):
    path = dp.export_csv(never_table, tmp_path / "v.csv")
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert len(rows) - 1 == never_table.space.size
