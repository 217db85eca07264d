import csv
import json

import numpy as np
import pytest

from fluidtree.exceptions import EmptyingFailed, UnstableNetwork, ValidationError
from fluidtree.fluid_solver import (
    DiscretizationConfig, costate_scale, default_horizon, discretize, initial_control,
    make_grid, priority_indices, solve_fluid, verify_pontryagin,
)
from fluidtree.lp import solve_lp
from fluidtree.network import (
    NetworkSpec, make_crisscross, make_rybko_stolyar, random_reentrant,
)

from oracles import workload_by_hand

CC = make_crisscross()
RS = make_rybko_stolyar()


def one_class(lam=0.0):
    return NetworkSpec(mu=[1.0], lam=[lam], c=[1.0], successor=[None], server_of=[0], m=1)


def test_default_horizon_zero_state():
    assert default_horizon(CC, [0, 0, 0]) == 0.0


def test_default_horizon_by_hand():
    x0 = np.array([1.0, 1.0, 1.0])
    # work per server: D (-A)^{-1} x0, via the same elimination oracle with lam = -x0
    work = workload_by_hand(CC.A, CC.D, x0)
    rho = workload_by_hand(CC.A, CC.D, CC.lam)
    assert default_horizon(CC, x0) == pytest.approx(2 * np.max(work / (1 - rho)))
    # mu = (1.5, 1, 2): server 1 needs 1/1.5 + 1/1 = 5/3, rho_1 = 5/6
    assert default_horizon(CC, x0) == pytest.approx(20.0)


@pytest.mark.parametrize("alpha", [0.5, 2.0, 10.0])
def test_default_horizon_homogeneous(alpha):
    x0 = np.array([0.3, 0.1, 0.7])
    assert default_horizon(CC, alpha * x0) == pytest.approx(alpha * default_horizon(CC, x0))


def test_default_horizon_unstable():
    with pytest.raises(UnstableNetwork):
        default_horizon(make_crisscross(lambda1=1.0), [1, 1, 1])


def test_config_validation():
    for kw in [dict(T=-1.0), dict(T="soon"), dict(N_intervals=1), dict(grading=0.5),
               dict(empty_tol=0.0)]:
        with pytest.raises(ValidationError):
            DiscretizationConfig(**kw)


def test_bad_initial_state():
    with pytest.raises(ValidationError):
        solve_fluid(CC, [1.0, -1.0, 0.0])
    with pytest.raises(ValidationError):
        solve_fluid(CC, [1.0, 1.0])


def test_two_interval_example():
    cfg = DiscretizationConfig(T=2.0, N_intervals=2, grading=1.0)
    sol = solve_fluid(one_class(), [1.0], cfg)
    np.testing.assert_allclose(sol.x_nodes.ravel(), [1.0, 0.0, 0.0], atol=1e-12)
    assert sol.u_pieces[0, 0] == pytest.approx(1.0)
    assert sol.objective == pytest.approx(0.5)


def test_empty_system():
    spec = make_crisscross(lambda1=0.0, lambda2=0.0)
    sol = solve_fluid(spec, [0.0, 0.0, 0.0])
    assert sol.T == 1.0
    assert sol.objective == pytest.approx(0.0, abs=1e-12)
    rep = verify_pontryagin(spec, sol, 1e-6)
    # no effort anywhere, so every (interval, server) pair passes vacuously;
    # the duals of an all-zero solution are not unique, so y(T) is not checked
    assert np.all(sol.u_pieces <= 1e-6)
    assert rep.pass_fraction == 1.0


def test_empty_start_with_arrivals():
    sol = solve_fluid(CC, [0.0, 0.0, 0.0])
    assert sol.T == 1.0
    assert sol.objective == pytest.approx(0.0, abs=1e-9)


@pytest.mark.parametrize("N", [2, 10, 40])
def test_lp_dimensions(N):
    n, m = RS.n, RS.m
    lp = discretize(RS, [1, 1, 1, 1], DiscretizationConfig(N_intervals=N))
    assert lp.eq_matrix.shape == (N * (n + m) + n, N * (2 * n + m) + n)


@pytest.mark.parametrize("x0, expected", [
    ([1.0, 1.0, 0.1], [1.0, 0.0, 1.0]),
    ([1.0, 1.0, 1.0], [0.0, 1.0, 1.0]),
])
def test_crisscross_initial_control(x0, expected):
    np.testing.assert_allclose(initial_control(solve_fluid(CC, x0)), expected, atol=1e-6)


@pytest.mark.parametrize("spec, x0", [
    (CC, [0.4, 0.8, 0.2]),
    (RS, [0.5, 0.2, 0.3, 0.7]),
])
def test_value_scaling(spec, x0):
    x0 = np.asarray(x0)
    v1 = solve_fluid(spec, x0).objective
    v2 = solve_fluid(spec, 2 * x0).objective
    assert v2 / (4 * v1) == pytest.approx(1.0, abs=0.02)


@pytest.mark.parametrize("spec, x0", [
    (CC, [1.0, 1.0, 1.0]),
    (RS, [1.0, 0.0, 1.0, 1.0]),
    (random_reentrant(2, np.random.default_rng(3)), np.full(6, 0.4)),
], ids=["crisscross", "rybko", "reentrant"])
def test_solution_invariants(spec, x0):
    sol = solve_fluid(spec, x0, DiscretizationConfig(N_intervals=100))
    feas = 1e-7
    assert sol.x_nodes.min() >= -feas
    assert (sol.u_pieces @ spec.D.T).max() <= 1 + feas
    # dynamics replay
    x = np.asarray(x0, float)
    for k, h in enumerate(sol.steps):
        x = x + h * (spec.A @ sol.u_pieces[k] + spec.lam_arr)
        np.testing.assert_allclose(x, sol.x_nodes[k + 1], atol=1e-9)
    # cost is the trapezoid integral of c.x
    cx = sol.x_nodes @ spec.c_arr
    assert sol.objective == pytest.approx(np.sum(sol.steps * (cx[:-1] + cx[1:]) / 2), rel=1e-9)
    assert np.abs(sol.x_nodes[-1]).max() <= 1e-6 * (1 + np.abs(x0).max())
    for i, t in enumerate(sol.depletion):
        if np.asarray(x0)[i] > 0:
            assert t is not None and sol.state_at(t)[i] <= 1e-6 * (1 + np.abs(x0).max())


def test_refinement_never_hurts():
    x0 = [0.7, 0.4, 0.3]
    cfg = DiscretizationConfig(N_intervals=50)
    coarse = solve_fluid(CC, x0, cfg)
    fine = solve_fluid(CC, x0, DiscretizationConfig(N_intervals=100))
    # graded grids with N and 2N are nested
    np.testing.assert_allclose(make_grid(1.0, 100)[::2], make_grid(1.0, 50), rtol=1e-14)
    assert fine.objective <= coarse.objective + 1e-8
    refined = solve_fluid(CC, x0, DiscretizationConfig(N_intervals=50, refine=True))
    assert len(refined.grid) > len(coarse.grid)
    assert refined.objective <= coarse.objective + 1e-8


def test_horizon_too_short():
    with pytest.raises(EmptyingFailed):
        solve_fluid(CC, [1.0, 1.0, 1.0], DiscretizationConfig(T=1.0))


def test_highs_and_simplex_agree():
    x0 = [0.5, 0.2, 0.6]
    cfg = DiscretizationConfig(N_intervals=20)
    a = solve_fluid(CC, x0, cfg)
    b = solve_fluid(CC, x0, DiscretizationConfig(N_intervals=20, lp_method="simplex"))
    assert a.objective == pytest.approx(b.objective, rel=1e-8)


def test_priority_indices():
    assert np.all(priority_indices(CC, np.zeros(3)) == 0)
    assert priority_indices(one_class(), [2.0]) == pytest.approx([-2.0])
    lit = make_crisscross(mu=(1.5, 2.0, 1.0))
    assert priority_indices(lit, [1.0, 1.0, 1.0]) == pytest.approx([0.0, -2.0, -1.0])


@pytest.mark.parametrize("spec, x0", [
    (CC, [1.0, 1.0, 1.0]),
    (CC, [1.0, 1.0, 0.1]),
    (RS, [1.0, 1.0, 1.0, 1.0]),
    (RS, [1.0, 0.0, 1.0, 1.0]),
], ids=["cc-below", "cc-above", "rs-interior", "rs-boundary"])
def test_pontryagin(spec, x0):
    sol = solve_fluid(spec, x0)
    rep = verify_pontryagin(spec, sol, 1e-4 * costate_scale(spec, sol))
    assert rep.pass_fraction >= 0.99
    assert rep.terminal_ok
    # on positive stretches the costate drops at rate c
    assert rep.slope_fraction >= 0.99
    assert rep.indices.shape == (len(sol.u_pieces), spec.n)
    assert 0.0 <= rep.empty_costate_fraction <= 1.0


def test_costate_positive_on_split_arc():
    # After class 1 empties, server 1 splits effort to hold it at zero while
    # class 2 drains. Both controls are interior, so their reduced costs
    # vanish and y1 = y3 + (mu2 / mu1) y2 > 0.
    sol = solve_fluid(CC, [1.0, 1.0, 1.0])
    k = sol.interval_of(5.0)
    u = sol.u_pieces[k]
    y = sol.costate_nodes[k + 1]
    assert sol.x_nodes[k, 0] < 1e-9 and 0 < u[0] < 1 and 0 < u[1] < 1
    mu = CC.mu_arr
    assert y[0] == pytest.approx(y[2] + mu[1] / mu[0] * y[1], rel=1e-6)
    assert y[0] > 0.1


def test_exports(tmp_path):
    sol = solve_fluid(CC, [1.0, 1.0, 1.0], DiscretizationConfig(N_intervals=20))
    rep = verify_pontryagin(CC, sol, 1e-3)
    d = json.loads(json.dumps(sol.to_dict(rep)))
    assert set(d) >= {"grid", "u_pieces", "x_nodes", "objective", "costate_nodes",
                      "depletion", "pontryagin"}
    path = tmp_path / "traj.csv"
    sol.write_trajectory_csv(path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x_1", "x_2", "x_3", "u_1", "u_2", "u_3"]
    assert len(rows) == 22
    assert float(rows[1][4]) == sol.u_pieces[0, 0]
