import numpy as np
import pytest

from fluidtree.dataset import Dataset, LabelBook, generate, GenerationConfig
from fluidtree.exceptions import NoApplicableTree, OverlappingCells, ValidationError
from fluidtree.fluid_solver import DiscretizationConfig, initial_control, solve_fluid
from fluidtree.network import NetworkSpec, make_crisscross, make_rybko_stolyar
from fluidtree.octree import ObliqueTree
from fluidtree.policy import (
    PartitionedPolicy, compare_cost, evaluate, feasible_projection, simulate,
)

CC = make_crisscross()
RS = make_rybko_stolyar()
CC_BOOK = LabelBook([[0.0, 1.0, 1.0], [1.0, 0.0, 1.0]])


def switching_tree():
    # x1 - 5.93 x3 <= 0.01 -> serve classes 2 and 3, else 1 and 3
    a = np.array([1.0, 0.0, -5.93])
    return ObliqueTree(nodes=[{"a": a, "b": 0.01, "left": 1, "right": 2},
                              {"leaf": 0}, {"leaf": 1}], n_features=3)


def test_act_examples():
    pol = PartitionedPolicy.single(switching_tree(), CC_BOOK)
    np.testing.assert_array_equal(pol.act([1.0, 1.0, 0.1]), [1.0, 0.0, 1.0])
    np.testing.assert_array_equal(pol.act([1.0, 0.3, 1.0]), [0.0, 1.0, 1.0])
    np.testing.assert_array_equal(pol.act([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0])


def test_fallback_to_closest_superset():
    leaf = lambda label: ObliqueTree(nodes=[{"leaf": label}], n_features=3)
    pol = PartitionedPolicy(cells=[[(0, 1, 2)], [(1, 2)], [(0, 1)]],
                            trees=[leaf(0), leaf(1), leaf(1)], book=CC_BOOK)
    assert pol.route((0, 1, 2)) == 0 and pol.fallback_events == 0
    # (1,) is in both (0, 1) and (1, 2); equal size, lexicographic tie-break
    assert pol.route((1,)) == 2 and pol.fallback_events == 1
    assert pol.route((0, 2)) == 0 and pol.fallback_events == 2
    narrow = PartitionedPolicy(cells=[[(0,)]], trees=[leaf(0)], book=CC_BOOK)
    with pytest.raises(NoApplicableTree):
        narrow.act([0.0, 1.0, 0.0])


def test_policy_validation():
    leaf = ObliqueTree(nodes=[{"leaf": 0}], n_features=3)
    with pytest.raises(OverlappingCells):
        PartitionedPolicy(cells=[[(0,)], [(0,)]], trees=[leaf, leaf], book=CC_BOOK)
    with pytest.raises(ValidationError):
        PartitionedPolicy.single(ObliqueTree(nodes=[{"leaf": 5}], n_features=3), CC_BOOK)
    with pytest.raises(ValidationError):
        PartitionedPolicy(cells=[None, None], trees=[leaf], book=CC_BOOK)


def test_save_load(tmp_path):
    pol = PartitionedPolicy(cells=[[(0, 1, 2)], None], trees=[switching_tree(), switching_tree()],
                            book=CC_BOOK)
    pol.save(tmp_path / "model")
    back = PartitionedPolicy.load(tmp_path / "model")
    assert back.cells == pol.cells and back.book == pol.book
    pts = np.random.default_rng(0).random((200, 3))
    assert all(np.array_equal(pol.act(x), back.act(x)) for x in pts)


def test_projection_interior_unchanged():
    u = np.array([0.0, 1.0, 1.0])
    np.testing.assert_array_equal(feasible_projection(CC, [1.0, 1.0, 1.0], u, 0.01), u)


def test_projection_empty_class():
    spec = NetworkSpec(mu=[2.0], lam=[0.0], c=[1.0], successor=[None], server_of=[0], m=1)
    assert feasible_projection(spec, [0.0], [1.0], 0.1) == pytest.approx([0.0])
    spec = NetworkSpec(mu=[2.0], lam=[0.5], c=[1.0], successor=[None], server_of=[0], m=1)
    assert feasible_projection(spec, [0.0], [1.0], 0.1) == pytest.approx([0.25])


def test_projection_server_overload_and_clip():
    u = feasible_projection(CC, [1.0, 1.0, 1.0], [0.9, 0.6, 1.4], 0.01)
    assert (CC.D @ u).max() <= 1.0 + 1e-15 and u.min() >= 0
    assert u[0] / u[1] == pytest.approx(1.5)


def test_projection_keeps_solver_split_controls():
    rng = np.random.default_rng(0)
    for _ in range(5):
        x = np.abs(rng.normal(size=4))
        x[1] = 0.0
        u = initial_control(solve_fluid(RS, x))
        assert 0 < u[0] < 1  # server splitting keeps class 2 empty
        np.testing.assert_allclose(feasible_projection(RS, x, u, 1e-3), u, atol=0.05)


def test_simulate_empty_system():
    spec = make_crisscross(lambda1=0.0, lambda2=0.0)
    pol = PartitionedPolicy.single(switching_tree(), CC_BOOK)
    res = simulate(spec, pol, [0.0, 0.0, 0.0], 5.0)
    assert res.cost == 0.0 and not res.states.any()
    assert compare_cost(spec, pol, [0.0, 0.0, 0.0]) == 1.0


def test_simulate_feasibility(tmp_path):
    pol = PartitionedPolicy.single(switching_tree(), CC_BOOK)
    h = 0.01
    res = simulate(CC, pol, [1.0, 1.0, 1.0], 20.0, h)
    assert (res.controls @ CC.D.T).max() <= 1.0 + 1e-12
    assert res.controls.min() >= 0.0
    assert res.violation <= h * CC.lam_arr.max() + 1e-12
    assert res.cost > 0 and res.terminal_norm < 0.05
    res.write_csv(tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().startswith("t,x_1,x_2,x_3,u_1")


def test_depth_zero_policy_single_class():
    spec = NetworkSpec(mu=[1.0], lam=[0.5], c=[1.0], successor=[None], server_of=[0], m=1)
    pol = PartitionedPolicy.single(ObliqueTree(nodes=[{"leaf": 0}], n_features=1), LabelBook([[1.0]]))
    assert compare_cost(spec, pol, [1.0]) == pytest.approx(1.0, abs=0.01)


def test_hand_tree_close_to_optimal():
    pol = PartitionedPolicy.single(switching_tree(), CC_BOOK)
    assert compare_cost(CC, pol, [0.2, 0.5, 0.8]) < 1.05


def test_evaluate_report():
    pol = PartitionedPolicy.single(switching_tree(), CC_BOOK)
    test, book, _ = generate(CC, GenerationConfig(M=10, seed=3))
    rep = evaluate(CC, pol, test, book, DiscretizationConfig(), cost_states=[[0.3, 0.3, 0.3]],
                   solve_samples=3)
    assert rep["accuracy"] >= 0.9 and rep["samples"] == len(test)
    assert set(rep["per_pattern_accuracy"]) == {"1,2,3"}
    assert len(rep["cost_ratios"]) == 1 and rep["speedup"] > 1
    assert sum(rep["confusion"].values()) == len(test)
