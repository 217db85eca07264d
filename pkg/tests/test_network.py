import json
import warnings

import numpy as np
import pytest

from fluidtree.exceptions import SingularFlowMatrix, ValidationError
from fluidtree.network import (
    REENTRANT_M7_C, REENTRANT_M7_MU, NetworkSpec, StabilityWarning, build_matrices,
    is_stable, load_spec, make_crisscross, make_reentrant, make_rybko_stolyar,
    random_reentrant, save_spec, workload,
)

from oracles import workload_by_hand


def test_crisscross_matrices_literal_rates():
    spec = make_crisscross(mu=(1.5, 2.0, 1.0))
    A, D = build_matrices(spec)
    np.testing.assert_array_equal(A, [[-1.5, 0, 0], [0, -2, 0], [1.5, 0, -1]])
    np.testing.assert_array_equal(D, [[1, 1, 0], [0, 0, 1]])


def test_single_class():
    spec = NetworkSpec(mu=[1.0], lam=[0.0], c=[1.0], successor=[None], server_of=[0], m=1)
    A, D = build_matrices(spec)
    np.testing.assert_array_equal(A, [[-1.0]])
    np.testing.assert_array_equal(D, [[1.0]])


def test_rybko_stolyar_matrices():
    A, D = build_matrices(make_rybko_stolyar())
    np.testing.assert_array_equal(np.diag(A), [-6, -1.5, -6, -1.5])
    assert A[1, 0] == 6 and A[3, 2] == 6
    assert np.count_nonzero(A - np.diag(np.diag(A))) == 2
    np.testing.assert_array_equal(D, [[1, 0, 0, 1], [0, 1, 1, 0]])


def test_workload_examples():
    assert workload(make_crisscross(mu=(1.5, 2.0, 1.0))) == pytest.approx([7 / 12, 1 / 2])
    assert workload(make_rybko_stolyar()) == pytest.approx([5 / 6, 5 / 6])
    assert np.all(workload(make_crisscross(mu=(1, 1, 1), lambda1=0, lambda2=0)) == 0.0)
    assert np.all(workload(make_rybko_stolyar(lambda1=0, lambda3=0)) == 0.0)


@pytest.mark.parametrize("seed", range(5))
def test_workload_matches_elimination(seed):
    spec = random_reentrant(2, np.random.default_rng(seed), load=0.7)
    expected = workload_by_hand(spec.A, spec.D, spec.lam)
    assert workload(spec) == pytest.approx(expected, rel=1e-12)
    assert workload(spec).max() == pytest.approx(0.7)


def test_unstable_warns():
    spec = make_crisscross(lambda1=1.0)
    with pytest.warns(StabilityWarning):
        workload(spec)
    assert not is_stable(spec)
    assert is_stable(make_crisscross())


def test_reentrant_m1_chain():
    spec = make_reentrant(1, [1.0, 2.0, 3.0], 0.1, [1.0, 1.0, 1.0])
    assert spec.successor == (1, 2, None)
    assert spec.server_of == (0, 0, 0)


@pytest.mark.parametrize("m", [1, 2, 3, 7])
def test_reentrant_structure(m):
    n = 3 * m
    spec = make_reentrant(m, np.ones(n), 0.1, np.ones(n))
    np.testing.assert_array_equal(spec.D.sum(axis=0), np.ones(n))
    np.testing.assert_array_equal(spec.D.sum(axis=1), 3 * np.ones(m))
    assert spec.successor.count(None) == 1
    assert spec.successor[n - 1] is None
    assert np.count_nonzero(spec.lam) == 1 and spec.lam[0] > 0
    # every class is visited exactly once along the route from class 0
    seen, i = [], 0
    while i is not None:
        seen.append(i)
        i = spec.successor[i]
    assert sorted(seen) == list(range(n))
    # the route visits servers 0..m-1 three times in order
    assert [spec.server_of[i] for i in seen] == list(range(m)) * 3


def test_reentrant_m7_instance():
    spec = make_reentrant(7, REENTRANT_M7_MU, 0.001, REENTRANT_M7_C)
    assert spec.n == 21 and spec.m == 7
    assert spec.A[0, 0] == -0.143


def test_validation_errors():
    good = dict(mu=[1.0, 1.0], lam=[0.1, 0.0], c=[1.0, 1.0], successor=[1, None],
                server_of=[0, 0], m=1)
    NetworkSpec(**good)
    for key, value in [("mu", [1.0, 0.0]), ("lam", [-1.0, 0.0]), ("c", [1.0, -1.0]),
                       ("successor", [0, None]), ("successor", [5, None]),
                       ("server_of", [0, 1]), ("c", [1.0])]:
        with pytest.raises(ValidationError):
            NetworkSpec(**{**good, key: value})
    with pytest.raises(ValidationError):
        NetworkSpec(**{**good, "m": 2})


def test_routing_cycle_is_singular():
    with pytest.raises(SingularFlowMatrix):
        NetworkSpec(mu=[1.0, 1.0], lam=[0.0, 0.0], c=[1.0, 1.0], successor=[1, 0],
                    server_of=[0, 0], m=1).A


def test_matrices_read_only():
    spec = make_crisscross()
    with pytest.raises(ValueError):
        spec.A[0, 0] = 1.0


@pytest.mark.parametrize("spec", [
    make_crisscross(), make_rybko_stolyar(),
    random_reentrant(3, np.random.default_rng(1)),
], ids=["crisscross", "rybko", "reentrant"])
def test_json_round_trip_bitwise(spec, tmp_path):
    path = tmp_path / "spec.json"
    save_spec(spec, path)
    raw = json.loads(path.read_text())
    assert raw["n"] == spec.n and all(s >= 1 for s in raw["server_of"])
    back = load_spec(path)
    assert back == spec
    assert back.A.tobytes() == spec.A.tobytes()
    assert back.D.tobytes() == spec.D.tobytes()


def test_from_dict_errors():
    d = make_crisscross().to_dict()
    with pytest.raises(ValidationError):
        NetworkSpec.from_dict({k: v for k, v in d.items() if k != "mu"})
    with pytest.raises(ValidationError):
        NetworkSpec.from_dict({**d, "n": 4})


def test_build_deterministic():
    spec = make_rybko_stolyar()
    A1, _ = build_matrices(spec)
    A2, _ = build_matrices(spec)
    assert A1.tobytes() == A2.tobytes()
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        workload(spec)
