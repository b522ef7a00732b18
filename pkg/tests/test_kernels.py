import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_symmetric
from ectcontrol import kernels


def test_round_robin_schedule_covers_every_pair_once():
    for n in (1, 2, 3, 7, 10):
        sched = kernels.round_robin_schedule(n)
        pairs = [tuple(sorted(p)) for rnd in sched for p in rnd if p[0] >= 0]
        assert len(pairs) == len(set(pairs)) == n * (n - 1) // 2
        for rnd in sched:
            used = [i for p in rnd if p[0] >= 0 for i in p]
            assert len(used) == len(set(used))       # disjoint rotations within a round


@pytest.mark.parametrize("n", [1, 2, 3, 10, 40])
def test_jacobi_backends_agree_with_lapack(n, rng):
    a = random_symmetric(rng, n, stabilized=False)
    sched = kernels.round_robin_schedule(n)
    w1, v1, s1 = kernels.get_kernel("jacobi_eigh", "numba")(a, sched, 1e-12, 100)
    w2, v2, s2 = kernels.get_kernel("jacobi_eigh", "numpy")(a, sched, 1e-12, 100)
    assert s1 == s2 >= 0
    np.testing.assert_allclose(w1, w2, rtol=0, atol=1e-12)
    np.testing.assert_allclose(v1, v2, rtol=0, atol=1e-10)
    np.testing.assert_allclose(np.sort(w1), np.linalg.eigvalsh(a), atol=1e-10)


def test_jacobi_reports_nonconvergence(rng):
    a = random_symmetric(rng, 20, stabilized=False)
    _, _, sweeps = kernels.jacobi_eigh(a, kernels.round_robin_schedule(20), 1e-12, 1)
    assert sweeps == -1


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 2 ** 31 - 1))
def test_jacobi_reconstructs(n, seed):
    a = random_symmetric(np.random.default_rng(seed), n, stabilized=False)
    w, v, _ = kernels.jacobi_eigh(a, kernels.round_robin_schedule(n), 1e-12, 100)
    assert np.linalg.norm(v @ np.diag(w) @ v.T - a) <= 1e-10 * max(1.0, np.linalg.norm(a))


@pytest.mark.parametrize("out_node", [-1, 2])
def test_lti_backends_agree(out_node, rng):
    a = random_symmetric(rng, 8)
    b = np.zeros(8)
    b[[1, 4]] = 1.0
    u = rng.normal(size=50)
    x0 = rng.normal(size=8)
    o1, s1 = kernels.lti_simulate_numba(a, b, u, x0, 50, out_node, True)
    o2, s2 = kernels.lti_simulate_numpy(a, b, u, x0, 50, out_node, True)
    np.testing.assert_allclose(o1, o2, atol=1e-13)
    np.testing.assert_allclose(s1, s2, atol=1e-13)
    assert o1.shape == (51,) and s1.shape == (8, 51)


def test_lti_matches_explicit_recursion(rng):
    a = random_symmetric(rng, 5)
    b = np.array([1.0, 0, 0, 1.0, 0])
    u = rng.normal(size=20)
    out, states = kernels.lti_simulate(a, b, u, np.zeros(5), 20, -1, True)
    x = np.zeros(5)
    for k in range(20):
        x = a @ x + b * u[k]
        np.testing.assert_allclose(states[:, k + 1], x, atol=1e-13)
    assert out[-1] == pytest.approx(np.linalg.norm(x))
    _, no_states = kernels.lti_simulate(a, b, u, np.zeros(5), 20, -1, False)
    assert no_states.shape == (5, 0)


def test_gramian_backends_agree_and_match_closed_form(rng):
    a = random_symmetric(rng, 12)
    bmat = np.eye(12)[:, [0, 3, 7]]
    e1, t1, c1 = kernels.gramian_energy_numba(a, bmat, 1e-14, 100000, 0)
    e2, t2, c2 = kernels.gramian_energy_numpy(a, bmat, 1e-14, 100000, 0)
    assert c1 and c2 and t1 == t2
    np.testing.assert_allclose(e1, e2, rtol=1e-13)
    w, v = np.linalg.eigh(a)
    oracle = (v ** 2) @ (1 / (1 - w ** 2))
    np.testing.assert_allclose(e1, oracle[[0, 3, 7]], rtol=1e-10)
    fixed, terms, _ = kernels.gramian_energy(a, bmat, 1e-14, 100000, 1)
    np.testing.assert_allclose(fixed, 1.0)           # horizon 1: only the identity term
    assert terms == 1


def _mediation_data(rng, n=60, k=2):
    x = rng.normal(size=n)
    cov = rng.normal(size=(n, k))
    m = 0.5 * x + cov @ np.ones(k) * 0.2 + rng.normal(size=n)
    y = 0.4 * m + 0.1 * x + rng.normal(size=n)
    return x, m, y, cov


def _ab_lstsq(x, m, y, cov):
    d1 = np.column_stack([np.ones(len(x)), x, cov])
    a = np.linalg.lstsq(d1, m, rcond=None)[0][1]
    d2 = np.column_stack([np.ones(len(x)), x, m, cov])
    return a * np.linalg.lstsq(d2, y, rcond=None)[0][2]


def test_indirect_kernels_backends_agree_with_lstsq(rng):
    x, m, y, cov = _mediation_data(rng)
    idx = rng.integers(0, 60, size=(30, 60))
    ab1, ok1 = kernels.indirect_resampled_numba(x, m, y, cov, idx)
    ab2, ok2 = kernels.indirect_resampled_numpy(x, m, y, cov, idx)
    assert ok1.all() and ok2.all()
    np.testing.assert_allclose(ab1, ab2, rtol=1e-9, atol=1e-12)
    oracle = [_ab_lstsq(x[i], m[i], y[i], cov[i]) for i in idx[:5]]
    np.testing.assert_allclose(ab1[:5], oracle, rtol=1e-8)

    mstar = m[rng.permutation(60)][None, :].repeat(4, axis=0)
    g1, _ = kernels.indirect_given_m_numba(x, mstar, y, cov)
    g2, _ = kernels.indirect_given_m_numpy(x, mstar, y, cov)
    np.testing.assert_allclose(g1, g2, rtol=1e-9, atol=1e-12)
    assert g1[0] == pytest.approx(_ab_lstsq(x, mstar[0], y, cov), rel=1e-8)


def test_indirect_flags_singular_draw(rng):
    x, m, y, cov = _mediation_data(rng, n=20, k=0)
    idx = np.zeros((2, 20), dtype=np.int64)
    idx[1] = np.arange(20)
    for backend in ("numba", "numpy"):
        ab, ok = kernels.get_kernel("indirect_resampled", backend)(x, m, y, cov, idx)
        assert list(ok) == [False, True]


def test_bagged_trees_backends_agree(rng):
    x = rng.normal(size=(40, 5))
    y = np.where(x[:, 1] > 0, 3.0, -1.0) + 0.1 * rng.normal(size=40)
    xt = rng.normal(size=(7, 5))
    boot = rng.integers(0, 40, size=(8, 40))
    p1 = kernels.bagged_trees_numba(x, y, xt, boot, 3, 2)
    p2 = kernels.bagged_trees_numpy(x, y, xt, boot, 3, 2)
    np.testing.assert_allclose(p1, p2, atol=1e-12)
    truth = np.where(xt[:, 1] > 0, 3.0, -1.0)
    assert np.mean(np.abs(p1 - truth)) < 1.0


def test_single_stump_is_exact():
    x = np.arange(10, dtype=float)[:, None]
    y = np.where(x[:, 0] < 5, 0.0, 1.0)
    boot = np.arange(10)[None, :]
    pred = kernels.bagged_trees(x, y, np.array([[2.0], [7.0], [4.5]]), boot, 1, 1)
    np.testing.assert_array_equal(pred, [0.0, 1.0, 0.0])     # threshold at the midpoint 4.5, ties go left


def test_get_kernel_rejects_unknown():
    with pytest.raises(KeyError):
        kernels.get_kernel("nope")


def test_backend_env_validation(monkeypatch):
    monkeypatch.setenv("ECTCONTROL_BACKEND", "fortran")
    with pytest.raises(ValueError):
        kernels._select_backend()
    monkeypatch.setenv("ECTCONTROL_BACKEND", "numpy")
    assert kernels._select_backend() == "numpy"


def test_bagged_trees_backends_identical_with_many_near_ties(rng):
    # many features make exact and near-exact gain ties common
    x = rng.normal(size=(40, 200))
    y = rng.normal(size=40)
    boot = rng.integers(0, 40, size=(25, 40))
    np.testing.assert_array_equal(kernels.bagged_trees_numba(x, y, x[:5], boot, 3, 2),
                                  kernels.bagged_trees_numpy(x, y, x[:5], boot, 3, 2))


def test_numpy_backend_end_to_end():
    code = (
        "import json\n"
        "from ectcontrol import kernels\n"
        "from ectcontrol.synth import CohortGenSpec, generate_cohort\n"
        "from ectcontrol.cli import replicate\n"
        "c, _, _ = generate_cohort(CohortGenSpec(n_subjects=12, n_nodes=20, seed=1))\n"
        "r = replicate(c, ('age',), 200, 200, 1)\n"
        "print(json.dumps({'backend': kernels.BACKEND, 'ac': c.ac_mean.tolist(),\n"
        "                  'ci': r['mediation_diagram']['ac_mean']['ab_ci']}))\n")
    outs = {}
    for backend in ("numba", "numpy"):
        env = {**os.environ, "ECTCONTROL_BACKEND": backend}
        proc = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        outs[backend] = json.loads(proc.stdout)
    assert outs["numba"]["backend"] == "numba" and outs["numpy"]["backend"] == "numpy"
    np.testing.assert_allclose(outs["numba"]["ac"], outs["numpy"]["ac"], rtol=1e-12)
    np.testing.assert_allclose(outs["numba"]["ci"], outs["numpy"]["ci"], rtol=1e-9)
