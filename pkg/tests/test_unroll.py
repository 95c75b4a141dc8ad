import numpy as np
import pytest

from netmomentum.graphsolver import SolverConfig, pairwise_distances, pds_solve, vech
from netmomentum.unroll import (
    NumericError, UnrollParams, backward, forward, gradcheck, grad_vech, replay,
    unroll_backward, unroll_forward,
)


def random_V(seed, n=5, f=4):
    return np.random.default_rng(seed).normal(size=(n, f))


def test_init_defaults():
    p = UnrollParams.init(3)
    assert p.L == 3 and len(p.raw_alpha) == 4
    np.testing.assert_allclose(p.alpha, 1.0)
    np.testing.assert_allclose(p.beta, 1.0)
    np.testing.assert_allclose(p.gamma, 0.1)


def test_depth_zero_rejected():
    with pytest.raises(ValueError):
        UnrollParams.init(0)


def test_params_roundtrip():
    p = UnrollParams.init(4)
    p.raw_beta[2] = 0.3
    q = UnrollParams.from_json(p.to_json())
    np.testing.assert_array_equal(q.flat(), p.flat())
    np.testing.assert_array_equal(UnrollParams.from_flat(p.flat()).flat(), p.flat())


def test_tiny_gamma_freezes_at_zero():
    p = UnrollParams.init(5, gamma=1e-12)
    est, _ = forward(random_V(0), p)
    assert np.max(est.A) < 1e-9


def test_tape_length_and_replay():
    p = UnrollParams.init(6)
    est, tape = forward(random_V(1), p)
    assert len(tape) == 7
    np.testing.assert_array_equal(replay(tape, p)[0], vech(est.A))


def test_forward_is_deterministic():
    p = UnrollParams.init(6)
    a, _ = forward(random_V(2), p)
    b, _ = forward(random_V(2), p)
    assert a.A.tobytes() == b.A.tobytes()


def test_output_satisfies_constraints():
    est, _ = forward(random_V(3, n=7), UnrollParams.init(10))
    A = est.A
    assert np.array_equal(A, A.T) and np.all(A >= 0) and np.all(np.diag(A) == 0)


def test_sqrt_argument_bounded_away_from_zero():
    p = UnrollParams.init(8)
    p.raw_alpha[:] = np.linspace(-2, 1, 9)
    _, tape = forward(random_V(4), p)
    floor = 4 * np.min(p.alpha * p.gamma)
    for m in tape.layers:
        assert np.all(m["root"] ** 2 >= floor * (1 - 1e-12))


@pytest.mark.parametrize("seed", range(3))
def test_long_unroll_reaches_solver_fixed_point(seed):
    V = random_V(seed, n=8, f=3)
    est, _ = forward(V, UnrollParams.init(2000))
    ref = pds_solve(pairwise_distances(V), SolverConfig(tol=1e-12, max_iters=100_000))
    np.testing.assert_allclose(est.A, ref.A, atol=1e-4)


def test_zero_upstream_gives_zero_gradients():
    est, tape = forward(random_V(5), UnrollParams.init(4))
    g_raw, g_V = backward(tape, np.zeros_like(est.A))
    assert not g_raw.flat().any() and not g_V.any()


def test_backward_shape_check():
    est, tape = forward(random_V(5), UnrollParams.init(4))
    with pytest.raises(ValueError):
        backward(tape, np.zeros((3, 3)))


def test_gradcheck_passes():
    rep = gradcheck(n_instances=5)
    assert rep.passed, rep.to_dict()
    assert rep.worst_rel_error < 1e-4


def test_gradcheck_detects_corruption():
    assert not gradcheck(n_instances=2, corrupt=0.01).passed


def test_identical_rows_give_opposite_V_gradients():
    # rows 0 and 1 coincide; h depends on V0 - V1 only through the pair's
    # own distance and the shared rescaling, so a loss on the remaining
    # rows pulls both rows with equal and opposite forces around their mean
    V = random_V(6)
    V[1] = V[0]
    est, tape = forward(V, UnrollParams.init(4))
    G = np.random.default_rng(0).normal(size=est.A.shape)
    _, gV = backward(tape, G)
    eps = 1e-6
    for c in range(V.shape[1]):
        Vp = V.copy()
        Vp[0, c] += eps
        Vm = V.copy()
        Vm[0, c] -= eps
        fd = (np.sum(G * forward(Vp, UnrollParams.init(4))[0].A)
              - np.sum(G * forward(Vm, UnrollParams.init(4))[0].A)) / (2 * eps)
        assert gV[0, c] == pytest.approx(fd, rel=1e-5, abs=1e-9)


def test_batched_backward_matches_single():
    rng = np.random.default_rng(8)
    hs = np.stack([pairwise_distances(rng.normal(size=(4, 3))).h for _ in range(3)])
    gw = rng.normal(size=hs.shape)
    p = UnrollParams.init(3)
    _, tape = unroll_forward(hs, p)
    g_all, gh_all = unroll_backward(tape, gw)
    total = np.zeros_like(p.flat())
    for k in range(3):
        _, t1 = unroll_forward(hs[k], p)
        g1, gh1 = unroll_backward(t1, gw[k])
        total += g1.flat()
        np.testing.assert_allclose(gh_all[k], gh1[0], rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(g_all.flat(), total, rtol=1e-10, atol=1e-14)


def test_grad_vech_sums_both_triangles():
    G = np.arange(9.0).reshape(3, 3)
    assert grad_vech(G).tolist() == [1 + 3, 2 + 6, 5 + 7]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_layer_raises():
    p = UnrollParams.init(3)
    p.raw_gamma[1] = 800.0  # exp overflows
    with pytest.raises(NumericError):
        unroll_forward(np.ones((1, 3)), p)
