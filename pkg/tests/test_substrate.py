import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ldelab.errors import ContractError, NumericError, ShapeError
from ldelab.gradsuite import primitive_checks
from ldelab.substrate import tensor as ops
from ldelab.substrate.gradcheck import grad_check
from ldelab.substrate.linalg import sym_eig
from ldelab.substrate.optim import Adam, MomentumSGD, clip_by_global_norm
from ldelab.substrate.rng import RngStream, derive_seed
from ldelab.substrate.tensor import Tape, forward_backward


class TestForwardBackward:
    def test_square_sum(self):
        tape = Tape()
        x = tape.leaf([3.0])
        loss = ops.sum_(x * x)
        assert forward_backward(tape, loss)[x.id].tolist() == [6.0]

    def test_concat_sum_gives_ones(self):
        tape = Tape()
        a = tape.leaf(np.arange(6.0).reshape(2, 3))
        b = tape.leaf(np.arange(3.0).reshape(1, 3))
        g = forward_backward(tape, ops.sum_(ops.concat([a, b], axis=0)))
        np.testing.assert_array_equal(g[a.id], np.ones((2, 3)))
        np.testing.assert_array_equal(g[b.id], np.ones((1, 3)))

    def test_softmax_cross_entropy_matches_two_point_difference(self):
        # 2-point stencil, h = 1e-5, relative error < 1e-8
        r = np.random.default_rng(0)
        logits = r.normal(size=3)
        label = 1

        def value(z):
            z = z - z.max()
            return -(z[label] - np.log(np.exp(z).sum()))

        tape = Tape()
        x = tape.leaf(logits)
        loss = -ops.getitem(ops.log_softmax(x), label)
        g = forward_backward(tape, loss)[x.id]
        h = 1e-5
        for i in range(3):
            e = np.zeros(3)
            e[i] = h
            num = (value(logits + e) - value(logits - e)) / (2 * h)
            assert abs(g[i] - num) / max(abs(g[i]), abs(num)) < 1e-8

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        x = tape.leaf(np.ones(3))
        with pytest.raises(ContractError):
            forward_backward(tape, x * 2.0)

    def test_shape_error_names_primitive(self):
        tape = Tape()
        with pytest.raises(ShapeError, match="matmul"):
            ops.matmul(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((4, 2))))
        with pytest.raises(ShapeError, match="add"):
            ops.add(tape.leaf(np.ones((2, 3))), tape.leaf(np.ones((4,))))

    def test_unused_leaf_gets_zero_gradient(self):
        tape = Tape()
        x = tape.leaf(np.ones(2))
        y = tape.leaf(np.ones(3))
        g = forward_backward(tape, ops.sum_(x))
        np.testing.assert_array_equal(g[y.id], np.zeros(3))

    def test_fanout_accumulates(self):
        tape = Tape()
        x = tape.leaf(np.array([2.0]))
        loss = ops.sum_(x * x + x * 3.0)
        assert forward_backward(tape, loss)[x.id][0] == pytest.approx(7.0)

    def test_single_precision_preserved(self):
        tape = Tape()
        x = tape.leaf(np.ones((2, 2), dtype=np.float32))
        w = tape.leaf(np.ones((2, 2), dtype=np.float32))
        out = ops.relu(x @ w)
        assert out.dtype == np.float32
        assert forward_backward(tape, ops.sum_(out))[w.id].dtype == np.float32

    def test_no_grad_tape_records_nothing(self):
        tape = Tape(grad=False)
        x = tape.leaf(np.ones(3))
        ops.sum_(ops.exp(x))
        assert tape.records == []

    def test_release_breaks_cycle(self):
        import gc
        import weakref

        gc.disable()
        try:
            tape = Tape()
            x = tape.leaf(np.ones(1000))
            forward_backward(tape, ops.sum_(ops.exp(x)))
            probe = weakref.ref(tape)
            tape.release()
            del tape, x
            assert probe() is None
        finally:
            gc.enable()


class TestGradCheck:
    def test_square_scalar(self):
        assert grad_check(lambda x: ops.sum_(x * x), np.array([3.0]), h=1e-5) < 1e-9

    @pytest.mark.parametrize("seed", range(5))
    def test_every_primitive_at_random_points(self, seed):
        worst = {name: thunk() for name, thunk in primitive_checks(seed)}
        bad = {k: v for k, v in worst.items() if not v < 1e-6}
        assert not bad

    @pytest.mark.filterwarnings("ignore:invalid value")
    def test_non_finite_value_reports_coordinate(self):
        # log is finite at the base point but one probe leaves the domain
        with pytest.raises(NumericError, match="coordinate 1"):
            grad_check(lambda x: ops.sum_(ops.log(x)), np.array([1.0, 1e-5]), h=1e-4)


def _random_symmetric(n, seed):
    a = np.random.default_rng(seed).normal(size=(n, n))
    return a + a.T


class TestSymEig:
    def test_diagonal(self):
        lam, v = sym_eig(np.diag([3.0, 1.0]))
        np.testing.assert_allclose(lam, [3.0, 1.0])
        np.testing.assert_allclose(np.abs(v), np.eye(2), atol=1e-15)

    def test_swap_matrix(self):
        lam, v = sym_eig([[0.0, 1.0], [1.0, 0.0]])
        np.testing.assert_allclose(lam, [1.0, -1.0], atol=1e-15)
        s = 1 / np.sqrt(2)
        np.testing.assert_allclose(np.abs(v[:, 0]), [s, s], atol=1e-12)
        assert v[0, 1] * v[1, 1] < 0

    def test_random_6x6(self):
        a = _random_symmetric(6, 0)
        lam, v = sym_eig(a)
        assert np.linalg.norm(v @ np.diag(lam) @ v.T - a) <= 1e-8 * np.linalg.norm(a)
        assert np.max(np.abs(v.T @ v - np.eye(6))) <= 1e-10

    def test_matches_lapack_eigenvalues(self):
        a = _random_symmetric(9, 1)
        np.testing.assert_allclose(sym_eig(a)[0], np.linalg.eigvalsh(a)[::-1], atol=1e-10)

    @pytest.mark.parametrize("n", [1, 2, 3, 7, 16, 32])
    def test_invariants_100_matrices(self, n):
        for seed in range(100 // 6 + 1):
            a = _random_symmetric(n, 1000 * n + seed)
            lam, v = sym_eig(a)
            assert np.all(np.diff(lam) <= 0)
            assert np.linalg.norm(v @ np.diag(lam) @ v.T - a) <= 1e-8 * max(np.linalg.norm(a), 1e-300)
            assert np.max(np.abs(v.T @ v - np.eye(n))) <= 1e-10

    def test_asymmetric_rejected(self):
        with pytest.raises(ContractError):
            sym_eig([[1.0, 2.0], [0.0, 1.0]])

    def test_zero_matrix(self):
        lam, v = sym_eig(np.zeros((3, 3)))
        np.testing.assert_array_equal(lam, np.zeros(3))
        np.testing.assert_array_equal(v, np.eye(3))


class TestRngStream:
    def test_same_seed_same_normals(self):
        a = RngStream(42).normal(1000)
        b = RngStream(42).normal(1000)
        assert a.tobytes() == b.tobytes()

    def test_different_seeds_differ_early(self):
        assert not np.array_equal(RngStream(1).normal(10), RngStream(2).normal(10))

    def test_normal_moments(self):
        z = RngStream(7).normal(100_000)
        assert abs(z.mean()) < 0.02
        assert abs(z.std() - 1.0) < 0.02

    def test_children_independent_of_sibling_draws(self):
        parent = RngStream(5)
        first = parent.child("a").normal(3)
        parent.normal(100)
        np.testing.assert_array_equal(parent.child("a").normal(3), first)

    def test_shuffle_and_integers(self):
        r = RngStream(9)
        items = list(range(20))
        out = r.shuffle(items)
        assert sorted(out) == items and out != items
        ints = RngStream(9).integers(3, 7, 1000)
        assert ints.min() == 3 and ints.max() == 6

    def test_derive_seed_is_stable(self):
        # frozen value: a change here breaks reproducibility of every artifact
        assert derive_seed(0, "population") == derive_seed(0, "population")
        assert derive_seed(0, "population") != derive_seed(0, "populatioN")
        assert 0 <= derive_seed("x") < 2 ** 64

    def test_reproducible_across_processes(self):
        code = "from ldelab.substrate.rng import RngStream; print(RngStream(11).normal(5).tobytes().hex())"
        outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout
                for _ in range(2)}
        assert len(outs) == 1
        assert outs.pop().strip() == RngStream(11).normal(5).tobytes().hex()

    @given(st.integers(min_value=0, max_value=2 ** 64 - 1))
    @settings(max_examples=30, deadline=None)
    def test_uniform_in_range(self, seed):
        u = RngStream(seed).uniform(size=50)
        assert np.all((u >= 0) & (u < 1))


class TestOptimizers:
    def test_momentum_sgd_quadratic(self):
        params = {"x": np.array([5.0])}
        opt = MomentumSGD(lr=0.1, momentum=0.9)
        for _ in range(300):
            opt.step(params, {"x": 2 * params["x"]})
        assert abs(params["x"][0]) < 1e-3

    def test_plateau_halves_rate(self):
        opt = MomentumSGD(lr=0.01, window=5)
        for _ in range(10):
            opt.observe(1.0)
        assert opt.lr == pytest.approx(0.005)

    def test_adam_quadratic(self):
        params = {"x": np.array([3.0, -2.0])}
        opt = Adam(lr=0.05)
        for _ in range(500):
            opt.step(params, {"x": 2 * params["x"]})
        assert np.max(np.abs(params["x"])) < 1e-2

    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_by_global_norm(grads, 1.0) == pytest.approx(5.0)
        np.testing.assert_allclose([grads["a"][0], grads["b"][0]], [0.6, 0.8])
