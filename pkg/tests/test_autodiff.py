import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fast_st.autodiff import (
    Adam,
    Tensor,
    bernoulli_kl,
    concat,
    cosine_rows,
    cross_entropy,
    layer_norm,
    matmul,
    maximum,
    minimum,
    no_grad,
    parameter,
    softmax_rows,
    stack,
    where,
)
from oracles import away_from_zero, max_grad_error

N_INSTANCES = 20
REL_TOL = 1e-4


def check_grads(build, inputs, seed):
    err = max_grad_error(build, inputs, seed)
    assert err < REL_TOL, f"relative error {err:.2e}"


def _shape_pair(rng):
    return (int(rng.integers(1, 4)), int(rng.integers(1, 5)))


UNARY = {
    "neg": lambda a: -a,
    "exp": lambda a: a.exp(),
    "tanh": lambda a: a.tanh(),
    "sigmoid": lambda a: a.sigmoid(),
    "gelu": lambda a: a.gelu(),
    "softmax": lambda a: a.softmax(axis=-1),
    "log_softmax": lambda a: a.log_softmax(axis=-1),
    "softmax_rows": softmax_rows,
    "sum_axis": lambda a: a.sum(axis=0),
    "mean_axis": lambda a: a.mean(axis=-1, keepdims=True),
    "cumsum": lambda a: a.cumsum(axis=-1),
    "transpose": lambda a: a.transpose(),
    "reshape": lambda a: a.reshape(-1),
    "getitem_slice": lambda a: a[:, :1],
    "getitem_fancy": lambda a: a[np.array([0, 0, -1])],
    "pow": lambda a: a**3,
}


class TestGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            check_grads(UNARY[name], [rng.normal(size=_shape_pair(rng))], seed)

    @pytest.mark.parametrize("name", ["log", "sqrt"])
    def test_positive_domain(self, name):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            x = rng.uniform(0.5, 2.0, size=_shape_pair(rng))
            check_grads(lambda a: getattr(a, name)(), [x], seed)

    @pytest.mark.parametrize("name", ["relu", "abs"])
    def test_kinked(self, name):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            check_grads(lambda a: getattr(a, name)(), [away_from_zero(rng, _shape_pair(rng))], seed)

    @pytest.mark.parametrize("op", ["add", "sub", "mul", "div"])
    def test_binary_broadcast(self, op):
        fns = {
            "add": lambda a, b: a + b,
            "sub": lambda a, b: a - b,
            "mul": lambda a, b: a * b,
            "div": lambda a, b: a / b,
        }
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            r, c = _shape_pair(rng)
            a = rng.normal(size=(r, c))
            b = rng.uniform(0.5, 2.0, size=(1, c))
            check_grads(fns[op], [a, b], seed)

    def test_matmul_batched(self):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            B, n, k, m = (int(v) for v in rng.integers(1, 4, size=4))
            check_grads(matmul, [rng.normal(size=(B, n, k)), rng.normal(size=(k, m))], seed)

    def test_concat_stack(self):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
            check_grads(lambda x, y: concat([x, y], axis=0), [a, b], seed)
            check_grads(lambda x, y: stack([x, y * 2.0], axis=1), [a, a + 1], seed)

    def test_where_min_max(self):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            a = rng.normal(size=(3, 4))
            b = a + away_from_zero(rng, (3, 4), 0.2)
            cond = rng.random((3, 4)) < 0.5
            check_grads(lambda x, y: where(cond, x, y), [a, b], seed)
            check_grads(minimum, [a, b], seed)
            check_grads(maximum, [a, b], seed)

    def test_layer_norm(self):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            d = int(rng.integers(2, 6))
            check_grads(layer_norm, [rng.normal(size=(2, 3, d)), rng.normal(size=d), rng.normal(size=d)], seed)

    def test_cosine_rows(self):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            check_grads(cosine_rows, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))], seed)

    def test_bernoulli_kl(self):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            p, q = rng.uniform(0.05, 0.95, size=(2, 5))
            check_grads(bernoulli_kl, [p, q], seed)

    @pytest.mark.parametrize("smoothing", [0.0, 0.1])
    def test_cross_entropy(self, smoothing):
        for seed in range(N_INSTANCES):
            rng = np.random.default_rng(seed)
            logits = rng.normal(size=(2, 3, 6))
            targets = rng.integers(0, 6, size=(2, 3))
            targets[0, 0] = 0
            check_grads(lambda x: cross_entropy(x, targets, ignore_index=0, smoothing=smoothing, reduction="sum"),
                        [logits], seed)
            check_grads(lambda x: cross_entropy(x, targets, reduction="none"), [logits], seed)


class TestForwardValues:
    def test_softmax_rows_sum_to_one(self):
        x = Tensor(np.random.default_rng(0).normal(size=(4, 7)) * 30)
        np.testing.assert_allclose(softmax_rows(x).data.sum(-1), 1.0, atol=1e-12)

    def test_log_softmax_matches_log_of_softmax(self):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 5)))
        np.testing.assert_allclose(x.log_softmax().data, np.log(x.softmax().data), atol=1e-12)

    def test_cross_entropy_uniform_logits(self):
        loss = cross_entropy(Tensor(np.zeros((4, 8))), np.arange(4))
        assert loss.item() == pytest.approx(np.log(8))

    def test_cross_entropy_ignores_padding(self):
        logits = Tensor(np.random.default_rng(2).normal(size=(1, 3, 5)))
        full = cross_entropy(logits, np.array([[1, 2, 3]]), reduction="none").data
        masked = cross_entropy(logits, np.array([[1, 0, 3]]), ignore_index=0, reduction="sum")
        assert masked.item() == pytest.approx(full[0, 0] + full[0, 2])

    def test_cross_entropy_out_of_range(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))

    def test_cosine_zero_row(self):
        a = Tensor(np.zeros((1, 3)), requires_grad=True)
        out = cosine_rows(a, np.ones((1, 3)))
        assert out.item() == 0.0
        out.sum().backward()
        assert np.all(a.grad == 0.0)

    def test_bernoulli_kl_zero_for_equal(self):
        p = np.array([0.1, 0.5, 0.9])
        np.testing.assert_allclose(bernoulli_kl(p, p).data, 0.0, atol=1e-15)

    def test_matmul_shape_error(self):
        with pytest.raises(ValueError):
            matmul(np.ones((2, 3)), np.ones((2, 3)))

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=1, max_size=8))
    def test_sigmoid_in_unit_interval(self, xs):
        out = Tensor(np.array(xs)).sigmoid().data
        assert np.all((out >= 0) & (out <= 1))


class TestGraph:
    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ValueError):
            (x * 2).backward()

    def test_grad_accumulates_over_reuse(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        (x * x + x).sum().backward()
        assert x.grad[0] == pytest.approx(5.0)

    def test_no_grad_builds_no_graph(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 3
        assert not y.requires_grad

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.array([1.0]), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.sum().backward()
        assert x.grad[0] == 1.0


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = parameter(np.ones(3))
        opt = Adam({"p": p})
        opt.step()
        np.testing.assert_array_equal(p.data, np.ones(3))

    def test_schedule(self):
        opt = Adam({"p": parameter(np.zeros(1))}, lr=1e-3, warmup=100)
        assert opt.current_lr(50) == pytest.approx(5e-4)
        assert opt.current_lr(100) == pytest.approx(1e-3)
        assert opt.current_lr(400) == pytest.approx(5e-4)

    def test_minimises_quadratic(self):
        p = parameter(np.array([3.0, -2.0]))
        opt = Adam({"p": p}, lr=0.1, warmup=1, clip_norm=None)
        for _ in range(1000):
            (p * p).sum().backward()
            opt.step()
        assert np.abs(p.data).max() < 0.1

    def test_state_roundtrip_is_exact(self):
        def run(steps, resume_at=None):
            p = parameter(np.array([1.0, 2.0]))
            opt = Adam({"p": p}, lr=0.05, warmup=2)
            for s in range(steps):
                if s == resume_at:
                    saved_p, saved = p.data.copy(), opt.state_dict()
                    p = parameter(saved_p)
                    opt = Adam({"p": p}, lr=0.05, warmup=2)
                    opt.load_state_dict(saved)
                ((p - 0.3) ** 2).sum().backward()
                opt.step()
            return p.data

        np.testing.assert_array_equal(run(6), run(6, resume_at=3))
