import numpy as np
from numpy.testing import assert_allclose
import pytest

from shared import autodiff as ad
from shared.autodiff import Graph, Tensor, finite_diff_check, no_grad
from shared.errors import GraphStateError, NonDifferentiableError, NonFiniteError, ShapeError
from shared.optim import Adam, AdamState, adam_step
from shared.rng import child_seed, stream


TOLERANCE = 1e-5


def leaf(rng, *shape, positive: bool = False) -> Tensor:
    data = rng.standard_normal(shape)
    if positive:
        data = np.abs(data) + 0.5
    return Tensor(data, requires_grad=True)


UNARY = {
    "exp": ad.exp,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "abs": ad.absolute,
    "square": lambda x: ad.pow_scalar(x, 2.0),
    "neg": ad.neg,
    "softmax": lambda x: ad.softmax(x) * np.arange(5.0),
    "mean_rows": lambda x: ad.mean(x, axis=1),
    "transpose": lambda x: ad.transpose(x) * np.arange(4.0)[:, None],
    "slice": lambda x: ad.getitem(x, (slice(None), slice(1, 3))),
    "take": lambda x: ad.take(x, [4, 0, 0, 2], axis=1),
    "l1": ad.l1_norm,
}


class TestGradients:
    @pytest.mark.parametrize("name", sorted(UNARY))
    def test_unary(self, name, rng):
        graph = Graph(lambda x: UNARY[name](x), {"x": (4, 5)}, name=name)
        assert finite_diff_check(graph, {"x": leaf(rng, 4, 5)}) < TOLERANCE

    @pytest.mark.parametrize("fn", [ad.log, ad.sqrt])
    def test_positive_domain(self, fn, rng):
        graph = Graph(lambda x: fn(x), ["x"])
        assert finite_diff_check(graph, {"x": leaf(rng, 3, 3, positive=True)}) < TOLERANCE

    @pytest.mark.parametrize("op", [ad.add, ad.sub, ad.mul, ad.div])
    def test_broadcast_binary(self, op, rng):
        graph = Graph(lambda a, b: op(a, b), {"a": (3, 4), "b": (1, 4)})
        inputs = {"a": leaf(rng, 3, 4), "b": leaf(rng, 1, 4, positive=True)}
        assert finite_diff_check(graph, inputs) < TOLERANCE

    def test_batched_matmul(self, rng):
        graph = Graph(lambda a, b: ad.matmul(a, b), ["a", "b"])
        assert finite_diff_check(graph, {"a": leaf(rng, 2, 3, 4), "b": leaf(rng, 4, 5)}) < TOLERANCE

    @pytest.mark.parametrize("stride,padding", [(1, "same"), (2, "same"), (1, "valid"), (2, "valid")])
    def test_conv2d(self, stride, padding, rng):
        graph = Graph(lambda x, w, b: ad.conv2d(x, w, b, stride=stride, padding=padding), ["x", "w", "b"])
        inputs = {"x": leaf(rng, 2, 3, 6, 5), "w": leaf(rng, 4, 3, 3, 3), "b": leaf(rng, 4)}
        assert finite_diff_check(graph, inputs) < TOLERANCE

    def test_upsample_and_concat(self, rng):
        graph = Graph(lambda x, y: ad.concat([ad.upsample2x(x), y], axis=1) * 1.5, ["x", "y"])
        assert finite_diff_check(graph, {"x": leaf(rng, 1, 2, 2, 3), "y": leaf(rng, 1, 1, 4, 6)}) < TOLERANCE

    def test_losses(self, rng):
        targets = np.array([0, 2, 1])
        graph = Graph(lambda z, t: ad.cross_entropy(z, targets) + ad.mse(z, t), ["z", "t"])
        assert finite_diff_check(graph, {"z": leaf(rng, 3, 4), "t": leaf(rng, 3, 4)}) < TOLERANCE

    def test_complex_mul(self, rng):
        graph = Graph(lambda a, b: ad.complex_mul(a, ad.complex_conj(b)), ["a", "b"])
        assert finite_diff_check(graph, {"a": leaf(rng, 5, 2), "b": leaf(rng, 5, 2)}) < TOLERANCE

    def test_complex_mul_matches_numpy(self, rng):
        a, b = rng.standard_normal(6) + 1j * rng.standard_normal(6), rng.standard_normal(6) + 1j * rng.standard_normal(6)
        assert_allclose(ad.to_complex(ad.complex_mul(ad.to_pair(a), ad.to_pair(b))), a * b)

    def test_injected_fault_is_detected(self, rng):
        graph = Graph(lambda x: ad.pow_scalar(x, 3.0), ["x"])
        x = leaf(rng, 4)
        wrong = {"x": 3.0 * x.data**2 + 0.1}
        assert finite_diff_check(graph, {"x": x}, analytic=wrong) > 1e-3

    def test_sampled_check(self, rng):
        graph = Graph(lambda x: ad.tanh(x), ["x"])
        assert finite_diff_check(graph, {"x": leaf(rng, 50, 50)}, max_per_leaf=20, rng=rng) < TOLERANCE


SMOOTH_UNARY = [
    ad.tanh,
    ad.sigmoid,
    ad.neg,
    lambda h: h * ad.tanh(h),
    lambda h: ad.exp(ad.tanh(h)),
    lambda h: ad.softmax(h) * 3.0,
    lambda h: ad.transpose(h),
    lambda h: h + ad.mean(h, axis=1, keepdims=True),
]

SMOOTH_BINARY = [
    ad.add,
    ad.sub,
    ad.mul,
    lambda h, y: h / (1.0 + ad.sigmoid(y)),
    lambda h, y: ad.matmul(h, y) * 0.5,
    lambda h, y: h + ad.getitem(y, (slice(0, 1),)),
]


def random_composition(rng: np.random.Generator, depth: int):
    """Chain of ``depth`` primitives over (4, 4) inputs x and y, weighted so sum() is not symmetric."""
    pools = (SMOOTH_UNARY, SMOOTH_BINARY)
    steps = [(binary, pools[binary][int(rng.integers(0, len(pools[binary])))]) for binary in rng.integers(0, 2, size=depth).tolist()]
    weights = rng.standard_normal((4, 4))

    def fn(x, y):
        h = x
        for binary, op in steps:
            h = op(h, y) if binary else op(h)
        return h * weights

    return fn


class TestRandomGraphs:
    def test_compositions_match_finite_differences(self):
        rng = stream(0, "random-graphs")
        worst = 0.0
        for index in range(120):
            graph = Graph(random_composition(rng, int(rng.integers(2, 6))), {"x": (4, 4), "y": (4, 4)}, name=f"random{index}")
            error = finite_diff_check(graph, {"x": leaf(rng, 4, 4), "y": leaf(rng, 4, 4)})
            worst = max(worst, error)
        assert worst < 1e-4


class TestGraph:
    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        graph = Graph(lambda x: x * x + x, ["x"])
        graph.forward({"x": x})
        assert_allclose(graph.backward()["x"], [5.0])

    def test_backward_before_forward(self):
        with pytest.raises(GraphStateError):
            Graph(lambda x: x, ["x"]).backward()

    def test_non_finite_forward(self):
        graph = Graph(lambda x: ad.log(x), ["x"])
        with np.errstate(all="ignore"), pytest.raises(NonFiniteError) as info:
            graph.forward({"x": Tensor(np.array([0.0, 1.0]), requires_grad=True)})
        assert info.value.op == "log"

    def test_argmax_on_gradient_path(self):
        graph = Graph(lambda x: ad.argmax(x) * 2.0, ["x"])
        graph.forward({"x": Tensor(np.eye(3), requires_grad=True)})
        with pytest.raises(NonDifferentiableError):
            graph.backward()

    def test_input_shape_checked(self):
        graph = Graph(lambda x: x, {"x": (2, None)})
        with pytest.raises(ShapeError):
            graph.forward({"x": np.zeros((3, 4))})
        with pytest.raises(ShapeError):
            graph.forward({"y": np.zeros((2, 4))})

    def test_straight_through_passes_gradient(self):
        x = Tensor(np.array([0.3, -1.7]), requires_grad=True)
        out = ad.straight_through(x, np.round)
        assert_allclose(out.data, [0.0, -2.0])
        out.sum().backward()
        assert_allclose(x.grad, [1.0, 1.0])

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with no_grad():
            y = ad.exp(x) * 2.0
        assert y.parents == () and not y.requires_grad
        assert (ad.exp(x) * 2.0).requires_grad


class TestAdam:
    def test_first_step_has_learning_rate_size(self):
        params = {"w": np.array([1.0, -2.0])}
        updated, state = adam_step(params, {"w": np.array([0.5, -3.0])}, AdamState(lr=0.01))
        assert state.t == 1
        assert_allclose(updated["w"], [0.99, -1.99], atol=1e-6)

    def test_minimises_quadratic(self):
        w = Tensor(np.array([3.0, -4.0]), requires_grad=True)
        optimizer = Adam({"w": w}, lr=0.1)
        for _ in range(500):
            optimizer.zero_grad()
            ad.tsum(w * w).backward()
            optimizer.step()
        assert np.all(np.abs(w.data) < 5e-2)

    def test_non_finite_gradient_aborts_step(self):
        params = {"w": np.zeros(2)}
        state = AdamState()
        with pytest.raises(NonFiniteError):
            adam_step(params, {"w": np.array([np.nan, 0.0])}, state)
        assert state.t == 0

    def test_gradient_shape_checked(self):
        with pytest.raises(ShapeError):
            adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


class TestStreams:
    def test_same_path_same_draws(self):
        assert_allclose(stream(7, "channel", "image", 3).random(5), stream(7, "channel", "image", 3).random(5))

    def test_paths_are_independent(self):
        assert not np.allclose(stream(7, "channel").random(5), stream(7, "noise").random(5))
        assert not np.allclose(stream(7, "channel").random(5), stream(8, "channel").random(5))

    def test_child_seed_range(self):
        seed = child_seed(stream(0, "x"))
        assert 0 <= seed < 2**63

    def test_negative_seed(self):
        with pytest.raises(ValueError):
            stream(-1, "x")
