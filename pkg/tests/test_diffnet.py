import math

import numpy as np
import pytest

import diffnet as dn
from diffnet import DiagGaussian, MlpSpec, ParamSet
from errors import ConfigurationError, ConstructionError, DomainError


def small_params(seed):
    rng = np.random.default_rng(seed)
    return ParamSet({"w": rng.normal(size=(3, 2)), "v": rng.normal(size=2),
                     "ls": rng.uniform(-0.5, 0.5, size=2)}), rng


def loss_tanh_affine(x, z):
    return lambda p: dn.reduce_sum(dn.tanh(dn.add(dn.matmul(dn.const(x), dn.param(p, "w")), dn.param(p, "v"))))


def loss_relu_square(x, z):
    return lambda p: dn.reduce_mean(dn.square(dn.sub(dn.relu(dn.matmul(dn.const(x), dn.param(p, "w"))),
                                                     dn.param(p, "v"))))


def loss_exp_columns(x, z):
    return lambda p: dn.reduce_sum(dn.exp(dn.scale(dn.columns(dn.matmul(dn.const(x), dn.param(p, "w")), 0, 1), 0.5)))


def loss_minimum_neg(x, z):
    def fn(p):
        h = dn.matmul(dn.const(x), dn.param(p, "w"))
        return dn.reduce_sum(dn.minimum(h, dn.neg(dn.scale(h, 0.3))), axis=None)
    return fn


def loss_clip_mul(x, z):
    def fn(p):
        h = dn.matmul(dn.const(x), dn.param(p, "w"))
        return dn.reduce_sum(dn.mul(dn.clip(h, -0.7, 0.7), dn.param(p, "v")))
    return fn


def loss_gaussian_logprob(x, z):
    def fn(p):
        mean = dn.add(dn.matmul(dn.const(x), dn.param(p, "w")), dn.param(p, "v"))
        return dn.reduce_mean(dn.gaussian_logprob_node(mean, dn.param(p, "ls"), dn.const(z)))
    return fn


def loss_entropy_products(x, z):
    def fn(p):
        ent = dn.gaussian_entropy_node(dn.param(p, "ls"))
        return dn.add(dn.scale(ent, 0.1), dn.reduce_sum(dn.mul(dn.param(p, "v"), dn.param(p, "v"))))
    return fn


def loss_row_means(x, z):
    def fn(p):
        h = dn.tanh(dn.matmul(dn.const(x), dn.param(p, "w")))
        return dn.reduce_sum(dn.mul(dn.reduce_mean(h, axis=0), dn.exp(dn.param(p, "ls"))))
    return fn


BUILDERS = [loss_tanh_affine, loss_relu_square, loss_exp_columns, loss_minimum_neg, loss_clip_mul,
            loss_gaussian_logprob, loss_entropy_products, loss_row_means]


@pytest.mark.parametrize("seed", range(7))
@pytest.mark.parametrize("builder", BUILDERS, ids=lambda b: b.__name__)
def test_finite_diff_on_random_losses(builder, seed):
    params, rng = small_params(seed)
    x = rng.normal(size=(2, 3))
    z = rng.normal(size=(2, 2))
    report = dn.finite_diff_check(builder(x, z), params)
    assert report.passed, report.max_rel_error


def test_random_losses_cover_every_primitive():
    params, rng = small_params(0)
    x, z = rng.normal(size=(2, 3)), rng.normal(size=(2, 2))
    seen = set()
    for builder in BUILDERS:
        stack = [builder(x, z)(params)]
        while stack:
            node = stack.pop()
            seen.add(node.op)
            stack.extend(node.parents)
    assert seen == set(dn.PRIMITIVES)


def test_finite_diff_catches_a_wrong_gradient():
    params = ParamSet({"w": np.array([0.3, -0.2])})

    def wrong(p):
        w = dn.param(p, "w")
        node = dn.reduce_sum(dn.square(w))
        # break the backward rule on purpose
        node.parents[0].backward_fn = lambda g: (g * 5.0 * w.value,)
        return node
    assert not dn.finite_diff_check(wrong, params).passed


def test_finite_diff_catches_a_small_scale_wrong_gradient():
    params = ParamSet({"w": np.array([0.3, -0.2])})

    def wrong(p):
        w = dn.param(p, "w")
        node = dn.reduce_sum(dn.scale(w, 1e-5))
        # drop the 1e-5 slope entirely
        node.parents[0].backward_fn = lambda g: (np.zeros_like(w.value),)
        return node
    report = dn.finite_diff_check(wrong, params)
    assert report.passed is False
    assert report.max_rel_error["w"] == pytest.approx(1.0)


def test_finite_diff_is_near_exact_on_a_quadratic():
    params = ParamSet({"a": np.array([1.0, -3.0, 0.5])})
    report = dn.finite_diff_check(lambda p: dn.reduce_sum(dn.square(dn.param(p, "a"))), params)
    assert report.passed and report.max_rel_error["a"] < 1e-8


class TestMlpForward:
    def test_zero_weights_give_zero_output(self):
        spec = MlpSpec((3, 4, 2), "tanh")
        params = ParamSet()
        dn.init_mlp(params, spec, "mlp", np.random.default_rng(0))
        for name in params.names():
            params.set(name, np.zeros_like(params[name]))
        assert np.array_equal(dn.mlp_forward(params, spec, [1.0, -2.0, 3.0]), np.zeros(2))

    def test_identity_layer(self):
        spec = MlpSpec((2, 2), "tanh")
        params = ParamSet({"mlp.w0": np.eye(2), "mlp.b0": np.zeros(2)})
        assert dn.mlp_forward(params, spec, [1.0, 2.0]).tolist() == [1.0, 2.0]

    def test_single_tanh_unit(self):
        spec = MlpSpec((1, 1), "tanh", output_activation="tanh")
        params = ParamSet({"mlp.w0": [[1.0]], "mlp.b0": [0.0]})
        assert dn.mlp_forward(params, spec, [0.5])[0] == pytest.approx(0.46212, abs=1e-5)

    def test_dimension_mismatch(self):
        spec = MlpSpec((3, 2))
        params = dn.init_mlp(ParamSet(), spec, "mlp", np.random.default_rng(0))
        with pytest.raises(ConfigurationError):
            dn.mlp_forward(params, spec, np.ones(4))

    def test_graph_matches_numeric_forward(self):
        spec = MlpSpec((3, 5, 2), "relu")
        params = dn.init_mlp(ParamSet(), spec, "net", np.random.default_rng(1))
        x = np.random.default_rng(2).normal(size=(4, 3))
        node = dn.mlp_node(params, spec, x, prefix="net")
        assert np.array_equal(node.value, dn.mlp_forward(params, spec, x, prefix="net"))

    @pytest.mark.parametrize("widths", [(), (3,), (3, 0)])
    def test_invalid_spec(self, widths):
        with pytest.raises(ConfigurationError):
            MlpSpec(widths)


class TestGaussian:
    @pytest.mark.parametrize("mean,std,x,expected", [
        ([0.0], [1.0], [0.0], -0.91894),
        ([0.0], [1.0], [1.0], -1.41894),
        ([0.0, 0.0], [1.0, 1.0], [0.0, 0.0], -1.83788),
    ])
    def test_logprob(self, mean, std, x, expected):
        assert dn.gaussian_logprob(DiagGaussian(mean, std), x) == pytest.approx(expected, abs=1e-5)

    def test_entropy(self):
        assert dn.gaussian_entropy(DiagGaussian([0.0], [1.0])) == pytest.approx(1.41894, abs=1e-5)
        assert dn.gaussian_entropy(DiagGaussian([0.0, 0.0], [1.0, 1.0])) == pytest.approx(2.83788, abs=1e-5)
        assert dn.gaussian_entropy(DiagGaussian([3.0], [math.e])) == pytest.approx(2.41894, abs=1e-5)

    @pytest.mark.parametrize("std", [[0.0], [-1.0], [float("nan")]])
    def test_non_positive_std(self, std):
        with pytest.raises(DomainError):
            DiagGaussian([0.0], std)

    def test_dimension_mismatch(self):
        with pytest.raises(ConfigurationError):
            dn.gaussian_logprob(DiagGaussian([0.0, 0.0], [1.0, 1.0]), [0.0])

    @pytest.mark.parametrize("seed", range(3))
    def test_entropy_matches_monte_carlo(self, seed):
        rng = np.random.default_rng(seed)
        std = rng.uniform(0.1, 3.0, size=3)
        dist = DiagGaussian(rng.normal(size=3), std)
        samples = dist.mean + std * rng.standard_normal((100_000, 3))
        neg_logp = -dn.gaussian_logprob(dist, samples)
        stderr = neg_logp.std() / math.sqrt(len(neg_logp))
        assert abs(dn.gaussian_entropy(dist) - neg_logp.mean()) < 3.0 * stderr

    def test_logprob_is_finite_at_std_floor(self):
        dist = DiagGaussian([0.0], [dn.STD_MIN])
        assert np.isfinite(dn.gaussian_logprob(dist, [1.0]))


class TestParamSet:
    def test_duplicate_names(self):
        params = ParamSet({"a": [1.0]})
        with pytest.raises(ConfigurationError):
            params.add("a", [2.0])

    def test_non_finite_values(self):
        with pytest.raises(DomainError):
            ParamSet({"a": [np.inf]})

    def test_shapes_are_fixed(self):
        params = ParamSet({"a": np.zeros((2, 3))})
        with pytest.raises(ConfigurationError):
            params.set("a", np.zeros(6))

    def test_checkpoint_round_trip_is_byte_stable(self, tmp_path):
        params, _ = small_params(3)
        path = tmp_path / "ckpt.json"
        dn.save_checkpoint(path, params, {"kind": "test"})
        loaded, meta = dn.load_checkpoint(path)
        assert meta == {"kind": "test"}
        assert dn.checkpoint_bytes(loaded, meta) == path.read_bytes()
        for name in params:
            assert np.array_equal(loaded[name], params[name])


class TestBackward:
    def test_non_scalar_loss(self):
        params = ParamSet({"a": np.ones(3)})
        with pytest.raises(ConstructionError):
            dn.backward(dn.param(params, "a"))

    def test_unsupported_input(self):
        with pytest.raises(ConstructionError):
            dn.add(dn.const(1.0), "one")

    def test_unknown_primitive(self):
        with pytest.raises(ConstructionError):
            dn.Node(np.zeros(1), "sigmoid")

    def test_shared_parameter_accumulates(self):
        params = ParamSet({"a": np.array([2.0])})
        _, grads = dn.value_and_grad(
            lambda p: dn.reduce_sum(dn.mul(dn.param(p, "a"), dn.param(p, "a"))), params)
        assert grads["a"][0] == pytest.approx(4.0)

    def test_untouched_parameters_get_zero_gradient(self):
        params = ParamSet({"a": np.array([1.0]), "b": np.array([5.0])})
        _, grads = dn.value_and_grad(lambda p: dn.reduce_sum(dn.square(dn.param(p, "a"))), params)
        assert grads["b"][0] == 0.0
        assert list(dn.backward(dn.reduce_sum(dn.param(params, "a")))) == ["a"]


class TestAdam:
    def test_only_tensors_with_gradients_move(self):
        params = ParamSet({"head0.w": np.ones(2), "head1.w": np.ones(2)})
        opt = dn.Adam(0.1)
        for _ in range(3):
            opt.step(params, {"head0.w": np.array([1.0, -1.0])})
        assert np.array_equal(params["head1.w"], np.ones(2))
        assert params["head0.w"][0] < 1.0 < params["head0.w"][1]

    def test_first_step_moves_by_lr(self):
        params = ParamSet({"a": np.array([0.0])})
        dn.Adam(0.01).step(params, {"a": np.array([3.0])})
        assert params["a"][0] == pytest.approx(-0.01, rel=1e-6)

    def test_gradient_clipping_reports_pre_clip_norm(self):
        params = ParamSet({"a": np.zeros(2)})
        assert dn.Adam(0.01).step(params, {"a": np.array([3.0, 4.0])}, max_grad_norm=0.5) == pytest.approx(5.0)

    def test_non_finite_gradient(self):
        params = ParamSet({"a": np.zeros(1)})
        with pytest.raises(DomainError):
            dn.Adam(0.01).step(params, {"a": np.array([np.nan])})

    def test_minimizes_a_quadratic(self):
        params = ParamSet({"a": np.array([3.0, -2.0])})
        opt = dn.Adam(0.1)
        for _ in range(1000):
            _, grads = dn.value_and_grad(lambda p: dn.reduce_sum(dn.square(dn.param(p, "a"))), params)
            opt.step(params, grads)
        assert np.all(np.abs(params["a"]) < 5e-2)


def test_grad_of_a_quadratic():
    params = ParamSet({"a": np.array([1.0, -3.0])})
    grads = dn.grad(lambda p: dn.reduce_sum(dn.square(dn.param(p, "a"))), params)
    assert grads["a"].tolist() == [2.0, -6.0]
