"""Architecture specs, parameter shapes, initialization, and forward contracts."""

import math

import numpy as np
import pytest

from condgan.checks import (
    check_discriminator,
    check_generator,
    toy_image_discriminator_spec,
    toy_image_generator_spec,
    toy_vector_specs,
)
from condgan.errors import ConfigError, DimensionError
from condgan.nets import (
    BranchSpec,
    NetSpec,
    NoisePrior,
    forward_discriminator,
    forward_generator,
    init_parameters,
    mnist_discriminator_spec,
    mnist_generator_spec,
    spec_from_kv,
    spec_to_kv,
    vector_mode_specs,
)
from condgan.tensor import RngStream


def walk_expected_shapes(spec: NetSpec) -> dict[str, tuple[int, ...]]:
    """Independent shape walker: derives tensor shapes from first principles."""
    shapes = {}
    for name, branch in (("branch_a", spec.branch_a), ("branch_b", spec.branch_b),
                         ("joint", spec.joint)):
        if branch is None:
            continue
        if branch.activation == "maxout":
            shapes[f"{name}.w"] = (branch.maxout_pieces, branch.input_width,
                                   branch.hidden_width)
            shapes[f"{name}.b"] = (branch.maxout_pieces, branch.hidden_width)
        else:
            shapes[f"{name}.w"] = (branch.input_width, branch.hidden_width)
            shapes[f"{name}.b"] = (branch.hidden_width,)
    out_in = (spec.joint.hidden_width if spec.joint is not None
              else spec.branch_a.hidden_width + spec.branch_b.hidden_width)
    shapes["out.w"] = (out_in, spec.output_width)
    shapes["out.b"] = (spec.output_width,)
    return shapes


class TestMnistGeneratorSpec:
    def test_published_widths(self):
        spec = mnist_generator_spec()
        assert spec.output_width == 784
        assert spec.branch_a.input_width == 100
        assert spec.branch_a.hidden_width == 200
        assert spec.branch_b.input_width == 10
        assert spec.branch_b.hidden_width == 1000
        assert spec.joint.hidden_width == 1200
        assert spec.output_activation == "sigmoid"
        assert spec.noise == NoisePrior("uniform", 100)

    def test_parameter_count_arithmetic(self):
        spec = mnist_generator_spec()
        expected = (100 * 200 + 200) + (10 * 1000 + 1000) \
            + (1200 * 1200 + 1200) + (1200 * 784 + 784)
        assert spec.parameter_count() == expected
        walked = sum(math.prod(s) for s in walk_expected_shapes(spec).values())
        assert spec.parameter_count() == walked

    def test_instantiated_count_matches(self):
        net = init_parameters(mnist_generator_spec(), RngStream(0))
        assert net.parameter_count() == net.spec.parameter_count()


class TestMnistDiscriminatorSpec:
    def test_published_units_and_pieces(self):
        spec = mnist_discriminator_spec()
        assert spec.branch_a.hidden_width == 240 and spec.branch_a.maxout_pieces == 5
        assert spec.branch_b.hidden_width == 50 and spec.branch_b.maxout_pieces == 5
        assert spec.joint.hidden_width == 240 and spec.joint.maxout_pieces == 4
        assert spec.output_width == 1
        assert spec.output_activation == "sigmoid"

    def test_shapes_match_independent_walker(self):
        spec = mnist_discriminator_spec()
        assert spec.parameter_shapes() == walk_expected_shapes(spec)

    def test_single_probability_per_example(self):
        spec = mnist_discriminator_spec()
        net = init_parameters(spec, RngStream(1))
        x = np.random.default_rng(0).uniform(size=(5, 784)).astype(np.float32)
        y = np.eye(10, dtype=np.float32)[:5]
        out, _ = forward_discriminator(net, x, y, mode="eval")
        assert out.data.shape == (5, 1)
        assert np.all((out.data > 0) & (out.data < 1))


class TestVectorModeSpecs:
    def test_published_defaults(self):
        gen, disc = vector_mode_specs()
        assert gen.output_width == 200
        assert gen.output_activation == "linear"
        assert gen.joint is None
        assert gen.noise == NoisePrior("gaussian", 100)
        assert gen.branch_a.hidden_width == 500
        assert gen.branch_b.input_width == 4096
        assert gen.branch_b.hidden_width == 2000
        assert disc.branch_a.hidden_width == 500
        assert disc.branch_b.hidden_width == 1200
        assert disc.joint.hidden_width == 1000
        assert disc.joint.maxout_pieces == 3

    def test_toy_scale_passes_gradient_check(self):
        gen_spec, disc_spec = toy_vector_specs()
        assert check_generator(gen_spec).passed
        assert check_discriminator(disc_spec).passed

    def test_shapes_match_walker(self):
        gen, disc = toy_vector_specs()
        assert gen.parameter_shapes() == walk_expected_shapes(gen)
        assert disc.parameter_shapes() == walk_expected_shapes(disc)


class TestSpecValidation:
    def test_maxout_pieces_requirement(self):
        with pytest.raises(ConfigError):
            BranchSpec(4, 8, "maxout")
        with pytest.raises(ConfigError):
            BranchSpec(4, 8, "relu", maxout_pieces=2)

    def test_discriminator_output_constraint(self):
        with pytest.raises(ConfigError):
            NetSpec(role="discriminator",
                    branch_a=BranchSpec(2, 4, "relu"),
                    branch_b=BranchSpec(2, 4, "relu"),
                    joint=None, output_width=2, output_activation="sigmoid",
                    dropout_rate=0.0)

    def test_joint_width_must_match_branch_sum(self):
        with pytest.raises(ConfigError):
            NetSpec(role="generator",
                    branch_a=BranchSpec(3, 4, "relu"),
                    branch_b=BranchSpec(2, 4, "relu"),
                    joint=BranchSpec(9, 4, "relu"),
                    output_width=2, output_activation="sigmoid",
                    dropout_rate=0.0, noise=NoisePrior("uniform", 3))

    def test_generator_requires_noise(self):
        with pytest.raises(ConfigError):
            NetSpec(role="generator",
                    branch_a=BranchSpec(3, 4, "relu"),
                    branch_b=BranchSpec(2, 4, "relu"),
                    joint=None, output_width=2, output_activation="sigmoid",
                    dropout_rate=0.0)


class TestInitParameters:
    def test_same_seed_bit_identical(self):
        spec = toy_image_generator_spec()
        a = init_parameters(spec, RngStream(5))
        b = init_parameters(spec, RngStream(5))
        for name in a.parameters:
            np.testing.assert_array_equal(a.parameters[name].data,
                                          b.parameters[name].data)

    def test_biases_zero(self):
        net = init_parameters(toy_image_discriminator_spec(), RngStream(3))
        for name, p in net.parameters.items():
            if name.endswith(".b"):
                assert np.all(p.data == 0)

    def test_weight_stddev_matches_uniform_moments(self):
        # one wide layer gives > 1e5 draws
        spec = NetSpec(role="generator",
                       branch_a=BranchSpec(400, 300, "relu"),
                       branch_b=BranchSpec(4, 8, "relu"),
                       joint=None, output_width=4, output_activation="sigmoid",
                       dropout_rate=0.0, noise=NoisePrior("uniform", 400))
        net = init_parameters(spec, RngStream(11), dtype=np.float64)
        w = net.parameters["branch_a.w"].data
        assert w.size >= 1e5
        s = math.sqrt(6.0 / (400 + 300))
        expected_std = s / math.sqrt(3.0)
        assert abs(w.std() - expected_std) / expected_std <= 0.05
        assert w.min() >= -s and w.max() <= s


class TestForward:
    def setup_method(self):
        self.gen = init_parameters(toy_image_generator_spec(), RngStream(21),
                                   dtype=np.float64)
        self.disc = init_parameters(toy_image_discriminator_spec(), RngStream(22),
                                    dtype=np.float64)
        rng = np.random.default_rng(7)
        self.z = rng.uniform(size=(6, 7))
        self.y = rng.uniform(size=(6, 4))
        self.x = rng.uniform(size=(6, 9))

    def test_image_outputs_strictly_inside_unit_interval(self):
        out, _ = forward_generator(self.gen, self.z, self.y, mode="eval")
        assert np.all((out.data > 0) & (out.data < 1))

    def test_eval_mode_deterministic(self):
        a, _ = forward_generator(self.gen, self.z, self.y, mode="eval")
        b, _ = forward_generator(self.gen, self.z, self.y, mode="eval")
        np.testing.assert_array_equal(a.data, b.data)

    def test_batch_permutation_permutes_outputs(self):
        out, _ = forward_discriminator(self.disc, self.x, self.y, mode="eval")
        perm = np.array([3, 1, 5, 0, 2, 4])
        out_p, _ = forward_discriminator(self.disc, self.x[perm], self.y[perm],
                                         mode="eval")
        np.testing.assert_array_equal(out.data[perm], out_p.data)

    def test_condition_changes_output(self):
        out_a, _ = forward_generator(self.gen, self.z, self.y, mode="eval")
        y2 = np.roll(self.y, 1, axis=1)
        out_b, _ = forward_generator(self.gen, self.z, y2, mode="eval")
        assert np.linalg.norm(out_a.data - out_b.data) > 0

    def test_shape_mismatch_raises(self):
        with pytest.raises(DimensionError):
            forward_generator(self.gen, self.z[:, :3], self.y, mode="eval")
        with pytest.raises(DimensionError):
            forward_discriminator(self.disc, self.x, self.y[:, :2], mode="eval")

    def test_role_mismatch_raises(self):
        with pytest.raises(ConfigError):
            forward_generator(self.disc, self.z, self.y)
        with pytest.raises(ConfigError):
            forward_discriminator(self.gen, self.x, self.y)

    def test_train_mode_dropout_requires_rng(self):
        gen = init_parameters(toy_image_generator_spec(dropout_rate=0.5), RngStream(2))
        with pytest.raises(ConfigError):
            forward_generator(gen, self.z.astype(np.float32),
                              self.y.astype(np.float32), mode="train")


class TestParameterLoading:
    def test_wrong_shape_rejected(self):
        net = init_parameters(toy_image_generator_spec(), RngStream(1))
        arrays = net.copy_parameters()
        arrays["out.w"] = arrays["out.w"][:, :-1]
        with pytest.raises(ConfigError, match="out.w"):
            net.load_parameters(arrays)

    def test_missing_name_rejected(self):
        net = init_parameters(toy_image_generator_spec(), RngStream(1))
        arrays = net.copy_parameters()
        del arrays["out.b"]
        with pytest.raises(ConfigError, match="missing"):
            net.load_parameters(arrays)


class TestSpecSerialization:
    @pytest.mark.parametrize("spec", [
        mnist_generator_spec(),
        mnist_discriminator_spec(),
        vector_mode_specs()[0],
        vector_mode_specs()[1],
        toy_image_generator_spec(0.25),
    ])
    def test_kv_roundtrip(self, spec):
        kv = spec_to_kv(spec, "spec")
        as_strings = {k: str(v) if not isinstance(v, bool) else ("true" if v else "false")
                      for k, v in kv.items()}
        assert spec_from_kv(as_strings, "spec") == spec
