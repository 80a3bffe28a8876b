"""Gradient-check suite over toy-width versions of the standard topologies.

Each check wires a net (and a matching loss) into a deterministic scalar
function of its parameters and compares analytic gradients to central
finite differences in double precision. Toy widths keep runtime low while
touching every primitive: relu and maxout branches, concatenation, joint
layers, both output activations, and both loss paths.
"""

from __future__ import annotations

import numpy as np

from .nets import (
    BranchSpec,
    NetSpec,
    NoisePrior,
    forward_discriminator_logits,
    forward_generator,
    init_parameters,
    vector_mode_specs,
)
from .tensor import GradCheckReport, RngStream, grad_check, mean_all
from .train import discriminator_loss_on_logits, generator_loss_on_logits


def toy_image_generator_spec(dropout_rate: float = 0.0) -> NetSpec:
    """Scaled-down image-mode generator (relu branches, sigmoid output)."""
    return NetSpec(
        role="generator",
        branch_a=BranchSpec(7, 10, "relu"),
        branch_b=BranchSpec(4, 12, "relu"),
        joint=BranchSpec(22, 14, "relu"),
        output_width=9,
        output_activation="sigmoid",
        dropout_rate=dropout_rate,
        noise=NoisePrior("uniform", 7),
    )


def toy_image_discriminator_spec(dropout_rate: float = 0.0) -> NetSpec:
    """Scaled-down image-mode discriminator (maxout branches and joint)."""
    return NetSpec(
        role="discriminator",
        branch_a=BranchSpec(9, 8, "maxout", 5),
        branch_b=BranchSpec(4, 6, "maxout", 5),
        joint=BranchSpec(14, 8, "maxout", 4),
        output_width=1,
        output_activation="sigmoid",
        dropout_rate=dropout_rate,
    )


def toy_vector_specs(dropout_rate: float = 0.0) -> tuple[NetSpec, NetSpec]:
    """Scaled-down vector-mode pair (linear generator output, maxout joint)."""
    gen, disc = vector_mode_specs(
        noise_dim=6, feat_dim=16, vec_dim=8,
        gen_noise_hidden=10, gen_feat_hidden=12,
        disc_vec_hidden=9, disc_feat_hidden=11,
        disc_joint_units=10, disc_joint_pieces=3,
        dropout_rate=dropout_rate,
    )
    return gen, disc


def _finite_inputs(rng: RngStream, batch: int, width: int) -> np.ndarray:
    return rng.uniform((batch, width), low=-1.0, high=1.0)


def check_generator(spec: NetSpec, seed: int = 0, batch: int = 4,
                    tolerance: float = 1e-5) -> GradCheckReport:
    """Gradcheck mean-of-outputs through a generator in eval mode."""
    rng = RngStream((seed, 101))
    net = init_parameters(spec, rng, dtype=np.float64)
    z = _finite_inputs(rng, batch, spec.branch_a.input_width)
    y = _finite_inputs(rng, batch, spec.branch_b.input_width)

    def fn(tape):
        out, _ = forward_generator(net, z, y, mode="eval", tape=tape)
        return mean_all(tape, out)

    return grad_check(fn, net.parameters, tolerance=tolerance)


def check_discriminator(spec: NetSpec, seed: int = 0, batch: int = 4,
                        tolerance: float = 1e-5) -> GradCheckReport:
    """Gradcheck the full discriminator loss on fixed real/fake batches."""
    rng = RngStream((seed, 202))
    net = init_parameters(spec, rng, dtype=np.float64)
    x_real = _finite_inputs(rng, batch, spec.branch_a.input_width)
    x_fake = _finite_inputs(rng, batch, spec.branch_a.input_width)
    y = _finite_inputs(rng, batch, spec.branch_b.input_width)

    def fn(tape):
        real_logits, _ = forward_discriminator_logits(net, x_real, y, mode="eval", tape=tape)
        fake_logits, _ = forward_discriminator_logits(net, x_fake, y, mode="eval", tape=tape)
        return discriminator_loss_on_logits(tape, real_logits, fake_logits)

    return grad_check(fn, net.parameters, tolerance=tolerance)


def check_generator_through_discriminator(
        gen_spec: NetSpec, disc_spec: NetSpec, variant: str = "saturating",
        seed: int = 0, batch: int = 4, tolerance: float = 1e-5) -> GradCheckReport:
    """Gradcheck the generator loss through a frozen discriminator."""
    rng = RngStream((seed, 303))
    gen = init_parameters(gen_spec, rng, dtype=np.float64)
    disc = init_parameters(disc_spec, rng, dtype=np.float64)
    z = _finite_inputs(rng, batch, gen_spec.branch_a.input_width)
    y = _finite_inputs(rng, batch, gen_spec.branch_b.input_width)

    def fn(tape):
        fake, _ = forward_generator(gen, z, y, mode="eval", tape=tape)
        fake_logits, _ = forward_discriminator_logits(disc, fake, y, mode="eval", tape=tape)
        return generator_loss_on_logits(tape, fake_logits, variant)

    return grad_check(fn, gen.parameters, tolerance=tolerance)


def run_architecture_gradchecks(seed: int = 0,
                                tolerance: float = 1e-5) -> list[tuple[str, GradCheckReport]]:
    """All toy-architecture checks, named; the full verification sweep."""
    img_gen = toy_image_generator_spec()
    img_disc = toy_image_discriminator_spec()
    vec_gen, vec_disc = toy_vector_specs()
    return [
        ("image_generator", check_generator(img_gen, seed, tolerance=tolerance)),
        ("image_discriminator", check_discriminator(img_disc, seed, tolerance=tolerance)),
        ("image_generator_loss_saturating",
         check_generator_through_discriminator(img_gen, img_disc, "saturating",
                                               seed, tolerance=tolerance)),
        ("image_generator_loss_nonsaturating",
         check_generator_through_discriminator(img_gen, img_disc, "nonsaturating",
                                               seed, tolerance=tolerance)),
        ("vector_generator", check_generator(vec_gen, seed, tolerance=tolerance)),
        ("vector_discriminator", check_discriminator(vec_disc, seed, tolerance=tolerance)),
        ("vector_generator_loss",
         check_generator_through_discriminator(vec_gen, vec_disc, "saturating",
                                               seed, tolerance=tolerance)),
    ]
