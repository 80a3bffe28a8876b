"""Loss anchors, schedules, optimizer semantics, and training-loop contracts."""

import math

import numpy as np
import pytest

from condgan import tasks
from condgan.data import LabeledDataset, default_mixture_spec, synth_mixture
from condgan.errors import ConfigError, DomainError, NumericError
from condgan.nets import Net, init_parameters
from condgan.tensor import RngStream, Tape, Tensor, grad_check, sigmoid_values
from condgan.train import (
    GanConfig,
    TrainState,
    config_from_kv,
    config_to_kv,
    discriminator_loss,
    discriminator_loss_on_logits,
    early_stopping_check,
    epoch_permutation,
    generator_loss,
    generator_loss_on_logits,
    init_rng,
    lr_at,
    make_train_state,
    momentum_at,
    sgd_momentum_step,
    train,
    train_epoch,
)


def tiny_config(**over):
    defaults = dict(batch_size=20, lr_initial=0.02, lr_floor=1e-6,
                    lr_decay_factor=1.00004, momentum_initial=0.5,
                    momentum_final=0.7, momentum_ramp_steps=16,
                    dropout_rate=0.0, d_steps_per_g_step=1,
                    generator_loss_variant="nonsaturating",
                    max_epochs=2, eval_every=0, seed=3)
    defaults.update(over)
    return GanConfig(**defaults)


def tiny_mixture(per_class=100, seed=3):
    spec = default_mixture_spec(per_class=per_class, seed=seed)
    return synth_mixture(spec)


def tiny_nets(config, dtype=np.float32):
    gen_spec = tasks.toy_mixture_gen_spec(4, config.dropout_rate)
    disc_spec = tasks.toy_mixture_disc_spec(4, config.dropout_rate)
    rng = init_rng(config)
    return (init_parameters(gen_spec, rng, dtype=dtype),
            init_parameters(disc_spec, rng, dtype=dtype))


class TestLossAnchors:
    def test_indifferent_discriminator_value(self):
        half = np.full((8, 1), 0.5)
        loss = discriminator_loss(half, half)
        assert abs(loss - 2 * math.log(2)) <= 1e-12
        # the shared value function at this point is the negation
        assert abs(-loss - (-2 * math.log(2))) <= 1e-12

    def test_perfect_discriminator_loss_vanishes(self):
        near_one = np.full((4, 1), 1 - 1e-14)
        near_zero = np.full((4, 1), 1e-14)
        assert discriminator_loss(near_one, near_zero) <= 1e-12

    def test_generator_loss_at_half(self):
        half = np.full((8, 1), 0.5)
        assert abs(generator_loss(half, "saturating") + math.log(2)) <= 1e-12
        assert abs(generator_loss(half, "nonsaturating") - math.log(2)) <= 1e-12

    def test_domain_errors(self):
        with pytest.raises(DomainError):
            discriminator_loss(np.array([[1.0]]), np.array([[0.5]]))
        with pytest.raises(DomainError):
            generator_loss(np.array([[0.0]]))

    def test_matches_per_example_summation_oracle(self):
        rng = np.random.default_rng(0)
        d_real = rng.uniform(0.01, 0.99, size=(33, 1))
        d_fake = rng.uniform(0.01, 0.99, size=(33, 1))
        total_r = sum(math.log(v) for v in d_real[:, 0]) / 33
        total_f = sum(math.log(1 - v) for v in d_fake[:, 0]) / 33
        assert abs(discriminator_loss(d_real, d_fake) - (-total_r - total_f)) <= 1e-12
        assert abs(generator_loss(d_fake, "saturating") - total_f) <= 1e-12
        nonsat = -sum(math.log(v) for v in d_fake[:, 0]) / 33
        assert abs(generator_loss(d_fake, "nonsaturating") - nonsat) <= 1e-12

    def test_variants_share_gradient_sign(self):
        d = np.linspace(0.02, 0.98, 25)
        h = 1e-7
        for v in d:
            ds = (generator_loss(np.array([[v + h]]), "saturating")
                  - generator_loss(np.array([[v - h]]), "saturating")) / (2 * h)
            dn = (generator_loss(np.array([[v + h]]), "nonsaturating")
                  - generator_loss(np.array([[v - h]]), "nonsaturating")) / (2 * h)
            assert ds < 0 and dn < 0


class TestLogitLosses:
    def test_consistent_with_probability_variant(self):
        rng = np.random.default_rng(1)
        vr = Tensor(rng.normal(size=(17, 1)) * 3)
        vf = Tensor(rng.normal(size=(17, 1)) * 3)
        stable = discriminator_loss_on_logits(None, vr, vf)
        probs = discriminator_loss(sigmoid_values(vr.data), sigmoid_values(vf.data))
        assert abs(float(stable.data) - probs) <= 1e-12
        for variant in ("saturating", "nonsaturating"):
            stable_g = generator_loss_on_logits(None, vf, variant)
            prob_g = generator_loss(sigmoid_values(vf.data), variant)
            assert abs(float(stable_g.data) - prob_g) <= 1e-12

    def test_stable_at_extreme_logits(self):
        vr = Tensor(np.array([[-500.0], [500.0]]))
        vf = Tensor(np.array([[500.0], [-500.0]]))
        loss = discriminator_loss_on_logits(None, vr, vf)
        assert np.isfinite(loss.data)
        for variant in ("saturating", "nonsaturating"):
            assert np.isfinite(generator_loss_on_logits(None, vf, variant).data)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(2)
        vr = Tensor(rng.normal(size=(6, 1)))
        vf = Tensor(rng.normal(size=(6, 1)))

        def fn_d(tape):
            return discriminator_loss_on_logits(tape, vr, vf)

        assert grad_check(fn_d, {"vr": vr, "vf": vf}, tolerance=1e-5).passed

        for variant in ("saturating", "nonsaturating"):
            def fn_g(tape):
                return generator_loss_on_logits(tape, vf, variant)

            assert grad_check(fn_g, {"vf": vf}, tolerance=1e-5).passed


class TestSchedules:
    def test_lr_closed_form_sampled(self):
        cfg = GanConfig()
        for n in [0, 1, 10, 1000, 57707, 250000, 10**6]:
            expected = max(0.1 / 1.00004 ** n, 1e-6)
            assert abs(lr_at(cfg, n) - expected) <= 1e-12

    def test_lr_at_57707_steps(self):
        cfg = GanConfig()
        lr = lr_at(cfg, 57707)
        assert 0.0099 < lr < 0.01

    def test_lr_never_below_floor(self):
        cfg = GanConfig()
        for n in [0, 10**5, 10**6, 10**7]:
            assert lr_at(cfg, n) >= 1e-6

    def test_closed_form_matches_iterated_division(self):
        cfg = GanConfig()
        lr = cfg.lr_initial
        for n in range(1, 2001):
            lr = lr / cfg.lr_decay_factor
            assert abs(lr_at(cfg, n) - max(lr, cfg.lr_floor)) <= 1e-12

    def test_momentum_ramp(self):
        cfg = GanConfig(momentum_ramp_steps=100)
        assert momentum_at(cfg, 0) == 0.5
        assert abs(momentum_at(cfg, 50) - 0.6) <= 1e-12
        assert momentum_at(cfg, 100) == 0.7
        assert momentum_at(cfg, 10**6) == 0.7

    def test_config_invariants(self):
        with pytest.raises(ConfigError):
            GanConfig(lr_floor=0.2, lr_initial=0.1)
        with pytest.raises(ConfigError):
            GanConfig(lr_decay_factor=1.0)
        with pytest.raises(ConfigError):
            GanConfig(momentum_initial=0.8, momentum_final=0.7)
        with pytest.raises(ConfigError):
            GanConfig(momentum_final=1.0)


class TestSgdMomentum:
    def _one_param_setup(self, lr, momentum):
        cfg = tiny_config(lr_initial=lr, lr_floor=lr,
                          momentum_initial=momentum, momentum_final=momentum)
        spec = tasks.toy_mixture_gen_spec(4, 0.0)
        net = init_parameters(spec, RngStream(0), dtype=np.float64)
        state = make_train_state(cfg, net, net)
        return cfg, net, state

    def test_zero_momentum_reduces_to_vanilla_sgd(self):
        cfg, net, state = self._one_param_setup(lr=0.25, momentum=0.0)
        before = net.copy_parameters()
        grads = {}
        rng = np.random.default_rng(3)
        for name, p in net.parameters.items():
            g = rng.normal(size=p.data.shape)
            p.grad = g
            grads[name] = g
        sgd_momentum_step(net, state, "gen")
        for name, p in net.parameters.items():
            np.testing.assert_array_equal(p.data, before[name] - 0.25 * grads[name])

    def test_constant_gradient_geometric_series(self):
        mu, lr, k = 0.6, 0.01, 12
        cfg, net, state = self._one_param_setup(lr=lr, momentum=mu)
        g = {name: np.ones_like(p.data) for name, p in net.parameters.items()}
        for _ in range(k):
            for name, p in net.parameters.items():
                p.grad = g[name]
            sgd_momentum_step(net, state, "gen")
        expected_v = -lr * (1 - mu ** k) / (1 - mu)
        for name in net.parameters:
            np.testing.assert_allclose(state.velocities["gen"][name],
                                       expected_v, rtol=1e-12)

    def test_non_finite_gradient_names_tensor(self):
        cfg, net, state = self._one_param_setup(lr=0.1, momentum=0.5)
        for p in net.parameters.values():
            p.grad = np.zeros_like(p.data)
        net.parameters["out.w"].grad[0, 0] = np.nan
        with pytest.raises(NumericError, match=r"gen\.out\.w"):
            sgd_momentum_step(net, state, "gen")

    def test_missing_gradient_rejected(self):
        cfg, net, state = self._one_param_setup(lr=0.1, momentum=0.5)
        with pytest.raises(NumericError, match="missing gradient"):
            sgd_momentum_step(net, state, "gen")


class TestTrainEpoch:
    def test_lr_zero_freezes_both_nets(self):
        cfg = tiny_config(lr_initial=0.0, lr_floor=0.0, max_epochs=1)
        gen, disc = tiny_nets(cfg)
        data = tiny_mixture()
        g0, d0 = gen.copy_parameters(), disc.copy_parameters()
        state = make_train_state(cfg, gen, disc)
        train_epoch(gen, disc, data, cfg, state)
        for name in g0:
            np.testing.assert_array_equal(gen.parameters[name].data, g0[name])
        for name in d0:
            np.testing.assert_array_equal(disc.parameters[name].data, d0[name])

    def test_epoch_shuffles_differ_and_reproduce(self):
        cfg = tiny_config()
        p0 = epoch_permutation(cfg, 0, 400)
        p1 = epoch_permutation(cfg, 1, 400)
        assert not np.array_equal(p0, p1)
        np.testing.assert_array_equal(p0, epoch_permutation(cfg, 0, 400))

    def test_update_locality(self):
        """A discriminator step never mutates the generator and vice versa."""
        cfg = tiny_config(max_epochs=1)
        gen, disc = tiny_nets(cfg)
        data = tiny_mixture()
        state = make_train_state(cfg, gen, disc)

        from condgan.nets import forward_discriminator_logits, forward_generator
        perm = epoch_permutation(cfg, 0, len(data))
        idx = perm[: cfg.batch_size]
        x, y = data.x[idx], data.y[idx]

        gen_before = gen.copy_parameters()
        z = gen.spec.noise.draw(cfg.batch_size, state.rng_noise, gen.dtype)
        fake, _ = forward_generator(gen, z, y, mode="train",
                                    rng=state.rng_dropout, tape=None)
        tape = Tape()
        rl, _ = forward_discriminator_logits(disc, x, y, "train", state.rng_dropout, tape)
        fl, _ = forward_discriminator_logits(disc, fake.data, y, "train",
                                             state.rng_dropout, tape)
        loss = discriminator_loss_on_logits(tape, rl, fl)
        disc.zero_grads()
        tape.backward(loss)
        sgd_momentum_step(disc, state, "disc")
        for name in gen_before:
            np.testing.assert_array_equal(gen.parameters[name].data, gen_before[name])

        disc_before = disc.copy_parameters()
        z = gen.spec.noise.draw(cfg.batch_size, state.rng_noise, gen.dtype)
        tape = Tape()
        fake, _ = forward_generator(gen, z, y, mode="train",
                                    rng=state.rng_dropout, tape=tape)
        fl, _ = forward_discriminator_logits(disc, fake, y, "train",
                                             state.rng_dropout, tape)
        g_loss = generator_loss_on_logits(tape, fl, cfg.generator_loss_variant)
        gen.zero_grads()
        disc.zero_grads()
        tape.backward(g_loss)
        sgd_momentum_step(gen, state, "gen")
        for name in disc_before:
            np.testing.assert_array_equal(disc.parameters[name].data, disc_before[name])

    def test_full_run_determinism(self):
        data = tiny_mixture()

        def one_run():
            cfg = tiny_config(max_epochs=2, dropout_rate=0.2)
            gen, disc = tiny_nets(cfg)
            state = make_train_state(cfg, gen, disc)
            train(gen, disc, data, cfg, state=state)
            return gen.copy_parameters(), disc.copy_parameters()

        (g1, d1), (g2, d2) = one_run(), one_run()
        for name in g1:
            np.testing.assert_array_equal(g1[name], g2[name])
        for name in d1:
            np.testing.assert_array_equal(d1[name], d2[name])

    def test_metrics_records_emitted(self):
        cfg = tiny_config(max_epochs=1)
        gen, disc = tiny_nets(cfg)
        data = tiny_mixture()
        state = make_train_state(cfg, gen, disc)
        records = []
        train_epoch(gen, disc, data, cfg, state, metrics_sink=records.append)
        assert len(records) == len(data) // cfg.batch_size
        first = records[0]
        assert {"step", "lr", "momentum", "d_loss", "g_loss",
                "d_real", "d_fake"} <= set(first)
        assert first["step"] == 0 and first["lr"] == cfg.lr_initial

    def test_dataset_width_mismatch(self):
        cfg = tiny_config()
        gen, disc = tiny_nets(cfg)
        data = tiny_mixture()
        bad = LabeledDataset(x=data.x, y=data.y[:, :3], source="x", split="")
        state = make_train_state(cfg, gen, disc)
        with pytest.raises(ConfigError, match="condition width"):
            train_epoch(gen, disc, bad, cfg, state)


class TestEarlyStopping:
    def _setup(self, **over):
        cfg = tiny_config(eval_every=0, es_samples_per_class=25, **over)
        gen, disc = tiny_nets(cfg)
        data = tiny_mixture(per_class=50)
        state = make_train_state(cfg, gen, disc)
        return cfg, gen, state, data

    def test_first_evaluation_becomes_best(self):
        cfg, gen, state, val = self._setup()
        report = early_stopping_check(gen, val, 25, state)
        assert state.best_val_ll == report.mean_ll
        assert state.best_gen_params is not None
        for name, arr in state.best_gen_params.items():
            np.testing.assert_array_equal(arr, gen.parameters[name].data)

    def test_worse_evaluation_keeps_best(self):
        cfg, gen, state, val = self._setup()
        early_stopping_check(gen, val, 25, state)
        best_before = {k: v.copy() for k, v in state.best_gen_params.items()}
        ll_before = state.best_val_ll
        # wreck the generator so the next estimate drops
        for p in gen.parameters.values():
            p.data = p.data + 50.0
        state.step += 1
        report = early_stopping_check(gen, val, 25, state)
        assert report.mean_ll < ll_before
        assert state.best_val_ll == ll_before
        for name, arr in state.best_gen_params.items():
            np.testing.assert_array_equal(arr, best_before[name])

    def test_best_series_nondecreasing(self):
        cfg, gen, state, val = self._setup()
        best_series = []
        rng = np.random.default_rng(5)
        for k in range(5):
            for p in gen.parameters.values():
                p.data = p.data + rng.normal(scale=0.2, size=p.data.shape).astype(p.data.dtype)
            state.step += 1
            early_stopping_check(gen, val, 25, state)
            best_series.append(state.best_val_ll)
        assert all(b >= a for a, b in zip(best_series, best_series[1:]))


class TestConfigSerialization:
    def test_kv_roundtrip(self):
        cfg = tiny_config(max_epochs=7, generator_loss_variant="saturating")
        kv = config_to_kv(cfg)
        as_strings = {k: ("true" if v is True else "false" if v is False else repr(v)
                          if isinstance(v, float) else str(v))
                      for k, v in kv.items()}
        assert config_from_kv(as_strings) == cfg
