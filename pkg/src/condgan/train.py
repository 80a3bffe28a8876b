"""Two-player minimax training.

Each minibatch step runs ``d_steps_per_g_step`` discriminator updates on
real pairs versus freshly generated pairs, then one generator update through
the frozen discriminator. Losses are computed from pre-sigmoid scores with
log-sum-exp-stable formulations; the probability-space loss functions are
kept for reporting and closed-form anchors.

The optimizer is stochastic gradient descent with classical momentum
(v <- mu v - lr g; theta <- theta + v). The learning rate decays per
minibatch step by a fixed factor down to a floor, and momentum ramps
linearly between its endpoints; both follow closed forms of the step
counter exactly. A Parzen-window estimate on the validation split drives
early stopping: the best-scoring parameter snapshot is retained.

Runs are deterministic: noise, dropout, shuffling, and evaluation draws come
from independent seeded streams, per-epoch shuffles are pure functions of
(seed, epoch), and evaluation streams are pure functions of (seed, step), so
an interrupted run resumed from a checkpoint continues bit-identically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kvtext, parzen
from .checkpoint import read_container, write_container
from .errors import ConfigError, DomainError, NumericError
from .nets import (
    Net,
    class_condition_bank,
    conditional_sample_bank,
    forward_discriminator_logits,
    forward_generator,
    spec_from_kv,
    spec_to_kv,
)
from .tensor import RngStream, Tape, Tensor, accumulate_grad, sigmoid_values

LOSS_VARIANTS = ("saturating", "nonsaturating")

# sub-stream tags hung off the master seed
_TAG_INIT = 0
_TAG_NOISE = 1
_TAG_DROPOUT = 2
_TAG_SHUFFLE = 3
_TAG_EVAL = 4


@dataclass(frozen=True)
class GanConfig:
    """All training hyperparameters."""

    batch_size: int = 100
    lr_initial: float = 0.1
    lr_floor: float = 1e-6
    lr_decay_factor: float = 1.00004
    momentum_initial: float = 0.5
    momentum_final: float = 0.7
    momentum_ramp_steps: int = 500
    dropout_rate: float = 0.5
    d_steps_per_g_step: int = 1
    generator_loss_variant: str = "saturating"
    max_epochs: int = 1
    eval_every: int = 0
    seed: int = 0
    es_samples_per_class: int = 100
    es_val_max: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not self.lr_floor <= self.lr_initial:
            raise ConfigError("lr_floor must not exceed lr_initial")
        if not self.lr_decay_factor > 1.0:
            raise ConfigError("lr_decay_factor must be > 1")
        if not 0.0 <= self.momentum_initial <= self.momentum_final < 1.0:
            raise ConfigError("momenta must satisfy 0 <= initial <= final < 1")
        if self.momentum_ramp_steps < 1:
            raise ConfigError("momentum_ramp_steps must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.d_steps_per_g_step < 1:
            raise ConfigError("d_steps_per_g_step must be positive")
        if self.generator_loss_variant not in LOSS_VARIANTS:
            raise ConfigError(f"unknown loss variant {self.generator_loss_variant!r}")
        if self.max_epochs < 0:
            raise ConfigError("max_epochs must be >= 0")
        if self.eval_every < 0:
            raise ConfigError("eval_every must be >= 0 (0 disables)")
        if self.es_samples_per_class < 1:
            raise ConfigError("es_samples_per_class must be positive")
        if self.es_val_max < 0:
            raise ConfigError("es_val_max must be >= 0 (0 means all)")


def lr_at(config: GanConfig, step: int) -> float:
    """Closed-form learning rate: max(lr0 / decay^step, floor)."""
    return max(config.lr_initial / config.lr_decay_factor ** step, config.lr_floor)


def momentum_at(config: GanConfig, step: int) -> float:
    """Linear ramp from the initial to the final momentum over ramp steps."""
    frac = min(step / config.momentum_ramp_steps, 1.0)
    return config.momentum_initial + (config.momentum_final - config.momentum_initial) * frac


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_probs(d: np.ndarray, what: str) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if np.any(d <= 0.0) or np.any(d >= 1.0):
        raise DomainError(f"{what} must lie strictly inside (0, 1)")
    return d


def discriminator_loss(d_real: np.ndarray, d_fake: np.ndarray) -> float:
    """-mean(log D(real)) - mean(log(1 - D(fake))), probability inputs."""
    d_real = _check_probs(d_real, "d_real")
    d_fake = _check_probs(d_fake, "d_fake")
    return float(-np.mean(np.log(d_real)) - np.mean(np.log1p(-d_fake)))


def generator_loss(d_fake: np.ndarray, variant: str = "saturating") -> float:
    """mean(log(1 - D(fake))) or, nonsaturating, -mean(log D(fake))."""
    d_fake = _check_probs(d_fake, "d_fake")
    if variant == "saturating":
        return float(np.mean(np.log1p(-d_fake)))
    if variant == "nonsaturating":
        return float(-np.mean(np.log(d_fake)))
    raise ConfigError(f"unknown loss variant {variant!r}")


def _softplus(v: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, v)


def discriminator_loss_on_logits(tape: Tape, real_logits: Tensor,
                                 fake_logits: Tensor) -> Tensor:
    """Stable variant on pre-sigmoid scores; equals the probability form."""
    vr, vf = real_logits.data, fake_logits.data
    out = Tensor(np.mean(_softplus(-vr)) + np.mean(_softplus(vf)))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(real_logits, g * (sigmoid_values(vr) - 1.0) / vr.shape[0])
            accumulate_grad(fake_logits, g * sigmoid_values(vf) / vf.shape[0])
            return (real_logits, fake_logits)
        tape.record("discriminator_loss", backward)
    return out


def generator_loss_on_logits(tape: Tape, fake_logits: Tensor,
                             variant: str = "saturating") -> Tensor:
    """Stable generator loss on pre-sigmoid scores of generated samples."""
    vf = fake_logits.data
    if variant == "saturating":
        out = Tensor(-np.mean(_softplus(vf)))

        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(fake_logits, g * (-sigmoid_values(vf)) / vf.shape[0])
            return (fake_logits,)
    elif variant == "nonsaturating":
        out = Tensor(np.mean(_softplus(-vf)))

        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(fake_logits, g * (sigmoid_values(vf) - 1.0) / vf.shape[0])
            return (fake_logits,)
    else:
        raise ConfigError(f"unknown loss variant {variant!r}")
    if tape is not None:
        tape.record("generator_loss", backward)
    return out


# ---------------------------------------------------------------------------
# optimizer state
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    """Step counter, schedules, velocity buffers, best-checkpoint tracking."""

    config: GanConfig
    step: int = 0
    epoch: int = 0
    batch_in_epoch: int = 0
    velocities: dict[str, dict[str, np.ndarray]] = field(default_factory=dict)
    best_val_ll: float | None = None
    best_step: int = -1
    best_gen_params: dict[str, np.ndarray] | None = None
    last_val_ll: float | None = None
    rng_noise: RngStream | None = None
    rng_dropout: RngStream | None = None

    @property
    def lr(self) -> float:
        return lr_at(self.config, self.step)

    @property
    def momentum(self) -> float:
        return momentum_at(self.config, self.step)

    def advance(self) -> None:
        self.step += 1


def make_train_state(config: GanConfig, gen: Net, disc: Net) -> TrainState:
    state = TrainState(config=config)
    state.velocities = {
        "gen": {n: np.zeros_like(p.data) for n, p in gen.parameters.items()},
        "disc": {n: np.zeros_like(p.data) for n, p in disc.parameters.items()},
    }
    state.rng_noise = RngStream((config.seed, _TAG_NOISE))
    state.rng_dropout = RngStream((config.seed, _TAG_DROPOUT))
    return state


def init_rng(config: GanConfig) -> RngStream:
    """Stream for parameter initialization under the run's master seed."""
    return RngStream((config.seed, _TAG_INIT))


def epoch_permutation(config: GanConfig, epoch: int, n: int) -> np.ndarray:
    """Example visit order for one epoch; a pure function of (seed, epoch)."""
    return RngStream((config.seed, _TAG_SHUFFLE, epoch)).permutation(n)


def eval_rng(config: GanConfig, step: int) -> RngStream:
    """Evaluation stream; a pure function of (seed, step), resume-safe."""
    return RngStream((config.seed, _TAG_EVAL, step))


def sgd_momentum_step(net: Net, state: TrainState, role: str) -> None:
    """Apply one classical-momentum update from the accumulated gradients.

    Uses the schedule values of the current step; advancing the step counter
    is the training loop's job, once per minibatch.
    """
    lr = state.lr
    mu = state.momentum
    vel = state.velocities[role]
    for name, p in net.parameters.items():
        g = p.grad
        if g is None:
            raise NumericError(f"missing gradient for {role}.{name}")
        if g.shape != p.data.shape:
            raise ConfigError(
                f"gradient shape {g.shape} != parameter shape {p.data.shape} "
                f"for {role}.{name}"
            )
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {role}.{name} at step {state.step}")
        v = vel[name]
        v *= mu
        v -= (lr * g).astype(v.dtype, copy=False)
        p.data += v


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def _slice_batch(data, indices, dtype):
    x = data.x[indices].astype(dtype, copy=False)
    y = data.y[indices].astype(dtype, copy=False)
    return x, y


def train_epoch(gen: Net, disc: Net, data, config: GanConfig, state: TrainState,
                val_data=None, metrics_sink=None, step_callback=None) -> dict:
    """One pass over the data in seeded shuffle order.

    Emits one metrics record per step; runs the early-stopping evaluation
    every ``eval_every`` steps when validation data is supplied. Returns the
    epoch means of the per-step diagnostics. Resumes mid-epoch when
    ``state.batch_in_epoch`` is nonzero.
    """
    n = len(data)
    if n < config.batch_size:
        raise ConfigError(f"dataset of {n} examples smaller than one batch")
    if data.cond_dim != gen.spec.branch_b.input_width:
        raise ConfigError(
            f"condition width {data.cond_dim} != generator branch width "
            f"{gen.spec.branch_b.input_width}"
        )
    if data.data_dim != disc.spec.branch_a.input_width:
        raise ConfigError(
            f"data width {data.data_dim} != discriminator branch width "
            f"{disc.spec.branch_a.input_width}"
        )
    perm = epoch_permutation(config, state.epoch, n)
    n_batches = n // config.batch_size
    dtype = gen.dtype
    sums = {"d_loss": 0.0, "g_loss": 0.0, "d_real": 0.0, "d_fake": 0.0}
    counted = 0

    for b in range(state.batch_in_epoch, n_batches):
        indices = perm[b * config.batch_size: (b + 1) * config.batch_size]
        x_real, y = _slice_batch(data, indices, dtype)

        d_loss_value = d_real_mean = d_fake_mean = 0.0
        for _ in range(config.d_steps_per_g_step):
            z = gen.spec.noise.draw(config.batch_size, state.rng_noise, dtype)
            fake, _ = forward_generator(gen, z, y, mode="train",
                                        rng=state.rng_dropout, tape=None)
            tape = Tape()
            real_logits, _ = forward_discriminator_logits(
                disc, x_real, y, mode="train", rng=state.rng_dropout, tape=tape)
            fake_logits, _ = forward_discriminator_logits(
                disc, fake.data, y, mode="train", rng=state.rng_dropout, tape=tape)
            loss = discriminator_loss_on_logits(tape, real_logits, fake_logits)
            d_loss_value = float(loss.data)
            if not math.isfinite(d_loss_value):
                raise NumericError(f"non-finite discriminator loss at step {state.step}")
            disc.zero_grads()
            tape.backward(loss)
            sgd_momentum_step(disc, state, "disc")
            d_real_mean = float(np.mean(sigmoid_values(real_logits.data)))
            d_fake_mean = float(np.mean(sigmoid_values(fake_logits.data)))

        z = gen.spec.noise.draw(config.batch_size, state.rng_noise, dtype)
        tape = Tape()
        fake, _ = forward_generator(gen, z, y, mode="train",
                                    rng=state.rng_dropout, tape=tape)
        fake_logits, _ = forward_discriminator_logits(
            disc, fake, y, mode="train", rng=state.rng_dropout, tape=tape)
        g_loss = generator_loss_on_logits(tape, fake_logits,
                                          config.generator_loss_variant)
        g_loss_value = float(g_loss.data)
        if not math.isfinite(g_loss_value):
            raise NumericError(f"non-finite generator loss at step {state.step}")
        gen.zero_grads()
        disc.zero_grads()
        tape.backward(g_loss)
        sgd_momentum_step(gen, state, "gen")

        record = {
            "step": state.step,
            "lr": state.lr,
            "momentum": state.momentum,
            "d_loss": d_loss_value,
            "g_loss": g_loss_value,
            "d_real": d_real_mean,
            "d_fake": d_fake_mean,
        }
        sums["d_loss"] += d_loss_value
        sums["g_loss"] += g_loss_value
        sums["d_real"] += d_real_mean
        sums["d_fake"] += d_fake_mean
        counted += 1

        state.advance()
        state.batch_in_epoch = b + 1
        if (val_data is not None and config.eval_every > 0
                and state.step % config.eval_every == 0):
            report = early_stopping_check(gen, val_data,
                                          config.es_samples_per_class, state)
            record["val_ll"] = report.mean_ll
        if metrics_sink is not None:
            metrics_sink(record)
        if step_callback is not None:
            step_callback(state)

    state.epoch += 1
    state.batch_in_epoch = 0
    if counted == 0:
        return {}
    return {k: v / counted for k, v in sums.items()}


def train(gen: Net, disc: Net, data, config: GanConfig, state: TrainState | None = None,
          val_data=None, metrics_sink=None, step_callback=None,
          epoch_callback=None) -> TrainState:
    """Run epochs up to config.max_epochs, resuming from ``state`` if given."""
    if state is None:
        state = make_train_state(config, gen, disc)
    while state.epoch < config.max_epochs:
        summary = train_epoch(gen, disc, data, config, state,
                              val_data=val_data, metrics_sink=metrics_sink,
                              step_callback=step_callback)
        if epoch_callback is not None:
            epoch_callback(state, summary)
    return state


def early_stopping_check(gen: Net, validation, n_samples_per_class: int,
                         state: TrainState, sigma_grid=None,
                         rng: RngStream | None = None) -> parzen.LikelihoodReport:
    """Parzen-score the validation split and retain the best snapshot.

    Samples are drawn per one-hot class when the validation conditions are
    one-hot, otherwise one per validation condition row (capped at ten times
    ``n_samples_per_class``). The bandwidth is re-selected on the validation
    split at every evaluation. A strictly better mean log-likelihood replaces
    the stored best parameter snapshot.
    """
    if len(validation) < 2:
        raise ConfigError("early stopping requires at least 2 validation examples")
    config = state.config
    if rng is None:
        rng = eval_rng(config, state.step)
    if sigma_grid is None:
        sigma_grid = parzen.default_sigma_grid()
    cap = config.es_val_max if config.es_val_max > 0 else len(validation)
    val_x = validation.x[:cap].astype(np.float64)
    if validation.is_one_hot():
        conditions = class_condition_bank(validation.cond_dim, n_samples_per_class,
                                          dtype=gen.dtype)
    else:
        rows = min(len(validation), 10 * n_samples_per_class)
        conditions = validation.y[:rows].astype(gen.dtype)
    bank = conditional_sample_bank(gen, conditions, rng).astype(np.float64)
    sigma = parzen.select_sigma(bank, val_x, sigma_grid)
    report = parzen.evaluate(parzen.fit(bank, sigma), val_x)
    state.last_val_ll = report.mean_ll
    if state.best_val_ll is None or report.mean_ll > state.best_val_ll:
        state.best_val_ll = report.mean_ll
        state.best_step = state.step
        state.best_gen_params = gen.copy_parameters()
    return report


# ---------------------------------------------------------------------------
# config and training-state persistence
# ---------------------------------------------------------------------------

def config_to_kv(config: GanConfig, prefix: str = "config") -> dict:
    return {f"{prefix}.{name}": getattr(config, name)
            for name in GanConfig.__dataclass_fields__}


def config_from_kv(kv: dict[str, str], prefix: str = "config") -> GanConfig:
    fields_ = GanConfig.__dataclass_fields__
    kwargs = {}
    for name, f in fields_.items():
        key = f"{prefix}.{name}"
        if f.type in ("int", int):
            kwargs[name] = kvtext.get_int(kv, key)
        elif f.type in ("float", float):
            kwargs[name] = kvtext.get_float(kv, key)
        else:
            kwargs[name] = kvtext.get_str(kv, key)
    return GanConfig(**kwargs)


def save_training_state(path: str, gen: Net, disc: Net, state: TrainState,
                        extra_header: dict | None = None) -> None:
    """Full training checkpoint: nets, velocities, counters, rng states, best."""
    header: dict = {"kind": "training"}
    header.update(config_to_kv(state.config))
    header.update(spec_to_kv(gen.spec, "gen_spec"))
    header.update(spec_to_kv(disc.spec, "disc_spec"))
    header["train.step"] = state.step
    header["train.epoch"] = state.epoch
    header["train.batch_in_epoch"] = state.batch_in_epoch
    header["train.best_step"] = state.best_step
    header["train.has_best"] = state.best_gen_params is not None
    if state.best_val_ll is not None:
        header["train.best_val_ll"] = state.best_val_ll
    for tag, stream in (("noise", state.rng_noise), ("dropout", state.rng_dropout)):
        for k, v in stream.state().items():
            header[f"rng.{tag}.{k}"] = v
    if extra_header:
        header.update(extra_header)
    tensors: dict[str, np.ndarray] = {}
    for name, p in gen.parameters.items():
        tensors[f"gen.param.{name}"] = p.data
    for name, p in disc.parameters.items():
        tensors[f"disc.param.{name}"] = p.data
    for role in ("gen", "disc"):
        for name, v in state.velocities[role].items():
            tensors[f"vel.{role}.{name}"] = v
    if state.best_gen_params is not None:
        for name, arr in state.best_gen_params.items():
            tensors[f"best.gen.{name}"] = arr
    write_container(path, header, tensors)


def _collect(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    out = {}
    for key, arr in tensors.items():
        if key.startswith(prefix):
            out[key[len(prefix):]] = arr
    return out


def load_training_state(path: str) -> tuple[Net, Net, TrainState]:
    header, tensors = read_container(path)
    if kvtext.get_str(header, "kind") != "training":
        raise ConfigError(f"{path}: not a training checkpoint")
    config = config_from_kv(header)
    gen_spec = spec_from_kv(header, "gen_spec")
    disc_spec = spec_from_kv(header, "disc_spec")
    gen = Net(spec=gen_spec, parameters={})
    gen.load_parameters(_collect(tensors, "gen.param."))
    disc = Net(spec=disc_spec, parameters={})
    disc.load_parameters(_collect(tensors, "disc.param."))
    state = TrainState(config=config)
    state.step = kvtext.get_int(header, "train.step")
    state.epoch = kvtext.get_int(header, "train.epoch")
    state.batch_in_epoch = kvtext.get_int(header, "train.batch_in_epoch")
    state.best_step = kvtext.get_int(header, "train.best_step")
    if "train.best_val_ll" in header:
        state.best_val_ll = kvtext.get_float(header, "train.best_val_ll")
    state.velocities = {
        "gen": _collect(tensors, "vel.gen."),
        "disc": _collect(tensors, "vel.disc."),
    }
    if kvtext.get_bool(header, "train.has_best"):
        state.best_gen_params = _collect(tensors, "best.gen.")
    state.rng_noise = RngStream((config.seed, _TAG_NOISE))
    state.rng_dropout = RngStream((config.seed, _TAG_DROPOUT))
    for tag, stream in (("noise", state.rng_noise), ("dropout", state.rng_dropout)):
        stream.set_state({
            "algorithm": kvtext.get_str(header, f"rng.{tag}.algorithm"),
            "draws": kvtext.get_int(header, f"rng.{tag}.draws"),
            "pcg64.state": kvtext.get_str(header, f"rng.{tag}.pcg64.state"),
            "pcg64.inc": kvtext.get_str(header, f"rng.{tag}.pcg64.inc"),
            "pcg64.has_uint32": kvtext.get_int(header, f"rng.{tag}.pcg64.has_uint32"),
            "pcg64.uinteger": kvtext.get_int(header, f"rng.{tag}.pcg64.uinteger"),
        })
    return gen, disc, state
