"""Two-branch conditional generator and discriminator topologies.

Both nets share one shape: a data-or-noise branch and a condition branch are
mapped to hidden layers, concatenated into a joint hidden representation,
and fed to the output layer. The canonical MNIST image-mode pair and the
vector-output pair are provided as ready-made specs; all widths of the
vector-mode pair can be scaled down for desk-size runs.

Dropout applies to hidden-layer activations only, never to the condition or
noise inputs and never to the output layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import kvtext
from .errors import ConfigError, DimensionError
from .tensor import RngStream, Tape, Tensor, affine, concat, dropout, maxout, relu, sigmoid

ACTIVATIONS = ("relu", "maxout")
OUTPUT_ACTIVATIONS = ("sigmoid", "linear")
NOISE_KINDS = ("uniform", "gaussian")


@dataclass(frozen=True)
class BranchSpec:
    """One hidden layer: input width, unit count, and activation."""

    input_width: int
    hidden_width: int
    activation: str
    maxout_pieces: int | None = None

    def __post_init__(self):
        if self.input_width < 1 or self.hidden_width < 1:
            raise ConfigError(f"branch widths must be positive: {self}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")
        if (self.activation == "maxout") != (self.maxout_pieces is not None):
            raise ConfigError("maxout_pieces must be set exactly when activation is maxout")
        if self.maxout_pieces is not None and self.maxout_pieces < 1:
            raise ConfigError("maxout_pieces must be >= 1")


@dataclass(frozen=True)
class NoisePrior:
    """Distribution of the latent input: uniform unit hypercube or standard Gaussian."""

    kind: str
    dimension: int

    def __post_init__(self):
        if self.kind not in NOISE_KINDS:
            raise ConfigError(f"unknown noise prior kind {self.kind!r}")
        if self.dimension < 1:
            raise ConfigError("noise dimension must be >= 1")

    def draw(self, batch: int, rng: RngStream, dtype=np.float32) -> np.ndarray:
        if self.kind == "uniform":
            z = rng.uniform((batch, self.dimension))
        else:
            z = rng.normal((batch, self.dimension))
        return z.astype(dtype, copy=False)


@dataclass(frozen=True)
class NetSpec:
    """Declarative two-branch MLP architecture.

    ``branch_a`` carries the data (discriminator) or noise (generator) input,
    ``branch_b`` the conditioning input. ``joint`` is the hidden layer applied
    after branch concatenation; when None the output layer consumes the
    concatenated branches directly. Generators carry the noise prior used to
    draw their latent input.
    """

    role: str
    branch_a: BranchSpec
    branch_b: BranchSpec
    joint: BranchSpec | None
    output_width: int
    output_activation: str
    dropout_rate: float
    noise: NoisePrior | None = None

    def __post_init__(self):
        if self.role not in ("generator", "discriminator"):
            raise ConfigError(f"unknown role {self.role!r}")
        if self.output_activation not in OUTPUT_ACTIVATIONS:
            raise ConfigError(f"unknown output activation {self.output_activation!r}")
        if self.output_width < 1:
            raise ConfigError("output_width must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")
        if self.role == "discriminator":
            if self.output_width != 1 or self.output_activation != "sigmoid":
                raise ConfigError("discriminator output must be a single sigmoid unit")
            if self.noise is not None:
                raise ConfigError("discriminators take no noise prior")
        else:
            if self.noise is None:
                raise ConfigError("generator spec requires a noise prior")
            if self.noise.dimension != self.branch_a.input_width:
                raise ConfigError("noise dimension must match branch_a input width")
        joint_in = self.branch_a.hidden_width + self.branch_b.hidden_width
        if self.joint is not None and self.joint.input_width != joint_in:
            raise ConfigError(
                f"joint input width {self.joint.input_width} != "
                f"sum of branch hidden widths {joint_in}"
            )

    @property
    def output_input_width(self) -> int:
        if self.joint is not None:
            return self.joint.hidden_width
        return self.branch_a.hidden_width + self.branch_b.hidden_width

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        """Layer-name to tensor-shape map; fully determined by the spec."""
        shapes: dict[str, tuple[int, ...]] = {}

        def layer(name: str, spec: BranchSpec):
            if spec.activation == "maxout":
                shapes[f"{name}.w"] = (spec.maxout_pieces, spec.input_width, spec.hidden_width)
                shapes[f"{name}.b"] = (spec.maxout_pieces, spec.hidden_width)
            else:
                shapes[f"{name}.w"] = (spec.input_width, spec.hidden_width)
                shapes[f"{name}.b"] = (spec.hidden_width,)

        layer("branch_a", self.branch_a)
        layer("branch_b", self.branch_b)
        if self.joint is not None:
            layer("joint", self.joint)
        shapes["out.w"] = (self.output_input_width, self.output_width)
        shapes["out.b"] = (self.output_width,)
        return shapes

    def parameter_count(self) -> int:
        return sum(math.prod(s) for s in self.parameter_shapes().values())


@dataclass
class Net:
    """An instantiated NetSpec: named parameter tensors."""

    spec: NetSpec
    parameters: dict[str, Tensor]

    @property
    def dtype(self):
        return self.parameters["out.w"].dtype

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.parameters.values())

    def zero_grads(self) -> None:
        for p in self.parameters.values():
            p.zero_grad()

    def copy_parameters(self) -> dict[str, np.ndarray]:
        return {name: np.array(p.data, copy=True) for name, p in self.parameters.items()}

    def load_parameters(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.spec.parameter_shapes()
        if set(arrays) != set(expected):
            missing = set(expected) - set(arrays)
            extra = set(arrays) - set(expected)
            raise ConfigError(f"parameter name mismatch: missing={missing} extra={extra}")
        for name, arr in arrays.items():
            if tuple(arr.shape) != expected[name]:
                raise ConfigError(
                    f"parameter {name}: shape {tuple(arr.shape)} != expected {expected[name]}"
                )
            self.parameters[name] = Tensor(np.array(arr, copy=True))


def mnist_generator_spec(dropout_rate: float = 0.5) -> NetSpec:
    """Image-mode generator: z(100)+label(10) to 784 sigmoid outputs."""
    return NetSpec(
        role="generator",
        branch_a=BranchSpec(100, 200, "relu"),
        branch_b=BranchSpec(10, 1000, "relu"),
        joint=BranchSpec(1200, 1200, "relu"),
        output_width=784,
        output_activation="sigmoid",
        dropout_rate=dropout_rate,
        noise=NoisePrior("uniform", 100),
    )


def mnist_discriminator_spec(dropout_rate: float = 0.5) -> NetSpec:
    """Image-mode discriminator: maxout branches and joint, one sigmoid unit."""
    return NetSpec(
        role="discriminator",
        branch_a=BranchSpec(784, 240, "maxout", 5),
        branch_b=BranchSpec(10, 50, "maxout", 5),
        joint=BranchSpec(290, 240, "maxout", 4),
        output_width=1,
        output_activation="sigmoid",
        dropout_rate=dropout_rate,
    )


def vector_mode_specs(
    noise_dim: int = 100,
    feat_dim: int = 4096,
    vec_dim: int = 200,
    gen_noise_hidden: int = 500,
    gen_feat_hidden: int = 2000,
    disc_vec_hidden: int = 500,
    disc_feat_hidden: int = 1200,
    disc_joint_units: int = 1000,
    disc_joint_pieces: int = 3,
    dropout_rate: float = 0.5,
) -> tuple[NetSpec, NetSpec]:
    """Vector-output pair: condition on a feature vector, emit embeddings.

    Defaults give the full-size topology; every width scales down for toy
    runs. The generator's joint representation is its linear output layer.
    """
    gen = NetSpec(
        role="generator",
        branch_a=BranchSpec(noise_dim, gen_noise_hidden, "relu"),
        branch_b=BranchSpec(feat_dim, gen_feat_hidden, "relu"),
        joint=None,
        output_width=vec_dim,
        output_activation="linear",
        dropout_rate=dropout_rate,
        noise=NoisePrior("gaussian", noise_dim),
    )
    disc = NetSpec(
        role="discriminator",
        branch_a=BranchSpec(vec_dim, disc_vec_hidden, "relu"),
        branch_b=BranchSpec(feat_dim, disc_feat_hidden, "relu"),
        joint=BranchSpec(disc_vec_hidden + disc_feat_hidden, disc_joint_units,
                         "maxout", disc_joint_pieces),
        output_width=1,
        output_activation="sigmoid",
        dropout_rate=dropout_rate,
    )
    return gen, disc


# parameter initialization draws happen in this fixed name order
_INIT_ORDER = ("branch_a", "branch_b", "joint", "out")


def init_parameters(spec: NetSpec, rng: RngStream, dtype=np.float32) -> Net:
    """Uniform fan-scaled weights, zero biases, deterministic under seed.

    Weights draw from U(-s, s) with s = sqrt(6 / (fan_in + fan_out)), fans
    taken per affine piece; biases start at zero.
    """
    shapes = spec.parameter_shapes()
    params: dict[str, Tensor] = {}
    for base in _INIT_ORDER:
        wname, bname = f"{base}.w", f"{base}.b"
        if wname not in shapes:
            continue
        wshape = shapes[wname]
        fan_in, fan_out = wshape[-2], wshape[-1]
        s = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(wshape, low=-s, high=s).astype(dtype)
        params[wname] = Tensor(w)
        params[bname] = Tensor(np.zeros(shapes[bname], dtype=dtype))
    return Net(spec=spec, parameters=params)


def _as_input(value, dtype, width: int, what: str) -> Tensor:
    if isinstance(value, Tensor):
        t = value
    else:
        t = Tensor(np.asarray(value, dtype=dtype))
    if t.data.ndim != 2 or t.shape[1] != width:
        raise DimensionError(
            f"{what}: expected shape (batch, {width}), got {t.shape}"
        )
    if t.data.dtype != dtype:
        if isinstance(value, Tensor):
            raise DimensionError(f"{what}: dtype {t.data.dtype} != net dtype {dtype}")
        t = Tensor(t.data.astype(dtype))
    return t


def _hidden_layer(tape, spec: BranchSpec, x: Tensor, w: Tensor, b: Tensor,
                  drop_rate: float, mode: str, rng) -> Tensor:
    if spec.activation == "maxout":
        h = maxout(tape, x, w, b)
    else:
        h = relu(tape, affine(tape, x, w, b))
    return dropout(tape, h, drop_rate, mode, rng)


def _forward(net: Net, a_in: Tensor, b_in: Tensor, mode: str, rng,
             tape: Tape | None, final_activation: bool) -> Tensor:
    spec = net.spec
    p = net.parameters
    if mode == "train" and spec.dropout_rate > 0.0 and rng is None:
        raise ConfigError("train-mode forward with dropout requires an rng stream")
    ha = _hidden_layer(tape, spec.branch_a, a_in, p["branch_a.w"], p["branch_a.b"],
                       spec.dropout_rate, mode, rng)
    hb = _hidden_layer(tape, spec.branch_b, b_in, p["branch_b.w"], p["branch_b.b"],
                       spec.dropout_rate, mode, rng)
    h = concat(tape, ha, hb)
    if spec.joint is not None:
        h = _hidden_layer(tape, spec.joint, h, p["joint.w"], p["joint.b"],
                          spec.dropout_rate, mode, rng)
    out = affine(tape, h, p["out.w"], p["out.b"])
    if final_activation and spec.output_activation == "sigmoid":
        out = sigmoid(tape, out)
    return out


# default: record on a fresh tape; pass tape=None for a no-gradient forward
_NEW_TAPE = object()


def _resolve_tape(tape) -> Tape | None:
    if tape is _NEW_TAPE:
        return Tape()
    return tape


def forward_generator(net: Net, z, y, mode: str = "train", rng=None,
                      tape=_NEW_TAPE) -> tuple[Tensor, Tape | None]:
    """Generate a batch conditioned on y from noise z.

    Image mode emits values strictly inside (0, 1); vector mode emits
    unconstrained reals. The tape (given or freshly created) is returned for
    backward passes; pass ``tape=None`` explicitly for a no-gradient forward.
    """
    if net.spec.role != "generator":
        raise ConfigError("forward_generator requires a generator net")
    own_tape = _resolve_tape(tape)
    z_t = _as_input(z, net.dtype, net.spec.branch_a.input_width, "generator noise input")
    y_t = _as_input(y, net.dtype, net.spec.branch_b.input_width, "generator condition input")
    out = _forward(net, z_t, y_t, mode, rng, own_tape, final_activation=True)
    return out, own_tape


def forward_discriminator(net: Net, x, y, mode: str = "train", rng=None,
                          tape=_NEW_TAPE) -> tuple[Tensor, Tape | None]:
    """Probability that each (x, y) pair is real; outputs strictly in (0, 1)."""
    own_tape = _resolve_tape(tape)
    logits, own_tape = forward_discriminator_logits(net, x, y, mode, rng, own_tape)
    return sigmoid(own_tape, logits), own_tape


def forward_discriminator_logits(net: Net, x, y, mode: str = "train", rng=None,
                                 tape=_NEW_TAPE) -> tuple[Tensor, Tape | None]:
    """Pre-sigmoid discriminator scores, for numerically stable losses."""
    if net.spec.role != "discriminator":
        raise ConfigError("forward_discriminator requires a discriminator net")
    own_tape = _resolve_tape(tape)
    x_t = _as_input(x, net.dtype, net.spec.branch_a.input_width, "discriminator data input")
    y_t = _as_input(y, net.dtype, net.spec.branch_b.input_width, "discriminator condition input")
    out = _forward(net, x_t, y_t, mode, rng, own_tape, final_activation=False)
    return out, own_tape


def sample_generator(net: Net, y: np.ndarray, rng: RngStream,
                     mode: str = "eval") -> np.ndarray:
    """Draw one sample per condition row, returning a plain array."""
    y = np.asarray(y)
    z = net.spec.noise.draw(y.shape[0], rng, dtype=net.dtype)
    out, _ = forward_generator(net, z, y, mode=mode, rng=rng, tape=None)
    return out.data


def class_condition_bank(n_classes: int, n_per_class: int, dtype=np.float32) -> np.ndarray:
    """One-hot condition rows, class-major: n_per_class rows per label 0..k-1."""
    eye = np.eye(n_classes, dtype=dtype)
    return np.repeat(eye, n_per_class, axis=0)


def conditional_sample_bank(net: Net, conditions: np.ndarray, rng: RngStream) -> np.ndarray:
    """Eval-mode samples, one per condition row, in row order."""
    return sample_generator(net, conditions, rng, mode="eval")


# ---------------------------------------------------------------------------
# spec serialization (kvtext fragments used by checkpoint headers)
# ---------------------------------------------------------------------------

def spec_to_kv(spec: NetSpec, prefix: str) -> dict:
    kv: dict[str, object] = {
        f"{prefix}.role": spec.role,
        f"{prefix}.output_width": spec.output_width,
        f"{prefix}.output_activation": spec.output_activation,
        f"{prefix}.dropout_rate": spec.dropout_rate,
        f"{prefix}.has_joint": spec.joint is not None,
    }

    def put_branch(name: str, b: BranchSpec):
        kv[f"{prefix}.{name}.input_width"] = b.input_width
        kv[f"{prefix}.{name}.hidden_width"] = b.hidden_width
        kv[f"{prefix}.{name}.activation"] = b.activation
        if b.maxout_pieces is not None:
            kv[f"{prefix}.{name}.maxout_pieces"] = b.maxout_pieces

    put_branch("branch_a", spec.branch_a)
    put_branch("branch_b", spec.branch_b)
    if spec.joint is not None:
        put_branch("joint", spec.joint)
    if spec.noise is not None:
        kv[f"{prefix}.noise.kind"] = spec.noise.kind
        kv[f"{prefix}.noise.dimension"] = spec.noise.dimension
    return kv


def spec_from_kv(kv: dict[str, str], prefix: str) -> NetSpec:
    def branch(name: str) -> BranchSpec:
        activation = kvtext.get_str(kv, f"{prefix}.{name}.activation")
        pieces = None
        if activation == "maxout":
            pieces = kvtext.get_int(kv, f"{prefix}.{name}.maxout_pieces")
        return BranchSpec(
            input_width=kvtext.get_int(kv, f"{prefix}.{name}.input_width"),
            hidden_width=kvtext.get_int(kv, f"{prefix}.{name}.hidden_width"),
            activation=activation,
            maxout_pieces=pieces,
        )

    noise = None
    if f"{prefix}.noise.kind" in kv:
        noise = NoisePrior(
            kind=kvtext.get_str(kv, f"{prefix}.noise.kind"),
            dimension=kvtext.get_int(kv, f"{prefix}.noise.dimension"),
        )
    return NetSpec(
        role=kvtext.get_str(kv, f"{prefix}.role"),
        branch_a=branch("branch_a"),
        branch_b=branch("branch_b"),
        joint=branch("joint") if kvtext.get_bool(kv, f"{prefix}.has_joint") else None,
        output_width=kvtext.get_int(kv, f"{prefix}.output_width"),
        output_activation=kvtext.get_str(kv, f"{prefix}.output_activation"),
        dropout_rate=kvtext.get_float(kv, f"{prefix}.dropout_rate"),
        noise=noise,
    )


def with_dropout(spec: NetSpec, rate: float) -> NetSpec:
    return replace(spec, dropout_rate=rate)


# ---------------------------------------------------------------------------
# model checkpoints (single net, parameters only)
# ---------------------------------------------------------------------------

def save_model(path: str, net: Net, extra_header: dict | None = None) -> None:
    """Persist one net to a CANV1 container; round-trips bit-exactly."""
    from .checkpoint import write_container
    header: dict = {"kind": "model"}
    header.update(spec_to_kv(net.spec, "spec"))
    if extra_header:
        header.update(extra_header)
    write_container(path, header,
                    {f"param.{name}": p.data for name, p in net.parameters.items()})


def load_model(path: str) -> tuple[Net, dict[str, str]]:
    """Load a net from a model container, returning it with the raw header."""
    from .checkpoint import read_container
    header, tensors = read_container(path)
    if kvtext.get_str(header, "kind") != "model":
        raise ConfigError(f"{path}: not a model checkpoint")
    spec = spec_from_kv(header, "spec")
    net = Net(spec=spec, parameters={})
    prefix = "param."
    net.load_parameters({k[len(prefix):]: arr for k, arr in tensors.items()
                         if k.startswith(prefix)})
    return net, header
