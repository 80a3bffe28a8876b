"""Dense tensors, reverse-mode primitives, and a finite-difference checker.

Values are numpy arrays held in :class:`Tensor` nodes that carry a gradient
slot. Each differentiable primitive (affine, relu, sigmoid, maxout, dropout,
concat) computes its output eagerly and, when given a :class:`Tape`, records
a backward closure together with the forward intermediates it needs
(pre-activations, dropout masks, winning maxout piece indices). Replaying the
tape in exact reverse execution order accumulates gradients into every
touched tensor.

Precision is a construction-time property of the underlying array: training
runs in float32, gradient checks and oracles in float64. Matrix products are
delegated to BLAS; the reduction order is fixed for a given build and thread
configuration, so repeated runs in the same environment are bit-identical.
Tensors are treated as immutable once produced; only the optimizer mutates
parameter arrays, between tapes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DimensionError, NumericError


class Tensor:
    """A dense array plus a lazily allocated gradient accumulator."""

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        self.grad = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add a gradient contribution to a tensor, allocating on first touch."""
    if t.grad is None:
        t.grad = g
    else:
        t.grad = t.grad + g


class Tape:
    """Ordered record of executed primitives for one forward pass.

    Backward replays the records in exact reverse execution order. A record
    whose output never received a gradient is skipped, so parts of the graph
    that do not feed the loss cost nothing on the way back. The tape also
    keeps the winning-piece index arrays of every maxout call, in execution
    order; gradient checking compares these signatures across perturbed
    evaluations to detect piece ties.

    Backward closures return the tensors they wrote gradients into, which
    lets ``backward(check_finite=True)`` name the primitive that produced a
    non-finite gradient.
    """

    def __init__(self):
        self._records: list[tuple[str, object]] = []
        self.maxout_winners: list[np.ndarray] = []

    def record(self, op: str, backward) -> None:
        self._records.append((op, backward))

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor, check_finite: bool = False) -> None:
        """Seed the root gradient with ones and replay the tape in reverse."""
        root.grad = np.ones_like(root.data)
        for op, fn in reversed(self._records):
            touched = fn()
            if check_finite and touched:
                for t in touched:
                    if t.grad is not None and not np.all(np.isfinite(t.grad)):
                        raise NumericError(
                            f"non-finite gradient produced by {op} backward"
                        )


def _require_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")


def affine(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Batched affine map: out[i, j] = sum_k x[i, k] w[k, j] + b[j]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise DimensionError(
            f"affine: expected 2-d input and weights, got {x.shape} and {w.shape}"
        )
    if x.shape[1] != w.shape[0]:
        raise DimensionError(
            f"affine: input width {x.shape[1]} != weight rows {w.shape[0]}"
        )
    if b.data.shape != (w.shape[1],):
        raise DimensionError(
            f"affine: bias shape {b.shape} != ({w.shape[1]},)"
        )
    out = Tensor(x.data @ w.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(x, g @ w.data.T)
            accumulate_grad(w, x.data.T @ g)
            accumulate_grad(b, g.sum(axis=0))
            return (x, w, b)
        tape.record("affine", backward)
    return out


def _relu_grad_mask(x: np.ndarray) -> np.ndarray:
    # separate function so tests can corrupt the backward path on purpose
    return x > 0


def relu(tape: Tape | None, x: Tensor) -> Tensor:
    """Elementwise max(0, v); gradient flows only where v > 0."""
    out = Tensor(np.maximum(x.data, 0))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(x, g * _relu_grad_mask(x.data))
            return (x,)
        tape.record("relu", backward)
    return out


def sigmoid_values(v: np.ndarray) -> np.ndarray:
    """Numerically stable logistic function, clamped to the open interval.

    Large |v| saturates to the nearest representable value inside (0, 1)
    rather than reaching 0 or 1 exactly, so downstream logarithms stay finite.
    """
    v = np.asarray(v)
    out = np.empty_like(v)
    pos = v >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-v[pos]))
    ev = np.exp(v[~pos])
    out[~pos] = ev / (1.0 + ev)
    info = np.finfo(out.dtype)
    np.clip(out, info.tiny, 1.0 - info.epsneg, out=out)
    return out


def sigmoid(tape: Tape | None, x: Tensor) -> Tensor:
    """Elementwise logistic; output strictly inside (0, 1)."""
    s = sigmoid_values(x.data)
    out = Tensor(s)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(x, g * (s * (1.0 - s)))
            return (x,)
        tape.record("sigmoid", backward)
    return out


def maxout(tape: Tape | None, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Max over affine pieces: out[i, u] = max_k (x @ w[k] + b[k])[i, u].

    ``w`` has shape (pieces, in, units) and ``b`` (pieces, units). The winning
    piece index per (example, unit) is saved; backward routes the gradient
    exclusively through that piece. Ties resolve to the lowest piece index.
    """
    if w.data.ndim != 3:
        raise DimensionError(f"maxout: weights must be 3-d, got {w.shape}")
    pieces = w.shape[0]
    if pieces == 0:
        raise ConfigError("maxout: pieces must be >= 1")
    if x.data.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"maxout: input width {x.shape} incompatible with weights {w.shape}"
        )
    if b.data.shape != (pieces, w.shape[2]):
        raise DimensionError(
            f"maxout: bias shape {b.shape} != ({pieces}, {w.shape[2]})"
        )
    # z[i, k, u] = (x @ w[k] + b[k])[i, u]
    z = np.tensordot(x.data, w.data, axes=([1], [1])) + b.data
    winner = z.argmax(axis=1)  # first max wins, i.e. lowest piece index
    out = Tensor(np.take_along_axis(z, winner[:, None, :], axis=1)[:, 0, :])
    if tape is not None:
        tape.maxout_winners.append(winner)

        def backward():
            g = out.grad
            if g is None:
                return ()
            dx = np.zeros_like(x.data)
            dw = np.zeros_like(w.data)
            db = np.zeros_like(b.data)
            for k in range(pieces):
                gk = g * (winner == k)
                dx += gk @ w.data[k].T
                dw[k] = x.data.T @ gk
                db[k] = gk.sum(axis=0)
            accumulate_grad(x, dx)
            accumulate_grad(w, dw)
            accumulate_grad(b, db)
            return (x, w, b)
        tape.record("maxout", backward)
    return out


def dropout(tape: Tape | None, x: Tensor, rate: float, mode: str,
            rng: "RngStream | None") -> Tensor:
    """Inverted dropout: zero with probability ``rate``, scale survivors.

    Train mode scales surviving activations by 1/(1-rate) so evaluation is
    the identity. ``rate`` = 0 is the identity in both modes.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in ("train", "eval"):
        raise ConfigError(f"dropout mode must be 'train' or 'eval', got {mode!r}")
    if mode == "eval" or rate == 0.0:
        return x
    if rng is None:
        raise ConfigError("dropout in train mode requires an rng stream")
    dtype = x.data.dtype
    keep = rng.uniform(x.shape) >= rate
    factor = keep.astype(dtype) * dtype.type(1.0 / (1.0 - rate))
    out = Tensor(x.data * factor)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(x, g * factor)
            return (x,)
        tape.record("dropout", backward)
    return out


def concat(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Row-wise concatenation along the feature axis."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(
            f"concat: batch extents differ, got {a.shape} and {b.shape}"
        )
    n = a.shape[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(a, g[:, :n])
            accumulate_grad(b, g[:, n:])
            return (a, b)
        tape.record("concat", backward)
    return out


def mean_all(tape: Tape | None, x: Tensor) -> Tensor:
    """Mean over all elements, as a scalar tensor."""
    out = Tensor(x.data.mean())
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(x, np.full_like(x.data, g / x.data.size))
            return (x,)
        tape.record("mean_all", backward)
    return out


def add_scalars(tape: Tape | None, a: Tensor, b: Tensor) -> Tensor:
    """Sum of two scalar tensors."""
    out = Tensor(a.data + b.data)
    if tape is not None:
        def backward():
            g = out.grad
            if g is None:
                return ()
            accumulate_grad(a, g)
            accumulate_grad(b, g)
            return (a, b)
        tape.record("add_scalars", backward)
    return out


class RngStream:
    """Deterministic random stream with serializable state.

    Backed by PCG64; an identical seed and an identical sequence of draw
    calls reproduce bit-identical outputs on the same build. The draw counter
    records how many calls the stream has served, and the full generator
    state round-trips through :meth:`state` / :meth:`set_state` so training
    can resume mid-run exactly.
    """

    algorithm = "pcg64"

    def __init__(self, seed):
        self.seed = seed
        self._bitgen = np.random.PCG64(np.random.SeedSequence(seed))
        self._gen = np.random.Generator(self._bitgen)
        self.draws = 0

    def uniform(self, shape=None, low: float = 0.0, high: float = 1.0) -> np.ndarray:
        self.draws += 1
        return self._gen.uniform(low, high, shape)

    def normal(self, shape=None) -> np.ndarray:
        self.draws += 1
        return self._gen.standard_normal(shape)

    def permutation(self, n: int) -> np.ndarray:
        self.draws += 1
        return self._gen.permutation(n)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        self.draws += 1
        return self._gen.integers(low, high, shape)

    def state(self) -> dict:
        raw = self._bitgen.state
        return {
            "algorithm": self.algorithm,
            "draws": self.draws,
            "pcg64.state": str(raw["state"]["state"]),
            "pcg64.inc": str(raw["state"]["inc"]),
            "pcg64.has_uint32": int(raw["has_uint32"]),
            "pcg64.uinteger": int(raw["uinteger"]),
        }

    def set_state(self, state: dict) -> None:
        if state.get("algorithm", self.algorithm) != self.algorithm:
            raise ConfigError(f"rng algorithm mismatch: {state.get('algorithm')!r}")
        self._bitgen.state = {
            "bit_generator": "PCG64",
            "state": {
                "state": int(state["pcg64.state"]),
                "inc": int(state["pcg64.inc"]),
            },
            "has_uint32": int(state["pcg64.has_uint32"]),
            "uinteger": int(state["pcg64.uinteger"]),
        }
        self.draws = int(state["draws"])


@dataclass
class TensorCheck:
    """Per-tensor outcome of a gradient check."""

    name: str
    n_checked: int
    n_excluded: int
    max_rel_err: float


@dataclass
class GradCheckReport:
    """Finite-difference comparison report for one composite function."""

    tolerance: float
    step: float
    checks: list[TensorCheck] = field(default_factory=list)

    @property
    def max_rel_err(self) -> float:
        return max((c.max_rel_err for c in self.checks), default=0.0)

    @property
    def n_excluded(self) -> int:
        return sum(c.n_excluded for c in self.checks)

    @property
    def passed(self) -> bool:
        return all(c.max_rel_err <= self.tolerance for c in self.checks)

    def summary_lines(self) -> list[str]:
        lines = []
        for c in self.checks:
            status = "ok" if c.max_rel_err <= self.tolerance else "FAIL"
            lines.append(
                f"{c.name}: max_rel_err={c.max_rel_err:.3e} "
                f"checked={c.n_checked} excluded={c.n_excluded} [{status}]"
            )
        return lines


def _winner_signature(tape: Tape) -> list[np.ndarray]:
    return tape.maxout_winners


def _signatures_differ(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return True
    return any(not np.array_equal(x, y) for x, y in zip(a, b))


def grad_check(fn, params: dict[str, Tensor], step: float = 1e-5,
               tolerance: float = 1e-5, max_elements: int = 100,
               denom_floor: float = 1e-4, sample_seed: int = 0) -> GradCheckReport:
    """Compare analytic gradients of a scalar function to central differences.

    ``fn`` takes a fresh :class:`Tape` and returns a scalar loss tensor; it
    must be deterministic across calls (dropout in eval mode or with a mask
    regenerated from a fixed seed). Parameters must be float64 for the stated
    tolerances to be meaningful.

    Every element is checked for tensors up to ``max_elements`` entries;
    larger tensors are subsampled at ``max_elements`` random elements (at
    least 100). The relative error denominator is floored at ``denom_floor``
    so negligible gradients compare in scaled absolute terms. A mismatch
    whose +h/-h evaluations select different maxout pieces sits on a piece
    tie and is counted as excluded rather than as a failure.
    """
    base_tape = Tape()
    loss = fn(base_tape)
    if loss.data.ndim != 0:
        raise ConfigError("grad_check requires a scalar-valued function")
    if not np.isfinite(loss.data):
        raise NumericError("non-finite loss in grad_check forward pass")
    for p in params.values():
        p.zero_grad()
    base_tape.backward(loss)
    analytic = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        _require_finite(g, f"analytic gradient of {name}")
        analytic[name] = np.array(g, copy=True)

    sampler = np.random.Generator(np.random.PCG64(sample_seed))
    max_elements = max(max_elements, 100)
    report = GradCheckReport(tolerance=tolerance, step=step)

    def eval_fn():
        tape = Tape()
        value = fn(tape)
        if not np.isfinite(value.data):
            raise NumericError("non-finite value during finite differencing")
        return float(value.data), _winner_signature(tape)

    for name, p in params.items():
        flat = p.data.reshape(-1)
        size = flat.size
        if size <= max_elements:
            indices = np.arange(size)
        else:
            indices = sampler.choice(size, size=max_elements, replace=False)
        worst = 0.0
        excluded = 0
        ga = analytic[name].reshape(-1)
        for idx in indices:
            saved = flat[idx]
            flat[idx] = saved + step
            f_plus, sig_plus = eval_fn()
            flat[idx] = saved - step
            f_minus, sig_minus = eval_fn()
            flat[idx] = saved
            numeric = (f_plus - f_minus) / (2.0 * step)
            a = float(ga[idx])
            denom = max(abs(a), abs(numeric), denom_floor)
            rel = abs(a - numeric) / denom
            if rel > tolerance and _signatures_differ(sig_plus, sig_minus):
                excluded += 1
                continue
            worst = max(worst, rel)
        report.checks.append(
            TensorCheck(name=name, n_checked=len(indices) - excluded,
                        n_excluded=excluded, max_rel_err=worst)
        )
    return report
