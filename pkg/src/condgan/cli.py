"""Command-line operator surface.

Subcommands: ``train``, ``sample``, ``eval-parzen``, ``gradcheck``, ``tags``.
Every run writes its fully resolved configuration next to its outputs so any
artifact can be reproduced bit-exactly. Exit codes: 0 success, 1 usage or
configuration error, 2 data or format error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import data as data_mod
from . import kvtext, parzen, pgm, tasks
from .checkpoint import atomic_write_text, read_container
from .checks import run_architecture_gradchecks
from .errors import (
    ConfigError,
    DataFormatError,
    DimensionError,
    DomainError,
    NumericError,
)
from .nets import Net, class_condition_bank, load_model, sample_generator, save_model
from .tensor import RngStream
from .train import (
    GanConfig,
    config_to_kv,
    init_rng,
    load_training_state,
    make_train_state,
    save_training_state,
    train,
)
from .nets import init_parameters

# published full-protocol reference values for context in eval output
PUBLISHED_REFERENCE = (
    ("conditional adversarial nets", 132.0, 1.8),
    ("adversarial nets", 225.0, 2.0),
)

_SAMPLE_TAG = 7

_CONFIG_FIELD_TYPES = {
    "batch_size": int, "lr_initial": float, "lr_floor": float,
    "lr_decay_factor": float, "momentum_initial": float, "momentum_final": float,
    "momentum_ramp_steps": int, "dropout_rate": float, "d_steps_per_g_step": int,
    "generator_loss_variant": str, "max_epochs": int, "eval_every": int,
    "seed": int, "es_samples_per_class": int, "es_val_max": int,
}


def load_generator(path: str) -> tuple[Net, dict[str, str]]:
    """Load the generator from either a model or a training container."""
    header, _ = read_container(path)
    kind = kvtext.get_str(header, "kind")
    if kind == "model":
        return load_model(path)
    if kind == "training":
        gen, _, _ = load_training_state(path)
        return gen, header
    raise DataFormatError(f"{path}: unknown container kind {kind!r}")


class MetricsWriter:
    """Append-only line-delimited key=value metrics stream."""

    def __init__(self, path: str):
        self.path = path
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        self._handle = open(path, "a", encoding="utf-8")

    def __call__(self, record: dict) -> None:
        self._handle.write(kvtext.format_record(record) + "\n")
        self._handle.flush()

    def close(self) -> None:
        self._handle.close()


def read_metrics(path: str) -> list[dict[str, str]]:
    with open(path, encoding="utf-8") as f:
        return [kvtext.parse_record(line) for line in f if line.strip()]


def render_metrics_chart(metrics_path: str, out_path: str) -> None:
    """Static chart of losses and discriminator means from a metrics file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    records = read_metrics(metrics_path)
    steps = [int(r["step"]) for r in records]
    fig, axes = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    axes[0].plot(steps, [float(r["d_loss"]) for r in records], label="d_loss")
    axes[0].plot(steps, [float(r["g_loss"]) for r in records], label="g_loss")
    axes[0].legend()
    axes[0].set_ylabel("loss")
    axes[1].plot(steps, [float(r["d_real"]) for r in records], label="mean D(real)")
    axes[1].plot(steps, [float(r["d_fake"]) for r in records], label="mean D(fake)")
    val_pts = [(int(r["step"]), float(r["val_ll"])) for r in records if "val_ll" in r]
    if val_pts:
        ax2 = axes[1].twinx()
        ax2.plot(*zip(*val_pts), "k.", label="val_ll")
        ax2.set_ylabel("val_ll")
    axes[1].legend(loc="upper left")
    axes[1].set_xlabel("step")
    axes[1].set_ylabel("D output")
    fig.tight_layout()
    fig.savefig(out_path)
    plt.close(fig)


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, dest="max_epochs")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float, dest="lr_initial")
    p.add_argument("--lr-floor", type=float, dest="lr_floor")
    p.add_argument("--lr-decay", type=float, dest="lr_decay_factor")
    p.add_argument("--momentum-initial", type=float, dest="momentum_initial")
    p.add_argument("--momentum-final", type=float, dest="momentum_final")
    p.add_argument("--momentum-ramp", type=int, dest="momentum_ramp_steps")
    p.add_argument("--dropout", type=float, dest="dropout_rate")
    p.add_argument("--d-steps", type=int, dest="d_steps_per_g_step")
    p.add_argument("--loss-variant", choices=("saturating", "nonsaturating"),
                   dest="generator_loss_variant")
    p.add_argument("--eval-every", type=int, dest="eval_every")
    p.add_argument("--es-samples-per-class", type=int, dest="es_samples_per_class")
    p.add_argument("--es-val-max", type=int, dest="es_val_max")


def _resolve_train_settings(args) -> dict:
    """Merge config file values and CLI flags; flags win."""
    settings: dict = {"task": None, "seed": 0, "train_limit": 0,
                      "checkpoint_every": 0, "overrides": {}}
    if args.config:
        with open(args.config, encoding="utf-8") as f:
            kv = kvtext.parse(f.read())
        for name, typ in _CONFIG_FIELD_TYPES.items():
            key = f"config.{name}"
            if key in kv:
                settings["overrides"][name] = typ(kv[key])
        if "run.task" in kv:
            settings["task"] = kv["run.task"]
        if "run.seed" in kv:
            settings["seed"] = int(kv["run.seed"])
        if "run.train_limit" in kv:
            settings["train_limit"] = int(kv["run.train_limit"])
        if "run.checkpoint_every" in kv:
            settings["checkpoint_every"] = int(kv["run.checkpoint_every"])
    if args.task:
        settings["task"] = args.task
    if args.seed is not None:
        settings["seed"] = args.seed
    if args.train_limit is not None:
        settings["train_limit"] = args.train_limit
    if args.checkpoint_every is not None:
        settings["checkpoint_every"] = args.checkpoint_every
    for name in _CONFIG_FIELD_TYPES:
        value = getattr(args, name, None)
        if value is not None:
            settings["overrides"][name] = value
    settings["overrides"]["seed"] = settings["seed"]
    if settings["task"] is None:
        raise ConfigError("no task given: pass --task or a config file with run.task")
    return settings


def _emit_resolved_config(out_dir: str, task: str, config: GanConfig,
                          settings: dict, data_dir: str | None) -> None:
    kv = {"run.task": task,
          "run.seed": config.seed,
          "run.train_limit": settings["train_limit"],
          "run.checkpoint_every": settings["checkpoint_every"]}
    if data_dir:
        kv["run.data_dir"] = data_dir
    kv.update(config_to_kv(config))
    atomic_write_text(os.path.join(out_dir, "config.txt"), kvtext.dump(kv))


def cmd_train(args) -> int:
    out_dir = args.out_dir
    os.makedirs(out_dir, exist_ok=True)

    if args.resume:
        gen, disc, state = load_training_state(args.resume)
        header, _ = read_container(args.resume)
        task_name = kvtext.get_str(header, "run.task")
        settings = {"task": task_name,
                    "seed": state.config.seed,
                    "train_limit": kvtext.get_int(header, "run.train_limit"),
                    "checkpoint_every": kvtext.get_int(header, "run.checkpoint_every"),
                    "overrides": {}}
        overrides = {name: getattr(state.config, name) for name in _CONFIG_FIELD_TYPES}
        bundle = tasks.build_task(task_name, state.config.seed, args.data_dir,
                                  overrides=overrides,
                                  train_limit=settings["train_limit"])
        config = state.config
    else:
        settings = _resolve_train_settings(args)
        task_name = settings["task"]
        bundle = tasks.build_task(task_name, settings["seed"], args.data_dir,
                                  overrides=settings["overrides"],
                                  train_limit=settings["train_limit"])
        config = bundle.config
        rng = init_rng(config)
        gen = init_parameters(bundle.gen_spec, rng)
        disc = init_parameters(bundle.disc_spec, rng)
        state = make_train_state(config, gen, disc)

    _emit_resolved_config(out_dir, task_name, config, settings, args.data_dir)
    if bundle.corpus is not None:
        data_mod.save_corpus(os.path.join(out_dir, "corpus.canv"), bundle.corpus)

    extra = {"run.task": task_name,
             "run.train_limit": settings["train_limit"],
             "run.checkpoint_every": settings["checkpoint_every"]}
    metrics = MetricsWriter(os.path.join(out_dir, "metrics.txt"))
    checkpoint_every = settings["checkpoint_every"]

    def step_callback(st):
        if checkpoint_every and st.step % checkpoint_every == 0:
            save_training_state(
                os.path.join(out_dir, f"checkpoint_step_{st.step}.canv"),
                gen, disc, st, extra_header=extra)

    try:
        state = train(gen, disc, bundle.train_data, config, state=state,
                      val_data=bundle.val_data if config.eval_every else None,
                      metrics_sink=metrics, step_callback=step_callback)
    except NumericError as exc:
        save_training_state(os.path.join(out_dir, "aborted.canv"), gen, disc,
                            state, extra_header=extra)
        metrics.close()
        print(f"numeric abort: {exc}", file=sys.stderr)
        print(f"last good training state saved to {out_dir}/aborted.canv",
              file=sys.stderr)
        return 3
    metrics.close()

    save_training_state(os.path.join(out_dir, "final.canv"), gen, disc, state,
                        extra_header=extra)
    save_model(os.path.join(out_dir, "model.canv"), gen,
               extra_header={"run.task": task_name, "model.step": state.step})
    if state.best_gen_params is not None:
        best = Net(spec=gen.spec, parameters={})
        best.load_parameters(state.best_gen_params)
        save_model(os.path.join(out_dir, "best.canv"), best,
                   extra_header={"run.task": task_name,
                                 "model.step": state.best_step,
                                 "model.val_ll": state.best_val_ll})
    if args.plot:
        render_metrics_chart(os.path.join(out_dir, "metrics.txt"),
                             os.path.join(out_dir, "metrics.png"))
    print(f"trained {state.step} steps over {state.epoch} epochs")
    if state.best_val_ll is not None:
        print(f"best validation log-likelihood {state.best_val_ll:.4f} "
              f"at step {state.best_step}")
    return 0


# ---------------------------------------------------------------------------
# sample
# ---------------------------------------------------------------------------

def cmd_sample(args) -> int:
    gen, _ = load_generator(args.checkpoint)
    if gen.spec.role != "generator":
        raise ConfigError(f"{args.checkpoint}: not a generator checkpoint")
    if gen.spec.output_activation != "sigmoid":
        raise ConfigError("sample grids require an image-mode checkpoint")
    n_classes = gen.spec.branch_b.input_width
    n_per_class = args.n_per_class
    rng = RngStream((args.seed, _SAMPLE_TAG))
    conditions = class_condition_bank(n_classes, n_per_class, dtype=gen.dtype)
    samples = sample_generator(gen, conditions, rng)
    grid = pgm.sample_grid(samples.reshape(n_classes, n_per_class, -1))
    pgm.write_pgm(args.out, grid)
    print(f"wrote {grid.shape[1]}x{grid.shape[0]} grid to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# eval-parzen
# ---------------------------------------------------------------------------

def cmd_eval_parzen(args) -> int:
    gen, _ = load_generator(args.checkpoint)
    if gen.spec.output_activation != "sigmoid":
        raise ConfigError("likelihood evaluation requires an image-mode checkpoint")
    paths = tasks._mnist_paths(args.data_dir)
    test = data_mod.load_idx(paths["test_images"], paths["test_labels"])
    full = data_mod.load_idx(paths["train_images"], paths["train_labels"])
    _, val = data_mod.split(full, 10_000)
    val_x = val.x if args.val_max == 0 else val.x[: args.val_max]
    test_x = test.x if args.test_max == 0 else test.x[: args.test_max]
    rng = RngStream((args.seed, 9))
    grid = parzen.default_sigma_grid(args.sigma_low, args.sigma_high, args.sigma_points)
    report = parzen.table1_protocol(gen, test_x, val_x, rng,
                                    n_per_class=args.samples_per_class,
                                    sigma_grid=grid)
    lines = kvtext.dump(report.to_kv())
    atomic_write_text(args.out, lines)
    print(lines, end="")
    print(f"mean log-likelihood {report.mean_ll:.2f} +/- {report.std_error:.2f} nats "
          f"(sigma={report.sigma_used:.4f}, {report.n_samples} samples, "
          f"{report.n_test} test points)")
    for name, mean, err in PUBLISHED_REFERENCE:
        print(f"published full-protocol reference: {name} {mean:g} +/- {err:g}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    results = run_architecture_gradchecks(seed=args.seed, tolerance=args.tolerance)
    all_ok = True
    for name, report in results:
        for line in report.summary_lines():
            print(f"{name}.{line}")
        all_ok = all_ok and report.passed
    print(f"gradient checks {'passed' if all_ok else 'FAILED'} "
          f"(tolerance {args.tolerance:g})")
    return 0 if all_ok else 3


# ---------------------------------------------------------------------------
# tags
# ---------------------------------------------------------------------------

def cmd_tags(args) -> int:
    gen, _ = load_generator(args.checkpoint)
    if gen.spec.output_activation != "linear":
        raise ConfigError("tag generation requires a vector-mode checkpoint")
    corpus = data_mod.load_corpus(args.corpus)
    if args.feature_index >= corpus.n_concepts:
        raise ConfigError(
            f"feature index {args.feature_index} out of range "
            f"(corpus has {corpus.n_concepts} concepts)")
    feature = corpus.features[args.feature_index]
    rng = RngStream((args.seed, 13, args.feature_index))
    counts, sims = data_mod.tag_frequencies(gen, feature, corpus.embeddings,
                                            args.n_samples, args.k_near, rng)
    ranked = data_mod.rank_tags(counts, sims, args.k_out)
    lines = [f"rank={i + 1} concept={cid} count={cnt}"
             for i, (cid, cnt) in enumerate(ranked)]
    text = "\n".join(lines) + "\n"
    if args.out:
        atomic_write_text(args.out, text)
    print(text, end="")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="condgan",
        description="Conditional adversarial network trainer and evaluator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a generator/discriminator pair")
    p.add_argument("--task", choices=tasks.TASKS)
    p.add_argument("--config", help="canonical key=value config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--data-dir", help="directory with MNIST IDX files")
    p.add_argument("--seed", type=int)
    p.add_argument("--train-limit", type=int)
    p.add_argument("--checkpoint-every", type=int)
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--plot", action="store_true",
                   help="render a static metrics chart after training")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="write a conditional sample grid (PGM)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--n-per-class", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval-parzen", help="Parzen-window likelihood evaluation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data-dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--samples-per-class", type=int, default=1000)
    p.add_argument("--val-max", type=int, default=0, help="0 means full split")
    p.add_argument("--test-max", type=int, default=0, help="0 means full split")
    p.add_argument("--sigma-low", type=float, default=0.01)
    p.add_argument("--sigma-high", type=float, default=1.0)
    p.add_argument("--sigma-points", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_eval_parzen)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("tags", help="generate concept tags for a feature vector")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--feature-index", type=int, required=True)
    p.add_argument("--n-samples", type=int, default=100)
    p.add_argument("--k-near", type=int, default=20)
    p.add_argument("--k-out", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_tags)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DimensionError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFormatError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
