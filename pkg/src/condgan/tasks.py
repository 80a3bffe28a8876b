"""Ready-made training tasks: dataset, architectures, and default config.

Three tasks are wired: the full MNIST image task, a 2-d four-class Gaussian
mixture for desk-scale conditioning checks, and a synthetic concept-
embedding corpus exercising the vector-output mode. Task defaults can be
overridden field by field through the CLI or a config file.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import data as data_mod
from .errors import ConfigError, DataFormatError
from .nets import (
    BranchSpec,
    NetSpec,
    NoisePrior,
    mnist_discriminator_spec,
    mnist_generator_spec,
)
from .tensor import RngStream
from .train import GanConfig

TASKS = ("mnist", "toy-mixture", "toy-embedding")

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


@dataclass
class TaskBundle:
    """Everything a training run needs, assembled per task."""

    name: str
    gen_spec: NetSpec
    disc_spec: NetSpec
    train_data: data_mod.LabeledDataset
    val_data: data_mod.LabeledDataset
    test_data: data_mod.LabeledDataset | None
    config: GanConfig
    corpus: data_mod.EmbeddingCorpus | None = None


def toy_mixture_gen_spec(n_classes: int = 4, dropout_rate: float = 0.0) -> NetSpec:
    return NetSpec(
        role="generator",
        branch_a=BranchSpec(8, 32, "relu"),
        branch_b=BranchSpec(n_classes, 16, "relu"),
        joint=BranchSpec(48, 48, "relu"),
        output_width=2,
        output_activation="sigmoid",
        dropout_rate=dropout_rate,
        noise=NoisePrior("uniform", 8),
    )


def toy_mixture_disc_spec(n_classes: int = 4, dropout_rate: float = 0.0) -> NetSpec:
    return NetSpec(
        role="discriminator",
        branch_a=BranchSpec(2, 32, "maxout", 3),
        branch_b=BranchSpec(n_classes, 8, "maxout", 3),
        joint=BranchSpec(40, 24, "maxout", 3),
        output_width=1,
        output_activation="sigmoid",
        dropout_rate=dropout_rate,
    )


def toy_embedding_dims() -> dict:
    return {"n_concepts": 32, "embed_dim": 32, "feat_dim": 48}


def toy_embedding_specs(embed_dim: int = 32, feat_dim: int = 48,
                        dropout_rate: float = 0.0) -> tuple[NetSpec, NetSpec]:
    from .nets import vector_mode_specs
    return vector_mode_specs(
        noise_dim=16, feat_dim=feat_dim, vec_dim=embed_dim,
        gen_noise_hidden=48, gen_feat_hidden=48,
        disc_vec_hidden=32, disc_feat_hidden=32,
        disc_joint_units=32, disc_joint_pieces=3,
        dropout_rate=dropout_rate,
    )


def _mnist_paths(data_dir: str) -> dict[str, str]:
    paths = {}
    for key, base in MNIST_FILES.items():
        plain = os.path.join(data_dir, base)
        gz = plain + ".gz"
        if os.path.exists(plain):
            paths[key] = plain
        elif os.path.exists(gz):
            paths[key] = gz
        else:
            raise DataFormatError(f"missing MNIST file {base}[.gz] in {data_dir}")
    return paths


def build_task(name: str, seed: int, data_dir: str | None = None,
               overrides: dict | None = None, train_limit: int = 0) -> TaskBundle:
    """Assemble datasets, specs, and config for one named task.

    ``overrides`` replaces individual GanConfig fields; ``train_limit`` keeps
    only the first N training examples (0 means all).
    """
    overrides = dict(overrides or {})
    overrides.setdefault("seed", seed)

    if name == "mnist":
        if data_dir is None:
            raise ConfigError("mnist task requires --data-dir with the IDX files")
        paths = _mnist_paths(data_dir)
        full = data_mod.load_idx(paths["train_images"], paths["train_labels"])
        test = data_mod.load_idx(paths["test_images"], paths["test_labels"])
        train, val = data_mod.split(full, 10_000)
        if train_limit:
            train = data_mod.LabeledDataset(
                x=train.x[:train_limit], y=train.y[:train_limit],
                source=train.source, split="train",
            )
        defaults = dict(
            batch_size=100, lr_initial=0.1, lr_floor=1e-6, lr_decay_factor=1.00004,
            momentum_initial=0.5, momentum_final=0.7,
            momentum_ramp_steps=max(len(train) // 100, 1),
            dropout_rate=0.5, d_steps_per_g_step=1,
            generator_loss_variant="saturating",
            max_epochs=100, eval_every=500,
            es_samples_per_class=100, es_val_max=1000,
        )
        defaults.update(overrides)
        config = GanConfig(**defaults)
        gen_spec = mnist_generator_spec(config.dropout_rate)
        disc_spec = mnist_discriminator_spec(config.dropout_rate)
        return TaskBundle(name, gen_spec, disc_spec, train, val, test, config)

    if name == "toy-mixture":
        defaults = dict(
            batch_size=100, lr_initial=0.02, lr_floor=1e-6, lr_decay_factor=1.00004,
            momentum_initial=0.5, momentum_final=0.7, momentum_ramp_steps=64,
            dropout_rate=0.0, d_steps_per_g_step=1,
            generator_loss_variant="nonsaturating",
            max_epochs=60, eval_every=0,
            es_samples_per_class=100, es_val_max=0,
        )
        defaults.update(overrides)
        config = GanConfig(**defaults)
        spec = data_mod.default_mixture_spec(per_class=2000, seed=config.seed)
        full = data_mod.synth_mixture(spec)
        train, val = data_mod.split(full, len(full) // 5)
        if train_limit:
            train = data_mod.LabeledDataset(
                x=train.x[:train_limit], y=train.y[:train_limit],
                source=train.source, split="train",
            )
        gen_spec = toy_mixture_gen_spec(spec.k, config.dropout_rate)
        disc_spec = toy_mixture_disc_spec(spec.k, config.dropout_rate)
        return TaskBundle(name, gen_spec, disc_spec, train, val, None, config)

    if name == "toy-embedding":
        defaults = dict(
            batch_size=50, lr_initial=0.1, lr_floor=1e-6, lr_decay_factor=1.00004,
            momentum_initial=0.5, momentum_final=0.7, momentum_ramp_steps=100,
            dropout_rate=0.0, d_steps_per_g_step=1,
            generator_loss_variant="nonsaturating",
            max_epochs=120, eval_every=0,
            es_samples_per_class=50, es_val_max=0,
        )
        defaults.update(overrides)
        config = GanConfig(**defaults)
        dims = toy_embedding_dims()
        corpus = data_mod.synth_embedding_corpus(
            dims["n_concepts"], dims["embed_dim"], dims["feat_dim"],
            RngStream((config.seed, 21)),
        )
        train, val = data_mod.split(corpus.dataset, len(corpus.dataset) // 5)
        if train_limit:
            train = data_mod.LabeledDataset(
                x=train.x[:train_limit], y=train.y[:train_limit],
                source=train.source, split="train",
            )
        gen_spec, disc_spec = toy_embedding_specs(
            dims["embed_dim"], dims["feat_dim"], config.dropout_rate)
        return TaskBundle(name, gen_spec, disc_spec, train, val, None, config,
                          corpus=corpus)

    raise ConfigError(f"unknown task {name!r}; expected one of {TASKS}")
