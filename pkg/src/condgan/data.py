"""Dataset ingestion and synthesis.

Covers the IDX image/label file pair format (big-endian, magics 0x00000803
and 0x00000801), one-hot label encoding, deterministic tail splits, and the
two synthetic conditional datasets used for desk-scale verification: a 2-d
Gaussian mixture with well-separated class means, and a concept-embedding
corpus pairing noisy feature vectors with unit-norm target embeddings.

All synthesis is pure given (spec, seed): equal seeds give bit-identical
datasets.
"""

from __future__ import annotations

import gzip
import struct
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint, kvtext
from .errors import ConfigError, DataFormatError, DomainError
from .nets import Net, sample_generator
from .tensor import RngStream

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass
class LabeledDataset:
    """Examples x paired with conditioning vectors y."""

    x: np.ndarray
    y: np.ndarray
    source: str = ""
    split: str = ""

    def __post_init__(self):
        if self.x.ndim != 2 or self.y.ndim != 2 or self.x.shape[0] != self.y.shape[0]:
            raise ConfigError(
                f"dataset arrays disagree: x{self.x.shape} y{self.y.shape}"
            )

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def data_dim(self) -> int:
        return self.x.shape[1]

    @property
    def cond_dim(self) -> int:
        return self.y.shape[1]

    def is_one_hot(self) -> bool:
        ok = np.all((self.y == 0) | (self.y == 1))
        return bool(ok and np.all(self.y.sum(axis=1) == 1))


def one_hot(labels: np.ndarray, width: int, dtype=np.float32) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= width:
        raise DomainError(f"labels outside [0, {width}): {labels.min()}..{labels.max()}")
    out = np.zeros((labels.shape[0], width), dtype=dtype)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def _open_maybe_gzip(path: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, path: str, offset: int) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise DataFormatError(
            f"{path}: truncated at byte {offset + len(data)}, expected {offset + n} bytes"
        )
    return data


def load_idx(images_path: str, labels_path: str) -> LabeledDataset:
    """Parse an IDX image/label file pair into a dataset.

    Pixels scale to [0, 1] via division by 255; labels one-hot with width 10.
    Gzip-compressed files are accepted transparently.
    """
    with _open_maybe_gzip(images_path) as f:
        magic, count, rows, cols = struct.unpack(">IIII", _read_exact(f, 16, images_path, 0))
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{images_path}: bad magic, expected {IDX_IMAGE_MAGIC:#010x}, found {magic:#010x}"
            )
        pixels = np.frombuffer(
            _read_exact(f, count * rows * cols, images_path, 16), dtype=np.uint8
        )
    with _open_maybe_gzip(labels_path) as f:
        magic, label_count = struct.unpack(">II", _read_exact(f, 8, labels_path, 0))
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{labels_path}: bad magic, expected {IDX_LABEL_MAGIC:#010x}, found {magic:#010x}"
            )
        labels = np.frombuffer(_read_exact(f, label_count, labels_path, 8), dtype=np.uint8)
    if count != label_count:
        raise DataFormatError(
            f"image count {count} != label count {label_count} "
            f"({images_path} vs {labels_path})"
        )
    x = pixels.reshape(count, rows * cols).astype(np.float32) / np.float32(255.0)
    y = one_hot(labels, 10)
    return LabeledDataset(x=x, y=y, source=str(images_path), split="")


def save_idx(images: np.ndarray, labels: np.ndarray,
             images_path: str, labels_path: str) -> None:
    """Serialize uint8 images (n, rows, cols) and labels to an IDX pair."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise ConfigError(f"bad fixture shapes: images {images.shape}, labels {labels.shape}")
    n, rows, cols = images.shape
    checkpoint.atomic_write_bytes(
        images_path,
        struct.pack(">IIII", IDX_IMAGE_MAGIC, n, rows, cols) + images.tobytes(),
    )
    checkpoint.atomic_write_bytes(
        labels_path,
        struct.pack(">II", IDX_LABEL_MAGIC, n) + labels.tobytes(),
    )


def split(data: LabeledDataset, n_val: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Deterministic tail split: the last n_val examples become validation."""
    n = len(data)
    if not 0 < n_val < n:
        raise ConfigError(f"n_val must be in (0, {n}), got {n_val}")
    cut = n - n_val
    train = LabeledDataset(
        x=np.array(data.x[:cut], copy=True), y=np.array(data.y[:cut], copy=True),
        source=data.source, split="train",
    )
    val = LabeledDataset(
        x=np.array(data.x[cut:], copy=True), y=np.array(data.y[cut:], copy=True),
        source=data.source, split="val",
    )
    return train, val


@dataclass(frozen=True)
class MixtureSpec:
    """Well-separated 2-d Gaussian mixture with one class per component.

    Class means must be pairwise separated by at least 6 standard deviations
    so nearest-center classification of real draws is near-perfect.
    """

    means: tuple[tuple[float, float], ...]
    stddev: float
    per_class: int
    seed: int = 0

    def __post_init__(self):
        if len(self.means) < 2:
            raise ConfigError("mixture needs at least 2 classes")
        if self.stddev < 0:
            raise ConfigError("stddev must be nonnegative")
        if self.per_class < 1:
            raise ConfigError("per_class must be positive")
        m = np.asarray(self.means, dtype=np.float64)
        for i in range(len(m)):
            for j in range(i + 1, len(m)):
                dist = float(np.linalg.norm(m[i] - m[j]))
                if dist < 6.0 * self.stddev:
                    raise ConfigError(
                        f"class means {i} and {j} separated by {dist:.4f} "
                        f"< 6 x stddev = {6 * self.stddev:.4f}"
                    )

    @property
    def k(self) -> int:
        return len(self.means)


def default_mixture_spec(per_class: int = 2000, seed: int = 0) -> MixtureSpec:
    """Four corner classes inside the unit square."""
    return MixtureSpec(
        means=((0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)),
        stddev=0.03,
        per_class=per_class,
        seed=seed,
    )


def synth_mixture(spec: MixtureSpec, rng: RngStream | None = None) -> LabeledDataset:
    """Draw per_class points from each component, class-major order."""
    rng = rng if rng is not None else RngStream((spec.seed, 11))
    means = np.asarray(spec.means, dtype=np.float64)
    xs = []
    labels = []
    for i in range(spec.k):
        pts = means[i] + spec.stddev * rng.normal((spec.per_class, 2))
        xs.append(pts)
        labels.append(np.full(spec.per_class, i))
    x = np.concatenate(xs, axis=0).astype(np.float32)
    y = one_hot(np.concatenate(labels), spec.k)
    return LabeledDataset(x=x, y=y, source="synth-mixture", split="")


@dataclass
class EmbeddingCorpus:
    """Concept prototypes, target embeddings, and the paired training rows.

    ``features`` holds one prototype feature vector per concept (also the
    held-out evaluation queries); ``embeddings`` the unit-norm concept
    vectors the generator should emit.
    """

    features: np.ndarray
    embeddings: np.ndarray
    dataset: LabeledDataset
    extra: dict = field(default_factory=dict)

    @property
    def n_concepts(self) -> int:
        return self.embeddings.shape[0]


def synth_embedding_corpus(n_concepts: int, embed_dim: int, feat_dim: int,
                           rng: RngStream, rows_per_concept: int = 50,
                           feature_noise: float = 0.05,
                           multi_frac: float = 0.2) -> EmbeddingCorpus:
    """Toy multi-modal corpus: noisy features mapped to concept embeddings.

    Concept embeddings are unit-norm; for n_concepts <= embed_dim they are
    built orthonormal so pairwise cosines are ~0. A ``multi_frac`` fraction
    of rows is tagged with a second concept as well, repeating the feature
    row once per associated concept.
    """
    if n_concepts < 2:
        raise ConfigError("corpus needs at least 2 concepts")
    raw = rng.normal((embed_dim, n_concepts))
    if n_concepts <= embed_dim:
        q, _ = np.linalg.qr(raw)
        emb = q.T[:n_concepts]
    else:
        emb = rng.normal((n_concepts, embed_dim))
    emb = emb / np.linalg.norm(emb, axis=1, keepdims=True)
    prototypes = rng.uniform((n_concepts, feat_dim))

    feats = []
    targets = []
    for i in range(n_concepts):
        noise = rng.normal((rows_per_concept, feat_dim)) * feature_noise
        rows = prototypes[i] + noise
        second = rng.integers(0, n_concepts, rows_per_concept)
        coins = rng.uniform(rows_per_concept)
        for r in range(rows_per_concept):
            feats.append(rows[r])
            targets.append(emb[i])
            j = int(second[r])
            if coins[r] < multi_frac and j != i:
                feats.append(rows[r])
                targets.append(emb[j])
    x = np.asarray(targets, dtype=np.float32)
    y = np.asarray(feats, dtype=np.float32)
    dataset = LabeledDataset(x=x, y=y, source="synth-embedding", split="")
    return EmbeddingCorpus(
        features=prototypes.astype(np.float32),
        embeddings=emb.astype(np.float32),
        dataset=dataset,
    )


def nearest_words(query: np.ndarray, table: np.ndarray, k: int) -> list[int]:
    """Concept ids ranked by descending cosine similarity to the query.

    Ties break toward the smaller id. The query may be any nonzero vector;
    cosine similarity ignores its scale.
    """
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    table = np.asarray(table, dtype=np.float64)
    if k > table.shape[0]:
        raise ConfigError(f"k={k} exceeds table size {table.shape[0]}")
    qnorm = np.linalg.norm(query)
    if qnorm == 0.0:
        raise DomainError("zero-norm query has no cosine similarity")
    norms = np.linalg.norm(table, axis=1)
    sims = (table @ query) / (norms * qnorm)
    order = np.argsort(-sims, kind="stable")
    return [int(i) for i in order[:k]]


def tag_frequencies(gen: Net, feature: np.ndarray, table: np.ndarray,
                    n_samples: int, k_near: int,
                    rng: RngStream) -> tuple[Counter, Counter]:
    """Concept counts and accumulated cosines over n_samples neighbor lists."""
    feature = np.asarray(feature).reshape(1, -1)
    conditions = np.repeat(feature, n_samples, axis=0)
    samples = sample_generator(gen, conditions, rng)
    table64 = np.asarray(table, dtype=np.float64)
    norms = np.linalg.norm(table64, axis=1)
    counts: Counter = Counter()
    sims: Counter = Counter()
    for row in samples:
        ids = nearest_words(row, table, k_near)
        counts.update(ids)
        row64 = np.asarray(row, dtype=np.float64)
        qnorm = np.linalg.norm(row64)
        cos = (table64 @ row64) / (norms * qnorm)
        for cid in ids:
            sims[cid] += float(cos[cid])
    return counts, sims


def rank_tags(counts: Counter, sims: Counter, k_out: int) -> list[tuple[int, int]]:
    """(concept, count) pairs ordered by count, then accumulated cosine, then id.

    The similarity key settles frequency ties in favor of the concept the
    samples actually sit closest to; exact double ties fall back to the
    smaller id.
    """
    ranked = sorted(counts.items(),
                    key=lambda item: (-item[1], -sims[item[0]], item[0]))
    return ranked[:k_out]


def top_tags_protocol(gen: Net, feature: np.ndarray, table: np.ndarray,
                      n_samples: int = 100, k_near: int = 20, k_out: int = 10,
                      rng: RngStream | None = None) -> list[int]:
    """Most frequent concepts across the neighbor lists of generated samples.

    Draws ``n_samples`` outputs conditioned on the feature, takes the
    ``k_near`` nearest concepts of each, and returns the ``k_out`` most
    common ids (ties resolved by accumulated similarity, then smaller id).
    """
    if gen.spec.output_activation != "linear":
        raise DomainError("tag protocol requires a vector-mode generator")
    if rng is None:
        rng = RngStream(0)
    counts, sims = tag_frequencies(gen, feature, table, n_samples, k_near, rng)
    return [cid for cid, _ in rank_tags(counts, sims, k_out)]


# ---------------------------------------------------------------------------
# container-backed persistence
# ---------------------------------------------------------------------------

def save_dataset(path: str, data: LabeledDataset) -> None:
    checkpoint.write_container(
        path,
        {"kind": "dataset", "dataset.source": data.source, "dataset.split": data.split},
        {"x": data.x, "y": data.y},
    )


def load_dataset(path: str) -> LabeledDataset:
    header, tensors = checkpoint.read_container(path)
    return LabeledDataset(
        x=tensors["x"], y=tensors["y"],
        source=kvtext.get_str(header, "dataset.source"),
        split=kvtext.get_str(header, "dataset.split"),
    )


def save_corpus(path: str, corpus: EmbeddingCorpus) -> None:
    checkpoint.write_container(
        path,
        {"kind": "corpus",
         "dataset.source": corpus.dataset.source,
         "dataset.split": corpus.dataset.split},
        {"features": corpus.features, "embeddings": corpus.embeddings,
         "x": corpus.dataset.x, "y": corpus.dataset.y},
    )


def load_corpus(path: str) -> EmbeddingCorpus:
    header, tensors = checkpoint.read_container(path)
    if kvtext.get_str(header, "kind") != "corpus":
        raise DataFormatError(f"{path}: not a corpus container")
    dataset = LabeledDataset(
        x=tensors["x"], y=tensors["y"],
        source=kvtext.get_str(header, "dataset.source"),
        split=kvtext.get_str(header, "dataset.split"),
    )
    return EmbeddingCorpus(
        features=tensors["features"], embeddings=tensors["embeddings"], dataset=dataset,
    )
