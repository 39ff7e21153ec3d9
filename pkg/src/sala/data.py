"""Dataset storage, labeled/unlabeled splits, and episode sampling.

A dataset keeps per-class sample arrays plus two orthogonal taggings: each
sample is either *labeled* or *unlabeled*, and each class belongs to exactly
one of the train/validation/test partitions (partitions are class-disjoint).
Episodes draw support and query sets from the labeled split and the unlabeled
set from the unlabeled split, optionally mixing in distractor classes whose
true identity is outside the episode.

On disk a dataset is a directory of four files:

* ``tensors.sdt1``  -- magic ``SDT1``, u32 class count; per class: u32 sample
  count, u8 rank, rank x u32 dims, then the f64 little-endian sample data.
* ``labels.txt``    -- one class name per line, in tensor-file order.
* ``split.bin``     -- per class, a bitmap of labeled flags (LSB first).
* ``partition.txt`` -- one line per class: ``<class_name> <train|validation|test>``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "Dataset",
    "EpisodeSpec",
    "Episode",
    "SampledEpisode",
    "PARTITIONS",
    "load_dataset",
    "save_dataset",
    "make_split",
    "sample_episode",
    "gen_synthetic",
]

SDT1_MAGIC = b"SDT1"
PARTITIONS = ("train", "validation", "test")

TENSOR_FILE = "tensors.sdt1"
LABEL_FILE = "labels.txt"
SPLIT_FILE = "split.bin"
PARTITION_FILE = "partition.txt"


@dataclass
class Dataset:
    """In-memory dataset: per-class sample stacks plus split/partition tags."""

    class_names: list[str]
    samples: list[np.ndarray]          # per class: (n_c, *sample_shape) float64
    labeled: list[np.ndarray]          # per class: (n_c,) bool
    partition: list[str]               # per class: train | validation | test

    def __post_init__(self):
        self.validate()

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.samples[0].shape[1:])

    def classes_in(self, partition: str) -> list[int]:
        return [i for i, p in enumerate(self.partition) if p == partition]

    def labeled_indices(self, cls: int) -> np.ndarray:
        return np.nonzero(self.labeled[cls])[0]

    def unlabeled_indices(self, cls: int) -> np.ndarray:
        return np.nonzero(~self.labeled[cls])[0]

    def validate(self):
        n = len(self.class_names)
        if n == 0:
            raise ValueError("no classes")
        if not (len(self.samples) == len(self.labeled) == len(self.partition) == n):
            raise ValueError(
                f"per-class lists disagree: {n} names, {len(self.samples)} sample stacks, "
                f"{len(self.labeled)} split bitmaps, {len(self.partition)} partition tags"
            )
        shape = tuple(self.samples[0].shape[1:])
        for i, (arr, lab, part) in enumerate(zip(self.samples, self.labeled, self.partition)):
            if arr.ndim < 2 or arr.shape[0] == 0:
                raise ValueError(f"class {self.class_names[i]!r} has no samples")
            if tuple(arr.shape[1:]) != shape:
                raise ValueError(
                    f"class {self.class_names[i]!r} sample shape {arr.shape[1:]} "
                    f"differs from {shape}"
                )
            if lab.shape != (arr.shape[0],) or lab.dtype != np.bool_:
                raise ValueError(f"class {self.class_names[i]!r} split bitmap malformed")
            if part not in PARTITIONS:
                raise ValueError(f"class {self.class_names[i]!r} has unknown partition {part!r}")


@dataclass(frozen=True)
class EpisodeSpec:
    """Episode shape: N ways, K shots, Q queries per class, H unlabeled per
    class, C distractor classes (0 disables distractors)."""

    ways: int
    shots: int
    query: int
    unlabeled_per_class: int
    distractors: int = 0
    seed: int = 0

    def __post_init__(self):
        if min(self.ways, self.shots, self.query, self.unlabeled_per_class) < 1:
            raise ValueError(f"ways/shots/query/unlabeled_per_class must be >= 1, got {self}")
        if self.distractors < 0:
            raise ValueError(f"distractors must be >= 0, got {self.distractors}")

    @property
    def unlabeled_total(self) -> int:
        return (self.ways + self.distractors) * self.unlabeled_per_class

    def with_seed(self, seed: int) -> "EpisodeSpec":
        return EpisodeSpec(self.ways, self.shots, self.query, self.unlabeled_per_class,
                           self.distractors, seed)


@dataclass
class Episode:
    """What the algorithm sees: support/query pairs and raw unlabeled samples."""

    support_x: np.ndarray     # (N*K, *shape)
    support_y: np.ndarray     # (N*K,) episode-local class indices
    query_x: np.ndarray       # (N*Q, *shape)
    query_y: np.ndarray       # (N*Q,)
    unlabeled_x: np.ndarray   # (M, *shape)

    @property
    def n_way(self) -> int:
        return int(self.support_y.max()) + 1


@dataclass
class SampledEpisode:
    """An episode plus its hidden ground truth, kept on a separate channel.

    ``hidden_truth`` holds the dataset-level class index of each unlabeled
    sample (-1 marks nothing; distractors carry their real class, which is
    simply not in ``class_ids``). Diagnostics may read it; the algorithm only
    ever receives ``episode``.
    """

    episode: Episode
    class_ids: list[int]          # dataset class index per episode-local class
    hidden_truth: np.ndarray      # (M,) dataset class index per unlabeled sample

    @property
    def distractor_mask(self) -> np.ndarray:
        return ~np.isin(self.hidden_truth, self.class_ids)

    def truth_local(self) -> np.ndarray:
        """Hidden truth as episode-local indices; -1 for distractors."""
        lookup = {c: i for i, c in enumerate(self.class_ids)}
        return np.array([lookup.get(c, -1) for c in self.hidden_truth], dtype=np.intp)


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    blob = bytearray()
    blob += SDT1_MAGIC
    blob += struct.pack("<I", dataset.n_classes)
    for arr in dataset.samples:
        blob += struct.pack("<I", arr.shape[0])
        sample_shape = arr.shape[1:]
        blob += struct.pack("<B", len(sample_shape))
        for d in sample_shape:
            blob += struct.pack("<I", d)
        blob += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    (path / TENSOR_FILE).write_bytes(bytes(blob))

    (path / LABEL_FILE).write_text("".join(n + "\n" for n in dataset.class_names))

    split = bytearray()
    for lab in dataset.labeled:
        split += np.packbits(lab, bitorder="little").tobytes()
    (path / SPLIT_FILE).write_bytes(bytes(split))

    (path / PARTITION_FILE).write_text(
        "".join(f"{n} {p}\n" for n, p in zip(dataset.class_names, dataset.partition))
    )


def load_dataset(path) -> Dataset:
    path = Path(path)
    tensor_path = path / TENSOR_FILE
    blob = tensor_path.read_bytes()
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise ValueError(f"{tensor_path}: truncated {what} at offset {off}")
        piece = blob[off:off + n]
        off += n
        return piece

    if take(4, "magic") != SDT1_MAGIC:
        raise ValueError(f"{tensor_path}: bad magic at offset 0")
    n_classes = struct.unpack("<I", take(4, "class count"))[0]
    if n_classes == 0:
        raise ValueError(f"{tensor_path}: no classes")
    samples = []
    for c in range(n_classes):
        count = struct.unpack("<I", take(4, f"sample count of class {c}"))[0]
        rank = struct.unpack("<B", take(1, f"rank of class {c}"))[0]
        dims = tuple(struct.unpack("<I", take(4, f"dim of class {c}"))[0] for _ in range(rank))
        n = count * int(np.prod(dims, dtype=np.int64)) if dims else count
        data = np.frombuffer(take(8 * n, f"data of class {c}"), dtype="<f8")
        samples.append(data.reshape((count,) + dims).copy())
    if off != len(blob):
        raise ValueError(f"{tensor_path}: {len(blob) - off} trailing bytes at offset {off}")

    label_path = path / LABEL_FILE
    class_names = label_path.read_text().splitlines()
    if len(class_names) != n_classes:
        raise ValueError(
            f"{label_path}: {len(class_names)} names but tensor file has {n_classes} classes"
        )

    split_path = path / SPLIT_FILE
    split_blob = split_path.read_bytes()
    labeled = []
    soff = 0
    for c, arr in enumerate(samples):
        nbytes = (arr.shape[0] + 7) // 8
        if soff + nbytes > len(split_blob):
            raise ValueError(f"{split_path}: truncated bitmap of class {c} at offset {soff}")
        bits = np.unpackbits(
            np.frombuffer(split_blob[soff:soff + nbytes], dtype=np.uint8),
            bitorder="little")[: arr.shape[0]]
        labeled.append(bits.astype(bool))
        soff += nbytes
    if soff != len(split_blob):
        raise ValueError(f"{split_path}: {len(split_blob) - soff} trailing bytes at offset {soff}")

    partition_path = path / PARTITION_FILE
    by_name = {}
    for lineno, line in enumerate(partition_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.rsplit(None, 1)
        if len(parts) != 2 or parts[1] not in PARTITIONS:
            raise ValueError(f"{partition_path}: malformed line {lineno}: {line!r}")
        if parts[0] in by_name:
            raise ValueError(f"{partition_path}: duplicate class {parts[0]!r} at line {lineno}")
        by_name[parts[0]] = parts[1]
    missing = [n for n in class_names if n not in by_name]
    if missing:
        raise ValueError(f"{partition_path}: missing partition for classes {missing[:5]}")
    partition = [by_name[n] for n in class_names]

    return Dataset(class_names=class_names, samples=samples, labeled=labeled,
                   partition=partition)


# ---------------------------------------------------------------------------
# splits and sampling
# ---------------------------------------------------------------------------

def make_split(dataset: Dataset, labeled_fraction: float, seed: int) -> Dataset:
    """Retag every class with a fresh labeled/unlabeled split, per class.

    The labeled count is the rounded fraction of the class size; a fraction
    that rounds to zero labeled samples is an error.
    """
    if not (0.0 < labeled_fraction < 1.0):
        raise ValueError(f"labeled_fraction must be in (0, 1), got {labeled_fraction}")
    rng = np.random.default_rng(seed)
    labeled = []
    for name, arr in zip(dataset.class_names, dataset.samples):
        n = arr.shape[0]
        k = int(labeled_fraction * n + 0.5)
        if k == 0:
            raise ValueError(
                f"labeled_fraction {labeled_fraction} keeps 0 of {n} samples "
                f"for class {name!r}"
            )
        chosen = rng.choice(n, size=k, replace=False)
        mask = np.zeros(n, dtype=bool)
        mask[chosen] = True
        labeled.append(mask)
    return Dataset(class_names=list(dataset.class_names),
                   samples=[a.copy() for a in dataset.samples],
                   labeled=labeled,
                   partition=list(dataset.partition))


def sample_episode(dataset: Dataset, spec: EpisodeSpec, partition: str) -> SampledEpisode:
    """Draw one episode from a partition, without replacement, seeded by the spec.

    Support and query come from the labeled split of the N chosen classes;
    the unlabeled set takes H samples from the unlabeled split of each of the
    N classes plus each of C distractor classes, then is shuffled so position
    carries no class information.
    """
    if partition not in PARTITIONS:
        raise ValueError(f"unknown partition {partition!r}")
    rng = np.random.default_rng(spec.seed)
    pool = dataset.classes_in(partition)
    need = spec.ways + spec.distractors
    if len(pool) < need:
        raise ValueError(
            f"partition {partition!r} has {len(pool)} classes, episode needs {need}"
        )
    chosen = rng.choice(len(pool), size=need, replace=False)
    episode_classes = [pool[i] for i in chosen[: spec.ways]]
    distractor_classes = [pool[i] for i in chosen[spec.ways:]]

    sup_x, sup_y, qry_x, qry_y = [], [], [], []
    unl_x, unl_truth = [], []
    for local, cls in enumerate(episode_classes):
        lab = dataset.labeled_indices(cls)
        if len(lab) < spec.shots + spec.query:
            raise ValueError(
                f"class {dataset.class_names[cls]!r} has {len(lab)} labeled samples, "
                f"episode needs {spec.shots + spec.query}"
            )
        picks = rng.choice(lab, size=spec.shots + spec.query, replace=False)
        sup_x.append(dataset.samples[cls][picks[: spec.shots]])
        sup_y.append(np.full(spec.shots, local, dtype=np.intp))
        qry_x.append(dataset.samples[cls][picks[spec.shots:]])
        qry_y.append(np.full(spec.query, local, dtype=np.intp))

    for cls in episode_classes + distractor_classes:
        unl = dataset.unlabeled_indices(cls)
        if len(unl) < spec.unlabeled_per_class:
            raise ValueError(
                f"class {dataset.class_names[cls]!r} has {len(unl)} unlabeled samples, "
                f"episode needs {spec.unlabeled_per_class}"
            )
        picks = rng.choice(unl, size=spec.unlabeled_per_class, replace=False)
        unl_x.append(dataset.samples[cls][picks])
        unl_truth.append(np.full(spec.unlabeled_per_class, cls, dtype=np.intp))

    unl_x = np.concatenate(unl_x, axis=0)
    unl_truth = np.concatenate(unl_truth)
    perm = rng.permutation(unl_x.shape[0])

    episode = Episode(
        support_x=np.concatenate(sup_x, axis=0),
        support_y=np.concatenate(sup_y),
        query_x=np.concatenate(qry_x, axis=0),
        query_y=np.concatenate(qry_y),
        unlabeled_x=unl_x[perm],
    )
    return SampledEpisode(episode=episode, class_ids=episode_classes,
                          hidden_truth=unl_truth[perm])


# ---------------------------------------------------------------------------
# synthetic tasks
# ---------------------------------------------------------------------------

def gen_synthetic(n_classes: int, dim: int, cluster_std: float, separation: float,
                  samples_per_class: int, seed: int) -> Dataset:
    """Isotropic Gaussian clusters with pairwise mean separation >= ``separation``.

    Classes are assigned to partitions deterministically: the last fifth each
    to validation and test (at least one each once there are three classes),
    the rest to train. All samples start labeled; apply :func:`make_split`
    for a semi-supervised split.
    """
    if min(n_classes, dim, samples_per_class) < 1 or separation <= 0 or cluster_std < 0:
        raise ValueError("all synthetic-task parameters must be positive")
    rng = np.random.default_rng(seed)
    # Means are rejection-sampled from a ball whose radius starts at the
    # separation itself and grows only when packing fails, so the pairwise
    # separation constraint stays near-binding and classes genuinely compete.
    radius = separation
    means: list[np.ndarray] = []
    for _ in range(n_classes):
        for attempt in range(100_000):
            cand = rng.standard_normal(dim)
            cand *= radius * rng.uniform() ** (1.0 / dim) / np.linalg.norm(cand)
            if all(np.linalg.norm(cand - m) >= separation for m in means):
                means.append(cand)
                break
            if (attempt + 1) % 1_000 == 0:
                radius *= 1.15
        else:
            raise RuntimeError("could not place separated cluster means")

    samples = [
        mean + cluster_std * rng.standard_normal((samples_per_class, dim))
        for mean in means
    ]

    n_val = max(1, n_classes // 5) if n_classes >= 3 else 0
    n_test = max(1, n_classes // 5) if n_classes >= 3 else 0
    partition = (["train"] * (n_classes - n_val - n_test)
                 + ["validation"] * n_val + ["test"] * n_test)

    return Dataset(
        class_names=[f"class_{i:03d}" for i in range(n_classes)],
        samples=samples,
        labeled=[np.ones(samples_per_class, dtype=bool) for _ in range(n_classes)],
        partition=partition,
    )
