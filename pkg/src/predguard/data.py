"""Purchase-style binary datasets: synthesis, k-means labelling, splits."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROTOTYPE_DENSITY = 0.3


@dataclass(frozen=True)
class Record:
    features: np.ndarray
    label: int


@dataclass(frozen=True)
class SynthesisConfig:
    n_records: int = 8000
    n_features: int = 600
    n_classes: int = 100
    n_latent_groups: int = 200
    flip_prob: float = 0.1
    seed: int = 0
    # records are drawn with this seed when set; prototypes always use ``seed``
    sample_seed: int | None = None

    def __post_init__(self):
        for name in ("n_records", "n_features", "n_classes", "n_latent_groups"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_latent_groups < self.n_classes:
            raise ValueError("n_latent_groups must be >= n_classes")
        if not 0.0 <= self.flip_prob < 0.5:
            raise ValueError("flip_prob must lie in [0, 0.5)")

    def shifted(self, flip_prob: float, sample_seed: int) -> "SynthesisConfig":
        """Same prototypes, different record noise and draw."""
        return dataclasses.replace(self, flip_prob=flip_prob, sample_seed=sample_seed)


@dataclass
class Dataset:
    features: np.ndarray  # (n, F) float64 in {0, 1}
    labels: np.ndarray    # (n,) int64
    n_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise ValueError("features must be (n, F) with one label per row")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label out of range")

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i) -> Record:
        return Record(self.features[i], int(self.labels[i]))

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.n_classes)


def synthesize(cfg: SynthesisConfig) -> np.ndarray:
    """Binary records scattered around random prototypes.

    Each record copies a uniformly chosen prototype and flips each bit with
    probability ``cfg.flip_prob``.
    """
    proto_rng = np.random.default_rng([cfg.seed, 0])
    prototypes = proto_rng.random((cfg.n_latent_groups, cfg.n_features)) < PROTOTYPE_DENSITY
    sample_seed = cfg.seed if cfg.sample_seed is None else cfg.sample_seed
    rng = np.random.default_rng([sample_seed, 1])
    groups = rng.integers(0, cfg.n_latent_groups, size=cfg.n_records)
    flips = rng.random((cfg.n_records, cfg.n_features)) < cfg.flip_prob
    return (prototypes[groups] ^ flips).astype(np.float64)


# ---------------------------------------------------------------------------
# k-means

def _sq_dists(X: np.ndarray, C: np.ndarray, x_sq: np.ndarray) -> np.ndarray:
    d = x_sq[:, None] - 2.0 * (X @ C.T) + (C * C).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def _kmeans_pp(X: np.ndarray, k: int, rng: np.random.Generator, x_sq: np.ndarray) -> np.ndarray:
    n = len(X)
    centers = np.empty((k, X.shape[1]))
    centers[0] = X[rng.integers(n)]
    closest = _sq_dists(X, centers[:1], x_sq)[:, 0]
    for j in range(1, k):
        total = closest.sum()
        if total <= 0:
            raise ValueError(f"fewer than {k} distinct vectors")
        pick = rng.choice(n, p=closest / total)
        centers[j] = X[pick]
        closest = np.minimum(closest, _sq_dists(X, centers[j:j + 1], x_sq)[:, 0])
    return centers


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia: float
    n_iter: int


def kmeans(X: np.ndarray, k: int, seed: int, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeds.

    A cluster that empties after an update is re-seeded at the point farthest
    from its current centroid.
    """
    X = np.asarray(X, dtype=np.float64)
    if k < 1 or len(X) < k:
        raise ValueError(f"need at least {k} vectors")
    rng = np.random.default_rng(seed)
    x_sq = (X * X).sum(axis=1)
    C = _kmeans_pp(X, k, rng, x_sq)
    labels = None
    it = 0
    while True:
        d = _sq_dists(X, C, x_sq)
        new = d.argmin(axis=1)
        counts = np.bincount(new, minlength=k)
        if labels is not None and np.array_equal(new, labels) and counts.all():
            break
        labels = new
        it += 1
        if it > max_iter and counts.all():
            break
        C = _update_centroids(X, labels, counts, C, d)
    inertia = float(d[np.arange(len(X)), labels].sum())
    return KMeansResult(labels, C, inertia, it)


def _update_centroids(X, labels, counts, C, d):
    k = len(C)
    sums = np.zeros_like(C)
    np.add.at(sums, labels, X)
    C = C.copy()
    nonempty = counts > 0
    C[nonempty] = sums[nonempty] / counts[nonempty, None]
    if not nonempty.all():
        own = d[np.arange(len(X)), labels]
        taken = set()
        for j in np.flatnonzero(~nonempty):
            for i in np.argsort(-own, kind="stable"):
                if i not in taken:
                    taken.add(int(i))
                    C[j] = X[i]
                    break
    return C


def cluster_labels(vectors: np.ndarray, n_classes: int, seed: int) -> Dataset:
    """Label each vector by its k-means cluster."""
    res = kmeans(vectors, n_classes, seed)
    return Dataset(vectors, res.labels, n_classes)


def nearest_centroid_labels(vectors: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    X = np.asarray(vectors, dtype=np.float64)
    return _sq_dists(X, centroids, (X * X).sum(axis=1)).argmin(axis=1)


# ---------------------------------------------------------------------------
# splits

@dataclass(frozen=True)
class DatasetSplit:
    """Index sets into one dataset.

    ``adv_*`` are the adversary's known records, ``sub_*`` the defender's
    substitute-training records; both are subsets of ``member``/``non_member``.
    """

    member: np.ndarray
    non_member: np.ndarray
    adv_member: np.ndarray
    adv_non_member: np.ndarray
    sub_member: np.ndarray
    sub_non_member: np.ndarray

    @property
    def eval_member(self) -> np.ndarray:
        """Members the adversary never saw, in member order."""
        return self.member[~np.isin(self.member, self.adv_member)]

    @property
    def eval_non_member(self) -> np.ndarray:
        return self.non_member[~np.isin(self.non_member, self.adv_non_member)]

    def as_dict(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}


def make_splits(n_records: int, member_count: int, non_member_count: int,
                adv_fraction: float, seed: int) -> DatasetSplit:
    if member_count < 1 or non_member_count < 1:
        raise ValueError("member and non-member counts must be positive")
    if member_count + non_member_count > n_records:
        raise ValueError(
            f"need {member_count + non_member_count} records, dataset has {n_records}")
    if not 0.0 < adv_fraction <= 1.0:
        raise ValueError("adv_fraction must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_records)
    member = perm[:member_count]
    non_member = perm[member_count:member_count + non_member_count]
    n_adv_m = int(round(adv_fraction * member_count))
    n_adv_n = int(round(adv_fraction * non_member_count))
    adv_member = rng.choice(member, size=n_adv_m, replace=False)
    adv_non_member = rng.choice(non_member, size=n_adv_n, replace=False)
    return DatasetSplit(member, non_member, adv_member, adv_non_member,
                        member.copy(), non_member.copy())


# ---------------------------------------------------------------------------
# file formats

def dumps_dataset(ds: Dataset) -> str:
    lines = [f"dataset v1 F={ds.n_features} K={ds.n_classes}"]
    bits = ds.features.astype(np.uint8)
    for label, row in zip(ds.labels, bits):
        lines.append(f"{label}," + "".join("1" if b else "0" for b in row))
    return "\n".join(lines) + "\n"


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    head = lines[0].split() if lines else []
    if len(head) != 4 or head[:2] != ["dataset", "v1"]:
        raise ValueError("missing 'dataset v1' header")
    F = int(head[2].removeprefix("F="))
    K = int(head[3].removeprefix("K="))
    body = [ln for ln in lines[1:] if ln]
    feats = np.zeros((len(body), F))
    labels = np.zeros(len(body), dtype=np.int64)
    for i, ln in enumerate(body):
        lab, bits = ln.split(",", 1)
        if len(bits) != F:
            raise ValueError(f"line {i + 2}: expected {F} bits, got {len(bits)}")
        labels[i] = int(lab)
        feats[i] = np.frombuffer(bits.encode(), dtype=np.uint8) - ord("0")
    return Dataset(feats, labels, K)


def dumps_split(split: DatasetSplit) -> str:
    lines = ["split v1"]
    for name, idx in split.as_dict().items():
        lines.append(f"{name} {len(idx)}: " + " ".join(str(int(i)) for i in idx))
    return "\n".join(lines) + "\n"


def loads_split(text: str) -> DatasetSplit:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "split v1":
        raise ValueError("missing 'split v1' header")
    parts = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        head, _, body = ln.partition(":")
        name, count = head.split()
        idx = np.array([int(v) for v in body.split()], dtype=np.int64)
        if len(idx) != int(count):
            raise ValueError(f"split {name}: count mismatch")
        parts[name] = idx
    return DatasetSplit(**parts)


def save_dataset(ds: Dataset, path: Path) -> None:
    Path(path).write_text(dumps_dataset(ds))


def load_dataset(path: Path) -> Dataset:
    return loads_dataset(Path(path).read_text())
