"""Synthetic open-set data: identity clusters on the unit sphere, graded
corruptions, out-of-distribution samples and verification pairs.

Gaussian perturbations are isotropic with per-coordinate variance ``1/d_x``,
i.e. unit expected squared norm, so ``spread`` and the additive noise level are
both measured relative to the unit-norm signal.
"""

from __future__ import annotations

import hashlib
import itertools
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .stochastic import RngStream

NOISE_KINDS = ("clean", "additive", "saltpepper", "maskout", "mixup")
CORRUPTIONS = NOISE_KINDS[1:]
FRACTION_KINDS = ("saltpepper", "maskout", "mixup")
SPLITS = ("train", "test", "ood")
OOD_LABEL = -1
OOD_MODES = ("uniform-sphere", "shifted-clusters")
# maskout at level 1 would zero the whole vector
MASKOUT_CAP = 0.9
FORMAT_HEADER = "# rts-dataset v1"


@dataclass
class Sample:
    x: np.ndarray
    label: int | None
    noise_kind: str = "clean"
    noise_level: float = 0.0
    split: str = "train"

    @property
    def is_ood(self) -> bool:
        return self.label is None


@dataclass
class Dataset:
    """Column-oriented sample store. OOD rows carry ``label == OOD_LABEL``."""

    x: np.ndarray
    labels: np.ndarray
    noise_kind: np.ndarray
    noise_level: np.ndarray
    split: np.ndarray
    num_identities: int
    prototypes: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.noise_kind = np.asarray(self.noise_kind, dtype=object)
        self.noise_level = np.asarray(self.noise_level, dtype=np.float64)
        self.split = np.asarray(self.split, dtype=object)
        n = self.x.shape[0]
        for col in (self.labels, self.noise_kind, self.noise_level, self.split):
            if col.shape[0] != n:
                raise ValueError("dataset columns must have equal length")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    def indices(self, split: str, kind: str | None = None) -> np.ndarray:
        mask = self.split == split
        if kind is not None:
            mask &= self.noise_kind == kind
        return np.flatnonzero(mask)

    def corrupted(self, split: str) -> np.ndarray:
        return np.flatnonzero((self.split == split) & (self.noise_kind != "clean"))

    def sample(self, i: int) -> Sample:
        label = None if self.labels[i] == OOD_LABEL else int(self.labels[i])
        return Sample(self.x[i].copy(), label, str(self.noise_kind[i]),
                      float(self.noise_level[i]), str(self.split[i]))

    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            yield self.sample(i)

    @classmethod
    def from_samples(cls, samples: list[Sample], num_identities: int) -> Dataset:
        return cls(
            x=np.stack([s.x for s in samples]),
            labels=[OOD_LABEL if s.label is None else s.label for s in samples],
            noise_kind=[s.noise_kind for s in samples],
            noise_level=[s.noise_level for s in samples],
            split=[s.split for s in samples],
            num_identities=num_identities,
        )

    @classmethod
    def concat(cls, parts: list[Dataset]) -> Dataset:
        return cls(
            x=np.concatenate([p.x for p in parts]),
            labels=np.concatenate([p.labels for p in parts]),
            noise_kind=np.concatenate([p.noise_kind for p in parts]),
            noise_level=np.concatenate([p.noise_level for p in parts]),
            split=np.concatenate([p.split for p in parts]),
            num_identities=max(p.num_identities for p in parts),
            prototypes=next((p.prototypes for p in parts if p.prototypes is not None), None),
        )

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.x).tobytes())
        h.update(self.labels.tobytes())
        h.update(self.noise_level.tobytes())
        h.update("|".join(map(str, self.noise_kind)).encode())
        h.update("|".join(map(str, self.split)).encode())
        return h.hexdigest()


@dataclass(frozen=True)
class PairSet:
    """Index pairs ``(i, j)``, ``i < j``, into a dataset."""

    genuine: np.ndarray
    impostor: np.ndarray

    def images(self) -> np.ndarray:
        return np.unique(np.concatenate([self.genuine.ravel(), self.impostor.ravel()]))


def _unit(v: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(v, axis=-1, keepdims=True)
    if np.any(norm == 0):
        raise ValueError("cannot normalize a zero vector")
    return v / norm


def _gaussian(rng: RngStream, shape) -> np.ndarray:
    return rng.normal(shape) / math.sqrt(shape[-1])


def uniform_sphere(rng: RngStream, n: int, d: int) -> np.ndarray:
    return _unit(rng.normal((n, d)))


def gen_identities(rng: RngStream, num_identities: int, d_x: int, per_id: int, spread: float,
                   test_per_id: int | None = None, prototypes: np.ndarray | None = None) -> Dataset:
    """Clean identity clusters around random unit prototypes.

    The last ``test_per_id`` samples of every identity go to the test split
    (default ``max(2, per_id // 4)``).
    """
    if num_identities < 2 or per_id < 4 or not 0 <= spread < 1:
        raise ValueError("need num_identities >= 2, per_id >= 4 and 0 <= spread < 1")
    if num_identities > 2 ** (d_x / 2):
        warnings.warn(f"{num_identities} identities may not be well separated in {d_x} dims")
    test_per_id = max(2, per_id // 4) if test_per_id is None else test_per_id
    if not 2 <= test_per_id < per_id:
        raise ValueError("test_per_id must be in [2, per_id)")
    if prototypes is None:
        prototypes = uniform_sphere(rng, num_identities, d_x)
    prototypes = _unit(np.asarray(prototypes, dtype=np.float64))
    if prototypes.shape != (num_identities, d_x):
        raise ValueError("prototype array has the wrong shape")

    noise = _gaussian(rng, (num_identities, per_id, d_x))
    x = _unit(prototypes[:, None, :] + spread * noise).reshape(-1, d_x)
    labels = np.repeat(np.arange(num_identities), per_id)
    split = np.tile(np.array(["train"] * (per_id - test_per_id) + ["test"] * test_per_id, dtype=object),
                    num_identities)
    n = x.shape[0]
    return Dataset(x, labels, ["clean"] * n, np.zeros(n), split, num_identities, prototypes)


def corrupt(x, kind: str, level: float, rng: RngStream) -> np.ndarray:
    """Level-graded corruption of one unit input vector."""
    x = np.asarray(x, dtype=np.float64)
    if kind not in CORRUPTIONS and kind != "clean":
        raise ValueError(f"unknown corruption kind {kind!r}")
    if level < 0:
        raise ValueError("level must be >= 0")
    if kind in FRACTION_KINDS and level > 1:
        raise ValueError(f"{kind} level is a fraction and must be <= 1")
    if kind == "maskout" and level >= 1:
        raise ValueError("maskout level 1 would zero the whole vector")
    if level == 0 or kind == "clean":
        return x.copy()
    d = x.shape[-1]
    if kind == "additive":
        return _unit(x + level * _gaussian(rng, (d,)))
    if kind == "mixup":
        return _unit((1.0 - level) * x + level * uniform_sphere(rng, 1, d)[0])
    k = int(round(level * d))
    idx = rng.choice(d, size=k, replace=False)
    out = x.copy()
    if kind == "saltpepper":
        out[idx] = np.where(rng.uniform(k) < 0.5, -1.0, 1.0)
    else:
        out[idx] = 0.0
    return _unit(out)


def gen_ood(rng: RngStream, n: int, d_x: int, mode: str = "uniform-sphere",
            prototypes: np.ndarray | None = None, spread: float = 0.3,
            num_clusters: int = 10) -> Dataset:
    """Out-of-distribution samples, all tagged split ``ood``.

    ``shifted-clusters`` draws fresh prototypes, rejecting any that coincide
    with a training prototype.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if mode == "uniform-sphere":
        x = uniform_sphere(rng, n, d_x)
    elif mode == "shifted-clusters":
        fresh = uniform_sphere(rng, num_clusters, d_x)
        if prototypes is not None:
            while np.any(np.isclose(fresh @ np.asarray(prototypes).T, 1.0)):
                fresh = uniform_sphere(rng, num_clusters, d_x)
        assign = rng.integers(0, num_clusters, size=n)
        x = _unit(fresh[assign] + spread * _gaussian(rng, (n, d_x)))
    else:
        raise ValueError(f"unknown OOD mode {mode!r}")
    return Dataset(x, np.full(n, OOD_LABEL), ["clean"] * n, np.zeros(n), ["ood"] * n, 0)


def corrupt_fraction(dataset: Dataset, split: str, fraction: float, kinds, levels,
                     rng: RngStream) -> Dataset:
    """Corrupt a random ``fraction`` of a split in place; kinds cycle, levels are drawn."""
    idx = dataset.indices(split)
    chosen = np.sort(rng.choice(idx.size, size=int(round(fraction * idx.size)), replace=False))
    for j, pos in enumerate(chosen):
        i = idx[pos]
        kind = kinds[j % len(kinds)]
        level = float(levels[int(rng.integers(0, len(levels)))])
        if kind == "maskout":
            level = min(level, MASKOUT_CAP)
        dataset.x[i] = corrupt(dataset.x[i], kind, level, rng)
        dataset.noise_kind[i] = kind
        dataset.noise_level[i] = level
    return dataset


@dataclass
class DataConfig:
    num_identities: int = 50
    d_x: int = 32
    per_id: int = 40
    test_per_id: int = 10
    spread: float = 0.3
    corrupt_fraction: float = 0.2
    corrupt_levels: tuple[float, ...] = (0.3, 0.6, 1.0)
    corrupt_kinds: tuple[str, ...] = CORRUPTIONS
    n_ood: int = 500
    ood_mode: str = "uniform-sphere"


def make_open_set(cfg: DataConfig, rng: RngStream) -> Dataset:
    """Train/test identity data with a corrupted fraction in both, plus an OOD split."""
    ds = gen_identities(rng.child("identities"), cfg.num_identities, cfg.d_x, cfg.per_id,
                        cfg.spread, cfg.test_per_id)
    corrupt_fraction(ds, "train", cfg.corrupt_fraction, cfg.corrupt_kinds, cfg.corrupt_levels,
                     rng.child("corrupt-train"))
    corrupt_fraction(ds, "test", cfg.corrupt_fraction, cfg.corrupt_kinds, cfg.corrupt_levels,
                     rng.child("corrupt-test"))
    ood = gen_ood(rng.child("ood"), cfg.n_ood, cfg.d_x, cfg.ood_mode, ds.prototypes, cfg.spread)
    return Dataset.concat([ds, ood])


def build_pairs(dataset: Dataset, max_pairs: int, rng: RngStream, split: str = "test") -> PairSet:
    """Genuine and impostor pairs among the in-distribution samples of a split,
    each subsampled without replacement to at most ``max_pairs``."""
    idx = dataset.indices(split)
    idx = idx[dataset.labels[idx] != OOD_LABEL]
    if idx.size == 0:
        raise ValueError(f"split {split!r} has no identity samples")
    all_pairs = np.array(list(itertools.combinations(idx.tolist(), 2)), dtype=np.int64).reshape(-1, 2)
    same = dataset.labels[all_pairs[:, 0]] == dataset.labels[all_pairs[:, 1]]

    def take(pairs: np.ndarray) -> np.ndarray:
        if pairs.shape[0] <= max_pairs:
            return pairs
        keep = np.sort(rng.choice(pairs.shape[0], size=max_pairs, replace=False))
        return pairs[keep]

    return PairSet(genuine=take(all_pairs[same]), impostor=take(all_pairs[~same]))


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    """One sample per line: split, label or ``OOD``, noise kind, noise level, d_x reals."""
    lines = [f"{FORMAT_HEADER} num_identities={dataset.num_identities} d_x={dataset.d_x}"]
    for s in dataset.samples():
        label = "OOD" if s.is_ood else str(s.label)
        vals = " ".join(repr(float(v)) for v in s.x)
        lines.append(f"{s.split} {label} {s.noise_kind} {float(s.noise_level)!r} {vals}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path: str | Path) -> Dataset:
    text = Path(path).read_text().splitlines()
    if not text or not text[0].startswith(FORMAT_HEADER):
        raise ValueError(f"{path}: missing dataset header")
    meta = dict(tok.split("=", 1) for tok in text[0][len(FORMAT_HEADER):].split())
    num_identities, d_x = int(meta["num_identities"]), int(meta["d_x"])
    samples = []
    for lineno, line in enumerate(text[1:], start=2):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4 + d_x:
            raise ValueError(f"{path}:{lineno}: expected {4 + d_x} fields, got {len(parts)}")
        split, label, kind, level = parts[:4]
        if split not in SPLITS or kind not in NOISE_KINDS:
            raise ValueError(f"{path}:{lineno}: bad split or noise kind")
        samples.append(Sample(
            x=np.array([float(v) for v in parts[4:]]),
            label=None if label == "OOD" else int(label),
            noise_kind=kind, noise_level=float(level), split=split,
        ))
    return Dataset.from_samples(samples, num_identities)
