"""Synthetic desk-scale datasets exercising the training and search stack."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .model import FactoredLayer, Network, forward
from .numeric import Array
from .rng import Rng


@dataclass
class Dataset:
    """Row-per-sample inputs with integer labels.

    sequential=True marks data whose rows are consecutive frames of one
    sequence (batches must stay contiguous for context splicing to be
    meaningful).
    """

    x: Array
    y: Array
    name: str = ""
    sequential: bool = False
    teacher: Network | None = None
    num_classes: int = 0

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.ndim != 1 or self.x.shape[0] != self.y.shape[0]:
            raise DataError("x must be (n, dim) with one label per row")
        if self.num_classes == 0 and self.y.size:
            self.num_classes = int(self.y.max()) + 1

    def __len__(self) -> int:
        return self.x.shape[0]


def split_dataset(ds: Dataset, held_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic disjoint train/held split; held rows drawn once per seed."""
    n = len(ds)
    n_held = max(1, int(round(held_fraction * n)))
    if n_held >= n:
        raise DataError("held-out split leaves no training data")
    if ds.sequential:
        # keep frames contiguous: hold out the tail block
        held = np.arange(n - n_held, n)
        train = np.arange(n - n_held)
    else:
        perm = Rng(seed).permutation(n)
        held, train = perm[:n_held], perm[n_held:]
    mk = lambda idx: Dataset(ds.x[idx], ds.y[idx], name=ds.name, sequential=ds.sequential,
                             teacher=ds.teacher, num_classes=ds.num_classes)
    return mk(train), mk(held)


def gaussian_blobs(
    num_samples: int,
    num_classes: int,
    dim: int,
    separation: float,
    noise: float = 1.0,
    seed: int = 0,
) -> Dataset:
    """k Gaussian clusters whose closest pair of centers sits `separation`
    noise-standard-deviations apart."""
    if num_classes < 2 or dim < 1 or num_samples < num_classes:
        raise ConfigError("blobs need >= 2 classes and >= 1 sample per class")
    rng = Rng(seed)
    centers = rng.normal(size=(num_classes, dim))
    dists = np.linalg.norm(centers[:, None] - centers[None, :], axis=2)
    min_dist = dists[~np.eye(num_classes, dtype=bool)].min()
    if min_dist <= 0:
        raise ConfigError("degenerate blob centers; change the seed")
    centers *= separation * noise / min_dist
    labels = np.arange(num_samples) % num_classes
    x = centers[labels] + rng.normal(size=(num_samples, dim), scale=noise)
    order = rng.permutation(num_samples)
    return Dataset(x[order], labels[order], name="blobs", num_classes=num_classes)


def planted_rank(
    num_samples: int,
    dim: int,
    hidden_dim: int,
    num_classes: int,
    teacher_rank: int,
    seed: int = 0,
) -> Dataset:
    """Labels are the argmax of a random two-layer teacher whose first layer
    has a known bottleneck rank, so recovering that rank is the task."""
    rng = Rng(seed)
    teacher = Network(
        [
            FactoredLayer.create(hidden_dim, dim, teacher_rank, rng.split(0), activation="relu"),
            FactoredLayer.create(
                num_classes, hidden_dim, min(num_classes, hidden_dim), rng.split(1)
            ),
        ]
    )
    x = rng.normal(size=(num_samples, dim))
    y = forward(teacher, x)[-1].argmax(axis=1)
    return Dataset(x, y, name="planted_rank", teacher=teacher, num_classes=num_classes)


def spliced_context(
    num_frames: int,
    dim: int,
    num_classes: int,
    offsets: tuple[int, ...] = (-1, 0, 1),
    seed: int = 0,
) -> Dataset:
    """A frame sequence labelled by a teacher that reads spliced context."""
    rng = Rng(seed)
    teacher = Network(
        [
            FactoredLayer.create(
                num_classes, dim, min(num_classes, dim), rng.split(0),
                context_offsets=tuple(offsets),
            )
        ]
    )
    x = rng.normal(size=(num_frames, dim))
    y = forward(teacher, x)[-1].argmax(axis=1)
    return Dataset(x, y, name="spliced_context", sequential=True, teacher=teacher,
                   num_classes=num_classes)


_GENERATORS = {
    "blobs": gaussian_blobs,
    "planted_rank": planted_rank,
    "spliced_context": spliced_context,
}


def gen_dataset(spec: dict) -> Dataset:
    """Build a dataset from a config-style mapping with a `generator` key."""
    spec = dict(spec)
    name = spec.pop("generator", None)
    if name not in _GENERATORS:
        raise ConfigError(f"unknown dataset generator {name!r}")
    try:
        return _GENERATORS[name](**spec)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for generator {name!r}: {exc}") from None
