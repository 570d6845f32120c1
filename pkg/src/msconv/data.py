"""Synthetic identity datasets for desk-scale verification experiments.

Each identity is a fixed coarse random pattern; samples are the pattern plus
Gaussian pixel noise and a small circular shift, clamped to [-1, 1].  The
generator is a pure function of its spec, so datasets regenerate bit-identically
from a seed.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import msct

# identities are drawn at 1/PATCH resolution and upsampled, so patterns have
# coarse structure that survives pooling
PATCH = 4


@dataclass(frozen=True)
class SyntheticSpec:
    identity_count: int = 10
    samples_per_identity: int = 50
    height: int = 32
    width: int = 32
    channels: int = 3
    noise_sigma: float = 0.1
    shift_range: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.identity_count < 1 or self.samples_per_identity < 1:
            raise ValueError("need at least one identity and one sample")
        if self.height < 1 or self.width < 1 or self.channels < 1:
            raise ValueError("image dims must be positive")
        if self.noise_sigma < 0 or self.shift_range < 0:
            raise ValueError("jitter amounts must be non-negative")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    @property
    def total(self) -> int:
        return self.identity_count * self.samples_per_identity


@dataclass(frozen=True)
class LabeledImages:
    """images: (total, h, w, c) in [-1, 1]; labels: (total,) identity ids."""

    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ValueError(f"inconsistent dataset shapes {self.images.shape} "
                             f"vs {self.labels.shape}")


def base_pattern(spec: SyntheticSpec, identity: int) -> np.ndarray:
    """The identity's noiseless template, already in [-1, 1]."""
    rng = np.random.default_rng([spec.seed, identity])
    coarse_h = -(-spec.height // PATCH)
    coarse_w = -(-spec.width // PATCH)
    coarse = rng.uniform(-1.0, 1.0, (coarse_h, coarse_w, spec.channels))
    up = np.repeat(np.repeat(coarse, PATCH, axis=0), PATCH, axis=1)
    return up[:spec.height, :spec.width, :]


def gen_synthetic(spec: SyntheticSpec) -> LabeledImages:
    """Deterministic labeled image set, identity-major sample order."""
    images = np.empty((spec.total, spec.height, spec.width, spec.channels))
    labels = np.empty(spec.total, dtype=np.int64)
    pos = 0
    for identity in range(spec.identity_count):
        base = base_pattern(spec, identity)
        jitter = np.random.default_rng([spec.seed, identity, 1])
        for _ in range(spec.samples_per_identity):
            dy, dx = jitter.integers(-spec.shift_range, spec.shift_range + 1,
                                     size=2)
            img = np.roll(base, (int(dy), int(dx)), axis=(0, 1))
            img = img + jitter.normal(0.0, spec.noise_sigma, img.shape)
            images[pos] = np.clip(img, -1.0, 1.0)
            labels[pos] = identity
            pos += 1
    return LabeledImages(images, labels)


# -- disk format: one tensor file per image + labels.txt + optional pairs ----

def _image_name(index: int) -> str:
    return f"img{index:05d}.msct"


def save_dataset(directory, ds: LabeledImages) -> None:
    os.makedirs(directory, exist_ok=True)
    lines = []
    for i in range(ds.images.shape[0]):
        name = _image_name(i)
        msct.write_tensor(os.path.join(directory, name), ds.images[i])
        lines.append(f"{name},{int(ds.labels[i])}")
    with open(os.path.join(directory, "labels.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_dataset(directory) -> LabeledImages:
    path = os.path.join(directory, "labels.txt")
    with open(path) as fh:
        rows = [line.strip() for line in fh if line.strip()]
    images, labels = [], []
    for row in rows:
        name, _, ident = row.partition(",")
        if not ident:
            raise msct.FormatError(f"bad labels line {row!r}")
        images.append(msct.read_tensor(os.path.join(directory, name)))
        labels.append(int(ident))
    stack = np.stack(images).astype(np.float64)
    return LabeledImages(stack, np.asarray(labels, dtype=np.int64))


def make_pairs(labels: np.ndarray, genuine_count: int, impostor_count: int,
               seed: int) -> list[tuple[int, int, int]]:
    """Sampled (index_a, index_b, same) triples, deterministic given seed.

    Genuine pairs draw two distinct samples of one identity; impostor pairs
    draw samples of two distinct identities.  Requires at least two samples
    for some identity and at least two identities.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 2])
    by_id: dict[int, np.ndarray] = {
        int(v): np.flatnonzero(labels == v) for v in np.unique(labels)}
    rich = [v for v, idx in by_id.items() if idx.size >= 2]
    ids = sorted(by_id)
    if genuine_count and not rich:
        raise ValueError("no identity has two samples; cannot form genuine pairs")
    if impostor_count and len(ids) < 2:
        raise ValueError("need two identities for impostor pairs")
    pairs = []
    for _ in range(genuine_count):
        ident = rich[int(rng.integers(len(rich)))]
        i, j = rng.choice(by_id[ident], size=2, replace=False)
        pairs.append((int(i), int(j), 1))
    for _ in range(impostor_count):
        a, b = rng.choice(len(ids), size=2, replace=False)
        i = rng.choice(by_id[ids[int(a)]])
        j = rng.choice(by_id[ids[int(b)]])
        pairs.append((int(i), int(j), 0))
    return pairs


def write_pairs(path, pairs: list[tuple[int, int, int]]) -> None:
    """Pair list file: file_a,file_b,same{0|1} per line."""
    with open(path, "w") as fh:
        for i, j, same in pairs:
            fh.write(f"{_image_name(i)},{_image_name(j)},{int(bool(same))}\n")


def read_pairs(path) -> list[tuple[int, int, int]]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise msct.FormatError(f"bad pairs line {line!r}")
            pairs.append((_image_index(parts[0]), _image_index(parts[1]),
                          int(parts[2])))
    return pairs


def _image_index(name: str) -> int:
    if not (name.startswith("img") and name.endswith(".msct")):
        raise msct.FormatError(f"unrecognized image filename {name!r}")
    return int(name[3:-5])
