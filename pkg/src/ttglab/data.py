"""Domain construction: IDX ingestion, image rotation, synthetic blobs,
leave-one-out splits, episode sampling, and target streaming.

All datasets are immutable after construction; every sampler is a pure
function of its inputs and an explicit seed or generator.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Array

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DataError(ValueError):
    """Malformed dataset bytes or an impossible domain construction."""


@dataclass(frozen=True)
class LabeledSet:
    """One domain's samples: flattened inputs, integer labels, identity."""

    x: Array
    y: Array
    domain_id: int
    angle_deg: float

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError("inputs and labels disagree on sample count")

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n_classes(self) -> int:
        return int(self.y.max()) + 1 if len(self.y) else 0


@dataclass(frozen=True)
class EpisodeSplit:
    meta_sources: tuple[LabeledSet, ...]
    meta_target: LabeledSet

    def __post_init__(self):
        if any(s.domain_id == self.meta_target.domain_id
               for s in self.meta_sources):
            raise DataError("meta-target domain also appears in meta-sources")


@dataclass(frozen=True)
class DomainStream:
    """Deterministically shuffled contiguous batches from one target domain."""

    domain: LabeledSet
    batch_size: int
    seed: int
    order: Array = field(repr=False)

    def __len__(self) -> int:
        return -(-len(self.domain) // self.batch_size)

    def __iter__(self):
        for k in range(len(self)):
            idx = self.order[k * self.batch_size:(k + 1) * self.batch_size]
            yield self.domain.x[idx], self.domain.y[idx]


# IDX format -------------------------------------------------------------------

def parse_idx(data: bytes) -> Array:
    """Decode IDX bytes: images become float rows in [0,1], labels stay ints."""
    if len(data) < 8:
        raise DataError("truncated IDX header at byte offset 0")
    magic = struct.unpack(">I", data[:4])[0]
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise DataError("truncated IDX image dims at byte offset 4")
        n, rows, cols = struct.unpack(">III", data[4:16])
        expected = 16 + n * rows * cols
        if n * rows * cols > len(data):  # also catches absurd dim values
            raise DataError(
                f"IDX image dims overflow payload at byte offset 4")
        if len(data) != expected:
            raise DataError(
                f"IDX image payload ends early at byte offset {len(data)}"
                f" (expected {expected} bytes)")
        pixels = np.frombuffer(data, dtype=np.uint8, offset=16)
        return pixels.reshape(n, rows * cols).astype(np.float64) / 255.0
    if magic == IDX_LABELS_MAGIC:
        n = struct.unpack(">I", data[4:8])[0]
        if len(data) != 8 + n:
            raise DataError(
                f"IDX label payload ends early at byte offset {len(data)}"
                f" (expected {8 + n} bytes)")
        return np.frombuffer(data, dtype=np.uint8, offset=8).astype(np.int64)
    raise DataError(f"unexpected magic 0x{magic:08x} at byte offset 0")


def serialize_idx_images(x: Array, rows: int, cols: int) -> bytes:
    """Inverse of parse_idx for image payloads (x rows are [0,1] floats)."""
    n = len(x)
    if x.shape[1] != rows * cols:
        raise DataError("row width does not match rows*cols")
    header = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
    pixels = np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)
    return header + pixels.tobytes()


def serialize_idx_labels(y: Array) -> bytes:
    header = struct.pack(">II", IDX_LABELS_MAGIC, len(y))
    return header + np.asarray(y, dtype=np.uint8).tobytes()


# rotation ----------------------------------------------------------------------

def _rotation_sampling(rows: int, cols: int, angle_deg: float):
    """Bilinear sampling plan for rotating an image grid about its center."""
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cy, cx = (rows - 1) / 2.0, (cols - 1) / 2.0
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    # x right, y up; rotating the image by +theta (counterclockwise) means
    # each output pixel samples the input at the inverse rotation.
    x, y = cc - cx, cy - rr
    src_x = cos_t * x + sin_t * y
    src_y = -sin_t * x + cos_t * y
    sc, sr = src_x + cx, cy - src_y
    r0 = np.floor(sr).astype(np.int64)
    c0 = np.floor(sc).astype(np.int64)
    fr, fc = sr - r0, sc - c0
    weights, taps = [], []
    for dr, dc in ((0, 0), (0, 1), (1, 0), (1, 1)):
        r, c = r0 + dr, c0 + dc
        inside = (r >= 0) & (r < rows) & (c >= 0) & (c < cols)
        wr = fr if dr else (1.0 - fr)
        wc = fc if dc else (1.0 - fc)
        weights.append((wr * wc) * inside)
        taps.append((np.clip(r, 0, rows - 1), np.clip(c, 0, cols - 1)))
    return weights, taps


def rotate_image(img: Array, angle_deg: float) -> Array:
    """Rotate one image counterclockwise about its center, zeros outside."""
    return rotate_batch(np.asarray(img)[None], angle_deg)[0]


def rotate_batch(imgs: Array, angle_deg: float) -> Array:
    """Rotate [N, rows, cols] images; one sampling plan shared by all."""
    imgs = np.asarray(imgs, dtype=np.float64)
    _, rows, cols = imgs.shape
    weights, taps = _rotation_sampling(rows, cols, angle_deg)
    out = np.zeros_like(imgs)
    for w, (r, c) in zip(weights, taps):
        out += w * imgs[:, r, c]
    return out


def build_rotated_domains(base: LabeledSet, source_angles, target_angles,
                          rows: int | None = None, cols: int | None = None,
                          ) -> tuple[list[LabeledSet], list[LabeledSet]]:
    """One domain per angle: the same images of `base`, rotated."""
    source_angles = [float(a) for a in source_angles]
    target_angles = [float(a) for a in target_angles]
    if set(source_angles) & set(target_angles):
        raise DataError("source and target angles overlap")
    if rows is None or cols is None:
        side = int(round(np.sqrt(base.x.shape[1])))
        if side * side != base.x.shape[1]:
            raise DataError("cannot infer image shape; pass rows and cols")
        rows = cols = side
    imgs = base.x.reshape(len(base), rows, cols)

    def make(angle: float, domain_id: int) -> LabeledSet:
        rotated = rotate_batch(imgs, angle).reshape(len(base), rows * cols)
        return LabeledSet(rotated, base.y.copy(), domain_id, angle)

    sources = [make(a, i) for i, a in enumerate(source_angles)]
    targets = [make(a, len(source_angles) + i)
               for i, a in enumerate(target_angles)]
    return sources, targets


DEFAULT_SOURCE_ANGLES = (15.0, 30.0, 45.0, 60.0, 75.0)
DEFAULT_TARGET_ANGLES = (0.0, 90.0)


# synthetic blobs ----------------------------------------------------------------

def build_blob_domains(n_classes: int, angles, n_per_class: int,
                       noise_sigma: float, seed: int, dim: int = 2,
                       ) -> list[LabeledSet]:
    """Gaussian blobs whose class means sit on the unit circle, rotated per
    domain; a fast surrogate for rotated-image domains."""
    if n_classes < 2:
        raise DataError("need at least two classes")
    rng = np.random.default_rng(seed)
    base_angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    domains = []
    for d_id, angle in enumerate(angles):
        theta = np.deg2rad(float(angle))
        means2 = np.stack([np.cos(base_angles + theta),
                           np.sin(base_angles + theta)], axis=1)
        means = np.zeros((n_classes, dim))
        means[:, :2] = means2
        x = np.repeat(means, n_per_class, axis=0)
        x = x + noise_sigma * rng.standard_normal(x.shape)
        y = np.repeat(np.arange(n_classes), n_per_class)
        domains.append(LabeledSet(x, y, d_id, float(angle)))
    return domains


# splits and sampling -------------------------------------------------------------

def split_leave_one_out(domains) -> list[tuple[list[LabeledSet], LabeledSet]]:
    """One (sources, target) split per domain."""
    domains = list(domains)
    if len(domains) < 2:
        raise DataError("leave-one-out needs at least two domains")
    return [([d for j, d in enumerate(domains) if j != i], domains[i])
            for i in range(len(domains))]


def sample_episode(sources, rng: np.random.Generator) -> EpisodeSplit:
    """Uniformly pick a meta-target among the sources; the rest are meta-sources."""
    sources = list(sources)
    if len(sources) < 2:
        raise DataError("episodic training needs at least two source domains")
    pick = int(rng.integers(len(sources)))
    rest = tuple(d for j, d in enumerate(sources) if j != pick)
    return EpisodeSplit(rest, sources[pick])


def draw_batch(domains, batch_size: int, rng: np.random.Generator,
               ) -> tuple[Array, Array]:
    """Uniform batch over the union of the given domains, with replacement."""
    if isinstance(domains, LabeledSet):
        domains = [domains]
    counts = np.array([len(d) for d in domains])
    offsets = np.concatenate([[0], np.cumsum(counts)])
    flat = rng.integers(offsets[-1], size=batch_size)
    x = np.empty((batch_size, domains[0].x.shape[1]))
    y = np.empty(batch_size, dtype=np.int64)
    for i, d in enumerate(domains):
        here = (flat >= offsets[i]) & (flat < offsets[i + 1])
        x[here] = d.x[flat[here] - offsets[i]]
        y[here] = d.y[flat[here] - offsets[i]]
    return x, y


def stream_batches(target: LabeledSet, batch_size: int, seed: int) -> DomainStream:
    """Shuffle once, then emit contiguous batches; the last may run short."""
    if batch_size < 1:
        raise DataError("batch size must be >= 1")
    order = np.random.default_rng(seed).permutation(len(target))
    return DomainStream(target, int(batch_size), int(seed), order)
