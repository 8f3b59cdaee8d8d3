"""Datasets: MNIST IDX files and synthetic tasks on the unit sphere."""

from __future__ import annotations

import dataclasses
import gzip
import struct

import numpy as np

from .errors import BadMagic, ClassNotPresent, InvalidConfig, TruncatedFile
from .model import DataBatch

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

_IDX_DTYPES = {
    0x08: np.dtype(">u1"),
    0x09: np.dtype(">i1"),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v.newbyteorder("="): k for k, v in _IDX_DTYPES.items()}

PARALLEL_COS = 1.0 - 1e-9


def _read_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx(path, expected_magic=None) -> np.ndarray:
    """Parse an IDX file (optionally gzip-compressed) into an array.

    Layout: big-endian int32 magic ``0x0000TTDD`` (type code TT, rank DD),
    DD big-endian int32 dimensions, then the raw row-major payload.
    """
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise TruncatedFile(f"{path}: shorter than the magic number")
    (magic,) = struct.unpack(">I", raw[:4])
    if expected_magic is not None and magic != expected_magic:
        raise BadMagic(f"{path}: magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 16 != 0 or (magic >> 8) & 0xFF not in _IDX_DTYPES:
        raise BadMagic(f"{path}: not an IDX file (magic 0x{magic:08x})")
    dtype = _IDX_DTYPES[(magic >> 8) & 0xFF]
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise TruncatedFile(f"{path}: header cut short")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    size = int(np.prod(dims)) * dtype.itemsize
    if len(raw) - header < size:
        raise TruncatedFile(f"{path}: expected {size} payload bytes, found {len(raw) - header}")
    data = np.frombuffer(raw, dtype=dtype, count=int(np.prod(dims)), offset=header)
    return data.reshape(dims).astype(dtype.newbyteorder("="))


def write_idx(path, array, compress=None):
    """Write an array as IDX; gzip when ``compress`` or the path ends in .gz."""
    array = np.asarray(array)
    code = _IDX_CODES.get(array.dtype)
    if code is None:
        raise ValueError(f"dtype {array.dtype} has no IDX type code")
    header = struct.pack(">I", (code << 8) | array.ndim)
    header += struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.astype(array.dtype.newbyteorder(">")).tobytes()
    if compress is None:
        compress = str(path).endswith(".gz")
    if compress:
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


@dataclasses.dataclass(frozen=True)
class DatasetOnDisk:
    images: str
    labels: str
    class_a: int = 0
    class_b: int = 1
    count: int = 500


def _load_pair_arrays(spec: DatasetOnDisk):
    images = read_idx(spec.images, IDX_IMAGES_MAGIC)
    labels = read_idx(spec.labels, IDX_LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise TruncatedFile(
            f"{images.shape[0]} images but {labels.shape[0]} labels")
    for c in (spec.class_a, spec.class_b):
        if not np.any(labels == c):
            raise ClassNotPresent(f"class {c} does not occur in {spec.labels}")
    keep = np.flatnonzero((labels == spec.class_a) | (labels == spec.class_b))
    return images, labels, keep


def _to_batch(images, labels, idx, class_a):
    X = images[idx].reshape(len(idx), -1).astype(np.float64) / 255.0
    X /= np.linalg.norm(X, axis=1, keepdims=True)
    y = np.where(labels[idx] == class_a, 1.0, -1.0)
    return DataBatch(X=X, y=y)


def load_mnist_pair(spec: DatasetOnDisk, seed=0) -> DataBatch:
    """Two-class subset: ``count`` seeded draws, pixels /255 then unit rows,
    labels ``class_a -> +1`` and ``class_b -> -1``."""
    return load_mnist_split(spec, seed, test_count=0)[0]


def load_mnist_split(spec: DatasetOnDisk, seed=0, test_count=None):
    """Disjoint (train, test) batches from the same two classes.

    ``test_count=None`` puts every remaining sample of the two classes into
    the test batch.
    """
    images, labels, keep = _load_pair_arrays(spec)
    if spec.count > keep.size:
        raise InvalidConfig(f"requested {spec.count} samples, only {keep.size} available")
    order = np.random.default_rng(seed).permutation(keep)
    train_idx = order[:spec.count]
    rest = order[spec.count:]
    if test_count is not None:
        rest = rest[:test_count]
    train = _to_batch(images, labels, train_idx, spec.class_a)
    test = _to_batch(images, labels, rest, spec.class_a) if rest.size else None
    return train, test


def _unit_rows(G):
    return G / np.linalg.norm(G, axis=1, keepdims=True)


def _resample_parallel(X, draw):
    """Redraw rows until no pair has ``|cos| > 1 - 1e-9``.

    ``draw(idx)`` returns fresh rows for the sample indices ``idx``.
    """
    for _ in range(100):
        C = np.abs(X @ X.T)
        np.fill_diagonal(C, 0.0)
        bad = np.flatnonzero(np.any(np.triu(C > PARALLEL_COS), axis=0))
        if bad.size == 0:
            return X
        X[bad] = draw(bad)
    raise InvalidConfig("could not separate near-parallel samples")


def make_synthetic(kind, n, d, separation=2.0, seed=0, task_seed=None) -> DataBatch:
    """Synthetic unit-norm data with labels in {-1, +1}.

    ``two_cluster_sphere``: half the points around a random unit center
    ``c`` (label +1), half around ``-c`` (label -1); a point is the
    normalization of ``separation * (+-c) + g / sqrt(d)`` with Gaussian g.
    ``random_labels``: uniform points on the sphere with coin-flip labels.

    ``task_seed`` fixes the cluster center independently of the sample draw,
    so fresh test points from the same task use the same ``task_seed`` with a
    different ``seed``.
    """
    if n < 1 or d < 1:
        raise InvalidConfig("n and d must be positive")
    rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
    if kind == "two_cluster_sphere":
        if n % 2:
            raise InvalidConfig("two_cluster_sphere needs an even n")
        if separation < 0:
            raise InvalidConfig("separation must be nonnegative")
        task_rng = np.random.default_rng(seed if task_seed is None else task_seed)
        c = _unit_rows(task_rng.standard_normal((1, d)))[0]
        y = np.repeat([1.0, -1.0], n // 2)

        def draw(idx):
            return _unit_rows(separation * y[idx, None] * c
                              + rng.standard_normal((len(idx), d)) / np.sqrt(d))

        X = _resample_parallel(draw(np.arange(n)), draw)
    elif kind == "random_labels":
        X = _unit_rows(rng.standard_normal((n, d)))
        X = _resample_parallel(X, lambda idx: _unit_rows(rng.standard_normal((len(idx), d))))
        y = rng.choice(np.array([-1.0, 1.0]), size=n)
    else:
        raise InvalidConfig(f"unknown synthetic kind {kind!r}")
    return DataBatch(X=X, y=y)
