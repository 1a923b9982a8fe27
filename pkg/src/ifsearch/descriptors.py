"""Descriptor normalization and whitening.

Sum-pooled descriptors go through l2 normalization, a learned whitening
transform and a second l2 normalization; max-pooled descriptors are l2
normalized once.  :func:`finalize` is the single entry point used by the
index builder and the rerankers.

The whitening transform is PCA whitening fit on a descriptor collection:
center on the empirical mean, rotate onto covariance eigenvectors and
rescale each direction by ``1 / sqrt(eigenvalue + epsilon)``.  Eigenvector
signs are fixed (largest-magnitude component non-negative) so learning is
bit-for-bit deterministic.

Models serialize to an "IFSW" binary: magic, u16 version, u32 dimension,
f64 epsilon, the mean (D f64) and the projection (D*D f64, row-major),
all little-endian.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np

from .errors import (
    BadMagic,
    DegenerateInput,
    DimensionMismatch,
    InvariantError,
    MissingModel,
    NonFiniteData,
    TruncatedFile,
    UnsupportedVersion,
)
from .pooling import Pooling, RawDescriptor

WHITENING_MAGIC = b"IFSW"
WHITENING_VERSION = 1

#: Unit-norm tolerance enforced on normalized descriptors.
NORM_TOLERANCE = 1e-6

#: Default eigenvalue regularizer, relative to the mean eigenvalue.
RELATIVE_EPSILON = 1e-6

_WHITENING_HEADER = struct.Struct("<4sHId")


class DescriptorState(str, Enum):
    RAW = "raw"
    L2 = "l2"
    WHITENED_L2 = "whitened_l2"


@dataclass(frozen=True, eq=False)
class Descriptor:
    """Fixed-length real vector tagged with its normalization state."""

    values: np.ndarray
    state: DescriptorState

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1:
            raise InvariantError("descriptor values must be a flat vector")
        if not np.isfinite(values).all():
            raise InvariantError("descriptor values must be finite")
        if self.state in (DescriptorState.L2, DescriptorState.WHITENED_L2):
            norm = float(np.linalg.norm(values))
            if norm != 0.0 and abs(norm - 1.0) > NORM_TOLERANCE:
                raise InvariantError(
                    f"{self.state.value} descriptor must be unit norm, got {norm!r}"
                )
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    @property
    def is_zero(self) -> bool:
        return not self.values.any()


@dataclass(frozen=True, eq=False)
class WhiteningModel:
    """Mean vector plus decorrelating projection learned from descriptors."""

    mean: np.ndarray
    projection: np.ndarray
    epsilon: float

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        projection = np.asarray(self.projection, dtype=np.float64)
        if mean.ndim != 1 or projection.shape != (mean.shape[0], mean.shape[0]):
            raise InvariantError(
                f"projection must be D x D matching the mean, got "
                f"{projection.shape} vs {mean.shape}"
            )
        if not (np.isfinite(mean).all() and np.isfinite(projection).all()):
            raise InvariantError("whitening model must be finite")
        mean.setflags(write=False)
        projection.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "projection", projection)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def l2_normalize(values) -> Descriptor:
    """Scale to unit Euclidean norm; the zero vector passes through.

    Accepts a raw descriptor, a descriptor, or a plain vector.
    """
    if isinstance(values, (RawDescriptor, Descriptor)):
        values = values.values
    values = np.asarray(values, dtype=np.float64)
    norm = float(np.linalg.norm(values))
    if norm == 0.0:
        return Descriptor(values.copy(), DescriptorState.L2)
    return Descriptor(values / norm, DescriptorState.L2)


def learn_whitening(
    descriptors: Iterable[Descriptor],
    epsilon: float | None = None,
) -> WhiteningModel:
    """Fit PCA whitening on l2-normalized descriptors.

    ``epsilon`` regularizes small eigenvalues; ``None`` selects
    ``RELATIVE_EPSILON * trace(cov) / D``.  Requires at least two
    distinct descriptors of equal dimension.
    """
    rows = []
    dim = None
    for d in descriptors:
        if d.state != DescriptorState.L2:
            raise InvariantError(f"whitening is learned on l2 descriptors, got {d.state}")
        if dim is None:
            dim = d.dim
        elif d.dim != dim:
            raise DimensionMismatch(f"descriptor dimensions differ: {d.dim} vs {dim}")
        rows.append(d.values)
    if len(rows) < 2:
        raise DegenerateInput(f"need at least 2 descriptors, got {len(rows)}")
    matrix = np.vstack(rows)
    if np.all(matrix == matrix[0]):
        raise DegenerateInput("all descriptors identical; covariance is zero")

    mean = matrix.mean(axis=0)
    cov = np.atleast_2d(np.cov(matrix, rowvar=False, ddof=1))
    eigenvalues, eigenvectors = np.linalg.eigh(cov)
    order = np.argsort(eigenvalues)[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]
    # fix signs so repeated fits agree bit-for-bit
    for j in range(eigenvectors.shape[1]):
        column = eigenvectors[:, j]
        if column[int(np.argmax(np.abs(column)))] < 0:
            eigenvectors[:, j] = -column

    if epsilon is None:
        epsilon = RELATIVE_EPSILON * float(np.trace(cov)) / cov.shape[0]
    shifted = np.clip(eigenvalues, 0.0, None) + epsilon
    with np.errstate(divide="ignore"):
        scales = np.where(shifted > 0.0, 1.0 / np.sqrt(shifted), 0.0)
    projection = scales[:, None] * eigenvectors.T
    return WhiteningModel(mean=mean, projection=projection, epsilon=float(epsilon))


def apply_whitening(model: WhiteningModel, descriptor: Descriptor) -> Descriptor:
    """Center, project and re-normalize an l2 descriptor.

    The zero vector passes through unchanged so degenerate inputs keep
    scoring zero against everything.
    """
    if descriptor.state != DescriptorState.L2:
        raise InvariantError(f"whitening applies to l2 descriptors, got {descriptor.state}")
    if descriptor.dim != model.dim:
        raise DimensionMismatch(
            f"descriptor dimension {descriptor.dim} != model dimension {model.dim}"
        )
    if descriptor.is_zero:
        return Descriptor(descriptor.values.copy(), DescriptorState.WHITENED_L2)
    projected = model.projection @ (descriptor.values - model.mean)
    return Descriptor(l2_normalize(projected).values, DescriptorState.WHITENED_L2)


def finalize(raw: RawDescriptor, model: WhiteningModel | None = None) -> Descriptor:
    """Turn a raw pooled descriptor into a search descriptor.

    Sum pooling: l2, whiten, l2 (``model`` required).  Max pooling: a
    single l2 normalization; any model is ignored.
    """
    normalized = l2_normalize(raw)
    if raw.pooling == Pooling.MAX:
        return normalized
    if model is None:
        raise MissingModel("sum-pooled descriptors require a whitening model")
    return apply_whitening(model, normalized)


# ---------------------------------------------------------------------------
# serialization


def write_whitening_model(model: WhiteningModel, path) -> None:
    header = _WHITENING_HEADER.pack(
        WHITENING_MAGIC, WHITENING_VERSION, model.dim, model.epsilon
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.projection, dtype="<f8").tobytes())


def read_whitening_model(path) -> WhiteningModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    model, consumed = unpack_whitening_model(blob, path=path)
    if consumed != len(blob):
        raise TruncatedFile(
            f"{len(blob) - consumed} trailing bytes", path=path, offset=consumed
        )
    return model


def unpack_whitening_model(blob: bytes, *, path=None, base: int = 0) -> tuple[WhiteningModel, int]:
    """Decode an IFSW blob; returns the model and the bytes consumed.

    ``base`` only shifts reported error offsets when the blob is embedded
    in a larger file.
    """
    if len(blob) < _WHITENING_HEADER.size:
        raise TruncatedFile("file too short for header", path=path, offset=base + len(blob))
    magic, version, dim, epsilon = _WHITENING_HEADER.unpack_from(blob)
    if magic != WHITENING_MAGIC:
        raise BadMagic(
            f"expected magic {WHITENING_MAGIC!r}, found {magic!r}", path=path, offset=base
        )
    if version != WHITENING_VERSION:
        raise UnsupportedVersion(
            f"unsupported whitening version {version}", path=path, offset=base + 4
        )
    need = _WHITENING_HEADER.size + 8 * (dim + dim * dim)
    if len(blob) < need:
        raise TruncatedFile(
            f"payload has {len(blob) - _WHITENING_HEADER.size} bytes, "
            f"expected {need - _WHITENING_HEADER.size}",
            path=path,
            offset=base + len(blob),
        )
    mean = np.frombuffer(blob, dtype="<f8", count=dim, offset=_WHITENING_HEADER.size)
    projection = np.frombuffer(
        blob, dtype="<f8", count=dim * dim, offset=_WHITENING_HEADER.size + 8 * dim
    ).reshape(dim, dim)
    if not (np.isfinite(mean).all() and np.isfinite(projection).all()):
        raise NonFiniteData("whitening model contains non-finite values", path=path)
    return WhiteningModel(mean=mean, projection=projection, epsilon=float(epsilon)), need
