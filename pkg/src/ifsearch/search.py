"""Cosine-similarity filtering over an index of whole-image descriptors.

The index holds one finalized descriptor per database image.  A search
compares the query image's whole-image descriptor against every row and
returns a deterministically ordered ranking (score descending, ties by
ascending image id).

Index files ("IFSI") store: magic, u16 version, u32 row count, u32
dimension, u8 pooling code, u8 whitening flag, the id table (u32 length +
UTF-8 per id), the row-major f64 descriptor matrix, and, when flagged, an
embedded whitening model blob.  Rankings are exchanged as tab-separated
text with one entry per line.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .descriptors import (
    Descriptor,
    DescriptorState,
    WhiteningModel,
    finalize,
    l2_normalize,
    unpack_whitening_model,
)
from .errors import (
    BadMagic,
    DimensionMismatch,
    InvariantError,
    NonFiniteData,
    SchemaError,
    TruncatedFile,
    UnsupportedVersion,
)
from .pooling import Pooling, pool_image
from .tensor_store import BoundingBox, DatasetManifest, QueryDef, read_feature_map

INDEX_MAGIC = b"IFSI"
INDEX_VERSION = 1

_INDEX_HEADER = struct.Struct("<4sHIIBB")
_POOLING_CODES = {Pooling.SUM: 0, Pooling.MAX: 1}
_POOLING_FROM_CODE = {code: pooling for pooling, code in _POOLING_CODES.items()}


class Stage(str, Enum):
    """Pipeline stage that produced a ranking."""

    FILTERING = "filtering"
    CA_SR = "ca-sr"
    CS_SR = "cs-sr"
    QE = "qe"


@dataclass(frozen=True)
class RankEntry:
    image_id: str
    score: float
    localization: BoundingBox | None = None


@dataclass(frozen=True)
class Ranking:
    """Ordered retrieval result for one query.

    Filtering and query-expansion rankings are globally sorted by
    ``(score desc, image_id asc)``.  Reranked rankings are sorted within
    the reranked block; the tail keeps its previous order even when its
    scores exceed the block's (stage scores are not comparable).
    """

    query_id: str
    entries: tuple[RankEntry, ...]
    stage: Stage

    def __post_init__(self):
        ids = [e.image_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise InvariantError(f"ranking for '{self.query_id}' repeats image ids")

    @property
    def image_ids(self) -> tuple[str, ...]:
        return tuple(e.image_id for e in self.entries)


@dataclass(frozen=True)
class BuildConfig:
    """Record of the pooling/normalization choices behind an index."""

    pooling: Pooling
    whitened: bool
    epsilon: float | None = None


@dataclass(frozen=True, eq=False)
class Index:
    """Immutable matrix of finalized whole-image descriptors."""

    image_ids: tuple[str, ...]
    matrix: np.ndarray
    pooling: Pooling
    whitening: WhiteningModel | None
    build_config: BuildConfig

    def __post_init__(self):
        matrix = np.asarray(self.matrix, dtype=np.float64)
        if matrix.ndim != 2 or matrix.shape[0] != len(self.image_ids):
            raise InvariantError(
                f"matrix shape {matrix.shape} does not match {len(self.image_ids)} ids"
            )
        if len(set(self.image_ids)) != len(self.image_ids):
            raise InvariantError("index image ids must be unique")
        norms = np.linalg.norm(matrix, axis=1)
        bad = ~((np.abs(norms - 1.0) <= 1e-6) | (norms == 0.0))
        if bad.any():
            offender = self.image_ids[int(np.argmax(bad))]
            raise InvariantError(f"index row for '{offender}' is not unit norm")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(
            self, "_row_of", {image_id: i for i, image_id in enumerate(self.image_ids)}
        )

    @property
    def size(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def row(self, image_id: str) -> np.ndarray:
        return self.matrix[self._row_of[image_id]]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row_of


def sort_entries(entries: Sequence[RankEntry]) -> tuple[RankEntry, ...]:
    """Deterministic total order: score descending, then image id ascending."""
    return tuple(sorted(entries, key=lambda e: (-e.score, e.image_id)))


def cosine(a: Descriptor, b: Descriptor) -> float:
    """Dot product of unit-norm descriptors; zero vectors score 0."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"descriptor dimensions differ: {a.dim} vs {b.dim}")
    return float(np.dot(a.values, b.values))


def score_rows(matrix: np.ndarray, values: np.ndarray, deterministic: bool = True) -> np.ndarray:
    """Score every matrix row against a query vector.

    The deterministic path reduces with numpy's own (unthreaded) pairwise
    sum so results are bit-stable regardless of BLAS threading; the fast
    path uses the BLAS matrix-vector product.  The two agree within 1e-9.
    """
    if deterministic:
        return (matrix * values).sum(axis=1)
    return matrix @ values


def image_descriptor(
    image_id: str,
    manifest: DatasetManifest,
    pooling: Pooling,
    model: WhiteningModel | None = None,
    *,
    tensor_path=None,
) -> Descriptor:
    """Whole-image descriptor for one image, run through the full pipeline."""
    path = tensor_path if tensor_path is not None else manifest.tensor_path(image_id)
    fmap = read_feature_map(path)
    return finalize(pool_image(fmap, pooling), model)


def build_index(
    manifest: DatasetManifest,
    pooling: Pooling = Pooling.SUM,
    whitening: WhiteningModel | None = None,
    threads: int = 1,
) -> Index:
    """Build the filtering index over every image in the manifest.

    For sum pooling the whitening model is learned from this database's
    own l2 descriptors unless one is supplied.  Row order follows the
    manifest; the build fails as a whole if any image cannot be read.
    """
    pooling = Pooling(pooling)

    def _raw_l2(image_id: str) -> Descriptor:
        fmap = read_feature_map(manifest.tensor_path(image_id))
        if fmap.channels != manifest.feature_dim:
            raise SchemaError(
                f"tensor for '{image_id}' has {fmap.channels} channels, "
                f"manifest declares {manifest.feature_dim}"
            )
        return l2_normalize(pool_image(fmap, pooling))

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            normalized = list(pool.map(_raw_l2, manifest.image_ids))
    else:
        normalized = [_raw_l2(image_id) for image_id in manifest.image_ids]

    if pooling == Pooling.SUM:
        if whitening is None:
            from .descriptors import learn_whitening

            whitening = learn_whitening(normalized)
        finalized = [apply_or_zero(whitening, d) for d in normalized]
        config = BuildConfig(pooling, True, whitening.epsilon)
    else:
        whitening = None
        finalized = normalized
        config = BuildConfig(pooling, False)

    matrix = np.vstack([d.values for d in finalized]) if finalized else np.zeros((0, manifest.feature_dim))
    return Index(
        image_ids=tuple(manifest.image_ids),
        matrix=matrix,
        pooling=pooling,
        whitening=whitening,
        build_config=config,
    )


def apply_or_zero(model: WhiteningModel, descriptor: Descriptor) -> Descriptor:
    from .descriptors import apply_whitening

    return apply_whitening(model, descriptor)


def query_descriptor(
    query: QueryDef,
    manifest: DatasetManifest,
    index: Index,
) -> Descriptor:
    """The query's whole-image descriptor under the index's pipeline.

    The whole image is used at the filtering stage; the query box only
    matters to the rerankers.
    """
    return image_descriptor(
        query.image_id,
        manifest,
        index.pooling,
        index.whitening,
        tensor_path=manifest.query_tensor_path(query),
    )


def filter_search(
    index: Index,
    query: QueryDef,
    manifest: DatasetManifest,
    *,
    exclude_query: bool = False,
    deterministic: bool = True,
) -> Ranking:
    """Rank the whole database by cosine similarity to the query image."""
    qdesc = query_descriptor(query, manifest, index)
    if qdesc.dim != index.dim:
        raise DimensionMismatch(
            f"query descriptor dimension {qdesc.dim} != index dimension {index.dim}"
        )
    scores = score_rows(index.matrix, qdesc.values, deterministic)
    entries = [
        RankEntry(image_id, float(score))
        for image_id, score in zip(index.image_ids, scores)
        if not (exclude_query and image_id == query.image_id)
    ]
    return Ranking(query.query_id, sort_entries(entries), Stage.FILTERING)


# ---------------------------------------------------------------------------
# index serialization


def write_index(index: Index, path) -> None:
    from .descriptors import WHITENING_VERSION, WHITENING_MAGIC, _WHITENING_HEADER

    parts = [
        _INDEX_HEADER.pack(
            INDEX_MAGIC,
            INDEX_VERSION,
            index.size,
            index.dim,
            _POOLING_CODES[index.pooling],
            1 if index.whitening is not None else 0,
        )
    ]
    for image_id in index.image_ids:
        raw = image_id.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(index.matrix, dtype="<f8").tobytes())
    if index.whitening is not None:
        model = index.whitening
        parts.append(_WHITENING_HEADER.pack(WHITENING_MAGIC, WHITENING_VERSION, model.dim, model.epsilon))
        parts.append(np.ascontiguousarray(model.mean, dtype="<f8").tobytes())
        parts.append(np.ascontiguousarray(model.projection, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_index(path) -> Index:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _INDEX_HEADER.size:
        raise TruncatedFile("file too short for header", path=path, offset=len(blob))
    magic, version, size, dim, pooling_code, has_whitening = _INDEX_HEADER.unpack_from(blob)
    if magic != INDEX_MAGIC:
        raise BadMagic(f"expected magic {INDEX_MAGIC!r}, found {magic!r}", path=path, offset=0)
    if version != INDEX_VERSION:
        raise UnsupportedVersion(f"unsupported index version {version}", path=path, offset=4)
    if pooling_code not in _POOLING_FROM_CODE:
        raise SchemaError(f"{path}: unknown pooling code {pooling_code}")
    offset = _INDEX_HEADER.size
    image_ids = []
    for _ in range(size):
        if len(blob) < offset + 4:
            raise TruncatedFile("truncated in id table", path=path, offset=len(blob))
        (id_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        if len(blob) < offset + id_len:
            raise TruncatedFile("truncated in id table", path=path, offset=len(blob))
        image_ids.append(blob[offset:offset + id_len].decode("utf-8"))
        offset += id_len
    count = size * dim
    if len(blob) < offset + 8 * count:
        raise TruncatedFile("truncated in descriptor matrix", path=path, offset=len(blob))
    matrix = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).reshape(size, dim)
    if not np.isfinite(matrix).all():
        raise NonFiniteData("descriptor matrix contains non-finite values", path=path)
    offset += 8 * count
    whitening = None
    if has_whitening:
        whitening, consumed = unpack_whitening_model(blob[offset:], path=path, base=offset)
        offset += consumed
    if offset != len(blob):
        raise TruncatedFile(
            f"{len(blob) - offset} trailing bytes", path=path, offset=offset
        )
    pooling = _POOLING_FROM_CODE[pooling_code]
    return Index(
        image_ids=tuple(image_ids),
        matrix=matrix,
        pooling=pooling,
        whitening=whitening,
        build_config=BuildConfig(
            pooling,
            whitening is not None,
            whitening.epsilon if whitening is not None else None,
        ),
    )


# ---------------------------------------------------------------------------
# ranking text format

_RANKING_COLUMNS = (
    "query_id",
    "stage",
    "rank",
    "image_id",
    "score",
    "x_min",
    "y_min",
    "x_max",
    "y_max",
)


def write_rankings(rankings: Sequence[Ranking], path) -> None:
    """Write rankings as tab-separated text, one entry per line.

    Scores and box coordinates are rendered with 17 significant digits,
    enough for an exact float64 round trip.
    """
    lines = ["\t".join(_RANKING_COLUMNS)]
    for ranking in rankings:
        for rank, entry in enumerate(ranking.entries, start=1):
            box = entry.localization
            coords = (
                tuple(format(v, ".17g") for v in box.coords) if box is not None else ("",) * 4
            )
            lines.append(
                "\t".join(
                    (
                        ranking.query_id,
                        ranking.stage.value,
                        str(rank),
                        entry.image_id,
                        format(entry.score, ".17g"),
                        *coords,
                    )
                )
            )
    Path(path).write_text("".join(line + "\n" for line in lines))


def read_rankings(path) -> list[Ranking]:
    path = Path(path)
    lines = path.read_text().splitlines()
    if not lines or lines[0].split("\t") != list(_RANKING_COLUMNS):
        raise SchemaError(f"{path}: missing or malformed ranking header")
    per_query: dict[str, list[RankEntry]] = {}
    stages: dict[str, Stage] = {}
    order: list[str] = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        if len(fields) != len(_RANKING_COLUMNS):
            raise SchemaError(f"{path}:{lineno}: expected {len(_RANKING_COLUMNS)} fields")
        query_id, stage_raw, rank_raw, image_id, score_raw, *coords = fields
        try:
            stage = Stage(stage_raw)
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: unknown stage '{stage_raw}'") from exc
        if query_id not in per_query:
            per_query[query_id] = []
            stages[query_id] = stage
            order.append(query_id)
        elif stages[query_id] != stage:
            raise SchemaError(f"{path}:{lineno}: stage changes within query '{query_id}'")
        try:
            rank = int(rank_raw)
            score = float(score_raw)
        except ValueError as exc:
            raise SchemaError(f"{path}:{lineno}: bad rank or score") from exc
        if rank != len(per_query[query_id]) + 1:
            raise SchemaError(f"{path}:{lineno}: rank {rank} out of sequence")
        box = None
        if any(coords):
            try:
                box = BoundingBox(*(float(c) for c in coords))
            except (ValueError, InvariantError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad box: {exc}") from exc
        per_query[query_id].append(RankEntry(image_id, score, box))
    return [Ranking(qid, tuple(per_query[qid]), stages[qid]) for qid in order]
