"""On-disk interchange formats and their loaders.

Four artifact kinds live here:

* feature tensors -- binary "IFSM" containers holding one ``C x H x W``
  float32 activation map per image, channel-major;
* proposal tables -- per-image binary lists of candidate boxes with
  objectness and optional per-class scores;
* the dataset manifest -- a JSON document naming images, tensor and
  proposal files, query definitions and class names;
* ground truth -- per-query ``good`` / ``ok`` / ``junk`` text lists, one
  image id per line, mirroring the Oxford Buildings release layout.

All multi-byte integers and floats are little-endian.  Loaders validate
eagerly and never hand back partially constructed values; loaded
structures are immutable and safe to share across threads.

IFSM layout::

    magic     4 bytes   b"IFSM"
    version   u16       currently 1
    dtype     u8        0 = float32
    channels  u32
    height    u32
    width     u32
    stride    u32       image pixels per feature cell
    id_len    u32
    image_id  id_len bytes, UTF-8
    payload   channels*height*width float32, channel-major then row-major

Proposal table layout::

    count     u32
    per proposal:
        x_min, y_min, x_max, y_max   f32 each, image-pixel coordinates
        objectness                   f32, NaN when absent
        flags                        u16, bit 0 set when class scores follow
        class_scores                 K f32 (only when bit 0 set); K comes
                                     from the manifest's class list
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    InvariantError,
    NonFiniteData,
    SchemaError,
    TruncatedFile,
    UnsupportedVersion,
)

TENSOR_MAGIC = b"IFSM"
TENSOR_VERSION = 1
DTYPE_FLOAT32 = 0

_HEADER = struct.Struct("<4sHBIIIII")
_PROPOSAL_FIXED = struct.Struct("<4ffH")
_FLAG_CLASS_SCORES = 0x1


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image-pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not all(math.isfinite(v) for v in self.coords):
            raise InvariantError(f"box coordinates must be finite: {self.coords}")
        if self.x_min < 0 or self.y_min < 0:
            raise InvariantError(f"box coordinates must be non-negative: {self.coords}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvariantError(f"box must have positive extent: {self.coords}")

    @property
    def coords(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height


@dataclass(frozen=True)
class RegionProposal:
    """A candidate box with optional objectness and per-class scores."""

    box: BoundingBox
    objectness: float | None = None
    class_scores: np.ndarray | None = None

    def __post_init__(self):
        if self.objectness is not None and not (0.0 <= self.objectness <= 1.0):
            raise InvariantError(f"objectness must lie in [0, 1]: {self.objectness}")
        if self.class_scores is not None:
            scores = np.asarray(self.class_scores, dtype=np.float64)
            if scores.ndim != 1:
                raise InvariantError("class_scores must be a flat vector")
            if not np.isfinite(scores).all():
                raise InvariantError("class_scores must be finite")
            scores.setflags(write=False)
            object.__setattr__(self, "class_scores", scores)


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """One image's ``C x H x W`` activation tensor plus its pixel stride."""

    image_id: str
    data: np.ndarray
    stride: int

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise InvariantError(f"feature map must be C x H x W, got shape {data.shape}")
        if min(data.shape) < 1:
            raise InvariantError(f"feature map dimensions must be positive: {data.shape}")
        if not np.isfinite(data).all():
            raise NonFiniteData("feature map contains non-finite values")
        if self.stride < 1:
            raise InvariantError(f"stride must be >= 1, got {self.stride}")
        object.__setattr__(self, "data", data)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return (
            self.image_id == other.image_id
            and self.stride == other.stride
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )


@dataclass(frozen=True)
class MapHeader:
    """Cheap header view of a tensor file, read without the payload."""

    image_id: str
    channels: int
    height: int
    width: int
    stride: int


@dataclass(frozen=True)
class QueryDef:
    """A query: an image, a box on it, and optionally a class index.

    ``tensor`` names an explicit tensor file for queries whose image is
    not part of the indexed database.
    """

    query_id: str
    image_id: str
    box: BoundingBox
    class_index: int | None = None
    tensor: str | None = None


@dataclass(frozen=True)
class GroundTruth:
    """Oxford-style relevance labels for one query."""

    query_id: str
    good: frozenset[str]
    ok: frozenset[str]
    junk: frozenset[str]

    def __post_init__(self):
        overlaps = (self.good & self.ok) | (self.good & self.junk) | (self.ok & self.junk)
        if overlaps:
            raise InvariantError(
                f"{self.query_id}: good/ok/junk must be disjoint, shared ids: "
                f"{sorted(overlaps)}"
            )

    @property
    def positives(self) -> frozenset[str]:
        return self.good | self.ok


@dataclass(frozen=True)
class DatasetManifest:
    """Index of a dataset: images, file paths, queries, class names."""

    dataset_name: str
    image_ids: tuple[str, ...]
    feature_dim: int
    stride: int
    class_names: tuple[str, ...]
    query_defs: tuple[QueryDef, ...]
    tensor_paths: Mapping[str, str]
    proposal_paths: Mapping[str, str]
    base_dir: Path

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def tensor_path(self, image_id: str) -> Path:
        return self.base_dir / self.tensor_paths[image_id]

    def proposal_path(self, image_id: str) -> Path | None:
        rel = self.proposal_paths.get(image_id)
        return None if rel is None else self.base_dir / rel

    def query(self, query_id: str) -> QueryDef:
        for q in self.query_defs:
            if q.query_id == query_id:
                return q
        raise KeyError(query_id)

    def query_tensor_path(self, query: QueryDef) -> Path:
        if query.tensor is not None:
            return self.base_dir / query.tensor
        return self.tensor_path(query.image_id)


# ---------------------------------------------------------------------------
# feature tensors


def write_feature_map(fmap: FeatureMap, path) -> None:
    """Serialize ``fmap`` to an IFSM file.  Bit-exact round trip."""
    data = np.ascontiguousarray(fmap.data, dtype="<f4")
    if not np.isfinite(data).all():
        raise NonFiniteData("refusing to write non-finite feature map", path=path)
    id_bytes = fmap.image_id.encode("utf-8")
    header = _HEADER.pack(
        TENSOR_MAGIC,
        TENSOR_VERSION,
        DTYPE_FLOAT32,
        fmap.channels,
        fmap.height,
        fmap.width,
        fmap.stride,
        len(id_bytes),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(id_bytes)
        fh.write(data.tobytes())


def _read_header(blob: bytes, path) -> tuple[MapHeader, int]:
    if len(blob) < _HEADER.size:
        raise TruncatedFile(
            f"file too short for header ({len(blob)} bytes)", path=path, offset=len(blob)
        )
    magic, version, dtype, channels, height, width, stride, id_len = _HEADER.unpack_from(blob)
    if magic != TENSOR_MAGIC:
        raise BadMagic(f"expected magic {TENSOR_MAGIC!r}, found {magic!r}", path=path, offset=0)
    if version != TENSOR_VERSION:
        raise UnsupportedVersion(f"unsupported tensor version {version}", path=path, offset=4)
    if dtype != DTYPE_FLOAT32:
        raise UnsupportedVersion(f"unsupported dtype code {dtype}", path=path, offset=6)
    if min(channels, height, width) < 1 or stride < 1:
        raise SchemaError(f"{path}: non-positive tensor dimensions in header")
    end = _HEADER.size + id_len
    if len(blob) < end:
        raise TruncatedFile("file truncated inside image id", path=path, offset=len(blob))
    image_id = blob[_HEADER.size:end].decode("utf-8")
    return MapHeader(image_id, channels, height, width, stride), end


def read_feature_map_header(path) -> MapHeader:
    """Read only the IFSM header; validates magic, version and dtype."""
    with open(path, "rb") as fh:
        blob = fh.read(_HEADER.size + 4096)
    header, _ = _read_header(blob, path)
    return header


def read_feature_map(path) -> FeatureMap:
    """Load an IFSM file back into a validated :class:`FeatureMap`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header, offset = _read_header(blob, path)
    count = header.channels * header.height * header.width
    expected = offset + 4 * count
    if len(blob) != expected:
        raise TruncatedFile(
            f"payload has {len(blob) - offset} bytes, expected {4 * count}",
            path=path,
            offset=len(blob) if len(blob) < expected else expected,
        )
    data = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    finite = np.isfinite(data)
    if not finite.all():
        first_bad = int(np.argmin(finite))
        raise NonFiniteData(
            f"non-finite value at element {first_bad}",
            path=path,
            offset=offset + 4 * first_bad,
        )
    data = data.reshape(header.channels, header.height, header.width)
    return FeatureMap(image_id=header.image_id, data=data, stride=header.stride)


# ---------------------------------------------------------------------------
# proposal tables


def write_proposals(proposals: Sequence[RegionProposal], path) -> None:
    """Serialize a proposal table; objectness ``None`` is stored as NaN."""
    parts = [struct.pack("<I", len(proposals))]
    for prop in proposals:
        objectness = math.nan if prop.objectness is None else prop.objectness
        flags = 0 if prop.class_scores is None else _FLAG_CLASS_SCORES
        parts.append(_PROPOSAL_FIXED.pack(*prop.box.coords, objectness, flags))
        if prop.class_scores is not None:
            parts.append(np.asarray(prop.class_scores, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_proposals(path, num_classes: int) -> list[RegionProposal]:
    """Load a proposal table.

    ``num_classes`` is the manifest's class count; a proposal flagged as
    carrying class scores is a schema error when it is zero.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 4:
        raise TruncatedFile("missing proposal count", path=path, offset=len(blob))
    (count,) = struct.unpack_from("<I", blob)
    offset = 4
    proposals = []
    for i in range(count):
        if len(blob) < offset + _PROPOSAL_FIXED.size:
            raise TruncatedFile(f"truncated in proposal {i}", path=path, offset=len(blob))
        x_min, y_min, x_max, y_max, objectness, flags = _PROPOSAL_FIXED.unpack_from(blob, offset)
        offset += _PROPOSAL_FIXED.size
        scores = None
        if flags & _FLAG_CLASS_SCORES:
            if num_classes == 0:
                raise SchemaError(
                    f"{path}: proposal {i} carries class scores but the manifest "
                    "declares no classes"
                )
            end = offset + 4 * num_classes
            if len(blob) < end:
                raise TruncatedFile(
                    f"truncated in class scores of proposal {i}", path=path, offset=len(blob)
                )
            scores = np.frombuffer(blob, dtype="<f4", count=num_classes, offset=offset)
            scores = scores.astype(np.float64)
            offset = end
        try:
            box = BoundingBox(float(x_min), float(y_min), float(x_max), float(y_max))
            proposals.append(
                RegionProposal(
                    box=box,
                    objectness=None if math.isnan(objectness) else float(objectness),
                    class_scores=scores,
                )
            )
        except InvariantError as exc:
            raise SchemaError(f"{path}: proposal {i}: {exc}") from exc
    if offset != len(blob):
        raise SchemaError(f"{path}: {len(blob) - offset} trailing bytes after proposal table")
    return proposals


# ---------------------------------------------------------------------------
# manifest


def _box_from_json(raw, where: str) -> BoundingBox:
    if not (isinstance(raw, list) and len(raw) == 4):
        raise SchemaError(f"{where}: box must be a list of four numbers, got {raw!r}")
    try:
        return BoundingBox(*(float(v) for v in raw))
    except (TypeError, ValueError, InvariantError) as exc:
        raise SchemaError(f"{where}: {exc}") from exc


def _require(mapping, key, kind, where: str):
    if key not in mapping:
        raise SchemaError(f"{where}: missing required field '{key}'")
    value = mapping[key]
    if kind is not None and not isinstance(value, kind):
        raise SchemaError(f"{where}: field '{key}' has wrong type {type(value).__name__}")
    return value


def load_manifest(path) -> DatasetManifest:
    """Load and eagerly validate a dataset manifest.

    Checks performed beyond JSON schema: image ids unique, every
    referenced tensor/proposal file exists, tensor headers agree with the
    declared feature dimension and stride, query boxes lie within their
    image's pixel area, and class indices are in range.  All dangling
    references are reported in one error.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: manifest must be a JSON object")

    name = _require(doc, "dataset_name", str, str(path))
    feature_dim = _require(doc, "feature_dim", int, str(path))
    stride = _require(doc, "stride", int, str(path))
    if feature_dim < 1 or stride < 1:
        raise SchemaError(f"{path}: feature_dim and stride must be positive")
    class_names = tuple(_require(doc, "class_names", list, str(path)))
    if any(not isinstance(c, str) for c in class_names):
        raise SchemaError(f"{path}: class_names must be strings")

    images = _require(doc, "images", list, str(path))
    image_ids: list[str] = []
    tensor_paths: dict[str, str] = {}
    proposal_paths: dict[str, str] = {}
    for i, entry in enumerate(images):
        where = f"{path}: images[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{where}: must be an object")
        image_id = _require(entry, "image_id", str, where)
        tensor = _require(entry, "tensor", str, where)
        if image_id in tensor_paths:
            raise SchemaError(f"{where}: duplicate image_id '{image_id}'")
        image_ids.append(image_id)
        tensor_paths[image_id] = tensor
        if entry.get("proposals") is not None:
            proposals = entry["proposals"]
            if not isinstance(proposals, str):
                raise SchemaError(f"{where}: field 'proposals' must be a path string")
            proposal_paths[image_id] = proposals

    queries: list[QueryDef] = []
    for i, entry in enumerate(doc.get("queries", [])):
        where = f"{path}: queries[{i}]"
        if not isinstance(entry, dict):
            raise SchemaError(f"{where}: must be an object")
        query_id = _require(entry, "query_id", str, where)
        image_id = _require(entry, "image_id", str, where)
        box = _box_from_json(_require(entry, "box", list, where), where)
        class_index = entry.get("class_index")
        if class_index is not None:
            if not isinstance(class_index, int):
                raise SchemaError(f"{where}: class_index must be an integer")
            if not 0 <= class_index < len(class_names):
                raise SchemaError(
                    f"{where}: class_index {class_index} outside [0, {len(class_names)})"
                )
        tensor = entry.get("tensor")
        if tensor is not None and not isinstance(tensor, str):
            raise SchemaError(f"{where}: field 'tensor' must be a path string")
        queries.append(QueryDef(query_id, image_id, box, class_index, tensor))
    seen_q = set()
    for q in queries:
        if q.query_id in seen_q:
            raise SchemaError(f"{path}: duplicate query_id '{q.query_id}'")
        seen_q.add(q.query_id)

    manifest = DatasetManifest(
        dataset_name=name,
        image_ids=tuple(image_ids),
        feature_dim=feature_dim,
        stride=stride,
        class_names=class_names,
        query_defs=tuple(queries),
        tensor_paths=tensor_paths,
        proposal_paths=proposal_paths,
        base_dir=path.parent,
    )
    problems = validate_manifest_files(manifest)
    if problems:
        raise SchemaError(f"{path}: " + "; ".join(problems))
    return manifest


_READ_ERRORS = (BadMagic, UnsupportedVersion, TruncatedFile, SchemaError)


def validate_manifest_files(manifest: DatasetManifest) -> list[str]:
    """Cross-check a manifest against the files it references.

    Returns a list of human-readable problems; empty means valid.
    """
    problems: list[str] = []
    headers: dict[str, MapHeader] = {}
    for image_id in manifest.image_ids:
        tensor = manifest.tensor_path(image_id)
        if not tensor.is_file():
            problems.append(f"missing tensor file for '{image_id}': {tensor}")
            continue
        try:
            header = read_feature_map_header(tensor)
        except _READ_ERRORS as exc:
            problems.append(f"unreadable tensor for '{image_id}': {exc}")
            continue
        headers[image_id] = header
        if header.channels != manifest.feature_dim:
            problems.append(
                f"tensor for '{image_id}' has {header.channels} channels, "
                f"manifest declares {manifest.feature_dim}"
            )
        if header.stride != manifest.stride:
            problems.append(
                f"tensor for '{image_id}' has stride {header.stride}, "
                f"manifest declares {manifest.stride}"
            )
        if header.image_id != image_id:
            problems.append(
                f"tensor file for '{image_id}' carries image_id '{header.image_id}'"
            )

    for image_id, rel in manifest.proposal_paths.items():
        prop_path = manifest.base_dir / rel
        if not prop_path.is_file():
            problems.append(f"missing proposal file for '{image_id}': {prop_path}")
            continue
        try:
            read_proposals(prop_path, manifest.num_classes)
        except (SchemaError, TruncatedFile) as exc:
            problems.append(str(exc))

    known = set(manifest.image_ids)
    for query in manifest.query_defs:
        if query.image_id not in known and query.tensor is None:
            problems.append(
                f"query '{query.query_id}' references unknown image "
                f"'{query.image_id}' and names no external tensor"
            )
            continue
        if query.tensor is not None:
            qpath = manifest.base_dir / query.tensor
            if not qpath.is_file():
                problems.append(f"query '{query.query_id}': missing tensor {qpath}")
                continue
            try:
                header = read_feature_map_header(qpath)
            except _READ_ERRORS as exc:
                problems.append(f"query '{query.query_id}': unreadable tensor: {exc}")
                continue
        else:
            header = headers.get(query.image_id)
            if header is None:
                continue  # already reported above
        max_x = header.width * header.stride
        max_y = header.height * header.stride
        box = query.box
        if box.x_max > max_x or box.y_max > max_y:
            problems.append(
                f"query '{query.query_id}' box {box.coords} exceeds image area "
                f"{max_x} x {max_y}"
            )
    return problems


def write_manifest(manifest: DatasetManifest, path) -> None:
    """Write the manifest JSON document (paths stay relative)."""
    doc = {
        "dataset_name": manifest.dataset_name,
        "feature_dim": manifest.feature_dim,
        "stride": manifest.stride,
        "class_names": list(manifest.class_names),
        "images": [
            {
                "image_id": image_id,
                "tensor": manifest.tensor_paths[image_id],
                **(
                    {"proposals": manifest.proposal_paths[image_id]}
                    if image_id in manifest.proposal_paths
                    else {}
                ),
            }
            for image_id in manifest.image_ids
        ],
        "queries": [
            {
                "query_id": q.query_id,
                "image_id": q.image_id,
                "box": list(q.box.coords),
                **({"class_index": q.class_index} if q.class_index is not None else {}),
                **({"tensor": q.tensor} if q.tensor is not None else {}),
            }
            for q in manifest.query_defs
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


# ---------------------------------------------------------------------------
# ground truth


_GT_KINDS = ("good", "ok", "junk")


def load_ground_truth(gt_dir) -> list[GroundTruth]:
    """Load Oxford-style ground truth from a directory.

    Queries are discovered from ``<query_id>_good.txt`` (and ``_ok`` /
    ``_junk``) files; a missing file means an empty set.  Returned sorted
    by query id.
    """
    gt_dir = Path(gt_dir)
    if not gt_dir.is_dir():
        raise SchemaError(f"ground truth directory not found: {gt_dir}")
    query_ids = set()
    for kind in _GT_KINDS:
        for file in gt_dir.glob(f"*_{kind}.txt"):
            query_ids.add(file.name[: -len(f"_{kind}.txt")])
    if not query_ids:
        raise SchemaError(f"no ground truth lists found in {gt_dir}")

    out = []
    for query_id in sorted(query_ids):
        sets = {}
        for kind in _GT_KINDS:
            file = gt_dir / f"{query_id}_{kind}.txt"
            if file.is_file():
                ids = [line.strip() for line in file.read_text().splitlines()]
                sets[kind] = frozenset(i for i in ids if i)
            else:
                sets[kind] = frozenset()
        try:
            out.append(GroundTruth(query_id, sets["good"], sets["ok"], sets["junk"]))
        except InvariantError as exc:
            raise SchemaError(str(exc)) from exc
    return out


def write_ground_truth(gts: Sequence[GroundTruth], gt_dir) -> None:
    """Write one ``_good`` / ``_ok`` / ``_junk`` list triple per query."""
    gt_dir = Path(gt_dir)
    gt_dir.mkdir(parents=True, exist_ok=True)
    for gt in gts:
        for kind in _GT_KINDS:
            ids = sorted(getattr(gt, kind))
            (gt_dir / f"{gt.query_id}_{kind}.txt").write_text(
                "".join(f"{i}\n" for i in ids)
            )
