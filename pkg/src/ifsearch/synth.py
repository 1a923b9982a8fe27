"""Deterministic synthetic datasets with planted query instances.

The generator fabricates feature tensors directly -- no images, no
network.  Every query owns a small set of signature channels and a
positive pattern on them.  Images hosting that query's instance get the
pattern added inside a recorded cell-aligned box, scaled by
``signal_gain``; all images get non-negative background noise shaped by
a per-image channel profile.  Proposal tables mix jittered copies of the
planted boxes with random distractors, and per-class proposal scores are
a sharpened function of box overlap with the planted box, so the
class-specific reranker has an informative signal exactly where an
instance was planted.

Relevance labels follow the good / ok / junk convention: full-strength
plants are ``good``, reduced-strength plants are ``ok``, and images
carrying only a single-cell fragment of the signature are ``junk``
(recognizable in region space but not a usable view of the instance).

Everything is drawn from one seeded generator in a fixed order, and the
draw sequence never depends on ``signal_gain`` or ``noise_scale`` --
those enter purely as multipliers -- so datasets with different
strengths share identical geometry, noise structure, proposals and
labels.  That makes gain sweeps on a fixed seed meaningful.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .errors import InvariantError
from .evaluation import iou
from .tensor_store import (
    BoundingBox,
    DatasetManifest,
    FeatureMap,
    GroundTruth,
    QueryDef,
    RegionProposal,
    write_feature_map,
    write_ground_truth,
    write_manifest,
    write_proposals,
)

#: Strength multiplier for plants labeled ``ok`` relative to ``good``.
OK_GAIN_FACTOR = 0.6

#: Single-cell signature fragments planted on junk images, per query.
#: Junk images look convincing to appearance matching -- a tight region
#: around the fragment shows a clean slice of the signature -- but carry
#: no scoreable instance box, so geometry-driven class scores ignore
#: them.  They are excluded from scoring either way; their role is to
#: occupy appearance-ranked top slots the way confusing partial hits do.
JUNK_PER_QUERY = 5

#: Ratio of each query's plants that are labeled ``ok``.
OK_RATIO = 0.25

#: Bounds on the fraction of a query's signature channels an individual
#: plant shows (always at least one channel).  Views are nested prefixes
#: of a per-query channel order with random length: different occurrences
#: of the same instance share their visible channels up to the shorter
#: view, the way different crops of an object share its core appearance
#: while longer views add detail.  A single short view therefore matches
#: long views only partially, while averaging several views -- which is
#: what query expansion does -- approaches the full signature; the
#: nesting keeps the worst-case pairwise overlap bounded away from zero
#: so strong signal genuinely separates positives from background.
VIEW_MIN_COVERAGE = 0.35
VIEW_MAX_COVERAGE = 1.0

#: Width of the per-image multiplicative channel profile applied to the
#: background noise (profile values span 1 +/- PROFILE_SPREAD / 2).  A
#: nonzero spread keeps every covariance eigendirection of the noise
#: population genuinely occupied; without it, additive pooling over many
#: cells concentrates the noise images so tightly that whitening blows
#: their residual spread up to unit scale and buries the planted signal.
PROFILE_SPREAD = 0.1


@dataclass(frozen=True)
class SynthSpec:
    """All knobs of the generator; two equal specs produce equal bytes."""

    seed: int = 0
    num_images: int = 200
    num_queries: int = 10
    channels: int = 256
    grid: tuple[int, int] = (38, 50)
    stride: int = 16
    instances_per_query: int = 8
    signal_gain: float = 4.0
    noise_scale: float = 1.0
    proposals_per_image: int = 12
    proposal_jitter: float = 0.2
    class_score_sharpness: float = 2.0

    def __post_init__(self):
        counts = {
            "num_images": self.num_images,
            "num_queries": self.num_queries,
            "channels": self.channels,
            "stride": self.stride,
            "instances_per_query": self.instances_per_query,
            "proposals_per_image": self.proposals_per_image,
        }
        for name, value in counts.items():
            if value < 1:
                raise InvariantError(f"{name} must be positive, got {value}")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise InvariantError(f"grid must be a positive (H, W) pair: {self.grid}")
        if self.signal_gain < 0:
            raise InvariantError(f"signal_gain must be >= 0, got {self.signal_gain}")
        if self.noise_scale < 0:
            raise InvariantError(f"noise_scale must be >= 0, got {self.noise_scale}")
        if not 0 <= self.proposal_jitter <= 1:
            raise InvariantError(
                f"proposal_jitter must lie in [0, 1], got {self.proposal_jitter}"
            )
        if self.class_score_sharpness <= 0:
            raise InvariantError(
                f"class_score_sharpness must be positive, got {self.class_score_sharpness}"
            )
        if self.instances_per_query > self.num_images:
            raise InvariantError(
                "instances_per_query cannot exceed num_images "
                f"({self.instances_per_query} > {self.num_images})"
            )
        if self.num_queries > self.channels:
            raise InvariantError(
                "need at least one signature channel per query "
                f"({self.num_queries} queries, {self.channels} channels)"
            )


@dataclass(frozen=True)
class _Plant:
    """One planted signature occurrence: where, for whom, how strong."""

    query: int
    row: int
    col: int
    height: int  # cells
    width: int  # cells
    factor: float  # gain multiplier (1.0 good, OK_GAIN_FACTOR ok)
    fragment: bool  # True for single-cell junk fragments
    view: np.ndarray  # indices into the query's signature channels

    def pixel_box(self, stride: int) -> BoundingBox:
        return BoundingBox(
            self.col * stride,
            self.row * stride,
            (self.col + self.width) * stride,
            (self.row + self.height) * stride,
        )


def _image_id(i: int) -> str:
    return f"img_{i:04d}"


def _query_id(q: int) -> str:
    return f"q{q:02d}"


def _clamped_shift(box: BoundingBox, dx: float, dy: float, max_x: float, max_y: float) -> BoundingBox:
    return BoundingBox(
        min(max(box.x_min + dx, 0.0), max_x - 1.0),
        min(max(box.y_min + dy, 0.0), max_y - 1.0),
        min(max(box.x_max + dx, 1.0), max_x),
        min(max(box.y_max + dy, 1.0), max_y),
    )


def _draw_layout(spec: SynthSpec, rng: np.random.Generator):
    """Choose signatures, instance placements and junk fragments."""
    grid_h, grid_w = spec.grid
    sig_size = max(1, spec.channels // spec.num_queries)
    perm = rng.permutation(spec.channels)
    signature_channels = [
        perm[q * sig_size : (q + 1) * sig_size] for q in range(spec.num_queries)
    ]
    patterns = 1.0 + rng.random((spec.num_queries, sig_size))

    # plants[i] lists every signature occurrence on image i, query order
    plants: list[list[_Plant]] = [[] for _ in range(spec.num_images)]
    hosts: list[np.ndarray] = []
    ok_count = int(spec.instances_per_query * OK_RATIO)

    lo_h = max(1, grid_h // 5)
    hi_h = max(lo_h + 1, (2 * grid_h) // 5)
    lo_w = max(1, grid_w // 5)
    hi_w = max(lo_w + 1, (2 * grid_w) // 5)
    view_lo = max(1, int(np.ceil(VIEW_MIN_COVERAGE * sig_size)))
    view_hi = max(view_lo, int(round(VIEW_MAX_COVERAGE * sig_size)))

    def _view() -> np.ndarray:
        length = int(rng.integers(view_lo, view_hi + 1))
        return np.arange(length)

    # Keep hosting disjoint across queries while images remain: an image
    # relevant to one query then stays pure noise for every other query,
    # so cross-signature mass never dilutes a planted instance.  Only
    # when the pool runs out do queries start sharing images.
    unused = list(rng.permutation(spec.num_images))

    def _claim(count: int, taken: np.ndarray) -> np.ndarray:
        fresh = [unused.pop() for _ in range(min(count, len(unused)))]
        if len(fresh) < count:
            pool = np.setdiff1d(np.arange(spec.num_images), np.concatenate((taken, fresh)))
            extra = rng.choice(pool, size=count - len(fresh), replace=False)
            fresh.extend(int(i) for i in extra)
        return np.asarray(fresh, dtype=np.int64)

    for q in range(spec.num_queries):
        chosen = _claim(spec.instances_per_query, np.empty(0, dtype=np.int64))
        hosts.append(chosen)
        for k, image in enumerate(chosen):
            height = int(rng.integers(lo_h, hi_h + 1))
            width = int(rng.integers(lo_w, hi_w + 1))
            row = int(rng.integers(0, grid_h - height + 1))
            col = int(rng.integers(0, grid_w - width + 1))
            # the query's own image (k == 0) always hosts a full-strength
            # plant showing the longest view: the query box is the
            # canonical appearance, so no database occurrence shows a
            # channel the query lacks and the best-matching region of a
            # relevant image is the one covering its whole plant.
            factor = OK_GAIN_FACTOR if k >= spec.instances_per_query - ok_count and k > 0 else 1.0
            view = np.arange(view_hi) if k == 0 else _view()
            plants[image].append(
                _Plant(q, row, col, height, width, factor, False, view)
            )

        junk_count = min(JUNK_PER_QUERY, spec.num_images - spec.instances_per_query)
        if junk_count:
            for image in _claim(junk_count, chosen):
                row = int(rng.integers(0, grid_h))
                col = int(rng.integers(0, grid_w))
                plants[image].append(_Plant(q, row, col, 1, 1, 1.0, True, _view()))

    return signature_channels, patterns, plants, hosts


def _render_tensor(
    spec: SynthSpec,
    image: int,
    plants: list[_Plant],
    signature_channels,
    patterns,
    rng: np.random.Generator,
) -> FeatureMap:
    grid_h, grid_w = spec.grid
    profile = 1.0 - PROFILE_SPREAD / 2 + PROFILE_SPREAD * rng.random(spec.channels)
    data = spec.noise_scale * profile[:, None, None] * np.abs(
        rng.standard_normal((spec.channels, grid_h, grid_w))
    )
    for plant in plants:
        channels = signature_channels[plant.query][plant.view]
        pattern = patterns[plant.query][plant.view]
        strengths = rng.random((len(channels), plant.height, plant.width))
        flat = strengths.reshape(len(channels), -1)
        peak = flat.max(axis=1)
        # each signature channel fires on exactly one cell of the box --
        # its per-channel peak.  Peak pooling over any region covering the
        # box recovers the whole pattern, a clipped region loses the
        # channels whose peak falls outside, and additive pooling dilutes
        # the single active cell by the rest of the region.
        active = flat == peak[:, None]
        cell_var = np.where(active, 0.5 + 0.5 * flat, 0.0).reshape(strengths.shape)
        rows = slice(plant.row, plant.row + plant.height)
        cols = slice(plant.col, plant.col + plant.width)
        data[channels, rows, cols] += (
            spec.signal_gain * plant.factor * pattern[:, None, None] * cell_var
        )
    return FeatureMap(
        image_id=_image_id(image),
        data=data.astype(np.float32),
        stride=spec.stride,
    )


def _render_proposals(
    spec: SynthSpec,
    plants: list[_Plant],
    rng: np.random.Generator,
) -> list[RegionProposal]:
    grid_h, grid_w = spec.grid
    max_x = float(grid_w * spec.stride)
    max_y = float(grid_h * spec.stride)
    jitter = spec.proposal_jitter

    boxes: list[BoundingBox] = []
    true_boxes = [
        (p.query, p.pixel_box(spec.stride)) for p in plants if not p.fragment
    ]
    for _, box in true_boxes:
        # a coarse shifted copy of the planted box ...
        dx, dy = rng.uniform(-1.0, 1.0, size=2)
        boxes.append(
            _clamped_shift(
                box, dx * jitter * box.width, dy * jitter * box.height, max_x, max_y
            )
        )
        # ... and a tight covering copy, grown asymmetrically so it still
        # contains the whole plant (total growth jitter/2 per dimension)
        gx, gy = rng.uniform(-1.0, 1.0, size=2)
        pad = jitter / 4.0
        boxes.append(
            BoundingBox(
                max(box.x_min - (1.0 + gx) * pad * box.width, 0.0),
                max(box.y_min - (1.0 + gy) * pad * box.height, 0.0),
                min(box.x_max + (1.0 - gx) * pad * box.width, max_x),
                min(box.y_max + (1.0 - gy) * pad * box.height, max_y),
            )
        )
    num_distractors = max(0, spec.proposals_per_image - len(boxes))
    for _ in range(num_distractors):
        # background boxes stay below typical plant size: with a
        # featureless background, peak pooling scores a box by the plant
        # cells it captures and barely punishes slack, so letting
        # distractors swallow whole plants would make the best-scoring
        # box a coin flip between the tight cover and a loose giant
        width = rng.uniform(0.08, 0.28) * max_x
        height = rng.uniform(0.08, 0.28) * max_y
        x_min = rng.uniform(0.0, max_x - width)
        y_min = rng.uniform(0.0, max_y - height)
        boxes.append(BoundingBox(x_min, y_min, x_min + width, y_min + height))

    boxes = [boxes[i] for i in rng.permutation(len(boxes))]

    proposals = []
    for box in boxes:
        best_iou = max((iou(box, tb) for _, tb in true_boxes), default=0.0)
        wobble = float(rng.uniform(-1.0, 1.0))
        objectness = float(np.clip(0.05 + 0.9 * best_iou + 0.05 * wobble, 0.0, 1.0))
        scores = 0.02 * rng.random(spec.num_queries)
        for q, tb in true_boxes:
            overlap = iou(box, tb) ** spec.class_score_sharpness
            scores[q] = max(scores[q], overlap)
        proposals.append(
            RegionProposal(box=box, objectness=objectness, class_scores=scores)
        )
    return proposals


def generate(spec: SynthSpec, out_dir) -> tuple[DatasetManifest, list[GroundTruth]]:
    """Write a complete dataset under ``out_dir``; deterministic from seed.

    Produces ``manifest.json``, one tensor and one proposal table per
    image, good/ok/junk lists under ``gt/``, the true instance boxes in
    ``localizations.json``, and the generating parameters in
    ``synth_spec.json``.
    """
    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    (out_dir / "proposals").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    signature_channels, patterns, plants, hosts = _draw_layout(spec, rng)

    tensor_paths = {}
    proposal_paths = {}
    for i in range(spec.num_images):
        image_id = _image_id(i)
        fmap = _render_tensor(spec, i, plants[i], signature_channels, patterns, rng)
        rel_tensor = f"tensors/{image_id}.ifsm"
        write_feature_map(fmap, out_dir / rel_tensor)
        tensor_paths[image_id] = rel_tensor

        proposals = _render_proposals(spec, plants[i], rng)
        rel_prop = f"proposals/{image_id}.prop"
        write_proposals(proposals, out_dir / rel_prop)
        proposal_paths[image_id] = rel_prop

    queries = []
    ground_truths = []
    localizations: dict[str, dict[str, list[float]]] = {}
    for q in range(spec.num_queries):
        query_id = _query_id(q)
        query_image = int(hosts[q][0])
        query_plant = next(
            p for p in plants[query_image] if p.query == q and not p.fragment
        )
        queries.append(
            QueryDef(
                query_id=query_id,
                image_id=_image_id(query_image),
                box=query_plant.pixel_box(spec.stride),
                class_index=q,
            )
        )
        good = set()
        ok = set()
        junk = set()
        boxes: dict[str, list[float]] = {}
        for i in range(spec.num_images):
            for plant in plants[i]:
                if plant.query != q:
                    continue
                image_id = _image_id(i)
                if plant.fragment:
                    junk.add(image_id)
                else:
                    (good if plant.factor == 1.0 else ok).add(image_id)
                    boxes[image_id] = list(plant.pixel_box(spec.stride).coords)
        ground_truths.append(
            GroundTruth(query_id, frozenset(good), frozenset(ok), frozenset(junk))
        )
        localizations[query_id] = boxes

    manifest = DatasetManifest(
        dataset_name=f"synth-seed{spec.seed}",
        image_ids=tuple(_image_id(i) for i in range(spec.num_images)),
        feature_dim=spec.channels,
        stride=spec.stride,
        class_names=tuple(_query_id(q) for q in range(spec.num_queries)),
        query_defs=tuple(queries),
        tensor_paths=tensor_paths,
        proposal_paths=proposal_paths,
        base_dir=out_dir,
    )
    write_manifest(manifest, out_dir / "manifest.json")
    write_ground_truth(ground_truths, out_dir / "gt")
    (out_dir / "localizations.json").write_text(
        json.dumps(localizations, indent=2, sort_keys=True) + "\n"
    )
    spec_doc = {f.name: getattr(spec, f.name) for f in fields(spec)}
    spec_doc["grid"] = list(spec.grid)
    (out_dir / "synth_spec.json").write_text(
        json.dumps(spec_doc, indent=2, sort_keys=True) + "\n"
    )
    return manifest, ground_truths


def load_localizations(path) -> dict[str, dict[str, BoundingBox]]:
    """Read a ``localizations.json`` back into per-query box mappings."""
    doc = json.loads(Path(path).read_text())
    return {
        query_id: {
            image_id: BoundingBox(*coords) for image_id, coords in boxes.items()
        }
        for query_id, boxes in doc.items()
    }


def load_synth_spec(path) -> SynthSpec:
    """Read a ``synth_spec.json`` back into a :class:`SynthSpec`."""
    doc = json.loads(Path(path).read_text())
    known = {f.name for f in fields(SynthSpec)}
    unknown = set(doc) - known
    if unknown:
        raise InvariantError(f"unknown generator parameters: {sorted(unknown)}")
    if "grid" in doc:
        doc["grid"] = tuple(doc["grid"])
    return SynthSpec(**doc)
