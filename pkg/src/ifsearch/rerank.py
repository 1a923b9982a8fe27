"""Spatial reranking and query expansion on top of a filtering ranking.

Both rerankers rescore only the top N entries of the incoming ranking
(the block); everything below keeps its previous relative order, even
when its old scores exceed the block's new ones — scores from different
stages are not comparable.  The class-agnostic path matches a descriptor
pooled from the query's box against descriptors pooled from every
proposal of a candidate image, keeping the best-scoring proposal as the
localization.  The class-specific path ignores descriptors entirely and
ranks by the candidate proposals' scores for the query's class.

Query expansion averages the query's whole-image descriptor with the
index rows of the current top M entries, renormalizes, and searches the
whole index again with the expanded descriptor.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .descriptors import Descriptor, WhiteningModel, finalize, l2_normalize
from .errors import (
    DimensionMismatch,
    InvariantError,
    MissingClassIndex,
    MissingClassScores,
)
from .pooling import Pooling, pool_all_proposals, pool_region, warp_box
from .search import (
    Index,
    RankEntry,
    Ranking,
    Stage,
    score_rows,
    sort_entries,
)
from .tensor_store import (
    DatasetManifest,
    QueryDef,
    read_feature_map,
    read_proposals,
)

# Score assigned to a block image with no usable proposals.  Cosines live
# in [-1, 1] and class scores in [0, 1], so -1.0 sinks such images to the
# bottom of the block.
EMPTY_SCORE = -1.0


@dataclass(frozen=True)
class RerankConfig:
    """Knobs for the spatial rerankers.

    ``depth_n`` is the block size (entries rescored); ``pooling`` is how
    proposal regions are pooled, independent of the index's own pooling;
    ``mode`` selects the class-agnostic or class-specific scorer.
    """

    depth_n: int = 100
    pooling: Pooling = Pooling.MAX
    mode: Stage = Stage.CA_SR

    def __post_init__(self):
        if self.depth_n < 1:
            raise InvariantError(f"depth_n must be >= 1, got {self.depth_n}")
        if self.mode not in (Stage.CA_SR, Stage.CS_SR):
            raise InvariantError(
                f"mode must be '{Stage.CA_SR.value}' or '{Stage.CS_SR.value}', "
                f"got '{self.mode}'"
            )


@dataclass(frozen=True)
class QeConfig:
    depth_m: int = 5

    def __post_init__(self):
        if self.depth_m < 1:
            raise InvariantError(f"depth_m must be >= 1, got {self.depth_m}")


@dataclass
class RegionDescriptorCache:
    """Memo for per-image proposal loads and pooled region descriptors.

    One rerank pass touches each tensor file at most once per pooling
    flavor.  Descriptor entries are keyed by the finalizing model's
    identity as well, so a cache instance can serve mixed passes.
    """

    manifest: DatasetManifest
    _regions: dict = field(default_factory=dict)
    _proposals: dict = field(default_factory=dict)

    def proposals(self, image_id: str):
        if image_id not in self._proposals:
            self._proposals[image_id] = read_proposals(
                self.manifest.proposal_path(image_id), self.manifest.num_classes
            )
        return self._proposals[image_id]

    def region_descriptors(self, image_id: str, pooling: Pooling, model=None):
        """(proposals, aligned list of finalized Descriptors-or-None)."""
        key = (image_id, pooling, None if model is None else id(model))
        if key not in self._regions:
            proposals = self.proposals(image_id)
            fmap = read_feature_map(self.manifest.tensor_path(image_id))
            raw, _failed = pool_all_proposals(fmap, proposals, pooling)
            descs = [finalize(r, model) if r is not None else None for r in raw]
            self._regions[key] = (proposals, descs)
        return self._regions[key]


def query_region_descriptor(
    query: QueryDef,
    manifest: DatasetManifest,
    pooling: Pooling,
    model: WhiteningModel | None = None,
) -> Descriptor:
    """Finalized descriptor pooled from the query box on its own tensor.

    The box is warped to the feature grid first; a box covering the whole
    image therefore yields exactly the image-wise descriptor.
    """
    fmap = read_feature_map(manifest.query_tensor_path(query))
    region = warp_box(query.box, fmap)
    return finalize(pool_region(fmap, region, pooling), model)


def _split_block(ranking: Ranking, depth_n: int):
    return ranking.entries[:depth_n], ranking.entries[depth_n:]


def _check_input_stage(ranking: Ranking) -> None:
    if ranking.stage not in (Stage.FILTERING, Stage.QE):
        raise InvariantError(
            f"cannot rerank a '{ranking.stage.value}' ranking; "
            "rerank expects a filtering or qe ranking"
        )


def _best_proposal(scored) -> tuple[float, object] | None:
    """First (score, box) attaining the maximum score, or None when empty."""
    best_score = None
    best_box = None
    for score, box in scored:
        if best_score is None or score > best_score:
            best_score = score
            best_box = box
    if best_score is None:
        return None
    return best_score, best_box


def rerank_class_agnostic(
    ranking: Ranking,
    query_desc: Descriptor,
    manifest: DatasetManifest,
    config: RerankConfig = RerankConfig(),
    model: WhiteningModel | None = None,
    cache: RegionDescriptorCache | None = None,
) -> Ranking:
    """Rescore the top N by the best proposal-to-query-descriptor cosine.

    Each block image's score becomes the maximum cosine between
    ``query_desc`` and any of its finalized proposal descriptors; the
    first proposal attaining the maximum becomes the localization.
    Images with no scorable proposal get ``EMPTY_SCORE`` and no box.
    """
    _check_input_stage(ranking)
    if cache is None:
        cache = RegionDescriptorCache(manifest)

    block, tail = _split_block(ranking, config.depth_n)
    rescored = []
    for entry in block:
        proposals, descs = cache.region_descriptors(
            entry.image_id, config.pooling, model
        )
        scored = []
        for proposal, desc in zip(proposals, descs):
            if desc is None:
                continue
            if desc.dim != query_desc.dim:
                raise DimensionMismatch(
                    f"region descriptor dim {desc.dim} for '{entry.image_id}' "
                    f"!= query dim {query_desc.dim}"
                )
            scored.append((float(np.dot(query_desc.values, desc.values)), proposal.box))
        best = _best_proposal(scored)
        if best is None:
            rescored.append(RankEntry(entry.image_id, EMPTY_SCORE, None))
        else:
            rescored.append(RankEntry(entry.image_id, best[0], best[1]))
    return Ranking(ranking.query_id, sort_entries(rescored) + tail, Stage.CA_SR)


def rerank_class_specific(
    ranking: Ranking,
    query: QueryDef,
    manifest: DatasetManifest,
    config: RerankConfig = RerankConfig(),
    cache: RegionDescriptorCache | None = None,
) -> Ranking:
    """Rescore the top N by the best proposal score for the query's class.

    Requires the query to carry a class index and every block image's
    proposals to carry class-score vectors.  The first proposal attaining
    the per-image maximum becomes the localization.
    """
    _check_input_stage(ranking)
    if query.class_index is None:
        raise MissingClassIndex(
            f"query '{query.query_id}' has no class index; class-specific "
            "reranking needs one"
        )
    if cache is None:
        cache = RegionDescriptorCache(manifest)

    block, tail = _split_block(ranking, config.depth_n)
    missing = [
        entry.image_id
        for entry in block
        if any(p.class_scores is None for p in cache.proposals(entry.image_id))
    ]
    if missing:
        raise MissingClassScores(
            "proposals without class scores for: " + ", ".join(missing)
        )

    rescored = []
    for entry in block:
        scored = [
            (float(p.class_scores[query.class_index]), p.box)
            for p in cache.proposals(entry.image_id)
        ]
        best = _best_proposal(scored)
        if best is None:
            rescored.append(RankEntry(entry.image_id, EMPTY_SCORE, None))
        else:
            rescored.append(RankEntry(entry.image_id, best[0], best[1]))
    return Ranking(ranking.query_id, sort_entries(rescored) + tail, Stage.CS_SR)


def rerank(
    ranking: Ranking,
    query: QueryDef,
    manifest: DatasetManifest,
    config: RerankConfig = RerankConfig(),
    model: WhiteningModel | None = None,
    cache: RegionDescriptorCache | None = None,
) -> Ranking:
    """Dispatch on ``config.mode``, deriving the query descriptor if needed."""
    if config.mode == Stage.CA_SR:
        query_desc = query_region_descriptor(query, manifest, config.pooling, model)
        return rerank_class_agnostic(ranking, query_desc, manifest, config, model, cache)
    return rerank_class_specific(ranking, query, manifest, config, cache)


def expand_query(
    index: Index,
    ranking: Ranking,
    query_desc: Descriptor,
    config: QeConfig = QeConfig(),
) -> Descriptor:
    """Average the query descriptor with the top M index rows, renormalize."""
    if query_desc.dim != index.dim:
        raise DimensionMismatch(
            f"query descriptor dimension {query_desc.dim} != index dimension {index.dim}"
        )
    rows = [np.asarray(query_desc.values, dtype=np.float64)]
    for entry in ranking.entries[: config.depth_m]:
        if entry.image_id not in index:
            raise InvariantError(f"ranking entry '{entry.image_id}' is not in the index")
        rows.append(index.row(entry.image_id))
    return l2_normalize(np.mean(rows, axis=0))


def query_expansion(
    index: Index,
    ranking: Ranking,
    query_desc: Descriptor,
    config: QeConfig = QeConfig(),
    *,
    deterministic: bool = True,
) -> Ranking:
    """Search the whole index again with the expanded query descriptor.

    ``query_desc`` must be the whole-image descriptor that drove the
    filtering stage: index rows are only comparable to descriptors from
    the same pipeline.  Localizations attached by an earlier rerank are
    carried over by image id, since expansion refines scores but learns
    nothing new about where the instance sits.
    """
    expanded = expand_query(index, ranking, query_desc, config)
    scores = score_rows(index.matrix, np.asarray(expanded.values), deterministic)
    boxes = {e.image_id: e.localization for e in ranking.entries}
    entries = [
        RankEntry(image_id, float(score), boxes.get(image_id))
        for image_id, score in zip(index.image_ids, scores)
    ]
    return Ranking(ranking.query_id, sort_entries(entries), Stage.QE)
