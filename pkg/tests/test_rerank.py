"""Spatial reranking and query expansion against hand-built datasets.

The fixture maps put a single 1.0 in chosen (channel, cell) slots, so a
max-pooled proposal descriptor is exactly a basis vector and every
cosine in these tests is exactly 0.0 or 1.0.
"""

from __future__ import annotations

import numpy as np
import pytest

from conftest import build_dataset
from ifsearch.descriptors import Descriptor, DescriptorState, l2_normalize
from ifsearch.errors import (
    DimensionMismatch,
    InvariantError,
    MissingClassIndex,
    MissingClassScores,
)
from ifsearch.pooling import Pooling
from ifsearch.rerank import (
    EMPTY_SCORE,
    QeConfig,
    RegionDescriptorCache,
    RerankConfig,
    expand_query,
    query_expansion,
    query_region_descriptor,
    rerank,
    rerank_class_agnostic,
    rerank_class_specific,
)
from ifsearch.search import BuildConfig, Index, RankEntry, Ranking, Stage, build_index
from ifsearch.tensor_store import BoundingBox, QueryDef, RegionProposal


def _cell_map(assignments, channels=3, rows=4, cols=4):
    """All-zero C x H x W map with 1.0 planted at each (ch, row, col)."""
    data = np.zeros((channels, rows, cols), dtype=np.float32)
    for ch, row, col in assignments:
        data[ch, row, col] = 1.0
    return data


BOX_A = BoundingBox(0.0, 0.0, 4.0, 4.0)        # cell (0, 0)
BOX_WIDE = BoundingBox(0.0, 0.0, 8.0, 4.0)     # cells (0, 0..1)
BOX_MISS = BoundingBox(8.0, 8.0, 12.0, 12.0)   # cell (2, 2)
BOX_E2 = BoundingBox(4.0, 4.0, 8.0, 8.0)       # cell (1, 1)
BOX_FAR = BoundingBox(100.0, 100.0, 110.0, 110.0)


def _ca_dataset(tmp_path):
    maps = {
        "img_q": _cell_map([(0, 0, 0)]),
        "img_hit": _cell_map([(0, 0, 0), (1, 2, 2)]),
        "img_miss": _cell_map([(2, 1, 1)]),
        "img_blank": _cell_map([]),
        "img_none": _cell_map([]),
        "img_far": _cell_map([]),
    }
    proposals = {
        "img_q": [RegionProposal(BOX_A)],
        # order matters: the cosine-1 proposals come after a cosine-0 one,
        # and the first of the two maxima must win the localization
        "img_hit": [
            RegionProposal(BOX_MISS),
            RegionProposal(BOX_A),
            RegionProposal(BOX_WIDE),
        ],
        "img_miss": [RegionProposal(BOX_E2)],
        "img_blank": [RegionProposal(BOX_A)],
        "img_none": [],
        "img_far": [RegionProposal(BOX_FAR)],
    }
    queries = [QueryDef("q0", "img_q", BoundingBox(0.0, 0.0, 4.0, 4.0))]
    return build_dataset(tmp_path, maps, proposals=proposals, queries=queries)


def _filtering(entries):
    return Ranking("q0", tuple(RankEntry(i, s) for i, s in entries), Stage.FILTERING)


# ---------------------------------------------------------------------------
# class-agnostic reranking


def test_ca_scores_are_best_proposal_cosines(tmp_path):
    manifest = _ca_dataset(tmp_path)
    query = manifest.query("q0")
    qdesc = query_region_descriptor(query, manifest, Pooling.MAX)
    ranking = _filtering(
        [("img_none", 0.9), ("img_miss", 0.8), ("img_hit", 0.7),
         ("img_far", 0.6), ("img_blank", 0.5)]
    )
    out = rerank_class_agnostic(ranking, qdesc, manifest, RerankConfig(depth_n=5))
    assert out.stage == Stage.CA_SR
    assert out.image_ids == ("img_hit", "img_blank", "img_miss", "img_far", "img_none")
    scores = {e.image_id: e.score for e in out.entries}
    assert scores["img_hit"] == 1.0
    assert scores["img_miss"] == 0.0
    assert scores["img_blank"] == 0.0  # zero descriptor participates at 0
    assert scores["img_far"] == EMPTY_SCORE
    assert scores["img_none"] == EMPTY_SCORE


def test_ca_localization_is_first_maximum(tmp_path):
    manifest = _ca_dataset(tmp_path)
    qdesc = query_region_descriptor(manifest.query("q0"), manifest, Pooling.MAX)
    ranking = _filtering([("img_hit", 0.9)])
    out = rerank_class_agnostic(ranking, qdesc, manifest, RerankConfig(depth_n=1))
    (entry,) = out.entries
    # BOX_A and BOX_WIDE both score 1.0; BOX_A appears first
    assert entry.localization == BOX_A
    boxes = {e.image_id: e.localization for e in rerank_class_agnostic(
        _filtering([("img_miss", 0.9), ("img_none", 0.8)]),
        qdesc, manifest, RerankConfig(depth_n=2),
    ).entries}
    assert boxes["img_miss"] == BOX_E2
    assert boxes["img_none"] is None


def test_ca_tail_keeps_order_and_scores(tmp_path):
    manifest = _ca_dataset(tmp_path)
    qdesc = query_region_descriptor(manifest.query("q0"), manifest, Pooling.MAX)
    ranking = _filtering(
        [("img_none", 0.9), ("img_hit", 0.8), ("img_miss", 0.7), ("img_far", 0.6)]
    )
    out = rerank_class_agnostic(ranking, qdesc, manifest, RerankConfig(depth_n=2))
    # block: img_hit 1.0 above img_none -1; tail untouched below, even
    # though its filtering scores beat the block's new ones numerically
    assert out.image_ids == ("img_hit", "img_none", "img_miss", "img_far")
    assert out.entries[2] == ranking.entries[2]
    assert out.entries[3] == ranking.entries[3]


def test_ca_empty_score_ties_break_by_id(tmp_path):
    manifest = _ca_dataset(tmp_path)
    qdesc = query_region_descriptor(manifest.query("q0"), manifest, Pooling.MAX)
    ranking = _filtering([("img_none", 0.9), ("img_far", 0.8)])
    out = rerank_class_agnostic(ranking, qdesc, manifest, RerankConfig(depth_n=2))
    assert out.image_ids == ("img_far", "img_none")


def test_ca_rejects_reranked_input(tmp_path):
    manifest = _ca_dataset(tmp_path)
    qdesc = query_region_descriptor(manifest.query("q0"), manifest, Pooling.MAX)
    reranked = Ranking("q0", (RankEntry("img_hit", 0.5),), Stage.CA_SR)
    with pytest.raises(InvariantError, match="rerank"):
        rerank_class_agnostic(reranked, qdesc, manifest)


def test_ca_accepts_qe_input(tmp_path):
    manifest = _ca_dataset(tmp_path)
    qdesc = query_region_descriptor(manifest.query("q0"), manifest, Pooling.MAX)
    qe = Ranking("q0", (RankEntry("img_hit", 0.5),), Stage.QE)
    out = rerank_class_agnostic(qe, qdesc, manifest, RerankConfig(depth_n=1))
    assert out.entries[0].score == 1.0


def test_ca_dimension_mismatch(tmp_path):
    manifest = _ca_dataset(tmp_path)
    stubby = Descriptor(np.array([1.0, 0.0]), DescriptorState.L2)
    with pytest.raises(DimensionMismatch):
        rerank_class_agnostic(_filtering([("img_hit", 0.9)]), stubby, manifest)


def test_query_region_descriptor_full_box_equals_image_pooling(tmp_path):
    from ifsearch.pooling import pool_image
    from ifsearch.tensor_store import read_feature_map

    manifest = _ca_dataset(tmp_path)
    full = QueryDef("qq", "img_hit", BoundingBox(0.0, 0.0, 16.0, 16.0))
    desc = query_region_descriptor(full, manifest, Pooling.MAX)
    fmap = read_feature_map(manifest.tensor_path("img_hit"))
    whole = l2_normalize(pool_image(fmap, Pooling.MAX))
    assert np.array_equal(desc.values, whole.values)


# ---------------------------------------------------------------------------
# class-specific reranking


def _cs_dataset(tmp_path, *, strip_scores=()):
    zeros = _cell_map([])
    maps = {i: zeros for i in ("img_q", "img_hit", "img_low", "img_empty")}
    def scored(box, scores):
        return RegionProposal(box, class_scores=scores)
    proposals = {
        "img_q": [scored(BOX_A, [1.0, 0.0])],
        "img_hit": [
            scored(BOX_A, [0.9, 0.2]),
            scored(BOX_E2, [0.1, 0.8]),
            scored(BOX_MISS, [0.05, 0.8]),
        ],
        "img_low": [scored(BOX_A, [0.9, 0.1])],
        "img_empty": [],
    }
    for image_id in strip_scores:
        proposals[image_id] = [RegionProposal(p.box) for p in proposals[image_id]]
    queries = [QueryDef("q0", "img_q", BoundingBox(0.0, 0.0, 4.0, 4.0), class_index=1)]
    return build_dataset(
        tmp_path, maps, proposals=proposals, queries=queries,
        class_names=("background", "target"),
    )


def test_cs_scores_and_localization(tmp_path):
    manifest = _cs_dataset(tmp_path)
    ranking = _filtering([("img_empty", 0.9), ("img_low", 0.8), ("img_hit", 0.7)])
    out = rerank_class_specific(
        ranking, manifest.query("q0"), manifest, RerankConfig(depth_n=3, mode=Stage.CS_SR)
    )
    assert out.stage == Stage.CS_SR
    assert out.image_ids == ("img_hit", "img_low", "img_empty")
    by_id = {e.image_id: e for e in out.entries}
    assert by_id["img_hit"].score == pytest.approx(0.8, abs=1e-7)
    # two proposals reach 0.8 for class 1; the first carries the box
    assert by_id["img_hit"].localization == BOX_E2
    assert by_id["img_low"].score == pytest.approx(0.1, abs=1e-7)
    assert by_id["img_empty"].score == EMPTY_SCORE
    assert by_id["img_empty"].localization is None


def test_cs_tail_preserved(tmp_path):
    manifest = _cs_dataset(tmp_path)
    ranking = _filtering([("img_low", 0.9), ("img_hit", 0.8)])
    out = rerank_class_specific(
        ranking, manifest.query("q0"), manifest, RerankConfig(depth_n=1, mode=Stage.CS_SR)
    )
    assert out.image_ids == ("img_low", "img_hit")
    assert out.entries[1] == ranking.entries[1]


def test_cs_requires_class_index(tmp_path):
    manifest = _cs_dataset(tmp_path)
    unclassed = QueryDef("qx", "img_q", BoundingBox(0.0, 0.0, 4.0, 4.0))
    with pytest.raises(MissingClassIndex):
        rerank_class_specific(_filtering([("img_hit", 0.9)]), unclassed, manifest)


def test_cs_reports_every_image_missing_scores(tmp_path):
    manifest = _cs_dataset(tmp_path, strip_scores=("img_hit", "img_low"))
    ranking = _filtering([("img_hit", 0.9), ("img_low", 0.8)])
    with pytest.raises(MissingClassScores) as err:
        rerank_class_specific(
            ranking, manifest.query("q0"), manifest,
            RerankConfig(depth_n=2, mode=Stage.CS_SR),
        )
    assert "img_hit" in str(err.value) and "img_low" in str(err.value)


# ---------------------------------------------------------------------------
# dispatch and config


def test_rerank_dispatches_by_mode(tmp_path):
    manifest = _ca_dataset(tmp_path)
    query = manifest.query("q0")
    ranking = _filtering([("img_miss", 0.9), ("img_hit", 0.8)])
    via_dispatch = rerank(ranking, query, manifest, RerankConfig(depth_n=2))
    qdesc = query_region_descriptor(query, manifest, Pooling.MAX)
    direct = rerank_class_agnostic(ranking, qdesc, manifest, RerankConfig(depth_n=2))
    assert via_dispatch == direct


def test_rerank_dispatch_class_specific(tmp_path):
    manifest = _cs_dataset(tmp_path)
    ranking = _filtering([("img_low", 0.9), ("img_hit", 0.8)])
    cfg = RerankConfig(depth_n=2, mode=Stage.CS_SR)
    assert rerank(ranking, manifest.query("q0"), manifest, cfg) == rerank_class_specific(
        ranking, manifest.query("q0"), manifest, cfg
    )


def test_rerank_config_validation():
    with pytest.raises(InvariantError):
        RerankConfig(depth_n=0)
    with pytest.raises(InvariantError):
        RerankConfig(mode=Stage.FILTERING)
    with pytest.raises(InvariantError):
        QeConfig(depth_m=0)


def test_region_descriptor_cache_reuses_results(tmp_path):
    manifest = _ca_dataset(tmp_path)
    cache = RegionDescriptorCache(manifest)
    first = cache.region_descriptors("img_hit", Pooling.MAX)
    again = cache.region_descriptors("img_hit", Pooling.MAX)
    assert first is again
    assert cache.proposals("img_hit") is cache.proposals("img_hit")
    model = build_index(manifest, Pooling.SUM).whitening
    other_pooling = cache.region_descriptors("img_hit", Pooling.SUM, model=model)
    assert other_pooling is not first


# ---------------------------------------------------------------------------
# query expansion


def _basis_index():
    return Index(
        image_ids=("x0", "x1", "x2"),
        matrix=np.eye(3),
        pooling=Pooling.MAX,
        whitening=None,
        build_config=BuildConfig(Pooling.MAX, False),
    )


def _qdesc(vector):
    return l2_normalize(np.asarray(vector, dtype=np.float64))


def test_expand_query_is_mean_of_query_and_top_rows():
    index = _basis_index()
    ranking = Ranking(
        "q", (RankEntry("x1", 0.9), RankEntry("x2", 0.8), RankEntry("x0", 0.1)),
        Stage.FILTERING,
    )
    expanded = expand_query(index, ranking, _qdesc([1.0, 0.0, 0.0]), QeConfig(depth_m=2))
    np.testing.assert_allclose(
        expanded.values, np.full(3, 1.0 / np.sqrt(3.0)), rtol=0, atol=1e-15
    )


def test_expand_query_one_hot_fixed_point():
    index = _basis_index()
    ranking = Ranking("q", (RankEntry("x0", 1.0),), Stage.FILTERING)
    expanded = expand_query(index, ranking, _qdesc([1.0, 0.0, 0.0]), QeConfig(depth_m=5))
    # mean of two identical unit vectors renormalizes to itself, bit for bit
    assert np.array_equal(expanded.values, [1.0, 0.0, 0.0])


def test_expand_query_unknown_entry():
    index = _basis_index()
    ranking = Ranking("q", (RankEntry("ghost", 0.9),), Stage.FILTERING)
    with pytest.raises(InvariantError, match="ghost"):
        expand_query(index, ranking, _qdesc([1.0, 0.0, 0.0]))


def test_expand_query_dimension_mismatch():
    index = _basis_index()
    ranking = Ranking("q", (RankEntry("x0", 0.9),), Stage.FILTERING)
    with pytest.raises(DimensionMismatch):
        expand_query(index, ranking, _qdesc([1.0, 0.0]))


def test_query_expansion_searches_whole_index_and_carries_boxes():
    index = _basis_index()
    carried = BoundingBox(1.0, 2.0, 3.0, 4.0)
    ca = Ranking(
        "q",
        (RankEntry("x1", 0.9, carried), RankEntry("x0", 0.4, None)),
        Stage.CA_SR,
    )
    out = query_expansion(index, ca, _qdesc([1.0, 0.0, 0.0]))
    assert out.stage == Stage.QE
    # expanded descriptor is l2(mean(e0, e1, e0)) = (2, 1, 0)/sqrt(5)
    assert out.image_ids == ("x0", "x1", "x2")  # x2 reappears: full re-search
    assert out.entries[0].score == pytest.approx(2.0 / np.sqrt(5.0), abs=1e-12)
    assert out.entries[1].score == pytest.approx(1.0 / np.sqrt(5.0), abs=1e-12)
    assert out.entries[2].score == pytest.approx(0.0, abs=1e-12)
    boxes = {e.image_id: e.localization for e in out.entries}
    assert boxes["x1"] == carried
    assert boxes["x0"] is None and boxes["x2"] is None


def test_query_expansion_then_rerank_round(tmp_path):
    """filtering -> qe -> ca-sr chains without stage complaints."""
    manifest = _ca_dataset(tmp_path)
    from ifsearch.search import build_index, filter_search

    index = build_index(manifest, Pooling.MAX)
    query = manifest.query("q0")
    filtered = filter_search(index, query, manifest)
    from ifsearch.search import query_descriptor

    qdesc = query_descriptor(query, manifest, index)
    expanded = query_expansion(index, filtered, qdesc, QeConfig(depth_m=2))
    assert expanded.stage == Stage.QE
    final = rerank(expanded, query, manifest, RerankConfig(depth_n=3))
    assert final.stage == Stage.CA_SR
    assert final.image_ids[0] in {"img_hit", "img_q"}
