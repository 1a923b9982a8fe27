"""Acceptance gate: every promised behavior, one printed verdict line each.

Each test computes its own evidence at the stated tolerance and registers
a PASS/FAIL line through the ``acceptance`` fixture; the lines are echoed
in a summary section after the run.  Protocol constants (seed counts,
dataset sizes, depths) are frozen here on purpose -- a green gate must
mean the same thing run to run.
"""

from __future__ import annotations

import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import build_dataset
from oracles import (
    brute_force_ranking,
    pool_max_loop,
    pool_region_loop,
    pool_sum_loop,
    reference_average_precision,
)
from ifsearch.cli import main
from ifsearch.descriptors import l2_normalize, learn_whitening
from ifsearch.evaluation import average_precision, localization_stats, mean_ap
from ifsearch.pooling import GridRegion, Pooling, pool_image, pool_region
from ifsearch.rerank import (
    QeConfig,
    RegionDescriptorCache,
    RerankConfig,
    query_expansion,
    rerank,
)
from ifsearch.search import Stage, build_index, filter_search, query_descriptor
from ifsearch.synth import SynthSpec, generate, load_localizations
from ifsearch.tensor_store import (
    BoundingBox,
    FeatureMap,
    GroundTruth,
    QueryDef,
    read_feature_map,
)


# ---------------------------------------------------------------------------
# pooling equals an independent scalar-loop oracle, bit for bit


def test_pooling_matches_scalar_loop_oracle(acceptance):
    t0 = acceptance.start()
    rng = np.random.default_rng(2024)
    mismatches = 0
    for case in range(500):
        channels = int(rng.integers(1, 9))
        height = int(rng.integers(1, 13))
        width = int(rng.integers(1, 13))
        # integer-valued activations scaled by one power of two: every
        # partial sum is exactly representable, so any summation order
        # must give identical bits and the comparison is fair
        data = rng.integers(0, 256, size=(channels, height, width)).astype(np.float32)
        data *= float(2.0 ** int(rng.integers(-3, 4)))
        fmap = FeatureMap(f"case{case:03d}", data, 16)
        r0 = int(rng.integers(0, height))
        r1 = int(rng.integers(r0 + 1, height + 1))
        c0 = int(rng.integers(0, width))
        c1 = int(rng.integers(c0 + 1, width + 1))
        region = GridRegion(col_start=c0, col_end=c1, row_start=r0, row_end=r1)

        checks = (
            pool_image(fmap, Pooling.SUM).values.tolist() == pool_sum_loop(data),
            pool_image(fmap, Pooling.MAX).values.tolist() == pool_max_loop(data),
            pool_region(fmap, region, Pooling.SUM).values.tolist()
            == pool_region_loop(data, r0, r1, c0, c1, "sum"),
            pool_region(fmap, region, Pooling.MAX).values.tolist()
            == pool_region_loop(data, r0, r1, c0, c1, "max"),
        )
        if not all(checks):
            mismatches += 1
    elapsed = time.perf_counter() - t0
    acceptance.check(
        "pooling vs scalar-loop oracle",
        mismatches == 0 and elapsed < 10.0,
        f"500 (map, region) cases, sum+max, image+region, bit-exact; "
        f"{mismatches} mismatches",
        t0,
    )


# ---------------------------------------------------------------------------
# filtering equals a brute-force cosine ranking, including tie order


def test_filtering_matches_brute_force_ranking(acceptance, tmp_path):
    t0 = acceptance.start()
    rng = np.random.default_rng(31337)
    bad_orders = 0
    worst_score_gap = 0.0
    tie_dbs = 0
    for db in range(50):
        n = int(rng.integers(4, 33))
        channels = int(rng.integers(3, 9))
        height = int(rng.integers(2, 6))
        width = int(rng.integers(2, 6))
        ids = [f"im{db:02d}_{k:02d}" for k in range(n)]
        maps = {
            i: rng.random((channels, height, width)).astype(np.float32) for i in ids
        }
        # engineered duplicates force exact score ties, so the id
        # tie-break itself is under test
        for d in range(int(rng.integers(1, min(4, n // 2 + 1)))):
            maps[ids[-(d + 1)]] = maps[ids[d]].copy()
        manifest = build_dataset(
            tmp_path / f"db{db:02d}",
            maps,
            queries=[QueryDef(f"q{db}", ids[0], BoundingBox(0.0, 0.0, 4.0, 4.0))],
        )
        index = build_index(manifest, Pooling.SUM if db % 2 else Pooling.MAX)
        query = manifest.query(f"q{db}")
        ranking = filter_search(index, query, manifest)
        qdesc = query_descriptor(query, manifest, index)
        expected = brute_force_ranking(
            {i: index.row(i).tolist() for i in ids}, qdesc.values.tolist()
        )
        if list(ranking.image_ids) != [i for i, _ in expected]:
            bad_orders += 1
        worst_score_gap = max(
            worst_score_gap,
            max(
                abs(e.score - s)
                for e, (_, s) in zip(ranking.entries, expected)
            ),
        )
        scores = [e.score for e in ranking.entries]
        if len(set(scores)) < len(scores):
            tie_dbs += 1
    elapsed = time.perf_counter() - t0
    acceptance.check(
        "filtering vs brute-force ranking",
        bad_orders == 0 and worst_score_gap <= 1e-12 and elapsed < 10.0,
        f"50 databases (<=32 images, {tie_dbs} with exact ties): "
        f"{bad_orders} order mismatches, max score gap {worst_score_gap:.1e}",
        t0,
    )


# ---------------------------------------------------------------------------
# whitening: anisotropic sample set to identity; database decorrelated


def test_whitening_identity_and_decorrelation(acceptance):
    t0 = acceptance.start()
    rng = np.random.default_rng(5)
    samples = rng.standard_normal((10_000, 2)) * np.array([2.0, 1.0])
    descriptors = [l2_normalize(row) for row in samples]
    train = np.vstack([d.values for d in descriptors])
    before = np.cov(train, rowvar=False, ddof=1)
    assert before[0, 0] / before[1, 1] > 1.5  # genuinely anisotropic input
    model = learn_whitening(descriptors)
    transformed = (train - model.mean) @ model.projection.T
    identity_err = float(
        np.max(np.abs(np.cov(transformed, rowvar=False, ddof=1) - np.eye(2)))
    )

    spec = SynthSpec(
        seed=11, num_images=80, num_queries=4, channels=24, grid=(6, 8),
        stride=8, instances_per_query=6, signal_gain=8.0,
    )
    with tempfile.TemporaryDirectory() as td:
        manifest, _ = generate(spec, td)
        index = build_index(manifest, Pooling.SUM)
        db = np.vstack(
            [
                l2_normalize(
                    pool_image(read_feature_map(manifest.tensor_path(i)), Pooling.SUM)
                ).values
                for i in manifest.image_ids
            ]
        )
    dbm = index.whitening
    projected = (db - dbm.mean) @ dbm.projection.T
    cov = np.cov(projected, rowvar=False, ddof=1)
    scales = np.linalg.norm(dbm.projection, axis=1)
    eigenvalues = 1.0 / scales**2 - dbm.epsilon
    well = eigenvalues >= 100.0 * dbm.epsilon
    off = np.abs(cov - np.diag(np.diag(cov)))
    off_max = float(off[np.ix_(well, well)].max()) if well.sum() >= 2 else 0.0

    elapsed = time.perf_counter() - t0
    acceptance.check(
        "whitening identity + decorrelation",
        identity_err <= 5e-2 and off_max <= 1e-4 and elapsed < 10.0,
        f"10k diag(4,1) samples: |cov - I| = {identity_err:.1e} (<= 5e-2); "
        f"db off-diagonals {off_max:.1e} (<= 1e-4) on {int(well.sum())}/24 "
        f"well-conditioned directions",
        t0,
    )


# ---------------------------------------------------------------------------
# AP equals an independent reference; ranking-quality invariants hold


def _random_ap_case(rng):
    n = int(rng.integers(5, 40))
    ids = [f"d{i:02d}" for i in range(n)]
    good, ok, junk = set(), set(), set()
    for i in ids:
        roll = rng.random()
        if roll < 0.25:
            good.add(i)
        elif roll < 0.35:
            ok.add(i)
        elif roll < 0.5:
            junk.add(i)
    ranked = list(rng.permutation(ids))
    if rng.random() < 0.3:
        ranked = ranked[: max(2, n - int(rng.integers(0, n)))]
    ranked_junk = [i for i in ranked if i in junk]
    if not ranked_junk:  # every case exercises junk handling
        positives = good | ok
        candidates = [i for i in ranked if i not in positives]
        victim = candidates[0] if candidates else ranked[0]
        good.discard(victim)
        ok.discard(victim)
        junk.add(victim)
    return ranked, good, ok, junk


def test_ap_reference_agreement_and_invariants(acceptance):
    t0 = acceptance.start()
    rng = np.random.default_rng(97)
    worst = 0.0
    violations = []
    for _ in range(1000):
        ranked, good, ok, junk = _random_ap_case(rng)
        truth = GroundTruth("q", frozenset(good), frozenset(ok), frozenset(junk))
        ap = average_precision(ranked, truth)
        worst = max(worst, abs(ap - reference_average_precision(ranked, good, ok, junk)))

        # (1) junk position is irrelevant
        clean = [i for i in ranked if i not in junk]
        junk_ranked = [i for i in ranked if i in junk]
        if average_precision(junk_ranked + clean, truth) != ap:
            violations.append("junk-front")
        if average_precision(clean + junk_ranked, truth) != ap:
            violations.append("junk-back")

        # (2) promoting a positive past a plain negative never hurts
        positives = truth.positives
        swappable = [
            k
            for k in range(len(ranked) - 1)
            if ranked[k] not in positives
            and ranked[k] not in junk
            and ranked[k + 1] in positives
        ]
        if swappable:
            k = swappable[int(rng.integers(0, len(swappable)))]
            promoted = list(ranked)
            promoted[k], promoted[k + 1] = promoted[k + 1], promoted[k]
            if average_precision(promoted, truth) < ap - 1e-15:
                violations.append("promotion")

        # (3) bounded, and 1 exactly when every positive leads
        if not 0.0 <= ap <= 1.0 + 1e-12:
            violations.append("bounds")
        ranked_positives = [i for i in clean if i in positives]
        perfect = (
            bool(positives)
            and len(ranked_positives) == len(positives)
            and all(i in positives for i in clean[: len(positives)])
        )
        if perfect != (ap >= 1.0 - 1e-12 and bool(positives)):
            violations.append("perfection")
    elapsed = time.perf_counter() - t0
    acceptance.check(
        "average precision vs reference",
        worst <= 1e-12 and not violations and elapsed < 10.0,
        f"1000 junk-bearing rankings: max |dAP| = {worst:.1e}; "
        f"invariant violations: {violations if violations else 'none'}",
        t0,
    )


# ---------------------------------------------------------------------------
# retrieval-quality orderings on planted data (shared 12-seed battery)

BATTERY_SEEDS = 12
RERANK_DEPTH = 50
QE_DEPTH = 5


@pytest.fixture(scope="session")
def battery():
    """mAP per stage per seed on mid-gain planted datasets."""
    stage_names = ("filtering", "ca_sr", "ca_sr_sum", "qe_ca", "cs_sr", "qe_cs")
    per_seed = {name: [] for name in stage_names}
    started = time.perf_counter()
    for seed in range(BATTERY_SEEDS):
        spec = SynthSpec(
            seed=seed, num_images=200, num_queries=10, channels=256,
            grid=(12, 15), instances_per_query=10, signal_gain=32.0,
        )
        with tempfile.TemporaryDirectory() as td:
            manifest, gts = generate(spec, td)
            index = build_index(manifest, Pooling.SUM)
            cache = RegionDescriptorCache(manifest)
            queries = {gt.query_id: manifest.query(gt.query_id) for gt in gts}
            filtering = [
                filter_search(index, queries[gt.query_id], manifest) for gt in gts
            ]
            ca = [
                rerank(r, queries[r.query_id], manifest,
                       RerankConfig(depth_n=RERANK_DEPTH), None, cache)
                for r in filtering
            ]
            ca_sum = [
                rerank(r, queries[r.query_id], manifest,
                       RerankConfig(depth_n=RERANK_DEPTH, pooling=Pooling.SUM),
                       index.whitening, cache)
                for r in filtering
            ]
            cs = [
                rerank(r, queries[r.query_id], manifest,
                       RerankConfig(depth_n=RERANK_DEPTH, mode=Stage.CS_SR),
                       None, cache)
                for r in filtering
            ]
            qdescs = {
                qid: query_descriptor(q, manifest, index)
                for qid, q in queries.items()
            }
            qe_ca = [
                query_expansion(index, r, qdescs[r.query_id], QeConfig(QE_DEPTH))
                for r in ca
            ]
            qe_cs = [
                query_expansion(index, r, qdescs[r.query_id], QeConfig(QE_DEPTH))
                for r in cs
            ]
            for name, rankings in (
                ("filtering", filtering), ("ca_sr", ca), ("ca_sr_sum", ca_sum),
                ("qe_ca", qe_ca), ("cs_sr", cs), ("qe_cs", qe_cs),
            ):
                per_seed[name].append(mean_ap(rankings, gts).mean_ap)
    means = {name: float(np.mean(values)) for name, values in per_seed.items()}
    return {
        "per_seed": per_seed,
        "means": means,
        "elapsed": time.perf_counter() - started,
    }


def test_spatial_rerank_improves_filtering_and_max_beats_sum(acceptance, battery):
    t0 = acceptance.start()
    m = battery["means"]
    ok = (
        m["ca_sr"] >= m["filtering"]
        and m["ca_sr"] >= m["ca_sr_sum"]
        and battery["elapsed"] < 120.0
    )
    acceptance.check(
        "region rerank lifts filtering; peak pooling beats additive",
        ok,
        f"{BATTERY_SEEDS} seeds: mAP filtering {m['filtering']:.4f} -> "
        f"rerank {m['ca_sr']:.4f} (additive-pooled rerank {m['ca_sr_sum']:.4f}); "
        f"battery {battery['elapsed']:.1f}s",
        t0,
    )


def test_query_expansion_preserves_or_improves_rerank(acceptance, battery):
    t0 = acceptance.start()
    m = battery["means"]
    ok = m["qe_ca"] >= m["ca_sr"] and battery["elapsed"] < 120.0
    acceptance.check(
        "query expansion after rerank",
        ok,
        f"{BATTERY_SEEDS} seeds: mAP rerank {m['ca_sr']:.4f} -> "
        f"+expansion {m['qe_ca']:.4f}",
        t0,
    )


def test_class_scores_lift_filtering_and_expanded_pipeline(acceptance, battery):
    t0 = acceptance.start()
    m = battery["means"]
    ok = (
        m["cs_sr"] > m["filtering"]
        and m["qe_cs"] >= m["qe_ca"]
        and battery["elapsed"] < 120.0
    )
    acceptance.check(
        "class-score rerank lifts filtering; +expansion tops appearance path",
        ok,
        f"{BATTERY_SEEDS} seeds: mAP filtering {m['filtering']:.4f} -> "
        f"class-score rerank {m['cs_sr']:.4f}; expanded {m['qe_cs']:.4f} vs "
        f"appearance-path expanded {m['qe_ca']:.4f}",
        t0,
    )


# ---------------------------------------------------------------------------
# predicted boxes land on the planted ones


def test_localization_recovers_planted_boxes(acceptance):
    t0 = acceptance.start()
    spec = SynthSpec(
        seed=0, num_images=200, num_queries=10, channels=256,
        grid=(24, 30), instances_per_query=10, signal_gain=64.0,
    )
    with tempfile.TemporaryDirectory() as td:
        manifest, gts = generate(spec, td)
        locs = load_localizations(Path(td) / "localizations.json")
        index = build_index(manifest, Pooling.SUM)
        cache = RegionDescriptorCache(manifest)
        rankings = []
        for gt in gts:
            query = manifest.query(gt.query_id)
            filtered = filter_search(index, query, manifest)
            rankings.append(
                rerank(filtered, query, manifest,
                       RerankConfig(depth_n=200), None, cache)
            )
        stats = localization_stats(rankings, gts, locs, iou_threshold=0.5)
    elapsed = time.perf_counter() - t0
    acceptance.check(
        "localization accuracy",
        stats.accuracy >= 0.9 and elapsed < 60.0,
        f"{stats.hits}/{stats.total} planted boxes recovered at IoU >= 0.5 "
        f"({stats.accuracy:.1%}, need >= 90%)",
        t0,
    )


# ---------------------------------------------------------------------------
# byte-identical reruns; bit-stable across thread counts


def test_pipeline_determinism_and_thread_stability(acceptance, tmp_path):
    t0 = acceptance.start()
    ds = tmp_path / "ds"
    assert main([
        "synth", "--seed", "1", "--out", str(ds),
        "--num-images", "60", "--num-queries", "5", "--channels", "32",
        "--grid", "10", "12", "--stride", "16", "--instances", "8",
        "--signal-gain", "16", "--proposals", "8",
    ]) == 0

    def run(out_dir, threads):
        code = main([
            "pipeline", "--manifest", str(ds / "manifest.json"),
            "--out", str(out_dir), "--stages", "filtering,ca-sr,qe",
            "--depth-n", "30", "--depth-m", "5",
            "--gt", str(ds / "gt"),
            "--localizations", str(ds / "localizations.json"),
            "--no-figures", "--threads", str(threads),
        ])
        assert code == 0
        names = (
            "index.ifsi", "rankings_filtering.tsv", "rankings_ca-sr.tsv",
            "rankings_qe.tsv", "report.tsv", "report.json",
        )
        return {n: (out_dir / n).read_bytes() for n in names}

    first = run(tmp_path / "run_a", 1)
    second = run(tmp_path / "run_b", 1)
    four = run(tmp_path / "run_t4", 4)
    eight = run(tmp_path / "run_t8", 8)
    repeat_ok = first == second
    thread_ok = first == four == eight
    acceptance.check(
        "pipeline determinism",
        repeat_ok and thread_ok,
        f"seed-1 pipeline twice byte-identical: {repeat_ok}; "
        f"threads 1/4/8 bit-identical: {thread_ok} "
        f"({len(first)} artifacts compared)",
        t0,
    )
