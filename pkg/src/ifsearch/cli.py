"""Command-line interface.

Subcommands map one-to-one onto the library stages::

    synth     generate a planted synthetic dataset
    validate  check a manifest and every file it references
    build     pool + finalize whole-image descriptors into an index file
    search    rank the database for every manifest query
    rerank    spatially rerank the top of existing rankings
    qe        query-expand existing rankings
    eval      score rankings against ground truth, render report + figures
    pipeline  run build -> search -> [rerank] -> [qe] -> eval end to end

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 success
with an evaluation warning (some query had no positive images).

``pipeline`` writes each intermediate artifact with the same writers the
individual commands use and reads it back before the next stage, so its
output tree is byte-identical to running the commands in sequence.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from .errors import IfsearchError
from .evaluation import mean_ap
from .pooling import Pooling
from .rerank import (
    QeConfig,
    RegionDescriptorCache,
    RerankConfig,
    query_expansion,
    rerank,
)
from .search import (
    Stage,
    build_index,
    filter_search,
    query_descriptor,
    read_index,
    read_rankings,
    write_index,
    write_rankings,
)
from .synth import SynthSpec, generate, load_localizations
from .report import write_report
from .tensor_store import load_ground_truth, load_manifest

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_EVAL_WARNING = 3

ENV_THREADS = "IFSEARCH_THREADS"


class UsageError(Exception):
    """Bad flags, bad stage lists, or malformed environment defaults."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2); we want exit 1
        raise UsageError(f"{message}\n{self.format_usage()}")


def _default_threads() -> int:
    raw = os.environ.get(ENV_THREADS)
    if raw is None:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise UsageError(f"{ENV_THREADS} must be an integer, got {raw!r}") from None
    if value < 1:
        raise UsageError(f"{ENV_THREADS} must be >= 1, got {value}")
    return value


def parse_stages(text: str) -> list[Stage]:
    """Parse a comma-separated stage list into a valid stage sequence.

    The sequence must start with ``filtering``, may contain at most one
    reranking stage and at most one ``qe``, and any rerank must come
    before ``qe``.
    """
    names = [part.strip() for part in text.split(",") if part.strip()]
    if not names:
        raise UsageError("empty stage list")
    stages = []
    for name in names:
        try:
            stages.append(Stage(name))
        except ValueError:
            known = ", ".join(s.value for s in Stage)
            raise UsageError(f"unknown stage '{name}' (known: {known})") from None
    if stages[0] != Stage.FILTERING:
        raise UsageError("stage list must start with 'filtering'")
    if stages.count(Stage.FILTERING) > 1 or stages.count(Stage.QE) > 1:
        raise UsageError("duplicate stage in list")
    reranks = [s for s in stages if s in (Stage.CA_SR, Stage.CS_SR)]
    if len(reranks) > 1:
        raise UsageError("at most one reranking stage allowed")
    if Stage.QE in stages and reranks and stages.index(Stage.QE) < stages.index(reranks[0]):
        raise UsageError("reranking must come before qe")
    return stages


def _add_threads(parser):
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads (default: ${ENV_THREADS} or 1)",
    )


def _add_deterministic(parser):
    parser.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="bit-stable score reductions (default on; off is faster, within 1e-9)",
    )


def _threads(args) -> int:
    value = args.threads if args.threads is not None else _default_threads()
    if value < 1:
        raise UsageError(f"--threads must be >= 1, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ifsearch", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--num-images", type=int, default=SynthSpec.num_images)
    p.add_argument("--num-queries", type=int, default=SynthSpec.num_queries)
    p.add_argument("--channels", type=int, default=SynthSpec.channels)
    p.add_argument("--grid", type=int, nargs=2, metavar=("H", "W"), default=list(SynthSpec.grid))
    p.add_argument("--stride", type=int, default=SynthSpec.stride)
    p.add_argument("--instances", type=int, default=SynthSpec.instances_per_query)
    p.add_argument("--signal-gain", type=float, default=SynthSpec.signal_gain)
    p.add_argument("--noise-scale", type=float, default=SynthSpec.noise_scale)
    p.add_argument("--proposals", type=int, default=SynthSpec.proposals_per_image)
    p.add_argument("--jitter", type=float, default=SynthSpec.proposal_jitter)
    p.add_argument("--sharpness", type=float, default=SynthSpec.class_score_sharpness)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("validate", help="check a manifest and its files")
    p.add_argument("--manifest", required=True)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("build", help="build an index from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pooling", choices=[p.value for p in Pooling], default=Pooling.SUM.value)
    p.add_argument("--out", required=True, help="output index file")
    _add_threads(p)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("search", help="rank the database for every query")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--out", required=True, help="output rankings file")
    p.add_argument("--exclude-query", action="store_true",
                   help="drop each query's own image from its ranking")
    _add_threads(p)
    _add_deterministic(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("rerank", help="spatially rerank the top of rankings")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--rankings", required=True, help="input rankings file")
    p.add_argument("--mode", choices=[Stage.CA_SR.value, Stage.CS_SR.value],
                   default=Stage.CA_SR.value)
    p.add_argument("--depth-n", type=int, default=RerankConfig.depth_n,
                   help="entries rescored from the top")
    p.add_argument("--pooling", choices=[p.value for p in Pooling], default=Pooling.MAX.value,
                   help="region pooling for proposal descriptors")
    p.add_argument("--out", required=True)
    _add_threads(p)
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("qe", help="query-expand rankings and re-search")
    p.add_argument("--manifest", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--rankings", required=True, help="input rankings file")
    p.add_argument("--depth-m", type=int, default=QeConfig.depth_m,
                   help="top entries averaged into the query")
    p.add_argument("--out", required=True)
    _add_deterministic(p)
    p.set_defaults(func=cmd_qe)

    p = sub.add_parser("eval", help="score rankings against ground truth")
    p.add_argument("--rankings", required=True)
    p.add_argument("--gt", required=True, help="ground truth directory")
    p.add_argument("--localizations", default=None,
                   help="true instance boxes (as written by synth)")
    p.add_argument("--out", required=True, help="output report directory")
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("pipeline", help="run the full retrieval protocol")
    p.add_argument("--manifest", required=True)
    p.add_argument("--stages", default="filtering,ca-sr,qe",
                   help="comma list, e.g. filtering,ca-sr,qe")
    p.add_argument("--pooling", choices=[p.value for p in Pooling], default=Pooling.SUM.value,
                   help="index pooling for the filtering stage")
    p.add_argument("--rerank-pooling", choices=[p.value for p in Pooling],
                   default=Pooling.MAX.value)
    p.add_argument("--depth-n", type=int, default=RerankConfig.depth_n)
    p.add_argument("--depth-m", type=int, default=QeConfig.depth_m)
    p.add_argument("--gt", default=None, help="ground truth directory (enables eval)")
    p.add_argument("--localizations", default=None)
    p.add_argument("--figures", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True, help="output directory")
    _add_threads(p)
    _add_deterministic(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = SynthSpec(
        seed=args.seed,
        num_images=args.num_images,
        num_queries=args.num_queries,
        channels=args.channels,
        grid=tuple(args.grid),
        stride=args.stride,
        instances_per_query=args.instances,
        signal_gain=args.signal_gain,
        noise_scale=args.noise_scale,
        proposals_per_image=args.proposals,
        proposal_jitter=args.jitter,
        class_score_sharpness=args.sharpness,
    )
    manifest, _ = generate(spec, args.out)
    print(
        f"synth: {len(manifest.image_ids)} images, {len(manifest.query_defs)} queries, "
        f"seed {spec.seed} -> {args.out}"
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    manifest = load_manifest(args.manifest)
    print(
        f"manifest OK: {len(manifest.image_ids)} images, "
        f"{len(manifest.query_defs)} queries, dim {manifest.feature_dim}"
    )
    return EXIT_OK


def cmd_build(args) -> int:
    manifest = load_manifest(args.manifest)
    index = build_index(manifest, Pooling(args.pooling), threads=_threads(args))
    write_index(index, args.out)
    print(
        f"index: {index.size} images, dim {index.dim}, pooling {index.pooling.value}"
        f"{', whitened' if index.whitening is not None else ''} -> {args.out}"
    )
    return EXIT_OK


def _manifest_queries(manifest):
    if not manifest.query_defs:
        raise IfsearchError("manifest defines no queries")
    return manifest.query_defs


def cmd_search(args) -> int:
    manifest = load_manifest(args.manifest)
    index = read_index(args.index)
    rankings = [
        filter_search(
            index,
            query,
            manifest,
            exclude_query=args.exclude_query,
            deterministic=args.deterministic,
        )
        for query in _manifest_queries(manifest)
    ]
    write_rankings(rankings, args.out)
    print(f"searched {len(rankings)} queries over {index.size} images -> {args.out}")
    return EXIT_OK


def cmd_rerank(args) -> int:
    manifest = load_manifest(args.manifest)
    index = read_index(args.index)
    rankings = read_rankings(args.rankings)
    config = RerankConfig(
        depth_n=args.depth_n, pooling=Pooling(args.pooling), mode=Stage(args.mode)
    )
    model = index.whitening if config.pooling == Pooling.SUM else None
    cache = RegionDescriptorCache(manifest)
    out = [
        rerank(ranking, manifest.query(ranking.query_id), manifest, config, model, cache)
        for ranking in rankings
    ]
    write_rankings(out, args.out)
    print(
        f"reranked top {config.depth_n} of {len(out)} rankings "
        f"({config.mode.value}, {config.pooling.value} pooling) -> {args.out}"
    )
    return EXIT_OK


def cmd_qe(args) -> int:
    manifest = load_manifest(args.manifest)
    index = read_index(args.index)
    rankings = read_rankings(args.rankings)
    config = QeConfig(depth_m=args.depth_m)
    out = []
    for ranking in rankings:
        query = manifest.query(ranking.query_id)
        qdesc = query_descriptor(query, manifest, index)
        out.append(
            query_expansion(
                index, ranking, qdesc, config, deterministic=args.deterministic
            )
        )
    write_rankings(out, args.out)
    print(f"expanded {len(out)} queries (top {config.depth_m} averaged) -> {args.out}")
    return EXIT_OK


def _print_report(report) -> None:
    print(f"stage {report.stage}: mAP {report.mean_ap:.4f} over {len(report.per_query)} queries")
    if report.localization is not None:
        loc = report.localization
        print(
            f"localization: {loc.hits}/{loc.total} boxes at IoU >= {loc.threshold:g} "
            f"({loc.accuracy:.1%})"
        )
    for query_id in report.flagged_queries:
        print(f"warning: query '{query_id}' has no positive images", file=sys.stderr)


def _evaluate(rankings, gt_dir, localizations_path, out_dir, figures) -> int:
    gts = {gt.query_id: gt for gt in load_ground_truth(gt_dir)}
    localizations = (
        load_localizations(localizations_path) if localizations_path else None
    )
    import warnings as _warnings

    with _warnings.catch_warnings():
        _warnings.simplefilter("ignore")  # flagged queries are reported below
        report = mean_ap(rankings, gts, localizations=localizations)
    write_report(report, out_dir, rankings=rankings, ground_truth=gts, figures=figures)
    _print_report(report)
    return EXIT_EVAL_WARNING if report.flagged_queries else EXIT_OK


def cmd_eval(args) -> int:
    rankings = read_rankings(args.rankings)
    return _evaluate(rankings, args.gt, args.localizations, args.out, args.figures)


def cmd_pipeline(args) -> int:
    stages = parse_stages(args.stages)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.manifest)
    threads = _threads(args)

    index_path = out_dir / "index.ifsi"
    index = build_index(manifest, Pooling(args.pooling), threads=threads)
    write_index(index, index_path)
    index = read_index(index_path)
    print(f"pipeline: built index ({index.size} x {index.dim}) -> {index_path}")

    rankings = [
        filter_search(index, query, manifest, deterministic=args.deterministic)
        for query in _manifest_queries(manifest)
    ]
    path = out_dir / "rankings_filtering.tsv"
    write_rankings(rankings, path)
    rankings = read_rankings(path)
    print(f"pipeline: filtering -> {path}")

    cache = RegionDescriptorCache(manifest)
    for stage in stages[1:]:
        if stage in (Stage.CA_SR, Stage.CS_SR):
            config = RerankConfig(
                depth_n=args.depth_n, pooling=Pooling(args.rerank_pooling), mode=stage
            )
            model = index.whitening if config.pooling == Pooling.SUM else None
            rankings = [
                rerank(r, manifest.query(r.query_id), manifest, config, model, cache)
                for r in rankings
            ]
        else:  # Stage.QE
            config = QeConfig(depth_m=args.depth_m)
            rankings = [
                query_expansion(
                    index,
                    r,
                    query_descriptor(manifest.query(r.query_id), manifest, index),
                    config,
                    deterministic=args.deterministic,
                )
                for r in rankings
            ]
        path = out_dir / f"rankings_{stage.value}.tsv"
        write_rankings(rankings, path)
        rankings = read_rankings(path)
        print(f"pipeline: {stage.value} -> {path}")

    if args.gt is not None:
        return _evaluate(rankings, args.gt, args.localizations, out_dir, args.figures)
    return EXIT_OK


# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    try:
        parser = build_parser()
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"ifsearch: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IfsearchError as exc:
        print(f"ifsearch: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"ifsearch: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def entry_point() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry_point()
