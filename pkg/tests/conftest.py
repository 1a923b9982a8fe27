"""Shared test fixtures: tiny on-disk datasets and the acceptance summary.

``build_dataset`` writes real tensor/proposal/manifest files into a tmp
directory and reloads them through the public loaders, so every test
dataset has passed the same validation the CLI applies.  Acceptance
tests register one line per criterion which is echoed after the run.
"""

from __future__ import annotations

import time
from pathlib import Path

import numpy as np
import pytest

from ifsearch.tensor_store import (
    DatasetManifest,
    FeatureMap,
    load_manifest,
    write_feature_map,
    write_manifest,
    write_proposals,
)


def build_dataset(
    root,
    maps,
    *,
    stride=4,
    queries=(),
    proposals=None,
    class_names=(),
    name="tiny",
) -> DatasetManifest:
    """Write ``{image_id: C x H x W array}`` as a loadable dataset tree."""
    root = Path(root)
    (root / "tensors").mkdir(parents=True, exist_ok=True)
    tensor_paths = {}
    proposal_paths = {}
    for image_id, data in maps.items():
        rel = f"tensors/{image_id}.ifsm"
        write_feature_map(
            FeatureMap(image_id, np.asarray(data, dtype=np.float32), stride),
            root / rel,
        )
        tensor_paths[image_id] = rel
    if proposals:
        (root / "proposals").mkdir(exist_ok=True)
        for image_id, plist in proposals.items():
            rel = f"proposals/{image_id}.ifsp"
            write_proposals(plist, root / rel)
            proposal_paths[image_id] = rel
    manifest = DatasetManifest(
        dataset_name=name,
        image_ids=tuple(maps),
        feature_dim=len(next(iter(maps.values()))),
        stride=stride,
        class_names=tuple(class_names),
        query_defs=tuple(queries),
        tensor_paths=tensor_paths,
        proposal_paths=proposal_paths,
        base_dir=root,
    )
    write_manifest(manifest, root / "manifest.json")
    return load_manifest(root / "manifest.json")


# ---------------------------------------------------------------------------
# acceptance bookkeeping


_ACCEPTANCE: list[tuple[str, bool, str, float]] = []


class AcceptanceLog:
    """Collects per-criterion verdicts; one printed line each at the end."""

    def start(self) -> float:
        return time.perf_counter()

    def check(self, name: str, ok: bool, detail: str, t0: float) -> None:
        _ACCEPTANCE.append((name, bool(ok), detail, time.perf_counter() - t0))
        assert ok, f"{name}: {detail}"


@pytest.fixture(scope="session")
def acceptance():
    return AcceptanceLog()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail, seconds in _ACCEPTANCE:
        status = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"[{status}] {name} ({seconds:.1f}s): {detail}")
