"""Shared fixtures and the acceptance summary table."""

from __future__ import annotations

import re

import numpy as np
import pytest

from fetaliqa.data import Dataset, Label, Slice
from fetaliqa.synth import SynthConfig, generate_synthetic


@pytest.fixture(scope="session")
def small_dataset() -> Dataset:
    """Fully labeled 4-stack synthetic set, shared read-only across tests."""
    return generate_synthetic(
        SynthConfig(n_stacks=4, slices_per_stack=12, image_size=32, seed=7)
    )


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.default_rng(0)


def make_slices(pixels_list, stack_id="s0"):
    return [
        Slice(pixels=np.asarray(p, dtype=np.float32), stack_id=stack_id, slice_index=i)
        for i, p in enumerate(pixels_list)
    ]


def tiny_dataset(rng, n_labeled=12, n_unlabeled=8, size=8, n_stacks=2) -> Dataset:
    """Random-pixel dataset for plumbing tests (no structure to learn)."""
    ds = Dataset(split="train")
    labels = [Label(i % 3) for i in range(n_labeled)]
    for i in range(n_labeled):
        s = Slice(
            pixels=rng.random((size, size)).astype(np.float32),
            stack_id=f"st{i % n_stacks}",
            slice_index=i,
        )
        ds.labeled.append((s, labels[i]))
    for j in range(n_unlabeled):
        s = Slice(
            pixels=rng.random((size, size)).astype(np.float32),
            stack_id=f"st{j % n_stacks}",
            slice_index=n_labeled + j,
        )
        ds.unlabeled.append(s)
    return ds


def full_roi_masks(dataset: Dataset) -> dict[str, np.ndarray]:
    size = dataset.image_size
    return {sid: np.ones((size, size), dtype=bool) for sid in dataset.stack_ids()}


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One PASS/FAIL line per acceptance criterion, when those tests ran."""
    rows: dict[int, tuple[str, str]] = {}
    for outcome, shown in (("passed", "PASS"), ("failed", "FAIL"), ("error", "ERROR")):
        for rep in terminalreporter.stats.get(outcome, []):
            if outcome != "error" and getattr(rep, "when", None) != "call":
                continue
            m = re.search(r"::test_criterion_(\d+)_(\w+)", getattr(rep, "nodeid", ""))
            if m:
                rows[int(m.group(1))] = (m.group(2), shown)
    if not rows:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(rows):
        name, shown = rows[n]
        terminalreporter.write_line(f"criterion {n} ({name.replace('_', ' ')}): {shown}")
