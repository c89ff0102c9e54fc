"""Slices, stacks, labels, dataset containers and the on-disk manifest format.

A dataset is a flat collection of 2-D grayscale slices grouped into
acquisition stacks.  Labeled slices carry one of three quality classes:

* ``D`` (0): diagnostic, sharp brain boundaries
* ``N`` (1): non-diagnostic, motion/aliasing artifacts over the brain
* ``W`` (2): no brain in the field of view

On disk a dataset is a CSV manifest plus one grayscale image file per
slice.  The manifest format is::

    relative_image_path,stack_id,slice_index,label

with ``label`` one of ``D``, ``N``, ``W`` or ``UNLABELED``.  Image files are
8-bit or 16-bit grayscale PNGs; intensities are normalized to [0, 1] on
load.  Slices written by this module are quantized to the 16-bit grid, so
a save/load round trip reproduces pixel values exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import ManifestError

UNLABELED = "UNLABELED"
N_CLASSES = 3

MANIFEST_HEADER = ["relative_image_path", "stack_id", "slice_index", "label"]

KNOWN_SPLITS = ("train", "val", "test")


class Label(IntEnum):
    """Slice quality class. The index mapping D=0, N=1, W=2 is fixed."""

    D = 0
    N = 1
    W = 2


@dataclass(eq=False)
class Slice:
    """One grayscale slice.

    ``pixels`` is a square float array with intensities in [0, 1]; all
    slices of a dataset share one spatial size.
    """

    pixels: np.ndarray
    stack_id: str
    slice_index: int


@dataclass(eq=False)
class Dataset:
    """Labeled and unlabeled slices of one split."""

    labeled: list[tuple[Slice, Label]] = field(default_factory=list)
    unlabeled: list[Slice] = field(default_factory=list)
    split: str = "train"

    @property
    def n_labeled(self) -> int:
        return len(self.labeled)

    @property
    def n_total(self) -> int:
        return len(self.labeled) + len(self.unlabeled)

    @property
    def image_size(self) -> int:
        """Side length of the (square) slices; 0 for an empty dataset."""
        for s in self.iter_slices():
            return s.pixels.shape[0]
        return 0

    def iter_slices(self) -> Iterator[Slice]:
        for s, _ in self.labeled:
            yield s
        yield from self.unlabeled

    def stack_ids(self) -> set[str]:
        return {s.stack_id for s in self.iter_slices()}

    def validate(self) -> None:
        """Check the container invariants; raises ValueError on violation."""
        size = None
        for s in self.iter_slices():
            if s.pixels.ndim != 2 or s.pixels.shape[0] != s.pixels.shape[1]:
                raise ValueError(f"slice {s.stack_id}/{s.slice_index} is not square")
            if size is None:
                size = s.pixels.shape
            elif s.pixels.shape != size:
                raise ValueError("slices do not share one spatial size")
            lo, hi = float(s.pixels.min()), float(s.pixels.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(
                    f"slice {s.stack_id}/{s.slice_index} has intensities outside [0, 1]"
                )


def group_by_stack(dataset: Dataset) -> dict[str, list[tuple[Slice, Label | None]]]:
    """Group slices by stack id, ordered by slice index.

    Unlabeled slices carry ``None`` in place of a label.
    """
    stacks: dict[str, list[tuple[Slice, Label | None]]] = {}
    for s, lab in dataset.labeled:
        stacks.setdefault(s.stack_id, []).append((s, lab))
    for s in dataset.unlabeled:
        stacks.setdefault(s.stack_id, []).append((s, None))
    for entries in stacks.values():
        entries.sort(key=lambda e: e[0].slice_index)
    return stacks


# ---------------------------------------------------------------------------
# Image I/O
# ---------------------------------------------------------------------------

def save_image(path: Path | str, pixels: np.ndarray) -> None:
    """Write a [0, 1] float image as a 16-bit grayscale PNG."""
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError("pixel intensities must lie in [0, 1]")
    u16 = np.round(arr * 65535.0).astype(np.uint16)
    Image.fromarray(u16).save(str(path), format="PNG")


def load_image(path: Path | str) -> np.ndarray:
    """Read an 8-bit or 16-bit grayscale image, normalized to [0, 1] float32."""
    with Image.open(str(path)) as img:
        mode = img.mode
        arr = np.asarray(img)
    if mode == "L":
        return (arr.astype(np.float32) / 255.0).astype(np.float32)
    if mode in ("I;16", "I"):
        # Pillow reports 16-bit grayscale PNGs as I;16 or I depending on version.
        return (arr.astype(np.float32) / 65535.0).astype(np.float32)
    raise ManifestError(f"unsupported image mode {mode!r} in {path}")


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def _infer_split(path: Path) -> str:
    return path.stem if path.stem in KNOWN_SPLITS else "train"


def _image_relpath(s: Slice) -> str:
    return f"images/{s.stack_id}/{s.slice_index:03d}.png"


def save_manifest(dataset: Dataset, path: Path | str) -> list[Path]:
    """Write ``dataset`` as a manifest CSV plus one PNG per slice.

    Images go under ``<manifest dir>/images/<stack_id>/``.  Labeled rows
    come first, in their list order, then unlabeled rows.  Returns every
    path written, manifest first.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows: list[tuple[Slice, str]] = [(s, lab.name) for s, lab in dataset.labeled]
    rows += [(s, UNLABELED) for s in dataset.unlabeled]
    written = [path]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for s, label_str in rows:
            rel = _image_relpath(s)
            img_path = path.parent / rel
            img_path.parent.mkdir(parents=True, exist_ok=True)
            save_image(img_path, s.pixels)
            written.append(img_path)
            writer.writerow([rel, s.stack_id, str(s.slice_index), label_str])
    return written


def load_manifest(path: Path | str, split: str | None = None) -> Dataset:
    """Load a manifest CSV written by :func:`save_manifest`.

    ``split`` defaults to the manifest filename stem when that is one of
    ``train``/``val``/``test``, else ``train``.  Raises ``ManifestError``
    with the offending line number for malformed rows, unknown labels, or
    missing image files.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    dataset = Dataset(split=split if split is not None else _infer_split(path))
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}: empty file, expected a header row") from None
        if header != MANIFEST_HEADER:
            raise ManifestError(
                f"{path}, line 1: bad header {header!r}, expected {MANIFEST_HEADER!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ManifestError(
                    f"{path}, line {lineno}: expected 4 fields, got {len(row)}"
                )
            rel, stack_id, idx_str, label_str = row
            try:
                slice_index = int(idx_str)
            except ValueError:
                raise ManifestError(
                    f"{path}, line {lineno}: bad slice_index {idx_str!r}"
                ) from None
            img_path = path.parent / rel
            if not img_path.exists():
                raise ManifestError(
                    f"{path}, line {lineno}: image file missing: {img_path}"
                )
            pixels = load_image(img_path)
            s = Slice(pixels=pixels, stack_id=stack_id, slice_index=slice_index)
            if label_str == UNLABELED:
                dataset.unlabeled.append(s)
            else:
                try:
                    label = Label[label_str]
                except KeyError:
                    raise ManifestError(
                        f"{path}, line {lineno}: unknown label {label_str!r}"
                    ) from None
                dataset.labeled.append((s, label))
    return dataset


# ---------------------------------------------------------------------------
# Labeled-budget helper
# ---------------------------------------------------------------------------

def with_labeled_budget(
    dataset: Dataset,
    n_labeled: int,
    seed: int = 0,
    n_unlabeled: int | None = None,
) -> Dataset:
    """Return a copy keeping ``n_labeled`` labels; the rest become unlabeled.

    The kept labeled slices are drawn uniformly without replacement; the
    demoted ones join the unlabeled pool (labels dropped).  When
    ``n_unlabeled`` is given, the unlabeled pool is subsampled to exactly
    that count.  Selection order is deterministic given ``seed``.
    """
    if not 0 <= n_labeled <= dataset.n_labeled:
        raise ValueError(
            f"n_labeled={n_labeled} outside [0, {dataset.n_labeled}]"
        )
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xB7D]))
    keep = np.sort(rng.permutation(dataset.n_labeled)[:n_labeled])
    keep_set = set(keep.tolist())
    labeled = [dataset.labeled[i] for i in keep]
    unlabeled = [s for i, (s, _) in enumerate(dataset.labeled) if i not in keep_set]
    unlabeled += list(dataset.unlabeled)
    if n_unlabeled is not None:
        if not 0 <= n_unlabeled <= len(unlabeled):
            raise ValueError(
                f"n_unlabeled={n_unlabeled} outside [0, {len(unlabeled)}]"
            )
        pick = np.sort(rng.permutation(len(unlabeled))[:n_unlabeled])
        unlabeled = [unlabeled[i] for i in pick]
    return Dataset(labeled=labeled, unlabeled=unlabeled, split=dataset.split)
