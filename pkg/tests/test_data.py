"""Dataset containers, image round trips, and the manifest format."""

from __future__ import annotations

import numpy as np
import pytest

from fetaliqa.data import (
    MANIFEST_HEADER,
    Dataset,
    Label,
    Slice,
    group_by_stack,
    load_image,
    load_manifest,
    save_image,
    save_manifest,
    with_labeled_budget,
)
from fetaliqa.errors import ManifestError


def grid_pixels(rng, size):
    # on the 16-bit grid, so PNG round trips are exact
    q = np.round(rng.random((size, size)) * 65535.0) / 65535.0
    return q.astype(np.float32)


def make_dataset(rng, n_labeled=6, n_unlabeled=3, size=8):
    ds = Dataset(split="train")
    for i in range(n_labeled):
        s = Slice(
            pixels=grid_pixels(rng, size),
            stack_id=f"st{i % 2}", slice_index=i,
        )
        ds.labeled.append((s, Label(i % 3)))
    for j in range(n_unlabeled):
        s = Slice(
            pixels=grid_pixels(rng, size),
            stack_id="st0", slice_index=100 + j,
        )
        ds.unlabeled.append(s)
    return ds


class TestLabels:
    def test_index_mapping_is_fixed(self):
        assert int(Label.D) == 0
        assert int(Label.N) == 1
        assert int(Label.W) == 2
        assert Label["D"] is Label.D


class TestDatasetContainer:
    def test_counts_and_size(self, rng):
        ds = make_dataset(rng)
        assert ds.n_labeled == 6
        assert ds.n_total == 9
        assert ds.image_size == 8
        assert ds.stack_ids() == {"st0", "st1"}

    def test_empty_dataset(self):
        ds = Dataset()
        assert ds.n_total == 0 and ds.image_size == 0
        ds.validate()

    def test_validate_rejects_out_of_range(self, rng):
        ds = make_dataset(rng)
        ds.labeled[0][0].pixels[0, 0] = 1.5
        with pytest.raises(ValueError, match="outside"):
            ds.validate()

    def test_validate_rejects_mixed_sizes(self, rng):
        ds = make_dataset(rng)
        ds.unlabeled.append(Slice(np.zeros((4, 4), np.float32), "st9", 0))
        with pytest.raises(ValueError, match="spatial size"):
            ds.validate()

    def test_group_by_stack_sorted(self, rng):
        ds = make_dataset(rng)
        groups = group_by_stack(ds)
        assert set(groups) == {"st0", "st1"}
        for entries in groups.values():
            idx = [s.slice_index for s, _ in entries]
            assert idx == sorted(idx)
        # unlabeled slices carry None
        assert any(lab is None for _, lab in groups["st0"])


class TestImageRoundTrip:
    def test_sixteen_bit_grid_is_exact(self, tmp_path, rng):
        pixels = np.round(rng.random((12, 12)) * 65535) / 65535
        path = tmp_path / "img.png"
        save_image(path, pixels)
        back = load_image(path)
        np.testing.assert_allclose(back, pixels.astype(np.float32), atol=1e-9)

    def test_extremes_survive(self, tmp_path):
        pixels = np.array([[0.0, 1.0], [1.0, 0.0]])
        path = tmp_path / "x.png"
        save_image(path, pixels)
        np.testing.assert_array_equal(load_image(path), pixels.astype(np.float32))

    def test_rejects_out_of_range(self, tmp_path):
        with pytest.raises(ValueError):
            save_image(tmp_path / "bad.png", np.array([[1.2]]))

    def test_loads_eight_bit(self, tmp_path):
        from PIL import Image

        arr = np.arange(256, dtype=np.uint8).reshape(16, 16)
        Image.fromarray(arr, mode="L").save(tmp_path / "l.png")
        back = load_image(tmp_path / "l.png")
        np.testing.assert_allclose(back, arr / 255.0, atol=1e-7)


class TestManifestRoundTrip:
    def test_save_load_identity(self, tmp_path, rng):
        ds = make_dataset(rng)
        written = save_manifest(ds, tmp_path / "train.csv")
        assert written[0] == tmp_path / "train.csv"
        assert len(written) == 1 + ds.n_total
        back = load_manifest(tmp_path / "train.csv")
        assert back.split == "train"
        assert back.n_labeled == ds.n_labeled
        assert len(back.unlabeled) == len(ds.unlabeled)
        for (s1, l1), (s2, l2) in zip(ds.labeled, back.labeled):
            assert (s1.stack_id, s1.slice_index, l1) == (s2.stack_id, s2.slice_index, l2)
            np.testing.assert_array_equal(s1.pixels, s2.pixels)

    def test_split_inferred_from_filename(self, tmp_path, rng):
        ds = make_dataset(rng, n_labeled=2, n_unlabeled=0)
        save_manifest(ds, tmp_path / "val.csv")
        assert load_manifest(tmp_path / "val.csv").split == "val"
        save_manifest(ds, tmp_path / "whatever.csv")
        assert load_manifest(tmp_path / "whatever.csv").split == "train"
        assert load_manifest(tmp_path / "whatever.csv", split="test").split == "test"

    def test_missing_file_raises_filenotfound(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_manifest(tmp_path / "nope.csv")

    def test_bad_header_reports_line_one(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text("a,b,c\n")
        with pytest.raises(ManifestError, match="line 1"):
            load_manifest(p)

    def test_unknown_label_reports_line(self, tmp_path, rng):
        ds = make_dataset(rng, n_labeled=2, n_unlabeled=0)
        p = tmp_path / "m.csv"
        save_manifest(ds, p)
        text = p.read_text().replace("N", "Q", 1)
        p.write_text(text)
        with pytest.raises(ManifestError, match="unknown label"):
            load_manifest(p)

    def test_missing_image_reports_line(self, tmp_path, rng):
        ds = make_dataset(rng, n_labeled=2, n_unlabeled=0)
        p = tmp_path / "m.csv"
        written = save_manifest(ds, p)
        written[1].unlink()
        with pytest.raises(ManifestError, match="missing"):
            load_manifest(p)

    def test_wrong_field_count_reports_line(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(",".join(MANIFEST_HEADER) + "\nimages/a.png,s0,3\n")
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(p)

    def test_bad_slice_index_reports_line(self, tmp_path):
        p = tmp_path / "m.csv"
        p.write_text(",".join(MANIFEST_HEADER) + "\nimages/a.png,s0,xx,D\n")
        with pytest.raises(ManifestError, match="slice_index"):
            load_manifest(p)


class TestLabeledBudget:
    def test_counts_and_label_drop(self, rng):
        ds = make_dataset(rng, n_labeled=6, n_unlabeled=3)
        out = with_labeled_budget(ds, 2, seed=1)
        assert out.n_labeled == 2
        assert len(out.unlabeled) == 7  # 4 demoted + 3 original
        assert out.n_total == ds.n_total

    def test_unlabeled_subsample(self, rng):
        ds = make_dataset(rng, n_labeled=6, n_unlabeled=3)
        out = with_labeled_budget(ds, 2, seed=1, n_unlabeled=5)
        assert out.n_labeled == 2 and len(out.unlabeled) == 5

    def test_deterministic_given_seed(self, rng):
        ds = make_dataset(rng, n_labeled=8, n_unlabeled=0)
        a = with_labeled_budget(ds, 3, seed=5)
        b = with_labeled_budget(ds, 3, seed=5)
        ka = [(s.stack_id, s.slice_index) for s, _ in a.labeled]
        kb = [(s.stack_id, s.slice_index) for s, _ in b.labeled]
        assert ka == kb
        c = with_labeled_budget(ds, 3, seed=6)
        kc = [(s.stack_id, s.slice_index) for s, _ in c.labeled]
        assert ka != kc  # different seed reshuffles (8 choose 3, overwhelmingly)

    def test_kept_labels_match_source(self, rng):
        ds = make_dataset(rng, n_labeled=10, n_unlabeled=0)
        out = with_labeled_budget(ds, 4, seed=2)
        source = {(s.stack_id, s.slice_index): lab for s, lab in ds.labeled}
        for s, lab in out.labeled:
            assert source[(s.stack_id, s.slice_index)] is lab

    def test_out_of_range_rejected(self, rng):
        ds = make_dataset(rng, n_labeled=4, n_unlabeled=0)
        with pytest.raises(ValueError):
            with_labeled_budget(ds, 5)
        with pytest.raises(ValueError):
            with_labeled_budget(ds, -1)
        with pytest.raises(ValueError):
            with_labeled_budget(ds, 2, n_unlabeled=10)
