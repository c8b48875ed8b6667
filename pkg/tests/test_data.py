"""Synthetic generation determinism, annotation IO, and split statistics."""

import json

import numpy as np
import pytest

from rgnet.data import (
    compute_stats,
    generate_synthetic,
    load_annotations,
    pair_class,
    save_annotations,
    stats_mapping,
    stats_table,
)
from rgnet.errors import DataError


class TestGeneration:
    def test_same_seed_byte_identical(self):
        a = generate_synthetic(6, 4, seed=7)
        b = generate_synthetic(6, 4, seed=7)
        for x, y in zip(a, b):
            assert x.image.tobytes() == y.image.tobytes()
            assert x.persons == y.persons
            assert x.relations == y.relations

    def test_different_seeds_differ(self):
        a = generate_synthetic(4, 4, seed=1)
        b = generate_synthetic(4, 4, seed=2)
        assert any(x.image.tobytes() != y.image.tobytes() for x, y in zip(a, b))

    def test_labels_symmetric_by_construction(self):
        cum = np.cumsum([0.4, 0.6])
        for ca in range(6):
            for cb in range(6):
                for dist in (0.1, 0.4, 0.9):
                    assert pair_class(ca, cb, dist, cum) == pair_class(cb, ca, dist, cum)

    def test_relations_canonical_and_complete(self):
        ds = generate_synthetic(10, 5, seed=3)
        for img in ds:
            p = img.num_persons
            assert len(img.relations) == p * (p - 1) // 2
            assert all(i < j for i, j, _ in img.relations)

    def test_requested_imbalance_profile_hit(self):
        profile = [0.5, 0.3, 0.2]
        ds = generate_synthetic(3200, 3, profile=profile, seed=11)
        counts = np.zeros(3)
        for img in ds:
            for _, _, c in img.relations:
                counts[c] += 1
        total = counts.sum()
        assert total >= 10000
        marginals = counts / total
        assert np.all(np.abs(marginals - profile) <= 0.02)

    def test_infeasible_profile_rejected(self):
        with pytest.raises(DataError):
            generate_synthetic(2, 3, profile=[0.9, 0.2, 0.2], seed=0)
        with pytest.raises(DataError):
            generate_synthetic(2, 3, profile=[0.5, 0.5], seed=0)

    def test_pixel_range_and_shape(self):
        ds = generate_synthetic(3, 4, seed=5, image_size=32)
        for img in ds:
            assert img.image.shape == (3, 32, 32)
            assert img.image.dtype == np.float32
            assert img.image.min() >= 0.0 and img.image.max() <= 1.0

    def test_bad_args(self):
        with pytest.raises(DataError):
            generate_synthetic(4, 1, seed=0)
        with pytest.raises(DataError):
            generate_synthetic(0, 3, seed=0)
        with pytest.raises(DataError):
            generate_synthetic(1, 3, p_range=(1, 2), seed=0)


class TestAnnotationsIO:
    def test_round_trip_lossless(self, tmp_path):
        ds = generate_synthetic(5, 4, seed=9)
        path = tmp_path / "ann.json"
        save_annotations(ds, path)
        back = load_annotations(path)
        assert len(back) == len(ds)
        for x, y in zip(ds, back):
            assert x.image_id == y.image_id
            assert x.image.tobytes() == y.image.tobytes()
            assert x.persons == y.persons
            assert x.relations == y.relations

    def test_round_trip_with_stored_pixels(self, tmp_path):
        ds = generate_synthetic(2, 3, seed=2)
        path = tmp_path / "ann.json"
        save_annotations(ds, path, store_pixels=True)
        back = load_annotations(path)
        assert back[0].image.tobytes() == ds[0].image.tobytes()
        assert back[0].source.endswith(".npy")

    def test_minimal_valid_file(self, tmp_path):
        path = tmp_path / "one.json"
        img = np.zeros((3, 8, 8), dtype=np.float32)
        np.save(tmp_path / "img0.npy", img)
        path.write_text(json.dumps([
            {"id": "img0", "image": "img0.npy",
             "persons": [[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]],
             "relations": [[0, 1, 2]]}
        ]))
        ds = load_annotations(path)
        assert len(ds) == 1 and ds[0].relations == [(0, 1, 2)]

    def test_self_pair_rejected_naming_image(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([
            {"id": "imgX", "image": "synthetic:0:0:32:2:2:4",
             "persons": [[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]],
             "relations": [[1, 1, 0]]}
        ]))
        with pytest.raises(DataError, match="imgX"):
            load_annotations(path)

    def test_duplicate_pair_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([
            {"id": "imgY", "image": "synthetic:0:0:32:2:2:4",
             "persons": [[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]],
             "relations": [[0, 1, 0], [1, 0, 2]]}
        ]))
        with pytest.raises(DataError, match="duplicate"):
            load_annotations(path)

    def test_out_of_range_pair_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([
            {"id": "imgZ", "image": "synthetic:0:0:32:2:2:4",
             "persons": [[0.1, 0.1, 0.4, 0.4], [0.5, 0.5, 0.9, 0.9]],
             "relations": [[0, 5, 0]]}
        ]))
        with pytest.raises(DataError, match="out of range"):
            load_annotations(path)

    def test_malformed_json_line_reported(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text('[\n{"id": "a",}\n]')
        with pytest.raises(DataError, match="line"):
            load_annotations(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_annotations(tmp_path / "nope.json")

    def test_bad_box_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text(json.dumps([
            {"id": "imgB", "image": "synthetic:0:0:32:2:2:4",
             "persons": [[0.5, 0.1, 0.2, 0.4]],
             "relations": []}
        ]))
        with pytest.raises(DataError, match="imgB"):
            load_annotations(path)


class TestStats:
    def test_hand_case(self):
        ds = generate_synthetic(1, 2, p_range=(3, 3), seed=4)
        ds[0].relations[:] = [(0, 1, 0), (0, 2, 0), (1, 2, 1)]
        stats = compute_stats(ds)
        assert stats.class_counts.tolist() == [2, 1]
        assert stats.unique_relations_hist == {2: 1}
        assert stats.weights.w.tolist() == [3.0, 6.0]

    def test_counts_match_loop_oracle(self):
        ds = generate_synthetic(40, 5, seed=6)
        stats = compute_stats(ds)
        counts = np.zeros(5, dtype=int)
        pmax = 0
        for img in ds:
            pmax = max(pmax, img.num_persons)
            for _, _, c in img.relations:
                counts[c] += 1
        assert np.array_equal(stats.class_counts, counts)
        assert stats.max_persons == pmax
        assert sum(stats.persons_hist.values()) == len(ds)
        assert sum(stats.unique_relations_hist.values()) == len(ds)

    def test_generated_datasets_always_pass_stats(self):
        for seed in range(3):
            ds = generate_synthetic(12, 4, seed=seed)
            stats = compute_stats(ds)
            assert stats.num_images == 12

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            compute_stats([])

    def test_report_renders(self):
        ds = generate_synthetic(8, 3, seed=8)
        stats = compute_stats(ds)
        text = stats_table(stats)
        assert "pairs" in text
        mapping = stats_mapping(stats)
        assert mapping["images"] == 8
