from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from facedet.dataio import (AnnotationParseError, AnnotationRecord, SizeLaw, WiderDataset, emit_wider_annotations,
                            generate_synthetic_dataset, load_image, parse_wider_annotations, size_subsets,
                            synthetic_records)

FIXTURE = Path(__file__).parent / "data" / "wider_train_head50.txt"


class TestParse:
    def test_single_face(self):
        (rec,) = parse_wider_annotations("img.jpg\n1\n10 20 30 40 0 0 0 0 0 0\n")
        assert rec.path == "img.jpg" and rec.boxes == [(10, 20, 30, 40)]
        assert rec.attributes == [(0, 0, 0, 0, 0, 0)]
        assert rec.xyxy().tolist() == [[10, 20, 40, 60]]

    def test_zero_count_record(self):
        recs = parse_wider_annotations("img.jpg\n0\n0 0 0 0 0 0 0 0 0 0\nnext.jpg\n1\n1 2 3 4 0 0 0 0 0 0\n")
        assert [r.path for r in recs] == ["img.jpg", "next.jpg"]
        assert recs[0].boxes == [] and len(recs[1].boxes) == 1

    def test_zero_count_without_placeholder(self):
        recs = parse_wider_annotations("img.jpg\n0\nnext.jpg\n1\n1 2 3 4 0 0 0 0 0 0\n")
        assert [len(r.boxes) for r in recs] == [0, 1]

    def test_attributes_and_invalid_flag(self):
        (rec,) = parse_wider_annotations("a.jpg\n2\n1 1 5 5 2 1 1 1 2 1 \n3 3 4 4 0 0 0 0 0 0 \n")
        assert rec.attributes[0] == (2, 1, 1, 1, 2, 1)
        assert rec.invalid.tolist() == [True, False]

    @pytest.mark.parametrize("text, line", [
        ("img.jpg\n2\n1 2 3 4 0 0 0 0 0 0\n", 4),
        ("img.jpg\n", 2),
        ("img.jpg\nx\n", 2),
        ("img.jpg\n1\n1 2 3 4 0 0\n", 3),
        ("img.jpg\n1\n1 2 3 -4 0 0 0 0 0 0\n", 3),
        ("img.jpg\n1\n1 2 3 4 3 0 0 0 0 0\n", 3),
        ("a.jpg\n1\n1 2 3 4 0 0 0 0 0 0\nb.jpg\n1\n1 2 3 a 0 0 0 0 0 0\n", 6),
    ])
    def test_errors_name_the_line(self, text, line):
        with pytest.raises(AnnotationParseError) as err:
            parse_wider_annotations(text)
        assert err.value.line == line and f"line {line}" in str(err.value)


class TestFixture:
    def test_fifty_records(self):
        recs = parse_wider_annotations(FIXTURE.read_text())
        assert len(recs) == 50
        assert len({r.path for r in recs}) == 50
        assert any(len(r.boxes) == 0 for r in recs)
        assert sum(len(r.boxes) for r in recs) == FIXTURE.read_text().count(" \n") - sum(
            1 for r in recs if not r.boxes)

    def test_reemit_preserves_records(self):
        recs = parse_wider_annotations(FIXTURE.read_text())
        again = parse_wider_annotations(emit_wider_annotations(recs))
        assert again == recs


class TestRoundTrip:
    def test_byte_stable(self):
        text = emit_wider_annotations(synthetic_records(30, (256, 256), (0, 6), seed=2))
        assert emit_wider_annotations(parse_wider_annotations(text)) == text

    def test_one_64px_face(self, tmp_path):
        rec = AnnotationRecord("x/one.png", [(10, 12, 64, 64)], [(0, 0, 0, 0, 0, 0)])
        assert parse_wider_annotations(emit_wider_annotations([rec])) == [rec]

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.tuples(
        st.lists(st.tuples(st.integers(0, 2000), st.integers(0, 2000), st.integers(0, 500), st.integers(0, 500)),
                 max_size=5),
        st.data()), max_size=5))
    def test_parse_emit_identity(self, raw):
        records = []
        for k, (boxes, data) in enumerate(raw):
            attrs = [data.draw(st.tuples(st.integers(0, 2), st.integers(0, 1), st.integers(0, 1),
                                         st.integers(0, 1), st.integers(0, 2), st.integers(0, 1)))
                     for _ in boxes]
            records.append(AnnotationRecord(f"d/{k}.jpg", list(boxes), attrs))
        assert parse_wider_annotations(emit_wider_annotations(records)) == records


class TestSynthetic:
    def test_same_seed_same_bytes(self, tmp_path):
        generate_synthetic_dataset(tmp_path / "a", 3, seed=7)
        generate_synthetic_dataset(tmp_path / "b", 3, seed=7)
        for rel in ("annotations.txt", "subsets.json", "images/synthetic/synthetic_00002.png"):
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
        generate_synthetic_dataset(tmp_path / "c", 3, seed=8)
        assert (tmp_path / "a/annotations.txt").read_bytes() != (tmp_path / "c/annotations.txt").read_bytes()

    def test_sizes_follow_the_law(self):
        law = SizeLaw(8, 128)
        recs = synthetic_records(3000, (1024, 1024), (1, 1), law, seed=0)
        sizes = np.array([np.sqrt(w * h) for r in recs for (_, _, w, h) in r.boxes])
        assert len(sizes) == 3000
        assert stats.kstest(sizes, law.cdf).pvalue > 0.01

    def test_boxes_inside_and_disjoint(self):
        for rec in synthetic_records(50, (128, 96), (1, 6), SizeLaw(4, 60), seed=3):
            b = rec.xyxy()
            assert np.all(b[:, :2] >= 0) and np.all(b[:, 2] <= 128) and np.all(b[:, 3] <= 96)
            for i in range(len(b)):
                for j in range(i + 1, len(b)):
                    ix = min(b[i, 2], b[j, 2]) - max(b[i, 0], b[j, 0])
                    iy = min(b[i, 3], b[j, 3]) - max(b[i, 1], b[j, 1])
                    assert ix <= 0 or iy <= 0

    def test_faces_are_drawn_inside_their_boxes(self, tmp_path):
        recs = generate_synthetic_dataset(tmp_path, 2, (128, 128), (1, 1), SizeLaw(40, 60), seed=4)
        ds = WiderDataset(tmp_path)
        for i, rec in enumerate(recs):
            img = load_image(ds.image_path(i)).astype(int)
            x, y, w, h = rec.boxes[0]
            center = img[y + h // 2 - 2:y + h // 2 + 2, x + w // 2 - 2:x + w // 2 + 2]
            assert center.mean() > 150

    def test_dataset_loads_samples(self, tmp_path):
        recs = generate_synthetic_dataset(tmp_path, 2, seed=1)
        ds = WiderDataset(tmp_path)
        s = ds[1]
        assert len(ds) == 2 and s.image.shape == (128, 128, 3) and s.image.dtype == np.uint8
        assert np.array_equal(s.boxes, recs[1].xyxy())

    def test_data_root_override(self, tmp_path, monkeypatch):
        generate_synthetic_dataset(tmp_path, 1, seed=1)
        monkeypatch.setenv("FACEDET_DATA_ROOT", str(tmp_path))
        assert len(WiderDataset("does/not/exist")) == 1

    def test_size_subsets_are_nested(self):
        recs = synthetic_records(20, (256, 256), (1, 8), SizeLaw(4, 100), seed=5)
        sub = size_subsets(recs)
        for r in recs:
            assert set(sub["easy"][r.path]) <= set(sub["medium"][r.path]) <= set(sub["hard"][r.path])
            assert sub["hard"][r.path] == list(range(len(r.boxes)))
