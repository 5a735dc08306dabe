import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from salmod.data import (
    DataError,
    DatasetSpec,
    base_task_spec,
    format_bbox,
    generate,
    ingest_folder,
    make_split,
    parse_bbox,
    read_index,
    subset,
    tight_bbox,
    write_dataset,
    write_index,
)
from salmod.netpbm import write_pnm
from salmod.saliency import save_map

SMALL = DatasetSpec(num_classes=3, samples_per_class=14, height=32, width=32, seed=11)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL)


def test_generate_is_deterministic(small):
    again, plan2 = generate(SMALL)
    samples, plan = small
    assert plan == plan2
    for a, b in zip(samples, again):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert a.bbox == b.bbox and a.label == b.label


def test_class_balance_and_invariants(small):
    samples, _ = small
    labels = np.array([s.label for s in samples])
    assert np.bincount(labels).tolist() == [14, 14, 14]
    for s in samples:
        assert s.image.shape == (3, 32, 32)
        assert 0.0 <= s.image.min() and s.image.max() <= 1.0
        assert s.mask.any()
        assert s.bbox == tight_bbox(s.mask)


def test_split_disjoint_and_sized(small):
    _, plan = small
    for c in plan.classes:
        test, val, pool = set(plan.test[c]), set(plan.val[c]), set(plan.pool[c])
        assert len(test) == 5 and len(val) == 5 and len(pool) == 4
        assert not (test & val) and not (test & pool) and not (val & pool)


def test_subset_nested_and_full_pool(small):
    _, plan = small
    for seed in range(4):
        assert set(subset(plan, 1, seed)) <= set(subset(plan, 3, seed)) <= set(subset(plan, "K", seed))
        assert sorted(subset(plan, 4, seed)) == sorted(i for c in plan.classes for i in plan.pool[c])
    with pytest.raises(DataError):
        subset(plan, 5, 0)


def test_subset_varies_with_seed():
    labels = np.repeat(np.arange(2), 30)
    plan = make_split(labels, 0)
    picks = {tuple(subset(plan, 3, s)) for s in range(5)}
    assert len(picks) > 1


def test_test_and_val_fixed_across_seeds():
    labels = np.repeat(np.arange(3), 20)
    a, b = make_split(labels, 7), make_split(labels, 7)
    assert a.test == b.test and a.val == b.val


def test_validate_names_constraint():
    with pytest.raises(DataError, match="samples_per_class must be >= 11"):
        generate(DatasetSpec(samples_per_class=8))
    with pytest.raises(DataError, match="too small"):
        DatasetSpec(height=8, width=8).validate()
    with pytest.raises(DataError):
        DatasetSpec(subtlety=0.0).validate()


def test_base_task_uses_disjoint_families():
    target = DatasetSpec()
    base = base_task_spec(target)
    assert base.num_classes == 50 and base.samples_per_class == 100
    assert base.family_offset >= target.family_offset + target.families
    assert (base.height, base.width) == (target.height, target.width)


@settings(max_examples=30)
@given(st.lists(st.integers(0, 500), min_size=4, max_size=4))
def test_bbox_text_roundtrip(values):
    assert parse_bbox(format_bbox(values)) == tuple(values)


def test_parse_bbox_rejects_garbage():
    with pytest.raises(DataError):
        parse_bbox("1:2:3")


def test_write_then_ingest_roundtrip(tmp_path, small):
    samples, _ = small
    write_dataset(samples, tmp_path)
    assert len(read_index(tmp_path / "index.csv")) == len(samples)
    loaded = ingest_folder(tmp_path)
    for a, b in zip(samples, loaded):
        np.testing.assert_array_equal(a.image, b.image)
        np.testing.assert_array_equal(a.mask, b.mask)
        assert (a.label, a.bbox, a.name) == (b.label, b.bbox, b.name)


def test_write_dataset_is_byte_identical(tmp_path, small):
    samples, _ = small
    write_dataset(samples, tmp_path / "a")
    write_dataset(samples, tmp_path / "b")
    for f in (tmp_path / "a").rglob("*"):
        if f.is_file():
            assert f.read_bytes() == (tmp_path / "b" / f.relative_to(tmp_path / "a")).read_bytes()


def _tiny_folder(root, labels=(0, 0, 1, 1)):
    (root / "img").mkdir(parents=True)
    rows = []
    for i, lab in enumerate(labels):
        write_pnm(root / "img" / f"{i}.ppm", np.full((10, 12, 3), 40 * i, np.uint8))
        rows.append([f"img/{i}.ppm", str(lab), "", "", ""])
    return rows


def test_ingest_four_images_two_classes(tmp_path):
    write_index(tmp_path / "index.csv", _tiny_folder(tmp_path))
    samples = ingest_folder(tmp_path)
    assert len(samples) == 4
    assert {s.label for s in samples} == {0, 1}
    assert all(s.mask.all() for s in samples)  # no mask or bbox: whole image


def test_ingest_bbox_fallback_resize_and_saliency(tmp_path):
    rows = _tiny_folder(tmp_path)
    rows[0][3] = "2:1:5:4"
    save_map(np.linspace(0, 1, 20).reshape(4, 5), tmp_path / "s.pgm")
    rows[1][4] = "s.pgm"
    write_index(tmp_path / "index.csv", rows)
    samples = ingest_folder(tmp_path, (20, 24))
    assert samples[0].image.shape == (3, 20, 24)
    assert samples[0].bbox == (4, 2, 11, 9)
    assert samples[1].saliency.shape == (20, 24)
    assert samples[2].saliency is None


def test_ingest_errors_name_the_file(tmp_path):
    rows = _tiny_folder(tmp_path)
    (tmp_path / "img" / "2.ppm").write_bytes(b"P6\n12 10\n255\n" + bytes(7))
    write_index(tmp_path / "index.csv", rows)
    with pytest.raises(DataError, match="2.ppm"):
        ingest_folder(tmp_path)


def test_ingest_missing_file_and_label_gap(tmp_path):
    rows = _tiny_folder(tmp_path / "a")
    rows[3][0] = "img/nope.ppm"
    write_index(tmp_path / "a" / "index.csv", rows)
    with pytest.raises(DataError, match="nope.ppm"):
        ingest_folder(tmp_path / "a")
    rows = _tiny_folder(tmp_path / "b", labels=(0, 0, 2, 2))
    write_index(tmp_path / "b" / "index.csv", rows)
    with pytest.raises(DataError, match="gaps"):
        ingest_folder(tmp_path / "b")


def test_missing_index_and_bad_header(tmp_path):
    with pytest.raises(DataError, match="index"):
        ingest_folder(tmp_path)
    (tmp_path / "index.csv").write_text("a,b\n")
    with pytest.raises(DataError, match="header"):
        ingest_folder(tmp_path)
