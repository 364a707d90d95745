import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalecam.dataset import (
    AugmentationConfig,
    AugmentParams,
    DatasetManifest,
    ManifestError,
    Record,
    apply_params,
    augment,
    format_manifest,
    generate_synthetic,
    load_image,
    load_manifest,
    parse_manifest,
    patient_kfold_split,
    resize,
    sample_generator,
    shuffle,
    synthetic_oracle,
    train_val_split,
)
from scalecam.tensor import rng


def make_manifest(patients, images_per_patient=2, classes=2):
    records = [
        Record(f"{p}_{i}.pgm", p, j % classes)
        for j, p in enumerate(patients)
        for i in range(images_per_patient)
    ]
    return DatasetManifest(tuple(records), tuple(f"c{k}" for k in range(classes)))


# manifests


def test_parse_three_rows():
    m = parse_manifest("path,patient_id,label\na.pgm,p1,0\nb.pgm,p1,1\nc.pgm,p2,0\n")
    assert len(m) == 3 and m.patients() == ["p1", "p2"] and m.class_histogram() == (2, 1)


def test_named_labels_and_declared_order():
    text = "# classes = normal,covid\npath,patient_id,label\na,p1,covid\nb,p2,normal\n"
    m = parse_manifest(text)
    assert m.class_names == ("normal", "covid") and [r.label for r in m.records] == [1, 0]
    assert parse_manifest(format_manifest(m)) == m


def test_manifest_errors():
    with pytest.raises(ManifestError, match="a.pgm"):
        parse_manifest("path,patient_id,label\na.pgm,p1,0\na.pgm,p2,1\n")
    with pytest.raises(ManifestError, match="unknown label"):
        parse_manifest("# classes = x,y\npath,patient_id,label\na,p1,z\n")
    with pytest.raises(ManifestError, match="patient_id"):
        parse_manifest("path,label\na,0\n")
    with pytest.raises(ManifestError, match="empty field"):
        parse_manifest("path,patient_id,label\na,,0\n")


def test_paper_scale_histogram():
    rows = []
    counts = [(2168, 80), (758, 50), (1247, 80)]
    pid = 0
    for label, (images, patients) in enumerate(counts):
        for i in range(images):
            rows.append(f"img{label}_{i}.png,q{pid + i % patients},{label}")
        pid += patients
    m = parse_manifest("path,patient_id,label\n" + "\n".join(rows))
    assert m.class_histogram() == (2168, 758, 1247)
    assert len(m.patients()) == 210


# resize


def test_resize_examples():
    a = rng(0).random((5, 7))
    assert np.array_equal(resize(a, 5, 7), a)
    assert np.array_equal(resize(np.full((3, 3), 4.2), 11, 5), np.full((11, 5), 4.2))
    out = resize(np.array([[0.0, 0.0], [2.0, 2.0]]), 3, 3)
    assert np.array_equal(out[1], [1.0, 1.0, 1.0])
    assert np.array_equal(out[0], [0, 0, 0]) and np.array_equal(out[2], [2, 2, 2])
    with pytest.raises(ValueError):
        resize(a, 0, 3)


def test_resize_corner_aligned():
    a = rng(1).random((4, 6))
    out = resize(a, 9, 13)
    assert out[0, 0] == a[0, 0] and out[-1, -1] == a[-1, -1] and out[0, -1] == a[0, -1]


# augmentation


def test_disabled_augmentation_is_rescale():
    img = rng(2).integers(0, 256, (1, 8, 8)).astype(np.float64)
    out = augment(img, AugmentationConfig.disabled(), rng(0)).data
    assert np.array_equal(out, img / 255.0)


def test_forced_rotation_180():
    img = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = apply_params(img, AugmentParams(rotation_deg=180.0)).data
    assert np.allclose(out, np.array([[4, 3], [2, 1]]) / 255.0, atol=1e-12)


def test_identity_transform():
    img = rng(3).integers(0, 256, (6, 6)).astype(np.float64)
    p = AugmentParams(rotation_deg=0.0, zoom_rows=1.0, zoom_cols=1.0)
    assert np.max(np.abs(apply_params(img, p).data - img / 255.0)) < 1e-12


def test_flips_and_edge_fill():
    img = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(apply_params(img, AugmentParams(flip_h=True), 1.0).data, img[:, ::-1])
    assert np.array_equal(apply_params(img, AugmentParams(flip_v=True), 1.0).data, img[::-1])
    shifted = apply_params(img, AugmentParams(shift_cols=1.0), 1.0).data
    assert np.array_equal(shifted, np.repeat(img[:, -1:], 3, axis=1))  # nearest-edge fill


@settings(max_examples=300, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_augment_range_and_shape(seed):
    g = rng(seed)
    img = g.integers(0, 256, (1, 9, 7)).astype(np.float64)
    out = augment(img, AugmentationConfig(), g).data
    assert out.shape == img.shape and out.min() >= 0.0 and out.max() <= 1.0


def test_augment_range_bulk():
    # 10^4 random draws in one vectorised sweep of seeds
    img = rng(4).integers(0, 256, (1, 6, 6)).astype(np.float64)
    config = AugmentationConfig()
    for i in range(10_000):
        out = augment(img, config, sample_generator(7, 0, i)).data
        assert out.shape == img.shape and 0.0 <= out.min() and out.max() <= 1.0


def test_sample_generator_is_order_independent():
    img = rng(5).integers(0, 256, (1, 8, 8)).astype(np.float64)
    a = [augment(img, AugmentationConfig(), sample_generator(1, 2, i)).data for i in range(4)]
    b = [augment(img, AugmentationConfig(), sample_generator(1, 2, i)).data for i in reversed(range(4))]
    assert all(np.array_equal(x, y) for x, y in zip(a, reversed(b)))


# splitting


@pytest.mark.parametrize("n, k, size", [(5, 5, 1), (210, 5, 42)])
def test_fold_sizes(n, k, size):
    m = make_manifest([f"p{i:03d}" for i in range(n)])
    plan = patient_kfold_split(m, k, seed=0)
    assert [len(f.test_patients) for f in plan.folds] == [size] * k


def check_split(m, plan):
    everyone = set(m.patients())
    seen = []
    for fold in plan.folds:
        train, test = set(fold.train_patients), set(fold.test_patients)
        assert not train & test
        assert train | test == everyone
        tr = {r.path for r in fold.train_records(m)}
        te = {r.path for r in fold.test_records(m)}
        assert not tr & te and len(tr) + len(te) == len(m)
        seen += fold.test_patients
    assert sorted(seen) == sorted(everyone)


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 60), st.integers(1, 4), st.integers(2, 10), st.integers(0, 2**32 - 1))
def test_leak_freedom(n, images, k, seed):
    k = min(k, n)
    m = make_manifest([f"p{i}" for i in range(n)], images)
    check_split(m, patient_kfold_split(m, k, seed))


def test_split_determinism_and_variety():
    m = make_manifest([f"p{i:02d}" for i in range(30)])
    assert patient_kfold_split(m, 5, 3).to_text() == patient_kfold_split(m, 5, 3).to_text()
    distinct = {patient_kfold_split(m, 5, s).to_text().split("\n", 2)[2] for s in range(100)}
    assert len(distinct) >= 99


def test_split_errors():
    m = make_manifest(["a", "b", "c"])
    with pytest.raises(ValueError, match="exceeds"):
        patient_kfold_split(m, 4, 0)


def test_train_val_split():
    patients = [f"p{i}" for i in range(20)]
    train, val = train_val_split(patients, 0.15, seed=0)
    assert len(val) == 3 and not set(train) & set(val) and sorted(train + val) == sorted(patients)
    train, val = train_val_split(patients, 0.0, seed=0)
    assert val == [] and train == sorted(patients)
    with pytest.raises(ValueError):
        train_val_split(["only"], 0.15)


def test_shuffle():
    assert shuffle(["x"], rng(0)) == ["x"]
    items = list(range(20))
    assert shuffle(items, rng(9)) == shuffle(items, rng(9))
    g = rng(10)
    for _ in range(1000):
        assert sorted(shuffle(items, g)) == items


# synthetic data


def test_generate_synthetic(tmp_path):
    m = generate_synthetic(tmp_path / "a", classes=3, patients_per_class=10, images_per_patient=5, resolution=32, seed=4)
    assert len(m) == 150 and len(m.patients()) == 30 and m.class_histogram() == (50, 50, 50)
    again = generate_synthetic(tmp_path / "b", 3, 10, 5, 32, seed=4)
    for r in m.records:
        assert (tmp_path / "a" / r.path).read_bytes() == (tmp_path / "b" / r.path).read_bytes()
    loaded = load_manifest(tmp_path / "a" / "manifest.csv")
    assert loaded == m == again
    img = load_image(loaded, loaded.records[0])
    assert img.shape == (1, 32, 32)


@pytest.mark.parametrize("classes", [2, 3, 5])
def test_synthetic_oracle_accuracy(tmp_path, classes):
    m = generate_synthetic(tmp_path, classes, 8, 5, 32, seed=classes)
    correct = sum(synthetic_oracle(load_image(m, r).data[0], classes, 32) == r.label for r in m.records)
    assert correct / len(m) >= 0.99


def test_synthetic_validation(tmp_path):
    with pytest.raises(ValueError):
        generate_synthetic(tmp_path, classes=0)
