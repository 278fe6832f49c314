import numpy as np
import pytest

from scclab import datasets


def test_zero_spread_samples_sit_on_centers():
    ds = datasets.generate_clusters(num_classes=2, per_class=1, dim=2, spread=0.0, seed=7)
    centers = datasets.class_centers(2, 2, seed=7)
    assert len(ds) == 2
    assert np.array_equal(ds.features, centers)


def test_generate_counts_and_clean_labels():
    ds = datasets.generate_clusters(num_classes=5, per_class=400, dim=16, spread=1.0, seed=1)
    assert len(ds) == 2000
    assert np.array_equal(ds.web_labels, ds.true_labels)
    assert np.array_equal(ds.ids, np.arange(2000))
    assert np.array_equal(np.bincount(ds.true_labels), np.full(5, 400))


def test_generate_is_deterministic():
    a = datasets.generate_clusters(num_classes=3, per_class=100, dim=8, spread=0.5, seed=3)
    b = datasets.generate_clusters(num_classes=3, per_class=100, dim=8, spread=0.5, seed=3)
    assert a == b


def test_train_test_split_matches_plain_generation():
    train, test = datasets.generate_train_test(3, 50, 20, dim=8, spread=0.4, seed=11)
    plain = datasets.generate_clusters(3, 50, dim=8, spread=0.4, seed=11)
    assert train == plain
    assert len(test) == 60
    # disjoint draws: no test row equals any train row
    assert not any((test.features[i] == train.features).all(axis=1).any()
                   for i in range(len(test)))


def test_generate_rejects_bad_arguments():
    with pytest.raises(ValueError):
        datasets.generate_clusters(1, 10, 4, 0.5, 0)
    with pytest.raises(ValueError):
        datasets.generate_clusters(3, 0, 4, 0.5, 0)
    with pytest.raises(ValueError):
        datasets.generate_clusters(3, 10, 1, 0.5, 0)
    with pytest.raises(ValueError):
        datasets.generate_clusters(8, 10, 4, 0.5, 0)  # more classes than dims


def test_inject_noise_rate_zero_is_identity():
    ds = datasets.generate_clusters(4, 30, 8, 0.5, seed=2)
    noisy = datasets.inject_noise(ds, "uniform", 0.0, seed=5)
    assert np.array_equal(noisy.web_labels, ds.web_labels)
    assert noisy.flip_count() == 0


def test_inject_noise_exact_flip_count():
    ds = datasets.generate_clusters(5, 400, 16, 1.0, seed=1)
    noisy = datasets.inject_noise(ds, "uniform", 0.52, seed=9)
    assert noisy.flip_count() == round(0.52 * 2000) == 1040
    # only web labels change
    assert np.array_equal(noisy.features, ds.features)
    assert np.array_equal(noisy.true_labels, ds.true_labels)
    assert len(noisy) == len(ds)


def test_uniform_noise_two_classes_flips_to_the_other():
    ds = datasets.generate_clusters(2, 50, 4, 0.5, seed=4)
    noisy = datasets.inject_noise(ds, "uniform", 0.3, seed=6)
    flipped = noisy.web_labels != noisy.true_labels
    assert flipped.sum() == round(0.3 * 100)
    assert np.array_equal(noisy.web_labels[flipped], 1 - noisy.true_labels[flipped])


def test_class_conditional_noise_uses_one_target_per_class():
    ds = datasets.generate_clusters(5, 200, 8, 0.5, seed=8)
    noisy = datasets.inject_noise(ds, "class_conditional", 0.5, seed=8)
    flipped = np.flatnonzero(noisy.web_labels != noisy.true_labels)
    assert flipped.size == 500
    seen = {}
    for i in flipped:
        c = int(noisy.true_labels[i])
        target = int(noisy.web_labels[i])
        assert target != c
        assert seen.setdefault(c, target) == target


def test_neighborhood_noise_inherits_neighbor_web_label():
    ds = datasets.generate_clusters(3, 40, 6, 0.3, seed=12)
    noisy = datasets.inject_noise(ds, "neighborhood", 0.25, seed=13)
    flipped = np.flatnonzero(noisy.web_labels != noisy.true_labels)
    assert flipped.size == round(0.25 * 120)
    for i in flipped:
        # the inherited label is some other class that actually exists nearby
        assert noisy.web_labels[i] != noisy.true_labels[i]
        assert 0 <= noisy.web_labels[i] < 3


def test_neighborhood_noise_picks_the_nearest_other_class():
    # brute-force oracle on a small instance
    ds = datasets.generate_clusters(3, 15, 4, 0.5, seed=21)
    noisy = datasets.inject_noise(ds, "neighborhood", 0.4, seed=22)
    flipped = np.flatnonzero(noisy.web_labels != noisy.true_labels)
    for i in flipped:
        best, best_d = None, np.inf
        for j in range(len(ds)):
            if ds.true_labels[j] == ds.true_labels[i]:
                continue
            dist = float(np.sum((ds.features[j] - ds.features[i]) ** 2))
            if dist < best_d:
                best, best_d = j, dist
        assert noisy.web_labels[i] == ds.web_labels[best]


def test_inject_noise_rejects_rate_one():
    ds = datasets.generate_clusters(2, 5, 4, 0.5, seed=1)
    with pytest.raises(ValueError):
        datasets.inject_noise(ds, "uniform", 1.0, seed=1)
    with pytest.raises(ValueError):
        datasets.inject_noise(ds, "nope", 0.1, seed=1)


def test_verification_set_all_correct_without_noise():
    ds = datasets.generate_clusters(4, 20, 8, 0.5, seed=3)
    vs = datasets.build_verification_set(ds, per_class=10, seed=4)
    assert len(vs) == 40
    assert np.all(vs.v == 1)


def test_verification_set_counts_scale_with_classes():
    ds = datasets.generate_clusters(10, 60, 16, 0.5, seed=5)
    vs = datasets.build_verification_set(ds, per_class=50, seed=6)
    assert len(vs) == 500


def test_verification_set_full_scale_accounting():
    # 250 classes x 50 entries each = 12500, the full-scale benchmark count
    n_classes, per = 250, 50
    labels = np.repeat(np.arange(n_classes), per)
    ds = datasets.SyntheticDataset(
        features=np.zeros((len(labels), 2)),
        web_labels=labels, true_labels=labels.copy(),
        ids=np.arange(len(labels)), num_classes=n_classes,
    )
    vs = datasets.build_verification_set(ds, per_class=per, seed=9)
    assert len(vs) == 12500
    assert len(np.unique(vs.ids)) == 12500


def test_verification_set_mean_tracks_noise_rate():
    ds = datasets.generate_clusters(5, 400, 8, 0.5, seed=7)
    noisy = datasets.inject_noise(ds, "uniform", 0.4, seed=8)
    vs = datasets.build_verification_set(noisy, per_class=300, seed=9)
    # direct count on the generated set
    assert abs(np.mean(vs.v) - 0.6) < 0.05


def test_verification_values_recomputable_from_dataset():
    ds = datasets.generate_clusters(4, 50, 8, 0.5, seed=10)
    noisy = datasets.inject_noise(ds, "uniform", 0.3, seed=11)
    vs = datasets.build_verification_set(noisy, per_class=20, seed=12)
    by_id = {int(i): k for k, i in enumerate(noisy.ids)}
    for sid, v in zip(vs.ids, vs.v):
        row = by_id[int(sid)]
        assert v == int(noisy.web_labels[row] == noisy.true_labels[row])


def test_verification_set_insufficient_samples():
    ds = datasets.generate_clusters(3, 5, 4, 0.5, seed=1)
    with pytest.raises(ValueError, match="class"):
        datasets.build_verification_set(ds, per_class=6, seed=1)


def test_dataset_roundtrip_is_exact(tmp_path):
    ds = datasets.generate_clusters(3, 40, 6, 0.7, seed=14)
    noisy = datasets.inject_noise(ds, "uniform", 0.25, seed=15)
    path = tmp_path / "ds.csv"
    datasets.save_dataset(noisy, path)
    loaded = datasets.load_dataset(path, noise_rate=0.25, noise_model="uniform")
    assert np.array_equal(loaded.features, noisy.features)
    assert np.array_equal(loaded.web_labels, noisy.web_labels)
    assert np.array_equal(loaded.true_labels, noisy.true_labels)
    assert np.array_equal(loaded.ids, noisy.ids)
    assert loaded.num_classes == noisy.num_classes


def test_load_reports_bad_column_count_with_line(tmp_path):
    path = tmp_path / "bad.csv"
    ds = datasets.generate_clusters(2, 3, 4, 0.5, seed=1)
    datasets.save_dataset(ds, path)
    lines = path.read_text().splitlines()
    lines[3] = lines[3].rsplit(",", 1)[0]  # drop a column on data line 3
    path.write_text("\n".join(lines) + "\n")
    with pytest.raises(datasets.SchemaError, match="line 4"):
        datasets.load_dataset(path)


def test_load_counts_rows_and_ids(tmp_path):
    ds = datasets.generate_clusters(5, 400, 16, 1.0, seed=1)
    path = tmp_path / "ds.csv"
    datasets.save_dataset(ds, path)
    assert sum(1 for _ in open(path)) == 2001  # header + 2000 rows
    loaded = datasets.load_dataset(path)
    assert len(loaded) == 2000
    assert np.array_equal(loaded.ids, np.arange(2000))


def test_verification_roundtrip(tmp_path):
    ds = datasets.generate_clusters(3, 30, 6, 0.5, seed=2)
    noisy = datasets.inject_noise(ds, "uniform", 0.2, seed=3)
    vs = datasets.build_verification_set(noisy, per_class=10, seed=4)
    path = tmp_path / "verify.csv"
    datasets.save_verification(vs, path)
    assert datasets.load_verification(path) == vs


def test_sample_row_view():
    ds = datasets.generate_clusters(3, 4, 5, 0.5, seed=6)
    s = ds.sample(7)
    assert s.id == 7
    assert s.web_label == s.true_label == int(ds.true_labels[7])
    assert np.array_equal(s.features, ds.features[7])
