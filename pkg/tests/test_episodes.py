"""Dataset synthesis, feature-file round trips, and episode sampling."""

import math

import numpy as np
import pytest

from protoflow import episodes as ep
from protoflow.errors import CapacityError, InfeasibleGeometryError, ParseError


def test_synth_centers_unit_norm_and_separated():
    ds = ep.synth_dataset(num_classes=12, dim=16, samples_per_class=3,
                          noise_sigma=1e-12, min_center_angle_deg=25.0, seed=5)
    centers = np.stack([ds.features[c][0] for c in ds.class_ids])
    norms = np.linalg.norm(centers, axis=1)
    assert np.allclose(norms, 1.0, atol=1e-9)
    dots = centers @ centers.T
    np.fill_diagonal(dots, -1.0)
    assert dots.max() <= math.cos(math.radians(25.0)) + 1e-9


def test_synth_noise_zero_limit_collapses_to_center():
    ds = ep.synth_dataset(num_classes=3, dim=8, samples_per_class=5,
                          noise_sigma=1e-300, seed=1)
    for c in ds.class_ids:
        rows = ds.features[c]
        assert np.allclose(rows, rows[0], atol=1e-12)


def test_synth_deterministic():
    a = ep.synth_dataset(num_classes=6, dim=16, samples_per_class=4, seed=77)
    b = ep.synth_dataset(num_classes=6, dim=16, samples_per_class=4, seed=77)
    c = ep.synth_dataset(num_classes=6, dim=16, samples_per_class=4, seed=78)
    for cid in a.class_ids:
        assert np.array_equal(a.features[cid], b.features[cid])
    assert not all(np.array_equal(a.features[cid], c.features[cid])
                   for cid in a.class_ids)


def test_synth_class_mean_approaches_center():
    # per-coordinate standard error is noise_sigma / sqrt(n); with n = 1e4
    # the empirical mean should sit within 3*noise_sigma/100 of the center
    sigma = 0.35
    n = 10 ** 4
    ds = ep.synth_dataset(num_classes=2, dim=16, samples_per_class=n,
                          noise_sigma=sigma, seed=31)
    exact = ep.synth_dataset(num_classes=2, dim=16, samples_per_class=1,
                             noise_sigma=1e-300, seed=31)
    for cid in ds.class_ids:
        center = exact.features[cid][0]
        mean = ds.features[cid].mean(axis=0)
        assert np.max(np.abs(mean - center)) < 3.0 * sigma / math.sqrt(n)


def test_synth_infeasible_geometry():
    # 2 dimensions cannot hold 100 directions 25 degrees apart
    with pytest.raises(InfeasibleGeometryError):
        ep.synth_dataset(num_classes=100, dim=2, samples_per_class=1,
                         min_center_angle_deg=25.0, seed=0)


def test_synth_rejects_bad_arguments():
    with pytest.raises(ValueError):
        ep.synth_dataset(num_classes=1, dim=4, samples_per_class=1)
    with pytest.raises(ValueError):
        ep.synth_dataset(num_classes=3, dim=1, samples_per_class=1)
    with pytest.raises(ValueError):
        ep.synth_dataset(num_classes=3, dim=4, samples_per_class=1, noise_sigma=0.0)


def test_feature_file_round_trip(tmp_path):
    ds = ep.synth_dataset(num_classes=4, dim=6, samples_per_class=3, seed=9,
                          split="novel")
    path = tmp_path / "feats.csv"
    ep.save_features(ds, path)
    back = ep.load_features(path, split="novel")
    assert back.class_ids == ds.class_ids
    assert back.split == "novel"
    for cid in ds.class_ids:
        assert np.array_equal(back.features[cid], ds.features[cid])


def test_load_features_minimal(tmp_path):
    path = tmp_path / "two.csv"
    path.write_text("# tiny\n0,1.0,0.0\n1,0.0,1.0\n")
    ds = ep.load_features(path)
    assert ds.num_classes == 2 and ds.dim == 2
    assert np.array_equal(ds.features[0], [[1.0, 0.0]])


def test_load_features_errors_carry_line_numbers(tmp_path):
    cases = [
        ("0,1.0\nx,2.0\n", 2, "class id"),
        ("0,1.0\n1,oops\n", 2, "non-numeric"),
        ("0,1.0,2.0\n1,3.0\n", 2, "values"),
        ("0,1.0\n1,inf\n", 2, "non-finite"),
        ("justonefield\n", 1, "expected"),
    ]
    for text, lineno, needle in cases:
        path = tmp_path / "bad.csv"
        path.write_text(text)
        with pytest.raises(ParseError) as err:
            ep.load_features(path)
        assert err.value.line == lineno
        assert needle in str(err.value)


def test_load_features_empty_file(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("# nothing here\n\n")
    with pytest.raises(ParseError):
        ep.load_features(path)


@pytest.fixture(scope="module")
def ten_class_dataset():
    return ep.synth_dataset(num_classes=10, dim=16, samples_per_class=20, seed=4)


def test_episode_shapes_and_relabeling(ten_class_dataset):
    epi = ep.sample_episode(ten_class_dataset, n_way=5, k_shot=1, m_query=15,
                            mode="transductive", seed=2)
    assert epi.support_features.shape == (5, 16)
    assert epi.query_features.shape == (75, 16)
    assert np.array_equal(np.unique(epi.support_labels), np.arange(5))
    assert np.array_equal(np.unique(epi.query_labels), np.arange(5))
    assert len(set(epi.class_ids)) == 5
    assert epi.m_query == 15
    # relabeling is a bijection onto the sampled dataset classes
    for label, cid in enumerate(epi.class_ids):
        rows = epi.support_features[epi.support_labels == label]
        pool = ten_class_dataset.features[cid]
        for row in rows:
            assert any(np.array_equal(row, p) for p in pool)


def test_episode_disjoint_support_query(ten_class_dataset):
    for seed in range(25):
        epi = ep.sample_episode(ten_class_dataset, n_way=4, k_shot=3, m_query=5,
                                seed=seed)
        for k in range(epi.n_way):
            s = set(epi.support_indices[k].tolist())
            q = set(epi.query_indices[k].tolist())
            assert len(s) == 3 and len(q) == 5
            assert not (s & q)


def test_episode_exhausting_boundary(ten_class_dataset):
    # k_shot + m_query equal to the class size uses every sample exactly once
    epi = ep.sample_episode(ten_class_dataset, n_way=3, k_shot=15, m_query=5,
                            seed=6)
    for k in range(3):
        used = set(epi.support_indices[k].tolist()) | set(epi.query_indices[k].tolist())
        assert used == set(range(20))


def test_episode_deterministic(ten_class_dataset):
    a = ep.sample_episode(ten_class_dataset, 5, 1, 15, seed=123)
    b = ep.sample_episode(ten_class_dataset, 5, 1, 15, seed=123)
    assert a.class_ids == b.class_ids
    assert np.array_equal(a.support_features, b.support_features)
    assert np.array_equal(a.query_features, b.query_features)


def test_episode_capacity_errors(ten_class_dataset):
    with pytest.raises(CapacityError):
        ep.sample_episode(ten_class_dataset, n_way=11, k_shot=1, m_query=1)
    with pytest.raises(CapacityError):
        ep.sample_episode(ten_class_dataset, n_way=5, k_shot=10, m_query=11)


def test_episode_class_frequency_uniform(ten_class_dataset):
    counts = dict.fromkeys(ten_class_dataset.class_ids, 0)
    trials = 10 ** 4
    rng = np.random.default_rng(55)
    for _ in range(trials):
        epi = ep.sample_episode(ten_class_dataset, n_way=5, k_shot=1, m_query=1,
                                seed=rng)
        for cid in epi.class_ids:
            counts[cid] += 1
    for cid, count in counts.items():
        assert abs(count / trials - 0.5) < 0.02, f"class {cid} frequency off"


def test_episode_rejects_bad_mode(ten_class_dataset):
    with pytest.raises(ValueError):
        ep.sample_episode(ten_class_dataset, 5, 1, 5, mode="sideways", seed=0)
