import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from depthforge.synthbench import (DatasetSpec, DomainSpec, apply_domain, build_dataset,
                                   confusion_matrix, evaluate_miou, generate_scene, load_dataset,
                                   read_pfm, read_pgm, save_dataset, write_pfm, write_pgm)


# ------------------------------------------------------------------ scenes


def test_same_seed_same_scene():
    a, b = generate_scene(5), generate_scene(5)
    for x, y in [(a.depth, b.depth), (a.albedo, b.albedo), (a.labels, b.labels)]:
        assert x.tobytes() == y.tobytes()
    assert generate_scene(6).labels.tobytes() != a.labels.tobytes()


@pytest.mark.parametrize("seed", range(8))
def test_scene_invariants(seed):
    K = 6
    s = generate_scene(seed, K=K, image_side=32)
    assert set(np.unique(s.labels)) == set(range(K))
    assert (s.depth > 0).all() and (s.depth <= 1).all()
    assert (s.albedo >= 0).all() and (s.albedo <= 1).all()
    for k in range(1, K):
        assert np.unique(s.depth[s.labels == k]).size == 1


def test_single_primitive_for_two_classes():
    s = generate_scene(3, K=2, image_side=32)
    assert set(np.unique(s.labels)) == {0, 1}
    assert len(np.unique(s.depth[s.labels == 1])) == 1


def test_ground_depth_runs_near_to_far():
    s = generate_scene(1, K=2, image_side=32)
    ground = s.labels == 0
    cols = np.where(ground[0] & ground[-1])[0]
    assert cols.size
    assert s.depth[0, cols[0]] > s.depth[-1, cols[0]]


def test_class_depth_bands_disjoint_and_ordered():
    for seed in range(20):
        s = generate_scene(seed, K=6, image_side=32)
        for k in range(1, 5):
            if (s.labels == k).any() and (s.labels == k + 1).any():
                assert s.depth[s.labels == k].max() < s.depth[s.labels == k + 1].min()


def test_bad_arguments():
    with pytest.raises(ValueError):
        generate_scene(0, K=1)
    with pytest.raises(ValueError):
        generate_scene(0, image_side=30, cell=4)


# ------------------------------------------------------------------ domains


def test_identity_domain_is_bitwise_noop():
    s = generate_scene(2, image_side=32)
    out = apply_domain(s, DomainSpec(), seed=0)
    assert out.visual.tobytes() == s.albedo.tobytes()
    assert out.depth_input[..., 0].tobytes() == s.depth.tobytes()
    assert out.labels.tobytes() == s.labels.tobytes()


def test_mid_fog_scalar_oracle():
    from depthforge.synthbench import Scene
    scene = Scene(np.full((2, 2), 0.5), np.full((2, 2, 3), 0.8), np.zeros((2, 2), np.uint8), 0)
    out = apply_domain(scene, DomainSpec(fog_density=2.0, fog_color=[1.0, 1.0, 1.0]), seed=0)
    np.testing.assert_allclose(out.visual, 0.9264, atol=1e-4)


def test_dense_fog_reaches_fog_color():
    s = generate_scene(4, image_side=32)
    color = [0.3, 0.6, 0.9]
    out = apply_domain(s, DomainSpec(fog_density=50.0, fog_color=color), seed=0)
    far = s.depth >= 0.2
    assert np.abs(out.visual[far] - np.array(color)).max() < 1e-3


def test_blackout_is_independent_of_scene():
    a = apply_domain(generate_scene(1), DomainSpec(visual_blackout=True), seed=9)
    b = apply_domain(generate_scene(2), DomainSpec(visual_blackout=True), seed=9)
    assert a.visual.tobytes() == b.visual.tobytes()
    c = apply_domain(generate_scene(1), DomainSpec(visual_blackout=True), seed=10)
    assert c.visual.tobytes() != a.visual.tobytes()
    assert c.labels.tobytes() == a.labels.tobytes()


def test_depth_noise_bounded_and_labels_untouched():
    s = generate_scene(3, image_side=32)
    out = apply_domain(s, DomainSpec(depth_noise_std=0.01), seed=1)
    assert np.abs(out.depth_input[..., 0] - s.depth).max() <= 4 * 0.01 + 1e-12
    assert out.depth_input.min() >= 1e-3
    assert out.labels.tobytes() == s.labels.tobytes()


def test_night_and_presets():
    s = generate_scene(3, image_side=32)
    night = apply_domain(s, DomainSpec.preset("night"), seed=1)
    assert night.visual.mean() < 0.25 * s.albedo.mean() + 0.05
    with pytest.raises(ValueError, match="unknown domain"):
        DomainSpec.preset("rain")
    with pytest.raises(ValueError):
        DomainSpec(gain=-1).validate()


# ------------------------------------------------------------------ datasets


def test_dataset_deterministic_and_round_trip(tmp_path):
    spec = DatasetSpec(num_samples=3, domain="fog", scene_seed=4)
    a = build_dataset(spec, K=4, image_side=16)
    b = build_dataset(spec, K=4, image_side=16)
    assert a.visual.tobytes() == b.visual.tobytes()
    save_dataset(a, tmp_path / "ds")
    back = load_dataset(tmp_path / "ds")
    np.testing.assert_array_equal(back.labels, a.labels)
    np.testing.assert_array_equal(back.visual, a.visual.astype(np.float32))
    np.testing.assert_array_equal(back.depth, a.depth.astype(np.float32))
    meta = json.loads((tmp_path / "ds" / "dataset.json").read_text())
    assert meta["K"] == 4 and meta["domain_name"] == "fog"


def test_pfm_orientation_and_pgm(tmp_path):
    img = np.arange(12, dtype=np.float64).reshape(2, 2, 3) / 12
    write_pfm(tmp_path / "a.pfm", img)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"PF\n2 2\n-1.0\n")
    # first stored row is the bottom image row
    first = np.frombuffer(raw[len(b"PF\n2 2\n-1.0\n"):][:24], dtype="<f4")
    np.testing.assert_allclose(first, img[1].reshape(-1), atol=1e-7)
    np.testing.assert_allclose(read_pfm(tmp_path / "a.pfm"), img, atol=1e-7)
    gray = np.random.default_rng(0).uniform(size=(3, 5, 1))
    write_pfm(tmp_path / "g.pfm", gray)
    assert (tmp_path / "g.pfm").read_bytes().startswith(b"Pf\n5 3\n")
    lab = np.array([[0, 1, 2], [255, 4, 5]], dtype=np.uint8)
    write_pgm(tmp_path / "l.pgm", lab)
    np.testing.assert_array_equal(read_pgm(tmp_path / "l.pgm"), lab)


# ---------------------------------------------------------------- evaluator


def brute_force_iou(pred, truth, K):
    ious = []
    pairs = list(zip(pred.reshape(-1).tolist(), truth.reshape(-1).tolist()))
    for k in range(K):
        tp = sum(1 for p, t in pairs if p == k and t == k)
        fp = sum(1 for p, t in pairs if p == k and t != k)
        fn = sum(1 for p, t in pairs if p != k and t == k)
        if tp + fp + fn:
            ious.append(tp / (tp + fp + fn))
    return sum(ious) / len(ious)


def test_perfect_and_inverted_predictions():
    truth = np.array([[0, 1], [1, 0]])
    assert evaluate_miou([truth], [truth], 2).miou == 1.0
    assert evaluate_miou([1 - truth], [truth], 2).miou == 0.0


def test_matches_brute_force_counts():
    rng = np.random.default_rng(8)
    for _ in range(25):
        p, t = rng.integers(0, 3, (8, 8)), rng.integers(0, 3, (8, 8))
        assert evaluate_miou([p], [t], 3).miou == brute_force_iou(p, t, 3)


def test_absent_class_excluded():
    truth = np.zeros((2, 2), int)
    pred = np.array([[0, 0], [0, 1]])
    rep = evaluate_miou([pred], [truth], 3)
    assert np.isnan(rep.per_class_iou[2])
    assert rep.miou == pytest.approx((0.75 + 0.0) / 2)


def test_ignore_label_and_errors():
    truth = np.array([[0, 255]])
    rep = evaluate_miou([np.array([[0, 1]])], [truth], 2)
    assert rep.miou == 1.0 and rep.confusion.sum() == 1
    with pytest.raises(ValueError):
        evaluate_miou([np.zeros((1, 2), int)], [np.full((1, 2), 255)], 2)
    with pytest.raises(ValueError):
        evaluate_miou([np.zeros((2, 2), int)], [np.zeros((1, 2), int)], 2)


def test_chance_is_best_constant_predictor():
    rng = np.random.default_rng(1)
    truths = [rng.choice(4, size=(6, 6), p=[0.5, 0.3, 0.2, 0.0]) for _ in range(3)]
    rep = evaluate_miou(truths, truths, 4)
    best = max(evaluate_miou([np.full_like(t, k) for t in truths], truths, 4).miou for k in range(4))
    assert rep.chance_miou == pytest.approx(best, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 5))
def test_evaluator_symmetries(seed, K):
    rng = np.random.default_rng(seed)
    preds = [rng.integers(0, K, (4, 4)) for _ in range(3)]
    truths = [rng.integers(0, K, (4, 4)) for _ in range(3)]
    base = evaluate_miou(preds, truths, K)
    order = rng.permutation(3)
    shuffled = evaluate_miou([preds[i] for i in order], [truths[i] for i in order], K)
    assert shuffled.miou == base.miou
    perm = rng.permutation(K)
    relabeled = evaluate_miou([perm[p] for p in preds], [perm[t] for t in truths], K)
    assert relabeled.miou == pytest.approx(base.miou, abs=1e-12)


def test_confusion_matrix_merge_is_associative():
    rng = np.random.default_rng(2)
    p, t = rng.integers(0, 3, (2, 8, 8)), rng.integers(0, 3, (2, 8, 8))
    whole = confusion_matrix(p, t, 3)
    parts = confusion_matrix(p[0], t[0], 3) + confusion_matrix(p[1], t[1], 3)
    np.testing.assert_array_equal(whole, parts)


def test_report_files(tmp_path):
    truth = np.array([[0, 1], [1, 1]])
    rep = evaluate_miou([truth], [truth], 3)
    rep.write(tmp_path / "r" / "report")
    data = json.loads((tmp_path / "r" / "report.json").read_text())
    assert data["miou"] == 1.0 and data["per_class_iou"][2] is None
    assert "mean,1.000000" in (tmp_path / "r" / "report.csv").read_text()
