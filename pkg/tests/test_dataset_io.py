import filecmp
import json
import os

import numpy as np
import pytest

from semsplat.dataset_io import (FeatureRecord, load_bundle, one_hot_encode,
                                 read_pfm, read_png8, read_png16, rle_decode,
                                 rle_encode, save_bundle, write_pfm,
                                 write_png8, write_png16)
from semsplat.errors import BundleFormatError, InvalidArgumentError
from semsplat.renderer import render
from semsplat.synthetic import SynthConfig, generate_synthetic, orbit_pose


def test_rle_round_trip_random_masks():
    rng = np.random.default_rng(11)
    for _ in range(30):
        mask = rng.uniform(size=(9, 13)) < rng.uniform(0.1, 0.9)
        runs = rle_encode(mask)
        assert np.array_equal(rle_decode(runs, mask.shape), mask)


def test_rle_conventions():
    mask = np.zeros((2, 3), dtype=bool)
    assert rle_encode(mask) == []
    mask[0, 0] = True
    # leading one-run forces an explicit zero-length zero run
    assert rle_encode(mask) == [0, 1]
    full = np.ones((2, 3), dtype=bool)
    assert rle_encode(full) == [0, 6]
    tail = np.zeros(6, dtype=bool)
    tail[2:4] = True
    assert rle_encode(tail.reshape(2, 3)) == [2, 2]


def test_rle_decode_rejects_overflow():
    with pytest.raises(InvalidArgumentError):
        rle_decode([3, 5], (2, 3))
    with pytest.raises(InvalidArgumentError):
        rle_decode([-1, 2], (2, 3))


def test_pfm_round_trip(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.uniform(0, 5, (7, 11)).astype(np.float32)
    path = tmp_path / "d.pfm"
    write_pfm(path, data)
    back = read_pfm(path)
    assert back.shape == (7, 11)
    assert np.abs(back - data).max() == 0.0


def test_pfm_rejects_bad_header(tmp_path):
    path = tmp_path / "bad.pfm"
    path.write_bytes(b"PF\n3 3\n-1.0\n" + b"\x00" * 108)
    with pytest.raises(BundleFormatError):
        read_pfm(path)
    path.write_bytes(b"Pf\n4 4\n-1.0\n" + b"\x00" * 10)
    with pytest.raises(BundleFormatError):
        read_pfm(path)


def test_png8_round_trip_half_lsb(tmp_path):
    rng = np.random.default_rng(5)
    rgb = rng.uniform(size=(6, 8, 3))
    path = tmp_path / "c.png"
    write_png8(path, rgb)
    back = read_png8(path)
    assert np.abs(back - rgb).max() <= 0.5 / 255.0 + 1e-12


def test_png16_round_trip_exact(tmp_path):
    labels = np.array([[0, 7], [300, 65535]], dtype=np.int64)
    path = tmp_path / "l.png"
    write_png16(path, labels)
    assert np.array_equal(read_png16(path), labels)
    with pytest.raises(InvalidArgumentError):
        write_png16(path, np.array([[-1]]))


def test_one_hot_encode():
    labels = np.array([[0, 2], [1, 1]])
    out = one_hot_encode(labels, 3)
    assert out.shape == (2, 2, 3)
    assert np.array_equal(np.argmax(out, axis=2), labels)
    assert np.all(out.sum(axis=2) == 1.0)
    with pytest.raises(InvalidArgumentError):
        one_hot_encode(np.array([[3]]), 3)
    with pytest.raises(InvalidArgumentError):
        one_hot_encode(np.array([[-1]]), 3)


def _tiny_bundle(seed=9, **kw):
    cfg = SynthConfig(seed=seed, gaussian_count=12, frame_count=4,
                      width=32, height=32, focal=36.0, class_count=3, **kw)
    return generate_synthetic(cfg)


def test_bundle_round_trip(tmp_path):
    bundle = _tiny_bundle()
    root = tmp_path / "b"
    save_bundle(bundle, root)
    back = load_bundle(root)
    assert back.frame_count == bundle.frame_count
    assert back.semantic_dim == bundle.semantic_dim
    assert back.feature_dim == bundle.feature_dim
    assert back.label_names == bundle.label_names
    assert back.has_semantics
    for a, b in zip(back.frames, bundle.frames):
        assert np.abs(a.rgb - b.rgb).max() <= 0.5 / 255.0 + 1e-12
        assert np.abs(a.depth - b.depth).max() < 1e-6
        assert np.array_equal(a.semantic, b.semantic)
        assert a.timestamp == pytest.approx(b.timestamp)
    for recs_a, recs_b in zip(back.features, bundle.features):
        assert len(recs_a) == len(recs_b)
        for ra, rb in zip(recs_a, recs_b):
            assert ra.label == rb.label
            assert ra.rle == rb.rle
            assert np.abs(ra.embedding - rb.embedding).max() == 0.0
    for pa, pb in zip(back.gt_poses, bundle.gt_poses):
        assert np.abs(pa.translation - pb.translation).max() < 1e-12
        assert np.abs(pa.rotation_matrix() - pb.rotation_matrix()).max() < 1e-12
    for ga, gb in zip(back.gt_semantics, bundle.gt_semantics):
        assert np.array_equal(ga, gb)


def test_save_is_deterministic(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    save_bundle(_tiny_bundle(seed=7), a)
    save_bundle(_tiny_bundle(seed=7), b)
    for dirpath, _dirnames, filenames in os.walk(a):
        rel = os.path.relpath(dirpath, a)
        for name in filenames:
            pa = os.path.join(dirpath, name)
            pb = os.path.join(b, rel, name)
            assert filecmp.cmp(pa, pb, shallow=False), f"{rel}/{name} differs"


def test_generated_frames_match_ground_truth_render():
    bundle = _tiny_bundle()
    for i in (0, 3):
        frame = render(bundle.gt_map, bundle.gt_poses[i], bundle.intrinsics)
        assert np.abs(frame.color - bundle.frames[i].rgb).max() < 1e-12
        assert np.abs(frame.depth - bundle.frames[i].depth).max() < 1e-12


def test_loaded_bundle_renders_consistently(tmp_path):
    bundle = _tiny_bundle()
    root = tmp_path / "b"
    save_bundle(bundle, root)
    back = load_bundle(root)
    frame = render(bundle.gt_map, back.gt_poses[2], back.intrinsics)
    assert np.abs(frame.color - back.frames[2].rgb).max() <= 0.5 / 255.0 + 1e-9
    assert np.abs(frame.depth - back.frames[2].depth).max() < 1e-6


def test_load_reports_missing_frame(tmp_path):
    root = tmp_path / "b"
    save_bundle(_tiny_bundle(), root)
    victim = root / "rgb" / "000002.png"
    os.remove(victim)
    with pytest.raises(BundleFormatError) as err:
        load_bundle(root)
    assert "000002" in str(err.value)


def test_load_reports_bad_manifest(tmp_path):
    root = tmp_path / "b"
    save_bundle(_tiny_bundle(), root)
    (root / "manifest.json").write_text("{not json")
    with pytest.raises(BundleFormatError) as err:
        load_bundle(root)
    assert "manifest.json" in str(err.value)
    (root / "manifest.json").write_text(json.dumps({"width": 32}))
    with pytest.raises(BundleFormatError):
        load_bundle(root)


def test_load_reports_pose_count_mismatch(tmp_path):
    root = tmp_path / "b"
    save_bundle(_tiny_bundle(), root)
    lines = (root / "poses.txt").read_text().strip().splitlines()
    (root / "poses.txt").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(BundleFormatError) as err:
        load_bundle(root)
    assert "poses.txt" in str(err.value)


def test_missing_directory_is_a_format_error(tmp_path):
    with pytest.raises(BundleFormatError):
        load_bundle(tmp_path / "nope")


def test_tum_style_sequence_loads_geometry_only(tmp_path):
    rng = np.random.default_rng(2)
    root = tmp_path / "tum"
    (root / "rgb").mkdir(parents=True)
    (root / "depth").mkdir()
    lines = []
    for i in range(3):
        rgb = rng.uniform(size=(16, 16, 3))
        depth_m = rng.uniform(0.5, 3.0, (16, 16))
        write_png8(root / "rgb" / f"{i}.png", rgb)
        write_png16(root / "depth" / f"{i}.png", np.round(depth_m * 5000).astype(np.int64))
        lines.append(f"{i / 30.0} rgb/{i}.png {i / 30.0} depth/{i}.png")
    (root / "associations.txt").write_text("\n".join(lines) + "\n")
    bundle = load_bundle(root)
    assert not bundle.has_semantics
    assert bundle.semantic_dim == 1
    assert bundle.frame_count == 3
    assert bundle.gt_poses is None
    assert np.all(bundle.frames[0].semantic == 0)
    # depth decodes back to meters within quantization
    assert bundle.frames[1].depth.max() < 3.0 + 1e-3
    assert bundle.frames[1].depth.min() > 0.5 - 1e-3
    assert bundle.intrinsics.width == 16


def test_synth_config_validation():
    with pytest.raises(InvalidArgumentError):
        SynthConfig(orbit_radius=0.0)
    with pytest.raises(InvalidArgumentError):
        SynthConfig(gaussian_count=0)
    with pytest.raises(InvalidArgumentError):
        SynthConfig(label_flip_rate=1.5)
    with pytest.raises(InvalidArgumentError):
        SynthConfig(feature_dim=1)


def test_orbit_pose_keeps_target_centered():
    cfg = SynthConfig(seed=0)
    for i in (0, 5, 13):
        pose = orbit_pose(cfg, i)
        cam = pose.transform(np.zeros(3))
        dist = np.hypot(cfg.orbit_radius, cfg.orbit_height)
        assert abs(cam[0]) < 1e-12 and abs(cam[1]) < 1e-12
        assert cam[2] == pytest.approx(dist)
    c0 = orbit_pose(cfg, 0).camera_center()
    assert np.allclose(c0, [0.0, cfg.orbit_height, -cfg.orbit_radius])


def test_descriptors_separate_classes():
    bundle = _tiny_bundle(seed=21)
    by_label = {}
    for records in bundle.features:
        for rec in records:
            by_label.setdefault(rec.label, []).append(rec.embedding)
    labels = sorted(by_label)
    assert len(labels) >= 2
    for la in labels:
        group = by_label[la]
        for i in range(len(group)):
            for j in range(i + 1, len(group)):
                assert group[i] @ group[j] > 0.8
        for lb in labels:
            if lb <= la:
                continue
            for va in by_label[la]:
                for vb in by_label[lb]:
                    assert abs(va @ vb) < 0.8


def test_flip_rate_zero_keeps_labels_clean():
    bundle = _tiny_bundle(seed=4, label_flip_rate=0.0)
    for obs, clean in zip(bundle.frames, bundle.gt_semantics):
        assert np.array_equal(obs.semantic, clean)
    for records, clean in zip(bundle.features, bundle.gt_semantics):
        for rec in records:
            mask = rle_decode(rec.rle, clean.shape)
            assert np.all(clean[mask] == rec.label)


def test_flip_rate_one_corrupts_every_mask():
    bundle = _tiny_bundle(seed=4, label_flip_rate=1.0)
    flipped = 0
    for records, clean in zip(bundle.features, bundle.gt_semantics):
        for rec in records:
            mask = rle_decode(rec.rle, clean.shape)
            true_label = int(clean[mask][0])
            assert np.all(clean[mask] == true_label)
            assert rec.label != true_label
            flipped += 1
    assert flipped > 0
    # corrupted labels land in the label images too
    mismatch = sum(np.any(obs.semantic != clean) for obs, clean
                   in zip(bundle.frames, bundle.gt_semantics))
    assert mismatch == len(bundle.frames)


def test_flips_leave_descriptors_on_true_anchor():
    # group corrupted-bundle descriptors by the TRUE class of their mask:
    # they must still cluster by true class, not by the written label
    bundle = _tiny_bundle(seed=4, label_flip_rate=1.0)
    by_true = {}
    for records, clean in zip(bundle.features, bundle.gt_semantics):
        for rec in records:
            mask = rle_decode(rec.rle, clean.shape)
            by_true.setdefault(int(clean[mask][0]), []).append(rec.embedding)
    labels = sorted(by_true)
    assert len(labels) >= 2
    for la in labels:
        for va in by_true[la]:
            for lb in labels:
                for vb in by_true[lb]:
                    sim = va @ vb
                    if la == lb:
                        assert sim > 0.8
                    elif vb is not va:
                        assert abs(sim) < 0.8


def test_feature_record_flattens_embedding():
    rec = FeatureRecord(0, 1, np.ones((2, 2)), [0, 4])
    assert rec.embedding.shape == (4,)
