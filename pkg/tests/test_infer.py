import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cpae.geometry import PointCloud
from cpae.infer import (
    DEFAULT_TAU,
    IdentityModel,
    UntrainedModelError,
    confidence_heatmap,
    export_primitive,
    keypoint_transfer,
    label_transfer,
    texture_transfer,
    transfer_point,
    transfer_set,
    write_correspondence_csv,
    write_heatmap_csv,
)
from cpae.model import CpaeModel, ModelConfig

ID = IdentityModel()
TINY = ModelConfig(latent_dim=8, encoder_widths=(16, 16), mapping_widths=(16, 16), sphere_points=64, seed=1)


def cloud(rng, k=30, **kw):
    pts = rng.standard_normal((k, 3))
    return PointCloud(pts / np.linalg.norm(pts, axis=1).max(), **kw)


def test_default_tau():
    assert DEFAULT_TAU == 0.9


class TestTransfer:
    def test_self_transfer_is_identity(self):
        a = cloud(np.random.default_rng(0))
        m = transfer_set(a, a, ID)
        np.testing.assert_array_equal(m.target_index, np.arange(len(a)))
        # the route runs in float32, so the residual is zero to that precision
        np.testing.assert_allclose(m.confidence, np.ones(len(a)), atol=1e-6)
        assert m.exists.all()

    def test_single_point_target(self):
        a = cloud(np.random.default_rng(1))
        target = PointCloud(np.array([[0.2, 0.1, 0.0]]))
        p, j, _ = transfer_point(a.points[3], a, target, ID)
        assert j == 0
        np.testing.assert_array_equal(p, target.points[0])

    def test_set_equals_point_loop(self):
        rng = np.random.default_rng(2)
        a, b = cloud(rng), cloud(rng, 40)
        m = transfer_set(a, b, ID)
        for i in range(len(a)):
            p, j, c = transfer_point(a.points[i], a, b, ID)
            assert j == m.target_index[i] and c == m.confidence[i]
            np.testing.assert_array_equal(p, b.points[j])

    def test_set_equals_point_loop_real_model(self):
        rng = np.random.default_rng(3)
        model = CpaeModel(TINY)
        a, b = cloud(rng), cloud(rng, 40)
        m = transfer_set(a, b, model, allow_untrained=True)
        for i in range(0, len(a), 5):
            _, j, c = transfer_point(a.points[i], a, b, model, allow_untrained=True)
            assert j == m.target_index[i] and c == m.confidence[i]

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=20, deadline=None)
    def test_row_equivariance(self, seed):
        rng = np.random.default_rng(seed)
        model = CpaeModel(TINY)
        a, b = cloud(rng, 20), cloud(rng, 25)
        perm = rng.permutation(20)
        m = transfer_set(a, b, model, allow_untrained=True)
        mp = transfer_set(a.take(perm), b, model, allow_untrained=True)
        np.testing.assert_array_equal(mp.target_index, m.target_index[perm])
        np.testing.assert_array_equal(mp.confidence, m.confidence[perm])

    @given(st.integers(0, 2**31 - 1), st.floats(0, 1), st.sampled_from(["residual", "literal"]))
    @settings(max_examples=30, deadline=None)
    def test_confidence_bounded_and_exists_rule(self, seed, tau, mode):
        rng = np.random.default_rng(seed)
        a, b = cloud(rng, 15), cloud(rng, 10)
        m = transfer_set(a, b, CpaeModel(TINY), tau, mode=mode, allow_untrained=True)
        assert ((m.confidence >= 0) & (m.confidence <= 1)).all()
        np.testing.assert_array_equal(m.exists, m.confidence >= tau)
        assert ((m.target_index >= 0) & (m.target_index < len(b))).all()

    def test_residual_confidence_by_hand(self):
        # identity decode: residual is the distance to the nearest target point
        source = PointCloud(np.array([[0.0, 0, 0], [0.5, 0, 0]]))
        target = PointCloud(np.array([[0.0, 0, 0.25], [1.0, 0, 0]]))
        m = transfer_set(source, target, ID, 0.9)
        np.testing.assert_allclose(m.confidence, [0.75, 0.5])
        np.testing.assert_array_equal(m.exists, [False, False])

    def test_literal_mode_uses_query(self):
        source = PointCloud(np.array([[0.0, 0, 0]]))
        target = PointCloud(np.array([[0.0, 0, 0.25], [1.0, 0, 0]]))
        assert transfer_set(source, target, ID, mode="literal").confidence[0] == 0.75
        with pytest.raises(ValueError):
            transfer_set(source, target, ID, mode="other")

    def test_tau_boundaries(self):
        rng = np.random.default_rng(4)
        a, b = cloud(rng), cloud(rng)
        assert transfer_set(a, b, ID, 0.0).exists.all()
        m = transfer_set(a, b, ID, 1.0)
        np.testing.assert_array_equal(m.exists, m.confidence == 1.0)
        with pytest.raises(ValueError):
            transfer_set(a, b, ID, 1.5)

    def test_untrained_guard(self):
        a = cloud(np.random.default_rng(5))
        with pytest.raises(UntrainedModelError):
            transfer_set(a, a, CpaeModel(TINY))

    def test_empty_target(self):
        a = cloud(np.random.default_rng(6))
        with pytest.raises(ValueError):
            transfer_set(a, np.zeros((0, 3)), ID)

    def test_deterministic(self):
        rng = np.random.default_rng(7)
        a, b = cloud(rng), cloud(rng)
        model = CpaeModel(TINY)
        m1 = transfer_set(a, b, model, allow_untrained=True)
        m2 = transfer_set(a, b, model, allow_untrained=True)
        np.testing.assert_array_equal(m1.position, m2.position)


class TestTasks:
    def test_keypoints_to_self(self):
        a = cloud(np.random.default_rng(8))
        kps = {3: a.points[4], 7: a.points[10]}
        out = keypoint_transfer(kps, a, a, ID)
        assert sorted(out) == [3, 7]
        np.testing.assert_array_equal(out[3].position, a.points[4])
        assert out[7].target_index == 10 and not out[7].far_from_source

    def test_keypoints_empty(self):
        a = cloud(np.random.default_rng(9))
        assert keypoint_transfer({}, a, a, ID) == {}

    def test_far_keypoint_warns(self):
        a = cloud(np.random.default_rng(10))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            out = keypoint_transfer({0: np.array([5.0, 5.0, 5.0])}, a, a, ID)
        assert out[0].far_from_source and caught

    def test_labels_to_self(self):
        rng = np.random.default_rng(11)
        a = cloud(rng, labels=rng.integers(0, 3, 30))
        np.testing.assert_array_equal(label_transfer(a.labels, a, a, ID), a.labels)

    def test_single_label_source(self):
        rng = np.random.default_rng(12)
        a, b = cloud(rng), cloud(rng, 17)
        out = label_transfer(np.full(30, 2), a, b, CpaeModel(TINY), allow_untrained=True)
        assert out.shape == (17,) and (out == 2).all()

    def test_texture(self):
        rng = np.random.default_rng(13)
        a = cloud(rng)
        colors = rng.uniform(size=(30, 3))
        out, mask = texture_transfer(colors, a, a, ID)
        np.testing.assert_array_equal(out, colors)
        assert mask.all()
        b = cloud(rng, 12)
        _, mask0 = texture_transfer(colors, a, b, ID, tau=0.0)
        assert mask0.all()

    def test_export_primitive(self):
        rng = np.random.default_rng(14)
        a = cloud(rng, labels=rng.integers(0, 2, 30), keypoints={0: np.zeros(3)})
        a.keypoints[0] = a.points[5].copy()
        prim = export_primitive(a, ID)
        assert len(prim) == len(a)
        np.testing.assert_array_equal(prim.labels, a.labels)
        assert not np.allclose(prim.colors[5], 0.6)

    def test_heatmap_self(self):
        rng = np.random.default_rng(15)
        a, b = cloud(rng), cloud(rng, 20)
        maps = confidence_heatmap(a, [a, b], ID)
        np.testing.assert_allclose(maps[0], np.ones(30), atol=1e-6)
        assert maps[1].shape == (20,) and ((maps[1] >= 0) & (maps[1] <= 1)).all()


class TestWriters:
    def test_correspondence_csv(self, tmp_path):
        a = cloud(np.random.default_rng(16), 4)
        m = transfer_set(a, a, ID)
        write_correspondence_csv(m, tmp_path / "c.csv")
        lines = (tmp_path / "c.csv").read_text().splitlines()
        assert lines[0] == "src_idx,tgt_idx,x,y,z,confidence,exists"
        assert len(lines) == 5
        row = lines[2].split(",")
        assert row[0] == "1" and row[1] == "1" and row[-1] == "1"
        assert float(row[2]) == m.position[1, 0]

    def test_heatmap_csv(self, tmp_path):
        write_heatmap_csv(np.eye(3), np.array([0.1, 0.5, 1.0]), tmp_path / "h.csv")
        lines = (tmp_path / "h.csv").read_text().splitlines()
        assert lines[0] == "x,y,z,c" and lines[3] == "0.0,0.0,1.0,1.0"
