import struct

import numpy as np
import pytest

from pointiid import model as m
from pointiid.autodiff import Tensor
from pointiid.data import SceneSpec, render_synthetic, sample_specs
from pointiid.geometry import NormalField, PointCloud
from pointiid.losses import shading_loss
from pointiid.model import (
    CheckpointFormatError,
    CheckpointShapeError,
    CheckpointVersionError,
    CorruptCheckpointError,
    InferenceError,
    SubnetArch,
    TrainConfig,
    TrainingError,
    decompose,
    forward_albedo,
    forward_direction,
    forward_shader,
    init_weights,
    load_weights,
    save_weights,
    train_stage1,
    train_stage2,
)
from pointiid.pipeline import prepare_item


@pytest.fixture(scope="module")
def weights():
    return init_weights(3)


def random_cloud(n, seed=0):
    rng = np.random.default_rng(seed)
    pts = np.column_stack([rng.normal(size=(n, 2)), rng.uniform(1, 3, size=n), rng.uniform(size=(n, 3))])
    return PointCloud(pts)


def unit_rows(n, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, 3))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


@pytest.fixture(scope="module")
def items():
    return [prepare_item(render_synthetic(s)) for s in sample_specs(3, SceneSpec(size=16), seed=4)]


class TestArchitecture:
    def test_widths(self):
        arch = SubnetArch.albedo()
        assert arch.mid_widths[-1] == 64 and arch.prepool_widths[-1] == 1024
        assert arch.decoder_widths[0] == 1088 and arch.decoder_widths[-1] == 3

    def test_direction_uses_tanh_on_last_two(self):
        assert SubnetArch.direction().decoder_activations[-2:] == ("tanh", "tanh")

    def test_invalid(self):
        with pytest.raises(CheckpointShapeError):
            SubnetArch(decoder_widths=(1000, 3), decoder_activations=("relu",))
        with pytest.raises(CheckpointShapeError):
            SubnetArch(decoder_widths=(1088, 4), decoder_activations=("relu",))

    def test_parameter_shapes_checked(self, weights):
        with pytest.raises(CheckpointShapeError):
            m.Subnet(SubnetArch.albedo(), weights.albedo.params[:-1])


class TestForward:
    def test_single_point(self, weights):
        out = forward_albedo(random_cloud(1), weights)
        assert out.shape == (1, 3) and (out >= 0).all()

    @pytest.mark.parametrize("n", [1, 10, 1000, 10000])
    def test_size_agnostic(self, weights, n):
        cloud = random_cloud(n, seed=n)
        assert forward_albedo(cloud, weights).shape == (n, 3)
        unit, raw, _ = forward_direction(cloud, weights)
        assert unit.shape == raw.shape == (n, 3)
        assert forward_shader(unit_rows(n), unit, weights).shape == (n, 3)

    def test_zero_network_gives_zero_albedo(self, weights):
        w = weights.copy()
        for p in w.albedo.params:
            p.data[...] = 0
        assert not forward_albedo(random_cloud(7), w).any()

    def test_direction_contract(self, weights):
        unit, raw, fallback = forward_direction(random_cloud(50), weights)
        assert np.abs(raw).max() <= 1.0
        np.testing.assert_allclose(np.linalg.norm(unit, axis=1), 1.0, atol=1e-5)
        assert not fallback.any()

    def test_direction_fallback(self, weights):
        w = weights.copy()
        for p in w.direction.params:
            p.data[...] = 0
        unit, _, fallback = forward_direction(random_cloud(4), w)
        assert fallback.all()
        np.testing.assert_array_equal(unit, np.tile([0, 0, -1.0], (4, 1)))

    def test_shader_constant_inputs(self, weights):
        out = forward_shader(np.tile([0.0, 0.6, -0.8], (9, 1)), np.tile([0.0, 0.0, -1.0], (9, 1)), weights)
        assert (out == out[0]).all()
        assert (out >= 0).all()

    def test_shader_count_mismatch(self, weights):
        with pytest.raises(ValueError):
            forward_shader(unit_rows(3), unit_rows(4), weights)

    def test_non_finite_input(self, weights):
        cloud = random_cloud(5)
        cloud.points[0, 0] = np.inf
        with pytest.raises((InferenceError, ValueError)):
            forward_albedo(cloud, weights)

    @pytest.mark.parametrize("seed", range(3))
    def test_permutation_equivariance(self, weights, seed):
        cloud = random_cloud(200, seed)
        perm = np.random.default_rng(seed + 10).permutation(200)
        shuffled = cloud.permuted(perm)
        np.testing.assert_array_equal(forward_albedo(shuffled, weights), forward_albedo(cloud, weights)[perm])
        np.testing.assert_array_equal(forward_direction(shuffled, weights)[0], forward_direction(cloud, weights)[0][perm])
        n, d = unit_rows(200, seed), unit_rows(200, seed + 1)
        np.testing.assert_array_equal(forward_shader(n[perm], d[perm], weights), forward_shader(n, d, weights)[perm])

    def test_decompose_identity(self, weights, items):
        res = decompose(items[0].cloud, weights)
        np.testing.assert_array_equal(res.recon, res.albedo * res.shading)
        assert res.lattice("albedo").shape == (16, 16, 3)

    def test_decompose_sizes(self, weights):
        for n in (100, 10000):
            res = decompose(random_cloud(n, n), weights)
            assert res.recon.shape == (n, 3)

    def test_decompose_empty(self, weights):
        with pytest.raises(ValueError):
            decompose(PointCloud(np.zeros((0, 6))), weights)


class TestCheckpoint:
    def test_round_trip(self, weights, tmp_path):
        path = tmp_path / "w.ckpt"
        save_weights(weights, path)
        back = load_weights(path)
        np.testing.assert_array_equal(back.flat(), weights.flat())
        cloud = random_cloud(64)
        np.testing.assert_array_equal(forward_albedo(cloud, back), forward_albedo(cloud, weights))

    def test_header(self, weights, tmp_path):
        path = tmp_path / "w.ckpt"
        save_weights(weights, path)
        buf = path.read_bytes()
        assert buf.startswith(b"POINTNETIID")
        assert struct.unpack_from("<II", buf, 11) == (1, 3)

    def test_truncated(self, weights, tmp_path):
        path = tmp_path / "w.ckpt"
        save_weights(weights, path)
        path.write_bytes(path.read_bytes()[:-10])
        with pytest.raises(CorruptCheckpointError):
            load_weights(path)
        path.write_bytes(b"POINTNETIID\x01")
        with pytest.raises(CorruptCheckpointError):
            load_weights(path)

    def test_bad_magic(self, weights, tmp_path):
        path = tmp_path / "w.ckpt"
        save_weights(weights, path)
        path.write_bytes(b"X" + path.read_bytes()[1:])
        with pytest.raises(CheckpointFormatError):
            load_weights(path)

    def test_version(self, weights, tmp_path):
        path = tmp_path / "w.ckpt"
        save_weights(weights, path)
        buf = bytearray(path.read_bytes())
        buf[11:15] = struct.pack("<I", 2)
        path.write_bytes(bytes(buf))
        with pytest.raises(CheckpointVersionError):
            load_weights(path)

    def test_shape_mismatch(self, weights, tmp_path):
        path = tmp_path / "w.ckpt"
        save_weights(weights, path)
        buf = bytearray(path.read_bytes())
        # first layer descriptor of the first subnet: in=6 -> 7
        buf[31:35] = struct.pack("<I", 7)
        path.write_bytes(bytes(buf))
        with pytest.raises(CheckpointShapeError):
            load_weights(path)


class TestTraining:
    def test_step_zero_loss_is_shading_loss(self, weights, items):
        _, trace = train_stage1(items, weights, TrainConfig(steps=1, log_every=0))
        first = items[np.random.default_rng(1).permutation(len(items))[-1]]
        d, _, _ = forward_direction(first.cloud, weights)
        s = forward_shader(first.normals, d, weights)
        expected = shading_loss(first.light_dirs, d, first.shading, s).item()
        assert trace[0]["L_shading"] == pytest.approx(expected, rel=1e-5)

    def test_stage1_leaves_albedo_and_input(self, weights, items):
        before = weights.flat().copy()
        w1, trace = train_stage1(items, weights, TrainConfig(steps=3, log_every=0))
        np.testing.assert_array_equal(weights.flat(), before)
        for a, b in zip(w1.albedo.params, weights.albedo.params):
            np.testing.assert_array_equal(a.data, b.data)
        assert len(trace) == 3

    def test_stage1_without_light_labels(self, weights, items):
        unlabelled = [m.TrainingItem(it.cloud, it.normals, it.lattice, it.image, it.albedo, it.shading, None, it.name) for it in items]
        _, trace = train_stage1(unlabelled, weights, TrainConfig(steps=1, log_every=0))
        first = unlabelled[np.random.default_rng(1).permutation(len(items))[-1]]
        d, _, _ = forward_direction(first.cloud, weights)
        s = forward_shader(first.normals, d, weights)
        assert trace[0]["L_shading"] == pytest.approx(float(np.mean((s - first.shading) ** 2)), rel=1e-5)

    def test_stage2_freeze_and_sum_identity(self, weights, items):
        w2, trace = train_stage2(items, weights, TrainConfig(steps=4, log_every=0))
        for frozen in ("direction", "shader"):
            for a, b in zip(getattr(w2, frozen).params, getattr(weights, frozen).params):
                assert np.abs(a.data - b.data).sum() == 0.0
        assert any(not np.array_equal(a.data, b.data) for a, b in zip(w2.albedo.params, weights.albedo.params))
        for row in trace:
            # total is accumulated in float32, the parts are re-summed in float64
            assert row["L_albedo"] == pytest.approx(row["L_rec"] + row["L_grad"] + row["L_ccr"], rel=1e-6)

    def test_deterministic(self, weights, items):
        a, ta = train_stage1(items, weights, TrainConfig(steps=2, seed=5, log_every=0))
        b, tb = train_stage1(items, weights, TrainConfig(steps=2, seed=5, log_every=0))
        np.testing.assert_array_equal(a.flat(), b.flat())
        assert ta == tb

    def test_empty_dataset(self, weights):
        with pytest.raises(ValueError):
            train_stage1([], weights, TrainConfig(steps=1))

    def test_nan_aborts_with_trace(self, weights, items):
        bad = weights.copy()
        bad.shader.params[-1].data[...] = np.nan
        with pytest.raises(TrainingError) as info:
            train_stage1(items, bad, TrainConfig(steps=3, log_every=0))
        assert info.value.trace == []

    def test_lr_schedule(self):
        cfg = TrainConfig(steps=10, lr=1.0)
        assert cfg.lr_at(0) == 1.0
        assert cfg.lr_at(5) == pytest.approx(0.5)
        assert TrainConfig(steps=10, lr=0.3, lr_schedule="constant").lr_at(7) == 0.3

    def test_accumulate(self, weights, items):
        _, trace = train_stage1(items, weights, TrainConfig(steps=2, accumulate=2, log_every=0))
        assert len(trace) == 2


def test_gradient_clip_scales_to_norm():
    grads = [np.full(4, 3.0, dtype=np.float32), np.full(1, 4.0, dtype=np.float32)]
    out = m._clipped(grads, 1.0)
    assert np.sqrt(sum((g.astype(np.float64) ** 2).sum() for g in out)) == pytest.approx(1.0, rel=1e-6)
    assert m._clipped(grads, None) is grads


def test_float64_weights_forward():
    w = init_weights(0, dtype=np.float64)
    out = forward_albedo(random_cloud(5), w)
    assert out.dtype == np.float64
    assert isinstance(w.albedo.params[0], Tensor)


def test_normal_field_input(weights):
    out = forward_shader(NormalField(unit_rows(6)), unit_rows(6, 1), weights)
    assert out.shape == (6, 3)
