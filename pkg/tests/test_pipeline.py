"""Pipeline: encoder locality, lift geometry, training and checkpoints."""

import io

import numpy as np
import pytest

from mvocc.autodiff import Tensor
from mvocc.checkpoint import (
    load_checkpoint,
    load_tensor,
    read_array,
    save_checkpoint,
    save_tensor,
    write_array,
)
from mvocc.errors import CheckpointError, ContractError, ParameterError
from mvocc.optim import AdamW
from mvocc.pipeline import (
    PipelineConfig,
    PipelineState,
    build_lift,
    compute_class_weights,
    format_log_line,
)
from mvocc.reconstruction import FeatureStatus
from mvocc.scenes import dataset, generate_scene


def small_config(**kw):
    kw.setdefault("use_mmr", False)
    kw.setdefault("seed", 0)
    return PipelineConfig(**kw)


SCENES = dataset("train", 8, base_seed=50)


# ---------------------------------------------------------------------------
# config


def test_config_hash_is_stable_and_sensitive():
    a, b = PipelineConfig(), PipelineConfig()
    assert a.config_hash() == b.config_hash()
    c = PipelineConfig(lr=2e-3)
    assert c.config_hash() != a.config_hash()


def test_config_dict_round_trip():
    cfg = PipelineConfig(fmm="multi", n_protos=3, use_mmr=True, seed=9)
    back = PipelineConfig.from_dict(cfg.to_dict())
    assert back.config_hash() == cfg.config_hash()
    assert back.scene.grid_dims == cfg.scene.grid_dims


def test_config_validation():
    with pytest.raises(ParameterError):
        PipelineConfig(fmm="both")
    with pytest.raises(ParameterError):
        PipelineConfig(decoder_preset="huge")
    with pytest.raises(ParameterError):
        PipelineConfig(feature_channels=15, decoder_preset="desk")


def test_full_scale_preset_keeps_deployment_settings():
    cfg = PipelineConfig.full_scale()
    assert cfg.decoder_preset == "full"
    assert cfg.lr == 2e-4 and cfg.epochs == 24
    assert cfg.scene.grid_dims == (200, 200, 16)


# ---------------------------------------------------------------------------
# encoder


def test_encoder_is_column_local():
    state = PipelineState(small_config())
    img = SCENES[0].images[0]
    base = state.encode_view(img).data
    poked = img.copy()
    poked[:, :, 8:12] += 5.0  # exactly feature column 2
    out = state.encode_view(poked).data
    changed = np.any(out != base, axis=(0, 1))
    assert changed[2]
    assert not changed[[0, 1, 3, 4, 5, 6, 7]].any()


def test_feature_overlap_is_exact_across_views():
    state = PipelineState(small_config())
    ov = state.config.overlap_cols
    w = state.config.feat_width
    for s in SCENES[:3]:
        feats = state.encode(s.images)
        for v in range(6):
            nxt = (v + 1) % 6
            assert np.array_equal(
                feats[v].data.data[:, :, w - ov :], feats[nxt].data.data[:, :, :ov]
            )


def test_masked_views_carry_no_features():
    state = PipelineState(small_config())
    feats = state.encode(SCENES[0].images, masked={2, 4})
    assert feats[2].status is FeatureStatus.MASKED and feats[2].data is None
    assert feats[0].status is FeatureStatus.OBSERVED


# ---------------------------------------------------------------------------
# lift geometry


def test_every_voxel_is_covered_by_one_or_two_views():
    cfg = small_config()
    _, covered, _ = build_lift(cfg)
    count = covered.sum(axis=0)
    assert count.min() >= 1
    assert set(np.unique(count)) <= {1, 2}


def test_lift_weights_are_a_partition_per_covered_voxel():
    cfg = small_config()
    matrices, covered, _ = build_lift(cfg)
    for v in range(6):
        sums = matrices[v].sum(axis=1)
        assert np.abs(sums[covered[v]] - 1.0).max() < 1e-12
        assert np.all(sums[~covered[v]] == 0.0)


def test_front_centered_voxel_samples_only_the_front_view():
    cfg = small_config()
    _, covered, _ = build_lift(cfg)
    x_dim, y_dim, z_dim = cfg.scene.grid_dims
    # Cell (12, 8, 1) sits near azimuth 0 with y just above the axis.
    v = (12 * y_dim + 8) * z_dim + 1
    owners = [view for view in range(6) if covered[view, v]]
    assert owners == [0]


def test_overlap_voxels_average_both_views_samples():
    cfg = small_config()
    state = PipelineState(cfg)
    matrices, covered, _ = build_lift(cfg)
    s = SCENES[1]
    feats = state.encode(s.images)
    pre = state.lift(feats).data
    both = np.flatnonzero(covered.sum(axis=0) == 2)
    assert both.size > 0
    c = cfg.feature_channels
    tokens = [f.data.data.reshape(c, -1).T for f in feats]
    for v in both[:: max(1, both.size // 17)]:
        pair = [view for view in range(6) if covered[view, v]]
        a = matrices[pair[0]][v] @ tokens[pair[0]]
        b = matrices[pair[1]][v] @ tokens[pair[1]]
        assert np.abs(pre[v] - 0.5 * (a + b)).max() < 1e-12


def test_masked_views_are_never_consumed_by_the_lift():
    cfg = small_config()
    state = PipelineState(cfg)
    _, covered, _ = build_lift(cfg)
    s = SCENES[2]
    feats = state.encode(s.images, masked={3})
    pre = state.lift(feats).data
    only_masked = covered[3] & (covered.sum(axis=0) == 1)
    assert only_masked.any()
    assert np.all(pre[only_masked] == 0.0)
    # Tampering with the withheld image cannot change anything downstream.
    poked = s.images.copy()
    poked[3] += 100.0
    pre2 = state.lift(state.encode(poked, masked={3})).data
    assert np.array_equal(pre, pre2)


# ---------------------------------------------------------------------------
# forward / training


def test_forward_shapes_and_paths():
    state = PipelineState(small_config(use_mmr=True, fmm="single"))
    out = state.forward(SCENES[0].images, masked={1})
    v = state.config.n_voxels
    assert out["logits"].shape == (v, 6)
    assert out["pre"].shape == (v, state.config.feature_channels)
    assert sorted(out["recon"]) == [1]
    assert out["gate"].shape == (v, 6)
    assert state.decoder.invocations == 1
    state.forward(SCENES[0].images)
    assert state.decoder.invocations == 1  # nothing masked, decoder untouched
    with pytest.raises(ContractError):
        state.forward(SCENES[0].images, masked=set(range(6)))


def test_infer_returns_a_label_grid():
    state = PipelineState(small_config())
    pred = state.infer(SCENES[0].images)
    assert pred.shape == state.config.scene.grid_dims
    assert pred.dtype == np.uint8
    assert pred.max() < 6


def test_adamw_zero_gradient_contraction():
    p = Tensor(np.full(4, 2.0), requires_grad=True)
    opt = AdamW({"p": p}, lr=0.1, weight_decay=0.5)
    p.grad = np.zeros(4)
    opt.step()
    assert np.allclose(p.data, 2.0 * (1.0 - 0.1 * 0.5), rtol=0, atol=1e-15)


def test_adamw_validation():
    with pytest.raises(ParameterError):
        AdamW({}, lr=1e-3)
    with pytest.raises(ParameterError):
        AdamW({"p": Tensor(np.ones(2))})  # not trainable
    with pytest.raises(ParameterError):
        AdamW({"p": Tensor(np.ones(2), requires_grad=True)}, lr=-1.0)


def test_training_is_bitwise_deterministic():
    def run():
        state = PipelineState(PipelineConfig(use_mmr=True, fmm="single", epochs=2, seed=3))
        history = state.train(SCENES[:5])
        return state, [format_log_line(e) for e in history]

    a, log_a = run()
    b, log_b = run()
    assert log_a == log_b
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data), name
    assert np.array_equal(a.bank.protos, b.bank.protos)


def test_training_loss_trends_down():
    state = PipelineState(PipelineConfig(use_mmr=False, epochs=8, seed=1))
    history = state.train(SCENES[:6])
    first = np.mean([e["l_occ"] for e in history[:6]])
    last = np.mean([e["l_occ"] for e in history[-12:]])
    assert last < first


def test_rvm_masks_appear_in_training_logs():
    state = PipelineState(PipelineConfig(use_mmr=True, rvm_p=1.0, epochs=1, seed=2))
    history = state.train(SCENES[:6])
    assert all(len(e["masked"]) == 1 for e in history)
    assert any(e["l_mmr"] > 0 for e in history)


def test_class_weights_inverse_frequency_with_cap():
    w = compute_class_weights(SCENES, 6, cap=10.0)
    assert w.shape == (6,)
    assert w.max() <= 10.0
    assert w[0] < w[1] < w[4] or w[4] == 10.0  # rarer classes weigh more


def test_log_lines_are_canonical():
    line = format_log_line({"step": 1, "l_occ": 0.5, "l_mmr": 0.0, "masked": [2]})
    assert line == '{"l_mmr":0.0,"l_occ":0.5,"masked":[2],"step":1}'


# ---------------------------------------------------------------------------
# serialization


def test_tensor_record_round_trip(tmp_path):
    arr = np.random.default_rng(0).normal(size=(3, 4, 2))
    path = tmp_path / "t.bin"
    save_tensor(path, arr)
    assert np.array_equal(load_tensor(path), arr)
    buf = io.BytesIO()
    write_array(buf, np.float64(7.0))
    buf.seek(0)
    back = read_array(buf)
    assert back.shape == () and back == 7.0


def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    state = PipelineState(PipelineConfig(use_mmr=True, fmm="multi", epochs=1, seed=4))
    state.train(SCENES[:4])
    p1 = tmp_path / "a.ckpt"
    p2 = tmp_path / "b.ckpt"
    save_checkpoint(p1, state)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_resume_matches_uninterrupted_training(tmp_path):
    cfg = dict(use_mmr=True, fmm="single", epochs=4, seed=5)
    straight = PipelineState(PipelineConfig(**cfg))
    straight.train(SCENES[:4])

    half = PipelineState(PipelineConfig(**cfg))
    half.train(SCENES[:4], stop_after=8)
    path = tmp_path / "half.ckpt"
    save_checkpoint(path, half)
    resumed = load_checkpoint(path)
    resumed.train(SCENES[:4])

    for name in straight.params:
        assert np.array_equal(straight.params[name].data, resumed.params[name].data), name
    assert np.array_equal(straight.bank.protos, resumed.bank.protos)
    assert straight.step == resumed.step


def test_checkpoint_rejects_corruption(tmp_path):
    state = PipelineState(small_config())
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, state)
    blob = bytearray(path.read_bytes())
    blob[:4] = b"WHAT"
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    trunc = tmp_path / "trunc.ckpt"
    trunc.write_bytes(path.read_bytes()[:-9])
    with pytest.raises(CheckpointError):
        load_checkpoint(trunc)
    padded = tmp_path / "pad.ckpt"
    padded.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(CheckpointError):
        load_checkpoint(padded)
