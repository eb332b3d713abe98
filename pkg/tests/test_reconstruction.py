"""Masked-view reconstruction: reference assembly, decoder, loss, recovery."""

import numpy as np
import pytest

import mvocc.autodiff as ad
from mvocc.autodiff import Tensor, backward
from mvocc.errors import ContractError, ParameterError, ShapeError
from mvocc.reconstruction import (
    DECODER_PRESETS,
    FeatureStatus,
    MmrDecoder,
    ViewFeature,
    aggregate_reference,
    mmr_loss,
    reconstruct,
    recover_features,
)

C, H, W = 4, 2, 8
OV = 2


def make_decoder(seed=0, **kw):
    kw.setdefault("blocks", 1)
    kw.setdefault("heads", 2)
    kw.setdefault("mlp_ratio", 2)
    return MmrDecoder(C, H, W, seed=seed, **kw)


def observed(view, data):
    return ViewFeature(view, Tensor(data), FeatureStatus.OBSERVED)


def ring_features(seed=0, n=6):
    r = np.random.default_rng(seed)
    return [observed(i, r.normal(size=(C, H, W))) for i in range(n)]


# ---------------------------------------------------------------------------
# reference assembly


def test_reference_columns_come_from_the_right_places():
    dec = make_decoder()
    feats = ring_features(1)
    ref = aggregate_reference(feats[0], feats[2], dec, OV).data
    assert ref.shape == (C, H, W)
    # Left block: last OV columns of the left neighbor, copied bitwise.
    assert np.array_equal(ref[:, :, :OV], feats[0].data.data[:, :, W - OV :])
    # Right block: first OV columns of the right neighbor.
    assert np.array_equal(ref[:, :, W - OV :], feats[2].data.data[:, :, :OV])
    # Center: the mask token tiled over every remaining column.
    token = dec.params["mask_token"].data
    for col in range(OV, W - OV):
        assert np.array_equal(ref[:, :, col], np.tile(token[:, None], (1, H)))


def test_reference_requires_available_neighbors():
    dec = make_decoder()
    feats = ring_features(2)
    hidden = ViewFeature(3, None, FeatureStatus.MASKED)
    with pytest.raises(ContractError):
        aggregate_reference(hidden, feats[1], dec, OV)
    with pytest.raises(ContractError):
        aggregate_reference(feats[0], hidden, dec, OV)


def test_reference_validates_shapes_and_overlap():
    dec = make_decoder()
    feats = ring_features(3)
    with pytest.raises(ParameterError):
        aggregate_reference(feats[0], feats[1], dec, W // 2)
    squat = observed(9, np.zeros((C, H, W - 2)))
    with pytest.raises(ShapeError):
        aggregate_reference(feats[0], squat, dec, OV)


def test_masked_view_feature_carries_no_data():
    with pytest.raises(ContractError):
        ViewFeature(0, Tensor(np.zeros((C, H, W))), FeatureStatus.MASKED)
    with pytest.raises(ShapeError):
        ViewFeature(0, None, FeatureStatus.OBSERVED)


# ---------------------------------------------------------------------------
# decoder


def test_zero_layer_scale_makes_blocks_an_identity():
    dec = make_decoder(seed=5, blocks=2)
    for name, p in dec.params.items():
        if ".ls" in name:
            p.data[:] = 0.0
    ref = np.random.default_rng(7).normal(size=(C, H, W))
    out = reconstruct(Tensor(ref), dec).data
    want = ref + dec.params["pos_embed"].data.T.reshape(C, H, W)
    assert np.array_equal(out, want)


def test_decoder_is_deterministic():
    ref = np.random.default_rng(11).normal(size=(C, H, W))
    a = reconstruct(Tensor(ref), make_decoder(seed=3)).data
    b = reconstruct(Tensor(ref), make_decoder(seed=3)).data
    assert np.array_equal(a, b)
    c = reconstruct(Tensor(ref), make_decoder(seed=4)).data
    assert not np.array_equal(a, c)


def test_invocation_counter_counts_decoder_passes_only():
    dec = make_decoder()
    feats = ring_features(4)
    aggregate_reference(feats[0], feats[2], dec, OV)
    assert dec.invocations == 0
    reconstruct(Tensor(np.zeros((C, H, W))), dec)
    reconstruct(Tensor(np.zeros((C, H, W))), dec)
    assert dec.invocations == 2


def test_decoder_presets_and_validation():
    assert DECODER_PRESETS["desk"] == {"blocks": 2, "heads": 2, "mlp_ratio": 4}
    assert DECODER_PRESETS["full"] == {"blocks": 6, "heads": 8, "mlp_ratio": 4}
    dec = MmrDecoder.from_preset("desk", 16, 4, 8)
    assert dec.blocks == 2 and dec.heads == 2
    with pytest.raises(ParameterError):
        MmrDecoder.from_preset("tiny", 16, 4, 8)
    with pytest.raises(ParameterError):
        MmrDecoder(channels=6, height=2, width=8, heads=4)


def test_decoder_gradients_match_finite_differences():
    dec = make_decoder(seed=9)
    r = np.random.default_rng(13)
    ref_np = r.normal(size=(C, H, W))
    target = r.normal(size=(C, H, W))

    def loss_value():
        return ad.mse(reconstruct(Tensor(ref_np), dec), Tensor(target)).item()

    for p in dec.params.values():
        p.zero_grad()
    backward(ad.mse(reconstruct(Tensor(ref_np), dec), Tensor(target)))

    h = 1e-5
    worst = 0.0
    for name, p in dec.params.items():
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat, gflat = p.data.reshape(-1), grad.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            up = loss_value()
            flat[j] = orig - h
            down = loss_value()
            flat[j] = orig
            num = (up - down) / (2 * h)
            worst = max(worst, abs(gflat[j] - num) / max(1.0, abs(num)))
    assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"


def test_gradients_flow_to_the_reference_input():
    dec = make_decoder(seed=2)
    from mvocc.gradcheck import check_gradients

    r = np.random.default_rng(21)
    target = Tensor(r.normal(size=(C, H, W)))
    err = check_gradients(
        lambda ts: ad.mse(reconstruct(ts[0], dec), target),
        [r.normal(size=(C, H, W))],
    )
    assert err < 1e-4


# ---------------------------------------------------------------------------
# loss


def test_loss_matches_a_plain_loop_and_ignores_unmasked_views():
    r = np.random.default_rng(17)
    recon = {i: Tensor(r.normal(size=(C, H, W))) for i in range(4)}
    targets = {i: r.normal(size=(C, H, W)) for i in range(4)}
    masked = [1, 3]
    got = mmr_loss(recon, targets, masked).item()
    want = 0.0
    for i in masked:
        diff = recon[i].data - targets[i]
        want += float(np.mean(diff * diff))
    want /= len(masked)
    assert abs(got - want) < 1e-12

    # Views outside the masked set cannot influence the value.
    recon[0] = Tensor(recon[0].data + 1000.0)
    targets[2] = targets[2] - 42.0
    assert mmr_loss(recon, targets, masked).item() == got


def test_loss_over_empty_mask_warns_and_has_no_gradient():
    with pytest.warns(UserWarning):
        loss = mmr_loss({}, {}, [])
    assert loss.item() == 0.0
    assert not loss.requires_grad


def test_loss_requires_every_masked_view():
    with pytest.raises(ContractError):
        mmr_loss({}, {}, [2])


# ---------------------------------------------------------------------------
# multi-view recovery


def test_recovery_goes_ascending_with_mask_token_fallback():
    dec = make_decoder(seed=1)
    feats = ring_features(6)
    feats[1] = ViewFeature(1, None, FeatureStatus.MASKED)
    feats[2] = ViewFeature(2, None, FeatureStatus.MASKED)
    trace = []
    out = recover_features(feats, {1, 2}, dec, OV, trace=trace)
    assert trace == [(1, "observed", "mask_token"), (2, "reconstructed", "observed")]
    assert out[1].status is FeatureStatus.RECONSTRUCTED
    assert out[2].status is FeatureStatus.RECONSTRUCTED
    # Observed views pass through as the same objects.
    for i in (0, 3, 4, 5):
        assert out[i] is feats[i]
    assert dec.invocations == 2


def test_later_recoveries_consume_earlier_ones():
    # View 2's reference must embed view 1's reconstruction, not a token.
    dec = make_decoder(seed=6)
    feats = ring_features(8)
    feats[1] = ViewFeature(1, None, FeatureStatus.MASKED)
    feats[2] = ViewFeature(2, None, FeatureStatus.MASKED)
    out = recover_features(feats, {1, 2}, dec, OV)
    ref2 = aggregate_reference(out[1], feats[3], dec, OV)
    assert np.array_equal(
        ref2.data[:, :, :OV], out[1].data.data[:, :, W - OV :]
    )


def test_recovery_rejects_bad_mask_sets():
    dec = make_decoder()
    feats = ring_features(5)
    with pytest.raises(ContractError):
        recover_features(feats, {0}, dec, OV)  # view 0 is not masked
    hidden = [ViewFeature(i, None, FeatureStatus.MASKED) for i in range(6)]
    with pytest.raises(ContractError):
        recover_features(hidden, set(range(6)), dec, OV)


def test_recovery_with_no_mask_is_a_no_op():
    dec = make_decoder()
    feats = ring_features(9)
    out = recover_features(feats, set(), dec, OV)
    assert out == feats
    assert dec.invocations == 0
