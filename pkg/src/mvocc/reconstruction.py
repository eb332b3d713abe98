"""Reconstruction of masked view features from their ring neighbors.

A masked view's feature map is rebuilt from a reference assembled out of
the three things known about it: the right edge of its left neighbor, the
left edge of its right neighbor (both exact duplicates of the masked
view's own edge columns, by ring-overlap construction), and a learned
mask token tiled over the unobserved center.  A small pre-norm
transformer decoder then predicts the full feature map from that
reference.  When several views are missing they are recovered in
ascending index order, so earlier reconstructions can serve as neighbor
context for later ones; a neighbor that is still masked contributes a
mask-token tile instead of its edge.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError, ShapeError


class FeatureStatus(Enum):
    OBSERVED = "observed"
    MASKED = "masked"
    RECONSTRUCTED = "reconstructed"


@dataclass
class ViewFeature:
    """One view's feature map (C, H, W) and how it came to exist.

    Masked views carry no data at all, which makes it structurally
    impossible to consume a withheld camera by accident.
    """

    view: int
    data: Tensor | None
    status: FeatureStatus

    def __post_init__(self):
        if self.status is FeatureStatus.MASKED:
            if self.data is not None:
                raise ContractError(f"masked view {self.view} must not carry features")
        elif self.data is None or self.data.ndim != 3:
            raise ShapeError(f"view {self.view} needs a (C, H, W) feature map")


DECODER_PRESETS = {
    "desk": {"blocks": 2, "heads": 2, "mlp_ratio": 4},
    "full": {"blocks": 6, "heads": 8, "mlp_ratio": 4},
}


class MmrDecoder:
    """Transformer decoder over the H*W spatial tokens of one view.

    Blocks are pre-norm residual attention + MLP pairs, each residual
    branch scaled by a learned per-channel gain initialized near zero so
    an untrained decoder is close to the identity.
    """

    def __init__(
        self,
        channels: int,
        height: int,
        width: int,
        blocks: int = 2,
        heads: int = 2,
        mlp_ratio: int = 4,
        seed: int = 0,
        layer_scale_init: float = 1e-4,
    ):
        if channels % heads != 0:
            raise ParameterError(f"channels {channels} must divide evenly over {heads} heads")
        if blocks < 1 or heads < 1 or mlp_ratio < 1:
            raise ParameterError("blocks, heads and mlp_ratio must all be positive")
        self.channels = channels
        self.height = height
        self.width = width
        self.blocks = blocks
        self.heads = heads
        self.mlp_ratio = mlp_ratio
        self.invocations = 0  # forward passes, for overhead accounting

        rng = np.random.default_rng(seed)
        tokens = height * width
        hidden = channels * mlp_ratio

        def linear(name, n_in, n_out):
            p[f"{name}.w"] = Tensor(rng.normal(0.0, 0.02, size=(n_in, n_out)), requires_grad=True)
            p[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)

        p = {}
        p["mask_token"] = Tensor(rng.normal(0.0, 0.02, size=channels), requires_grad=True)
        p["pos_embed"] = Tensor(rng.normal(0.0, 0.02, size=(tokens, channels)), requires_grad=True)
        for b in range(blocks):
            for ln in (f"block{b}.ln1", f"block{b}.ln2"):
                p[f"{ln}.gain"] = Tensor(np.ones(channels), requires_grad=True)
                p[f"{ln}.bias"] = Tensor(np.zeros(channels), requires_grad=True)
            for proj in ("wq", "wk", "wv", "wo"):
                linear(f"block{b}.attn.{proj}", channels, channels)
            linear(f"block{b}.mlp.fc1", channels, hidden)
            linear(f"block{b}.mlp.fc2", hidden, channels)
            for ls in ("ls1", "ls2"):
                p[f"block{b}.{ls}"] = Tensor(
                    np.full(channels, layer_scale_init), requires_grad=True
                )
        self.params = p

    @classmethod
    def from_preset(cls, preset: str, channels: int, height: int, width: int, seed: int = 0):
        if preset not in DECODER_PRESETS:
            raise ParameterError(f"unknown decoder preset {preset!r}")
        return cls(channels, height, width, seed=seed, **DECODER_PRESETS[preset])

    def tiled_mask_token(self, width: int) -> Tensor:
        """The mask token repeated over an (C, H, width) region."""
        tok = ad.reshape(self.params["mask_token"], (self.channels, 1, 1))
        return ad.broadcast_to(tok, (self.channels, self.height, width))

    def _attend(self, y: Tensor, b: int) -> Tensor:
        p = self.params
        q = ad.add(ad.matmul(y, p[f"block{b}.attn.wq.w"]), p[f"block{b}.attn.wq.b"])
        k = ad.add(ad.matmul(y, p[f"block{b}.attn.wk.w"]), p[f"block{b}.attn.wk.b"])
        v = ad.add(ad.matmul(y, p[f"block{b}.attn.wv.w"]), p[f"block{b}.attn.wv.b"])
        dh = self.channels // self.heads
        outs = []
        for head in range(self.heads):
            lo, hi = head * dh, (head + 1) * dh
            qi = ad.slice_axis(q, 1, lo, hi)
            ki = ad.slice_axis(k, 1, lo, hi)
            vi = ad.slice_axis(v, 1, lo, hi)
            scores = ad.scale(ad.matmul(qi, ad.transpose(ki)), 1.0 / np.sqrt(dh))
            outs.append(ad.matmul(ad.softmax(scores), vi))
        o = outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)
        return ad.add(ad.matmul(o, p[f"block{b}.attn.wo.w"]), p[f"block{b}.attn.wo.b"])

    def forward_tokens(self, tokens: Tensor) -> Tensor:
        """Run the block stack on (tokens, channels) with position added."""
        p = self.params
        x = ad.add(tokens, p["pos_embed"])
        for b in range(self.blocks):
            y = ad.layer_norm(x, p[f"block{b}.ln1.gain"], p[f"block{b}.ln1.bias"])
            x = ad.add(x, ad.mul(self._attend(y, b), p[f"block{b}.ls1"]))
            y = ad.layer_norm(x, p[f"block{b}.ln2.gain"], p[f"block{b}.ln2.bias"])
            h = ad.gelu(ad.add(ad.matmul(y, p[f"block{b}.mlp.fc1.w"]), p[f"block{b}.mlp.fc1.b"]))
            h = ad.add(ad.matmul(h, p[f"block{b}.mlp.fc2.w"]), p[f"block{b}.mlp.fc2.b"])
            x = ad.add(x, ad.mul(h, p[f"block{b}.ls2"]))
        return x


def _edge(dec: MmrDecoder, feature: ViewFeature, side: str, overlap: int):
    """A neighbor's shared-edge columns, or a mask-token tile if withheld."""
    if feature.status is FeatureStatus.MASKED:
        return dec.tiled_mask_token(overlap), "mask_token"
    w = feature.data.shape[2]
    if side == "left":
        return ad.slice_axis(feature.data, 2, w - overlap, w), feature.status.value
    return ad.slice_axis(feature.data, 2, 0, overlap), feature.status.value


def aggregate_reference(
    left: ViewFeature, right: ViewFeature, dec: MmrDecoder, overlap: int
) -> Tensor:
    """Reference map for a masked view from its two ring neighbors.

    Layout along width: [left neighbor's last ``overlap`` columns |
    mask-token tile | right neighbor's first ``overlap`` columns].  Both
    neighbors must be available (observed or already reconstructed);
    recovery ordering is the caller's job, see ``recover_features``.
    """
    for side, f in (("left", left), ("right", right)):
        if f.status is FeatureStatus.MASKED:
            raise ContractError(
                f"{side} neighbor (view {f.view}) is masked; recover it first or "
                "substitute the mask token via recover_features"
            )
    c, h, w = left.data.shape
    if right.data.shape != (c, h, w):
        raise ShapeError(f"neighbor shapes differ: {left.data.shape} vs {right.data.shape}")
    if not 0 < 2 * overlap < w:
        raise ParameterError(f"overlap {overlap} invalid for feature width {w}")
    if (dec.channels, dec.height, dec.width) != (c, h, w):
        raise ShapeError(
            f"decoder built for {(dec.channels, dec.height, dec.width)}, features are {(c, h, w)}"
        )
    left_edge, _ = _edge(dec, left, "left", overlap)
    right_edge, _ = _edge(dec, right, "right", overlap)
    center = dec.tiled_mask_token(w - 2 * overlap)
    return ad.concat([left_edge, center, right_edge], axis=2)


def reconstruct(reference: Tensor, dec: MmrDecoder) -> Tensor:
    """Predict a full (C, H, W) feature map from a reference map."""
    c, h, w = reference.shape
    if (dec.channels, dec.height, dec.width) != (c, h, w):
        raise ShapeError(
            f"decoder built for {(dec.channels, dec.height, dec.width)}, reference is {(c, h, w)}"
        )
    dec.invocations += 1
    tokens = ad.transpose(ad.reshape(reference, (c, h * w)))
    out = dec.forward_tokens(tokens)
    return ad.reshape(ad.transpose(out), (c, h, w))


def recover_features(
    features: list, masked, dec: MmrDecoder, overlap: int, trace: list | None = None
) -> list:
    """Reconstruct every masked view, ascending index order.

    Earlier reconstructions become neighbor context for later ones; a
    neighbor that is still masked contributes a mask-token tile.  Returns
    a new feature list; observed views pass through untouched.  ``trace``,
    when given, records (view, left source, right source) per recovery.
    """
    n = len(features)
    masked = sorted(masked)
    if len(masked) >= n:
        raise ContractError("cannot recover with every view masked")
    out = list(features)
    for i in masked:
        if out[i].status is not FeatureStatus.MASKED:
            raise ContractError(f"view {i} is {out[i].status.value}, expected masked")
    for i in masked:
        left, right = out[(i - 1) % n], out[(i + 1) % n]
        left_edge, left_src = _edge(dec, left, "left", overlap)
        right_edge, right_src = _edge(dec, right, "right", overlap)
        width = dec.width
        center = dec.tiled_mask_token(width - 2 * overlap)
        reference = ad.concat([left_edge, center, right_edge], axis=2)
        rebuilt = reconstruct(reference, dec)
        out[i] = ViewFeature(i, rebuilt, FeatureStatus.RECONSTRUCTED)
        if trace is not None:
            trace.append((i, left_src, right_src))
    return out


def mmr_loss(reconstructed: dict, targets: dict, masked) -> Tensor:
    """Mean per-view MSE between reconstructions and their targets.

    Only masked views contribute.  An empty masked set yields a gradient-
    free zero and a warning, so optimizer steps stay well defined.
    """
    masked = sorted(masked)
    if not masked:
        warnings.warn("mmr_loss over an empty masked set is identically zero", stacklevel=2)
        return Tensor(0.0)
    total = None
    for i in masked:
        if i not in reconstructed or i not in targets:
            raise ContractError(f"masked view {i} missing from reconstruction or target maps")
        target = targets[i]
        target = target if isinstance(target, Tensor) else Tensor(target)
        term = ad.mse(reconstructed[i], target)
        total = term if total is None else ad.add(total, term)
    return ad.scale(total, 1.0 / len(masked))
