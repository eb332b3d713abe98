"""End-to-end occupancy pipeline: encode, lift, refine, classify.

Surround images are encoded per view by a shared column-local encoder,
masked views are either dropped (baseline) or rebuilt from their ring
neighbors, the per-view maps are lifted onto the voxel grid by
precomputed azimuth/height sampling, a pointwise refiner with positional
channels produces voxel features, optional prototype-memory retrieval
refines them, and a pointwise head emits per-voxel class logits.

Training optimizes class-weighted cross entropy plus an auxiliary
reconstruction loss on the views hidden by random view masking; the
prototype bank is updated by EMA after each gradient step.  Every random
choice is keyed by (seed, step) counters, so runs are bitwise
reproducible and resumable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .errors import ContractError, ParameterError
from .memory import (
    GateHead,
    PrototypeBank,
    VoxelFeatureBatch,
    refine,
    retrieval_weights,
    similarity,
    update_multi_proto,
    update_single_proto,
)
from .optim import AdamW
from .reconstruction import (
    DECODER_PRESETS,
    FeatureStatus,
    MmrDecoder,
    ViewFeature,
    mmr_loss,
    recover_features,
)
from .rings import RvmConfig, counter_rng, training_mask_sampler
from .scenes import N_SEMANTIC, SceneConfig, SceneSample

PATCH = 4  # pixels per feature cell, both axes

FMM_MODES = ("off", "single", "multi")


@dataclass
class PipelineConfig:
    """Everything that determines the model, its training, and its data."""

    scene: SceneConfig = field(default_factory=SceneConfig.desk)
    feature_channels: int = 16
    voxel_dim: int = 16
    decoder_preset: str = "desk"
    layer_scale_init: float = 1e-4
    use_mmr: bool = True
    fmm: str = "off"
    fmm_warmup: float = 0.5
    n_protos: int = 4
    proto_momentum: float = 0.1
    proto_temperature: float = 0.1
    rvm_p: float = 0.5
    rvm_max: int = 1
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 0.01
    epochs: int = 2
    beta_mmr: float = 1.0
    class_weight_cap: float = 10.0
    seed: int = 0

    def __post_init__(self):
        if self.fmm not in FMM_MODES:
            raise ParameterError(f"fmm must be one of {FMM_MODES}, got {self.fmm!r}")
        if self.decoder_preset not in DECODER_PRESETS:
            raise ParameterError(f"unknown decoder preset {self.decoder_preset!r}")
        c, h, w = self.scene.image_shape
        if h % PATCH or w % PATCH:
            raise ParameterError(f"image {h}x{w} must align to {PATCH}-pixel patches")
        if self.feature_channels % DECODER_PRESETS[self.decoder_preset]["heads"]:
            raise ParameterError(
                f"feature channels {self.feature_channels} must divide over the "
                f"{DECODER_PRESETS[self.decoder_preset]['heads']} decoder heads"
            )
        if self.beta_mmr < 0 or self.epochs < 1:
            raise ParameterError("beta_mmr must be nonnegative and epochs positive")
        if not 0.0 <= self.fmm_warmup < 1.0:
            raise ParameterError(f"fmm_warmup {self.fmm_warmup} must lie in [0, 1)")

    @property
    def feat_height(self) -> int:
        return self.scene.image_shape[1] // PATCH

    @property
    def feat_width(self) -> int:
        return self.scene.image_shape[2] // PATCH

    @property
    def overlap_cols(self) -> int:
        """Feature columns shared by adjacent views; at the desk geometry
        this is a quarter of the feature width."""
        return self.scene.overlap_px // PATCH

    @property
    def n_classes(self) -> int:
        return N_SEMANTIC + 1  # semantic classes plus free space

    @property
    def n_voxels(self) -> int:
        x, y, z = self.scene.grid_dims
        return x * y * z

    @classmethod
    def desk(cls, **kw) -> "PipelineConfig":
        return cls(**kw)

    @classmethod
    def full_scale(cls, **kw) -> "PipelineConfig":
        """Deployment-sized preset, configuration only."""
        kw.setdefault("scene", SceneConfig.full_scale())
        kw.setdefault("decoder_preset", "full")
        kw.setdefault("lr", 2e-4)
        kw.setdefault("epochs", 24)
        return cls(**kw)

    def to_dict(self) -> dict:
        d = {}
        for name, value in vars(self).items():
            if isinstance(value, SceneConfig):
                d[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(value).items()}
            elif isinstance(value, tuple):
                d[name] = list(value)
            else:
                d[name] = value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        scene_d = {
            k: tuple(v) if isinstance(v, list) else v for k, v in d.pop("scene").items()
        }
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(scene=SceneConfig(**scene_d), **kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


def build_lift(config: PipelineConfig):
    """Precompute voxel sampling against each view's feature map.

    Returns (matrices, covered, posenc): ``matrices[v]`` is (V, H*W) of
    bilinear column weights placing each voxel at its azimuth within view
    v's window and its height band's feature row; ``covered[v]`` flags the
    voxels inside that window; ``posenc`` is (V, 4) of normalized radius,
    azimuth sine/cosine, and height for the pointwise refiner.
    """
    scene = config.scene
    x_dim, y_dim, z_dim = scene.grid_dims
    fh, fw = config.feat_height, config.feat_width
    band = scene.image_shape[1] // z_dim

    cx = (np.arange(x_dim) + 0.5) * (2.0 * scene.extent / x_dim) - scene.extent
    cy = (np.arange(y_dim) + 0.5) * (2.0 * scene.extent / y_dim) - scene.extent
    gx, gy = np.meshgrid(cx, cy, indexing="ij")
    theta = np.mod(np.arctan2(gy, gx), 2.0 * np.pi)  # (X, Y)
    radius = np.hypot(gx, gy)

    iz = np.arange(z_dim)
    feat_row = (band * (z_dim - 1 - iz)) // PATCH  # height band's feature row

    v_total = x_dim * y_dim * z_dim
    theta_flat = np.repeat(theta.reshape(-1), z_dim)
    radius_flat = np.repeat(radius.reshape(-1), z_dim)
    rows_flat = np.tile(feat_row, x_dim * y_dim)
    z_flat = np.tile(iz, x_dim * y_dim)

    wp = scene.pano_width
    pc = theta_flat / (2.0 * np.pi / wp) - 0.5  # panorama column coordinate

    matrices = np.zeros((scene.n_views, v_total, fh * fw))
    covered = np.zeros((scene.n_views, v_total), dtype=bool)
    for view in range(scene.n_views):
        u = np.mod(pc - scene.window_start(view), wp)
        u = np.where(u > wp / 2.0, u - wp, u)  # wrap into (-wp/2, wp/2]
        fc = (u - (PATCH - 1) / 2.0) / PATCH
        inside = (fc >= 0.0) & (fc <= fw - 1)
        covered[view] = inside
        c0 = np.minimum(np.floor(fc).astype(np.int64), fw - 2)
        c0 = np.maximum(c0, 0)
        frac = fc - c0
        tok0 = rows_flat * fw + c0
        tok1 = tok0 + 1
        vv = np.flatnonzero(inside)
        np.add.at(matrices[view], (vv, tok0[vv]), 1.0 - frac[vv])
        np.add.at(matrices[view], (vv, tok1[vv]), frac[vv])

    posenc = np.stack(
        [
            radius_flat / (scene.extent * np.sqrt(2.0)),
            np.sin(theta_flat),
            np.cos(theta_flat),
            (z_flat + 0.5) / z_dim,
        ],
        axis=1,
    )
    return matrices, covered, posenc


def compute_class_weights(scenes, n_classes: int, cap: float = 10.0) -> np.ndarray:
    """Inverse-frequency class weights over a scene list, capped at ``cap``."""
    counts = np.zeros(n_classes, dtype=np.int64)
    for s in scenes:
        counts += np.bincount(s.grid.labels.reshape(-1), minlength=n_classes)
    total = counts.sum()
    mean = total / n_classes
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, mean / np.maximum(counts, 1), cap)
    return np.minimum(w, cap)


class PipelineState:
    """All mutable training state: parameters, bank, optimizer, step."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        c = config.feature_channels
        d = config.voxel_dim
        rng = np.random.default_rng(config.seed)
        params = {}

        def linear(name, n_in, n_out):
            params[f"{name}.w"] = Tensor(
                rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_in, n_out)), requires_grad=True
            )
            params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)

        c_in = config.scene.image_shape[0]
        linear("enc.patch", c_in * PATCH * PATCH, c)
        linear("enc.mix", c, c)
        linear("ref.fc1", c + 4, d)
        linear("ref.fc2", d, d)
        linear("head.fc1", d, d)
        linear("head.fc2", d, config.n_classes)

        self.decoder = None
        if config.use_mmr:
            self.decoder = MmrDecoder(
                c,
                config.feat_height,
                config.feat_width,
                seed=config.seed + 1,
                layer_scale_init=config.layer_scale_init,
                **DECODER_PRESETS[config.decoder_preset],
            )
            for name, p in self.decoder.params.items():
                params[f"dec.{name}"] = p

        self.gate = None
        self.bank = None
        if config.fmm != "off":
            n_protos = 1 if config.fmm == "single" else config.n_protos
            self.bank = PrototypeBank.create(
                N_SEMANTIC,
                d,
                n_protos=n_protos,
                momentum=config.proto_momentum,
                temperature=config.proto_temperature,
            )
            self.gate = GateHead(d, N_SEMANTIC, seed=config.seed + 2)
            params.update(self.gate.params)

        self.params = params
        self.lift_matrices, self.lift_covered, self.posenc = build_lift(config)
        self.class_weights = np.ones(config.n_classes)
        self.step = 0
        self.optimizer = AdamW(
            params,
            lr=config.lr,
            betas=config.betas,
            weight_decay=config.weight_decay,
        )
        self.rvm = RvmConfig(
            p_mask=config.rvm_p,
            max_masked=config.rvm_max,
            seed=config.seed,
            n_views=config.scene.n_views,
        )

    # -- forward pieces ----------------------------------------------------

    def encode_view(self, image: np.ndarray) -> Tensor:
        """One image (C_in, H, W) to a (C, fh, fw) feature map.

        Strictly column-local: each feature column depends only on its own
        PATCH-wide image column block, so feature maps inherit the exact
        overlap of the source views.
        """
        c_in, h, w = image.shape
        fh, fw = h // PATCH, w // PATCH
        patches = (
            image.reshape(c_in, fh, PATCH, fw, PATCH)
            .transpose(1, 3, 0, 2, 4)
            .reshape(fh * fw, c_in * PATCH * PATCH)
        )
        x = ad.add(ad.matmul(Tensor(patches), self.params["enc.patch.w"]), self.params["enc.patch.b"])
        x = ad.gelu(x)
        x = ad.add(ad.matmul(x, self.params["enc.mix.w"]), self.params["enc.mix.b"])
        return ad.reshape(ad.transpose(x), (self.config.feature_channels, fh, fw))

    def encode(self, images: np.ndarray, masked=frozenset()) -> list:
        """Per-view features; masked views carry no data at all."""
        feats = []
        for v in range(self.config.scene.n_views):
            if v in masked:
                feats.append(ViewFeature(v, None, FeatureStatus.MASKED))
            else:
                feats.append(ViewFeature(v, self.encode_view(images[v]), FeatureStatus.OBSERVED))
        return feats

    def lift(self, features: list) -> Tensor:
        """Average each voxel's feature samples over the views that saw it.

        Views without data are skipped entirely; voxels covered only by
        missing views end up with an all-zero sample.
        """
        c = self.config.feature_channels
        total = None
        count = np.zeros(self.config.n_voxels)
        for v, f in enumerate(features):
            if f.data is None:
                continue
            tokens = ad.transpose(ad.reshape(f.data, (c, -1)))
            sampled = ad.matmul(Tensor(self.lift_matrices[v]), tokens)
            total = sampled if total is None else ad.add(total, sampled)
            count += self.lift_covered[v]
        if total is None:
            raise ContractError("cannot lift with every view missing")
        inv = np.where(count > 0, 1.0 / np.maximum(count, 1.0), 0.0)
        return ad.mul(total, Tensor(inv[:, None]))

    def refiner(self, pre: Tensor) -> Tensor:
        """Pointwise voxel refiner over sampled channels plus position."""
        x = ad.concat([pre, Tensor(self.posenc)], axis=1)
        x = ad.gelu(ad.add(ad.matmul(x, self.params["ref.fc1.w"]), self.params["ref.fc1.b"]))
        return ad.add(ad.matmul(x, self.params["ref.fc2.w"]), self.params["ref.fc2.b"])

    def occupancy_head(self, x: Tensor) -> Tensor:
        h = ad.gelu(ad.add(ad.matmul(x, self.params["head.fc1.w"]), self.params["head.fc1.b"]))
        return ad.add(ad.matmul(h, self.params["head.fc2.w"]), self.params["head.fc2.b"])

    def forward(self, images: np.ndarray, masked=frozenset(), inject_memory: bool = True):
        """Logits plus the intermediates needed for losses and updates.

        inject_memory=False skips the prototype residual (used during the
        memory warm-up phase of training) while the bank keeps accumulating.
        """
        masked = frozenset(masked)
        if len(masked) >= self.config.scene.n_views:
            raise ContractError("at least one view must remain unmasked")
        feats = self.encode(images, masked)
        recon = {}
        if self.config.use_mmr and masked:
            feats = recover_features(feats, masked, self.decoder, self.config.overlap_cols)
            recon = {i: feats[i].data for i in masked}
        pre = self.lift(feats)
        voxels = self.refiner(pre)
        gate = None
        if self.bank is not None and inject_memory:
            gate = self.gate(voxels)
            sem = ad.slice_axis(gate, 1, 1, N_SEMANTIC + 1)
            weights = retrieval_weights(self.bank, similarity(self.bank, voxels.data))
            refined = refine(VoxelFeatureBatch(voxels, gate=sem), self.bank, weights)
        else:
            refined = voxels
        logits = self.occupancy_head(refined)
        return {
            "logits": logits,
            "pre": pre,
            "voxels": voxels,
            "features": feats,
            "recon": recon,
            "gate": gate,
        }

    # -- training ----------------------------------------------------------

    def train_step(self, sample: SceneSample, step: int, total_steps: int = None) -> dict:
        masked = training_mask_sampler(self.rvm, step)
        inject = total_steps is None or step >= self.config.fmm_warmup * total_steps
        out = self.forward(sample.images, masked, inject_memory=inject)
        labels = sample.grid.labels.reshape(-1).astype(np.int64)
        l_occ = ad.cross_entropy(out["logits"], labels, class_weights=self.class_weights)

        l_mmr_value = 0.0
        if self.config.use_mmr and masked:
            targets = {
                i: self.encode_view(sample.images[i]).detach().data for i in masked
            }
            l_mmr = mmr_loss(out["recon"], targets, masked)
            total = ad.add(l_occ, ad.scale(l_mmr, self.config.beta_mmr))
            l_mmr_value = l_mmr.item()
        else:
            total = l_occ

        self.optimizer.zero_grad()
        backward(total)
        self.optimizer.step()

        if self.bank is not None:
            update = update_single_proto if self.config.fmm == "single" else update_multi_proto
            update(self.bank, out["voxels"].data, labels)

        self.step = step + 1
        return {
            "step": step,
            "l_occ": float(l_occ.item()),
            "l_mmr": float(l_mmr_value),
            "masked": sorted(masked),
        }

    def epoch_order(self, n: int, epoch: int) -> np.ndarray:
        """Deterministic shuffle for one epoch, a pure function of (seed, epoch)."""
        return counter_rng(self.config.seed, 10**9 + epoch).permutation(n)

    def train(self, scenes: list, log=None, stop_after: int = None) -> list:
        """Run the configured number of epochs, resuming from ``self.step``.

        ``log`` receives one dict per step.  ``stop_after`` limits how many
        steps this invocation processes (simulating an interruption) without
        changing the planned schedule.  Returns the collected entries.
        """
        if not scenes:
            raise ParameterError("training needs at least one scene")
        self.class_weights = compute_class_weights(
            scenes, self.config.n_classes, self.config.class_weight_cap
        )
        n = len(scenes)
        total_steps = self.config.epochs * n
        last = total_steps if stop_after is None else min(total_steps, self.step + stop_after)
        history = []
        for step in range(self.step, last):
            epoch, pos = divmod(step, n)
            order = self.epoch_order(n, epoch)
            entry = self.train_step(scenes[order[pos]], step, total_steps=total_steps)
            history.append(entry)
            if log is not None:
                log(entry)
        return history

    # -- inference ---------------------------------------------------------

    def infer(self, images: np.ndarray, masked=frozenset()) -> np.ndarray:
        """Predicted voxel labels (X, Y, Z) for one sample."""
        logits = self.forward(images, masked)["logits"].data
        return logits.argmax(axis=1).astype(np.uint8).reshape(self.config.scene.grid_dims)


def format_log_line(entry: dict) -> str:
    """Canonical line-delimited JSON for training logs (key-sorted, no time)."""
    return json.dumps(entry, sort_keys=True, separators=(",", ":"))
