"""Prototype memory over voxel features, with gated retrieval refinement.

The bank keeps a few prototype vectors per semantic class, maintained by
exponential moving averages of ground-truth-labeled voxel features during
training; no gradient ever reaches the bank.  At inference, features query
the bank by cosine similarity, a temperature softmax over each class's
sub-prototypes turns similarities into retrieval weights, and a gate head
decides how much of each class's retrieved prototype to mix back into the
feature as a residual correction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, ParameterError, ShapeError
from .rings import counter_rng

EPS_NORM = 1e-8


@dataclass
class PrototypeBank:
    """Per-class prototype vectors updated by EMA only.

    ``protos`` is (n_classes, n_protos, dim); ``initialized`` flags which
    slots have received their bootstrap value.  Labels fed to updates are
    voxel class ids where 0 means free space and is ignored; class k
    updates bank row k-1.
    """

    n_classes: int
    n_protos: int
    dim: int
    momentum: float = 0.1
    temperature: float = 0.1
    protos: np.ndarray = field(default=None)
    initialized: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.n_classes < 1 or self.n_protos < 1 or self.dim < 1:
            raise ParameterError("bank needs positive n_classes, n_protos and dim")
        if not 0.0 < self.momentum <= 1.0:
            raise ParameterError(f"momentum must be in (0, 1], got {self.momentum}")
        if not self.temperature > 0.0:
            raise ParameterError(f"temperature must be positive, got {self.temperature}")
        if self.protos is None:
            self.protos = np.zeros((self.n_classes, self.n_protos, self.dim))
        if self.initialized is None:
            self.initialized = np.zeros((self.n_classes, self.n_protos), dtype=bool)
        if self.protos.shape != (self.n_classes, self.n_protos, self.dim):
            raise ShapeError(f"protos shape {self.protos.shape} does not match the bank dims")
        if self.initialized.shape != (self.n_classes, self.n_protos):
            raise ShapeError("initialized flags do not match the bank dims")

    @classmethod
    def create(cls, n_classes, dim, n_protos=4, momentum=0.1, temperature=0.1):
        return cls(
            n_classes=n_classes,
            n_protos=n_protos,
            dim=dim,
            momentum=momentum,
            temperature=temperature,
        )

    def copy(self) -> "PrototypeBank":
        return PrototypeBank(
            n_classes=self.n_classes,
            n_protos=self.n_protos,
            dim=self.dim,
            momentum=self.momentum,
            temperature=self.temperature,
            protos=self.protos.copy(),
            initialized=self.initialized.copy(),
        )


@dataclass
class VoxelFeatureBatch:
    """Voxel features (V, D) plus optional gate scores and labels."""

    features: Tensor
    gate: Tensor | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ShapeError(f"features must be (V, D), got {self.features.shape}")
        v = self.features.shape[0]
        if self.gate is not None and (self.gate.ndim != 2 or self.gate.shape[0] != v):
            raise ShapeError(f"gate must be (V, K), got {self.gate.shape}")
        if self.labels is not None and self.labels.shape != (v,):
            raise ShapeError(f"labels must be ({v},), got {self.labels.shape}")


def _check_update_args(bank, features, labels):
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if features.ndim != 2 or features.shape[1] != bank.dim:
        raise ShapeError(f"features must be (V, {bank.dim}), got {features.shape}")
    if labels.shape != (features.shape[0],):
        raise ShapeError(f"labels must be ({features.shape[0]},), got {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise ShapeError(f"labels must be integers, got dtype {labels.dtype}")
    if labels.size and labels.max() > bank.n_classes:
        raise ParameterError(
            f"label {labels.max()} exceeds the bank's {bank.n_classes} classes"
        )
    return features, labels


def _ema(proto: np.ndarray, mean: np.ndarray, momentum: float) -> np.ndarray:
    return (1.0 - momentum) * proto + momentum * mean


def update_single_proto(bank: PrototypeBank, features, labels) -> PrototypeBank:
    """EMA step toward each present class's batch-mean feature.

    The first update of a class adopts the mean outright (bootstrap); the
    bank is mutated in place and returned.
    """
    features, labels = _check_update_args(bank, features, labels)
    present = [int(k) for k in np.unique(labels) if k != 0]
    if not present:
        warnings.warn("no labeled voxels in batch; bank unchanged", stacklevel=2)
        return bank
    for k in present:
        row = k - 1
        mean = features[labels == k].mean(axis=0)
        for j in range(bank.n_protos):
            if bank.initialized[row, j]:
                bank.protos[row, j] = _ema(bank.protos[row, j], mean, bank.momentum)
            else:
                bank.protos[row, j] = mean
                bank.initialized[row, j] = True
    return bank


def _bootstrap_directions(row: int, n_protos: int, dim: int) -> np.ndarray:
    """Deterministic zero-mean spread used to split fresh sub-prototypes."""
    dirs = counter_rng(row, n_protos).standard_normal((n_protos, dim))
    return dirs - dirs.mean(axis=0, keepdims=True)


def update_multi_proto(bank: PrototypeBank, features, labels) -> PrototypeBank:
    """EMA step with hard assignment of voxels to their nearest sub-prototype.

    A class's first update bootstraps every sub-prototype at the batch
    mean plus a small deterministic spread, so later batches can pull them
    apart; with a single sub-prototype the spread is identically zero and
    this degenerates to ``update_single_proto`` bit for bit.  Sub-prototypes
    that attract no voxels in a batch are left untouched.
    """
    features, labels = _check_update_args(bank, features, labels)
    present = [int(k) for k in np.unique(labels) if k != 0]
    if not present:
        warnings.warn("no labeled voxels in batch; bank unchanged", stacklevel=2)
        return bank
    for k in present:
        row = k - 1
        feats = features[labels == k]
        if not bank.initialized[row].all():
            mean = feats.mean(axis=0)
            spread = _bootstrap_directions(row, bank.n_protos, bank.dim)
            scale = 0.01 * max(float(np.sqrt(np.mean(mean * mean))), 1e-2)
            bank.protos[row] = mean + scale * spread
            bank.initialized[row] = True
            continue
        sims = _cosine(feats, bank.protos[row])  # (v_k, n_protos)
        assign = sims.argmax(axis=1)
        for j in range(bank.n_protos):
            chosen = feats[assign == j]
            if chosen.shape[0]:
                bank.protos[row, j] = _ema(bank.protos[row, j], chosen.mean(axis=0), bank.momentum)
    return bank


def _cosine(x: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Cosine similarity with EPS_NORM added to each norm."""
    xn = np.linalg.norm(x, axis=-1) + EPS_NORM
    pn = np.linalg.norm(protos, axis=-1) + EPS_NORM
    return (x @ np.moveaxis(protos, -1, -2)) / (xn[:, None] * pn[None])


def similarity(bank: PrototypeBank, features) -> np.ndarray:
    """Cosine similarity of every feature to every sub-prototype, (V, K, N_p)."""
    features = np.asarray(features.data if isinstance(features, Tensor) else features)
    if features.ndim != 2 or features.shape[1] != bank.dim:
        raise ShapeError(f"features must be (V, {bank.dim}), got {features.shape}")
    xn = np.linalg.norm(features, axis=1) + EPS_NORM
    pn = np.linalg.norm(bank.protos, axis=2) + EPS_NORM
    dots = np.einsum("vd,kjd->vkj", features, bank.protos)
    return dots / (xn[:, None, None] * pn[None])


def retrieval_weights(bank: PrototypeBank, sims: np.ndarray) -> np.ndarray:
    """Temperature softmax over each class's initialized sub-prototypes.

    Uninitialized slots get zero weight; a class with no initialized slot
    yields an all-zero row so retrieval from it is a no-op.
    """
    if sims.shape[1:] != (bank.n_classes, bank.n_protos):
        raise ShapeError(f"similarities {sims.shape} do not match the bank dims")
    mask = np.broadcast_to(bank.initialized[None], sims.shape)
    z = sims / bank.temperature
    zmax = np.where(mask, z, -np.inf).max(axis=2, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    e = np.where(mask, np.exp(np.where(mask, z - zmax, 0.0)), 0.0)
    total = e.sum(axis=2, keepdims=True)
    return np.divide(e, total, out=np.zeros_like(e), where=total > 0)


class GateHead:
    """Linear layer plus softmax scoring class relevance per voxel.

    The output distribution spans an abstain slot (column 0) followed by
    the semantic classes, mirroring the label space where 0 is free.  The
    abstain column has no prototype behind it, so probability assigned
    there withholds the residual injection; callers pass columns 1..K to
    ``refine``.
    """

    def __init__(self, dim: int, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        cols = n_classes + 1
        bias = np.zeros(cols)
        bias[0] = 3.0  # abstain-heavy start: injection ramps in as the gate learns
        self.params = {
            "gate.w": Tensor(rng.normal(0.0, 0.02, size=(dim, cols)), requires_grad=True),
            "gate.b": Tensor(bias, requires_grad=True),
        }

    def __call__(self, features: Tensor) -> Tensor:
        logits = ad.add(ad.matmul(features, self.params["gate.w"]), self.params["gate.b"])
        return ad.softmax(logits)


def refine(batch: VoxelFeatureBatch, bank: PrototypeBank, weights: np.ndarray) -> Tensor:
    """Gated residual correction from retrieved prototypes.

    Each voxel receives x + sum_k gate_k * (sum_j weights_kj * proto_kj).
    Retrieval weights and prototypes enter as constants: gradients flow to
    the features and the gate only, never into the bank.
    """
    if batch.gate is None:
        raise ContractError("refine needs gate scores on the batch; run the gate head first")
    v, d = batch.features.shape
    if d != bank.dim or batch.gate.shape[1] != bank.n_classes:
        raise ShapeError(
            f"batch ({batch.features.shape}, gate {batch.gate.shape}) does not match "
            f"a bank of {bank.n_classes} classes x dim {bank.dim}"
        )
    if weights.shape != (v, bank.n_classes, bank.n_protos):
        raise ShapeError(
            f"weights {weights.shape} must be (V, K, N_p) = "
            f"{(v, bank.n_classes, bank.n_protos)}"
        )
    retrieved = np.einsum("vkj,kjd->vkd", weights, bank.protos)
    return ad.gated_residual(batch.features, batch.gate, Tensor(retrieved))
