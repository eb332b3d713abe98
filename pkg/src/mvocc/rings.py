"""Surround camera ring geometry and missing-view masking.

Views sit on a ring at equal yaw spacing, each overlapping both angular
neighbors.  Mask plans describe which views are withheld: deterministic
plans name the views outright, stochastic plans draw a fresh uniform
subset per sample from a counter-based generator, so the mask for sample
``i`` never depends on evaluation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError

RING_NAMES_6 = ("FRONT", "FRONT_RIGHT", "BACK_RIGHT", "BACK", "BACK_LEFT", "FRONT_LEFT")

_MASK64 = (1 << 64) - 1


def counter_rng(seed: int, counter: int) -> np.random.Generator:
    """Deterministic generator keyed by (seed, counter), order-independent."""
    key = np.array([int(seed) & _MASK64, int(counter) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class CameraRing:
    """Geometry of an N-camera surround rig with adjacent-view overlap.

    ``fov`` is the horizontal field of view in radians and must exceed the
    yaw spacing so adjacent frusta overlap.  ``overlap_cols`` counts the
    feature columns shared by each adjacent pair after encoding a view to
    width ``feature_width``.
    """

    n_views: int = 6
    fov: float = 2.0 * math.pi * (32.0 / 144.0)
    feature_width: int = 8
    overlap_cols: int = 2
    names: tuple = field(default=None)

    def __post_init__(self):
        if self.n_views < 2:
            raise ParameterError(f"a ring needs at least 2 views, got {self.n_views}")
        if not self.fov > 2.0 * math.pi / self.n_views:
            raise ParameterError(
                f"fov {self.fov:.4f} rad must exceed the yaw spacing "
                f"{2.0 * math.pi / self.n_views:.4f} rad or adjacent views cannot overlap"
            )
        if self.overlap_cols < 1 or 2 * self.overlap_cols >= self.feature_width:
            raise ParameterError(
                f"overlap_cols must satisfy 1 <= 2*w < feature width, got "
                f"w={self.overlap_cols}, width={self.feature_width}"
            )
        if self.names is None:
            names = RING_NAMES_6 if self.n_views == 6 else tuple(
                f"VIEW_{i}" for i in range(self.n_views)
            )
            object.__setattr__(self, "names", names)
        elif len(self.names) != self.n_views:
            raise ParameterError(f"{len(self.names)} names for {self.n_views} views")

    def yaw(self, view: int) -> float:
        """Ring azimuth of a view's optical axis, radians in [0, 2pi)."""
        self._check_view(view)
        return 2.0 * math.pi * view / self.n_views

    def _check_view(self, view: int) -> None:
        if not 0 <= view < self.n_views:
            raise ParameterError(f"view index {view} out of range for {self.n_views} views")


def neighbors(ring: CameraRing, view: int):
    """Indices of the angular neighbors (left, right), wrapping the ring."""
    ring._check_view(view)
    n = ring.n_views
    return ((view - 1) % n, (view + 1) % n)


@dataclass(frozen=True)
class MaskPlan:
    """Which views are withheld at evaluation time.

    ``deterministic`` plans always return the same set; ``stochastic``
    plans draw a uniform k-subset keyed by (seed, sample_id).
    """

    kind: str
    n_views: int = 6
    views: tuple = ()
    k: int = 0
    seed: int = 0

    @classmethod
    def deterministic(cls, views, n_views: int = 6) -> "MaskPlan":
        views = tuple(sorted(set(int(v) for v in views)))
        if any(v < 0 or v >= n_views for v in views):
            raise ParameterError(f"view indices {views} out of range for {n_views} views")
        if len(views) >= n_views:
            raise ParameterError("cannot mask every view; at least one must remain")
        return cls(kind="deterministic", n_views=n_views, views=views, k=len(views))

    @classmethod
    def stochastic(cls, k: int, seed: int, n_views: int = 6) -> "MaskPlan":
        k = int(k)
        if not 0 <= k < n_views:
            raise ParameterError(f"k={k} must leave at least one of {n_views} views")
        return cls(kind="stochastic", n_views=n_views, k=k, seed=int(seed))

    def to_json(self) -> str:
        return json.dumps(
            {"kind": self.kind, "views": list(self.views), "k": self.k, "seed": self.seed}
        )

    @classmethod
    def from_json(cls, text: str, n_views: int = 6) -> "MaskPlan":
        d = json.loads(text)
        if d.get("kind") == "deterministic":
            return cls.deterministic(d["views"], n_views=n_views)
        if d.get("kind") == "stochastic":
            return cls.stochastic(d["k"], d["seed"], n_views=n_views)
        raise ParameterError(f"unknown mask plan kind {d.get('kind')!r}")


def resolve_mask(plan: MaskPlan, sample_id: int) -> frozenset:
    """The set of masked view indices for one sample.

    Deterministic plans ignore ``sample_id``.  Stochastic plans are a pure
    function of (plan.seed, sample_id), so evaluation order and batching
    cannot change which views a given sample loses.
    """
    if plan.kind == "deterministic":
        return frozenset(plan.views)
    if plan.kind != "stochastic":
        raise ParameterError(f"unknown mask plan kind {plan.kind!r}")
    if plan.k == 0:
        return frozenset()
    rng = counter_rng(plan.seed, sample_id)
    drawn = rng.choice(plan.n_views, size=plan.k, replace=False)
    return frozenset(int(v) for v in drawn)


@dataclass(frozen=True)
class RvmConfig:
    """Random view masking applied during training.

    With probability ``p_mask`` a step masks a uniformly chosen nonempty
    subset of at most ``max_masked`` views; otherwise all views are kept.
    """

    p_mask: float = 0.5
    max_masked: int = 1
    seed: int = 0
    n_views: int = 6

    def __post_init__(self):
        if not 0.0 <= self.p_mask <= 1.0:
            raise ParameterError(f"p_mask must be in [0, 1], got {self.p_mask}")
        if not 1 <= self.max_masked < self.n_views:
            raise ParameterError(
                f"max_masked must leave at least one of {self.n_views} views, got {self.max_masked}"
            )


def training_mask_sampler(config: RvmConfig, step: int) -> frozenset:
    """Masked views for one training step, keyed by (config.seed, step)."""
    rng = counter_rng(config.seed, step)
    if rng.random() >= config.p_mask:
        return frozenset()
    sizes = np.arange(1, config.max_masked + 1)
    weights = np.array([math.comb(config.n_views, int(s)) for s in sizes], dtype=np.float64)
    size = int(rng.choice(sizes, p=weights / weights.sum()))
    drawn = rng.choice(config.n_views, size=size, replace=False)
    return frozenset(int(v) for v in drawn)
