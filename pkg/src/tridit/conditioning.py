"""Condition-token control: structured attention mask, position mapping, K/V reuse.

The canonical mask makes conditioning read-only: condition tokens attend only
to each other while text/noise tokens may read everything. Because condition
activations therefore never depend on the evolving latents (or on the
timestep), their per-layer projections can be computed once per run and
reused; the cache enforces exactness with a content fingerprint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from .errors import InvalidInputError
from .lora import LoRAAdapter, apply_condition_deltas
from .tokens import BRANCH_ORDER, BranchTag
from .utils import fingerprint


@dataclass(frozen=True)
class AttentionMaskSpec:
    """Visibility rule per (query branch, key branch)."""

    table: dict[tuple[BranchTag, BranchTag], bool]

    def allow(self, query: BranchTag, key: BranchTag) -> bool:
        return self.table[(query, key)]

    def allowed_keys(self, query: BranchTag) -> tuple[BranchTag, ...]:
        return tuple(k for k in BRANCH_ORDER if self.allow(query, k))

    @classmethod
    def read_only_conditioning(cls) -> "AttentionMaskSpec":
        """Condition rows see only condition keys; main rows see everything."""
        table = {}
        for q in BRANCH_ORDER:
            for k in BRANCH_ORDER:
                table[(q, k)] = q is not BranchTag.CONDITION or k is BranchTag.CONDITION
        spec = cls(table)
        assert spec.allow(BranchTag.CONDITION, BranchTag.CONDITION)
        assert not spec.allow(BranchTag.CONDITION, BranchTag.TEXT)
        assert not spec.allow(BranchTag.CONDITION, BranchTag.NOISE)
        assert all(spec.allow(BranchTag.TEXT, k) for k in BRANCH_ORDER)
        assert all(spec.allow(BranchTag.NOISE, k) for k in BRANCH_ORDER)
        return spec

    @classmethod
    def all_allow(cls) -> "AttentionMaskSpec":
        return cls({(q, k): True for q in BRANCH_ORDER for k in BRANCH_ORDER})


READ_ONLY_MASK = AttentionMaskSpec.read_only_conditioning()


def build_mask(branch_tags, spec: AttentionMaskSpec = READ_ONLY_MASK) -> np.ndarray:
    """Dense boolean mask over token pairs: mask[q][k] == allow(branch(q), branch(k))."""
    tags = list(branch_tags)
    if not tags:
        raise InvalidInputError("cannot build a mask for an empty sequence")
    order = [BRANCH_ORDER.index(t) for t in tags]
    if any(b < a for a, b in zip(order, order[1:])):
        raise InvalidInputError("branch tags must be contiguous in Text, Noise, Condition order")
    n = len(tags)
    mask = np.empty((n, n), dtype=bool)
    for i, q in enumerate(tags):
        for j, k in enumerate(tags):
            mask[i, j] = spec.allow(q, k)
    if not mask.any(axis=1).all():
        raise InvalidInputError("mask leaves at least one token with no visible keys")
    return mask


@dataclass(frozen=True)
class ConditionGeometry:
    """Target grid (M x N tokens) guided by a condition grid (H x W tokens)."""

    m: int
    n: int
    h: int
    w: int

    def __post_init__(self) -> None:
        if min(self.m, self.n, self.h, self.w) < 1:
            raise InvalidInputError(
                f"grid sizes must be positive, got M={self.m}, N={self.n}, H={self.h}, W={self.w}"
            )

    @property
    def s_h(self) -> float:
        return self.m / self.h

    @property
    def s_w(self) -> float:
        return self.n / self.w


def map_condition_positions(geometry: ConditionGeometry) -> torch.Tensor:
    """Scale condition grid indices into target-grid coordinates.

    Token (i, j) maps to (i * S_h, j * S_w); identical grids map to raw
    indices exactly.
    """
    i = np.repeat(np.arange(geometry.h, dtype=np.float64), geometry.w)
    j = np.tile(np.arange(geometry.w, dtype=np.float64), geometry.h)
    if (geometry.m, geometry.n) == (geometry.h, geometry.w):
        pos = np.stack([i, j], axis=1)
    else:
        pos = np.stack([i * geometry.s_h, j * geometry.s_w], axis=1)
    return torch.from_numpy(pos)


@dataclass
class ConditionCache:
    """Per-layer condition tensors keyed by a run fingerprint.

    A stored entry is only returned when the caller's fingerprint matches the
    one the cache was populated under; any mismatch clears the cache so a
    stale value can never be served.
    """

    entries: dict[int, dict[str, torch.Tensor]] = field(default_factory=dict)
    active_fingerprint: Optional[str] = None
    hits: int = 0
    misses: int = 0

    def lookup(self, layer_id: int, run_fingerprint: str) -> Optional[dict[str, torch.Tensor]]:
        if self.active_fingerprint != run_fingerprint:
            self.entries.clear()
            self.active_fingerprint = run_fingerprint
        entry = self.entries.get(layer_id)
        if entry is None:
            self.misses += 1
        else:
            self.hits += 1
        return entry

    def store(self, layer_id: int, run_fingerprint: str, entry: dict[str, torch.Tensor]) -> None:
        if self.active_fingerprint != run_fingerprint:
            self.entries.clear()
            self.active_fingerprint = run_fingerprint
        self.entries[layer_id] = entry


def invalidate(cache: ConditionCache) -> ConditionCache:
    """Drop all stored entries; the next access recomputes for every layer."""
    cache.entries.clear()
    cache.active_fingerprint = None
    return cache


def projection_fingerprint(
    condition_features: torch.Tensor, params, adapter: Optional[LoRAAdapter]
) -> str:
    weights = [getattr(params, f"w_{name}").weight for name in ("q", "k", "v")]
    return fingerprint(
        condition_features,
        adapter.fingerprint() if adapter is not None else None,
        *weights,
    )


def cache_or_compute(
    cache: ConditionCache,
    layer_id: int,
    condition_features: torch.Tensor,
    params,
    adapter: Optional[LoRAAdapter],
) -> tuple[torch.Tensor, torch.Tensor]:
    """Return the layer's condition K/V, computing them at most once per run.

    The fingerprint covers the condition features, the adapter tensors, and
    the projection weights; changing any of them forces recomputation.
    """
    fp = projection_fingerprint(condition_features, params, adapter)
    entry = cache.lookup(layer_id, fp)
    if entry is None:
        _, k_c, v_c = apply_condition_deltas(condition_features, params, adapter)
        entry = {"k": k_c.detach(), "v": v_c.detach()}
        cache.store(layer_id, fp, entry)
    return entry["k"], entry["v"]
