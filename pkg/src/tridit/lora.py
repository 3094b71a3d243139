"""Low-rank adapters for the attention projections.

Two kinds share one shape: Consistency adapters add deltas to the condition
branch's Q/K/V and Style adapters to the main (text + noise) branch's Q/K/V.
One {A, B} pair per projection is shared across every attention layer; B
starts at zero so a fresh adapter is output-neutral.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Optional

import torch
from torch import nn

from .errors import ConfigurationError, KindMismatchError, SlotOccupiedError, TriDiTError
from .tokens import BranchTag
from .utils import fingerprint, load_archive, randn_tensor, rng_from_seed, save_archive

PROJECTIONS = ("q", "k", "v")


class AdapterKind(Enum):
    CONSISTENCY = "consistency"
    STYLE = "style"


TARGET_BRANCHES = {
    AdapterKind.CONSISTENCY: (BranchTag.CONDITION,),
    AdapterKind.STYLE: (BranchTag.TEXT, BranchTag.NOISE),
}


class LoRAAdapter(nn.Module):
    """Per-projection {A: r x d, B: d x r} pairs plus a scalar scale."""

    def __init__(self, kind: AdapterKind, rank: int, d: int, scale: float = 1.0):
        super().__init__()
        if not 1 <= rank < d:
            raise ConfigurationError(f"rank must satisfy 1 <= rank < d, got rank={rank}, d={d}")
        self.kind = kind
        self.rank = rank
        self.d = d
        self.scale = scale
        for name in PROJECTIONS:
            setattr(self, f"a_{name}", nn.Parameter(torch.zeros(rank, d, dtype=torch.float64)))
            setattr(self, f"b_{name}", nn.Parameter(torch.zeros(d, rank, dtype=torch.float64)))

    @property
    def target_branches(self) -> tuple[BranchTag, ...]:
        return TARGET_BRANCHES[self.kind]

    def pairs(self) -> dict[str, tuple[torch.Tensor, torch.Tensor]]:
        return {name: (getattr(self, f"a_{name}"), getattr(self, f"b_{name}")) for name in PROJECTIONS}

    def delta(self, z: torch.Tensor, projection: str) -> torch.Tensor:
        """scale * B (A z) for one projection, applied to row-vector tokens."""
        a, b = self.pairs()[projection]
        return self.scale * ((z @ a.T) @ b.T)

    def fingerprint(self) -> str:
        tensors = [t for pair in self.pairs().values() for t in pair]
        return fingerprint(self.kind.value, self.scale, *tensors)


def init_adapter(kind: AdapterKind, rank: int, d: int, seed: int, scale: float = 1.0) -> LoRAAdapter:
    """Create an output-neutral adapter: A ~ N(0, 1/sqrt(d)), B = 0."""
    adapter = LoRAAdapter(kind, rank, d, scale)
    rng = rng_from_seed(seed)
    with torch.no_grad():
        for name in PROJECTIONS:
            getattr(adapter, f"a_{name}").copy_(randn_tensor(rng, (rank, d), std=d**-0.5))
    return adapter


def _count_cond_proj(params, n: int) -> None:
    counters = getattr(params, "op_counters", None)
    if counters is not None:
        counters.cond_proj_matmuls += n


def apply_condition_deltas(
    z_c: torch.Tensor, params, adapter: Optional[LoRAAdapter]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Condition-branch Q/K/V: base projections plus low-rank deltas.

    params provides w_q/w_k/w_v linear maps (an attention layer). With no
    adapter this is the plain shared-projection computation.
    """
    if adapter is not None and adapter.kind is not AdapterKind.CONSISTENCY:
        raise KindMismatchError(f"expected a Consistency adapter, got {adapter.kind.value}")
    if adapter is not None and adapter.d != z_c.shape[1]:
        raise ConfigurationError(f"adapter width {adapter.d} != feature width {z_c.shape[1]}")
    outs = []
    for name in PROJECTIONS:
        base = getattr(params, f"w_{name}")(z_c)
        _count_cond_proj(params, 1)
        if adapter is not None:
            base = base + adapter.delta(z_c, name)
            _count_cond_proj(params, 2)
        outs.append(base)
    return tuple(outs)


def apply_main_deltas(
    z_main: torch.Tensor, params, adapter: Optional[LoRAAdapter]
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Main-branch (text + noise) Q/K/V with optional Style adapter deltas."""
    if adapter is not None and adapter.kind is not AdapterKind.STYLE:
        raise KindMismatchError(f"expected a Style adapter, got {adapter.kind.value}")
    if adapter is not None and adapter.d != z_main.shape[1]:
        raise ConfigurationError(f"adapter width {adapter.d} != feature width {z_main.shape[1]}")
    outs = []
    for name in PROJECTIONS:
        base = getattr(params, f"w_{name}")(z_main)
        if adapter is not None:
            base = base + adapter.delta(z_main, name)
        outs.append(base)
    return tuple(outs)


def attach(model, adapter: LoRAAdapter):
    """Mount an adapter in its kind's slot; at most one per kind."""
    if adapter.d != model.config.d:
        raise ConfigurationError(f"adapter width {adapter.d} != model width {model.config.d}")
    if model.adapters.get(adapter.kind) is not None:
        raise SlotOccupiedError(f"a {adapter.kind.value} adapter is already attached")
    model.adapters[adapter.kind] = adapter
    return model


def detach(model, kind: AdapterKind):
    if model.adapters.get(kind) is None:
        raise TriDiTError(f"no {kind.value} adapter attached")
    model.adapters[kind] = None
    return model


@dataclass
class AdapterCheckpoint:
    """Adapter tensors plus metadata, stored as an .npz + .json pair."""

    adapter: LoRAAdapter
    metadata: dict
    path: Optional[Path] = None

    REQUIRED = ("kind", "rank", "d", "scale", "step", "seed")

    def save(self, base: str | Path, extra_tensors: dict | None = None) -> Path:
        tensors = {}
        for name, (a, b) in self.adapter.pairs().items():
            tensors[f"a_{name}"] = a
            tensors[f"b_{name}"] = b
        if extra_tensors:
            tensors.update(extra_tensors)
        save_archive(base, tensors, self.metadata)
        self.path = Path(base)
        return self.path

    @classmethod
    def load(cls, base: str | Path) -> "AdapterCheckpoint":
        tensors, metadata = load_archive(base)
        for key in cls.REQUIRED:
            if key not in metadata:
                raise ConfigurationError(f"checkpoint {base} missing metadata key {key!r}")
        kind = AdapterKind(metadata["kind"])
        rank, d = int(metadata["rank"]), int(metadata["d"])
        adapter = LoRAAdapter(kind, rank, d, float(metadata["scale"]))
        with torch.no_grad():
            for name in PROJECTIONS:
                a = torch.from_numpy(tensors[f"a_{name}"])
                b = torch.from_numpy(tensors[f"b_{name}"])
                if a.shape != (rank, d) or b.shape != (d, rank):
                    raise ConfigurationError(
                        f"checkpoint {base}: tensor shapes {tuple(a.shape)}/{tuple(b.shape)} "
                        f"do not match metadata rank={rank}, d={d}"
                    )
                getattr(adapter, f"a_{name}").copy_(a)
                getattr(adapter, f"b_{name}").copy_(b)
        adapter.requires_grad_(False)
        return cls(adapter=adapter, metadata=metadata, path=Path(base))


def checkpoint_metadata(
    adapter: LoRAAdapter, step: int, seed: int, style_id: str | None = None, **extra
) -> dict:
    meta = {
        "kind": adapter.kind.value,
        "rank": adapter.rank,
        "d": adapter.d,
        "scale": adapter.scale,
        "step": step,
        "seed": seed,
    }
    if style_id is not None:
        meta["style_id"] = style_id
    meta.update(extra)
    return meta
