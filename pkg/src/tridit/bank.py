"""Style adapter bank and the rolling loader that swaps the active style.

The bank pairs each style adapter checkpoint with its dataset shard. During
consistency training the active entry advances round-robin over a seeded
permutation, one window per `period` optimizer steps, so every style gets a
balanced share of windows over any horizon.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .errors import BankLoadError
from .lora import AdapterCheckpoint, AdapterKind, attach, detach
from .utils import rng_from_seed


@dataclass(frozen=True)
class StyleBankEntry:
    style_id: str
    adapter_ref: Path
    shard_ref: Path


@dataclass(frozen=True)
class StyleBank:
    entries: tuple[StyleBankEntry, ...]

    def __len__(self) -> int:
        return len(self.entries)

    def entry_for(self, style_id: str) -> StyleBankEntry:
        for entry in self.entries:
            if entry.style_id == style_id:
                return entry
        raise BankLoadError(f"style {style_id!r} not in bank")

    @property
    def style_ids(self) -> tuple[str, ...]:
        return tuple(e.style_id for e in self.entries)


def build_bank(entries) -> StyleBank:
    """Validate entries: unique ids, files present, Style-kind checkpoints
    with one common (rank, d)."""
    entries = tuple(entries)
    if not entries:
        raise BankLoadError("bank requires at least one entry")
    seen: set[str] = set()
    shape: tuple[int, int] | None = None
    for entry in entries:
        if entry.style_id in seen:
            raise BankLoadError(f"duplicate style_id {entry.style_id!r}")
        seen.add(entry.style_id)
        if not Path(entry.shard_ref).exists():
            raise BankLoadError(f"entry {entry.style_id!r}: shard {entry.shard_ref} missing")
        try:
            ckpt = AdapterCheckpoint.load(entry.adapter_ref)
        except FileNotFoundError as exc:
            raise BankLoadError(f"entry {entry.style_id!r}: {exc}") from exc
        if ckpt.adapter.kind is not AdapterKind.STYLE:
            raise BankLoadError(
                f"entry {entry.style_id!r}: checkpoint kind is "
                f"{ckpt.adapter.kind.value}, expected style"
            )
        this_shape = (ckpt.adapter.rank, ckpt.adapter.d)
        if shape is None:
            shape = this_shape
        elif this_shape != shape:
            raise BankLoadError(
                f"entry {entry.style_id!r}: (rank, d)={this_shape} differs from {shape}"
            )
    return StyleBank(entries)


def load_bank_manifest(path: str | Path) -> StyleBank:
    """Read a bank document: a JSON list of {style_id, adapter_ref, shard_ref}.

    Relative refs resolve against the document's directory.
    """
    path = Path(path)
    records = json.loads(path.read_text(encoding="utf-8"))
    if not isinstance(records, list):
        raise BankLoadError(f"bank manifest {path} must be a JSON list")
    entries = []
    for rec in records:
        missing = {"style_id", "adapter_ref", "shard_ref"} - set(rec)
        if missing:
            raise BankLoadError(f"bank manifest record {rec!r} missing {sorted(missing)}")
        entries.append(
            StyleBankEntry(
                style_id=rec["style_id"],
                adapter_ref=(path.parent / rec["adapter_ref"]).resolve(),
                shard_ref=(path.parent / rec["shard_ref"]).resolve(),
            )
        )
    return build_bank(entries)


def write_bank_manifest(bank: StyleBank, path: str | Path) -> Path:
    path = Path(path)
    records = [
        {
            "style_id": e.style_id,
            "adapter_ref": str(e.adapter_ref),
            "shard_ref": str(e.shard_ref),
        }
        for e in bank.entries
    ]
    path.write_text(json.dumps(records, indent=2), encoding="utf-8")
    return path


@dataclass(frozen=True)
class RollingSchedule:
    """Fixed-period round-robin over a seeded permutation of the bank."""

    period: int
    order: tuple[str, ...]
    seed: int

    def __post_init__(self) -> None:
        if self.period < 1:
            raise BankLoadError(f"period must be >= 1, got {self.period}")
        if len(set(self.order)) != len(self.order) or not self.order:
            raise BankLoadError("order must cover every entry exactly once")

    @classmethod
    def build(cls, bank: StyleBank, period: int, seed: int) -> "RollingSchedule":
        ids = list(bank.style_ids)
        perm = rng_from_seed(seed).permutation(len(ids))
        return cls(period=period, order=tuple(ids[i] for i in perm), seed=seed)


def active_entry(schedule: RollingSchedule, bank: StyleBank, global_step: int) -> StyleBankEntry:
    """Pure mapping step -> entry: order[(step // period) % bank size]."""
    if len(bank) == 0:
        raise BankLoadError("bank is empty")
    if global_step < 0:
        raise BankLoadError(f"global_step must be >= 0, got {global_step}")
    if set(schedule.order) != set(bank.style_ids):
        raise BankLoadError("schedule order does not match bank entries")
    window = global_step // schedule.period
    return bank.entry_for(schedule.order[window % len(schedule.order)])


def hot_swap(model, bank: StyleBank, from_entry: StyleBankEntry | None, to_entry: StyleBankEntry):
    """Replace the active style adapter with `to_entry`'s, loaded fresh.

    The checkpoint is read before anything is detached; a read failure leaves
    the previous adapter attached. A fingerprint-keyed condition cache
    recomputes on its next access because the style adapter changed.
    """
    if to_entry.style_id not in bank.style_ids:
        raise BankLoadError(f"style {to_entry.style_id!r} not in bank")
    ckpt = AdapterCheckpoint.load(to_entry.adapter_ref)
    if ckpt.adapter.kind is not AdapterKind.STYLE:
        raise BankLoadError(f"entry {to_entry.style_id!r}: checkpoint is not a style adapter")
    if model.adapters.get(AdapterKind.STYLE) is not None:
        detach(model, AdapterKind.STYLE)
    attach(model, ckpt.adapter)
    return model
