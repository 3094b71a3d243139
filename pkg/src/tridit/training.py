"""Two-stage decoupled training.

Stage 1 ("style"): plain text-to-image flow matching on one style's stylized
images, updating only a Style adapter against the frozen backbone.

Stage 2 ("consistency"): trains a fresh Consistency adapter from zero on
paired data, with the source image as condition tokens and the stylized image
as target. Every `rolling_period` optimizer steps the active style adapter
and its data shard are hot-swapped from the bank; backbone and style adapters
stay frozen throughout, so the only tensors that ever change are the
Consistency adapter's.
"""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from .bank import RollingSchedule, StyleBank, active_entry, hot_swap
from .conditioning import ConditionGeometry, map_condition_positions
from .data import Manifest, load_manifest
from .errors import BankLoadError, ConfigurationError, InvalidInputError, TriDiTError
from .lora import (
    AdapterCheckpoint,
    AdapterKind,
    LoRAAdapter,
    attach,
    checkpoint_metadata,
    init_adapter,
)
from .model import ModelConfig, TriBranchDiT, build_model, flow_matching_loss
from .tokens import BranchTag, TokenSequence, patchify
from .utils import DTYPE, downsample, load_image, rng_from_seed

log = logging.getLogger(__name__)


class TrainStage(Enum):
    STYLE = "style"
    CONSISTENCY = "consistency"


@dataclass(frozen=True)
class TrainConfig:
    stage: TrainStage
    learning_rate: float = 1e-4
    total_steps: int = 600
    batch_size: int = 1
    rolling_period: int = 50
    seed: int = 0
    rank: int = 16
    adapter_scale: float = 1.0
    condition_factor: int = 2
    checkpoint_every: Optional[int] = None
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.total_steps < 1 or self.rolling_period < 1 or self.batch_size < 1:
            raise ConfigurationError("total_steps, rolling_period, batch_size must be >= 1")
        if self.condition_factor < 1:
            raise ConfigurationError("condition_factor must be >= 1")


@dataclass
class TrainReport:
    losses: list[float] = field(default_factory=list)
    swap_log: list[tuple[int, str]] = field(default_factory=list)
    checkpoint_paths: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    interrupted: bool = False

    def write_loss_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "loss"])
            for step, loss in enumerate(self.losses):
                writer.writerow([step, f"{loss:.10g}"])
        return path

    def write_json(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "steps": len(self.losses),
            "final_loss": self.losses[-1] if self.losses else None,
            "swap_log": [[s, sid] for s, sid in self.swap_log],
            "checkpoints": self.checkpoint_paths,
            "wall_time_s": self.wall_time,
            "interrupted": self.interrupted,
        }
        path.write_text(json.dumps(payload, indent=2), encoding="utf-8")
        return path


@dataclass
class TrainResult:
    checkpoint: AdapterCheckpoint
    report: TrainReport
    model: TriBranchDiT
    adapter: LoRAAdapter


def _rmsprop(adapter: LoRAAdapter, lr: float) -> torch.optim.RMSprop:
    return torch.optim.RMSprop(adapter.parameters(), lr=lr, alpha=0.99, eps=1e-8)


def _optimizer_tensors(adapter: LoRAAdapter, opt: torch.optim.RMSprop) -> dict:
    tensors = {}
    for name, param in adapter.named_parameters():
        state = opt.state.get(param)
        if state and "square_avg" in state:
            tensors[f"opt_sq_{name}"] = state["square_avg"]
    return tensors


def _restore_optimizer(adapter: LoRAAdapter, opt: torch.optim.RMSprop, tensors: dict, step: int) -> None:
    for name, param in adapter.named_parameters():
        key = f"opt_sq_{name}"
        if key in tensors:
            opt.state[param] = {
                "step": torch.tensor(float(step)),
                "square_avg": torch.from_numpy(tensors[key]).to(DTYPE),
            }


def _save_checkpoint(
    adapter: LoRAAdapter,
    opt: torch.optim.RMSprop,
    metadata: dict,
    base: Path,
) -> AdapterCheckpoint:
    ckpt = AdapterCheckpoint(adapter=adapter, metadata=metadata)
    ckpt.save(base, extra_tensors=_optimizer_tensors(adapter, opt))
    return ckpt


class _SampleBatcher:
    """Seeded sample picker with image/caption caching and skip-on-failure."""

    def __init__(self, model: TriBranchDiT, rng: np.random.Generator):
        self.model = model
        self.rng = rng
        self._images: dict[str, np.ndarray] = {}
        self._texts: dict[str, TokenSequence] = {}

    def image(self, manifest: Manifest, ref: str) -> np.ndarray:
        key = str(manifest.resolve(ref))
        if key not in self._images:
            self._images[key] = load_image(manifest.resolve(ref))
        return self._images[key]

    def text(self, caption: str) -> TokenSequence:
        if caption not in self._texts:
            self._texts[caption] = self.model.encode_text(caption)
        return self._texts[caption]

    def pick(self, manifest: Manifest):
        """Draw one usable sample; skipped samples are logged, and a shard
        with nothing usable aborts."""
        attempts = 0
        limit = 4 * len(manifest)
        while attempts < limit:
            idx = int(self.rng.integers(len(manifest)))
            sample = manifest.samples[idx]
            try:
                source = self.image(manifest, sample.source)
                stylized = self.image(manifest, sample.stylized)
                return sample, source, stylized
            except (OSError, ValueError) as exc:
                attempts += 1
                log.warning("skipping sample %s (%s)", sample.source, exc)
        raise TriDiTError("all samples in the shard failed to load; aborting")


def _tokens_for_target(model: TriBranchDiT, image: np.ndarray) -> TokenSequence:
    return patchify(image, model.config.patch_size, BranchTag.NOISE)


def _tokens_for_condition(
    model: TriBranchDiT, source: np.ndarray, target_grid: tuple[int, int], factor: int
) -> TokenSequence:
    p = model.config.patch_size
    reduced = downsample(source, factor) if factor > 1 else source
    seq = patchify(reduced, p, BranchTag.CONDITION)
    geometry = ConditionGeometry(
        target_grid[0], target_grid[1], reduced.shape[0] // p, reduced.shape[1] // p
    )
    return TokenSequence.single_branch(
        seq.features, map_condition_positions(geometry), BranchTag.CONDITION
    )


def train_style_stage(
    dataset_shard: Manifest,
    config: TrainConfig,
    out_base: str | Path | None = None,
    on_step: Optional[Callable[[int, float], None]] = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Stage 1: fit one Style adapter by text-to-image flow matching."""
    if config.stage is not TrainStage.STYLE:
        raise ConfigurationError("config.stage must be STYLE")
    styles = dataset_shard.styles
    if len(styles) != 1:
        raise InvalidInputError(f"stage-1 shard must contain one style, got {list(styles)}")
    style_id = styles[0]

    model = build_model(config.model)
    rng = rng_from_seed(config.seed)
    start_step = 0
    opt_tensors: dict = {}
    if resume_from is not None:
        tensors, meta = _load_resume(resume_from, AdapterKind.STYLE)
        ckpt = AdapterCheckpoint.load(resume_from)
        adapter = ckpt.adapter
        start_step = int(meta["step"])
        opt_tensors = tensors
        if "rng_state" in meta:
            rng.bit_generator.state = meta["rng_state"]
    else:
        adapter = init_adapter(
            AdapterKind.STYLE, config.rank, config.model.d, config.seed, config.adapter_scale
        )
    adapter.requires_grad_(True)
    attach(model, adapter)
    opt = _rmsprop(adapter, config.learning_rate)
    if opt_tensors:
        _restore_optimizer(adapter, opt, opt_tensors, start_step)

    batcher = _SampleBatcher(model, rng)
    report = TrainReport()
    started = time.perf_counter()
    step = start_step

    def metadata(at_step: int) -> dict:
        return checkpoint_metadata(
            adapter,
            step=at_step,
            seed=config.seed,
            style_id=style_id,
            model=config.model.to_dict(),
            rng_state=_jsonable_rng_state(rng),
            stage=TrainStage.STYLE.value,
        )

    try:
        for step in range(start_step, config.total_steps):
            opt.zero_grad()
            step_loss = 0.0
            for _ in range(config.batch_size):
                sample, _, stylized = batcher.pick(dataset_shard)
                clean = _tokens_for_target(model, stylized)
                text = batcher.text(sample.stylized_caption)
                t = float(rng.uniform(0.001, 0.999))
                noise = torch.from_numpy(
                    rng.standard_normal(tuple(clean.features.shape))
                ).to(DTYPE)
                loss = flow_matching_loss(model, clean, noise, t, text) / config.batch_size
                loss.backward()
                step_loss += loss.item()
            opt.step()
            report.losses.append(step_loss)
            if config.checkpoint_every and out_base and (step + 1) % config.checkpoint_every == 0:
                path = Path(out_base).with_name(f"{Path(out_base).name}_step{step + 1}")
                ckpt = _save_checkpoint(adapter, opt, metadata(step + 1), path)
                report.checkpoint_paths.append(str(ckpt.path))
            if on_step is not None:
                on_step(step, step_loss)
    except KeyboardInterrupt:
        report.interrupted = True
        log.warning("interrupted at step %d; writing checkpoint", step)

    report.wall_time = time.perf_counter() - started
    checkpoint = AdapterCheckpoint(adapter=adapter, metadata=metadata(len(report.losses) + start_step))
    if out_base is not None:
        checkpoint = _save_checkpoint(adapter, opt, checkpoint.metadata, Path(out_base))
        report.checkpoint_paths.append(str(checkpoint.path))
    return TrainResult(checkpoint=checkpoint, report=report, model=model, adapter=adapter)


def train_consistency_stage(
    bank: StyleBank,
    config: TrainConfig,
    out_base: str | Path | None = None,
    on_step: Optional[Callable[[int, float], None]] = None,
    resume_from: str | Path | None = None,
) -> TrainResult:
    """Stage 2: fit the Consistency adapter over the rolling style bank."""
    if config.stage is not TrainStage.CONSISTENCY:
        raise ConfigurationError("config.stage must be CONSISTENCY")
    if len(bank) == 0:
        raise BankLoadError("bank must be non-empty")

    shards: dict[str, Manifest] = {}
    for entry in bank.entries:
        shard = load_manifest(entry.shard_ref)
        if shard.styles != (entry.style_id,):
            raise BankLoadError(
                f"shard for {entry.style_id!r} carries styles {list(shard.styles)}"
            )
        shards[entry.style_id] = shard

    model = build_model(config.model)
    rng = rng_from_seed(config.seed)
    start_step = 0
    opt_tensors: dict = {}
    if resume_from is not None:
        tensors, meta = _load_resume(resume_from, AdapterKind.CONSISTENCY)
        ckpt = AdapterCheckpoint.load(resume_from)
        adapter = ckpt.adapter
        start_step = int(meta["step"])
        opt_tensors = tensors
        if "rng_state" in meta:
            rng.bit_generator.state = meta["rng_state"]
    else:
        adapter = init_adapter(
            AdapterKind.CONSISTENCY, config.rank, config.model.d, config.seed, config.adapter_scale
        )
    adapter.requires_grad_(True)
    attach(model, adapter)
    opt = _rmsprop(adapter, config.learning_rate)
    if opt_tensors:
        _restore_optimizer(adapter, opt, opt_tensors, start_step)

    schedule = RollingSchedule.build(bank, config.rolling_period, config.seed)
    batcher = _SampleBatcher(model, rng)
    report = TrainReport()
    started = time.perf_counter()
    current = None
    step = start_step

    def metadata(at_step: int) -> dict:
        return checkpoint_metadata(
            adapter,
            step=at_step,
            seed=config.seed,
            model=config.model.to_dict(),
            rng_state=_jsonable_rng_state(rng),
            stage=TrainStage.CONSISTENCY.value,
            bank_styles=list(bank.style_ids),
            rolling_period=config.rolling_period,
        )

    try:
        for step in range(start_step, config.total_steps):
            entry = active_entry(schedule, bank, step)
            if current is None or entry.style_id != current.style_id:
                hot_swap(model, bank, current, entry)
                report.swap_log.append((step, entry.style_id))
                current = entry
            shard = shards[entry.style_id]
            opt.zero_grad()
            step_loss = 0.0
            for _ in range(config.batch_size):
                sample, source, stylized = batcher.pick(shard)
                if sample.style_id != entry.style_id:
                    raise TriDiTError(
                        f"style purity violated: sample {sample.style_id!r} under "
                        f"active entry {entry.style_id!r}"
                    )
                clean = _tokens_for_target(model, stylized)
                grid = (
                    stylized.shape[0] // config.model.patch_size,
                    stylized.shape[1] // config.model.patch_size,
                )
                condition = _tokens_for_condition(model, source, grid, config.condition_factor)
                text = batcher.text(sample.stylized_caption)
                t = float(rng.uniform(0.001, 0.999))
                noise = torch.from_numpy(
                    rng.standard_normal(tuple(clean.features.shape))
                ).to(DTYPE)
                loss = flow_matching_loss(
                    model, clean, noise, t, text, condition
                ) / config.batch_size
                loss.backward()
                step_loss += loss.item()
            opt.step()
            report.losses.append(step_loss)
            if config.checkpoint_every and out_base and (step + 1) % config.checkpoint_every == 0:
                path = Path(out_base).with_name(f"{Path(out_base).name}_step{step + 1}")
                ckpt = _save_checkpoint(adapter, opt, metadata(step + 1), path)
                report.checkpoint_paths.append(str(ckpt.path))
            if on_step is not None:
                on_step(step, step_loss)
    except KeyboardInterrupt:
        report.interrupted = True
        log.warning("interrupted at step %d; writing checkpoint", step)

    report.wall_time = time.perf_counter() - started
    checkpoint = AdapterCheckpoint(adapter=adapter, metadata=metadata(len(report.losses) + start_step))
    if out_base is not None:
        checkpoint = _save_checkpoint(adapter, opt, checkpoint.metadata, Path(out_base))
        report.checkpoint_paths.append(str(checkpoint.path))
    return TrainResult(checkpoint=checkpoint, report=report, model=model, adapter=adapter)


def _jsonable_rng_state(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return json.loads(json.dumps(state, default=int))


def _load_resume(base: str | Path, expected_kind: AdapterKind) -> tuple[dict, dict]:
    from .utils import load_archive

    tensors, meta = load_archive(base)
    if meta.get("kind") != expected_kind.value:
        raise ConfigurationError(
            f"resume checkpoint kind {meta.get('kind')!r} != {expected_kind.value!r}"
        )
    return tensors, meta
