"""Relative overhead measurement for the condition pathway.

Compares plain text-to-image sampling against conditioned sampling at full
and reduced condition resolution, plus cache-on vs cache-off, reporting token
counts, attention-matrix area, per-step condition projection work, wall time,
and an analytic peak-memory estimate.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import _random_scene
from .lora import LoRAAdapter
from .model import TriBranchDiT
from .sampling import SampleConfig, generate
from .utils import rng_from_seed

FLOAT_BYTES = 8


@dataclass
class ScenarioStats:
    name: str
    tokens: dict[str, int]
    attn_entries_per_step: int
    cond_proj_per_step: list[int]
    wall_time_s: float
    mem_estimate_bytes: int


@dataclass
class OverheadReport:
    scenarios: list[ScenarioStats] = field(default_factory=list)

    def baseline(self) -> ScenarioStats:
        return self.scenarios[0]

    def relative(self, stat: ScenarioStats, attr: str) -> float:
        base = getattr(self.baseline(), attr)
        return 100.0 * (getattr(stat, attr) - base) / base if base else 0.0

    def to_text(self) -> str:
        lines = []
        for s in self.scenarios:
            toks = s.tokens
            lines.append(
                f"{s.name}: tokens text={toks['text']} noise={toks['noise']} "
                f"condition={toks['condition']} | attention area/step={s.attn_entries_per_step} "
                f"| cond projections/step={s.cond_proj_per_step} "
                f"| wall={s.wall_time_s:.4f}s | mem~{s.mem_estimate_bytes}B"
            )
            if s is not self.baseline():
                lines.append(
                    f"  vs baseline: time {self.relative(s, 'wall_time_s'):+.1f}%, "
                    f"memory {self.relative(s, 'mem_estimate_bytes'):+.1f}%, "
                    f"attention area {self.relative(s, 'attn_entries_per_step'):+.1f}%"
                )
        return "\n".join(lines)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(
                [
                    "scenario", "text_tokens", "noise_tokens", "condition_tokens",
                    "attn_entries_per_step", "cond_proj_per_step", "wall_time_s",
                    "mem_estimate_bytes",
                ]
            )
            for s in self.scenarios:
                writer.writerow(
                    [
                        s.name, s.tokens["text"], s.tokens["noise"], s.tokens["condition"],
                        s.attn_entries_per_step, ";".join(map(str, s.cond_proj_per_step)),
                        f"{s.wall_time_s:.6f}", s.mem_estimate_bytes,
                    ]
                )
        return path


def _memory_estimate(model: TriBranchDiT, n_total: int) -> int:
    cfg = model.config
    hidden = int(cfg.d * cfg.mlp_ratio)
    per_layer = (
        cfg.n_heads * n_total * n_total  # attention scores
        + 3 * n_total * cfg.d            # q, k, v
        + n_total * hidden               # mlp activations
        + 2 * n_total * cfg.d            # residual streams
    )
    return FLOAT_BYTES * per_layer


def _run_scenario(
    model: TriBranchDiT,
    name: str,
    prompt: str,
    condition_image: Optional[np.ndarray],
    style_adapter: Optional[LoRAAdapter],
    consistency_adapter: Optional[LoRAAdapter],
    config: SampleConfig,
) -> ScenarioStats:
    model.op_counters.reset()
    started = time.perf_counter()
    result = generate(
        model,
        prompt,
        condition_image=condition_image,
        style_adapter=style_adapter,
        consistency_adapter=consistency_adapter if condition_image is not None else None,
        config=config,
    )
    wall = time.perf_counter() - started
    tokens = result.sidecar["tokens"]
    n_total = tokens["text"] + tokens["noise"] + tokens["condition"]
    attn_per_step = model.config.n_layers * n_total * n_total
    return ScenarioStats(
        name=name,
        tokens=tokens,
        attn_entries_per_step=attn_per_step,
        cond_proj_per_step=[c["cond_proj_matmuls"] for c in result.per_step_counters],
        wall_time_s=wall,
        mem_estimate_bytes=_memory_estimate(model, n_total),
    )


def measure_overhead(
    model: TriBranchDiT,
    style_adapter: Optional[LoRAAdapter] = None,
    consistency_adapter: Optional[LoRAAdapter] = None,
    steps: int = 8,
    seed: int = 0,
    target_tokens: tuple[int, int] = (8, 8),
    prompt: str = "a benchmark scene",
) -> OverheadReport:
    """Four scenarios: T2I baseline, half-resolution condition, full-resolution
    condition, and half-resolution condition with the cache disabled."""
    p = model.config.patch_size
    scene, _ = _random_scene(rng_from_seed(seed), target_tokens[0] * p)
    half = (max(1, target_tokens[0] // 2), max(1, target_tokens[1] // 2))

    def cfg(condition_tokens: tuple[int, int], reuse_cache: bool = True) -> SampleConfig:
        return SampleConfig(
            steps=steps,
            seed=seed,
            reuse_cache=reuse_cache,
            target_tokens=target_tokens,
            condition_tokens=condition_tokens,
        )

    report = OverheadReport()
    report.scenarios.append(
        _run_scenario(model, "t2i_baseline", prompt, None, style_adapter, None, cfg(half))
    )
    report.scenarios.append(
        _run_scenario(
            model, "condition_half_res", prompt, scene, style_adapter,
            consistency_adapter, cfg(half),
        )
    )
    report.scenarios.append(
        _run_scenario(
            model, "condition_full_res", prompt, scene, style_adapter,
            consistency_adapter, cfg(target_tokens),
        )
    )
    report.scenarios.append(
        _run_scenario(
            model, "condition_half_res_no_cache", prompt, scene, style_adapter,
            consistency_adapter, cfg(half, reuse_cache=False),
        )
    )
    return report
