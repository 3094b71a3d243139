"""Deterministic Euler sampling with optional condition tokens and adapters.

The model is trained to predict the velocity of x_t = (1-t)*clean + t*noise,
which points from data toward noise. Generation therefore starts from pure
noise at diffusion time 1 and integrates a progress variable s = 1 - t from 0
to 1, feeding the negated model velocity to the Euler integrator. Step
boundaries are computed as k/steps directly so the progress hits 1.0 exactly.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .conditioning import ConditionCache, ConditionGeometry, map_condition_positions
from .errors import ConfigurationError, InvalidInputError
from .lora import AdapterKind, LoRAAdapter
from .model import DiffusionState, TriBranchDiT
from .tokens import BranchTag, TokenSequence, patchify, unpatchify
from .utils import DTYPE, downsample, fingerprint, rng_from_seed

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SampleConfig:
    steps: int = 24
    guidance: float = 1.0
    seed: int = 0
    reuse_cache: bool = True
    target_tokens: tuple[int, int] = (8, 8)
    condition_tokens: tuple[int, int] = (4, 4)

    def __post_init__(self) -> None:
        if self.steps < 1:
            raise InvalidInputError(f"steps must be >= 1, got {self.steps}")
        if min(self.target_tokens) < 1 or min(self.condition_tokens) < 1:
            raise InvalidInputError("token grids must be positive")


def euler_step(state: DiffusionState, velocity: torch.Tensor, dt: float) -> DiffusionState:
    """One explicit Euler update: latents += dt * velocity, t += dt."""
    if dt <= 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    if velocity.shape != state.latents.features.shape:
        raise InvalidInputError(
            f"velocity shape {tuple(velocity.shape)} != latents "
            f"{tuple(state.latents.features.shape)}"
        )
    return DiffusionState(
        state.latents.with_features(state.latents.features + dt * velocity),
        state.t + dt,
    )


@dataclass
class GenerateResult:
    image: np.ndarray
    latents: np.ndarray
    sidecar: dict
    per_step_counters: list[dict] = field(default_factory=list)


def prepare_condition_tokens(
    condition_image: np.ndarray,
    target_tokens: tuple[int, int],
    condition_tokens: tuple[int, int],
    patch_size: int,
) -> TokenSequence:
    """Patchify a condition image and stamp scaled target-grid positions.

    The image must be (or downsample by an integer factor to) exactly
    condition_tokens * patch_size pixels.
    """
    h_tok, w_tok = condition_tokens
    want_h, want_w = h_tok * patch_size, w_tok * patch_size
    have_h, have_w = condition_image.shape[:2]
    if (have_h, have_w) != (want_h, want_w):
        if have_h % want_h or have_w % want_w or have_h // want_h != have_w // want_w:
            raise InvalidInputError(
                f"condition image {have_h}x{have_w} cannot be reduced to {want_h}x{want_w}"
            )
        condition_image = downsample(condition_image, have_h // want_h)
    seq = patchify(condition_image, patch_size, BranchTag.CONDITION)
    geometry = ConditionGeometry(target_tokens[0], target_tokens[1], h_tok, w_tok)
    return TokenSequence.single_branch(
        seq.features, map_condition_positions(geometry), BranchTag.CONDITION
    )


def generate(
    model: TriBranchDiT,
    prompt: str,
    condition_image: Optional[np.ndarray] = None,
    style_adapter: Optional[LoRAAdapter] = None,
    consistency_adapter: Optional[LoRAAdapter] = None,
    config: SampleConfig = SampleConfig(),
) -> GenerateResult:
    """Run the full inference pipeline and return the decoded image.

    Deterministic under (seed, config, weights, adapters). With the cache
    enabled the condition tower is computed once and reused every step;
    outputs are identical either way.
    """
    if style_adapter is not None and style_adapter.kind is not AdapterKind.STYLE:
        raise ConfigurationError("style_adapter must be a Style adapter")
    if consistency_adapter is not None and consistency_adapter.kind is not AdapterKind.CONSISTENCY:
        raise ConfigurationError("consistency_adapter must be a Consistency adapter")
    if consistency_adapter is not None and condition_image is None:
        log.warning(
            "consistency adapter supplied without a condition image; "
            "it has no condition tokens to act on"
        )

    cfg = model.config
    m_tok, n_tok = config.target_tokens
    text = model.encode_text(prompt)
    uncond_text = model.encode_text("") if config.guidance != 1.0 else None

    condition = None
    if condition_image is not None:
        condition = prepare_condition_tokens(
            condition_image, config.target_tokens, config.condition_tokens, cfg.patch_size
        )

    previous = dict(model.adapters)
    model.adapters = {
        AdapterKind.CONSISTENCY: consistency_adapter,
        AdapterKind.STYLE: style_adapter,
    }
    try:
        rng = rng_from_seed(config.seed)
        latents = torch.from_numpy(
            rng.standard_normal((m_tok * n_tok, cfg.patch_dim))
        ).to(DTYPE)
        rows, cols = np.divmod(np.arange(m_tok * n_tok), n_tok)
        positions = torch.from_numpy(np.stack([rows, cols], axis=1).astype(np.float64))

        cache = ConditionCache() if (config.reuse_cache and condition is not None) else None
        per_step: list[dict] = []
        with torch.no_grad():
            for k in range(config.steps):
                s = k / config.steps
                dt = (k + 1) / config.steps - s
                before = model.op_counters.snapshot()
                model_state = DiffusionState(
                    TokenSequence.single_branch(latents, positions, BranchTag.NOISE), 1.0 - s
                )
                velocity = model(model_state, text, condition, cache)
                if uncond_text is not None:
                    v_uncond = model(model_state, uncond_text, condition, cache)
                    velocity = v_uncond + config.guidance * (velocity - v_uncond)
                progress = DiffusionState(
                    TokenSequence.single_branch(latents, positions, BranchTag.NOISE), s
                )
                latents = euler_step(progress, -velocity, dt).latents.features
                per_step.append(model.op_counters.delta_since(before))
    finally:
        model.adapters = previous

    image = np.clip(unpatchify(latents, (m_tok, n_tok), cfg.patch_size, cfg.channels), 0.0, 1.0)
    sidecar = {
        "prompt": prompt,
        "sample_config": {
            "steps": config.steps,
            "guidance": config.guidance,
            "seed": config.seed,
            "reuse_cache": config.reuse_cache,
            "target_tokens": list(config.target_tokens),
            "condition_tokens": list(config.condition_tokens),
        },
        "model_config": cfg.to_dict(),
        "tokens": {
            "text": text.n_tokens,
            "noise": m_tok * n_tok,
            "condition": condition.n_tokens if condition is not None else 0,
        },
        "checksums": {
            "condition_image": fingerprint(np.asarray(condition_image))
            if condition_image is not None
            else None,
            "style_adapter": style_adapter.fingerprint() if style_adapter else None,
            "consistency_adapter": consistency_adapter.fingerprint()
            if consistency_adapter
            else None,
        },
    }
    return GenerateResult(
        image=image,
        latents=latents.numpy(),
        sidecar=sidecar,
        per_step_counters=per_step,
    )
