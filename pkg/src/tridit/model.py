"""Three-branch diffusion transformer with a rectified-flow objective.

One joint sequence [text | noise | condition] flows through every layer. The
three branches share a single set of Q/K/V projections per layer; a
Consistency adapter perturbs only the condition branch's projections and a
Style adapter only the main (text + noise) branch's. Condition rows attend
exclusively to each other and receive no timestep modulation, so their
activations are constant across denoising steps and can be cached per run.

The backbone itself is frozen at random initialization; training only ever
updates adapter tensors.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

from .conditioning import AttentionMaskSpec, ConditionCache
from .errors import ConfigurationError, InvalidInputError
from .lora import AdapterKind, LoRAAdapter, apply_condition_deltas, apply_main_deltas
from .tokens import BranchTag, TokenSequence, text_positions, tokenize
from .utils import DTYPE, OpCounters, fingerprint, randn_tensor, rng_from_seed

ROPE_BASE = 10000.0
TIME_SCALE = 1000.0


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    n_layers: int = 4
    n_heads: int = 4
    patch_size: int = 4
    channels: int = 3
    vocab_size: int = 512
    mlp_ratio: float = 4.0
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.d, self.n_layers, self.n_heads, self.patch_size, self.channels) < 1:
            raise ConfigurationError("all model dimensions must be >= 1")
        if self.d % self.n_heads:
            raise ConfigurationError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.d % 2 or self.d < 4:
            raise ConfigurationError("d must be even and >= 4 (half the width carries positions)")
        if self.vocab_size < 2:
            raise ConfigurationError("vocab_size must be >= 2")

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels

    @property
    def pos_dims(self) -> int:
        return self.d // 2

    @property
    def content_dims(self) -> int:
        return self.d - self.pos_dims

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class DiffusionState:
    """Noise-branch latents at a scalar time in [0, 1]."""

    latents: TokenSequence
    t: float

    def __post_init__(self) -> None:
        if not 0.0 <= self.t <= 1.0:
            raise InvalidInputError(f"t must lie in [0, 1], got {self.t}")
        if self.latents.n_noise != self.latents.n_tokens:
            raise InvalidInputError("latents must be a pure Noise-branch sequence")


def split_heads(x: torch.Tensor, n_heads: int) -> torch.Tensor:
    n, d = x.shape
    return x.reshape(n, n_heads, d // n_heads)


def merge_heads(x: torch.Tensor) -> torch.Tensor:
    n, h, hd = x.shape
    return x.reshape(n, h * hd)


def apply_rope_2d(x: torch.Tensor, positions: torch.Tensor) -> torch.Tensor:
    """Rotate head-split features by (row, col) positions.

    The first half of the rotary span encodes rows, the second columns.
    head_dim is rounded down to a multiple of 4; leftover dims pass through
    (head_dim < 4 means no rotation at all).
    """
    head_dim = x.shape[-1]
    rot = head_dim - head_dim % 4
    if rot == 0 or x.shape[0] == 0:
        return x
    half = rot // 2
    pairs = half // 2
    freqs = ROPE_BASE ** (-torch.arange(pairs, dtype=DTYPE) / pairs)
    parts = []
    for axis in range(2):
        seg = x[..., axis * half:(axis + 1) * half]
        ang = positions[:, axis:axis + 1] * freqs[None, :]
        cos = ang.cos()[:, None, :]
        sin = ang.sin()[:, None, :]
        even, odd = seg[..., 0::2], seg[..., 1::2]
        rotated = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
        parts.append(rotated.flatten(-2))
    parts.append(x[..., rot:])
    return torch.cat(parts, dim=-1)


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Softmax attention over head-split tensors; returns merged (nq, d)."""
    scale = q.shape[-1] ** -0.5
    scores = torch.einsum("qhd,khd->hqk", q, k) * scale
    probs = torch.softmax(scores, dim=-1)
    return merge_heads(torch.einsum("hqk,khd->qhd", probs, v))


SINCOS_MAX_FREQ = math.pi
SINCOS_FREQ_RATIO = 48.0


def sincos_positions(positions: torch.Tensor, d: int) -> torch.Tensor:
    """2D sinusoidal embedding, frequency-major: each group of four dims is
    [sin(w*row), cos(w*row), sin(w*col), cos(w*col)] for one frequency, so
    any contiguous slice (an attention head) sees both axes.

    Frequencies span [pi/48, pi] geometrically, resolving token grids up to
    a few dozen cells. Accepts real-valued coordinates, so scaled condition
    positions land between integer noise positions with interpolated phases.
    """
    n_freqs = max(d // 4, 1)
    exponents = torch.arange(n_freqs, dtype=DTYPE) / max(n_freqs - 1, 1)
    freqs = SINCOS_MAX_FREQ * SINCOS_FREQ_RATIO**-exponents
    ang_row = positions[:, 0:1] * freqs[None, :]
    ang_col = positions[:, 1:2] * freqs[None, :]
    quads = torch.stack(
        [ang_row.sin(), ang_row.cos(), ang_col.sin(), ang_col.cos()], dim=-1
    )  # (n, n_freqs, 4)
    out = torch.zeros(positions.shape[0], d, dtype=DTYPE)
    flat = quads.reshape(positions.shape[0], -1)
    out[:, : min(d, flat.shape[1])] = flat[:, : min(d, flat.shape[1])]
    return out


def joint_attention(
    seq: TokenSequence,
    params: "TransformerLayer",
    mask: AttentionMaskSpec,
    adapter: Optional[LoRAAdapter] = None,
    style_adapter: Optional[LoRAAdapter] = None,
) -> TokenSequence:
    """Attention over the joint sequence under a per-branch visibility rule.

    Q/K/V come from the shared projections; the condition segment receives
    the Consistency adapter's deltas and the main segment the Style
    adapter's. Each query row attends exactly to the keys its branch is
    allowed to see (forbidden attention weights are identically zero).
    """
    d = params.w_q.weight.shape[1]
    if seq.width != d:
        raise ConfigurationError(f"sequence width {seq.width} != projection width {d}")
    n_heads = params.n_heads
    main_sl = slice(0, seq.n_text + seq.n_noise)
    cond_sl = seq.segment(BranchTag.CONDITION)

    q_m, k_m, v_m = apply_main_deltas(seq.features[main_sl], params, style_adapter)
    if seq.n_cond:
        q_c, k_c, v_c = apply_condition_deltas(seq.features[cond_sl], params, adapter)
        q, k, v = torch.cat([q_m, q_c]), torch.cat([k_m, k_c]), torch.cat([v_m, v_c])
    else:
        q, k, v = q_m, k_m, v_m

    qh = apply_rope_2d(split_heads(q, n_heads), seq.positions)
    kh = apply_rope_2d(split_heads(k, n_heads), seq.positions)
    vh = split_heads(v, n_heads)

    counters = getattr(params, "op_counters", None)
    if counters is not None:
        counters.attn_score_entries += seq.n_tokens * seq.n_tokens

    out = torch.empty_like(seq.features)
    for branch in (BranchTag.TEXT, BranchTag.NOISE, BranchTag.CONDITION):
        q_sl = seq.segment(branch)
        if q_sl.stop == q_sl.start:
            continue
        key_slices = [seq.segment(b) for b in mask.allowed_keys(branch)]
        key_slices = [s for s in key_slices if s.stop > s.start]
        if not key_slices:
            raise InvalidInputError(f"{branch.value} queries have no visible keys under this mask")
        k_sel = torch.cat([kh[s] for s in key_slices])
        v_sel = torch.cat([vh[s] for s in key_slices])
        out[q_sl] = attention(qh[q_sl], k_sel, v_sel)
    return seq.with_features(out)


class TransformerLayer(nn.Module):
    """Shared-projection attention plus MLP, with timestep modulation
    applied to noise rows only (condition rows stay timestep-free)."""

    def __init__(self, d: int, n_heads: int, hidden: int):
        super().__init__()
        self.n_heads = n_heads
        self.w_q = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.w_k = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.w_v = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.w_o = nn.Linear(d, d, bias=False, dtype=DTYPE)
        self.fc1 = nn.Linear(d, hidden, dtype=DTYPE)
        self.fc2 = nn.Linear(hidden, d, dtype=DTYPE)
        self.mod = nn.Linear(d, 4 * d, dtype=DTYPE)
        self.ln1 = nn.LayerNorm(d, elementwise_affine=False)
        self.ln2 = nn.LayerNorm(d, elementwise_affine=False)
        self.op_counters: Optional[OpCounters] = None

    def cond_step(
        self, h_cond: torch.Tensor, pos_cond: torch.Tensor, adapter: Optional[LoRAAdapter]
    ) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Condition tower: self-attention among condition tokens only.

        Returns the rotary-encoded K/V consumed by the main branch plus the
        hidden state entering the next layer. Depends only on condition
        features and static weights, so results are reusable across steps.
        """
        z = self.ln1(h_cond)
        q, k, v = apply_condition_deltas(z, self, adapter)
        qh = apply_rope_2d(split_heads(q, self.n_heads), pos_cond)
        kh = apply_rope_2d(split_heads(k, self.n_heads), pos_cond)
        vh = split_heads(v, self.n_heads)
        h = h_cond + self.w_o(attention(qh, kh, vh))
        h = h + self.fc2(F.gelu(self.fc1(self.ln2(h))))
        return kh, vh, h

    def main_step(
        self,
        h_main: torch.Tensor,
        pos_main: torch.Tensor,
        n_text: int,
        cond_kv: Optional[tuple[torch.Tensor, torch.Tensor]],
        temb: torch.Tensor,
        style_adapter: Optional[LoRAAdapter],
    ) -> torch.Tensor:
        sa_shift, sa_scale, sm_shift, sm_scale = self.mod(temb).chunk(4, dim=-1)
        z = self.ln1(h_main)
        z = torch.cat([z[:n_text], z[n_text:] * (1 + sa_scale) + sa_shift])
        q, k, v = apply_main_deltas(z, self, style_adapter)
        qh = apply_rope_2d(split_heads(q, self.n_heads), pos_main)
        kh = apply_rope_2d(split_heads(k, self.n_heads), pos_main)
        vh = split_heads(v, self.n_heads)
        if cond_kv is not None:
            kh = torch.cat([kh, cond_kv[0]])
            vh = torch.cat([vh, cond_kv[1]])
        h = h_main + self.w_o(attention(qh, kh, vh))
        z2 = self.ln2(h)
        z2 = torch.cat([z2[:n_text], z2[n_text:] * (1 + sm_scale) + sm_shift])
        return h + self.fc2(F.gelu(self.fc1(z2)))


class TriBranchDiT(nn.Module):
    """Frozen backbone; adapters are the only trainable tensors.

    Token features are [content | position]: the lower half holds projected
    patch (or text-table) content, the upper half a fixed sinusoidal encoding
    of the token's 2D position. Q/K are near-identity on the position half
    and the position half is write-protected through every layer, so
    attention routes by position while values carry content; adapters learn
    what the routed values should say.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d
        hidden = int(d * config.mlp_ratio)
        self.text_table = nn.Parameter(
            torch.zeros(config.vocab_size, config.content_dims, dtype=DTYPE)
        )
        self.in_proj = nn.Linear(config.patch_dim, config.content_dims, bias=False, dtype=DTYPE)
        self.layers = nn.ModuleList(
            TransformerLayer(d, config.n_heads, hidden) for _ in range(config.n_layers)
        )
        self.time_fc1 = nn.Linear(d, d, dtype=DTYPE)
        self.time_fc2 = nn.Linear(d, d, dtype=DTYPE)
        # no final normalization: the residual stream decodes linearly, so
        # independent contributions (latent readthrough, condition reads)
        # stay additive in the output
        self.final_mod = nn.Linear(d, 2 * d, dtype=DTYPE)
        self.out_proj = nn.Linear(d, config.patch_dim, bias=False, dtype=DTYPE)

        self.adapters: dict[AdapterKind, Optional[LoRAAdapter]] = {
            AdapterKind.CONSISTENCY: None,
            AdapterKind.STYLE: None,
        }
        self.op_counters = OpCounters()
        for layer in self.layers:
            layer.op_counters = self.op_counters

        self._init_weights()
        self.requires_grad_(False)
        self.weights_fingerprint = fingerprint(
            *(p for _, p in sorted(self.named_parameters(), key=lambda kv: kv[0]))
        )

    def _init_weights(self) -> None:
        cfg = self.config
        rng = rng_from_seed(cfg.seed)
        d = cfg.d
        nc = cfg.content_dims

        def fill(param: nn.Parameter, std: float) -> None:
            with torch.no_grad():
                param.copy_(randn_tensor(rng, tuple(param.shape), std=std))

        fill(self.text_table, 1.0)
        fill(self.in_proj.weight, cfg.patch_dim**-0.5)
        for layer in self.layers:
            # Q/K pass the position half through (plus a whiff of noise), so
            # attention logits are dominated by relative position; V stays
            # random; O routes the position-matched heads' reads into the
            # content half
            for lin in (layer.w_q, layer.w_k):
                fill(lin.weight, 0.02 * d**-0.5)
                with torch.no_grad():
                    lin.weight[nc:, nc:] += torch.eye(cfg.pos_dims, dtype=DTYPE)
            fill(layer.w_v.weight, d**-0.5)
            fill(layer.w_o.weight, 0.05 * d**-0.5)
            with torch.no_grad():
                layer.w_o.weight[:nc, nc:] += torch.eye(cfg.pos_dims, dtype=DTYPE)[:nc, :]
            fill(layer.fc1.weight, d**-0.5)
            fill(layer.fc1.bias, 0.02)
            fill(layer.fc2.weight, 0.2 * (layer.fc2.in_features) ** -0.5)
            fill(layer.fc2.bias, 0.02)
            fill(layer.mod.weight, 0.2 * d**-0.5)
            with torch.no_grad():
                # write-protect the position half of the residual stream
                layer.w_o.weight[nc:, :] = 0.0
                layer.fc2.weight[nc:, :] = 0.0
                layer.fc2.bias[nc:] = 0.0
                layer.mod.bias.zero_()
        fill(self.time_fc1.weight, d**-0.5)
        fill(self.time_fc1.bias, 0.02)
        fill(self.time_fc2.weight, d**-0.5)
        fill(self.time_fc2.bias, 0.02)
        fill(self.final_mod.weight, 0.2 * d**-0.5)
        with torch.no_grad():
            self.final_mod.bias.zero_()
            # decoder tied to the encoder: content-half features decode back
            # to patch space, the position half is ignored
            self.out_proj.weight.zero_()
            self.out_proj.weight[:, :nc] = torch.linalg.pinv(self.in_proj.weight)

    def encode_text(self, prompt: str) -> TokenSequence:
        ids = tokenize(prompt, self.config.vocab_size)
        positions = text_positions(len(ids))
        feats = torch.cat(
            [
                self.text_table[torch.tensor(ids, dtype=torch.long)],
                sincos_positions(positions, self.config.pos_dims),
            ],
            dim=1,
        )
        return TokenSequence.single_branch(feats, positions, BranchTag.TEXT)

    def time_embedding(self, t: float) -> torch.Tensor:
        half = self.config.d // 2
        freqs = torch.exp(
            -math.log(ROPE_BASE) * torch.arange(half, dtype=DTYPE) / half
        )
        ang = t * TIME_SCALE * freqs
        emb = torch.cat([ang.sin(), ang.cos()])
        return self.time_fc2(F.silu(self.time_fc1(emb)))

    def run_fingerprint(self, condition_features: torch.Tensor) -> str:
        """Cache key for a sampling run: condition content + both adapters + weights."""
        cons = self.adapters[AdapterKind.CONSISTENCY]
        style = self.adapters[AdapterKind.STYLE]
        return fingerprint(
            condition_features,
            cons.fingerprint() if cons is not None else None,
            style.fingerprint() if style is not None else None,
            self.weights_fingerprint,
        )

    def forward(
        self,
        state: DiffusionState,
        text: TokenSequence,
        condition: Optional[TokenSequence] = None,
        cache: Optional[ConditionCache] = None,
        trace: Optional[list] = None,
    ) -> torch.Tensor:
        """Predict the velocity for the noise branch; output matches the
        latents' shape. Deterministic given inputs, weights, and adapters."""
        cfg = self.config
        if state.latents.width != cfg.patch_dim:
            raise ConfigurationError(
                f"latent width {state.latents.width} != patch_dim {cfg.patch_dim}"
            )
        if text.width != cfg.d:
            raise ConfigurationError(f"text width {text.width} != model width {cfg.d}")
        cond_present = condition is not None and condition.n_tokens > 0
        if cond_present and condition.width != cfg.patch_dim:
            raise ConfigurationError(
                f"condition width {condition.width} != patch_dim {cfg.patch_dim}"
            )

        consistency = self.adapters[AdapterKind.CONSISTENCY]
        style = self.adapters[AdapterKind.STYLE]
        self.op_counters.forward_calls += 1

        n_text = text.n_tokens
        noise_pos = state.latents.positions
        h_noise = torch.cat(
            [self.in_proj(state.latents.features), sincos_positions(noise_pos, cfg.pos_dims)],
            dim=1,
        )
        h_main = torch.cat([text.features, h_noise])
        pos_main = torch.cat([text.positions, noise_pos])
        if cond_present:
            h_cond = torch.cat(
                [
                    self.in_proj(condition.features),
                    sincos_positions(condition.positions, cfg.pos_dims),
                ],
                dim=1,
            )
            pos_cond = condition.positions
            run_fp = self.run_fingerprint(condition.features)
        n_total = h_main.shape[0] + (condition.n_tokens if cond_present else 0)

        temb = self.time_embedding(state.t)
        for i, layer in enumerate(self.layers):
            self.op_counters.attn_score_entries += n_total * n_total
            cond_kv = None
            if cond_present:
                entry = cache.lookup(i, run_fp) if cache is not None else None
                if entry is None:
                    kh_c, vh_c, h_cond_out = layer.cond_step(h_cond, pos_cond, consistency)
                    if cache is not None:
                        cache.store(i, run_fp, {"k": kh_c, "v": vh_c, "h_out": h_cond_out})
                else:
                    kh_c, vh_c, h_cond_out = entry["k"], entry["v"], entry["h_out"]
                cond_kv = (kh_c, vh_c)
                if trace is not None:
                    trace.append(
                        {
                            "layer": i,
                            "cond_hidden": h_cond_out.detach().clone(),
                            "cond_k": kh_c.detach().clone(),
                            "cond_v": vh_c.detach().clone(),
                        }
                    )
            h_main = layer.main_step(h_main, pos_main, n_text, cond_kv, temb, style)
            if cond_present:
                h_cond = h_cond_out

        x = h_main[n_text:]
        f_shift, f_scale = self.final_mod(temb).chunk(2, dim=-1)
        x = x * (1 + f_scale) + f_shift
        return self.out_proj(x)


def build_model(config: ModelConfig) -> TriBranchDiT:
    return TriBranchDiT(config)


def flow_matching_loss(
    model: TriBranchDiT,
    clean: TokenSequence,
    noise: torch.Tensor,
    t: float,
    text: TokenSequence,
    condition: Optional[TokenSequence] = None,
    cache: Optional[ConditionCache] = None,
) -> torch.Tensor:
    """MSE between the predicted velocity and (noise - clean) at time t.

    The interpolant is x_t = (1 - t) * clean + t * noise, whose velocity is
    exactly noise - clean.
    """
    if not 0.0 < t < 1.0:
        raise InvalidInputError(f"t must lie in (0, 1), got {t}")
    if noise.shape != clean.features.shape:
        raise InvalidInputError(
            f"noise shape {tuple(noise.shape)} != clean shape {tuple(clean.features.shape)}"
        )
    x_t = (1.0 - t) * clean.features + t * noise
    state = DiffusionState(clean.with_features(x_t), t)
    predicted = model(state, text, condition, cache)
    target = noise - clean.features
    return ((predicted - target) ** 2).mean()
