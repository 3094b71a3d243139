"""Branch-tagged token sequences and the patch tokenizer.

A sequence is the concatenation of three contiguous segments in fixed order:
Text, Noise, Condition. Image tokens carry (row, col) grid positions; text
tokens carry (index, 0). Positions are real-valued so scaled condition
positions can coexist with integer noise positions.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from .errors import InvalidInputError
from .utils import DTYPE


class BranchTag(Enum):
    TEXT = "text"
    NOISE = "noise"
    CONDITION = "condition"


BRANCH_ORDER = (BranchTag.TEXT, BranchTag.NOISE, BranchTag.CONDITION)


@dataclass
class TokenSequence:
    """Token features plus 2D positions, partitioned into branch segments.

    features: (n, width) tensor; positions: (n, 2) tensor; counts give the
    segment lengths in the fixed Text/Noise/Condition order.
    """

    features: torch.Tensor
    positions: torch.Tensor
    n_text: int = 0
    n_noise: int = 0
    n_cond: int = 0

    def __post_init__(self) -> None:
        if self.features.ndim != 2:
            raise InvalidInputError(f"features must be 2D, got shape {tuple(self.features.shape)}")
        n = self.features.shape[0]
        if self.positions.shape != (n, 2):
            raise InvalidInputError(
                f"positions must be ({n}, 2), got {tuple(self.positions.shape)}"
            )
        if min(self.n_text, self.n_noise, self.n_cond) < 0:
            raise InvalidInputError("segment lengths must be non-negative")
        if self.n_text + self.n_noise + self.n_cond != n:
            raise InvalidInputError(
                f"segment lengths {self.n_text}+{self.n_noise}+{self.n_cond} != {n} tokens"
            )
        image_pos = self.positions[self.n_text:]
        if image_pos.numel() and image_pos.min().item() < 0:
            raise InvalidInputError("image-token positions must be non-negative")

    @property
    def n_tokens(self) -> int:
        return self.features.shape[0]

    @property
    def width(self) -> int:
        return self.features.shape[1]

    @property
    def branch_tags(self) -> list[BranchTag]:
        return (
            [BranchTag.TEXT] * self.n_text
            + [BranchTag.NOISE] * self.n_noise
            + [BranchTag.CONDITION] * self.n_cond
        )

    def segment(self, branch: BranchTag) -> slice:
        starts = {
            BranchTag.TEXT: 0,
            BranchTag.NOISE: self.n_text,
            BranchTag.CONDITION: self.n_text + self.n_noise,
        }
        lengths = {
            BranchTag.TEXT: self.n_text,
            BranchTag.NOISE: self.n_noise,
            BranchTag.CONDITION: self.n_cond,
        }
        start = starts[branch]
        return slice(start, start + lengths[branch])

    @classmethod
    def single_branch(
        cls, features: torch.Tensor, positions: torch.Tensor, branch: BranchTag
    ) -> "TokenSequence":
        counts = {tag: 0 for tag in BRANCH_ORDER}
        counts[branch] = features.shape[0]
        return cls(
            features,
            positions,
            n_text=counts[BranchTag.TEXT],
            n_noise=counts[BranchTag.NOISE],
            n_cond=counts[BranchTag.CONDITION],
        )

    def with_features(self, features: torch.Tensor) -> "TokenSequence":
        return TokenSequence(features, self.positions, self.n_text, self.n_noise, self.n_cond)


def concat_branches(
    text: TokenSequence | None,
    noise: TokenSequence | None,
    condition: TokenSequence | None,
) -> TokenSequence:
    parts = [
        (text, BranchTag.TEXT),
        (noise, BranchTag.NOISE),
        (condition, BranchTag.CONDITION),
    ]
    feats, pos, counts = [], [], {tag: 0 for tag in BRANCH_ORDER}
    for seq, tag in parts:
        if seq is None:
            continue
        if seq.n_tokens != seq.segment(tag).stop - seq.segment(tag).start:
            raise InvalidInputError(f"sequence passed as {tag.value} carries other branches")
        feats.append(seq.features)
        pos.append(seq.positions)
        counts[tag] = seq.n_tokens
    if not feats:
        raise InvalidInputError("cannot concatenate zero branches")
    return TokenSequence(
        torch.cat(feats),
        torch.cat(pos),
        n_text=counts[BranchTag.TEXT],
        n_noise=counts[BranchTag.NOISE],
        n_cond=counts[BranchTag.CONDITION],
    )


def patchify(image: np.ndarray | torch.Tensor, patch_size: int, branch: BranchTag) -> TokenSequence:
    """Split an (H, W, C) image into non-overlapping patch tokens.

    Token (i, j) covers pixels [i*p:(i+1)*p, j*p:(j+1)*p] and carries grid
    position (i, j). Inverse of :func:`unpatchify`.
    """
    if branch is BranchTag.TEXT:
        raise InvalidInputError("patchify produces Noise or Condition tokens only")
    arr = torch.as_tensor(np.asarray(image), dtype=DTYPE)
    if arr.ndim != 3:
        raise InvalidInputError(f"expected (H, W, C) image, got shape {tuple(arr.shape)}")
    h, w, c = arr.shape
    p = patch_size
    if p < 1 or h % p or w % p:
        raise InvalidInputError(f"image {h}x{w} not divisible by patch_size {p}")
    gh, gw = h // p, w // p
    # (gh, p, gw, p, c) -> (gh, gw, p, p, c) -> (gh*gw, p*p*c)
    feats = arr.reshape(gh, p, gw, p, c).permute(0, 2, 1, 3, 4).reshape(gh * gw, p * p * c)
    rows, cols = np.divmod(np.arange(gh * gw), gw)
    positions = torch.from_numpy(np.stack([rows, cols], axis=1).astype(np.float64))
    return TokenSequence.single_branch(feats.contiguous(), positions, branch)


def unpatchify(features: torch.Tensor, grid_hw: tuple[int, int], patch_size: int, channels: int) -> np.ndarray:
    gh, gw = grid_hw
    p = patch_size
    if features.shape != (gh * gw, p * p * channels):
        raise InvalidInputError(
            f"features {tuple(features.shape)} do not match grid {grid_hw}, "
            f"patch {p}, channels {channels}"
        )
    img = (
        features.reshape(gh, gw, p, p, channels)
        .permute(0, 2, 1, 3, 4)
        .reshape(gh * p, gw * p, channels)
    )
    return img.detach().cpu().numpy()


_WORD_RE = re.compile(r"[a-z0-9]+")


def tokenize(prompt: str, vocab_size: int) -> list[int]:
    """Hash words into a small fixed vocabulary; id 0 is a start token."""
    words = _WORD_RE.findall(prompt.lower())
    return [0] + [1 + zlib.crc32(w.encode("utf-8")) % (vocab_size - 1) for w in words]


def text_positions(n_tokens: int) -> torch.Tensor:
    idx = np.arange(n_tokens, dtype=np.float64)
    return torch.from_numpy(np.stack([idx, np.zeros_like(idx)], axis=1))
