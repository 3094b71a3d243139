"""Shared helpers: seeded RNG, fingerprints, archive/image IO, op counters."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

DTYPE = torch.float64


def set_determinism(threads: int = 1) -> None:
    """Pin torch to single-threaded mode so repeated runs are bit-identical."""
    torch.set_num_threads(threads)


def rng_from_seed(seed: int) -> np.random.Generator:
    return np.random.default_rng(seed)


def randn_tensor(rng: np.random.Generator, shape: tuple[int, ...], std: float = 1.0) -> torch.Tensor:
    return torch.from_numpy(rng.normal(0.0, std, size=shape)).to(DTYPE)


def fingerprint(*parts) -> str:
    """SHA-256 over a mixed list of tensors, arrays, strings, and numbers."""
    h = hashlib.sha256()
    for part in parts:
        if part is None:
            h.update(b"<none>")
        elif isinstance(part, torch.Tensor):
            h.update(part.detach().cpu().contiguous().numpy().tobytes())
        elif isinstance(part, np.ndarray):
            h.update(np.ascontiguousarray(part).tobytes())
        elif isinstance(part, str):
            h.update(part.encode("utf-8"))
        elif isinstance(part, (int, float)):
            h.update(repr(part).encode("utf-8"))
        else:
            raise TypeError(f"unhashable fingerprint part: {type(part)!r}")
        h.update(b"|")
    return h.hexdigest()


def file_checksum(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- tensor archive: <base>.npz holds tensors, <base>.json holds metadata ---

def save_archive(base: str | Path, tensors: dict[str, np.ndarray | torch.Tensor], metadata: dict) -> Path:
    base = Path(base)
    base.parent.mkdir(parents=True, exist_ok=True)
    arrays = {
        name: (t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t))
        for name, t in tensors.items()
    }
    np.savez(base.with_suffix(".npz"), **arrays)
    base.with_suffix(".json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True), encoding="utf-8"
    )
    return base


def load_archive(base: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    base = Path(base)
    npz_path = base.with_suffix(".npz")
    json_path = base.with_suffix(".json")
    if not npz_path.exists() or not json_path.exists():
        raise FileNotFoundError(f"checkpoint archive incomplete at {base}(.npz/.json)")
    with np.load(npz_path) as data:
        tensors = {name: data[name].copy() for name in data.files}
    metadata = json.loads(json_path.read_text(encoding="utf-8"))
    return tensors, metadata


# --- image IO: float arrays in [0, 1], lossless 8-bit PNG on disk ---

def load_image(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return arr


def save_image(path: str | Path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray(np.round(arr * 255.0).astype(np.uint8), mode="RGB").save(path, format="PNG")
    return path


def downsample(image: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downsample by an integer factor."""
    h, w, c = image.shape
    if h % factor or w % factor:
        raise ValueError(f"image {h}x{w} not divisible by factor {factor}")
    return image.reshape(h // factor, factor, w // factor, factor, c).mean(axis=(1, 3))


def luminance(image: np.ndarray) -> np.ndarray:
    return 0.299 * image[..., 0] + 0.587 * image[..., 1] + 0.114 * image[..., 2]


_SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
_SOBEL_Y = _SOBEL_X.T


def sobel_gradients(gray: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """3x3 Sobel gradients with edge-replicated borders."""
    padded = np.pad(gray, 1, mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3))
    gx = np.einsum("ijkl,kl->ij", windows, _SOBEL_X)
    gy = np.einsum("ijkl,kl->ij", windows, _SOBEL_Y)
    return gx, gy


@dataclass
class OpCounters:
    """Instrumentation for condition-projection work and attention area."""

    cond_proj_matmuls: int = 0
    attn_score_entries: int = 0
    forward_calls: int = 0

    def snapshot(self) -> dict[str, int]:
        return {
            "cond_proj_matmuls": self.cond_proj_matmuls,
            "attn_score_entries": self.attn_score_entries,
            "forward_calls": self.forward_calls,
        }

    def reset(self) -> None:
        self.cond_proj_matmuls = 0
        self.attn_score_entries = 0
        self.forward_calls = 0

    def delta_since(self, before: dict[str, int]) -> dict[str, int]:
        return {k: v - before[k] for k, v in self.snapshot().items()}
