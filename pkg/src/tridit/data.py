"""Paired-sample manifests and the synthetic style-pair generator.

Manifests are JSONL, one record per line, with the fixed field order
(source, stylized, source_caption, stylized_caption, style_id) so a loaded
manifest re-serializes byte-for-byte. Synthetic sources are procedurally
drawn scenes (colored shapes on simple backgrounds); each style is a
deterministic, structure-preserving pixel transform of its source, so ground
truth about content preservation is known by construction.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import InvalidInputError, ManifestError
from .utils import luminance, rng_from_seed, save_image, sobel_gradients

MANIFEST_FIELDS = ("source", "stylized", "source_caption", "stylized_caption", "style_id")


@dataclass(frozen=True)
class PairedSample:
    source: str
    stylized: str
    source_caption: str
    stylized_caption: str
    style_id: str

    def to_record(self) -> dict:
        return {name: getattr(self, name) for name in MANIFEST_FIELDS}


@dataclass(frozen=True)
class Manifest:
    samples: tuple[PairedSample, ...]
    base_dir: Path

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def styles(self) -> tuple[str, ...]:
        seen: dict[str, None] = {}
        for s in self.samples:
            seen.setdefault(s.style_id, None)
        return tuple(seen)

    def per_style_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for s in self.samples:
            counts[s.style_id] = counts.get(s.style_id, 0) + 1
        return counts

    def filter(self, style_id: str) -> "Manifest":
        return Manifest(
            tuple(s for s in self.samples if s.style_id == style_id), self.base_dir
        )

    def resolve(self, ref: str) -> Path:
        return (self.base_dir / ref).resolve()


def _image_size(path: Path) -> tuple[int, int]:
    with Image.open(path) as im:
        return im.size


def load_manifest(path: str | Path) -> Manifest:
    """Parse and validate a JSONL manifest; all violations reported together."""
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    base_dir = path.parent
    samples: list[PairedSample] = []
    problems: list[str] = []
    for idx, line in enumerate(path.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            problems.append(f"record {idx}: invalid JSON ({exc})")
            continue
        missing = [f for f in MANIFEST_FIELDS if not rec.get(f)]
        if missing:
            problems.append(f"record {idx}: missing or empty field(s) {missing}")
            continue
        sample = PairedSample(**{f: rec[f] for f in MANIFEST_FIELDS})
        src, sty = base_dir / sample.source, base_dir / sample.stylized
        absent = [str(p) for p in (src, sty) if not p.exists()]
        if absent:
            problems.append(f"record {idx}: missing image file(s) {absent}")
            continue
        (sw, sh), (tw, th) = _image_size(src), _image_size(sty)
        if sw * th != tw * sh:
            problems.append(
                f"record {idx}: aspect mismatch source {sw}x{sh} vs stylized {tw}x{th}"
            )
            continue
        samples.append(sample)
    if problems:
        raise ManifestError("manifest validation failed:\n  " + "\n  ".join(problems))
    if not samples:
        raise ManifestError(f"manifest {path} contains no records")
    return Manifest(tuple(samples), base_dir)


def save_manifest(manifest: Manifest, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [
        json.dumps(s.to_record(), ensure_ascii=False, separators=(", ", ": "))
        for s in manifest.samples
    ]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path


def split(manifest: Manifest, holdout_style_id: str) -> tuple[Manifest, Manifest]:
    """Partition into (everything else, the named style)."""
    if holdout_style_id not in manifest.styles:
        raise ManifestError(f"style {holdout_style_id!r} not present in manifest")
    train = tuple(s for s in manifest.samples if s.style_id != holdout_style_id)
    holdout = tuple(s for s in manifest.samples if s.style_id == holdout_style_id)
    return Manifest(train, manifest.base_dir), Manifest(holdout, manifest.base_dir)


# --- style transforms (all structure-preserving) ---
#
# hue_shift and edge_overlay act on the chroma plane only, leaving luminance
# bit-for-bit untouched, so every luminance-derived structure cue is a fixed
# point of those transforms; invert maps luminance to 1 - luminance, which
# preserves gradients and deviations exactly.

_RGB_TO_YIQ = np.array(
    [[0.299, 0.587, 0.114],
     [0.596, -0.274, -0.322],
     [0.211, -0.523, 0.312]]
)
_YIQ_TO_RGB = np.linalg.inv(_RGB_TO_YIQ)


def _to_yiq(img: np.ndarray) -> np.ndarray:
    return img @ _RGB_TO_YIQ.T


def _to_rgb(yiq: np.ndarray) -> np.ndarray:
    return yiq @ _YIQ_TO_RGB.T


def _rgb_to_hsv(img: np.ndarray) -> np.ndarray:
    r, g, b = img[..., 0], img[..., 1], img[..., 2]
    maxc = img.max(axis=-1)
    minc = img.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    safe = np.maximum(span, 1e-12)
    rc, gc, bc = (maxc - r) / safe, (maxc - g) / safe, (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span == 0, 0.0, (h / 6.0) % 1.0)
    return np.stack([h, s, v], axis=-1)


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    channels = [
        np.choose(i, [v, q, p, p, t, v]),
        np.choose(i, [t, v, v, q, p, p]),
        np.choose(i, [p, p, t, v, v, q]),
    ]
    return np.stack(channels, axis=-1)


def transform_hue_shift(img: np.ndarray) -> np.ndarray:
    """Rotate the chroma plane by 120 degrees; luminance is unchanged."""
    yiq = _to_yiq(img)
    theta = 2.0 * np.pi / 3.0
    i, q = yiq[..., 1].copy(), yiq[..., 2].copy()
    yiq[..., 1] = i * np.cos(theta) - q * np.sin(theta)
    yiq[..., 2] = i * np.sin(theta) + q * np.cos(theta)
    return np.clip(_to_rgb(yiq), 0.0, 1.0)


def transform_invert(img: np.ndarray) -> np.ndarray:
    return 1.0 - img


def transform_posterize(img: np.ndarray, levels: int = 4) -> np.ndarray:
    return np.round(img * (levels - 1)) / (levels - 1)


_EDGE_TINT = (0.25, 0.10)  # (I, Q) chroma of the outline color


def transform_edge_overlay(img: np.ndarray) -> np.ndarray:
    """Recolor edge pixels with a fixed chroma tint; luminance is unchanged.

    The tint is scaled per pixel to stay inside the RGB gamut so no channel
    clips (which would disturb luminance).
    """
    gx, gy = sobel_gradients(luminance(img))
    edges = np.hypot(gx, gy) > 0.5
    yiq = _to_yiq(img)
    tint = np.zeros_like(yiq)
    tint[..., 1] = _EDGE_TINT[0]
    tint[..., 2] = _EDGE_TINT[1]
    # largest per-pixel scale in [0, 1] keeping y + scale * chroma in gamut
    y_only = np.zeros_like(yiq)
    y_only[..., 0] = yiq[..., 0]
    base_rgb = _to_rgb(y_only)
    tint_rgb = _to_rgb(tint)  # chroma-only contribution per channel
    with np.errstate(divide="ignore", invalid="ignore"):
        room_hi = np.where(tint_rgb > 0, (1.0 - base_rgb) / tint_rgb, np.inf)
        room_lo = np.where(tint_rgb < 0, (0.0 - base_rgb) / tint_rgb, np.inf)
    scale = np.clip(np.minimum(room_hi, room_lo).min(axis=-1), 0.0, 1.0)
    out_yiq = yiq.copy()
    out_yiq[..., 1] = np.where(edges, scale * _EDGE_TINT[0], yiq[..., 1])
    out_yiq[..., 2] = np.where(edges, scale * _EDGE_TINT[1], yiq[..., 2])
    return np.clip(_to_rgb(out_yiq), 0.0, 1.0)


STYLE_TRANSFORMS = {
    "hue_shift": transform_hue_shift,
    "invert": transform_invert,
    "posterize": transform_posterize,
    "edge_overlay": transform_edge_overlay,
}

STYLE_PHRASES = {
    "hue_shift": "hue-rotated",
    "invert": "color-inverted",
    "posterize": "posterized",
    "edge_overlay": "edge-outlined",
}

# Shape colors sit in the RGB gamut under +/-120 degree chroma rotation (so
# hue_shift never clips) and keep strong luminance contrast against both
# backgrounds through posterize quantization.
_PALETTE = {
    "lime": (0.4, 0.68, 0.0),
    "green": (0.2, 0.64, 0.24),
    "teal": (0.2, 0.56, 0.48),
    "violet": (0.6, 0.32, 1.0),
    "magenta": (0.8, 0.36, 0.76),
    "pink": (0.8, 0.44, 0.52),
}

_BACKGROUNDS = {
    "dark gray": (0.18, 0.18, 0.20),
    "light gray": (0.82, 0.82, 0.80),
}

_SHAPES = ("circle", "square", "triangle")


def _draw_shape(img: np.ndarray, shape: str, cx: float, cy: float, half: float, color) -> None:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    if shape == "circle":
        mask = (xx - cx) ** 2 + (yy - cy) ** 2 <= half**2
    elif shape == "square":
        mask = (np.abs(xx - cx) <= half) & (np.abs(yy - cy) <= half)
    else:  # triangle: apex up
        mask = (yy >= cy - half) & (yy <= cy + half) & (
            np.abs(xx - cx) <= (yy - (cy - half)) / 2.0
        )
    img[mask] = color


def _random_scene(rng: np.random.Generator, resolution: int) -> tuple[np.ndarray, str]:
    """One scene: 2-3 colored shapes on a flat gray background.

    Shapes occupy disjoint quadrants so color-on-color edges never occur;
    every edge is shape-vs-background, keeping edge maps stable under all
    style transforms.
    """
    bg_name = list(_BACKGROUNDS)[rng.integers(len(_BACKGROUNDS))]
    shade = np.array(_BACKGROUNDS[bg_name]) + rng.uniform(-0.03, 0.03)
    img = np.ones((resolution, resolution, 3), dtype=np.float64) * shade
    n_shapes = int(rng.integers(2, 4))
    described = []
    color_names = list(_PALETTE)
    cell = resolution // 2
    quadrants = rng.permutation(4)[:n_shapes]
    for quad in quadrants:
        shape = _SHAPES[rng.integers(len(_SHAPES))]
        color_name = color_names[rng.integers(len(color_names))]
        half = float(rng.uniform(resolution / 8, min(resolution / 4.5, cell / 2 - 2)))
        qy, qx = divmod(int(quad), 2)
        slack = cell / 2 - half - 1
        cx = qx * cell + cell / 2 + float(rng.uniform(-slack, slack))
        cy = qy * cell + cell / 2 + float(rng.uniform(-slack, slack))
        _draw_shape(img, shape, cx, cy, half, _PALETTE[color_name])
        described.append(f"{color_name} {shape}")
    caption = f"a {' and a '.join(described)} on a {bg_name} background"
    return img, caption


def synth_pairs(
    style_transform_id: str,
    n: int,
    seed: int,
    resolution: int = 32,
    out_dir: str | Path = "data",
) -> Manifest:
    """Generate n paired samples for one style and write images + manifest.

    Byte-identical outputs for identical arguments.
    """
    if style_transform_id not in STYLE_TRANSFORMS:
        raise InvalidInputError(
            f"unknown style transform {style_transform_id!r}; "
            f"valid: {sorted(STYLE_TRANSFORMS)}"
        )
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    out_dir = Path(out_dir)
    transform = STYLE_TRANSFORMS[style_transform_id]
    phrase = STYLE_PHRASES[style_transform_id]
    rng = rng_from_seed(seed)
    samples = []
    for idx in range(n):
        source, caption = _random_scene(rng, resolution)
        stylized = transform(source)
        src_ref = f"images/{style_transform_id}/{idx:04d}_source.png"
        sty_ref = f"images/{style_transform_id}/{idx:04d}_stylized.png"
        save_image(out_dir / src_ref, source)
        save_image(out_dir / sty_ref, stylized)
        samples.append(
            PairedSample(
                source=src_ref,
                stylized=sty_ref,
                source_caption=caption,
                stylized_caption=f"a {phrase} rendering of {caption}",
                style_id=style_transform_id,
            )
        )
    manifest = Manifest(tuple(samples), out_dir)
    save_manifest(manifest, out_dir / f"{style_transform_id}.jsonl")
    return manifest
