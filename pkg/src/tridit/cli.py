"""Command-line entry point: synth, train-style, train-consistency, generate,
bench, eval.

Every flag mirrors a config-document key; precedence is CLI > document >
defaults. Exit codes: 0 success, 1 usage, 2 validation, 3 runtime.
"""
from __future__ import annotations

import dataclasses
import json
import sys
from pathlib import Path

import click

from .bank import StyleBank, StyleBankEntry, build_bank, load_bank_manifest, write_bank_manifest
from .bench import measure_overhead
from .data import STYLE_TRANSFORMS, load_manifest, split, synth_pairs
from .errors import (
    BankLoadError,
    ConfigurationError,
    InvalidInputError,
    JudgeProtocolError,
    KindMismatchError,
    ManifestError,
    TriDiTError,
)
from .evaluation import EvalAdapters, run_benchmark
from .lora import AdapterCheckpoint, AdapterKind
from .model import ModelConfig, build_model
from .sampling import SampleConfig, generate
from .training import TrainConfig, TrainStage, train_consistency_stage, train_style_stage
from .utils import file_checksum, load_image, save_image, set_determinism

CONFIG_SECTIONS = ("model", "train", "sample")


def _load_config_document(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    unknown = set(doc) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigurationError(f"unknown config section(s) {sorted(unknown)}")
    for section, cls in (("model", ModelConfig), ("train", TrainConfig), ("sample", SampleConfig)):
        if section in doc:
            allowed = {f.name for f in dataclasses.fields(cls)}
            bad = set(doc[section]) - allowed
            if bad:
                raise ConfigurationError(f"unknown {section} config key(s) {sorted(bad)}")
    return doc


def _model_config(doc: dict, ckpts: list[AdapterCheckpoint]) -> ModelConfig:
    """Model config from checkpoint metadata when available, else the config
    document; checkpoints must agree with each other."""
    metas = [c.metadata.get("model") for c in ckpts if c.metadata.get("model")]
    for a, b in zip(metas, metas[1:]):
        if a != b:
            raise ConfigurationError("checkpoints carry different model configs")
    if metas:
        return ModelConfig.from_dict(metas[0])
    return ModelConfig(**doc.get("model", {}))


def _train_config(doc: dict, stage: TrainStage, **overrides) -> TrainConfig:
    merged = dict(doc.get("train", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    merged["stage"] = stage
    merged["model"] = ModelConfig(**doc.get("model", {}))
    return TrainConfig(**merged)


def _write_sidecar(path: Path, payload: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


@click.group()
def cli() -> None:
    """Three-branch diffusion toolkit."""
    set_determinism()


@cli.command()
@click.option("--styles", required=True, help="comma-separated style transform ids")
@click.option("--n", type=int, default=40, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--resolution", type=int, default=32, show_default=True)
@click.option("--out", type=click.Path(), default="data", show_default=True)
def synth(styles: str, n: int, seed: int, resolution: int, out: str) -> None:
    """Generate paired synthetic style datasets, one manifest per style."""
    ids = [s.strip() for s in styles.split(",") if s.strip()]
    unknown = [s for s in ids if s not in STYLE_TRANSFORMS]
    if unknown:
        raise InvalidInputError(
            f"unknown style(s) {unknown}; valid styles: {sorted(STYLE_TRANSFORMS)}"
        )
    for style_id in ids:
        manifest = synth_pairs(style_id, n=n, seed=seed, resolution=resolution, out_dir=out)
        click.echo(f"{style_id}: {len(manifest)} pairs -> {Path(out) / (style_id + '.jsonl')}")
    _write_sidecar(
        Path(out) / "synth_config.json",
        {"styles": ids, "n": n, "seed": seed, "resolution": resolution},
    )


def _common_train_options(fn):
    fn = click.option("--config", "config_path", type=click.Path(exists=True), default=None)(fn)
    fn = click.option("--steps", type=int, default=None)(fn)
    fn = click.option("--lr", type=float, default=None)(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--batch-size", type=int, default=None)(fn)
    fn = click.option("--rank", type=int, default=None)(fn)
    fn = click.option("--resume", type=click.Path(), default=None)(fn)
    fn = click.option("--out", required=True, type=click.Path(), help="checkpoint base path")(fn)
    return fn


@cli.command("train-style")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@_common_train_options
def train_style(
    manifest_path: str,
    out: str,
    config_path: str | None,
    steps: int | None,
    lr: float | None,
    seed: int | None,
    batch_size: int | None,
    rank: int | None,
    resume: str | None,
) -> None:
    """Stage 1: train one style adapter on a single-style shard."""
    doc = _load_config_document(config_path)
    config = _train_config(
        doc, TrainStage.STYLE,
        total_steps=steps, learning_rate=lr, seed=seed, batch_size=batch_size, rank=rank,
    )
    shard = load_manifest(manifest_path)
    result = train_style_stage(shard, config, out_base=out, resume_from=resume)
    base = Path(out)
    result.report.write_loss_csv(base.with_name(base.name + "_loss.csv"))
    result.report.write_json(base.with_name(base.name + "_report.json"))
    _write_sidecar(
        base.with_name(base.name + "_config.json"),
        {"command": "train-style", "manifest": str(manifest_path),
         "train": {**dataclasses.asdict(config), "stage": config.stage.value,
                   "model": config.model.to_dict()}},
    )
    click.echo(f"style checkpoint: {result.checkpoint.path}")
    if result.report.interrupted:
        raise TriDiTError("training interrupted; checkpoint written")


@cli.command("train-consistency")
@click.option("--bank", "bank_path", required=True, type=click.Path(exists=True))
@click.option("--period", type=int, default=None)
@click.option("--condition-factor", type=int, default=None)
@_common_train_options
def train_consistency(
    bank_path: str,
    period: int | None,
    condition_factor: int | None,
    out: str,
    config_path: str | None,
    steps: int | None,
    lr: float | None,
    seed: int | None,
    batch_size: int | None,
    rank: int | None,
    resume: str | None,
) -> None:
    """Stage 2: train the consistency adapter over a rolling style bank."""
    doc = _load_config_document(config_path)
    config = _train_config(
        doc, TrainStage.CONSISTENCY,
        total_steps=steps, learning_rate=lr, seed=seed, batch_size=batch_size,
        rank=rank, rolling_period=period, condition_factor=condition_factor,
    )
    if steps is None and "total_steps" not in doc.get("train", {}):
        config = dataclasses.replace(config, total_steps=900)
    bank = load_bank_manifest(bank_path)
    result = train_consistency_stage(bank, config, out_base=out, resume_from=resume)
    base = Path(out)
    result.report.write_loss_csv(base.with_name(base.name + "_loss.csv"))
    result.report.write_json(base.with_name(base.name + "_report.json"))
    _write_sidecar(
        base.with_name(base.name + "_config.json"),
        {"command": "train-consistency", "bank": str(bank_path),
         "train": {**dataclasses.asdict(config), "stage": config.stage.value,
                   "model": config.model.to_dict()}},
    )
    click.echo(f"consistency checkpoint: {result.checkpoint.path}")
    if result.report.interrupted:
        raise TriDiTError("training interrupted; checkpoint written")


def _sample_config(doc: dict, model_cfg: ModelConfig, steps, seed, guidance,
                   resolution, condition_resolution, no_reuse_cache) -> SampleConfig:
    merged = dict(doc.get("sample", {}))
    if steps is not None:
        merged["steps"] = steps
    if seed is not None:
        merged["seed"] = seed
    if guidance is not None:
        merged["guidance"] = guidance
    if no_reuse_cache:
        merged["reuse_cache"] = False
    p = model_cfg.patch_size
    if resolution is not None:
        if resolution % p:
            raise InvalidInputError(f"resolution {resolution} not divisible by patch {p}")
        merged["target_tokens"] = (resolution // p, resolution // p)
    if condition_resolution is not None:
        if condition_resolution % p:
            raise InvalidInputError(
                f"condition resolution {condition_resolution} not divisible by patch {p}"
            )
        merged["condition_tokens"] = (condition_resolution // p, condition_resolution // p)
    if "target_tokens" in merged:
        merged["target_tokens"] = tuple(merged["target_tokens"])
    if "condition_tokens" in merged:
        merged["condition_tokens"] = tuple(merged["condition_tokens"])
    return SampleConfig(**merged)


@cli.command("generate")
@click.option("--prompt", required=True)
@click.option("--condition", "condition_path", type=click.Path(), default=None)
@click.option("--style-lora", type=click.Path(), default=None)
@click.option("--consistency-lora", type=click.Path(), default=None)
@click.option("--steps", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--guidance", type=float, default=None)
@click.option("--resolution", type=int, default=None, help="target resolution in pixels")
@click.option("--condition-resolution", type=int, default=None, help="condition resolution in pixels")
@click.option("--no-reuse-cache", is_flag=True, default=False)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path())
def generate_cmd(
    prompt: str,
    condition_path: str | None,
    style_lora: str | None,
    consistency_lora: str | None,
    steps: int | None,
    seed: int | None,
    guidance: float | None,
    resolution: int | None,
    condition_resolution: int | None,
    no_reuse_cache: bool,
    config_path: str | None,
    out: str,
) -> None:
    """Sample one image; writes a PNG plus a reproducibility sidecar."""
    doc = _load_config_document(config_path)
    style_ckpt = AdapterCheckpoint.load(style_lora) if style_lora else None
    cons_ckpt = AdapterCheckpoint.load(consistency_lora) if consistency_lora else None
    ckpts = [c for c in (style_ckpt, cons_ckpt) if c is not None]
    model_cfg = _model_config(doc, ckpts)
    model = build_model(model_cfg)
    sample_cfg = _sample_config(
        doc, model_cfg, steps, seed, guidance, resolution, condition_resolution, no_reuse_cache
    )
    condition_image = load_image(condition_path) if condition_path else None
    result = generate(
        model,
        prompt,
        condition_image=condition_image,
        style_adapter=style_ckpt.adapter if style_ckpt else None,
        consistency_adapter=cons_ckpt.adapter if cons_ckpt else None,
        config=sample_cfg,
    )
    out_path = Path(out)
    save_image(out_path, result.image)
    sidecar = dict(result.sidecar)
    sidecar["files"] = {
        "condition": file_checksum(condition_path) if condition_path else None,
        "style_lora": file_checksum(Path(style_lora).with_suffix(".npz")) if style_lora else None,
        "consistency_lora": file_checksum(Path(consistency_lora).with_suffix(".npz"))
        if consistency_lora else None,
    }
    _write_sidecar(out_path.with_suffix(".json"), sidecar)
    click.echo(f"image written: {out_path}")


@cli.command("bench")
@click.option("--style-lora", type=click.Path(), default=None)
@click.option("--consistency-lora", type=click.Path(), default=None)
@click.option("--steps", type=int, default=8, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--resolution", type=int, default=None, help="target resolution in pixels")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", type=click.Path(), default=None, help="CSV output path")
def bench_cmd(
    style_lora: str | None,
    consistency_lora: str | None,
    steps: int,
    seed: int,
    resolution: int | None,
    config_path: str | None,
    out: str | None,
) -> None:
    """Measure condition-pathway overhead against the T2I baseline."""
    doc = _load_config_document(config_path)
    style_ckpt = AdapterCheckpoint.load(style_lora) if style_lora else None
    cons_ckpt = AdapterCheckpoint.load(consistency_lora) if consistency_lora else None
    model_cfg = _model_config(doc, [c for c in (style_ckpt, cons_ckpt) if c])
    model = build_model(model_cfg)
    target = (8, 8)
    if resolution is not None:
        if resolution % model_cfg.patch_size:
            raise InvalidInputError(
                f"resolution {resolution} not divisible by patch {model_cfg.patch_size}"
            )
        side = resolution // model_cfg.patch_size
        target = (side, side)
    report = measure_overhead(
        model,
        style_adapter=style_ckpt.adapter if style_ckpt else None,
        consistency_adapter=cons_ckpt.adapter if cons_ckpt else None,
        steps=steps,
        seed=seed,
        target_tokens=target,
    )
    click.echo(report.to_text())
    if out:
        report.to_csv(out)
        click.echo(f"report written: {out}")


@cli.command("eval")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True))
@click.option("--bank", "bank_path", type=click.Path(exists=True), default=None)
@click.option("--consistency-lora", type=click.Path(), default=None)
@click.option("--style-lora", "style_loras", multiple=True,
              help="style_id=checkpoint base, for styles outside the bank")
@click.option("--holdout-style", default=None)
@click.option("--seed", "seeds", multiple=True, type=int)
@click.option("--steps", type=int, default=8, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--out", required=True, type=click.Path(), help="output directory")
def eval_cmd(
    manifest_path: str,
    bank_path: str | None,
    consistency_lora: str | None,
    style_loras: tuple[str, ...],
    holdout_style: str | None,
    seeds: tuple[int, ...],
    steps: int,
    config_path: str | None,
    out: str,
) -> None:
    """Benchmark content/style consistency over a manifest."""
    doc = _load_config_document(config_path)
    manifest = load_manifest(manifest_path)
    if holdout_style is not None:
        split(manifest, holdout_style)  # validates presence

    styles: dict[str, AdapterCheckpoint] = {}
    seen: set[str] = set()
    if bank_path:
        bank = load_bank_manifest(bank_path)
        for entry in bank.entries:
            styles[entry.style_id] = AdapterCheckpoint.load(entry.adapter_ref)
            seen.add(entry.style_id)
    for spec_str in style_loras:
        if "=" not in spec_str:
            raise InvalidInputError(f"--style-lora expects style_id=path, got {spec_str!r}")
        style_id, path = spec_str.split("=", 1)
        styles[style_id] = AdapterCheckpoint.load(path)
    if holdout_style is not None:
        seen.discard(holdout_style)
    if not bank_path:
        seen = {s for s in manifest.styles if s != holdout_style}

    cons_ckpt = AdapterCheckpoint.load(consistency_lora) if consistency_lora else None
    model_cfg = _model_config(doc, [c for c in [cons_ckpt, *styles.values()] if c])
    model = build_model(model_cfg)
    adapters = EvalAdapters(
        consistency=cons_ckpt.adapter if cons_ckpt else None,
        styles={sid: c.adapter for sid, c in styles.items()},
    )
    report = run_benchmark(
        model, adapters, manifest,
        seeds=tuple(seeds) or (0,), steps=steps, seen_styles=seen,
    )
    out_dir = Path(out)
    report.to_csv(out_dir / "benchmark.csv")
    report.to_json(out_dir / "benchmark.json")
    for name, agg in report.aggregates.items():
        content = agg.get("content")
        style = agg.get("style")
        click.echo(
            f"{name}: content={content if content is None else f'{content:.4f}'} "
            f"style={style if style is None else f'{style:.4f}'}"
        )
    click.echo(f"report written: {out_dir}")


@cli.command("make-bank")
@click.option("--entry", "entries", multiple=True, required=True,
              help="style_id=adapter_base=shard_manifest")
@click.option("--out", required=True, type=click.Path())
def make_bank(entries: tuple[str, ...], out: str) -> None:
    """Assemble and validate a bank manifest from style checkpoints."""
    bank_entries = []
    for item in entries:
        parts = item.split("=")
        if len(parts) != 3:
            raise InvalidInputError(
                f"--entry expects style_id=adapter_base=shard_manifest, got {item!r}"
            )
        bank_entries.append(
            StyleBankEntry(parts[0], Path(parts[1]).resolve(), Path(parts[2]).resolve())
        )
    bank: StyleBank = build_bank(bank_entries)
    write_bank_manifest(bank, out)
    click.echo(f"bank manifest written: {out} ({len(bank)} styles)")


USAGE_EXIT, VALIDATION_EXIT, RUNTIME_EXIT = 1, 2, 3

_VALIDATION_ERRORS = (
    InvalidInputError,
    ConfigurationError,
    ManifestError,
    BankLoadError,
    KindMismatchError,
    JudgeProtocolError,
    FileNotFoundError,
)


def main(argv: list[str] | None = None) -> int:
    args = list(argv) if argv is not None else sys.argv[1:]
    try:
        cli.main(args=args, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return USAGE_EXIT
    except click.Abort:
        return USAGE_EXIT
    except _VALIDATION_ERRORS as exc:
        click.echo(f"validation error: {exc}", err=True)
        return VALIDATION_EXIT
    except KeyboardInterrupt:
        return RUNTIME_EXIT
    except Exception as exc:  # noqa: BLE001 - single CLI boundary
        click.echo(f"error: {exc}", err=True)
        return RUNTIME_EXIT


if __name__ == "__main__":
    sys.exit(main())
