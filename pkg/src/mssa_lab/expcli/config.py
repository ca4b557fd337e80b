"""Experiment configuration: TOML files with nested tables.

Top-level keys::

    kind = "verify-rates" | "soba" | "distlearn" | "check-assumptions"
    [instance]   problem parameters, or ``file = "other.toml"`` whose
                 ``[instance]`` table is merged underneath the inline keys
    [schedule]   step-size parameters
    [horizons]   ``K = 1000`` or ``lo_exp``/``hi_exp``/``base`` or ``grid = [...]``
    [seeds]      ``count`` and ``base``, or ``list = [...]``
    [output]     ``dir``, ``record_stride``, ``emit_plots``
    [flags]      ``paper_scale``
"""

from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

__all__ = ["KINDS", "ConfigError", "RunConfig", "load_config", "parse_config", "preset_names", "load_preset"]

KINDS = ("verify-rates", "soba", "distlearn", "check-assumptions")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    kind: str
    instance: dict = field(default_factory=dict)
    schedule: dict = field(default_factory=dict)
    horizons: tuple[int, ...] = (1000,)
    seeds: tuple[int, ...] = (0,)
    out_dir: Path | None = None
    record_stride: int | None = None
    emit_plots: bool = True
    paper_scale: bool = False
    source: Path | None = None

    def canonical(self) -> dict:
        """Everything that affects results; the output location does not."""
        return {
            "kind": self.kind,
            "instance": self.instance,
            "schedule": self.schedule,
            "horizons": list(self.horizons),
            "seeds": list(self.seeds),
            "record_stride": self.record_stride,
            "paper_scale": self.paper_scale,
        }

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(text.encode()).hexdigest()

    def with_overrides(self, *, out_dir=None, n_seeds: int | None = None, paper_scale: bool | None = None) -> "RunConfig":
        cfg = self
        if out_dir is not None:
            cfg = replace(cfg, out_dir=Path(out_dir))
        if n_seeds is not None:
            if n_seeds < 1:
                raise ConfigError("seed count must be >= 1")
            base = cfg.seeds[0] if cfg.seeds else 0
            cfg = replace(cfg, seeds=tuple(range(base, base + n_seeds)))
        if paper_scale is not None:
            cfg = replace(cfg, paper_scale=bool(paper_scale))
        return cfg


def _horizons(table) -> tuple[int, ...]:
    if table is None:
        return (1000,)
    if not isinstance(table, dict):
        raise ConfigError("[horizons] must be a table")
    if "grid" in table:
        ks = [int(k) for k in table["grid"]]
    elif "K" in table:
        ks = [int(table["K"])]
    elif "lo_exp" in table or "hi_exp" in table:
        base = int(table.get("base", 2))
        lo, hi = int(table.get("lo_exp", 7)), int(table.get("hi_exp", 13))
        ks = [base**j for j in range(lo, hi + 1)]
    else:
        raise ConfigError("[horizons] needs one of grid, K or lo_exp/hi_exp")
    if not ks or ks[0] < 1:
        raise ConfigError("horizons must be positive")
    if any(b <= a for a, b in zip(ks, ks[1:])):
        raise ConfigError(f"horizon grid must be strictly increasing, got {ks}")
    return tuple(ks)


def _seeds(table) -> tuple[int, ...]:
    if table is None:
        return (0,)
    if not isinstance(table, dict):
        raise ConfigError("[seeds] must be a table")
    if "list" in table:
        seeds = [int(s) for s in table["list"]]
    else:
        count = int(table.get("count", 1))
        base = int(table.get("base", 0))
        seeds = list(range(base, base + count))
    if not seeds:
        raise ConfigError("seed list is empty")
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    return tuple(seeds)


def parse_config(raw: dict, source: Path | None = None) -> RunConfig:
    kind = raw.get("kind")
    if kind not in KINDS:
        raise ConfigError(f"kind must be one of {KINDS}, got {kind!r}")
    known = {"kind", "instance", "schedule", "horizons", "seeds", "output", "flags"}
    extra = set(raw) - known
    if extra:
        raise ConfigError(f"unknown top-level keys: {sorted(extra)}")
    base_dir = source.parent if source is not None else Path.cwd()
    instance = dict(raw.get("instance", {}))
    if "file" in instance:
        path = Path(instance.pop("file"))
        path = path if path.is_absolute() else base_dir / path
        if not path.is_file():
            raise ConfigError(f"instance file not found: {path}")
        with open(path, "rb") as fh:
            inner = tomllib.load(fh).get("instance", {})
        instance = {**inner, **instance}
    for key in ("images", "labels"):
        if key in instance:
            p = Path(instance[key])
            instance[key] = str(p if p.is_absolute() else (base_dir / p).resolve())
    output = raw.get("output", {})
    flags = raw.get("flags", {})
    out_dir = output.get("dir")
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir = out_dir if out_dir.is_absolute() else base_dir / out_dir
    stride = output.get("record_stride")
    if stride is not None and int(stride) < 1:
        raise ConfigError("record_stride must be >= 1")
    return RunConfig(
        kind=kind,
        instance=instance,
        schedule=dict(raw.get("schedule", {})),
        horizons=_horizons(raw.get("horizons")),
        seeds=_seeds(raw.get("seeds")),
        out_dir=out_dir,
        record_stride=None if stride is None else int(stride),
        emit_plots=bool(output.get("emit_plots", True)),
        paper_scale=bool(flags.get("paper_scale", False)),
        source=source,
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as err:
        raise ConfigError(f"{path}: {err}") from err
    return parse_config(raw, path.resolve())


def preset_names() -> list[str]:
    root = resources.files("mssa_lab.expcli") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".toml"))


def load_preset(name: str) -> RunConfig:
    root = resources.files("mssa_lab.expcli") / "presets"
    entry = root / f"{name}.toml"
    if not entry.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {', '.join(preset_names())}")
    raw = tomllib.loads(entry.read_text())
    raw.get("output", {}).pop("dir", None)
    return parse_config(raw, None)
