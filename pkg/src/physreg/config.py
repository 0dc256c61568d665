"""Key/value configuration files for solver runs and scene generation.

Both formats are plain text, one ``key = value`` per line, ``#`` starts a
comment.  Run configs hold the sampler fields unprefixed plus ``gd.<field>`` and
``rollout.<field>`` for the baseline and the metric rollout; ``seed`` is the RNG
seed and must come from the file or the command line.  Tuples are comma
separated, pairs inside a tuple use ``a:b`` (``rotation_schedule = 30:6, 6:2, 3:2``).
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .baseline_gd import GdConfig
from .metrics import RolloutConfig
from .scenekit import GenSpec, NoiseSpec, PrimitiveSpec, default_camera
from .sensing import PinholeCamera
from .solver import SamplerConfig

CONFIG_ENV = "PHYSREG_CONFIG"


class ConfigError(ValueError):
    """Malformed or inconsistent configuration text (message names file and line)."""


def parse_kv(text: str, source: str = "<config>") -> list[tuple[str, str, int]]:
    """``(key, raw value, line number)`` triples in file order."""
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        out.append((key, value, lineno))
    return out


def _coerce(default, raw: str, where: str):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if default and isinstance(default[0], tuple):
                return tuple(tuple(float(x) for x in p.split(":")) for p in items)
            return tuple(float(p) for p in items)
        if isinstance(default, str):
            return raw
    except ValueError:
        pass
    raise ConfigError(f"{where}: cannot read {raw!r} as {type(default).__name__}")


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(":".join(repr(x) for x in v) if isinstance(v, tuple) else repr(v)
                         for v in value)
    return repr(value) if isinstance(value, float) else str(value)


@dataclass(frozen=True)
class RunConfig:
    seed: int
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    gd: GdConfig = field(default_factory=GdConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)

    def to_text(self) -> str:
        """Snapshot that :func:`parse_run_config` reads back to an equal config."""
        lines = [f"seed = {self.seed}"]
        for prefix, obj in (("", self.sampler), ("gd.", self.gd), ("rollout.", self.rollout)):
            for f in dataclasses.fields(obj):
                if prefix == "" and f.name == "rng_seed":
                    continue
                lines.append(f"{prefix}{f.name} = {_format(getattr(obj, f.name))}")
        return "\n".join(lines) + "\n"


def parse_run_config(text: str, source: str = "<config>", seed: int | None = None,
                     overrides: dict | None = None) -> RunConfig:
    """Build a :class:`RunConfig`; ``seed`` (from the CLI) wins over the file."""
    groups: dict[str, dict] = {"": {}, "gd.": {}, "rollout.": {}}
    defaults = {"": SamplerConfig(), "gd.": GdConfig(), "rollout.": RolloutConfig()}
    file_seed = None
    for key, raw, lineno in parse_kv(text, source):
        where = f"{source}:{lineno}"
        if key in ("seed", "rng_seed"):
            if file_seed is not None:
                raise ConfigError(f"{where}: duplicate key {key!r} (seed already set)")
            file_seed = _coerce(0, raw, where)
            continue
        prefix = next((p for p in ("gd.", "rollout.") if key.startswith(p)), "")
        name = key[len(prefix):]
        names = {f.name for f in dataclasses.fields(defaults[prefix])}
        if name not in names or name == "rng_seed":
            raise ConfigError(f"{where}: unknown key {key!r}")
        if name in groups[prefix]:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        groups[prefix][name] = _coerce(getattr(defaults[prefix], name), raw, where)
    final_seed = seed if seed is not None else file_seed
    if final_seed is None:
        raise ConfigError(f"{source}: no RNG seed (set 'seed' in the file or pass --seed)")
    groups[""].update(overrides or {})
    try:
        return RunConfig(int(final_seed),
                         SamplerConfig(rng_seed=int(final_seed), **groups[""]),
                         GdConfig(**groups["gd."]),
                         RolloutConfig(**groups["rollout."]))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_run_config(path: str | Path | None, seed: int | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Read ``path``, else the file named by ``$PHYSREG_CONFIG``, else defaults only."""
    if path is None:
        path = os.environ.get(CONFIG_ENV) or None
    if path is None:
        return parse_run_config("", "<defaults>", seed, overrides)
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror})") from None
    return parse_run_config(text, str(p), seed, overrides)


# ------------------------------------------------------------- generation

_GEN_FLOATS = ("camera_distance", "camera_elevation_deg")
_NOISE_KEYS = {"noise.depth_sigma": float, "noise.mask_erosion": int, "noise.rot_deg": float,
               "noise.trans": float, "noise.scale_factor": float}


def parse_gen_spec(text: str, source: str = "<spec>", seed: int | None = None) -> GenSpec:
    """Scene-generation spec.

    Keys: ``primitive = <kind> <dims...>`` (repeatable, in object order),
    ``placement``, ``seed``, ``distractors``, ``camera_distance``,
    ``camera_elevation_deg``, ``camera = fx fy cx cy width height``,
    ``noise.{depth_sigma,mask_erosion,rot_deg,trans,scale_factor}`` and, for
    ``placement = manual``, ``pose = <16 numbers>`` (object to world, row-major)
    once per primitive.
    """
    prims, poses = [], []
    kw: dict = {}
    noise: dict = {}
    for key, raw, lineno in parse_kv(text, source):
        where = f"{source}:{lineno}"
        try:
            if key == "primitive":
                parts = raw.split()
                if not parts:
                    raise ValueError("primitive needs a kind and dimensions")
                prims.append(PrimitiveSpec(parts[0], tuple(float(x) for x in parts[1:])))
            elif key == "pose":
                vals = [float(x) for x in raw.replace(",", " ").split()]
                if len(vals) != 16:
                    raise ValueError(f"pose needs 16 numbers, got {len(vals)}")
                poses.append(tuple(tuple(vals[4 * r:4 * r + 4]) for r in range(4)))
            elif key == "placement":
                kw["placement"] = raw
            elif key == "seed":
                kw["seed"] = int(raw)
            elif key == "distractors":
                kw["distractors"] = int(raw)
            elif key in _GEN_FLOATS:
                kw[key] = float(raw)
            elif key == "camera":
                v = raw.split()
                if len(v) != 6:
                    raise ValueError("camera needs fx fy cx cy width height")
                kw["camera"] = PinholeCamera(float(v[0]), float(v[1]), float(v[2]), float(v[3]),
                                             int(v[4]), int(v[5]))
            elif key in _NOISE_KEYS:
                noise[key[len("noise."):]] = _NOISE_KEYS[key](raw)
            else:
                raise ValueError(f"unknown key {key!r}")
        except ValueError as exc:
            raise ConfigError(f"{where}: {exc}") from None
    if not prims:
        raise ConfigError(f"{source}: at least one 'primitive' line is required")
    if seed is not None:
        kw["seed"] = seed
    try:
        return GenSpec(tuple(prims), noise=NoiseSpec(**noise),
                       poses=tuple(poses) if poses else None,
                       **{"camera": default_camera(), **kw})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_gen_spec(path: str | Path, seed: int | None = None) -> GenSpec:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read spec ({exc.strerror})") from None
    return parse_gen_spec(text, str(p), seed)
