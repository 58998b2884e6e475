"""Scenario configuration: flat ``dotted.key = value`` text files.

A file may name a shipped preset with ``preset = <name>``; the preset's keys
are applied first and the file's own keys override them. Radio parameters are
overridden with ``dsrc.<field>`` and ``mmwave.<field>`` keys.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .dsrc import DsrcParams
from .mmwave import MmwaveParams

APPS = ("fcw", "data_collection")
STACK_CHOICES = ("dsrc", "mmwave", "both")
PRESETS = ("fcw_dsrc", "fcw_mmwave_1450ft", "datacol_dsrc", "datacol_dsrc_160kbps", "datacol_mmwave")


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists one diagnostic per field."""

    def __init__(self, problems: list[str], *, missing_file: bool = False) -> None:
        super().__init__("; ".join(problems))
        self.problems = problems
        self.missing_file = missing_file


@dataclass
class ScenarioConfig:
    app: str = "fcw"
    stack: str = "both"
    seed: int = 1
    duration_s: float = 60.0
    output_dir: str = ""
    # corridor
    length_m: float = 1500.0
    rate_vpm: float = 20.0
    speed_mph: float = 45.0
    trace_path: str = ""
    prefill: bool = True
    # infrastructure
    rsu_x_m: list[float] = field(default_factory=list)
    rsu_y_m: float = 10.0
    rsu_spacing_m: float = 300.0
    bs_positions: list[tuple[float, float]] = field(default_factory=list)
    bs_spacing_m: float = 250.0
    bs_offset_m: float = 20.0
    # forward collision warning
    bs_distance_m: float = 441.96
    follower_gap_m: float = 50.0
    followers: int = 1
    trigger_s: float = 2.0
    warning_bytes: int = 200
    background_bsm: bool = True
    # data collection
    packet_size: int = 0  # 0: stack default (200 B DSRC, 1400 B mm-wave)
    rate_kbps: float = 0.0  # 0: stack default (16 Kbps DSRC, 4000 Kbps mm-wave)
    dsrc_bsm: bool = True
    dsrc_unicast: bool = True
    # radio overrides
    dsrc: dict = field(default_factory=dict)
    mmwave: dict = field(default_factory=dict)

    def stacks(self) -> tuple[str, ...]:
        return ("dsrc", "mmwave") if self.stack == "both" else (self.stack,)

    def dsrc_params(self) -> DsrcParams:
        return dataclasses.replace(DsrcParams(), **self.dsrc)

    def mmwave_params(self) -> MmwaveParams:
        return dataclasses.replace(MmwaveParams(), **self.mmwave)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["bs_positions"] = [list(p) for p in self.bs_positions]
        return d

    def hash(self) -> str:
        """Digest of every scenario field; changes iff one of them changes.

        ``output_dir`` is left out: it says where results go, not what is
        simulated, so the same scenario written to two places hashes alike.
        """
        fields = self.to_dict()
        fields.pop("output_dir")
        blob = json.dumps(fields, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


# key -> (field name, parser)


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _floats(s: str) -> list[float]:
    s = s.strip()
    return [float(x) for x in s.split(",") if x.strip()] if s else []


def _points(s: str) -> list[tuple[float, float]]:
    out = []
    for item in s.split(","):
        item = item.strip()
        if not item:
            continue
        x, sep, y = item.partition(":")
        if not sep:
            raise ValueError(f"expected x:y, got {item!r}")
        out.append((float(x), float(y)))
    return out


def _choice(options):
    def parse(s: str) -> str:
        v = s.strip().lower()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {s!r}")
        return v
    return parse


KEYS = {
    "app": ("app", _choice(APPS)),
    "stack": ("stack", _choice(STACK_CHOICES)),
    "seed": ("seed", int),
    "duration_s": ("duration_s", float),
    "output_dir": ("output_dir", str.strip),
    "corridor.length_m": ("length_m", float),
    "corridor.rate_vpm": ("rate_vpm", float),
    "corridor.speed_mph": ("speed_mph", float),
    "corridor.trace_path": ("trace_path", str.strip),
    "corridor.prefill": ("prefill", _bool),
    "infra.rsu_x_m": ("rsu_x_m", _floats),
    "infra.rsu_y_m": ("rsu_y_m", float),
    "infra.rsu_spacing_m": ("rsu_spacing_m", float),
    "infra.bs_positions": ("bs_positions", _points),
    "infra.bs_spacing_m": ("bs_spacing_m", float),
    "infra.bs_offset_m": ("bs_offset_m", float),
    "fcw.bs_distance_m": ("bs_distance_m", float),
    "fcw.follower_gap_m": ("follower_gap_m", float),
    "fcw.followers": ("followers", int),
    "fcw.trigger_s": ("trigger_s", float),
    "fcw.warning_bytes": ("warning_bytes", int),
    "fcw.background_bsm": ("background_bsm", _bool),
    "datacol.packet_size": ("packet_size", int),
    "datacol.rate_kbps": ("rate_kbps", float),
    "datacol.dsrc_bsm": ("dsrc_bsm", _bool),
    "datacol.dsrc_unicast": ("dsrc_unicast", _bool),
}

_RADIO = {"dsrc": DsrcParams, "mmwave": MmwaveParams}


def _radio_parser(cls, name: str):
    default = getattr(cls(), name)
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    return float


def parse_lines(text: str, origin: str = "<config>") -> list[tuple[int, str, str]]:
    out = []
    problems = []
    for no, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            problems.append(f"{origin}:{no}: expected 'key = value'")
            continue
        out.append((no, key.strip(), value.strip()))
    if problems:
        raise ConfigError(problems)
    return out


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError([f"preset: unknown preset {name!r} (known: {', '.join(PRESETS)})"])
    return resources.files("cavsim").joinpath("presets", f"{name}.cfg").read_text()


def apply_lines(cfg: ScenarioConfig, lines: list[tuple[int, str, str]], origin: str) -> list[str]:
    problems = []
    for no, key, value in lines:
        where = f"{origin}:{no}: {key}"
        if key == "preset":
            continue
        head, _, tail = key.partition(".")
        try:
            if head in _RADIO and tail:
                cls = _RADIO[head]
                if tail not in {f.name for f in dataclasses.fields(cls)}:
                    raise KeyError
                getattr(cfg, head)[tail] = _radio_parser(cls, tail)(value)
            else:
                name, parse = KEYS[key]
                setattr(cfg, name, parse(value))
        except KeyError:
            problems.append(f"{where}: unknown key")
        except ValueError as e:
            problems.append(f"{where}: {e}")
    return problems


def validate(cfg: ScenarioConfig, base: Path | None = None) -> None:
    problems = []
    missing = False
    if cfg.duration_s <= 0:
        problems.append(f"duration_s: must be positive, got {cfg.duration_s}")
    if cfg.length_m <= 0:
        problems.append(f"corridor.length_m: must be positive, got {cfg.length_m}")
    if cfg.speed_mph <= 0:
        problems.append(f"corridor.speed_mph: must be positive, got {cfg.speed_mph}")
    if cfg.rate_vpm <= 0 and not cfg.trace_path:
        problems.append(f"corridor.rate_vpm: must be positive, got {cfg.rate_vpm}")
    if cfg.trace_path:
        p = Path(cfg.trace_path)
        if not p.is_absolute() and base is not None:
            p = base / p
        if not p.is_file():
            problems.append(f"corridor.trace_path: file not found: {p}")
            missing = True
        else:
            cfg.trace_path = str(p)
    if cfg.rsu_spacing_m <= 0:
        problems.append("infra.rsu_spacing_m: must be positive")
    if cfg.bs_spacing_m <= 0:
        problems.append("infra.bs_spacing_m: must be positive")
    if cfg.bs_distance_m <= 0:
        problems.append("fcw.bs_distance_m: must be positive")
    if cfg.follower_gap_m <= 0:
        problems.append("fcw.follower_gap_m: must be positive")
    if cfg.followers < 1:
        problems.append("fcw.followers: must be at least 1")
    if cfg.trigger_s < 0:
        problems.append("fcw.trigger_s: must not be negative")
    if cfg.warning_bytes <= 0:
        problems.append("fcw.warning_bytes: must be positive")
    if cfg.packet_size < 0:
        problems.append("datacol.packet_size: must be positive (or 0 for the stack default)")
    if cfg.rate_kbps < 0:
        problems.append("datacol.rate_kbps: must be positive (or 0 for the stack default)")
    for head, cls in _RADIO.items():
        try:
            dataclasses.replace(cls(), **getattr(cfg, head))
        except (TypeError, ValueError) as e:
            problems.append(f"{head}: {e}")
    if problems:
        raise ConfigError(problems, missing_file=missing)


def loads(text: str, origin: str = "<config>", base: Path | None = None) -> ScenarioConfig:
    lines = parse_lines(text, origin)
    cfg = ScenarioConfig()
    problems = []
    presets = [(no, v) for no, k, v in lines if k == "preset"]
    if len(presets) > 1:
        problems.append(f"{origin}:{presets[1][0]}: preset: given more than once")
    elif presets:
        no, name = presets[0]
        try:
            text = preset_text(name)
        except ConfigError:
            problems.append(f"{origin}:{no}: preset: unknown preset {name!r} (known: {', '.join(PRESETS)})")
        else:
            problems += apply_lines(cfg, parse_lines(text, f"preset {name}"), f"preset {name}")
    problems += apply_lines(cfg, lines, origin)
    if problems:
        raise ConfigError(problems)
    validate(cfg, base)
    return cfg


def load(path_or_preset: str | os.PathLike) -> ScenarioConfig:
    """Read a config file, or a bare preset name."""
    p = Path(path_or_preset)
    if not p.exists() and str(path_or_preset) in PRESETS:
        name = str(path_or_preset)
        cfg = loads(preset_text(name), f"preset {name}")
        if not cfg.output_dir:
            cfg.output_dir = f"out/{name}"
        return cfg
    if not p.is_file():
        raise ConfigError([f"config: file not found: {p}"], missing_file=True)
    cfg = loads(p.read_text(), str(p), p.parent)
    if not cfg.output_dir:
        cfg.output_dir = f"out/{p.stem}"
    return cfg


def dumps(cfg: ScenarioConfig) -> str:
    """Render a config back to the flat text format."""
    names = {name: key for key, (name, _) in KEYS.items()}
    out = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if f.name in _RADIO:
            for k in sorted(v):
                out.append(f"{f.name}.{k} = {_render(v[k])}")
            continue
        out.append(f"{names[f.name]} = {_render(v)}")
    return "\n".join(out) + "\n"


def _render(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, list):
        return ",".join(f"{p[0]!r}:{p[1]!r}" if isinstance(p, tuple) else repr(p) for p in v)
    return str(v)
