"""Line-oriented ``key = value`` experiment configuration.

Grammar: one ``key = value`` pair per line; ``#`` starts a comment; blank
lines are ignored; list values are comma separated. ``segments`` holds
``anchors > targets`` groups separated by ``;``, e.g. ``4,6 > 12,16``.
Unknown keys and repeated keys are errors.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields

from amup.netcore import ACTIVATIONS, FAMILIES, PADDINGS, ArchSpec
from amup.scaling import FIT_KINDS, RULES, SweepGrid


class ConfigError(ValueError):
    """Invalid configuration; ``line`` or ``field`` locate the problem."""

    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = f"line {line}: " if line is not None else ""
        where += f"{field}: " if field is not None else ""
        super().__init__(where + message)
        self.line = line
        self.field = field


@dataclass(frozen=True)
class ExperimentConfig:
    family: str = "mlp"
    depths: tuple[int, ...] = (4, 8)
    width: int = 64
    in_channels: int = 64
    spatial: tuple[int, ...] = ()
    kernel: int = 3
    padding: str = "circular"
    activation: str = "relu"
    c: float = 2.0
    branch_depth: int = 1
    head_init: str = "mup"
    task: str = "synthetic10"
    data_path: str = ""
    sigma_y: float = 1.0
    grid_count: int = 40
    grid_min: float = 1e-4
    grid_max: float = 1e1
    batch: int = 128
    epochs: int = 1
    replicates: int = 64
    probe_eta: float = 1e-4
    probe_batch: int = 128
    seeds: tuple[int, ...] = (0,)
    rule: str = "val_acc"
    fit_kind: str = "WLS"
    segments: tuple[tuple[tuple[int, ...], tuple[int, ...]], ...] = ()
    out: str = "amup-out"

    def __post_init__(self):
        _validate(self)

    @property
    def grid(self) -> SweepGrid:
        return SweepGrid(self.grid_count, self.grid_min, self.grid_max)

    def spec_for(self, L: int, out_dim: int = 10) -> ArchSpec:
        return ArchSpec(
            family=self.family,
            depth=L,
            width=self.width,
            in_channels=self.in_channels,
            spatial=self.spatial,
            kernel=self.kernel,
            padding=self.padding,
            activation=self.activation,
            out_dim=out_dim,
            branch_depth=self.branch_depth,
            res_c=self.c,
            head_init=self.head_init,
        )

    def to_text(self) -> str:
        """Canonical text form; parsing it gives back an equal config."""
        lines = []
        for f in fields(self):
            lines.append(f"{f.name} = {_render(f.name, getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        """Hash of everything that changes numeric results (``out`` excluded)."""
        text = "\n".join(l for l in self.to_text().splitlines() if not l.startswith("out ="))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _render(name: str, value) -> str:
    if name == "segments":
        return "; ".join(f"{','.join(map(str, a))} > {','.join(map(str, t))}" for a, t in value)
    if isinstance(value, tuple):
        return ", ".join(map(str, value))
    return str(value)


_INT = {"width", "in_channels", "kernel", "branch_depth", "grid_count", "batch", "epochs",
        "replicates", "probe_batch"}
_FLOAT = {"c", "sigma_y", "grid_min", "grid_max", "probe_eta"}
_INT_LIST = {"depths", "spatial", "seeds"}
_STR = {"family", "padding", "activation", "head_init", "task", "data_path", "rule", "fit_kind", "out"}
KEYS = _INT | _FLOAT | _INT_LIST | _STR | {"segments"}


def _parse_value(key: str, raw: str, line: int):
    try:
        if key in _INT:
            return int(raw)
        if key in _FLOAT:
            return float(raw)
        if key in _INT_LIST:
            return tuple(int(v) for v in raw.split(",") if v.strip()) if raw.strip() else ()
        if key == "segments":
            segs = []
            for chunk in raw.split(";"):
                if not chunk.strip():
                    continue
                left, sep, right = chunk.partition(">")
                if not sep:
                    raise ValueError("segment needs 'anchors > targets'")
                segs.append((tuple(int(v) for v in left.split(",")), tuple(int(v) for v in right.split(","))))
            return tuple(segs)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value {raw!r} ({exc})", line, key) from None


def parse_config(text: str) -> ExperimentConfig:
    values: dict = {}
    for n, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, raw = line.partition("=")
        key, raw = key.strip(), raw.strip()
        if not sep or not key:
            raise ConfigError("expected 'key = value'", n)
        if key not in KEYS:
            raise ConfigError(f"unknown key {key!r}", n, key)
        if key in values:
            raise ConfigError(f"key {key!r} given twice", n, key)
        values[key] = _parse_value(key, raw, n)
    try:
        return ExperimentConfig(**values)
    except ConfigError:
        raise
    except ValueError as exc:  # raised by ArchSpec or SweepGrid
        raise ConfigError(str(exc)) from None


def load_config(path: str) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def _validate(cfg: ExperimentConfig) -> None:
    def need(cond: bool, field: str, msg: str):
        if not cond:
            raise ConfigError(msg, field=field)

    need(cfg.family in FAMILIES, "family", f"must be one of {FAMILIES}")
    need(cfg.padding in PADDINGS, "padding", f"must be one of {PADDINGS}")
    need(cfg.activation in ACTIVATIONS, "activation", f"must be one of {ACTIVATIONS}")
    need(cfg.head_init in ("mup", "he"), "head_init", "must be 'mup' or 'he'")
    need(cfg.task in ("synthetic10", "image-binary"), "task", "must be synthetic10 or image-binary")
    need(cfg.task != "image-binary" or bool(cfg.data_path), "data_path", "required for image-binary")
    need(len(cfg.depths) > 0, "depths", "must not be empty")
    need(all(d >= 1 for d in cfg.depths), "depths", "must be positive")
    need(list(cfg.depths) == sorted(set(cfg.depths)), "depths", "must be strictly ascending")
    need(len(cfg.seeds) > 0, "seeds", "must not be empty")
    need(len(set(cfg.seeds)) == len(cfg.seeds), "seeds", "must be distinct")
    need(cfg.width >= 1, "width", "must be positive")
    need(cfg.batch >= 1 and cfg.probe_batch >= 1, "batch", "must be positive")
    need(cfg.epochs >= 1, "epochs", "must be positive")
    need(cfg.replicates >= 2, "replicates", "must be at least 2")
    need(cfg.sigma_y > 0, "sigma_y", "must be positive")
    need(cfg.probe_eta > 0, "probe_eta", "must be positive")
    need(cfg.c > 0, "c", "must be positive")
    need(cfg.rule in RULES, "rule", f"must be one of {RULES}")
    need(cfg.fit_kind in FIT_KINDS, "fit_kind", f"must be one of {FIT_KINDS}")
    need(cfg.grid_count >= 1 and 0 < cfg.grid_min < cfg.grid_max, "grid_count", "grid must satisfy 0 < min < max")
    for anchors, targets in cfg.segments:
        need(len(anchors) >= 2 and len(set(anchors)) == len(anchors), "segments",
             "each segment needs at least 2 distinct anchor depths")
        need(set(anchors) | set(targets) <= set(cfg.depths), "segments", "segment depths must be listed in depths")
    try:
        cfg.spec_for(cfg.depths[0])
    except ValueError as exc:
        raise ConfigError(str(exc), field="family") from None
