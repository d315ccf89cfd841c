"""Line-based ``key = value`` run configuration with [model]/[train]/[data] sections.

Blocks are given as repeated ``block`` lines in the model section::

    block = in_ch, out_ch, expansion, kernel, stride, se, sa, activation

``preset = toy`` or ``preset = large`` (first in the model section) seeds
every model field from a built-in configuration; later keys override it.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

from .backbone import BottleneckConfig, ModelConfig, large_config, toy_config
from .data import DatasetSpec
from .train import TrainConfig


class ConfigParseError(ValueError):
    def __init__(self, line: Optional[int], message: str):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


@dataclass(frozen=True)
class DataSettings:
    interval: int = 2
    angle_mode: str = "subset"
    angles_per_image: int = 24
    crop: str = "inscribed"
    seed: int = 0
    interpolation: str = "bilinear"

    def to_spec(self, source, input_size: int) -> DatasetSpec:
        return DatasetSpec(source=source, input_size=input_size, **dataclasses.asdict(self))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=toy_config)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataSettings = field(default_factory=DataSettings)


PRESETS = {"toy": toy_config, "large": large_config}
_BOOL = {"true": True, "yes": True, "1": True, "false": False, "no": False, "0": False}


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    return str(v)


def _format_block(b: BottleneckConfig) -> str:
    return ", ".join(
        _fmt(v) for v in (b.in_ch, b.out_ch, float(b.expansion), b.kernel, b.stride, b.use_se, b.use_sa, b.activation)
    )


def _parse_bool(text: str) -> bool:
    try:
        return _BOOL[text.strip().lower()]
    except KeyError:
        raise ValueError(f"expected a boolean, got {text!r}") from None


def _parse_block(text: str) -> BottleneckConfig:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 8:
        raise ValueError("block needs 8 comma-separated fields: in, out, expansion, kernel, stride, se, sa, activation")
    return BottleneckConfig(
        int(parts[0]),
        int(parts[1]),
        float(parts[2]),
        int(parts[3]),
        int(parts[4]),
        _parse_bool(parts[5]),
        _parse_bool(parts[6]),
        parts[7],
    )


def _convert(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(x) for x in text.split(",") if x.strip())
    return text


def _section_body(obj, skip=()) -> list:
    return [f"{f.name} = {_fmt(getattr(obj, f.name))}" for f in dataclasses.fields(obj) if f.name not in skip]


def serialize_model(cfg: ModelConfig) -> str:
    lines = ["[model]"]
    lines += _section_body(cfg, skip=("blocks",))
    lines += [f"block = {_format_block(b)}" for b in cfg.blocks]
    return "\n".join(lines) + "\n"


def serialize(rc: RunConfig) -> str:
    out = serialize_model(rc.model)
    out += "\n[train]\n" + "\n".join(_section_body(rc.train)) + "\n"
    out += "\n[data]\n" + "\n".join(_section_body(rc.data)) + "\n"
    return out


def parse(text: str) -> RunConfig:
    sections = {"model": {}, "train": {}, "data": {}}
    blocks: list = []
    preset = None
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in sections:
                raise ConfigParseError(no, f"unknown section [{current}]")
            continue
        if "=" not in line:
            raise ConfigParseError(no, f"expected 'key = value', got {raw.strip()!r}")
        if current is None:
            raise ConfigParseError(no, "key outside of a section")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if current == "model" and key == "preset":
                if value not in PRESETS:
                    raise ValueError(f"unknown preset {value!r}; choose from {sorted(PRESETS)}")
                preset = value
            elif current == "model" and key == "block":
                blocks.append(_parse_block(value))
            else:
                sections[current][key] = (no, value)
        except ValueError as exc:
            raise ConfigParseError(no, str(exc)) from None

    base_model = PRESETS[preset]() if preset else toy_config()
    model_kw = {} if not blocks else {"blocks": tuple(blocks)}
    try:
        model = _build(ModelConfig, base_model, sections["model"], model_kw, skip=("blocks",))
        train = _build(TrainConfig, TrainConfig(), sections["train"], {})
        data = _build(DataSettings, DataSettings(), sections["data"], {})
    except ConfigParseError:
        raise
    except ValueError as exc:
        raise ConfigParseError(None, str(exc)) from None
    return RunConfig(model, train, data)


def _build(cls, base, entries: dict, extra: dict, skip=()):
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    kw = dict(extra)
    for key, (no, value) in entries.items():
        if key not in names:
            raise ConfigParseError(no, f"unknown key {key!r}")
        try:
            kw[key] = _convert(getattr(base, key), value)
        except ValueError as exc:
            raise ConfigParseError(no, f"bad value for {key}: {exc}") from None
    return dataclasses.replace(base, **kw)


def load(path) -> RunConfig:
    with open(path, encoding="utf-8") as f:
        return parse(f.read())


def dump(path, rc: RunConfig) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(serialize(rc))
