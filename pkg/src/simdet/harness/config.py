"""Scheme presets and the ``key = value`` configuration file format."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from simdet.diffcore import SEGMENT_NAMES
from simdet.errors import ConfigurationError, ParseError

ALL_SEGMENTS = frozenset(SEGMENT_NAMES)
STAGES = ("C", "V", "R")


@dataclass(frozen=True)
class SchemeConfig:
    """Everything that determines one staged training run.

    Stage C pretrains on an auxiliary task, stage V trains on virtual data
    and stage R fine-tunes on real data. ``transfer_segments`` and
    ``frozen_segments`` govern the hand-over into stage R;
    ``pretrain_segments`` governs C into V.
    """

    scheme: str
    stages: tuple[str, ...] = ("C", "V", "R")
    seed: int = 0
    virtual_n: int = 2000
    real_n: int = 220
    pretrain_n: int = 500
    num_classes: int = 7
    image_size: int = 64
    max_objects: int = 4
    boxes_per_cell: int = 2
    virtual_brightness: float = -0.25
    virtual_noise: float = 0.05
    real_brightness: float = 0.0
    real_noise: float = 0.1
    epochs_c: int = 20
    epochs_v: int = 30
    epochs_r: int = 30
    transfer_segments: frozenset = ALL_SEGMENTS
    frozen_segments: frozenset = frozenset()
    pretrain_segments: frozenset = ALL_SEGMENTS
    mosaic: bool = False
    mosaic_prob: float = 0.5
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 8
    warmup_steps: int = 50
    grad_clip: float = 10.0
    lambda_noobj: float = 0.5
    conf_thresh: float = 0.005
    iou_thresh: float = 0.5
    virtual_manifest: str | None = None
    real_train_manifest: str | None = None
    real_test_manifest: str | None = None
    pretrain_weights: str | None = None
    data_dir: str | None = None
    out_dir: str = "runs/out"
    resume: bool = False

    def __post_init__(self) -> None:
        for name in ("transfer_segments", "frozen_segments", "pretrain_segments"):
            value = frozenset(getattr(self, name))
            object.__setattr__(self, name, value)
            bad = value - ALL_SEGMENTS
            if bad:
                raise ConfigurationError(f"{name}: unknown segment(s) {sorted(bad)}; valid: {list(SEGMENT_NAMES)}")
        if not self.stages or self.stages[-1] != "R" or list(self.stages) != sorted(self.stages, key=STAGES.index):
            raise ConfigurationError(f"stages must be an ordered subset of C, V, R ending in R, got {self.stages}")
        if set(self.stages) - set(STAGES):
            raise ConfigurationError(f"unknown stage in {self.stages}")
        if self.frozen_segments and len(self.stages) == 1:
            raise ConfigurationError("frozen segments need an earlier stage to supply their weights")
        if self.frozen_segments >= ALL_SEGMENTS:
            raise ConfigurationError("freezing every segment leaves nothing to fine-tune")
        for name in ("virtual_n", "real_n", "pretrain_n", "batch_size", "num_classes"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.real_n < 2 and self.real_train_manifest is None:
            raise ConfigurationError("real_n must be >= 2 so it can be split")
        if min(self.epochs_c, self.epochs_v, self.epochs_r) < 0:
            raise ConfigurationError("epochs must be non-negative")
        if not 0 < self.iou_thresh <= 1 or not 0 <= self.conf_thresh <= 1:
            raise ConfigurationError("iou_thresh must lie in (0, 1] and conf_thresh in [0, 1]")

    @property
    def loaded_segments(self) -> frozenset:
        """Segments copied from the stage-V weights into stage R.

        A frozen segment is always carried over: freezing a freshly
        initialized segment would pin random weights.
        """
        return self.transfer_segments | self.frozen_segments

    def replace(self, **changes) -> "SchemeConfig":
        return dataclasses.replace(self, **changes)


_PRESETS = {
    "YR": dict(stages=("R",), transfer_segments=frozenset(), frozen_segments=frozenset()),
    "YVR": dict(stages=("V", "R")),
    "YCVR": dict(stages=("C", "V", "R")),
    "YCSVR": dict(stages=("C", "V", "R"), transfer_segments=frozenset({"backbone", "neck"}), frozen_segments=frozenset({"head"})),
    "YCMVR": dict(stages=("C", "V", "R"), mosaic=True),
    "YCMSVR": dict(
        stages=("C", "V", "R"), transfer_segments=frozenset({"backbone"}), frozen_segments=frozenset({"head"}), mosaic=True
    ),
}
SCHEME_NAMES = tuple(_PRESETS)


def scheme_config(name: str, **overrides) -> SchemeConfig:
    """Preset for ``name`` with any field overridden."""
    if name not in _PRESETS:
        raise ConfigurationError(f"unknown scheme {name!r}; valid schemes: {', '.join(SCHEME_NAMES)}")
    return SchemeConfig(scheme=name, **{**_PRESETS[name], **overrides})


# ---------------------------------------------------------------------------
# key = value files


def parse_config_text(text: str, allowed: set[str] | None = None, source: str = "<config>") -> dict[str, str]:
    """Raw ``key -> value`` pairs; ``#`` starts a comment, blank lines are ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ParseError(f"{source}: expected 'key = value'", lineno)
        if allowed is not None and key not in allowed:
            raise ParseError(f"{source}: unknown key {key!r}", lineno)
        if key in out:
            raise ParseError(f"{source}: duplicate key {key!r}", lineno)
        out[key] = value
    return out


def read_config_file(path, allowed: set[str] | None = None) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text, allowed, str(path))


def _to_bool(s: str) -> bool:
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _to_list(s: str) -> list[str]:
    return [p.strip() for p in s.split(",") if p.strip()]


def _to_segments(s: str) -> frozenset:
    return frozenset() if s.lower() in ("", "none", "-") else frozenset(_to_list(s))


def _to_stages(s: str) -> tuple[str, ...]:
    items = _to_list(s)
    if len(items) == 1 and len(items[0]) > 1:  # "CVR" shorthand
        items = list(items[0])
    return tuple(items)


def _to_opt_str(s: str) -> str | None:
    return None if s.lower() in ("", "none") else s


_CONVERTERS = {
    "scheme": str,
    "stages": _to_stages,
    "transfer_segments": _to_segments,
    "frozen_segments": _to_segments,
    "pretrain_segments": _to_segments,
    "mosaic": _to_bool,
    "resume": _to_bool,
    "out_dir": str,
}
for _f in dataclasses.fields(SchemeConfig):
    if _f.name in _CONVERTERS:
        continue
    if _f.type in ("int",):
        _CONVERTERS[_f.name] = int
    elif _f.type in ("float",):
        _CONVERTERS[_f.name] = float
    else:
        _CONVERTERS[_f.name] = _to_opt_str

SCHEME_KEYS = set(_CONVERTERS)


def convert_fields(raw: dict[str, str]) -> dict:
    out = {}
    for key, value in raw.items():
        try:
            out[key] = _CONVERTERS[key](value)
        except (ValueError, KeyError) as exc:
            raise ConfigurationError(f"bad value for {key!r}: {value!r} ({exc})") from exc
    return out


def config_from_mapping(raw: dict[str, str], **defaults) -> SchemeConfig:
    """Build a config from string fields: preset of ``scheme`` first, then overrides."""
    fields = {**defaults, **convert_fields(raw)}
    name = fields.pop("scheme", None)
    if name is None:
        raise ConfigurationError("config must name a scheme")
    return scheme_config(name, **fields)
