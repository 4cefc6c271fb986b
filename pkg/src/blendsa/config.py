"""Run configuration: JSON validated against a published schema before any
computation; relative paths resolve against the config file's directory."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema

from .engine import ModularizationSpec, load_spec
from .errors import SpecError
from .tabular import ColumnTable, load_schema, parse_schema, read_csv

DEFAULT_M = 10
DEFAULT_B = 300
DEFAULT_ALPHA = 0.05


def config_schema() -> dict:
    text = resources.files("blendsa").joinpath("data", "config.schema.json").read_text(encoding="utf-8")
    return json.loads(text)


class ConfigError(SpecError):
    """Config failed validation; ``path`` is a JSON pointer to the offending node."""

    def __init__(self, message, path=""):
        super().__init__(f"{path or '/'}: {message}")
        self.path = path


def _pointer(parts) -> str:
    return "".join("/" + str(p).replace("~", "~0").replace("/", "~1") for p in parts)


def validate(obj) -> None:
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(obj), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, _pointer(e.absolute_path))


@dataclass
class RunConfig:
    raw: dict
    base: Path
    table: ColumnTable
    spec: ModularizationSpec
    seed: int
    M: int = DEFAULT_M
    B: int = DEFAULT_B
    alpha: float = DEFAULT_ALPHA
    out: Path | None = None
    weight_cap: float | None = None
    per_cell_ci: int = 0
    full_grid: bool = False
    threads: int | None = None
    extras: dict = field(default_factory=dict)

    @property
    def digest(self) -> str:
        return config_digest(self.raw)


def config_digest(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _resolve(base: Path, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else base / p


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON ({exc.msg} at line {exc.lineno})") from None
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from None
    validate(raw)
    base = path.parent
    sch = raw["data"]["schema"]
    schema = load_schema(_resolve(base, sch)) if isinstance(sch, str) else parse_schema(sch)
    table = read_csv(_resolve(base, raw["data"]["path"]), schema)
    sp = raw["spec"]
    if isinstance(sp, str):
        with open(_resolve(base, sp), encoding="utf-8") as fh:
            sp = json.load(fh)
    sp = dict(sp)
    if "assignment" in raw:
        sp["assignment"] = raw["assignment"]
    try:
        spec = load_spec(sp)
    except SpecError as exc:
        raise ConfigError(str(exc), "/spec") from None
    for col in _spec_columns(spec):
        if col not in table:
            raise ConfigError(f"spec references column {col!r} absent from the data", "/spec")
    return RunConfig(
        raw=raw,
        base=base,
        table=table,
        spec=spec,
        seed=int(raw["seed"]),
        M=int(raw.get("M", DEFAULT_M)),
        B=int(raw.get("B", DEFAULT_B)),
        alpha=float(raw.get("alpha", DEFAULT_ALPHA)),
        out=_resolve(base, raw["out"]) if "out" in raw else None,
        weight_cap=raw.get("weight_cap"),
        per_cell_ci=int(raw.get("per_cell_ci", 0)),
        full_grid=bool(raw.get("full_grid", False)),
        threads=raw.get("threads"),
    )


def _spec_columns(spec: ModularizationSpec):
    derived = {d.name for d in spec.derived}
    cols = []
    for m in spec.mechanisms:
        cols.extend(m.variables)
        for c in (m.indicator, m.time, m.event, m.sensitivity_column):
            if c:
                cols.append(c)
        if m.model is not None:
            cols.extend(m.model.variables)
        for _, chain in m.models:
            for f in chain:
                cols.extend(f.variables)
    for d in spec.derived:
        cols.extend(d.args)
    cols.extend(v for v in [spec.analysis.response, *spec.analysis.variables] if v not in derived)
    return list(dict.fromkeys(cols))
