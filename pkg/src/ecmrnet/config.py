"""Flat ``key = value`` run configuration.

Lines are ``key = value`` with ``#`` comments; stage shapes use dotted keys
(``stage.0.width``, ``stage.0.groups``). Absent keys take the defaults of the
selected ``preset`` ("full" unless stated). Precedence, lowest first:
preset defaults, file, ``ECMR_SEED``, command-line overrides.
"""

from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .backbone import FULL_STAGES, StageConfig
from .degradations import TaskSpec, build_task_sequence
from .trainer import DESK, TrainConfig


class ConfigError(ValueError):
    """Unknown key, bad value or missing file; maps to exit code 1."""


_TRAIN_KEYS = {f.name: f.type for f in fields(TrainConfig)}

_MODEL_KEYS = {
    "blocks": int,
    "dtype": str,
    "global_residual": bool,
    "head_init": str,
    "skmm.dim": int,
    "skmm.rank": int,
    "skmm.hidden": int,
}

_OTHER_KEYS = {
    "preset": str,
    "sequence": str,
    "model_path": str,
    "records_path": str,
    "report_path": str,
}

_STAGE_KEY = re.compile(r"stage\.(\d+)\.(width|groups)$")
_DESK_STAGES = ((8, 2), (16, 4), (16, 4), (8, 2))


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _kind(key: str):
    if _STAGE_KEY.match(key):
        return int
    for table in (_TRAIN_KEYS, _MODEL_KEYS, _OTHER_KEYS):
        if key in table:
            t = table[key]
            return {"int": int, "float": float, "str": str, "bool": bool}.get(t, t)
    return None


def convert(key: str, raw: str) -> Any:
    kind = _kind(key)
    if kind is None:
        raise ConfigError(f"unknown key {key!r}")
    try:
        if kind is bool:
            return _parse_bool(raw)
        return kind(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot read {raw!r} as {kind.__name__}") from None


def parse_lines(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            out[key] = convert(key, raw)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{n}: {exc}") from None
    return out


@dataclass
class RunConfig:
    train: TrainConfig
    stages: list[StageConfig]
    sequence: list[TaskSpec]
    skmm_dim: int = 32
    skmm_rank: int = 8
    skmm_hidden: int | None = None
    dtype: str = "float64"
    global_residual: bool = False
    head_init: str = "copy"
    preset: str = "full"
    model_path: str = "checkpoints"
    records_path: str = "records.csv"
    report_path: str = "report.md"
    source: str | None = None
    overrides: dict[str, Any] = field(default_factory=dict)

    def echo(self) -> str:
        """Every resolved value, one ``key = value`` per line."""
        lines = [f"# source: {self.source or '(none)'}", f"preset = {self.preset}"]
        lines += [f"{f.name} = {getattr(self.train, f.name)}" for f in fields(TrainConfig)]
        for i, st in enumerate(self.stages):
            lines += [f"stage.{i}.width = {st.width}", f"stage.{i}.groups = {st.groups}"]
        lines += [f"blocks = {self.stages[0].blocks}",
                  f"skmm.dim = {self.skmm_dim}", f"skmm.rank = {self.skmm_rank}",
                  f"skmm.hidden = {self.skmm_hidden if self.skmm_hidden else 4 * self.skmm_dim}",
                  f"dtype = {self.dtype}", f"global_residual = {self.global_residual}",
                  f"head_init = {self.head_init}",
                  f"sequence = {','.join(t.task_id for t in self.sequence)}",
                  f"model_path = {self.model_path}", f"records_path = {self.records_path}",
                  f"report_path = {self.report_path}"]
        return "\n".join(lines) + "\n"


def _sequence(text: str) -> list[TaskSpec]:
    known = {t.task_id: t for t in build_task_sequence()}
    out = []
    for tid in (s.strip() for s in text.split(",")):
        if tid not in known:
            raise ConfigError(f"unknown task {tid!r} in sequence")
        out.append(known[tid])
    return out


def resolve(values: dict[str, Any], source: str | None = None,
            overrides: dict[str, Any] | None = None) -> RunConfig:
    values = dict(values)
    preset = values.pop("preset", "full")
    if preset not in ("full", "desk"):
        raise ConfigError(f"unknown preset {preset!r}")
    base = DESK if preset == "desk" else TrainConfig()
    train_kw = {k: values.pop(k) for k in list(values) if k in _TRAIN_KEYS}
    try:
        train = TrainConfig(**{**{f.name: getattr(base, f.name) for f in fields(TrainConfig)},
                               **train_kw})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    shapes = [list(s) for s in (_DESK_STAGES if preset == "desk"
                                else [(c.width, c.groups) for c in FULL_STAGES])]
    for key in [k for k in values if _STAGE_KEY.match(k)]:
        i, what = _STAGE_KEY.match(key).groups()
        i = int(i)
        if i >= len(shapes):
            shapes.extend([None, None] for _ in range(i + 1 - len(shapes)))
        shapes[i][0 if what == "width" else 1] = values.pop(key)
    if any(v is None for s in shapes for v in s):
        raise ConfigError("every stage needs both width and groups")
    try:
        blocks = values.pop("blocks", 2)
        stages = [StageConfig(w, g, blocks) for w, g in shapes]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    seq = _sequence(values.pop("sequence")) if "sequence" in values else build_task_sequence()
    cfg = RunConfig(train, stages, seq, preset=preset, source=source, overrides=overrides or {})
    for key, attr in (("skmm.dim", "skmm_dim"), ("skmm.rank", "skmm_rank"),
                      ("skmm.hidden", "skmm_hidden"), ("dtype", "dtype"),
                      ("global_residual", "global_residual"), ("head_init", "head_init"),
                      ("model_path", "model_path"), ("records_path", "records_path"),
                      ("report_path", "report_path")):
        if key in values:
            setattr(cfg, attr, values.pop(key))
    if values:
        raise ConfigError(f"unknown keys: {sorted(values)}")
    if cfg.dtype not in ("float64", "float32"):
        raise ConfigError(f"dtype must be float64 or float32, not {cfg.dtype!r}")
    if cfg.head_init not in ("copy", "he"):
        raise ConfigError(f"head_init must be copy or he, not {cfg.head_init!r}")
    if not 0 < cfg.skmm_rank < cfg.skmm_dim:
        raise ConfigError("need 0 < skmm.rank < skmm.dim")
    return cfg


def parse_config(path=None, overrides: dict[str, str] | None = None,
                 env: dict[str, str] | None = None) -> RunConfig:
    """Read ``path`` (optional), then apply ``ECMR_SEED`` and raw overrides."""
    values: dict[str, Any] = {}
    source = None
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        values = parse_lines(p.read_text(encoding="utf-8"), str(p))
        source = str(p)
    env = os.environ if env is None else env
    if env.get("ECMR_SEED"):
        values["seed"] = convert("seed", env["ECMR_SEED"])
    typed = {k: convert(k, v) for k, v in (overrides or {}).items()}
    values.update(typed)
    return resolve(values, source, typed)
