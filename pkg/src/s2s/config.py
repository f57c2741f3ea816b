"""Flat ``key: value`` experiment configuration files.

One setting per line, dotted keys, ``#`` starts a comment::

    name: attention
    seeds: 1,2,3
    attention.type: mul
    decoder.depth: 2
    beam.width: 10
    sweep.axis: attention.type
    sweep.values: mul,none-input

Multi-field rows use ``variant.<label>: key=value; key=value``.
Unknown keys are rejected.
"""
from __future__ import annotations

import difflib
from dataclasses import dataclass, field

from .beam import BeamConfig
from .model import AttentionConfig, DecoderConfig, EncoderConfig, ModelConfig
from .trainer import TrainSchedule


class ConfigError(ValueError):
    pass


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _ints(s: str) -> list:
    return [int(x) for x in s.split(",") if x.strip()]


def _opt_str(s: str):
    return s.strip() or None


# key -> (parser, default)
SCHEMA = {
    "name": (str, "experiment"),
    "seeds": (_ints, None),
    "replicas": (int, 4),
    "vocab_size": (int, 20),
    "embedding_dim": (int, 512),
    "units": (int, 512),
    "dropout": (float, 0.2),
    "forget_bias": (float, 1.0),
    "init_scale": (float, 0.04),
    "encoder.direction": (str, "bidi"),
    "encoder.depth": (int, 2),
    "encoder.reverse_source": (_bool, False),
    "encoder.cell": (str, "gru"),
    "encoder.residual": (str, "none"),
    "decoder.depth": (int, 2),
    "decoder.cell": (str, "gru"),
    "decoder.residual": (str, "none"),
    "attention.type": (str, "mul"),
    "attention.dim": (int, 512),
    "train.batch_size": (int, 32),
    "train.max_steps": (int, 2000),
    "train.checkpoint_every": (int, 200),
    "train.learning_rate": (float, 1e-4),
    "train.clip_norm": (float, 5.0),
    "train.max_length": (int, 50),
    "train.valid_beam": (int, 1),
    "beam.width": (int, 10),
    "beam.alpha": (float, 0.6),
    "beam.max_length": (int, 100),
    "data.task": (_opt_str, "copy"),
    "data.train_size": (int, 2000),
    "data.valid_size": (int, 200),
    "data.test_size": (int, 200),
    "data.min_len": (int, 5),
    "data.max_len": (int, 10),
    "data.seed": (int, 0),
    "data.train_src": (_opt_str, None),
    "data.train_tgt": (_opt_str, None),
    "data.valid_src": (_opt_str, None),
    "data.valid_tgt": (_opt_str, None),
    "data.test_src": (_opt_str, None),
    "data.test_tgt": (_opt_str, None),
    "data.vocab": (_opt_str, None),
    "sweep.axis": (_opt_str, None),
    "sweep.values": (str, ""),
}


def _check_key(key: str, where: str = "") -> None:
    if key in SCHEMA or key.startswith("variant."):
        return
    hint = difflib.get_close_matches(key, SCHEMA, n=1)
    msg = f"{where}unknown config key {key!r}"
    if hint:
        msg += f" (did you mean {hint[0]!r}?)"
    raise ConfigError(msg)


def parse_text(text: str, source: str = "<config>") -> dict:
    """Raw ``{key: value-string}`` from config text, keys validated."""
    raw: dict = {}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{n}: expected 'key: value', got {line!r}")
        _check_key(key, f"{source}:{n}: ")
        if key in raw:
            raise ConfigError(f"{source}:{n}: duplicate key {key!r}")
        raw[key] = value.strip()
    return raw


def load(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        return parse_text(fh.read(), path)


def resolve(raw: dict) -> dict:
    """Typed values for every schema key (defaults filled in)."""
    out = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            try:
                out[key] = conv(raw[key])
            except ValueError as e:
                raise ConfigError(f"bad value for {key!r}: {e}") from None
        else:
            out[key] = default
    return out


def dump(raw: dict) -> str:
    return "".join(f"{k}: {v}\n" for k, v in raw.items())


@dataclass
class DataConfig:
    task: str | None = "copy"
    train_size: int = 2000
    valid_size: int = 200
    test_size: int = 200
    min_len: int = 5
    max_len: int = 10
    seed: int = 0
    train_src: str | None = None
    train_tgt: str | None = None
    valid_src: str | None = None
    valid_tgt: str | None = None
    test_src: str | None = None
    test_tgt: str | None = None
    vocab: str | None = None


@dataclass
class RunConfig:
    model: ModelConfig
    schedule: TrainSchedule
    beam: BeamConfig
    data: DataConfig
    seeds: list = field(default_factory=list)
    name: str = "experiment"


def _section(values: dict, prefix: str) -> dict:
    return {k[len(prefix):]: v for k, v in values.items() if k.startswith(prefix)}


def build(raw: dict, vocab_size: int | None = None) -> RunConfig:
    """Typed run configuration from raw key/values (``vocab_size`` overrides the key)."""
    v = resolve(raw)
    try:
        model = ModelConfig(
            vocab_size=vocab_size or v["vocab_size"],
            embedding_dim=v["embedding_dim"], units=v["units"], dropout=v["dropout"],
            forget_bias=v["forget_bias"], init_scale=v["init_scale"],
            encoder=EncoderConfig(**_section(v, "encoder.")),
            decoder=DecoderConfig(**_section(v, "decoder.")),
            attention=AttentionConfig(**_section(v, "attention.")),
        )
        schedule = TrainSchedule(**_section(v, "train."))
        beam = BeamConfig(**_section(v, "beam."))
        data = DataConfig(**_section(v, "data."))
    except ValueError as e:
        raise ConfigError(str(e)) from None
    if data.task is None and not (data.train_src and data.train_tgt):
        raise ConfigError("set data.task or both data.train_src and data.train_tgt")
    seeds = v["seeds"] if v["seeds"] is not None else list(range(1, v["replicas"] + 1))
    if len(set(seeds)) != len(seeds):
        raise ConfigError("seeds must be distinct")
    return RunConfig(model, schedule, beam, data, seeds, v["name"])


def variants(raw: dict) -> list:
    """``[(label, raw config)]`` rows; each differs from the base only in its overrides."""
    base = {k: val for k, val in raw.items() if not k.startswith(("sweep.", "variant."))}
    rows = []
    axis = raw.get("sweep.axis", "").strip()
    if axis:
        _check_key(axis)
        if axis.startswith(("sweep.", "variant.", "seeds", "replicas", "name")):
            raise ConfigError(f"{axis!r} cannot be a sweep axis")
        values = [x.strip() for x in raw.get("sweep.values", "").split(",") if x.strip()]
        if not values:
            raise ConfigError("sweep.axis needs sweep.values")
        for val in values:
            rows.append((f"{axis}={val}", {**base, axis: val}))
    for key, spec in raw.items():
        if not key.startswith("variant."):
            continue
        label = key[len("variant."):]
        overrides = {}
        for part in spec.split(";"):
            if not part.strip():
                continue
            k, sep, val = part.partition("=")
            k = k.strip()
            if not sep:
                raise ConfigError(f"{key}: expected 'key=value' items, got {part!r}")
            _check_key(k, f"{key}: ")
            overrides[k] = val.strip()
        rows.append((label, {**base, **overrides}))
    if not rows:
        rows.append((raw.get("name", "experiment"), base))
    labels = [r[0] for r in rows]
    if len(set(labels)) != len(labels):
        raise ConfigError("variant labels must be unique")
    return rows
