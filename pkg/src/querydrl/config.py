"""Flat key=value run configuration with a typed schema and optional range checks."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path


class ConfigError(ValueError):
    pass


# Per-strategy optima for the fine-tuning stage; used for any key left unset.
STRATEGY_PRESETS = {
    "beam": {"k": 4, "eta": 1.0, "rl_lr": 3e-5},
    "categorical": {"k": 2, "eta": 0.01, "rl_lr": 5e-5},
}

# Published tuning ranges, enforced only when ``range_check`` is on.
RANGES = {
    "batch_size": {64, 128, 256, 512},
    "t_max": {4, 5, 6, 7, 8},
    "dropout": (0.0, 0.4),
    "enc_layers": {1, 2, 3},
    "hidden": {128, 256},
    "est_dropout": (0.0, 0.4),
    "rl_lr": {1e-4, 1e-6, 1e-5, 2e-5, 3e-5, 4e-5, 5e-5},
    "k": (1, 5),
    "eta": {1.0, 0.1, 0.01, 0.001},
    "strategy": {"beam", "categorical"},
}


@dataclass
class RunConfig:
    seed: int = 0
    # data
    synth_users: int = 2500
    window_seconds: float = 300.0
    vocab_size: int = 2000
    t_max: int = 8
    # generator
    emb_dim: int = 48
    hidden: int = 64
    dec_hidden: int = 96
    attn_dim: int = 64
    enc_layers: int = 1
    dropout: float = 0.2
    batch_size: int = 64
    lr: float = 2e-3
    epochs: int = 1
    # estimator
    est_hidden: int = 64
    est_layers: int = 1
    est_dropout: float = 0.0
    est_batch_size: int = 128
    est_lr: float = 3e-3
    est_epochs: int = 8
    est_pairs: int = 100000
    # fine-tuning
    strategy: str = "beam"
    k: int | None = None
    eta: float | None = None
    rl_lr: float | None = None
    rl_batch_size: int = 32
    rl_epochs: int = 3
    rl_steps_per_epoch: int | None = None
    sync_every: int | None = None
    clip_norm: float = 5.0
    n_valid: int | None = 1000
    range_check: bool = False

    def resolved(self) -> "RunConfig":
        """Copy with strategy presets filled in for unset fine-tuning keys."""
        if self.strategy not in STRATEGY_PRESETS:
            raise ConfigError(f"strategy must be one of {sorted(STRATEGY_PRESETS)}, got {self.strategy!r}")
        d = asdict(self)
        for key, value in STRATEGY_PRESETS[self.strategy].items():
            if d[key] is None:
                d[key] = value
        out = RunConfig(**d)
        out.validate()
        return out

    def validate(self) -> None:
        positive = ("vocab_size", "t_max", "emb_dim", "hidden", "dec_hidden", "attn_dim", "enc_layers",
                    "batch_size", "epochs", "est_hidden", "est_layers", "est_batch_size", "est_epochs",
                    "est_pairs", "rl_batch_size", "rl_epochs")
        for key in positive:
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        for key in ("lr", "est_lr", "window_seconds", "clip_norm"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("dropout", "est_dropout"):
            if not 0.0 <= getattr(self, key) < 1.0:
                raise ConfigError(f"{key} must lie in [0, 1)")
        if self.synth_users < 0:
            raise ConfigError("synth_users must be >= 0")
        if self.k is not None and self.k < 1:
            raise ConfigError("k must be >= 1")
        if self.eta is not None and self.eta < 0:
            raise ConfigError("eta must be non-negative")
        if self.rl_lr is not None and not self.rl_lr > 0:
            raise ConfigError("rl_lr must be positive")
        if self.range_check:
            check_ranges(self)


def check_ranges(cfg: RunConfig) -> None:
    for key, allowed in RANGES.items():
        value = getattr(cfg, key)
        if value is None:
            continue
        if isinstance(allowed, tuple):
            ok = allowed[0] <= value <= allowed[1]
        else:
            ok = value in allowed
        if not ok:
            raise ConfigError(f"{key}={value!r} outside the tuned range {allowed}")


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, text: str):
    ftype = str(_FIELDS[key].type)
    text = text.strip()
    if "None" in ftype and text.lower() in ("none", ""):
        return None
    try:
        if ftype.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if ftype.startswith("int"):
            return int(text)
        if ftype.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None
    return text


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment, unknown keys are errors."""
    d = asdict(base or RunConfig())
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"line {n}: unknown config key {key!r}")
        d[key] = _coerce(key, value)
    cfg = RunConfig(**d)
    cfg.validate()
    return cfg


def apply_overrides(cfg: RunConfig, overrides: dict) -> RunConfig:
    d = asdict(cfg)
    for key, value in overrides.items():
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key {key!r}")
        d[key] = _coerce(key, value) if isinstance(value, str) else value
    out = RunConfig(**d)
    out.validate()
    return out


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        lines.append(f"{key} = {'none' if value is None else value}")
    return "\n".join(lines) + "\n"


def config_hash(cfg: RunConfig) -> str:
    return hashlib.sha256(format_config(cfg).encode("utf-8")).hexdigest()


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_run_manifest(output, cfg: RunConfig, inputs=(), command: str = "") -> None:
    """Persist the resolved config and a manifest of hashes next to ``output``.

    Writes ``<output>.config.txt`` and ``<output>.manifest.json``.
    """
    from importlib import metadata

    import numpy
    import scipy

    out = Path(output)
    out.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{out}.config.txt").write_text(format_config(cfg), encoding="utf-8")
    try:
        version = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        version = "unknown"
    manifest = {
        "command": command,
        "config_sha256": config_hash(cfg),
        "inputs": {str(p): file_hash(p) for p in inputs},
        "versions": {"artifact": version, "numpy": numpy.__version__, "scipy": scipy.__version__},
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
