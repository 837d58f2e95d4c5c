"""Run configuration: a flat ``key = value`` text file plus command-line overrides.

Relative paths resolve against ``workdir``, which defaults to ``$CREST_ROOT``
(or the current directory).  Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, List, Tuple

ROOT_ENV = "CREST_ROOT"


@dataclass
class RunConfig:
    seed: int = 0
    task: str = "sentiment"
    workdir: str = ""
    # data (shared by all seeds)
    data_seed: int = 0
    data_size: int = 2500
    distractor_rate: float = 0.0
    # rationalizer
    d: int = 64
    max_len: int = 128
    budget: float = 0.3
    transition_penalty: float = 1e-4
    masker_epochs: int = 3
    # editor
    editor_epochs: int = 8
    beam_size: int = 15
    no_repeat_ngram: int = 2
    # agreement
    alpha: float = 0.01
    lam: float = 0.001
    agreement_epochs: int = 3
    use_filtered: bool = False
    # optimisation
    batch_size: int = 16
    lr: float = 3e-3
    weight_decay: float = 1e-6
    patience: int = 5
    # sweeps and multi-seed reports
    sweep_budgets: Tuple[float, ...] = (0.1, 0.2, 0.3, 0.4, 0.5)
    seeds: Tuple[int, ...] = ()

    def __post_init__(self):
        if self.task not in ("sentiment", "nli"):
            raise ValueError(f"task must be 'sentiment' or 'nli', got {self.task!r}")
        if not 0 < self.budget <= 1:
            raise ValueError("budget must lie in (0, 1]")
        if self.alpha < 0 or self.lam < 0:
            raise ValueError("alpha and lambda must be non-negative")
        if self.beam_size < 1:
            raise ValueError("beam_size must be >= 1")

    # ------------------------------------------------------------------
    @property
    def root(self) -> Path:
        return Path(self.workdir or os.environ.get(ROOT_ENV, ".")).resolve()

    def run_dir(self, seed: int = None) -> Path:
        """Per-seed artifact directory; data is shared across seeds."""
        return self.root / f"seed-{self.seed if seed is None else seed}"

    @property
    def data_dir(self) -> Path:
        return self.root / "data"

    def hash(self) -> str:
        """Short digest of every setting that affects results (paths excluded)."""
        d = {k: v for k, v in dataclasses.asdict(self).items() if k not in ("workdir", "seeds")}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]

    def meta(self, command: str, seed: int = None) -> Dict[str, str]:
        return {"command": command, "config_hash": self.hash(), "seed": str(self.seed if seed is None else seed)}

    def dumps(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(name: str, raw: str):
    kind = _FIELDS[name].type
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    if kind.startswith("Tuple[float"):
        return tuple(float(x) for x in raw.split(",") if x.strip())
    if kind.startswith("Tuple[int"):
        return tuple(int(x) for x in raw.split(",") if x.strip())
    return raw


def parse_config(text: str, source: str = "<config>") -> Dict[str, object]:
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _FIELDS:
            raise ValueError(f"{source}:{lineno}: unknown setting {key!r}")
        try:
            values[key] = _coerce(key, raw)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: {exc}") from None
    return values


def load_config(path=None, overrides: Dict[str, object] = None) -> RunConfig:
    """File values first, then ``overrides`` (flags win).  ``None`` overrides are ignored."""
    values: Dict[str, object] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        values.update(parse_config(p.read_text(), str(p)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = _coerce(k, v) if isinstance(v, str) else v
    return RunConfig(**values)


def seed_list(cfg: RunConfig) -> List[int]:
    return list(cfg.seeds) if cfg.seeds else [cfg.seed]
