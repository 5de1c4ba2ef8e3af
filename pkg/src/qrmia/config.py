"""Run configuration: one JSON document with a section per module."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any

from qrmia import datagen, ndcore
from qrmia.attack import TRANSFORMS


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class TrainSection:
    lr: float
    momentum: float
    batch_size: int
    steps: int
    seed: int
    clip_norm: float | None = None
    schedule: str = "constant"

    def sgd(self) -> ndcore.SgdConfig:
        return ndcore.SgdConfig(self.lr, self.momentum, self.batch_size, self.steps, self.seed,
                                self.clip_norm, self.schedule)


@dataclasses.dataclass(frozen=True)
class DatasetSection:
    kind: str = "mix"
    n: int = 512
    dims: tuple[int, int, int] = (1, 8, 8)
    seed: int = 1
    split_seed: int = 2
    public_fraction: float = 0.5


@dataclasses.dataclass(frozen=True)
class DiffusionSection:
    T: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.05
    width: int = 64
    depth: int = 4
    emb_width: int = 16
    init_seed: int = 3
    log_every: int = 100
    train: TrainSection = TrainSection(lr=0.1, momentum=0.9, batch_size=64, steps=10000, seed=4, clip_norm=5.0)


@dataclasses.dataclass(frozen=True)
class AttackSection:
    alphas: tuple[float, ...] | None = None  # None: use the eval FPR grid
    score_t: int | None = None  # None: T // 2
    trunk_params: tuple[int, ...] = (5666, 20000, 80000)
    blocks: int = 1
    m: int = 7
    master_seed: int = 0
    score_transform: str = "log"
    decision_alpha: float = 0.1
    train: TrainSection = TrainSection(lr=0.05, momentum=0.9, batch_size=128, steps=150, seed=0,
                                       schedule="linear")


@dataclasses.dataclass(frozen=True)
class EvalSection:
    fpr_grid_lo: float = 1e-5
    fpr_grid_hi: float = 0.5
    fpr_grid_n: int = 50
    fpr_targets: tuple[float, ...] = (0.1, 0.01, 0.001, 0.0001, 0.00001)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    m_values: tuple[int, ...] = (1, 3, 5, 7)
    repetitions: int = 5
    variance_alpha: float = 0.1
    histogram_bins: int = 30


@dataclasses.dataclass(frozen=True)
class PathsSection:
    workspace: str = "workspace"


@dataclasses.dataclass(frozen=True)
class RunConfig:
    dataset: DatasetSection = DatasetSection()
    diffusion: DiffusionSection = DiffusionSection()
    attack: AttackSection = AttackSection()
    eval: EvalSection = EvalSection()
    paths: PathsSection = PathsSection()

    @property
    def score_t(self) -> int:
        return self.attack.score_t if self.attack.score_t is not None else self.diffusion.T // 2

    def alphas(self) -> tuple[float, ...]:
        from qrmia.evaluation import alpha_grid

        if self.attack.alphas is not None:
            return tuple(sorted(self.attack.alphas))
        return alpha_grid(self.eval.fpr_grid_lo, self.eval.fpr_grid_hi, self.eval.fpr_grid_n)

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    def section_hash(self, *sections: str) -> str:
        """Hex digest of the named sections; artifacts are keyed by it."""
        d = self.to_dict()
        payload = json.dumps({s: d[s] for s in sections}, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    return x


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        if name == "train":
            base = dataclasses.asdict(cls().train)
            if not isinstance(value, dict):
                raise ConfigError(f"{where}.train: expected an object")
            extra = sorted(set(value) - set(base))
            if extra:
                raise ConfigError(f"{where}.train: unknown key(s) {', '.join(extra)}")
            kwargs[name] = TrainSection(**{**base, **value})
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - {f.name for f in dataclasses.fields(RunConfig)})
    if unknown:
        raise ConfigError(f"unknown section(s) {', '.join(unknown)}")
    classes = {"dataset": DatasetSection, "diffusion": DiffusionSection, "attack": AttackSection,
               "eval": EvalSection, "paths": PathsSection}
    cfg = RunConfig(**{name: _build(classes[name], raw.get(name, {}), name) for name in classes})
    try:
        validate(cfg)
    except TypeError as exc:
        raise ConfigError(f"ill-typed config value: {exc}") from None
    return cfg


def load(path: str | Path) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return from_dict(raw)


def validate(cfg: RunConfig) -> None:
    """Check every section before any compute starts."""
    ds, dm, at, ev = cfg.dataset, cfg.diffusion, cfg.attack, cfg.eval
    _require(ds.kind in datagen.FAMILIES, f"dataset.kind must be one of {datagen.FAMILIES}")
    _require(ds.n >= 4, "dataset.n must be at least 4")
    _require(len(ds.dims) == 3 and all(int(d) >= 1 for d in ds.dims), "dataset.dims must be [C, H, W]")
    _require(0 < ds.public_fraction < 1, "dataset.public_fraction must lie in (0, 1)")
    _require(dm.T >= 3, "diffusion.T must be at least 3")
    _require(0 < dm.beta_start <= dm.beta_end < 1, "diffusion betas need 0 < beta_start <= beta_end < 1")
    _require(dm.width >= 1 and dm.depth >= 0 and dm.emb_width >= 2 and dm.emb_width % 2 == 0,
             "diffusion width/depth/emb_width out of range (emb_width must be even)")
    _require(dm.log_every >= 1, "diffusion.log_every must be positive")
    _require(1 <= cfg.score_t <= dm.T - 1, f"attack.score_t must lie in [1, {dm.T - 1}]")
    _require(at.m >= 1, "attack.m must be at least 1")
    _require(at.blocks >= 0, "attack.blocks must be nonnegative")
    _require(len(at.trunk_params) >= 1 and all(p > 0 for p in at.trunk_params),
             "attack.trunk_params must list positive parameter counts")
    _require(at.score_transform in TRANSFORMS, f"attack.score_transform must be one of {TRANSFORMS}")
    if at.alphas is not None:
        _require(len(at.alphas) >= 1 and all(0 < a < 1 for a in at.alphas), "attack.alphas must lie in (0, 1)")
    _require(any(abs(a - at.decision_alpha) < 1e-12 for a in cfg.alphas()),
             "attack.decision_alpha must be one of the attack levels")
    _require(0 < ev.fpr_grid_lo < ev.fpr_grid_hi < 1 and ev.fpr_grid_n >= 2, "eval FPR grid out of range")
    _require(all(0 < f < 1 for f in ev.fpr_targets), "eval.fpr_targets must lie in (0, 1)")
    _require(len(ev.seeds) >= 1, "eval.seeds must not be empty")
    _require(len(ev.m_values) >= 1 and list(ev.m_values) == sorted(ev.m_values) and ev.m_values[0] >= 1,
             "eval.m_values must be ascending positive integers")
    _require(ev.repetitions >= 2, "eval.repetitions must be at least 2")
    _require(any(abs(a - ev.variance_alpha) < 1e-12 for a in cfg.alphas()),
             "eval.variance_alpha must be one of the attack levels")
    _require(ev.histogram_bins >= 1, "eval.histogram_bins must be positive")
    for name, section in (("diffusion.train", dm.train), ("attack.train", at.train)):
        try:
            section.sgd()
        except ValueError as exc:
            raise ConfigError(f"{name}: {exc}") from None


def _require(ok: bool, message: str) -> None:
    if not ok:
        raise ConfigError(message)
