"""DDPM noise schedule, noise-prediction training and the deterministic t-error score."""
from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from qrmia import ndcore
from qrmia.datagen import Example, ScoreCache, ScoreRecord, stack

# Scoring always runs on blocks of this many rows (zero padded) so a
# record never depends on how callers batch their examples.
_BLOCK = 64


class ScheduleError(ValueError):
    pass


class StepRangeError(ValueError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step


@dataclasses.dataclass(frozen=True)
class NoiseSchedule:
    """Per-step arrays indexed 1..T; :meth:`alphabar_at` extends with alphabar_0 = 1."""

    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alphabar: np.ndarray
    beta_start: float
    beta_end: float

    def alphabar_at(self, t: int) -> float:
        if t == 0:
            return 1.0
        if not 1 <= t <= self.T:
            raise StepRangeError(f"step {t} outside [0, {self.T}]")
        return float(self.alphabar[t - 1])

    def to_dict(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Linear beta schedule with alpha_t = 1 - beta_t and alphabar_t = prod_{s<=t} alpha_s."""
    if T < 2:
        raise ScheduleError(f"T must be at least 2, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ScheduleError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, T)
    alpha = 1.0 - beta
    alphabar = np.empty(T)
    running = 1.0
    for i in range(T):
        running = running * alpha[i]
        alphabar[i] = running
    if not np.all(np.diff(alphabar) < 0) or alphabar[-1] <= 0:
        raise ScheduleError("alphabar underflowed; shorten the schedule or lower beta_end")
    return NoiseSchedule(int(T), beta, alpha, alphabar, float(beta_start), float(beta_end))


def time_embedding(t, width: int, max_period: float = 10000.0) -> np.ndarray:
    """Sinusoidal features of integer steps; returns (len(t), width)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = width // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    angles = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


def _check_step(t: int, lo: int, hi: int, what: str) -> None:
    if not lo <= t <= hi:
        raise StepRangeError(f"{what}: step {t} outside [{lo}, {hi}]")


def q_sample(z0: np.ndarray, t, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """Marginal draw sqrt(alphabar_t) z0 + sqrt(1 - alphabar_t) noise.

    ``t`` may be an int or one step per row of a batched ``z0``.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != z0.shape:
        raise ValueError(f"noise shape {noise.shape} != z0 shape {z0.shape}")
    steps = np.asarray(t)
    if np.any(steps < 1) or np.any(steps > sched.T):
        raise StepRangeError(f"q_sample: steps must lie in [1, {sched.T}]")
    ab = sched.alphabar[steps - 1]
    if steps.ndim == 1:
        ab = ab.reshape((-1,) + (1,) * (z0.ndim - 1))
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * noise


def forward_step(z_prev: np.ndarray, t: int, noise: np.ndarray, sched: NoiseSchedule) -> np.ndarray:
    """One diffusion transition: sqrt(alpha_t) z_{t-1} + sqrt(beta_t) noise."""
    _check_step(t, 1, sched.T, "forward_step")
    return math.sqrt(sched.alpha[t - 1]) * z_prev + math.sqrt(sched.beta[t - 1]) * noise


class DiffusionModel:
    """A noise schedule plus an MLP noise predictor over [flattened z, time embedding]."""

    def __init__(self, schedule: NoiseSchedule, eps_net: ndcore.Mlp, data_dim: int, emb_width: int):
        if eps_net.widths[0] != data_dim + emb_width or eps_net.widths[-1] != data_dim:
            raise ndcore.ShapeError(
                f"eps net widths {eps_net.widths} do not fit data_dim={data_dim}, emb_width={emb_width}")
        self.schedule = schedule
        self.eps_net = eps_net
        self.data_dim = data_dim
        self.emb_width = emb_width

    @classmethod
    def create(cls, schedule: NoiseSchedule, data_dim: int, width: int = 64, depth: int = 3,
               emb_width: int = 16, seed: int = 0) -> DiffusionModel:
        widths = [data_dim + emb_width] + [width] * (depth + 1) + [data_dim]
        return cls(schedule, ndcore.Mlp.init(widths, seed), data_dim, emb_width)

    def copy(self) -> DiffusionModel:
        return DiffusionModel(self.schedule, self.eps_net.copy(), self.data_dim, self.emb_width)

    def _inputs(self, z: np.ndarray, t) -> np.ndarray:
        steps = np.broadcast_to(np.asarray(t), (z.shape[0],))
        return np.concatenate([z, time_embedding(steps, self.emb_width)], axis=1)

    def eps(self, z: np.ndarray, t) -> np.ndarray:
        """Predicted noise for a batch z of shape (B, data_dim)."""
        z = np.asarray(z, dtype=np.float64)
        return self.eps_net.predict(self._inputs(z, t))

    def eps_tensor(self, z: np.ndarray, t) -> ndcore.Tensor:
        return self.eps_net.forward(self._inputs(z, t))

    def save(self, path: str | Path, seed: int, steps: int) -> None:
        ndcore.save_params(path, self.eps_net, seed, steps, extra={
            "schedule": self.schedule.to_dict(), "data_dim": self.data_dim, "emb_width": self.emb_width})

    @classmethod
    def load(cls, path: str | Path) -> DiffusionModel:
        net, record = ndcore.load_params(path)
        extra = record["extra"]
        s = extra["schedule"]
        return cls(make_schedule(s["T"], s["beta_start"], s["beta_end"]), net,
                   extra["data_dim"], extra["emb_width"])


def train(model: DiffusionModel, members: Sequence[Example], cfg: ndcore.SgdConfig,
          log_every: int = 100) -> tuple[DiffusionModel, list[tuple[int, float]]]:
    """Minimise E ||eps - eps_theta(q_sample(z0, t, eps), t)||^2 by minibatch SGD.

    Returns a trained copy and ``(step, loss)`` pairs recorded every
    ``log_every`` steps (plus the last step).
    """
    if not members:
        raise ValueError("cannot train on an empty member set")
    model = model.copy()
    x = stack(members)
    if x.shape[1] != model.data_dim:
        raise ndcore.ShapeError(f"examples have {x.shape[1]} values, model expects {model.data_dim}")
    rng = np.random.default_rng(cfg.seed)
    params = model.eps_net.parameters()
    opt = ndcore.Sgd(params, cfg)
    T = model.schedule.T
    curve: list[tuple[int, float]] = []
    for step in range(1, cfg.steps + 1):
        idx = rng.integers(0, len(x), size=cfg.batch_size)
        t = rng.integers(1, T + 1, size=cfg.batch_size)
        noise = rng.standard_normal((cfg.batch_size, model.data_dim))
        zt = q_sample(x[idx], t, noise, model.schedule)
        loss = (model.eps_tensor(zt, t) - noise).square().mean()
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(step, value)
        opt.step(ndcore.backward(loss, params))
        if step % log_every == 0 or step == cfg.steps:
            curve.append((step, value))
    return model, curve


def denoising_loss(model: DiffusionModel, examples: Sequence[Example], seed: int, draws: int = 8) -> float:
    """Monte-Carlo estimate of the training objective on ``examples``."""
    x = stack(examples)
    rng = np.random.default_rng(seed)
    total = 0.0
    for _ in range(draws):
        t = rng.integers(1, model.schedule.T + 1, size=len(x))
        noise = rng.standard_normal(x.shape)
        pred = model.eps(q_sample(x, t, noise, model.schedule), t)
        total += float(np.mean((pred - noise) ** 2))
    return total / draws


# -- deterministic maps ---------------------------------------------------------


def _as_batch(z) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


def _f(model: DiffusionModel, z: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    ab = model.schedule.alphabar_at(t)
    return (z - math.sqrt(1.0 - ab) * eps) / math.sqrt(ab)


def f_est(model: DiffusionModel, z, t: int) -> np.ndarray:
    """Estimate of z_0 from z_t: (z - sqrt(1 - alphabar_t) eps_theta(z, t)) / sqrt(alphabar_t)."""
    _check_step(t, 1, model.schedule.T, "f_est")
    zb, single = _as_batch(z)
    out = _f(model, zb, t, model.eps(zb, t))
    return out[0] if single else out


def _jump(model: DiffusionModel, z: np.ndarray, t: int, target: int) -> np.ndarray:
    eps = model.eps(z, t)
    ab = model.schedule.alphabar_at(target)
    return math.sqrt(ab) * _f(model, z, t, eps) + math.sqrt(1.0 - ab) * eps


def phi(model: DiffusionModel, z, t: int) -> np.ndarray:
    """Deterministic diffusion step z_t -> z_{t+1}; valid for 0 <= t <= T-1."""
    _check_step(t, 0, model.schedule.T - 1, "phi")
    zb, single = _as_batch(z)
    out = _jump(model, zb, t, t + 1)
    return out[0] if single else out


def psi(model: DiffusionModel, z, t: int) -> np.ndarray:
    """Deterministic denoising step z_t -> z_{t-1}; valid for 1 <= t <= T."""
    _check_step(t, 1, model.schedule.T, "psi")
    zb, single = _as_batch(z)
    out = _jump(model, zb, t, t - 1)
    return out[0] if single else out


def big_phi(model: DiffusionModel, z0, t: int) -> np.ndarray:
    """Deterministic reverse result: phi applied at steps 0, 1, ..., t-1."""
    _check_step(t, 1, model.schedule.T, "big_phi")
    z, single = _as_batch(z0)
    for s in range(t):
        z = _jump(model, z, s, s + 1)
    return z[0] if single else z


def t_error(model: DiffusionModel, z0, t: int, convention: str = "roundtrip") -> np.ndarray | float:
    """Squared distance between z~_t and its one-step diffuse-then-denoise reconstruction.

    ``roundtrip`` denoises with psi at step t+1 so the composite returns to
    step t; ``literal`` uses psi at step t, which lands one step lower.
    """
    _check_step(t, 1, model.schedule.T - 1, "t_error")
    if convention not in ("roundtrip", "literal"):
        raise ValueError(f"unknown t-error convention {convention!r}")
    z, single = _as_batch(z0)
    zt = big_phi(model, z, t)
    forward = _jump(model, zt, t, t + 1)
    back = _jump(model, forward, t + 1, t) if convention == "roundtrip" else _jump(model, forward, t, t - 1)
    err = np.sum((back - zt) ** 2, axis=1)
    return float(err[0]) if single else err


def score_dataset(model: DiffusionModel, examples: Sequence[Example], t: int,
                  labels: int | Sequence[int | None] | None = None,
                  convention: str = "roundtrip") -> ScoreCache:
    """One t-error record per example; records depend only on the example itself."""
    if not examples:
        return ScoreCache([])
    _check_step(t, 1, model.schedule.T - 1, "score_dataset")
    x = stack(examples)
    scores = np.empty(len(x))
    for start in range(0, len(x), _BLOCK):
        block = x[start:start + _BLOCK]
        padded = np.zeros((_BLOCK, x.shape[1]))
        padded[:len(block)] = block
        scores[start:start + len(block)] = t_error(model, padded, t, convention)[:len(block)]
    if labels is None or isinstance(labels, int):
        labels = [labels] * len(examples)
    records = [ScoreRecord(e.id, int(t), float(s), lab) for e, s, lab in zip(examples, scores, labels)]
    return ScoreCache(sorted(records, key=lambda r: r.id))


def save_schedule(path: str | Path, sched: NoiseSchedule) -> None:
    Path(path).write_text(json.dumps(sched.to_dict()))
