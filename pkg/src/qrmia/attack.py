"""Quantile-regression membership inference: single attacker, bag of weak attackers, marginal baseline."""
from __future__ import annotations

import dataclasses
import json
import math
from collections.abc import Sequence
from pathlib import Path

import numpy as np

from qrmia import ndcore

BUNDLE_FORMAT = "qrmia.attacker-bag"
BUNDLE_VERSION = 1
TRANSFORMS = ("log", "raw")


class AlphaUnavailableError(KeyError):
    pass


class QuantileTrainingError(RuntimeError):
    pass


def pinball(ell, q, alpha: float):
    """Pinball loss (q - ell) * (1[ell <= q] - alpha), elementwise."""
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    ell = np.asarray(ell, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    out = (q - ell) * ((ell <= q).astype(np.float64) - alpha)
    return float(out) if out.ndim == 0 else out


def pinball_tensor(pred: ndcore.Tensor, target: np.ndarray, alphas: np.ndarray) -> ndcore.Tensor:
    """Mean over rows, summed over heads, of the pinball loss.

    Uses the identity L = alpha * u + relu(-u) with u = target - pred.
    """
    u = ndcore.Tensor(target) - pred
    per = u * ndcore.Tensor(alphas) + ndcore.relu(-u)
    return per.sum() * (1.0 / pred.shape[0])


def transform_scores(scores, transform: str) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if transform == "log":
        with np.errstate(divide="ignore"):
            return np.log(scores)
    if transform == "raw":
        return scores
    raise ValueError(f"unknown score transform {transform!r}; expected one of {TRANSFORMS}")


def trunk_widths(in_dim: int, n_heads: int, target_params: int, blocks: int = 1) -> list[int]:
    """Layer widths ``[in, h, ..., h, n_heads]`` whose parameter count is closest to the target."""
    best = None
    for h in range(1, 4097):
        widths = [in_dim] + [h] * (blocks + 1) + [n_heads]
        count = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        gap = abs(count - target_params)
        if best is None or gap < best[0]:
            best = (gap, widths)
        if count > target_params:
            break
    return best[1]


@dataclasses.dataclass
class QuantileRegressor:
    """Multi-head network predicting transformed-score quantiles, one head per alpha.

    Heads are trained on standardized targets; ``predict`` maps back to the
    transform scale and sorts each row so thresholds never cross.
    """

    net: ndcore.Mlp
    alphas: tuple[float, ...]
    transform: str = "log"
    target_mean: float = 0.0
    target_scale: float = 1.0

    def __post_init__(self):
        if self.net.widths[-1] != len(self.alphas):
            raise ValueError("one head per alpha required")
        if list(self.alphas) != sorted(self.alphas):
            raise ValueError("alphas must be sorted ascending")

    def head(self, alpha: float) -> int:
        for i, a in enumerate(self.alphas):
            if math.isclose(a, alpha, rel_tol=1e-9, abs_tol=1e-15):
                return i
        raise AlphaUnavailableError(f"alpha {alpha} not among trained levels {self.alphas}")

    def predict(self, x: np.ndarray) -> np.ndarray:
        raw = self.net.predict(np.atleast_2d(x))
        return np.sort(self.target_mean + self.target_scale * raw, axis=1)

    def thresholds(self, x: np.ndarray, alpha: float) -> np.ndarray:
        return self.predict(x)[:, self.head(alpha)]

    def verdicts(self, x: np.ndarray, scores, alpha: float) -> np.ndarray:
        """True (IN) where the transformed score is at or below the predicted quantile."""
        return transform_scores(scores, self.transform) <= self.thresholds(x, alpha)


def train_quantile(x: np.ndarray, scores, alphas: Sequence[float], widths: Sequence[int],
                   cfg: ndcore.SgdConfig, transform: str = "log",
                   activation: str = "silu") -> QuantileRegressor:
    """Fit a multi-head quantile regressor by minibatch SGD on the pinball loss.

    The heads start at the marginal quantiles of the training targets (zero
    output weights, biases at the empirical quantiles), so SGD only has to
    learn the per-example correction.
    """
    x = np.asarray(x, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot fit a quantile regressor on an empty public set")
    alphas = tuple(sorted(float(a) for a in alphas))
    for a in alphas:
        if not 0 < a < 1:
            raise ValueError(f"alpha must lie in (0, 1), got {a}")
    y = transform_scores(scores, transform)
    if not np.all(np.isfinite(y)):
        raise ValueError("transformed scores must be finite (zero scores cannot be log-transformed)")
    widths = list(widths)
    if widths[0] != x.shape[1] or widths[-1] != len(alphas):
        raise ndcore.ShapeError(f"widths {widths} do not fit inputs {x.shape[1]} and {len(alphas)} heads")
    mean = float(np.mean(y))
    scale = float(np.std(y))
    scale = scale if scale > 0 else 1.0
    ys = (y - mean) / scale

    net = ndcore.Mlp.init(widths, cfg.seed, activation=activation)
    net.params[-2].data = np.zeros_like(net.params[-2].data)
    net.params[-1].data = np.quantile(ys, alphas, method="inverted_cdf").astype(np.float64)

    rng = np.random.default_rng(cfg.seed)
    params = net.parameters()
    opt = ndcore.Sgd(params, cfg)
    alpha_arr = np.asarray(alphas)
    full = cfg.batch_size >= len(x)
    for step in range(1, cfg.steps + 1):
        idx = slice(None) if full else rng.integers(0, len(x), size=cfg.batch_size)
        xb, yb = x[idx], ys[idx]
        pred = net.forward(xb)
        target = np.broadcast_to(yb[:, None], pred.shape)
        loss = pinball_tensor(pred, target, alpha_arr)
        if not math.isfinite(loss.item()):
            raise QuantileTrainingError(f"pinball loss diverged at step {step}")
        opt.step(ndcore.backward(loss, params))
    return QuantileRegressor(net, alphas, transform, mean, scale)


def derive_seed(master_seed: int, index: int) -> int:
    """Seed of bag member ``index``; depends only on (master_seed, index)."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1, np.uint64)[0] >> 1)


@dataclasses.dataclass
class AttackerBag:
    members: list[QuantileRegressor]
    seeds: list[int]
    master_seed: int

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def alphas(self) -> tuple[float, ...]:
        return self.members[0].alphas

    def prefix(self, m: int) -> AttackerBag:
        """The bag that ``train_bag`` would have produced with ``m`` members."""
        if not 1 <= m <= self.m:
            raise ValueError(f"prefix size {m} outside [1, {self.m}]")
        return AttackerBag(self.members[:m], self.seeds[:m], self.master_seed)

    def votes(self, x: np.ndarray, scores, alpha: float) -> np.ndarray:
        return np.sum([reg.verdicts(x, scores, alpha) for reg in self.members], axis=0)

    def verdicts(self, x: np.ndarray, scores, alpha: float) -> np.ndarray:
        """Majority vote: IN where votes >= m / 2."""
        return 2 * self.votes(x, scores, alpha) >= self.m


def train_bag(x: np.ndarray, scores, alphas: Sequence[float], widths: Sequence[int],
              cfg: ndcore.SgdConfig, m: int, master_seed: int, transform: str = "log",
              start: int = 0) -> AttackerBag:
    """Train members ``start .. m-1`` on independent size-|D| bootstrap resamples."""
    if m < 1:
        raise ValueError(f"bag size must be at least 1, got {m}")
    x = np.asarray(x, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if len(x) == 0:
        raise ValueError("cannot fit a bag on an empty public set")
    members, seeds = [], []
    for i in range(start, m):
        seed = derive_seed(master_seed, i)
        idx = np.random.default_rng(seed).integers(0, len(x), size=len(x))
        member_cfg = dataclasses.replace(cfg, seed=seed)
        members.append(train_quantile(x[idx], scores[idx], alphas, widths, member_cfg, transform))
        seeds.append(seed)
    return AttackerBag(members, seeds, int(master_seed))


def extend_bag(bag: AttackerBag, x: np.ndarray, scores, widths: Sequence[int],
               cfg: ndcore.SgdConfig, m: int) -> AttackerBag:
    """Grow ``bag`` to ``m`` members without retraining the existing ones."""
    if m <= bag.m:
        return bag.prefix(m)
    extra = train_bag(x, scores, bag.alphas, widths, cfg, m, bag.master_seed,
                      bag.members[0].transform, start=bag.m)
    return AttackerBag(bag.members + extra.members, bag.seeds + extra.seeds, bag.master_seed)


@dataclasses.dataclass(frozen=True)
class Decision:
    verdict: str  # "IN" or "OUT"
    votes: int
    thresholds: tuple[float, ...]


def attack_single(reg: QuantileRegressor, score: float, z: np.ndarray, alpha: float) -> Decision:
    """IN iff transform(score) <= q_alpha(z); ties count as IN."""
    q = float(reg.thresholds(np.reshape(z, (1, -1)), alpha)[0])
    inside = bool(transform_scores([score], reg.transform)[0] <= q)
    return Decision("IN" if inside else "OUT", int(inside), (q,))


def attack_bag(bag: AttackerBag, score: float, z: np.ndarray, alpha: float) -> Decision:
    """Each member votes IN iff transform(score) <= its q_alpha(z); IN iff votes >= m / 2."""
    decisions = [attack_single(reg, score, z, alpha) for reg in bag.members]
    votes = sum(d.votes for d in decisions)
    return Decision("IN" if 2 * votes >= bag.m else "OUT", votes,
                    tuple(d.thresholds[0] for d in decisions))


# -- marginal baseline ----------------------------------------------------------


def marginal_threshold(scores, alpha: float) -> float:
    """Lower empirical alpha-quantile: the ceil(alpha * n)-th smallest score."""
    scores = np.sort(np.asarray(scores, dtype=np.float64))
    if scores.size == 0:
        raise ValueError("marginal threshold needs at least one public score")
    if not 0 < alpha < 1:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    k = max(1, math.ceil(alpha * scores.size - 1e-9))
    return float(scores[k - 1])


@dataclasses.dataclass
class MarginalBaseline:
    alphas: tuple[float, ...]
    thresholds: tuple[float, ...]

    @classmethod
    def fit(cls, public_scores, alphas: Sequence[float]) -> MarginalBaseline:
        alphas = tuple(sorted(float(a) for a in alphas))
        return cls(alphas, tuple(marginal_threshold(public_scores, a) for a in alphas))

    def threshold(self, alpha: float) -> float:
        for a, q in zip(self.alphas, self.thresholds):
            if math.isclose(a, alpha, rel_tol=1e-9, abs_tol=1e-15):
                return q
        raise AlphaUnavailableError(f"alpha {alpha} not among fitted levels {self.alphas}")

    def verdicts(self, scores, alpha: float) -> np.ndarray:
        return np.asarray(scores, dtype=np.float64) <= self.threshold(alpha)


# -- persistence ----------------------------------------------------------------


def save_bag(directory: str | Path, bag: AttackerBag, extra: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for i, (reg, seed) in enumerate(zip(bag.members, bag.seeds)):
        name = f"member_{i:03d}.json"
        ndcore.save_params(directory / name, reg.net, seed, 0, extra={
            "alphas": list(reg.alphas), "transform": reg.transform,
            "target_mean": reg.target_mean, "target_scale": reg.target_scale})
        files.append(name)
    first = bag.members[0]
    manifest = {
        "format": BUNDLE_FORMAT, "version": BUNDLE_VERSION,
        "alphas": list(first.alphas), "m": bag.m, "master_seed": bag.master_seed,
        "score_transform": first.transform, "trunk_width": first.net.widths[1],
        "trunk_params": first.net.n_params, "seeds": bag.seeds, "members": files,
        **(extra or {}),
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_bag(directory: str | Path) -> AttackerBag:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("format") != BUNDLE_FORMAT or manifest.get("version") != BUNDLE_VERSION:
        raise ValueError(f"{directory}: not a version-{BUNDLE_VERSION} attacker bundle")
    members = []
    for name in manifest["members"]:
        net, record = ndcore.load_params(directory / name)
        e = record["extra"]
        members.append(QuantileRegressor(net, tuple(e["alphas"]), e["transform"],
                                         e["target_mean"], e["target_scale"]))
    return AttackerBag(members, list(manifest["seeds"]), manifest["master_seed"])
