"""ROC / TPR-at-FPR metrics, score histograms and the bagging ablations."""
from __future__ import annotations

import csv
import dataclasses
import math
from collections.abc import Mapping, Sequence
from pathlib import Path

import numpy as np

from qrmia import attack, ndcore

DEFAULT_FPR_TARGETS = (0.1, 0.01, 0.001, 0.0001, 0.00001)


class EvalError(ValueError):
    pass


def alpha_grid(lo: float = 1e-5, hi: float = 0.5, n: int = 50,
               anchors: Sequence[float] = (1e-5, 1e-4, 1e-3, 1e-2, 0.05, 0.1)) -> tuple[float, ...]:
    """Log-spaced levels in [lo, hi] plus anchor levels so common FPR targets are hit exactly."""
    if not 0 < lo < hi < 1 or n < 2:
        raise EvalError(f"bad alpha grid ({lo}, {hi}, {n})")
    grid = set(float(a) for a in np.geomspace(lo, hi, n))
    grid.update(float(a) for a in anchors if lo <= a <= hi)
    return tuple(sorted(grid))


# -- ROC -----------------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class RocCurve:
    points: tuple[tuple[float, float], ...]  # (fpr, tpr), sorted
    n_pos: int
    n_neg: int

    @property
    def fpr(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def tpr(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.tpr, self.fpr))


def _finish(points: list[tuple[float, float]], n_pos: int, n_neg: int) -> RocCurve:
    points = sorted(set(points) | {(0.0, 0.0), (1.0, 1.0)})
    return RocCurve(tuple(points), n_pos, n_neg)


def roc_from_scores(member_scores, holdout_scores) -> RocCurve:
    """Sweep a threshold over every observed score; lower scores mean IN."""
    pos = np.asarray(member_scores, dtype=np.float64)
    neg = np.asarray(holdout_scores, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EvalError("roc needs nonempty member and holdout sets")
    pos_sorted, neg_sorted = np.sort(pos), np.sort(neg)
    points = []
    for thr in np.unique(np.concatenate([pos, neg])):
        tpr = np.searchsorted(pos_sorted, thr, side="right") / pos.size
        fpr = np.searchsorted(neg_sorted, thr, side="right") / neg.size
        points.append((float(fpr), float(tpr)))
    return _finish(points, pos.size, neg.size)


def roc_from_decisions(member_verdicts: Mapping[float, np.ndarray],
                       holdout_verdicts: Mapping[float, np.ndarray]) -> RocCurve:
    """One (empirical FPR, empirical TPR) point per attack level alpha."""
    if not member_verdicts or set(member_verdicts) != set(holdout_verdicts):
        raise EvalError("member and holdout verdicts must cover the same nonempty set of levels")
    n_pos = n_neg = None
    points = []
    for a in member_verdicts:
        pos = np.asarray(member_verdicts[a], dtype=bool)
        neg = np.asarray(holdout_verdicts[a], dtype=bool)
        if pos.size == 0 or neg.size == 0:
            raise EvalError("roc needs nonempty member and holdout sets")
        n_pos, n_neg = pos.size, neg.size
        points.append((float(neg.mean()), float(pos.mean())))
    return _finish(points, n_pos, n_neg)


def roc(members, holdout) -> RocCurve:
    """Dispatch on input: {alpha: verdicts} mappings or raw score arrays."""
    if isinstance(members, Mapping):
        return roc_from_decisions(members, holdout)
    return roc_from_scores(members, holdout)


def tpr_at_fpr(curve: RocCurve, target: float) -> float:
    """Best TPR among achieved points with FPR <= target (no interpolation)."""
    return max(tpr for fpr, tpr in curve.points if fpr <= target + 1e-12)


def tpr_table(curve: RocCurve, targets: Sequence[float] = DEFAULT_FPR_TARGETS) -> dict[float, float]:
    return {float(t): tpr_at_fpr(curve, t) for t in targets}


# -- histograms ----------------------------------------------------------------


def neg_log(scores) -> np.ndarray:
    scores = np.asarray(scores, dtype=np.float64)
    if np.any(~(scores > 0)):
        raise EvalError("negative-log transform needs strictly positive scores")
    return -np.log(scores)


@dataclasses.dataclass(frozen=True)
class Histograms:
    edges: np.ndarray
    members: np.ndarray
    holdout: np.ndarray


def score_histograms(member_scores, holdout_scores, bins: int = 30) -> Histograms:
    """Counts of -log(score) for both populations over shared bin edges."""
    a, b = neg_log(member_scores), neg_log(holdout_scores)
    both = np.concatenate([a, b])
    lo, hi = float(both.min()), float(both.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    return Histograms(edges, np.histogram(a, edges)[0], np.histogram(b, edges)[0])


# -- attack evaluation ------------------------------------------------------------


@dataclasses.dataclass
class AttackData:
    """Inputs and t-error scores of the public, member and holdout populations."""

    public_x: np.ndarray
    public_scores: np.ndarray
    member_x: np.ndarray
    member_scores: np.ndarray
    holdout_x: np.ndarray
    holdout_scores: np.ndarray


def bag_curve(bag: attack.AttackerBag, data: AttackData, alphas: Sequence[float]) -> RocCurve:
    mem = {a: bag.verdicts(data.member_x, data.member_scores, a) for a in alphas}
    hold = {a: bag.verdicts(data.holdout_x, data.holdout_scores, a) for a in alphas}
    return roc_from_decisions(mem, hold)


def marginal_curve(data: AttackData, alphas: Sequence[float]) -> RocCurve:
    base = attack.MarginalBaseline.fit(data.public_scores, alphas)
    mem = {a: base.verdicts(data.member_scores, a) for a in alphas}
    hold = {a: base.verdicts(data.holdout_scores, a) for a in alphas}
    return roc_from_decisions(mem, hold)


def calibration(bag: attack.AttackerBag, data: AttackData, alphas: Sequence[float]) -> list[dict]:
    """Holdout FPR per level for the first member alone, the bag and the marginal baseline."""
    base = attack.MarginalBaseline.fit(data.public_scores, alphas)
    single = bag.prefix(1)
    rows = []
    for a in alphas:
        rows.append({
            "alpha": a,
            "fpr_single": float(single.verdicts(data.holdout_x, data.holdout_scores, a).mean()),
            "fpr_bag": float(bag.verdicts(data.holdout_x, data.holdout_scores, a).mean()),
            "fpr_marginal": float(base.verdicts(data.holdout_scores, a).mean()),
        })
    return rows


def bagging_sweep(views: Sequence[AttackData], seeds: Sequence[int], m_values: Sequence[int],
                  trunk_params: Sequence[int], alphas: Sequence[float], cfg: ndcore.SgdConfig,
                  fpr_targets: Sequence[float] = DEFAULT_FPR_TARGETS, blocks: int = 1,
                  transform: str = "log") -> list[dict]:
    """Mean and std of TPR@FPR for every (trunk size, m, target) over the seeds.

    ``views[i]`` is the data seen under ``seeds[i]``. One bag of max(m)
    members is trained per (trunk, seed); smaller bags are its prefixes,
    which is exactly what training them from scratch would give.
    """
    if list(m_values) != sorted(m_values) or not m_values:
        raise EvalError("m_values must be a nonempty ascending list")
    if len(views) != len(seeds):
        raise EvalError("one data view per seed required")
    rows = []
    for trunk in trunk_params:
        per_seed = []
        for view, seed in zip(views, seeds):
            widths = attack.trunk_widths(view.public_x.shape[1], len(alphas), trunk, blocks)
            bag = attack.train_bag(view.public_x, view.public_scores, alphas, widths, cfg,
                                   max(m_values), seed, transform)
            per_seed.append({m: tpr_table(bag_curve(bag.prefix(m), view, alphas), fpr_targets)
                             for m in m_values})
        for m in m_values:
            for target in fpr_targets:
                values = np.array([s[m][float(target)] for s in per_seed])
                rows.append({"trunk_params": trunk, "m": m, "fpr": float(target),
                             "tpr_mean": float(values.mean()), "tpr_std": float(values.std()),
                             "n_seeds": len(values), "tprs": values.tolist()})
    return rows


@dataclasses.dataclass(frozen=True)
class VarianceCdf:
    m: int
    population: str
    variances: np.ndarray
    grid: np.ndarray
    cdf: np.ndarray

    @property
    def mean(self) -> float:
        return float(np.mean(self.variances))


def verdict_variance(verdicts: np.ndarray) -> np.ndarray:
    """Per-sample variance of binary verdicts; ``verdicts`` is (runs, samples)."""
    v = np.asarray(verdicts, dtype=np.float64)
    if v.ndim != 2 or v.shape[0] < 2:
        raise EvalError("need at least two runs to estimate a verdict variance")
    return v.var(axis=0)


def empirical_cdf(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    values = np.sort(np.asarray(values, dtype=np.float64))
    return np.searchsorted(values, grid, side="right") / values.size


def variance_cdf(bags: Sequence[attack.AttackerBag], x: np.ndarray, scores, alpha: float,
                 m_values: Sequence[int], population: str = "holdout",
                 grid: np.ndarray | None = None) -> list[VarianceCdf]:
    """Per-sample verdict variance across independently trained bags, for each bag size."""
    if len(bags) < 2:
        raise EvalError("need at least two repeated bag trainings")
    grid = np.linspace(0.0, 0.25, 26) if grid is None else np.asarray(grid)
    out = []
    for m in m_values:
        verdicts = np.stack([bag.prefix(m).verdicts(x, scores, alpha) for bag in bags])
        var = verdict_variance(verdicts)
        out.append(VarianceCdf(m, population, var, grid, empirical_cdf(var, grid)))
    return out


# -- report writers ---------------------------------------------------------------


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_csv(path: str | Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def svg_plot(path: str | Path, series: Mapping[str, tuple[Sequence[float], Sequence[float]]],
             title: str = "", xlabel: str = "", ylabel: str = "", logx: bool = False,
             step: bool = False, width: int = 480, height: int = 360) -> None:
    """Write a bare-bones SVG line (or step) chart."""
    colours = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"]
    pad = 50
    tx = (lambda v: math.log10(v)) if logx else float
    xs = [tx(x) for xv, _ in series.values() for x in xv if not logx or x > 0]
    ys = [float(y) for _, yv in series.values() for y in yv]
    if not xs or not ys:
        raise EvalError("nothing to plot")
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(x):
        return pad + (tx(x) - x0) / (x1 - x0) * (width - 2 * pad)

    def py(y):
        return height - pad - (y - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<text x="{width / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle" font-size="12">{xlabel}</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})" '
             f'text-anchor="middle">{ylabel}</text>',
             f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" '
             f'fill="none" stroke="black"/>']
    for i, (name, (xv, yv)) in enumerate(series.items()):
        pts = [(x, y) for x, y in zip(xv, yv) if not logx or x > 0]
        coords = []
        for j, (x, y) in enumerate(pts):
            if step and j:
                coords.append(f"{px(x):.2f},{py(pts[j - 1][1]):.2f}")
            coords.append(f"{px(x):.2f},{py(y):.2f}")
        c = colours[i % len(colours)]
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{" ".join(coords)}"/>')
        parts.append(f'<text x="{width - pad - 4}" y="{pad + 16 + 14 * i}" text-anchor="end" '
                     f'font-size="11" fill="{c}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
