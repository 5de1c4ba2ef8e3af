"""Workspace layout and the five pipeline stages behind the CLI verbs.

Every artifact directory is named by the hash of the config sections that
produce it and carries a ``meta.json`` recording that hash and the hashes
of the artifacts it consumed.
"""
from __future__ import annotations

import contextlib
import fcntl
import json
import logging
import os
import shutil
import time
from collections.abc import Iterator, Sequence
from pathlib import Path

import numpy as np

from qrmia import attack, datagen, diffusion, evaluation
from qrmia.config import RunConfig

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SUBSETS = ("members", "public", "holdout")
_LABELS = {"members": 1, "public": 0, "holdout": 0}

# Config sections each stage depends on.
STAGE_SECTIONS = {
    "data": ("dataset",),
    "models": ("dataset", "diffusion"),
    "scores": ("dataset", "diffusion", "score_t"),
    "attackers": ("dataset", "diffusion", "attack"),
    "reports": ("dataset", "diffusion", "attack", "eval"),
}


class WorkspaceError(RuntimeError):
    """Missing upstream artifact, stale artifact or a busy workspace."""


class StaleArtifactError(WorkspaceError):
    pass


def stage_hash(cfg: RunConfig, stage: str) -> str:
    sections = [s for s in STAGE_SECTIONS[stage] if s != "score_t"]
    digest = cfg.section_hash(*sections)
    if "score_t" in STAGE_SECTIONS[stage]:
        digest = f"{digest[:12]}t{cfg.score_t:04d}"
    return digest


class Workspace:
    """data/, models/, scores/, attackers/, reports/ and bench/ under one root."""

    def __init__(self, root: str | Path, force: bool = False):
        self.root = Path(root)
        self.force = force

    def dir(self, stage: str, digest: str) -> Path:
        return self.root / stage / digest

    @contextlib.contextmanager
    def lock(self) -> Iterator[None]:
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ".lock", "w") as fh:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise WorkspaceError(f"workspace {self.root} is in use by another command") from None
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def read_meta(self, stage: str, digest: str, inputs: dict[str, str] | None = None) -> dict:
        """Load an artifact's metadata, refusing stale or missing artifacts."""
        path = self.dir(stage, digest) / "meta.json"
        if not path.exists():
            raise WorkspaceError(f"missing {stage} artifact {digest}; run the producing command first")
        meta = json.loads(path.read_text())
        stale = meta.get("config_hash") != digest or (inputs is not None and meta.get("inputs") != inputs)
        if stale and not self.force:
            raise StaleArtifactError(f"{path} was produced by a different configuration; pass --force to use it")
        return meta

    @contextlib.contextmanager
    def writing(self, stage: str, digest: str, inputs: dict[str, str]) -> Iterator[Path]:
        """Yield a scratch directory that becomes the artifact once the block succeeds."""
        final = self.dir(stage, digest)
        scratch = final.with_name(f".{digest}.tmp{os.getpid()}")
        shutil.rmtree(scratch, ignore_errors=True)
        scratch.mkdir(parents=True)
        try:
            yield scratch
            meta = {"schema_version": SCHEMA_VERSION, "stage": stage, "config_hash": digest, "inputs": inputs}
            extra = scratch / "meta.extra.json"
            if extra.exists():
                meta.update(json.loads(extra.read_text()))
                extra.unlink()
            (scratch / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
            if final.exists():
                shutil.rmtree(final)
            scratch.rename(final)
        except BaseException:
            shutil.rmtree(scratch, ignore_errors=True)
            raise


def _exists(ws: Workspace, stage: str, digest: str) -> bool:
    return (ws.dir(stage, digest) / "meta.json").exists()


# -- stages ------------------------------------------------------------------------


def gen_data(cfg: RunConfig, ws: Workspace) -> tuple[Path, bool]:
    digest = stage_hash(cfg, "data")
    if _exists(ws, "data", digest):
        ws.read_meta("data", digest, {})
        return ws.dir("data", digest), True
    ds = cfg.dataset
    with ws.writing("data", digest, {}) as out:
        manifest = datagen.write_manifest(out / "manifest.json", ds.kind, ds.n, ds.dims, ds.seed,
                                          ds.split_seed, ds.public_fraction)
        _, sp = datagen.from_manifest(manifest)
        (out / "split.json").write_text(json.dumps(sp.ids(), indent=1))
    return ws.dir("data", digest), False


def load_split(cfg: RunConfig, ws: Workspace) -> datagen.DatasetSplit:
    digest = stage_hash(cfg, "data")
    ws.read_meta("data", digest, {})
    manifest = json.loads((ws.dir("data", digest) / "manifest.json").read_text())
    _, sp = datagen.from_manifest(manifest)
    recorded = json.loads((ws.dir("data", digest) / "split.json").read_text())
    if recorded != sp.ids() and not ws.force:
        raise StaleArtifactError("regenerated split does not match the recorded split")
    return sp


def train_dm(cfg: RunConfig, ws: Workspace) -> tuple[Path, bool]:
    """Single-shot training; an existing checkpoint is reused, never resumed."""
    data_hash = stage_hash(cfg, "data")
    digest = stage_hash(cfg, "models")
    inputs = {"data": data_hash}
    if _exists(ws, "models", digest):
        ws.read_meta("models", digest, inputs)
        return ws.dir("models", digest), True
    sp = load_split(cfg, ws)
    dm_cfg = cfg.diffusion
    sched = diffusion.make_schedule(dm_cfg.T, dm_cfg.beta_start, dm_cfg.beta_end)
    data_dim = int(np.prod(cfg.dataset.dims))
    model = diffusion.DiffusionModel.create(sched, data_dim, dm_cfg.width, dm_cfg.depth,
                                            dm_cfg.emb_width, dm_cfg.init_seed)
    sgd = dm_cfg.train.sgd()
    with ws.writing("models", digest, inputs) as out:
        start = time.perf_counter()
        trained, curve = diffusion.train(model, sp.members, sgd, dm_cfg.log_every)
        seconds = time.perf_counter() - start
        trained.save(out / "dm.json", sgd.seed, sgd.steps)
        evaluation.write_csv(out / "loss_curve.csv", ["step", "loss"], curve)
        (out / "meta.extra.json").write_text(json.dumps({"train_seconds": seconds,
                                                         "n_params": trained.eps_net.n_params}))
    logger.info("trained diffusion model in %.1fs", seconds)
    return ws.dir("models", digest), False


def load_model(cfg: RunConfig, ws: Workspace) -> diffusion.DiffusionModel:
    digest = stage_hash(cfg, "models")
    ws.read_meta("models", digest, {"data": stage_hash(cfg, "data")})
    return diffusion.DiffusionModel.load(ws.dir("models", digest) / "dm.json")


def score(cfg: RunConfig, ws: Workspace, subsets: Sequence[str] = SUBSETS) -> tuple[Path, bool]:
    inputs = {"data": stage_hash(cfg, "data"), "models": stage_hash(cfg, "models")}
    digest = stage_hash(cfg, "scores")
    directory = ws.dir("scores", digest)
    existing = set()
    if _exists(ws, "scores", digest):
        meta = ws.read_meta("scores", digest, inputs)
        existing = set(meta.get("subsets", []))
    wanted = [s for s in subsets if s not in existing]
    if not wanted:
        return directory, True
    sp = load_split(cfg, ws)
    model = load_model(cfg, ws)
    with ws.writing("scores", digest, inputs) as out:
        for name in existing:
            shutil.copy(directory / f"{name}.csv", out / f"{name}.csv")
        for name in wanted:
            cache = diffusion.score_dataset(model, getattr(sp, name), cfg.score_t, _LABELS[name])
            datagen.save_scores(cache, out / f"{name}.csv")
        (out / "meta.extra.json").write_text(json.dumps({"subsets": sorted(existing | set(wanted)),
                                                         "t": cfg.score_t}))
    return directory, False


def load_scores(cfg: RunConfig, ws: Workspace, subset: str) -> datagen.ScoreCache:
    inputs = {"data": stage_hash(cfg, "data"), "models": stage_hash(cfg, "models")}
    digest = stage_hash(cfg, "scores")
    meta = ws.read_meta("scores", digest, inputs)
    if subset not in meta.get("subsets", []):
        raise WorkspaceError(f"no {subset} scores in {digest}; run `score --subset {subset}`")
    return datagen.load_scores(ws.dir("scores", digest) / f"{subset}.csv")


def attack_data(cfg: RunConfig, ws: Workspace, sp: datagen.DatasetSplit | None = None) -> evaluation.AttackData:
    sp = load_split(cfg, ws) if sp is None else sp
    table = {}
    for name in SUBSETS:
        table.update(load_scores(cfg, ws, name).by_id())

    def pack(examples):
        return datagen.stack(examples), np.array([table[e.id].score for e in examples])

    return evaluation.AttackData(*pack(sp.public), *pack(sp.members), *pack(sp.holdout))


def _widths(cfg: RunConfig, trunk: int) -> list[int]:
    return attack.trunk_widths(int(np.prod(cfg.dataset.dims)), len(cfg.alphas()), trunk, cfg.attack.blocks)


def train_attack_bag(cfg: RunConfig, data: evaluation.AttackData, master_seed: int,
                     trunk: int | None = None, m: int | None = None) -> attack.AttackerBag:
    at = cfg.attack
    trunk = at.trunk_params[0] if trunk is None else trunk
    return attack.train_bag(data.public_x, data.public_scores, cfg.alphas(), _widths(cfg, trunk),
                            at.train.sgd(), at.m if m is None else m, master_seed, at.score_transform)


def run_attack(cfg: RunConfig, ws: Workspace) -> tuple[Path, bool]:
    inputs = {"data": stage_hash(cfg, "data"), "models": stage_hash(cfg, "models"),
              "scores": stage_hash(cfg, "scores")}
    digest = stage_hash(cfg, "attackers")
    if _exists(ws, "attackers", digest):
        ws.read_meta("attackers", digest, inputs)
        return ws.dir("attackers", digest), True
    sp = load_split(cfg, ws)
    data = attack_data(cfg, ws, sp)
    start = time.perf_counter()
    bag = train_attack_bag(cfg, data, cfg.attack.master_seed)
    seconds = time.perf_counter() - start
    alpha = cfg.attack.decision_alpha
    rows = []
    for label, examples, x, s in ((1, sp.members, data.member_x, data.member_scores),
                                  (0, sp.holdout, data.holdout_x, data.holdout_scores)):
        votes = bag.votes(x, s, alpha)
        for e, score_value, v in zip(examples, s, votes):
            rows.append([e.id, label, float(score_value), alpha, int(v), bag.m,
                         "IN" if 2 * v >= bag.m else "OUT"])
    with ws.writing("attackers", digest, inputs) as out:
        attack.save_bag(out / "bag", bag, {"trunk_target": cfg.attack.trunk_params[0]})
        evaluation.write_csv(out / "decisions.csv",
                             ["id", "label", "score", "alpha", "votes", "m", "verdict"], rows)
        (out / "meta.extra.json").write_text(json.dumps({"train_seconds": seconds}))
    return ws.dir("attackers", digest), False


def load_bag(cfg: RunConfig, ws: Workspace) -> attack.AttackerBag:
    digest = stage_hash(cfg, "attackers")
    ws.read_meta("attackers", digest)
    return attack.load_bag(ws.dir("attackers", digest) / "bag")


def eval_master_seed(master_seed: int, seed: int, stream: int) -> int:
    return int(np.random.SeedSequence([int(master_seed), int(seed), int(stream)])
               .generate_state(1, np.uint64)[0] >> 1)


def seed_views(cfg: RunConfig, ws: Workspace) -> list[evaluation.AttackData]:
    """Per evaluation seed: members fixed, nonmember half re-partitioned into public/holdout."""
    base = load_split(cfg, ws)
    return [attack_data(cfg, ws, datagen.resplit_nonmembers(base, s)) for s in cfg.eval.seeds]


def _curve_rows(curve: evaluation.RocCurve) -> list[list[float]]:
    return [[f, t] for f, t in curve.points]


def evaluate(cfg: RunConfig, ws: Workspace) -> tuple[Path, bool]:
    inputs = {"attackers": stage_hash(cfg, "attackers"), "scores": stage_hash(cfg, "scores")}
    digest = stage_hash(cfg, "reports")
    out_dir = ws.dir("reports", digest)
    if (out_dir / "evaluate.json").exists():
        ws.read_meta("reports", digest, inputs)
        return out_dir, True
    alphas = cfg.alphas()
    targets = cfg.eval.fpr_targets
    data = attack_data(cfg, ws)
    bag = load_bag(cfg, ws)
    curves = {
        "bag": evaluation.bag_curve(bag, data, alphas),
        "single": evaluation.bag_curve(bag.prefix(1), data, alphas),
        "marginal": evaluation.marginal_curve(data, alphas),
        "score_threshold": evaluation.roc_from_scores(data.member_scores, data.holdout_scores),
    }
    per_seed = []
    for s, view in zip(cfg.eval.seeds, seed_views(cfg, ws)):
        sbag = train_attack_bag(cfg, view, eval_master_seed(cfg.attack.master_seed, s, 1))
        for name, curve in (("bag", evaluation.bag_curve(sbag, view, alphas)),
                            ("single", evaluation.bag_curve(sbag.prefix(1), view, alphas)),
                            ("marginal", evaluation.marginal_curve(view, alphas))):
            for f, tpr in evaluation.tpr_table(curve, targets).items():
                per_seed.append([s, name, f, tpr])
    hist = evaluation.score_histograms(data.member_scores, data.holdout_scores, cfg.eval.histogram_bins)
    from scipy.stats import mannwhitneyu

    mw = mannwhitneyu(data.member_scores, data.holdout_scores, alternative="less")
    summary_rows = []
    for name in ("bag", "single", "marginal"):
        for f in targets:
            vals = [r[3] for r in per_seed if r[1] == name and r[2] == f]
            summary_rows.append([name, f, float(np.mean(vals)), float(np.std(vals)), len(vals)])

    os.makedirs(out_dir, exist_ok=True)
    for name, curve in curves.items():
        evaluation.write_csv(out_dir / f"roc_{name}.csv", ["fpr", "tpr"], _curve_rows(curve))
    evaluation.write_csv(out_dir / "tpr_at_fpr.csv", ["attack", "fpr", "tpr"],
                         [[name, f, tpr] for name, c in curves.items()
                          for f, tpr in evaluation.tpr_table(c, targets).items()])
    evaluation.write_csv(out_dir / "tpr_at_fpr_seeds.csv", ["seed", "attack", "fpr", "tpr"], per_seed)
    evaluation.write_csv(out_dir / "tpr_at_fpr_mean.csv", ["attack", "fpr", "tpr_mean", "tpr_std", "n_seeds"],
                         summary_rows)
    cal = evaluation.calibration(bag, data, alphas)
    evaluation.write_csv(out_dir / "calibration.csv", ["alpha", "fpr_single", "fpr_bag", "fpr_marginal"],
                         [[r["alpha"], r["fpr_single"], r["fpr_bag"], r["fpr_marginal"]] for r in cal])
    evaluation.write_csv(out_dir / "histograms.csv", ["bin_lo", "bin_hi", "members", "holdout"],
                         [[hist.edges[i], hist.edges[i + 1], int(hist.members[i]), int(hist.holdout[i])]
                          for i in range(len(hist.members))])
    evaluation.svg_plot(out_dir / "roc.svg", {n: (c.fpr, c.tpr) for n, c in curves.items()},
                        "ROC", "FPR", "TPR", step=True)
    centres = (hist.edges[:-1] + hist.edges[1:]) / 2
    evaluation.svg_plot(out_dir / "histograms.svg", {"members": (centres, hist.members),
                                                     "holdout": (centres, hist.holdout)},
                        "-log t-error", "-log t-error", "count", step=True)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "score_t": cfg.score_t,
        "auc": {n: c.auc for n, c in curves.items()},
        "tpr_at_fpr": {n: {str(f): v for f, v in evaluation.tpr_table(c, targets).items()}
                       for n, c in curves.items()},
        "tpr_at_fpr_mean": {f"{r[0]}@{r[1]}": r[2] for r in summary_rows},
        "mann_whitney_p": float(mw.pvalue),
        "mean_neg_log_score": {"members": float(np.mean(-np.log(data.member_scores))),
                               "holdout": float(np.mean(-np.log(data.holdout_scores)))},
        "n": {"members": len(data.member_scores), "public": len(data.public_scores),
              "holdout": len(data.holdout_scores)},
    }
    (out_dir / "evaluate.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_report_meta(out_dir, digest, inputs)
    return out_dir, False


def _write_report_meta(out_dir: Path, digest: str, inputs: dict) -> None:
    meta = {"schema_version": SCHEMA_VERSION, "stage": "reports", "config_hash": digest, "inputs": inputs}
    (out_dir / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def ablate(cfg: RunConfig, ws: Workspace) -> tuple[Path, bool]:
    inputs = {"attackers": stage_hash(cfg, "attackers"), "scores": stage_hash(cfg, "scores")}
    digest = stage_hash(cfg, "reports")
    out_dir = ws.dir("reports", digest) / "ablation"
    if (out_dir / "ablate.json").exists():
        ws.read_meta("reports", f"{digest}/ablation", inputs)
        return out_dir, True
    ev, at = cfg.eval, cfg.attack
    alphas = cfg.alphas()
    views = seed_views(cfg, ws)
    seeds = [eval_master_seed(at.master_seed, s, 1) for s in ev.seeds]
    sweep = evaluation.bagging_sweep(views, seeds, ev.m_values, at.trunk_params, alphas, at.train.sgd(),
                                     ev.fpr_targets, at.blocks, at.score_transform)
    data = attack_data(cfg, ws)
    bags = [train_attack_bag(cfg, data, eval_master_seed(at.master_seed, r, 2), m=max(ev.m_values))
            for r in range(ev.repetitions)]
    cdfs = []
    for population, x, s in (("holdout", data.holdout_x, data.holdout_scores),
                             ("members", data.member_x, data.member_scores)):
        cdfs += evaluation.variance_cdf(bags, x, s, ev.variance_alpha, ev.m_values, population)

    os.makedirs(out_dir, exist_ok=True)
    evaluation.write_csv(out_dir / "bagging_sweep.csv",
                         ["trunk_params", "m", "fpr", "tpr_mean", "tpr_std", "n_seeds"],
                         [[r["trunk_params"], r["m"], r["fpr"], r["tpr_mean"], r["tpr_std"], r["n_seeds"]]
                          for r in sweep])
    evaluation.write_csv(out_dir / "variance_cdf.csv", ["population", "m", "variance", "cdf"],
                         [[c.population, c.m, g, p] for c in cdfs for g, p in zip(c.grid, c.cdf)])
    evaluation.write_csv(out_dir / "variance_summary.csv", ["population", "m", "mean_variance", "n_samples"],
                         [[c.population, c.m, c.mean, len(c.variances)] for c in cdfs])
    for target in ev.fpr_targets:
        series = {}
        for trunk in at.trunk_params:
            pts = [(r["m"], r["tpr_mean"]) for r in sweep if r["trunk_params"] == trunk and r["fpr"] == target]
            series[f"{trunk} params"] = ([p[0] for p in pts], [p[1] for p in pts])
        evaluation.svg_plot(out_dir / f"bagging_fpr_{target:g}.svg", series,
                            f"TPR @ {target:g} FPR vs bag size", "m", "TPR")
    evaluation.svg_plot(out_dir / "variance_cdf.svg",
                        {f"m={c.m}": (c.grid, c.cdf) for c in cdfs if c.population == "holdout"},
                        "per-sample verdict variance (holdout)", "variance", "CDF", step=True)
    summary = {
        "schema_version": SCHEMA_VERSION,
        "bagging": [{k: r[k] for k in ("trunk_params", "m", "fpr", "tpr_mean", "tpr_std", "n_seeds")}
                    for r in sweep],
        "mean_variance": {f"{c.population}@m={c.m}": c.mean for c in cdfs},
    }
    (out_dir / "ablate.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    _write_report_meta(out_dir, f"{digest}/ablation", inputs)
    return out_dir, False


def bench_prep(cfg: RunConfig, ws: Workspace) -> Path:
    """Wall-clock of scoring the public set and of training the attacker bag."""
    sp = load_split(cfg, ws)
    model = load_model(cfg, ws)
    dm_meta = ws.read_meta("models", stage_hash(cfg, "models"))
    start = time.perf_counter()
    cache = diffusion.score_dataset(model, sp.public, cfg.score_t, 0)
    scoring = time.perf_counter() - start
    x = datagen.stack(sp.public)
    data = evaluation.AttackData(x, cache.lookup([e.id for e in sp.public]), x[:0], np.zeros(0),
                                 x[:0], np.zeros(0))
    start = time.perf_counter()
    train_attack_bag(cfg, data, cfg.attack.master_seed)
    learning = time.perf_counter() - start
    out = ws.root / "bench" / stage_hash(cfg, "attackers")
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_csv(out / "timing.csv", ["step", "seconds", "detail"], [
        ["scoring", scoring, f"t-error of {len(sp.public)} public samples at t={cfg.score_t}"],
        ["learning", learning, f"{cfg.attack.m} quantile regressors"],
    ])
    dm_seconds = dm_meta.get("train_seconds")
    (out / "bench.json").write_text(json.dumps({
        "schema_version": SCHEMA_VERSION, "scoring_seconds": scoring, "learning_seconds": learning,
        "diffusion_train_seconds": dm_seconds,
        "learning_over_diffusion": learning / dm_seconds if dm_seconds else None,
    }, indent=2, sort_keys=True))
    return out
