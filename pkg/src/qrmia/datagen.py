"""Procedural image datasets, the member/public/holdout split and score caches."""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from collections.abc import Iterable, Sequence
from pathlib import Path

import numpy as np

FAMILIES = ("blobs", "bars", "mix")
SCORE_HEADER = ["id", "t", "score", "label"]


class DataConfigError(ValueError):
    """Unknown dataset family or out-of-range generation parameters."""


class SplitError(ValueError):
    pass


class ScoreParseError(ValueError):
    """A score cache file is malformed; the message names the line."""


@dataclasses.dataclass(frozen=True)
class Example:
    id: int
    pixels: np.ndarray  # (C, H, W), values in [-1, 1]

    @property
    def flat(self) -> np.ndarray:
        return self.pixels.reshape(-1)


@dataclasses.dataclass
class DatasetSplit:
    members: list[Example]
    public: list[Example]
    holdout: list[Example]

    def ids(self) -> dict[str, list[int]]:
        return {name: [e.id for e in getattr(self, name)] for name in ("members", "public", "holdout")}


def stack(examples: Sequence[Example]) -> np.ndarray:
    """Flatten examples into a (n, C*H*W) array."""
    if not examples:
        return np.zeros((0, 0))
    return np.stack([e.flat for e in examples])


# -- generation ----------------------------------------------------------------


def _blob(rng: np.random.Generator, dims: tuple[int, int, int]) -> np.ndarray:
    c, h, w = dims
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((c, h, w))
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(0, h - 1), rng.uniform(0, w - 1)
        scale = rng.uniform(0.08, 0.3) * min(h, w)
        amp = rng.uniform(0.5, 1.0)
        colour = rng.uniform(0.3, 1.0, size=c)
        bump = amp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * scale**2))
        img += colour[:, None, None] * bump[None]
    return 2.0 * np.clip(img, 0.0, 1.0) - 1.0


def _bars(rng: np.random.Generator, dims: tuple[int, int, int]) -> np.ndarray:
    c, h, w = dims
    img = np.zeros((c, h, w))
    for _ in range(rng.integers(1, 4)):
        y0, y1 = sorted(rng.integers(0, h + 1, size=2))
        x0, x1 = sorted(rng.integers(0, w + 1, size=2))
        y1, x1 = max(y1, y0 + 1), max(x1, x0 + 1)
        colour = rng.uniform(0.3, 1.0, size=c)
        img[:, y0:y1, x0:x1] += colour[:, None, None] * rng.uniform(0.5, 1.0)
    return 2.0 * np.clip(img, 0.0, 1.0) - 1.0


_GENERATORS = {"blobs": _blob, "bars": _bars}


def generate(kind: str, n: int, dims: Sequence[int], seed: int, id_offset: int = 0) -> list[Example]:
    """Draw ``n`` examples of family ``kind``; a pure function of its arguments.

    ``blobs`` are sums of one to three Gaussian bumps, ``bars`` one to three
    axis-aligned rectangles and ``mix`` picks either family per example.
    """
    if kind not in FAMILIES:
        raise DataConfigError(f"unknown dataset family {kind!r}; expected one of {FAMILIES}")
    if n < 1:
        raise DataConfigError(f"n must be at least 1, got {n}")
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise DataConfigError(f"dims must be (C, H, W) with positive entries, got {dims}")
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        family = kind if kind != "mix" else ("blobs", "bars")[rng.integers(2)]
        out.append(Example(id_offset + i, _GENERATORS[family](rng, dims)))
    return out


def split(data: Sequence[Example], public_fraction: float = 0.5, seed: int = 0) -> DatasetSplit:
    """Shuffle, give the first half to members and divide the rest into public and holdout."""
    n = len(data)
    if n < 4:
        raise SplitError(f"need at least 4 examples to split, got {n}")
    if not 0 < public_fraction < 1:
        raise SplitError(f"public_fraction must lie in (0, 1), got {public_fraction}")
    if len({e.id for e in data}) != n:
        raise SplitError("example ids are not unique")
    order = np.random.default_rng(seed).permutation(n)
    n_members = n // 2
    rest = n - n_members
    n_public = min(max(int(math.floor(rest * public_fraction)), 1), rest - 1)
    shuffled = [data[i] for i in order]
    return DatasetSplit(
        members=shuffled[:n_members],
        public=shuffled[n_members:n_members + n_public],
        holdout=shuffled[n_members + n_public:],
    )


def resplit_nonmembers(base: DatasetSplit, seed: int) -> DatasetSplit:
    """Redraw the public/holdout partition of the nonmember half, keeping sizes and members."""
    rest = base.public + base.holdout
    order = np.random.default_rng(seed).permutation(len(rest))
    shuffled = [rest[i] for i in order]
    k = len(base.public)
    return DatasetSplit(list(base.members), shuffled[:k], shuffled[k:])


def write_manifest(path: str | Path, kind: str, n: int, dims: Sequence[int], seed: int,
                   split_seed: int, public_fraction: float, **extra) -> dict:
    manifest = {
        "kind": kind, "n": int(n), "dims": [int(d) for d in dims], "seed": int(seed),
        "split_seed": int(split_seed), "fractions": {"members": 0.5, "public_of_rest": public_fraction},
        **extra,
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def from_manifest(manifest: dict) -> tuple[list[Example], DatasetSplit]:
    data = generate(manifest["kind"], manifest["n"], manifest["dims"], manifest["seed"])
    return data, split(data, manifest["fractions"]["public_of_rest"], manifest["split_seed"])


# -- score caches ----------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ScoreRecord:
    id: int
    t: int
    score: float
    label: int | None = None  # 1 member, 0 nonmember, None unknown

    def __post_init__(self):
        if not self.score >= 0:
            raise ValueError(f"score must be nonnegative, got {self.score} for id {self.id}")
        if self.label not in (None, 0, 1):
            raise ValueError(f"label must be 0, 1 or unknown, got {self.label}")


@dataclasses.dataclass
class ScoreCache:
    records: list[ScoreRecord] = dataclasses.field(default_factory=list)

    def __post_init__(self):
        keys = [(r.id, r.t) for r in self.records]
        if len(set(keys)) != len(keys):
            raise ValueError("score cache holds duplicate (id, t) records")

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def sorted(self) -> ScoreCache:
        return ScoreCache(sorted(self.records, key=lambda r: (r.t, r.id)))

    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.records], dtype=np.float64)

    def by_id(self) -> dict[int, ScoreRecord]:
        return {r.id: r for r in self.records}

    def lookup(self, ids: Iterable[int]) -> np.ndarray:
        table = self.by_id()
        return np.array([table[i].score for i in ids], dtype=np.float64)


def save_scores(cache: ScoreCache, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SCORE_HEADER)
        for r in cache.records:
            writer.writerow([r.id, r.t, repr(float(r.score)), "" if r.label is None else r.label])


def load_scores(path: str | Path) -> ScoreCache:
    records = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != SCORE_HEADER:
            raise ScoreParseError(f"{path}: line 1: expected header {','.join(SCORE_HEADER)}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ScoreParseError(f"{path}: line {lineno}: expected 4 fields, got {len(row)}")
            try:
                label = None if row[3] == "" else int(row[3])
                records.append(ScoreRecord(int(row[0]), int(row[1]), float(row[2]), label))
            except ValueError as exc:
                raise ScoreParseError(f"{path}: line {lineno}: {exc}") from None
    try:
        return ScoreCache(records)
    except ValueError as exc:
        raise ScoreParseError(f"{path}: {exc}") from None
