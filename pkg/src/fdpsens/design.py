"""Matched designs, outcome tables and score construction.

A design is an ordered collection of strata (matched sets), each holding
exactly one treated unit and at least one control. Outcomes and scores are
``N x K`` arrays aligned with the unit order obtained by walking the strata
in order. Sum statistics ``T_k = Z' q_k`` are formed from a score matrix.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property
from os import PathLike
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DesignError",
    "DegenerateScaleError",
    "Unit",
    "Stratum",
    "MatchedDesign",
    "OutcomeMatrix",
    "ScoreMatrix",
    "StratumGroup",
    "load_design_csv",
    "write_design_csv",
    "sum_statistic",
    "mh_scores",
    "huber_psi",
    "huber_m_scores",
    "build_scores",
]

CONTINUOUS = "continuous"
BINARY = "binary"
_KINDS = (CONTINUOUS, BINARY)


class DesignError(ValueError):
    """Raised when a design or an outcome table violates its invariants."""


class DegenerateScaleError(ValueError):
    """Raised when a robust score has zero scale (no within-stratum spread)."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Unit:
    unit_id: str
    treated: bool


@dataclass(frozen=True)
class Stratum:
    stratum_id: str
    units: tuple[Unit, ...]

    @property
    def size(self) -> int:
        return len(self.units)


@dataclass(frozen=True)
class StratumGroup:
    """All strata sharing one size ``n``.

    ``units[i, j]`` is the global row of unit ``j`` of the ``i``-th stratum
    in this group, ``strata[i]`` its position in the design.
    """

    n: int
    strata: np.ndarray
    units: np.ndarray


@dataclass(frozen=True)
class MatchedDesign:
    """Strata of units with one treated unit each.

    Invariants (checked on construction): every stratum has at least two
    units and exactly one treated unit; stratum ids are unique, and unit ids
    are unique within a stratum.
    """

    strata: tuple[Stratum, ...]

    def __post_init__(self):
        object.__setattr__(self, "strata", tuple(self.strata))
        if not self.strata:
            raise DesignError("design has no strata")
        seen = set()
        for s in self.strata:
            if s.stratum_id in seen:
                raise DesignError(f"duplicate stratum id {s.stratum_id!r}")
            seen.add(s.stratum_id)
            if len(s.units) < 2:
                raise DesignError(
                    f"stratum {s.stratum_id!r} has {len(s.units)} unit(s); need at least 2")
            ntreat = sum(bool(u.treated) for u in s.units)
            if ntreat != 1:
                raise DesignError(
                    f"stratum {s.stratum_id!r} has {ntreat} treated units; need exactly 1")
            ids = [u.unit_id for u in s.units]
            if len(set(ids)) != len(ids):
                raise DesignError(f"stratum {s.stratum_id!r} has duplicate unit ids")

    @classmethod
    def from_arrays(cls, stratum_ids: Sequence, unit_ids: Sequence,
                    treated: Sequence) -> "MatchedDesign":
        """Build a design from parallel per-unit columns (file order kept)."""
        order: dict = {}
        for sid, uid, z in zip(stratum_ids, unit_ids, treated):
            order.setdefault(str(sid), []).append(Unit(str(uid), bool(z)))
        strata = tuple(Stratum(sid, tuple(us)) for sid, us in order.items())
        design = cls(strata)
        # rows must already be grouped by stratum for the unit order to match
        flat = [str(s) for s in stratum_ids]
        expected = [s.stratum_id for s in strata for _ in s.units]
        if flat != expected:
            raise DesignError("rows of a stratum must be contiguous")
        return design

    @classmethod
    def pairs(cls, n_pairs: int, treated_first: Sequence[bool] | None = None) -> "MatchedDesign":
        """``n_pairs`` matched pairs; unit 0 of pair ``i`` is treated unless
        ``treated_first[i]`` is false."""
        if treated_first is None:
            treated_first = [True] * n_pairs
        strata = tuple(
            Stratum(str(i), (Unit("0", bool(t)), Unit("1", not bool(t))))
            for i, t in enumerate(treated_first)
        )
        return cls(strata)

    @property
    def n_strata(self) -> int:
        return len(self.strata)

    @cached_property
    def sizes(self) -> np.ndarray:
        return _frozen(np.array([s.size for s in self.strata], dtype=int))

    @property
    def n_units(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def treated(self) -> np.ndarray:
        """Boolean treatment indicator ``Z`` in unit order."""
        return _frozen(np.array([u.treated for s in self.strata for u in s.units], dtype=bool))

    @cached_property
    def stratum_index(self) -> np.ndarray:
        return _frozen(np.repeat(np.arange(self.n_strata), self.sizes))

    @cached_property
    def offsets(self) -> np.ndarray:
        return _frozen(np.concatenate([[0], np.cumsum(self.sizes)]))

    @cached_property
    def groups(self) -> tuple[StratumGroup, ...]:
        out = []
        for n in np.unique(self.sizes):
            idx = np.flatnonzero(self.sizes == n)
            units = self.offsets[idx][:, None] + np.arange(n)[None, :]
            out.append(StratumGroup(int(n), _frozen(idx), _frozen(units)))
        return tuple(out)

    @property
    def n_assignments(self) -> int:
        """``|Omega|``, the number of admissible treatment assignments."""
        return math.prod(int(n) for n in self.sizes)


@dataclass(frozen=True)
class OutcomeMatrix:
    values: np.ndarray
    kinds: tuple[str, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[1] < 1:
            raise DesignError("outcomes must be an N x K matrix with K >= 1")
        if not np.all(np.isfinite(v)):
            raise DesignError("outcomes contain missing or non-finite entries")
        kinds = tuple(self.kinds)
        if len(kinds) != v.shape[1]:
            raise DesignError("one kind tag per outcome column is required")
        for k, kind in enumerate(kinds):
            if kind not in _KINDS:
                raise DesignError(f"unknown outcome kind {kind!r}")
            if kind == BINARY and not np.all((v[:, k] == 0) | (v[:, k] == 1)):
                raise DesignError(f"binary outcome column {k} has values outside {{0, 1}}")
        names = tuple(self.names) or tuple(f"y{k}" for k in range(v.shape[1]))
        if len(names) != v.shape[1]:
            raise DesignError("one name per outcome column is required")
        object.__setattr__(self, "values", _frozen(v))
        object.__setattr__(self, "kinds", kinds)
        object.__setattr__(self, "names", names)

    @classmethod
    def infer(cls, values, names: Sequence[str] = ()) -> "OutcomeMatrix":
        """Tag {0,1}-valued columns as binary and everything else continuous."""
        v = np.asarray(values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        kinds = tuple(BINARY if np.all((c == 0) | (c == 1)) else CONTINUOUS for c in v.T)
        return cls(v, kinds, tuple(names))

    @property
    def n_outcomes(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class ScoreMatrix:
    q: np.ndarray
    labels: tuple[str, ...] = field(default=())

    def __post_init__(self):
        q = np.asarray(self.q, dtype=float)
        if q.ndim == 1:
            q = q[:, None]
        if not np.all(np.isfinite(q)):
            raise DesignError("scores must be finite")
        labels = tuple(self.labels) or tuple("raw" for _ in range(q.shape[1]))
        if len(labels) != q.shape[1]:
            raise DesignError("one label per score column is required")
        object.__setattr__(self, "q", _frozen(q))
        object.__setattr__(self, "labels", labels)

    @property
    def n_outcomes(self) -> int:
        return self.q.shape[1]

    def subset(self, cols: Iterable[int]) -> "ScoreMatrix":
        cols = list(cols)
        return ScoreMatrix(self.q[:, cols], tuple(self.labels[c] for c in cols))


# -- CSV ------------------------------------------------------------------

_HEADER = ("stratum_id", "unit_id", "treated")


def load_design_csv(path: str | PathLike, kinds: dict[str, str] | None = None
                    ) -> tuple[MatchedDesign, OutcomeMatrix]:
    """Read ``stratum_id,unit_id,treated,<outcomes...>`` rows.

    Outcome kinds are inferred ({0,1}-valued columns are binary); ``kinds``
    maps outcome names to an explicit tag and overrides the inference.
    Errors name the offending file line and column.
    """
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DesignError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if tuple(header[:3]) != _HEADER or len(header) < 4:
        raise DesignError(
            f"{path}: header must start with stratum_id,unit_id,treated and name "
            "at least one outcome column")
    names = header[3:]
    width = len(header)
    sids, uids, z, vals = [], [], [], []
    seen_units = set()
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != width:
            raise DesignError(f"{path}: line {lineno}: expected {width} fields, got {len(row)}")
        sid, uid, t = row[0].strip(), row[1].strip(), row[2].strip()
        if not sid or not uid:
            raise DesignError(f"{path}: line {lineno}: empty stratum_id or unit_id")
        if t not in ("0", "1"):
            raise DesignError(f"{path}: line {lineno}, column 'treated': expected 0 or 1, got {t!r}")
        if (sid, uid) in seen_units:
            raise DesignError(f"{path}: line {lineno}: duplicate unit {uid!r} in stratum {sid!r}")
        seen_units.add((sid, uid))
        out = []
        for name, cell in zip(names, row[3:]):
            cell = cell.strip()
            try:
                x = float(cell)
            except ValueError:
                raise DesignError(
                    f"{path}: line {lineno}, column {name!r}: non-numeric value {cell!r}") from None
            if not math.isfinite(x):
                raise DesignError(f"{path}: line {lineno}, column {name!r}: missing or non-finite value")
            out.append(x)
        sids.append(sid)
        uids.append(uid)
        z.append(t == "1")
        vals.append(out)
    if not sids:
        raise DesignError(f"{path}: no data rows")
    # group rows by stratum, keeping first-appearance order of strata
    order = {}
    for i, sid in enumerate(sids):
        order.setdefault(sid, []).append(i)
    perm = [i for idx in order.values() for i in idx]
    strata = []
    for sid, idx in order.items():
        units = tuple(Unit(uids[i], z[i]) for i in idx)
        ntreat = sum(u.treated for u in units)
        if ntreat != 1:
            raise DesignError(f"{path}: stratum {sid!r} has {ntreat} treated units; need exactly 1")
        if len(units) < 2:
            raise DesignError(f"{path}: stratum {sid!r} has a single unit")
        strata.append(Stratum(sid, units))
    design = MatchedDesign(tuple(strata))
    values = np.asarray(vals, dtype=float)[perm]
    inferred = OutcomeMatrix.infer(values, names)
    tags = list(inferred.kinds)
    for name, kind in (kinds or {}).items():
        if name not in names:
            raise DesignError(f"{path}: kind override for unknown outcome {name!r}")
        tags[names.index(name)] = kind
    return design, OutcomeMatrix(values, tuple(tags), tuple(names))


def write_design_csv(path: str | PathLike, design: MatchedDesign, outcomes: OutcomeMatrix) -> None:
    """Write the CSV layout read by :func:`load_design_csv` (floats in repr form)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(list(_HEADER) + list(outcomes.names))
        row = 0
        for s in design.strata:
            for u in s.units:
                w.writerow([s.stratum_id, u.unit_id, int(u.treated)]
                           + [repr(float(x)) for x in outcomes.values[row]])
                row += 1


# -- statistics and scores --------------------------------------------------

def sum_statistic(design: MatchedDesign, scores: ScoreMatrix, k: int) -> float:
    """``T_k``: the sum of treated units' scores for outcome ``k``."""
    if not 0 <= k < scores.n_outcomes:
        raise IndexError(f"outcome index {k} out of range for K={scores.n_outcomes}")
    return float(scores.q[design.treated, k].sum())


def mh_scores(outcomes: OutcomeMatrix, k: int) -> np.ndarray:
    """Mantel-Haenszel scores for a binary outcome: the outcome itself."""
    if outcomes.kinds[k] != BINARY:
        raise TypeError(f"outcome {outcomes.names[k]!r} is not binary")
    return outcomes.values[:, k].copy()


def huber_psi(y, trim: float = 2.5):
    """``sign(y) * min(1, |y| / trim)``."""
    y = np.asarray(y, dtype=float)
    return np.clip(y / trim, -1.0, 1.0)


def huber_m_scores(design: MatchedDesign, outcomes: OutcomeMatrix, k: int,
                   trim: float = 2.5) -> np.ndarray:
    """Huber M-scores for continuous outcome ``k``.

    The scale is the median absolute treated-minus-control difference across
    all strata; each unit's score averages ``psi`` of its scaled differences
    with the other members of its stratum, divided by the stratum size.
    Scores sum to zero within every stratum.
    """
    if outcomes.kinds[k] != CONTINUOUS:
        raise TypeError(f"outcome {outcomes.names[k]!r} is not continuous")
    if trim <= 0:
        raise ValueError("trim must be positive")
    r = outcomes.values[:, k]
    z = design.treated
    absdiff = []
    for g in design.groups:
        vals = r[g.units]
        tmask = z[g.units]
        tval = vals[tmask]
        ctrl = vals[~tmask].reshape(len(g.strata), g.n - 1)
        absdiff.append(np.abs(tval[:, None] - ctrl).ravel())
    scale = float(np.median(np.concatenate(absdiff)))
    if scale == 0.0:
        raise DegenerateScaleError(
            f"outcome {outcomes.names[k]!r}: median treated-control difference is zero")
    q = np.empty_like(r)
    for g in design.groups:
        vals = r[g.units]
        diff = (vals[:, :, None] - vals[:, None, :]) / scale
        q[g.units] = huber_psi(diff, trim).sum(axis=2) / g.n
    return q


def build_scores(design: MatchedDesign, outcomes: OutcomeMatrix,
                 choices: str | Sequence[str] = "auto", trim: float = 2.5) -> ScoreMatrix:
    """Assemble a score matrix, one construction per outcome.

    ``choices`` is one of ``"auto"``, ``"mh"``, ``"huber"``, ``"raw"`` or a
    sequence of those per outcome. ``"auto"`` picks Mantel-Haenszel for
    binary outcomes and Huber M-scores for continuous ones.
    """
    if len(outcomes.values) != design.n_units:
        raise DesignError(
            f"outcomes have {len(outcomes.values)} rows but the design has {design.n_units} units")
    K = outcomes.n_outcomes
    if isinstance(choices, str):
        choices = [choices] * K
    if len(choices) != K:
        raise ValueError(f"expected {K} statistic choices, got {len(choices)}")
    cols, labels = [], []
    for k, choice in enumerate(choices):
        if choice == "auto":
            choice = "mh" if outcomes.kinds[k] == BINARY else "huber"
        if choice == "mh":
            cols.append(mh_scores(outcomes, k))
            labels.append("mh")
        elif choice == "huber":
            cols.append(huber_m_scores(design, outcomes, k, trim))
            labels.append(f"huber({trim:g})")
        elif choice == "raw":
            cols.append(outcomes.values[:, k].copy())
            labels.append("raw")
        else:
            raise ValueError(f"unknown statistic {choice!r}")
    return ScoreMatrix(np.column_stack(cols), tuple(labels))
