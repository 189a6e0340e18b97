"""Gait parameter vocabulary, normalisation, combination selection and sentences.

Sentence grammar (EBNF)::

    sentence    = clause , { ", " , clause } , "." ;
    clause      = description , " is " , number , [ " " , unit ] ;
    number      = [ "-" ] , digit , { digit } , [ "." , digit , [ digit ] , [ digit ] ] ;
    description = words of one parameter description; the first clause keeps the
                  table capitalisation, later clauses are lower-cased ;
    unit        = the unit string of that parameter (omitted when unitless) ;
"""

from __future__ import annotations

import csv
import itertools
import logging
import math
import re
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

log = logging.getLogger(__name__)

V_RANGE = 2.5
TABLE_VERSION = 1


@dataclass(frozen=True)
class GaitParameterDef:
    id: int
    description: str
    unit: str


@dataclass
class GaitParameterSet:
    values: dict[int, float]
    subject_id: str = ""
    label: int = -1

    def __post_init__(self):
        for k, v in self.values.items():
            if not math.isfinite(v):
                raise ValueError(f"parameter {k} has non-finite value {v}")


@dataclass(frozen=True)
class ParameterCombination:
    ids: tuple[int, ...]

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ValueError(f"duplicate ids in combination {self.ids}")
        object.__setattr__(self, "ids", tuple(sorted(int(i) for i in self.ids)))

    def __iter__(self):
        return iter(self.ids)

    def __len__(self):
        return len(self.ids)


@dataclass
class NormalizationStats:
    mean: dict[int, float]
    sigma: dict[int, float]
    alpha_scale: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        for k, s in self.sigma.items():
            if not s > 0:
                raise ValueError(f"sigma for parameter {k} must be positive, got {s}")


class SentenceParseError(ValueError):
    def __init__(self, message: str, clause_index: int | None = None):
        self.clause_index = clause_index
        where = f" (clause {clause_index})" if clause_index is not None else ""
        super().__init__(message + where)


@lru_cache(maxsize=1)
def load_definitions() -> tuple[GaitParameterDef, ...]:
    text = resources.files("gaitvlm.data").joinpath(f"gait_parameters_v{TABLE_VERSION}.tsv").read_text()
    rows = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.DictReader(rows, delimiter="\t")
    defs = tuple(GaitParameterDef(int(r["id"]), r["description"], (r["unit"] or "").strip())
                 for r in reader)
    assert [d.id for d in defs] == list(range(1, 30))
    return defs


def definitions_by_id() -> dict[int, GaitParameterDef]:
    return {d.id: d for d in load_definitions()}


# ---------------------------------------------------------------- normalisation

def fit_normalization(data: Sequence[GaitParameterSet], healthy_label: int | None = 0,
                      ids: Iterable[int] | None = None) -> NormalizationStats:
    """Fit per-parameter stats on a training split.

    The zero reference is the healthy-control mean; if the split has no healthy
    rows for a parameter, the overall mean is used instead.
    """
    ids = sorted({k for s in data for k in s.values}) if ids is None else sorted(ids)
    mean, sigma, alpha = {}, {}, {}
    for pid in ids:
        vals = np.array([s.values[pid] for s in data if pid in s.values])
        if vals.size < 2:
            raise ValueError(f"parameter {pid}: need at least two training values")
        healthy = np.array([s.values[pid] for s in data
                            if pid in s.values and s.label == healthy_label])
        if healthy.size == 0:
            log.warning("no healthy rows for parameter %d; using the overall mean", pid)
            healthy = vals
        ref = float(healthy.mean())
        sd = float(vals.std(ddof=1))
        if not sd > 0:
            raise ValueError(f"parameter {pid} is constant on the training split")
        spread = max(vals.max() - ref, ref - vals.min()) / sd
        mean[pid], sigma[pid] = ref, sd
        alpha[pid] = V_RANGE / spread if spread > 0 else 1.0
    return NormalizationStats(mean, sigma, alpha)


def normalize_value(v: float, stats: NormalizationStats, pid: int) -> float:
    if pid not in stats.mean:
        raise KeyError(f"no normalisation stats for parameter {pid}")
    z = stats.alpha_scale.get(pid, 1.0) * (v - stats.mean[pid]) / stats.sigma[pid]
    return float(min(V_RANGE, max(-V_RANGE, z)))


def denormalize_value(z: float, stats: NormalizationStats, pid: int) -> float:
    return stats.mean[pid] + z * stats.sigma[pid] / stats.alpha_scale.get(pid, 1.0)


# ---------------------------------------------------------------- correlation

def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1 or x.size < 2:
        raise ValueError("pearson needs two equal-length sequences of length >= 2")
    xc, yc = x - x.mean(), y - y.mean()
    sxx, syy = float(xc @ xc), float(yc @ yc)
    if sxx == 0 or syy == 0:
        raise ValueError("pearson undefined for a zero-variance sequence")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def usable_ids(data: Sequence[GaitParameterSet]) -> list[int]:
    if not data:
        return []
    common = set(data[0].values)
    for s in data[1:]:
        common &= set(s.values)
    out = []
    for pid in sorted(common):
        col = np.array([s.values[pid] for s in data])
        if col.size >= 2 and np.ptp(col) > 0:
            out.append(pid)
    return out


def correlation_matrix(data: Sequence[GaitParameterSet], ids: Sequence[int]) -> np.ndarray:
    n = len(ids)
    r = np.eye(n)
    cols = {pid: [s.values[pid] for s in data] for pid in ids}
    for i in range(n):
        for j in range(i + 1, n):
            r[i, j] = r[j, i] = pearson(cols[ids[i]], cols[ids[j]])
    return r


def select_combinations(data: Sequence[GaitParameterSet], size: int = 4,
                        threshold: float = 0.4) -> list[ParameterCombination]:
    """All ``size``-subsets whose pairwise |r| stays within ``threshold``.

    Grown by backtracking over a compatibility graph, in lexicographic id order.
    """
    if size < 2:
        raise ValueError("size must be at least 2")
    ids = usable_ids(data)
    if len(ids) < size:
        return []
    r = correlation_matrix(data, ids)
    ok = np.abs(r) <= threshold
    n = len(ids)
    out: list[ParameterCombination] = []

    def grow(chosen: list[int], candidates: list[int]):
        if len(chosen) == size:
            out.append(ParameterCombination(tuple(ids[i] for i in chosen)))
            return
        need = size - len(chosen)
        for pos, c in enumerate(candidates):
            if len(candidates) - pos < need:
                break
            grow(chosen + [c], [d for d in candidates[pos + 1:] if ok[c, d]])

    grow([], list(range(n)))
    return out


# ---------------------------------------------------------------- sentences

def format_number(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _clause(d: GaitParameterDef, value: float, first: bool) -> str:
    desc = d.description if first else d.description.lower()
    text = f"{desc} is {format_number(value)}"
    return f"{text} {d.unit}" if d.unit else text


def render_sentence(combo: ParameterCombination | Sequence[int],
                    values: GaitParameterSet | Mapping[int, float]) -> str:
    ids = combo.ids if isinstance(combo, ParameterCombination) else tuple(combo)
    vals = values.values if isinstance(values, GaitParameterSet) else values
    defs = definitions_by_id()
    clauses = []
    for k, pid in enumerate(ids):
        if pid not in vals:
            raise KeyError(f"no value for parameter {pid}")
        clauses.append(_clause(defs[pid], vals[pid], first=k == 0))
    return ", ".join(clauses) + "."


_CLAUSE_RE = re.compile(r"^(?P<desc>.+?) is (?P<num>-?\d+(?:\.\d+)?)(?: (?P<unit>\S+))?$")


def _description_index() -> dict[str, GaitParameterDef]:
    return {d.description.lower(): d for d in load_definitions()}


def parse_sentence(text: str, size: int | None = 4) -> tuple[ParameterCombination, dict[int, float]]:
    """Invert :func:`render_sentence`; clause order does not matter."""
    text = text.strip()
    if not text:
        raise SentenceParseError("empty sentence")
    if not text.endswith("."):
        raise SentenceParseError("sentence must end with '.'")
    clauses = text[:-1].split(", ")
    if size is not None and len(clauses) != size:
        raise SentenceParseError(f"expected {size} clauses, found {len(clauses)}")
    index = _description_index()
    values: dict[int, float] = {}
    for k, clause in enumerate(clauses):
        m = _CLAUSE_RE.match(clause)
        if not m:
            raise SentenceParseError(f"malformed clause {clause!r}", k)
        d = index.get(m["desc"].lower())
        if d is None:
            raise SentenceParseError(f"unknown parameter description {m['desc']!r}", k)
        unit = m["unit"] or ""
        if unit != d.unit:
            raise SentenceParseError(f"unit {unit!r} does not match parameter {d.id} ({d.unit!r})", k)
        if d.id in values:
            raise SentenceParseError(f"parameter {d.id} repeated", k)
        try:
            values[d.id] = float(m["num"])
        except ValueError:
            raise SentenceParseError(f"malformed number {m['num']!r}", k) from None
    return ParameterCombination(tuple(values)), values


# ---------------------------------------------------------------- tabular I/O

def write_parameter_table(path, data: Sequence[GaitParameterSet]) -> None:
    """CSV with header ``subject_id,label,p1..p29``; missing values left empty."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "label"] + [f"p{i}" for i in range(1, 30)])
        for s in data:
            w.writerow([s.subject_id, s.label] +
                       [repr(s.values[i]) if i in s.values else "" for i in range(1, 30)])


def read_parameter_table(path) -> list[GaitParameterSet]:
    out = []
    with Path(path).open(newline="") as fh:
        for row in csv.DictReader(fh):
            vals = {i: float(row[f"p{i}"]) for i in range(1, 30) if row.get(f"p{i}")}
            out.append(GaitParameterSet(vals, row["subject_id"], int(row["label"])))
    return out
