"""Mask specifications: bidirectional head schedules and embedding-column schedules.

Counts use floor rounding: ``k = floor(pct * H / 100)`` heads or
``c = floor(pct * d / 100)`` columns. A head mask takes ``ceil(k/2)`` heads
from the most-important end of a ranking and ``floor(k/2)`` from the
least-important end; a column mask takes the rightmost ``c`` columns.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .model.config import HeadId

HEAD_SWEEP = "head-sweep"
EMBEDDING_SWEEP = "embedding-sweep"
ODD_SPLIT_RULE = "extra head from the most-important end"

# Reference (d_model, pct) -> masked-column counts for the four GPT-2 sizes.
REPORTED_COLUMN_COUNTS = {
    (768, 93): 714,
    (1024, 66): 675,
    (1280, 87): 1113,
    (1600, 66): 1050,
}


class ReportedCountMismatch(UserWarning):
    """The floor rule disagrees with a reported masked-column count."""


@dataclass(frozen=True)
class MaskSpec:
    masked_heads: frozenset = frozenset()
    masked_columns: frozenset = frozenset()
    pct: int = 0
    kind: str = HEAD_SWEEP
    metadata: dict = field(default_factory=dict, compare=False, hash=False)

    @property
    def masked_count(self) -> int:
        return len(self.masked_heads) if self.kind == HEAD_SWEEP else len(self.masked_columns)

    def is_identity(self) -> bool:
        return not self.masked_heads and not self.masked_columns

    def to_dict(self) -> dict:
        cols = sorted(self.masked_columns)
        out = {
            "kind": self.kind,
            "pct": self.pct,
            "masked_heads": [list(h) for h in sorted(self.masked_heads)],
            "masked_columns": _ranges(cols),
        }
        if self.metadata:
            out["metadata"] = self.metadata
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> MaskSpec:
        heads = frozenset(HeadId(int(l), int(h)) for l, h in data.get("masked_heads", []))
        cols = set()
        for start, stop in data.get("masked_columns", []):
            cols.update(range(int(start), int(stop)))
        return cls(masked_heads=heads, masked_columns=frozenset(cols), pct=int(data.get("pct", 0)),
                   kind=data.get("kind", HEAD_SWEEP), metadata=data.get("metadata", {}))

    @classmethod
    def from_json(cls, text: str) -> MaskSpec:
        return cls.from_dict(json.loads(text))


def _ranges(sorted_values) -> list:
    """Half-open ``[start, stop)`` runs covering ``sorted_values``."""
    runs = []
    for v in sorted_values:
        if runs and runs[-1][1] == v:
            runs[-1][1] = v + 1
        else:
            runs.append([v, v + 1])
    return runs


def _check_pct(pct) -> int:
    if isinstance(pct, bool) or int(pct) != pct or not 0 <= pct <= 100:
        raise ValueError(f"pct must be an integer percentage in [0, 100], got {pct!r}")
    return int(pct)


def head_count(pct: int, total_heads: int) -> int:
    return _check_pct(pct) * total_heads // 100


def column_count(pct: int, d_model: int) -> int:
    return _check_pct(pct) * d_model // 100


def bidirectional_selection(ranking, pct: int) -> MaskSpec:
    """Mask ``pct`` % of heads split between both ends of ``ranking``.

    ``ranking`` is a :class:`~neural_reserve.importance.HeadRanking` or any
    sequence of HeadIds ordered most- to least-important.
    """
    order = list(ranking.order() if hasattr(ranking, "order") else ranking)
    total = len(order)
    k = head_count(pct, total)
    if k > total:
        raise ValueError(f"cannot mask {k} of {total} heads")
    top = (k + 1) // 2
    bottom = k // 2
    chosen = order[:top] + (order[total - bottom:] if bottom else [])
    return MaskSpec(masked_heads=frozenset(HeadId(*h) for h in chosen), pct=int(pct),
                    kind=HEAD_SWEEP,
                    metadata={"k": k, "top": top, "bottom": bottom, "odd_split": ODD_SPLIT_RULE})


def embedding_selection(d_model: int, pct: int) -> MaskSpec:
    """Mask the rightmost ``floor(pct * d_model / 100)`` token-embedding columns."""
    c = column_count(pct, d_model)
    reported = REPORTED_COLUMN_COUNTS.get((d_model, int(pct)))
    meta = {"c": c}
    if reported is not None and reported != c:
        meta["reported_count"] = reported
        warnings.warn(
            f"floor rule gives {c} of {d_model} columns at {pct}%, reported count is {reported}",
            ReportedCountMismatch,
            stacklevel=2,
        )
    return MaskSpec(masked_columns=frozenset(range(d_model - c, d_model)), pct=int(pct),
                    kind=EMBEDDING_SWEEP, metadata=meta)


def sweep_pcts(step: int, max_pct: int = 100) -> list:
    if isinstance(step, bool) or int(step) != step or not 0 < step <= max_pct <= 100:
        raise ValueError(f"need 0 < step <= max <= 100, got step={step}, max={max_pct}")
    return list(range(0, int(max_pct) + 1, int(step)))


def sweep_schedule(source, step: int = 1, max_pct: int = 100) -> list:
    """Nested MaskSpecs at pct = 0, step, 2*step, ..., <= max_pct.

    ``source`` is a head ranking (head sweep) or an integer ``d_model``
    (embedding sweep).
    """
    pcts = sweep_pcts(step, max_pct)
    if isinstance(source, int) and not isinstance(source, bool):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", ReportedCountMismatch)
            specs = [embedding_selection(source, p) for p in pcts]
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)
        return specs
    order = list(source.order() if hasattr(source, "order") else source)
    return [bidirectional_selection(order, p) for p in pcts]


def random_head_selection(heads, pct: int, seed: int) -> MaskSpec:
    """Uniformly random head mask of the same size (baseline, not the ranked method)."""
    heads = list(heads)
    k = head_count(pct, len(heads))
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(heads))[:k]
    return MaskSpec(masked_heads=frozenset(HeadId(*heads[i]) for i in idx), pct=int(pct),
                    kind=HEAD_SWEEP, metadata={"k": k, "random_seed": seed})
