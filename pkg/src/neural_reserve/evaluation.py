"""Perplexity, paired-perplexity scores and ROC-based classification metrics.

Log perplexities are natural-log means of per-token negative
log-likelihood. The paired score of a transcript is
``PPL_control / PPL_dementia``, computed as ``exp(logPPL_c - logPPL_d)``;
higher means more dementia-like, and "dementia" is the positive class.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .model.gpt2 import Model, forward

logger = logging.getLogger(__name__)

POSITIVE = "dementia"
NEGATIVE = "control"
SCORE_COLUMNS = ("transcript_id", "label", "log_ppl_control", "log_ppl_dementia", "score")


@dataclass(frozen=True)
class PplResult:
    transcript_id: str
    n_tokens: int
    log_ppl: float

    @property
    def ppl(self) -> float:
        return math.exp(self.log_ppl)


@dataclass(frozen=True)
class EncodedText:
    id: str
    label: str
    tokens: tuple


@dataclass(frozen=True)
class PairedScore:
    transcript_id: str
    label: str
    log_ppl_control: float
    log_ppl_dementia: float

    @property
    def score(self) -> float:
        return math.exp(self.log_ppl_control - self.log_ppl_dementia)


@dataclass
class ClassifierResult:
    roc: list
    auc: float
    eer_threshold: float
    acc: float
    fpr: float
    fnr: float
    n_pos: int
    n_neg: int
    extras: dict = field(default_factory=dict)

    @property
    def eer(self) -> float:
        return 0.5 * (self.fpr + self.fnr)

    def to_dict(self) -> dict:
        return {
            "auc": self.auc, "acc": self.acc, "eer_threshold": self.eer_threshold,
            "fpr_at_eer": self.fpr, "fnr_at_eer": self.fnr, "eer": self.eer,
            "n_pos": self.n_pos, "n_neg": self.n_neg,
            "roc": [list(p) for p in self.roc],
        }


def encode_transcripts(transcripts, vocab, join_with: str = " ") -> list:
    return [EncodedText(t.id, t.label, tuple(vocab.encode(t.text(join_with)))) for t in transcripts]


def windows(tokens, size: int) -> list:
    """Non-overlapping windows of at most ``size`` tokens."""
    return [tokens[i:i + size] for i in range(0, len(tokens), size)]


def sequence_nll(model: Model, tokens, spec=None) -> tuple[float, int]:
    """Summed next-token NLL and number of predicted positions, window by window."""
    total = 0.0
    count = 0
    for win in windows(list(tokens), model.config.context_length):
        if len(win) < 2:
            continue
        logits = forward(model, win, spec).data
        nll, _ = kernels.nll_rows(np.ascontiguousarray(logits[:-1]), np.asarray(win[1:], dtype=np.int64))
        total += float(np.sum(nll, dtype=np.float64))
        count += len(win) - 1
    return total, count


def log_ppl(model: Model, spec, tokens, transcript_id: str = "", prepend_id=None) -> PplResult:
    """Mean next-token NLL of ``tokens`` (positions 2..T) under ``model`` masked by ``spec``.

    Args:
        prepend_id: Optional token id (for example end-of-text) placed before
            the sequence so the first real token is also scored.
    """
    tokens = list(tokens)
    if prepend_id is not None:
        tokens = [int(prepend_id)] + tokens
    if len(tokens) < 2:
        raise ValueError(f"{transcript_id or 'sequence'}: need at least 2 tokens, got {len(tokens)}")
    total, count = sequence_nll(model, tokens, spec)
    if count == 0:
        raise ValueError(f"{transcript_id or 'sequence'}: no scorable positions")
    value = total / count
    if not math.isfinite(value):
        raise FloatingPointError(f"{transcript_id}: non-finite log perplexity")
    return PplResult(transcript_id, len(tokens), value)


def mean_log_ppl(model: Model, spec, texts, prepend_id=None) -> tuple[float, float, list]:
    """Mean and population std of per-text log PPL, plus the individual results."""
    results = [log_ppl(model, spec, t.tokens, t.id, prepend_id) for t in texts]
    values = np.array([r.log_ppl for r in results], dtype=np.float64)
    return float(values.mean()), float(values.std()), results


def control_log_ppls(model: Model, texts, prepend_id=None) -> dict:
    out = {}
    for t in texts:
        try:
            out[t.id] = log_ppl(model, None, t.tokens, t.id, prepend_id).log_ppl
        except ValueError as exc:
            warnings.warn(f"skipping {t.id}: {exc}")
    return out


def paired_scores(control: Model, dementia: Model, spec, texts, prepend_id=None,
                  control_cache: dict | None = None) -> list:
    """One :class:`PairedScore` per scorable text; unscorable texts are skipped with a warning."""
    cache = control_cache if control_cache is not None else {}
    out = []
    for t in texts:
        try:
            if t.id not in cache:
                cache[t.id] = log_ppl(control, None, t.tokens, t.id, prepend_id).log_ppl
            lc = cache[t.id]
            ld = log_ppl(dementia, spec, t.tokens, t.id, prepend_id).log_ppl
        except ValueError as exc:
            warnings.warn(f"skipping {t.id}: {exc}")
            logger.warning("skipping %s: %s", t.id, exc)
            continue
        out.append(PairedScore(t.id, t.label, lc, ld))
    return out


# metrics -------------------------------------------------------------------


def _split(scores) -> tuple[np.ndarray, np.ndarray]:
    values = np.array([s.score for s in scores], dtype=np.float64)
    labels = np.array([s.label == POSITIVE for s in scores], dtype=bool)
    unknown = {s.label for s in scores} - {POSITIVE, NEGATIVE}
    if unknown:
        raise ValueError(f"labels must be {POSITIVE!r} or {NEGATIVE!r}, got {sorted(unknown)}")
    if labels.all() or not labels.any():
        raise ValueError("both classes must be present")
    return values, labels


def as_scores(values, labels) -> list:
    """Wrap raw ``(score, is_dementia)`` arrays as PairedScores (log PPL_d fixed at 0)."""
    out = []
    for i, (v, y) in enumerate(zip(values, labels)):
        out.append(PairedScore(str(i), POSITIVE if y else NEGATIVE, math.log(v), 0.0))
    return out


def auc_rank(values: np.ndarray, labels: np.ndarray) -> float:
    """Mann-Whitney AUC with ties counted one half."""
    order = np.argsort(values, kind="mergesort")
    sorted_vals = values[order]
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    n = len(values)
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = n - n_pos
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_points(values: np.ndarray, labels: np.ndarray) -> list:
    """``(fpr, tpr, threshold)`` with "positive iff score >= threshold", thresholds descending."""
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    pts = [(0.0, 0.0, math.inf)]
    counts = [(0, 0)]
    for thr in np.unique(values)[::-1]:
        pred = values >= thr
        tp = int((pred & labels).sum())
        fp = int((pred & ~labels).sum())
        pts.append((fp / n_neg, tp / n_pos, float(thr)))
        counts.append((fp, tp))
    return pts, counts


def auc_trapezoid(counts, n_pos: int, n_neg: int) -> float:
    area2 = 0
    for (fp0, tp0), (fp1, tp1) in zip(counts, counts[1:]):
        area2 += (fp1 - fp0) * (tp0 + tp1)
    return area2 / (2.0 * n_pos * n_neg)


def eer_candidates(values: np.ndarray) -> list:
    u = np.unique(values)
    out = [-math.inf]
    for a, b in zip(u, u[1:]):
        mid = a + (b - a) / 2.0
        if not a <= mid < b:
            mid = a
        out.append(float(mid))
    out.append(math.inf)
    return out


def acc_at_eer(scores) -> tuple[float, float]:
    """Threshold minimising |FPR - FNR| ("positive iff score > threshold") and its ACC.

    Ties prefer the higher accuracy, then the lower threshold.
    """
    values, labels = _split(scores)
    thr, acc, _, _ = _eer_search(values, labels)
    return thr, acc


def _eer_search(values: np.ndarray, labels: np.ndarray):
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    best = None
    for thr in eer_candidates(values):
        pred = values > thr
        fp = int((pred & ~labels).sum())
        fn = int((~pred & labels).sum())
        correct = len(labels) - fp - fn
        # |FP/N - FN/P| scaled by N*P stays an exact integer.
        gap = abs(fp * n_pos - fn * n_neg)
        key = (gap, -correct, thr)
        if best is None or key < best[0]:
            best = (key, thr, correct, fp, fn)
    _, thr, correct, fp, fn = best
    return thr, correct / len(labels), fp / n_neg, fn / n_pos


def roc_auc(scores) -> ClassifierResult:
    values, labels = _split(scores)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    pts, counts = roc_points(values, labels)
    auc = auc_rank(values, labels)
    thr, acc, fpr, fnr = _eer_search(values, labels)
    return ClassifierResult(roc=pts, auc=auc, eer_threshold=thr, acc=acc, fpr=fpr, fnr=fnr,
                            n_pos=n_pos, n_neg=n_neg,
                            extras={"auc_trapezoid": auc_trapezoid(counts, n_pos, n_neg)})


# serialisation -------------------------------------------------------------


def _fmt(x: float) -> str:
    return repr(float(x))


def scores_csv(scores, header_lines=()) -> str:
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SCORE_COLUMNS)
    for s in scores:
        writer.writerow([s.transcript_id, s.label, _fmt(s.log_ppl_control),
                         _fmt(s.log_ppl_dementia), _fmt(s.score)])
    return buf.getvalue()


def read_scores_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        rows = [line for line in fh if not line.startswith("#")]
    out = []
    for rec in csv.DictReader(rows):
        out.append(PairedScore(rec["transcript_id"], rec["label"],
                               float(rec["log_ppl_control"]), float(rec["log_ppl_dementia"])))
    return out
