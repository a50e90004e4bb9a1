"""Head importance from fine-tuning gradients, plus a leave-one-out oracle."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .evaluation import log_ppl
from .masking import MaskSpec
from .model.config import HeadId
from .model.gpt2 import Model
from .training import chunk_sequences, iterate_windows, window_gradients

logger = logging.getLogger(__name__)

NORMS = ("l1", "l2")
NORMALIZATIONS = ("none", "layer")


@dataclass
class FineTuneHyper:
    lr: float = 5e-5
    epochs: int = 3
    accumulation: int = 8
    max_length: int = 1024
    seed: int = 42
    weight_decay: float = 0.01
    norm: str = "l1"
    normalize: str = "none"
    shuffle: bool = True

    def __post_init__(self):
        if self.lr <= 0 or self.epochs <= 0 or self.accumulation <= 0 or self.max_length < 2:
            raise ValueError("learning rate, epochs, accumulation and max_length must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be non-negative")
        if self.norm not in NORMS:
            raise ValueError(f"norm must be one of {NORMS}")
        if self.normalize not in NORMALIZATIONS:
            raise ValueError(f"normalize must be one of {NORMALIZATIONS}")


def config_fingerprint(config) -> str:
    blob = json.dumps(config.to_dict(), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class HeadRanking:
    """Heads ordered from most to least important.

    Ties in score are broken by (layer, head) so the order is total.
    """

    entries: list
    n_layer: int
    n_head: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        heads = [h for h, _ in self.entries]
        if len(heads) != self.n_layer * self.n_head or len(set(heads)) != len(heads):
            raise ValueError("ranking must list every head exactly once")

    @classmethod
    def from_scores(cls, scores, metadata=None) -> HeadRanking:
        scores = np.asarray(scores, dtype=np.float64)
        n_layer, n_head = scores.shape
        items = [(HeadId(l, h), float(scores[l, h])) for l in range(n_layer) for h in range(n_head)]
        items.sort(key=lambda e: (-e[1], e[0].layer, e[0].head))
        return cls(items, n_layer, n_head, dict(metadata or {}))

    def order(self) -> list:
        return [h for h, _ in self.entries]

    def __len__(self):
        return len(self.entries)

    def score_grid(self) -> np.ndarray:
        grid = np.zeros((self.n_layer, self.n_head))
        for (l, h), s in self.entries:
            grid[l, h] = s
        return grid

    def rank_grid(self) -> np.ndarray:
        """``[layer, head]`` -> rank, 1 being the most important head."""
        grid = np.zeros((self.n_layer, self.n_head), dtype=np.int64)
        for rank, ((l, h), _) in enumerate(self.entries, 1):
            grid[l, h] = rank
        return grid

    def to_dict(self) -> dict:
        return {
            "n_layer": self.n_layer,
            "n_head": self.n_head,
            "metadata": self.metadata,
            "heads": [{"layer": h.layer, "head": h.head, "score": s, "rank": r}
                      for r, (h, s) in enumerate(self.entries, 1)],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> HeadRanking:
        rows = sorted(data["heads"], key=lambda r: r["rank"])
        entries = [(HeadId(r["layer"], r["head"]), float(r["score"])) for r in rows]
        return cls(entries, data["n_layer"], data["n_head"], data.get("metadata", {}))

    @classmethod
    def from_json(cls, text: str) -> HeadRanking:
        return cls.from_dict(json.loads(text))

    def grid_csv(self, header_lines=()) -> str:
        buf = io.StringIO()
        for line in header_lines:
            buf.write(f"# {line}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer"] + [f"head_{h}" for h in range(self.n_head)])
        for l, row in enumerate(self.rank_grid()):
            writer.writerow([l] + [int(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_grid_csv(cls, text: str, metadata=None) -> HeadRanking:
        rows = [r for r in csv.reader(line for line in text.splitlines() if not line.startswith("#"))]
        body = [list(map(int, r[1:])) for r in rows[1:] if r]
        ranks = np.asarray(body, dtype=np.int64)
        total = ranks.size
        if sorted(ranks.ravel().tolist()) != list(range(1, total + 1)):
            raise ValueError("rank grid must contain each rank 1..H exactly once")
        # Scores are not stored in the grid; a descending proxy keeps the order.
        return cls.from_scores(total + 1 - ranks, metadata)


def head_gradient_scores(grads: dict, model: Model, norm: str = "l1") -> np.ndarray:
    """Per-head magnitude of the query/key/value column blocks and output-projection row block."""
    cfg = model.config
    power = 1 if norm == "l1" else 2
    out = np.zeros((cfg.n_layer, cfg.n_head))
    for i in range(cfg.n_layer):
        g_attn = grads.get(f"h.{i}.attn.c_attn.weight")
        g_proj = grads.get(f"h.{i}.attn.c_proj.weight")
        if g_attn is None or g_proj is None:
            continue
        row = kernels.head_grad_scores(np.ascontiguousarray(g_attn), np.ascontiguousarray(g_proj),
                                       cfg.n_head, power)
        out[i] = row if power == 1 else np.sqrt(row)
    return out


def _token_lists(data) -> list:
    return [list(getattr(d, "tokens", d)) for d in data]


def fine_tune_rank(model: Model, train, hyper: FineTuneHyper | None = None,
                   return_model: bool = False):
    """Fine-tune a copy of ``model`` on ``train`` and rank heads by gradient magnitude.

    ``train`` holds token sequences (or objects with a ``tokens`` field).
    At every optimizer step the per-head gradient norm is computed on the
    step's accumulated gradient and summed over all steps. The input model
    is not modified.
    """
    hyper = hyper or FineTuneHyper()
    seqs = chunk_sequences(_token_lists(train), min(hyper.max_length, model.config.context_length))
    if not seqs:
        raise ValueError("empty training set")
    work = model.copy(requires_grad=True)
    state = ad.AdamState()
    adam = ad.AdamHyper(lr=hyper.lr, weight_decay=hyper.weight_decay)
    scores = np.zeros((model.config.n_layer, model.config.n_head))
    losses = []
    for epoch, window in iterate_windows(len(seqs), hyper.accumulation, hyper.epochs, hyper.seed,
                                         hyper.shuffle):
        grads, loss = window_gradients(work, [seqs[i] for i in window])
        scores += head_gradient_scores(grads, work, hyper.norm)
        ad.adamw_step(work.params, grads, state, adam)
        losses.append(loss)
        logger.debug("epoch %d step %d loss %.5f", epoch, state.step, loss)
    if hyper.normalize == "layer":
        norms = np.sqrt((scores ** 2).sum(axis=1, keepdims=True))
        scores = np.where(norms > 0, scores / np.where(norms > 0, norms, 1.0), 0.0)
    meta = {
        "config_fingerprint": config_fingerprint(model.config),
        "hyper": asdict(hyper),
        "seed": hyper.seed,
        "optimizer_steps": state.step,
        "n_sequences": len(seqs),
        "score": f"sum over steps of per-head {hyper.norm} gradient norm",
        "normalize": hyper.normalize,
        "final_loss": losses[-1],
    }
    ranking = HeadRanking.from_scores(scores, meta)
    if return_model:
        for p in work.params.values():
            p.requires_grad = False
        return ranking, work
    return ranking


def leave_one_out_importance(model: Model, data, prepend_id=None) -> np.ndarray:
    """``[layer, head]`` change in mean log PPL when only that head is masked."""
    seqs = _token_lists(data)
    if not seqs:
        raise ValueError("empty data")

    def mean_lp(spec):
        return float(np.mean([log_ppl(model, spec, s, prepend_id=prepend_id).log_ppl for s in seqs]))

    baseline = mean_lp(None)
    cfg = model.config
    out = np.zeros((cfg.n_layer, cfg.n_head))
    for head in cfg.heads():
        out[head] = mean_lp(MaskSpec(masked_heads=frozenset([head]))) - baseline
    return out
