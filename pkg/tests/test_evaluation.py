import math
import warnings
from fractions import Fraction

import numpy as np
import pytest

from neural_reserve.evaluation import (
    EncodedText,
    acc_at_eer,
    as_scores,
    log_ppl,
    mean_log_ppl,
    paired_scores,
    read_scores_csv,
    roc_auc,
    scores_csv,
    windows,
)
from neural_reserve.masking import MaskSpec
from neural_reserve.model import HeadId, Model, forward

from helpers import tiny_config


def brute_auc(values, labels) -> Fraction:
    pos = [v for v, y in zip(values, labels) if y]
    neg = [v for v, y in zip(values, labels) if not y]
    wins = sum(Fraction(1) if p > n else Fraction(1, 2) if p == n else 0 for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


def brute_eer(values, labels):
    """Exhaustive: every partition reachable by some threshold, predict positive iff score > t."""
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    best = None
    for t in [-math.inf] + sorted(set(values)):
        fp = sum(1 for v, y in zip(values, labels) if v > t and not y)
        fn = sum(1 for v, y in zip(values, labels) if v <= t and y)
        gap = abs(Fraction(fp, n_neg) - Fraction(fn, n_pos))
        correct = len(values) - fp - fn
        key = (gap, -correct, t)
        if best is None or key < best[0]:
            best = (key, correct, Fraction(fp, n_neg), Fraction(fn, n_pos))
    return best[1] / len(values), best[2], best[3]


def _fixture(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(4, 40))
    labels = rng.random(n) < rng.uniform(0.2, 0.8)
    labels[0], labels[1] = True, False
    if seed % 2:
        values = rng.integers(1, 6, size=n).astype(float)  # many ties
    else:
        values = np.exp(rng.normal(size=n))
    return values, labels


@pytest.mark.parametrize("seed", range(50))
def test_auc_matches_pair_counting(seed):
    values, labels = _fixture(seed)
    result = roc_auc(as_scores(values, labels))
    want = brute_auc(list(values), list(labels))
    assert result.auc == float(want)
    assert result.extras["auc_trapezoid"] == float(want)


@pytest.mark.parametrize("seed", range(50))
def test_acc_at_eer_matches_exhaustive_enumeration(seed):
    values, labels = _fixture(seed)
    result = roc_auc(as_scores(values, labels))
    acc, fpr, fnr = brute_eer(list(values), list(labels))
    assert result.acc == acc
    assert (result.fpr, result.fnr) == (float(fpr), float(fnr))
    _, acc_only = acc_at_eer(as_scores(values, labels))
    assert acc_only == acc


def test_roc_is_monotone():
    values, labels = _fixture(3)
    roc = roc_auc(as_scores(values, labels)).roc
    assert roc[0][:2] == (0.0, 0.0) and roc[-1][:2] == (1.0, 1.0)
    for (f0, t0, _), (f1, t1, _) in zip(roc, roc[1:]):
        assert f1 >= f0 and t1 >= t0


def test_perfectly_separable():
    res = roc_auc(as_scores([1.0, 1.1, 1.2, 3.0, 3.5, 4.0], [0, 0, 0, 1, 1, 1]))
    assert res.auc == 1.0 and res.acc == 1.0
    assert 1.2 < res.eer_threshold < 3.0


def test_all_scores_equal_gives_chance():
    res = roc_auc(as_scores([1.0] * 6, [0, 1, 0, 1, 0, 1]))
    assert res.auc == 0.5
    assert res.acc == 0.5


def test_single_class_rejected():
    with pytest.raises(ValueError):
        roc_auc(as_scores([1.0, 2.0], [1, 1]))


# perplexity -------------------------------------------------------------------


@pytest.fixture(scope="module")
def model64():
    cfg = tiny_config(n_layer=2, n_head=2, d_model=8, d_vocab=13, context_length=6)
    return Model.random(cfg, seed=9, dtype=np.float64, std=0.3)


def _oracle_log_ppl(model, tokens):
    # Independent route: log-softmax of the logits, per non-overlapping window.
    total, count = 0.0, 0
    for i in range(0, len(tokens), model.config.context_length):
        win = tokens[i:i + model.config.context_length]
        if len(win) < 2:
            continue
        z = forward(model, win).data[:-1]
        logp = z - np.log(np.exp(z - z.max(1, keepdims=True)).sum(1, keepdims=True)) - z.max(1, keepdims=True)
        total -= logp[np.arange(len(win) - 1), win[1:]].sum()
        count += len(win) - 1
    return total / count


@pytest.mark.parametrize("length", [2, 5, 6, 7, 13, 20])
def test_log_ppl_matches_oracle(model64, length):
    tokens = list(np.random.default_rng(length).integers(0, 13, size=length))
    got = log_ppl(model64, None, tokens)
    assert got.log_ppl == pytest.approx(_oracle_log_ppl(model64, tokens), rel=1e-12)
    assert got.ppl == pytest.approx(math.exp(got.log_ppl))


def test_prepended_token_scores_first_position(model64):
    tokens = [3, 4, 5]
    got = log_ppl(model64, None, tokens, prepend_id=12)
    assert got.log_ppl == pytest.approx(_oracle_log_ppl(model64, [12, 3, 4, 5]), rel=1e-12)
    assert got.n_tokens == 4


def test_windows_are_non_overlapping():
    assert windows(list(range(7)), 3) == [[0, 1, 2], [3, 4, 5], [6]]


def test_too_short_rejected(model64):
    with pytest.raises(ValueError):
        log_ppl(model64, None, [1])


def _texts():
    rng = np.random.default_rng(4)
    return [EncodedText(f"t{i}", "dementia" if i % 2 else "control",
                        tuple(int(x) for x in rng.integers(0, 13, size=9))) for i in range(8)]


def test_zero_mask_scores_are_one(model64):
    scores = paired_scores(model64, model64, MaskSpec(), _texts())
    assert [s.score for s in scores] == [1.0] * 8
    res = roc_auc(scores)
    assert res.auc == 0.5


def test_masked_scores_use_control_cache(model64):
    spec = MaskSpec(masked_heads=frozenset([HeadId(0, 0)]))
    cache = {}
    a = paired_scores(model64, model64, spec, _texts(), control_cache=cache)
    assert len(cache) == 8
    b = paired_scores(model64, model64, spec, _texts(), control_cache=cache)
    assert [s.score for s in a] == [s.score for s in b]
    assert any(s.score != 1.0 for s in a)


def test_unscorable_text_skipped_with_warning(model64):
    texts = _texts() + [EncodedText("short", "control", (1,))]
    with pytest.warns(UserWarning, match="short"):
        scores = paired_scores(model64, model64, MaskSpec(), texts)
    assert len(scores) == 8


def test_mean_log_ppl_population_std(model64):
    mean, std, results = mean_log_ppl(model64, None, _texts())
    values = [r.log_ppl for r in results]
    assert mean == pytest.approx(np.mean(values), rel=1e-14)
    assert std == pytest.approx(np.std(values), rel=1e-12)


def test_scores_csv_roundtrip(tmp_path, model64):
    scores = paired_scores(model64, model64, MaskSpec(masked_heads=frozenset([HeadId(1, 1)])), _texts())
    path = tmp_path / "s.csv"
    path.write_text(scores_csv(scores, ["provenance line"]), encoding="utf-8")
    assert path.read_text().startswith("# provenance line\n")
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        back = read_scores_csv(path)
    assert back == scores
