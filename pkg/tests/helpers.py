"""Shared test utilities: finite differences, synthetic corpora and tiny models."""

from pathlib import Path

import numpy as np

from neural_reserve import autodiff as ad
from neural_reserve.model import Model, ModelConfig
from neural_reserve.tokenizer import byte_level_vocab
from neural_reserve.training import train_lm

DATA = Path(__file__).parent / "data"

WORDS = ("the boy girl mother takes cookie jar falls stool water sink dish window "
         "plate runs over").split()


def rel_err(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def fd_check(build_loss, arrays, probes: int = 20, eps: float = 1e-6, seed: int = 0) -> list:
    """Analytic vs central-difference gradients at ``probes`` random coordinates.

    ``build_loss(*tensors)`` must return a scalar Tensor. Returns the list of
    ``(analytic, numeric, relative error)`` per probe.
    """
    tensors = [ad.Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with ad.Graph() as g:
        loss = build_loss(*tensors)
        grads = g.backward(loss)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(probes):
        i = int(rng.integers(len(tensors)))
        t = tensors[i]
        idx = tuple(int(rng.integers(s)) for s in t.shape)
        orig = t.data[idx]
        t.data[idx] = orig + eps
        up = float(build_loss(*tensors).data)
        t.data[idx] = orig - eps
        down = float(build_loss(*tensors).data)
        t.data[idx] = orig
        numeric = (up - down) / (2 * eps)
        analytic = float(grads[t][idx]) if t in grads else 0.0
        out.append((analytic, numeric, rel_err(analytic, numeric)))
    return out


def weighted_sum(t, seed: int = 1):
    """Scalarise a tensor with fixed random weights so every output element matters."""
    w = np.random.default_rng(seed).normal(size=t.shape)
    return ad.sum_all(ad.mul(t, w))


def synthetic_sentence(rng, words=WORDS) -> str:
    phrase = " ".join(rng.choice(words, size=int(rng.integers(3, 6))))
    return f"{phrase}. {phrase}."


def synthetic_corpus(seed: int, n: int, words=WORDS) -> list:
    rng = np.random.default_rng(seed)
    return [synthetic_sentence(rng, words) for _ in range(n)]


def tiny_config(**kw) -> ModelConfig:
    base = dict(n_layer=2, n_head=4, d_model=32, d_vocab=256, context_length=96)
    base.update(kw)
    return ModelConfig(**base)


def train_tiny(seed: int = 0, steps: int = 600, n_train: int = 400, words=WORDS, config=None):
    """Byte-level tiny GPT-2 trained on repeated-phrase sentences."""
    vocab = byte_level_vocab()
    train = [vocab.encode(s) for s in synthetic_corpus(seed, n_train, words)]
    model = Model.random(config or tiny_config(), seed=seed)
    losses = train_lm(model, train, steps=steps, lr=3e-3, batch=8, seed=seed)
    return model, train, losses

OTHER_WORDS = ("a dog cat sits on mat under red blue car tree house bird sings sun "
               "road").split()
