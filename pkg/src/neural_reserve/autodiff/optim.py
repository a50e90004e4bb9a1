"""AdamW with bias correction and decoupled weight decay."""

from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamHyper:
    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class AdamState:
    """First/second moments keyed like the parameter mapping."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, hyper: AdamHyper) -> None:
    """Update ``params`` (name -> Tensor) in place from ``grads`` (name -> array).

    Parameters without an entry in ``grads`` are left untouched and their
    moments are not advanced.
    """
    if hyper.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter {name} {p.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - hyper.beta1 ** t
    bc2 = 1.0 - hyper.beta2 ** t
    for name, g in grads.items():
        p = params[name]
        w = p.data
        if name not in state.m:
            state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        m, v = state.m[name], state.v[name]
        m *= hyper.beta1
        m += (1.0 - hyper.beta1) * g
        v *= hyper.beta2
        v += (1.0 - hyper.beta2) * (g * g)
        if hyper.weight_decay:
            w *= 1.0 - hyper.lr * hyper.weight_decay
        w -= (hyper.lr / bc1) * m / (np.sqrt(v / bc2) + hyper.eps)
