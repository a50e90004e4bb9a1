"""GPT-2 forward pass with per-head gates and embedding-column masking."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor
from .config import ModelConfig
from .container import ContainerError, read_container, write_safetensors

# Checkpoint tensors that are buffers or duplicates of tied weights.
_IGNORED_SUFFIXES = (".attn.bias", ".attn.masked_bias", "lm_head.weight")
_STRIP_PREFIXES = ("transformer.",)

MASK_MODES = ("tied", "input")


def expected_shapes(config: ModelConfig) -> dict:
    d, f = config.d_model, config.d_mlp
    shapes = {
        "wte.weight": (config.d_vocab, d),
        "wpe.weight": (config.context_length, d),
        "ln_f.weight": (d,),
        "ln_f.bias": (d,),
    }
    for i in range(config.n_layer):
        p = f"h.{i}."
        shapes.update({
            p + "ln_1.weight": (d,),
            p + "ln_1.bias": (d,),
            p + "attn.c_attn.weight": (d, 3 * d),
            p + "attn.c_attn.bias": (3 * d,),
            p + "attn.c_proj.weight": (d, d),
            p + "attn.c_proj.bias": (d,),
            p + "ln_2.weight": (d,),
            p + "ln_2.bias": (d,),
            p + "mlp.c_fc.weight": (d, f),
            p + "mlp.c_fc.bias": (f,),
            p + "mlp.c_proj.weight": (f, d),
            p + "mlp.c_proj.bias": (d,),
        })
    return shapes


@dataclass
class Model:
    """Weights plus ablation state.

    Projection weights keep the checkpoint's ``[in, out]`` orientation so
    ``y = x @ W + b``. The output projection reuses ``wte.weight``.

    Attributes:
        head_gates: ``[n_layer, n_head]`` multipliers on each head's context
            vector (1 keeps, 0 ablates).
        embedding_mask: ``[d_model]`` multipliers on the columns of the
            token-embedding matrix.
        mask_mode: ``"tied"`` applies ``embedding_mask`` to both the input
            lookup and the output projection; ``"input"`` to the lookup only.
    """

    config: ModelConfig
    params: dict
    head_gates: np.ndarray = None
    embedding_mask: np.ndarray = None
    mask_mode: str = "tied"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        cfg = self.config
        if self.head_gates is None:
            self.head_gates = np.ones((cfg.n_layer, cfg.n_head))
        if self.embedding_mask is None:
            self.embedding_mask = np.ones(cfg.d_model)
        if self.mask_mode not in MASK_MODES:
            raise ValueError(f"mask_mode must be one of {MASK_MODES}")

    @property
    def dtype(self):
        return self.params["wte.weight"].dtype

    def param_count(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def arrays(self) -> dict:
        return {k: t.data for k, t in self.params.items()}

    def copy(self, requires_grad: bool = False) -> Model:
        """Deep copy of the weights (for fine-tuning without touching the original)."""
        params = {k: Tensor(t.data.copy(), requires_grad=requires_grad) for k, t in self.params.items()}
        return dataclasses.replace(
            self, params=params, head_gates=self.head_gates.copy(),
            embedding_mask=self.embedding_mask.copy(), metadata=dict(self.metadata),
        )

    def astype(self, dtype) -> Model:
        params = {k: Tensor(t.data, dtype=dtype) for k, t in self.params.items()}
        return dataclasses.replace(self, params=params)

    def save(self, path) -> None:
        meta = {k: str(v) for k, v in self.config.to_dict().items()}
        write_safetensors(path, self.arrays(), metadata=meta)

    @classmethod
    def random(cls, config: ModelConfig, seed: int = 0, dtype=np.float32, std: float = 0.02) -> Model:
        """GPT-2-style random initialisation (residual projections scaled down)."""
        rng = np.random.default_rng(seed)
        proj_std = std / math.sqrt(2 * config.n_layer)
        params = {}
        for name, shape in expected_shapes(config).items():
            if name.endswith("bias"):
                arr = np.zeros(shape)
            elif ".ln_" in name or name.startswith("ln_f"):
                arr = np.ones(shape)
            elif name.endswith("c_proj.weight"):
                arr = rng.normal(0.0, proj_std, size=shape)
            else:
                arr = rng.normal(0.0, std, size=shape)
            params[name] = Tensor(arr, dtype=dtype)
        return cls(config=config, params=params)


def _canonical(name: str) -> str:
    for prefix in _STRIP_PREFIXES:
        if name.startswith(prefix):
            return name[len(prefix):]
    return name


def model_from_arrays(arrays: dict, config: ModelConfig, dtype=np.float32,
                      mask_mode: str = "tied") -> Model:
    """Validate checkpoint arrays against ``config`` and build a Model."""
    found = {}
    for name, arr in arrays.items():
        key = _canonical(name)
        if key.endswith(_IGNORED_SUFFIXES):
            continue
        found[key] = arr
    params = {}
    for name, shape in expected_shapes(config).items():
        if name not in found:
            raise ContainerError(f"missing tensor {name!r}")
        arr = found[name]
        if tuple(arr.shape) != shape:
            raise ContainerError(f"tensor {name!r} has shape {tuple(arr.shape)}, expected {shape}")
        params[name] = Tensor(arr, dtype=dtype)
    return Model(config=config, params=params, mask_mode=mask_mode)


def load_weights(path, config: ModelConfig, dtype=np.float32, mask_mode: str = "tied") -> Model:
    """Load a GPT-2 checkpoint (safetensors, or raw ``.json`` manifest)."""
    arrays, _ = read_container(path)
    return model_from_arrays(arrays, config, dtype=dtype, mask_mode=mask_mode)


def apply_embedding_mask(model: Model, columns) -> Model:
    """Derived model with the given token-embedding columns zeroed."""
    cols = np.asarray(sorted(set(int(c) for c in columns)), dtype=np.int64)
    d = model.config.d_model
    if cols.size and (cols[0] < 0 or cols[-1] >= d):
        raise ValueError(f"embedding column index outside [0, {d})")
    mask = model.embedding_mask.copy()
    mask[cols] = 0.0
    return dataclasses.replace(model, embedding_mask=mask)


def effective_masks(model: Model, spec=None) -> tuple[np.ndarray, np.ndarray]:
    """Head-gate and column-mask arrays after applying ``spec`` on top of the model's own."""
    gates = model.head_gates
    cols = model.embedding_mask
    if spec is not None:
        heads = list(spec.masked_heads)
        columns = list(spec.masked_columns)
        if heads:
            gates = gates.copy()
            for layer, h in heads:
                model.config.check_head((layer, h))
                gates[layer, h] = 0.0
        if columns:
            cols = cols.copy()
            idx = np.asarray(columns, dtype=np.int64)
            if idx.min() < 0 or idx.max() >= model.config.d_model:
                raise ValueError("masked column outside the embedding width")
            cols[idx] = 0.0
    return gates, cols


def _causal_mask(t: int, dtype) -> np.ndarray:
    return np.triu(np.full((t, t), ad.mask_sentinel(dtype), dtype=dtype), k=1)


def _attention(h: Tensor, params: dict, prefix: str, cfg: ModelConfig, gate: np.ndarray,
               causal: np.ndarray) -> Tensor:
    t, d = h.shape
    nh, hd = cfg.n_head, cfg.d_head
    qkv = h @ params[prefix + "c_attn.weight"] + params[prefix + "c_attn.bias"]

    def split(block):
        part = qkv[:, block * d:(block + 1) * d]
        return part.reshape(t, nh, hd).transpose(1, 0, 2)

    q, k, v = split(0), split(1), split(2)
    scores = (q @ k.transpose(0, 2, 1)) * (1.0 / math.sqrt(hd))
    att = ad.softmax_rows(scores, causal)
    ctx = att @ v
    if not np.all(gate == 1.0):
        ctx = ad.mul(ctx, gate.astype(h.dtype)[:, None, None])
    merged = ctx.transpose(1, 0, 2).reshape(t, d)
    return merged @ params[prefix + "c_proj.weight"] + params[prefix + "c_proj.bias"]


def _mlp(h: Tensor, params: dict, prefix: str) -> Tensor:
    a = ad.gelu(h @ params[prefix + "c_fc.weight"] + params[prefix + "c_fc.bias"])
    return a @ params[prefix + "c_proj.weight"] + params[prefix + "c_proj.bias"]


def forward(model: Model, tokens, spec=None) -> Tensor:
    """Logits ``[T, d_vocab]`` for ``tokens`` under the model's and ``spec``'s masks.

    Each head's context vector is multiplied by its gate before the output
    projection; masked embedding columns are zeroed in the token-embedding
    matrix (and, in ``tied`` mode, in the output projection too). The
    output-projection bias does not belong to any head and is kept.
    """
    cfg = model.config
    ids = np.asarray(tokens, dtype=np.int64).reshape(-1)
    t = ids.size
    if t == 0:
        raise ValueError("empty token sequence")
    if t > cfg.context_length:
        raise ValueError(f"sequence of {t} tokens exceeds context length {cfg.context_length}")
    if ids.min() < 0 or ids.max() >= cfg.d_vocab:
        raise IndexError(f"token id out of range [0, {cfg.d_vocab})")

    gates, col_mask = effective_masks(model, spec)
    p = model.params
    wte = p["wte.weight"]
    dtype = wte.dtype
    if np.all(col_mask == 1.0):
        wte_in = wte
    else:
        wte_in = ad.mul(wte, col_mask.astype(dtype)[None, :])
    wte_out = wte_in if model.mask_mode == "tied" else wte

    x = ad.embedding(wte_in, ids) + p["wpe.weight"][:t]
    causal = _causal_mask(t, dtype)
    eps = cfg.layer_norm_eps
    for i in range(cfg.n_layer):
        pre = f"h.{i}."
        h = ad.layer_norm(x, p[pre + "ln_1.weight"], p[pre + "ln_1.bias"], eps)
        x = x + _attention(h, p, pre + "attn.", cfg, gates[i], causal)
        h = ad.layer_norm(x, p[pre + "ln_2.weight"], p[pre + "ln_2.bias"], eps)
        x = x + _mlp(h, p, pre + "mlp.")
    x = ad.layer_norm(x, p["ln_f.weight"], p["ln_f.bias"], eps)
    return x @ wte_out.transpose(1, 0)
