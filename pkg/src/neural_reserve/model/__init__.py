from .config import PRESETS, HeadId, ModelConfig, preset
from .container import (
    ContainerError,
    read_container,
    read_raw,
    read_safetensors,
    write_raw,
    write_safetensors,
)
from .gpt2 import (
    Model,
    apply_embedding_mask,
    effective_masks,
    expected_shapes,
    forward,
    load_weights,
    model_from_arrays,
)

__all__ = [
    "PRESETS",
    "ContainerError",
    "HeadId",
    "Model",
    "ModelConfig",
    "apply_embedding_mask",
    "effective_masks",
    "expected_shapes",
    "forward",
    "load_weights",
    "model_from_arrays",
    "preset",
    "read_container",
    "read_raw",
    "read_safetensors",
    "write_raw",
    "write_safetensors",
]
