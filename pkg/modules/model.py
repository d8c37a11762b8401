import math
import os
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np
from pydantic import ValidationError

from modules.data_types import LossConfig, ModelConfig
from modules.errors import DimensionError, FormatError, NumericalError
from modules.tensor_core import (
    DEFAULT_DTYPE,
    ComputationRecord,
    Tensor,
    add_row_bias,
    matmul,
    relu,
    reshape,
)
from modules.utils import build_file_path, read_header, write_header

CHECKPOINT_MAGIC = b"SCLCKPT1"
CHECKPOINT_VERSION = 1

# (weight, bias) names per affine layer, encoder first
ENCODER_LAYERS = (("enc_w1", "enc_b1"), ("enc_w2", "enc_b2"), ("enc_w3", "enc_b3"))
HEAD_LAYER = ("head_w", "head_b")
LOG_TEMP = "log_temp"


def parameter_shapes(cfg: ModelConfig) -> Dict[str, Tuple[int, ...]]:
    """Ordered name -> shape map; the order is also the checkpoint order."""
    return {
        "enc_w1": (cfg.input_dim, cfg.hidden_dim),
        "enc_b1": (cfg.hidden_dim,),
        "enc_w2": (cfg.hidden_dim, cfg.hidden_dim),
        "enc_b2": (cfg.hidden_dim,),
        "enc_w3": (cfg.hidden_dim, cfg.embed_dim),
        "enc_b3": (cfg.embed_dim,),
        "head_w": (cfg.embed_dim, cfg.n_classes),
        "head_b": (cfg.n_classes,),
        LOG_TEMP: (),
    }


class ModelParams:
    """Encoder, classification head and the learnable log-temperature, by name."""

    def __init__(self, tensors: Dict[str, Tensor]):
        self.tensors = tensors

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    @property
    def log_temp(self) -> Tensor:
        return self.tensors[LOG_TEMP]

    def temperature(self, temp_max: float = math.inf) -> float:
        return min(math.exp(self.log_temp.item()), temp_max)

    def zero_grad(self):
        for tensor in self.tensors.values():
            tensor.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: tensor.grad for name, tensor in self.tensors.items()}

    def parameter_count(self) -> int:
        return sum(tensor.data.size for tensor in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams(
            {
                name: Tensor(tensor.data, requires_grad=True, dtype=tensor.dtype, name=name)
                for name, tensor in self.tensors.items()
            }
        )

    def bitwise_equal(self, other: "ModelParams") -> bool:
        if list(self.tensors) != list(other.tensors):
            return False
        return all(
            a.data.dtype == b.data.dtype
            and a.data.shape == b.data.shape
            and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.tensors.values(), other.tensors.values())
        )


def init_params(
    cfg: ModelConfig,
    seed: int,
    temp_init_log: float = LossConfig().temp_init_log,
    dtype=DEFAULT_DTYPE,
) -> ModelParams:
    """Glorot-uniform weights, zero biases, log_temp = temp_init_log. Deterministic in seed."""
    rng = np.random.default_rng(seed)
    tensors: Dict[str, Tensor] = {}
    for name, shape in parameter_shapes(cfg).items():
        if name == LOG_TEMP:
            value = np.array(temp_init_log)
        elif len(shape) == 2:
            fan_in, fan_out = shape
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-limit, limit, size=shape)
        else:
            value = np.zeros(shape)
        tensors[name] = Tensor(value, requires_grad=True, dtype=dtype, name=name)
    return ModelParams(tensors)


def _affine(x: Tensor, params: ModelParams, layer, record) -> Tensor:
    weight, bias = layer
    return add_row_bias(matmul(x, params[weight], record=record), params[bias], record=record)


def encode(
    batch: Tensor, params: ModelParams, record: Optional[ComputationRecord] = None
) -> Tensor:
    """Raw (unnormalized) embeddings: flatten -> affine -> relu -> affine -> relu -> affine."""
    if batch.data.ndim != 4 or batch.shape[1] != 1:
        raise DimensionError(f"encode expects [K, 1, H, W] images, got {batch.shape}")
    expected_dim = params["enc_w1"].shape[0]
    k = batch.shape[0]
    if batch.shape[2] * batch.shape[3] != expected_dim:
        raise DimensionError(
            f"images of {batch.shape[2]}x{batch.shape[3]} pixels do not match "
            f"the encoder input size {expected_dim}"
        )

    x = reshape(batch, (k, expected_dim), record=record)
    x = relu(_affine(x, params, ENCODER_LAYERS[0], record), record=record)
    x = relu(_affine(x, params, ENCODER_LAYERS[1], record), record=record)
    return _affine(x, params, ENCODER_LAYERS[2], record)


def classify(
    embeddings: Tensor, params: ModelParams, record: Optional[ComputationRecord] = None
) -> Tensor:
    """Class logits from raw embeddings; softmax is left to the losses and metrics."""
    if embeddings.data.ndim != 2 or embeddings.shape[1] != params["head_w"].shape[0]:
        raise DimensionError(
            f"classify expects [K, {params['head_w'].shape[0]}] embeddings, got {embeddings.shape}"
        )
    return _affine(embeddings, params, HEAD_LAYER, record)


def predict(
    images: np.ndarray, params: ModelParams, chunk_size: int = 512
) -> Tuple[np.ndarray, np.ndarray]:
    """Embeddings and logits for an [n, 1, H, W] image array, without recording gradients."""
    embeddings: List[np.ndarray] = []
    logits: List[np.ndarray] = []
    dtype = params["enc_w1"].dtype
    for start in range(0, len(images), chunk_size):
        batch = Tensor(images[start : start + chunk_size], dtype=dtype)
        e = encode(batch, params)
        embeddings.append(e.data)
        logits.append(classify(e, params).data)
    if not embeddings:
        d = params["head_w"].shape[0]
        k = params["head_w"].shape[1]
        return np.zeros((0, d), dtype=dtype), np.zeros((0, k), dtype=dtype)
    return np.concatenate(embeddings), np.concatenate(logits)


def save_checkpoint(params: ModelParams, cfg: ModelConfig, path: str):
    """
    Layout: magic "SCLCKPT1", u32 LE header length, UTF-8 JSON header, then
    every tensor as float32 LE in header order.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "config": cfg.model_dump(),
        "tensors": [
            {"name": name, "shape": list(tensor.shape)} for name, tensor in params.items()
        ],
    }
    with open(build_file_path(path), "wb") as f:
        write_header(f, CHECKPOINT_MAGIC, header)
        for tensor in params.tensors.values():
            f.write(tensor.data.astype("<f4").tobytes())


def load_checkpoint(path: str) -> Tuple[ModelParams, ModelConfig]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint file not found: {path}")
    with open(path, "rb") as f:
        blob = f.read()

    header, offset = read_header(blob, CHECKPOINT_MAGIC, "checkpoint")
    header_start = len(CHECKPOINT_MAGIC) + 4
    try:
        cfg = ModelConfig.model_validate(header["config"])
        entries = [(str(t["name"]), tuple(int(d) for d in t["shape"])) for t in header["tensors"]]
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise FormatError(f"checkpoint header is incomplete: {e}", header_start)

    expected = parameter_shapes(cfg)
    if [name for name, _ in entries] != list(expected) or any(
        expected[name] != shape for name, shape in entries
    ):
        raise FormatError("checkpoint tensor list does not match its model config", header_start)

    needed = sum(4 * int(np.prod(shape, dtype=np.int64)) for _, shape in entries)
    available = len(blob) - offset
    if available != needed:
        raise FormatError(
            f"checkpoint payload holds {available} bytes, header declares {needed}", offset
        )

    tensors: Dict[str, Tensor] = {}
    for name, shape in entries:
        count = int(np.prod(shape, dtype=np.int64))
        values = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        try:
            tensors[name] = Tensor(
                values.reshape(shape), requires_grad=True, dtype=np.float32, name=name
            )
        except NumericalError:
            raise FormatError(f"checkpoint tensor {name} holds non-finite values", offset)
        offset += 4 * count
    return ModelParams(tensors), cfg
