"""Tiny staged convolutional feature extractor.

Four conv+relu stages (3-8-16-32-64 channels, strides 1-2-2-2) followed by
global average pooling, a linear head, and L2 normalization to a 64-d unit
embedding. Feature stylization can be hooked in after any stage; it only
fires in training mode and is skipped entirely during evaluation.
"""

from __future__ import annotations

import struct
from typing import Callable, Optional, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigurationError
from .stylize import StylizerSpec, apply_stylizer

STAGES = ("after_stem", "after_stage1", "after_stage2", "after_stage3")
EMBED_DIM = 64

_CHANNELS = ((3, 8, 1), (8, 16, 2), (16, 32, 2), (32, 64, 2))  # cin, cout, stride


def _kaiming_conv(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    fan_in = cin * k * k
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal((cout, cin, k, k)) * std).astype(np.float32)


class Backbone:
    """Feature extractor with named stylizer insertion points."""

    def __init__(self, seed: int = 0, embed_dim: int = EMBED_DIM, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.embed_dim = embed_dim
        self.training = True
        self._params: dict[str, Tensor] = {}
        for i, (cin, cout, _) in enumerate(_CHANNELS):
            self._params[f"conv{i}.weight"] = Tensor(
                _kaiming_conv(rng, cout, cin, 3), requires_grad=True, dtype=dtype)
            self._params[f"conv{i}.bias"] = Tensor(
                np.zeros(cout), requires_grad=True, dtype=dtype)
        head_std = np.sqrt(2.0 / _CHANNELS[-1][1])
        self._params["head.weight"] = Tensor(
            (rng.standard_normal((_CHANNELS[-1][1], embed_dim)) * head_std),
            requires_grad=True, dtype=dtype)
        self._params["head.bias"] = Tensor(
            np.zeros(embed_dim), requires_grad=True, dtype=dtype)

    def train(self) -> "Backbone":
        self.training = True
        return self

    def eval(self) -> "Backbone":
        self.training = False
        return self

    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self._params)

    def replace_parameters(self, tensors):
        """Swap in externally owned parameter tensors (order of parameters())."""
        names = list(self._params)
        if len(tensors) != len(names):
            raise ConfigurationError(
                f"expected {len(names)} parameter tensors, got {len(tensors)}")
        for name, tensor in zip(names, tensors):
            if tensor.shape != self._params[name].shape:
                raise ConfigurationError(
                    f"parameter {name!r} expects shape {self._params[name].shape}, "
                    f"got {tensor.shape}")
            self._params[name] = tensor

    def features_at(self, images, insertion: str = "after_stage1") -> np.ndarray:
        """Gradient-free feature map right after the named stage."""
        captured: dict[str, np.ndarray] = {}

        def grab(feature_map: Tensor) -> Tensor:
            captured["map"] = feature_map.data.copy()
            return feature_map

        was_training = self.training
        self.train()  # insertion hooks only fire in training mode
        try:
            with ag.no_grad():
                self.forward(images, stylizer=grab, insertion=insertion)
        finally:
            self.training = was_training
        return captured["map"]

    def forward(self, images, stylizer: Union[StylizerSpec, Callable, None] = None,
                insertion: str = "after_stage1",
                rng: Optional[np.random.Generator] = None) -> Tensor:
        """Map B,3,H,W images to unit-norm embeddings.

        ``stylizer`` may be a StylizerSpec (drawn with ``rng``) or any
        callable Tensor -> Tensor; it transforms the feature map right
        after the named stage, training mode only.
        """
        if insertion not in STAGES:
            raise ConfigurationError(
                f"unknown insertion point {insertion!r}; expected one of {STAGES}")
        transform = self._as_transform(stylizer, rng)
        x = images if isinstance(images, Tensor) else Tensor(images)
        for i, (_, _, stride) in enumerate(_CHANNELS):
            x = ag.conv2d(x, self._params[f"conv{i}.weight"],
                          self._params[f"conv{i}.bias"],
                          stride=stride, padding=1, relu=True)
            if transform is not None and STAGES[i] == insertion:
                x = transform(x)
        pooled = ag.global_average_pool(x)
        embedded = ag.linear(pooled, self._params["head.weight"],
                             self._params["head.bias"])
        return ag.l2_normalize(embedded, axis=-1)

    def _as_transform(self, stylizer, rng) -> Optional[Callable[[Tensor], Tensor]]:
        if stylizer is None or not self.training:
            return None
        if isinstance(stylizer, StylizerSpec):
            if stylizer.method == "none":
                return None
            gen = rng
            if gen is None:
                gen = np.random.default_rng(stylizer.seed)
            return lambda f: apply_stylizer(f, stylizer, gen, training=self.training)
        return stylizer

    def embed(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Stylizer-free, gradient-free embeddings in evaluation mode."""
        was_training = self.training
        self.eval()
        chunks = []
        try:
            with ag.no_grad():
                for start in range(0, images.shape[0], batch_size):
                    out = self.forward(images[start:start + batch_size])
                    chunks.append(out.data.copy())
        finally:
            self.training = was_training
        return np.concatenate(chunks, axis=0)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        for name, p in self._params.items():
            if name not in state:
                raise ConfigurationError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=p.data.dtype)
            if arr.shape != p.data.shape:
                raise ConfigurationError(
                    f"checkpoint parameter {name!r} has shape {arr.shape}, "
                    f"expected {p.data.shape}")
            p.data[...] = arr


# ---------------------------------------------------------------------------
# checkpoint format: b"ILCK", u32 version, then per entry
# (u32 name length, name bytes, u32 rank, u32 dims..., float32 data),
# everything little-endian.

_MAGIC = b"ILCK"
_VERSION = 1


def save_checkpoint(path, arrays: dict[str, np.ndarray]):
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", data.ndim))
            fh.write(struct.pack(f"<{data.ndim}I", *data.shape))
            fh.write(data.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ConfigurationError(f"not a checkpoint file (magic {magic!r})")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise ConfigurationError(f"unsupported checkpoint version {version}")
        arrays: dict[str, np.ndarray] = {}
        while True:
            raw = fh.read(4)
            if not raw:
                break
            (name_len,) = struct.unpack("<I", raw)
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims)
            arrays[name] = data.copy()
        return arrays
