"""Layers, networks, the JSON model format and concrete evaluation.

Every layer works on batches: an array of shape ``(N, *input_shape)``.
Convolutions use zero padding and are evaluated directly, one kernel tap
at a time, instead of through a materialised matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .tensor import ShapeError, as_tensor, check_shape


class ModelFormatError(ValueError):
    """A model file could not be parsed or does not describe a valid network."""


class ShapeCompositionError(ModelFormatError):
    def __init__(self, index: int, message: str):
        self.index = index
        super().__init__(f"layer {index}: {message}")


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _conv2d(xs: np.ndarray, kernel: np.ndarray, stride: int, pad: int) -> np.ndarray:
    n, _, h, w = xs.shape
    out_c, _, kh, kw = kernel.shape
    ho, wo = _conv_out(h, kh, stride, pad), _conv_out(w, kw, stride, pad)
    xp = np.pad(xs, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, out_c, ho, wo))
    for ky in range(kh):
        for kx in range(kw):
            patch = xp[:, :, ky:ky + stride * (ho - 1) + 1:stride, kx:kx + stride * (wo - 1) + 1:stride]
            out += np.einsum("oi,nihw->nohw", kernel[:, :, ky, kx], patch, optimize=True)
    return out


def _conv_transpose2d(xs: np.ndarray, kernel: np.ndarray, stride: int, pad: int,
                      out_pad: int) -> np.ndarray:
    n, _, h, w = xs.shape
    out_c, _, kh, kw = kernel.shape
    ho = (h - 1) * stride - 2 * pad + kh + out_pad
    wo = (w - 1) * stride - 2 * pad + kw + out_pad
    # scatter into an uncropped buffer, then cut `pad` from each border
    full_h = max((h - 1) * stride + kh, pad + ho)
    full_w = max((w - 1) * stride + kw, pad + wo)
    full = np.zeros((n, out_c, full_h, full_w))
    for ky in range(kh):
        for kx in range(kw):
            contrib = np.einsum("oi,nihw->nohw", kernel[:, :, ky, kx], xs, optimize=True)
            full[:, :, ky:ky + stride * (h - 1) + 1:stride, kx:kx + stride * (w - 1) + 1:stride] += contrib
    return full[:, :, pad:pad + ho, pad:pad + wo]


@dataclass(frozen=True, eq=False)
class Dense:
    weight: np.ndarray  # (outputs, inputs)
    bias: np.ndarray
    kind = "dense"
    affine = True

    def __post_init__(self):
        w = as_tensor(self.weight)
        b = as_tensor(self.bias)
        if w.ndim != 2:
            raise ValueError(f"dense weight must be 2-D, got shape {w.shape}")
        if b.shape != (w.shape[0],):
            raise ValueError(f"dense bias must have shape ({w.shape[0]},), got {b.shape}")
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return (self.weight.shape[1],)

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, ...]:
        if tuple(in_shape) != self.input_shape:
            raise ShapeError(self.input_shape, in_shape)
        return (self.weight.shape[0],)

    def apply(self, xs: np.ndarray) -> np.ndarray:
        return xs @ self.weight.T + self.bias

    def apply_abs(self, rs: np.ndarray) -> np.ndarray:
        return rs @ np.abs(self.weight).T

    def matrix(self) -> np.ndarray:
        return self.weight.copy()

    def to_json(self) -> dict:
        return {"kind": self.kind, "weight": self.weight.tolist(), "bias": self.bias.tolist()}


@dataclass(frozen=True, eq=False)
class Conv2d:
    kernel: np.ndarray  # (out, in, kh, kw)
    bias: np.ndarray
    stride: int = 1
    padding: int = 1
    input_hw: tuple[int, int] | None = None
    kind = "conv2d"
    affine = True

    def __post_init__(self):
        k = as_tensor(self.kernel)
        b = as_tensor(self.bias)
        if k.ndim != 4:
            raise ValueError(f"{self.kind} kernel must be 4-D, got shape {k.shape}")
        if b.shape != (k.shape[0],):
            raise ValueError(f"{self.kind} bias must have shape ({k.shape[0]},), got {b.shape}")
        if int(self.stride) < 1 or int(self.padding) < 0:
            raise ValueError("stride must be >= 1 and padding >= 0")
        object.__setattr__(self, "kernel", k)
        object.__setattr__(self, "bias", b)
        object.__setattr__(self, "stride", int(self.stride))
        object.__setattr__(self, "padding", int(self.padding))
        if self.input_hw is not None:
            object.__setattr__(self, "input_hw", tuple(int(v) for v in self.input_hw))

    @property
    def input_shape(self) -> tuple[int, ...]:
        if self.input_hw is None:
            raise ValueError("convolution input size unknown until bound into a network")
        return (self.kernel.shape[1], *self.input_hw)

    def bind(self, in_shape: Sequence[int]):
        return type(self)(**{**self._params(), "input_hw": tuple(in_shape[1:])})

    def _params(self) -> dict:
        return {"kernel": self.kernel, "bias": self.bias, "stride": self.stride, "padding": self.padding}

    def _spatial_out(self, h: int, w: int) -> tuple[int, int]:
        _, _, kh, kw = self.kernel.shape
        return _conv_out(h, kh, self.stride, self.padding), _conv_out(w, kw, self.stride, self.padding)

    def output_shape(self, in_shape: Sequence[int]) -> tuple[int, ...]:
        if len(in_shape) != 3 or in_shape[0] != self.kernel.shape[1]:
            raise ShapeError((self.kernel.shape[1], "H", "W"), in_shape)
        ho, wo = self._spatial_out(in_shape[1], in_shape[2])
        if ho < 1 or wo < 1:
            raise ValueError(f"{self.kind} produces empty output for input {tuple(in_shape)}")
        return (self.kernel.shape[0], ho, wo)

    def _run(self, xs: np.ndarray, kernel: np.ndarray) -> np.ndarray:
        return _conv2d(xs, kernel, self.stride, self.padding)

    def apply(self, xs: np.ndarray) -> np.ndarray:
        return self._run(xs, self.kernel) + self.bias[None, :, None, None]

    def apply_abs(self, rs: np.ndarray) -> np.ndarray:
        return self._run(rs, np.abs(self.kernel))

    def matrix(self) -> np.ndarray:
        """Materialise the equivalent dense matrix (small shapes only)."""
        n_in = int(np.prod(self.input_shape))
        basis = np.eye(n_in).reshape(n_in, *self.input_shape)
        return self._run(basis, self.kernel).reshape(n_in, -1).T

    def to_json(self) -> dict:
        return {"kind": self.kind, "kernel": self.kernel.tolist(), "bias": self.bias.tolist(),
                "stride": self.stride, "padding": self.padding}


@dataclass(frozen=True, eq=False)
class ConvTranspose2d(Conv2d):
    out_padding: int = 0
    kind = "conv_transpose2d"

    def __post_init__(self):
        super().__post_init__()
        if int(self.out_padding) < 0:
            raise ValueError("out_padding must be >= 0")
        object.__setattr__(self, "out_padding", int(self.out_padding))

    def _params(self) -> dict:
        return {**super()._params(), "out_padding": self.out_padding}

    def _spatial_out(self, h: int, w: int) -> tuple[int, int]:
        _, _, kh, kw = self.kernel.shape
        s, p, op = self.stride, self.padding, self.out_padding
        return (h - 1) * s - 2 * p + kh + op, (w - 1) * s - 2 * p + kw + op

    def _run(self, xs: np.ndarray, kernel: np.ndarray) -> np.ndarray:
        return _conv_transpose2d(xs, kernel, self.stride, self.padding, self.out_padding)

    def to_json(self) -> dict:
        return {**super().to_json(), "out_padding": self.out_padding}


@dataclass(frozen=True)
class ReLU:
    kind = "relu"
    affine = False

    def output_shape(self, in_shape):
        return tuple(in_shape)

    def apply(self, xs: np.ndarray) -> np.ndarray:
        return np.maximum(xs, 0.0)

    def to_json(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Flatten:
    kind = "flatten"
    affine = False

    def output_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def apply(self, xs: np.ndarray) -> np.ndarray:
        return xs.reshape(xs.shape[0], -1)

    def to_json(self) -> dict:
        return {"kind": self.kind}


@dataclass(frozen=True)
class Reshape:
    shape: tuple[int, ...]
    kind = "reshape"
    affine = False

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        if not self.shape or any(s <= 0 for s in self.shape):
            raise ValueError(f"reshape target must be non-empty and positive, got {self.shape}")

    def output_shape(self, in_shape):
        if int(np.prod(in_shape)) != int(np.prod(self.shape)):
            raise ShapeError(self.shape, in_shape, "reshape")
        return self.shape

    def apply(self, xs: np.ndarray) -> np.ndarray:
        return xs.reshape(xs.shape[0], *self.shape)

    def to_json(self) -> dict:
        return {"kind": self.kind, "shape": list(self.shape)}


Layer = Union[Dense, Conv2d, ConvTranspose2d, ReLU, Flatten, Reshape]


@dataclass(frozen=True, eq=False)
class Network:
    """An ordered list of layers with a declared input shape.

    Shapes are composed eagerly; ``shapes[i]`` is the input shape of layer i
    and ``shapes[-1]`` the network output shape.
    """

    input_shape: tuple[int, ...]
    layers: tuple = ()
    shapes: tuple = field(init=False, repr=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.input_shape)
        if not shape or any(s <= 0 for s in shape):
            raise ModelFormatError(f"input_shape must be non-empty and positive, got {shape}")
        object.__setattr__(self, "input_shape", shape)
        bound, shapes = [], [shape]
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv2d):
                if len(shape) != 3:
                    raise ShapeCompositionError(i, f"{layer.kind} needs a (C, H, W) input, got {shape}")
                layer = layer.bind(shape)
            try:
                shape = tuple(layer.output_shape(shape))
            except ValueError as exc:
                raise ShapeCompositionError(i, str(exc)) from None
            bound.append(layer)
            shapes.append(shape)
        object.__setattr__(self, "layers", tuple(bound))
        object.__setattr__(self, "shapes", tuple(shapes))

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.shapes[-1]

    def __len__(self):
        return len(self.layers)

    def then(self, other: "Network") -> "Network":
        """Composition ``other . self`` (e.g. decoder followed by detector)."""
        if other.input_shape != self.output_shape:
            raise ShapeError(other.input_shape, self.output_shape, "composed network input")
        return Network(self.input_shape, self.layers + other.layers)

    def slice(self, start: int = 0, stop: int | None = None) -> "Network":
        stop = len(self.layers) if stop is None else stop
        return Network(self.shapes[start], self.layers[start:stop])

    def forward_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if tuple(xs.shape[1:]) != self.input_shape:
            raise ShapeError(self.input_shape, xs.shape[1:], "input")
        for layer in self.layers:
            xs = layer.apply(xs)
        return xs

    def to_json(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [layer.to_json() for layer in self.layers]}


def forward(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    check_shape(x, net.input_shape)
    return net.forward_batch(x[None])[0]


# --- file formats -----------------------------------------------------------

def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ModelFormatError(f"{where}: missing field '{key}'")
    return obj[key]


def layer_from_json(obj: dict, index: int = 0) -> Layer:
    where = f"layer {index}"
    if not isinstance(obj, dict):
        raise ModelFormatError(f"{where}: expected an object")
    kind = _require(obj, "kind", where)
    try:
        if kind == "dense":
            return Dense(_require(obj, "weight", where), _require(obj, "bias", where))
        if kind in ("conv2d", "conv_transpose2d"):
            args = dict(kernel=_require(obj, "kernel", where), bias=_require(obj, "bias", where),
                        stride=obj.get("stride", 1), padding=obj.get("padding", 1))
            if kind == "conv2d":
                return Conv2d(**args)
            return ConvTranspose2d(**args, out_padding=obj.get("out_padding", 0))
        if kind == "relu":
            return ReLU()
        if kind == "flatten":
            return Flatten()
        if kind == "reshape":
            return Reshape(tuple(_require(obj, "shape", where)))
    except ModelFormatError:
        raise
    except (ValueError, TypeError) as exc:
        raise ModelFormatError(f"{where} ({kind}): {exc}") from None
    raise ModelFormatError(f"{where}: unsupported layer kind {kind!r}")


def network_from_json(doc: dict) -> Network:
    if not isinstance(doc, dict):
        raise ModelFormatError("model document must be a JSON object")
    shape = _require(doc, "input_shape", "model")
    layers = _require(doc, "layers", "model")
    if not isinstance(layers, list):
        raise ModelFormatError("model: 'layers' must be a list")
    return Network(tuple(shape), tuple(layer_from_json(l, i) for i, l in enumerate(layers)))


def _read_json(path) -> dict:
    text = Path(path).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from None


def load_model(path) -> Network:
    return network_from_json(_read_json(path))


def save_model(net: Network, path) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(net.to_json(), indent=1), encoding="utf-8")


def vector_from_json(obj) -> np.ndarray:
    if not isinstance(obj, dict):
        raise ModelFormatError("vector must be an object with 'shape' and 'data'")
    try:
        return as_tensor(_require(obj, "data", "vector"), _require(obj, "shape", "vector"))
    except ModelFormatError:
        raise
    except ValueError as exc:
        raise ModelFormatError(f"vector: {exc}") from None


def vector_to_json(x) -> dict:
    x = np.asarray(x, dtype=np.float64)
    return {"shape": list(x.shape), "data": x.ravel().tolist()}


def load_vector(path) -> np.ndarray:
    return vector_from_json(_read_json(path))


def save_vector(x, path) -> None:
    Path(path).write_text(json.dumps(vector_to_json(x)), encoding="utf-8")


def read_json(path):
    return _read_json(path)
