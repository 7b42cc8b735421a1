"""Network data model: layers, evaluation, serialization, conv flattening, merging.

A :class:`Network` is an immutable sequence of layers alternating between
linear maps (dense or convolutional) and elementwise ReLU, always starting
and ending with a linear map.  The final linear layer produces the logit
vector; class prediction is the argmax with ties broken toward the lowest
class index so that downstream agreement logic is deterministic.

All arithmetic is float64.  Zero-copy views of the weight arrays are frozen
(``writeable=False``) so shared instances are safe across threads.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from typing import Union

import numpy as np


class ShapeError(ValueError):
    """Composed layer shapes are inconsistent, or an input has the wrong shape."""


class ModelFormatError(ValueError):
    """A model file is malformed; the message names the offending field."""


def _freeze(a: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(np.asarray(a, dtype=np.float64))
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class Affine:
    """Dense layer ``y = weights @ x + bias`` with weights of shape (out, in)."""

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "weights", _freeze(self.weights))
        object.__setattr__(self, "bias", _freeze(self.bias))
        if self.weights.ndim != 2:
            raise ShapeError(f"affine weights must be 2-D, got {self.weights.ndim}-D")
        if self.bias.ndim != 1:
            raise ShapeError(f"affine bias must be 1-D, got {self.bias.ndim}-D")
        if self.weights.shape[0] != self.bias.shape[0]:
            raise ShapeError(
                f"affine weight rows ({self.weights.shape[0]}) != bias length ({self.bias.shape[0]})"
            )

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]


@dataclass(frozen=True, eq=False)
class Conv2D:
    """2-D convolution with kernel (out_ch, in_ch, kh, kw), zero padding."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _freeze(self.kernel))
        object.__setattr__(self, "bias", _freeze(self.bias))
        object.__setattr__(self, "stride", (int(self.stride[0]), int(self.stride[1])))
        object.__setattr__(self, "padding", (int(self.padding[0]), int(self.padding[1])))
        if self.kernel.ndim != 4:
            raise ShapeError(f"conv kernel must be 4-D, got {self.kernel.ndim}-D")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeError(
                f"conv bias length ({self.bias.shape[0]}) != out channels ({self.kernel.shape[0]})"
            )
        if self.stride[0] < 1 or self.stride[1] < 1:
            raise ShapeError(f"conv stride must be >= 1, got {self.stride}")
        if self.padding[0] < 0 or self.padding[1] < 0:
            raise ShapeError(f"conv padding must be >= 0, got {self.padding}")

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, int, int]:
        if len(in_shape) != 3:
            raise ShapeError(f"conv input must be (ch, h, w), got shape {in_shape}")
        in_ch, h, w = in_shape
        if in_ch != self.kernel.shape[1]:
            raise ShapeError(
                f"conv expects {self.kernel.shape[1]} input channels, got {in_ch}"
            )
        kh, kw = self.kernel.shape[2], self.kernel.shape[3]
        ph, pw = self.padding
        sh, sw = self.stride
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeError(f"conv kernel ({kh}x{kw}) larger than padded input ({h + 2 * ph}x{w + 2 * pw})")
        oh = (h + 2 * ph - kh) // sh + 1
        ow = (w + 2 * pw - kw) // sw + 1
        return (self.kernel.shape[0], oh, ow)


@dataclass(frozen=True, eq=False)
class ReLU:
    """Elementwise max(0, x)."""


Layer = Union[Affine, Conv2D, ReLU]
LinearLayer = Union[Affine, Conv2D]


@dataclass(frozen=True, eq=False)
class Network:
    """Ordered layer list with fixed input shape and class count.

    The layer sequence must match ``linear (relu linear)*``: linear layers at
    even positions, ReLU at odd positions, ending in the logit layer.
    """

    layers: tuple[Layer, ...]
    input_shape: tuple[int, ...]
    num_classes: int

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "num_classes", int(self.num_classes))
        if self.num_classes < 1:
            raise ShapeError("num_classes must be positive")
        if not self.layers:
            raise ShapeError("network needs at least one layer")
        for i, layer in enumerate(self.layers):
            if i % 2 == 0 and isinstance(layer, ReLU):
                raise ShapeError(f"layer {i} must be affine or conv2d, got relu")
            if i % 2 == 1 and not isinstance(layer, ReLU):
                raise ShapeError(f"layer {i} must be relu")
        if isinstance(self.layers[-1], ReLU):
            raise ShapeError("network must end in a linear (logit) layer")
        # Propagate shapes once; evaluation reuses the result.
        shapes = []
        shape = self.input_shape
        for layer in self.layers:
            if isinstance(layer, ReLU):
                shapes.append(shape)
                continue
            shapes.append(shape)
            if isinstance(layer, Affine):
                flat = int(np.prod(shape))
                if flat != layer.in_dim:
                    raise ShapeError(
                        f"affine layer expects input of size {layer.in_dim}, got {flat} from shape {shape}"
                    )
                shape = (layer.out_dim,)
            else:
                shape = layer.out_shape(shape)
        if int(np.prod(shape)) != self.num_classes:
            raise ShapeError(
                f"final layer produces {int(np.prod(shape))} values, expected {self.num_classes} classes"
            )
        object.__setattr__(self, "_layer_in_shapes", tuple(shapes))

    @property
    def linear_layers(self) -> tuple[LinearLayer, ...]:
        return self.layers[::2]

    @property
    def input_size(self) -> int:
        return int(np.prod(self.input_shape))

    def layer_input_shape(self, index: int) -> tuple[int, ...]:
        """Shape fed to ``layers[index]`` during a forward pass."""
        return self._layer_in_shapes[index]

    def has_conv(self) -> bool:
        return any(isinstance(l, Conv2D) for l in self.layers)


# An averaged-ensemble network is an ordinary Network built by merge_average.
MergedNetwork = Network


def _conv_apply(layer: Conv2D, x: np.ndarray) -> np.ndarray:
    """Apply a convolution to a (ch, h, w) input."""
    out_ch, in_ch, kh, kw = layer.kernel.shape
    ph, pw = layer.padding
    sh, sw = layer.stride
    _, oh, ow = layer.out_shape(x.shape)
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    out = np.tile(layer.bias[:, None, None], (1, oh, ow))
    for ky in range(kh):
        for kx in range(kw):
            window = xp[:, ky : ky + sh * oh : sh, kx : kx + sw * ow : sw]
            out += np.tensordot(layer.kernel[:, :, ky, kx], window, axes=(1, 0))
    return out


def _as_input(net: Network, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        return x
    if x.ndim == 1 and x.shape[0] == net.input_size:
        return x.reshape(net.input_shape)
    raise ShapeError(
        f"input shape {x.shape} does not match network input {net.input_shape}"
    )


def forward(net: Network, x) -> np.ndarray:
    """Evaluate the network, returning the logit vector of length num_classes."""
    val = _as_input(net, x)
    for layer in net.layers:
        if isinstance(layer, Affine):
            val = layer.weights @ val.reshape(-1) + layer.bias
        elif isinstance(layer, Conv2D):
            val = _conv_apply(layer, val)
        else:
            val = np.maximum(val, 0.0)
    return val.reshape(-1)


def predict(net: Network, x) -> int:
    """Class index of the maximal logit; ties go to the lowest index."""
    return int(np.argmax(forward(net, x)))


def conv_to_linear(layer: Conv2D, in_shape: tuple[int, ...]) -> Affine:
    """Materialize a convolution as an explicit dense layer on the flattened input.

    The returned Affine applied to ``x.reshape(-1)`` equals
    ``_conv_apply(layer, x).reshape(-1)`` for every input of shape ``in_shape``.
    """
    out_ch, oh, ow = layer.out_shape(tuple(in_shape))
    in_ch, h, w = in_shape
    _, _, kh, kw = layer.kernel.shape
    ph, pw = layer.padding
    sh, sw = layer.stride
    weights = np.zeros((out_ch * oh * ow, in_ch * h * w))
    bias = np.repeat(layer.bias, oh * ow)
    for oy in range(oh):
        for ox in range(ow):
            for ky in range(kh):
                iy = oy * sh + ky - ph
                if iy < 0 or iy >= h:
                    continue
                for kx in range(kw):
                    ix = ox * sw + kx - pw
                    if ix < 0 or ix >= w:
                        continue
                    rows = np.arange(out_ch) * (oh * ow) + oy * ow + ox
                    cols = np.arange(in_ch) * (h * w) + iy * w + ix
                    weights[np.ix_(rows, cols)] += layer.kernel[:, :, ky, kx]
    return Affine(weights, bias)


def linearize(net: Network) -> Network:
    """Replace every Conv2D with its dense equivalent; flat input shape.

    Function-preserving for flattened inputs.  No-op copy when the network is
    already dense.
    """
    layers: list[Layer] = []
    for i, layer in enumerate(net.layers):
        if isinstance(layer, Conv2D):
            layers.append(conv_to_linear(layer, net.layer_input_shape(i)))
        else:
            layers.append(layer)
    return Network(tuple(layers), (net.input_size,), net.num_classes)


def _identity_pad(layers: list[Affine], extra: int) -> list[Affine]:
    """Insert ``extra`` identity blocks before the final layer.

    Each block is an identity Affine followed (implicitly, by network
    structure) by a ReLU.  Inserted after the last existing ReLU the block is
    exact: its inputs are already non-negative.  A single-layer network has no
    ReLU to shelter behind, so the first inserted block splits the input into
    positive and negative parts (x = relu(x) - relu(-x)) and the next layer
    recombines them, which is exact for inputs of any sign.
    """
    if extra <= 0:
        return list(layers)
    out = list(layers[:-1])
    last = layers[-1]
    start = 0
    if len(layers) == 1:
        d = last.in_dim
        eye = np.eye(d)
        out.append(Affine(np.vstack([eye, -eye]), np.zeros(2 * d)))
        last = Affine(np.hstack([last.weights, -last.weights]), last.bias)
        start = 1
    for _ in range(start, extra):
        d = last.in_dim
        out.append(Affine(np.eye(d), np.zeros(d)))
    out.append(last)
    return out


def merge_average(models: list[Network]) -> MergedNetwork:
    """Build the single network computing the mean of the component logits.

    Hidden layers are block-diagonal stacks of the (dense-converted)
    component layers; the final layer concatenates the component logit maps
    scaled by 1/n.  Components of unequal depth are identity-padded first.
    """
    if not models:
        raise ShapeError("merge_average needs at least one model")
    base = models[0]
    for m in models[1:]:
        if m.input_shape != base.input_shape:
            raise ShapeError(
                f"cannot merge input shapes {base.input_shape} and {m.input_shape}"
            )
        if m.num_classes != base.num_classes:
            raise ShapeError(
                f"cannot merge class counts {base.num_classes} and {m.num_classes}"
            )
    dense = [list(linearize(m).linear_layers) for m in models]
    depth = max(len(ls) for ls in dense)
    dense = [_identity_pad(ls, depth - len(ls)) for ls in dense]
    n = len(models)
    merged: list[Layer] = []
    for k in range(depth - 1):
        blocks = [ls[k] for ls in dense]
        if k == 0:
            w = np.vstack([b.weights for b in blocks])
        else:
            w = _block_diag([b.weights for b in blocks])
        merged.append(Affine(w, np.concatenate([b.bias for b in blocks])))
        merged.append(ReLU())
    finals = [ls[depth - 1] for ls in dense]
    if depth == 1:
        w = sum(b.weights for b in finals) / n
    else:
        w = np.hstack([b.weights / n for b in finals])
    b = sum(b.bias for b in finals) / n
    merged.append(Affine(w, b))
    in_shape = (int(np.prod(base.input_shape)),)
    return Network(tuple(merged), in_shape, base.num_classes)


def _block_diag(mats: list[np.ndarray]) -> np.ndarray:
    rows = sum(m.shape[0] for m in mats)
    cols = sum(m.shape[1] for m in mats)
    out = np.zeros((rows, cols))
    r = c = 0
    for m in mats:
        out[r : r + m.shape[0], c : c + m.shape[1]] = m
        r += m.shape[0]
        c += m.shape[1]
    return out


def networks_equal(a: Network, b: Network) -> bool:
    """Structural equality with bitwise-identical weights."""
    if a.input_shape != b.input_shape or a.num_classes != b.num_classes:
        return False
    if len(a.layers) != len(b.layers):
        return False
    for la, lb in zip(a.layers, b.layers):
        if type(la) is not type(lb):
            return False
        if isinstance(la, Affine):
            if not (np.array_equal(la.weights, lb.weights) and np.array_equal(la.bias, lb.bias)):
                return False
        elif isinstance(la, Conv2D):
            if not (
                np.array_equal(la.kernel, lb.kernel)
                and np.array_equal(la.bias, lb.bias)
                and la.stride == lb.stride
                and la.padding == lb.padding
            ):
                return False
    return True


# ---------------------------------------------------------------------------
# Serialization.  Text format: a JSON object
#   {"input_shape": [...], "num_classes": K, "layers": [...]}
# where each layer is one of
#   {"type": "affine", "w": [[row-major rows]], "b": [...]}
#   {"type": "conv2d", "kernel": [[[[...]]]], "bias": [...],
#    "stride": [sh, sw], "padding": [ph, pw]}
#   {"type": "relu"}
# Floats are written with Python's shortest round-trip repr, which preserves
# full double precision; load(save(net)) is bitwise-identical.
# ---------------------------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Affine):
            layers.append({"type": "affine", "w": layer.weights.tolist(), "b": layer.bias.tolist()})
        elif isinstance(layer, Conv2D):
            layers.append(
                {
                    "type": "conv2d",
                    "kernel": layer.kernel.tolist(),
                    "bias": layer.bias.tolist(),
                    "stride": list(layer.stride),
                    "padding": list(layer.padding),
                }
            )
        else:
            layers.append({"type": "relu"})
    return {
        "input_shape": list(net.input_shape),
        "num_classes": net.num_classes,
        "layers": layers,
    }


def _require(obj: dict, key: str, where: str):
    if key not in obj:
        raise ModelFormatError(f"missing field '{key}' in {where}")
    return obj[key]


def network_from_dict(obj: dict) -> Network:
    if not isinstance(obj, dict):
        raise ModelFormatError("model file must hold a JSON object at top level")
    input_shape = _require(obj, "input_shape", "model")
    num_classes = _require(obj, "num_classes", "model")
    raw_layers = _require(obj, "layers", "model")
    if not isinstance(raw_layers, list):
        raise ModelFormatError("field 'layers' must be a list")
    layers: list[Layer] = []
    for i, entry in enumerate(raw_layers):
        where = f"layers[{i}]"
        if not isinstance(entry, dict):
            raise ModelFormatError(f"{where} must be an object")
        kind = _require(entry, "type", where)
        try:
            if kind == "affine":
                layers.append(Affine(np.array(_require(entry, "w", where), dtype=np.float64),
                                     np.array(_require(entry, "b", where), dtype=np.float64)))
            elif kind == "conv2d":
                layers.append(
                    Conv2D(
                        np.array(_require(entry, "kernel", where), dtype=np.float64),
                        np.array(_require(entry, "bias", where), dtype=np.float64),
                        tuple(_require(entry, "stride", where)),
                        tuple(_require(entry, "padding", where)),
                    )
                )
            elif kind == "relu":
                layers.append(ReLU())
            else:
                raise ModelFormatError(f"{where}: unknown layer type '{kind}'")
        except ShapeError as exc:
            raise ModelFormatError(f"{where}: {exc}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"{where}: {exc}") from exc
    try:
        return Network(tuple(layers), tuple(input_shape), num_classes)
    except ShapeError as exc:
        raise ModelFormatError(str(exc)) from exc
    except (TypeError, ValueError) as exc:
        raise ModelFormatError(str(exc)) from exc


def atomic_write_text(path: str, text: str) -> None:
    """Write via a temp file and rename so failures leave no partial output."""
    directory = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_model(net: Network, path: str) -> None:
    """Write the network to ``path`` in the JSON model format (atomic)."""
    atomic_write_text(path, json.dumps(network_to_dict(net)))


def load_model(path: str) -> Network:
    """Read a network from a JSON model file; raises ModelFormatError on bad input."""
    try:
        with open(path) as handle:
            obj = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"invalid JSON in {path}: {exc}") from exc
    return network_from_dict(obj)
