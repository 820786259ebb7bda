"""Parameter records: flattening to named arrays and Kaiming initialisation.

Parameter containers are frozen dataclasses whose leaves are ``ConvParams`` or
arrays. ``flatten`` gives the dotted-name view used by the LMT container and by
gradient dictionaries; ``unflatten`` rebuilds a record from such a view.
"""

import dataclasses
import math

import numpy as np

from .errors import FormatError
from .tensor import DTYPE, ConvParams


def flatten(obj, prefix=""):
    out = {}

    def key(name):
        return f"{prefix}.{name}" if prefix else name

    if isinstance(obj, np.ndarray):
        out[prefix] = obj
    elif isinstance(obj, ConvParams):
        out[key("weight")] = obj.weight
        out[key("bias")] = obj.bias
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            out.update(flatten(getattr(obj, f.name), key(f.name)))
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            out.update(flatten(item, key(str(i))))
    return out


def unflatten(template, arrays, prefix=""):
    """Rebuild ``template`` with every array leaf taken from ``arrays``."""

    def key(name):
        return f"{prefix}.{name}" if prefix else name

    def get(name):
        try:
            arr = arrays[name]
        except KeyError:
            raise FormatError(f"missing parameter tensor {name!r}") from None
        return arr

    if isinstance(template, np.ndarray):
        arr = get(prefix)
        if arr.shape != template.shape:
            raise FormatError(f"parameter {prefix!r}: expected shape {template.shape}, got {arr.shape}")
        return arr
    if isinstance(template, ConvParams):
        return dataclasses.replace(
            template,
            weight=unflatten(template.weight, arrays, key("weight")),
            bias=unflatten(template.bias, arrays, key("bias")),
        )
    if dataclasses.is_dataclass(template):
        changes = {}
        for f in dataclasses.fields(template):
            value = getattr(template, f.name)
            if isinstance(value, (np.ndarray, ConvParams, list, tuple)) or dataclasses.is_dataclass(value):
                changes[f.name] = unflatten(value, arrays, key(f.name))
        return dataclasses.replace(template, **changes)
    if isinstance(template, (list, tuple)):
        return type(template)(unflatten(v, arrays, key(str(i))) for i, v in enumerate(template))
    return template


def cast(obj, dtype):
    """Copy of a parameter record with every array cast to ``dtype``."""
    return unflatten(obj, {k: v.astype(dtype) for k, v in flatten(obj).items()})


def kaiming_gain(negative_slope):
    return math.sqrt(2.0 / (1.0 + negative_slope**2))


def kaiming_normal(shape, rng, negative_slope=1.0, dtype=DTYPE):
    """Fan-in Kaiming normal draw. With negative slope 1 the gain is exactly 1."""
    fan_in = int(np.prod(shape[1:]))
    std = kaiming_gain(negative_slope) / math.sqrt(fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


def init_conv(out_c, in_c, k, rng, dtype=DTYPE, zero=False):
    shape = (out_c, in_c, k, k)
    weight = np.zeros(shape, dtype=dtype) if zero else kaiming_normal(shape, rng, dtype=dtype)
    return ConvParams(weight=weight, bias=np.zeros(out_c, dtype=dtype))


def zeros_like_params(obj):
    return unflatten(obj, {k: np.zeros_like(v) for k, v in flatten(obj).items()})


def init_params(shapes, seed, negative_slope=1.0, dtype=DTYPE):
    """Initialise a ``{name: shape}`` spec: rank-1 entries are biases (zeros),
    everything else is Kaiming-normal. Deterministic per seed."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        shape = tuple(shape)
        if len(shape) == 1:
            out[name] = np.zeros(shape, dtype=dtype)
        else:
            out[name] = kaiming_normal(shape, rng, negative_slope, dtype)
    return out
