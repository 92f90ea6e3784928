"""Walk nested dataclasses of numpy arrays.

Weight containers in this package are plain dataclasses whose leaves are
float64 ndarrays (possibly inside tuples/lists). `iter_arrays` enumerates
the leaves with stable dotted names; `lift` rebuilds the same structure with
each leaf replaced through a callback (used to wrap parameters as autodiff
tensors at training time).
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Iterator

import numpy as np


def iter_arrays(obj, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
    if isinstance(obj, np.ndarray):
        yield prefix, obj
    elif dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_arrays(getattr(obj, f.name), name)
    elif isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            name = f"{prefix}.{i}" if prefix else str(i)
            yield from iter_arrays(item, name)
    # scalars, strings, None: not parameters


def lift(obj, wrap: Callable[[str, np.ndarray], object], prefix: str = ""):
    """Deep-copy the container structure, mapping each ndarray leaf through
    `wrap(name, array)`. Non-array leaves are shared as-is.
    """
    if isinstance(obj, np.ndarray):
        return wrap(prefix, obj)
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        kwargs = {}
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            kwargs[f.name] = lift(getattr(obj, f.name), wrap, name)
        return type(obj)(**kwargs)
    if isinstance(obj, (list, tuple)):
        items = [
            lift(item, wrap, f"{prefix}.{i}" if prefix else str(i))
            for i, item in enumerate(obj)
        ]
        return type(obj)(items)
    return obj
