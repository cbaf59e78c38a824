"""JSON interchange for tensors: ``{"shape": [...], "data": [...]}``.

Data is the row-major flat sequence; every number is written with 17
significant digits so float64 values survive a round trip unchanged.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .tensor import InvalidShapeError, as_tensor


def dumps_tensor(t) -> str:
    t = as_tensor(t)
    shape = ", ".join(str(s) for s in t.shape)
    data = ", ".join(format(float(v), ".17g") for v in t.ravel())
    return f'{{"shape": [{shape}], "data": [{data}]}}'


def loads_tensor(text: str) -> np.ndarray:
    obj = json.loads(text)
    if not isinstance(obj, dict) or "shape" not in obj or "data" not in obj:
        raise InvalidShapeError("tensor JSON needs 'shape' and 'data' keys")
    shape = tuple(int(s) for s in obj["shape"])
    data = as_tensor(obj["data"], rank=1, name="data")
    if int(np.prod(shape)) != data.size:
        raise InvalidShapeError(f"shape {shape} does not hold {data.size} values")
    return data.reshape(shape)


def save_tensor(path, t) -> None:
    Path(path).write_text(dumps_tensor(t) + "\n")


def load_tensor(path) -> np.ndarray:
    return loads_tensor(Path(path).read_text())
