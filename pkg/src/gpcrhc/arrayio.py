"""Plain-text array files.

Format: the first line lists the dimensions separated by spaces; then
one line per row of the array flattened to 2-D (last axis along the line),
values in ``%.17g`` so that reading back is bit-exact.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_array(path, a) -> None:
    a = np.asarray(a, dtype=float)
    shape = a.shape if a.ndim else (1,)
    rows = a.reshape(-1, shape[-1]) if a.size else np.zeros((0, 0))
    lines = [" ".join(str(s) for s in shape)]
    lines += [" ".join(format(v, ".17g") for v in row) for row in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_array(path) -> np.ndarray:
    lines = Path(path).read_text().splitlines()
    shape = tuple(int(s) for s in lines[0].split())
    values = [float(v) for line in lines[1:] for v in line.split()]
    if len(values) != int(np.prod(shape)):
        raise ValueError(f"{path}: header {shape} does not match {len(values)} values")
    return np.array(values, dtype=float).reshape(shape)
