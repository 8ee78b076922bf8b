"""Kernel backend selection.

The compiled ``_core`` extension is used when importable; otherwise, or when
the environment variable ``SBEVLOC_BACKEND=python`` is set, the numpy
fallback in ``_pure`` is used. :func:`use_backend` switches at runtime,
which the tests and the benchmark use to compare both paths.
"""
import os

import numpy as np

from sbevloc import _pure

try:
    from sbevloc import _core
except ImportError:  # extension not built
    _core = None

_impl = _pure
BACKEND = "python"


def available_backends() -> list[str]:
    return ["python"] + (["cython"] if _core is not None else [])


def use_backend(name: str) -> None:
    global _impl, BACKEND
    if name == "cython":
        if _core is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = _core
    elif name == "python":
        _impl = _pure
    else:
        raise ValueError(f"unknown backend {name!r}")
    BACKEND = name


use_backend(os.environ.get("SBEVLOC_BACKEND", "cython" if _core is not None else "python"))


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _impl.conv2d_forward(
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        np.ascontiguousarray(b, dtype=np.float64),
    )


def conv2d_backward(g, x, w, need_input_grad: bool = True):
    return _impl.conv2d_backward(
        np.ascontiguousarray(g, dtype=np.float64),
        np.ascontiguousarray(x, dtype=np.float64),
        np.ascontiguousarray(w, dtype=np.float64),
        bool(need_input_grad),
    )


def fast_scores(img: np.ndarray, threshold: float, arc: int) -> np.ndarray:
    return _impl.fast_scores(np.ascontiguousarray(img, dtype=np.float64), float(threshold), int(arc))


def nms_greedy(rows, cols, shape, radius: int, max_keep: int) -> np.ndarray:
    return _impl.nms_greedy(
        np.ascontiguousarray(rows, dtype=np.int64),
        np.ascontiguousarray(cols, dtype=np.int64),
        int(shape[0]), int(shape[1]), int(radius), int(max_keep),
    )
