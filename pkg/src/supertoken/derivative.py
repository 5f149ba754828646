"""Finite-difference spectral derivatives along the band axis."""

import numpy as np

from .hsi_io import HsiCube


def _as_array(cube):
    data = cube.data if isinstance(cube, HsiCube) else np.asarray(cube)
    return np.asarray(data, dtype=np.float64)


def first_derivative(cube, step=1):
    """Band ``i`` of the result is ``(W[i+step] - W[i]) / step``.

    Accepts an ``HsiCube`` or any array whose last axis is spectral, and
    returns the same kind.  Output has ``D - step`` bands, float64.
    """
    data = _as_array(cube)
    d = data.shape[-1]
    if not 1 <= step <= d - 1:
        raise ValueError(f"step {step} out of range for {d} bands (need 1 <= step <= {d - 1})")
    out = (data[..., step:] - data[..., :-step]) / step
    return HsiCube(out) if isinstance(cube, HsiCube) else out


def second_derivative(cube, step=1):
    """``(W[i+2s] - 2 W[i+s] + W[i]) / s**2``, with ``D - 2*step`` output bands."""
    data = _as_array(cube)
    d = data.shape[-1]
    if step < 1 or 2 * step > d - 1:
        raise ValueError(f"step {step} out of range for {d} bands (need 1 <= 2*step <= {d - 1})")
    n = d - 2 * step
    out = (data[..., 2 * step :] - 2.0 * data[..., step : step + n] + data[..., :n]) / (step * step)
    return HsiCube(out) if isinstance(cube, HsiCube) else out


def derivative(cube, order, step=1):
    if order == 1:
        return first_derivative(cube, step)
    if order == 2:
        return second_derivative(cube, step)
    raise ValueError(f"derivative order must be 1 or 2, got {order}")
