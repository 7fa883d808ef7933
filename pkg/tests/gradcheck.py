"""Central finite-difference gradient checking, independent of the tape."""

import numpy as np


def fd_gradient(fn, arrays: dict[str, np.ndarray], h: float = 1e-5) -> dict[str, np.ndarray]:
    """Numeric gradient of scalar fn(arrays) for every entry of every array."""
    grads = {}
    for name, base in arrays.items():
        g = np.zeros_like(base, dtype=np.float64)
        flat = base.ravel()
        for i in range(flat.size):
            bumped = {k: v.copy() for k, v in arrays.items()}
            bumped[name].ravel()[i] = flat[i] + h
            up = fn(bumped)
            bumped[name].ravel()[i] = flat[i] - h
            down = fn(bumped)
            g.ravel()[i] = (up - down) / (2.0 * h)
        grads[name] = g
    return grads


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-4) -> float:
    """Worst-case relative error; entries below `floor` compare absolutely.

    The floor sits above central-difference roundoff (~1e-10 at h=1e-5 on
    unit-magnitude values), so near-zero gradients still need agreement to
    floor*tol while regular entries are held to the relative tolerance.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def assert_grads_close(analytic: dict, numeric: dict, tol: float) -> float:
    worst = 0.0
    for name in numeric:
        err = max_rel_error(analytic[name], numeric[name])
        assert err < tol, f"gradient mismatch for {name}: rel error {err:.3e} >= {tol:.0e}"
        worst = max(worst, err)
    return worst
