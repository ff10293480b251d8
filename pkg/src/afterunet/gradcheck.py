"""Central-difference gradient checking."""
import numpy as np

from .errors import NumericError


def _named(params):
    if isinstance(params, dict):
        return list(params.items())
    out = []
    for i, p in enumerate(params):
        if isinstance(p, tuple):
            out.append(p)
        else:
            out.append((f"param{i}", p))
    return out


def grad_check(f, params, h=1e-5, max_entries=None, seed=0):
    """Max over parameters of |analytic - numeric| / max(1, |numeric|).

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``.
    ``max_entries`` caps how many coordinates per tensor get perturbed (chosen
    at random from ``seed``); ``None`` checks all of them.
    """
    named = _named(params)
    for _, p in named:
        p.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: objective is not finite at the base point")
    loss.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.isfinite(analytic).all():
            raise NumericError(f"grad_check: non-finite analytic gradient for {name}")
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        a_flat = analytic.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = float(f().data)
            flat[i] = orig - h
            down = float(f().data)
            flat[i] = orig
            num = (up - down) / (2 * h)
            if not np.isfinite(num):
                raise NumericError(f"grad_check: non-finite numeric gradient for {name}[{i}]")
            err = abs(a_flat[i] - num) / max(1.0, abs(num))
            worst = max(worst, err)
    return worst
