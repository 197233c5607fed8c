"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from ..errors import NonFinite


def relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def grad_check(fn, params: dict, grads: dict | None = None, delta=1e-4,
               n_samples=None, rng=None, branches=None, report=None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn()`` evaluates the scalar objective at the current contents of
    ``params`` (arrays are perturbed in place and restored). If ``grads`` is
    omitted, ``fn`` must return ``(value, grads)`` and the analytic gradient is
    taken from the unperturbed call. With ``n_samples`` set, that many
    coordinates are drawn per parameter instead of checking all of them.

    ``branches``, if given, is called right after each evaluation and returns
    a bytes signature of the piecewise choices made (ReLU masks, pooling
    winners). Coordinates whose +/- delta evaluations land on a different
    piece than the base point have no two-sided derivative and are skipped;
    pass a dict as ``report`` to receive ``checked``/``skipped`` counts.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    report = {} if report is None else report
    report.update(checked=0, skipped=0)

    def value():
        out = fn()
        f = out[0] if isinstance(out, tuple) else out
        f = float(f)
        if not np.isfinite(f):
            raise NonFinite("objective is not finite")
        return f

    if grads is None:
        base = fn()
        grads = base[1]
        if not np.isfinite(float(base[0])):
            raise NonFinite("objective is not finite")
    elif branches is not None:
        value()
    base_sig = branches() if branches is not None else None

    worst = 0.0
    for name, p in params.items():
        if name not in grads:
            continue
        g = np.asarray(grads[name])
        flat = p.reshape(-1)
        if n_samples is None or n_samples >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=n_samples, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + delta
            f_plus = value()
            kinked = branches is not None and branches() != base_sig
            flat[i] = orig - delta
            f_minus = value()
            kinked = kinked or (branches is not None and branches() != base_sig)
            flat[i] = orig
            if kinked:
                report["skipped"] += 1
                continue
            report["checked"] += 1
            numeric = (f_plus - f_minus) / (2 * delta)
            worst = max(worst, float(relative_error(g.reshape(-1)[i], numeric)))
    return worst
