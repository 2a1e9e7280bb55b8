"""Central finite-difference gradient checking."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

FD_STEP = 1e-5


def numerical_gradient(f, x, step=FD_STEP, indices=None):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place).

    If ``indices`` is given only those flat positions are evaluated and a
    1-D array in the same order is returned.
    """
    flat = x.reshape(-1)
    positions = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size if indices is None else len(indices))
    for k, i in enumerate(positions):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        out[i if indices is None else k] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape) if indices is None else out


@dataclass
class GradCheck:
    max_rel_error: float
    max_abs_error: float
    passed: bool


def compare(analytic, numeric, rtol=1e-4, atol=1e-8):
    """Componentwise check: each entry must satisfy the relative bound or sit
    under the absolute floor.  ``max_rel_error`` covers entries whose magnitude
    exceeds the floor; smaller ones have no meaningful relative error."""
    a = np.asarray(analytic, dtype=float).ravel()
    n = np.asarray(numeric, dtype=float).ravel()
    diff = np.abs(a - n)
    scale = np.maximum(np.abs(a), np.abs(n))
    rel = np.where(scale <= atol, 0.0, diff / np.where(scale > 0, scale, 1.0))
    ok = bool(np.all((diff <= atol) | (diff <= rtol * scale)))
    return GradCheck(float(rel.max(initial=0.0)), float(diff.max(initial=0.0)), ok)


def check_layer(layer, inputs, rng, rtol=1e-4, atol=1e-8, step=FD_STEP):
    """Check input and parameter gradients of ``layer`` against central differences.

    The scalar objective is ``sum(forward(*inputs) * r)`` for a fixed random
    ``r``.  Returns a dict mapping a label to its :class:`GradCheck`.
    """
    out = layer.forward(*inputs)
    outs = out if isinstance(out, tuple) else (out,)
    weights = [rng.standard_normal(o.shape) for o in outs]

    def objective():
        res = layer.forward(*inputs)
        res = res if isinstance(res, tuple) else (res,)
        return float(sum(np.sum(o * w) for o, w in zip(res, weights)))

    layer.zero_grad()
    layer.forward(*inputs)
    grads = layer.backward(*weights)
    grads = grads if isinstance(grads, tuple) else (grads,)

    results = {}
    for i, (x, g) in enumerate(zip(inputs, grads)):
        results[f"input{i}"] = compare(g, numerical_gradient(objective, x, step), rtol, atol)
    for p in layer.parameters():
        results[f"param{p.id}"] = compare(p.grad, numerical_gradient(objective, p.value, step), rtol, atol)
    return results


def straddles_kink(f0, fp, fm, step=FD_STEP, rtol=1e-4, atol=1e-8):
    """True when the one-sided slopes around a point disagree by more than
    the check tolerance, i.e. a relu or max-pool switch lies inside the
    central-difference stencil.  Smaller jumps cannot fail the check."""
    right, left = (fp - f0) / step, (f0 - fm) / step
    return abs(right - left) > max(rtol * max(abs(right), abs(left)), atol)


def sampled_check(f, entries, rng, count, rtol=1e-3, atol=1e-8, step=FD_STEP, max_draws=None):
    """Check ``count`` randomly drawn scalar entries against central differences.

    ``entries`` is a list of ``(value_array, grad_array)``; each draw picks an
    array uniformly, then a flat index.  Draws whose stencil straddles a kink
    are skipped and redrawn.  Returns ``(GradCheck, analytic values checked,
    number skipped)``; the check fails if fewer than ``count`` entries could
    be evaluated within ``max_draws``.
    """
    max_draws = max_draws or 5 * count
    analytic, numeric = [], []
    skipped = draws = 0
    while len(analytic) < count and draws < max_draws:
        draws += 1
        value, grad = entries[int(rng.integers(len(entries)))]
        j = int(rng.integers(value.size))
        flat = value.reshape(-1)
        orig = flat[j]
        f0 = f()
        flat[j] = orig + step
        fp = f()
        flat[j] = orig - step
        fm = f()
        flat[j] = orig
        if straddles_kink(f0, fp, fm, step, rtol, atol):
            skipped += 1
            continue
        analytic.append(grad.reshape(-1)[j])
        numeric.append((fp - fm) / (2.0 * step))
    result = compare(analytic, numeric, rtol, atol)
    if len(analytic) < count:
        result = GradCheck(result.max_rel_error, result.max_abs_error, False)
    return result, analytic, skipped
