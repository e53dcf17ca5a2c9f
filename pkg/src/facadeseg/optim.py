"""Plain SGD with weight decay, per-layer learning-rate multipliers and freezing."""
import numpy as np

from .autograd import NonFiniteError


def unique_parameters(params):
    """Drop repeated references to the same Parameter, keeping first-seen order."""
    seen, out = set(), []
    for p in params:
        if id(p) not in seen:
            seen.add(id(p))
            out.append(p)
    return out


def _prefix_value(name, table, default):
    best, best_len = default, -1
    for prefix, value in table.items():
        if name.startswith(prefix) and len(prefix) > best_len:
            best, best_len = value, len(prefix)
    return best


def is_frozen(name, frozen):
    return any(name.startswith(prefix) for prefix in frozen)


def sgd_step(params, lr, weight_decay=0.0, lr_mult=None, frozen=()):
    """Apply ``p <- p - lr * mult(p) * (grad + weight_decay * p)`` in place.

    ``lr_mult`` maps parameter-name prefixes to multipliers (longest prefix
    wins); parameters whose name starts with any prefix in ``frozen`` are left
    untouched. A parameter shared by several layers is updated once, with its
    accumulated gradient. Raises :class:`NonFiniteError` before touching
    anything if a gradient is NaN/Inf.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    params = unique_parameters(params)
    lr_mult = lr_mult or {}
    for p in params:
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise NonFiniteError(f"non-finite gradient in parameter {p.name!r}")
    for p in params:
        if is_frozen(p.name, frozen):
            continue
        step = lr * _prefix_value(p.name, lr_mult, 1.0)
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if weight_decay:
            grad = grad + weight_decay * p.data
        p.data = (p.data - step * grad).astype(p.data.dtype, copy=False)
    return params


def zero_grad(params):
    for p in params:
        p.grad = None
