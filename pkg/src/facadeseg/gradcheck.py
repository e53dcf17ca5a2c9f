"""Central finite-difference verification of analytic gradients."""
from dataclasses import dataclass, field

import numpy as np

from .autograd import no_grad
from .optim import unique_parameters, zero_grad


class NonDeterministicGraph(RuntimeError):
    pass


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_parameter: str
    per_parameter: dict = field(default_factory=dict)
    checked_entries: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return (
            f"grad_check {status}: max rel err {self.max_rel_error:.3e} "
            f"(worst {self.worst_parameter!r}, {self.checked_entries} entries, tol {self.tolerance:g})"
        )


def relative_error(analytic, numeric, floor=1e-6):
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _probe(loss_fn, flat, i, f0, step, tolerance, floor, refine):
    """Central difference at entry ``i``, shrinking the step across kinks.

    ReLU corners and max-unpool switches make the loss piecewise smooth, and a
    probe can straddle one corner or a symmetric pair of them. An estimate is
    accepted only when its one-sided slopes agree and it matches the estimate
    at a step ten times larger, both to a tenth of the tolerance plus the
    rounding noise of the loss. Otherwise the step shrinks by 10, at most
    ``refine`` times, and the smallest-step estimate is returned.
    """
    orig = flat[i]
    rounding = 8 * np.finfo(np.float64).eps * max(abs(f0), 1.0)
    prev = None
    for _ in range(refine + 1):
        with no_grad():
            flat[i] = orig + step
            fp = float(loss_fn().data)
            flat[i] = orig - step
            fm = float(loss_fn().data)
        flat[i] = orig
        right, left = (fp - f0) / step, (f0 - fm) / step
        cur = (right + left) / 2
        noise = 2 * rounding / step
        smooth = abs(right - left) <= 0.1 * tolerance * max(abs(right), abs(left), floor) + noise
        if smooth and prev is not None:
            if abs(cur - prev) <= 0.1 * tolerance * max(abs(cur), abs(prev), floor) + noise:
                break
        prev = cur
        step /= 10
    return cur


def grad_check(loss_fn, params, tolerance=1e-4, step=1e-3, max_entries=None, seed=0, floor=1e-6, refine=3):
    """Compare backprop gradients with central differences for every parameter.

    ``loss_fn`` must rebuild the graph and return a scalar tensor each call.
    All parameters must be float64. ``max_entries`` caps how many entries of
    each parameter are probed (sampled with ``seed``); None probes all.
    ``refine`` bounds how many times a probe is retried with a step ten
    times smaller.
    """
    params = unique_parameters(params)
    for p in params:
        if p.data.dtype != np.float64:
            raise ValueError(f"grad_check needs float64 parameters; {p.name!r} is {p.data.dtype}")
    zero_grad(params)
    loss = loss_fn()
    base = float(loss.data)
    loss.backward()
    analytic = {id(p): (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for p in params}
    with no_grad():
        again = float(loss_fn().data)
    if again != base:
        raise NonDeterministicGraph(f"loss changed between identical evaluations ({base!r} vs {again!r})")

    rng = np.random.default_rng(seed)
    report = GradCheckReport(0.0, "", tolerance=tolerance)
    for p in params:
        p.data = np.ascontiguousarray(p.data)
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        worst = 0.0
        ga = analytic[id(p)].reshape(-1)
        for i in idx:
            num = _probe(loss_fn, flat, i, base, step, tolerance, floor, refine)
            worst = max(worst, relative_error(float(ga[i]), num, floor))
        report.per_parameter[p.name] = worst
        report.checked_entries += len(idx)
        if worst >= report.max_rel_error:
            report.max_rel_error = worst
            report.worst_parameter = p.name
    zero_grad(params)
    return report
