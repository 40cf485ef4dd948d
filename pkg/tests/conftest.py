import functools
import itertools
from contextlib import contextmanager

import numpy as np
import pytest

from npbrec.diffcore import Tensor, backward, max_relative_error, numerical_gradient


def gradient_errors(fn, arrays, eps=1e-6, probe=None, seed=0):
    """Max relative error between backward() and central differences for each input.

    ``fn`` maps Tensors to a scalar Tensor. ``probe`` limits the finite
    difference check to that many random entries per input.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    analytic = backward(fn(*tensors), tensors)
    errs = []
    for a, t, g in zip(arrays, tensors, analytic):
        def f():
            return float(fn(*[Tensor(x) for x in arrays]).data)

        idx = None
        if probe is not None and a.size > probe:
            flat = rng.choice(a.size, size=probe, replace=False)
            idx = [np.unravel_index(i, a.shape) for i in flat]
        num = numerical_gradient(f, a, eps=eps, indices=idx)
        if idx is not None:
            sel = tuple(np.array(ix) for ix in zip(*idx))
            errs.append(max_relative_error(g[sel], num[sel]))
        else:
            errs.append(max_relative_error(g, num))
    return errs


@contextmanager
def activation_log():
    """Record the sign pattern of every leaky-relu input evaluated inside the block."""
    from npbrec.diffcore import ops

    original = ops.leaky_relu
    log = []

    def recording(x, slope=0.01):
        log.append(np.asarray(x.data if isinstance(x, Tensor) else x) > 0)
        return original(x, slope)

    ops.leaky_relu = recording
    try:
        yield log
    finally:
        ops.leaky_relu = original


def _same_pattern(a, b):
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def piecewise_gradient_check(fn, arrays, probe=3, eps=1e-6, seed=0):
    """Central-difference check that is valid for piecewise-smooth networks.

    A probed entry is compared only if neither stencil point flips any
    leaky-relu pre-activation sign relative to the base point, so the loss is
    analytic along the whole stencil. Returns ``(errors, n_compared, n_probed)``.
    """
    rng = np.random.default_rng(seed)
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    with activation_log() as base:
        analytic = backward(fn(*tensors), tensors)
    errors, compared, probed = [], 0, 0
    for a, g in zip(arrays, analytic):
        flat = a.reshape(-1)
        picks = rng.choice(a.size, size=min(probe, a.size), replace=False)
        for i in picks:
            probed += 1
            orig = flat[i]
            vals, smooth = [], True
            for step in (eps, -eps):
                flat[i] = orig + step
                with activation_log() as log:
                    vals.append(float(fn(*[Tensor(x) for x in arrays]).data))
                smooth = smooth and _same_pattern(base, log)
            flat[i] = orig
            if not smooth:
                continue
            compared += 1
            num = (vals[0] - vals[1]) / (2 * eps)
            errors.append(max_relative_error(g.reshape(-1)[i : i + 1], np.array([num])))
    return errors, compared, probed


def projected(fn, shape, seed=1):
    """Scalar probe <fn(...), R> with a fixed random R, exercising the full Jacobian."""
    r = np.random.default_rng(seed).standard_normal(shape)
    return lambda *ts: (fn(*ts) * r).sum()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def naive_ssim(x, y, window=7, data_range=1.0):
    """Double loop over window positions; sample (ddof=1) statistics."""
    c1, c2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    h, w = x.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            a = x[i : i + window, j : j + window].ravel()
            b = y[i : i + window, j : j + window].ravel()
            ma, mb = a.mean(), b.mean()
            va, vb = a.var(ddof=1), b.var(ddof=1)
            cov = ((a - ma) * (b - mb)).sum() / (a.size - 1)
            vals.append((2 * ma * mb + c1) * (2 * cov + c2) / ((ma**2 + mb**2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


def midranks(values):
    """1-based ranks with ties sharing the mean of the positions they occupy."""
    order = sorted(range(len(values)), key=lambda i: values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for k in range(i, j + 1):
            ranks[order[k]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def brute_force_wilcoxon(d):
    """Statistic min(W+, W-) and two-sided p over all 2^n sign assignments."""
    d = [float(v) for v in d if v != 0]
    ranks = midranks([abs(v) for v in d])
    w_plus = sum(r for r, v in zip(ranks, d) if v > 0)
    t = min(w_plus, sum(ranks) - w_plus)
    hits = sum(
        1 for signs in itertools.product((0, 1), repeat=len(d)) if sum(r * s for r, s in zip(ranks, signs)) <= t + 1e-9
    )
    return t, min(1.0, 2.0 * hits / 2 ** len(d))


# -- acceptance bookkeeping ------------------------------------------------------------

ACCEPTANCE: dict = {}


def criterion(number: int, title: str):
    """Mark a test as (part of) an acceptance criterion; every part must pass."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            entry = ACCEPTANCE.setdefault(number, {"title": title, "passed": 0, "failed": 0})
            try:
                fn(*args, **kwargs)
            except BaseException:
                entry["failed"] += 1
                raise
            entry["passed"] += 1

        return run

    return wrap


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        e = ACCEPTANCE[number]
        status = "PASS" if e["failed"] == 0 else "FAIL"
        parts = e["passed"] + e["failed"]
        terminalreporter.write_line(f"criterion {number:2d}: {status}  {e['title']} ({e['passed']}/{parts} checks)")
