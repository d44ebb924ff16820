"""Data-free search of a shared power exponent.

The exponent is chosen to minimise the summed weight reconstruction error of
every layer, using a one-dimensional Nelder-Mead simplex.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .quant import MAX_EXPONENT, MIN_EXPONENT, QuantConfig, reconstruction_error


class SearchError(RuntimeError):
    pass


@dataclass
class SearchConfig:
    init: float = 0.5
    step: float = 0.5
    tol: float = 1e-4
    max_iter: int = 200
    bits: int = 4
    p: int = 2
    bounds: tuple = (MIN_EXPONENT, MAX_EXPONENT)

    def __post_init__(self):
        lo, hi = self.bounds
        if not lo <= self.init <= hi:
            raise ValueError(f"init {self.init} outside bounds {self.bounds}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")


@dataclass
class SearchResult:
    exponent: float
    error: float
    iterations: int
    trace: list = field(default_factory=list)


def objective(weights: Sequence[np.ndarray], a: float, bits: int = 4, p: int = 2) -> float:
    if len(weights) == 0:
        raise ValueError("need at least one weight tensor")
    cfg = QuantConfig(bits, a)
    return math.fsum(reconstruction_error(w, cfg, p) for w in weights)


def nelder_mead_min(fn: Callable[[float], float], cfg: SearchConfig = SearchConfig()) -> SearchResult:
    """Minimise ``fn`` over ``cfg.bounds`` with a two-point simplex.

    Reflection 1, expansion 2, contraction 0.5, shrink 0.5. Trial points are
    projected onto the bounds. The returned point is the best one evaluated.
    """
    lo, hi = cfg.bounds

    def f(a):
        val = fn(a)
        if not math.isfinite(val):
            raise SearchError(f"objective is not finite at a={a!r}: {val!r}")
        return val

    clip = lambda a: min(max(a, lo), hi)  # noqa: E731
    x0 = cfg.init
    x1 = clip(x0 + cfg.step)
    if x1 == x0:
        x1 = clip(x0 - cfg.step)
    simplex = sorted([(f(x0), x0), (f(x1), x1)])
    trace = []
    it = 0
    while it < cfg.max_iter and abs(simplex[1][1] - simplex[0][1]) > cfg.tol:
        it += 1
        (fb, xb), (fw, xw) = simplex
        xr = clip(xb + (xb - xw))
        fr = f(xr)
        if fr < fb:
            xe = clip(xb + 2.0 * (xb - xw))
            fe = f(xe)
            simplex = [(fe, xe), (fb, xb)] if fe < fr else [(fr, xr), (fb, xb)]
        else:
            # with two points the reflected point is never "between" best and
            # worst, so go straight to contraction
            if fr < fw:
                xc = xb + 0.5 * (xr - xb)
            else:
                xc = xb + 0.5 * (xw - xb)
            fc = f(xc)
            if fc < min(fr, fw):
                simplex = [(fb, xb), (fc, xc)]
            else:
                xs = xb + 0.5 * (xw - xb)
                simplex = [(fb, xb), (f(xs), xs)]
        simplex.sort()
        trace.append({
            "iteration": it,
            "simplex": [simplex[0][1], simplex[1][1]],
            "best_a": simplex[0][1],
            "error": simplex[0][0],
        })
    best_err, best_a = simplex[0]
    return SearchResult(best_a, best_err, it, trace)


@dataclass
class ProbeResult:
    exponents: np.ndarray
    errors: np.ndarray
    argmin: float
    convex_fraction: float
    unique: bool


def grid_probe(fn: Callable[[float], float], lo: float = MIN_EXPONENT, hi: float = MAX_EXPONENT,
               step: float = 0.005, window: float = 0.05, lag: int | None = None) -> ProbeResult:
    """Sample ``fn`` on a grid and look at its shape around the minimum.

    ``convex_fraction`` is the fraction of positive second differences
    ``f(a-h) - 2 f(a) + f(a+h)`` over centres within ``window`` of the argmin,
    with stencil ``h = lag * step`` and the whole stencil inside the window.
    ``lag`` defaults to half the window; with ``lag=1`` the rounding jitter of
    a quantization error curve dominates its curvature.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    n = int(round((hi - lo) / step))
    grid = lo + step * np.arange(n + 1)
    errors = np.array([fn(float(a)) for a in grid])
    i = int(np.argmin(errors))
    w = int(round(window / step))
    if lag is None:
        lag = max(1, w // 2)
    d2 = []
    for c in range(i - w + lag, i + w - lag + 1):
        if c - lag >= 0 and c + lag < len(errors):
            d2.append(errors[c - lag] - 2 * errors[c] + errors[c + lag])
    frac = float(np.mean(np.array(d2) > 0)) if d2 else 0.0
    rest = np.delete(errors, i)
    unique = bool(rest.size == 0 or rest.min() - errors[i] > 1e-12)
    return ProbeResult(grid, errors, float(grid[i]), frac, unique)


def search_exponent(weights: Sequence[np.ndarray], cfg: SearchConfig = SearchConfig()) -> SearchResult:
    return nelder_mead_min(lambda a: objective(weights, a, cfg.bits, cfg.p), cfg)


@dataclass
class PowerQuantResult:
    exponent: float
    error: float
    weights: list
    search: SearchResult

    def policy(self, weight_bits: int | None = None, act_bits: int = 4, **kw):
        """Quantization policy using the shared exponent (activations need calibration)."""
        from .runtime import QuantPolicy

        bits = weight_bits if weight_bits is not None else self.weights[0].bits
        return QuantPolicy(bits, act_bits, self.exponent, **kw)


def powerquant_datafree(model, bits: int = 4, cfg: SearchConfig | None = None) -> PowerQuantResult:
    """Search one exponent for all layers from the weights alone and quantize them."""
    from .quant import quantize

    cfg = cfg or SearchConfig(bits=bits)
    if cfg.bits != bits:
        cfg = SearchConfig(**{**cfg.__dict__, "bits": bits})
    weights = [layer.weights for layer in model.layers]
    res = search_exponent(weights, cfg)
    qcfg = QuantConfig(bits, res.exponent)
    return PowerQuantResult(res.exponent, res.error, [quantize(w, qcfg) for w in weights], res)
