"""Adaptive Simpson quadrature for smooth 1-D integrands."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable


@dataclass(frozen=True)
class QuadratureSpec:
    """Tolerance and recursion budget for the adaptive Simpson rule."""

    abs_tol: float = 1e-10
    max_depth: int = 40


@dataclass(frozen=True)
class QuadratureResult:
    value: float
    error_estimate: float
    evaluations: int


def adaptive_simpson(
    f: Callable[[float], float], a: float, b: float, spec: QuadratureSpec = QuadratureSpec()
) -> QuadratureResult:
    """Integrate f over [a, b] to the requested absolute tolerance.

    Classic recursive scheme: a subinterval is accepted when the halved
    Simpson estimates agree to 15x its tolerance share, with Richardson
    correction applied on acceptance.
    """
    if b < a:
        raise ValueError("integration bounds must satisfy a <= b")
    if a == b:
        return QuadratureResult(0.0, 0.0, 0)

    evals = [0]

    def feval(x: float) -> float:
        evals[0] += 1
        return f(x)

    def simpson(x0, f0, x2, f2):
        x1 = 0.5 * (x0 + x2)
        f1 = feval(x1)
        return x1, f1, (x2 - x0) / 6.0 * (f0 + 4.0 * f1 + f2)

    fa, fb = feval(a), feval(b)
    mid, fm, whole = simpson(a, fa, b, fb)

    def recurse(x0, f0, x2, f2, x1, f1, s, tol, depth):
        lm, flm, left = simpson(x0, f0, x1, f1)
        rm, frm, right = simpson(x1, f1, x2, f2)
        diff = left + right - s
        if depth >= spec.max_depth or abs(diff) <= 15.0 * tol:
            return left + right + diff / 15.0, abs(diff) / 15.0
        lv, le = recurse(x0, f0, x1, f1, lm, flm, left, tol / 2.0, depth + 1)
        rv, re = recurse(x1, f1, x2, f2, rm, frm, right, tol / 2.0, depth + 1)
        return lv + rv, le + re

    value, err = recurse(a, fa, b, fb, mid, fm, whole, spec.abs_tol, 0)
    return QuadratureResult(value, err, evals[0])
