"""Named verification properties behind the `check` CLI command.

Each property returns (ok, detail); the suite is the release gate and is also
exercised by the acceptance tests.  Kept separate from the pytest suite so a
deployed build can self-verify without test tooling.
"""

from __future__ import annotations

import math

import numpy as np

from .bounds import (
    clipped_subgaussian_bound,
    delta_factor,
    flatness_estimate,
    grad_variance_trace,
    kl_gaussian,
    lemma1_check,
    random_convolution_cases,
    traj_subgaussian_bound,
    traj_subgaussian_general,
    tv_gaussian_1d,
    zeta_factor,
    StepStats,
)
from .nn import (
    CrossEntropy,
    PureQuadratic,
    init_mlp,
    flatten_params,
    loss_eval,
    loss_gradient,
    set_flat_params,
)
from .optim import NoiseSchedule, SurrogateState, clip_gradient, sample_noise, t1pm_virtual
from .rng import STREAM_FLATNESS, STREAM_NOISE, StreamKey, make_rng

ETA_GRID = (1e-6, 1e-4, 1e-2, 0.1, 0.5, 1.0)
ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)


def _check_gradients() -> tuple[bool, str]:
    worst = 0.0
    checked = 0
    rng = np.random.Generator(np.random.Philox(key=11))
    for width in (4, 16, 64):
        model = init_mlp((12, width, 5), seed=width)
        x = rng.uniform(0, 1, size=(6, 12))
        y = rng.integers(0, 5, size=6)
        analytic = loss_gradient(CrossEntropy(), model, x, y)
        theta = flatten_params(model)
        coords = rng.choice(theta.size, size=70, replace=False)
        for i in coords:
            h = 1e-5 * (1.0 + abs(theta[i]))
            up = theta.copy(); up[i] += h
            dn = theta.copy(); dn[i] -= h
            set_flat_params(model, up)
            lp = loss_eval(CrossEntropy(), model, x, y)
            set_flat_params(model, dn)
            lm = loss_eval(CrossEntropy(), model, x, y)
            set_flat_params(model, theta)
            fd = (lp - lm) / (2 * h)
            denom = max(abs(fd), abs(analytic[i]), 1e-8)
            worst = max(worst, abs(fd - analytic[i]) / denom)
            checked += 1
    return worst < 1e-4, f"{checked} coordinates, worst relative error {worst:.3g}"


def _check_delta_below_eta() -> tuple[bool, str]:
    worst = -math.inf
    for eta in ETA_GRID:
        for alpha in ALPHA_GRID:
            excess = delta_factor(eta, alpha) / eta - 1.0
            worst = max(worst, excess)
            if excess > 0:
                return False, f"delta > eta at eta={eta}, alpha={alpha} (excess {excess:.3g})"
    return True, f"delta <= eta on {len(ETA_GRID) * len(ALPHA_GRID)} grid points (max ratio-1 {worst:.3g})"


def _check_delta_closed_form() -> tuple[bool, str]:
    eta = 0.01
    # At alpha = 1/2 the substitution u = t^2 integrates exactly:
    # integral_0^eta e^sqrt(u) du = 2[(sqrt(eta)-1)e^sqrt(eta) + 1].
    root = math.sqrt(eta)
    closed = math.exp(-root) * 2.0 * ((root - 1.0) * math.exp(root) + 1.0)
    value = delta_factor(eta, 0.5)
    return abs(value - closed) < 1e-8, f"delta(0.01, 0.5) = {value:.10g} vs closed form {closed:.10g}"


def _check_delta_small_step() -> tuple[bool, str]:
    ratio = delta_factor(1e-8, 0.5) / 1e-8
    return 0.999 <= ratio <= 1.0, f"delta(1e-8, 0.5)/1e-8 = {ratio:.8f}"


def _check_zeta_matches_delta() -> tuple[bool, str]:
    worst = 0.0
    for eta in (1e-4, 1e-2, 0.5):
        for alpha in (0.2, 0.5, 0.8):
            for lam in (1e-6, 1e-2, 1.0):
                diff = abs(zeta_factor(eta, alpha, lam, lam) - delta_factor(eta, alpha))
                worst = max(worst, diff)
    return worst <= 1e-10, f"max |zeta(l,l) - delta| = {worst:.3g}"


def _check_general_matches_isotropic() -> tuple[bool, str]:
    records_iso = [StepStats(eta=0.01, trace_var=2.0, batch_size=4, sigma=0.005)] * 7
    records_gen = [
        StepStats(eta=0.01, trace_var=2.0, batch_size=4, diag=np.full(12, 0.005**2))
    ] * 7
    a = traj_subgaussian_bound(records_iso, 1.0, 12, 500)
    b = traj_subgaussian_general(records_gen, 1.0, 12, 500)
    rel = abs(a - b) / a
    return rel <= 1e-14, f"relative difference {rel:.3g}"


def _check_clipped_sqrt_k() -> tuple[bool, str]:
    eta, sigma, clip, big_r, d, n = 0.1, 0.1, 5.0, 1.0, 2, 100
    worst = 0.0
    for k in (1, 4, 9, 50):
        acc = clipped_subgaussian_bound(big_r, d, n, clip, [(eta, sigma)] * k)
        closed = math.sqrt(big_r**2 * d * k * math.log1p(clip**2 * eta**2 / sigma**2) / n)
        worst = max(worst, abs(acc - closed) / closed)
    return worst <= 1e-12, f"max relative deviation from sqrt(k) closed form {worst:.3g}"


def _check_lemma1_grid() -> tuple[bool, str]:
    from .bounds import GaussianConvolutionCase

    analytic = lemma1_check(GaussianConvolutionCase(0.0, 1.0, 1.0, 1.0))
    if not (abs(analytic["lhs"] - 0.25) < 1e-12 and abs(analytic["rhs"] - 0.5) < 1e-12):
        return False, f"analytic case gave lhs={analytic['lhs']}, rhs={analytic['rhs']}"
    for case in random_convolution_cases(100, seed=2024):
        res = lemma1_check(case)
        if not res["holds"]:
            return False, f"violated at {case}"
    return True, "analytic case lhs=0.25 <= rhs=0.5 plus 100 randomized cases"


def _check_pinsker() -> tuple[bool, str]:
    rng = np.random.Generator(np.random.Philox(key=7))
    for _ in range(100):
        mu1, mu2 = rng.uniform(-3, 3, size=2)
        v1, v2 = rng.uniform(0.05, 5.0, size=2)
        tv = tv_gaussian_1d(mu1, v1, mu2, v2)
        bound = math.sqrt(kl_gaussian(mu1, v1, mu2, v2) / 2.0)
        if tv > bound + 1e-12:
            return False, f"TV {tv} > sqrt(KL/2) {bound} at ({mu1},{v1},{mu2},{v2})"
    return True, "TV <= sqrt(KL/2) on 100 random 1-D Gaussian pairs"


def _check_flatness_oracle() -> tuple[bool, str]:
    d, sigma = 10, 0.1
    model = init_mlp((9, 1), seed=3)  # 9 weights + 1 bias = 10 parameters
    assert model.num_params == d
    theta = make_rng(5, 9).normal(size=d)
    set_flat_params(model, theta)
    x = np.zeros((2, model.input_dim))
    y = np.zeros(2, dtype=int)
    noise = NoiseSchedule.isotropic(sigma)
    xi, se = flatness_estimate(
        PureQuadratic(), model, theta, x, y, noise, 1, 256, StreamKey(5, STREAM_FLATNESS)
    )
    target = d * sigma**2
    ok = abs(xi - target) <= 3 * se
    return ok, f"estimate {xi:.6f} vs d*sigma^2 = {target} (3*SE = {3 * se:.6f})"


def _check_grad_variance() -> tuple[bool, str]:
    rng = np.random.Generator(np.random.Philox(key=13))
    grads = rng.normal(size=(50, 7))
    stats = grad_variance_trace(list(grads))
    brute = sum(float(np.var(grads[:, j])) for j in range(7))
    diff = abs(stats.trace_variance - brute)
    return diff <= 1e-12, f"|trace - bruteforce| = {diff:.3g}"


def _check_clip() -> tuple[bool, str]:
    rng = np.random.Generator(np.random.Philox(key=17))
    for _ in range(50):
        g = rng.normal(size=rng.integers(1, 30)) * rng.uniform(0.1, 100)
        a = rng.uniform(0.01, 10)
        once = clip_gradient(g, a)
        twice = clip_gradient(once, a)
        if not np.array_equal(once, twice):
            return False, "clip(clip(g)) != clip(g)"
        if np.linalg.norm(once) > a * (1 + 1e-9):
            return False, "clipped norm exceeds threshold"
    return True, "idempotent and norm-capped on 50 random gradients"


def _check_t1pm_closed_form() -> tuple[bool, str]:
    d, steps = 6, 40
    noise = NoiseSchedule.isotropic(0.05)
    state = SurrogateState.zeros(d)
    theta = np.zeros(d)
    recursive = np.zeros(d)
    g = make_rng(23, 9).normal(size=d)
    eta = 0.01
    for k in range(1, steps + 1):
        eps = sample_noise(noise, k, d, make_rng(23, STREAM_NOISE, k))
        theta = theta - eta * g
        recursive = recursive - eta * g + eps
        state.update(eps)
    diff = float(np.max(np.abs(t1pm_virtual(theta, state) - recursive)))
    return diff <= 1e-12, f"max |closed form - recursion| = {diff:.3g} after {steps} steps"


def _check_noise_variance() -> tuple[bool, str]:
    sigma, draws = 0.005, 100_000
    noise = NoiseSchedule.isotropic(sigma)
    samples = sample_noise(noise, 1, draws, make_rng(29, STREAM_NOISE, 1))
    var = float(samples.var())
    rel = abs(var - sigma**2) / sigma**2
    return rel < 0.05, f"empirical variance {var:.3e} vs {sigma**2:.3e} (rel {rel:.3%})"


PROPERTIES = [
    ("gradient_vs_finite_differences", _check_gradients),
    ("delta_below_step_size", _check_delta_below_eta),
    ("delta_closed_form_value", _check_delta_closed_form),
    ("delta_small_step_limit", _check_delta_small_step),
    ("zeta_matches_delta_isotropic", _check_zeta_matches_delta),
    ("subgaussian_general_matches_isotropic", _check_general_matches_isotropic),
    ("clipped_accumulation_sqrt_k", _check_clipped_sqrt_k),
    ("lemma1_convolution_grid", _check_lemma1_grid),
    ("pinsker_tv_vs_kl", _check_pinsker),
    ("flatness_quadratic_oracle", _check_flatness_oracle),
    ("grad_variance_bruteforce", _check_grad_variance),
    ("clip_idempotent_and_capped", _check_clip),
    ("cumulative_noise_closed_form", _check_t1pm_closed_form),
    ("noise_variance_montecarlo", _check_noise_variance),
]


def run_property_suite() -> list[tuple[str, bool, str]]:
    results = []
    for name, fn in PROPERTIES:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crashing property is a failing property
            ok, detail = False, f"raised {type(exc).__name__}: {exc}"
        results.append((name, ok, detail))
    return results
