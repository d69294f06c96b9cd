"""Cross-module verification bundle behind the `verify` CLI subcommand.

Each check re-derives an expected value through an independent route (finite
differences, Monte Carlo, closed forms, dual evaluation paths) and records the
measured discrepancy against its threshold.  The bundle exists so CI can gate
on a single exit status.
"""

from __future__ import annotations

import numpy as np

from mesalab import ar_data, attention, theory, training
from mesalab.ar_data import FixedOnes, Gaussian, SparseUniform, rng_stream


def _check(name, passed, measured, threshold, details=""):
    return {
        "name": name,
        "passed": bool(passed),
        "measured": float(measured),
        "threshold": float(threshold),
        "details": details,
    }


def check_gradient_fd(trials: int = 6, inject_gradient_bug: bool = False) -> dict:
    """Analytic gradient vs central finite differences on small random instances."""
    h = 1e-5
    worst = 0.0
    for trial in range(trials):
        rng = rng_stream(2024, trial)
        dataset = ar_data.generate_dataset(Gaussian(1.0, 3), 8, 6, seed=300 + trial)
        X = training.stack_dataset(dataset)
        kernel = training.BatchKernel(X)
        params = attention.AttentionParams(
            rng.standard_normal((6, 6)) * 0.4, rng.standard_normal((3, 6)) * 0.4, 3
        )
        _, grad = kernel.loss_and_gradient(params)
        g_kq = grad.wkq * (1.001 if inject_gradient_bug else 1.0)
        for block, g_block in (("wkq", g_kq), ("wpv", grad.wpv)):
            base = getattr(params, block)
            for idx in np.ndindex(base.shape):
                plus, minus = base.copy(), base.copy()
                plus[idx] += h
                minus[idx] -= h
                if block == "wkq":
                    p_hi = attention.AttentionParams(plus, params.wpv, 3)
                    p_lo = attention.AttentionParams(minus, params.wpv, 3)
                else:
                    p_hi = attention.AttentionParams(params.wkq, plus, 3)
                    p_lo = attention.AttentionParams(params.wkq, minus, 3)
                fd = (kernel.loss(p_hi) - kernel.loss(p_lo)) / (2 * h)
                rel = abs(g_block[idx] - fd) / max(abs(fd), 1e-10)
                worst = max(worst, rel)
    return _check("gradient_finite_difference", worst < 1e-5, worst, 1e-5)


def check_mesa_equivalence(n_seqs: int = 30) -> dict:
    """predict_next == one-step least-squares == closed-form mesa prediction."""
    worst = 0.0
    for i in range(n_seqs):
        rng = rng_stream(77, i)
        spectrum = ar_data.sample_spectrum(5, rng)
        x1 = ar_data.sample_initial(Gaussian(1.0, 5), rng)
        seq = ar_data.generate_sequence(spectrum, x1, 50)
        ab = float(rng.uniform(0.1, 2.0)) * (1.0 if rng.random() < 0.5 else -1.0)
        a = float(np.sqrt(abs(ab)))
        params = attention.DiagonalAB(a, ab / a).to_params(5)
        for t in range(2, 51):
            y_attn = attention.predict_next(params, attention.embed(seq, t))
            _, y_ols = attention.one_step_gd_ols(seq, t, ab / (t - 1))
            y_mesa = attention.mesa_predict(ab, seq, t)
            scale = max(np.max(np.abs(y_mesa)), 1e-12)
            worst = max(
                worst,
                float(np.max(np.abs(y_attn - y_mesa))) / scale,
                float(np.max(np.abs(y_ols - y_mesa))) / scale,
            )
    return _check("mesa_equivalence", worst < 1e-10, worst, 1e-10)


def check_pl_grid() -> dict:
    """Gradient-domination equality on the [-3, 3]^2 grid at 0.1 spacing."""
    coeffs = theory.flow_coefficients(
        ar_data.closed_form_moments(SparseUniform(1.0, 5)), 20
    )
    worst = 0.0
    for a in np.arange(-3.0, 3.0 + 1e-9, 0.1):
        for b in np.arange(-3.0, 3.0 + 1e-9, 0.1):
            res = theory.pl_check(float(a), float(b), coeffs)
            if not res.holds:
                return _check("pl_grid", False, res.lhs - res.rhs, 0.0, f"fails at ({a}, {b})")
            scale = max(abs(res.lhs), abs(res.rhs), res.roundoff_floor * 1e12)
            worst = max(worst, abs(res.lhs - res.rhs) / scale)
    return _check("pl_grid_equality", worst < 1e-12, worst, 1e-12)


def check_moment_agreement(n_samples: int = 50_000) -> dict:
    """Closed-form moments vs Monte Carlo within 3 standard errors."""
    worst_sigmas = 0.0
    for dist in (Gaussian(1.0, 5), Gaussian(0.5, 4), SparseUniform(2.0, 4)):
        closed = ar_data.closed_form_moments(dist)
        x = np.empty((n_samples, dist.d))
        for i in range(n_samples):
            x[i] = ar_data.sample_initial(dist, rng_stream(91, i))
        x2 = x**2
        x4 = x2**2
        per_sample = {
            "kappa1": x4.mean(axis=1),
            "kappa2": (x2**3).mean(axis=1),
            "kappa3": (x2 * x4.sum(axis=1, keepdims=True) - x2 * x4).mean(axis=1),
        }
        for key, samples in per_sample.items():
            se = samples.std(ddof=1) / np.sqrt(n_samples)
            dev = abs(samples.mean() - getattr(closed, key))
            if se == 0.0:
                if dev > 1e-12:
                    return _check("moment_agreement", False, dev, 0.0, f"{dist} {key}")
                continue
            worst_sigmas = max(worst_sigmas, dev / se)
    return _check("moment_agreement", worst_sigmas < 3.0, worst_sigmas, 3.0, "max deviation in SEs")


def check_surrogate_identity(points: int = 100) -> dict:
    """ode_rhs equals minus the numeric gradient of the surrogate loss."""
    coeffs = theory.flow_coefficients(
        ar_data.closed_form_moments(Gaussian(1.0, 5)), 30
    )
    rng = rng_stream(5, 0)
    h = 1e-6
    worst = 0.0
    for _ in range(points):
        a, b = rng.uniform(-2, 2, size=2)
        da, db = theory.ode_rhs(theory.FlowState(a, b, 0.0), coeffs)
        fd_a = (theory.surrogate_loss(a + h, b, coeffs) - theory.surrogate_loss(a - h, b, coeffs)) / (2 * h)
        fd_b = (theory.surrogate_loss(a, b + h, coeffs) - theory.surrogate_loss(a, b - h, coeffs)) / (2 * h)
        scale = max(abs(fd_a), abs(fd_b), 1.0)
        worst = max(worst, abs(da + fd_a) / scale, abs(db + fd_b) / scale)
    return _check("surrogate_gradient_identity", worst < 1e-6, worst, 1e-6)


def check_flow(n_inits: int = 20) -> dict:
    """Random positive starts all reach the same product; a^2 - b^2 conserved."""
    coeffs = theory.flow_coefficients(
        ar_data.closed_form_moments(SparseUniform(1.0, 5)), 20
    )
    target = coeffs.c2 / coeffs.c1
    rng = rng_stream(6, 0)
    worst_ab = 0.0
    worst_drift = 0.0
    for _ in range(n_inits):
        a0, b0 = rng.uniform(0.05, 2.0, size=2)
        res = theory.integrate_flow(a0, b0, coeffs, tol=1e-7)
        if not res.converged:
            return _check("flow_convergence", False, float("inf"), 1e-6, f"init ({a0}, {b0})")
        worst_ab = max(worst_ab, abs(res.ab[-1] - target))
        invariant = res.a**2 - res.b**2
        worst_drift = max(worst_drift, float(np.max(np.abs(invariant - invariant[0]))))
    passed = worst_ab < 1e-6 and worst_drift < 1e-8
    return _check("flow_convergence_conservation", passed, max(worst_ab, worst_drift), 1e-6,
                  f"max |ab - target| = {worst_ab:.2e}, max drift = {worst_drift:.2e}")


def check_gaussian_ratio(sigma: float = 0.5, T: int = 100, n_seqs: int = 3000) -> dict:
    """Mean elementwise prediction ratio at the theoretical fixed point."""
    ab = theory.fixed_point_ab(ar_data.closed_form_moments(Gaussian(sigma, 5)), T)
    predicted = theory.gaussian_ratio_prediction(sigma, T)
    ratios = np.empty(n_seqs)
    for i in range(n_seqs):
        rng = rng_stream(12, i)
        seq = ar_data.generate_sequence(
            ar_data.sample_spectrum(5, rng), ar_data.sample_initial(Gaussian(sigma, 5), rng), T
        )
        yhat = attention.mesa_predict(ab, seq, T - 1)
        ratios[i] = attention.mean_elementwise_ratio(yhat, seq.x[T - 1])
    se = ratios.std(ddof=1) / np.sqrt(n_seqs)
    dev = abs(ratios.mean() - predicted)
    return _check(
        "gaussian_ratio", dev < 3 * se, dev / se, 3.0,
        f"measured {ratios.mean():.5f} vs predicted {predicted:.5f} (asymptote 0.2)",
    )


def check_sparse_mse(c: float = 0.5, T: int = 100, n_seqs: int = 500) -> dict:
    """Exact sequence recovery for the sparse token at ab = 1/c^2."""
    ab = 1.0 / (c * c)
    worst = 0.0
    for i in range(n_seqs):
        rng = rng_stream(13, i)
        seq = ar_data.generate_sequence(
            ar_data.sample_spectrum(5, rng), ar_data.sample_initial(SparseUniform(c, 5), rng), T
        )
        yhat = attention.mesa_predict(ab, seq, T - 1)
        worst = max(worst, float(np.sum(np.abs(yhat - seq.x[T - 1]) ** 2)))
    return _check("sparse_recovery_mse", worst < 1e-3, worst, 1e-3)


def check_ones_probe(d: int = 5, T: int = 10, n_seqs: int = 20000) -> dict:
    """Closed-form all-ones gradients vs Monte Carlo over sampled spectra."""
    a, b = 0.6, 0.9
    g_kq_closed, g_pv_closed = theory.ones_gradient_probe(a, b, d, T)
    dataset = ar_data.generate_dataset(FixedOnes(d), n_seqs, T, seed=21)
    X = training.stack_dataset(dataset)
    params = attention.DiagonalAB(a, b).to_params(d)
    per_kq, per_pv = training.BatchKernel(X).per_sequence_gradients(params)
    worst = 0.0
    for closed, per_seq in (
        (g_kq_closed, per_kq[:, d:, :d]),
        (g_pv_closed, per_pv[:, :, :d]),
    ):
        se = per_seq.std(axis=0, ddof=1) / np.sqrt(n_seqs)
        sigmas = np.abs(per_seq.mean(axis=0) - closed) / np.maximum(se, 1e-14)
        worst = max(worst, float(np.max(sigmas)))
    return _check("ones_gradient_probe_mc", worst < 3.0, worst, 3.0, "max deviation in SEs")


CHECKS = {
    "gradient_finite_difference": check_gradient_fd,
    "mesa_equivalence": check_mesa_equivalence,
    "pl_grid": check_pl_grid,
    "moment_agreement": check_moment_agreement,
    "surrogate_identity": check_surrogate_identity,
    "flow": check_flow,
    "gaussian_ratio": check_gaussian_ratio,
    "sparse_mse": check_sparse_mse,
    "ones_probe": check_ones_probe,
}


def run_verification(inject_gradient_bug: bool = False, only: list[str] | None = None) -> dict:
    """Run the selected checks (all by default); report passes only if all do."""
    names = list(CHECKS) if only is None else only
    checks = []
    for name in names:
        if name == "gradient_finite_difference":
            checks.append(check_gradient_fd(inject_gradient_bug=inject_gradient_bug))
        else:
            checks.append(CHECKS[name]())
    return {
        "schema_version": 1,
        "passed": all(c["passed"] for c in checks),
        "checks": checks,
    }
