"""Fundamental-limits solver for the block rank-one model.

The Gaussian-channel relative entropy per block,

    D_j(s) = KL( law(sqrt(s) X_j + Z) || law(Z) ),

is computed by numerical integration of p_s log(p_s / phi) with the mixture
marginal p_s. The achievable-overlap formula is the box-constrained program

    max_{q in [0, beta]}  <beta, D(H q)> - (1/4) <q, H q>,    H = Lambda**2,

whose interior critical points are exactly the fixed points q = psi(H q) of
state evolution; the block MMSE lower bound is 1 - q_j*/beta_j.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .denoise import DomainError
from .model import (
    GAUSSIAN,
    RADEMACHER,
    BlockPriorProfile,
    CouplingSet,
    ScalarPrior,
    rng_from,
)
from .se import (
    OperatorT,
    OverlapModel,
    PrecisionError,
    _bg_breaks,
    _leggauss,
    overlap_psi_scalar,
    refine_fixed_point,
)


def _kl_integrand_panels(prior: ScalarPrior, s: float):
    """(integrand, breakpoints) for 2 * int_0^L p_s(y) log(p_s/phi)(y) dy."""
    log_norm = -0.5 * np.log(2.0 * np.pi)
    if prior.kind == GAUSSIAN:
        sig2 = 1.0 + s
        L = 12.0 + 6.0 * np.sqrt(s)
        L = max(L, 10.0 * np.sqrt(sig2))

        def f(y):
            logp = log_norm - 0.5 * np.log(sig2) - np.square(y) / (2.0 * sig2)
            logphi = log_norm - np.square(y) / 2.0
            return np.exp(logp) * (logp - logphi)

        return f, sorted({0.0, np.sqrt(sig2), 3.0 * np.sqrt(sig2), L})
    if prior.kind == RADEMACHER:
        rs = np.sqrt(s)
        L = 12.0 + 6.0 * rs

        def f(y):
            logp = log_norm + np.log(0.5) + np.logaddexp(
                -np.square(y - rs) / 2.0, -np.square(y + rs) / 2.0
            )
            logphi = log_norm - np.square(y) / 2.0
            return np.exp(logp) * (logp - logphi)

        breaks = {0.0, L}
        for v in (max(rs - 4.0, 0.0), rs, rs + 4.0):
            if 0 < v < L:
                breaks.add(v)
        return f, sorted(breaks)
    eps = prior.eps
    sig2 = 1.0 + s / eps
    sig = np.sqrt(sig2)
    L = max(12.0 + 6.0 * np.sqrt(s), 10.0 * sig)

    def f(y):
        y2 = np.square(y)
        log_null = np.log1p(-eps) - y2 / 2.0 if eps < 1.0 else np.full_like(y, -np.inf)
        log_spike = np.log(eps) - 0.5 * np.log(sig2) - y2 / (2.0 * sig2)
        logp = log_norm + np.logaddexp(log_null, log_spike)
        logphi = log_norm - y2 / 2.0
        return np.exp(logp) * (logp - logphi)

    breaks = set(_bg_breaks(s, eps))
    breaks.add(L)
    return f, sorted(v for v in breaks if v <= L)


def _kl_once(prior: ScalarPrior, s: float, order: int) -> float:
    f, breaks = _kl_integrand_panels(prior, s)
    x, w = _leggauss(order)
    total = 0.0
    for a, b in zip(breaks[:-1], breaks[1:]):
        mid, half = (a + b) / 2.0, (b - a) / 2.0
        total += half * float(np.dot(w, f(mid + half * x)))
    return 2.0 * total


def kl_channel(prior: ScalarPrior, s: float, order: int = 80) -> float:
    """KL(P_{sqrt(s) X + Z} || P_Z) >= 0, by panel integration of p log(p/phi);
    the doubled-order evaluation must agree to max(1e-12, 1e-8 |D|)."""
    s = float(s)
    if s < 0:
        raise DomainError(f"SNR must be nonnegative, got {s}")
    if s == 0.0:
        return 0.0
    v1 = _kl_once(prior, s, order)
    v2 = _kl_once(prior, s, 2 * order)
    if abs(v1 - v2) > max(1e-12, 1e-8 * abs(v2)):
        raise PrecisionError(
            f"KL integration not converged for {prior.name} at s={s}: "
            f"|delta| = {abs(v1 - v2):.2e}"
        )
    return max(v2, 0.0)


def kl_channel_monte_carlo(prior: ScalarPrior, s: float, n_samples: int, seed=0) -> float:
    """Independent Monte Carlo estimator E_{y~p_s}[log(p_s/phi)(y)] (oracle)."""
    rng = rng_from(seed)
    x = prior.sample(rng, n_samples)
    y = np.sqrt(s) * x + rng.standard_normal(n_samples)
    if prior.kind == GAUSSIAN:
        sig2 = 1.0 + s
        logratio = -0.5 * np.log(sig2) + np.square(y) * (0.5 - 0.5 / sig2)
    elif prior.kind == RADEMACHER:
        rs = np.sqrt(s)
        logratio = np.log(0.5) + np.logaddexp(rs * y, -rs * y) - s / 2.0
    else:
        eps = prior.eps
        sig2 = 1.0 + s / eps
        log_spike = np.log(eps) - 0.5 * np.log(sig2) + np.square(y) * (0.5 - 0.5 / sig2)
        if eps < 1.0:
            logratio = np.logaddexp(np.log1p(-eps) + np.zeros_like(y), log_spike)
        else:
            logratio = log_spike
    return float(np.mean(logratio))


def immse_consistency(prior: ScalarPrior, s_grid, fd_rel: float = 1e-3) -> float:
    """Max deviation of centered finite differences of kl_channel from half the
    scalar overlap (the I-MMSE identity dD/ds = psi(s)/2)."""
    worst = 0.0
    for s in np.asarray(s_grid, float):
        h = max(1e-4, fd_rel * s)
        fd = (kl_channel(prior, s + h) - kl_channel(prior, max(s - h, 0.0))) / (
            (s + h) - max(s - h, 0.0)
        )
        worst = max(worst, abs(fd - 0.5 * overlap_psi_scalar(prior, s)))
    return worst


class KLTable:
    """Cubic-spline table of D(s) on [0, s_max] for fast sweep evaluation."""

    def __init__(self, prior: ScalarPrior, s_max: float, n_nodes: int = 600):
        self.prior = prior
        self.s_max = float(s_max)
        # quadratic node spacing: denser near 0 where D bends
        u = np.linspace(0.0, 1.0, n_nodes)
        self.nodes = self.s_max * u * u
        vals = np.array([kl_channel(prior, s) for s in self.nodes])
        self._spline = CubicSpline(self.nodes, vals)

    def __call__(self, s):
        s = np.asarray(s, float)
        if np.any(s > self.s_max * (1.0 + 1e-9)):
            raise DomainError("KL table evaluated beyond its range")
        return self._spline(np.clip(s, 0.0, self.s_max))


@dataclass
class VariationalResult:
    q_star: np.ndarray
    objective: float
    mmse_bounds: np.ndarray
    grid_res: int
    refined: bool
    candidates: list            # (q, objective) for all near-optimal branches
    near_degenerate: bool       # multiple separated cells within 1e-10 of the max

    @property
    def d(self) -> int:
        return self.q_star.shape[0]


def _exact_objective(q, beta, H, priors) -> float:
    s = H @ q
    return float(
        sum(b * kl_channel(p, si) for p, b, si in zip(priors, beta, s))
        - 0.25 * q @ H @ q
    )


def _inner_inf_objective(q, beta, H, priors, model: OverlapModel) -> float:
    """Non-PSD fallback: the inner inf over s >= 0 separates per coordinate;
    the minimizer solves beta_j psi_j(s_j) = q_j (monotone, bisection)."""
    from scipy.optimize import brentq

    total = 0.25 * float(q @ H @ q)
    for j, (p, b, qj) in enumerate(zip(priors, beta, q)):
        if qj <= 0:
            continue  # inf at s_j = 0
        target = qj / b
        if target >= 1.0 - 1e-12:
            target = 1.0 - 1e-12
        g = lambda s: overlap_psi_scalar(p, s) - target
        hi = 1.0
        while g(hi) < 0 and hi < 1e8:
            hi *= 4.0
        sj = brentq(g, 0.0, hi, xtol=1e-12)
        total += b * kl_channel(p, sj) - 0.5 * sj * qj
    return total


def variational_solve(
    priors,
    beta,
    lam_sq: np.ndarray,
    grid_res: int = 400,
    refine: bool = True,
    kl_tables: list | None = None,
    model: OverlapModel | None = None,
) -> VariationalResult:
    """Maximize <beta, D(H q)> - (1/4) <q, H q> over the box [0, beta].

    Dense grid scan (spline-tabulated D) plus Newton polish of every candidate
    branch against the exact fixed-point equation q = psi(H q). Candidate
    branches additionally include the SE fixed points reached from a near-zero
    and a near-saturated start, so jump discontinuities are resolved by exact
    objective comparison.
    """
    beta = np.asarray(beta, float)
    H = np.asarray(lam_sq, float)
    d = beta.shape[0]
    priors = list(priors)
    if model is None:
        model = OverlapModel(BlockPriorProfile(tuple(priors), tuple(beta)))
    op = OperatorT(CouplingSet((_sqrt_entrywise(H),)))

    psd = bool(np.linalg.eigvalsh((H + H.T) / 2.0).min() >= -1e-10)
    if kl_tables is None:
        s_caps = H @ beta
        kl_tables = [
            KLTable(p, max(float(c) * 1.001, 1e-6)) for p, c in zip(priors, s_caps)
        ]

    if psd:
        def grid_objective(Q):  # Q: (d, npts) array of q columns
            S = H @ Q
            val = -0.25 * np.einsum("ik,ij,jk->k", Q, H, Q)
            for j in range(d):
                val = val + beta[j] * kl_tables[j](S[j])
            return val
    else:
        def grid_objective(Q):
            return np.array(
                [_inner_inf_objective(Q[:, k], beta, H, priors, model) for k in range(Q.shape[1])]
            )

    per_axis = min(grid_res, max(8, int(round(4e6 ** (1.0 / d)))))
    if not psd:
        per_axis = min(per_axis, 60)  # inner inf is a root solve per point
    axes = [np.linspace(0.0, b, per_axis) for b in beta]
    mesh = np.meshgrid(*axes, indexing="ij")
    Q = np.stack([m.ravel() for m in mesh], axis=0)
    vals = grid_objective(Q)
    vmax = float(vals.max())
    cell = np.array([ax[1] - ax[0] for ax in axes])

    near = np.where(vals >= vmax - 1e-10)[0]
    reps = []
    for idx in near:
        qv = Q[:, idx]
        if all(np.max(np.abs(qv - r) / cell) > 2.0 for r in reps):
            reps.append(qv)
    near_degenerate = len(reps) > 1

    # branch candidates: grid representatives plus SE orbits from both ends
    cand_starts = [r.copy() for r in reps]
    cand_starts.append(np.full(d, 1e-8) * beta)
    cand_starts.append(beta * (1.0 - 1e-6))
    candidates = []
    for q0 in cand_starts:
        if refine:
            qr, _ = refine_fixed_point(model, op, q0)
        else:
            qr = np.clip(q0, 0.0, beta)
        if all(np.abs(qr - qc).max() > 1e-7 for qc, _ in candidates):
            obj = (
                _exact_objective(qr, beta, H, priors)
                if psd
                else _inner_inf_objective(qr, beta, H, priors, model)
            )
            candidates.append((qr, obj))
    candidates.sort(key=lambda t: -t[1])
    q_star, objective = candidates[0]
    bounds = np.clip(1.0 - q_star / beta, 0.0, 1.0)
    return VariationalResult(
        q_star, objective, bounds, per_axis, refine, candidates, near_degenerate
    )


def _sqrt_entrywise(H: np.ndarray) -> np.ndarray:
    if np.any(H < 0):
        raise DomainError("Lambda**2 must be entrywise nonnegative")
    return np.sqrt(H)


@dataclass
class InclusionReport:
    residuals: list
    max_residual: float
    ok: bool


def critical_point_inclusion_check(
    result: VariationalResult,
    model: OverlapModel,
    op: OperatorT,
    tol: float = 1e-6,
) -> InclusionReport:
    """Every returned maximizer must satisfy the SE fixed-point equation
    q = psi(H q) within tol (sup norm)."""
    H = op.hadamard_matrix
    residuals = []
    for q, _ in result.candidates:
        residuals.append(float(np.abs(q - model.psi_vector(H @ q)).max()))
    worst = max(residuals)
    return InclusionReport(residuals, worst, worst < tol)


@dataclass
class SweepRow:
    c: float
    norm_Tc: float
    q_star: np.ndarray
    mmse_bounds: np.ndarray
    branch_flag: str  # "lower" | "upper" | "transition"


def limits_sweep(
    priors,
    beta,
    xi: np.ndarray,
    target_norms,
    grid_res: int = 400,
) -> list[SweepRow]:
    """Variational solve along the single-scalar SNR sweep Lambda**2 = c Xi,
    reporting the implied SNR ||T_c||op = c ||diag(beta) Xi||op per point."""
    beta = np.asarray(beta, float)
    xi = np.asarray(xi, float)
    base_norm = float(np.linalg.norm(np.diag(beta) @ xi, 2))
    targets = np.asarray(target_norms, float)
    cs = targets / base_norm
    priors = list(priors)
    model = OverlapModel(BlockPriorProfile(tuple(priors), tuple(beta)))
    s_cap = float((cs.max() * xi @ beta).max()) * 1.001
    tables = [KLTable(p, max(s_cap, 1e-6)) for p in priors]
    rows = []
    prev_positive = None
    for c, t in zip(cs, targets):
        res = variational_solve(
            priors, beta, c * xi, grid_res=grid_res, kl_tables=tables, model=model
        )
        resid = float(np.abs(res.q_star - model.psi_vector(c * xi @ res.q_star)).max())
        if resid > 1e-5:
            raise PrecisionError(
                f"sweep maximizer violates the SE fixed-point inclusion "
                f"(residual {resid:.2e} at c={c:.4f})"
            )
        positive = bool(res.q_star.max() > 1e-6)
        flag = "upper" if positive else "lower"
        if res.near_degenerate or (
            len(res.candidates) > 1
            and abs(res.candidates[0][1] - res.candidates[1][1]) < 1e-6
            and np.abs(res.candidates[0][0] - res.candidates[1][0]).max() > 1e-3
        ):
            flag = "transition"
        elif prev_positive is not None and positive != prev_positive:
            flag = "transition"
        prev_positive = positive
        rows.append(SweepRow(float(c), float(t), res.q_star, res.mmse_bounds, flag))
    return rows
