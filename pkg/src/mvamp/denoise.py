"""Bayes-optimal conditional-mean denoisers and their analytic derivatives.

All scalar denoisers act on the standardized channel  y = sqrt(s) X + Z  with
Z ~ N(0,1) independent of X, and return E[X | y]. The Bernoulli-Gaussian case
is evaluated through the mixture responsibility in log space so it stays
finite for arbitrarily large |y|.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .model import GAUSSIAN, RADEMACHER, BlockPriorProfile, ScalarPrior


class DomainError(ValueError):
    pass


class NumericalConditioningError(RuntimeError):
    pass


class DiagonalProjectionWarning(UserWarning):
    """Off-diagonal effective SNR projected away in strict block mode."""


@dataclass(frozen=True)
class DenoiserEval:
    """Denoised matrix together with the averaged-derivative matrix D_hat.

    divergence[j, k] = (1/n) sum_i d/dY[i, j] value[i, k]; for separable
    block denoisers this is diagonal.
    """

    value: np.ndarray
    divergence: np.ndarray


@dataclass(frozen=True)
class ChannelParams:
    """Effective SNR matrix S (symmetrized on input, PSD within 1e-10)."""

    S: np.ndarray

    def __post_init__(self):
        S = np.asarray(self.S, float)
        S = (S + S.T) / 2.0
        lo = float(np.linalg.eigvalsh(S).min()) if S.size else 0.0
        if lo < -1e-10 * max(1.0, float(np.abs(S).max())):
            raise DomainError(f"effective SNR not PSD (min eigenvalue {lo:.3e})")
        S = S.copy()
        S.flags.writeable = False
        object.__setattr__(self, "S", S)

    @property
    def d(self) -> int:
        return self.S.shape[0]


def _check_snr(s: float) -> float:
    s = float(s)
    if s < 0:
        raise DomainError(f"channel SNR must be nonnegative, got {s}")
    return s


def _bg_responsibility(y, s: float, eps: float):
    """P(spike | y) for the BG(eps) channel, evaluated stably.

    The spike component of the marginal is N(0, sig2) with sig2 = 1 + s/eps;
    the logit is log(eps/(1-eps)) - log(sig)/... assembled below.
    """
    sig2 = 1.0 + s / eps
    log_spike = np.log(eps) - 0.5 * np.log(sig2) - np.square(y) / (2.0 * sig2)
    if eps >= 1.0:
        return np.ones_like(np.asarray(y, float))
    log_null = np.log1p(-eps) - np.square(y) / 2.0
    return 1.0 / (1.0 + np.exp(np.clip(log_null - log_spike, -745.0, 745.0)))


def posterior_mean_scalar(prior: ScalarPrior, s: float, y):
    """E[X | sqrt(s) X + Z = y]; vectorized over y."""
    s = _check_snr(s)
    y = np.asarray(y, float)
    if s == 0.0:
        return np.zeros_like(y)
    rs = np.sqrt(s)
    if prior.kind == RADEMACHER:
        return np.tanh(rs * y)
    if prior.kind == GAUSSIAN:
        return rs / (1.0 + s) * y
    eps = prior.eps
    r = _bg_responsibility(y, s, eps)
    return r * rs * y / (eps + s)


def posterior_mean_derivative_scalar(prior: ScalarPrior, s: float, y):
    """d/dy of posterior_mean_scalar; matches centered finite differences."""
    s = _check_snr(s)
    y = np.asarray(y, float)
    if s == 0.0:
        return np.zeros_like(y)
    rs = np.sqrt(s)
    if prior.kind == RADEMACHER:
        t = np.tanh(rs * y)
        return rs * (1.0 - t * t)
    if prior.kind == GAUSSIAN:
        return np.full_like(y, rs / (1.0 + s))
    eps = prior.eps
    r = _bg_responsibility(y, s, eps)
    gamma = s / (eps + s)  # d logit / dy = gamma * y
    return rs / (eps + s) * (r + r * (1.0 - r) * gamma * np.square(y))


def posterior_variance_scalar(prior: ScalarPrior, s: float, y):
    """Var(X | sqrt(s) X + Z = y); closed form per prior."""
    s = _check_snr(s)
    y = np.asarray(y, float)
    if s == 0.0:
        return np.ones_like(y)
    if prior.kind == RADEMACHER:
        t = np.tanh(np.sqrt(s) * y)
        return 1.0 - t * t
    if prior.kind == GAUSSIAN:
        return np.full_like(y, 1.0 / (1.0 + s))
    eps = prior.eps
    r = _bg_responsibility(y, s, eps)
    mean_spike = np.sqrt(s) * y / (eps + s)
    second = r * (1.0 / (eps + s) + mean_spike**2)
    return second - (r * mean_spike) ** 2


def block_denoiser(
    profile: BlockPriorProfile,
    params: ChannelParams,
    Y: np.ndarray,
    strict_diagonal: bool = True,
) -> DenoiserEval:
    """Separable Bayes denoiser for block-diagonal signals.

    Entry (i, j) with i in block j is the scalar posterior mean at SNR
    s_j = S[j, j]; all off-block entries are zero. In strict mode an
    off-diagonal S is projected to its diagonal with a warning (finite-n AMP
    bookkeeping can carry O(1/sqrt(n)) off-diagonal residue).
    """
    S = params.S
    d = profile.d
    if S.shape != (d, d):
        raise DomainError(f"SNR shape {S.shape} != ({d}, {d})")
    Y = np.asarray(Y, float)
    n = Y.shape[0]
    if Y.shape[1] != d:
        raise DomainError(f"iterate width {Y.shape[1]} != d={d}")
    off = S - np.diag(np.diag(S))
    if strict_diagonal and np.abs(off).max() > 1e-8 * (1.0 + np.abs(np.diag(S)).max()):
        warnings.warn(
            f"projecting off-diagonal effective SNR (max |off| = {np.abs(off).max():.2e})",
            DiagonalProjectionWarning,
        )
    s = np.clip(np.diag(S), 0.0, None)
    value = np.zeros_like(Y)
    div = np.zeros((d, d))
    for j, sl in enumerate(profile.block_slices(n)):
        col = Y[sl, j]
        value[sl, j] = posterior_mean_scalar(profile.priors[j], s[j], col)
        div[j, j] = posterior_mean_derivative_scalar(profile.priors[j], s[j], col).sum() / n
    return DenoiserEval(value, div)


def gaussian_matrix_denoiser(V: np.ndarray, S: np.ndarray, Y: np.ndarray) -> DenoiserEval:
    """Conditional mean for a zero-mean Gaussian prior with factored covariance.

    The prior on vec(X) (column-major) is N(0, V V^T) with V of shape (n*d, q);
    the channel is vec(Y) = (S^{1/2} (x) I_n) vec(X) + vec(Z). The estimator is

        g(y) = V (I_q + V^T (S (x) I_n) V)^{-1} V^T (S^{1/2} (x) I_n) y,

    all evaluated through q x q solves. The divergence is the partial trace of
    the linear map, computed without materializing it.
    """
    Y = np.asarray(Y, float)
    n, d = Y.shape
    V = np.asarray(V, float)
    if V.shape[0] != n * d:
        raise DomainError(f"factor rows {V.shape[0]} != n*d = {n * d}")
    S = np.asarray(S, float)
    S = (S + S.T) / 2.0
    evals, evecs = np.linalg.eigh(S)
    if evals.min() < -1e-10 * max(1.0, evals.max(initial=1.0)):
        raise DomainError("S must be PSD")
    root = evecs @ np.diag(np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
    q = V.shape[1]
    Vb = V.reshape(d, n, q)  # block rows of V per signal column (column-major vec)
    # W = V^T (S (x) I_n) V and  U = V^T (S^{1/2} (x) I_n), assembled blockwise
    W = np.zeros((q, q))
    for a in range(d):
        for b in range(d):
            if S[a, b] != 0.0:
                W += S[a, b] * (Vb[a].T @ Vb[b])
    A = np.eye(q) + W
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > 1e12:
        raise NumericalConditioningError(f"inner solve ill-conditioned (cond={cond:.3e})")
    # t = V^T (S^{1/2} (x) I_n) vec(Y)
    YR = Y @ root  # n x d, column a of YR is sum_b root[b,a] Y[:,b]
    t = np.zeros(q)
    for a in range(d):
        t += Vb[a].T @ YR[:, a]
    coef = np.linalg.solve(A, t)
    vec_val = V @ coef
    value = vec_val.reshape(d, n).T  # undo column-major vec
    # divergence: D[j, k] = (1/n) sum_i d value[i, k] / d Y[i, j]
    # the map is  G = V A^{-1} V^T (S^{1/2} (x) I_n); its (k, j) partial trace
    # is tr(Vb[k] A^{-1} (sum_a root[a, j] Vb[a]^T)) restricted to matching rows.
    Ainv = np.linalg.inv(A)
    div = np.zeros((d, d))
    for j in range(d):
        for k in range(d):
            m = np.zeros((q, q))
            for a in range(d):
                if root[a, j] != 0.0:
                    m += root[a, j] * (Vb[a].T @ Vb[k])
            div[j, k] = np.trace(Ainv @ m) / n
    return DenoiserEval(value, div)
