"""Signal priors, coupling structures, and synthesis of multi-view spiked-matrix data.

Observation convention (rescaled): for a signal X in R^{n x d} and symmetric
couplings Lambda_k,

    Y_k = (1/n) X Lambda_k X^T + (1/sqrt(n)) G_k,

with G_k drawn from a Gaussian Orthogonal Ensemble normalized so off-diagonal
entries have unit variance (diagonal variance 2), i.e. G = (W + W^T)/sqrt(2).

Randomness is driven by ``numpy.random.SeedSequence`` spawning: every consumer
(signal, each of the K noise views, side-information init) gets its own child
stream, so instances are bit-reproducible and views are independent even when
trials run concurrently.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class InvalidDimensionError(ValueError):
    pass


class InvalidProfileError(ValueError):
    pass


class CouplingValidationError(ValueError):
    pass


RADEMACHER = "rademacher"
BERNOULLI_GAUSSIAN = "bg"
GAUSSIAN = "gaussian"


def rng_from(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence, or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, np.random.SeedSequence):
        return np.random.default_rng(seed)
    return np.random.default_rng(np.random.SeedSequence(seed))


def spawn_streams(seed, k: int) -> list[np.random.Generator]:
    """k independent substreams derived from one seed (one per view / trial)."""
    if isinstance(seed, np.random.SeedSequence):
        ss = seed
    else:
        ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(child) for child in ss.spawn(k)]


def tagged_stream(seed: int, tag: int) -> np.random.Generator:
    """Stream keyed by (seed, tag); independent of the spawn children of
    SeedSequence(seed) used for observation noise."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(tag)]))


@dataclass(frozen=True)
class ScalarPrior:
    """Zero-mean, unit-second-moment scalar signal law.

    Supported kinds: "rademacher" (uniform on {-1, +1}), "bg" (Bernoulli-
    Gaussian: X = B*N with B ~ Be(eps), N ~ N(0, 1/eps)), "gaussian"
    (standard normal). BG with eps = 1 coincides with the Gaussian law.
    """

    kind: str
    eps: float | None = None

    def __post_init__(self):
        if self.kind not in (RADEMACHER, BERNOULLI_GAUSSIAN, GAUSSIAN):
            raise InvalidProfileError(f"unknown prior kind {self.kind!r}")
        if self.kind == BERNOULLI_GAUSSIAN:
            if self.eps is None or not (0.0 < self.eps <= 1.0):
                raise InvalidProfileError(
                    f"bernoulli-gaussian sparsity must lie in (0, 1], got {self.eps}"
                )
        elif self.eps is not None:
            raise InvalidProfileError(f"prior {self.kind!r} takes no sparsity parameter")

    @staticmethod
    def rademacher() -> "ScalarPrior":
        return ScalarPrior(RADEMACHER)

    @staticmethod
    def bernoulli_gaussian(eps: float) -> "ScalarPrior":
        return ScalarPrior(BERNOULLI_GAUSSIAN, float(eps))

    @staticmethod
    def gaussian_unit() -> "ScalarPrior":
        return ScalarPrior(GAUSSIAN)

    @staticmethod
    def from_name(name: str) -> "ScalarPrior":
        """Parse CLI identifiers: "rademacher", "gaussian", "bg:<eps>"."""
        name = name.strip().lower()
        if name == RADEMACHER:
            return ScalarPrior.rademacher()
        if name == GAUSSIAN:
            return ScalarPrior.gaussian_unit()
        if name.startswith("bg:"):
            return ScalarPrior.bernoulli_gaussian(float(name[3:]))
        raise InvalidProfileError(f"unknown prior identifier {name!r}")

    @property
    def name(self) -> str:
        if self.kind == BERNOULLI_GAUSSIAN:
            return f"bg:{self.eps:g}"
        return self.kind

    def sample(self, rng: np.random.Generator, size) -> np.ndarray:
        if self.kind == RADEMACHER:
            return rng.integers(0, 2, size=size).astype(float) * 2.0 - 1.0
        if self.kind == GAUSSIAN:
            return rng.standard_normal(size)
        mask = rng.random(size) < self.eps
        return mask * rng.normal(0.0, 1.0 / np.sqrt(self.eps), size=size)


@dataclass(frozen=True)
class BlockPriorProfile:
    """Per-block signal laws with limiting block fractions beta (sum to 1)."""

    priors: tuple[ScalarPrior, ...]
    beta: tuple[float, ...]

    def __post_init__(self):
        if len(self.priors) == 0:
            raise InvalidProfileError("profile needs at least one block")
        if len(self.priors) != len(self.beta):
            raise InvalidProfileError("priors and beta length mismatch")
        b = np.asarray(self.beta, float)
        if np.any(b <= 0) or np.any(b > 1):
            raise InvalidProfileError(f"block fractions must lie in (0, 1], got {self.beta}")
        if abs(b.sum() - 1.0) > 1e-8:
            raise InvalidProfileError(f"block fractions must sum to 1, got {b.sum()}")

    @property
    def d(self) -> int:
        return len(self.priors)

    def block_sizes(self, n: int) -> list[int]:
        """n_j = round(beta_j * n); the last block absorbs the rounding remainder."""
        sizes = [int(round(bj * n)) for bj in self.beta[:-1]]
        sizes.append(n - sum(sizes))
        if any(s <= 0 for s in sizes):
            raise InvalidProfileError(f"n={n} too small for fractions {self.beta}")
        return sizes

    def block_slices(self, n: int) -> list[slice]:
        sizes = self.block_sizes(n)
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        return [slice(int(offsets[j]), int(offsets[j + 1])) for j in range(self.d)]

    def to_dict(self) -> dict:
        return {"priors": [p.name for p in self.priors], "beta": list(self.beta)}

    @staticmethod
    def from_dict(dd: dict) -> "BlockPriorProfile":
        return BlockPriorProfile(
            tuple(ScalarPrior.from_name(s) for s in dd["priors"]),
            tuple(float(b) for b in dd["beta"]),
        )


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CouplingSet:
    """The K coupling matrices Lambda_k (d x d) defining the multi-view model."""

    matrices: tuple[np.ndarray, ...]

    def __post_init__(self):
        if len(self.matrices) == 0:
            raise CouplingValidationError("need at least one coupling matrix")
        mats = tuple(_freeze(m) for m in self.matrices)
        d = mats[0].shape[0]
        for m in mats:
            if m.ndim != 2 or m.shape != (d, d):
                raise CouplingValidationError("coupling matrices must be square with equal size")
        object.__setattr__(self, "matrices", mats)

    @property
    def d(self) -> int:
        return self.matrices[0].shape[0]

    @property
    def K(self) -> int:
        return len(self.matrices)

    def require_symmetric(self):
        for k, m in enumerate(self.matrices):
            if not np.array_equal(m, m.T):
                raise CouplingValidationError(f"coupling matrix {k} is not symmetric")

    def hadamard_square_sum(self) -> np.ndarray:
        """sum_k Lambda_k**2 (entrywise); drives the block-diagonal SNR reduction."""
        return sum(m * m for m in self.matrices)

    @staticmethod
    def heteroskedastic(lam: np.ndarray) -> "CouplingSet":
        lam = np.asarray(lam, float)
        cs = CouplingSet((lam,))
        cs.require_symmetric()
        return cs

    def to_dict(self) -> dict:
        return {"matrices": [m.tolist() for m in self.matrices]}

    @staticmethod
    def from_dict(dd: dict) -> "CouplingSet":
        return CouplingSet(tuple(np.asarray(m, float) for m in dd["matrices"]))


@dataclass(frozen=True)
class EmbeddingInfo:
    """Block coordinates of an asymmetric model inside its symmetric embedding."""

    n1: int
    n2: int
    d1: int
    d2: int
    alpha: float

    @property
    def rows1(self) -> slice:
        return slice(0, self.n1)

    @property
    def rows2(self) -> slice:
        return slice(self.n1, self.n1 + self.n2)

    @property
    def cols1(self) -> slice:
        return slice(0, self.d1)

    @property
    def cols2(self) -> slice:
        return slice(self.d1, self.d1 + self.d2)


@dataclass(frozen=True)
class MTPInstance:
    """A sampled multi-view instance: signal X, observations Y_k, and metadata."""

    n: int
    d: int
    X: np.ndarray
    observations: tuple[np.ndarray, ...]
    seed: int
    couplings: CouplingSet
    profile: BlockPriorProfile | None = None
    embedding: EmbeddingInfo | None = None

    def __post_init__(self):
        object.__setattr__(self, "X", _freeze(self.X))
        object.__setattr__(self, "observations", tuple(_freeze(y) for y in self.observations))

    @property
    def K(self) -> int:
        return len(self.observations)

    def noiseless_part(self, k: int) -> np.ndarray:
        return _exact_sym(self.X @ self.couplings.matrices[k] @ self.X.T) / self.n

    def snr_profile(self) -> np.ndarray:
        """The n x n SNR matrix (Lambda entries tiled over blocks); built on demand."""
        if self.profile is None or self.couplings.K != 1:
            raise InvalidProfileError("snr profile needs a single-view block instance")
        lam = self.couplings.matrices[0]
        slices = self.profile.block_slices(self.n)
        delta = np.empty((self.n, self.n))
        for j, sj in enumerate(slices):
            for l, sl in enumerate(slices):
                delta[sj, sl] = lam[j, l]
        return delta


def _exact_sym(a: np.ndarray) -> np.ndarray:
    """Bit-exact symmetrization (matmul round-off breaks A == A.T for d >= 2)."""
    return (a + a.T) / 2.0


def sample_goe(n: int, seed) -> np.ndarray:
    """Symmetric Gaussian matrix (W + W^T)/sqrt(2): off-diagonal variance 1, diagonal 2."""
    if n < 1:
        raise InvalidDimensionError(f"GOE size must be >= 1, got {n}")
    rng = rng_from(seed)
    w = rng.standard_normal((n, n))
    return (w + w.T) / np.sqrt(2.0)


def sample_signal(profile: BlockPriorProfile, n: int, seed) -> np.ndarray:
    """Block-diagonal signal: row i in block j has its only nonzero in column j."""
    if not isinstance(profile, BlockPriorProfile) or profile.d == 0:
        raise InvalidProfileError("empty or invalid profile")
    if n < profile.d:
        raise InvalidDimensionError(f"n={n} smaller than block count d={profile.d}")
    rng = rng_from(seed)
    X = np.zeros((n, profile.d))
    for j, sl in enumerate(profile.block_slices(n)):
        X[sl, j] = profile.priors[j].sample(rng, sl.stop - sl.start)
    return X


def synthesize_symmetric(
    X: np.ndarray,
    couplings: CouplingSet,
    seed: int,
    profile: BlockPriorProfile | None = None,
) -> MTPInstance:
    """Y_k = (1/n) X Lambda_k X^T + (1/sqrt(n)) G_k with independent GOE noise per view."""
    X = np.asarray(X, float)
    n, d = X.shape
    if couplings.d != d:
        raise CouplingValidationError(f"coupling size {couplings.d} != signal width {d}")
    couplings.require_symmetric()
    streams = spawn_streams(seed, couplings.K)
    obs = []
    for lam, rng in zip(couplings.matrices, streams):
        y = _exact_sym(X @ lam @ X.T) / n + sample_goe(n, rng) / np.sqrt(n)
        obs.append(y)
    return MTPInstance(n, d, X, tuple(obs), int(seed), couplings, profile)


def synthesize_heteroskedastic(
    x: np.ndarray,
    lam: np.ndarray,
    profile: BlockPriorProfile,
    seed: int,
) -> MTPInstance:
    """Rank-one spike with block-constant SNR profile, as a K=1 block-diagonal instance.

    ``x`` is the length-n spike; its block-diagonal lifting X (n x d) carries
    block j of x in column j. The Hadamard form (1/n) (x x^T) o Delta + noise
    and the lifted form (1/n) X Lambda X^T + noise agree entrywise.
    """
    x = np.asarray(x, float).ravel()
    n = x.shape[0]
    lam = np.asarray(lam, float)
    if lam.shape != (profile.d, profile.d):
        raise InvalidDimensionError(
            f"coupling shape {lam.shape} inconsistent with d={profile.d}"
        )
    X = np.zeros((n, profile.d))
    for j, sl in enumerate(profile.block_slices(n)):
        X[sl, j] = x[sl]
    return synthesize_symmetric(X, CouplingSet.heteroskedastic(lam), seed, profile)


def embed_asymmetric(
    X1: np.ndarray,
    X2: np.ndarray,
    gammas: Sequence[np.ndarray],
    seed: int,
) -> MTPInstance:
    """Symmetric embedding of the two-signal model.

    The stacked signal is X1 (+) X2 of size (n1+n2) x (d1+d2) and each coupling
    Gamma_k becomes the symmetric block matrix with sqrt(1+alpha) Gamma_k in the
    off-diagonal blocks, alpha = n2/n1. With the instance-level rescaling this
    reproduces the bipartite observations in the off-diagonal blocks.
    """
    X1 = np.atleast_2d(np.asarray(X1, float))
    X2 = np.atleast_2d(np.asarray(X2, float))
    if X1.shape[0] < X1.shape[1] or X2.shape[0] < X2.shape[1]:
        raise InvalidDimensionError("signals must be tall matrices")
    n1, d1 = X1.shape
    n2, d2 = X2.shape
    alpha = n2 / n1
    scale = np.sqrt(1.0 + alpha)
    mats = []
    for g in gammas:
        g = np.atleast_2d(np.asarray(g, float))
        if g.shape != (d1, d2):
            raise InvalidDimensionError(f"coupling shape {g.shape} != ({d1}, {d2})")
        lam = np.zeros((d1 + d2, d1 + d2))
        lam[:d1, d1:] = scale * g
        lam[d1:, :d1] = scale * g.T
        mats.append(lam)
    X = np.zeros((n1 + n2, d1 + d2))
    X[:n1, :d1] = X1
    X[n1:, d1:] = X2
    inst = synthesize_symmetric(X, CouplingSet(tuple(mats)), seed)
    return dataclasses.replace(inst, embedding=EmbeddingInfo(n1, n2, d1, d2, alpha))


# ---------------------------------------------------------------------------
# serialization: X and each Y_k as CSV, metadata as JSON
# ---------------------------------------------------------------------------

def save_instance(inst: MTPInstance, directory: str):
    os.makedirs(directory, exist_ok=True)
    np.savetxt(os.path.join(directory, "X.csv"), inst.X, delimiter=",")
    for k, y in enumerate(inst.observations):
        np.savetxt(os.path.join(directory, f"Y_{k}.csv"), y, delimiter=",")
    meta = {
        "n": inst.n,
        "d": inst.d,
        "K": inst.K,
        "seed": inst.seed,
        "profile": inst.profile.to_dict() if inst.profile is not None else None,
        "couplings": inst.couplings.to_dict(),
    }
    with open(os.path.join(directory, "instance.json"), "w") as fh:
        json.dump(meta, fh, indent=2)


def load_instance(directory: str) -> MTPInstance:
    with open(os.path.join(directory, "instance.json")) as fh:
        meta = json.load(fh)
    X = np.loadtxt(os.path.join(directory, "X.csv"), delimiter=",", ndmin=2)
    obs = tuple(
        np.loadtxt(os.path.join(directory, f"Y_{k}.csv"), delimiter=",", ndmin=2)
        for k in range(meta["K"])
    )
    profile = BlockPriorProfile.from_dict(meta["profile"]) if meta["profile"] else None
    return MTPInstance(
        meta["n"], meta["d"], X, obs, meta["seed"],
        CouplingSet.from_dict(meta["couplings"]), profile,
    )
