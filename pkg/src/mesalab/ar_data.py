"""Sampling and moments for first-order AR processes with unitary diagonal transitions.

A sequence is generated by x_{t+1} = W x_t where W = diag(lambda_1, ..., lambda_d)
and every eigenvalue has unit modulus, so each coordinate evolves as
x_{t,i} = lambda_i^(t-1) x_{1,i}.  The initial token x_1 comes from one of three
controllable distributions (isotropic Gaussian, signed sparse basis vectors, or
the fixed all-ones vector), whose fourth/sixth moments drive the closed-form
training dynamics in :mod:`mesalab.theory`.

Randomness is counter-based: stream ``i`` of master seed ``s`` uses a Philox
generator keyed by ``(s, i)``, so batch generation is reproducible and order
independent (sequence ``i`` of a dataset is the same whether generated
sequentially or in parallel).
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np

UNIT_MODULUS_TOL = 1e-12


def rng_stream(seed: int, stream: int = 0) -> np.random.Generator:
    """Counter-based generator for (seed, stream): Philox keyed by both values."""
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _as_rng(seed: Union[int, np.random.Generator]) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return rng_stream(int(seed))


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TransitionSpectrum:
    """Eigenvalues of the diagonal unitary transition matrix, |lambda_i| = 1."""

    lambdas: np.ndarray

    def __post_init__(self):
        lam = np.asarray(self.lambdas, dtype=complex)
        object.__setattr__(self, "lambdas", lam)
        if lam.ndim != 1 or lam.size < 1:
            raise ValueError("spectrum needs at least one eigenvalue")
        if np.max(np.abs(np.abs(lam) - 1.0)) > UNIT_MODULUS_TOL:
            raise ValueError("all eigenvalues must have unit modulus")

    @property
    def d(self) -> int:
        return self.lambdas.size


@dataclass(frozen=True)
class Gaussian:
    """Initial token with i.i.d. N(0, sigma^2) coordinates."""

    sigma: float
    d: int

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("Gaussian scale sigma must be positive")
        if self.d < 1:
            raise ValueError("dimension must be >= 1")


@dataclass(frozen=True)
class SparseUniform:
    """Initial token drawn uniformly from the 2d signed scaled basis vectors +-c e_i."""

    c: float
    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")


@dataclass(frozen=True)
class FixedOnes:
    """Deterministic all-ones initial token."""

    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ValueError("dimension must be >= 1")


InitialDistribution = Union[Gaussian, SparseUniform, FixedOnes]


@dataclass(frozen=True)
class ARSequence:
    """Trajectory x_1..x_T (rows) together with its generating spectrum."""

    x: np.ndarray
    spectrum: TransitionSpectrum

    def __post_init__(self):
        x = np.asarray(self.x, dtype=complex)
        object.__setattr__(self, "x", x)
        if x.ndim != 2:
            raise ValueError("trajectory must be a T x d array")
        if x.shape[0] < 2:
            raise ValueError("sequence length must be >= 2")
        if x.shape[1] != self.spectrum.d:
            raise ValueError("trajectory dimension does not match spectrum")

    @property
    def T(self) -> int:
        return self.x.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]


@dataclass(frozen=True)
class Moments:
    """Fourth/sixth moments of the initial token: kappa1 = E[x_j^4],
    kappa2 = E[x_j^6], kappa3 = sum_{r != j} E[x_j^2 x_r^4]."""

    kappa1: float
    kappa2: float
    kappa3: float
    d: int


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_spectrum(d: int, seed: Union[int, np.random.Generator]) -> TransitionSpectrum:
    """Unit-modulus eigenvalues with independent uniform phases on [0, 2pi)."""
    if d < 1:
        raise ValueError("dimension must be >= 1")
    rng = _as_rng(seed)
    theta = rng.random(d) * (2.0 * np.pi)
    return TransitionSpectrum(np.exp(1j * theta))


def sample_initial(dist: InitialDistribution, seed: Union[int, np.random.Generator]) -> np.ndarray:
    """Draw one real initial token x_1 from the given distribution."""
    rng = _as_rng(seed)
    if isinstance(dist, Gaussian):
        return rng.standard_normal(dist.d) * dist.sigma
    if isinstance(dist, SparseUniform):
        k = int(rng.integers(2 * dist.d))
        x1 = np.zeros(dist.d)
        x1[k % dist.d] = dist.c if k < dist.d else -dist.c
        return x1
    if isinstance(dist, FixedOnes):
        return np.ones(dist.d)
    raise TypeError(f"unknown initial distribution: {dist!r}")


def generate_sequence(spectrum: TransitionSpectrum, x1: np.ndarray, T: int) -> ARSequence:
    """Closed-form trajectory x_{t,i} = lambda_i^(t-1) x_{1,i} for t = 1..T."""
    x1 = np.asarray(x1)
    if T < 2:
        raise ValueError("sequence length must be >= 2")
    if x1.shape != (spectrum.d,):
        raise ValueError(f"x1 has shape {x1.shape}, expected ({spectrum.d},)")
    powers = spectrum.lambdas[None, :] ** np.arange(T)[:, None]
    return ARSequence(powers * x1[None, :], spectrum)


def generate_sequence_recurrence(spectrum: TransitionSpectrum, x1: np.ndarray, T: int) -> ARSequence:
    """Step-by-step recurrence x_{t+1} = lambda * x_t; test oracle for generate_sequence."""
    x1 = np.asarray(x1)
    if T < 2:
        raise ValueError("sequence length must be >= 2")
    if x1.shape != (spectrum.d,):
        raise ValueError(f"x1 has shape {x1.shape}, expected ({spectrum.d},)")
    x = np.empty((T, spectrum.d), dtype=complex)
    x[0] = x1
    for t in range(T - 1):
        x[t + 1] = spectrum.lambdas * x[t]
    return ARSequence(x, spectrum)


def generate_dataset(
    dist: InitialDistribution,
    n: int,
    T: int,
    seed: int,
    threads: int = 1,
    stream_offset: int = 0,
) -> list[ARSequence]:
    """n independent sequences; sequence i uses the counter-based stream
    (seed, stream_offset + i).

    The per-index streams make the result identical whether generated
    sequentially or with a thread pool; disjoint offsets give disjoint
    datasets (e.g. train vs test) under one master seed.
    """
    if n < 1:
        raise ValueError("dataset size must be >= 1")

    def one(i: int) -> ARSequence:
        rng = rng_stream(seed, stream_offset + i)
        spectrum = sample_spectrum(dist.d, rng)
        x1 = sample_initial(dist, rng)
        return generate_sequence(spectrum, x1, T)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(one, range(n)))
    return [one(i) for i in range(n)]


# ---------------------------------------------------------------------------
# moments
# ---------------------------------------------------------------------------


def closed_form_moments(dist: InitialDistribution) -> Moments:
    """Exact (kappa1, kappa2, kappa3) for Gaussian and SparseUniform tokens.

    Gaussian:       (3 sigma^4, 15 sigma^6, 3 (d-1) sigma^6)
    SparseUniform:  (c^4 / d,   c^6 / d,    0)
    """
    if isinstance(dist, Gaussian):
        s2 = dist.sigma**2
        return Moments(3.0 * s2**2, 15.0 * s2**3, 3.0 * (dist.d - 1) * s2**3, dist.d)
    if isinstance(dist, SparseUniform):
        return Moments(dist.c**4 / dist.d, dist.c**6 / dist.d, 0.0, dist.d)
    if isinstance(dist, FixedOnes):
        raise ValueError("moments undefined for deterministic token")
    raise TypeError(f"unknown initial distribution: {dist!r}")


def empirical_moments(dist: InitialDistribution, n_samples: int, seed: int) -> Moments:
    """Monte Carlo estimate of the three moments, averaged over coordinates.

    Supports FixedOnes too (descriptive values kappa1 = kappa2 = 1,
    kappa3 = d - 1), even though that token violates the zero-odd-moment
    condition the closed-form theory assumes.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    d = dist.d
    x = np.empty((n_samples, d))
    for i in range(n_samples):
        x[i] = sample_initial(dist, rng_stream(seed, i))
    x2 = x**2
    x4 = x2**2
    k1 = float(np.mean(x4))
    k2 = float(np.mean(x2**3))
    # per sample and coordinate j: sum_{r != j} x_j^2 x_r^4, then average over both
    cross = x2 * x4.sum(axis=1, keepdims=True) - x2 * x4
    k3 = float(np.mean(cross))
    return Moments(k1, k2, k3, d)


# ---------------------------------------------------------------------------
# dataset serialization (JSON lines, complex numbers as [re, im] pairs)
# ---------------------------------------------------------------------------


def save_dataset(path: Union[str, Path], dataset: list[ARSequence], seeds: list[int] | None = None) -> None:
    """One record per sequence: {seed, lambdas: [[re, im], ...], x1: [...], T}."""
    path = Path(path)
    if seeds is None:
        seeds = list(range(len(dataset)))
    if len(seeds) != len(dataset):
        raise ValueError("seeds and dataset lengths differ")
    with path.open("w") as fh:
        for seed, seq in zip(seeds, dataset):
            rec = {
                "seed": int(seed),
                "lambdas": [[float(v.real), float(v.imag)] for v in seq.spectrum.lambdas],
                "x1": [float(v) for v in seq.x[0].real],
                "T": int(seq.T),
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path: Union[str, Path]) -> list[ARSequence]:
    """Rebuild sequences from a JSON-lines file via the closed-form generator."""
    out = []
    with Path(path).open() as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            lam = np.array([complex(re, im) for re, im in rec["lambdas"]])
            out.append(generate_sequence(TransitionSpectrum(lam), np.array(rec["x1"], dtype=float), rec["T"]))
    return out
