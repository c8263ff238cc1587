"""Complex restricted Boltzmann machine wavefunction.

    log psi(S) = sum_i a_i s_i + sum_j log(2 cosh theta_j),
    theta_j    = b_j + sum_i w_ij s_i

All amplitudes live in the log domain.  A single spin flip costs O(M) via the
cached tanh(theta); the cache is rebuilt from scratch every
``REFRESH_EVERY`` flips to bound round-off drift.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .spins import ConstraintError, DimensionError, SpinConfig

REFRESH_EVERY = 1000


@dataclass(frozen=True)
class RbmParams:
    a: np.ndarray
    b: np.ndarray
    w: np.ndarray

    def __post_init__(self):
        for name in ("a", "b", "w"):
            arr = np.array(getattr(self, name), dtype=complex)
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite entries in {name}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.w.shape != (len(self.a), len(self.b)):
            raise DimensionError("w must have shape (n, m)")

    @property
    def n(self) -> int:
        return len(self.a)

    @property
    def m(self) -> int:
        return len(self.b)

    @property
    def n_params(self) -> int:
        return self.n + self.m + self.n * self.m

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.a, self.b, self.w.ravel()])

    @classmethod
    def from_vector(cls, n: int, m: int, vec) -> "RbmParams":
        vec = np.asarray(vec, dtype=complex)
        if len(vec) != n + m + n * m:
            raise DimensionError("parameter vector has the wrong length")
        return cls(vec[:n], vec[n:n + m], vec[n + m:].reshape(n, m))

    @classmethod
    def zeros(cls, n: int, m: int) -> "RbmParams":
        return cls(np.zeros(n), np.zeros(m), np.zeros((n, m)))


@dataclass(frozen=True)
class RbmCache:
    theta: np.ndarray
    tanh_theta: np.ndarray
    log_psi: complex
    flips: int = 0


def _complex_normal(rng, var, shape):
    # the stated variance is split equally between real and imaginary parts
    sd = np.sqrt(var / 2)
    return rng.normal(0.0, sd, shape) + 1j * rng.normal(0.0, sd, shape)


def init_params(n: int, m: int, rng) -> RbmParams:
    """Gaussian start with Var(a) = 1/n, Var(b) = 1/m, Var(w) = 1/(n m)."""
    if n < 1 or m < 1:
        raise ValueError("need n, m >= 1")
    rng = np.random.default_rng(rng)
    a = _complex_normal(rng, 1.0 / n, n)
    b = _complex_normal(rng, 1.0 / m, m)
    w = _complex_normal(rng, 1.0 / (n * m), (n, m))
    return RbmParams(a, b, w)


def log2cosh(z):
    """log(2 cosh z), overflow-free; the branch is fixed per factor."""
    z = np.asarray(z, dtype=complex)
    z = np.where(z.real < 0, -z, z)
    return z + np.log1p(np.exp(-2.0 * z))


def _spins(config):
    if isinstance(config, SpinConfig):
        return config.spins.astype(float)
    return np.asarray(config, dtype=float)


def _check(params, config):
    n = config.n if isinstance(config, SpinConfig) else len(config)
    if n != params.n:
        raise DimensionError(f"config has {n} spins, network has {params.n}")


def theta(params: RbmParams, config) -> np.ndarray:
    return params.b + _spins(config) @ params.w


def log_psi(params: RbmParams, config) -> complex:
    _check(params, config)
    s = _spins(config)
    return complex(params.a @ s + np.sum(log2cosh(params.b + s @ params.w)))


def new_cache(params: RbmParams, config) -> RbmCache:
    _check(params, config)
    th = theta(params, config)
    return RbmCache(th, np.tanh(th), log_psi(params, config))


def _flip_factors(params, s_i, i):
    x = 2.0 * params.w[i] * s_i
    return np.cosh(x), np.sinh(x)


def ratio_flip(params: RbmParams, cache: RbmCache, config, i: int) -> complex:
    """psi(S with spin i flipped) / psi(S) in O(M)."""
    s_i = _spins(config)[i]
    ch, sh = _flip_factors(params, s_i, i)
    return complex(np.exp(-2.0 * params.a[i] * s_i) * np.prod(ch - cache.tanh_theta * sh))


def log_ratio_flips(params: RbmParams, cache: RbmCache, config, sites) -> complex:
    """log psi(S with all ``sites`` flipped) - log psi(S)."""
    s = _spins(config)
    sites = list(sites)
    if not sites:
        return 0j
    x = 2.0 * np.sum(params.w[sites] * s[sites, None], axis=0)
    vis = -2.0 * np.sum(params.a[sites] * s[sites])
    return complex(vis + np.sum(np.log(np.cosh(x) - cache.tanh_theta * np.sinh(x))))


def update_cache_flip(params: RbmParams, cache: RbmCache, config, i: int) -> RbmCache:
    """Cache for the configuration obtained by flipping spin i of ``config``."""
    s_i = _spins(config)[i]
    ch, sh = _flip_factors(params, s_i, i)
    t = cache.tanh_theta
    denom = ch - t * sh
    lp = cache.log_psi - 2.0 * params.a[i] * s_i + np.sum(np.log(denom))
    flips = cache.flips + 1
    if flips >= REFRESH_EVERY:
        flipped = config.flip(i) if isinstance(config, SpinConfig) else _flipped_array(config, i)
        return new_cache(params, flipped)
    return RbmCache(cache.theta - 2.0 * params.w[i] * s_i, (t * ch - sh) / denom, complex(lp), flips)


def _flipped_array(config, i):
    s = np.array(config, dtype=float)
    s[i] = -s[i]
    return s


def derivatives(params: RbmParams, cache: RbmCache, config) -> np.ndarray:
    """d log psi / dW in (a, b, w) order: s_i, tanh theta_j, s_i tanh theta_j."""
    s = _spins(config)
    t = cache.tanh_theta
    return np.concatenate([s.astype(complex), t, np.outer(s, t).ravel()])


def apply_even_site_z(params: RbmParams) -> RbmParams:
    """Apply prod_i Z_{2i} (1-based even sites): a_{2i} -> a_{2i} - i pi / 2."""
    if params.n % 2:
        raise ConstraintError("even-site transform needs an even number of spins")
    a = np.array(params.a)
    a[1::2] -= 0.5j * np.pi
    return replace(params, a=a)


class Rbm:
    """Object form of the wavefunction contract consumed by :mod:`nqes.ensemble`."""

    def __init__(self, params: RbmParams):
        self.params = params

    @property
    def n(self) -> int:
        return self.params.n

    @property
    def n_params(self) -> int:
        return self.params.n_params

    def log_psi(self, config) -> complex:
        return log_psi(self.params, config)

    def new_cache(self, config) -> RbmCache:
        return new_cache(self.params, config)

    def ratio_flip(self, cache, config, i) -> complex:
        return ratio_flip(self.params, cache, config, i)

    def log_psi_flipped(self, cache, config, sites) -> complex:
        return cache.log_psi + log_ratio_flips(self.params, cache, config, sites)

    def update_cache_flip(self, cache, config, i) -> RbmCache:
        return update_cache_flip(self.params, cache, config, i)

    def derivatives(self, cache, config) -> np.ndarray:
        return derivatives(self.params, cache, config)
