"""Bit-packed spin configurations and two-body spin Hamiltonians.

Encoding: site ``i`` lives in bit ``i`` of the packed words, bit 0 is spin up
(s = +1) and bit 1 is spin down (s = -1).  As a string, site 0 is written
first, so ``"01100"`` is up, down, down, up, up.

A :class:`Hamiltonian` is

    H = sum_{i<j} [cx_ij X_i X_j + cy_ij Y_i Y_j + cz_ij Z_i Z_j]
        + sum_i [hx_i X_i + hz_i Z_i]

stored as dense coefficient matrices, since every model we care about is
all-to-all.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

MAX_SPINS = 512
_WORD = 64


class DimensionError(ValueError):
    """Operands disagree on the number of spins."""


class ConstraintError(ValueError):
    """A model parameter violates a structural constraint."""


def _popcount(x: int) -> int:
    return bin(x).count("1")


@dataclass(frozen=True)
class SpinConfig:
    """Immutable packed spin configuration of ``n`` spins."""

    bits: int
    n: int

    def __post_init__(self):
        if not 1 <= self.n <= MAX_SPINS:
            raise DimensionError(f"spin count {self.n} outside [1, {MAX_SPINS}]")
        if self.bits < 0 or self.bits >> self.n:
            raise ValueError("bits set beyond position n-1")

    @classmethod
    def from_spins(cls, spins) -> "SpinConfig":
        s = np.asarray(spins)
        bits = 0
        for i, v in enumerate(s):
            if v == -1:
                bits |= 1 << i
            elif v != 1:
                raise ValueError("spin values must be +1 or -1")
        return cls(bits, len(s))

    @classmethod
    def from_string(cls, text: str) -> "SpinConfig":
        bits = 0
        for i, ch in enumerate(text):
            if ch == "1":
                bits |= 1 << i
            elif ch != "0":
                raise ValueError(f"invalid bit character {ch!r}")
        return cls(bits, len(text))

    @classmethod
    def all_up(cls, n: int) -> "SpinConfig":
        return cls(0, n)

    @property
    def words(self) -> np.ndarray:
        """The configuration as little-endian 64-bit words."""
        nw = (self.n + _WORD - 1) // _WORD
        mask = (1 << _WORD) - 1
        return np.array([(self.bits >> (_WORD * k)) & mask for k in range(nw)], dtype=np.uint64)

    def spin(self, i: int) -> int:
        return 1 - 2 * ((self.bits >> i) & 1)

    @property
    def spins(self) -> np.ndarray:
        idx = np.arange(self.n)
        if self.n <= 63:
            b = (np.int64(self.bits) >> idx) & 1
        else:
            b = np.array([(self.bits >> i) & 1 for i in idx])
        return (1 - 2 * b).astype(np.int8)

    def flip(self, *sites: int) -> "SpinConfig":
        bits = self.bits
        for i in sites:
            bits ^= 1 << i
        return SpinConfig(bits, self.n)

    def rotate(self, k: int = 1) -> "SpinConfig":
        """Cyclic rotation within n bits: site i takes the bit of site i+k."""
        k %= self.n
        mask = (1 << self.n) - 1
        bits = ((self.bits >> k) | (self.bits << (self.n - k))) & mask
        return SpinConfig(bits, self.n)

    def __str__(self) -> str:
        return "".join(str((self.bits >> i) & 1) for i in range(self.n))


@dataclass(frozen=True)
class Connection:
    target: SpinConfig
    amplitude: float


@dataclass(frozen=True, eq=False)
class Hamiltonian:
    """Generic two-body spin Hamiltonian (see module docstring).

    ``nn_zz`` is set by the chain constructors when the only ZZ couplings are
    a uniform periodic nearest-neighbour bond of strength ``nn_zz``; the
    diagonal then goes through the rotate/xor/popcount path.
    """

    n: int
    cx: np.ndarray
    cy: np.ndarray
    cz: np.ndarray
    hx: np.ndarray
    hz: np.ndarray
    name: str = "custom"
    nn_zz: float | None = None
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.n
        for label in ("cx", "cy", "cz"):
            c = np.array(getattr(self, label), dtype=float)
            if c.shape != (n, n):
                raise DimensionError(f"{label} must be {n}x{n}")
            if not np.allclose(c, c.T, atol=1e-12, rtol=0):
                raise ConstraintError(f"{label} is not symmetric")
            if np.any(np.diag(c) != 0):
                raise ConstraintError(f"{label} has a nonzero diagonal")
            c.setflags(write=False)
            object.__setattr__(self, label, c)
        for label in ("hx", "hz"):
            h = np.array(getattr(self, label), dtype=float)
            if h.shape != (n,):
                raise DimensionError(f"{label} must have length {n}")
            h.setflags(write=False)
            object.__setattr__(self, label, h)
        if self.nn_zz is not None and n < 3:
            object.__setattr__(self, "nn_zz", None)
        iu, ju = np.triu_indices(n, 1)
        anti = (self.cx + self.cy)[iu, ju]
        par = (self.cx - self.cy)[iu, ju]
        keep = (anti != 0) | (par != 0)
        object.__setattr__(self, "pair_i", iu[keep].astype(np.int64))
        object.__setattr__(self, "pair_j", ju[keep].astype(np.int64))
        object.__setattr__(self, "amp_anti", np.ascontiguousarray(anti[keep]))
        object.__setattr__(self, "amp_par", np.ascontiguousarray(par[keep]))
        xs = np.flatnonzero(self.hx).astype(np.int64)
        object.__setattr__(self, "x_sites", xs)
        object.__setattr__(self, "x_amp", np.ascontiguousarray(self.hx[xs]))

    @property
    def is_diagonal(self) -> bool:
        return len(self.pair_i) == 0 and len(self.x_sites) == 0

    def describe(self) -> dict:
        return {"name": self.name, "n": self.n, **self.params}


def _check(config: SpinConfig, H: Hamiltonian):
    if config.n != H.n:
        raise DimensionError(f"config has {config.n} spins, Hamiltonian {H.n}")


def nn_bond_energy(config: SpinConfig, coupling: float = 1.0) -> float:
    """coupling * sum_i s_i s_{i+1} on a ring via rotate, xor and popcount."""
    anti = _popcount(config.bits ^ config.rotate(1).bits)
    return coupling * (config.n - 2 * anti)


def diag_energy(config: SpinConfig, H: Hamiltonian) -> float:
    """<S|H|S> = sum_{i<j} cz_ij s_i s_j + sum_i hz_i s_i."""
    _check(config, H)
    if H.nn_zz is not None:
        e = nn_bond_energy(config, H.nn_zz)
        if H.hz.any():
            e += float(H.hz @ config.spins)
        return e
    s = config.spins.astype(float)
    return 0.5 * float(s @ H.cz @ s) + float(H.hz @ s)


def connection_sites(config: SpinConfig, H: Hamiltonian) -> Iterator[tuple[tuple[int, ...], float]]:
    """Lazily yield (flipped sites, amplitude) for every off-diagonal element."""
    _check(config, H)
    for i, amp in zip(H.x_sites, H.x_amp):
        yield (int(i),), float(amp)
    bits = config.bits
    for i, j, a_anti, a_par in zip(H.pair_i, H.pair_j, H.amp_anti, H.amp_par):
        anti = ((bits >> int(i)) ^ (bits >> int(j))) & 1
        amp = a_anti if anti else a_par
        if amp != 0:
            yield (int(i), int(j)), float(amp)


def connections(config: SpinConfig, H: Hamiltonian) -> Iterator[Connection]:
    """Lazily yield the off-diagonal elements <S'|H|S> for S' != S."""
    for sites, amp in connection_sites(config, H):
        yield Connection(config.flip(*sites), amp)


# ---------------------------------------------------------------- models


def _zeros(n):
    return np.zeros((n, n)), np.zeros(n)


def _ring_bonds(n, periodic=True):
    bonds = [(i, i + 1) for i in range(n - 1)]
    if periodic and n > 2:
        bonds.append((n - 1, 0))
    return bonds


def _set_bonds(mat, bonds, value):
    for i, j in bonds:
        mat[i, j] = mat[j, i] = value


def build_tfim(n: int, h: float, periodic: bool = True) -> Hamiltonian:
    """-sum_i Z_i Z_{i+1} + h sum_i X_i.

    For n = 2 the wrap bond coincides with the open bond and is not counted
    twice.
    """
    if n < 2:
        raise ConstraintError("TFIM needs n >= 2")
    cz, hz = _zeros(n)
    _set_bonds(cz, _ring_bonds(n, periodic), -1.0)
    nn = -1.0 if (periodic and n >= 3) else None
    return Hamiltonian(n, np.zeros((n, n)), np.zeros((n, n)), cz, np.full(n, float(h)), hz,
                       name="tfim", nn_zz=nn, params={"h": float(h), "periodic": bool(periodic)})


def _heisenberg_ring(n, jxy, jz, name):
    if n < 4 or n % 2:
        raise ConstraintError(f"{name} needs an even n >= 4, got {n}")
    cx, hz = _zeros(n)
    cy, cz = np.zeros((n, n)), np.zeros((n, n))
    bonds = _ring_bonds(n)
    _set_bonds(cx, bonds, jxy)
    _set_bonds(cy, bonds, jxy)
    _set_bonds(cz, bonds, jz)
    return Hamiltonian(n, cx, cy, cz, np.zeros(n), hz, name=name, nn_zz=jz)


def build_afh(n: int) -> Hamiltonian:
    """Antiferromagnetic Heisenberg ring sum_i (XX + YY + ZZ)."""
    return _heisenberg_ring(n, 1.0, 1.0, "afh")


def build_xxz(n: int) -> Hamiltonian:
    """sum_i (-XX - YY + ZZ): the AFH ring conjugated by Z on every even site."""
    return _heisenberg_ring(n, -1.0, 1.0, "xxz")


def chord_distance(n: int, i, j):
    """(n / pi) |sin(pi (i - j) / n)|, with the separation folded so d_ij = d_ji exactly."""
    d = np.abs(np.asarray(i) - np.asarray(j)) % n
    d = np.minimum(d, n - d)
    return (n / math.pi) * np.sin(np.pi * d / n)


def build_haldane_shastry(n: int) -> Hamiltonian:
    """sum_{i<j} (XX + YY + ZZ) / d_ij^2 with chord distance d_ij."""
    if n < 4:
        raise ConstraintError("Haldane-Shastry needs n >= 4")
    idx = np.arange(n)
    d = chord_distance(n, idx[:, None], idx[None, :])
    c = np.zeros((n, n))
    off = ~np.eye(n, dtype=bool)
    c[off] = 1.0 / d[off] ** 2
    c = 0.5 * (c + c.T)
    return Hamiltonian(n, c, c.copy(), c.copy(), np.zeros(n), np.zeros(n), name="haldane_shastry")


def hs_exact_energy(n: int, m: int) -> float:
    """Closed-form Haldane-Shastry level for ``m`` magnons (m = n/2 is the ground state)."""
    if n % 2 or n < 2:
        raise ConstraintError("n must be even")
    if not 0 <= m <= n // 2:
        raise ConstraintError(f"m={m} outside [0, {n // 2}]")
    mu = 2.0 * m / n
    return n * (1 / 6 - mu / 2 + mu ** 3 / 6 - (1 + 4 * mu) / (6 * n * n)) * math.pi ** 2


def build_longrange_ising(J, h: float, longitudinal: bool = False) -> Hamiltonian:
    """sum_{i != j} J_ij Z_i Z_j - h sum_i X_i.

    The ordered-pair sum means each unordered pair carries 2 J_ij.  With
    ``longitudinal`` the field 2 sum_j J_ij Z_i from expanding
    (1 + Z_i)(1 + Z_j) is kept; by default it is dropped.
    """
    J = np.asarray(J, dtype=float)
    n = J.shape[0]
    if J.shape != (n, n):
        raise DimensionError("J must be square")
    if not np.allclose(J, J.T, atol=1e-12, rtol=0):
        raise ConstraintError("J is not symmetric")
    if np.any(np.diag(J) != 0):
        raise ConstraintError("J has a nonzero diagonal")
    hz = 2.0 * J.sum(axis=1) if longitudinal else np.zeros(n)
    return Hamiltonian(n, np.zeros((n, n)), np.zeros((n, n)), 2.0 * J, np.full(n, -float(h)), hz,
                       name="longrange_ising", params={"h": float(h), "longitudinal": bool(longitudinal)})


def load_couplings(path) -> np.ndarray:
    """Read a J matrix from CSV or from the JSON written by ``ion-crystal``."""
    path = Path(path)
    if path.suffix.lower() == ".json":
        doc = json.loads(path.read_text())
        return np.asarray(doc["J"] if isinstance(doc, dict) else doc, dtype=float)
    with path.open() as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    return np.asarray(rows)


def build_model(spec: dict, base_dir=None) -> Hamiltonian:
    """Construct a model from a config entry like ``{"name": "tfim", "n": 10, "h": 1.0}``."""
    spec = dict(spec)
    name = spec.pop("name")
    if name == "tfim":
        return build_tfim(int(spec["n"]), float(spec.get("h", 1.0)), bool(spec.get("periodic", True)))
    if name == "xxz":
        return build_xxz(int(spec["n"]))
    if name == "afh":
        return build_afh(int(spec["n"]))
    if name == "haldane_shastry":
        return build_haldane_shastry(int(spec["n"]))
    if name == "longrange_ising":
        if "J" in spec:
            J = np.asarray(spec["J"], dtype=float)
        else:
            p = Path(spec["J_path"])
            if base_dir is not None and not p.is_absolute():
                p = Path(base_dir) / p
            J = load_couplings(p)
        return build_longrange_ising(J, float(spec.get("h", 0.0)), bool(spec.get("longitudinal", False)))
    raise ConstraintError(f"unknown model {name!r}")
