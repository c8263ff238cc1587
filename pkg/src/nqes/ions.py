"""Planar ion crystals, drumhead modes and Ising coupling matrices.

Lengths are in units of l with l^3 = e^2 / (4 pi eps0 m omega_z^2) and
frequencies in units of omega_z, so the potential energy of the crystal in
the xz plane is

    V = sum_i (beta_x^2 x_i^2 + z_i^2) / 2 + sum_{i<j} 1 / |r_i - r_j|

with beta_x = omega_x / omega_z.  Coupling strengths are expressed in
2 pi x kHz, which is how they become plain numbers in the spin model.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.optimize

ETA_COM = 0.11
OMEGA_EFF_KHZ = 10.0
# (omega_x, omega_y, omega_z) / 2 pi in MHz
EXPERIMENT_TRAP_MHZ = (0.690, 2.140, 0.167)


class InstabilityError(RuntimeError):
    """The transverse Hessian has a negative eigenvalue."""


class ResonanceError(ValueError):
    pass


@dataclass(frozen=True)
class TrapParams:
    omega_x: float
    omega_y: float
    omega_z: float
    n_ions: int

    def __post_init__(self):
        if not self.omega_y > self.omega_x > self.omega_z > 0:
            raise ValueError("need omega_y > omega_x > omega_z > 0 for a planar xz crystal")
        if self.n_ions < 1:
            raise ValueError("need at least one ion")

    @classmethod
    def experiment(cls, n_ions: int) -> "TrapParams":
        return cls(*EXPERIMENT_TRAP_MHZ, n_ions)

    @property
    def beta_x(self) -> float:
        return self.omega_x / self.omega_z

    @property
    def beta_y(self) -> float:
        return self.omega_y / self.omega_z


@dataclass
class CrystalSolution:
    positions: np.ndarray  # (n, 2) columns x, z
    gradient_norm: float
    energy: float


@dataclass
class PhononModes:
    freqs: np.ndarray  # descending, units of omega_z
    vectors: np.ndarray  # column k is mode k


@dataclass
class CouplingMatrix:
    J: np.ndarray
    metadata: dict = field(default_factory=dict)


def _pair_geometry(pos):
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    np.fill_diagonal(dist, np.inf)
    return diff, dist


def potential(flat, beta_x):
    pos = flat.reshape(-1, 2)
    _, dist = _pair_geometry(pos)
    trap = 0.5 * np.sum(beta_x ** 2 * pos[:, 0] ** 2 + pos[:, 1] ** 2)
    return trap + 0.5 * np.sum(1.0 / dist)


def gradient(flat, beta_x):
    pos = flat.reshape(-1, 2)
    diff, dist = _pair_geometry(pos)
    g = pos * np.array([beta_x ** 2, 1.0])
    g -= np.sum(diff / dist[..., None] ** 3, axis=1)
    return g.ravel()


def hessian(flat, beta_x):
    pos = flat.reshape(-1, 2)
    n = len(pos)
    diff, dist = _pair_geometry(pos)
    inv3 = 1.0 / dist ** 3
    inv5 = 1.0 / dist ** 5
    # d^2 (1/r) / dr_a dr_b = 3 r_a r_b / r^5 - delta_ab / r^3
    blocks = 3.0 * diff[..., :, None] * diff[..., None, :] * inv5[..., None, None]
    blocks -= np.eye(2) * inv3[..., None, None]
    Hm = np.zeros((n, 2, n, 2))
    for i in range(n):
        Hm[i, :, :, :] = -blocks[i].transpose(1, 0, 2)
        Hm[i, :, i, :] = np.sum(blocks[i], axis=0) + np.diag([beta_x ** 2, 1.0])
    return Hm.reshape(2 * n, 2 * n)


def _initial_lattice(n, beta_x, rng):
    # triangular patch, squashed by the trap anisotropy, scaled to the expected radius
    side = int(np.ceil(np.sqrt(n))) + 2
    pts = np.array([(i + 0.5 * (j % 2), j * np.sqrt(3) / 2) for j in range(side) for i in range(side)])
    pts -= pts.mean(axis=0)
    pts = pts[np.argsort(np.hypot(pts[:, 0] * beta_x, pts[:, 1]))[:n]]
    radius = (3 * n / 4.0) ** (1 / 3)
    pts *= radius / max(np.abs(pts).max(), 1e-9)
    pts[:, 0] /= beta_x ** (2 / 3)
    pts += 0.05 * rng.standard_normal(pts.shape)
    return pts  # columns x, z


def _newton_polish(x, beta_x, tol, max_steps=50):
    for _ in range(max_steps):
        g = gradient(x, beta_x)
        if np.linalg.norm(g) < tol:
            break
        Hm = hessian(x, beta_x)
        w, v = np.linalg.eigh(Hm)
        # drop the (near) rotation-free directions; none should be zero but be safe
        w = np.where(np.abs(w) < 1e-12, np.inf, np.abs(w))
        step = v @ ((v.T @ g) / w)
        t = 1.0
        f0 = potential(x, beta_x)
        while potential(x - t * step, beta_x) > f0 + 1e-15 * abs(f0) and t > 1e-6:
            t *= 0.5
        x = x - t * step
    return x


def solve_equilibrium(trap: TrapParams, seed: int = 0, restarts: int = 10,
                      tol: float = 1e-8) -> CrystalSolution:
    """Minimum-energy planar configuration, sorted by ascending z."""
    n = trap.n_ions
    if n == 1:
        return CrystalSolution(np.zeros((1, 2)), 0.0, 0.0)
    beta_x = trap.beta_x
    best = None
    seeds = np.random.SeedSequence(seed).spawn(restarts)
    for ss in seeds:
        rng = np.random.default_rng(ss)
        x0 = _initial_lattice(n, beta_x, rng).ravel()
        res = scipy.optimize.minimize(potential, x0, jac=gradient, args=(beta_x,),
                                      method="L-BFGS-B", options={"maxiter": 20000, "gtol": 1e-10, "ftol": 1e-15})
        x = _newton_polish(res.x, beta_x, tol * 1e-2)
        e = potential(x, beta_x)
        if best is None or e < best[0] - 1e-12:
            best = (e, x)
    e, x = best
    gnorm = float(np.linalg.norm(gradient(x, beta_x)))
    if gnorm >= tol:
        raise RuntimeError(f"equilibrium not converged: gradient norm {gnorm:.3e}")
    pos = x.reshape(-1, 2)
    pos = pos[np.lexsort((pos[:, 0], pos[:, 1]))]
    return CrystalSolution(pos, gnorm, float(e))


def transverse_modes(crystal: CrystalSolution, trap: TrapParams) -> PhononModes:
    """Drumhead (y) modes of the planar crystal, highest frequency first."""
    pos = crystal.positions
    n = len(pos)
    _, dist = _pair_geometry(pos)
    inv3 = 1.0 / dist ** 3
    A = inv3.copy()
    A[np.diag_indices(n)] = trap.beta_y ** 2 - inv3.sum(axis=1)
    w, v = np.linalg.eigh(A)
    if w[0] < 0:
        raise InstabilityError(f"negative transverse eigenvalue {w[0]:.4g}: planar crystal unstable")
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    # fix the sign convention: largest-magnitude component positive
    for k in range(n):
        idx = np.argmax(np.abs(v[:, k]) + 1e-9 * np.arange(n))
        if v[idx, k] < 0:
            v[:, k] = -v[:, k]
    return PhononModes(np.sqrt(w), v)


def lamb_dicke(modes: PhononModes, eta_com: float = ETA_COM) -> np.ndarray:
    return eta_com * np.sqrt(modes.freqs[0] / modes.freqs)


def _finish(J, meta):
    J = 0.5 * (J + J.T)
    np.fill_diagonal(J, 0.0)
    return CouplingMatrix(J, meta)


def default_detuning(modes: PhononModes, k: int, omega_z_khz: float, fraction: float = 0.1) -> float:
    """Red detuning from mode k: ``fraction`` of the gap to the nearest other mode, in kHz."""
    f = modes.freqs * omega_z_khz
    others = np.delete(f, k - 1)
    if len(others) == 0:
        return -fraction * f[0]
    return -fraction * float(np.min(np.abs(others - f[k - 1])))


def single_mode_couplings(modes: PhononModes, k: int, omega_eff: float = OMEGA_EFF_KHZ,
                          detuning: float | None = None, omega_z_khz: float = EXPERIMENT_TRAP_MHZ[2] * 1e3,
                          kac_target: float | None = None) -> CouplingMatrix:
    """J_ij = Omega^2 eta_k^2 b_ik b_jk / (16 delta_k) for the k-th highest mode (1-based).

    ``detuning`` is delta_k in kHz (negative = red).  With ``kac_target`` the
    matrix is rescaled so that sum_{i != j} |J_ij| / N equals the target.
    """
    n = modes.vectors.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"mode index {k} outside [1, {n}]")
    if detuning is None:
        detuning = default_detuning(modes, k, omega_z_khz)
    if detuning == 0:
        raise ResonanceError(f"zero detuning from mode {k}")
    eta = lamb_dicke(modes)[k - 1]
    b = modes.vectors[:, k - 1]
    J = omega_eff ** 2 * eta ** 2 * np.outer(b, b) / (16.0 * detuning)
    meta = {"kind": "single_mode", "mode": k, "detuning_khz": detuning, "omega_eff_khz": omega_eff,
            "eta": float(eta), "units": "2pi kHz"}
    out = _finish(J, meta)
    if kac_target is not None:
        out = _rescale_kac(out, kac_target)
    return out


def _rescale_kac(cm: CouplingMatrix, target: float) -> CouplingMatrix:
    n = cm.J.shape[0]
    kac = np.abs(cm.J).sum() / n
    scale = target / kac
    meta = dict(cm.metadata, kac_scale=scale, units="dimensionless (Kac-normalized)")
    return CouplingMatrix(cm.J * scale, meta)


def all_mode_couplings(modes: PhononModes, mu: float, omega_eff: float = OMEGA_EFF_KHZ,
                       omega_z_khz: float = EXPERIMENT_TRAP_MHZ[2] * 1e3) -> CouplingMatrix:
    """Full sum over modes with delta_k = mu - omega_k; ``mu`` in kHz."""
    f = modes.freqs * omega_z_khz
    delta = mu - f
    bad = np.flatnonzero(delta == 0)
    if len(bad):
        raise ResonanceError(f"mu is resonant with mode {bad[0] + 1}")
    eta = lamb_dicke(modes)
    b = modes.vectors
    J = omega_eff ** 2 / 16.0 * (b * (eta ** 2 / delta)) @ b.T
    meta = {"kind": "all_mode", "mu_khz": float(mu), "omega_eff_khz": omega_eff, "units": "2pi kHz"}
    return _finish(J, meta)


def power_law_couplings(crystal: CrystalSolution, alpha: float) -> CouplingMatrix:
    """J_ij = c / |r_i - r_j|^alpha with the closest pair at exactly 1."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    _, dist = _pair_geometry(crystal.positions)
    dmin = dist.min()
    J = np.zeros_like(dist)
    off = np.isfinite(dist)
    J[off] = (dmin / dist[off]) ** alpha
    meta = {"kind": "power_law", "alpha": float(alpha), "min_distance": float(dmin)}
    return _finish(J, meta)


def ground_pattern(modes: PhononModes, k: int) -> np.ndarray:
    """Zero-field ground configuration sigma_z^i = sign(b_ik) of a red-detuned single mode."""
    return np.where(modes.vectors[:, k - 1] >= 0, 1, -1)


def crystal_report(trap: TrapParams, crystal: CrystalSolution, modes: PhononModes,
                   couplings: CouplingMatrix) -> dict:
    return {
        "trap_mhz": [trap.omega_x, trap.omega_y, trap.omega_z],
        "n_ions": trap.n_ions,
        "positions": crystal.positions.tolist(),
        "gradient_norm": crystal.gradient_norm,
        "mode_frequencies": modes.freqs.tolist(),
        "mode_vectors": modes.vectors.tolist(),
        "J": couplings.J.tolist(),
        "metadata": couplings.metadata,
    }
