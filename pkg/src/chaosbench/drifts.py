"""Declarative drift specifications b(x, mu) and their spectral evaluation.

Three variants:
  ConvolutionGradient  b(x,mu) = -kappa int grad W(x-y) mu(dy)
  Kuramoto             d = 1, b(y,mu) = -2 pi kappa int sin(2 pi (y-x)) mu(dx),
                       i.e. ConvolutionGradient with W(x) = -cos(2 pi x)
  SmallMeanField       b(x,mu) = b0(x) + eps int B(x,y) mu(dy)

All three expose the same surface: drift on particle clouds (via cached
empirical modes), drift as a spectral field given a density, and the measure
derivative delta b/delta m applied to zero-mass distributions (what the
linearised Fokker-Planck operator needs).
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput, TruncationError, UnsupportedDimension
from .torus import EmpiricalMeasure, ModeLattice, SpectralField

H_STABLE_TOL = -1e-14


class PotentialSpec:
    """Coordinate-wise even potential given by real, symmetric Fourier coefficients."""

    def __init__(self, lattice: ModeLattice, w_hat):
        w = np.asarray(w_hat, dtype=float)
        if w.shape != (lattice.n_modes,):
            raise InvalidInput(
                f"w_hat has shape {w.shape}, expected ({lattice.n_modes},)")
        if np.max(np.abs(w - w[lattice.neg_index])) > 1e-14 * max(1.0, np.abs(w).max()):
            raise InvalidInput("potential coefficients must satisfy w(n) = w(-n)")
        self.lattice = lattice
        self.w_hat = 0.5 * (w + w[lattice.neg_index])

    @classmethod
    def from_mode_dict(cls, lattice: ModeLattice, entries: dict) -> "PotentialSpec":
        """Build from {mode: value}; each entry is mirrored onto -mode."""
        w = np.zeros(lattice.n_modes)
        for n, value in entries.items():
            n = (n,) if isinstance(n, int) else tuple(n)
            w[lattice.index_of(list(n))] = float(value)
            w[lattice.index_of([-c for c in n])] = float(value)
        return cls(lattice, w)

    @property
    def support_cutoff(self) -> int:
        """Smallest K with w_hat supported on max_j |n_j| <= K."""
        nz = np.abs(self.w_hat) > 0
        if not np.any(nz):
            return 0
        return int(np.max(np.abs(self.lattice.modes[nz])))


def kuramoto_potential(lattice: ModeLattice) -> PotentialSpec:
    """W(x) = -cos(2 pi x): w_hat(+-1) = -1/2."""
    if lattice.d != 1:
        raise UnsupportedDimension("the Kuramoto potential lives in d = 1")
    return PotentialSpec.from_mode_dict(lattice, {1: -0.5})


class ConvolutionGradient:
    """b(x, mu) = -kappa (grad W * mu)(x); affine in the measure."""

    variant = "convolution"

    def __init__(self, potential: PotentialSpec, kappa: float):
        self.potential = potential
        self.kappa = float(kappa)
        self.lattice = potential.lattice
        self.d = potential.lattice.d
        # modes of component j of b are  -kappa (i 2 pi n_j) w_hat(n) mu^n
        self._grad_w = (-self.kappa * 2j * np.pi
                        * potential.lattice.modes.T.astype(float)
                        * potential.w_hat[None, :])  # (d, n_modes)

    def _check_cutoff(self, lattice: ModeLattice):
        if lattice.M < self.potential.support_cutoff:
            raise TruncationError(
                f"mode cache cutoff {lattice.M} below potential support "
                f"{self.potential.support_cutoff}")

    def _mode_table(self, lattice: ModeLattice) -> np.ndarray:
        """(d, n_modes) multipliers on the target lattice."""
        if lattice == self.lattice:
            return self._grad_w
        self._check_cutoff(lattice)
        w = np.zeros(lattice.n_modes)
        for k in np.flatnonzero(np.abs(self.potential.w_hat) > 0):
            w[lattice.index_of(self.potential.lattice.modes[k])] = self.potential.w_hat[k]
        return -self.kappa * 2j * np.pi * lattice.modes.T.astype(float) * w[None, :]

    def drift_on_points(self, points: np.ndarray, mu_modes: SpectralField) -> np.ndarray:
        """b(x_i, mu) for all rows x_i, using the measure's cached modes."""
        table = self._mode_table(mu_modes.lattice)  # (d, n_modes)
        phases = np.exp(2j * np.pi * (points @ mu_modes.lattice.modes.T.astype(float)))
        values = phases @ (table * mu_modes.coeffs[None, :]).T  # (N, d)
        if np.max(np.abs(values.imag)) > 1e-9 * max(1.0, np.max(np.abs(values.real))):
            raise InvalidInput("drift evaluation produced a non-real field")
        return values.real

    def drift_field_modes(self, m: SpectralField) -> np.ndarray:
        """(d, n_modes) Fourier coefficients of x -> b(x, m)."""
        return self._mode_table(m.lattice) * m.coeffs[None, :]

    def derivative_modes(self, m: SpectralField, q_coeffs: np.ndarray) -> np.ndarray:
        """Modes of x -> (delta b/delta m)(x, m)(q) for zero-mass q."""
        return self._mode_table(m.lattice) * q_coeffs[None, :]

    def adjoint_kernel_modes(self, m: SpectralField, rho_modes: np.ndarray) -> np.ndarray:
        """Modes of x -> sum_i int K_i(y, x) rho_i(y) dy for the unnormalized
        kernel K_i(y, x) = (delta b_i/delta m)(y, m)(x) + b_i(y, m)."""
        table = self._mode_table(m.lattice)  # -kappa (i 2 pi n_i) w_hat(n)
        return -np.sum(table * rho_modes, axis=0)

    def derivative_is_constant_in_m(self) -> bool:
        return True

    def drift_pairwise(self, points: np.ndarray) -> np.ndarray:
        """Reference O(N^2) evaluation at the cloud's own empirical measure."""
        diffs = points[:, None, :] - points[None, :, :]  # (N, N, d)
        table = self._grad_w  # includes -kappa (i 2 pi n_j) w_hat
        phases = np.exp(2j * np.pi * np.tensordot(diffs, self.lattice.modes.T.astype(float),
                                                  axes=([2], [0])))  # (N, N, n_modes)
        comp = np.tensordot(phases, table.T, axes=([2], [0]))  # (N, N, d)
        return comp.real.mean(axis=1)

    def to_config(self) -> dict:
        entries = {}
        for k in np.flatnonzero(np.abs(self.potential.w_hat) > 0):
            mode = tuple(int(c) for c in self.potential.lattice.modes[k])
            entries[",".join(map(str, mode))] = float(self.potential.w_hat[k])
        return {"variant": self.variant, "kappa": self.kappa,
                "d": self.d, "M": self.lattice.M, "w_hat": entries}


class Kuramoto(ConvolutionGradient):
    """b(y, mu) = -2 pi kappa int sin(2 pi (y - x)) mu(dx), d = 1.

    Particle evaluation goes through the order parameter; the generic
    convolution path is inherited and the two agree to 1e-13.
    """

    variant = "kuramoto"

    def __init__(self, kappa: float, lattice: ModeLattice | None = None):
        lattice = lattice or ModeLattice(1, 1)
        super().__init__(kuramoto_potential(lattice), kappa)

    def drift_on_points(self, points: np.ndarray, mu_modes: SpectralField) -> np.ndarray:
        # (1/N) sum_k sin(2 pi (y - x_k)) = Im[e^{i 2 pi y} mu^1]
        mu1 = mu_modes.coeff([1])
        y = points[:, 0]
        return (-2 * np.pi * self.kappa
                * np.imag(np.exp(2j * np.pi * y) * mu1))[:, None]

    def to_config(self) -> dict:
        return {"variant": self.variant, "kappa": self.kappa}


class SmallMeanField:
    """b(x, mu) = b0(x) + eps int B(x, y) mu(dy).

    b0_hat: (d, n_modes) complex, conjugate-symmetric per component.
    kernel_hat: (d, n_modes, n_modes) complex with
        B_i(x, y) = sum_{n, m} kernel_hat[i, n, m] e^{i 2 pi n.x} e^{i 2 pi m.y},
    satisfying kernel_hat[i, -n, -m] = conj(kernel_hat[i, n, m]).
    """

    variant = "small-mean-field"

    def __init__(self, lattice: ModeLattice, b0_hat, kernel_hat, eps: float):
        self.lattice = lattice
        self.d = lattice.d
        b0 = np.asarray(b0_hat, dtype=complex)
        ker = np.asarray(kernel_hat, dtype=complex)
        nm = lattice.n_modes
        if b0.shape != (self.d, nm):
            raise InvalidInput(f"b0_hat has shape {b0.shape}, expected ({self.d}, {nm})")
        if ker.shape != (self.d, nm, nm):
            raise InvalidInput(
                f"kernel_hat has shape {ker.shape}, expected ({self.d}, {nm}, {nm})")
        neg = lattice.neg_index
        for i in range(self.d):
            if np.max(np.abs(b0[i] - np.conj(b0[i][neg]))) > 1e-12:
                raise InvalidInput("b0_hat must be conjugate-symmetric")
            if np.max(np.abs(ker[i] - np.conj(ker[i][np.ix_(neg, neg)]))) > 1e-12:
                raise InvalidInput("kernel_hat must be conjugate-symmetric")
        self.b0_hat = b0
        self.kernel_hat = ker
        self.eps = float(eps)

    def _check_cutoff(self, lattice: ModeLattice):
        if lattice != self.lattice:
            raise TruncationError("SmallMeanField requires the measure on its own lattice")

    def _field_modes_given(self, mu_coeffs: np.ndarray) -> np.ndarray:
        neg = self.lattice.neg_index
        # int B_i(x,y) mu(dy): x-mode n picks sum_m ker[i,n,m] mu^{-m}
        meanfield = self.kernel_hat @ mu_coeffs[neg]  # (d, n_modes)
        return self.b0_hat + self.eps * meanfield

    def drift_on_points(self, points: np.ndarray, mu_modes: SpectralField) -> np.ndarray:
        self._check_cutoff(mu_modes.lattice)
        modes = self._field_modes_given(mu_modes.coeffs)
        phases = np.exp(2j * np.pi * (points @ self.lattice.modes.T.astype(float)))
        values = phases @ modes.T
        if np.max(np.abs(values.imag)) > 1e-9 * max(1.0, np.max(np.abs(values.real))):
            raise InvalidInput("drift evaluation produced a non-real field")
        return values.real

    def drift_field_modes(self, m: SpectralField) -> np.ndarray:
        self._check_cutoff(m.lattice)
        return self._field_modes_given(m.coeffs)

    def derivative_modes(self, m: SpectralField, q_coeffs: np.ndarray) -> np.ndarray:
        self._check_cutoff(m.lattice)
        neg = self.lattice.neg_index
        return self.eps * (self.kernel_hat @ q_coeffs[neg])

    def adjoint_kernel_modes(self, m: SpectralField, rho_modes: np.ndarray) -> np.ndarray:
        """Transposed-kernel application: mode m picks eps sum_{i,n} ker_i[n,m] rho_i^{-n}."""
        self._check_cutoff(m.lattice)
        neg = self.lattice.neg_index
        out = np.zeros(self.lattice.n_modes, dtype=complex)
        for i in range(self.d):
            out += self.eps * (self.kernel_hat[i].T @ rho_modes[i][neg])
        return out

    def derivative_is_constant_in_m(self) -> bool:
        return True

    def drift_pairwise(self, points: np.ndarray) -> np.ndarray:
        phases = np.exp(2j * np.pi * (points @ self.lattice.modes.T.astype(float)))
        out = phases @ self.b0_hat.T  # (N, d)
        # pairwise mean-field term: (eps/N) sum_k B(x_i, x_k), built pair by pair
        ky = np.exp(2j * np.pi * (self.lattice.modes.astype(float) @ points.T))  # (n_modes, N)
        for i in range(self.d):
            pair_values = phases @ (self.kernel_hat[i] @ ky)  # (N, N): B_i(x_row, x_col)
            out[:, i] += self.eps * pair_values.mean(axis=1)
        return out.real

    def to_config(self) -> dict:
        def pack(arr):
            return [[float(z.real), float(z.imag)] for z in np.asarray(arr).ravel()]
        return {"variant": self.variant, "d": self.d, "M": self.lattice.M,
                "eps": self.eps, "b0_hat": pack(self.b0_hat),
                "kernel_hat": pack(self.kernel_hat)}


DriftSpec = ConvolutionGradient | Kuramoto | SmallMeanField


def eval_drift_on_particles(spec: DriftSpec, emp: EmpiricalMeasure) -> np.ndarray:
    """Per-particle drift vectors via the spectral path, O(N (2M+1)^d)."""
    if emp.lattice.d != spec.d:
        raise InvalidInput("dimension mismatch between drift and particles")
    return spec.drift_on_points(emp.particles, emp.cached_modes)


def eval_drift_field(spec: DriftSpec, m: SpectralField) -> list[SpectralField]:
    """Spectral coefficients of x -> b(x, m), one field per component."""
    if m.kind != "density":
        raise InvalidInput("eval_drift_field expects a density")
    modes = spec.drift_field_modes(m)
    return [SpectralField(m.lattice, modes[i], "signed", validate=False)
            for i in range(spec.d)]


def h_stability_check(potential: PotentialSpec) -> dict:
    """H-stable iff every Fourier coefficient of W is >= -1e-14."""
    k = int(np.argmin(potential.w_hat))
    worst = float(potential.w_hat[k])
    return {
        "h_stable": bool(worst >= H_STABLE_TOL),
        "worst_mode": tuple(int(c) for c in potential.lattice.modes[k]),
        "worst_value": worst,
    }


def uniform_linearization_spectrum(potential: PotentialSpec, kappa: float,
                                   lattice: ModeLattice | None = None) -> dict:
    """Eigenvalues of the linearised operator at the uniform measure.

    Diagonal in Fourier: eigenvalue(n) = -2 pi^2 |n|^2 (1 + 2 kappa w_hat(n))
    for n != 0. Returns modes, eigenvalues, and the spectral gap
    min over n != 0 of -eigenvalue(n).
    """
    lattice = lattice or potential.lattice
    if lattice.M < potential.support_cutoff:
        raise TruncationError(
            f"lattice cutoff {lattice.M} below potential support "
            f"{potential.support_cutoff}")
    w = np.zeros(lattice.n_modes)
    for k in np.flatnonzero(np.abs(potential.w_hat) > 0):
        w[lattice.index_of(potential.lattice.modes[k])] = potential.w_hat[k]
    eig = -2 * np.pi**2 * lattice.abs2 * (1.0 + 2.0 * kappa * w)
    nonzero = np.arange(lattice.n_modes) != lattice.zero_index
    gap = float(np.min(-eig[nonzero]))
    return {
        "modes": lattice.modes[nonzero],
        "eigenvalues": eig[nonzero],
        "spectral_gap": gap,
    }
