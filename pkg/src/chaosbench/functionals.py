"""Test functionals on probability measures with first and second linear
functional derivatives, in mode space.

Derivative bookkeeping: a directional derivative along a zero-mass,
conjugate-symmetric perturbation q is written dPhi[q] = sum_n c_n q^n; the
derivative as a function of y then has Fourier coefficients G^n = c_{-n},
symmetrized and shifted so that <G, mu> = 0 (the normalization convention).
Second derivatives are kernels K(y1, y2) with
<K, q1 (x) q2> = sum_{n,m} K[n,m] q1^{-n} q2^{-m}.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidInput, UnsupportedDimension
from .torus import (
    EmpiricalMeasure,
    ModeLattice,
    SpectralField,
    fejer_weights,
    sobolev_weights,
)


def _field_on(mu, lattice: ModeLattice) -> SpectralField:
    if isinstance(mu, EmpiricalMeasure):
        from .torus import fourier_modes_of_empirical

        return fourier_modes_of_empirical(mu.particles, lattice)
    if isinstance(mu, SpectralField):
        if mu.lattice != lattice:
            raise InvalidInput(
                f"measure lattice {mu.lattice} differs from functional lattice {lattice}")
        return mu
    raise InvalidInput(f"expected a measure, got {type(mu)}")


def smoothstep_quintic(u: float, lo: float, hi: float):
    """C^2 cut-off: 0 below lo, 1 above hi, quintic in between. Returns (phi, dphi/du)."""
    if hi <= lo:
        raise InvalidInput("smoothstep needs lo < hi")
    v = (u - lo) / (hi - lo)
    if v <= 0.0:
        return 0.0, 0.0
    if v >= 1.0:
        return 1.0, 0.0
    phi = v**3 * (10.0 + v * (-15.0 + 6.0 * v))
    dphi = v**2 * (30.0 + v * (-60.0 + 30.0 * v)) / (hi - lo)
    return phi, dphi


class BilinearKernel:
    """Second-derivative kernel; dense mode-pair array or an apply closure."""

    def __init__(self, lattice: ModeLattice, array: np.ndarray | None = None,
                 apply_fn=None):
        self.lattice = lattice
        self._array = array
        self._apply_fn = apply_fn

    def apply(self, q1: SpectralField, q2: SpectralField) -> float:
        if self._apply_fn is not None:
            return self._apply_fn(q1, q2)
        neg = self.lattice.neg_index
        val = q1.coeffs[neg] @ self._array @ q2.coeffs[neg]
        return float(np.real(val))

    def kernel_array(self) -> np.ndarray:
        if self._array is None:
            raise InvalidInput("kernel is apply-only; no dense array available")
        return self._array

    def normalized_against(self, mu: SpectralField) -> "BilinearKernel":
        """Shift so int K(y1, y2) mu(dy2) = 0 (last-argument convention)."""
        if self._array is None:
            return self
        neg = self.lattice.neg_index
        col = self._array @ mu.coeffs[neg]  # function of y1 paired with mu in y2
        shifted = self._array.copy()
        shifted[:, self.lattice.zero_index] -= col
        return BilinearKernel(self.lattice, shifted)


class FunctionalDerivatives:
    """Value, first derivative (zero-mean function), second-derivative kernel."""

    def __init__(self, value: float, first: SpectralField, second: BilinearKernel):
        self.value = value
        self.first = first
        self.second = second

    def apply_second(self, q1: SpectralField, q2: SpectralField) -> float:
        return self.second.apply(q1, q2)


def _finish_first(lattice: ModeLattice, c: np.ndarray, mu: SpectralField) -> SpectralField:
    """c_n -> function G with G^n = c_{-n}, symmetrized, <G, mu> = 0."""
    g = c[lattice.neg_index].copy()
    g = 0.5 * (g + np.conj(g[lattice.neg_index]))
    pairing = np.sum(g * mu.coeffs[lattice.neg_index])
    g[lattice.zero_index] -= pairing
    return SpectralField(lattice, g, "signed", validate=False)


class Linear:
    """Phi(mu) = <G, mu>."""

    variant = "linear"

    def __init__(self, g: SpectralField):
        self.g = g
        self.lattice = g.lattice

    def eval(self, mu) -> float:
        f = _field_on(mu, self.lattice)
        return float(np.real(np.sum(self.g.coeffs * f.coeffs[self.lattice.neg_index])))

    def derivatives(self, mu) -> FunctionalDerivatives:
        f = _field_on(mu, self.lattice)
        c = self.g.coeffs[self.lattice.neg_index]
        first = _finish_first(self.lattice, c, f)
        zero = np.zeros((self.lattice.n_modes,) * 2, dtype=complex)
        return FunctionalDerivatives(self.eval(mu), first,
                                     BilinearKernel(self.lattice, zero))


class SobolevDualSq:
    """Phi(mu) = ||mu - nu0||^2 in the (-s, 2) dual Sobolev norm, truncated."""

    variant = "sobolev-dual-sq"

    def __init__(self, s: float, nu0: SpectralField):
        if s <= 0:
            raise InvalidInput("Sobolev exponent must be positive")
        self.s = float(s)
        self.nu0 = nu0
        self.lattice = nu0.lattice
        self.weights = sobolev_weights(self.lattice, self.s)

    def eval(self, mu) -> float:
        f = _field_on(mu, self.lattice)
        return float(np.sum(self.weights * np.abs(f.coeffs - self.nu0.coeffs) ** 2))

    def derivatives(self, mu) -> FunctionalDerivatives:
        f = _field_on(mu, self.lattice)
        lattice = self.lattice
        diff = f.coeffs - self.nu0.coeffs
        # dPhi[q] = sum_n 2 a_n (mu^{-n} - nu0^{-n}) q^n
        c = 2.0 * self.weights * diff[lattice.neg_index]
        first = _finish_first(lattice, c, f)
        # kernel 2 sum_n a_n e^{i2pi n(y1 - y2)}: K[n, m] = 2 a_n delta_{m,-n}
        kernel = np.zeros((lattice.n_modes,) * 2, dtype=complex)
        kernel[np.arange(lattice.n_modes), lattice.neg_index] = 2.0 * self.weights
        return FunctionalDerivatives(self.eval(mu), first,
                                     BilinearKernel(lattice, kernel))


class KuramotoRotInv:
    """phi(|mu^1|) ||aligned(mu) - mu_inf_plus||^2_{-(1+eps_s)/2,2} + 1 - phi(|mu^1|).

    aligned(mu) has modes (|mu^1|/mu^1)^n mu^n; the cut-off phi is the quintic
    smoothstep on [delta_cut/2, delta_cut]. Rotation invariant by construction.
    """

    variant = "kuramoto-rot-inv"

    def __init__(self, eps_s: float, delta_cut: float, profile: SpectralField):
        if profile.lattice.d != 1:
            raise UnsupportedDimension("KuramotoRotInv requires d = 1")
        if not (0 < delta_cut < 1):
            raise InvalidInput("delta_cut must lie in (0, 1)")
        self.eps_s = float(eps_s)
        self.delta_cut = float(delta_cut)
        self.profile = profile
        self.lattice = profile.lattice
        self.s = (1.0 + self.eps_s) / 2.0
        self.weights = sobolev_weights(self.lattice, self.s)

    def _aligned_sq(self, f: SpectralField):
        """(A, Psi, S) with S the squared dual distance of the aligned measure."""
        mu1 = f.coeff([1])
        A = abs(mu1)
        if A < 1e-300:
            return 0.0, 1.0 + 0j, None
        psi_fac = A / mu1  # unit modulus
        n = self.lattice.modes[:, 0]
        aligned = psi_fac**n * f.coeffs
        S = float(np.sum(self.weights * np.abs(aligned - self.profile.coeffs) ** 2))
        return A, psi_fac, S

    def eval(self, mu) -> float:
        f = _field_on(mu, self.lattice)
        A, _psi, S = self._aligned_sq(f)
        phi, _ = smoothstep_quintic(A, self.delta_cut / 2, self.delta_cut)
        if phi == 0.0 or S is None:
            return 1.0
        return phi * S + 1.0 - phi

    def derivatives(self, mu) -> FunctionalDerivatives:
        f = _field_on(mu, self.lattice)
        lattice = self.lattice
        A, psi_fac, S = self._aligned_sq(f)
        phi, dphi = smoothstep_quintic(A, self.delta_cut / 2, self.delta_cut)
        c = np.zeros(lattice.n_modes, dtype=complex)
        if A > 1e-10 and (phi > 0.0 or dphi > 0.0):
            n = lattice.modes[:, 0]
            a = self.weights
            neg = lattice.neg_index
            mu_neg = f.coeffs[neg]
            nu = self.profile.coeffs
            psi_n = psi_fac ** n.astype(float)
            # pairwise part: 2 a_n mu^{-n} - a_n Psi^n (conj(nu^n) + nu^{-n})
            c += 2.0 * a * mu_neg - a * psi_n * (np.conj(nu) + nu[neg])
            # scalar chain terms through A = |mu^1| and Psi = A/mu^1
            P = complex(np.sum(a * n * psi_n * f.coeffs * np.conj(nu)))
            mu1 = f.coeff([1])
            mu1bar = f.coeff([-1])
            kappa_a = dphi * (S - 1.0) - 2.0 * phi * P.real / A
            i1 = lattice.index_of([1])
            i1m = lattice.index_of([-1])
            c *= phi
            c[i1] += kappa_a * mu1bar / (2 * A) + phi * P / mu1
            c[i1m] += kappa_a * mu1 / (2 * A) + phi * np.conj(P) / mu1bar
        first = _finish_first(lattice, c, f)

        def apply_fn(q1: SpectralField, q2: SpectralField, h: float = 1e-4) -> float:
            return _directional_second(self, f, q1, q2, h)

        value = phi * S + 1.0 - phi if (phi > 0.0 and S is not None) else 1.0
        return FunctionalDerivatives(value, first, BilinearKernel(lattice, None, apply_fn))


def _directional_second(spec, f: SpectralField, q1: SpectralField,
                        q2: SpectralField, h: float) -> float:
    """Richardson-extrapolated central difference of the closed-form first
    derivative along q1, paired with q2. Exact for zero-mass pairs."""
    lattice = spec.lattice
    norm1 = float(np.linalg.norm(q1.coeffs))
    if norm1 == 0.0:
        return 0.0
    direction = q1.coeffs / norm1

    def paired(step: float) -> float:
        shifted = SpectralField(lattice, f.coeffs + step * direction, "density",
                                validate=False)
        first = spec.derivatives(shifted).first
        return float(np.real(np.sum(first.coeffs * q2.coeffs[lattice.neg_index])))

    def central(step: float) -> float:
        return (paired(step) - paired(-step)) / (2 * step)

    d_h, d_h2 = central(h), central(h / 2)
    return norm1 * (4.0 * d_h2 - d_h) / 3.0


def _bump_pdf(u: np.ndarray) -> np.ndarray:
    out = np.zeros_like(u)
    inside = np.abs(u) < 1.0
    out[inside] = np.exp(-1.0 / (1.0 - u[inside] ** 2))
    return out


class _BumpMollifier:
    """exp(-1/(1-u^2)) on [-1, 1], scaled to [-h/2, h/2] and normalized."""

    def __init__(self, half_width: float, table: int = 4001):
        self.h = float(half_width)  # full support is [-h/2, h/2]
        u = np.linspace(-1.0, 1.0, table)
        pdf = _bump_pdf(u)
        cdf = np.concatenate([[0.0], np.cumsum(0.5 * (pdf[1:] + pdf[:-1]) * np.diff(u))])
        self._norm = cdf[-1]
        self._u = u
        self._cdf = cdf / cdf[-1]

    def pdf(self, y: np.ndarray) -> np.ndarray:
        u = 2.0 * np.asarray(y) / self.h
        return _bump_pdf(u) / self._norm * (2.0 / self.h)

    def inverse_cdf(self, p: np.ndarray) -> np.ndarray:
        u = np.interp(p, self._cdf, self._u)
        return u * self.h / 2.0


class Mollified:
    """Smoothed functional: Fejer-projected measure, epsilon-mixed with the
    uniform, averaged over independent real perturbations of the retained
    nonzero modes (mollifier: scaled bump).

    Quadrature: tensor 128-point Gauss-Legendre when there are at most two
    perturbed coordinates, deterministic Sobol QMC otherwise.
    """

    variant = "mollified"

    def __init__(self, inner, n_moll: int, eps_moll: float,
                 gauss_points: int = 128, qmc_points: int = 512):
        if n_moll < 2:
            raise InvalidInput("mollification level must be >= 2")
        if not (0.0 < eps_moll < 0.5):
            raise InvalidInput("eps_moll must lie in (0, 1/2)")
        self.inner = inner
        self.n_moll = int(n_moll)
        self.eps_moll = float(eps_moll)
        self.lattice = inner.lattice
        if self.lattice.M < self.n_moll - 1:
            raise InvalidInput(
                f"lattice cutoff {self.lattice.M} below mollification level "
                f"{self.n_moll - 1}")
        self.fejer = fejer_weights(self.lattice, self.n_moll)
        in_cube = (np.max(np.abs(self.lattice.modes), axis=1) <= self.n_moll - 1)
        in_cube[self.lattice.zero_index] = False
        self.pert_idx = np.flatnonzero(in_cube)
        # safety radius: keeps the perturbed density >= 0.1 eps by construction
        weight_sum = float(np.sum(self.fejer[self.pert_idx]))
        eta = 0.9 * 2.0 * self.eps_moll / ((1.0 - self.eps_moll) * max(weight_sum, 1e-12))
        self.half_width = min(self.eps_moll, eta)
        self.rho = _BumpMollifier(self.half_width)
        self._nodes, self._node_weights = self._build_quadrature(gauss_points, qmc_points)

    def _build_quadrature(self, gauss_points: int, qmc_points: int):
        k = len(self.pert_idx)
        half = self.half_width / 2.0
        if k <= 2:
            x, w = np.polynomial.legendre.leggauss(gauss_points)
            y = x * half
            wy = w * half * self.rho.pdf(y)
            grids = np.meshgrid(*([y] * k), indexing="ij")
            weights = np.ones_like(grids[0])
            wgrids = np.meshgrid(*([wy] * k), indexing="ij")
            for wg in wgrids:
                weights = weights * wg
            nodes = np.stack([g.ravel() for g in grids], axis=1)
            weights = weights.ravel()
            return nodes, weights / weights.sum()
        from scipy.stats import qmc

        sobol = qmc.Sobol(d=k, scramble=False)
        u = sobol.random(qmc_points)
        nodes = self.rho.inverse_cdf(u)
        weights = np.full(len(nodes), 1.0 / len(nodes))
        return nodes, weights

    def _perturbed(self, f: SpectralField, node: np.ndarray) -> SpectralField:
        lattice = self.lattice
        pert = np.zeros(lattice.n_modes)
        pert[self.pert_idx] = node
        sym = 0.5 * (pert + pert[lattice.neg_index])
        coeffs = (1.0 - self.eps_moll) * self.fejer * (f.coeffs - sym)
        coeffs[lattice.zero_index] = 1.0
        return SpectralField(lattice, coeffs, "density", validate=False)

    def eval(self, mu) -> float:
        f = _field_on(mu, self.lattice)
        acc = 0.0
        for node, w in zip(self._nodes, self._node_weights):
            acc += w * self.inner.eval(self._perturbed(f, node))
        return float(acc)

    def derivatives(self, mu) -> FunctionalDerivatives:
        f = _field_on(mu, self.lattice)
        lattice = self.lattice
        scale = (1.0 - self.eps_moll) * self.fejer
        value = 0.0
        g_acc = np.zeros(lattice.n_modes, dtype=complex)
        inner_kernels = []
        for node, w in zip(self._nodes, self._node_weights):
            inner_derivs = self.inner.derivatives(self._perturbed(f, node))
            value += w * inner_derivs.value
            g_acc += w * inner_derivs.first.coeffs
            inner_kernels.append((w, inner_derivs.second))
        # chain rule: G_moll^m = (1-eps) F(m) avg G_inner^m, then renormalize
        g = scale * g_acc
        g[lattice.zero_index] = 0.0
        pairing = np.sum(g * f.coeffs[lattice.neg_index])
        g[lattice.zero_index] -= pairing
        first = SpectralField(lattice, g, "signed", validate=False)

        def apply_fn(q1: SpectralField, q2: SpectralField) -> float:
            s1 = SpectralField(lattice, scale * q1.coeffs, "signed", validate=False)
            s2 = SpectralField(lattice, scale * q2.coeffs, "signed", validate=False)
            return float(sum(w * k.apply(s1, s2) for w, k in inner_kernels))

        return FunctionalDerivatives(float(value), first,
                                     BilinearKernel(lattice, None, apply_fn))


FunctionalSpec = Linear | SobolevDualSq | KuramotoRotInv | Mollified


def eval_functional(spec: FunctionalSpec, mu) -> float:
    return spec.eval(mu)


def derivatives(spec: FunctionalSpec, mu) -> FunctionalDerivatives:
    return spec.derivatives(mu)


def mollify(spec: FunctionalSpec, n_moll: int, eps_moll: float, **kw) -> Mollified:
    """Wrap a functional in its mollified version (d = 1 test scope)."""
    if spec.lattice.d != 1:
        raise UnsupportedDimension("mollify is implemented for d = 1")
    return Mollified(spec, n_moll, eps_moll, **kw)
