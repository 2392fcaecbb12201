"""Fourier-Galerkin solvers for the nonlinear Fokker-Planck flow, the backward
Kolmogorov equation, the linearised tangent equations, stationary Kuramoto
profiles, and the semigroup derivative representation formulas.

All solvers advance truncated mode vectors with an exact integrating factor
for the Laplacian (the stiffness is entirely diagonal) and pseudo-spectral
products on a zero-padded grid that is alias-free for quadratic terms.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .bessel import bessel_ratio_derivative, bessel_ratio_i1_i0
from .errors import InvalidInput, PositivityBreach
from .torus import (
    TOL_POS,
    DiracModes,
    ModeLattice,
    SpectralField,
    fejer_weights,
    grid_to_modes,
    pair_distribution,
    weighted_dual_inner,
)

INTEGRATORS = ("if-rk4", "semi-implicit-euler")


@dataclass
class SolverConfig:
    lattice: ModeLattice
    dt: float = 5e-3
    t_end: float = 1.0
    integrator: str = "if-rk4"
    dealias: bool = True
    record_stride: int = 1

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidInput(f"dt must be positive, got {self.dt}")
        if self.dt > 0.05:
            raise InvalidInput(f"dt = {self.dt} exceeds the nonlinear-accuracy cap 0.05")
        if self.t_end < 0:
            raise InvalidInput("t_end must be nonnegative")
        if self.integrator not in INTEGRATORS:
            raise InvalidInput(f"integrator must be one of {INTEGRATORS}")
        if self.record_stride < 1:
            raise InvalidInput("record_stride must be >= 1")


@dataclass
class FlowState:
    t: float
    m: SpectralField


@dataclass
class TangentState:
    t: float
    q: SpectralField


class ModeSeries:
    """Time series of mode vectors; thin numpy-backed container."""

    def __init__(self, lattice: ModeLattice, times, coeffs, kind: str = "signed",
                 warnings_log=None):
        self.lattice = lattice
        self.times = np.asarray(times, dtype=float)
        self.coeffs = np.asarray(coeffs, dtype=complex)
        self.kind = kind
        self.warnings = warnings_log or []

    def __len__(self) -> int:
        return len(self.times)

    def field(self, i: int) -> SpectralField:
        return SpectralField(self.lattice, self.coeffs[i], self.kind, validate=False)

    def state(self, i: int):
        if self.kind == "density":
            return FlowState(float(self.times[i]), self.field(i))
        return TangentState(float(self.times[i]), self.field(i))

    def at_time(self, t: float) -> SpectralField:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 + 1e-9 * abs(t):
            raise InvalidInput(f"time {t} not on the record grid")
        return self.field(i)

    @property
    def final(self) -> SpectralField:
        return self.field(len(self.times) - 1)

    def to_csv(self) -> str:
        header = "t," + ",".join(
            f"re_{'_'.join(map(str, n))},im_{'_'.join(map(str, n))}"
            for n in self.lattice.modes)
        lines = [header]
        for t, row in zip(self.times, self.coeffs):
            cells = [f"{t:.17g}"]
            for z in row:
                cells.append(f"{z.real:.17g}")
                cells.append(f"{z.imag:.17g}")
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"

    def to_json_dict(self) -> dict:
        return {
            "d": self.lattice.d,
            "M": self.lattice.M,
            "kind": self.kind,
            "times": [float(t) for t in self.times],
            "coeffs": [[[float(z.real), float(z.imag)] for z in row]
                       for row in self.coeffs],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ModeSeries":
        lattice = ModeLattice(int(obj["d"]), int(obj["M"]))
        arr = np.asarray(obj["coeffs"], dtype=float)
        return cls(lattice, obj["times"], arr[..., 0] + 1j * arr[..., 1],
                   obj.get("kind", "signed"))


class _GridKit:
    """Cached FFT scaffolding for pseudo-spectral products on one lattice."""

    def __init__(self, lattice: ModeLattice, grid: int | None = None):
        self.lattice = lattice
        # 4M+1 >= 3M+1: zero padding de-aliases quadratic products exactly
        self.G = grid or lattice.default_grid
        self.place = tuple(np.mod(lattice.modes[:, j], self.G)
                           for j in range(lattice.d))
        self.shape = (self.G,) * lattice.d
        self.scale = self.G ** lattice.d
        self.ikn = (2j * np.pi * lattice.modes.T.astype(float))  # (d, n_modes)

    def to_grid(self, coeffs: np.ndarray) -> np.ndarray:
        spec = np.zeros(self.shape, dtype=complex)
        spec[self.place] = coeffs
        return np.fft.ifftn(spec).real * self.scale

    def to_modes(self, values: np.ndarray) -> np.ndarray:
        spec = np.fft.fftn(values) / self.scale
        return spec[self.place]

    def divergence(self, comp_modes: np.ndarray) -> np.ndarray:
        """div of a vector field given per-component modes (d, n_modes)."""
        return np.sum(self.ikn * comp_modes, axis=0)


def _drift_wrap(lattice: ModeLattice, coeffs: np.ndarray, kind: str) -> SpectralField:
    return SpectralField(lattice, coeffs, kind, validate=False)


class _Semilinear:
    """State layout and non-Laplacian right-hand side for the coupled solves.

    Row 0 is always the density m (unless frozen); tangent rows follow. The
    Laplacian is handled exactly by the integrating factor outside.
    """

    def __init__(self, drift, lattice: ModeLattice):
        self.drift = drift
        self.lattice = lattice
        self.kit = _GridKit(lattice)

    def fp_nonlinear(self, m_coeffs: np.ndarray) -> np.ndarray:
        """-div(m b(.,m)) in modes."""
        kit = self.kit
        m_field = _drift_wrap(self.lattice, m_coeffs, "density")
        b_modes = self.drift.drift_field_modes(m_field)  # (d, n_modes)
        m_grid = kit.to_grid(m_coeffs)
        flux = np.stack([kit.to_modes(m_grid * kit.to_grid(b_modes[i]))
                         for i in range(self.lattice.d)])
        return -kit.divergence(flux)

    def linearized_nonlocal(self, m_coeffs: np.ndarray, q_coeffs: np.ndarray) -> np.ndarray:
        """-div(b(.,m) q) - div(m (delta b/delta m)(.,m)(q)) in modes."""
        kit = self.kit
        m_field = _drift_wrap(self.lattice, m_coeffs, "density")
        b_modes = self.drift.drift_field_modes(m_field)
        v_modes = self.drift.derivative_modes(m_field, q_coeffs)
        q_grid = kit.to_grid(q_coeffs)
        m_grid = kit.to_grid(m_coeffs)
        flux = np.stack([
            kit.to_modes(q_grid * kit.to_grid(b_modes[i])
                         + m_grid * kit.to_grid(v_modes[i]))
            for i in range(self.lattice.d)])
        return -kit.divergence(flux)

    def bilinear_source(self, m_coeffs, qa_coeffs, qb_coeffs) -> np.ndarray:
        """-div(qa db(qb)) - div(qb db(qa)); the d2b term vanishes (affine drift)."""
        assert self.drift.derivative_is_constant_in_m()
        kit = self.kit
        m_field = _drift_wrap(self.lattice, m_coeffs, "density")
        va = self.drift.derivative_modes(m_field, qa_coeffs)
        vb = self.drift.derivative_modes(m_field, qb_coeffs)
        ga, gb = kit.to_grid(qa_coeffs), kit.to_grid(qb_coeffs)
        flux = np.stack([
            kit.to_modes(ga * kit.to_grid(vb[i]) + gb * kit.to_grid(va[i]))
            for i in range(self.lattice.d)])
        return -kit.divergence(flux)


def _integrate(lattice: ModeLattice, y0: np.ndarray, rhs, cfg: SolverConfig,
               pins, positivity_row: int | None = None):
    """Advance the stacked semilinear system dt-exactly in the Laplacian.

    y0: (k, n_modes); rhs(t, Y) -> (k, n_modes) non-Laplacian part;
    pins: list of (row, value) pinned after every step (mass modes).
    Returns (times, records, warnings_log).
    """
    steps = max(1, int(math.ceil(cfg.t_end / cfg.dt - 1e-12)))
    dt = cfg.t_end / steps
    lam = -2.0 * np.pi**2 * lattice.abs2  # Laplacian symbol
    e_half = np.exp(lam * dt / 2)[None, :]
    e_full = e_half * e_half
    zero = lattice.zero_index
    neg = lattice.neg_index

    def pin(y):
        # re-symmetrize: rounding otherwise seeds a conjugate-antisymmetric
        # component that the real-grid product path cannot damp correctly
        y[:] = 0.5 * (y + np.conj(y[:, neg]))
        for row, value in pins:
            y[row, zero] = value

    y = np.array(y0, dtype=complex)
    pin(y)
    times = [0.0]
    records = [y.copy()]
    warn_log = []
    kit = _GridKit(lattice)
    for step in range(steps):
        t = step * dt
        if cfg.integrator == "if-rk4":
            k1 = rhs(t, y)
            y2 = e_half * (y + (dt / 2) * k1)
            k2 = rhs(t + dt / 2, y2)
            y3 = e_half * y + (dt / 2) * k2
            k3 = rhs(t + dt / 2, y3)
            y4 = e_full * y + dt * e_half * k3
            k4 = rhs(t + dt, y4)
            y = e_full * y + (dt / 6) * (e_full * k1 + 2 * e_half * (k2 + k3) + k4)
        else:  # semi-implicit Euler: exact linear factor, explicit nonlinearity
            y = e_full * (y + dt * rhs(t, y))
        pin(y)
        now = (step + 1) * dt
        if (step + 1) % cfg.record_stride == 0 or step == steps - 1:
            times.append(now)
            records.append(y.copy())
            if positivity_row is not None:
                low = float(kit.to_grid(y[positivity_row]).min())
                if low < -TOL_POS:
                    warn_log.append((now, low))
    if warn_log:
        t0, low = warn_log[0]
        warnings.warn(
            f"density dipped to {low:.3e} at t = {t0:.6g} (run continued)",
            PositivityBreach, stacklevel=2)
    return np.asarray(times), np.stack(records), warn_log


def solve_nonlinear_fp(drift, mu0: SpectralField, cfg: SolverConfig) -> ModeSeries:
    """Galerkin solution of dm/dt = (1/2) lap m - div(m b(., m))."""
    if mu0.kind != "density":
        raise InvalidInput("initial condition must be a density")
    if mu0.lattice != cfg.lattice:
        raise InvalidInput("initial condition lattice differs from solver lattice")
    sys = _Semilinear(drift, cfg.lattice)

    def rhs(_t, y):
        return sys.fp_nonlinear(y[0])[None, :]

    times, recs, warn_log = _integrate(cfg.lattice, mu0.coeffs[None, :], rhs, cfg,
                                       pins=[(0, 1.0)], positivity_row=0)
    return ModeSeries(cfg.lattice, times, recs[:, 0, :], "density", warn_log)


def _tangent_solve(drift, mu0_coeffs, q0_list, cfg: SolverConfig):
    """Joint integration of the flow (row 0) and k linearised tangent rows."""
    sys = _Semilinear(drift, cfg.lattice)
    k = len(q0_list)

    def rhs(_t, y):
        out = np.empty_like(y)
        m = y[0]
        out[0] = sys.fp_nonlinear(m)
        for i in range(k):
            out[1 + i] = sys.linearized_nonlocal(m, y[1 + i])
        return out

    y0 = np.vstack([mu0_coeffs[None, :]] + [q[None, :] for q in q0_list])
    pins = [(0, 1.0)] + [(1 + i, 0.0) for i in range(k)]
    return _integrate(cfg.lattice, y0, rhs, cfg, pins=pins)


def solve_m1(drift, flow: ModeSeries, nu: SpectralField, cfg: SolverConfig) -> ModeSeries:
    """First tangent: dq/dt = L_{m(t)} q, q(0) = nu - mu."""
    mu0 = flow.coeffs[0]
    q0 = nu.coeffs - mu0
    if abs(q0[cfg.lattice.zero_index]) > 1e-10:
        raise InvalidInput("tangent initial condition must have zero mass")
    times, recs, _ = _tangent_solve(drift, mu0, [q0], cfg)
    return ModeSeries(cfg.lattice, times, recs[:, 1, :], "signed")


def dirac_derivative_modes(lattice: ModeLattice, z, component: int = 0,
                           fejer_level: int | None = None) -> np.ndarray:
    """Modes of (D'_z)_i, the distribution with <xi, (D'_z)_i> = d_i xi(z).

    q^n = -(i 2 pi n_i) exp(-i 2 pi n.z); Fejer-pre-smoothed when requested.
    """
    z = np.atleast_1d(np.asarray(z, dtype=float))
    modes = lattice.modes.astype(float)
    q = -2j * np.pi * modes[:, component] * np.exp(-2j * np.pi * (modes @ z))
    if fejer_level is not None:
        q = q * fejer_weights(lattice, fejer_level)
    return q


def solve_d1(drift, flow: ModeSeries, z, component: int, cfg: SolverConfig,
             fejer_level="auto") -> ModeSeries:
    """Dirac-derivative tangent; initial modes Fejer-smoothed at the cutoff."""
    if fejer_level == "auto":
        fejer_level = cfg.lattice.M + 1
    q0 = dirac_derivative_modes(cfg.lattice, z, component, fejer_level)
    times, recs, _ = _tangent_solve(drift, flow.coeffs[0], [q0], cfg)
    return ModeSeries(cfg.lattice, times, recs[:, 1, :], "signed")


def _second_order_solve(drift, flow, qa0, qb0, cfg: SolverConfig):
    """Rows: m, qa, qb, second-order tangent with the bilinear source."""
    sys = _Semilinear(drift, cfg.lattice)

    def rhs(_t, y):
        out = np.empty_like(y)
        out[0] = sys.fp_nonlinear(y[0])
        out[1] = sys.linearized_nonlocal(y[0], y[1])
        out[2] = sys.linearized_nonlocal(y[0], y[2])
        out[3] = sys.linearized_nonlocal(y[0], y[3]) + sys.bilinear_source(y[0], y[1], y[2])
        return out

    zero = np.zeros_like(qa0)
    y0 = np.vstack([flow.coeffs[0][None, :], qa0[None, :], qb0[None, :], zero[None, :]])
    pins = [(0, 1.0), (1, 0.0), (2, 0.0), (3, 0.0)]
    return _integrate(cfg.lattice, y0, rhs, cfg, pins=pins)


def solve_m2(drift, flow: ModeSeries, m1_a: ModeSeries, m1_b: ModeSeries,
             cfg: SolverConfig) -> ModeSeries:
    """Second tangent with zero initial data and the two cross sources.

    The delta^2 b source vanishes identically for the supported (affine in mu)
    drift classes; the solver asserts this.
    """
    times, recs, _ = _second_order_solve(drift, flow, m1_a.coeffs[0],
                                         m1_b.coeffs[0], cfg)
    return ModeSeries(cfg.lattice, times, recs[:, 3, :], "signed")


def solve_d2(drift, flow: ModeSeries, d1_a: ModeSeries, d1_b: ModeSeries,
             cfg: SolverConfig) -> ModeSeries:
    """Mixed Dirac-derivative second tangent, zero initial data."""
    times, recs, _ = _second_order_solve(drift, flow, d1_a.coeffs[0],
                                         d1_b.coeffs[0], cfg)
    return ModeSeries(cfg.lattice, times, recs[:, 3, :], "signed")


def apply_linearized(drift, m: SpectralField, q_coeffs: np.ndarray) -> np.ndarray:
    """Full linearised generator L_m q (Laplacian included), in modes."""
    sys = _Semilinear(drift, m.lattice)
    lam = -2.0 * np.pi**2 * m.lattice.abs2
    return lam * np.asarray(q_coeffs, dtype=complex) + sys.linearized_nonlocal(
        m.coeffs, np.asarray(q_coeffs, dtype=complex))


def fp_rhs(drift, m: SpectralField) -> np.ndarray:
    """Right-hand side (1/2) lap m - div(m b(., m)) at a single density."""
    sys = _Semilinear(drift, m.lattice)
    lam = -2.0 * np.pi**2 * m.lattice.abs2
    return lam * m.coeffs + sys.fp_nonlinear(m.coeffs)


def _dense_flow(drift, mu0: SpectralField, t: float, dt: float, lattice: ModeLattice):
    """Flow modes on the half-step grid needed by backward RK4 stages."""
    steps = max(1, int(math.ceil(t / dt - 1e-12)))
    cfg = SolverConfig(lattice=lattice, dt=t / steps / 2 if t > 0 else dt,
                       t_end=t, record_stride=1)
    if t == 0:
        return np.array([0.0]), mu0.coeffs[None, :], cfg
    series = solve_nonlinear_fp(drift, mu0, cfg)
    return series.times, series.coeffs, cfg


def solve_backward_kolmogorov(drift, flow: ModeSeries | None, xi: SpectralField,
                              t: float, freeze: str = "along-flow",
                              profile: SpectralField | None = None,
                              cfg: SolverConfig | None = None) -> ModeSeries:
    """Backward Cauchy problem d_s w + (1/2) lap w + V(s,.) grad w (+ nonlocal) = 0.

    freeze = 'along-flow':  V(s,.) = b(., m(s; mu)) read off the given flow;
    freeze = 'at-uniform':  V = b(., Leb);
    freeze = 'at-profile':  V = b(., p_psi) plus the nonlocal adjoint term
                            int (delta b/delta m)(y, p_psi)(x) . grad w(y) p_psi(dy).

    Returns w on the record grid of the forward variable sigma = t - s, so
    entry i holds w(t - sigma_i, .); entry 0 is the terminal datum xi.
    """
    lattice = xi.lattice
    if cfg is None:
        cfg = SolverConfig(lattice=lattice, dt=5e-3, t_end=t)
    else:
        cfg = SolverConfig(lattice=lattice, dt=cfg.dt, t_end=t,
                           integrator=cfg.integrator, record_stride=cfg.record_stride)
    kit = _GridKit(lattice)
    ikn = kit.ikn

    if freeze == "along-flow":
        if flow is None:
            raise InvalidInput("along-flow freeze needs a flow")
        if flow.times[-1] < t - 1e-9:
            raise InvalidInput(f"flow covers [0, {flow.times[-1]}], need [0, {t}]")
        mu0 = flow.field(0)
        half_times, half_coeffs, _ = _dense_flow(drift, mu0, t, cfg.dt, lattice)

        def v_modes_at(s: float) -> np.ndarray:
            i = int(round(s / (half_times[1] - half_times[0]))) if len(half_times) > 1 else 0
            i = min(max(i, 0), len(half_times) - 1)
            m = _drift_wrap(lattice, half_coeffs[i], "density")
            return drift.drift_field_modes(m)

        nonlocal_m = None
    elif freeze == "at-uniform":
        uniform = SpectralField.uniform(lattice)
        v_const = drift.drift_field_modes(uniform)

        def v_modes_at(_s: float) -> np.ndarray:
            return v_const

        nonlocal_m = None
    elif freeze == "at-profile":
        if profile is None:
            raise InvalidInput("at-profile freeze needs the stationary profile")
        v_const = drift.drift_field_modes(profile)

        def v_modes_at(_s: float) -> np.ndarray:
            return v_const

        nonlocal_m = profile
    else:
        raise InvalidInput(f"unknown freeze mode {freeze!r}")

    if nonlocal_m is not None:
        m_grid = kit.to_grid(nonlocal_m.coeffs)
        b_at_m = drift.drift_field_modes(nonlocal_m)
        b_grid = np.stack([kit.to_grid(b_at_m[i]) for i in range(lattice.d)])

    def rhs(sigma, y):
        # forward variable sigma = t - s: dw/dsigma = (1/2) lap w + V.grad w (+ g)
        w = y[0]
        v = v_modes_at(t - sigma)
        grad_w = ikn * w[None, :]  # (d, n_modes)
        acc = np.zeros_like(w)
        grads_grid = []
        for i in range(lattice.d):
            gw = kit.to_grid(grad_w[i])
            grads_grid.append(gw)
            acc += kit.to_modes(kit.to_grid(v[i]) * gw)
        if nonlocal_m is not None:
            # rho_i = (d_i w) m as a distribution; kernel part per drift variant
            rho = np.stack([kit.to_modes(grads_grid[i] * m_grid)
                            for i in range(lattice.d)])
            m_fld = _drift_wrap(lattice, nonlocal_m.coeffs, "density")
            g = drift.adjoint_kernel_modes(m_fld, rho)
            # normalisation of delta b/delta m: constant -int b . grad w dm
            const = -sum(float(np.mean(b_grid[i] * grads_grid[i] * m_grid))
                         for i in range(lattice.d))
            g = g.copy()
            g[lattice.zero_index] += const
            acc = acc + g
        return acc[None, :]

    times, recs, _ = _integrate(lattice, xi.coeffs[None, :], rhs, cfg, pins=[])
    return ModeSeries(lattice, times, recs[:, 0, :], "signed")


def stationary_kuramoto_profile(kappa: float, lattice: ModeLattice | None = None) -> dict:
    """Stationary synchronized profile of the Kuramoto flow.

    kappa <= 1: r = 0 and the uniform density. kappa > 1: solves the
    self-consistency r = I1(2 kappa r)/I0(2 kappa r) by safeguarded Newton,
    then p(x) = Z^{-1} exp(2 kappa r cos(2 pi x)) with modes taken by FFT of
    the grid samples. Returns {r, p, psi, Z, residual}.
    """
    if kappa <= 0:
        raise InvalidInput(f"kappa must be positive, got {kappa}")
    lattice = lattice or ModeLattice(1, 32)
    if lattice.d != 1:
        raise InvalidInput("the Kuramoto profile lives in d = 1")
    if kappa <= 1.0:
        return {"r": 0.0, "p": SpectralField.uniform(lattice), "psi": 0.0,
                "Z": 1.0, "residual": 0.0}

    def g(r):
        return r - bessel_ratio_i1_i0(2 * kappa * r)

    r = min(math.sqrt(2 * (kappa - 1) / kappa), 0.9)
    lo, hi = 1e-12, 1.0  # g(lo) < 0 < g(hi) for kappa > 1
    for _ in range(200):
        gr = g(r)
        if abs(gr) < 1e-15:
            break
        if gr > 0:
            hi = r
        else:
            lo = r
        dg = 1.0 - 2 * kappa * bessel_ratio_derivative(2 * kappa * r)
        step = gr / dg if dg != 0 else 0.0
        r_new = r - step
        if not (lo < r_new < hi):  # safeguard: bisect when Newton leaves the bracket
            r_new = 0.5 * (lo + hi)
        if abs(r_new - r) < 1e-16:
            r = r_new
            break
        r = r_new
    residual = abs(g(r))
    G = lattice.default_grid
    x = np.arange(G) / G
    raw = np.exp(2 * kappa * r * np.cos(2 * np.pi * x))
    Z = float(np.mean(raw))
    coeffs = grid_to_modes(raw / Z, lattice)
    p = SpectralField(lattice, coeffs, "density")
    return {"r": float(r), "p": p, "psi": 0.0, "Z": Z, "residual": float(residual)}


def profile_derivative(p: SpectralField) -> SpectralField:
    """Spatial derivative p' of a d = 1 density, as a zero-mass distribution."""
    n = p.lattice.modes[:, 0]
    return SpectralField(p.lattice, 2j * np.pi * n * p.coeffs, "signed", validate=False)


def galerkin_stationary_profile(drift, lattice: ModeLattice,
                                guess: SpectralField | None = None,
                                tol: float = 1e-13) -> SpectralField:
    """Newton solve of the truncated stationary equation fp_rhs(p) = 0.

    The Jacobian of the Galerkin right-hand side at p is exactly the
    linearised operator, assembled densely over real degrees of freedom
    (mass mode pinned). Converges from the analytic profile in a few steps;
    used where distances to the stationary family must be resolved below the
    collocation error of the analytic profile.
    """
    if lattice.d != 1:
        raise InvalidInput("Galerkin stationary solve implemented for d = 1")
    if guess is None:
        guess = stationary_kuramoto_profile(getattr(drift, "kappa", 2.0), lattice)["p"]
    coeffs = guess.coeffs.copy()
    pos = [k for k in range(lattice.n_modes) if lattice.modes[k, 0] > 0]
    neg_of = {k: lattice.index_of([-lattice.modes[k, 0]]) for k in pos}

    def pack(c):
        return np.concatenate([c[pos].real, c[pos].imag])

    def unpack(x):
        c = np.zeros(lattice.n_modes, dtype=complex)
        half = len(pos)
        c[lattice.zero_index] = 1.0
        for i, k in enumerate(pos):
            c[k] = x[i] + 1j * x[half + i]
            c[neg_of[k]] = np.conj(c[k])
        return c

    def residual(x):
        f = SpectralField(lattice, unpack(x), "density", validate=False)
        return pack(fp_rhs(drift, f))

    x = pack(coeffs)
    for _ in range(60):
        r = residual(x)
        if np.max(np.abs(r)) < tol:
            break
        # dense Jacobian via the linearised operator on real probes
        dim = len(x)
        jac = np.zeros((dim, dim))
        m_field = SpectralField(lattice, unpack(x), "density", validate=False)
        for i, k in enumerate(pos):
            probe = np.zeros(lattice.n_modes, dtype=complex)
            probe[k] = 1.0
            probe[neg_of[k]] = 1.0
            jac[:, i] = pack(apply_linearized(drift, m_field, probe))
            probe[k] = 1j
            probe[neg_of[k]] = -1j
            jac[:, len(pos) + i] = pack(apply_linearized(drift, m_field, probe))
        # the rotation direction p*' is a null vector of the Jacobian:
        # take the minimum-norm Newton step instead of solving exactly
        step, *_ = np.linalg.lstsq(jac, r, rcond=1e-10)
        x = x - step
    final = np.max(np.abs(residual(x)))
    if final > 100 * tol:
        raise InvalidInput(f"stationary Newton stalled at residual {final:.3e}")
    return SpectralField(lattice, unpack(x), "density", validate=False)


def solve_deviation_from_profile(drift, p_star: SpectralField, q0: SpectralField,
                                 cfg: SolverConfig) -> ModeSeries:
    """Integrate the flow in deviation variables m = p* + q around an exactly
    stationary p*: dq/dt = L_{p*} q - div(q (delta b/delta m)(q)).

    All right-hand-side terms are proportional to q, so the decay onto the
    stationary family stays resolvable far below the cancellation floor of
    direct distances (the same reason deviations from the uniform state decay
    cleanly). Requires an affine-in-measure drift.
    """
    assert drift.derivative_is_constant_in_m()
    sys = _Semilinear(drift, cfg.lattice)
    p_coeffs = p_star.coeffs

    def rhs(_t, y):
        q = y[0]
        lin = sys.linearized_nonlocal(p_coeffs, q)
        quad = 0.5 * sys.bilinear_source(p_coeffs, q, q)
        return (lin + quad)[None, :]

    times, recs, _ = _integrate(cfg.lattice, q0.coeffs[None, :], rhs, cfg,
                                pins=[(0, 0.0)])
    return ModeSeries(cfg.lattice, times, recs[:, 0, :], "signed")


def aligned_orthogonal_distance(q_coeffs: np.ndarray, p_star: SpectralField,
                                s: float = 1.0) -> float:
    """Distance of p* + q to the rotation family of p*, to leading order in q:
    the weighted dual norm of q minus its component along p*'."""
    lattice = p_star.lattice
    w = (1.0 + lattice.abs2) ** (-s)
    dp = profile_derivative(p_star).coeffs
    inner = float(np.real(np.sum(w * q_coeffs * np.conj(dp))))
    norm_dp = float(np.real(np.sum(w * np.abs(dp) ** 2)))
    total = float(np.real(np.sum(w * np.abs(q_coeffs) ** 2)))
    return float(np.sqrt(max(total - inner**2 / norm_dp, 0.0)))


def kuramoto_projection_coefficient(q: SpectralField, p: SpectralField) -> float:
    """Late-time projection <<q, p'>>_psi / <<p', p'>>_psi in the weighted pairing."""
    dp = profile_derivative(p)
    num = weighted_dual_inner(q, dp, p)
    den = weighted_dual_inner(dp, dp, p)
    return num / den


def decay_rate_fit(series, t_min: float = 0.0) -> dict:
    """Least-squares line on (t, log value): lambda = -slope.

    Returns {lambda, C, r2}. Needs >= 5 points at t >= t_min, all positive.
    """
    pts = [(float(t), float(v)) for t, v in series if t >= t_min]
    if len(pts) < 5:
        raise InvalidInput(f"need >= 5 points with t >= {t_min}, got {len(pts)}")
    t = np.array([p[0] for p in pts])
    v = np.array([p[1] for p in pts])
    if np.any(v <= 0):
        raise InvalidInput("decay fit requires positive values")
    logv = np.log(v)
    slope, intercept = np.polyfit(t, logv, 1)
    fitted = slope * t + intercept
    ss_res = float(np.sum((logv - fitted) ** 2))
    ss_tot = float(np.sum((logv - logv.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return {"lambda": float(-slope), "C": float(np.exp(intercept)), "r2": float(r2)}


def u_first_derivative(drift, phi_spec, mu: SpectralField, t: float, z,
                       cfg: SolverConfig) -> float:
    """delta U/delta m (t, mu)(z) = <dPhi/dm(m(t)), m1(t; mu, dirac_z)>."""
    from .functionals import derivatives as functional_derivatives

    lattice = cfg.lattice
    run = SolverConfig(lattice=lattice, dt=cfg.dt, t_end=t,
                       integrator=cfg.integrator, record_stride=max(1, cfg.record_stride))
    delta = DiracModes(lattice, z, fejer_level=lattice.M + 1).field
    q0 = delta.coeffs - mu.coeffs
    times, recs, _ = _tangent_solve(drift, mu.coeffs, [q0], run)
    m_t = _drift_wrap(lattice, recs[-1, 0], "density")
    q_t = _drift_wrap(lattice, recs[-1, 1], "signed")
    derivs = functional_derivatives(phi_spec, m_t)
    return pair_distribution(derivs.first, q_t)


def u_second_mixed_derivative(drift, phi_spec, mu: SpectralField, t: float,
                              z1, z2, cfg: SolverConfig,
                              components=(0, 0)) -> float:
    """(d_{z2})_j (d_{z1})_i delta^2 U/delta m^2 via the d-path representation."""
    from .functionals import derivatives as functional_derivatives

    lattice = cfg.lattice
    run = SolverConfig(lattice=lattice, dt=cfg.dt, t_end=t,
                       integrator=cfg.integrator, record_stride=max(1, cfg.record_stride))
    i, j = components
    qa0 = dirac_derivative_modes(lattice, z1, i, lattice.M + 1)
    qb0 = dirac_derivative_modes(lattice, z2, j, lattice.M + 1)
    flow_stub = ModeSeries(lattice, [0.0], mu.coeffs[None, :], "density")
    times, recs, _ = _second_order_solve(drift, flow_stub, qa0, qb0, run)
    m_t = _drift_wrap(lattice, recs[-1, 0], "density")
    d1_a = _drift_wrap(lattice, recs[-1, 1], "signed")
    d1_b = _drift_wrap(lattice, recs[-1, 2], "signed")
    d2 = _drift_wrap(lattice, recs[-1, 3], "signed")
    derivs = functional_derivatives(phi_spec, m_t)
    return derivs.apply_second(d1_a, d1_b) + pair_distribution(derivs.first, d2)
