"""Torus geometry and spectral representation of measures and distributions.

Everything downstream works with truncated Fourier series on the d-dimensional
unit torus. Fourier convention: for a measure or function f,

    f^n = integral of f(x) exp(-i 2 pi n.x) dx,   n in Z^d,

so a density with coefficients c_n evaluates pointwise as
sum_n c_n exp(+i 2 pi n.x). Real-valued fields satisfy c(-n) = conj(c(n)).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import AliasError, InvalidInput, NonPositiveDensity, UnsupportedDimension

TOL_POS = 1e-8


class ModeLattice:
    """Integer modes n with max_j |n_j| <= M, enumerated lexicographically.

    The enumeration runs n_1 fastest last, i.e. standard lexicographic order
    of the tuples (n_1, ..., n_d) with each coordinate in [-M, M].
    """

    def __init__(self, d: int, M: int):
        if d < 1 or M < 1:
            raise InvalidInput(f"need d >= 1 and M >= 1, got d={d}, M={M}")
        self.d = int(d)
        self.M = int(M)
        axes = [np.arange(-M, M + 1)] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        self.modes = np.stack([m.ravel() for m in mesh], axis=1)  # (n_modes, d)
        self.n_modes = (2 * M + 1) ** d
        self.abs2 = np.sum(self.modes.astype(float) ** 2, axis=1)
        # flat index of -n for each n: reversing the enumeration works because
        # the lattice is symmetric and lexicographic
        self.neg_index = np.arange(self.n_modes)[::-1].copy()
        self._zero = self.n_modes // 2

    @property
    def zero_index(self) -> int:
        return self._zero

    def index_of(self, n) -> int:
        n = np.atleast_1d(np.asarray(n, dtype=int))
        if n.shape != (self.d,):
            raise InvalidInput(f"mode must have {self.d} components")
        if np.any(np.abs(n) > self.M):
            raise InvalidInput(f"mode {n} outside lattice with M={self.M}")
        idx = 0
        for j in range(self.d):
            idx = idx * (2 * self.M + 1) + (int(n[j]) + self.M)
        return idx

    def __eq__(self, other) -> bool:
        return isinstance(other, ModeLattice) and self.d == other.d and self.M == other.M

    def __hash__(self) -> int:
        return hash((self.d, self.M))

    def __repr__(self) -> str:
        return f"ModeLattice(d={self.d}, M={self.M})"

    @property
    def default_grid(self) -> int:
        """Collocation grid size per axis: odd, exact for degree <= 2M."""
        return 4 * self.M + 1


def wrap(point) -> np.ndarray:
    """Reduce coordinates modulo 1 into [0, 1). Idempotent."""
    x = np.asarray(point, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInput("non-finite coordinate")
    out = np.mod(x, 1.0)
    # mod can return 1.0 for tiny negative inputs
    out[out >= 1.0] -= 1.0
    return out


def torus_distance(x, y) -> float:
    """Coordinate-wise min(|x-y|, 1-|x-y|), aggregated in Euclidean norm."""
    dx = np.abs(wrap(x) - wrap(y))
    dx = np.minimum(dx, 1.0 - dx)
    return float(np.sqrt(np.sum(dx**2)))


class SpectralField:
    """Complex Fourier coefficients on a ModeLattice.

    kind is 'density' (mass mode pinned to 1) or 'signed' (a general real
    distribution; zero-mass objects carry coeff(0) = 0).
    """

    __slots__ = ("lattice", "coeffs", "kind")

    def __init__(self, lattice: ModeLattice, coeffs, kind: str = "signed",
                 validate: bool = True, sym_tol: float = 1e-8):
        if kind not in ("density", "signed"):
            raise InvalidInput(f"unknown field kind {kind!r}")
        c = np.asarray(coeffs, dtype=complex)
        if c.shape != (lattice.n_modes,):
            raise InvalidInput(
                f"coefficient array has shape {c.shape}, expected ({lattice.n_modes},)")
        if validate:
            scale = max(1.0, float(np.max(np.abs(c))))
            mismatch = np.max(np.abs(c - np.conj(c[lattice.neg_index])))
            if mismatch > sym_tol * scale:
                raise InvalidInput(
                    f"coefficients are not conjugate-symmetric (mismatch {mismatch:.3e})")
            c = 0.5 * (c + np.conj(c[lattice.neg_index]))
            if kind == "density":
                if abs(c[lattice.zero_index] - 1.0) > 1e-8:
                    raise InvalidInput(
                        f"density mass mode is {c[lattice.zero_index]}, expected 1")
                c[lattice.zero_index] = 1.0
        self.lattice = lattice
        self.coeffs = c
        self.kind = kind

    def coeff(self, n) -> complex:
        return complex(self.coeffs[self.lattice.index_of(n)])

    @property
    def mass(self) -> complex:
        return complex(self.coeffs[self.lattice.zero_index])

    def copy(self, kind: str | None = None) -> "SpectralField":
        return SpectralField(self.lattice, self.coeffs.copy(),
                             kind or self.kind, validate=False)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        if self.lattice != other.lattice:
            raise InvalidInput("lattice mismatch")
        return SpectralField(self.lattice, self.coeffs - other.coeffs,
                             "signed", validate=False)

    @classmethod
    def uniform(cls, lattice: ModeLattice) -> "SpectralField":
        c = np.zeros(lattice.n_modes, dtype=complex)
        c[lattice.zero_index] = 1.0
        return cls(lattice, c, "density", validate=False)

    @classmethod
    def from_function(cls, lattice: ModeLattice, f, kind: str = "density",
                      normalize: bool = True) -> "SpectralField":
        """Collocate f on the default grid and take its (aliased) modes.

        Density-kind results are rescaled to unit mass unless normalize=False.
        """
        G = lattice.default_grid
        axes = [np.arange(G) / G] * lattice.d
        mesh = np.meshgrid(*axes, indexing="ij")
        values = np.asarray(f(*mesh), dtype=float)
        coeffs = grid_to_modes(values, lattice)
        if kind == "density" and normalize:
            mass = coeffs[lattice.zero_index].real
            if mass <= 0:
                raise NonPositiveDensity(f"total mass {mass} is not positive")
            coeffs = coeffs / mass
        return cls(lattice, coeffs, kind)

    def to_json_dict(self) -> dict:
        return {
            "d": self.lattice.d,
            "M": self.lattice.M,
            "kind": self.kind,
            "coeffs": [[float(z.real), float(z.imag)] for z in self.coeffs],
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "SpectralField":
        lattice = ModeLattice(int(obj["d"]), int(obj["M"]))
        arr = np.asarray(obj["coeffs"], dtype=float)
        return cls(lattice, arr[:, 0] + 1j * arr[:, 1], obj.get("kind", "signed"))


class EmpiricalMeasure:
    """N particle positions plus cached low-order Fourier modes."""

    def __init__(self, particles, lattice: ModeLattice):
        pts = np.asarray(particles, dtype=float)
        if pts.ndim == 1:
            pts = pts[:, None]
        if pts.shape[0] < 1:
            raise InvalidInput("empty particle list")
        if pts.shape[1] != lattice.d:
            raise InvalidInput(
                f"particles have dimension {pts.shape[1]}, lattice has d={lattice.d}")
        self.particles = wrap(pts)
        self.lattice = lattice
        self.cached_modes = fourier_modes_of_empirical(self.particles, lattice)

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    def to_csv(self) -> str:
        lines = [",".join(f"{v:.17g}" for v in row) for row in self.particles]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str, lattice: ModeLattice) -> "EmpiricalMeasure":
        rows = [[float(v) for v in line.split(",")]
                for line in text.strip().splitlines() if line.strip()]
        return cls(np.asarray(rows), lattice)


def fourier_modes_of_empirical(particles, lattice: ModeLattice) -> SpectralField:
    """coeff(n) = (1/N) sum_i exp(-i 2 pi n.x_i)."""
    pts = np.asarray(particles, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    if pts.shape[0] < 1:
        raise InvalidInput("empty particle list")
    phases = lattice.modes.astype(float) @ pts.T  # (n_modes, N)
    coeffs = np.exp(-2j * np.pi * phases).mean(axis=1)
    coeffs[lattice.zero_index] = 1.0
    return SpectralField(lattice, coeffs, "density", validate=False)


def _mode_placement(lattice: ModeLattice, G: int):
    """Frequency-bin index of each lattice mode in a size-G FFT, per axis."""
    return tuple(np.mod(lattice.modes[:, j], G) for j in range(lattice.d))


def evaluate_on_grid(fld: SpectralField, G: int | None = None,
                     imag_tol: float = 1e-10) -> np.ndarray:
    """Inverse Fourier sum on the uniform G^d grid (x_j = j/G)."""
    lattice = fld.lattice
    if G is None:
        G = lattice.default_grid
    if G < 2 * lattice.M + 1:
        raise AliasError(f"grid size {G} < 2M+1 = {2 * lattice.M + 1}")
    spec = np.zeros((G,) * lattice.d, dtype=complex)
    spec[_mode_placement(lattice, G)] = fld.coeffs
    values = np.fft.ifftn(spec) * G**lattice.d
    residue = float(np.max(np.abs(values.imag)))
    scale = max(1.0, float(np.max(np.abs(values.real))))
    if residue > imag_tol * scale:
        raise InvalidInput(
            f"field is not real on the grid (imaginary residue {residue:.3e})")
    return np.ascontiguousarray(values.real)


def grid_to_modes(values: np.ndarray, lattice: ModeLattice) -> np.ndarray:
    """Forward transform of grid samples; exact for fields band-limited to M."""
    G = values.shape[0]
    if G < 2 * lattice.M + 1:
        raise AliasError(f"grid size {G} < 2M+1 = {2 * lattice.M + 1}")
    spec = np.fft.fftn(values) / values.size
    return np.ascontiguousarray(spec[_mode_placement(lattice, G)])


def sobolev_weights(lattice: ModeLattice, s: float) -> np.ndarray:
    return (1.0 + lattice.abs2) ** (-s)


def sobolev_tail_bound(lattice: ModeLattice, s: float) -> float:
    """Upper bound for 4 * sum over |n|_inf > M of (1 + |n|^2)^(-s).

    Finite only for s > d/2; the acceptance-relevant exponents satisfy this.
    """
    d, M = lattice.d, lattice.M
    if s <= d / 2:
        return float("inf")
    K = max(4 * M, 256)
    if d == 1:
        n = np.arange(M + 1, K + 1, dtype=float)
        acc = 2.0 * np.sum((1.0 + n**2) ** (-s))
        acc += 2.0 * K ** (1 - 2 * s) / (2 * s - 1)  # integral remainder
    else:
        axes = [np.arange(-K, K + 1, dtype=float)] * d
        mesh = np.meshgrid(*axes, indexing="ij")
        inside = np.ones(mesh[0].shape, dtype=bool)
        for m in mesh:
            inside &= np.abs(m) <= M
        r2 = sum(m**2 for m in mesh)
        acc = float(np.sum((1.0 + r2[~inside]) ** (-s)))
        # radial remainder beyond the K-box, |n| >= K
        surface = 2 * np.pi if d == 2 else 4 * np.pi
        acc += surface * K ** (d - 2 * s) / (2 * s - d)
    return 4.0 * acc


def _as_field(mu, lattice: ModeLattice | None = None) -> SpectralField:
    if isinstance(mu, SpectralField):
        return mu
    if isinstance(mu, EmpiricalMeasure):
        if lattice is not None and lattice != mu.lattice:
            return fourier_modes_of_empirical(mu.particles, lattice)
        return mu.cached_modes
    raise InvalidInput(f"expected SpectralField or EmpiricalMeasure, got {type(mu)}")


def sobolev_dual_norm_sq(a, b, s: float):
    """Truncated sum over the lattice of (1+|n|^2)^(-s) |a^n - b^n|^2.

    Returns (value, tail_bound) where tail_bound is the documented bound
    4 * sum_{|n| > M} (1+|n|^2)^(-s) on the dropped contribution.
    """
    if s <= 0:
        raise InvalidInput(f"Sobolev exponent must be positive, got s={s}")
    fa, fb = _as_field(a), _as_field(b)
    if fa.lattice != fb.lattice:
        raise InvalidInput("fields live on different lattices")
    w = sobolev_weights(fa.lattice, s)
    value = float(np.sum(w * np.abs(fa.coeffs - fb.coeffs) ** 2))
    return value, sobolev_tail_bound(fa.lattice, s)


def _atoms_of(mu, grid: int):
    """Weighted atoms on the circle: exact for empirical, cell-discretized for fields."""
    if isinstance(mu, EmpiricalMeasure):
        x = mu.particles[:, 0]
        return x, np.full(x.shape, 1.0 / x.size)
    fld = _as_field(mu)
    x = (np.arange(grid) + 0.5) / grid
    phases = np.exp(2j * np.pi * np.outer(fld.lattice.modes[:, 0], x))
    dens = np.real(fld.coeffs @ phases)
    dens = np.maximum(dens, 0.0)
    w = dens / dens.sum()
    return x, w


def wasserstein1_1d(a, b, grid: int = 8192) -> float:
    """Exact W1 on the circle between two probability measures (d = 1).

    Uses the level-median formula: W1 = min_c int_0^1 |F_a - F_b - c| dx,
    evaluated exactly on the union of atom positions. SpectralField inputs
    are discretized into `grid` cells first (mass transport error <= 1/(2 grid)).
    """
    for m in (a, b):
        fld = _as_field(m)
        if fld.lattice.d != 1:
            raise UnsupportedDimension("wasserstein1_1d requires d = 1")
    xa, wa = _atoms_of(a, grid)
    xb, wb = _atoms_of(b, grid)
    pos = np.concatenate([xa, xb])
    sgn = np.concatenate([wa, -wb])
    order = np.argsort(pos, kind="stable")
    pos, sgn = pos[order], sgn[order]
    # D(x) = F_a - F_b is constant on each arc between consecutive atoms
    D = np.cumsum(sgn)
    lengths = np.diff(np.concatenate([pos, [pos[0] + 1.0]]))
    keep = lengths > 0
    D, lengths = D[keep], lengths[keep]
    # level median of D under the length measure
    order = np.argsort(D)
    cum = np.cumsum(lengths[order])
    c = D[order][np.searchsorted(cum, 0.5 * cum[-1])]
    return float(np.sum(lengths * np.abs(D - c)))


def fejer_weights(lattice: ModeLattice, n_fejer: int) -> np.ndarray:
    """prod_j (1 - |n_j|/N) for max_j |n_j| < N, zero otherwise."""
    if n_fejer < 1:
        raise InvalidInput(f"Fejer level must be >= 1, got {n_fejer}")
    absn = np.abs(lattice.modes).astype(float)
    w = np.prod(np.maximum(1.0 - absn / n_fejer, 0.0), axis=1)
    w[np.any(absn >= n_fejer, axis=1)] = 0.0
    return w


def fejer_smooth(mu, n_fejer: int) -> SpectralField:
    """Triangular-weight truncation; output is a bona fide density.

    The result is band-limited to n_fejer - 1 and returned on that lattice
    (the source lattice if it is smaller and the source is empirical).
    """
    if n_fejer < 1:
        raise InvalidInput(f"Fejer level must be >= 1, got {n_fejer}")
    if isinstance(mu, EmpiricalMeasure):
        lattice = ModeLattice(mu.lattice.d, max(n_fejer - 1, 1))
        src = fourier_modes_of_empirical(mu.particles, lattice)
    else:
        src = _as_field(mu)
        if src.lattice.M < n_fejer - 1:
            raise InvalidInput(
                f"source modes only reach {src.lattice.M}, need {n_fejer - 1}")
        if src.lattice.M > n_fejer - 1 and n_fejer >= 2:
            small = ModeLattice(src.lattice.d, n_fejer - 1)
            sel = np.all(np.abs(src.lattice.modes) <= n_fejer - 1, axis=1)
            src = SpectralField(small, src.coeffs[sel], src.kind, validate=False)
    w = fejer_weights(src.lattice, n_fejer)
    return SpectralField(src.lattice, src.coeffs * w, "density", validate=False)


def rotate(fld: SpectralField, psi: float) -> SpectralField:
    """Pushforward by x -> x + psi (d = 1): coeff(n) -> coeff(n) exp(-i 2 pi n psi)."""
    if fld.lattice.d != 1:
        raise UnsupportedDimension("rotate requires d = 1")
    phases = np.exp(-2j * np.pi * fld.lattice.modes[:, 0] * float(psi))
    return SpectralField(fld.lattice, fld.coeffs * phases, fld.kind, validate=False)


def _golden_section(f, lo: float, hi: float, tol: float = 1e-10):
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    x = 0.5 * (a + b)
    return x, f(x)


def align_to_family(mu, profile: SpectralField, s: float = 1.0):
    """Minimize ||mu - rotate(profile, psi)||_{-s,2} over the rotation phase.

    Returns (psi_star in [0,1), minimized norm). Initialization uses the phase
    of the first Fourier mode; when |mu^1| is degenerate (< 1e-12) a 64-offset
    grid search replaces it. Golden-section refinement to a 1e-10 bracket.
    """
    fmu = _as_field(mu, profile.lattice)
    lattice = profile.lattice
    if lattice.d != 1:
        raise UnsupportedDimension("align_to_family requires d = 1")
    if fmu.lattice != lattice:
        raise InvalidInput("measure and profile live on different lattices")
    w = sobolev_weights(lattice, s)
    n = lattice.modes[:, 0]

    def objective(psi):
        diff = fmu.coeffs - profile.coeffs * np.exp(-2j * np.pi * n * psi)
        return float(np.sum(w * np.abs(diff) ** 2))

    mu1 = fmu.coeff([1]) if lattice.M >= 1 else 0.0
    p1 = profile.coeff([1]) if lattice.M >= 1 else 0.0
    if abs(mu1) < 1e-12 or abs(p1) < 1e-12:
        # degenerate phase: coarse grid search then local refinement
        offsets = np.arange(64) / 64.0
        vals = [objective(p) for p in offsets]
        psi0 = float(offsets[int(np.argmin(vals))])
    else:
        # rotate(profile, psi)^1 = p^1 exp(-i 2 pi psi); match phases
        psi0 = float((np.angle(p1) - np.angle(mu1)) / (2 * np.pi))
    psi, val = _golden_section(objective, psi0 - 0.25, psi0 + 0.25)
    return float(np.mod(psi, 1.0)), float(np.sqrt(max(val, 0.0)))


def weighted_dual_inner(u: SpectralField, v: SpectralField, p: SpectralField,
                        G: int | None = None) -> float:
    """Weighted H^-1-type pairing int U(x) V(x) / p(x) dx (d = 1).

    U, V are the primitives of u, v offset so that <U, 1/p> = <V, 1/p> = 0.
    """
    lattice = u.lattice
    if lattice.d != 1:
        raise UnsupportedDimension("weighted_dual_inner requires d = 1")
    if v.lattice != lattice or p.lattice != lattice:
        raise InvalidInput("fields live on different lattices")
    if abs(u.mass) > 1e-10 or abs(v.mass) > 1e-10:
        raise InvalidInput("weighted_dual_inner requires zero-mass arguments")
    if G is None:
        G = lattice.default_grid
    pvals = evaluate_on_grid(p, G)
    if pvals.min() < TOL_POS:
        raise NonPositiveDensity(
            f"density reaches {pvals.min():.3e} on the grid")
    n = lattice.modes[:, 0]
    nz = n != 0

    def primitive(fld):
        c = np.zeros(lattice.n_modes, dtype=complex)
        c[nz] = fld.coeffs[nz] / (2j * np.pi * n[nz])
        return evaluate_on_grid(SpectralField(lattice, c, "signed", validate=False), G)

    inv_p = 1.0 / pvals
    U = primitive(u)
    V = primitive(v)
    U = U - np.mean(U * inv_p) / np.mean(inv_p)
    V = V - np.mean(V * inv_p) / np.mean(inv_p)
    return float(np.mean(U * V * inv_p))


def pair_distribution(f: SpectralField, q: SpectralField) -> float:
    """Duality pairing <f, q> = int f dq for a function f and distribution q."""
    if f.lattice != q.lattice:
        raise InvalidInput("lattice mismatch")
    return float(np.real(np.sum(f.coeffs * q.coeffs[q.lattice.neg_index])))


@dataclass
class DiracModes:
    """Truncated mode sequence of a Dirac mass, optionally Fejer-pre-smoothed."""
    lattice: ModeLattice
    z: np.ndarray
    fejer_level: int | None = None
    field: SpectralField = field(init=False)

    def __post_init__(self):
        z = wrap(np.atleast_1d(np.asarray(self.z, dtype=float)))
        coeffs = np.exp(-2j * np.pi * (self.lattice.modes.astype(float) @ z))
        if self.fejer_level is not None:
            coeffs = coeffs * fejer_weights(self.lattice, self.fejer_level)
        self.z = z
        self.field = SpectralField(self.lattice, coeffs, "density", validate=False)
