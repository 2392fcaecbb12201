"""Seeded Euler-Maruyama simulation of the interacting particle system.

Replicas are advanced in fixed-size chunks; all randomness is counter-based
(Philox keyed by the run seed, counter built from a stream tag, the chunk
index, and the step index), so results are bit-identical regardless of how
chunks are scheduled across workers. Common-random-number runs use one
stream per replica with inverse-CDF normals, which makes the first N
particles of a larger run share noise with a smaller run.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtri

from .errors import InvalidInput, NonPositiveDensity
from .torus import (
    EmpiricalMeasure,
    ModeLattice,
    SpectralField,
    evaluate_on_grid,
    wrap,
)

_CHUNK = 1024  # replicas per batch; fixed so the noise addressing is stable
_STREAM_INIT = 1
_STREAM_STEP = 0
_STREAM_CRN = 2


@dataclass
class FourierModes:
    """Record empirical modes up to max |n_j| <= m_obs."""
    m_obs: int
    name: str = "modes"


@dataclass
class FunctionalObservable:
    """Record Phi(mu^N_t) for a functional spec."""
    spec: object
    name: str = "functional"


@dataclass
class ExitTime:
    """First t with |mu^{ell,N}_t| >= eta (linearly interpolated crossing)."""
    eta: float
    ell: int = 1
    name: str = "exit_time"


@dataclass
class FinalSnapshot:
    """Particle positions at the end of the run (EmpiricalMeasure CSV dump)."""
    name: str = "snapshot"


@dataclass
class SimConfig:
    n_particles: int
    dt: float
    t_end: float
    seed: int
    replicas: int = 1
    record_stride: int = 1
    observables: list = field(default_factory=list)
    crn: bool = False
    record_at: tuple | None = None  # explicit record times (overrides stride)

    def __post_init__(self):
        if self.dt <= 0:
            raise InvalidInput("dt must be positive")
        if self.replicas < 1:
            raise InvalidInput("replicas must be >= 1")
        if self.n_particles < 1:
            raise InvalidInput("need at least one particle")
        if self.record_stride < 1:
            raise InvalidInput("record_stride must be >= 1")
        if self.record_at is not None:
            steps = []
            for t in self.record_at:
                k = round(t / self.dt)
                if abs(k * self.dt - t) > 1e-9:
                    raise InvalidInput(f"record time {t} is not a multiple of dt")
                steps.append(int(k))
            self.record_at = tuple(sorted(set(steps)))
        if any(isinstance(o, ExitTime) for o in self.observables):
            self.record_stride = 1  # exit-time runs resolve every step


@dataclass
class ObservableSeries:
    replica: int
    times: np.ndarray
    values: dict

    def to_csv_rows(self):
        rows = []
        final_t = float(self.times[-1]) if len(self.times) else 0.0
        for name, arr in self.values.items():
            arr = np.atleast_2d(np.asarray(arr))
            if arr.shape[0] == len(self.times):
                for t, entry in zip(self.times, arr):
                    for v in np.atleast_1d(entry):
                        z = complex(v)
                        rows.append((self.replica, float(t), name, z.real, z.imag))
            else:
                # per-run observables (exit times, snapshots) sit at the end
                for v in np.asarray(arr).ravel():
                    z = complex(v)
                    rows.append((self.replica, final_t, name, z.real, z.imag))
        return rows


def philox_normals(seed: int, stream: int, block: int, step: int, shape) -> np.ndarray:
    """Standard normals addressed by (seed, stream, block, step)."""
    bitgen = np.random.Philox(key=seed & ((1 << 64) - 1),
                              counter=[0, stream, block, step])
    return np.random.Generator(bitgen).standard_normal(shape)


def philox_uniforms(seed: int, stream: int, block: int, step: int, count: int) -> np.ndarray:
    bitgen = np.random.Philox(key=seed & ((1 << 64) - 1),
                              counter=[0, stream, block, step])
    return np.random.Generator(bitgen).random(count)


def sample_initial(mu0: SpectralField, n: int, rng: np.random.Generator) -> EmpiricalMeasure:
    """i.i.d. samples from the density: inverse CDF (d=1) or rejection (d>=2)."""
    lattice = mu0.lattice
    pts = _sample_positions(mu0, n, rng)
    return EmpiricalMeasure(pts, lattice)


def _sample_positions(mu0: SpectralField, n: int, rng: np.random.Generator) -> np.ndarray:
    lattice = mu0.lattice
    G = lattice.default_grid
    dens = evaluate_on_grid(mu0, G)
    if dens.min() < -1e-8:
        raise NonPositiveDensity(f"density reaches {dens.min():.3e}")
    if lattice.d == 1:
        u = rng.random(n)
        return _inverse_cdf_1d(dens, u)[:, None]
    # rejection against c * uniform with exact mode-sum evaluation at proposals
    c = 1.2 * float(dens.max())
    out = np.empty((n, lattice.d))
    filled = 0
    modes = lattice.modes.astype(float)
    while filled < n:
        m = max(2 * (n - filled), 64)
        prop = rng.random((m, lattice.d))
        vals = np.real(np.exp(2j * np.pi * (prop @ modes.T)) @ mu0.coeffs)
        if vals.max() > c:
            raise NonPositiveDensity(
                f"rejection envelope {c:.4g} exceeded by density value {vals.max():.4g}")
        accept = rng.random(m) * c < vals
        take = min(int(accept.sum()), n - filled)
        out[filled:filled + take] = prop[accept][:take]
        filled += take
    return out


def _inverse_cdf_1d(dens: np.ndarray, u: np.ndarray) -> np.ndarray:
    G = len(dens)
    knots = np.arange(G + 1) / G
    p = np.maximum(dens, 0.0)
    closed = np.concatenate([p, [p[0]]])
    cdf = np.concatenate([[0.0], np.cumsum(0.5 * (closed[1:] + closed[:-1]) / G)])
    cdf /= cdf[-1]
    return np.interp(u, cdf, knots)


def step_em(state: EmpiricalMeasure, drift, dt: float,
            noise: np.ndarray) -> EmpiricalMeasure:
    """One Euler-Maruyama step with externally supplied standard normals."""
    from .drifts import eval_drift_on_particles

    if noise.shape != state.particles.shape:
        raise InvalidInput("noise shape must match the particle array")
    b = eval_drift_on_particles(drift, state)
    moved = wrap(state.particles + b * dt + np.sqrt(dt) * noise)
    return EmpiricalMeasure(moved, state.lattice)


class _BatchDrift:
    """Vectorized drift over a (R, N, d) position block."""

    def __init__(self, drift):
        self.drift = drift
        self.kind = drift.variant
        if self.kind in ("convolution", "kuramoto"):
            lattice = drift.lattice
            w = drift.potential.w_hat
            support = np.flatnonzero(np.abs(w) > 0)
            # keep one mode per conjugate pair; the drift is real so the pair
            # contributes twice the real part
            keep = [k for k in support if _lex_positive(lattice.modes[k])]
            self.modes = lattice.modes[keep].astype(float)  # (K, d)
            table = (-drift.kappa * 2j * np.pi * lattice.modes[keep].T.astype(float)
                     * w[keep][None, :])  # (d, K)
            self.table = table
        else:
            self.lattice = drift.lattice
            self.modes = drift.lattice.modes.astype(float)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        if self.kind in ("convolution", "kuramoto"):
            if self.modes.size == 0:
                return np.zeros_like(x)
            phases = np.einsum("rnd,kd->rnk", x, self.modes)
            e_pos = np.exp(2j * np.pi * phases)  # (R, N, K)
            mu_hat = np.conj(e_pos).mean(axis=1)  # (R, K)
            out = np.empty_like(x)
            for j in range(x.shape[2]):
                out[..., j] = 2.0 * np.real(
                    np.einsum("rnk,rk->rn", e_pos, self.table[j][None, :] * mu_hat))
            return out
        # small mean field: full-lattice empirical modes per replica
        phases = np.einsum("rnd,kd->rnk", x, self.modes)
        e_all = np.exp(2j * np.pi * phases)
        mu_hat = np.conj(e_all).mean(axis=1)  # (R, n_modes)
        neg = self.lattice.neg_index
        out = np.empty_like(x)
        for j in range(x.shape[2]):
            field_modes = (self.drift.b0_hat[j][None, :]
                           + self.drift.eps * mu_hat[:, neg] @ self.drift.kernel_hat[j].T)
            out[..., j] = np.real(np.einsum("rnk,rk->rn", e_all, field_modes))
        return out


def _lex_positive(mode) -> bool:
    for c in mode:
        if c > 0:
            return True
        if c < 0:
            return False
    return False


def _mode_block(x: np.ndarray, lattice: ModeLattice) -> np.ndarray:
    """(R, n_modes) empirical modes of each replica's cloud."""
    phases = np.einsum("rnd,kd->rnk", x, lattice.modes.astype(float))
    return np.exp(-2j * np.pi * phases).mean(axis=1)


def _exit_level(x: np.ndarray, ell: int, d: int) -> np.ndarray:
    """|mu^{ell,N}| per replica: modulus of one empirical mode."""
    mode = np.zeros(d)
    mode[0] = ell
    phases = np.einsum("rnd,d->rn", x, mode)
    return np.abs(np.exp(-2j * np.pi * phases).mean(axis=1))


def _run_chunk(args):
    (drift, mu0, cfg, chunk_idx, replica_lo, replica_hi, noise_override) = args
    n, d = cfg.n_particles, mu0.lattice.d
    r_c = replica_hi - replica_lo
    steps = int(round(cfg.t_end / cfg.dt))
    batch_drift = _BatchDrift(drift)

    # initial positions: one substream per chunk (or per replica under CRN)
    if cfg.crn:
        if d != 1:
            raise InvalidInput("common-random-number runs support d = 1 only")
        x = np.empty((r_c, n, d))
        for r in range(r_c):
            u = philox_uniforms(cfg.seed, _STREAM_CRN, replica_lo + r, 0, 2 * n)
            x[r] = _sample_positions(mu0, n, _FrozenUniforms(u))
    else:
        gen = np.random.Generator(np.random.Philox(
            key=cfg.seed & ((1 << 64) - 1), counter=[0, _STREAM_INIT, chunk_idx, 0]))
        x = np.stack([_sample_positions(mu0, n, gen) for _ in range(r_c)])

    mode_obs = [o for o in cfg.observables if isinstance(o, FourierModes)]
    func_obs = [o for o in cfg.observables if isinstance(o, FunctionalObservable)]
    exit_obs = [o for o in cfg.observables if isinstance(o, ExitTime)]
    recorded = {o.name: [] for o in mode_obs + func_obs}
    exit_state = {}
    for o in exit_obs:
        level0 = _exit_level(x, o.ell, d)
        tau = np.where(level0 >= o.eta, 0.0, np.inf)
        exit_state[o.name] = (tau, level0)

    def record():
        for o in mode_obs:
            lat = ModeLattice(d, o.m_obs)
            recorded[o.name].append(_mode_block(x, lat))
        for o in func_obs:
            lat = o.spec.lattice
            block = _mode_block(x, lat)
            vals = np.empty(r_c)
            for r in range(r_c):
                f = SpectralField(lat, block[r], "density", validate=False)
                vals[r] = o.spec.eval(f)
            recorded[o.name].append(vals)

    if cfg.record_at is not None:
        record_steps = set(cfg.record_at)
        should_record = [s in record_steps for s in range(1, steps + 1)]
    else:
        should_record = [s % cfg.record_stride == 0 or s == steps
                         for s in range(1, steps + 1)]
    if cfg.record_at is None or 0 in cfg.record_at:
        record()
        recorded_zero = True
    else:
        recorded_zero = False
    sqrt_dt = np.sqrt(cfg.dt)
    for step in range(steps):
        if noise_override is not None:
            xi = noise_override(step, (r_c, n, d))
        elif cfg.crn:
            xi = np.empty((r_c, n, d))
            for r in range(r_c):
                u = philox_uniforms(cfg.seed, _STREAM_CRN, replica_lo + r,
                                    step + 1, n * d)
                xi[r] = ndtri(u).reshape(n, d)
        else:
            xi = philox_normals(cfg.seed, _STREAM_STEP, chunk_idx, step + 1,
                                (r_c, n, d))
        b = batch_drift(x)
        x = np.mod(x + b * cfg.dt + sqrt_dt * xi, 1.0)
        t_now = (step + 1) * cfg.dt
        for o in exit_obs:
            level = _exit_level(x, o.ell, d)
            tau, prev = exit_state[o.name]
            crossing = (tau == np.inf) & (level >= o.eta)
            if np.any(crossing):
                frac = np.clip((o.eta - prev[crossing])
                               / np.maximum(level[crossing] - prev[crossing], 1e-300),
                               0.0, 1.0)
                tau[crossing] = t_now - cfg.dt + frac * cfg.dt
            exit_state[o.name] = (tau, level)
        if should_record[step]:
            record()

    times = ([0.0] if recorded_zero else []) + [
        s * cfg.dt for s in range(1, steps + 1) if should_record[s - 1]]
    times = np.array(times)
    snap_obs = [o for o in cfg.observables if isinstance(o, FinalSnapshot)]
    out = []
    for r in range(r_c):
        values = {}
        for o in mode_obs:
            values[o.name] = np.stack([rec[r] for rec in recorded[o.name]])
        for o in func_obs:
            values[o.name] = np.array([rec[r] for rec in recorded[o.name]])
        for o in exit_obs:
            values[o.name] = np.array([exit_state[o.name][0][r]])
        for o in snap_obs:
            values[o.name] = x[r].copy()
        out.append(ObservableSeries(replica_lo + r, times, values))
    return out


class _FrozenUniforms:
    """Generator facade replaying a fixed uniform stream (CRN sampling)."""

    def __init__(self, u: np.ndarray):
        self._u = u
        self._pos = 0

    def random(self, size):
        count = int(np.prod(size))
        chunk = self._u[self._pos:self._pos + count]
        if len(chunk) < count:
            raise InvalidInput("CRN uniform stream exhausted")
        self._pos += count
        return chunk.reshape(size)


def simulate(cfg: SimConfig, drift, mu0: SpectralField,
             noise_override=None) -> list[ObservableSeries]:
    """Run all replicas; deterministic for fixed (config, seed) regardless of
    worker count. Returns one ObservableSeries per replica, in replica order."""
    if mu0.kind != "density":
        raise InvalidInput("initial law must be a density")
    chunk = cfg.replicas if cfg.crn or noise_override is not None else _CHUNK
    tasks = []
    for chunk_idx, lo in enumerate(range(0, cfg.replicas, chunk)):
        hi = min(lo + chunk, cfg.replicas)
        tasks.append((drift, mu0, cfg, chunk_idx, lo, hi, noise_override))
    workers = int(os.environ.get("CHAOSBENCH_THREADS", "1"))
    if workers > 1 and len(tasks) > 1 and noise_override is None:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_run_chunk, tasks))
    else:
        chunks = [_run_chunk(t) for t in tasks]
    out = []
    for series in chunks:
        out.extend(series)
    return out


def series_to_csv(series_list: list[ObservableSeries]) -> str:
    lines = ["replica,t,observable,re,im"]
    for series in series_list:
        for replica, t, name, re, im in series.to_csv_rows():
            lines.append(f"{replica},{t:.17g},{name},{re:.17g},{im:.17g}")
    return "\n".join(lines) + "\n"
