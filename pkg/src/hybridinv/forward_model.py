"""Synthetic diffusion-weighted measurements for crossing axon populations.

The per-population signal is a two-compartment closed form (intra-axonal
cylinder with radius-dependent perpendicular diffusivity, isotropic
extra-axonal water)::

    S_i = f exp(-b_i (d_par c_i^2 + d_perp(r) (1 - c_i^2))) + (1 - f) exp(-b_i d_iso)

with ``c_i = g_i . u``. Units: b in s/mm^2, diffusivities in mm^2/s, r in um.
"""

from dataclasses import dataclass
from functools import cached_property, lru_cache
import hashlib
import io
from importlib import resources

import numpy as np

from . import rng as _rng

D_PAR = 2.0e-3
D_ISO = 2.0e-3
D_PERP_COEF = 2.5e-5  # d_perp = D_PERP_COEF * r**2

R_RANGE = (0.5, 5.0)
F_RANGE = (0.0, 0.9)

_UNIT_TOL = 1e-9


def _unit(v, what="direction"):
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (3,):
        raise ValueError(f"{what} must be a 3-vector")
    if abs(np.linalg.norm(v) - 1.0) > _UNIT_TOL:
        raise ValueError(f"{what} {v} is not unit norm")
    return v


@dataclass(frozen=True, eq=False)
class Protocol:
    """Acquisition design: one b-value and unit gradient direction per measurement."""

    bvals: np.ndarray
    dirs: np.ndarray

    def __post_init__(self):
        b = np.ascontiguousarray(self.bvals, dtype=np.float64)
        g = np.ascontiguousarray(self.dirs, dtype=np.float64)
        if b.ndim != 1 or b.size < 1 or g.shape != (b.size, 3):
            raise ValueError("protocol needs M b-values and an M x 3 direction array")
        if np.any(b < 0) or not np.all(np.isfinite(b)):
            raise ValueError("b-values must be finite and non-negative")
        if np.any(np.abs(np.linalg.norm(g, axis=1) - 1.0) > _UNIT_TOL):
            raise ValueError("gradient directions must have unit norm")
        if not np.any(b == 0):
            raise ValueError("protocol needs at least one b=0 measurement")
        b.flags.writeable = False
        g.flags.writeable = False
        object.__setattr__(self, "bvals", b)
        object.__setattr__(self, "dirs", g)

    @property
    def M(self):
        return self.bvals.size

    def to_csv_text(self):
        out = io.StringIO()
        out.write("b_value,gx,gy,gz\n")
        for b, (x, y, z) in zip(self.bvals, self.dirs):
            out.write(",".join(repr(float(v)) for v in (b, x, y, z)) + "\n")
        return out.getvalue()

    @cached_property
    def _digest(self):
        return hashlib.sha256(self.to_csv_text().encode()).hexdigest()

    def digest(self):
        """SHA-256 of the canonical CSV text; identifies a protocol in file headers."""
        return self._digest

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv_text(cls, text):
        rows = [ln.strip() for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        if rows[0].replace(" ", "") != "b_value,gx,gy,gz":
            raise ValueError("protocol CSV must start with header b_value,gx,gy,gz")
        arr = np.array([[float(v) for v in ln.split(",")] for ln in rows[1:]])
        g = arr[:, 1:4]
        # b=0 rows may carry a zero direction; any unit vector is equivalent
        zero = np.linalg.norm(g, axis=1) == 0
        g[zero] = (0.0, 0.0, 1.0)
        return cls(arr[:, 0], g)

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_csv_text(fh.read())


@dataclass(frozen=True)
class PopulationParams:
    u: tuple
    r: float
    f: float

    def __post_init__(self):
        u = tuple(float(x) for x in _unit(self.u, "orientation"))
        object.__setattr__(self, "u", u)
        if not R_RANGE[0] <= self.r <= R_RANGE[1]:
            raise ValueError(f"radius index {self.r} outside {R_RANGE}")
        if not F_RANGE[0] <= self.f <= F_RANGE[1]:
            raise ValueError(f"density index {self.f} outside {F_RANGE}")


@dataclass(frozen=True)
class VoxelConfig:
    populations: tuple
    fractions: tuple

    def __post_init__(self):
        pops = tuple(self.populations)
        nu = tuple(float(v) for v in self.fractions)
        if len(pops) < 1 or len(pops) != len(nu):
            raise ValueError("need K >= 1 populations and one fraction each")
        if min(nu) < 0 or abs(sum(nu) - 1.0) > 1e-9:
            raise ValueError(f"fractions {nu} must be non-negative and sum to 1")
        object.__setattr__(self, "populations", pops)
        object.__setattr__(self, "fractions", nu)

    @property
    def K(self):
        return len(self.populations)


@dataclass(frozen=True)
class NoiseSpec:
    snr: float
    seed: int

    def __post_init__(self):
        if not self.snr > 0:
            raise ValueError("snr must be positive")

    @property
    def sigma(self):
        # relative to the unit b=0 amplitude
        return 1.0 / self.snr


def population_signal(u, r, f, proto):
    """Vectorised surrogate signal.

    ``u`` may be a single 3-vector or an array ``(..., 3)``; ``r`` and ``f``
    broadcast against its leading shape. Returns ``(..., M)``.
    """
    u = np.asarray(u, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)[..., None]
    f = np.asarray(f, dtype=np.float64)[..., None]
    b = proto.bvals
    c2 = (u @ proto.dirs.T) ** 2
    d_perp = D_PERP_COEF * r * r
    intra = np.exp(-b * (D_PAR * c2 + d_perp * (1.0 - c2)))
    extra = np.exp(-b * D_ISO)
    return f * intra + (1.0 - f) * extra


def signal_population(p, proto):
    """Signal of one population ``p`` under ``proto``; length M, values in (0, 1]."""
    return population_signal(p.u, p.r, p.f, proto)


def mix_signal(cfg, proto):
    """Volume-fraction weighted sum of the population signals."""
    out = np.zeros(proto.M)
    for nu, p in zip(cfg.fractions, cfg.populations):
        out += nu * signal_population(p, proto)
    return out


def add_rician_noise(S, spec):
    """Magnitude of the signal after complex Gaussian corruption.

    ``y_i = sqrt((S_i + n1_i)^2 + n2_i^2)`` with ``n1, n2 ~ N(0, sigma^2)``,
    ``sigma = 1 / snr``. Pass ``snr=inf`` for the noiseless magnitude.
    """
    S = np.asarray(S, dtype=np.float64)
    if not np.all(np.isfinite(S)):
        raise ValueError("signal must be finite")
    sigma = spec.sigma
    if sigma == 0.0:
        return np.abs(S)
    z0, z1 = _rng.box_muller(_rng.generator(spec.seed), S.size)
    n1 = sigma * z0.reshape(S.shape)
    n2 = sigma * z1.reshape(S.shape)
    return np.sqrt((S + n1) ** 2 + n2 ** 2)


# --------------------------------------------------------------------------
# protocol presets


def repulsion_directions(n, seed, iterations=400):
    """``n`` unit vectors spread over the sphere by antipodal electrostatic repulsion.

    Starts from seeded random points and runs projected gradient descent on
    sum(1/|x_i - x_j| + 1/|x_i + x_j|). Output is canonicalised to the upper
    hemisphere (z >= 0).
    """
    gen = _rng.generator(seed)
    z = 2.0 * _rng.uniform(gen, n) - 1.0
    phi = 2.0 * np.pi * _rng.uniform(gen, n)
    s = np.sqrt(1.0 - z * z)
    x = np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    step = 0.1 / n
    for _ in range(iterations):
        force = np.zeros_like(x)
        for sign in (1.0, -1.0):
            d = x[:, None, :] - sign * x[None, :, :]
            dist = np.linalg.norm(d, axis=2)
            np.fill_diagonal(dist, np.inf)
            force += np.sum(d / dist[..., None] ** 3, axis=1)
        # keep only the tangential part
        force -= np.sum(force * x, axis=1, keepdims=True) * x
        x = x + step * force
        x /= np.linalg.norm(x, axis=1, keepdims=True)
    x[x[:, 2] < 0] *= -1.0
    return x


def shell_protocol(n_b0, shells, seed):
    """Multi-shell protocol: ``n_b0`` baseline images, then ``(b, n_dirs)`` shells."""
    b = [0.0] * n_b0
    g = [np.array([[0.0, 0.0, 1.0]] * n_b0)]
    for s, (bval, ndir) in enumerate(shells):
        b += [float(bval)] * ndir
        g.append(repulsion_directions(ndir, _rng.derive_seed(seed, s)))
    return Protocol(np.array(b), np.vstack(g))


DESK_SEED = 2021


@lru_cache(maxsize=None)
def desk_protocol():
    """M = 64: 4 b=0, 30 directions at b=1000, 30 at b=3000 (persisted layout)."""
    text = resources.files("hybridinv.data").joinpath("desk_protocol.csv").read_text()
    return Protocol.from_csv_text(text)


@lru_cache(maxsize=None)
def large_protocol():
    """M = 552 multi-shell layout (40 b=0; 64/64/128/256 directions at b=1k/3k/5k/10k)."""
    return shell_protocol(40, [(1000, 64), (3000, 64), (5000, 128), (10000, 256)], DESK_SEED + 1)


def get_protocol(name):
    if name == "desk":
        return desk_protocol()
    if name == "large":
        return large_protocol()
    return Protocol.load(name)
