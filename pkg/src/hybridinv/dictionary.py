"""Per-population sub-dictionaries and the concatenated dictionary.

A sub-dictionary holds one atom (simulated signal) per ``(r, f)`` grid point
at a fixed population orientation. Columns are ordered with the radius index
varying slowest. Orientations are never gridded: a voxel's dictionary is
rebuilt at the orientations estimated (or known) for that voxel.
"""

from collections import OrderedDict
from dataclasses import dataclass, field
import csv
import math
import os
import threading

import numpy as np

from . import rng as _rng
from .errors import EmptyGrid, ProtocolMismatch
from .forward_model import F_RANGE, R_RANGE, _unit, population_signal
from .linalg_nnls import read_matrix_csv, write_matrix_csv


@dataclass(frozen=True)
class ParamGrid:
    r_values: tuple
    f_values: tuple

    def __post_init__(self):
        r = tuple(float(v) for v in self.r_values)
        f = tuple(float(v) for v in self.f_values)
        if not r or not f:
            raise EmptyGrid("grid needs at least one r and one f value")
        for name, vals, (lo, hi) in (("r", r, R_RANGE), ("f", f, F_RANGE)):
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise ValueError(f"{name} grid must be strictly increasing")
            if vals[0] < lo or vals[-1] > hi:
                raise ValueError(f"{name} grid leaves [{lo}, {hi}]")
        object.__setattr__(self, "r_values", r)
        object.__setattr__(self, "f_values", f)

    @classmethod
    def cell_centered(cls, n_r, n_f, r_range=R_RANGE, f_range=F_RANGE):
        """Midpoints of ``n_r`` x ``n_f`` equal cells covering the ranges."""
        if n_r < 1 or n_f < 1:
            raise EmptyGrid("grid needs at least one r and one f value")
        r = r_range[0] + (np.arange(n_r) + 0.5) * (r_range[1] - r_range[0]) / n_r
        f = f_range[0] + (np.arange(n_f) + 0.5) * (f_range[1] - f_range[0]) / n_f
        return cls(tuple(r), tuple(f))

    @property
    def size(self):
        return len(self.r_values) * len(self.f_values)

    def params(self):
        """``(N, 2)`` array of ``(r, f)`` in column order."""
        r, f = np.meshgrid(self.r_values, self.f_values, indexing="ij")
        return np.column_stack([r.ravel(), f.ravel()])


@dataclass(frozen=True, eq=False)
class SubDictionary:
    orientation: np.ndarray
    atoms: np.ndarray
    atom_params: np.ndarray
    protocol_digest: str = ""

    @property
    def size(self):
        return self.atoms.shape[1]


@dataclass(frozen=True, eq=False)
class Dictionary:
    subs: tuple
    column_offsets: tuple
    matrix: np.ndarray = field(repr=False)

    @property
    def K(self):
        return len(self.subs)

    @property
    def M(self):
        return self.matrix.shape[0]

    @property
    def n_total(self):
        return self.matrix.shape[1]

    @property
    def sizes(self):
        return tuple(s.size for s in self.subs)

    def locate(self, column):
        """Map a global column index to ``(block, local index)``."""
        for k in range(self.K - 1, -1, -1):
            if column >= self.column_offsets[k]:
                return k, column - self.column_offsets[k]
        raise IndexError(column)

    def column_params(self, column):
        """``(block, orientation, r, f)`` of a global column."""
        k, j = self.locate(column)
        sub = self.subs[k]
        r, f = sub.atom_params[j]
        return k, sub.orientation, float(r), float(f)


def build_subdictionary(grid, u, proto):
    u = _unit(u, "orientation").copy()
    params = grid.params()
    atoms = np.ascontiguousarray(population_signal(u, params[:, 0], params[:, 1], proto).T)
    u.flags.writeable = False
    atoms.flags.writeable = False
    params.flags.writeable = False
    return SubDictionary(u, atoms, params, proto.digest())


def assemble_dictionary(subs):
    subs = tuple(subs)
    if not subs:
        raise ValueError("need at least one sub-dictionary")
    M = subs[0].atoms.shape[0]
    digest = subs[0].protocol_digest
    for s in subs[1:]:
        if s.atoms.shape[0] != M or s.protocol_digest != digest:
            raise ProtocolMismatch("sub-dictionaries were built on different protocols")
    offsets = tuple(int(v) for v in np.cumsum([0] + [s.size for s in subs[:-1]]))
    matrix = np.ascontiguousarray(np.hstack([s.atoms for s in subs]))
    matrix.flags.writeable = False
    return Dictionary(subs, offsets, matrix)


class SubDictionaryCache:
    """Thread-safe LRU of sub-dictionaries keyed by orientation quantised to 1e-6.

    A hit is only served when the cached orientation is bitwise equal to the
    requested one; a near miss inside the same bucket is rebuilt, so results
    never depend on lookup order.
    """

    def __init__(self, grid, proto, maxsize=512):
        self.grid = grid
        self.proto = proto
        self.maxsize = maxsize
        self._lock = threading.Lock()
        self._store = OrderedDict()
        self.hits = 0
        self.misses = 0

    def get(self, u):
        u = np.asarray(u, dtype=np.float64)
        key = tuple(int(v) for v in np.round(u * 1e6))
        with self._lock:
            sub = self._store.get(key)
            if sub is not None and np.array_equal(sub.orientation, u):
                self._store.move_to_end(key)
                self.hits += 1
                return sub
        sub = build_subdictionary(self.grid, u, self.proto)
        with self._lock:
            self.misses += 1
            if key not in self._store:
                self._store[key] = sub
                if len(self._store) > self.maxsize:
                    self._store.popitem(last=False)
        return sub


def voxel_dictionary(grid, orientations, proto, cache=None):
    """Dictionary for one voxel with one block per population orientation."""
    if cache is not None:
        subs = [cache.get(u) for u in orientations]
    else:
        subs = [build_subdictionary(grid, u, proto) for u in orientations]
    return assemble_dictionary(subs)


def orthonormal_complement(u):
    """Two unit vectors completing ``u`` to a right-handed orthonormal basis."""
    u = np.asarray(u, dtype=np.float64)
    a = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    e1 = a - (a @ u) * u
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(u, e1)
    return e1, e2


def rotate_away(u, angle_rad, azimuth_rad):
    """Unit vector at polar angle ``angle_rad`` from ``u`` and the given azimuth."""
    e1, e2 = orthonormal_complement(u)
    v = math.cos(angle_rad) * np.asarray(u) + math.sin(angle_rad) * (
        math.cos(azimuth_rad) * e1 + math.sin(azimuth_rad) * e2
    )
    return v / np.linalg.norm(v)


def perturb_orientation(u, angle_deg, seed):
    """Simulate an orientation estimate that is off by exactly ``angle_deg``.

    The azimuth around ``u`` is uniform, drawn from the seeded stream.
    """
    if not 0.0 <= angle_deg <= 90.0:
        raise ValueError("angle_deg must lie in [0, 90]")
    u = _unit(u, "orientation")
    if angle_deg == 0.0:
        return u.copy()
    phi = 2.0 * math.pi * _rng.uniform(_rng.generator(seed))
    return rotate_away(u, math.radians(angle_deg), phi)


# --------------------------------------------------------------------------
# CSV bundle: <dir>/header.csv (key,value), <dir>/columns.csv
# (column,block,ux,uy,uz,r,f) and <dir>/atoms.csv (matrix layout).


def save_dictionary(D, path):
    os.makedirs(path, exist_ok=True)
    with open(os.path.join(path, "header.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "value"])
        w.writerow(["format", "hybridinv-dictionary"])
        w.writerow(["version", 1])
        w.writerow(["protocol_sha256", D.subs[0].protocol_digest])
        w.writerow(["K", D.K])
        w.writerow(["M", D.M])
        w.writerow(["n_total", D.n_total])
        w.writerow(["offsets", " ".join(str(o) for o in D.column_offsets)])
    with open(os.path.join(path, "columns.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["column", "block", "ux", "uy", "uz", "r", "f"])
        for c in range(D.n_total):
            k, u, r, f = D.column_params(c)
            w.writerow([c, k] + [repr(float(x)) for x in u] + [repr(r), repr(f)])
    write_matrix_csv(os.path.join(path, "atoms.csv"), D.matrix)


def load_dictionary(path):
    with open(os.path.join(path, "header.csv"), newline="") as fh:
        header = {row[0]: row[1] for row in csv.reader(fh)}
    if header.get("format") != "hybridinv-dictionary":
        raise ValueError(f"{path} is not a dictionary bundle")
    offsets = [int(v) for v in header["offsets"].split()]
    n_total = int(header["n_total"])
    with open(os.path.join(path, "columns.csv"), newline="") as fh:
        rows = list(csv.DictReader(fh))
    atoms = read_matrix_csv(os.path.join(path, "atoms.csv"))
    bounds = offsets + [n_total]
    subs = []
    for k in range(len(offsets)):
        lo, hi = bounds[k], bounds[k + 1]
        block = rows[lo:hi]
        u = np.array([float(block[0][c]) for c in ("ux", "uy", "uz")])
        params = np.array([[float(r["r"]), float(r["f"])] for r in block])
        subs.append(
            SubDictionary(u, np.ascontiguousarray(atoms[:, lo:hi]), params, header["protocol_sha256"])
        )
    return assemble_dictionary(subs)
