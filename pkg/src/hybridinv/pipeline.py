"""Experiment orchestration: datasets, the three estimators, evaluation and timing.

All randomness derives from ``ExperimentConfig.seed`` through
:func:`hybridinv.rng.derive_seed`, so every artifact can be regenerated
from the config alone.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace
import csv
import hashlib
import itertools
import json
import math
import os
import platform
import re
import time

import numpy as np

from . import __version__
from . import rng as _rng
from .dictionary import ParamGrid, perturb_orientation, rotate_away, voxel_dictionary
from .errors import ConfigError, Misalignment, MissingArtifact
from .fingerprinting import fit_exhaustive
from .forward_model import NoiseSpec, PopulationParams, VoxelConfig, add_rician_noise, get_protocol, mix_signal
from .linalg_nnls import nnls_solve
from .neural import MlpSpec, TrainConfig, build_model, predict, train

TRAIN_STREAM, TEST_STREAM, BENCH_STREAM = 1, 2, 3
_PARAM_STREAM, _PERTURB_STREAM = 11, 12
PARAMETERS = ("nu", "r", "f")


# --------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class MethodSettings:
    learning_rate: float
    minibatch_size: int
    epochs: int
    dropout: float
    hidden: tuple = ()
    branch_hidden: tuple = ()
    joint_hidden: tuple = ()
    seed: int | None = None


def _default_hybrid():
    return MethodSettings(learning_rate=0.01, minibatch_size=100, epochs=60, dropout=0.1,
                          branch_hidden=(64, 32), joint_hidden=(64, 32))


def _default_full():
    return MethodSettings(learning_rate=0.01, minibatch_size=100, epochs=60, dropout=0.05,
                          hidden=(256, 128, 64))


@dataclass(frozen=True)
class ExperimentConfig:
    protocol: str = "desk"
    grid_r: int = 12
    grid_f: int = 10
    K: int = 2
    r_range: tuple = (0.5, 5.0)
    f_range: tuple = (0.0, 0.9)
    nu_range: tuple = (0.1, 0.9)
    crossing_range: tuple = (15.0, 90.0)
    snr: tuple = (25.0, 50.0, 100.0)
    n_train: int = 20000
    n_test: int = 3000
    scenarios: tuple = ("groundtruth", "perturbed(5)")
    nu_bins: int = 5
    bench_sizes: tuple = (60, 120, 240, 480)
    bench_voxels: int = 200
    seed: int = 0
    threads: int = 1
    out: str = "results"
    hybrid: MethodSettings = field(default_factory=_default_hybrid)
    full: MethodSettings = field(default_factory=_default_full)

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ConfigError("sample counts must be >= 1")
        if not self.snr or min(self.snr) <= 0:
            raise ConfigError("snr values must be positive")
        if self.K < 1:
            raise ConfigError("K must be >= 1")
        for s in self.scenarios:
            scenario_angle(s)
        if self.grid_r < 1 or self.grid_f < 1:
            raise ConfigError("grid sizes must be >= 1")
        for name in ("r_range", "f_range", "nu_range", "crossing_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigError(f"{name} must be increasing")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    # -- derived objects

    def get_protocol(self):
        try:
            return get_protocol(self.protocol)
        except OSError as exc:
            raise MissingArtifact(f"protocol file {self.protocol!r}: {exc}") from exc

    def grid(self):
        return ParamGrid.cell_centered(self.grid_r, self.grid_f, self.r_range, self.f_range)

    def method_seed(self, name):
        s = getattr(self, name).seed
        return _rng.derive_seed(self.seed, 100 + ("hybrid", "full").index(name)) if s is None else s

    def to_text(self):
        return format_config(self)

    def digest(self):
        """Hash of the experiment definition; ``out`` and ``threads`` do not change results."""
        lines = [ln for ln in self.to_text().splitlines() if not re.match(r"(out|threads) =", ln)]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()


def scenario_angle(name):
    """Perturbation angle in degrees of an orientation scenario name."""
    if name == "groundtruth":
        return 0.0
    m = re.fullmatch(r"perturbed\(\s*([0-9.eE+-]+)\s*\)", name)
    if not m:
        raise ConfigError(f"unknown orientation scenario {name!r}")
    angle = float(m.group(1))
    if not 0 <= angle <= 90:
        raise ConfigError("perturbation angle must be in [0, 90]")
    return angle


def _fmt(v):
    if isinstance(v, tuple):
        return ", ".join(_fmt(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_config(cfg):
    """Canonical ``key = value`` text of a config (parseable by :func:`parse_config`)."""
    lines = ["# hybridinv experiment config v1"]
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, MethodSettings):
            for g in fields(v):
                w = getattr(v, g.name)
                if w is not None and w != ():
                    lines.append(f"{f.name}.{g.name} = {_fmt(w)}")
        else:
            lines.append(f"{f.name} = {_fmt(v)}")
    return "\n".join(lines) + "\n"


def _convert(template, text, key):
    try:
        if isinstance(template, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(template, int) or template is None and key.endswith("seed"):
            return int(text, 0)
        if isinstance(template, float):
            return float(text)
        if isinstance(template, tuple):
            items = [t.strip() for t in re.split(r",(?![^()]*\))", text) if t.strip()]
            if key == "scenarios":
                return tuple(items)
            if key in ("bench_sizes", "hidden", "branch_hidden", "joint_hidden"):
                return tuple(int(t) for t in items)
            return tuple(float(t) for t in items)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def parse_config(text, base=None):
    """Parse ``key = value`` lines; ``#`` starts a comment; dotted keys set method settings."""
    cfg = base or ExperimentConfig()
    top, nested = {}, {"hybrid": {}, "full": {}}
    names = {f.name for f in fields(ExperimentConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if "." in key:
            method, sub = key.split(".", 1)
            if method not in nested or sub not in {g.name for g in fields(MethodSettings)}:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            template = getattr(getattr(cfg, method), sub)
            nested[method][sub] = _convert(template, value, sub)
        elif key in names and key not in nested:
            top[key] = _convert(getattr(cfg, key), value, key)
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    for method, changes in nested.items():
        if changes:
            top[method] = replace(getattr(cfg, method), **changes)
    try:
        return replace(cfg, **top)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    """Read a key-value config file, or recover the config stored in a manifest."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise MissingArtifact(f"cannot read config {path}: {exc}") from exc
    if path.endswith(".json"):
        try:
            text = json.loads(text)["config_text"]
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"{path} is not a manifest") from exc
    return parse_config(text)


# --------------------------------------------------------------------------
# datasets


@dataclass
class Dataset:
    u: np.ndarray       # (n, K, 3)
    nu: np.ndarray      # (n, K)
    r: np.ndarray       # (n, K)
    f: np.ndarray       # (n, K)
    snr: np.ndarray     # (n,)
    seed: np.ndarray    # (n,) uint64
    signals: np.ndarray  # (n, M)

    def __len__(self):
        return self.signals.shape[0]

    @property
    def K(self):
        return self.nu.shape[1]

    @property
    def sample_id(self):
        return np.arange(len(self))

    def subset(self, idx):
        return Dataset(*(getattr(self, f.name)[idx] for f in fields(self)))


def sample_latents(seed, cfg):
    """Draw ``(u, nu, r, f)`` for one voxel from the stream of ``seed``.

    Draw order: polar cosine and azimuth of u_1; for each further
    population a crossing angle and azimuth about u_1; the fractions; then
    r_k, f_k per population. All draws are uniform doubles.
    """
    gen = _rng.generator(_rng.derive_seed(seed, _PARAM_STREAM))
    K = cfg.K
    z = 2.0 * _rng.uniform(gen) - 1.0
    phi = 2.0 * math.pi * _rng.uniform(gen)
    s = math.sqrt(max(0.0, 1.0 - z * z))
    u = [np.array([s * math.cos(phi), s * math.sin(phi), z])]
    lo, hi = cfg.crossing_range
    for _ in range(1, K):
        ang = math.radians(lo + (hi - lo) * _rng.uniform(gen))
        az = 2.0 * math.pi * _rng.uniform(gen)
        u.append(rotate_away(u[0], ang, az))
    if K == 1:
        nu = np.ones(1)
    elif K == 2:
        n1 = cfg.nu_range[0] + (cfg.nu_range[1] - cfg.nu_range[0]) * _rng.uniform(gen)
        nu = np.array([n1, 1.0 - n1])
    else:
        e = -np.log1p(-_rng.uniform(gen, K))
        nu = e / e.sum()
    rf = _rng.uniform(gen, 2 * K).reshape(K, 2)
    r = cfg.r_range[0] + (cfg.r_range[1] - cfg.r_range[0]) * rf[:, 0]
    f = cfg.f_range[0] + (cfg.f_range[1] - cfg.f_range[0]) * rf[:, 1]
    return np.array(u), nu, r, f


def gen_dataset(cfg, split="train", n=None, snr=None):
    """Simulate ``n`` noisy voxels for a split (``train``, ``test`` or ``bench``).

    SNR levels cycle through ``cfg.snr`` (or the explicit ``snr`` list);
    ``snr=inf`` yields noiseless signals.
    """
    stream = {"train": TRAIN_STREAM, "test": TEST_STREAM, "bench": BENCH_STREAM}[split]
    if n is None:
        n = cfg.n_train if split == "train" else cfg.n_test
    levels = tuple(cfg.snr if snr is None else snr)
    proto = cfg.get_protocol()
    K = cfg.K
    out = Dataset(
        u=np.empty((n, K, 3)), nu=np.empty((n, K)), r=np.empty((n, K)), f=np.empty((n, K)),
        snr=np.empty(n), seed=np.empty(n, dtype=np.uint64), signals=np.empty((n, proto.M)),
    )
    for i in range(n):
        s = _rng.derive_seed(cfg.seed, stream, i)
        u, nu, r, f = sample_latents(s, cfg)
        pops = tuple(PopulationParams(tuple(u[k]), float(r[k]), float(f[k])) for k in range(K))
        clean = mix_signal(VoxelConfig(pops, tuple(nu)), proto)
        level = float(levels[i % len(levels)])
        out.u[i], out.nu[i], out.r[i], out.f[i] = u, nu, r, f
        out.snr[i], out.seed[i] = level, s
        out.signals[i] = add_rician_noise(clean, NoiseSpec(level, s))
    return out


def _pop_columns(K):
    cols = []
    for k in range(1, K + 1):
        cols += [f"u{k}x", f"u{k}y", f"u{k}z", f"nu{k}", f"r{k}", f"f{k}"]
    return cols


def save_dataset(ds, path):
    with open(path, "w", newline="") as fh:
        fh.write("# hybridinv-dataset v1\n")
        w = csv.writer(fh)
        M = ds.signals.shape[1]
        w.writerow(["sample_id"] + _pop_columns(ds.K) + ["snr", "seed"] + [f"s{i}" for i in range(M)])
        for i in range(len(ds)):
            row = [i]
            for k in range(ds.K):
                row += [repr(float(v)) for v in ds.u[i, k]]
                row += [repr(float(ds.nu[i, k])), repr(float(ds.r[i, k])), repr(float(ds.f[i, k]))]
            row += [repr(float(ds.snr[i])), int(ds.seed[i])]
            row += [repr(float(v)) for v in ds.signals[i]]
            w.writerow(row)


def load_dataset(path):
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
    except OSError as exc:
        raise MissingArtifact(f"dataset {path} not found; run gen-data first") from exc
    reader = csv.reader(lines)
    header = next(reader)
    K = sum(1 for h in header if re.fullmatch(r"nu\d+", h))
    rows = list(reader)
    n = len(rows)
    M = len(header) - 1 - 6 * K - 2
    ds = Dataset(np.empty((n, K, 3)), np.empty((n, K)), np.empty((n, K)), np.empty((n, K)),
                 np.empty(n), np.empty(n, dtype=np.uint64), np.empty((n, M)))
    for i, row in enumerate(rows):
        if int(row[0]) != i:
            raise Misalignment(f"{path}: sample ids must be 0..n-1 in order")
        vals = row[1:]
        for k in range(K):
            g = vals[6 * k:6 * k + 6]
            ds.u[i, k] = [float(v) for v in g[:3]]
            ds.nu[i, k], ds.r[i, k], ds.f[i, k] = (float(v) for v in g[3:])
        ds.snr[i] = float(vals[6 * K])
        ds.seed[i] = int(vals[6 * K + 1])
        ds.signals[i] = [float(v) for v in vals[6 * K + 2:]]
    return ds


# --------------------------------------------------------------------------
# per-voxel dictionaries and stage 1


def voxel_orientations(ds, i, scenario):
    angle = scenario_angle(scenario)
    if angle == 0.0:
        return ds.u[i]
    return np.array([
        perturb_orientation(ds.u[i, k], angle, _rng.derive_seed(int(ds.seed[i]), _PERTURB_STREAM, k))
        for k in range(ds.K)
    ])


def _map(fn, items, threads):
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(fn, items))
    return [fn(i) for i in items]


def stage1_features(y, D, opts=None):
    """First hybrid stage: one NNLS over the whole dictionary, ignoring its blocks."""
    return nnls_solve(D.matrix, y, opts)


@dataclass
class Stage1Result:
    weights: np.ndarray       # (n, N_tot)
    residual: np.ndarray      # (n,)
    support_size: np.ndarray  # (n,)
    iterations: np.ndarray    # (n,)
    wall_time: np.ndarray     # (n,) seconds


def stage1_dataset(cfg, ds, scenario="groundtruth", opts=None):
    proto, grid = cfg.get_protocol(), cfg.grid()

    def one(i):
        D = voxel_dictionary(grid, voxel_orientations(ds, i, scenario), proto)
        t0 = time.perf_counter()
        sol = stage1_features(ds.signals[i], D, opts)
        return sol, time.perf_counter() - t0

    res = _map(one, range(len(ds)), cfg.threads)
    return Stage1Result(
        np.array([s.weights for s, _ in res]),
        np.array([s.residual_norm for s, _ in res]),
        np.array([s.support.size for s, _ in res]),
        np.array([s.iterations for s, _ in res]),
        np.array([t for _, t in res]),
    )


def save_stage1(res, path):
    with open(path, "w", newline="") as fh:
        fh.write(f"# hybridinv-stage1 v1 n_total={res.weights.shape[1]}\n")
        w = csv.writer(fh)
        w.writerow(["sample_id", "support_size", "iterations", "residual", "wall_time_us",
                    "indices", "weights"])
        for i in range(res.weights.shape[0]):
            idx = np.flatnonzero(res.weights[i])
            w.writerow([i, int(res.support_size[i]), int(res.iterations[i]), repr(float(res.residual[i])),
                        f"{res.wall_time[i] * 1e6:.3f}", " ".join(str(j) for j in idx),
                        " ".join(repr(float(v)) for v in res.weights[i, idx])])


def load_stage1(path):
    try:
        with open(path, newline="") as fh:
            first = fh.readline()
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise MissingArtifact(f"stage-1 features {path} not found; run stage1 first") from exc
    n_total = int(re.search(r"n_total=(\d+)", first).group(1))
    W = np.zeros((len(rows), n_total))
    for i, row in enumerate(rows):
        if row["indices"]:
            W[i, [int(j) for j in row["indices"].split()]] = [float(v) for v in row["weights"].split()]
    return Stage1Result(
        W,
        np.array([float(r["residual"]) for r in rows]),
        np.array([int(r["support_size"]) for r in rows]),
        np.array([int(r["iterations"]) for r in rows]),
        np.array([float(r["wall_time_us"]) * 1e-6 for r in rows]),
    )


# --------------------------------------------------------------------------
# predictions of every method share one layout


@dataclass
class Predictions:
    method: str
    scenario: str
    u: np.ndarray          # (n, K, 3); NaN when the method has no orientation
    nu: np.ndarray
    r: np.ndarray
    f: np.ndarray
    residual: np.ndarray = None
    wall_time: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __len__(self):
        return self.nu.shape[0]


def save_predictions(pred, path):
    n, K = pred.nu.shape
    extra_cols = list(pred.extra)
    with open(path, "w", newline="") as fh:
        fh.write(f"# hybridinv-predictions v1 method={pred.method} scenario={pred.scenario}\n")
        w = csv.writer(fh)
        w.writerow(["sample_id"] + _pop_columns(K) + extra_cols + ["residual", "wall_time_us"])
        for i in range(n):
            row = [i]
            for k in range(K):
                row += [repr(float(v)) for v in pred.u[i, k]]
                row += [repr(float(pred.nu[i, k])), repr(float(pred.r[i, k])), repr(float(pred.f[i, k]))]
            row += [repr(float(pred.extra[c][i])) for c in extra_cols]
            row.append("" if pred.residual is None else repr(float(pred.residual[i])))
            row.append("" if pred.wall_time is None else f"{pred.wall_time[i] * 1e6:.3f}")
            w.writerow(row)


def load_predictions(path):
    try:
        with open(path, newline="") as fh:
            first = fh.readline()
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise MissingArtifact(f"predictions {path} not found") from exc
    meta = dict(re.findall(r"(\w+)=(\S+)", first))
    header = list(rows[0].keys()) if rows else []
    K = sum(1 for h in header if re.fullmatch(r"nu\d+", h))
    n = len(rows)
    pred = Predictions(meta.get("method", "?"), meta.get("scenario", "?"),
                       np.empty((n, K, 3)), np.empty((n, K)), np.empty((n, K)), np.empty((n, K)))
    for i, row in enumerate(rows):
        if int(row["sample_id"]) != i:
            raise Misalignment(f"{path}: sample ids must be 0..n-1 in order")
        for k in range(1, K + 1):
            pred.u[i, k - 1] = [float(row[f"u{k}{c}"]) for c in "xyz"]
            pred.nu[i, k - 1] = float(row[f"nu{k}"])
            pred.r[i, k - 1] = float(row[f"r{k}"])
            pred.f[i, k - 1] = float(row[f"f{k}"])
    if rows and rows[0]["residual"]:
        pred.residual = np.array([float(r["residual"]) for r in rows])
    if rows and rows[0]["wall_time_us"]:
        pred.wall_time = np.array([float(r["wall_time_us"]) * 1e-6 for r in rows])
    return pred


# --------------------------------------------------------------------------
# the three estimators


def run_fingerprint(cfg, ds, scenario="groundtruth", opts=None):
    """Exhaustive dictionary fit of every voxel."""
    proto, grid = cfg.get_protocol(), cfg.grid()

    def one(i):
        U = voxel_orientations(ds, i, scenario)
        D = voxel_dictionary(grid, U, proto)
        t0 = time.perf_counter()
        fit = fit_exhaustive(ds.signals[i], D, opts)
        return U, fit, time.perf_counter() - t0

    res = _map(one, range(len(ds)), cfg.threads)
    K = ds.K
    pred = Predictions(
        "fingerprint", scenario,
        u=np.array([U for U, _, _ in res]),
        nu=np.array([fit.fractions for _, fit, _ in res]),
        r=np.array([[p[1] for p in fit.params] for _, fit, _ in res]),
        f=np.array([[p[2] for p in fit.params] for _, fit, _ in res]),
        residual=np.array([fit.residual_norm for _, fit, _ in res]),
        wall_time=np.array([t for _, _, t in res]),
    )
    for k in range(K):
        pred.extra[f"j{k + 1}"] = np.array([fit.atom_indices[k] for _, fit, _ in res])
        pred.extra[f"w{k + 1}"] = np.array([fit.weights[k] for _, fit, _ in res])
    return pred


class TargetScaler:
    """Fixed affine maps of (nu, r, f) per population to roughly [0, 1]."""

    def __init__(self, cfg):
        self.r_lo, self.r_hi = cfg.r_range
        self.f_hi = cfg.f_range[1]

    def encode(self, nu, r, f):
        cols = []
        for k in range(nu.shape[1]):
            cols += [nu[:, k], (r[:, k] - self.r_lo) / (self.r_hi - self.r_lo), f[:, k] / self.f_hi]
        return np.column_stack(cols)

    def decode(self, T):
        T = np.asarray(T).reshape(T.shape[0], -1, 3)
        nu = T[:, :, 0]
        r = self.r_lo + T[:, :, 1] * (self.r_hi - self.r_lo)
        f = T[:, :, 2] * self.f_hi
        return nu, r, f


def _fraction_order(nu):
    return np.argsort(-nu, axis=1, kind="stable")


def hybrid_spec(cfg, n_per_block=None):
    s = cfg.hybrid
    n = cfg.grid().size if n_per_block is None else n_per_block
    return MlpSpec.split([n] * cfg.K, s.branch_hidden, s.joint_hidden, 3 * cfg.K,
                         s.dropout, cfg.method_seed("hybrid"))


def full_spec(cfg, M=None):
    s = cfg.full
    M = cfg.get_protocol().M if M is None else M
    return MlpSpec.plain((M,) + tuple(s.hidden) + (3 * cfg.K,), s.dropout, cfg.method_seed("full"))


def _train_cfg(cfg, name):
    s = getattr(cfg, name)
    return TrainConfig(s.learning_rate, s.minibatch_size, s.epochs, 1e-10,
                       _rng.derive_seed(cfg.method_seed(name), 1))


def train_hybrid(cfg, train_ds, train_feats):
    """Fit the split network mapping stage-1 weights to scaled (nu, r, f)."""
    T = TargetScaler(cfg).encode(train_ds.nu, train_ds.r, train_ds.f)
    return train(hybrid_spec(cfg), (train_feats.weights, T), _train_cfg(cfg, "hybrid"))


def predict_hybrid(cfg, model, ds, feats, scenario):
    t0 = time.perf_counter_ns()
    out = predict(model, feats.weights)
    per_voxel = (time.perf_counter_ns() - t0) * 1e-9 / max(1, len(ds))
    nu, r, f = TargetScaler(cfg).decode(out)
    U = np.array([voxel_orientations(ds, i, scenario) for i in range(len(ds))])
    return Predictions("hybrid", scenario, U, nu, r, f, residual=feats.residual,
                       wall_time=feats.wall_time + per_voxel)


def full_targets(cfg, ds):
    """Scaled targets with populations ordered by decreasing fraction."""
    order = _fraction_order(ds.nu)
    take = lambda a: np.take_along_axis(a, order, axis=1)
    return TargetScaler(cfg).encode(take(ds.nu), take(ds.r), take(ds.f))


def train_full(cfg, train_ds):
    return train(full_spec(cfg), (train_ds.signals, full_targets(cfg, train_ds)), _train_cfg(cfg, "full"))


def predict_full(cfg, model, ds):
    t0 = time.perf_counter_ns()
    out = predict(model, ds.signals)
    per_voxel = (time.perf_counter_ns() - t0) * 1e-9 / max(1, len(ds))
    nu, r, f = TargetScaler(cfg).decode(out)
    U = np.full(ds.u.shape, np.nan)
    return Predictions("full", "n/a", U, nu, r, f, wall_time=np.full(len(ds), per_voxel))


def run_hybrid(cfg, train_ds, test_ds, scenarios=None):
    """Stage-1 features on both splits, split-MLP training, predictions per scenario.

    Returns ``(model, losses, {scenario: Predictions}, {scenario: EvalReport})``.
    """
    scenarios = cfg.scenarios if scenarios is None else scenarios
    model, losses = train_hybrid(cfg, train_ds, stage1_dataset(cfg, train_ds))
    preds, reports = {}, {}
    for scn in scenarios:
        preds[scn] = predict_hybrid(cfg, model, test_ds, stage1_dataset(cfg, test_ds, scn), scn)
        reports[scn] = evaluate(preds[scn], test_ds, cfg)
    return model, losses, preds, reports


def run_full(cfg, train_ds, test_ds):
    model, losses = train_full(cfg, train_ds)
    pred = predict_full(cfg, model, test_ds)
    return model, losses, pred, evaluate(pred, test_ds, cfg)


# --------------------------------------------------------------------------
# evaluation


def match_populations(pred, truth):
    """Per-sample permutation mapping true population k to predicted population.

    Uses the assignment maximising sum |u_k . u_hat| when the predictions
    carry orientations, otherwise pairs populations by decreasing fraction.
    """
    n, K = truth.nu.shape
    perm = np.empty((n, K), dtype=int)
    perms = list(itertools.permutations(range(K)))
    has_u = np.all(np.isfinite(pred.u), axis=(1, 2))
    for i in range(n):
        if has_u[i]:
            dots = np.abs(truth.u[i] @ pred.u[i].T)
            scores = [sum(dots[k, p[k]] for k in range(K)) for p in perms]
            perm[i] = perms[int(np.argmax(scores))]
        else:
            t_order = np.argsort(-truth.nu[i], kind="stable")
            p_order = np.argsort(-pred.nu[i], kind="stable")
            perm[i, t_order] = p_order
    return perm


def _bin_labels(edges):
    return [f"[{edges[b]:.2f},{edges[b + 1]:.2f}{']' if b == len(edges) - 2 else ')'}"
            for b in range(len(edges) - 1)]


@dataclass
class EvalReport:
    rows: list
    timing: dict
    residual: dict

    def mae(self, parameter, snr="all", nu_bin="all"):
        for row in self.rows:
            if row["parameter"] == parameter and row["snr"] == snr and row["nu_bin"] == nu_bin:
                return row["mae"]
        raise KeyError((parameter, snr, nu_bin))

    @property
    def bins(self):
        seen = []
        for row in self.rows:
            if row["nu_bin"] != "all" and row["nu_bin"] not in seen:
                seen.append(row["nu_bin"])
        return seen


def evaluate(pred, truth, cfg=None, nu_bins=None):
    """Mean absolute errors overall, per SNR level and per true-fraction bin.

    Each (sample, population) pair counts once; it falls in the bin of its
    own true fraction. Predictions are clamped to the valid parameter ranges
    before scoring.
    """
    cfg = cfg or ExperimentConfig()
    if len(pred) != len(truth):
        raise Misalignment(f"{len(pred)} predictions for {len(truth)} samples")
    n_bins = cfg.nu_bins if nu_bins is None else nu_bins
    edges = np.linspace(cfg.nu_range[0], cfg.nu_range[1], n_bins + 1)
    labels = _bin_labels(edges)
    perm = match_populations(pred, truth)
    rows_idx = np.arange(len(truth))[:, None]
    est = {
        "nu": np.clip(pred.nu, 0.0, 1.0)[rows_idx, perm],
        "r": np.clip(pred.r, *cfg.r_range)[rows_idx, perm],
        "f": np.clip(pred.f, *cfg.f_range)[rows_idx, perm],
    }
    err = {p: np.abs(est[p] - getattr(truth, p)) for p in PARAMETERS}
    true_nu = truth.nu
    bin_of = np.clip(np.searchsorted(edges, true_nu, side="right") - 1, 0, n_bins - 1)
    snr_levels = sorted(set(float(s) for s in truth.snr))
    rows = []
    for snr in ["all"] + snr_levels:
        smask = np.ones(len(truth), bool) if snr == "all" else truth.snr == snr
        for b in ["all"] + list(range(n_bins)):
            mask = np.broadcast_to(smask[:, None], true_nu.shape)
            if b != "all":
                mask = mask & (bin_of == b)
            count = int(mask.sum())
            for p in PARAMETERS:
                rows.append({
                    "method": pred.method, "scenario": pred.scenario, "snr": snr,
                    "nu_bin": "all" if b == "all" else labels[b], "parameter": p,
                    "mae": float(err[p][mask].mean()) if count else float("nan"), "count": count,
                })
    timing = {}
    if pred.wall_time is not None:
        t = pred.wall_time
        timing = {"mean_s": float(t.mean()), "p50_s": float(np.percentile(t, 50)),
                  "p95_s": float(np.percentile(t, 95))}
    residual = {}
    if pred.residual is not None:
        residual = {"mean": float(pred.residual.mean()), "median": float(np.median(pred.residual)),
                    "max": float(pred.residual.max())}
    return EvalReport(rows, timing, residual)


def write_reports(reports, path):
    with open(path, "w", newline="") as fh:
        fh.write("# hybridinv-eval v1\n")
        w = csv.writer(fh)
        w.writerow(["method", "scenario", "snr", "nu_bin", "parameter", "mae", "count"])
        for rep in reports:
            for row in rep.rows:
                w.writerow([row["method"], row["scenario"], row["snr"], row["nu_bin"], row["parameter"],
                            repr(row["mae"]), row["count"]])


# --------------------------------------------------------------------------
# timing


def _stats(ts):
    ts = np.asarray(ts)
    return float(ts.mean()), float(np.percentile(ts, 50)), float(np.percentile(ts, 95))


def benchmark(cfg, sizes=None, n_voxels=None, snr=50.0):
    """Per-voxel inference wall time of the three methods for several dictionary sizes.

    ``sizes`` are atoms per sub-dictionary; each must be a multiple of
    ``cfg.grid_f``. Dictionary construction is reported separately
    (``precompute`` rows) and excluded from the inference timings. The
    network timings use freshly initialised models of the configured
    architectures, since inference cost does not depend on the weights.
    Sizes are visited round-robin per voxel so slow drifts of the machine
    affect every size alike.
    """
    sizes = tuple(cfg.bench_sizes if sizes is None else sizes)
    n_voxels = cfg.bench_voxels if n_voxels is None else n_voxels
    proto = cfg.get_protocol()
    ds = gen_dataset(cfg, "bench", n_voxels, snr=(snr,))
    full_model = build_model(full_spec(cfg, proto.M))
    grids, hyb_models = {}, {}
    for n in sizes:
        if n % cfg.grid_f:
            raise ConfigError(f"benchmark size {n} is not a multiple of grid_f={cfg.grid_f}")
        grids[n] = ParamGrid.cell_centered(n // cfg.grid_f, cfg.grid_f, cfg.r_range, cfg.f_range)
        hyb_models[n] = build_model(hybrid_spec(cfg, n))
        # warm-up outside the timed loop (JIT compilation, caches)
        D0 = voxel_dictionary(grids[n], ds.u[0], proto)
        fit_exhaustive(ds.signals[0], D0)
        predict(hyb_models[n], nnls_solve(D0.matrix, ds.signals[0]).weights)
    predict(full_model, ds.signals[0])

    keys = ("precompute", "fingerprint", "stage1", "hybrid", "full", "iterations")
    times = {n: {k: [] for k in keys} for n in sizes}
    for i in range(len(ds)):
        y = ds.signals[i]
        for n in sizes:
            rec = times[n]
            t0 = time.perf_counter()
            D = voxel_dictionary(grids[n], ds.u[i], proto)
            t1 = time.perf_counter()
            fit_exhaustive(y, D)
            t2 = time.perf_counter()
            sol = nnls_solve(D.matrix, y)
            t3 = time.perf_counter()
            predict(hyb_models[n], sol.weights)
            t4 = time.perf_counter()
            predict(full_model, y)
            t5 = time.perf_counter()
            rec["precompute"].append(t1 - t0)
            rec["fingerprint"].append(t2 - t1)
            rec["stage1"].append(t3 - t2)
            rec["hybrid"].append(t4 - t2)
            rec["full"].append(t5 - t4)
            rec["iterations"].append(sol.iterations)

    rows = []
    for n in sizes:
        rec = times[n]
        for method in keys[:-1]:
            mean, p50, p95 = _stats(rec[method])
            it = rec["iterations"] if method in ("stage1", "hybrid") else None
            rows.append({"method": method, "n_per_block": n, "n_total": n * cfg.K, "voxels": len(ds),
                         "mean_s": mean, "p50_s": p50, "p95_s": p95,
                         "mean_iterations": float(np.mean(it)) if it is not None else float("nan")})
    return rows


def write_bench(rows, path):
    keys = ["method", "n_per_block", "n_total", "voxels", "mean_s", "p50_s", "p95_s", "mean_iterations"]
    with open(path, "w", newline="") as fh:
        fh.write("# hybridinv-bench v1\n")
        w = csv.DictWriter(fh, fieldnames=keys)
        w.writeheader()
        for row in rows:
            w.writerow(row)


# --------------------------------------------------------------------------
# manifests


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir, command, cfg, outputs):
    import numba

    manifest = {
        "format": "hybridinv-manifest",
        "version": 1,
        "command": command,
        "seed": cfg.seed,
        "config_sha256": cfg.digest(),
        "config_text": cfg.to_text(),
        "versions": {"hybridinv": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "numba": numba.__version__},
        "outputs": {os.path.relpath(p, out_dir): file_digest(p) for p in outputs if os.path.isfile(p)},
        "created_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    path = os.path.join(out_dir, f"manifest-{command}.json")
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return path
