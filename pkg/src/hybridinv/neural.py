"""Feed-forward networks written directly in numpy.

Two topologies share one implementation:

* ``plain``: input -> hidden fc layers -> affine output.
* ``split``: the input vector is cut into K contiguous slices, each slice
  runs through its own stack of fc layers, the branch outputs are
  concatenated and passed through joint fc layers and the affine output.

Every hidden fc layer is followed by ReLU and, in training mode, inverted
dropout. The loss is the mean squared error over all output entries and
samples; parameters are updated with Adagrad.
"""

from dataclasses import dataclass, field
import csv
import json

import numpy as np

from . import rng as _rng
from .errors import EmptyDataset, InvalidSpec, ShapeMismatch, UnknownLayerTag

MODEL_FORMAT = "hybridinv-mlp"
MODEL_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    kind: str
    layer_sizes: tuple = ()
    branch_input_sizes: tuple = ()
    branch_hidden: tuple = ()
    joint_hidden: tuple = ()
    output_size: int = 0
    dropout_rate: float = 0.0
    seed: int = 0

    @classmethod
    def plain(cls, layer_sizes, dropout_rate=0.0, seed=0):
        return cls("plain", layer_sizes=tuple(int(v) for v in layer_sizes),
                   dropout_rate=float(dropout_rate), seed=int(seed))

    @classmethod
    def split(cls, branch_input_sizes, branch_hidden, joint_hidden, output_size,
              dropout_rate=0.0, seed=0):
        """``branch_hidden`` is either one list shared by all branches or one list per branch."""
        inputs = tuple(int(v) for v in branch_input_sizes)
        bh = tuple(branch_hidden)
        if not bh or not isinstance(bh[0], (list, tuple)):
            bh = (tuple(int(v) for v in bh),) * len(inputs)
        else:
            bh = tuple(tuple(int(v) for v in h) for h in bh)
        return cls("split", branch_input_sizes=inputs, branch_hidden=bh,
                   joint_hidden=tuple(int(v) for v in joint_hidden),
                   output_size=int(output_size), dropout_rate=float(dropout_rate), seed=int(seed))

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidSpec("dropout_rate must be in [0, 1)")
        if self.kind == "plain":
            if len(self.layer_sizes) < 2 or min(self.layer_sizes) < 1:
                raise InvalidSpec("plain spec needs >= 2 positive layer sizes")
        elif self.kind == "split":
            if not self.branch_input_sizes or len(self.branch_hidden) != len(self.branch_input_sizes):
                raise InvalidSpec("split spec needs one hidden-size list per branch")
            sizes = list(self.branch_input_sizes) + list(self.joint_hidden) + [self.output_size]
            sizes += [v for h in self.branch_hidden for v in h]
            if min(sizes) < 1:
                raise InvalidSpec("all layer sizes must be >= 1")
            if any(len(h) == 0 for h in self.branch_hidden):
                raise InvalidSpec("each branch needs at least one hidden layer")
        else:
            raise InvalidSpec(f"unknown topology {self.kind!r}")

    @property
    def input_size(self):
        if self.kind == "plain":
            return self.layer_sizes[0]
        return sum(self.branch_input_sizes)

    @property
    def n_outputs(self):
        return self.layer_sizes[-1] if self.kind == "plain" else self.output_size

    def to_dict(self):
        return {
            "kind": self.kind,
            "layer_sizes": list(self.layer_sizes),
            "branch_input_sizes": list(self.branch_input_sizes),
            "branch_hidden": [list(h) for h in self.branch_hidden],
            "joint_hidden": list(self.joint_hidden),
            "output_size": self.output_size,
            "dropout_rate": self.dropout_rate,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        if d["kind"] == "plain":
            return cls.plain(d["layer_sizes"], d["dropout_rate"], d["seed"])
        return cls.split(d["branch_input_sizes"], d["branch_hidden"], d["joint_hidden"],
                         d["output_size"], d["dropout_rate"], d["seed"])


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-2
    minibatch_size: int = 100
    epochs: int = 50
    adagrad_epsilon: float = 1e-10
    seed: int = 0

    def __post_init__(self):
        if min(self.learning_rate, self.minibatch_size, self.epochs, self.adagrad_epsilon) <= 0:
            raise ValueError("training settings must all be positive")


@dataclass(eq=False)
class Dense:
    tag: str
    W: np.ndarray
    b: np.ndarray
    GW: np.ndarray = field(default=None, repr=False)
    Gb: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.GW is None:
            self.GW = np.zeros_like(self.W)
        if self.Gb is None:
            self.Gb = np.zeros_like(self.b)


@dataclass(eq=False)
class MlpModel:
    spec: MlpSpec
    branches: list
    trunk: list
    head: Dense
    training: bool = False

    def layers(self):
        """All dense layers in parameter order: branches, joint/hidden, output."""
        return [d for br in self.branches for d in br] + list(self.trunk) + [self.head]

    def parameters(self):
        return [p for d in self.layers() for p in (d.W, d.b)]

    @property
    def n_parameters(self):
        return sum(p.size for p in self.parameters())

    @property
    def slices(self):
        out, lo = [], 0
        for n in self.spec.branch_input_sizes:
            out.append(slice(lo, lo + n))
            lo += n
        return out

    @property
    def tags(self):
        return [d.tag for d in self.layers()]


def parameter_count(spec):
    """Closed-form number of weights and biases for ``spec``."""
    def chain(sizes):
        return sum(a * b + b for a, b in zip(sizes, sizes[1:]))

    if spec.kind == "plain":
        return chain(spec.layer_sizes)
    total = sum(chain((n,) + tuple(h)) for n, h in zip(spec.branch_input_sizes, spec.branch_hidden))
    merged = sum(h[-1] for h in spec.branch_hidden)
    return total + chain((merged,) + spec.joint_hidden + (spec.output_size,))


def _init_dense(tag, n_in, n_out, gen):
    limit = np.sqrt(6.0 / (n_in + n_out))
    W = (2.0 * _rng.uniform(gen, n_out * n_in) - 1.0).reshape(n_out, n_in) * limit
    return Dense(tag, W, np.zeros(n_out))


def build_model(spec):
    """Randomly initialised model for either topology (seeded by ``spec.seed``)."""
    gen = _rng.generator(spec.seed)
    branches = []
    if spec.kind == "split":
        for k, (n, hidden) in enumerate(zip(spec.branch_input_sizes, spec.branch_hidden)):
            sizes = (n,) + tuple(hidden)
            branches.append([
                _init_dense(f"branch{k + 1}.fc{i + 1}", a, b, gen)
                for i, (a, b) in enumerate(zip(sizes, sizes[1:]))
            ])
        sizes = (sum(h[-1] for h in spec.branch_hidden),) + tuple(spec.joint_hidden)
        prefix = "joint."
        n_out = spec.output_size
    else:
        sizes = tuple(spec.layer_sizes[:-1])
        prefix = ""
        n_out = spec.layer_sizes[-1]
    trunk = [
        _init_dense(f"{prefix}fc{i + 1}", a, b, gen) for i, (a, b) in enumerate(zip(sizes, sizes[1:]))
    ]
    head = _init_dense("output", sizes[-1], n_out, gen)
    return MlpModel(spec, branches, trunk, head)


def build_split_mlp(spec):
    if spec.kind != "split":
        raise InvalidSpec("build_split_mlp needs a split spec")
    return build_model(spec)


# --------------------------------------------------------------------------
# forward / backward


def _as_batch(model, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != model.spec.input_size:
        raise ShapeMismatch(f"input of shape {x.shape} does not match input size {model.spec.input_size}")
    return X, single


def _hidden(layer, h, p, training, gen, acts, cache):
    z = h @ layer.W.T + layer.b
    a = np.maximum(z, 0.0)
    acts[layer.tag] = a
    mask = None
    if training and p > 0:
        mask = (_rng.uniform(gen, a.size).reshape(a.shape) >= p) / (1.0 - p)
        a = a * mask
    cache.append((layer, h, z, mask))
    return a


def _forward(model, X, training, gen):
    p = model.spec.dropout_rate
    if training and p > 0 and gen is None:
        raise ValueError("training-mode dropout needs a generator")
    acts, cache = {}, []
    if model.branches:
        outs = []
        for sl, branch in zip(model.slices, model.branches):
            h = X[:, sl]
            for layer in branch:
                h = _hidden(layer, h, p, training, gen, acts, cache)
            outs.append(h)
        h = np.concatenate(outs, axis=1)
    else:
        h = X
    for layer in model.trunk:
        h = _hidden(layer, h, p, training, gen, acts, cache)
    out = h @ model.head.W.T + model.head.b
    acts["output"] = out
    return out, acts, (cache, h)


def forward(model, x, training=False, gen=None):
    """Run the network on one input vector or a batch of rows.

    Returns ``(output, activations)`` where ``activations`` maps each layer
    tag to its post-ReLU values (the ``"output"`` entry is the affine output).
    """
    X, single = _as_batch(model, x)
    out, acts, _ = _forward(model, X, training, gen)
    if single:
        return out[0], {k: v[0] for k, v in acts.items()}
    return out, acts


def predict(model, X):
    """Inference-mode output, batch in / batch out."""
    X, single = _as_batch(model, X)
    h = X
    if model.branches:
        outs = []
        for sl, branch in zip(model.slices, model.branches):
            h = X[:, sl]
            for layer in branch:
                h = np.maximum(h @ layer.W.T + layer.b, 0.0)
            outs.append(h)
        h = np.concatenate(outs, axis=1)
    for layer in model.trunk:
        h = np.maximum(h @ layer.W.T + layer.b, 0.0)
    out = h @ model.head.W.T + model.head.b
    return out[0] if single else out


def loss_mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    return float(np.mean((pred - target) ** 2))


def backward(model, x, target, training=False, gen=None):
    """Loss and gradients of the MSE with respect to every weight and bias.

    Returns ``(loss, grads)``; ``grads`` is a list of ``(dW, db)`` aligned
    with ``model.layers()``. Dropout masks are drawn from ``gen`` exactly as
    :func:`forward` would draw them from the same generator state.
    """
    X, _ = _as_batch(model, x)
    T = np.asarray(target, dtype=np.float64).reshape(X.shape[0], -1)
    out, _, (cache, h_last) = _forward(model, X, training, gen)
    if T.shape != out.shape:
        raise ShapeMismatch(f"target {T.shape} does not match output {out.shape}")
    diff = out - T
    loss = float(np.mean(diff ** 2))
    dout = 2.0 * diff / diff.size

    grads = {}
    grads[id(model.head)] = (dout.T @ h_last, dout.sum(axis=0))
    dh = dout @ model.head.W

    n_branch_layers = sum(len(b) for b in model.branches)
    trunk_cache = cache[n_branch_layers:]
    for layer, h_in, z, mask in reversed(trunk_cache):
        if mask is not None:
            dh = dh * mask
        dz = dh * (z > 0)
        grads[id(layer)] = (dz.T @ h_in, dz.sum(axis=0))
        dh = dz @ layer.W

    if model.branches:
        widths = [b[-1].W.shape[0] for b in model.branches]
        pieces = np.split(dh, np.cumsum(widths)[:-1], axis=1)
        pos = 0
        for branch, dpiece in zip(model.branches, pieces):
            bcache = cache[pos:pos + len(branch)]
            pos += len(branch)
            dh_b = dpiece
            for layer, h_in, z, mask in reversed(bcache):
                if mask is not None:
                    dh_b = dh_b * mask
                dz = dh_b * (z > 0)
                grads[id(layer)] = (dz.T @ h_in, dz.sum(axis=0))
                dh_b = dz @ layer.W
    return loss, [grads[id(d)] for d in model.layers()]


def adagrad_step(model, grads, cfg):
    """In-place Adagrad update; returns ``model`` for chaining."""
    lr, eps = cfg.learning_rate, cfg.adagrad_epsilon
    for layer, (dW, db) in zip(model.layers(), grads):
        layer.GW += dW * dW
        layer.Gb += db * db
        layer.W -= lr * dW / (np.sqrt(layer.GW) + eps)
        layer.b -= lr * db / (np.sqrt(layer.Gb) + eps)
    return model


def train(spec, dataset, cfg, model=None, callback=None):
    """Minibatch Adagrad on shuffled data.

    ``dataset`` is ``(inputs, targets)``. Returns ``(model, losses)`` with
    the per-epoch mean training loss. ``callback(epoch, loss, model)`` is
    called after each epoch when given.
    """
    X, T = (np.asarray(a, dtype=np.float64) for a in dataset)
    if X.shape[0] == 0:
        raise EmptyDataset("training set is empty")
    if T.ndim == 1:
        T = T[:, None]
    if X.shape[0] != T.shape[0] or X.shape[1] != spec.input_size or T.shape[1] != spec.n_outputs:
        raise ShapeMismatch("dataset does not match the network dimensions")
    if model is None:
        model = build_model(spec)
    gen = _rng.generator(cfg.seed)
    n = X.shape[0]
    bs = min(cfg.minibatch_size, n)
    losses = []
    model.training = True
    for epoch in range(cfg.epochs):
        order = np.argsort(_rng.uniform(gen, n), kind="stable")
        total = 0.0
        for lo in range(0, n, bs):
            idx = order[lo:lo + bs]
            loss, grads = backward(model, X[idx], T[idx], training=True, gen=gen)
            adagrad_step(model, grads, cfg)
            total += loss * idx.size
        losses.append(total / n)
        if callback is not None:
            callback(epoch, losses[-1], model)
    model.training = False
    return model, losses


def dump_activations(model, inputs, layer_tags):
    """``(sample_id, tag, activation)`` rows in sample-major, tag order."""
    known = set(model.tags)
    for tag in layer_tags:
        if tag not in known:
            raise UnknownLayerTag(tag)
    X, _ = _as_batch(model, inputs)
    _, acts, _ = _forward(model, X, False, None)
    return [(i, tag, acts[tag][i]) for i in range(X.shape[0]) for tag in layer_tags]


def write_activations_csv(path, rows):
    with open(path, "w", newline="") as fh:
        fh.write("# hybridinv-activations v1\n")
        w = csv.writer(fh)
        w.writerow(["sample_id", "layer", "width", "values"])
        for i, tag, a in rows:
            w.writerow([i, tag, a.size, " ".join(repr(float(v)) for v in a)])


# --------------------------------------------------------------------------
# JSON model files


def model_to_dict(model, extra=None):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "spec": model.spec.to_dict(),
        "layers": [
            {
                "tag": d.tag,
                "shape": list(d.W.shape),
                "W": d.W.ravel().tolist(),
                "b": d.b.tolist(),
                "GW": d.GW.ravel().tolist(),
                "Gb": d.Gb.tolist(),
            }
            for d in model.layers()
        ],
        "extra": extra or {},
    }


def model_from_dict(d):
    if d.get("format") != MODEL_FORMAT:
        raise ValueError("not a hybridinv model file")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model version {d.get('version')}")
    model = build_model(MlpSpec.from_dict(d["spec"]))
    for layer, rec in zip(model.layers(), d["layers"]):
        if rec["tag"] != layer.tag or tuple(rec["shape"]) != layer.W.shape:
            raise ShapeMismatch(f"layer {rec['tag']} does not match the spec")
        layer.W = np.array(rec["W"]).reshape(rec["shape"])
        layer.b = np.array(rec["b"])
        layer.GW = np.array(rec["GW"]).reshape(rec["shape"])
        layer.Gb = np.array(rec["Gb"])
    return model


def save_model(model, path, extra=None):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model, extra), fh)


def load_model(path):
    with open(path) as fh:
        d = json.load(fh)
    return model_from_dict(d), d.get("extra", {})
