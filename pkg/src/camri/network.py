"""Dense feedforward classifier trained by mini-batch backpropagation and Adam.

The extractor is a stack of ReLU dense layers followed by a linear feature
layer of width D. The head is either affine (``z @ W + b``) or angular
(cosines between normalized ``z`` and normalized columns of ``W``, no bias).
Both head kinds store raw ``W``; normalization happens inside the angular
losses and inside ``predict``.
"""

import io
import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from camri.errors import FormatError, InvalidInputError, TrainingDivergenceError
from camri.losses import HeadContext, loss_eval
from camri.numerics import AdamState, adam_step, init_weights, make_rng, normalize_rows

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
DIVERGENCE_LIMIT = 1e6
HEAD_KINDS = ("affine", "angular")


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden: tuple = (64, 64)
    feature_dim: int = 16
    n_classes: int = 3
    head: str = "affine"
    feature_activation: str = "linear"

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, self.feature_dim, self.n_classes, *self.hidden)
        if any(d < 1 for d in dims):
            raise InvalidInputError("all model dimensions must be >= 1")
        if self.head not in HEAD_KINDS:
            raise InvalidInputError(f"head must be one of {HEAD_KINDS}")
        if self.feature_activation not in ("linear", "relu"):
            raise InvalidInputError("feature_activation must be 'linear' or 'relu'")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidInputError("batch_size and epochs must be >= 1")


@dataclass
class Model:
    config: ModelConfig
    params: dict = field(default_factory=dict)

    @property
    def n_layers(self):
        return len(self.config.hidden) + 1

    @property
    def head_W(self):
        return self.params["head.W"]

    @property
    def head_b(self):
        return self.params.get("head.b")

    def copy(self):
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})


def head_kind_for(loss_kind):
    return "angular" if loss_kind in ("l2softmax", "arcface", "camri") else "affine"


def init_model(config, seed):
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = make_rng([int(seed), 0])
    widths = [config.input_dim, *config.hidden, config.feature_dim]
    params = {}
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"layer{i}.W"] = init_weights(fan_in, fan_out, rng)
        params[f"layer{i}.b"] = np.zeros(fan_out)
    params["head.W"] = init_weights(config.feature_dim, config.n_classes, rng)
    if config.head == "affine":
        params["head.b"] = np.zeros(config.n_classes)
    return Model(config, params)


def forward(model, x):
    """Feature vector(s) z for input(s) x, plus the cache needed by ``backward``."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    a = x[None, :] if single else x
    if a.shape[1] != model.config.input_dim:
        raise InvalidInputError(f"input has {a.shape[1]} features, model expects {model.config.input_dim}")
    acts = [a]
    pre = []
    last = model.n_layers - 1
    for i in range(model.n_layers):
        u = a @ model.params[f"layer{i}.W"] + model.params[f"layer{i}.b"]
        pre.append(u)
        if i < last or model.config.feature_activation == "relu":
            a = np.maximum(u, 0.0)
        else:
            a = u
        acts.append(a)
    z = acts[-1]
    return (z[0] if single else z), {"acts": acts, "pre": pre}


def backward(model, cache, grad_z):
    """Parameter gradients of the extractor given dL/dz."""
    grad = np.atleast_2d(np.asarray(grad_z, dtype=np.float64))
    acts, pre = cache["acts"], cache["pre"]
    grads = {}
    last = model.n_layers - 1
    for i in reversed(range(model.n_layers)):
        if i < last or model.config.feature_activation == "relu":
            grad = grad * (pre[i] > 0)
        grads[f"layer{i}.W"] = acts[i].T @ grad
        grads[f"layer{i}.b"] = grad.sum(axis=0)
        if i > 0:
            grad = grad @ model.params[f"layer{i}.W"].T
    return grads


def head_scores(model, z):
    """Margin-free head scores: logits (affine) or cosines (angular)."""
    z = np.atleast_2d(z)
    if model.config.head == "affine":
        return z @ model.head_W + model.head_b
    zn, _ = normalize_rows(z, axis=1)
    wn, _ = normalize_rows(model.head_W, axis=0)
    return zn @ wn


def predict(model, x):
    """Class index per input; ties resolve to the lowest index."""
    x = np.asarray(x, dtype=np.float64)
    z, _ = forward(model, x)
    labels = np.argmax(head_scores(model, z), axis=1)
    return int(labels[0]) if x.ndim == 1 else labels


def loss_and_grads(model, X, t, cfg, strict=True):
    """Mean batch loss and gradients for every parameter."""
    with np.errstate(over="ignore", invalid="ignore"):
        z, cache = forward(model, X)
    bad = ~np.all(np.isfinite(np.atleast_2d(z)), axis=1)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise TrainingDivergenceError(f"non-finite features at batch sample {idx}", sample_index=idx)
    out = loss_eval(cfg, HeadContext(z, model.head_W, model.head_b, t), strict=strict)
    grads = backward(model, cache, out.grad_z)
    grads["head.W"] = out.grad_W
    if "head.b" in model.params:
        grads["head.b"] = out.grad_b
    return out, grads


def init_adam(model, lr=1e-3):
    return {name: AdamState.zeros_like(p, lr=lr) for name, p in model.params.items()}


def train_step(model, X, t, cfg, adam_states, strict=True):
    """One Adam step on the batch (X, t). Returns (model, mean_loss, loss_output)."""
    if len(t) == 0:
        raise InvalidInputError("empty batch")
    out, grads = loss_and_grads(model, X, t, cfg, strict=strict)
    bad = ~np.isfinite(out.per_sample)
    if np.any(bad):
        idx = int(np.flatnonzero(bad)[0])
        raise TrainingDivergenceError(f"non-finite loss at batch sample {idx}", sample_index=idx)
    new_params = {}
    for name, p in model.params.items():
        new_params[name], adam_states[name] = adam_step(p, grads[name], adam_states[name])
    return Model(model.config, new_params), out.loss, out


def _as_arrays(dataset):
    if hasattr(dataset, "X"):
        return np.asarray(dataset.X, dtype=np.float64), np.asarray(dataset.labels, dtype=np.int64)
    X, t = dataset
    return np.asarray(X, dtype=np.float64), np.asarray(t, dtype=np.int64)


def train(model, dataset, cfg, tc):
    """Train for ``tc.epochs`` epochs of shuffled mini-batches.

    Returns the trained model and a history list with one dict per epoch
    (``epoch``, ``loss``, ``train_accuracy``, ``sinkhorn_converged``,
    ``sinkhorn_max_iterations``). Deterministic for fixed inputs.
    """
    X, t = _as_arrays(dataset)
    if np.any(t >= model.config.n_classes) or np.any(t < 0):
        raise InvalidInputError("dataset labels outside 0..K-1")
    rng = make_rng([int(tc.seed), 1])
    states = init_adam(model, lr=tc.lr)
    history = []
    n = len(t)
    for epoch in range(tc.epochs):
        order = rng.permutation(n) if tc.shuffle else np.arange(n)
        total = 0.0
        converged = True
        max_iters = 0
        for start in range(0, n, tc.batch_size):
            idx = order[start : start + tc.batch_size]
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", RuntimeWarning)
                model, loss, out = train_step(model, X[idx], t[idx], cfg, states, strict=False)
            total += loss * len(idx)
            converged &= out.converged
            max_iters = max(max_iters, out.sinkhorn_iterations)
        mean_loss = total / n
        if not math.isfinite(mean_loss) or mean_loss > DIVERGENCE_LIMIT:
            raise TrainingDivergenceError(f"epoch {epoch} mean loss {mean_loss} exceeds divergence guard")
        if not converged:
            warnings.warn(f"epoch {epoch}: Sinkhorn did not converge for some batch", RuntimeWarning)
        acc = float(np.mean(predict(model, X) == t))
        history.append(
            {
                "epoch": epoch,
                "loss": mean_loss,
                "train_accuracy": acc,
                "sinkhorn_converged": converged,
                "sinkhorn_max_iterations": max_iters,
            }
        )
        log.debug("epoch %d loss %.6f acc %.4f", epoch, mean_loss, acc)
    return model, history


def save_checkpoint(path, model, seed):
    """Write config, seed and every parameter array (float64) to an ``.npz`` container."""
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "seed": int(seed),
        "param_names": list(model.params),
    }
    arrays = {f"p{i}": np.ascontiguousarray(model.params[name]) for i, name in enumerate(model.params)}
    buf = io.BytesIO()
    np.savez(buf, meta=np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8), **arrays)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(model, seed)`` from a file written by ``save_checkpoint``."""
    try:
        with np.load(path, allow_pickle=False) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise FormatError(f"unsupported checkpoint version {meta.get('format_version')}")
            params = {name: data[f"p{i}"].copy() for i, name in enumerate(meta["param_names"])}
    except (KeyError, ValueError, OSError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"unreadable checkpoint {path}: {exc}") from exc
    config = ModelConfig(**meta["config"])
    return Model(config, params), meta["seed"]
