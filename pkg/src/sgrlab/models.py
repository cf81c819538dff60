"""Classifier families: one-layer softmax, ReLU MLP and the small conv net.

All models map a batch ``(N, *input_shape)`` of standardized inputs to
``(N, K)`` logits.  Parameters are autodiff leaves held in an ordered dict so
optimizers and checkpoints can walk them in a fixed order.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor, as_tensor, enable_grad, grad, im2col, log_softmax, max_pool2d, no_grad
from .errors import ContractError, FormatError

CHECKPOINT_VERSION = 1
MNIST_CONV_PARAMS = (32, 32, 64, 64, 200, 200, 10)
CIFAR_CONV_PARAMS = (64, 64, 128, 128, 256, 256, 10)


def _he_uniform(rng, fan_in, shape):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


class Classifier:
    """Common plumbing; subclasses implement ``forward`` and ``config``."""

    kind = "classifier"
    input_shape: tuple[int, ...]
    num_classes: int
    params: dict[str, Tensor]

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        raise NotImplementedError

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def weight_parameters(self) -> list[Tensor]:
        """Parameters subject to weight decay (weights, not biases)."""
        return [p for k, p in self.params.items() if k.startswith("W")]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, p in self.params.items():
            arr = np.asarray(state[k], dtype=np.float64)
            if arr.shape != p.shape:
                raise ContractError(f"parameter {k}: expected shape {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def copy(self) -> "Classifier":
        m = build_model(self.config())
        m.load_state(self.state())
        return m

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))


class LinearSoftmax(Classifier):
    """logits = W x + b with W of shape (K, d)."""

    kind = "linear"

    def __init__(self, input_shape, num_classes, seed=0, weights=None, biases=None):
        self.input_shape = tuple(np.atleast_1d(input_shape).tolist())
        self.num_classes = int(num_classes)
        d = self.input_dim
        rng = np.random.default_rng(seed)
        W = _he_uniform(rng, d, (self.num_classes, d)) if weights is None else np.asarray(weights, float)
        b = np.zeros(self.num_classes) if biases is None else np.asarray(biases, float)
        if W.shape != (self.num_classes, d) or b.shape != (self.num_classes,):
            raise ContractError("weights must be (K, d) and biases (K,)")
        self.params = {"W": Tensor(W.copy(), requires_grad=True), "b": Tensor(b.copy(), requires_grad=True)}

    def forward(self, x):
        h = x.reshape(x.shape[0], self.input_dim)
        return h @ self.params["W"].T + self.params["b"]

    def config(self):
        return {"kind": self.kind, "input_shape": list(self.input_shape), "num_classes": self.num_classes}


class MLP(Classifier):
    """ReLU multilayer perceptron; ``widths`` includes input and output sizes."""

    kind = "mlp"

    def __init__(self, widths, input_shape=None, seed=0):
        self.widths = [int(w) for w in widths]
        if len(self.widths) < 2:
            raise ContractError("MLP needs at least input and output widths")
        self.input_shape = tuple(input_shape) if input_shape is not None else (self.widths[0],)
        if self.input_dim != self.widths[0]:
            raise ContractError(f"input_shape {self.input_shape} does not flatten to {self.widths[0]}")
        self.num_classes = self.widths[-1]
        rng = np.random.default_rng(seed)
        self.params = {}
        for i, (a, b) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.params[f"W{i}"] = Tensor(_he_uniform(rng, a, (a, b)), requires_grad=True)
            self.params[f"b{i}"] = Tensor(np.zeros(b), requires_grad=True)

    def forward(self, x):
        h = x.reshape(x.shape[0], self.input_dim)
        n = len(self.widths) - 1
        for i in range(n):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < n - 1:
                h = h.relu()
        return h

    def config(self):
        return {"kind": self.kind, "widths": self.widths, "input_shape": list(self.input_shape)}


class ConvNet(Classifier):
    """Four 3x3 valid conv layers with two 2x2 max-pools, then three dense layers.

    ``params`` follows the feature-map list convention, e.g.
    ``[32, 32, 64, 64, 200, 200, 10]`` for MNIST.  Dense hidden layers use ReLU.
    """

    kind = "convnet"

    def __init__(self, input_shape=(28, 28, 1), params=MNIST_CONV_PARAMS, seed=0):
        self.input_shape = tuple(int(s) for s in input_shape)
        if len(self.input_shape) != 3:
            raise ContractError("ConvNet input_shape must be (H, W, C)")
        self.arch = [int(p) for p in params]
        if len(self.arch) != 7:
            raise ContractError("ConvNet params must have 7 entries")
        self.num_classes = self.arch[-1]
        rng = np.random.default_rng(seed)
        h, w, c = self.input_shape
        self.params = {}
        for i, f in enumerate(self.arch[:4]):
            fan_in = 9 * c
            self.params[f"Wc{i}"] = Tensor(_he_uniform(rng, fan_in, (fan_in, f)), requires_grad=True)
            self.params[f"bc{i}"] = Tensor(np.zeros(f), requires_grad=True)
            h, w, c = h - 2, w - 2, f
            if i in (1, 3):
                h, w = h // 2, w // 2
        if h < 1 or w < 1:
            raise ContractError(f"input {self.input_shape} too small for the conv stack")
        fan_in = h * w * c
        self.flat_dim = fan_in
        for i, units in enumerate(self.arch[4:]):
            self.params[f"W{i}"] = Tensor(_he_uniform(rng, fan_in, (fan_in, units)), requires_grad=True)
            self.params[f"b{i}"] = Tensor(np.zeros(units), requires_grad=True)
            fan_in = units

    def forward(self, x):
        n = x.shape[0]
        h = x.reshape((n,) + self.input_shape)
        for i in range(4):
            _, hh, ww, _ = h.shape
            cols = im2col(h, 3, 3)
            h = (cols @ self.params[f"Wc{i}"] + self.params[f"bc{i}"]).relu()
            h = h.reshape(n, hh - 2, ww - 2, self.arch[i])
            if i in (1, 3):
                h = max_pool2d(h, 2)
        h = h.reshape(n, self.flat_dim)
        for i in range(3):
            h = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < 2:
                h = h.relu()
        return h

    def config(self):
        return {"kind": self.kind, "params": self.arch, "input_shape": list(self.input_shape)}


def build_model(config: dict, seed: int = 0) -> Classifier:
    kind = config.get("kind")
    if kind == "linear":
        return LinearSoftmax(config["input_shape"], config["num_classes"], seed=seed)
    if kind == "mlp":
        return MLP(config["widths"], input_shape=config.get("input_shape"), seed=seed)
    if kind == "convnet":
        return ConvNet(config["input_shape"], config.get("params", MNIST_CONV_PARAMS), seed=seed)
    raise ContractError(f"unknown model kind {kind!r}")


# -- functional surface ---------------------------------------------------

def _batched(model, x):
    x = as_tensor(x)
    if x.shape == model.input_shape:
        return x.reshape((1,) + model.input_shape), True
    if x.shape[1:] != model.input_shape:
        raise ContractError(f"input shape {x.shape} does not match model input {model.input_shape}")
    return x, False


def logits(model: Classifier, x) -> Tensor:
    """Logits for a single input (K,) or a batch (N, K)."""
    xb, single = _batched(model, x)
    out = model.forward(xb)
    return out.reshape(model.num_classes) if single else out


def _labels(model, y, n):
    y = np.atleast_1d(np.asarray(y)).astype(np.int64)
    if y.shape != (n,):
        raise ContractError(f"expected {n} labels, got shape {y.shape}")
    if np.any(y < 0) or np.any(y >= model.num_classes):
        raise ContractError(f"labels must lie in [0, {model.num_classes})")
    return y


def one_hot(y, k) -> np.ndarray:
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def log_prob(model: Classifier, x, y) -> Tensor:
    """log phi_y(x): scalar for one input, (N,) vector for a batch."""
    xb, single = _batched(model, x)
    y = _labels(model, y, xb.shape[0])
    lp = (log_softmax(model.forward(xb)) * Tensor(one_hot(y, model.num_classes))).sum(axis=1)
    return lp.reshape(()) if single else lp


def log_probs(model: Classifier, x) -> Tensor:
    xb, single = _batched(model, x)
    lp = log_softmax(model.forward(xb))
    return lp.reshape(model.num_classes) if single else lp


def cross_entropy(model: Classifier, x, y) -> Tensor:
    """Mean negative log-likelihood over the batch."""
    lp = log_prob(model, x, y)
    return -lp.mean() if lp.ndim else -lp


def per_sample_loss(model: Classifier, x, y) -> np.ndarray:
    with no_grad():
        return -np.atleast_1d(log_prob(model, x, y).data)


def input_log_prob_grad(model: Classifier, x, y, create_graph: bool = False) -> Tensor:
    """Gradient of log phi_y with respect to the input, same shape as ``x``.

    Samples do not interact inside a model, so the gradient of the summed
    batch log-probability holds each sample's own input gradient.  With
    ``create_graph`` the result stays differentiable in the parameters.
    """
    x = as_tensor(x)
    xt = x if x.requires_grad else Tensor(x.data, requires_grad=True)
    with enable_grad():
        lp = log_prob(model, xt, y)
        return grad(lp.sum(), xt, create_graph=create_graph)


def logit_input_grads(model: Classifier, xt: Tensor, create_graph: bool = False) -> tuple[Tensor, list[Tensor]]:
    """Logits and the input gradient of every class logit (one tensor per class)."""
    with enable_grad():
        z = logits(model, xt)
        zb = z if z.ndim == 2 else z.reshape(1, model.num_classes)
        grads = []
        for k in range(model.num_classes):
            sel = np.zeros((1, model.num_classes))
            sel[0, k] = 1.0
            grads.append(grad((zb * Tensor(sel)).sum(), xt, create_graph=create_graph))
    return z, grads


def predict(model: Classifier, x) -> np.ndarray | int:
    """Arg-max class; ties go to the smallest index."""
    with no_grad():
        z = logits(model, x).data
    return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)


def predict_batched(model: Classifier, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = [np.atleast_1d(predict(model, Tensor(x[i:i + batch_size]))) for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(model: Classifier, x: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(predict_batched(model, x) == np.asarray(y))) if len(y) else float("nan")


# -- checkpoints ----------------------------------------------------------

def save_checkpoint(model: Classifier, path) -> Path:
    path = Path(path)
    meta = {"format": "sgrlab-checkpoint", "version": CHECKPOINT_VERSION, "model": model.config(),
            "order": list(model.params)}
    arrays = {f"param/{k}": p.data for k, p in model.params.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(json.dumps(meta, sort_keys=True)), **arrays)
    return path


def load_checkpoint(path) -> Classifier:
    try:
        with np.load(Path(path), allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            state = {k.split("/", 1)[1]: z[k] for k in z.files if k.startswith("param/")}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("format") != "sgrlab-checkpoint" or meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint header in {path}: {meta.get('format')} v{meta.get('version')}")
    model = build_model(meta["model"])
    model.load_state(state)
    return model
