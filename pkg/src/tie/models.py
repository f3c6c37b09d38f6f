"""(n+1)-way MLP classifier and the soft-conditioned MLP generator."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .diffcore import Linear, Parameter, Tensor, concat, no_grad, relu, sigmoid
from .diffcore.tensor import _softmax_np, as_tensor

CHECKPOINT_FORMAT = "tie-checkpoint"
CHECKPOINT_VERSION = 1
SIMPLEX_TOL = 1e-6
GENERATOR_INIT_STD = 0.02


class _MLP:
    kind = "mlp"

    def __init__(self, dims: Sequence[int]):
        self.layers = [Linear(a, b, name=f"{self.kind}.{i}") for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]))]

    def parameters(self) -> list[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"{p.name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.copy()


class ClassifierNet(_MLP):
    """MLP producing K = n+1 logits plus its last hidden activation."""

    kind = "classifier"

    def __init__(self, input_dim: int, n_classes: int, hidden: Sequence[int] = (256, 128)):
        if not hidden:
            raise ValueError("classifier needs at least one hidden layer for penultimate features")
        self.input_dim = input_dim
        self.n_classes = n_classes
        self.hidden = tuple(int(h) for h in hidden)
        super().__init__([input_dim, *self.hidden, n_classes + 1])

    @property
    def num_outputs(self) -> int:
        return self.n_classes + 1

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1]

    def __call__(self, x) -> tuple[Tensor, Tensor]:
        return classifier_forward(self, x)

    def describe(self) -> dict:
        return {"input_dim": self.input_dim, "n_classes": self.n_classes, "hidden": list(self.hidden)}


class GeneratorNet(_MLP):
    """Maps ``concat(z, y_tilde)`` to a sample in ``[0, 1]^D``."""

    kind = "generator"

    def __init__(self, output_dim: int, num_conditions: int, latent_dim: int = 32,
                 hidden: Sequence[int] = (128, 256)):
        self.output_dim = output_dim
        self.num_conditions = num_conditions
        self.latent_dim = latent_dim
        self.hidden = tuple(int(h) for h in hidden)
        super().__init__([latent_dim + num_conditions, *self.hidden, output_dim])

    def __call__(self, z, y_tilde) -> Tensor:
        return generator_forward(self, z, y_tilde)

    def describe(self) -> dict:
        return {"output_dim": self.output_dim, "num_conditions": self.num_conditions,
                "latent_dim": self.latent_dim, "hidden": list(self.hidden)}


def classifier_forward(net: ClassifierNet, x) -> tuple[Tensor, Tensor]:
    x = as_tensor(x)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ValueError(f"classifier_forward: expected input (B, {net.input_dim}), got {x.shape}")
    h = x
    for layer in net.layers[:-1]:
        h = relu(layer(h))
    return net.layers[-1](h), h


def generator_forward(net: GeneratorNet, z, y_tilde) -> Tensor:
    z, y_tilde = as_tensor(z), as_tensor(y_tilde)
    if z.ndim != 2 or z.shape[1] != net.latent_dim:
        raise ValueError(f"generator_forward: expected z of shape (B, {net.latent_dim}), got {z.shape}")
    if y_tilde.shape != (z.shape[0], net.num_conditions):
        raise ValueError(f"generator_forward: expected y_tilde of shape ({z.shape[0]}, {net.num_conditions}), "
                         f"got {y_tilde.shape}")
    y = y_tilde.data
    if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("generator_forward: conditioning rows must be non-negative and sum to 1")
    h = concat([z, y_tilde])
    for layer in net.layers[:-1]:
        h = relu(layer(h))
    return sigmoid(net.layers[-1](h))


def init_weights(net: _MLP, seed: int) -> None:
    """Generator: N(0, 0.02^2). Classifier: He-normal, N(0, 2/fan_in). Biases zero."""
    rng = np.random.default_rng(seed)
    for layer in net.layers:
        if isinstance(net, GeneratorNet):
            std = GENERATOR_INIT_STD
        else:
            std = np.sqrt(2.0 / layer.in_dim)
        layer.weight.data = rng.normal(0.0, std, size=layer.weight.shape)
        layer.bias.data = np.zeros(layer.bias.shape)


def predict(net: ClassifierNet, x: np.ndarray, batch_size: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Logits and penultimate features as arrays, without recording a tape."""
    x = np.asarray(x, dtype=np.float64)
    logits, feats = [], []
    with no_grad():
        for i in range(0, max(len(x), 1), batch_size):
            lo, fe = classifier_forward(net, x[i:i + batch_size])
            logits.append(lo.data)
            feats.append(fe.data)
    return np.concatenate(logits), np.concatenate(feats)


def predict_proba(net: ClassifierNet, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
    return _softmax_np(predict(net, x, batch_size)[0])


def generate(net: GeneratorNet, z: np.ndarray, y_tilde: np.ndarray) -> np.ndarray:
    with no_grad():
        return generator_forward(net, z, y_tilde).data


def save_checkpoint(path, classifier: ClassifierNet, generator: GeneratorNet | None,
                    seed: int, extra: dict | None = None) -> None:
    """Write an ``.npz`` holding every parameter plus a JSON descriptor.

    Arrays are keyed ``classifier.<layer>.<weight|bias>`` and
    ``generator.<layer>.<weight|bias>``; ``__meta__`` is a JSON string with
    the format tag, version, architectures, seed and any ``extra`` fields.
    """
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "classifier": classifier.describe(),
        "generator": generator.describe() if generator is not None else None,
        "extra": extra or {},
    }
    arrays = dict(classifier.state_dict())
    if generator is not None:
        arrays.update(generator.state_dict())
    arrays["__meta__"] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[ClassifierNet, GeneratorNet | None, dict]:
    with np.load(path, allow_pickle=False) as npz:
        if "__meta__" not in npz.files:
            raise ValueError(f"{path}: not a TIE checkpoint (no __meta__ entry)")
        meta = json.loads(str(npz["__meta__"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint {meta.get('format')} v{meta.get('version')}")
        state = {k: npz[k] for k in npz.files if k != "__meta__"}
    c = meta["classifier"]
    clf = ClassifierNet(c["input_dim"], c["n_classes"], c["hidden"])
    clf.load_state_dict(state)
    gen = None
    if meta.get("generator"):
        g = meta["generator"]
        gen = GeneratorNet(g["output_dim"], g["num_conditions"], g["latent_dim"], g["hidden"])
        gen.load_state_dict(state)
    return clf, gen, meta
