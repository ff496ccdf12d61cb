"""Dense networks with hand-written backpropagation.

Weights are stored ``(out, in)`` and a dense layer computes ``y = W x + b``.
Every array is float64. Batched inputs carry the batch on axis 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeError
from .fairdropout import MODES, TEST, FairDropout, FairDropoutConfig


def dense_forward(x: np.ndarray, layer: "Dense") -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != layer.in_width:
        raise ShapeError(f"dense layer {layer.layer_index} input width", layer.in_width, x.shape[-1])
    return x @ layer.weights.T + layer.bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, label):
    """Cross-entropy loss and its gradient w.r.t. the logits.

    Works on one row (``label`` an int) or a batch (``label`` an int array), in
    which case per-row losses and gradients are returned.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(label)
    n_classes = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise IndexError(f"label {label} out of range for {n_classes} classes")
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    lse = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, labels.reshape(labels.shape + (1,)), axis=-1)[..., 0]
    loss = lse - picked
    grad = softmax(logits)
    onehot = np.zeros_like(grad)
    np.put_along_axis(onehot, labels.reshape(labels.shape + (1,)), 1.0, axis=-1)
    grad = grad - onehot
    if labels.ndim == 0:
        return float(loss), grad
    return loss, grad


@dataclass
class Dense:
    weights: np.ndarray
    bias: np.ndarray
    layer_index: int
    kind = "dense"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ShapeError("dense weights shape", "(out>=1, in>=1)", self.weights.shape)
        if self.bias.shape != (self.weights.shape[0],):
            raise ShapeError("dense bias shape", (self.weights.shape[0],), self.bias.shape)

    @property
    def in_width(self) -> int:
        return self.weights.shape[1]

    @property
    def out_width(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def init(cls, in_width: int, out_width: int, layer_index: int, rng: np.random.Generator) -> "Dense":
        s = np.sqrt(6.0 / (in_width + out_width))
        return cls(rng.uniform(-s, s, size=(out_width, in_width)), np.zeros(out_width), layer_index)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "in": self.in_width, "out": self.out_width,
                "layer_index": self.layer_index,
                "weights": self.weights.ravel().tolist(), "bias": self.bias.tolist()}


class ReLU:
    kind = "relu"

    def to_dict(self) -> dict:
        return {"kind": self.kind}

    def __repr__(self):
        return "ReLU()"


@dataclass
class GradientRecord:
    """Per dense layer gradients, keyed by ``layer_index``."""

    weights: dict[int, np.ndarray] = field(default_factory=dict)
    bias: dict[int, np.ndarray] = field(default_factory=dict)

    def __sub__(self, other: "GradientRecord") -> "GradientRecord":
        return GradientRecord({k: v - other.weights[k] for k, v in self.weights.items()},
                              {k: v - other.bias[k] for k, v in self.bias.items()})

    def flat(self) -> np.ndarray:
        parts = []
        for k in sorted(self.weights):
            parts += [self.weights[k].ravel(), self.bias[k]]
        return np.concatenate(parts) if parts else np.zeros(0)


NeuronKeep = Mapping[int, np.ndarray]


class Model:
    """Ordered stack of `Dense`, `ReLU` and `FairDropout` layers.

    ``mode`` selects the FairDropout behaviour ("train" keeps each example's
    memorizing units, "test" drops them). Hidden units of any dense layer other
    than the last can be switched off with a ``neuron_keep`` mapping from
    layer index to a boolean vector; the zero is applied after the ReLU that
    follows the layer, if any.
    """

    def __init__(self, layers: Sequence, mode: str = TEST, seed: int = 0):
        self.layers = list(layers)
        self.mode = mode
        self.seed = seed
        self._validate()

    def _validate(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        width = None
        seen = set()
        for layer in self.layers:
            if isinstance(layer, Dense):
                if width is not None and layer.in_width != width:
                    raise ShapeError(f"dense layer {layer.layer_index} input width", width, layer.in_width)
                if layer.layer_index in seen:
                    raise ValueError(f"duplicate layer_index {layer.layer_index}")
                seen.add(layer.layer_index)
                width = layer.out_width
            elif isinstance(layer, FairDropout):
                if width is not None and layer.width != width:
                    raise ShapeError("FairDropout width", width, layer.width)
        # mask points: stack position after which hidden units of a dense layer are zeroed
        self._mask_points: dict[int, int] = {}
        dense_pos = [i for i, l in enumerate(self.layers) if isinstance(l, Dense)]
        for i in dense_pos[:-1]:
            pos = i + 1 if i + 1 < len(self.layers) and isinstance(self.layers[i + 1], ReLU) else i
            self._mask_points[pos] = self.layers[i].layer_index

    @property
    def dense_layers(self) -> list[Dense]:
        return [l for l in self.layers if isinstance(l, Dense)]

    @property
    def hidden_layers(self) -> list[Dense]:
        """Dense layers whose outputs are maskable (all but the head)."""
        return self.dense_layers[:-1]

    @property
    def fair_dropouts(self) -> list[FairDropout]:
        return [l for l in self.layers if isinstance(l, FairDropout)]

    @property
    def in_width(self) -> int:
        return self.dense_layers[0].in_width

    @property
    def n_classes(self) -> int:
        return self.dense_layers[-1].out_width

    def n_parameters(self) -> int:
        return sum(l.weights.size + l.bias.size for l in self.dense_layers)

    def copy(self) -> "Model":
        layers = []
        for l in self.layers:
            if isinstance(l, Dense):
                layers.append(Dense(l.weights.copy(), l.bias.copy(), l.layer_index))
            else:
                layers.append(l)
        return Model(layers, self.mode, self.seed)

    def _run(self, x, example_ids, mode, neuron_keep):
        mode = mode or self.mode
        h = np.asarray(x, dtype=np.float64)
        single = h.ndim == 1
        if single:
            h = h[None, :]
            if example_ids is not None and np.ndim(example_ids) == 0:
                example_ids = [example_ids]
        n = h.shape[0]
        cache = []
        for pos, layer in enumerate(self.layers):
            if isinstance(layer, Dense):
                cache.append(h)
                h = dense_forward(h, layer)
            elif isinstance(layer, ReLU):
                cache.append(h > 0)
                h = relu(h)
            elif isinstance(layer, FairDropout):
                if h.shape[1] != layer.width:
                    raise ShapeError("FairDropout input width", layer.width, h.shape[1])
                keep = layer.keep_matrix(example_ids, mode, n)
                cache.append(keep)
                h = np.where(keep, h, 0.0)
            else:
                raise TypeError(f"unsupported layer {layer!r}")
            if neuron_keep and pos in self._mask_points:
                keep = neuron_keep.get(self._mask_points[pos])
                if keep is not None:
                    h = np.where(keep, h, 0.0)
        return h, cache, single

    def forward(self, x, example_ids=None, mode: str | None = None,
                neuron_keep: NeuronKeep | None = None) -> np.ndarray:
        """Logits for one row or a batch of rows."""
        h, _, single = self._run(x, example_ids, mode, neuron_keep)
        return h[0] if single else h

    def predict(self, x, example_ids=None, mode: str | None = None,
                neuron_keep: NeuronKeep | None = None) -> np.ndarray:
        # argmax ties resolve to the lowest class index
        return np.argmax(self.forward(x, example_ids, mode, neuron_keep), axis=-1)

    def loss_and_grad(self, x, labels, example_ids=None, mode: str | None = None,
                      neuron_keep: NeuronKeep | None = None,
                      sample_weight: np.ndarray | None = None) -> tuple[float, GradientRecord]:
        """Mean (optionally weighted) cross-entropy over the batch and its exact gradient."""
        logits, cache, single = self._run(x, example_ids, mode, neuron_keep)
        labels = np.atleast_1d(np.asarray(labels))
        n = logits.shape[0]
        losses, g = softmax_cross_entropy(logits, labels)
        w = np.ones(n) if sample_weight is None else np.asarray(sample_weight, dtype=np.float64)
        loss = float(np.dot(w, losses) / n)
        g = g * (w / n)[:, None]
        grads = GradientRecord()
        for pos in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[pos]
            if neuron_keep and pos in self._mask_points:
                keep = neuron_keep.get(self._mask_points[pos])
                if keep is not None:
                    g = np.where(keep, g, 0.0)
            c = cache[pos]
            if isinstance(layer, Dense):
                grads.weights[layer.layer_index] = g.T @ c
                grads.bias[layer.layer_index] = g.sum(axis=0)
                if pos > 0:
                    g = g @ layer.weights
            else:
                # ReLU caches its active set, FairDropout its keep mask
                g = np.where(c, g, 0.0)
        return loss, grads

    def losses(self, x, labels, example_ids=None, mode: str | None = None,
               neuron_keep: NeuronKeep | None = None) -> np.ndarray:
        logits = np.atleast_2d(self.forward(x, example_ids, mode, neuron_keep))
        return softmax_cross_entropy(logits, np.atleast_1d(np.asarray(labels)))[0]

    def parameter_checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for l in self.dense_layers:
            h.update(l.weights.tobytes())
            h.update(l.bias.tobytes())
        return h.hexdigest()

    def __repr__(self):
        return f"Model({self.layers!r}, mode={self.mode!r})"


def model_backward(model: Model, x, label, example_id=None, neuron_keep=None) -> GradientRecord:
    """Gradient of the cross-entropy of one example w.r.t. every dense layer."""
    return model.loss_and_grad(x, [label], example_ids=None if example_id is None else [example_id],
                               neuron_keep=neuron_keep)[1]


def finite_difference_check(model: Model, example, epsilon: float = 1e-5) -> float:
    """Largest relative gap between backprop and central-difference gradients.

    ``example`` is ``(x, label)`` or ``(x, label, example_id)``. The relative
    error of one parameter is ``|a - n| / max(1e-8, |a| + |n|)``.
    """
    if not 0.0 < epsilon <= 1e-2:
        raise ValueError(f"epsilon must be in (0, 1e-2], got {epsilon}")
    x, label, *rest = example
    eid = rest[0] if rest else None
    ids = None if eid is None else [eid]
    grads = model.loss_and_grad(x, [label], example_ids=ids)[1]
    worst = 0.0
    for layer in model.dense_layers:
        for param, analytic in ((layer.weights, grads.weights[layer.layer_index]),
                                (layer.bias, grads.bias[layer.layer_index])):
            flat = param.reshape(-1)
            a_flat = analytic.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + epsilon
                up = model.losses(x, [label], ids)[0]
                flat[i] = orig - epsilon
                down = model.losses(x, [label], ids)[0]
                flat[i] = orig
                numeric = (up - down) / (2 * epsilon)
                a = a_flat[i]
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
    return worst


def build_mlp(in_width: int, hidden: Sequence[int], n_classes: int, seed: int,
              fair_dropout: tuple[int | str, float, float, int] | None = None,
              projection_width: int | None = None) -> Model:
    """Dense/ReLU stack with an optional FairDropout layer.

    ``fair_dropout`` is ``(position, p_gen, p_mem, allocation_seed)``. An
    integer position ``i`` places the layer after hidden block ``i``; the
    string ``"proj"`` inserts a linear projection of ``projection_width`` units
    before the head and places the layer after it.
    """
    rng = np.random.default_rng(seed)
    layers: list = []
    width = in_width
    idx = 0
    position = fair_dropout[0] if fair_dropout else None
    if isinstance(position, int) and not 0 <= position < len(hidden):
        raise ValueError(f"FairDropout position {position} is not a hidden block (have {len(hidden)})")
    if position not in (None, "proj") and not isinstance(position, int):
        raise ValueError(f"unknown FairDropout position {position!r}")
    for i, h in enumerate(hidden):
        layers += [Dense.init(width, h, idx, rng), ReLU()]
        idx += 1
        width = h
        if position == i:
            _, p_gen, p_mem, aseed = fair_dropout
            layers.append(FairDropout(FairDropoutConfig(width, p_gen, p_mem, aseed)))
    if position == "proj":
        pw = projection_width or width
        layers.append(Dense.init(width, pw, idx, rng))
        idx += 1
        width = pw
        _, p_gen, p_mem, aseed = fair_dropout
        layers.append(FairDropout(FairDropoutConfig(width, p_gen, p_mem, aseed)))
    layers.append(Dense.init(width, n_classes, idx, rng))
    return Model(layers, mode=TEST, seed=seed)


# ----- checkpoint file -----

def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _encode(obj) -> str:
    if isinstance(obj, dict):
        return "{" + ", ".join(f"{json.dumps(k)}: {_encode(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, list):
        return "[" + ", ".join(_encode(v) for v in obj) + "]"
    if isinstance(obj, float):
        return _fmt(obj)
    return json.dumps(obj)


def model_to_json(model: Model) -> str:
    payload = {"layers": [l.to_dict() for l in model.layers], "mode": model.mode, "seed": model.seed}
    return _encode(payload) + "\n"


def model_from_json(text: str) -> Model:
    payload = json.loads(text)
    layers = []
    for spec in payload["layers"]:
        kind = spec.get("kind")
        if kind == "dense":
            w = np.asarray(spec["weights"], dtype=np.float64)
            if w.size != spec["out"] * spec["in"]:
                raise ShapeError("checkpoint weight count", spec["out"] * spec["in"], w.size)
            layers.append(Dense(w.reshape(spec["out"], spec["in"]),
                                np.asarray(spec["bias"], dtype=np.float64), int(spec["layer_index"])))
        elif kind == "relu":
            layers.append(ReLU())
        elif kind == "fair_dropout":
            layers.append(FairDropout(FairDropoutConfig(int(spec["H"]), float(spec["p_gen"]),
                                                        float(spec["p_mem"]), int(spec["allocation_seed"]))))
        else:
            raise ValueError(f"unknown layer kind {kind!r} in checkpoint")
    return Model(layers, mode=payload.get("mode", TEST), seed=int(payload.get("seed", 0)))


def save_model(model: Model, path) -> None:
    Path(path).write_text(model_to_json(model))


def load_model(path) -> Model:
    return model_from_json(Path(path).read_text())
