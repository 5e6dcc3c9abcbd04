"""A small differentiable token classifier used to produce desk-scale checkpoints.

Architecture: token embedding, mean-pool over the context, a stack of
linear+tanh layers, and a linear output head over the whole vocabulary.
Parameters follow the ``layer.<index>.<role>`` naming convention::

    layer.0.embed            [vocab, d0]
    layer.i.weight, .bias    [d_i, d_{i-1}], [d_i]     for 1 <= i < L
    layer.L.weight, .bias    [vocab, d_{L-1}], [vocab] (output head, no tanh)

All arithmetic runs in float64; checkpoints are stored as float32.
"""

from __future__ import annotations

import json
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensors import KINDS, ParamSet, assert_compatible


@dataclass(frozen=True)
class RefModelConfig:
    vocab_size: int
    context_len: int
    hidden_dims: tuple[int, ...]
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))
        if self.vocab_size < 1 or self.context_len < 1 or not self.hidden_dims or min(self.hidden_dims) < 1:
            raise ValueError(f"all model dimensions must be >= 1: {self}")

    @property
    def n_layers(self) -> int:
        """Number of linear layers, output head included."""
        return len(self.hidden_dims)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        dims = self.hidden_dims
        shapes = {"layer.0.embed": (self.vocab_size, dims[0])}
        for i in range(1, len(dims)):
            shapes[f"layer.{i}.weight"] = (dims[i], dims[i - 1])
            shapes[f"layer.{i}.bias"] = (dims[i],)
        head = len(dims)
        shapes[f"layer.{head}.weight"] = (self.vocab_size, dims[-1])
        shapes[f"layer.{head}.bias"] = (self.vocab_size,)
        return shapes

    def linear_layers(self) -> list[str]:
        return [f"layer.{i}.weight" for i in range(1, self.n_layers + 1)]

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RefModelConfig":
        return cls(**json.loads(text))


@dataclass
class Batch:
    inputs: np.ndarray  # [batch, context_len] token ids
    targets: np.ndarray  # [batch] token ids

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.int64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.inputs.ndim != 2 or self.targets.shape != (self.inputs.shape[0],):
            raise ValueError(f"bad batch shapes: inputs {self.inputs.shape}, targets {self.targets.shape}")

    def __len__(self):
        return len(self.targets)

    def __getitem__(self, idx) -> "Batch":
        idx = np.atleast_1d(np.arange(len(self))[idx])
        return Batch(self.inputs[idx], self.targets[idx])

    @classmethod
    def concat(cls, batches: Sequence["Batch"]) -> "Batch":
        return cls(np.concatenate([b.inputs for b in batches]), np.concatenate([b.targets for b in batches]))

    def check(self, cfg: RefModelConfig) -> None:
        if self.inputs.shape[1] != cfg.context_len:
            raise ValueError(f"context length {self.inputs.shape[1]} != {cfg.context_len}")
        for arr in (self.inputs, self.targets):
            if arr.size and (arr.min() < 0 or arr.max() >= cfg.vocab_size):
                raise ValueError(f"token id out of range [0, {cfg.vocab_size})")


@dataclass
class CalibRecord:
    """Inputs seen by one linear layer, one row per sample."""

    layer_name: str
    activations: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.activations = np.asarray(self.activations, dtype=np.float64)
        if self.activations.ndim != 2 or self.activations.shape[0] < 1:
            raise ValueError(f"calibration activations for {self.layer_name!r} must be [n>=1, fan_in]")

    @property
    def n_samples(self) -> int:
        return self.activations.shape[0]


class CalibSet(ParamSet):
    kind = "calib"

    def __init__(self, entries=None, metadata=None):
        super().__init__(entries, {**(metadata or {}), "kind": self.kind})

    def records(self) -> list[CalibRecord]:
        return [CalibRecord(n, a) for n, a in self.items()]


KINDS["calib"] = CalibSet


def calib_to_paramset(records: Sequence[CalibRecord]) -> CalibSet:
    return CalibSet({r.layer_name: r.activations for r in records})


def init_params(cfg: RefModelConfig, scale: float = 1.0) -> ParamSet:
    rng = np.random.default_rng(cfg.seed)
    out = {}
    for name, shape in cfg.shapes().items():
        if name.endswith(".bias"):
            out[name] = np.zeros(shape, np.float32)
        else:
            fan_in = shape[1]
            out[name] = (rng.standard_normal(shape) * scale / np.sqrt(fan_in)).astype(np.float32)
    return ParamSet(out, {"refmodel_config": cfg.to_json()})


def zeros_params(cfg: RefModelConfig) -> ParamSet:
    return ParamSet({n: np.zeros(s, np.float32) for n, s in cfg.shapes().items()}, {"refmodel_config": cfg.to_json()})


def config_of(model: ParamSet) -> RefModelConfig:
    try:
        return RefModelConfig.from_json(model.metadata["refmodel_config"])
    except KeyError:
        raise ValueError("checkpoint carries no refmodel_config metadata") from None


def _check_model(model: Mapping[str, np.ndarray], cfg: RefModelConfig) -> None:
    assert_compatible({n: np.empty(s) for n, s in cfg.shapes().items()}, model)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward(params: Mapping[str, np.ndarray], cfg: RefModelConfig, inputs: np.ndarray):
    """Returns logits and the per-layer (input, output-activation) cache."""
    emb = np.asarray(params["layer.0.embed"], np.float64)
    h = emb[inputs].mean(axis=1)
    cache = []
    head = cfg.n_layers
    for i in range(1, head + 1):
        w = np.asarray(params[f"layer.{i}.weight"], np.float64)
        b = np.asarray(params[f"layer.{i}.bias"], np.float64)
        z = h @ w.T + b
        out = z if i == head else np.tanh(z)
        cache.append((h, out))
        h = out
    return h, cache


def forward(model: Mapping[str, np.ndarray], cfg: RefModelConfig, batch: Batch, capture: bool = False):
    """Logits ``[batch, vocab]`` and, when ``capture`` is set, one CalibRecord per linear layer."""
    _check_model(model, cfg)
    batch.check(cfg)
    logits, cache = _forward(model, cfg, batch.inputs)
    records = []
    if capture:
        records = [CalibRecord(name, cache[i][0].copy()) for i, name in enumerate(cfg.linear_layers())]
    return logits, records


def loss_and_grads(model: Mapping[str, np.ndarray], cfg: RefModelConfig, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """Mean negative log-likelihood of the targets and its exact gradient."""
    _check_model(model, cfg)
    batch.check(cfg)
    return _loss_and_grads(model, cfg, batch.inputs, batch.targets)


def _loss_and_grads(model, cfg, inputs, targets):
    n = len(targets)
    logits, cache = _forward(model, cfg, inputs)
    z = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(logz - z[np.arange(n), targets]))

    grads = {}
    g = np.exp(z - logz[:, None])
    g[np.arange(n), targets] -= 1.0
    g /= n
    head = cfg.n_layers
    for i in range(head, 0, -1):
        h_in, out = cache[i - 1]
        if i != head:
            g = g * (1.0 - out * out)
        w = np.asarray(model[f"layer.{i}.weight"], np.float64)
        grads[f"layer.{i}.weight"] = g.T @ h_in
        grads[f"layer.{i}.bias"] = g.sum(axis=0)
        g = g @ w
    demb = np.zeros((cfg.vocab_size, cfg.hidden_dims[0]))
    ctx = inputs.shape[1]
    np.add.at(demb, inputs.reshape(-1), np.repeat(g / ctx, ctx, axis=0))
    grads["layer.0.embed"] = demb
    return loss, grads


def train(
    model: ParamSet,
    cfg: RefModelConfig,
    dataset: Batch,
    lr: float,
    epochs: int,
    seed: int,
    batch_size: int = 32,
    log: list | None = None,
) -> ParamSet:
    """Plain minibatch SGD. Deterministic given ``seed``; per-epoch mean loss is appended to ``log``."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    _check_model(model, cfg)
    dataset.check(cfg)
    if epochs == 0:
        return model
    rng = np.random.default_rng(seed)
    params = {n: np.asarray(model[n], np.float64).copy() for n in model}
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = _loss_and_grads(params, cfg, dataset.inputs[idx], dataset.targets[idx])
            total += loss * len(idx)
            for k, g in grads.items():
                params[k] -= lr * g
        if log is not None:
            log.append(total / n)
    out = {k: v.astype(np.float32) for k, v in params.items()}
    return ParamSet(out, {**model.metadata, "refmodel_config": cfg.to_json()})


def predict(model: Mapping[str, np.ndarray], cfg: RefModelConfig, batch: Batch) -> np.ndarray:
    logits, _ = forward(model, cfg, batch)
    return logits.argmax(axis=1)


def eval_suite(model, cfg: RefModelConfig, safety_set: Batch, task_set: Batch, refuse_token: int) -> tuple[float, float]:
    """Refusal rate on harmful prompts and argmax accuracy on the task set."""
    refusal = float(np.mean(predict(model, cfg, safety_set) == refuse_token)) if len(safety_set) else 0.0
    accuracy = float(np.mean(predict(model, cfg, task_set) == task_set.targets)) if len(task_set) else 0.0
    return refusal, accuracy


def capture_calibration(model, cfg: RefModelConfig, batch: Batch) -> list[CalibRecord]:
    _, records = forward(model, cfg, batch, capture=True)
    return records


def read_dataset(path) -> Batch:
    """Parse newline-delimited ``tok,tok,...,tok<TAB>target`` records."""
    inputs, targets = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                toks, target = line.split("\t")
                inputs.append([int(t) for t in toks.split(",")])
                targets.append(int(target))
            except ValueError:
                raise ValueError(f"{path}:{lineno}: expected 'tok,...,tok<TAB>target'") from None
    if len({len(r) for r in inputs}) > 1:
        raise ValueError(f"{path}: records have differing context lengths")
    if not inputs:
        return Batch(np.zeros((0, 1), np.int64), np.zeros(0, np.int64))
    return Batch(np.array(inputs), np.array(targets))


def write_dataset(batch: Batch, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row, t in zip(batch.inputs, batch.targets):
            fh.write(",".join(str(int(x)) for x in row) + f"\t{int(t)}\n")
