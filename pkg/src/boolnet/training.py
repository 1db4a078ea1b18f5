"""Training: Adam, entropy-driven resampling and layer-wise discretization."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import data as data_mod
from .conv import ConvLayer
from .models import discretized_copy, load_network_state, network_state
from .network import (
    RESAMPLE_ALL,
    RESAMPLE_NON_DOMINANT,
    RESAMPLE_NONE,
    LogicLayer,
    Network,
    cross_entropy_loss,
    entropy_of,
    softmax_weights,
)

log = logging.getLogger(__name__)

DOMINANT_MASS = 0.95
DISPERSED_MASS = 0.4


class TrainingAborted(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 0.01
    batch_size: int = 128
    total_steps: int = 1000
    eval_interval: int = 1000
    rho: float = 0.99
    epsilon: float = 5e-4
    patience: int = 100
    discretize_patience: int = 200
    resample: bool = True
    resample_until: int | None = None
    adaptive_discretization: bool = False
    augment: bool = True
    dataset: str | None = None
    thresholds: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.rho < 1:
            raise ValueError("rho must lie in (0, 1)")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.patience < 1 or self.discretize_patience < 1:
            raise ValueError("patience must be at least 1")

    @property
    def resample_end(self) -> int:
        if not self.resample:
            return 0
        return self.total_steps if self.resample_until is None else self.resample_until


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def drop(self, key):
        self.m.pop(key, None)
        self.v.pop(key, None)

    def reset_rows(self, key, rows):
        if key in self.m and len(rows):
            self.m[key][rows] = 0.0
            self.v[key][rows] = 0.0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float) -> dict:
    """Bias-corrected Adam on every key of ``grads``. Updates ``params`` in
    place and returns it."""
    for key, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingAborted(f"non-finite gradient for parameter {key!r} at step {state.step + 1}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for key, g in grads.items():
        if key not in state.m:
            state.m[key] = np.zeros_like(g)
            state.v[key] = np.zeros_like(g)
        m, v = state.m[key], state.v[key]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[key] -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# controllers
# ---------------------------------------------------------------------------


def stability_update(mu, c, h, rho: float, epsilon: float):
    """One EMA/counter step: the counter grows while the new entropy stays
    within ``epsilon`` of the running mean and resets otherwise; the mean is
    updated afterwards."""
    stable = np.abs(mu - h) <= epsilon
    c = np.where(stable, c + 1, 0)
    mu = rho * mu + (1.0 - rho) * h
    return mu, c


@dataclass
class NeuronController:
    mu: float = 0.0
    c: int = 0


def resampler_observe(w, state: NeuronController, config: TrainConfig) -> int:
    """Observe one neuron after a weight update; returns a RESAMPLE_* action."""
    s = softmax_weights(w)
    h = float(entropy_of(s))
    mu, c = stability_update(state.mu, state.c, h, config.rho, config.epsilon)
    state.mu, state.c = float(mu), int(c)
    if state.c < config.patience:
        return RESAMPLE_NONE
    top = s.max()
    if top >= DOMINANT_MASS:
        action = RESAMPLE_NON_DOMINANT
    elif top <= DISPERSED_MASS:
        action = RESAMPLE_ALL
    else:
        action = RESAMPLE_NONE
    if action != RESAMPLE_NONE:
        state.c = 0
    return action


@dataclass
class LayerResampler:
    """Per-neuron EMA and counter for every unit of one logic layer."""

    mu: np.ndarray
    c: np.ndarray

    @classmethod
    def for_layer(cls, layer: LogicLayer) -> "LayerResampler":
        return cls(np.zeros(layer.units), np.zeros(layer.units, dtype=np.int64))

    def observe(self, w, config: TrainConfig) -> np.ndarray:
        s = softmax_weights(w)
        h = entropy_of(s)
        self.mu, self.c = stability_update(self.mu, self.c, h, config.rho, config.epsilon)
        ready = self.c >= config.patience
        top = s.max(axis=1)
        actions = np.full(len(h), RESAMPLE_NONE, dtype=np.int64)
        actions[ready & (top >= DOMINANT_MASS)] = RESAMPLE_NON_DOMINANT
        actions[ready & (top < DOMINANT_MASS) & (top <= DISPERSED_MASS)] = RESAMPLE_ALL
        self.c[actions != RESAMPLE_NONE] = 0
        return actions


def apply_resample(layer: LogicLayer, actions, rng: np.random.Generator) -> np.ndarray:
    return layer.apply_resample(actions, rng)


@dataclass
class DiscretizerState:
    """Layer-wise EMA/counter; ``eligible`` lists layer indices in the order
    they may be frozen."""

    eligible: list
    mu: dict = field(default_factory=dict)
    c: dict = field(default_factory=dict)
    frozen: list = field(default_factory=list)

    @classmethod
    def for_network(cls, network: Network) -> "DiscretizerState":
        eligible = [i for i, l in enumerate(network.layers) if isinstance(l, ConvLayer)]
        frozen = [i for i in eligible if network.layers[i].frozen]
        return cls(eligible, frozen=frozen)

    def current(self):
        for i in self.eligible:
            if i not in self.frozen:
                return i
        return None


def discretizer_observe(network: Network, state: DiscretizerState, config: TrainConfig):
    """One step of layer-wise freezing; returns the index of a layer frozen
    on this step, else None."""
    l = state.current()
    if l is None:
        return None
    layer = network.layers[l]
    state.mu.setdefault(l, 0.0)
    state.c.setdefault(l, 0)
    h = float(layer.entropies().mean())
    mu, c = stability_update(state.mu[l], state.c[l], h, config.rho, config.epsilon)
    state.mu[l], state.c[l] = float(mu), int(c)
    if state.c[l] >= config.discretize_patience:
        layer.freeze()
        state.frozen.append(l)
        return l
    return None


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


def prepare_inputs(images, network: Network, thresholds: int) -> np.ndarray:
    """Encode float images to bits shaped for the network input."""
    bits = data_mod.encode(images, thresholds)
    return bits.reshape(len(bits), *network.input_shape)


def evaluate(network: Network, inputs, labels, mode: str = "discretized", batch_size: int = 1024) -> float:
    """Accuracy on pre-encoded inputs. ``discretized`` freezes every live
    layer to its argmax triples first."""
    if mode == "discretized":
        net = discretized_copy(network)
    elif mode == "relaxed":
        net = network
    else:
        raise ValueError(f"unknown evaluation mode {mode!r}")
    if len(labels) == 0:
        return float("nan")
    preds = net.predict(np.asarray(inputs, dtype=np.float64), batch_size)
    return float(np.mean(preds == np.asarray(labels)))


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _param_key(i: int) -> str:
    return f"layer{i}.w"


@dataclass
class Trainer:
    """Mutable training state; one instance owns the network during training."""

    network: Network
    config: TrainConfig
    adam: AdamState = field(default_factory=AdamState)
    step: int = 0
    resamplers: dict = field(default_factory=dict)
    discretizer: DiscretizerState | None = None
    rngs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.rngs:
            seq = np.random.SeedSequence(self.config.seed)
            names = ("order", "augment", "resample")
            self.rngs = {n: np.random.default_rng(s) for n, s in zip(names, seq.spawn(len(names)))}
        if not self.resamplers:
            for i, layer in enumerate(self.network.layers):
                if isinstance(layer, LogicLayer) and not layer.frozen:
                    self.resamplers[i] = LayerResampler.for_layer(layer)
        if self.discretizer is None:
            self.discretizer = DiscretizerState.for_network(self.network)

    # one optimization step on an encoded batch
    def train_step(self, x, y) -> dict:
        net = self.network
        logits, tapes = net.forward(x)
        loss, grad = cross_entropy_loss(logits, y)
        if not math.isfinite(loss):
            raise TrainingAborted(f"non-finite loss at step {self.step + 1}")
        grads = net.backward(tapes, grad)
        params = {_param_key(i): net.layers[i].w for i in grads}
        adam_step(params, {_param_key(i): g for i, g in grads.items()}, self.adam, self.config.learning_rate)
        for i in grads:
            net.layers[i].touch()
        self.step += 1
        resampled = 0
        frozen = None
        if self.step <= self.config.resample_end:
            for i, ctl in self.resamplers.items():
                layer = net.layers[i]
                if layer.frozen:
                    continue
                actions = ctl.observe(layer.w, self.config)
                changed = layer.apply_resample(actions, self.rngs["resample"])
                self.adam.reset_rows(_param_key(i), changed)
                resampled += len(changed)
        elif self.config.adaptive_discretization:
            frozen = discretizer_observe(net, self.discretizer, self.config)
            if frozen is not None:
                self.adam.drop(_param_key(frozen))
                self.resamplers.pop(frozen, None)
        correct = int((np.argmax(logits, axis=1) == y).sum())
        return {"loss": loss, "correct": correct, "resampled": resampled, "frozen": frozen}


@dataclass
class TrainResult:
    records: list
    best_step: int
    best_accuracy: float
    best_state: dict
    trainer: Trainer


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    while True:
        perm = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield np.sort(perm[start:start + batch_size])


def train(network: Network, train_set, val_set, config: TrainConfig, on_record=None,
          trainer: Trainer | None = None) -> TrainResult:
    """Run ``config.total_steps`` optimization steps.

    ``train_set``/``val_set`` are :class:`boolnet.data.Dataset` float images.
    Every ``eval_interval`` steps a metrics record is produced and the
    discretized validation accuracy decides the best state so far.
    """
    trainer = trainer or Trainer(network, config)
    net = network
    aug = config.augment and config.dataset is not None
    if not aug:
        train_x = prepare_inputs(train_set.images, net, config.thresholds)
    val_x = prepare_inputs(val_set.images, net, config.thresholds)
    order = _batches(len(train_set), config.batch_size, trainer.rngs["order"])

    records = []
    best = (-1.0, 0, network_state(net))
    window = {"loss": 0.0, "correct": 0, "seen": 0, "resampled": 0}
    while trainer.step < config.total_steps:
        idx = next(order)
        y = train_set.labels[idx]
        if aug:
            imgs = data_mod.augment_batch(train_set.images[idx], config.dataset, trainer.rngs["augment"])
            x = prepare_inputs(imgs, net, config.thresholds)
        else:
            x = train_x[idx]
        out = trainer.train_step(x.astype(np.float64), y)
        window["loss"] += out["loss"] * len(idx)
        window["correct"] += out["correct"]
        window["seen"] += len(idx)
        window["resampled"] += out["resampled"]
        if out["frozen"] is not None:
            log.info("step %d: froze layer %d", trainer.step, out["frozen"])
        if trainer.step % config.eval_interval == 0 or trainer.step == config.total_steps:
            relaxed = evaluate(net, val_x, val_set.labels, "relaxed")
            discrete = evaluate(net, val_x, val_set.labels, "discretized")
            rec = {
                "step": trainer.step,
                "loss": window["loss"] / max(window["seen"], 1),
                "train_acc": window["correct"] / max(window["seen"], 1),
                "relaxed_acc": relaxed,
                "discretized_acc": discrete,
                "gap": relaxed - discrete,
                "entropy": [float(l.entropies().mean()) if not l.frozen else 0.0 for l in net.logic_layers],
                "resampled": window["resampled"],
                "frozen_layers": [i for i, l in enumerate(net.layers) if isinstance(l, LogicLayer) and l.frozen],
                "phase": "resample" if trainer.step <= config.resample_end else
                         ("discretize" if config.adaptive_discretization else "train"),
            }
            records.append(rec)
            if on_record is not None:
                on_record(rec)
            if discrete > best[0]:
                best = (discrete, trainer.step, network_state(net))
            window = {"loss": 0.0, "correct": 0, "seen": 0, "resampled": 0}
    return TrainResult(records, best[1], best[0], best[2], trainer)


def restore_best(network: Network, result: TrainResult) -> Network:
    load_network_state(network, result.best_state)
    return network


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
