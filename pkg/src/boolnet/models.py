"""Architecture builders, named presets and (de)serialization of topologies."""

from __future__ import annotations

import copy

import numpy as np

from .conv import ConvLayer, ConvSpec
from .network import DenseLayer, Flatten, GroupSum, LogicLayer, Network

DATASET_SHAPES = {"mnist": (1, 28, 28), "cifar10": (3, 32, 32)}


def conv_architecture(dataset: str, k: int, thresholds: int, tau: float, K: int = 16,
                      channels_per_kernel: int = 1, num_classes: int = 10) -> list[dict]:
    """Four 3x3 conv layers (strides 2, 1, 2, 1; widths k, k, 4k, 4k), two
    logic layers of width 625k, and a 10-way GroupSum."""
    c, h, w = DATASET_SHAPES[dataset]
    layers = []
    shape = (c * thresholds, h, w)
    for out, stride in ((k, 2), (k, 1), (4 * k, 2), (4 * k, 1)):
        spec = ConvSpec(shape[0], out, shape[1], shape[2], stride,
                        min(channels_per_kernel, shape[0]))
        layers.append({"type": "conv", "in_channels": spec.in_channels, "out_channels": out,
                       "height": spec.height, "width": spec.width, "stride": stride,
                       "channels_per_kernel": spec.channels_per_kernel, "K": K})
        shape = (out, spec.out_height, spec.out_width)
    layers.append({"type": "flatten"})
    width = int(np.prod(shape))
    for _ in range(2):
        layers.append({"type": "dense", "d_in": width, "d_out": 625 * k, "K": K})
        width = 625 * k
    layers.append({"type": "groupsum", "num_classes": num_classes, "tau": tau})
    return layers


def dense_architecture(dataset: str, widths, thresholds: int, tau: float, K: int = 16,
                       num_classes: int = 10) -> list[dict]:
    c, h, w = DATASET_SHAPES[dataset]
    width = c * thresholds * h * w
    layers = []
    for d_out in widths:
        layers.append({"type": "dense", "d_in": width, "d_out": int(d_out), "K": K})
        width = int(d_out)
    layers.append({"type": "groupsum", "num_classes": num_classes, "tau": tau})
    return layers


def input_shape_for(dataset: str, thresholds: int, layers: list[dict]) -> tuple:
    c, h, w = DATASET_SHAPES[dataset]
    if layers and layers[0]["type"] == "conv":
        return (c * thresholds, h, w)
    return (c * thresholds * h * w,)


def build_network(input_shape, layers: list[dict], rng: np.random.Generator | None = None,
                  init: str | None = None) -> Network:
    """Instantiate a network from layer descriptors.

    With ``rng`` given, connections and weights are initialized: dense layers
    get coverage-guaranteeing connections, conv layers round-robin channels
    and uniform receptive-field pairs; weights follow ``init`` (default
    residual for conv layers and gaussian for dense ones).
    """
    built = []
    shape = tuple(input_shape)
    for d in layers:
        t = d["type"]
        if t == "conv":
            spec = ConvSpec(d["in_channels"], d["out_channels"], d["height"], d["width"],
                            d.get("stride", 1), d.get("channels_per_kernel", 1))
            if rng is not None:
                layer = ConvLayer.build(spec, d.get("K", 16), rng, init or "residual")
            else:
                layer = ConvLayer(spec, d.get("K", 16), d.get("channel_map"))
        elif t == "dense":
            d_in = d.get("d_in", int(np.prod(shape)))
            layer = DenseLayer(d_in, d["d_out"], d.get("K", 16))
            if rng is not None:
                layer.init_connections(rng)
                layer.init_weights(init or "gaussian", rng)
        elif t == "flatten":
            layer = Flatten(shape)
        elif t == "groupsum":
            layer = GroupSum(int(np.prod(shape)), d["num_classes"], d["tau"])
        else:
            raise ValueError(f"unknown layer type {t!r}")
        built.append(layer)
        shape = tuple(layer.out_shape)
    return Network(input_shape, built)


def describe(network: Network) -> list[dict]:
    out = []
    for layer in network.layers:
        if isinstance(layer, ConvLayer):
            s = layer.spec
            out.append({"type": "conv", "in_channels": s.in_channels, "out_channels": s.out_channels,
                        "height": s.height, "width": s.width, "stride": s.stride,
                        "channels_per_kernel": s.channels_per_kernel, "K": layer.K})
        elif isinstance(layer, DenseLayer):
            out.append({"type": "dense", "d_in": layer.d_in, "d_out": layer.d_out, "K": layer.K})
        elif isinstance(layer, Flatten):
            out.append({"type": "flatten"})
        elif isinstance(layer, GroupSum):
            out.append({"type": "groupsum", "num_classes": layer.num_classes, "tau": layer.tau})
    return out


def network_state(network: Network) -> dict[str, np.ndarray]:
    """All per-layer arrays, keyed ``"<layer>.<field>"``."""
    state = {}
    for i, layer in enumerate(network.layers):
        if isinstance(layer, LogicLayer):
            for key, arr in layer.state().items():
                state[f"{i}.{key}"] = np.array(arr, copy=True)
        if isinstance(layer, ConvLayer):
            state[f"{i}.channel_map"] = layer.channel_map.copy()
    return state


def load_network_state(network: Network, state: dict[str, np.ndarray]):
    for i, layer in enumerate(network.layers):
        if not isinstance(layer, LogicLayer):
            continue
        prefix = f"{i}."
        fields = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
        if isinstance(layer, ConvLayer) and "channel_map" in fields:
            cmap = np.asarray(fields.pop("channel_map"), dtype=np.int64)
            if not np.array_equal(cmap, layer.channel_map):
                layer.channel_map = cmap
                layer._field = layer._field_table()
        layer.load_state(fields)


def restore_network(input_shape, layers: list[dict], state: dict[str, np.ndarray]) -> Network:
    layers = copy.deepcopy(layers)
    for i, d in enumerate(layers):
        if d["type"] == "conv" and f"{i}.channel_map" in state:
            d["channel_map"] = state[f"{i}.channel_map"]
    net = build_network(input_shape, layers)
    load_network_state(net, state)
    return net


def discretized_copy(network: Network) -> Network:
    """Copy with every logic layer frozen to its argmax triples."""
    net = copy.deepcopy(network)
    for layer in net.logic_layers:
        layer.freeze()
    return net


# ---------------------------------------------------------------------------
# presets
# ---------------------------------------------------------------------------

_CONV_SCHEDULE = {"learning_rate": 0.02, "batch_size": 128, "total_steps": 600_000,
                  "eval_interval": 2000, "resample_until": 400_000,
                  "adaptive_discretization": True, "discretize_patience": 200, "init": "residual"}
_DENSE_SCHEDULE = {"learning_rate": 0.01, "batch_size": 128, "total_steps": 300_000,
                   "eval_interval": 1000, "adaptive_discretization": False, "init": "gaussian"}


def _conv(dataset, k, thresholds, tau, patience, **extra):
    return {"dataset": dataset, "arch": "conv", "k": k, "thresholds": thresholds, "tau": tau,
            "patience": patience, **_CONV_SCHEDULE, **extra}


def _dense(dataset, widths, thresholds, tau, patience, **extra):
    return {"dataset": dataset, "arch": "dense", "widths": list(widths), "thresholds": thresholds,
            "tau": tau, "patience": patience, **_DENSE_SCHEDULE, **extra}


PRESETS = {
    "mnist-conv-S": _conv("mnist", 128, 1, 40, 100),
    "mnist-conv-M": _conv("mnist", 256, 1, 63, 100),
    "cifar-conv-T": _conv("cifar10", 64, 3, 20, 100),
    "cifar-conv-S": _conv("cifar10", 128, 3, 40, 100),
    "cifar-conv-M": _conv("cifar10", 256, 7, 63, 100),
    "cifar-conv-L": _conv("cifar10", 1024, 31, 160, 15000, total_steps=700_000, resample_until=500_000),
    "dense-mnist-small": _dense("mnist", [8000] * 6, 1, 10, 100),
    "dense-mnist-medium": _dense("mnist", [64000] * 6, 1, 45, 1000),
    "dense-cifar-small": _dense("cifar10", [12000] * 4, 3, 33, 100),
    "dense-cifar-medium": _dense("cifar10", [128000] * 4, 3, 100, 500),
    "dense-cifar-large": _dense("cifar10", [256000] * 5, 3, 100, 1000),
    # reduced-size settings used by the acceptance checks
    "dense-mnist-desk": _dense("mnist", [4000] * 4, 1, 10, 100, total_steps=50_000),
    "cifar-conv-desk": _conv("cifar10", 32, 3, 20, 100, total_steps=60_000, resample_until=40_000),
}


def architecture_from_run(run: dict) -> tuple[tuple, list[dict]]:
    """(input_shape, layer descriptors) for a resolved run configuration."""
    dataset, N, tau, K = run["dataset"], run["thresholds"], run["tau"], run.get("K", 16)
    if run.get("layers"):
        layers = run["layers"]
    elif run["arch"] == "conv":
        layers = conv_architecture(dataset, run["k"], N, tau, K, run.get("channels_per_kernel", 1))
    elif run["arch"] == "dense":
        layers = dense_architecture(dataset, run["widths"], N, tau, K)
    else:
        raise ValueError(f"unknown architecture {run['arch']!r}")
    return input_shape_for(dataset, N, layers), layers
