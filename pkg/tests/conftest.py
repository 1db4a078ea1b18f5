import gzip
import struct

import numpy as np
import pytest

from boolnet.network import DenseLayer, GroupSum, Network


def write_idx(path, array, magic, compress=False):
    array = np.asarray(array, dtype=np.uint8)
    header = struct.pack(">I", magic) + struct.pack(f">{array.ndim}I", *array.shape)
    raw = header + array.tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as f:
        f.write(raw)


def synthetic_mnist(root, n_train=300, n_test=100, seed=0):
    """Tiny IDX files whose label is readable from the image: class c lights
    up a 4x4 block at a class-specific position."""
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)

    def make(n):
        labels = rng.integers(0, 10, size=n).astype(np.uint8)
        imgs = (rng.random((n, 28, 28)) < 0.05).astype(np.uint8) * 255
        for i, c in enumerate(labels):
            r, col = divmod(int(c), 5)
            imgs[i, 4 + 10 * r:8 + 10 * r, 2 + 5 * col:6 + 5 * col] = 255
        return imgs, labels

    for split, n in (("train", n_train), ("t10k", n_test)):
        imgs, labels = make(n)
        write_idx(root / f"{split}-images-idx3-ubyte", imgs, 0x803)
        write_idx(root / f"{split}-labels-idx1-ubyte", labels, 0x801)
    return root


def random_frozen_network(rng, n_inputs, widths, num_classes, tau=1.0):
    """Dense network with every layer already discretized to uniformly random
    gates and connections."""
    layers = []
    d_in = n_inputs
    for d_out in widths:
        layer = DenseLayer(d_in, d_out, K=1)
        layer.frozen = True
        layer.frozen_choice = (
            rng.integers(1, 17, size=d_out),
            rng.integers(0, d_in, size=d_out),
            rng.integers(0, d_in, size=d_out),
        )
        layer.w = layer.k = layer.p = layer.q = None
        layers.append(layer)
        d_in = d_out
    layers.append(GroupSum(d_in, num_classes, tau))
    return Network((n_inputs,), layers)


def random_live_dense(rng, d_in, d_out, K):
    layer = DenseLayer(d_in, d_out, K)
    layer.k = rng.integers(1, 17, size=(d_out, K))
    layer.p = rng.integers(0, d_in, size=(d_out, K))
    layer.q = rng.integers(0, d_in, size=(d_out, K))
    layer.w = rng.standard_normal((d_out, K))
    return layer


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
