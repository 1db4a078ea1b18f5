"""Checkpoint files: one ``.npz`` archive holding every array plus a JSON
metadata record under the key ``__meta__``."""

from __future__ import annotations

import json

import numpy as np

from .models import describe, network_state, restore_network
from .network import Network
from .training import AdamState, DiscretizerState, LayerResampler, TrainConfig, Trainer

FORMAT = "boolnet-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _rng_state(rng: np.random.Generator) -> dict:
    return rng.bit_generator.state


def _rng_from_state(state: dict) -> np.random.Generator:
    bitgen = getattr(np.random, state["bit_generator"])()
    bitgen.state = state
    return np.random.Generator(bitgen)


def save_checkpoint(path, network: Network, trainer: Trainer | None = None, extra: dict | None = None):
    arrays = {f"net/{k}": v for k, v in network_state(network).items()}
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "input_shape": list(network.input_shape),
        "layers": describe(network),
        "extra": extra or {},
    }
    if trainer is not None:
        a = trainer.adam
        for k in a.m:
            arrays[f"adam_m/{k}"] = a.m[k]
            arrays[f"adam_v/{k}"] = a.v[k]
        for i, ctl in trainer.resamplers.items():
            arrays[f"resampler_mu/{i}"] = ctl.mu
            arrays[f"resampler_c/{i}"] = ctl.c
        d = trainer.discretizer
        meta["trainer"] = {
            "step": trainer.step,
            "config": trainer.config.__dict__,
            "adam": {"beta1": a.beta1, "beta2": a.beta2, "eps": a.eps, "step": a.step},
            "discretizer": {"eligible": d.eligible, "frozen": d.frozen,
                            "mu": {str(k): v for k, v in d.mu.items()},
                            "c": {str(k): v for k, v in d.c.items()}},
            "rngs": {name: _rng_state(r) for name, r in trainer.rngs.items()},
        }
    arrays["__meta__"] = np.frombuffer(json.dumps(meta).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez(f, **arrays)


def load_checkpoint(path) -> tuple[Network, Trainer | None, dict]:
    """Returns ``(network, trainer or None, extra metadata)``."""
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path} is not a boolnet checkpoint")
    meta = json.loads(arrays.pop("__meta__").tobytes().decode("utf-8"))
    if meta.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a boolnet checkpoint")
    if meta.get("version") != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {meta.get('version')}")
    net_state = {k[4:]: v for k, v in arrays.items() if k.startswith("net/")}
    network = restore_network(tuple(meta["input_shape"]), meta["layers"], net_state)
    trainer = None
    t = meta.get("trainer")
    if t is not None:
        adam = AdamState(t["adam"]["beta1"], t["adam"]["beta2"], t["adam"]["eps"], t["adam"]["step"])
        for k, v in arrays.items():
            if k.startswith("adam_m/"):
                adam.m[k[7:]] = v.copy()
            elif k.startswith("adam_v/"):
                adam.v[k[7:]] = v.copy()
        resamplers = {}
        for k, v in arrays.items():
            if k.startswith("resampler_mu/"):
                i = int(k.split("/")[1])
                resamplers[i] = LayerResampler(v.copy(), arrays[f"resampler_c/{i}"].copy())
        d = t["discretizer"]
        disc = DiscretizerState(list(d["eligible"]), {int(k): v for k, v in d["mu"].items()},
                                {int(k): v for k, v in d["c"].items()}, list(d["frozen"]))
        trainer = Trainer(network, TrainConfig(**t["config"]), adam, t["step"], resamplers, disc,
                          {name: _rng_from_state(s) for name, s in t["rngs"].items()})
    return network, trainer, meta.get("extra", {})
