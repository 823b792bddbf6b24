"""Network architectures and per-component Lipschitz constants.

Two kinds of network are built from dense components:

* ``generic-mlp``: flattens the M x b input, ReLU hidden layers, softmax head.
* ``patchwise``: one shared extractor applied to every patch independently,
  a bias-free per-patch classifier ``w_C`` and a modified-softmax head (or
  average pooling followed by a standard softmax).

Weights are stored in operator orientation (out x in), so the 1-norm-induced
operator norm of a component is its maximum absolute column sum.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .rng import substream
from .tensor import Parameter, ShapeError, Tensor

KINDS = ("generic-mlp", "patchwise")
HEADS = ("standard-softmax", "modified-softmax")


def log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.exp(log_softmax_np(x, axis))


def modified_softmax(logits: np.ndarray) -> np.ndarray:
    """exp(mean_m h_m) / (prod_m sum_k exp h_{m,k})^(1/M), evaluated in log space.

    ``logits`` is (M, K) or batched (..., M, K).  Equal to the elementwise
    geometric mean of the per-patch softmax vectors; the result generally sums
    to less than one.
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim < 2:
        raise ShapeError(f"modified_softmax expects (..., M, K), got {logits.shape}")
    return np.exp(log_softmax_np(logits, axis=-1).mean(axis=-2))


@dataclass
class Dense:
    name: str
    weight: Parameter
    bias: Parameter | None


@dataclass
class Network:
    kind: str
    head: str
    n_patches: int
    patch_dim: int
    hidden: tuple[int, ...]
    n_classes: int
    feature_dim: int | None = None
    layers: list[Dense] = field(default_factory=list)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown network kind {self.kind!r}")
        if self.head not in HEADS:
            raise ValueError(f"unknown head {self.head!r}")
        if self.kind == "generic-mlp" and self.head != "standard-softmax":
            raise ValueError("generic-mlp networks use the standard softmax head")
        if self.kind == "patchwise" and not self.feature_dim:
            raise ValueError("patchwise networks need feature_dim")
        self.hidden = tuple(int(h) for h in self.hidden)

    # -- construction -----------------------------------------------------
    def layer_shapes(self) -> list[tuple[str, int, int, bool]]:
        """(name, fan_in, fan_out, has_bias) for every dense component, in order."""
        if self.kind == "generic-mlp":
            dims = [self.n_patches * self.patch_dim, *self.hidden, self.n_classes]
            return [(f"fc{i}", a, b, True) for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        dims = [self.patch_dim, *self.hidden, self.feature_dim]
        shapes = [(f"extractor{i}", a, b, True) for i, (a, b) in enumerate(zip(dims, dims[1:]))]
        return shapes + [("classifier", self.feature_dim, self.n_classes, False)]

    @property
    def params(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out

    def param_dict(self) -> dict[str, Parameter]:
        return {p.name: p for p in self.params}

    def architecture(self) -> dict:
        return {"kind": self.kind, "head": self.head, "n_patches": self.n_patches,
                "patch_dim": self.patch_dim, "hidden": list(self.hidden),
                "n_classes": self.n_classes, "feature_dim": self.feature_dim}

    # -- graph construction ----------------------------------------------
    def _dense(self, h: Tensor, layer: Dense) -> Tensor:
        out = T.matmul(h, T.transpose(layer.weight.tensor))
        return out if layer.bias is None else T.add(out, layer.bias.tensor)

    def _check_input(self, x: np.ndarray | Tensor) -> Tensor:
        x = T.as_tensor(x)
        if x.data.ndim != 3 or x.shape[1:] != (self.n_patches, self.patch_dim):
            raise ShapeError(f"input shape {x.shape} does not match "
                             f"(batch, {self.n_patches}, {self.patch_dim})")
        return x

    def patch_logits(self, x) -> Tensor:
        """Per-patch classifier outputs, (B, M, K); patchwise networks only."""
        if self.kind != "patchwise":
            raise ValueError("patch_logits is defined for patchwise networks")
        x = self._check_input(x)
        bsz = x.shape[0]
        h = T.reshape(x, (bsz * self.n_patches, self.patch_dim))
        for layer in self.layers[:-2]:
            h = T.relu(self._dense(h, layer))
        h = self._dense(h, self.layers[-2])
        out = self._dense(h, self.layers[-1])
        return T.reshape(out, (bsz, self.n_patches, self.n_classes))

    def log_output(self, x) -> Tensor:
        """log f(x) as used by the training loss.

        For the modified-softmax head this is the unnormalized
        ``mean_m log_softmax(h_m)``, so ``exp`` of it may sum to less than one.
        """
        if self.kind == "generic-mlp" or self.head == "standard-softmax":
            return T.log_softmax(self.logits(x), axis=-1)
        return T.mean(T.log_softmax(self.patch_logits(x), axis=-1), axis=1)

    def logits(self, x) -> Tensor:
        """Logits whose softmax is the (renormalized) prediction."""
        if self.kind == "generic-mlp":
            x = self._check_input(x)
            h = T.reshape(x, (x.shape[0], self.n_patches * self.patch_dim))
            for layer in self.layers[:-1]:
                h = T.relu(self._dense(h, layer))
            return self._dense(h, self.layers[-1])
        if self.head == "standard-softmax":
            return T.mean(self.patch_logits(x), axis=1)
        return T.mean(T.log_softmax(self.patch_logits(x), axis=-1), axis=1)

    def extract(self, x: np.ndarray) -> np.ndarray:
        """Feature maps h_m of a patchwise network, (B, M, d)."""
        x = self._check_input(x)
        h = x.data.reshape(-1, self.patch_dim)
        for layer in self.layers[:-2]:
            h = np.maximum(h @ layer.weight.data.T + layer.bias.data, 0.0)
        last = self.layers[-2]
        h = h @ last.weight.data.T + last.bias.data
        return h.reshape(x.shape[0], self.n_patches, -1)

    # -- parameter snapshots ----------------------------------------------
    def state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.params}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for p in self.params:
            if p.name not in state:
                raise KeyError(f"state is missing parameter {p.name!r}")
            arr = np.asarray(state[p.name], dtype=np.float64)
            if arr.shape != p.data.shape:
                raise ShapeError(f"parameter {p.name!r}: shape {arr.shape} != {p.data.shape}")
            p.tensor.data = arr.copy()
            p.momentum_state = np.zeros_like(arr)

    def copy(self) -> "Network":
        net = build_network(seed=self.seed, **self.architecture())
        net.load_state(self.state())
        return net


def build_network(kind: str, n_patches: int, patch_dim: int, n_classes: int,
                  hidden: Sequence[int] = (), head: str | None = None,
                  feature_dim: int | None = None, seed: int = 0) -> Network:
    """Glorot-uniform weights from the "init" sub-stream; zero biases."""
    if head is None:
        head = "modified-softmax" if kind == "patchwise" else "standard-softmax"
    net = Network(kind, head, n_patches, patch_dim, tuple(hidden), n_classes, feature_dim, seed=seed)
    rng = substream(seed, "init")
    for name, fan_in, fan_out, has_bias in net.layer_shapes():
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        w = Parameter.from_array(f"{name}.weight", rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        b = Parameter.from_array(f"{name}.bias", np.zeros(fan_out)) if has_bias else None
        net.layers.append(Dense(name, w, b))
    return net


def predict(net: Network, x: np.ndarray, normalize: bool = False,
            return_logits: bool = False):
    """Class probabilities for a batch (B, M, b) or a single input (M, b).

    Patchwise modified-softmax outputs are returned raw unless ``normalize``.
    """
    single = np.ndim(x) == 2
    xb = np.asarray(x, dtype=np.float64)[None] if single else np.asarray(x, dtype=np.float64)
    logits = net.logits(xb).data
    if net.kind == "patchwise" and net.head == "modified-softmax" and not normalize:
        probs = np.exp(logits)
    else:
        probs = softmax_np(logits)
    if single:
        probs, logits = probs[0], logits[0]
    return (probs, logits) if return_logits else probs


def predict_batched(net: Network, x: np.ndarray, batch_size: int = 4096, normalize: bool = True,
                    return_logits: bool = False):
    parts = [predict(net, x[i:i + batch_size], normalize=normalize, return_logits=True)
             for i in range(0, len(x), batch_size)]
    probs = np.concatenate([p for p, _ in parts])
    logits = np.concatenate([l for _, l in parts])
    return (probs, logits) if return_logits else probs


# --- Lipschitz constants ----------------------------------------------------

@dataclass
class LipschitzReport:
    per_component: dict[str, float]

    @property
    def total(self) -> float:
        return float(sum(self.per_component.values()))


def lipschitz_bound(weight: np.ndarray) -> float:
    """1-norm-induced operator norm: the maximum absolute column sum."""
    w = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    return float(np.abs(w).sum(axis=0).max()) if w.size else 0.0


def lipschitz_report(net: Network) -> LipschitzReport:
    return LipschitzReport({layer.name: lipschitz_bound(layer.weight.data) for layer in net.layers})


def lipschitz_penalty(net: Network) -> tuple[float, dict[str, np.ndarray]]:
    """Sum of component bounds and its subgradient.

    The subgradient of one component is ``sign(W[:, j*])`` on the maximizing
    column ``j*`` (lowest index on ties) and zero elsewhere; biases get zero.
    """
    value = 0.0
    grads = {p.name: np.zeros_like(p.data) for p in net.params}
    for layer in net.layers:
        w = layer.weight.data
        colsum = np.abs(w).sum(axis=0)
        j = int(np.argmax(colsum))
        value += float(colsum[j])
        grads[layer.weight.name][:, j] = np.sign(w[:, j])
    return value, grads


def lipschitz_penalty_graph(net: Network) -> Tensor:
    """The same penalty as a differentiable graph node (sum, abs, max-reduction)."""
    terms = [T.max(T.sum(T.absolute(layer.weight.tensor), axis=0)) for layer in net.layers]
    total = terms[0]
    for t in terms[1:]:
        total = T.add(total, t)
    return total


def extractor_lipschitz(net: Network) -> float:
    """Product of per-layer 1-norm bounds over the extractor (ReLU is 1-Lipschitz)."""
    if net.kind != "patchwise":
        raise ValueError("extractor_lipschitz is defined for patchwise networks")
    out = 1.0
    for layer in net.layers[:-1]:
        out *= lipschitz_bound(layer.weight.data)
    return out


# --- checkpoints -------------------------------------------------------------

def config_hash(config: dict | None) -> str:
    payload = json.dumps(config or {}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_checkpoint(net: Network, out_dir, *, epoch: int, config: dict | None = None,
                    extra_arrays: dict[str, np.ndarray] | None = None) -> Path:
    """manifest.json + one little-endian float64 file per parameter."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    params = {}
    for p in net.params:
        fname = f"{p.name}.f64"
        (out / fname).write_bytes(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        params[p.name] = {"file": fname, "shape": list(p.data.shape)}
    extras = {}
    for key, arr in (extra_arrays or {}).items():
        dtype = "<i8" if np.issubdtype(np.asarray(arr).dtype, np.integer) else "<f8"
        fname = f"{key}.bin"
        (out / fname).write_bytes(np.ascontiguousarray(arr, dtype=dtype).tobytes())
        extras[key] = {"file": fname, "shape": list(np.shape(arr)), "dtype": dtype}
    manifest = {"format": "distlab-checkpoint/1", "architecture": net.architecture(),
                "epoch": int(epoch), "seed": int(net.seed), "config_hash": config_hash(config),
                "parameters": params, "extras": extras}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(in_dir) -> tuple[Network, dict]:
    """Returns (network, manifest); manifest["extras_data"] holds any extra arrays."""
    src = Path(in_dir)
    mpath = src / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {mpath}")
    manifest = json.loads(mpath.read_text())
    arch = manifest["architecture"]
    net = build_network(seed=int(manifest["seed"]), **arch)
    state = {name: np.frombuffer((src / meta["file"]).read_bytes(), dtype="<f8").reshape(meta["shape"])
             for name, meta in manifest["parameters"].items()}
    net.load_state(state)
    manifest["extras_data"] = {
        key: np.frombuffer((src / meta["file"]).read_bytes(), dtype=meta["dtype"]).reshape(meta["shape"]).copy()
        for key, meta in manifest.get("extras", {}).items()}
    return net, manifest
