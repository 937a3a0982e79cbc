"""A one-hidden-layer ReLU network in numpy with exact reverse-mode
gradients and an Adam optimiser.

Inputs and outputs are standardised with statistics stored on the model:
``predict(x) = y_mean + y_std * forward((x - x_mean) / x_std)`` where
``forward`` is the raw network ``W2 relu(W1 x + b1) + b2``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = ["MlpModel", "OptimState", "Cache", "NeuralError", "init_model", "forward", "backward",
           "step", "lr_at", "save_models", "load_models"]

PARAMS = ("W1", "b1", "W2", "b2")


class NeuralError(RuntimeError):
    pass


@dataclass
class MlpModel:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    seed: int = 0
    version: int = 0

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.W1.shape[1], self.W1.shape[0], self.W2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k) for k in PARAMS}

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, k).ravel() for k in PARAMS])

    def set_flat(self, theta: np.ndarray) -> None:
        pos = 0
        for k in PARAMS:
            a = getattr(self, k)
            setattr(self, k, theta[pos:pos + a.size].reshape(a.shape).copy())
            pos += a.size
        self.version += 1

    def copy(self) -> "MlpModel":
        return MlpModel(*(np.array(getattr(self, k), copy=True) for k in
                          PARAMS + ("x_mean", "x_std", "y_mean", "y_std")), seed=self.seed, version=self.version)

    def set_normalization(self, X: np.ndarray, Y: np.ndarray | None = None, floor: float = 1e-8) -> None:
        """Standardise with per-feature mean/std.

        Near-constant inputs keep unit scale. Near-constant outputs take the
        mean scale of the varying outputs (or ``floor`` if none vary), so they
        are not learned on a much coarser scale than their neighbours.
        """
        self.x_mean = X.mean(axis=0)
        sx = X.std(axis=0)
        self.x_std = np.where(sx > floor, sx, 1.0)
        if Y is not None:
            self.y_mean = Y.mean(axis=0)
            sy = Y.std(axis=0)
            live = sy > floor
            self.y_std = np.where(live, sy, sy[live].mean() if live.any() else floor)

    def predict(self, X: np.ndarray) -> np.ndarray:
        z, _ = forward(self, (np.asarray(X, float) - self.x_mean) / self.x_std)
        return self.y_mean + self.y_std * z


@dataclass
class Cache:
    x: np.ndarray
    pre: np.ndarray
    hidden: np.ndarray
    model_id: int
    version: int


def init_model(dims: tuple[int, int, int], seed: int) -> MlpModel:
    """Uniform(+-1/sqrt(fan_in)) weights and biases, identity normalisation."""
    n_in, n_hidden, n_out = (int(d) for d in dims)
    if min(n_in, n_hidden, n_out) <= 0:
        raise ValueError(f"all dimensions must be positive, got {dims}")
    rng = np.random.default_rng(seed)
    b_in, b_hid = 1 / np.sqrt(n_in), 1 / np.sqrt(n_hidden)
    return MlpModel(
        W1=rng.uniform(-b_in, b_in, (n_hidden, n_in)), b1=rng.uniform(-b_in, b_in, n_hidden),
        W2=rng.uniform(-b_hid, b_hid, (n_out, n_hidden)), b2=rng.uniform(-b_hid, b_hid, n_out),
        x_mean=np.zeros(n_in), x_std=np.ones(n_in), y_mean=np.zeros(n_out), y_std=np.ones(n_out), seed=seed)


def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    """Raw network output for a single input or a (batch, n_in) array."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != model.W1.shape[1]:
        raise ValueError(f"input width {x.shape[-1]} != model input {model.W1.shape[1]}")
    pre = x @ model.W1.T + model.b1
    hidden = np.maximum(pre, 0.0)
    out = hidden @ model.W2.T + model.b2
    return out, Cache(x=x, pre=pre, hidden=hidden, model_id=id(model), version=model.version)


def backward(model: MlpModel, cache: Cache, d_out: np.ndarray):
    """Gradients of ``sum(d_out * out)`` w.r.t. parameters and inputs."""
    if cache.model_id != id(model) or cache.version != model.version:
        raise NeuralError("activation cache is stale: parameters changed since forward")
    d_out = np.asarray(d_out, dtype=float)
    batched = d_out.ndim == 2
    D = d_out if batched else d_out[None, :]
    H = cache.hidden if batched else cache.hidden[None, :]
    X = cache.x if batched else cache.x[None, :]
    P = cache.pre if batched else cache.pre[None, :]
    dH = D @ model.W2
    dP = dH * (P > 0)
    grads = {"W2": D.T @ H, "b2": D.sum(axis=0), "W1": dP.T @ X, "b1": dP.sum(axis=0)}
    d_in = dP @ model.W1
    return grads, (d_in if batched else d_in[0])


def lr_at(epoch: int, horizon: int, lr_start: float = 1e-3, lr_end: float = 1e-6) -> float:
    """Geometric decay from lr_start (epoch 0) to lr_end (epoch horizon-1 and later)."""
    if horizon <= 1 or epoch >= horizon - 1:
        return lr_end if horizon > 1 or epoch > 0 else lr_start
    return float(lr_start * (lr_end / lr_start) ** (epoch / (horizon - 1)))


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def step(model: MlpModel, grads: dict[str, np.ndarray], state: OptimState) -> MlpModel:
    """One Adam update in place; returns the model."""
    for k in PARAMS:
        g = grads[k]
        if g.shape != getattr(model, k).shape:
            raise ValueError(f"gradient shape {g.shape} for {k} != {getattr(model, k).shape}")
        if not np.all(np.isfinite(g)):
            raise NeuralError(f"non-finite gradient for {k}")
    state.t += 1
    b1c = 1 - state.beta1 ** state.t
    b2c = 1 - state.beta2 ** state.t
    for k in PARAMS:
        g = grads[k]
        m = state.m.get(k)
        v = state.v.get(k)
        m = g * (1 - state.beta1) if m is None else state.beta1 * m + (1 - state.beta1) * g
        v = g * g * (1 - state.beta2) if v is None else state.beta2 * v + (1 - state.beta2) * g * g
        state.m[k], state.v[k] = m, v
        upd = state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        setattr(model, k, getattr(model, k) - upd)
    model.version += 1
    return model


# --------------------------------------------------------------------------- persistence


def save_models(path, models: dict[str, MlpModel], meta: dict) -> Path:
    """Write ``header.json`` (metadata, dims, normalisation) and ``params.bin``.

    ``params.bin`` is the concatenation of every model's flat parameters in
    header order, little-endian float64.
    """
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, m in models.items():
        flat = m.flat()
        entries.append({"name": name, "dims": list(m.dims), "seed": m.seed, "offset": offset,
                        "count": int(flat.size), "x_mean": m.x_mean.tolist(), "x_std": m.x_std.tolist(),
                        "y_mean": m.y_mean.tolist(), "y_std": m.y_std.tolist()})
        chunks.append(flat)
        offset += flat.size
    header = {"format": "decompopf-mlp", "version": 1, "meta": meta, "subnets": entries}
    (path / "header.json").write_text(json.dumps(header, indent=1) + "\n")
    data = np.concatenate(chunks) if chunks else np.zeros(0)
    (path / "params.bin").write_bytes(data.astype("<f8").tobytes())
    return path


def load_models(path) -> tuple[dict[str, MlpModel], dict]:
    path = Path(path)
    header = json.loads((path / "header.json").read_text())
    if header.get("format") != "decompopf-mlp":
        raise NeuralError(f"{path} is not a model file")
    data = np.frombuffer((path / "params.bin").read_bytes(), dtype="<f8")
    models = {}
    for e in header["subnets"]:
        m = init_model(tuple(e["dims"]), e["seed"])
        if e["offset"] + e["count"] > data.size:
            raise NeuralError("params.bin is truncated")
        m.set_flat(data[e["offset"]:e["offset"] + e["count"]].astype(float))
        m.version = 0
        m.x_mean, m.x_std = np.array(e["x_mean"]), np.array(e["x_std"])
        m.y_mean, m.y_std = np.array(e["y_mean"]), np.array(e["y_std"])
        models[e["name"]] = m
    return models, header["meta"]
