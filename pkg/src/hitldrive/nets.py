"""From-scratch dense networks: dueling Q-net, plain MLP heads, Adam, checkpoints.

Everything is numpy float64 with hand-written backprop. Gradients are
validated against central finite differences (see finite_diff_check), which
is why parameters and accumulation stay in 64-bit: float32 cancellation
noise at h=1e-4 would swamp the 1e-4 relative-error budget.
"""

from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field

import numpy as np

CKPT_MAGIC = "hitldrive-ckpt"
CKPT_VERSION = 1


class ShapeError(ValueError):
    pass


class TrainingFault(RuntimeError):
    """Non-finite loss/targets; carries batch diagnostics."""


def _he_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


class MLP:
    """Plain dense net: ReLU hidden layers, identity output.

    Supports optional inverted dropout on hidden activations and additive
    Gaussian input noise, both only when a `rng` is passed to forward()
    with train=True. Parameters live in an ordered dict name -> array.
    """

    def __init__(self, layer_sizes: list[int], seed: int = 0, dropout: float = 0.0):
        if len(layer_sizes) < 2:
            raise ShapeError("need at least input and output sizes")
        self.layer_sizes = list(layer_sizes)
        self.dropout = float(dropout)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        for i, (a, b) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            self.params[f"W{i}"] = _he_uniform(rng, a, b)
            self.params[f"b{i}"] = np.zeros(b)

    @property
    def n_layers(self) -> int:
        return len(self.layer_sizes) - 1

    def forward(self, x, train: bool = False, rng: np.random.Generator | None = None,
                input_noise: float = 0.0):
        out, _ = self.forward_cached(x, train=train, rng=rng, input_noise=input_noise)
        return out

    def forward_cached(self, x, train: bool = False,
                       rng: np.random.Generator | None = None,
                       input_noise: float = 0.0):
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.layer_sizes[0]:
            raise ShapeError(
                f"input dim {x.shape[1]} != expected {self.layer_sizes[0]}"
            )
        if train and rng is not None and input_noise > 0.0:
            x = x + rng.normal(0.0, input_noise, size=x.shape)
        acts = [x]
        masks: list[np.ndarray | None] = []
        h = x
        for i in range(self.n_layers):
            z = h @ self.params[f"W{i}"] + self.params[f"b{i}"]
            if i < self.n_layers - 1:
                h = relu(z)
                if train and rng is not None and self.dropout > 0.0:
                    mask = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
                    h = h * mask
                    masks.append(mask)
                else:
                    masks.append(None)
            else:
                h = z
                masks.append(None)
            acts.append(h)
        return h, (acts, masks)

    def backward(self, cache, dout: np.ndarray) -> dict[str, np.ndarray]:
        acts, masks = cache
        grads: dict[str, np.ndarray] = {}
        delta = np.asarray(dout, dtype=np.float64)
        for i in reversed(range(self.n_layers)):
            h_in = acts[i]
            grads[f"W{i}"] = h_in.T @ delta
            grads[f"b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.params[f"W{i}"].T
                if masks[i - 1] is not None:
                    delta = delta * masks[i - 1]
                delta = delta * (acts[i] > 0.0)
        return grads

    def copy(self) -> "MLP":
        dup = MLP.__new__(MLP)
        dup.layer_sizes = list(self.layer_sizes)
        dup.dropout = self.dropout
        dup.params = {k: v.copy() for k, v in self.params.items()}
        return dup


class DuelingNet:
    """Dueling Q-network: shared ReLU trunk, scalar value head, advantage head.

    Q(s, a) = V(s) + A(s, a) - mean_a' A(s, a').
    """

    def __init__(self, obs_dim: int = 13, n_actions: int = 33,
                 hidden: tuple[int, ...] = (128, 128), seed: int = 0):
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        self.params: dict[str, np.ndarray] = {}
        sizes = [obs_dim, *hidden]
        for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
            self.params[f"trunk.W{i}"] = _he_uniform(rng, a, b)
            self.params[f"trunk.b{i}"] = np.zeros(b)
        last = sizes[-1]
        self.params["value.W"] = _he_uniform(rng, last, 1)
        self.params["value.b"] = np.zeros(1)
        self.params["adv.W"] = _he_uniform(rng, last, n_actions)
        self.params["adv.b"] = np.zeros(n_actions)

    def forward_cached(self, obs):
        x = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        if x.shape[1] != self.obs_dim:
            raise ShapeError(f"observation dim {x.shape[1]} != {self.obs_dim}")
        acts = [x]
        h = x
        for i in range(len(self.hidden)):
            h = relu(h @ self.params[f"trunk.W{i}"] + self.params[f"trunk.b{i}"])
            acts.append(h)
        v = h @ self.params["value.W"] + self.params["value.b"]  # (B, 1)
        a = h @ self.params["adv.W"] + self.params["adv.b"]  # (B, n_actions)
        q = v + (a - a.mean(axis=1, keepdims=True))
        return q, (acts, v, a)

    def forward(self, obs) -> np.ndarray:
        return self.forward_cached(obs)[0]

    def value(self, obs) -> np.ndarray:
        _, (_, v, _) = self.forward_cached(obs)
        return v[:, 0]

    def backward(self, cache, dq: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss given dL/dQ for every (sample, action)."""
        acts, _v, _a = cache
        dq = np.asarray(dq, dtype=np.float64)
        dv = dq.sum(axis=1, keepdims=True)
        # through the mean subtraction: dA_j = dQ_j - mean_k dQ_k
        da = dq - dq.mean(axis=1, keepdims=True)
        h = acts[-1]
        grads: dict[str, np.ndarray] = {
            "value.W": h.T @ dv,
            "value.b": dv.sum(axis=0),
            "adv.W": h.T @ da,
            "adv.b": da.sum(axis=0),
        }
        delta = dv @ self.params["value.W"].T + da @ self.params["adv.W"].T
        for i in reversed(range(len(self.hidden))):
            delta = delta * (acts[i + 1] > 0.0)
            grads[f"trunk.W{i}"] = acts[i].T @ delta
            grads[f"trunk.b{i}"] = delta.sum(axis=0)
            if i > 0:
                delta = delta @ self.params[f"trunk.W{i}"].T
        return grads

    def copy(self) -> "DuelingNet":
        dup = DuelingNet.__new__(DuelingNet)
        dup.obs_dim = self.obs_dim
        dup.n_actions = self.n_actions
        dup.hidden = self.hidden
        dup.params = {k: v.copy() for k, v in self.params.items()}
        return dup


def loss_and_gradients(net: DuelingNet, obs_batch, action_indices, targets, is_weights):
    """Importance-weighted squared TD loss and its parameter gradients.

    loss = mean_t w_t * (target_t - Q(s_t, a_t))^2; gradient flows only
    through each sample's selected action.
    """
    actions = np.asarray(action_indices, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(is_weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("is_weights must be non-negative")
    if not np.all(np.isfinite(targets)):
        raise TrainingFault(
            f"non-finite targets in batch: {targets[~np.isfinite(targets)][:5]}"
        )
    q, cache = net.forward_cached(obs_batch)
    b = q.shape[0]
    if not (len(actions) == len(targets) == len(weights) == b):
        raise ShapeError("batch size mismatch across loss inputs")
    q_sel = q[np.arange(b), actions]
    err = targets - q_sel
    loss = float(np.mean(weights * err * err))
    dq = np.zeros_like(q)
    dq[np.arange(b), actions] = -2.0 * weights * err / b
    grads = net.backward(cache, dq)
    return loss, grads


@dataclass
class AdamState:
    """Bias-corrected Adam moments, keyed like the parameter dict."""

    lr: float = 0.00025
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def ensure(self, params: dict[str, np.ndarray]) -> None:
        for k, p in params.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(p)
                self.v[k] = np.zeros_like(p)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> dict[str, np.ndarray]:
    """Standard bias-corrected Adam update, in place; returns params."""
    state.ensure(params)
    state.t += 1
    b1t = 1.0 - state.beta1 ** state.t
    b2t = 1.0 - state.beta2 ** state.t
    for k, g in grads.items():
        m = state.m[k]
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        params[k] -= state.lr * (m / b1t) / (np.sqrt(v / b2t) + state.eps)
    return params


def soft_update(target_params: dict[str, np.ndarray],
                online_params: dict[str, np.ndarray], tau: float) -> dict[str, np.ndarray]:
    """theta_target <- tau * theta + (1 - tau) * theta_target, elementwise."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    for k in target_params:
        target_params[k] *= 1.0 - tau
        target_params[k] += tau * online_params[k]
    return target_params


class DuelingNetPair:
    """Two online dueling nets plus exact-copy targets, with Adam state each."""

    def __init__(self, obs_dim: int = 13, n_actions: int = 33,
                 hidden: tuple[int, ...] = (128, 128), lr: float = 0.00025,
                 seed: int = 0):
        self.q1 = DuelingNet(obs_dim, n_actions, hidden, seed=seed * 2 + 1)
        self.q2 = DuelingNet(obs_dim, n_actions, hidden, seed=seed * 2 + 2)
        self.target1 = self.q1.copy()
        self.target2 = self.q2.copy()
        self.adam1 = AdamState(lr=lr)
        self.adam2 = AdamState(lr=lr)
        self.train_steps = 0

    def soft_update_targets(self, tau: float) -> None:
        soft_update(self.target1.params, self.q1.params, tau)
        soft_update(self.target2.params, self.q2.params, tau)


def finite_diff_check(net: DuelingNet, n_probes: int = 100, seed: int = 0,
                      h: float = 1e-4, batch: int = 8) -> float:
    """Worst relative error of analytic vs central-difference gradients.

    Probes random parameter entries across the trunk and both heads for the
    TD loss on a random batch. 0/0 (both gradients zero) counts as 0.
    """
    if n_probes < 1:
        raise ValueError("n_probes must be >= 1")
    rng = np.random.default_rng(seed)
    obs = rng.normal(0.0, 1.0, size=(batch, net.obs_dim))
    actions = rng.integers(0, net.n_actions, size=batch)
    targets = rng.normal(0.0, 1.0, size=batch)
    weights = rng.uniform(0.1, 1.0, size=batch)

    def loss_at() -> float:
        q = net.forward(obs)
        q_sel = q[np.arange(batch), actions]
        err = targets - q_sel
        return float(np.mean(weights * err * err))

    _, grads = loss_and_gradients(net, obs, actions, targets, weights)
    names = sorted(net.params)
    worst = 0.0
    for _ in range(n_probes):
        name = names[int(rng.integers(len(names)))]
        p = net.params[name]
        flat = int(rng.integers(p.size))
        idx = np.unravel_index(flat, p.shape)
        orig = p[idx]
        p[idx] = orig + h
        up = loss_at()
        p[idx] = orig - h
        down = loss_at()
        p[idx] = orig
        fd = (up - down) / (2.0 * h)
        an = grads[name][idx]
        denom = max(abs(an), abs(fd))
        err = 0.0 if denom == 0.0 else abs(an - fd) / denom
        worst = max(worst, err)
    return worst


# ---------------------------------------------------------------------------
# Checkpoints: deterministic binary container (JSON header + raw tensors).
# zip-based formats stamp wall-clock times, which breaks byte-stable saves.
# ---------------------------------------------------------------------------

def _dump_arrays(arrays: dict[str, np.ndarray], meta: dict) -> bytes:
    order = sorted(arrays)
    header = {
        "magic": CKPT_MAGIC,
        "v": CKPT_VERSION,
        "meta": meta,
        "arrays": [
            {"name": k, "dtype": str(arrays[k].dtype), "shape": list(arrays[k].shape)}
            for k in order
        ],
    }
    buf = io.BytesIO()
    buf.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
    buf.write(b"\n")
    for k in order:
        buf.write(np.ascontiguousarray(arrays[k]).tobytes())
    return buf.getvalue()


def _load_arrays(blob: bytes) -> tuple[dict[str, np.ndarray], dict]:
    nl = blob.index(b"\n")
    header = json.loads(blob[:nl].decode())
    if header.get("magic") != CKPT_MAGIC:
        raise ValueError("not a hitldrive checkpoint")
    if header.get("v") != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('v')}")
    arrays: dict[str, np.ndarray] = {}
    off = nl + 1
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        nbytes = dt.itemsize * count
        arr = np.frombuffer(blob[off : off + nbytes], dtype=dt).reshape(spec["shape"])
        arrays[spec["name"]] = arr.copy()
        off += nbytes
    return arrays, header["meta"]


def save_pair(pair: DuelingNetPair, path) -> None:
    arrays: dict[str, np.ndarray] = {}
    for tag, net in (("q1", pair.q1), ("q2", pair.q2),
                     ("t1", pair.target1), ("t2", pair.target2)):
        for k, v in net.params.items():
            arrays[f"{tag}/{k}"] = v
    for tag, st in (("adam1", pair.adam1), ("adam2", pair.adam2)):
        for k, v in st.m.items():
            arrays[f"{tag}/m/{k}"] = v
        for k, v in st.v.items():
            arrays[f"{tag}/v/{k}"] = v
    meta = {
        "obs_dim": pair.q1.obs_dim,
        "n_actions": pair.q1.n_actions,
        "hidden": list(pair.q1.hidden),
        "lr": pair.adam1.lr,
        "adam1_t": pair.adam1.t,
        "adam2_t": pair.adam2.t,
        "train_steps": pair.train_steps,
    }
    with open(path, "wb") as f:
        f.write(_dump_arrays(arrays, meta))


def load_pair(path) -> DuelingNetPair:
    with open(path, "rb") as f:
        arrays, meta = _load_arrays(f.read())
    pair = DuelingNetPair(
        obs_dim=meta["obs_dim"],
        n_actions=meta["n_actions"],
        hidden=tuple(meta["hidden"]),
        lr=meta["lr"],
    )
    for tag, net in (("q1", pair.q1), ("q2", pair.q2),
                     ("t1", pair.target1), ("t2", pair.target2)):
        for k in net.params:
            net.params[k] = arrays[f"{tag}/{k}"].copy()
    for tag, st, t in (("adam1", pair.adam1, meta["adam1_t"]),
                       ("adam2", pair.adam2, meta["adam2_t"])):
        st.t = t
        for k in pair.q1.params:
            mk, vk = f"{tag}/m/{k}", f"{tag}/v/{k}"
            if mk in arrays:
                st.m[k] = arrays[mk].copy()
                st.v[k] = arrays[vk].copy()
    pair.train_steps = meta["train_steps"]
    return pair


def save_mlp(mlp: MLP, path, extra_meta: dict | None = None) -> None:
    meta = {"layer_sizes": mlp.layer_sizes, "dropout": mlp.dropout}
    if extra_meta:
        meta.update(extra_meta)
    with open(path, "wb") as f:
        f.write(_dump_arrays(dict(mlp.params), meta))


def load_mlp(path) -> tuple[MLP, dict]:
    with open(path, "rb") as f:
        arrays, meta = _load_arrays(f.read())
    mlp = MLP(meta["layer_sizes"], dropout=meta.get("dropout", 0.0))
    for k in mlp.params:
        mlp.params[k] = arrays[k].copy()
    return mlp, meta
