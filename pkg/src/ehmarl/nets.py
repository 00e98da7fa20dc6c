"""Minimal dense networks with manual backprop for the actor and critic.

The actor maps a 49-dim observation to two softmax groups (4 energy-threshold
logits, 16 relay-slot logits); the critic maps the same observation to a
scalar value. Hidden layers use rectifier activations. Gradients are derived
by hand and verified against finite differences in the test suite.
"""

from __future__ import annotations

import json

import numpy as np

ACTOR_DIMS = (49, 256, 512, 256, 128)
CRITIC_DIMS = (49, 512, 1024, 256, 1)
POLICY_SPLIT = (4, 16)  # energy logits, relay logits

CHECKPOINT_MAGIC = "ehmarl-mlp"
CHECKPOINT_VERSION = 1


class MlpModel:
    """Weights and biases of one feedforward network.

    head == "policy": trunk dims end in a hidden layer; an extra linear map
    produces sum(POLICY_SPLIT) logits split into two softmax groups.
    head == "value": the last trunk dim is 1 and is emitted linearly.
    """

    def __init__(self, dims, head, weights, biases, dtype=np.float64):
        if head not in ("policy", "value"):
            raise ValueError(f"unknown head {head!r}")
        self.dims = tuple(int(d) for d in dims)
        self.head = head
        self.W = weights
        self.b = biases
        self.dtype = dtype

    @classmethod
    def create(cls, dims, head, seed=0, dtype=np.float64) -> "MlpModel":
        """Uniform fan-in scaled initialization, deterministic per seed."""
        rng = np.random.default_rng(seed)
        layer_dims = list(dims)
        if head == "policy":
            layer_dims = layer_dims + [sum(POLICY_SPLIT)]
        W, b = [], []
        for fan_in, fan_out in zip(layer_dims[:-1], layer_dims[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            W.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
            b.append(np.zeros(fan_out, dtype=dtype))
        return cls(dims, head, W, b, dtype)

    @property
    def n_layers(self) -> int:
        return len(self.W)

    def copy(self) -> "MlpModel":
        return MlpModel(self.dims, self.head, [w.copy() for w in self.W],
                        [b.copy() for b in self.b], self.dtype)

    def copy_from(self, other: "MlpModel") -> None:
        for dst, src in zip(self.W, other.W):
            np.copyto(dst, src)
        for dst, src in zip(self.b, other.b):
            np.copyto(dst, src)

    def zeros_like_grads(self):
        return [(np.zeros_like(w), np.zeros_like(bb)) for w, bb in zip(self.W, self.b)]

    def forward(self, X):
        """Batched forward pass. Returns (activations, output).

        activations[k] is the input to layer k (post-rectifier for k >= 1);
        output is raw logits for a policy head, (B,) values for a value head.
        """
        acts = [X]
        h = X
        last = self.n_layers - 1
        for k in range(self.n_layers):
            z = h @ self.W[k] + self.b[k]
            if k < last:
                np.maximum(z, 0.0, out=z)
            h = z
            if k < last:
                acts.append(h)
        if self.head == "value":
            return acts, h[..., 0]
        return acts, h

    def backward(self, acts, d_out):
        """Backprop d_out (gradient at the raw output) to parameter grads."""
        grads = [None] * self.n_layers
        if self.head == "value":
            d_out = d_out[..., None]
        delta = d_out
        for k in range(self.n_layers - 1, -1, -1):
            a = acts[k]
            if a.ndim == 1:
                dW = np.outer(a, delta)
                db = delta.copy()
            else:
                dW = a.T @ delta
                db = delta.sum(axis=0)
            grads[k] = (dW, db)
            if k > 0:
                delta = delta @ self.W[k].T
                delta = delta * (acts[k] > 0)  # rectifier gate
        return grads


def new_actor(seed=0, dtype=np.float64) -> MlpModel:
    return MlpModel.create(ACTOR_DIMS, "policy", seed=seed, dtype=dtype)


def new_critic(seed=0, dtype=np.float64) -> MlpModel:
    return MlpModel.create(CRITIC_DIMS, "value", seed=seed, dtype=dtype)


def split_logits(logits):
    n_e, n_r = POLICY_SPLIT
    return logits[..., :n_e], logits[..., n_e:n_e + n_r]


def masked_softmax(logits, mask=None):
    """Softmax with masked entries receiving probability exactly zero."""
    if mask is not None:
        logits = np.where(mask, logits, -np.inf)
    m = np.max(logits, axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise ValueError("softmax group has no unmasked entry")
    e = np.exp(logits - m)
    return e / e.sum(axis=-1, keepdims=True)


def forward_policy(model: MlpModel, state, mask, want_acts: bool = False):
    """Action distribution for one observation.

    mask is a boolean vector over the relay slots; at least one entry must
    be set. Returns (energy_probs, relay_probs), plus the layer activations
    when want_acts is set (so a later update can skip the forward pass).
    """
    if model.head != "policy":
        raise ValueError("forward_policy needs a policy-head model")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("relay mask has no valid slot")
    acts, logits = model.forward(np.asarray(state, dtype=model.dtype))
    logit_e, logit_r = split_logits(logits)
    p_e, p_r = masked_softmax(logit_e), masked_softmax(logit_r, mask)
    if want_acts:
        return p_e, p_r, acts
    return p_e, p_r


def forward_value(model: MlpModel, states) -> np.ndarray:
    if model.head != "value":
        raise ValueError("forward_value needs a value-head model")
    _, v = model.forward(np.asarray(states, dtype=model.dtype))
    return v


def sample_masked(probs, rng) -> int:
    """Draw an index from probs; zero-probability entries are structurally
    excluded (never selected, regardless of rounding)."""
    # Hot path during training: a hand-rolled inverse-CDF walk over the few
    # entries beats rng.choice by an order of magnitude. Python floats walk
    # much faster than numpy scalars.
    p_list = probs.tolist() if hasattr(probs, "tolist") else list(probs)
    total = 0.0
    any_positive = False
    for p in p_list:
        if p > 0.0:
            total += p
            any_positive = True
    if not any_positive:
        raise ValueError("no positive-probability entry to sample")
    u = rng.random() * total
    acc = 0.0
    for idx, p in enumerate(p_list):
        if p > 0.0:
            acc += p
            if u < acc:
                return idx
    # Round-off pushed u past the last positive cumulative: return it.
    for idx in range(len(p_list) - 1, -1, -1):
        if p_list[idx] > 0.0:
            return idx
    raise AssertionError("unreachable")


def greedy_index(probs) -> int:
    """Argmax with ties resolved to the lowest index."""
    return int(np.argmax(probs))


def n_step_returns(rewards, bootstrap_value: float, gamma: float) -> np.ndarray:
    """Discounted returns R_t = r_{t+1} + gamma * R_{t+1}, seeded with the
    bootstrap value (0 for terminal batches)."""
    if len(rewards) == 0:
        raise ValueError("empty reward sequence")
    if not (0.0 < gamma <= 1.0):
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    R = np.empty(len(rewards), dtype=np.float64)
    acc = float(bootstrap_value)
    for t in range(len(rewards) - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        R[t] = acc
    return R


def critic_update(model: MlpModel, states, returns):
    """Value loss 1/(2B) * sum (R_t - V_t)^2, its gradients, and the values
    from the same forward pass (so advantage computation reuses it)."""
    states = np.asarray(states, dtype=model.dtype)
    returns = np.asarray(returns, dtype=np.float64)
    B = states.shape[0]
    acts, values = model.forward(states)
    err = values - returns.astype(model.dtype)
    loss = float(0.5 / B * np.dot(err, err))
    d_v = (err / B).astype(model.dtype)
    grads = model.backward(acts, d_v)
    return loss, grads, values


def critic_loss_and_grads(model: MlpModel, states, returns):
    """Mean squared value error, 1/(2B) * sum (R_t - V_t)^2, plus grads."""
    loss, grads, _ = critic_update(model, states, returns)
    return loss, grads


def actor_loss_and_grads(model: MlpModel, states, masks, actions_e, actions_r,
                         advantages, include_energy_head: bool = True,
                         entropy_coef: float = 0.0, acts=None):
    """Policy-gradient loss -(1/B) * sum log pi(a_t|s_t) * Ad_t, plus grads.

    The action factors into the two heads; log pi is the sum of both chosen
    log-probabilities (relay only when include_energy_head is False). Masked
    relay slots carry exactly zero probability and zero gradient. An optional
    entropy bonus (subtracted from the loss) is available for ablations.
    Passing cached activations (from forward_policy at action time, stacked
    over the batch) skips the forward pass; valid while the model is frozen
    between updates.
    """
    states = np.asarray(states, dtype=model.dtype)
    masks = np.asarray(masks, dtype=bool)
    advantages = np.asarray(advantages, dtype=np.float64)
    actions_e = np.asarray(actions_e, dtype=np.intp)
    actions_r = np.asarray(actions_r, dtype=np.intp)
    B = states.shape[0]
    if not masks[np.arange(B), actions_r].all():
        raise ValueError("a chosen relay slot is masked out")

    if acts is None:
        acts, logits = model.forward(states)
    else:
        logits = acts[-1] @ model.W[-1] + model.b[-1]
    logit_e, logit_r = split_logits(logits)
    p_e = masked_softmax(logit_e)
    p_r = masked_softmax(logit_r, masks)

    rows = np.arange(B)
    log_pr = np.log(p_r[rows, actions_r])
    if include_energy_head:
        log_pi = np.log(p_e[rows, actions_e]) + log_pr
    else:
        log_pi = log_pr
    loss = float(-(log_pi * advantages).mean())

    # d loss / d logit_j = -(Ad/B) * (onehot_j(a) - p_j) per softmax group.
    coef = (-advantages / B)[:, None].astype(model.dtype)
    d_e = np.zeros_like(p_e)
    if include_energy_head:
        d_e = -coef * p_e
        d_e[rows, actions_e] += coef[:, 0]
    d_r = -coef * p_r
    d_r[rows, actions_r] += coef[:, 0]

    if entropy_coef > 0.0:
        # L -= c/B * sum H_t; dH/dlogit_j = -p_j (log p_j + H).
        for p, d, active in ((p_e, d_e, include_energy_head), (p_r, d_r, True)):
            if not active:
                continue
            with np.errstate(divide="ignore", invalid="ignore"):
                logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
            H = -(p * logp).sum(axis=1, keepdims=True)
            loss -= entropy_coef * float(H.mean())
            d += (entropy_coef / B) * p * (logp + H)

    d_logits = np.concatenate([d_e, d_r], axis=1).astype(model.dtype)
    grads = model.backward(acts, d_logits)
    return loss, grads


def clip_global_norm(grads, max_norm: float) -> float:
    """Scale grads in place so their global L2 norm is at most max_norm.
    Returns the pre-clip norm."""
    sq = 0.0
    for dW, db in grads:
        sq += float(np.vdot(dW, dW)) + float(np.vdot(db, db))
    norm = np.sqrt(sq)
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for dW, db in grads:
            dW *= scale
            db *= scale
    return norm


def apply_gradients(model: MlpModel, grads, learning_rate: float) -> None:
    """Plain gradient descent: w <- w - lr * g, in place."""
    for (dW, db), W, b in zip(grads, model.W, model.b):
        if dW.shape != W.shape or db.shape != b.shape:
            raise ValueError(f"gradient shape {dW.shape}/{db.shape} does not match "
                             f"model shape {W.shape}/{b.shape}")
        W -= learning_rate * dW
        b -= learning_rate * db


try:  # fused kernel; the numpy path below is the behavioral reference
    import numba

    @numba.njit(cache=True, fastmath=False)
    def _adam_step(param, g, m, v, b1, b2, scale, sq_corr, eps):
        for i in range(param.size):
            gi = g[i]
            mi = b1 * m[i] + (1.0 - b1) * gi
            vi = b2 * v[i] + (1.0 - b2) * gi * gi
            m[i] = mi
            v[i] = vi
            param[i] -= scale * mi / (np.sqrt(vi) / sq_corr + eps)
except ImportError:  # pragma: no cover
    _adam_step = None


class AdamOptimizer:
    """Adaptive-moment alternative to plain descent, kept behind config."""

    def __init__(self, model: MlpModel, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.W, model.b)]
        self.v = [(np.zeros_like(w), np.zeros_like(b)) for w, b in zip(model.W, model.b)]

    def apply(self, model: MlpModel, grads, learning_rate: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        scale = learning_rate / corr1
        sq_corr = np.sqrt(corr2)
        for k, (dW, db) in enumerate(grads):
            for slot, g, param in ((0, dW, model.W[k]), (1, db, model.b[k])):
                m = self.m[k][slot]
                v = self.v[k][slot]
                if _adam_step is not None:
                    _adam_step(param.reshape(-1), np.ascontiguousarray(g).reshape(-1),
                               m.reshape(-1), v.reshape(-1),
                               b1, b2, scale, sq_corr, self.eps)
                    continue
                m *= b1
                m += (1 - b1) * g
                v *= b2
                v += (1 - b2) * (g * g)
                param -= scale * m / (np.sqrt(v) / sq_corr + self.eps)


def make_optimizer(name: str, model: MlpModel):
    """None for plain descent, an AdamOptimizer for "adam"."""
    if name == "sgd":
        return None
    if name == "adam":
        return AdamOptimizer(model)
    raise ValueError(f"unknown optimizer {name!r}")


def save_model(model: MlpModel, path: str) -> None:
    """Self-describing checkpoint: versioned header plus raw arrays."""
    meta = {
        "magic": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "dims": list(model.dims),
        "head": model.head,
        "dtype": np.dtype(model.dtype).name,
    }
    arrays = {"meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)}
    for k, (W, b) in enumerate(zip(model.W, model.b)):
        arrays[f"W{k}"] = W
        arrays[f"b{k}"] = b
    np.savez(path, **arrays)


def load_model(path: str) -> MlpModel:
    with np.load(path) as data:
        try:
            meta = json.loads(bytes(data["meta"]).decode())
        except (KeyError, ValueError) as exc:
            raise ValueError(f"{path}: not a model checkpoint") from exc
        if meta.get("magic") != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: bad checkpoint magic {meta.get('magic')!r}")
        if meta.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
        n = len([k for k in data.files if k.startswith("W")])
        W = [data[f"W{k}"] for k in range(n)]
        b = [data[f"b{k}"] for k in range(n)]
    return MlpModel(meta["dims"], meta["head"], W, b, np.dtype(meta["dtype"]).type)
