"""Pre-LN graph transformer over per-center token sets, with a hand-written backward pass.

Every center node gets its own token set::

    [center, n_s sampled neighbours, n_g global nodes]

Center and neighbour tokens are raw ``features || PE`` rows projected to the
hidden size; global nodes are already hidden-size vectors and are injected
after the projection. All tokens act as queries, keys and values; padded
neighbour slots are masked out as keys. The class logits come from the final
center-token representation.

Parameters live in a plain ``dict`` keyed by dotted names, in the order given
by :func:`param_shapes`. That order is also the flattening order.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .validation import check_positive_int, check_random_state


@dataclass(frozen=True)
class ModelConfig:
    num_features: int
    num_classes: int
    hidden: int = 128
    heads: int = 4
    layers: int = 2
    pe_dim: int = 8
    n_s: int = 16
    n_g: int = 10
    ffn_mult: int = 4
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("num_features", "num_classes", "hidden", "heads", "layers", "ffn_mult"):
            check_positive_int(getattr(self, name), name)
        for name in ("pe_dim", "n_s", "n_g"):
            check_positive_int(getattr(self, name), name, allow_zero=True)
        if self.hidden % self.heads:
            raise ValueError(f"hidden={self.hidden} is not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads

    @property
    def input_dim(self) -> int:
        return self.num_features + self.pe_dim

    @property
    def tokens(self) -> int:
        return 1 + self.n_s + self.n_g

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict:
    d, f = cfg.hidden, cfg.hidden * cfg.ffn_mult
    shapes = {"input.weight": (cfg.input_dim, d), "input.bias": (d,)}
    for l in range(cfg.layers):
        p = f"layers.{l}."
        shapes.update({
            p + "ln1.gain": (d,), p + "ln1.bias": (d,),
            p + "attn.query": (d, d), p + "attn.key": (d, d),
            p + "attn.value": (d, d), p + "attn.out": (d, d),
            p + "ln2.gain": (d,), p + "ln2.bias": (d,),
            p + "ffn.w1": (d, f), p + "ffn.b1": (f,),
            p + "ffn.w2": (f, d), p + "ffn.b2": (d,),
        })
    shapes["classifier.weight"] = (d, cfg.num_classes)
    shapes["classifier.bias"] = (cfg.num_classes,)
    return shapes


def num_params(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in param_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed=None) -> dict:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; LayerNorm gains 1, biases 0."""
    rng = check_random_state(seed)
    shapes = param_shapes(cfg)
    params = {}
    for name, shape in shapes.items():
        if ".ln" in name:
            params[name] = np.ones(shape) if name.endswith("gain") else np.zeros(shape)
            continue
        # biases share the fan-in of their weight matrix
        weight = name.replace("bias", "weight").replace(".b1", ".w1").replace(".b2", ".w2")
        bound = 1.0 / math.sqrt(shapes[weight][0])
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def flatten(params: dict, cfg: ModelConfig | None = None) -> np.ndarray:
    names = param_shapes(cfg) if cfg is not None else params
    return np.concatenate([np.asarray(params[k], dtype=np.float64).ravel() for k in names])


def unflatten(vector, cfg: ModelConfig) -> dict:
    vector = np.asarray(vector, dtype=np.float64)
    total = num_params(cfg)
    if vector.shape != (total,):
        raise ValueError(f"expected a vector of length {total}, got shape {vector.shape}")
    out, pos = {}, 0
    for name, shape in param_shapes(cfg).items():
        size = math.prod(shape)
        out[name] = vector[pos:pos + size].reshape(shape).copy()
        pos += size
    return out


# ---------------------------------------------------------------------- batches


@dataclass
class Batch:
    """Token sets for ``b`` centers.

    ``tokens`` is ``(b, 1 + n_s, p + k)`` raw inputs (center first),
    ``mask`` ``(b, 1 + n_s)`` marks real tokens, ``global_nodes`` is ``(n_g, d)``.
    """

    tokens: np.ndarray
    mask: np.ndarray
    global_nodes: np.ndarray
    labels: np.ndarray | None = None

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def build_batch(inputs, centers, neighbors, neighbor_mask, global_nodes, labels=None) -> Batch:
    """Gather token rows from the per-node ``inputs`` matrix (features || PE)."""
    inputs = np.asarray(inputs, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.int64)
    idx = np.concatenate([centers[:, None], np.where(neighbor_mask, neighbors, 0)], axis=1)
    mask = np.concatenate([np.ones((centers.size, 1), dtype=bool), neighbor_mask], axis=1)
    tokens = inputs[idx] * mask[..., None]
    return Batch(tokens, mask, np.asarray(global_nodes, dtype=np.float64),
                 None if labels is None else np.asarray(labels, dtype=np.int64))


@dataclass
class AttentionCounter:
    """Counts query-key score evaluations (per head, per attention block)."""

    pairs: int = 0
    calls: int = 0

    def record(self, batch_size: int, tokens: int) -> None:
        self.pairs += batch_size * tokens * tokens
        self.calls += 1


# ---------------------------------------------------------------------- forward


def _layer_norm(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * gain + bias, (xhat, rstd)


def _layer_norm_backward(dy, gain, cache):
    xhat, rstd = cache
    dxhat = dy * gain
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, (dy * xhat).sum(axis=(0, 1)), dy.sum(axis=(0, 1))


def _split_heads(x, h):
    b, t, d = x.shape
    return x.reshape(b, t, h, d // h).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * dk)


def _check_batch(cfg: ModelConfig, batch: Batch):
    b = batch.size
    if batch.tokens.shape != (b, 1 + cfg.n_s, cfg.input_dim):
        raise ValueError(f"tokens shape {batch.tokens.shape} != {(b, 1 + cfg.n_s, cfg.input_dim)}")
    if batch.mask.shape != (b, 1 + cfg.n_s):
        raise ValueError(f"mask shape {batch.mask.shape} != {(b, 1 + cfg.n_s)}")
    if batch.global_nodes.shape != (cfg.n_g, cfg.hidden):
        raise ValueError(f"global nodes shape {batch.global_nodes.shape} != {(cfg.n_g, cfg.hidden)}")


def _forward(params, cfg: ModelConfig, batch: Batch, keep: bool, counter: AttentionCounter | None):
    _check_batch(cfg, batch)
    b, d, h = batch.size, cfg.hidden, cfg.heads
    scale = 1.0 / math.sqrt(cfg.head_dim)
    local = batch.tokens @ params["input.weight"] + params["input.bias"]
    glob = np.broadcast_to(batch.global_nodes, (b, cfg.n_g, d))
    x = np.concatenate([local, glob], axis=1)
    key_mask = np.concatenate([batch.mask, np.ones((b, cfg.n_g), dtype=bool)], axis=1)
    neg = np.where(key_mask, 0.0, -np.inf)[:, None, None, :]
    caches = []
    for l in range(cfg.layers):
        p = f"layers.{l}."
        y, ln1 = _layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"], cfg.ln_eps)
        q = _split_heads(y @ params[p + "attn.query"], h)
        k = _split_heads(y @ params[p + "attn.key"], h)
        v = _split_heads(y @ params[p + "attn.value"], h)
        s = q @ k.transpose(0, 1, 3, 2) * scale + neg
        if counter is not None:
            counter.record(b, x.shape[1])
        s = s - s.max(axis=-1, keepdims=True)
        a = np.exp(s)
        a /= a.sum(axis=-1, keepdims=True)
        o = _merge_heads(a @ v)
        x1 = x + o @ params[p + "attn.out"]
        y2, ln2 = _layer_norm(x1, params[p + "ln2.gain"], params[p + "ln2.bias"], cfg.ln_eps)
        f1 = y2 @ params[p + "ffn.w1"] + params[p + "ffn.b1"]
        r = np.maximum(f1, 0.0)
        x2 = x1 + r @ params[p + "ffn.w2"] + params[p + "ffn.b2"]
        if keep:
            caches.append((y, ln1, q, k, v, a, o, y2, ln2, f1, r))
        x = x2
    z = x[:, 0, :]
    logits = z @ params["classifier.weight"] + params["classifier.bias"]
    return logits, z, caches


def forward(params, cfg: ModelConfig, batch: Batch, training: bool = False,
            counter: AttentionCounter | None = None):
    """Return ``(logits (b, K), center_repr (b, d))``.

    There is no dropout, so ``training`` does not change the computation.
    """
    logits, z, _ = _forward(params, cfg, batch, keep=False, counter=counter)
    return logits, z


def attention_weights(params, cfg: ModelConfig, batch: Batch) -> list:
    """Per-layer attention matrices ``(b, h, T, T)``; mainly for tests and inspection."""
    _, _, caches = _forward(params, cfg, batch, keep=True, counter=None)
    return [c[5] for c in caches]


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy(logits, labels) -> float:
    logp = _log_softmax(logits)
    return float(-logp[np.arange(labels.size), labels].mean())


def loss_and_grad(params, cfg: ModelConfig, batch: Batch, return_repr: bool = False):
    """Mean cross-entropy over the batch and its exact gradient for every parameter.

    With ``return_repr`` the final center representations are returned as a
    third element (used to feed the global-node update without a second pass).
    """
    if batch.labels is None or batch.labels.size == 0:
        raise ValueError("loss_and_grad needs at least one labelled center")
    logits, z, caches = _forward(params, cfg, batch, keep=True, counter=None)
    b, d, h = batch.size, cfg.hidden, cfg.heads
    scale = 1.0 / math.sqrt(cfg.head_dim)
    labels = batch.labels
    logp = _log_softmax(logits)
    loss = float(-logp[np.arange(b), labels].mean())

    grads = {}
    dlogits = np.exp(logp)
    dlogits[np.arange(b), labels] -= 1.0
    dlogits /= b
    grads["classifier.weight"] = z.T @ dlogits
    grads["classifier.bias"] = dlogits.sum(axis=0)
    dx = np.zeros((b, cfg.tokens, d))
    dx[:, 0, :] = dlogits @ params["classifier.weight"].T

    for l in reversed(range(cfg.layers)):
        p = f"layers.{l}."
        y, ln1, q, k, v, a, o, y2, ln2, f1, r = caches[l]
        # FFN block
        flat = dx.reshape(-1, d)
        grads[p + "ffn.b2"] = flat.sum(axis=0)
        grads[p + "ffn.w2"] = r.reshape(-1, r.shape[-1]).T @ flat
        df1 = (dx @ params[p + "ffn.w2"].T) * (f1 > 0)
        grads[p + "ffn.b1"] = df1.sum(axis=(0, 1))
        grads[p + "ffn.w1"] = y2.reshape(-1, d).T @ df1.reshape(-1, df1.shape[-1])
        dy2 = df1 @ params[p + "ffn.w1"].T
        dln, grads[p + "ln2.gain"], grads[p + "ln2.bias"] = _layer_norm_backward(dy2, params[p + "ln2.gain"], ln2)
        dx1 = dx + dln
        # attention block
        grads[p + "attn.out"] = o.reshape(-1, d).T @ dx1.reshape(-1, d)
        do = _split_heads(dx1 @ params[p + "attn.out"].T, h)
        da = do @ v.transpose(0, 1, 3, 2)
        dv = a.transpose(0, 1, 3, 2) @ do
        ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = _merge_heads(ds @ k)
        dk = _merge_heads(ds.transpose(0, 1, 3, 2) @ q)
        dv = _merge_heads(dv)
        yf = y.reshape(-1, d)
        grads[p + "attn.query"] = yf.T @ dq.reshape(-1, d)
        grads[p + "attn.key"] = yf.T @ dk.reshape(-1, d)
        grads[p + "attn.value"] = yf.T @ dv.reshape(-1, d)
        dy = (dq @ params[p + "attn.query"].T + dk @ params[p + "attn.key"].T
              + dv @ params[p + "attn.value"].T)
        dln, grads[p + "ln1.gain"], grads[p + "ln1.bias"] = _layer_norm_backward(dy, params[p + "ln1.gain"], ln1)
        dx = dx1 + dln

    dlocal = dx[:, :1 + cfg.n_s, :]
    grads["input.weight"] = batch.tokens.reshape(-1, cfg.input_dim).T @ dlocal.reshape(-1, d)
    grads["input.bias"] = dlocal.sum(axis=(0, 1))
    grads = {name: grads[name] for name in param_shapes(cfg)}
    if return_repr:
        return loss, grads, z
    return loss, grads


# ------------------------------------------------------------------------- Adam


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        if isinstance(params, dict):
            return cls({k: np.zeros_like(x) for k, x in params.items()},
                       {k: np.zeros_like(x) for k, x in params.items()})
        return cls(np.zeros_like(params), np.zeros_like(params))


def _adam_leaf(x, g, m, v, t, lr, beta1, beta2, eps, wd):
    x = x - lr * wd * x if wd else x.copy()
    m = beta1 * m + (1.0 - beta1) * g
    v = beta2 * v + (1.0 - beta2) * g * g
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return x - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


def adam_step(state: AdamState | None, params, grads, lr: float = 1e-3, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 5e-4):
    """One Adam update with bias correction and decoupled weight decay.

    Works on flat arrays or on parameter dicts. Returns ``(params, state)``;
    inputs are not modified.
    """
    if state is None:
        state = AdamState.zeros_like(params)
    t = state.t + 1
    if isinstance(params, dict):
        new_p, new_m, new_v = {}, {}, {}
        for k in params:
            new_p[k], new_m[k], new_v[k] = _adam_leaf(
                params[k], grads[k], state.m[k], state.v[k], t, lr, beta1, beta2, eps, weight_decay)
        return new_p, AdamState(new_m, new_v, t)
    x, m, v = _adam_leaf(np.asarray(params, dtype=np.float64), np.asarray(grads, dtype=np.float64),
                         state.m, state.v, t, lr, beta1, beta2, eps, weight_decay)
    return x, AdamState(m, v, t)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params, cfg: ModelConfig) -> None:
    """Flat float64 vector (matrix cache format) plus a ``.json`` config sidecar."""
    from .preprocess import write_matrix

    path = Path(path)
    write_matrix(path, flatten(params, cfg))
    path.with_suffix(".json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path):
    from .preprocess import read_matrix

    path = Path(path)
    cfg = ModelConfig(**json.loads(path.with_suffix(".json").read_text()))
    return unflatten(read_matrix(path).ravel(), cfg), cfg
