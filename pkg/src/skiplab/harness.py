"""Desk-scale training harness.

Synthetic token-classification task, a binary tensor-file loader, a manual
batched backward pass (verified against finite differences in the tests), two
optimizers with decoupled weight decay, and conditioning probes along the loss
trajectory.  The network head is the simplest thing that exercises the blocks:
mean-pool the final tokens, apply a linear classifier, cross-entropy.

The training forward mirrors :mod:`skiplab.model` exactly when the optional
pre-normalization toggle is off (the default; all conditioning claims are
stated for the un-normalized blocks).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .analysis import ExperimentRecord, condition_profile_for_params
from .init import InitSpec, init_network, truncated_normal
from .model import (BlockParams, ModelConfig, NetworkParams, activation,
                    activation_derivative)

OPTIMIZERS = ("sgd_momentum", "adam_decoupled")

# Tensor file layout (little-endian): magic, u32 version, u32 sample_count,
# u32 n, u32 d, u32 class_count, sample_count*n*d float64 tokens (sample-major,
# column-major per matrix), sample_count u32 labels.
MAGIC = b"SKLS"
VERSION = 1
_LN_EPS = 1e-6


class TensorFileError(ValueError):
    """Malformed tensor file; the message names the offending field."""


@dataclass
class Dataset:
    tokens: np.ndarray  # (samples, n, d)
    labels: np.ndarray  # (samples,) int
    class_count: int

    def __post_init__(self):
        if self.tokens.ndim != 3:
            raise ValueError("tokens must be (samples, n, d)")
        if self.labels.shape != (self.tokens.shape[0],):
            raise ValueError("labels must match sample count")
        if self.labels.size and int(self.labels.max()) >= self.class_count:
            raise ValueError("label out of range for class_count")

    @property
    def n(self) -> int:
        return self.tokens.shape[1]

    @property
    def d_in(self) -> int:
        return self.tokens.shape[2]

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def samples(self):
        return [(self.tokens[i], int(self.labels[i])) for i in range(len(self))]


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig
    init: InitSpec
    optimizer: str = "adam_decoupled"
    lr: float = 1e-3
    weight_decay: float = 0.0
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    steps: int = 100
    batch_size: int = 16
    log_every: int = 1
    kappa_probe_every: int = 0  # 0 = never
    use_layernorm: bool = False
    head_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainLog:
    losses: list[float] = field(default_factory=list)
    probes: list[tuple[int, list[ExperimentRecord]]] = field(default_factory=list)
    diverged: bool = False
    diverged_step: int | None = None
    final_digest: str = ""


def synth_task(n: int, d: int, class_count: int, samples: int, noise: float,
               seed: int) -> Dataset:
    """Classification dataset: one random orthonormal-row token template per
    class, samples are template plus Gaussian noise.

    At noise=0 a nearest-template classifier is exact, so the task is
    separable by construction; labels are drawn uniformly."""
    if class_count < 2:
        raise ValueError("class_count must be >= 2")
    if n > d:
        raise ValueError("orthonormal row templates need n <= d")
    rng = np.random.default_rng(seed)
    templates = np.empty((class_count, n, d))
    for c in range(class_count):
        q, _ = np.linalg.qr(rng.standard_normal((d, n)))
        templates[c] = q.T
    labels = rng.integers(0, class_count, size=samples)
    tokens = templates[labels] + noise * rng.standard_normal((samples, n, d))
    return Dataset(tokens=tokens, labels=labels.astype(np.uint32), class_count=class_count)


def save_tensor_file(path, dataset: Dataset) -> None:
    """Write the binary tensor format (see module docstring)."""
    s, n, d = dataset.tokens.shape
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<5I", VERSION, s, n, d, dataset.class_count))
        payload = dataset.tokens.transpose(0, 2, 1).reshape(s, n * d)
        f.write(np.ascontiguousarray(payload, dtype="<f8").tobytes())
        f.write(np.ascontiguousarray(dataset.labels, dtype="<u4").tobytes())


def load_tensor_file(path) -> Dataset:
    """Read the binary tensor format, rejecting any structural deviation."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise TensorFileError("bad magic: not a tensor file")
    if len(raw) < 24:
        raise TensorFileError("truncated header: version/sample_count/n/d/class_count missing")
    version, s, n, d, class_count = struct.unpack("<5I", raw[4:24])
    if version != VERSION:
        raise TensorFileError(f"unsupported version {version}")
    if n < 1 or d < 1:
        raise TensorFileError(f"invalid shape fields n={n}, d={d}")
    token_bytes = s * n * d * 8
    label_bytes = s * 4
    body = len(raw) - 24
    if body != token_bytes + label_bytes:
        raise TensorFileError(
            f"payload has {body} bytes but header (sample_count={s}, n={n}, "
            f"d={d}) requires {token_bytes} token bytes + {label_bytes} label bytes")
    flat = np.frombuffer(raw, dtype="<f8", count=s * n * d, offset=24)
    if not np.all(np.isfinite(flat)):
        raise TensorFileError("non-finite entries in token payload")
    # Column-major per matrix: stored as d-major rows of X^T.
    tokens = flat.reshape(s, d, n).transpose(0, 2, 1).copy()
    labels = np.frombuffer(raw, dtype="<u4", count=s, offset=24 + token_bytes).copy()
    if labels.size and int(labels.max()) >= class_count:
        raise TensorFileError(
            f"labels exceed class_count={class_count} (max label {int(labels.max())})")
    return Dataset(tokens=tokens, labels=labels, class_count=class_count)


# ---------------------------------------------------------------------------
# Parameter flattening: fixed tensor order per block, then the head.
# ---------------------------------------------------------------------------

_BLOCK_TENSORS = ("W_Q", "W_K", "W_V", "W_O", "mlp_W1", "mlp_b1", "mlp_W2", "mlp_b2")


def _param_list(params: NetworkParams, head_w: np.ndarray, head_b: np.ndarray,
                use_mlp: bool) -> list[np.ndarray]:
    tensors = []
    for bp in params.blocks:
        names = _BLOCK_TENSORS if use_mlp else _BLOCK_TENSORS[:4]
        tensors.extend(getattr(bp, name) for name in names)
    tensors.extend([head_w, head_b])
    return tensors


def _rebuild(tensors: list[np.ndarray], config: ModelConfig,
             ) -> tuple[NetworkParams, np.ndarray, np.ndarray]:
    per = 8 if config.use_mlp else 4
    blocks = []
    for layer in range(config.L):
        chunk = tensors[layer * per:(layer + 1) * per]
        if config.use_mlp:
            blocks.append(BlockParams(*chunk))
        else:
            blocks.append(BlockParams(*chunk[:4]))
    return NetworkParams(blocks), tensors[-2], tensors[-1]


def params_digest(tensors: list[np.ndarray]) -> str:
    """SHA-256 over the concatenated raw bytes of every tensor."""
    h = hashlib.sha256()
    for t in tensors:
        h.update(np.ascontiguousarray(t, dtype="<f8").tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Batched forward / backward
# ---------------------------------------------------------------------------


def _stacked_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """sum over (batch, token) of a[b, n, :]^T b[b, n, :] as one matmul."""
    return a.reshape(-1, a.shape[-1]).T @ b.reshape(-1, b.shape[-1])


def _layernorm(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    return xc * inv, xc, inv


def _layernorm_backward(dy: np.ndarray, y: np.ndarray, inv: np.ndarray) -> np.ndarray:
    mean_dy = dy.mean(axis=-1, keepdims=True)
    mean_dyy = (dy * y).mean(axis=-1, keepdims=True)
    return (dy - mean_dy - y * mean_dyy) * inv


def _act_forward(name: str, pre: np.ndarray) -> tuple[np.ndarray, np.ndarray | None]:
    """Activation value plus the shared intermediate its derivative reuses."""
    if name == "gelu":
        from scipy.special import erf
        cdf = 0.5 * (1.0 + erf(pre / np.sqrt(2.0)))
        return pre * cdf, cdf
    return activation(name, pre), None


def _act_backward(name: str, pre: np.ndarray, cdf: np.ndarray | None) -> np.ndarray:
    if name == "gelu":
        pdf = np.exp(-0.5 * pre * pre) / np.sqrt(2.0 * np.pi)
        return cdf + pre * pdf
    return activation_derivative(name, pre)


def _forward_batch(x: np.ndarray, params: NetworkParams, config: ModelConfig,
                   use_layernorm: bool) -> tuple[np.ndarray, list[dict]]:
    """Batched block stack on (batch, n, d) tokens; caches for backward."""
    caches = []
    scale = config.attention_scale
    d_h = config.d_h
    for bp in params.blocks:
        cache = {"x_in": x}
        if use_layernorm:
            z, _, inv = _layernorm(x)
            cache["ln1"] = (z, inv)
        else:
            z = x
        q = z @ bp.W_Q
        k = z @ bp.W_K
        v = z @ bp.W_V
        o = np.empty_like(q)
        attns = []
        for i in range(config.h):
            blk = slice(i * d_h, (i + 1) * d_h)
            logits = (q[..., blk] @ k[..., blk].transpose(0, 2, 1)) / scale
            logits -= logits.max(axis=-1, keepdims=True)
            e = np.exp(logits)
            a = e / e.sum(axis=-1, keepdims=True)
            o[..., blk] = a @ v[..., blk]
            attns.append(a)
        sa = o @ bp.W_O
        cache.update(z=z, q=q, k=k, v=v, o=o, attns=attns)
        x_attn = x + sa if config.use_skip else sa
        cache["x_attn"] = x_attn
        if config.use_mlp:
            if use_layernorm:
                z2, _, inv2 = _layernorm(x_attn)
                cache["ln2"] = (z2, inv2)
            else:
                z2 = x_attn
            pre = z2 @ bp.mlp_W1 + bp.mlp_b1
            act, aux = _act_forward(config.activation, pre)
            mlp = act @ bp.mlp_W2 + bp.mlp_b2
            cache.update(z2=z2, pre=pre, act=act, act_aux=aux)
            x = x_attn + mlp if config.use_skip else mlp
        else:
            x = x_attn
        caches.append(cache)
    return x, caches


def loss_and_gradients(tensors: list[np.ndarray], x: np.ndarray, y: np.ndarray,
                       config: ModelConfig, use_layernorm: bool = False,
                       ) -> tuple[float, list[np.ndarray]]:
    """Cross-entropy of mean-pooled final tokens and its exact gradient with
    respect to every tensor in ``tensors`` (same order)."""
    params, head_w, head_b = _rebuild(tensors, config)
    out, caches = _forward_batch(x, params, config, use_layernorm)
    batch = x.shape[0]

    pooled = out.mean(axis=1)
    logits = pooled @ head_w + head_b
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[np.arange(batch), y]))

    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    dlogits = probs
    dlogits[np.arange(batch), y] -= 1.0
    dlogits /= batch
    d_head_w = pooled.T @ dlogits
    d_head_b = dlogits.sum(axis=0)
    dx = np.repeat((dlogits @ head_w.T)[:, None, :] / config.n, config.n, axis=1)

    grad_blocks = []
    d_h = config.d_h
    for layer in range(config.L - 1, -1, -1):
        bp = params.blocks[layer]
        cache = caches[layer]
        g = {}
        if config.use_mlp:
            dmlp = dx
            g["mlp_W2"] = _stacked_outer(cache["act"], dmlp)
            g["mlp_b2"] = dmlp.sum(axis=(0, 1))
            dpre = (dmlp @ bp.mlp_W2.T) * _act_backward(
                config.activation, cache["pre"], cache["act_aux"])
            g["mlp_W1"] = _stacked_outer(cache["z2"], dpre)
            g["mlp_b1"] = dpre.sum(axis=(0, 1))
            dz2 = dpre @ bp.mlp_W1.T
            if use_layernorm:
                z2, inv2 = cache["ln2"]
                dz2 = _layernorm_backward(dz2, z2, inv2)
            dx_attn = dz2 + (dx if config.use_skip else 0.0)
        else:
            dx_attn = dx

        dsa = dx_attn
        z, q, k, v = cache["z"], cache["q"], cache["k"], cache["v"]
        g["W_O"] = _stacked_outer(cache["o"], dsa)
        do = dsa @ bp.W_O.T
        dq = np.empty_like(q)
        dk = np.empty_like(k)
        dv = np.empty_like(v)
        for i in range(config.h):
            blk = slice(i * d_h, (i + 1) * d_h)
            a = cache["attns"][i]
            da = do[..., blk] @ v[..., blk].transpose(0, 2, 1)
            dv[..., blk] = a.transpose(0, 2, 1) @ do[..., blk]
            dm = a * (da - (da * a).sum(axis=-1, keepdims=True)) / config.attention_scale
            dq[..., blk] = dm @ k[..., blk]
            dk[..., blk] = dm.transpose(0, 2, 1) @ q[..., blk]
        g["W_Q"] = _stacked_outer(z, dq)
        g["W_K"] = _stacked_outer(z, dk)
        g["W_V"] = _stacked_outer(z, dv)
        dz = dq @ bp.W_Q.T + dk @ bp.W_K.T + dv @ bp.W_V.T
        if use_layernorm:
            z1, inv1 = cache["ln1"]
            dz = _layernorm_backward(dz, z1, inv1)
        dx = dz + (dx_attn if config.use_skip else 0.0)
        names = _BLOCK_TENSORS if config.use_mlp else _BLOCK_TENSORS[:4]
        grad_blocks.append([g[name] for name in names])

    grads = []
    for block in reversed(grad_blocks):
        grads.extend(block)
    grads.extend([d_head_w, d_head_b])
    return loss, grads


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


def init_optimizer_state(tensors: list[np.ndarray], config: TrainConfig) -> dict:
    zeros = [np.zeros_like(t) for t in tensors]
    if config.optimizer == "sgd_momentum":
        return {"step": 0, "velocity": zeros}
    return {"step": 0, "m": zeros, "v": [np.zeros_like(t) for t in tensors]}


def optimizer_step(tensors: list[np.ndarray], grads: list[np.ndarray],
                   state: dict, config: TrainConfig,
                   ) -> tuple[list[np.ndarray], dict]:
    """One update; returns fresh (tensors, state).

    sgd_momentum: v <- momentum*v + g; p <- p - lr*v.
    adam_decoupled: bias-corrected Adam with eps added outside the square root.
    Decoupled weight decay multiplies matrix-shaped tensors (ndim >= 2) by
    (1 - lr*weight_decay) before the gradient step; biases are not decayed.
    """
    t = state["step"] + 1
    lr, wd = config.lr, config.weight_decay
    new_tensors = []
    if config.optimizer == "sgd_momentum":
        new_v = []
        for p, grad, vel in zip(tensors, grads, state["velocity"]):
            v = config.momentum * vel + grad
            p = p * (1.0 - lr * wd) if wd and p.ndim >= 2 else p
            new_tensors.append(p - lr * v)
            new_v.append(v)
        return new_tensors, {"step": t, "velocity": new_v}

    b1, b2 = config.betas
    new_m, new_v = [], []
    for p, grad, m, v in zip(tensors, grads, state["m"], state["v"]):
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        p = p * (1.0 - lr * wd) if wd and p.ndim >= 2 else p
        new_tensors.append(p - lr * m_hat / (np.sqrt(v_hat) + config.eps))
        new_m.append(m)
        new_v.append(v)
    return new_tensors, {"step": t, "m": new_m, "v": new_v}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def train(dataset: Dataset, config: TrainConfig) -> TrainLog:
    """Deterministic single-threaded minibatch training.

    Stops early with the divergence flag on the first non-finite loss; the
    partial loss log is preserved.  Conditioning probes run the analysis
    profile on the current weights (pure measurement, parameters untouched).
    """
    mc = config.model
    if dataset.n != mc.n or dataset.d_in != mc.d:
        raise ValueError(
            f"dataset shape (n={dataset.n}, d={dataset.d_in}) does not match "
            f"model (n={mc.n}, d={mc.d})")
    rng = np.random.default_rng(config.seed)
    params = init_network(mc, config.init)
    head_w = truncated_normal(mc.d, dataset.class_count, config.head_std, 2.0,
                              np.random.default_rng(config.seed + 1))
    head_b = np.zeros(dataset.class_count)
    tensors = _param_list(params, head_w, head_b, mc.use_mlp)
    state = init_optimizer_state(tensors, config)

    log = TrainLog()
    size = len(dataset)
    batch_size = min(config.batch_size, size)
    for step in range(config.steps):
        if config.kappa_probe_every and step % config.kappa_probe_every == 0:
            log.probes.append((step, _probe(tensors, mc, rng_seed=config.seed)))
        idx = rng.choice(size, size=batch_size, replace=False)
        loss, grads = loss_and_gradients(tensors, dataset.tokens[idx],
                                         dataset.labels[idx].astype(int), mc,
                                         config.use_layernorm)
        if not np.isfinite(loss):
            log.diverged = True
            log.diverged_step = step
            break
        log.losses.append(loss)
        tensors, state = optimizer_step(tensors, grads, state, config)
    log.final_digest = params_digest(tensors)
    return log


def _probe(tensors: list[np.ndarray], mc: ModelConfig, rng_seed: int,
           ) -> list[ExperimentRecord]:
    params, _, _ = _rebuild(tensors, mc)
    rng = np.random.default_rng(rng_seed)
    batch = [rng.standard_normal((mc.n, mc.d))]
    return condition_profile_for_params(params, mc, batch, rng_seed,
                                        include_param_jacobian=False)
