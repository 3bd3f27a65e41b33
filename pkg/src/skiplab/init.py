"""Weight initialization schemes.

Two families:

* ``default`` — truncated normal everywhere (the usual transformer baseline).
* ``proposed`` — the conditioning-aware construction: the value/output product
  W_V W_O is made scaled-orthonormal (every singular value equals c^2, so its
  condition number is exactly 1), the per-head query/key product is driven to
  the diagonally dominant target alpha*Z + beta*I with Z_ij ~ N(0, 1/d), and
  MLP weights are scaled (semi-)orthogonal.

All constructors are pure functions of their seed; the network constructor
derives independent per-(layer, tensor) streams from one master seed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .linalg import pin_column_signs
from .model import BlockParams, ModelConfig, NetworkParams

# (alpha, beta, c) presets: "supervised" is the headline setting, "selfsup"
# the alternative used for the smaller self-supervised backbone.
PRESETS = {
    "supervised": (2.0, 0.6, 3.0),
    "selfsup": (1.8, 1.0, 3.0),
}


@dataclass(frozen=True)
class InitSpec:
    scheme: str = "proposed"
    alpha: float = 2.0
    beta: float = 0.6
    c: float = 3.0
    trunc_std: float = 0.02
    trunc_bound: float = 2.0
    mlp_gain: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.scheme not in ("default", "proposed"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.scheme == "proposed":
            if self.alpha < 0 or self.beta < 0 or self.c <= 0:
                raise ValueError("proposed scheme needs alpha, beta >= 0 and c > 0")
        if self.trunc_std <= 0 or self.mlp_gain <= 0:
            raise ValueError("trunc_std and mlp_gain must be positive")

    def with_preset(self, name: str) -> "InitSpec":
        alpha, beta, c = PRESETS[name]
        return replace(self, alpha=alpha, beta=beta, c=c)


def truncated_normal(rows: int, cols: int, std: float, bound: float, seed) -> np.ndarray:
    """I.i.d. N(0, std^2) entries, resampled until inside +/- bound*std."""
    rng = _as_rng(seed)
    out = rng.standard_normal((rows, cols))
    limit = bound
    bad = np.abs(out) > limit
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > limit
    return std * out


def orthonormal_vo(d: int, h: int, c: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Scaled-orthonormal value/output pair.

    One Gaussian d x d matrix is decomposed as Q = U S V^T and the factors are
    reused: W_V = c*U, W_O = c*V^T.  Heads take contiguous column-blocks of
    W_V and the matching row-blocks of W_O, so the head-summed product is
    exactly c^2 * U V^T regardless of h: every singular value of W_V W_O is
    c^2 and its condition number is 1.
    """
    if d % h != 0:
        raise ValueError(f"d={d} not divisible by h={h}")
    rng = _as_rng(seed)
    q = rng.standard_normal((d, d))
    u, _, vt = np.linalg.svd(q)
    # Paired sign pinning keeps U V^T unchanged while making the pair unique.
    signs = np.where(u[np.argmax(np.abs(u), axis=0), np.arange(d)] < 0, -1.0, 1.0)
    u = u * signs
    vt = vt * signs[:, None]
    return c * u, c * vt


def mimetic_qk(d: int, d_h: int, alpha: float, beta: float, seed) -> tuple[np.ndarray, np.ndarray]:
    """Factor the diagonally dominant target P = alpha*Z + beta*I into (W_Q, W_K).

    Z_ij ~ N(0, 1/d).  P is decomposed as U S V^T and split symmetrically:
    W_Q = U_r sqrt(S_r), W_K = V_r sqrt(S_r) with r = d_h, so W_Q W_K^T is the
    best rank-d_h approximation of P (and P itself when d_h = d).
    """
    if not 1 <= d_h <= d:
        raise ValueError(f"need 1 <= d_h <= d, got d_h={d_h}, d={d}")
    rng = _as_rng(seed)
    z = rng.standard_normal((d, d)) / np.sqrt(d)
    target = alpha * z + beta * np.eye(d)
    u, s, vt = np.linalg.svd(target)
    root = np.sqrt(s[:d_h])
    # Paired sign pinning leaves W_Q W_K^T unchanged and makes the pair unique.
    u_r = u[:, :d_h]
    signs = np.where(u_r[np.argmax(np.abs(u_r), axis=0), np.arange(d_h)] < 0, -1.0, 1.0)
    w_q = (u_r * signs) * root
    w_k = (vt[:d_h, :].T * signs) * root
    return w_q, w_k


def mlp_orthogonal(fan_in: int, fan_out: int, gain: float, seed) -> np.ndarray:
    """Gain-scaled semi-orthogonal fan_in x fan_out matrix.

    The smaller dimension's Gram matrix is the identity: columns are
    orthonormal when fan_in >= fan_out, rows otherwise.
    """
    if fan_in < 1 or fan_out < 1:
        raise ValueError("fan_in and fan_out must be >= 1")
    rng = _as_rng(seed)
    tall = fan_in >= fan_out
    g = rng.standard_normal((fan_in, fan_out) if tall else (fan_out, fan_in))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diagonal(r))
    q = pin_column_signs(q)
    return gain * (q if tall else q.T)


def init_network(config: ModelConfig, spec: InitSpec) -> NetworkParams:
    """Build all L blocks under the requested scheme.

    Sub-seeds are spawned deterministically per (layer, tensor) from the
    master seed, so any two tensors get independent streams and the whole
    network is reproducible from ``spec`` alone.
    """
    master = np.random.SeedSequence(spec.seed)
    layer_seqs = master.spawn(config.L)
    blocks = []
    for seq in layer_seqs:
        streams = seq.spawn(8)
        if spec.scheme == "default":
            blocks.append(_default_block(config, spec, streams))
        else:
            blocks.append(_proposed_block(config, spec, streams))
    return NetworkParams(blocks=blocks)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def _trunc(rows, cols, spec: InitSpec, seq) -> np.ndarray:
    return truncated_normal(rows, cols, spec.trunc_std, spec.trunc_bound,
                            np.random.default_rng(seq))


def _default_block(config: ModelConfig, spec: InitSpec, streams) -> BlockParams:
    d = config.d
    bp = BlockParams(
        W_Q=_trunc(d, d, spec, streams[0]),
        W_K=_trunc(d, d, spec, streams[1]),
        W_V=_trunc(d, d, spec, streams[2]),
        W_O=_trunc(d, d, spec, streams[3]),
    )
    _attach_mlp(bp, config, spec, streams, orthogonal=False)
    return bp


def _proposed_block(config: ModelConfig, spec: InitSpec, streams) -> BlockParams:
    d, d_h = config.d, config.d_h
    w_q = np.empty((d, d))
    w_k = np.empty((d, d))
    qk_streams = streams[0].spawn(config.h)
    for i, s in enumerate(qk_streams):
        cols = slice(i * d_h, (i + 1) * d_h)
        w_q[:, cols], w_k[:, cols] = mimetic_qk(
            d, d_h, spec.alpha, spec.beta, np.random.default_rng(s))
    w_v, w_o = orthonormal_vo(d, config.h, spec.c, np.random.default_rng(streams[1]))
    bp = BlockParams(W_Q=w_q, W_K=w_k, W_V=w_v, W_O=w_o)
    _attach_mlp(bp, config, spec, streams, orthogonal=True)
    return bp


def _attach_mlp(bp: BlockParams, config: ModelConfig, spec: InitSpec,
                streams, orthogonal: bool) -> None:
    if not config.use_mlp:
        return
    d, m = config.d, config.mlp_hidden
    if orthogonal:
        bp.mlp_W1 = mlp_orthogonal(d, m, spec.mlp_gain, np.random.default_rng(streams[4]))
        bp.mlp_W2 = mlp_orthogonal(m, d, spec.mlp_gain, np.random.default_rng(streams[5]))
    else:
        bp.mlp_W1 = _trunc(d, m, spec, streams[4])
        bp.mlp_W2 = _trunc(m, d, spec, streams[5])
    bp.mlp_b1 = np.zeros(m)
    bp.mlp_b2 = np.zeros(d)
