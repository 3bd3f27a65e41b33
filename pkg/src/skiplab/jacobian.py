"""Analytic Jacobians of the attention and MLP sub-blocks, plus the
finite-difference oracle everything is checked against.

Derivative conventions: all Jacobians are taken between column-major
vectorized coordinates (see :mod:`skiplab.linalg`).  For one head with
P = W_Q W_K^T and product G = W_V W_O, the input Jacobian of the attention
map X -> softmax(X P X^T / s) X G decomposes as

    K = ((X G)^T kron I_n) @ A' + G^T kron A

where A' is the derivative of vec(attention) w.r.t. vec(X).  The softmax
Jacobian is naturally block-diagonal over rows; under column-major vec that
block structure is conjugated by the commutation matrix K_{n,n}.  Multi-head
attention sums the per-head terms, which is the unique extension consistent
with the head-summed forward pass; the finite-difference oracle arbitrates.

Note the left factor of K: (X G kron I_n)^T and ((X G)^T kron I_n) are the
same matrix, so the two typographic variants of the formula agree.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .linalg import BudgetError, commutation_matrix, kron
from .model import (BlockParams, ForwardTrace, ModelConfig, NetworkParams,
                    activation, activation_derivative, network_forward)

# Dense nd x nd materialization cap.
MAX_ND = 2048

# Central differences with h ~ eps^(1/3) balance truncation and rounding.
FD_STEP = float(np.finfo(float).eps) ** (1.0 / 3.0)


@dataclass(frozen=True)
class InputJacobian:
    """nd x nd derivative of one sub-block's output w.r.t. its input."""

    matrix: np.ndarray
    layer: int
    kind: str  # "attention" or "mlp"


@dataclass(frozen=True)
class ParamJacobian:
    """(m*n*d) x p derivative of stacked network outputs w.r.t. one layer's
    parameter group.  Columns follow (W_Q, W_K, W_V, W_O), each column-major,
    heads in order within each tensor."""

    matrix: np.ndarray
    layer: int
    target: str  # "attention" or "mlp"


@dataclass(frozen=True)
class AttentionDerivative:
    """n^2 x nd derivative of one head's vec(attention) w.r.t. vec(X)."""

    matrix: np.ndarray
    layer: int
    head: int


def _check_nd(nd: int) -> None:
    if nd > MAX_ND:
        raise BudgetError(f"nd = {nd} exceeds the dense Jacobian cap {MAX_ND}")


def softmax_jacobian(a: np.ndarray) -> np.ndarray:
    """d vec(softmax(M)) / d vec(M) at A = softmax(M), temperature 1.

    Row i of the softmax contributes the block J_i with
    (J_i)_{jk} = A_ij (delta_jk - A_ik); blocks are assembled into
    column-major vec coordinates by commutation-matrix conjugation.
    Each block's rows sum to zero (shift invariance of softmax).
    """
    a = np.asarray(a, dtype=float)
    n = a.shape[0]
    if a.shape != (n, n):
        raise ValueError(f"attention matrix must be square, got {a.shape}")
    rows = a.sum(axis=1)
    if np.any(a < -1e-12) or np.max(np.abs(rows - 1.0)) > 1e-9:
        raise ValueError("input is not row-stochastic")
    # Row-major block diagonal: block i = diag(a_i) - a_i a_i^T.
    blocks = np.zeros((n * n, n * n))
    for i in range(n):
        ai = a[i]
        blocks[i * n:(i + 1) * n, i * n:(i + 1) * n] = np.diag(ai) - np.outer(ai, ai)
    k = commutation_matrix(n, n)
    return k @ blocks @ k.T


def logits_input_jacobian(x: np.ndarray, p: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """d vec(X P X^T / scale) / d vec(X), shape n^2 x nd.

    The bilinear map splits into (X P^T kron I_n) for the left X and
    (I_n kron X P) K_{n,d} for the transposed right X.
    """
    x = np.asarray(x, dtype=float)
    n, d = x.shape
    eye_n = np.eye(n)
    left = kron((x @ p.T), eye_n)
    right = kron(eye_n, (x @ p)) @ commutation_matrix(n, d)
    return (left + right) / scale


def _head_blocks(params: BlockParams, head: int, d_h: int):
    blk = params.head_slice(head, d_h)
    w_v = params.W_V[:, blk]
    w_o = params.W_O[blk, :]
    p = params.W_Q[:, blk] @ params.W_K[:, blk].T
    return w_v, w_o, p


def attention_input_jacobian(trace: ForwardTrace, layer: int, head: int) -> AttentionDerivative:
    """A' for one head: softmax Jacobian chained with the logits Jacobian."""
    cfg = trace.config
    bt = trace.blocks[layer]
    _, _, p = _head_blocks(trace.params.blocks[layer], head, cfg.d_h)
    ja = softmax_jacobian(bt.attention[head])
    jm = logits_input_jacobian(bt.x_in, p, cfg.attention_scale)
    return AttentionDerivative(matrix=ja @ jm, layer=layer, head=head)


def sa_input_jacobian(trace: ForwardTrace, layer: int) -> InputJacobian:
    """K for one layer: per-head ((X G_i)^T kron I_n) A'_i + G_i^T kron A_i, summed."""
    cfg = trace.config
    _check_nd(cfg.n * cfg.d)
    bt = trace.blocks[layer]
    bp = trace.params.blocks[layer]
    eye_n = np.eye(cfg.n)
    total = np.zeros((cfg.n * cfg.d, cfg.n * cfg.d))
    for i in range(cfg.h):
        w_v, w_o, _ = _head_blocks(bp, i, cfg.d_h)
        g = w_v @ w_o
        a_prime = attention_input_jacobian(trace, layer, i).matrix
        total += kron((bt.x_in @ g).T, eye_n) @ a_prime
        total += kron(g.T, bt.attention[i])
    return InputJacobian(matrix=total, layer=layer, kind="attention")


def mlp_input_jacobian(trace: ForwardTrace, layer: int) -> InputJacobian:
    """K-hat for one layer: (W2^T kron I_n) diag(act'(pre)) (W1^T kron I_n)."""
    cfg = trace.config
    _check_nd(cfg.n * cfg.d)
    if not cfg.use_mlp:
        return InputJacobian(matrix=np.eye(cfg.n * cfg.d), layer=layer, kind="mlp")
    bt = trace.blocks[layer]
    bp = trace.params.blocks[layer]
    eye_n = np.eye(cfg.n)
    act = activation_derivative(cfg.activation, bt.mlp_pre)
    j = kron(bp.mlp_W2.T, eye_n) * act.reshape(-1, order="F")
    j = j @ kron(bp.mlp_W1.T, eye_n)
    return InputJacobian(matrix=j, layer=layer, kind="mlp")


def sa_param_jacobian(trace: ForwardTrace, layer: int) -> ParamJacobian:
    """Derivative of vec(attention-stage output) w.r.t. the layer's flattened
    (W_Q, W_K, W_V, W_O).

    Per head i (with V_i = X W_V,i, T_i = ((X W_V,i W_O,i)^T kron I_n) J_i):
      d/dW_Q,i = T_i (X W_K,i kron X) / s
      d/dW_K,i = T_i (X kron X W_Q,i) K_{d,d_h} / s
      d/dW_V,i = W_O,i^T kron A_i X
    and d/dW_O = I_d kron Concat_i(A_i V_i).
    """
    cfg = trace.config
    n, d, d_h = cfg.n, cfg.d, cfg.d_h
    _check_nd(n * d)
    bt = trace.blocks[layer]
    bp = trace.params.blocks[layer]
    x = bt.x_in
    eye_n = np.eye(n)
    scale = cfg.attention_scale

    dq = np.zeros((n * d, d * d))
    dk = np.zeros((n * d, d * d))
    dv = np.zeros((n * d, d * d))
    concat = np.zeros((n, d))
    k_ddh = commutation_matrix(d, d_h)
    for i in range(cfg.h):
        blk = bp.head_slice(i, d_h)
        w_q, w_k = bp.W_Q[:, blk], bp.W_K[:, blk]
        w_v, w_o = bp.W_V[:, blk], bp.W_O[blk, :]
        a = bt.attention[i]
        v = x @ w_v
        concat[:, blk] = a @ v
        t = kron((x @ w_v @ w_o).T, eye_n) @ softmax_jacobian(a)
        cols = slice(i * d_h * d, (i + 1) * d_h * d)
        dq[:, cols] = t @ kron(x @ w_k, x) / scale
        dk[:, cols] = t @ (kron(x, x @ w_q) @ k_ddh) / scale
        dv[:, cols] = kron(w_o.T, a @ x)
    do = kron(np.eye(d), concat)
    return ParamJacobian(matrix=np.hstack([dq, dk, dv, do]), layer=layer,
                         target="attention")


def mlp_param_jacobian(trace: ForwardTrace, layer: int) -> ParamJacobian:
    """Derivative of vec(MLP-stage output) w.r.t. the layer's flattened
    (W1, b1, W2, b2), each column-major.

    With S = act(pre) = act(X W1 + 1 b1^T) and D = diag(vec(act'(pre))):
      d/dW2 = I_d kron S,   d/db2 = I_d kron 1_n,
      d/dW1 = (W2^T kron I_n) D (I_m kron X),
      d/db1 = (W2^T kron I_n) D (I_m kron 1_n).
    """
    cfg = trace.config
    if not cfg.use_mlp:
        raise ValueError("network has no MLP sub-block")
    n, d, m = cfg.n, cfg.d, cfg.mlp_hidden
    _check_nd(n * d)
    bt = trace.blocks[layer]
    bp = trace.params.blocks[layer]
    x = bt.post_attention
    pre = bt.mlp_pre
    act = activation(cfg.activation, pre)
    ones = np.ones((n, 1))
    left = kron(bp.mlp_W2.T, np.eye(n)) * \
        activation_derivative(cfg.activation, pre).reshape(-1, order="F")
    d_w1 = left @ kron(np.eye(m), x)
    d_b1 = left @ kron(np.eye(m), ones)
    d_w2 = kron(np.eye(d), act)
    d_b2 = kron(np.eye(d), ones)
    return ParamJacobian(matrix=np.hstack([d_w1, d_b1, d_w2, d_b2]),
                         layer=layer, target="mlp")


def _stage_factors(trace: ForwardTrace, layer: int, use_skip: bool,
                   ) -> tuple[np.ndarray, np.ndarray]:
    """(MLP-stage, attention-stage) input-Jacobian factors of one block."""
    nd = trace.config.n * trace.config.d
    eye = np.eye(nd)
    k_attn = sa_input_jacobian(trace, layer).matrix
    if trace.config.use_mlp:
        k_mlp = mlp_input_jacobian(trace, layer).matrix
        mlp_factor = k_mlp + eye if use_skip else k_mlp
    else:
        mlp_factor = eye
    attn_factor = k_attn + eye if use_skip else k_attn
    return mlp_factor, attn_factor


def block_chain_jacobian(trace: ForwardTrace, layer: int,
                         use_skip: bool | None = None,
                         target: str = "attention") -> ParamJacobian:
    """Derivative of the final network output w.r.t. layer ``layer``'s
    attention (or MLP) parameters: downstream chain factors times the local
    parameter Jacobian.

    With skips each chain factor is (K-hat_i + I)(K_i + I); without, it is
    K-hat_i K_i.  For the attention target the chain additionally passes
    through layer ``layer``'s own MLP stage.  ``use_skip`` defaults to the
    trace's own configuration (the only setting for which the product equals
    the true derivative).
    """
    cfg = trace.config
    if not 0 <= layer < cfg.L:
        raise IndexError(f"layer {layer} out of range for L={cfg.L}")
    if target not in ("attention", "mlp"):
        raise ValueError(f"unknown target {target!r}")
    if use_skip is None:
        use_skip = cfg.use_skip
    if target == "attention":
        j = sa_param_jacobian(trace, layer).matrix
        mlp_factor, _ = _stage_factors(trace, layer, use_skip)
        j = mlp_factor @ j
    else:
        j = mlp_param_jacobian(trace, layer).matrix
    for i in range(layer + 1, cfg.L):
        mlp_factor, attn_factor = _stage_factors(trace, i, use_skip)
        j = mlp_factor @ (attn_factor @ j)
    return ParamJacobian(matrix=j, layer=layer, target=target)


def batch_param_jacobian(inputs: list[np.ndarray], params: NetworkParams,
                         config: ModelConfig, layer: int,
                         target: str = "attention") -> ParamJacobian:
    """Vertically stacked per-sample chain Jacobians, rows in sample order."""
    if not inputs:
        raise ValueError("batch must contain at least one sample")
    pieces = []
    for x0 in inputs:
        trace = network_forward(x0, params, config)
        pieces.append(block_chain_jacobian(trace, layer, target=target).matrix)
    return ParamJacobian(matrix=np.vstack(pieces), layer=layer, target=target)


def finite_difference_jacobian(f: Callable[[np.ndarray], np.ndarray],
                               x0: np.ndarray, step: float | None = None) -> np.ndarray:
    """Central-difference Jacobian of a vector-valued f at x0.

    Per-coordinate step h_j = step * max(1, |x0_j|) with the cube-root-of-eps
    default.  Non-finite evaluations raise, naming the offending coordinate.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    h0 = FD_STEP if step is None else step
    f0 = np.asarray(f(x0), dtype=float).ravel()
    out = np.empty((f0.size, x0.size))
    for j in range(x0.size):
        h = h0 * max(1.0, abs(x0[j]))
        xp = x0.copy()
        xm = x0.copy()
        xp[j] += h
        xm[j] -= h
        fp = np.asarray(f(xp), dtype=float).ravel()
        fm = np.asarray(f(xm), dtype=float).ravel()
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise FloatingPointError(f"non-finite evaluation at coordinate {j}")
        out[:, j] = (fp - fm) / (2.0 * h)
    return out


def relative_frobenius(a: np.ndarray, b: np.ndarray) -> float:
    """||a - b||_F / max(||b||_F, tiny); the agreement metric used everywhere."""
    denom = max(float(np.linalg.norm(b)), 1e-300)
    return float(np.linalg.norm(a - b)) / denom


# ---------------------------------------------------------------------------
# Finite-difference verification suite
# ---------------------------------------------------------------------------


def flatten_attention_params(bp: BlockParams) -> np.ndarray:
    """(W_Q, W_K, W_V, W_O) flattened column-major, in that order."""
    from .linalg import vec
    return np.concatenate([vec(bp.W_Q), vec(bp.W_K), vec(bp.W_V), vec(bp.W_O)])


def assign_attention_params(bp: BlockParams, theta: np.ndarray, d: int) -> None:
    """Inverse of :func:`flatten_attention_params` (in place)."""
    from .linalg import unvec
    d2 = d * d
    bp.W_Q = unvec(theta[:d2], d, d)
    bp.W_K = unvec(theta[d2:2 * d2], d, d)
    bp.W_V = unvec(theta[2 * d2:3 * d2], d, d)
    bp.W_O = unvec(theta[3 * d2:], d, d)


def fd_check_instance(n: int, d: int, h: int, layers: int, seed: int,
                      scale: float = 1.0, weight_std: float = 0.3,
                      mlp_hidden: int | None = None) -> dict[str, float]:
    """Relative-Frobenius FD errors of every analytic Jacobian on one random
    instance; used by the gate command and the acceptance suite.

    Gaussian weights of moderate size keep the maps in generic position (tiny
    default-init weights would make relative errors meaningless)."""
    from .linalg import unvec, vec
    from .model import ModelConfig, row_softmax, self_attention

    rng = np.random.default_rng(seed)
    m_hidden = mlp_hidden if mlp_hidden is not None else d
    results: dict[str, float] = {}

    # Softmax Jacobian at generic logits.
    logits = rng.standard_normal((n, n))
    a = row_softmax(logits, 1.0)
    fd = finite_difference_jacobian(
        lambda v: vec(row_softmax(unvec(v, n, n), 1.0)), vec(logits))
    results["softmax_jacobian"] = relative_frobenius(softmax_jacobian(a), fd)

    # Logits Jacobian.
    x = rng.standard_normal((n, d))
    p = rng.standard_normal((d, d))
    fd = finite_difference_jacobian(
        lambda v: vec(unvec(v, n, d) @ p @ unvec(v, n, d).T / scale), vec(x))
    results["logits_input_jacobian"] = relative_frobenius(
        logits_input_jacobian(x, p, scale), fd)

    def random_network(use_skip: bool):
        cfg = ModelConfig(L=layers, n=n, d=d, h=h, attention_scale=scale,
                          activation="gelu", use_skip=use_skip, use_mlp=True,
                          mlp_hidden=m_hidden)
        blocks = []
        for _ in range(layers):
            blocks.append(BlockParams(
                W_Q=weight_std * rng.standard_normal((d, d)),
                W_K=weight_std * rng.standard_normal((d, d)),
                W_V=weight_std * rng.standard_normal((d, d)),
                W_O=weight_std * rng.standard_normal((d, d)),
                mlp_W1=weight_std * rng.standard_normal((d, m_hidden)),
                mlp_b1=0.1 * rng.standard_normal(m_hidden),
                mlp_W2=weight_std * rng.standard_normal((m_hidden, d)),
                mlp_b2=0.1 * rng.standard_normal(d)))
        return cfg, NetworkParams(blocks)

    cfg, params = random_network(use_skip=False)
    x0 = rng.standard_normal((n, d))
    trace = network_forward(x0, params, cfg)

    # Attention-matrix derivative of head 0, layer 0.
    bp = params.blocks[0]
    p0 = bp.W_Q[:, :cfg.d_h] @ bp.W_K[:, :cfg.d_h].T

    def head_attention(v):
        xm = unvec(v, n, d)
        return vec(row_softmax(xm @ p0 @ xm.T / scale, 1.0))

    fd = finite_difference_jacobian(head_attention, vec(x0))
    results["attention_input_jacobian"] = relative_frobenius(
        attention_input_jacobian(trace, 0, 0).matrix, fd)

    # Input Jacobians of both sub-blocks.
    def sa_map(v):
        out, _, _ = self_attention(unvec(v, n, d), bp, cfg)
        return vec(out)

    fd = finite_difference_jacobian(sa_map, vec(x0))
    results["sa_input_jacobian"] = relative_frobenius(
        sa_input_jacobian(trace, 0).matrix, fd)

    from .model import mlp_forward

    def mlp_map(v):
        out, _ = mlp_forward(unvec(v, n, d), bp, cfg)
        return vec(out)

    fd = finite_difference_jacobian(mlp_map, vec(trace.blocks[0].post_attention))
    results["mlp_input_jacobian"] = relative_frobenius(
        mlp_input_jacobian(trace, 0).matrix, fd)

    # Parameter Jacobian of the attention stage.
    theta0 = flatten_attention_params(bp)

    def sa_of_theta(theta):
        saved = (bp.W_Q, bp.W_K, bp.W_V, bp.W_O)
        assign_attention_params(bp, theta, d)
        try:
            out, _, _ = self_attention(x0, bp, cfg)
        finally:
            bp.W_Q, bp.W_K, bp.W_V, bp.W_O = saved
        return vec(out)

    fd = finite_difference_jacobian(sa_of_theta, theta0)
    results["sa_param_jacobian"] = relative_frobenius(
        sa_param_jacobian(trace, 0).matrix, fd)

    # Whole-network chain Jacobian w.r.t. layer-0 attention parameters.
    for use_skip, tag in ((False, "block_chain_jacobian_skipless"),
                          (True, "block_chain_jacobian_skip")):
        cfg_c, params_c = random_network(use_skip=use_skip)
        trace_c = network_forward(x0, params_c, cfg_c)
        bp_c = params_c.blocks[0]
        theta0 = flatten_attention_params(bp_c)

        def net_of_theta(theta):
            saved = (bp_c.W_Q, bp_c.W_K, bp_c.W_V, bp_c.W_O)
            assign_attention_params(bp_c, theta, d)
            try:
                out = network_forward(x0, params_c, cfg_c).output
            finally:
                bp_c.W_Q, bp_c.W_K, bp_c.W_V, bp_c.W_O = saved
            return vec(out)

        fd = finite_difference_jacobian(net_of_theta, theta0)
        results[tag] = relative_frobenius(
            block_chain_jacobian(trace_c, 0).matrix, fd)
    return results
