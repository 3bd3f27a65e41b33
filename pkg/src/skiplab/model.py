"""Forward computation of transformer blocks, with and without skip connections.

The block is the bare analyzed form: no normalization layers, no dropout, no
masking.  A block maps X -> X_attn -> X_out where

    X_attn = [X +] sum_i A_i X W_V,i W_O,i        (attention stage)
    X_out  = [X_attn +] MLP(X_attn)               (MLP stage)

with the bracketed identity paths present only when skips are enabled.  The
attention matrix of head i is the row-softmax of X W_Q,i W_K,i^T X^T divided
by ``attention_scale``.  Forward passes record every intermediate the Jacobian
machinery needs (per-head logits and attention, MLP pre-activations).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

ACTIVATIONS = ("gelu", "relu", "identity")


class DivergenceError(FloatingPointError):
    """A forward intermediate went non-finite; carries the offending layer."""

    def __init__(self, layer: int, stage: str):
        self.layer = layer
        self.stage = stage
        super().__init__(f"non-finite values at layer {layer} ({stage})")


@dataclass(frozen=True)
class ModelConfig:
    """Shape and wiring of the block stack.

    d must equal h * d_h exactly; ``attention_scale`` is the softmax
    temperature applied to the logits (1.0 reproduces the unscaled analysis
    setting, sqrt(d_h) the usual training convention).
    """

    L: int
    n: int
    d: int
    h: int = 1
    attention_scale: float = 1.0
    activation: str = "gelu"
    use_skip: bool = True
    use_mlp: bool = True
    mlp_hidden: int = 0

    def __post_init__(self):
        if self.d % self.h != 0:
            raise ValueError(f"d={self.d} not divisible by h={self.h}")
        if self.attention_scale <= 0.0:
            raise ValueError("attention_scale must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.use_mlp and self.mlp_hidden < 1:
            object.__setattr__(self, "mlp_hidden", 4 * self.d)

    @property
    def d_h(self) -> int:
        return self.d // self.h


@dataclass
class BlockParams:
    """Weights of one block: W_Q/W_K/W_V are d x d with h column-blocks of
    width d_h; W_O is d x d with h row-blocks of height d_h."""

    W_Q: np.ndarray
    W_K: np.ndarray
    W_V: np.ndarray
    W_O: np.ndarray
    mlp_W1: np.ndarray | None = None
    mlp_b1: np.ndarray | None = None
    mlp_W2: np.ndarray | None = None
    mlp_b2: np.ndarray | None = None

    def head_slice(self, head: int, d_h: int) -> slice:
        return slice(head * d_h, (head + 1) * d_h)


@dataclass
class NetworkParams:
    blocks: list[BlockParams]

    def __len__(self) -> int:
        return len(self.blocks)


@dataclass
class BlockTrace:
    """Cached intermediates of one block forward pass.

    ``logits`` and ``attention`` hold one n x n matrix per head; logits are
    already divided by the attention scale, so attention = row_softmax(logits)
    at temperature 1.
    """

    x_in: np.ndarray
    logits: list[np.ndarray]
    attention: list[np.ndarray]
    post_attention: np.ndarray
    mlp_pre: np.ndarray | None
    output: np.ndarray


@dataclass
class ForwardTrace:
    x0: np.ndarray
    blocks: list[BlockTrace]
    config: ModelConfig
    params: NetworkParams = field(repr=False, default=None)

    @property
    def output(self) -> np.ndarray:
        return self.blocks[-1].output if self.blocks else self.x0


def activation(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "identity":
        return x
    raise ValueError(f"unknown activation {name!r}")


def activation_derivative(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        cdf = 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        pdf = np.exp(-0.5 * x * x) / np.sqrt(2.0 * np.pi)
        return cdf + x * pdf
    if name == "relu":
        return (x > 0.0).astype(float)
    if name == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


def row_softmax(m: np.ndarray, temperature: float = 1.0) -> np.ndarray:
    """Row-wise softmax of m / temperature, stabilized by row-max subtraction."""
    if temperature <= 0.0:
        raise ValueError("temperature must be positive")
    z = np.asarray(m, dtype=float) / temperature
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def attention_logits(x: np.ndarray, params: BlockParams, head: int,
                     config: ModelConfig) -> np.ndarray:
    """Scaled logits of one head: X W_Q,i W_K,i^T X^T / attention_scale."""
    if not 0 <= head < config.h:
        raise IndexError(f"head {head} out of range for h={config.h}")
    cols = params.head_slice(head, config.d_h)
    q = x @ params.W_Q[:, cols]
    k = x @ params.W_K[:, cols]
    return (q @ k.T) / config.attention_scale


def self_attention(x: np.ndarray, params: BlockParams, config: ModelConfig,
                   ) -> tuple[np.ndarray, list[np.ndarray], list[np.ndarray]]:
    """Multi-head self-attention sum_i A_i X W_V,i W_O,i.

    Returns (output, per-head logits, per-head attention matrices).  The sum
    form is algebraically the concat-then-project form: the concatenated
    A_i V_i picks up exactly the i-th row-block of W_O.
    """
    out = np.zeros_like(x)
    logits, attns = [], []
    for i in range(config.h):
        m = attention_logits(x, params, i, config)
        a = row_softmax(m, 1.0)
        blk = params.head_slice(i, config.d_h)
        out += a @ (x @ params.W_V[:, blk]) @ params.W_O[blk, :]
        logits.append(m)
        attns.append(a)
    return out, logits, attns


def mlp_forward(x: np.ndarray, params: BlockParams, config: ModelConfig,
                ) -> tuple[np.ndarray, np.ndarray]:
    """Two-layer MLP with biases; returns (output, pre-activations)."""
    pre = x @ params.mlp_W1 + params.mlp_b1
    out = activation(config.activation, pre) @ params.mlp_W2 + params.mlp_b2
    return out, pre


def block_forward(x: np.ndarray, params: BlockParams, config: ModelConfig) -> BlockTrace:
    """One block: attention stage then MLP stage, each with an optional skip."""
    sa, logits, attns = self_attention(x, params, config)
    x_attn = x + sa if config.use_skip else sa
    if config.use_mlp:
        mlp_out, pre = mlp_forward(x_attn, params, config)
        x_out = x_attn + mlp_out if config.use_skip else mlp_out
    else:
        pre = None
        x_out = x_attn
    return BlockTrace(x_in=x, logits=logits, attention=attns,
                      post_attention=x_attn, mlp_pre=pre, output=x_out)


def network_forward(x0: np.ndarray, params: NetworkParams, config: ModelConfig) -> ForwardTrace:
    """Apply all L blocks, caching every intermediate.

    Raises :class:`DivergenceError` naming the first layer whose output goes
    non-finite (deep skipless stacks can overflow); never returns NaNs.
    """
    x0 = np.asarray(x0, dtype=float)
    if x0.shape != (config.n, config.d):
        raise ValueError(f"input shape {x0.shape} != (n, d) = {(config.n, config.d)}")
    if len(params.blocks) != config.L:
        raise ValueError(f"{len(params.blocks)} blocks for L={config.L}")
    traces = []
    x = x0
    for layer, bp in enumerate(params.blocks):
        bt = block_forward(x, bp, config)
        if not np.all(np.isfinite(bt.post_attention)):
            raise DivergenceError(layer, "attention stage")
        if not np.all(np.isfinite(bt.output)):
            raise DivergenceError(layer, "mlp stage")
        traces.append(bt)
        x = bt.output
    return ForwardTrace(x0=x0, blocks=traces, config=config, params=params)
