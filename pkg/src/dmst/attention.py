"""Attention operators built on coding-rate descent, plus reference baselines.

The central operator, DMSA (decoupled membership-subspace attention), is the
exact negation of the token gradient of the decoupled variational rate: each
application nudges every token toward a sparse union of subspaces selected by
an externally supplied membership. The layer form realizes the same
computation with learned projections, a soft-threshold head gate, sigmoid
memberships, and rotary position information on the membership path only.

Two baselines share the file: TSSA (token-statistics attention with
membership coupled to the value projections) and standard multi-head softmax
attention with its explicit quadratic score matrix. All single-sample layer
forwards register their intermediates with :mod:`dmst.memcount` so memory
contracts can be asserted on counted floats.

Layer forwards take row-major ``(token, channel)`` inputs; the pure math
operators keep the ``d x n`` column convention of :mod:`dmst.coding_rate`.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .coding_rate import (
    CodingRateConfig,
    Membership,
    SubspaceBank,
    TokenMatrix,
    check_tokens,
    grad_rate_wrt_tokens,
)
from .errors import InvalidInput, NumericalFault
from .functional import gelu, relu, sigmoid
from .memcount import track
from .sparsify import ActivationKind, soft_threshold_matrix

# Guard added to membership normalizers before division, kept verbatim from
# the layer definition so layer and operator agree only up to ~1e-8/n_k.
MEMBERSHIP_EPS = 1e-8

ROPE_BASE = 10000.0


class AttentionKind(Enum):
    DMSA = "dmsa"
    TSSA = "tssa"
    MHSA = "mhsa"
    GATED_CHANNEL = "gated"


def tokens_to_columns(tokens: np.ndarray) -> TokenMatrix:
    """Convert a row-major ``(token, channel)`` sequence to ``d x n`` columns."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 2:
        raise InvalidInput(f"token sequence must be 2-d, got ndim={tokens.ndim}")
    return tokens.T.copy()


def columns_to_tokens(Z: TokenMatrix) -> np.ndarray:
    """Inverse of :func:`tokens_to_columns`."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise InvalidInput(f"token matrix must be 2-d, got ndim={Z.ndim}")
    return Z.T.copy()


# ---------------------------------------------------------------------------
# Rotary position information
# ---------------------------------------------------------------------------


def rope_precompute(max_len: int, dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotation angle table for rotary position encoding.

    Returns ``(max_len, dim // 2)`` angles ``m * theta_j`` with
    ``theta_j = base ** (-2 j / dim)``; ``dim`` must be even because channels
    rotate in adjacent pairs.
    """
    if max_len < 1:
        raise InvalidInput(f"max_len must be positive, got {max_len}")
    if dim < 2 or dim % 2 != 0:
        raise InvalidInput(f"rotary dim must be a positive even number, got {dim}")
    freqs = base ** (-np.arange(0, dim, 2, dtype=np.float64) / dim)
    positions = np.arange(max_len, dtype=np.float64)
    return np.outer(positions, freqs)


def rotate_pairs(tokens: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Rotate adjacent channel pairs of row-major tokens by per-position angles.

    Row ``i`` of ``tokens`` is rotated with row ``i`` of ``table``; the caller
    slices the table to select positions.
    """
    tokens = np.asarray(tokens, dtype=np.float64)
    n, d = tokens.shape
    if table.shape[0] < n:
        raise InvalidInput(f"rope table covers {table.shape[0]} positions, need {n}")
    if table.shape[1] * 2 != d:
        raise InvalidInput(f"rope table is for dim {table.shape[1] * 2}, tokens have {d}")
    angles = table[:n]
    cos, sin = np.cos(angles), np.sin(angles)
    even, odd = tokens[:, 0::2], tokens[:, 1::2]
    out = np.empty_like(tokens)
    out[:, 0::2] = even * cos - odd * sin
    out[:, 1::2] = even * sin + odd * cos
    return out


def rope_apply(Z: TokenMatrix, table: np.ndarray) -> TokenMatrix:
    """Apply rotary position encoding to a ``d x n`` token matrix.

    Column ``i`` receives the position-``i`` rotation. Norm-preserving per
    token, and inner products depend only on position differences.
    """
    Z = check_tokens(Z)
    return rotate_pairs(Z.T, np.asarray(table, dtype=np.float64)).T


# ---------------------------------------------------------------------------
# Math-form operator
# ---------------------------------------------------------------------------


def dmsa_operator(
    Z: TokenMatrix, Pi: Membership, U_S: SubspaceBank, cfg: CodingRateConfig
) -> np.ndarray:
    """Decoupled membership-subspace attention in math form.

    Exactly the negation of ``grad_rate_wrt_tokens``: the direction that
    compresses each token toward the sparse subspaces it is assigned to.
    """
    return -grad_rate_wrt_tokens(Z, Pi, U_S, cfg)


def token_update(
    Z: TokenMatrix,
    Pi: Membership,
    U_S: SubspaceBank,
    cfg: CodingRateConfig,
    step: float,
) -> np.ndarray:
    """One unrolled descent step ``Z - step * grad`` on the decoupled rate."""
    if not np.isfinite(step):
        raise InvalidInput(f"step must be finite, got {step}")
    return Z - step * grad_rate_wrt_tokens(Z, Pi, U_S, cfg)


# ---------------------------------------------------------------------------
# DMSA layer
# ---------------------------------------------------------------------------


@dataclass
class DmsaLayerParams:
    """Learned projections and switches of one DMSA layer.

    ``value_proj`` rows split into ``K`` head blocks of ``p = d // K`` rows;
    ``membership_proj`` maps a token to one raw membership score per head.
    ``sparsity_axis`` selects where the soft threshold acts: ``head`` gates
    whole heads from the token-mean of the membership scores, ``token``
    projects each head's scores across tokens, ``both`` does both.
    ``epsilon_fold`` folds the rate coefficient ``d/eps^2`` to one inside the
    second-moment rescaling, which is the layer's native form.
    """

    value_proj: np.ndarray
    membership_proj: np.ndarray
    out_proj: np.ndarray
    out_bias: np.ndarray
    rope_table: np.ndarray | None = None
    sparsity_axis: str = "head"
    topk: int = 4
    activation: ActivationKind = ActivationKind.SOFT_THRESHOLD
    epsilon_fold: bool = True
    epsilon: float = 1.0

    def __post_init__(self) -> None:
        self.value_proj = np.asarray(self.value_proj, dtype=np.float64)
        self.membership_proj = np.asarray(self.membership_proj, dtype=np.float64)
        self.out_proj = np.asarray(self.out_proj, dtype=np.float64)
        self.out_bias = np.asarray(self.out_bias, dtype=np.float64)
        d = self.value_proj.shape[0]
        if self.value_proj.shape != (d, d) or self.out_proj.shape != (d, d):
            raise InvalidInput("value_proj and out_proj must be square d x d")
        if self.membership_proj.ndim != 2 or self.membership_proj.shape[1] != d:
            raise InvalidInput("membership_proj must be K x d")
        if self.out_bias.shape != (d,):
            raise InvalidInput("out_bias must have shape (d,)")
        if d % self.heads != 0:
            raise InvalidInput(f"dim {d} is not divisible by {self.heads} heads")
        if self.sparsity_axis not in ("head", "token", "both"):
            raise InvalidInput(f"unknown sparsity_axis {self.sparsity_axis!r}")

    @property
    def dim(self) -> int:
        return self.value_proj.shape[0]

    @property
    def heads(self) -> int:
        return self.membership_proj.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def _activate(raw: np.ndarray, kind: ActivationKind) -> np.ndarray:
    if kind is ActivationKind.SIGMOID:
        return sigmoid(raw)
    if kind is ActivationKind.RELU:
        return relu(raw)
    if kind is ActivationKind.GELU:
        return gelu(raw)
    raise InvalidInput(f"no elementwise form for activation {kind!r}")


def head_gate(gate_scores: np.ndarray, kind: ActivationKind, topk: int) -> np.ndarray:
    """Per-head mask from token-averaged membership scores.

    The soft-threshold kind projects onto the simplex with a top-k support;
    other kinds apply elementwise (used by the activation ablations).
    """
    if kind is ActivationKind.SOFT_THRESHOLD:
        k = min(int(topk), gate_scores.shape[-1])
        out, _, _ = soft_threshold_matrix(gate_scores[None, :], topk=k)
        return out[0]
    return _activate(gate_scores, kind)


def dmsa_layer_forward(
    tokens: np.ndarray,
    params: DmsaLayerParams,
    *,
    membership_override: np.ndarray | None = None,
    head_mask_override: np.ndarray | None = None,
    return_state: bool = False,
):
    """One DMSA layer on a single ``(n, d)`` token sequence.

    Pipeline: project values and split into heads; rotate a copy of the
    input for the membership path; score memberships per head; gate heads
    with a soft threshold of the token-mean scores; rescale each head
    channel by ``1 / (1 + dots)`` where ``dots`` is the membership-weighted
    second moment of the masked head features; emit the negated, membership
    weighted, rescaled features through the output projection. Linear in the
    token count. The overrides substitute fixed memberships or head masks
    for consistency harnesses.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInput(f"tokens must be (n, d), got ndim={x.ndim}")
    n, d = x.shape
    if d != params.dim:
        raise InvalidInput(f"tokens have dim {d}, layer expects {params.dim}")
    if not np.all(np.isfinite(x)):
        raise InvalidInput("tokens contain non-finite entries")
    K, p = params.heads, params.head_dim

    values = track(x @ params.value_proj.T)
    w = values.reshape(n, K, p).transpose(1, 0, 2)  # (K, n, p) head view

    rotated = track(rotate_pairs(x, params.rope_table)) if params.rope_table is not None else x
    scores = track(rotated @ params.membership_proj.T)  # (n, K)

    if head_mask_override is not None:
        mask = np.asarray(head_mask_override, dtype=np.float64)
        if mask.shape != (K,):
            raise InvalidInput(f"head mask override must have shape ({K},)")
    elif params.sparsity_axis in ("head", "both"):
        gate = track(scores.mean(axis=0))
        mask = track(head_gate(gate, params.activation, params.topk))
    else:
        mask = np.ones(K)

    w = track(w * mask[:, None, None])

    if membership_override is not None:
        Pi = np.asarray(membership_override, dtype=np.float64)
        if Pi.shape != (K, n):
            raise InvalidInput(f"membership override must have shape ({K}, {n})")
    else:
        raw = scores.T  # (K, n)
        if params.sparsity_axis in ("token", "both") and (
            params.activation is ActivationKind.SOFT_THRESHOLD
        ):
            Pi, _, _ = soft_threshold_matrix(raw)
        elif params.activation is ActivationKind.SOFT_THRESHOLD:
            Pi = sigmoid(raw)  # head-axis layers keep sigmoid memberships
        else:
            Pi = _activate(raw, params.activation)
        Pi = track(np.ascontiguousarray(Pi))

    norm = track(Pi / (Pi.sum(axis=1, keepdims=True) + MEMBERSHIP_EPS))
    dots = track(np.matmul(norm[:, None, :], w * w))  # (K, 1, p)
    coeff = 1.0 if params.epsilon_fold else d / params.epsilon**2
    attn = track(coeff / (1.0 + coeff * dots))
    out_heads = track(-(w * Pi[:, :, None]) * attn)

    merged = track(out_heads.transpose(1, 0, 2).reshape(n, d))
    out = track(merged @ params.out_proj.T + params.out_bias)
    if not np.all(np.isfinite(out)):
        raise NumericalFault(
            f"DMSA layer produced non-finite output (axis={params.sparsity_axis}, "
            f"activation={params.activation.value})"
        )
    if return_state:
        state = {"membership": Pi, "head_mask": mask, "dots": dots[:, 0, :], "scores": scores}
        return out, state
    return out


# ---------------------------------------------------------------------------
# TSSA baseline
# ---------------------------------------------------------------------------


@dataclass
class TssaLayerParams:
    """Token-statistics attention with membership coupled to the value heads.

    The temperature is a fixed constant rather than a learned parameter, so
    a TSSA stack differs from a DMSA stack by exactly the membership
    projection (K x d floats per layer).
    """

    value_proj: np.ndarray
    out_proj: np.ndarray
    out_bias: np.ndarray
    heads: int
    temperature: float = 1.0

    def __post_init__(self) -> None:
        self.value_proj = np.asarray(self.value_proj, dtype=np.float64)
        self.out_proj = np.asarray(self.out_proj, dtype=np.float64)
        self.out_bias = np.asarray(self.out_bias, dtype=np.float64)
        d = self.value_proj.shape[0]
        if self.value_proj.shape != (d, d) or self.out_proj.shape != (d, d):
            raise InvalidInput("value_proj and out_proj must be square d x d")
        if d % self.heads != 0:
            raise InvalidInput(f"dim {d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.value_proj.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def tssa_layer_forward(tokens: np.ndarray, params: TssaLayerParams) -> np.ndarray:
    """Token-statistics attention on a single ``(n, d)`` sequence.

    Memberships are a softmax over heads of per-token projection energies
    (after normalizing each head channel over tokens), so membership and
    subspaces are coupled; the second-moment rescaling matches the DMSA
    layer. Linear in the token count.
    """
    x = np.asarray(tokens, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise InvalidInput(f"tokens must be (n, {params.dim})")
    n, d = x.shape
    K, p = params.heads, params.head_dim

    values = track(x @ params.value_proj.T)
    w = values.reshape(n, K, p).transpose(1, 0, 2)  # (K, n, p)

    norms = track(np.sqrt(np.sum(w * w, axis=1, keepdims=True)))
    w_unit = track(w / np.maximum(norms, 1e-12))
    energy = track(np.sum(w_unit * w_unit, axis=2))  # (K, n)
    shifted = params.temperature * energy
    shifted = shifted - shifted.max(axis=0, keepdims=True)
    expd = track(np.exp(shifted))
    Pi = track(expd / expd.sum(axis=0, keepdims=True))  # (K, n), columns sum to 1

    norm = track(Pi / (Pi.sum(axis=1, keepdims=True) + MEMBERSHIP_EPS))
    dots = track(np.matmul(norm[:, None, :], w * w))
    attn = track(1.0 / (1.0 + dots))
    out_heads = track(-(w * Pi[:, :, None]) * attn)
    merged = track(out_heads.transpose(1, 0, 2).reshape(n, d))
    out = track(merged @ params.out_proj.T + params.out_bias)
    if not np.all(np.isfinite(out)):
        raise NumericalFault("TSSA layer produced non-finite output")
    return out


# ---------------------------------------------------------------------------
# Softmax attention baseline
# ---------------------------------------------------------------------------


@dataclass
class MhsaLayerParams:
    """Standard multi-head softmax attention with explicit score matrices."""

    q_proj: np.ndarray
    k_proj: np.ndarray
    v_proj: np.ndarray
    out_proj: np.ndarray
    out_bias: np.ndarray
    heads: int
    chunk: int = 1024

    def __post_init__(self) -> None:
        self.q_proj = np.asarray(self.q_proj)
        self.k_proj = np.asarray(self.k_proj)
        self.v_proj = np.asarray(self.v_proj)
        self.out_proj = np.asarray(self.out_proj)
        self.out_bias = np.asarray(self.out_bias)
        d = self.q_proj.shape[0]
        for name, m in (("q_proj", self.q_proj), ("k_proj", self.k_proj),
                        ("v_proj", self.v_proj), ("out_proj", self.out_proj)):
            if m.shape != (d, d):
                raise InvalidInput(f"{name} must be square d x d")
        if d % self.heads != 0:
            raise InvalidInput(f"dim {d} is not divisible by {self.heads} heads")

    @property
    def dim(self) -> int:
        return self.q_proj.shape[0]

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


def mhsa_layer_forward(tokens: np.ndarray, params: MhsaLayerParams) -> np.ndarray:
    """Softmax attention on a single ``(n, d)`` sequence.

    Materializes the ``n x n`` score matrix of every head (in query chunks,
    so resident memory stays bounded while counted activation floats still
    scale quadratically with the token count).
    """
    x = np.asarray(tokens)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise InvalidInput(f"tokens must be (n, {params.dim})")
    n, d = x.shape
    K, p = params.heads, params.head_dim
    scale = 1.0 / np.sqrt(p)

    q = track(x @ params.q_proj.T).reshape(n, K, p).transpose(1, 0, 2)
    k = track(x @ params.k_proj.T).reshape(n, K, p).transpose(1, 0, 2)
    v = track(x @ params.v_proj.T).reshape(n, K, p).transpose(1, 0, 2)

    out_heads = track(np.empty((K, n, p), dtype=x.dtype))
    chunk = max(1, int(params.chunk))
    for h in range(K):
        for start in range(0, n, chunk):
            stop = min(start + chunk, n)
            scores = track(q[h, start:stop] @ k[h].T * scale)  # (m, n)
            scores -= scores.max(axis=1, keepdims=True)
            weights = track(np.exp(scores))
            weights /= weights.sum(axis=1, keepdims=True)
            out_heads[h, start:stop] = track(weights @ v[h])
    merged = track(out_heads.transpose(1, 0, 2).reshape(n, d))
    out = track(merged @ params.out_proj.T + params.out_bias)
    if not np.all(np.isfinite(out)):
        raise NumericalFault("MHSA layer produced non-finite output")
    return out


def mhsa_attention_weights(tokens: np.ndarray, params: MhsaLayerParams) -> np.ndarray:
    """Per-head softmax score matrices ``(K, n, n)``, for direct inspection."""
    x = np.asarray(tokens)
    n = x.shape[0]
    K, p = params.heads, params.head_dim
    q = (x @ params.q_proj.T).reshape(n, K, p).transpose(1, 0, 2)
    k = (x @ params.k_proj.T).reshape(n, K, p).transpose(1, 0, 2)
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(p)
    scores -= scores.max(axis=2, keepdims=True)
    weights = np.exp(scores)
    return weights / weights.sum(axis=2, keepdims=True)


# ---------------------------------------------------------------------------
# Gated channel attention
# ---------------------------------------------------------------------------


@dataclass
class GatedChannelParams:
    """Channel attention with one shared full-space basis and per-head token gates.

    ``full_space`` is the shared ``d x p`` basis; ``membership_proj`` rows
    produce one scalar gate per token and head through a sigmoid.
    """

    full_space: np.ndarray
    membership_proj: np.ndarray
    epsilon_fold: bool = True
    epsilon: float = 1.0

    def __post_init__(self) -> None:
        self.full_space = np.asarray(self.full_space, dtype=np.float64)
        self.membership_proj = np.asarray(self.membership_proj, dtype=np.float64)
        if self.full_space.ndim != 2:
            raise InvalidInput("full_space must be d x p")
        if self.membership_proj.ndim != 2 or (
            self.membership_proj.shape[1] != self.full_space.shape[0]
        ):
            raise InvalidInput("membership_proj must be K x d")

    @property
    def heads(self) -> int:
        return self.membership_proj.shape[0]

    def f_coeff(self) -> float:
        return 1.0 if self.epsilon_fold else self.full_space.shape[0] / self.epsilon**2

    def gates(self, Z: TokenMatrix, override: np.ndarray | None = None) -> np.ndarray:
        if override is not None:
            g = np.asarray(override, dtype=np.float64)
            if g.shape != (self.heads, Z.shape[1]):
                raise InvalidInput(f"gate override must be ({self.heads}, {Z.shape[1]})")
            return g
        return sigmoid(self.membership_proj @ Z)

    def second_moment_diag(self, Z: TokenMatrix, gates: np.ndarray) -> np.ndarray:
        """Per-head diagonal rescalings ``f'`` at the gate-weighted second moments."""
        proj = self.full_space.T @ Z  # (p, n)
        weights = gates / gates.sum(axis=1, keepdims=True)
        coeff = self.f_coeff()
        args = (proj * proj) @ weights.T  # (p, K)
        return coeff / (1.0 + coeff * args.T)  # (K, p)


def gated_channel_forward(
    Z: TokenMatrix, params: GatedChannelParams, *, gate_override: np.ndarray | None = None
) -> np.ndarray:
    """Gated channel attention, evaluated through per-token gated bases.

    For every token ``j`` and head ``k`` the shared basis is scaled by the
    scalar gate ``g_kj`` (the Hadamard-masked basis) and the resulting
    quadratic form is applied to the token. This is the literal masked-basis
    evaluation; :func:`gated_channel_reference` computes the same map in its
    matmul form with the gate applied elementwise to the channel-attention
    output.
    """
    Z = check_tokens(Z)
    gates = params.gates(Z, gate_override)
    dvecs = params.second_moment_diag(Z, gates)
    W = params.full_space
    out = np.zeros_like(Z)
    for k in range(params.heads):
        for j in range(Z.shape[1]):
            gated_basis = W * gates[k, j]
            out[:, j] += gated_basis @ (dvecs[k] * (gated_basis.T @ Z[:, j]))
    return out


def gated_channel_reference(
    Z: TokenMatrix, params: GatedChannelParams, *, gate_override: np.ndarray | None = None
) -> np.ndarray:
    """Matmul form of gated channel attention.

    The per-token scalar gates commute through the quadratic form, turning
    the Hadamard-masked bases into an elementwise (squared) gate on the
    plain channel-attention output: ``sum_k G_k^2 * (W D_k W^T Z)``. With
    all-ones gates this is plain channel attention.
    """
    Z = check_tokens(Z)
    gates = params.gates(Z, gate_override)
    dvecs = params.second_moment_diag(Z, gates)
    W = params.full_space
    out = np.zeros_like(Z)
    for k in range(params.heads):
        channel = W @ (dvecs[k][:, None] * (W.T @ Z))
        out += (gates[k] ** 2)[None, :] * channel
    return out
