"""Post-hoc analyses of trained models: rate curves, membership maps, memory profiles.

The layer-wise rate curve evaluates the decoupled variational rate on each
attention block's output under that block's own grouping: memberships are
recomputed from the block output through the block's membership path, and
the group dictionaries are the value projection's head blocks. Output
tokens are normalized to unit length first; without that, residual-stream
growth across depth swamps the geometry the rate is meant to measure. The
rate coefficient is evaluated in the layer's folded form (``d/eps^2 = 1``).
A stack that compresses its tokens shows a broadly non-increasing curve.

Membership maps reshape each head's token weights at a chosen block into the
patch grid and render them as 8-bit grayscale (PGM, P5) with per-head
min-max normalization, plus a JSON sidecar holding the raw values.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import (
    DmsaLayerParams,
    MhsaLayerParams,
    TssaLayerParams,
    dmsa_layer_forward,
    mhsa_layer_forward,
    rope_precompute,
    rotate_pairs,
    tssa_layer_forward,
)
from .coding_rate import CodingRateConfig, Membership, SubspaceBank, rate_variational_decoupled
from .errors import FormatError, InvalidInput
from .functional import gelu, relu, sigmoid
from .memcount import count_floats
from .model import ModelConfig, model_forward
from .rng import stream
from .sparsify import ActivationKind, soft_threshold_matrix

PGM_MAXVAL = 255


@dataclass(frozen=True)
class RateCurve:
    """Per-block variational rates averaged over samples."""

    values: np.ndarray
    samples: int

    def nonincreasing_fraction(self) -> float:
        """Fraction of consecutive block pairs where the rate does not increase."""
        if self.values.size < 2:
            return 1.0
        diffs = np.diff(self.values)
        return float(np.mean(diffs <= 1e-12))


@dataclass(frozen=True)
class MembershipMap:
    """One block's per-head token weights arranged on the patch grid."""

    layer: int
    grid: tuple[int, int]
    values: np.ndarray  # (heads, grid_h, grid_w)

    def __post_init__(self) -> None:
        h, w = self.grid
        if self.values.ndim != 3 or self.values.shape[1:] != (h, w):
            raise InvalidInput(
                f"membership map values {self.values.shape} do not match grid {self.grid}"
            )


def infer_grid(n_tokens: int) -> tuple[int, int]:
    """Near-square factorization of the token count, rows x cols."""
    if n_tokens < 1:
        raise InvalidInput(f"need at least one token, got {n_tokens}")
    for rows in range(int(math.isqrt(n_tokens)), 0, -1):
        if n_tokens % rows == 0:
            return rows, n_tokens // rows
    return 1, n_tokens


def _detached(params: dict[str, ad.Tensor]) -> dict[str, ad.Tensor]:
    return {name: ad.Tensor(p.data) for name, p in params.items()}


def _block_rate(
    config: ModelConfig,
    params: dict[str, ad.Tensor],
    block: int,
    tokens_nd: np.ndarray,
) -> float:
    """Decoupled variational rate of one block's output under its own grouping."""
    d, K = config.dim, config.heads
    p = d // K
    prefix = f"blocks.{block}.attn"
    unit = tokens_nd / np.maximum(np.linalg.norm(tokens_nd, axis=1, keepdims=True), 1e-12)

    value_w = params[f"{prefix}.value_proj"].data  # (d, d), columns index output
    bank = SubspaceBank(tuple(value_w[:, k * p : (k + 1) * p] for k in range(K)))

    if config.attention.value == "dmsa":
        memb_w = params[f"{prefix}.membership_proj"].data  # (d, K)
        path_in = tokens_nd
        if config.use_rope:
            table = rope_precompute(tokens_nd.shape[0], d)
            path_in = rotate_pairs(tokens_nd, table)
        raw = (path_in @ memb_w).T  # (K, n)
        if config.sparsity_axis in ("token", "both") and (
            config.activation is ActivationKind.SOFT_THRESHOLD
        ):
            Pi, _, _ = soft_threshold_matrix(raw)
        elif config.activation in (ActivationKind.SOFT_THRESHOLD, ActivationKind.SIGMOID):
            Pi = sigmoid(raw)
        elif config.activation is ActivationKind.RELU:
            Pi = relu(raw)
        else:
            Pi = np.clip(gelu(raw), 0.0, None)  # rate math needs nonnegative weights
    else:
        # TSSA grouping: softmax over heads of normalized projection energy.
        w = (tokens_nd @ value_w).reshape(-1, K, p).transpose(1, 0, 2)
        norms = np.sqrt(np.sum(w * w, axis=1, keepdims=True))
        units = w / np.maximum(norms, 1e-12)
        energy = np.sum(units * units, axis=2)
        shifted = energy - energy.max(axis=0, keepdims=True)
        e = np.exp(shifted)
        Pi = e / e.sum(axis=0, keepdims=True)

    cfg = CodingRateConfig(epsilon=float(np.sqrt(d)))  # folded coefficient, f(x) = log(1+x)
    return rate_variational_decoupled(unit.T, Membership(Pi), bank, cfg)


def layer_rate_curve(
    config: ModelConfig,
    params: dict[str, ad.Tensor],
    tokens: np.ndarray,
    max_samples: int | None = None,
    batch: int = 64,
) -> RateCurve:
    """Average per-block rate over up to ``max_samples`` sequences."""
    tokens = np.asarray(tokens, dtype=np.float64)
    if tokens.ndim != 3:
        raise InvalidInput(f"tokens must be (N, n, input_dim), got ndim={tokens.ndim}")
    if max_samples is not None:
        tokens = tokens[:max_samples]
    if tokens.shape[0] == 0:
        raise InvalidInput("rate curve needs at least one sample")
    if config.depth == 0:
        raise InvalidInput("rate curve needs at least one block")
    detached = _detached(params)
    totals = np.zeros(config.depth)
    for start in range(0, tokens.shape[0], batch):
        chunk = tokens[start : start + batch]
        capture: list[dict] = []
        model_forward(config, detached, chunk, capture=capture)
        for b, entry in enumerate(capture):
            after = entry["tokens_after_attention"]  # (B, n+1, d)
            for s in range(after.shape[0]):
                totals[b] += _block_rate(config, detached, b, after[s])
    return RateCurve(values=totals / tokens.shape[0], samples=int(tokens.shape[0]))


def membership_map(
    config: ModelConfig,
    params: dict[str, ad.Tensor],
    sample_tokens: np.ndarray,
    layer: int,
    grid: tuple[int, int] | None = None,
) -> MembershipMap:
    """Per-head membership weights of one sample at one block.

    The class token is dropped; the remaining weights reshape to ``grid``
    (near-square by default, or the patch grid when the token count matches).
    """
    sample_tokens = np.asarray(sample_tokens, dtype=np.float64)
    if sample_tokens.ndim != 2:
        raise InvalidInput(f"sample must be (n, input_dim), got ndim={sample_tokens.ndim}")
    if not 0 <= layer < config.depth:
        raise InvalidInput(f"layer {layer} out of range for depth {config.depth}")
    capture: list[dict] = []
    model_forward(config, _detached(params), sample_tokens[None], capture=capture)
    Pi = capture[layer]["membership"][0]  # (K, n+1) including the class token
    patch_weights = Pi[:, 1:]
    n = patch_weights.shape[1]
    if grid is None:
        side = config.image_size // config.patch_size
        grid = (side, side) if side * side == n else infer_grid(n)
    rows, cols = grid
    if rows * cols != n:
        raise InvalidInput(f"grid {grid} does not cover {n} tokens")
    return MembershipMap(layer=layer, grid=grid, values=patch_weights.reshape(-1, rows, cols))


def to_grayscale(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to uint8; a constant map renders mid-gray."""
    lo, hi = float(np.min(values)), float(np.max(values))
    if hi - lo < 1e-12:
        return np.full(values.shape, 128, dtype=np.uint8)
    scaled = (values - lo) / (hi - lo) * PGM_MAXVAL
    return np.round(scaled).astype(np.uint8)


def write_pgm(path: str, image: np.ndarray) -> None:
    """Write a binary (P5) grayscale image."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise InvalidInput("PGM writer expects a 2-d uint8 array")
    rows, cols = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{cols} {rows}\n{PGM_MAXVAL}\n".encode("ascii"))
        fh.write(image.tobytes())


def read_pgm(path: str) -> np.ndarray:
    """Read a binary (P5) grayscale image written by :func:`write_pgm`."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(b"P5"):
        raise FormatError(f"{path} is not a binary PGM file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path} has a truncated PGM header")
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    cols, rows, maxval = fields
    if maxval != PGM_MAXVAL:
        raise FormatError(f"{path} has unsupported maxval {maxval}")
    if len(blob) - pos < rows * cols:
        raise FormatError(f"{path} payload is truncated")
    data = np.frombuffer(blob, dtype=np.uint8, count=rows * cols, offset=pos)
    return data.reshape(rows, cols).copy()


def write_membership_artifacts(out_dir: str, mmap: MembershipMap) -> list[str]:
    """Write one PGM per head plus a JSON sidecar with the raw values."""
    os.makedirs(out_dir, exist_ok=True)
    written = []
    for k in range(mmap.values.shape[0]):
        path = os.path.join(out_dir, f"head_{k:02d}.pgm")
        write_pgm(path, to_grayscale(mmap.values[k]))
        written.append(path)
    sidecar = os.path.join(out_dir, "membership.json")
    with open(sidecar, "w", encoding="utf-8") as fh:
        json.dump(
            {
                "layer": mmap.layer,
                "grid": list(mmap.grid),
                "heads": mmap.values.shape[0],
                "values": mmap.values.tolist(),
            },
            fh,
            sort_keys=True,
            indent=1,
        )
        fh.write("\n")
    written.append(sidecar)
    return written


# ---------------------------------------------------------------------------
# Memory profiling
# ---------------------------------------------------------------------------

PROFILE_OPS = ("dmsa", "tssa", "mhsa")


def profile_attention_memory(
    op: str,
    token_counts: list[int],
    dim: int = 64,
    heads: int = 8,
    seed: int = 0,
) -> list[tuple[str, int, int]]:
    """Counted activation floats of one forward pass at each token count.

    Layer math runs in float32; the counter tallies every intermediate array
    the operator materializes, so softmax attention shows its quadratic
    score cost while the second-moment operators stay linear.
    """
    if op not in PROFILE_OPS:
        raise InvalidInput(f"op must be one of {PROFILE_OPS}, got {op!r}")
    if not token_counts:
        raise InvalidInput("token_counts must be nonempty")
    if any(n < 1 for n in token_counts):
        raise InvalidInput("token counts must be positive")
    rng = stream(seed, f"profile-{op}")
    d = dim
    rows: list[tuple[str, int, int]] = []
    scale = 1.0 / np.sqrt(d)
    max_n = max(token_counts)
    if op == "dmsa":
        params = DmsaLayerParams(
            value_proj=rng.normal(size=(d, d)) * scale,
            membership_proj=rng.normal(size=(heads, d)) * scale,
            out_proj=rng.normal(size=(d, d)) * scale,
            out_bias=np.zeros(d),
            rope_table=rope_precompute(max_n, d),
            topk=min(4, heads),
        )
    elif op == "tssa":
        params = TssaLayerParams(
            value_proj=rng.normal(size=(d, d)) * scale,
            out_proj=rng.normal(size=(d, d)) * scale,
            out_bias=np.zeros(d),
            heads=heads,
        )
    else:
        params = MhsaLayerParams(
            q_proj=(rng.normal(size=(d, d)) * scale).astype(np.float32),
            k_proj=(rng.normal(size=(d, d)) * scale).astype(np.float32),
            v_proj=(rng.normal(size=(d, d)) * scale).astype(np.float32),
            out_proj=(rng.normal(size=(d, d)) * scale).astype(np.float32),
            out_bias=np.zeros(d, dtype=np.float32),
            heads=heads,
        )
    for n in token_counts:
        tokens = rng.normal(size=(n, d)).astype(np.float32)
        with count_floats() as counter:
            if op == "dmsa":
                dmsa_layer_forward(tokens, params)
            elif op == "tssa":
                tssa_layer_forward(tokens, params)
            else:
                mhsa_layer_forward(tokens, params)
        rows.append((op, n, counter.peak_floats))
    return rows
