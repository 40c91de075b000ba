"""Toy token classifier built from DMSA blocks.

Input tokens (or image patches) are linearly embedded, a class token is
prepended at position zero, and the sequence passes through ``depth``
pre-norm residual blocks: an attention sublayer (DMSA by default, TSSA as a
baseline) followed by a two-layer GELU MLP. The class token's final state
feeds a linear head. All computation runs through :mod:`dmst.autodiff`, so
gradients for every parameter come from the same graph the forward pass
builds.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import autodiff as ad
from .attention import AttentionKind, rope_precompute
from .errors import InvalidInput, NumericalFault
from .rng import stream
from .sparsify import ActivationKind

MLP_HIDDEN_RATIO_DEFAULT = 4.0


@dataclass
class ModelConfig:
    """Architecture and initialization settings of the classifier.

    ``input_dim`` is the feature size of incoming tokens; image input is
    patchified to tokens of size ``patch_size**2 * channels`` first.
    ``max_tokens`` bounds the rotary table length (class token included).
    """

    depth: int = 4
    dim: int = 64
    heads: int = 8
    mlp_ratio: float = MLP_HIDDEN_RATIO_DEFAULT
    patch_size: int = 4
    image_size: int = 16
    channels: int = 1
    num_classes: int = 4
    input_dim: int = 32
    attention: AttentionKind = AttentionKind.DMSA
    sparsity_axis: str = "head"
    topk: int = 4
    activation: ActivationKind = ActivationKind.SOFT_THRESHOLD
    use_rope: bool = True
    max_tokens: int = 4096
    seed: int = 0

    def __post_init__(self) -> None:
        if self.depth < 0:
            raise InvalidInput(f"depth must be nonnegative, got {self.depth}")
        if self.dim <= 0 or self.dim % self.heads != 0:
            raise InvalidInput(f"dim {self.dim} must be a positive multiple of heads {self.heads}")
        if self.dim % 2 != 0:
            raise InvalidInput(f"dim must be even for rotary pairs, got {self.dim}")
        if self.image_size % self.patch_size != 0:
            raise InvalidInput(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.sparsity_axis not in ("head", "token", "both"):
            raise InvalidInput(f"unknown sparsity_axis {self.sparsity_axis!r}")
        if self.attention not in (AttentionKind.DMSA, AttentionKind.TSSA):
            raise InvalidInput(
                f"trainable blocks support DMSA or TSSA attention, got {self.attention}"
            )
        if not 1 <= self.topk:
            raise InvalidInput(f"topk must be positive, got {self.topk}")
        if self.mlp_ratio <= 0:
            raise InvalidInput(f"mlp_ratio must be positive, got {self.mlp_ratio}")

    @property
    def mlp_hidden(self) -> int:
        return int(round(self.dim * self.mlp_ratio))

    def patch_grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side


def config_to_dict(config: ModelConfig) -> dict:
    out = {}
    for f in fields(config):
        value = getattr(config, f.name)
        if isinstance(value, (AttentionKind, ActivationKind)):
            value = value.value
        out[f.name] = value
    return out


def config_from_dict(raw: dict) -> ModelConfig:
    raw = dict(raw)
    if "attention" in raw:
        raw["attention"] = AttentionKind(raw["attention"])
    if "activation" in raw:
        raw["activation"] = ActivationKind(raw["activation"])
    known = {f.name for f in fields(ModelConfig)}
    unknown = set(raw) - known
    if unknown:
        raise InvalidInput(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**raw)


def _trunc_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02) -> np.ndarray:
    """Normal draws with resampling outside two standard deviations."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def init_params(config: ModelConfig) -> dict[str, ad.Tensor]:
    """Initialize all trainable tensors, keyed by hierarchical names.

    Projections use truncated normal (std 0.02), biases and norm offsets
    start at zero, norm scales at one. Insertion order is the canonical
    serialization order.
    """
    rng = stream(config.seed, "init")
    d, hidden = config.dim, config.mlp_hidden
    params: dict[str, ad.Tensor] = {}

    def param(name: str, value: np.ndarray) -> None:
        params[name] = ad.Tensor(value, requires_grad=True)

    param("embed.weight", _trunc_normal(rng, (config.input_dim, d)))
    param("embed.bias", np.zeros(d))
    param("cls_token", _trunc_normal(rng, (1, 1, d)))
    for i in range(config.depth):
        prefix = f"blocks.{i}"
        param(f"{prefix}.norm1.scale", np.ones(d))
        param(f"{prefix}.norm1.shift", np.zeros(d))
        param(f"{prefix}.attn.value_proj", _trunc_normal(rng, (d, d)))
        if config.attention is AttentionKind.DMSA:
            param(f"{prefix}.attn.membership_proj", _trunc_normal(rng, (d, config.heads)))
        param(f"{prefix}.attn.out_proj", _trunc_normal(rng, (d, d)))
        param(f"{prefix}.attn.out_bias", np.zeros(d))
        param(f"{prefix}.norm2.scale", np.ones(d))
        param(f"{prefix}.norm2.shift", np.zeros(d))
        param(f"{prefix}.mlp.fc1.weight", _trunc_normal(rng, (d, hidden)))
        param(f"{prefix}.mlp.fc1.bias", np.zeros(hidden))
        param(f"{prefix}.mlp.fc2.weight", _trunc_normal(rng, (hidden, d)))
        param(f"{prefix}.mlp.fc2.bias", np.zeros(d))
    param("norm.scale", np.ones(d))
    param("norm.shift", np.zeros(d))
    param("head.weight", _trunc_normal(rng, (d, config.num_classes)))
    param("head.bias", np.zeros(config.num_classes))
    return params


def param_count(params: dict[str, ad.Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """Split ``(B, H, W, C)`` images into ``(B, n_patches, patch_size^2 * C)`` tokens."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4:
        raise InvalidInput(f"images must be (B, H, W, C), got ndim={images.ndim}")
    B, H, W, C = images.shape
    if H % patch_size or W % patch_size:
        raise InvalidInput(f"image size {(H, W)} not divisible by patch size {patch_size}")
    gh, gw = H // patch_size, W // patch_size
    patches = images.reshape(B, gh, patch_size, gw, patch_size, C)
    patches = patches.transpose(0, 1, 3, 2, 4, 5)
    return patches.reshape(B, gh * gw, patch_size * patch_size * C)


def _layer_norm(x: ad.Tensor, scale: ad.Tensor, shift: ad.Tensor, eps: float = 1e-6) -> ad.Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = ad.mean(centered * centered, axis=-1, keepdims=True)
    inv = ad.pow_scalar(var + eps, -0.5)
    return centered * inv * scale + shift


def _dmsa_attention(
    x: ad.Tensor,
    config: ModelConfig,
    p: dict[str, ad.Tensor],
    prefix: str,
    rope_table: np.ndarray | None,
    capture: dict | None = None,
) -> ad.Tensor:
    B, n, d = x.shape
    K = config.heads
    hd = d // K

    values = x @ p[f"{prefix}.value_proj"]
    w = ad.transpose(ad.reshape(values, (B, n, K, hd)), (0, 2, 1, 3))  # (B, K, n, hd)

    rotated = ad.rope_rotate(x, rope_table) if rope_table is not None else x
    scores = rotated @ p[f"{prefix}.membership_proj"]  # (B, n, K)

    if config.sparsity_axis in ("head", "both"):
        gate = ad.mean(scores, axis=1)  # (B, K)
        if config.activation is ActivationKind.SOFT_THRESHOLD:
            mask = ad.soft_threshold_rows(gate, topk=min(config.topk, K))
        elif config.activation is ActivationKind.SIGMOID:
            mask = ad.sigmoid(gate)
        elif config.activation is ActivationKind.RELU:
            mask = ad.relu(gate)
        else:
            mask = ad.gelu(gate)
        w = w * ad.reshape(mask, (B, K, 1, 1))

    raw = ad.transpose(scores, (0, 2, 1))  # (B, K, n)
    if config.sparsity_axis in ("token", "both") and (
        config.activation is ActivationKind.SOFT_THRESHOLD
    ):
        Pi = ad.soft_threshold_rows(raw)
    elif config.activation is ActivationKind.SOFT_THRESHOLD:
        Pi = ad.sigmoid(raw)
    elif config.activation is ActivationKind.SIGMOID:
        Pi = ad.sigmoid(raw)
    elif config.activation is ActivationKind.RELU:
        Pi = ad.relu(raw)
    else:
        Pi = ad.gelu(raw)

    norm = Pi / (ad.sum_(Pi, axis=-1, keepdims=True) + 1e-8)
    dots = ad.reshape(norm, (B, K, 1, n)) @ (w * w)  # (B, K, 1, hd)
    attn = 1.0 / (1.0 + dots)
    out = -(w * ad.reshape(Pi, (B, K, n, 1))) * attn
    merged = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, n, d))
    result = merged @ p[f"{prefix}.out_proj"] + p[f"{prefix}.out_bias"]
    if capture is not None:
        capture["membership"] = Pi.data.copy()
    return result


def _tssa_attention(
    x: ad.Tensor,
    config: ModelConfig,
    p: dict[str, ad.Tensor],
    prefix: str,
    capture: dict | None = None,
) -> ad.Tensor:
    B, n, d = x.shape
    K = config.heads
    hd = d // K

    values = x @ p[f"{prefix}.value_proj"]
    w = ad.transpose(ad.reshape(values, (B, n, K, hd)), (0, 2, 1, 3))  # (B, K, n, hd)

    sq = ad.sum_(w * w, axis=2, keepdims=True)  # (B, K, 1, hd)
    unit = w * ad.pow_scalar(sq + 1e-12, -0.5)
    energy = ad.sum_(unit * unit, axis=3)  # (B, K, n)
    Pi = ad.softmax(energy, axis=1)  # over heads; temperature fixed at 1

    norm = Pi / (ad.sum_(Pi, axis=-1, keepdims=True) + 1e-8)
    dots = ad.reshape(norm, (B, K, 1, n)) @ (w * w)
    attn = 1.0 / (1.0 + dots)
    out = -(w * ad.reshape(Pi, (B, K, n, 1))) * attn
    merged = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (B, n, d))
    result = merged @ p[f"{prefix}.out_proj"] + p[f"{prefix}.out_bias"]
    if capture is not None:
        capture["membership"] = Pi.data.copy()
    return result


def model_forward(
    config: ModelConfig,
    params: dict[str, ad.Tensor],
    inputs: np.ndarray,
    capture: list[dict] | None = None,
) -> ad.Tensor:
    """Logits for a batch of token sequences ``(B, n, input_dim)`` or images.

    Four-dimensional input is patchified first. When ``capture`` is a list,
    one dict per block is appended with the block's membership matrix and the
    token matrix after the attention residual (both as plain arrays).
    """
    inputs = np.asarray(inputs, dtype=np.float64)
    if inputs.ndim == 4:
        inputs = patchify(inputs, config.patch_size)
    if inputs.ndim != 3:
        raise InvalidInput(f"inputs must be (B, n, input_dim) tokens or images, got ndim={inputs.ndim}")
    if inputs.shape[2] != config.input_dim:
        raise InvalidInput(
            f"tokens have feature size {inputs.shape[2]}, config.input_dim is {config.input_dim}"
        )
    if not np.all(np.isfinite(inputs)):
        raise InvalidInput("inputs contain non-finite entries")
    B, n, _ = inputs.shape
    if n + 1 > config.max_tokens:
        raise InvalidInput(f"{n} tokens exceed max_tokens={config.max_tokens} (class token included)")

    rope_table = (
        rope_precompute(n + 1, config.dim) if (config.use_rope and config.depth > 0) else None
    )

    x = ad.Tensor(inputs) @ params["embed.weight"] + params["embed.bias"]
    cls = ad.broadcast_to(params["cls_token"], (B, 1, config.dim))
    x = ad.concat([cls, x], axis=1)

    for i in range(config.depth):
        prefix = f"blocks.{i}"
        block_capture: dict | None = {} if capture is not None else None
        normed = _layer_norm(x, params[f"{prefix}.norm1.scale"], params[f"{prefix}.norm1.shift"])
        if config.attention is AttentionKind.DMSA:
            attn_out = _dmsa_attention(
                normed, config, params, f"{prefix}.attn", rope_table, block_capture
            )
        else:
            attn_out = _tssa_attention(normed, config, params, f"{prefix}.attn", block_capture)
        x = x + attn_out
        if not np.all(np.isfinite(x.data)):
            raise NumericalFault(f"non-finite activations after attention block {i}")
        if block_capture is not None:
            block_capture["tokens_after_attention"] = x.data.copy()
            capture.append(block_capture)
        normed = _layer_norm(x, params[f"{prefix}.norm2.scale"], params[f"{prefix}.norm2.shift"])
        hidden = ad.gelu(normed @ params[f"{prefix}.mlp.fc1.weight"] + params[f"{prefix}.mlp.fc1.bias"])
        x = x + (hidden @ params[f"{prefix}.mlp.fc2.weight"] + params[f"{prefix}.mlp.fc2.bias"])
        if not np.all(np.isfinite(x.data)):
            raise NumericalFault(f"non-finite activations after MLP block {i}")

    x = _layer_norm(x, params["norm.scale"], params["norm.shift"])
    cls_state = x[:, 0, :]
    logits = cls_state @ params["head.weight"] + params["head.bias"]
    if not np.all(np.isfinite(logits.data)):
        raise NumericalFault("non-finite logits")
    return logits


def model_loss(
    config: ModelConfig,
    params: dict[str, ad.Tensor],
    inputs: np.ndarray,
    labels: np.ndarray,
) -> tuple[ad.Tensor, ad.Tensor]:
    """Mean cross-entropy loss and the logits tensor."""
    logits = model_forward(config, params, inputs)
    loss = ad.cross_entropy_mean(logits, labels)
    return loss, logits


def model_backward(
    config: ModelConfig,
    params: dict[str, ad.Tensor],
    inputs: np.ndarray,
    labels: np.ndarray,
) -> tuple[float, dict[str, np.ndarray]]:
    """Loss value and gradient arrays for every parameter on one batch."""
    for p in params.values():
        p.zero_grad()
    loss, _ = model_loss(config, params, inputs, labels)
    loss.backward()
    grads = {
        name: (p.grad if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        raise NumericalFault("non-finite gradients")
    return float(loss.data), grads


def predict(config: ModelConfig, params: dict[str, ad.Tensor], inputs: np.ndarray) -> np.ndarray:
    """Class predictions without building gradients (params detached)."""
    detached = {name: ad.Tensor(p.data) for name, p in params.items()}
    logits = model_forward(config, detached, inputs)
    return np.argmax(logits.data, axis=1)
