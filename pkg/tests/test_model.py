import numpy as np
import pytest

from dmst.attention import AttentionKind
from dmst.errors import InvalidInput
from dmst.model import (
    ModelConfig,
    config_from_dict,
    config_to_dict,
    init_params,
    model_backward,
    model_forward,
    model_loss,
    param_count,
    patchify,
    predict,
)
from dmst.sparsify import ActivationKind


def small_config(**kwargs):
    base = dict(depth=1, dim=8, heads=2, mlp_ratio=1.0, num_classes=3, input_dim=5, seed=3)
    base.update(kwargs)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_config_dict_round_trip():
    config = ModelConfig(
        depth=2,
        dim=16,
        heads=4,
        attention=AttentionKind.TSSA,
        activation=ActivationKind.RELU,
        sparsity_axis="both",
    )
    raw = config_to_dict(config)
    assert raw["attention"] == "tssa"
    assert raw["activation"] == "relu"
    assert config_from_dict(raw) == config


def test_config_from_dict_rejects_unknown_keys():
    raw = config_to_dict(ModelConfig())
    raw["window"] = 7
    with pytest.raises(InvalidInput):
        config_from_dict(raw)


def test_config_validation():
    with pytest.raises(InvalidInput):
        ModelConfig(depth=-1)
    with pytest.raises(InvalidInput):
        ModelConfig(dim=30, heads=8)  # not a multiple of heads
    with pytest.raises(InvalidInput):
        ModelConfig(dim=9, heads=3)  # odd dim has no rotary pairs
    with pytest.raises(InvalidInput):
        ModelConfig(sparsity_axis="channel")
    with pytest.raises(InvalidInput):
        ModelConfig(attention=AttentionKind.MHSA)  # baseline is not trainable
    with pytest.raises(InvalidInput):
        ModelConfig(topk=0)
    with pytest.raises(InvalidInput):
        ModelConfig(mlp_ratio=0.0)
    with pytest.raises(InvalidInput):
        ModelConfig(image_size=10, patch_size=4)


# ---------------------------------------------------------------------------
# initialization
# ---------------------------------------------------------------------------


def test_init_params_deterministic_in_seed():
    a = init_params(small_config(seed=11))
    b = init_params(small_config(seed=11))
    c = init_params(small_config(seed=12))
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    assert any(not np.array_equal(a[k].data, c[k].data) for k in a)


def test_init_weights_are_truncated():
    params = init_params(small_config())
    for name in ("embed.weight", "blocks.0.attn.value_proj", "head.weight"):
        assert np.max(np.abs(params[name].data)) <= 0.04  # two standard deviations


def test_param_count_gap_is_membership_projection():
    # a DMSA stack differs from TSSA by exactly one K x d projection per block
    kwargs = dict(depth=3, dim=16, heads=4, input_dim=5)
    dmsa = param_count(init_params(ModelConfig(attention=AttentionKind.DMSA, **kwargs)))
    tssa = param_count(init_params(ModelConfig(attention=AttentionKind.TSSA, **kwargs)))
    assert dmsa - tssa == 3 * 16 * 4


# ---------------------------------------------------------------------------
# patchify
# ---------------------------------------------------------------------------


def test_patchify_known_layout():
    image = np.arange(16.0).reshape(1, 4, 4, 1)
    tokens = patchify(image, 2)
    expected = np.array(
        [[[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]], dtype=np.float64
    )
    assert np.array_equal(tokens, expected)


def test_patchify_rejects_bad_shapes():
    with pytest.raises(InvalidInput):
        patchify(np.zeros((4, 4, 1)), 2)
    with pytest.raises(InvalidInput):
        patchify(np.zeros((1, 5, 5, 1)), 2)


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------


def test_forward_shapes_and_capture():
    config = small_config(depth=2)
    params = init_params(config)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 6, 5))
    capture: list[dict] = []
    logits = model_forward(config, params, x, capture=capture)
    assert logits.shape == (3, config.num_classes)
    assert len(capture) == 2
    for block in capture:
        assert block["membership"].shape == (3, config.heads, 7)  # class token included
        assert block["tokens_after_attention"].shape == (3, 7, config.dim)


def test_forward_without_rope_is_token_permutation_invariant():
    # memberships, gates, and second moments are all token sums, so with the
    # rotary table disabled the class-token logits ignore token order
    config = small_config(use_rope=False, depth=2)
    params = init_params(config)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 5))
    perm = rng.permutation(6)
    base = model_forward(config, params, x).data
    permuted = model_forward(config, params, x[:, perm]).data
    assert np.max(np.abs(base - permuted)) < 1e-10


def test_forward_with_rope_depends_on_token_order():
    config = small_config(use_rope=True)
    params = init_params(config)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 6, 5))
    base = model_forward(config, params, x).data
    rolled = model_forward(config, params, x[:, ::-1]).data
    assert np.max(np.abs(base - rolled)) > 1e-8


def test_depth_zero_reduces_to_constant_class_state():
    # with no blocks the head only ever sees the normalized class token, so
    # logits cannot depend on the inputs
    config = small_config(depth=0)
    params = init_params(config)
    rng = np.random.default_rng(3)
    a = model_forward(config, params, rng.normal(size=(2, 4, 5))).data
    b = model_forward(config, params, rng.normal(size=(2, 4, 5))).data
    assert np.max(np.abs(a - b)) < 1e-12
    assert np.max(np.abs(a[0] - a[1])) < 1e-12


def test_forward_input_validation():
    config = small_config()
    params = init_params(config)
    with pytest.raises(InvalidInput):
        model_forward(config, params, np.zeros((2, 4)))  # missing batch axis
    with pytest.raises(InvalidInput):
        model_forward(config, params, np.zeros((2, 4, 7)))  # wrong feature size
    bad = np.zeros((2, 4, 5))
    bad[0, 0, 0] = np.inf
    with pytest.raises(InvalidInput):
        model_forward(config, params, bad)
    tight = small_config(max_tokens=4)
    with pytest.raises(InvalidInput):
        model_forward(tight, init_params(tight), np.zeros((1, 4, 5)))  # class token overflows


def test_zero_input_has_finite_loss_and_gradients():
    config = small_config()
    params = init_params(config)
    loss, grads = model_backward(config, params, np.zeros((2, 4, 5)), np.array([0, 1]))
    assert np.isfinite(loss)
    assert all(np.all(np.isfinite(g)) for g in grads.values())


def test_predict_uses_detached_parameters():
    config = small_config()
    params = init_params(config)
    rng = np.random.default_rng(4)
    out = predict(config, params, rng.normal(size=(3, 4, 5)))
    assert out.shape == (3,)
    assert out.dtype.kind == "i"
    assert all(p.grad is None for p in params.values())


def test_tssa_forward_runs_and_differs_from_dmsa():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 5))
    dmsa_cfg = small_config()
    tssa_cfg = small_config(attention=AttentionKind.TSSA)
    dmsa_logits = model_forward(dmsa_cfg, init_params(dmsa_cfg), x).data
    tssa_logits = model_forward(tssa_cfg, init_params(tssa_cfg), x).data
    assert dmsa_logits.shape == tssa_logits.shape
    assert np.max(np.abs(dmsa_logits - tssa_logits)) > 1e-8


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("attention", [AttentionKind.DMSA, AttentionKind.TSSA])
def test_model_gradients_match_finite_differences(attention):
    config = small_config(attention=attention)
    params = init_params(config)
    rng = np.random.default_rng(6)
    x = rng.normal(size=(2, 4, 5))
    y = np.array([0, 2])
    _, grads = model_backward(config, params, x, y)

    h = 1e-5
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        fd = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            plus = model_loss(config, params, x, y)[0].data.item()
            flat[i] = orig - h
            minus = model_loss(config, params, x, y)[0].data.item()
            flat[i] = orig
            fd[i] = (plus - minus) / (2 * h)
        scale = max(float(np.max(np.abs(fd))), 1e-8)
        worst = max(worst, float(np.max(np.abs(grads[name].reshape(-1) - fd))) / scale)
    assert worst < 1e-4
