import numpy as np
import pytest

from dpcpheno import nn
from dpcpheno.gradsuite import check_model
from dpcpheno.model import VARIANTS, ECA, Head, HybridNet, ModelConfig, TaskGate
from dpcpheno.tensorcore import DimensionError, NumericalError, Rng, Tensor, grad_check, no_grad
from dpcpheno.tensorcore import functional as F

# analytic count for the default config; see test_parameter_count_breakdown
DEFAULT_PARAMS = 1_536_557


@pytest.fixture(scope="module")
def net():
    return HybridNet(ModelConfig(), seed=0)


@pytest.fixture(scope="module")
def batch():
    return np.random.default_rng(0).normal(size=(7, 4, 28, 28)).astype(np.float32)


def test_shapes_and_simplex(net, batch):
    with no_grad():
        p = net(batch, mode="eval")
    assert p.cls_probs.shape == (7, 3) and p.reg_values.shape == (7, 4)
    assert p.features["f_cnn"].shape == (7, 196, 192)
    assert p.features["f_vit"].shape == (7, 50, 128)
    assert p.features["h_fused"].shape == (7, 256)
    probs = p.cls_probs.value.astype(np.float64)
    assert (probs >= 0).all()
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    w = p.diagnostics["fusion_weights"]
    assert np.all((w > 0) & (w < 1)) and abs(w.sum() - 1) < 1e-6
    assert 0 < p.diagnostics["gate_mean_cls"] < 1


def test_eval_forward_bitwise_deterministic(net, batch):
    with no_grad():
        a = net(batch, mode="eval")
        b = net(batch, mode="eval")
    assert a.cls_probs.value.tobytes() == b.cls_probs.value.tobytes()
    assert a.reg_values.value.tobytes() == b.reg_values.value.tobytes()


def test_same_seed_same_weights():
    a, b = HybridNet(seed=3), HybridNet(seed=3)
    for (ka, pa), (kb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert ka == kb and pa.value.tobytes() == pb.value.tobytes()
    c = HybridNet(seed=4)
    assert c.eca.weight.value.tobytes() != a.eca.weight.value.tobytes()


def test_wrong_input_shape(net):
    with pytest.raises(DimensionError):
        net(np.zeros((2, 3, 28, 28), dtype=np.float32))


def test_nonfinite_activation_names_block(net):
    x = np.zeros((2, 4, 28, 28), dtype=np.float32)
    x[0, 0, 0, 0] = np.inf
    with no_grad(), np.errstate(all="ignore"), pytest.raises(NumericalError, match="eca"):
        net(x, mode="eval")


# -- parameter inventory ---------------------------------------------------------

def test_parameter_paths(net):
    names = [k for k, _ in net.named_parameters()]
    prefixes = ("eca.", "cnn.", "vit.", "fuse.", "refine.cls.", "refine.reg.", "gate.", "head.cls.", "head.reg.")
    for p in prefixes:
        assert any(n.startswith(p) for n in names), p
    assert dict(net.named_parameters())["fuse.alpha"].shape == (2,)
    assert len(names) == len(set(names))


def _linear(i, o):
    return i * o + o


def _conv_bn(i, o, k):
    return i * o * k * k + o + 2 * o


def test_parameter_count_breakdown(net):
    eca = 3 + 1
    inc = _conv_bn(64, 24, 1) + _conv_bn(64, 24, 3) + _conv_bn(64, 16, 3) + _conv_bn(16, 16, 3)
    cnn = _conv_bn(4, 64, 3) + 2 * inc + _conv_bn(64, 192, 3)
    block = 2 * 256 + _linear(128, 384) + _linear(128, 128) + _linear(128, 512) + _linear(512, 128)
    vit = _linear(64, 128) + 128 + 50 * 128 + 2 * block + 256
    fuse = _linear(192, 256) + _linear(128, 256) + 2 + 512
    refine = 2 * (2 * _linear(256, 256) + 512)
    gate = 2 * (2 * _linear(512, 256) + 512)
    head = lambda out: _linear(256, 128) + 256 + _linear(128, 64) + 128 + _linear(64, out)  # noqa: E731
    total = eca + cnn + vit + fuse + refine + gate + head(3) + head(4)
    assert total == DEFAULT_PARAMS
    assert net.num_parameters() == DEFAULT_PARAMS


@pytest.mark.xfail(strict=True, reason="the declared architecture has ~1.54M parameters, far below the "
                                       "stated ~12M; see the decisions ledger")
def test_parameter_count_in_stated_band(net):
    assert 9.6e6 <= net.num_parameters() <= 14.4e6


# -- ECA ------------------------------------------------------------------------

def test_eca_pass_through_and_zero():
    eca = ECA(4, Rng(0), dtype=np.float64)
    x = Tensor(np.random.default_rng(1).normal(size=(2, 4, 5, 5)))
    eca.bias.value[...] = 1e3
    np.testing.assert_array_equal(eca(x).value, x.value)
    eca.bias.value[...] = 0.0
    np.testing.assert_array_equal(eca(Tensor(np.zeros((2, 4, 5, 5)))).value, 0.0)


def test_eca_scales_each_channel_by_constant():
    eca = ECA(4, Rng(2), dtype=np.float64)
    x = np.random.default_rng(3).uniform(0.5, 2.0, size=(3, 4, 6, 6))
    ratio = eca(Tensor(x)).value / x
    per_channel = ratio.reshape(3, 4, -1)
    np.testing.assert_allclose(per_channel, np.broadcast_to(per_channel[..., :1], per_channel.shape), rtol=1e-12)
    assert np.all((per_channel > 0) & (per_channel < 1))


def test_eca_channel_check():
    with pytest.raises(DimensionError, match="channels"):
        ECA(4, Rng(0))(Tensor(np.ones((1, 3, 4, 4))))


# -- CNN / ViT ------------------------------------------------------------------

def test_inception_identity_when_convs_zeroed():
    net = HybridNet(seed=1, dtype=np.float64)
    block = net.cnn.inception[0]
    for c in block.convs():
        c.weight.value[...] = 0
        c.bias.value[...] = 0
    x = Tensor(np.random.default_rng(4).normal(size=(2, 64, 28, 28)))
    block.train()
    np.testing.assert_array_equal(block(x).value, x.value)


def test_vit_patch_permutation():
    net = HybridNet(seed=2, dtype=np.float64)
    vit = net.vit
    x = np.random.default_rng(5).normal(size=(1, 4, 28, 28))
    perm = np.random.default_rng(6).permutation(49)

    def permute_patches(img):
        p = img.reshape(1, 4, 7, 4, 7, 4).transpose(0, 2, 4, 1, 3, 5).reshape(1, 49, 4, 4, 4)
        p = p[:, perm]
        return p.reshape(1, 7, 7, 4, 4, 4).transpose(0, 3, 1, 4, 2, 5).reshape(1, 4, 28, 28)

    xp = permute_patches(x)
    with no_grad():
        base, moved = vit(Tensor(x)).value, vit(Tensor(xp)).value
        assert not np.allclose(base[:, 0], moved[:, 0])
        vit.pos.value[...] = 0
        base, moved = vit(Tensor(x)).value, vit(Tensor(xp)).value
    np.testing.assert_allclose(base[:, 0], moved[:, 0], rtol=1e-10, atol=1e-12)


def _branch_check(branch_fn, params, shape, seed):
    rng = np.random.default_rng(seed)
    x = Tensor(rng.normal(size=(1, 4, 28, 28)))
    proj = Tensor(rng.normal(size=shape))
    return grad_check(lambda: F.sum(branch_fn(x) * proj), params, eps=1e-5, max_coords=3, seed=seed)


def test_cnn_branch_gradcheck():
    net = HybridNet(seed=3, dtype=np.float64)
    net.train()
    res = _branch_check(net.cnn, dict(net.cnn.named_parameters("cnn.")), (1, 196, 192), 7)
    assert res.max_rel_error < 1e-4, res.per_param


def test_vit_branch_gradcheck():
    net = HybridNet(seed=3, dtype=np.float64)
    res = _branch_check(net.vit, dict(net.vit.named_parameters("vit.")), (1, 50, 128), 8)
    assert res.max_rel_error < 1e-4, res.per_param


# -- fusion -----------------------------------------------------------------------

def test_fusion_weights():
    net = HybridNet(seed=0, dtype=np.float64)
    np.testing.assert_array_equal(net.fuse.weights().value, [0.5, 0.5])
    net.fuse.alpha.value[...] = [20.0, 0.0]
    w = net.fuse.weights().value
    assert abs(w[0] - 1) < 1e-8 and abs(w[1]) < 1e-8
    rng = np.random.default_rng(9)
    f_cnn, f_vit = Tensor(rng.normal(size=(2, 196, 192))), Tensor(rng.normal(size=(2, 50, 128)))
    h, _ = net.fuse(f_cnn, f_vit)
    ref = net.fuse.norm(net.fuse.cnn_proj(F.mean(f_cnn, axis=1)))
    np.testing.assert_allclose(h.value, ref.value, atol=1e-6)


# -- refinement and gating -----------------------------------------------------------

def test_refinement_residual_identity_and_distinct():
    net = HybridNet(seed=0, dtype=np.float64)
    net.eval()
    h = Tensor(np.random.default_rng(10).normal(size=(3, 256)))
    assert np.linalg.norm(net.refine.cls(h).value - net.refine.reg(h).value) > 0
    for r in (net.refine.cls, net.refine.reg):
        for p in r.parameters():
            p.value[...] = 0
        np.testing.assert_array_equal(r(h).value, h.value)


def test_refinement_gradcheck():
    net = HybridNet(seed=0, dtype=np.float64)
    net.eval()
    rng = np.random.default_rng(11)
    h = Tensor(rng.normal(size=(3, 256)), requires_grad=True)
    pa, pb = Tensor(rng.normal(size=(3, 256))), Tensor(rng.normal(size=(3, 256)))
    params = {"h": h, **dict(net.refine.named_parameters("refine."))}
    res = grad_check(lambda: F.sum(net.refine.cls(h) * pa + net.refine.reg(h) * pb), params, max_coords=8)
    assert res.max_rel_error < 1e-4


def test_gate_limits_and_convexity():
    gate = TaskGate(4, Rng(0), dtype=np.float64)
    rng = np.random.default_rng(12)
    h = Tensor(rng.normal(size=(5, 4)))
    joint = Tensor(rng.normal(size=(5, 8)))
    ln = lambda t: gate.norm(t).value  # noqa: E731
    gate.gate.bias.value[...] = 1e3
    np.testing.assert_allclose(gate(h, joint)[0].value, ln(h), atol=1e-12)
    gate.gate.bias.value[...] = -1e3
    np.testing.assert_allclose(gate(h, joint)[0].value, ln(gate.mix(joint)), atol=1e-12)
    gate.gate.bias.value[...] = 0.0
    g = F.sigmoid(gate.gate(joint)).value
    m = gate.mix(joint).value
    pre = h.value * g + m * (1 - g)
    lo, hi = np.minimum(h.value, m), np.maximum(h.value, m)
    assert np.all((pre >= lo - 1e-12) & (pre <= hi + 1e-12))


# -- heads ------------------------------------------------------------------------

def test_head_dropout_monte_carlo_matches_eval():
    drop_rng = Rng(13)
    head = Head(256, 4, 0.4, Rng(14), drop_rng, dtype=np.float64)
    h = Tensor(np.random.default_rng(15).normal(size=(1, 256)))
    head.eval()
    ref = head(h).value
    # the last dropout feeds a linear layer, so inverted scaling keeps the mean;
    # the first one feeds LayerNorm+GELU, where a Jensen gap is expected
    head.train()
    head.drop1.eval()
    hb = Tensor(np.repeat(h.value, 10_000, axis=0))
    with no_grad():
        mc = head(hb).value.mean(axis=0)
    np.testing.assert_allclose(mc, ref[0], atol=5e-2)
    assert head(hb).value.std(axis=0).min() > 0  # dropout is active


def test_regression_head_linear_last_layer():
    head = Head(256, 4, 0.4, Rng(16), Rng(17), dtype=np.float64)
    head.eval()
    h = Tensor(np.random.default_rng(18).normal(size=(3, 256)))
    head.out.bias.value[...] = 0
    base = head(h).value
    head.out.weight.value *= 10
    np.testing.assert_allclose(head(h).value, 10 * base, rtol=1e-12)


def test_regression_head_gradcheck():
    head = Head(256, 4, 0.4, Rng(19), Rng(20), dtype=np.float64)
    head.eval()
    h = Tensor(np.random.default_rng(21).normal(size=(3, 256)))
    proj = Tensor(np.random.default_rng(22).normal(size=(3, 4)))
    res = grad_check(lambda: F.sum(head(h) * proj), dict(head.named_parameters()), max_coords=8)
    assert res.max_rel_error < 1e-4


# -- variants ---------------------------------------------------------------------

@pytest.mark.parametrize("variant", VARIANTS)
def test_variants_preserve_shapes(variant):
    cfg = ModelConfig().for_variant(variant)
    net = HybridNet(cfg, seed=0)
    x = np.random.default_rng(0).normal(size=(3, 4, 28, 28)).astype(np.float32)
    with no_grad():
        p = net(x, mode="eval")
    if variant == "reg_only":
        assert p.cls_probs is None
    else:
        assert p.cls_probs.shape == (3, 3)
    if variant == "cls_only":
        assert p.reg_values is None
    else:
        assert p.reg_values.shape == (3, 4)
    if variant == "cnn_only":
        assert not hasattr(net, "vit")
        np.testing.assert_array_equal(p.diagnostics["fusion_weights"], [1.0, 0.0])
    if variant == "vit_only":
        assert not hasattr(net, "cnn")
    if variant == "no_gating":
        assert p.features["t_cls"] is p.features["h_cls"]


def test_unknown_variant():
    with pytest.raises(ValueError):
        ModelConfig().for_variant("nope")


def test_config_invariants():
    with pytest.raises(ValueError):
        ModelConfig(cnn_tokens=100)
    with pytest.raises(ValueError):
        ModelConfig(vit_heads=3)
    cfg = ModelConfig()
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_residual_branches_cascade():
    net = HybridNet(seed=5, dtype=np.float64)
    net.zero_residual_branches()
    net.eval()
    x = np.random.default_rng(23).normal(size=(2, 4, 28, 28))
    with no_grad():
        base = net(x).reg_values.value.copy()
        # inner layers of residual branches no longer matter
        net.cnn.inception[0].b33a.conv.weight.value += 1.0
        net.vit.blocks[1].fc1.weight.value += 1.0
        net.refine.cls.fc1.weight.value += 1.0
        net.refine.reg.fc1.weight.value += 1.0
        after = net(x).reg_values.value
    np.testing.assert_array_equal(base, after)


def test_module_astype_and_buffers():
    m = nn.BatchNorm(3)
    m.astype(np.float64)
    assert all(p.dtype == np.float64 for p in m.parameters())
    assert set(dict(m.named_buffers())) == {"running_mean", "running_var"}


@pytest.mark.slow
def test_full_model_total_loss_gradcheck():
    row = check_model(seed=0, batch=2)
    assert row.max_rel_error < 1e-4
