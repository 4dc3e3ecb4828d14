import numpy as np
import pytest

from infinet.autograd import Node
from infinet.interaction import ABLATION_KINDS, Add, Rbf
from infinet.model import (FAMILY, BlockConfig, DemoNet, InfiBlock, build_demo_net, build_model,
                           block_param_count, count_parameters, get_variant, predict_logits)
from infinet.tensor import Tensor


def test_block_config_defaults():
    bc = BlockConfig()
    assert (bc.channels, bc.r, bc.kernel_size, bc.mlp_ratio) == (64, 7, 7, 4)
    assert bc.kind == Rbf(1.0)
    with pytest.raises(ValueError):
        BlockConfig(r=0)


@pytest.mark.parametrize("kind", [Rbf(), Add()])
def test_zero_weight_block_is_residual_plus_fc2_bias(kind):
    rng = np.random.default_rng(0)
    blk = InfiBlock(BlockConfig(6, 3, kind, 2, 3), rng)
    for name, p in blk.named_parameters():
        if "norm" not in name:
            p.value = Tensor(np.zeros(p.shape))
    blk.layer_scale.value = Tensor(np.ones(6))
    b2 = rng.standard_normal(6)
    blk.mlp.fc2.bias.value = Tensor(b2)
    x = rng.standard_normal((2, 4, 4, 6))
    # za = zb = 0 so rbf gives 1 (add gives 0) everywhere; LN of a constant vector is beta = 0
    assert np.allclose(blk(Node(Tensor(x))).data, x + b2, atol=1e-12)


def test_block_init_scales():
    C, K = 64, 7
    blk = InfiBlock(BlockConfig(C, 7, kernel_size=K), np.random.default_rng(3))
    branch = np.concatenate([c.kernel.data.ravel() for c in blk.branch_convs_a + blk.branch_convs_b])
    # trunc-normal at +-2 std keeps about 0.88 of the std
    assert abs(branch.std() / (1 / K) - 0.88) < 0.03
    assert abs(blk.proj_a.weight.data.std() / C ** -0.5 - 0.88) < 0.03
    assert abs(blk.conv_c.kernel.data.std() / 0.02 - 0.88) < 0.03
    assert np.all(blk.layer_scale.data == 1e-6) and not blk.layer_scale.decay
    assert InfiBlock(BlockConfig(C, 2, layer_scale=None)).layer_scale is None


def test_block_layout_and_count():
    blk = InfiBlock(BlockConfig(8, 7), np.random.default_rng(0))
    assert len(blk.branch_convs_a) == len(blk.branch_convs_b) == 7
    assert blk.mlp.fc1.weight.shape == (8, 32)
    assert blk.num_params() == block_param_count(blk.config)
    with pytest.raises(ValueError):
        blk(Node(Tensor(np.zeros((1, 4, 4, 5)))))


def test_variants():
    t = get_variant("t")
    assert (t.channels, t.depths, t.num_classes) == (64, (2, 2, 18, 2), 1000)
    assert [get_variant(v).channels for v in FAMILY] == [64, 96, 128, 128, 192]
    assert get_variant("micro", r=3).block.r == 3
    with pytest.raises(KeyError):
        get_variant("huge")
    with pytest.raises(ValueError):
        get_variant("tiny", depths=(1, 1, 1))


def test_parameter_counts():
    totals = [count_parameters(get_variant(v))["total"] for v in FAMILY]
    assert 18.4e6 <= totals[0] <= 27.6e6
    assert totals == sorted(totals) and len(set(totals)) == 5
    # frozen: analytic count of the tiny layout; 6,016 of it is the per-channel layer scale
    assert totals[0] == 23_240_360


@pytest.mark.parametrize("name", ["test", "micro"])
def test_analytic_count_matches_allocation(name):
    cfg = get_variant(name)
    model = build_model(cfg)
    counts = count_parameters(cfg)
    assert counts["total"] == model.num_params()
    assert {k: v for k, v in counts.items() if k != "total"} == model.stage_param_counts()


def test_forward_shapes():
    model = build_model(get_variant("test"))
    x = np.random.default_rng(0).uniform(0, 1, (4, 32, 32, 3))
    assert model(Node(Tensor(x))).shape == (4, 10)
    micro = build_model(get_variant("micro"))
    assert micro(Node(Tensor(x[:, :16, :16]))).shape == (4, 10)
    assert predict_logits(micro, x[:, :16, :16], batch_size=3).shape == (4, 10)


def test_same_seed_same_model():
    a = build_model(get_variant("micro"), seed=3)
    b = build_model(get_variant("micro"), seed=3)
    c = build_model(get_variant("micro"), seed=4)
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), b.parameters()))
    assert not all(np.array_equal(p.data, q.data) for p, q in zip(a.parameters(), c.parameters()))


def test_demo_net():
    net = build_demo_net(Rbf(), 10)
    assert isinstance(net, DemoNet) and len(net.blocks) == 8
    assert net.stem.kernel.shape == (4, 4, 3, 64)
    assert all(b.config.channels == 64 for b in net.blocks)
    small = build_demo_net(Add(), 10, width=8, dtype=np.float32)
    out = small(Node(Tensor(np.zeros((2, 16, 16, 3)), dtype=np.float32)))
    assert out.shape == (2, 10) and out.dtype == np.float32


def test_demo_init_identical_across_kinds_for_shared_parameters():
    nets = [build_demo_net(k, 10, seed=1, width=8) for k in ABLATION_KINDS.values()]
    ref = dict(nets[0].named_parameters())
    for net in nets[1:]:
        for name, p in net.named_parameters():
            assert np.array_equal(p.data, ref[name].data)
