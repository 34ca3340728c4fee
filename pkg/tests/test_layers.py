import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from cdfm3sf import tensor as T
from cdfm3sf.layers import (CS, DSC, MDSC, SDRB, Conv, LayerSpec, SharedConv, conventional_count,
                            cs_fuse, dsc_forward, mdsc_forward, param_count, receptive_extent,
                            shared_conv_forward, shared_kernel_size)
from cdfm3sf.tensor import Tensor

from oracles import bbox_side, dependence_footprint, naive_conv2d, naive_depthwise


# ---------------------------------------------------------------------------
# counting

def test_count_examples():
    assert param_count(LayerSpec("Conv", 4, 64, 3)) == 4 * 9 * 64 + 4 * 64 == 2560
    assert param_count(LayerSpec("DSC", 1, 1, 1)) == 2
    assert param_count(LayerSpec("MDSC", 64, 64, (3, 5))) == 2 * 64 * 64 + 64 * (9 + 25) == 10368
    assert param_count(LayerSpec("SDRB", 64, 64, 3, 2, 5)) == 2 * (25 + 64 * 9 * 64 + 64 * 64) == 81970
    assert param_count(LayerSpec("BatchNorm", 64, 64)) == 128
    assert param_count(LayerSpec("MaxPool", kernel_size=2, pool=2, stride=2)) == 0
    assert param_count(LayerSpec("SharedConv", kernel_size=7)) == 49


@settings(max_examples=50, deadline=None)
@given(m=st.integers(1, 1024), n=st.integers(1, 1024))
def test_mdsc_count_law(m, n):
    assert param_count(LayerSpec("MDSC", m, n, (3, 5))) == 2 * m * n + 34 * m


@pytest.mark.parametrize("rate,K", [(2, 5), (3, 7), (4, 9)])
def test_sdrb_to_dilated_ratio(rate, K):
    m = n = 512
    sdrb = conventional_count(LayerSpec("SDRB", m, n, 3, rate, K))
    conv = 2 * conventional_count(LayerSpec("Conv", m, n, K))
    assert abs((sdrb / conv) / (9 / K**2) - 1) < 0.05


def test_shared_kernel_law():
    assert [shared_kernel_size(3, r) for r in (2, 3, 4)] == [5, 7, 9]
    assert receptive_extent(3, 4) == 9
    with pytest.raises(ValueError):
        LayerSpec("SDRB", 8, 8, 3, 2, 7)


def test_layerspec_rejects_bad_mdsc_and_kind():
    with pytest.raises(ValueError):
        LayerSpec("MDSC", 4, 4, (3, 3))
    with pytest.raises(ValueError):
        LayerSpec("MDSC", 4, 4, (3, 4))
    with pytest.raises(ValueError):
        LayerSpec("Transformer", 4, 4)


@pytest.mark.parametrize("module", [
    Conv(4, 8, 3), DSC(5, 7, 3), MDSC(6, 4), SDRB(4, 3), SharedConv(7), CS(4),
])
def test_instantiated_counts_match_formula(module):
    for name, spec, inst in module.spec_rows(""):
        assert inst == param_count(spec), name
    total = sum(inst for _, _, inst in module.spec_rows(""))
    assert total == module.trainable_count()


# ---------------------------------------------------------------------------
# separable convolutions

def test_dsc_identity_and_zero_depth():
    x = np.random.default_rng(0).normal(size=(1, 5, 5, 1))
    impulse = np.zeros((3, 3, 1))
    impulse[1, 1, 0] = 1
    y = dsc_forward(Tensor(x), Tensor(impulse), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(y.data, x)
    z = dsc_forward(Tensor(x), Tensor(np.zeros((3, 3, 1))), Tensor(np.ones((1, 1, 1, 1))))
    assert not z.data.any()


def test_dsc_matches_grouped_oracle():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 6, 6, 3))
    depth, point = rng.normal(size=(3, 3, 3)), rng.normal(size=(1, 1, 3, 4))
    expected = naive_conv2d(naive_depthwise(x, depth), point)
    np.testing.assert_allclose(dsc_forward(Tensor(x), Tensor(depth), Tensor(point)).data, expected,
                               atol=1e-10)


def test_mdsc_constructed_identity():
    x = np.random.default_rng(2).normal(size=(1, 6, 6, 2))
    d3, d5 = np.zeros((3, 3, 2)), np.zeros((5, 5, 2))
    d3[1, 1] = 1
    d5[2, 2] = 1
    point = np.zeros((1, 1, 4, 2))
    for c in range(2):
        point[0, 0, c, c] = point[0, 0, 2 + c, c] = 0.5
    y = mdsc_forward(Tensor(x), [Tensor(d3), Tensor(d5)], Tensor(point))
    np.testing.assert_allclose(y.data, x, atol=1e-15)


def test_mdsc_zeroed_branch_reduces_to_dsc():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(1, 6, 6, 3))
    d3, point = rng.normal(size=(3, 3, 3)), rng.normal(size=(1, 1, 6, 4))
    y = mdsc_forward(Tensor(x), [Tensor(d3), Tensor(np.zeros((5, 5, 3)))], Tensor(point))
    ref = dsc_forward(Tensor(x), Tensor(d3), Tensor(point[:, :, :3]))
    np.testing.assert_allclose(y.data, ref.data, atol=1e-12)


def test_shared_conv_cases():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(1, 5, 5, 3))
    np.testing.assert_array_equal(shared_conv_forward(Tensor(x), Tensor(np.ones((1, 1, 1)))).data, x)
    np.testing.assert_array_equal(shared_conv_forward(Tensor(x), Tensor(np.full((1, 1), 2.0))).data, 2 * x)
    w = rng.normal(size=(5, 5, 1))
    y = shared_conv_forward(Tensor(x), Tensor(w)).data
    for c in range(3):
        alone = naive_conv2d(x[..., c:c + 1], w[..., None])
        np.testing.assert_allclose(y[..., c:c + 1], alone, atol=1e-10)


def test_shared_conv_2d_kernel_gradient():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=(1, 5, 5, 2)))
    w = Tensor(rng.normal(size=(3, 3)), requires_grad=True)
    f = lambda _=None: T.sum_all(T.mul(shared_conv_forward(x, w), shared_conv_forward(x, w)))
    T.backward(f())
    fd = T.finite_difference_grad(f, w)
    assert np.max(np.abs(w.grad - fd) / (np.abs(fd) + 1e-8)) < 1e-6


# ---------------------------------------------------------------------------
# residual block and fusion

def _zero_block(block):
    for name, p in block.named_parameters().items():
        p.data = np.ones_like(p.data) if name.endswith("gamma") else np.zeros_like(p.data)


def test_sdrb_zero_block_is_identity():
    block = SDRB(3, 2)
    _zero_block(block)
    x = np.random.default_rng(6).normal(size=(2, 8, 8, 3))
    np.testing.assert_array_equal(block(Tensor(x), training=False).data, x)


def test_sdrb_footprint_matches_composed_oracle():
    # Positive weights and a large BN shift keep every ReLU active, so the
    # block's dependence footprint is that of its linear stages.
    rng = np.random.default_rng(7)
    block = SDRB(1, 2)
    for name, p in block.named_parameters().items():
        if name.endswith("beta"):
            p.data = np.full_like(p.data, 50.0)
        elif name.endswith("gamma"):
            p.data = np.ones_like(p.data)
        else:
            p.data = rng.uniform(0.5, 1.0, size=p.shape)
    K, r = block.shared_k, block.rate
    shared = [block.children[f"shared{i}"].kernel.data for i in (1, 2)]
    dil = [block.children[f"dilated{i}"].kernel.data for i in (1, 2)]

    def composed(x):
        y = x
        for s, d in zip(shared, dil):
            y = naive_conv2d(naive_depthwise(y, s), d, rate=r)
        return y

    size, centre = 21, (10, 10)
    model_fp = dependence_footprint(lambda x: block(Tensor(x)).data - x, (1, size, size, 1), centre)
    oracle_fp = dependence_footprint(composed, (1, size, size, 1), centre)
    np.testing.assert_array_equal(model_fp, oracle_fp)
    side = 1 + 2 * ((K - 1) + (3 - 1) * r)
    assert bbox_side(model_fp) == (side, side) == (17, 17)


def test_cs_degenerate_cases():
    cs = CS(2)
    _zero_block(cs.mdsc)
    rng = np.random.default_rng(8)
    a, b = rng.normal(size=(1, 4, 4, 2)), rng.normal(size=(1, 4, 4, 2))
    np.testing.assert_array_equal(cs(Tensor(a), Tensor(b)).data, a + b)
    cs.mdsc.bn.beta.data = np.array([0.3, -0.2])
    z = cs(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 4, 4, 2)))).data
    np.testing.assert_allclose(z[0, 0, 0], [0.3, 0.0])


def test_cs_gradient_wrt_a_is_identity_at_zero_mdsc():
    cs = CS(2)
    _zero_block(cs.mdsc)
    rng = np.random.default_rng(9)
    a = Tensor(rng.normal(size=(1, 3, 3, 2)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3, 3, 2)))
    f = lambda _=None: T.sum_all(cs_fuse(a, b, cs.mdsc))
    T.backward(f())
    np.testing.assert_array_equal(a.grad, np.ones(a.shape))
    np.testing.assert_allclose(T.finite_difference_grad(f, a), np.ones(a.shape), atol=1e-9)


def test_cs_rejects_mismatched_inputs():
    cs = CS(2)
    with pytest.raises(ValueError):
        cs(Tensor(np.zeros((1, 4, 4, 2))), Tensor(np.zeros((1, 2, 2, 2))))
    with pytest.raises(ValueError):
        cs_fuse(Tensor(np.zeros((1, 4, 4, 3))), Tensor(np.zeros((1, 4, 4, 3))), cs.mdsc)


@pytest.mark.parametrize("k,r", [(3, 2), (3, 3), (3, 4)])
def test_dilated_receptive_field(k, r):
    w = np.random.default_rng(10).uniform(0.5, 1.0, size=(k, k, 1, 1))
    size = (k - 1) * r + 5
    centre = (size // 2, size // 2)
    fp = dependence_footprint(lambda x: T.conv2d(Tensor(x), Tensor(w), dilation_rate=r).data,
                              (1, size, size, 1), centre)
    side = (k - 1) * r + 1
    assert bbox_side(fp) == (side, side)
    assert fp.sum() == k * k


@settings(max_examples=25, deadline=None)
@given(c=st.integers(1, 4), h=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_cs_residual_identity(c, h, seed):
    rng = np.random.default_rng(seed)
    cs = CS(c, rng=rng)
    a, b = Tensor(rng.normal(size=(2, h, h, c))), Tensor(rng.normal(size=(2, h, h, c)))
    fused = cs(a, b).data
    inner = cs.mdsc(T.concat_channels([a, b])).data
    np.testing.assert_allclose(fused - inner, a.data + b.data, atol=1e-12)


@pytest.mark.parametrize("k", [1, 3, 5])
def test_shared_conv_has_no_channel_mixing(k):
    rng = np.random.default_rng(11)
    w = Tensor(rng.normal(size=(k, k, 1)))
    for c in range(3):
        probe = np.zeros((1, 7, 7, 3))
        probe[0, 3, 3, c] = 1.0
        y = shared_conv_forward(Tensor(probe), w).data
        others = [i for i in range(3) if i != c]
        assert not y[..., others].any() and y[..., c].any()
