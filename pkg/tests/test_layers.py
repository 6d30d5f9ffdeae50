import numpy as np
import pytest

from vcmesh import autodiff as ad
from vcmesh.errors import ConfigurationError, InputError
from vcmesh.layers import (
    AvgPool, AvgUnpool, LcConv, MaxPool, MaxUnpool, VcConv, VcTransConv, VdPool, VdRes,
    VdUnpool, param_count,
)
from vcmesh.sampling import SamplingMap, build_down_map, build_up_map
from vcmesh.synthetic import path_topology, random_graph


def path_down():
    return build_down_map(path_topology(5), [0, 2, 4], 2, 1)


def path_up():
    return build_up_map(path_topology(5), [0, 2, 4], 2, 1)


def random_map(rng, n_in=None, n_out=None, max_k=5, direction="down"):
    n_in = n_in or int(rng.integers(1, 20))
    n_out = n_out or int(rng.integers(1, 20))
    rows = tuple(
        tuple(sorted(rng.choice(n_in, size=int(rng.integers(1, min(max_k, n_in) + 1)), replace=False).tolist()))
        for _ in range(n_out)
    )
    return SamplingMap(direction, 2, 1, n_in, n_out, rows)


def vc_oracle(smap, alpha, basis, bias, x):
    """Literal triple loop over output vertex, neighbor slot and basis entry."""
    m_count, i_ch, o_ch = basis.shape
    y = np.zeros((smap.out_vertices, o_ch))
    for i, row in enumerate(smap.rows):
        y[i] = bias
        for j, v in enumerate(row):
            w = np.zeros((i_ch, o_ch))
            for k in range(m_count):
                w += alpha[i, j, k] * basis[k]
            y[i] += w.T @ x[v]
    return y


def lc_dense_oracle(smap, weight, bias, x):
    """Assemble the full (N*O) x (N_in*I) operator and apply it."""
    _, _, i_ch, o_ch = weight.shape
    big = np.zeros((smap.out_vertices * o_ch, smap.in_vertices * i_ch))
    for i, row in enumerate(smap.rows):
        for j, v in enumerate(row):
            big[i * o_ch:(i + 1) * o_ch, v * i_ch:(v + 1) * i_ch] += weight[i, j].T
    return (big @ x.ravel()).reshape(smap.out_vertices, o_ch) + bias


def test_identity_configuration():
    smap = SamplingMap("down", 1, 0, 3, 3, ((0,), (1,), (2,)))
    conv = VcConv(smap, 2, 2, 1, rng=np.random.default_rng(0))
    conv.basis.data[...] = np.eye(2)
    conv.alpha.data[...] = 1.0
    x = np.random.default_rng(1).normal(size=(3, 2))
    np.testing.assert_array_equal(conv(x).data, x)


def test_bias_only():
    conv = VcConv(path_down(), 2, 3, 2, rng=np.random.default_rng(0))
    conv.alpha.data[...] = 0.0
    conv.bias.data[...] = [1.0, -2.0, 0.5]
    out = conv(np.random.default_rng(2).normal(size=(5, 2))).data
    np.testing.assert_array_equal(out, np.tile([1.0, -2.0, 0.5], (3, 1)))


def test_scalar_path_example():
    conv = VcConv(path_down(), 1, 1, 2, rng=np.random.default_rng(0))
    conv.basis.data[:, 0, 0] = [2.0, -1.0]
    conv.alpha.data[...] = np.array([[[1, 0], [0, 1], [0, 0]],
                                     [[1, 1], [0, 1], [1, 0]],
                                     [[0, 2], [1, 0], [0, 0]]], dtype=float)
    x = np.arange(1.0, 6.0)[:, None]
    # rows [0,1], [1,2,3], [3,4]; kernels 2 / -1 / ... evaluated by hand
    expected = [[2 * 1 - 1 * 2], [1 * 2 - 1 * 3 + 2 * 4], [-2 * 4 + 2 * 5]]
    np.testing.assert_allclose(conv(x).data, expected, atol=1e-14)


@pytest.mark.parametrize("seed", range(10))
def test_vcconv_matches_loop_oracle(seed):
    rng = np.random.default_rng(seed)
    smap = random_map(rng)
    i_ch, o_ch, m = (int(v) for v in rng.integers(1, 5, size=3))
    conv = VcConv(smap, i_ch, o_ch, m, rng=rng)
    conv.bias.data[...] = rng.normal(size=o_ch)
    x = rng.normal(size=(smap.in_vertices, i_ch))
    expected = vc_oracle(smap, conv.alpha.data, conv.basis.data, conv.bias.data, x)
    np.testing.assert_allclose(conv(x).data, expected, atol=1e-12)
    # batched evaluation agrees sample by sample
    xb = rng.normal(size=(3, smap.in_vertices, i_ch))
    out = conv(xb).data
    for b in range(3):
        np.testing.assert_allclose(out[b], conv(xb[b]).data, atol=1e-13)


@pytest.mark.parametrize("seed", range(10))
def test_lcconv_matches_dense_operator(seed):
    rng = np.random.default_rng(100 + seed)
    smap = random_map(rng)
    i_ch, o_ch = (int(v) for v in rng.integers(1, 5, size=2))
    lc = LcConv(smap, i_ch, o_ch, rng=rng)
    lc.bias.data[...] = rng.normal(size=o_ch)
    x = rng.normal(size=(smap.in_vertices, i_ch))
    np.testing.assert_allclose(lc(x).data, lc_dense_oracle(smap, lc.weight.data, lc.bias.data, x), atol=1e-12)


def load_matrix_units(vc, lc):
    """Make ``vc`` reproduce ``lc``: basis = matrix units, alpha = LC entries."""
    i_ch, o_ch = lc.in_channels, lc.out_channels
    units = np.zeros((i_ch * o_ch, i_ch, o_ch))
    for a in range(i_ch):
        for b in range(o_ch):
            units[a * o_ch + b, a, b] = 1.0
    vc.basis.data[...] = units
    vc.alpha.data[...] = lc.weight.data.reshape(lc.weight.shape[:2] + (i_ch * o_ch,))
    vc.bias.data[...] = lc.bias.data


def test_vcconv_subsumes_lcconv():
    rng = np.random.default_rng(5)
    smap = random_map(rng, n_in=8, n_out=6)
    lc = LcConv(smap, 2, 3, rng=rng)
    vc = VcConv(smap, 2, 3, 6, rng=rng)
    load_matrix_units(vc, lc)
    x = rng.normal(size=(8, 2))
    assert np.abs(vc(x).data - lc(x).data).max() <= 1e-12


def test_transpose_conv_needs_up_map():
    with pytest.raises(ConfigurationError):
        VcTransConv(path_down(), 1, 1, 1)
    t = VcTransConv(path_up(), 2, 1, 2, rng=np.random.default_rng(0))
    assert t(np.ones((3, 2))).shape == (5, 1)


def test_input_shape_checked():
    conv = VcConv(path_down(), 2, 1, 1)
    with pytest.raises(InputError):
        conv(np.ones((4, 2)))
    with pytest.raises(InputError):
        conv(np.ones((5, 3)))
    with pytest.raises(ConfigurationError):
        VcConv(path_down(), 2, 1, 0)


def test_homogeneity_with_zero_bias():
    rng = np.random.default_rng(3)
    conv = VcConv(path_down(), 2, 2, 3, rng=rng)
    x = rng.normal(size=(5, 2))
    np.testing.assert_allclose(conv(3.5 * x).data, 3.5 * conv(x).data, rtol=1e-13, atol=1e-14)


def test_normalized_basis_scale_free():
    rng = np.random.default_rng(4)
    conv = VcConv(path_down(), 2, 2, 3, normalize_basis=True, rng=rng)
    x = rng.normal(size=(5, 2))
    before = conv(x).data
    conv.basis.data *= 7.0
    np.testing.assert_allclose(conv(x).data, before, atol=1e-13)


def test_vdpool_example():
    smap = SamplingMap("down", 2, 1, 2, 1, ((0, 1),))
    pool = VdPool(smap)
    pool.vd.rho.data[...] = [[-1.0, 3.0]]
    assert pool(np.array([[10.0], [2.0]])).data[0, 0] == pytest.approx(4.0, abs=1e-14)


def test_vdpool_all_zero_row_falls_back_to_mean(caplog):
    pool = VdPool(SamplingMap("down", 2, 1, 2, 1, ((0, 1),)))
    pool.vd.rho.data[...] = 0.0
    assert pool(np.array([[10.0], [2.0]])).data[0, 0] == pytest.approx(6.0)
    assert "uniform" in caplog.text


@pytest.mark.parametrize("cls,up", [(VdPool, False), (VdUnpool, True)])
def test_vd_constant_signal_and_scale(cls, up):
    rng = np.random.default_rng(7)
    smap = random_map(rng, n_in=12, n_out=9, direction="up" if up else "down")
    layer = cls(smap)
    layer.vd.rho.data[...] = rng.normal(size=layer.vd.rho.shape) * layer.vd.mask
    const = np.full((12, 2), -1.25)
    np.testing.assert_array_equal(layer(const).data, np.full((9, 2), -1.25))
    x = rng.normal(size=(12, 2))
    before = layer(x).data
    np.testing.assert_allclose(layer.vd.normalized().data.sum(axis=1), 1.0, atol=1e-12)
    layer.vd.rho.data *= -0.3
    np.testing.assert_allclose(layer(x).data, before, atol=1e-12)


def test_pool_direction_enforced():
    with pytest.raises(ConfigurationError):
        VdPool(path_up())
    with pytest.raises(ConfigurationError):
        VdUnpool(path_down())


def test_vdres_example():
    smap = SamplingMap("down", 1, 0, 1, 1, ((0,),))
    res = VdRes(smap, 1, 2, rng=np.random.default_rng(0))
    res.channel_map.data[...] = [[2.0], [3.0]]
    np.testing.assert_allclose(res(np.array([[5.0]])).data, [[10.0, 15.0]])
    same = VdRes(path_down(), 2, 2)
    assert same.channel_map is None
    x = np.random.default_rng(1).normal(size=(5, 2))
    np.testing.assert_allclose(same(x).data, same.vd.aggregate(ad.reshape(ad.as_tensor(x), (1, 5, 2))).data[0])


def test_avg_and_max_pools():
    x = np.array([[1.0], [4.0], [2.0], [-3.0], [0.5]])
    assert AvgPool(path_down())(x).data[:, 0].tolist() == pytest.approx([2.5, 1.0, -1.25])
    assert MaxPool(path_down())(x).data[:, 0].tolist() == [4.0, 4.0, 0.5]
    z = np.array([[1.0], [5.0], [-2.0]])
    assert AvgUnpool(path_up())(z).data[:, 0].tolist() == [1.0, 3.0, 5.0, 1.5, -2.0]
    assert MaxUnpool(path_up())(z).data[:, 0].tolist() == [1.0, 5.0, 5.0, 5.0, -2.0]


def fixed_map(total=14):
    return SamplingMap("down", 2, 1, 6, 3, ((0, 1, 2, 3), (0, 1, 2, 3, 4), (1, 2, 3, 4, 5)))


def test_param_count_examples():
    smap = fixed_map()
    assert smap.total_size == 14
    assert param_count(VcConv(smap, 3, 8, 5)) == 198
    assert param_count(LcConv(smap, 3, 8)) == 344
    assert param_count(VdPool(smap)) == 14
    assert param_count(AvgPool(smap)) == 0


@pytest.mark.parametrize("seed", range(20))
def test_param_count_matches_registered(seed):
    rng = np.random.default_rng(200 + seed)
    smap = random_map(rng, max_k=7)
    i_ch, o_ch, m = (int(v) for v in rng.integers(1, 9, size=3))
    e = smap.total_size
    vc, lc = VcConv(smap, i_ch, o_ch, m, rng=rng), LcConv(smap, i_ch, o_ch, rng=rng)
    assert param_count(vc) == i_ch * o_ch * m + m * e + o_ch == vc.registered_count()
    assert param_count(lc) == i_ch * o_ch * e + o_ch == lc.registered_count()
    res = VdRes(smap, i_ch, o_ch, rng=rng)
    assert param_count(res) == res.registered_count()


def test_layer_determinism():
    a = VcConv(path_down(), 2, 3, 2, rng=np.random.default_rng(9))
    b = VcConv(path_down(), 2, 3, 2, rng=np.random.default_rng(9))
    x = np.random.default_rng(0).normal(size=(5, 2))
    assert np.array_equal(a(x).data, b(x).data)


def test_random_graph_layers_agree_with_oracle():
    rng = np.random.default_rng(11)
    topo = random_graph(25, rng)
    from vcmesh.sampling import select_vertices
    sel = select_vertices(topo, 2, seed=1)
    smap = build_down_map(topo, sel, 2, 2)
    conv = VcConv(smap, 3, 2, 4, rng=rng)
    x = rng.normal(size=(25, 3))
    np.testing.assert_allclose(conv(x).data, vc_oracle(smap, conv.alpha.data, conv.basis.data, conv.bias.data, x), atol=1e-12)
