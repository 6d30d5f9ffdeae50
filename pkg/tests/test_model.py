import numpy as np
import pytest

from vcmesh import autodiff as ad
from vcmesh.autodiff import Parameter, grad_check
from vcmesh.errors import ConfigurationError, InputError
from vcmesh.mesh import MeshDataset, VertexFeatures
from vcmesh.model import (
    Adam, AutoencoderModel, LatentCode, TrainConfig, Trainer, UniformLaplacian,
    interpolate_latent, loss_l1, loss_laplacian, lr_schedule, mix_latent, train,
)
from vcmesh.sampling import build_hierarchy, receptive_field
from vcmesh.synthetic import path_topology, random_graph


@pytest.fixture(scope="module")
def small_model():
    topo = random_graph(20, np.random.default_rng(3))
    h = build_hierarchy(topo, [(2, 1), (2, 1)], seed=2)
    return AutoencoderModel(h, (2, 3, 3, 3, 2), [2, 2], seed=1)


def test_auto_m_on_path():
    h = build_hierarchy(path_topology(5), [(2, 1, [0])])
    model = AutoencoderModel(h, (1, 2, 1))
    # down sizes {2, 3, 2} -> 2; up sizes {1, 2, 1, 2, 1} -> 1
    assert model.basis_sizes == [2, 1]


def test_plan_validation(small_model):
    h = small_model.hierarchy
    with pytest.raises(ConfigurationError):
        AutoencoderModel(h, (2, 3, 2))
    with pytest.raises(ConfigurationError):
        AutoencoderModel(h, (2, 3, 3, 3, 1))
    with pytest.raises(ConfigurationError):
        AutoencoderModel(h, (2, 3, 3, 3, 2), [1, 2, 3])
    with pytest.raises(ConfigurationError):
        AutoencoderModel(h, (2, 3, 3, 3, 2), block="dense")


def test_shapes_and_zero_propagation(small_model):
    n_latent, c_latent = small_model.latent_shape
    assert c_latent == 3 and n_latent == small_model.hierarchy.vertex_counts()[-1]
    x = np.zeros((4, 20, 2))
    assert small_model.encode_tensor(x).shape == (4, n_latent, 3)
    # biases start at zero and elu(0) = 0, so zeros map to zeros
    np.testing.assert_array_equal(small_model(x).data, x)
    with pytest.raises(InputError):
        small_model.reconstruct(np.zeros((19, 2)))


def test_depth2_gradient_under_200_parameters():
    topo = random_graph(16, np.random.default_rng(3))
    model = AutoencoderModel(build_hierarchy(topo, [(2, 1), (2, 1)], seed=2), (2, 3, 3, 3, 2), [1, 1], seed=1)
    assert model.param_count() <= 200
    assert model.param_count() == sum(p.num_trainable for p in model.parameters())
    rng = np.random.default_rng(0)
    for p in model.parameters():
        p.data += 0.1 * rng.normal(size=p.shape) * (1 if p.trainable is None else p.trainable)
    x = rng.normal(size=(2, 16, 2))
    err = grad_check(lambda: loss_l1(model(x), np.zeros_like(x)) + loss_laplacian(
        model(x), x, topo), model.parameters())
    assert err < 1e-4


def test_variants_build_and_run(small_model):
    h = small_model.hierarchy
    x = np.random.default_rng(1).normal(size=(20, 2))
    for block, pool in [("plain", "vd"), ("conv_pool", "vd"), ("conv_pool", "avg"), ("conv_pool", "max")]:
        m = AutoencoderModel(h, (2, 3, 3, 3, 2), [2, 2], block=block, pool=pool, normalize_basis=True)
        assert m.reconstruct(x).shape == (20, 2)
        assert m.param_count() == sum(p.num_trainable for p in m.parameters())


def test_locality(small_model):
    h = small_model.hierarchy
    rng = np.random.default_rng(5)
    for p in small_model.parameters():
        p.data += 0.2 * rng.normal(size=p.shape) * (1 if p.trainable is None else p.trainable)
    code = small_model.encode(rng.normal(size=(20, 2)))
    base = small_model.decode(code)
    for z in range(small_model.latent_shape[0]):
        bumped = code.copy()
        bumped.values[z] += 1.0
        changed = np.flatnonzero(np.any(small_model.decode(bumped) != base, axis=1))
        assert set(changed.tolist()) <= receptive_field(h, z).vertices


def test_determinism(small_model):
    h = small_model.hierarchy
    x = np.random.default_rng(0).normal(size=(20, 2))
    a = AutoencoderModel(h, (2, 3, 3, 3, 2), seed=4).reconstruct(x)
    b = AutoencoderModel(h, (2, 3, 3, 3, 2), seed=4).reconstruct(x)
    assert np.array_equal(a, b)


def test_losses():
    assert loss_l1(np.array([[0.0], [1.0]]), np.zeros((2, 1))).data == 0.5
    with pytest.raises(InputError):
        loss_l1(np.zeros((2, 1)), np.zeros((3, 1)))
    topo = path_topology(4)
    rng = np.random.default_rng(0)
    pred, target = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    a = loss_laplacian(pred, target, topo).data
    assert loss_laplacian(pred + 7.0, target, topo).data == pytest.approx(a, abs=1e-12)
    # path 0-1-2: L x_1 = x_1 - (x_0 + x_2) / 2
    lap = UniformLaplacian(path_topology(3))
    np.testing.assert_allclose(lap(np.array([[0.0], [4.0], [2.0]])).data, [[-4.0], [3.0], [-2.0]])


def test_adam_first_step():
    p = Parameter(np.array([0.0]))
    opt = Adam([p])
    p.grad[...] = 1.0
    opt.step(0.1)
    assert p.data[0] == pytest.approx(-0.1, abs=1e-8)
    q = Parameter(np.array([2.0]))
    opt = Adam([q])
    opt.step(0.1)
    assert q.data[0] == 2.0


def test_lr_schedule():
    assert lr_schedule(0) == 1e-4
    assert lr_schedule(2) == pytest.approx(8.1e-5, rel=1e-12)


def _dataset(model, samples=8, seed=0):
    rng = np.random.default_rng(seed)
    topo = model.hierarchy.base
    c = model.channels[0]
    return MeshDataset(topo, [VertexFeatures(rng.normal(size=(topo.num_vertices, c))) for _ in range(samples)])


def test_zero_lr_leaves_parameters(small_model):
    before = [p.data.copy() for p in small_model.parameters()]
    log, _ = train(small_model, _dataset(small_model), TrainConfig(lr=0.0, epochs=1, batch_size=4))
    assert len(log.epochs) == 1 and np.isfinite(log.epochs[0].train_l1)
    assert all(np.array_equal(b, p.data) for b, p in zip(before, small_model.parameters()))


def test_training_is_deterministic_and_decreases(small_model):
    h = small_model.hierarchy
    data = _dataset(small_model, 16).subset("train")
    runs = []
    for _ in range(2):
        model = AutoencoderModel(h, (2, 3, 3, 3, 2), [2, 2], seed=7)
        trainer = Trainer(model, TrainConfig(lr=1e-2, decay=1.0, batch_size=4, seed=3))
        runs.append(trainer.fit(data, steps=40).step_losses)
    assert runs[0] == runs[1]
    assert np.mean(runs[0][-4:]) < np.mean(runs[0][:4])


def test_topology_mismatch(small_model):
    other = MeshDataset(path_topology(20), [VertexFeatures(np.zeros((20, 2)))])
    with pytest.raises(InputError):
        train(small_model, other, TrainConfig(epochs=1))


def test_latent_edits():
    rng = np.random.default_rng(0)
    s = LatentCode(rng.normal(size=(4, 3)), 9)
    t = LatentCode(rng.normal(size=(4, 3)), 9)
    assert np.array_equal(interpolate_latent(s, t, range(4), 0.0).values, s.values)
    assert np.array_equal(interpolate_latent(s, t, range(4), 1.0).values, t.values)
    assert np.array_equal(interpolate_latent(s, t, [], 0.7).values, s.values)
    half = interpolate_latent(s, t, [2], 0.5).values
    np.testing.assert_array_equal(half[2], (s.values[2] + t.values[2]) / 2)
    assert np.array_equal(np.delete(half, 2, axis=0), np.delete(s.values, 2, axis=0))
    tau = 0.3
    np.testing.assert_array_equal(interpolate_latent(s, t, range(4), tau).values, (1 - tau) * s.values + tau * t.values)
    assert np.array_equal(mix_latent(s, t, range(4)).values, t.values)
    assert np.array_equal(mix_latent(s, t, []).values, s.values)
    diff = np.any(mix_latent(s, t, [1]).values != s.values, axis=1)
    assert diff.tolist() == [False, True, False, False]
    with pytest.raises(InputError):
        mix_latent(s, LatentCode(t.values, 10), [0])
    with pytest.raises(InputError):
        interpolate_latent(s, t, [4], 0.5)


def test_decode_checks_fingerprint(small_model):
    code = small_model.encode(np.zeros((20, 2)))
    with pytest.raises(InputError):
        small_model.decode(LatentCode(code.values, code.fingerprint ^ 1))
