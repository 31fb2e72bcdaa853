import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from capsdetect import ndgrad as G
from capsdetect import nets, tensorio
from capsdetect.ndgrad import Tensor


@pytest.fixture(scope="module")
def mnist_models():
    return {a: nets.ModelBundle.create(nets.preset("mnist", a), seed=0) for a in nets.ARCHITECTURES}


# ---------------------------------------------------------------- squash
def test_squash_examples():
    np.testing.assert_array_equal(nets.squash(Tensor(np.zeros((1, 4)))).data, np.zeros((1, 4)))
    s = np.array([[0.6, 0.8]])
    np.testing.assert_allclose(nets.squash(Tensor(s)).data, s / 2, rtol=1e-6)


def test_squash_norm_below_one_sweep(rng):
    s = rng.standard_normal((10_000, 8)) * rng.uniform(0, 20, (10_000, 1))
    with G.precision(np.float64):
        v = nets.squash(Tensor(s)).data
    norms = np.linalg.norm(v, axis=1)
    assert (norms < 1).all()
    cos = (v * s).sum(1) / (norms * np.linalg.norm(s, axis=1))
    np.testing.assert_allclose(cos, 1.0, atol=1e-9)


@given(arrays(np.float64, 5, elements=st.floats(-1e3, 1e3, allow_nan=False)))
def test_squash_property(s):
    with G.precision(np.float64):
        v = nets.squash(Tensor(s[None])).data[0]
    assert np.linalg.norm(v) < 1
    assert np.all(v * s >= 0)


# --------------------------------------------------------------- routing
def test_routing_hand_trace_one_iteration():
    u = np.zeros((2, 2, 2))
    u[0, 0] = [1, 0]
    u[1, 0] = [1, 0]
    u[0, 1] = [0, 2]
    with G.precision(np.float64):
        v, cs = nets.dynamic_routing(u, 1, return_couplings=True)
    # c = 1/2 everywhere, s_0 = [1, 0], s_1 = [0, 1], both of unit length -> halved
    np.testing.assert_array_equal(cs[0], np.full((1, 2, 2), 0.5))
    np.testing.assert_allclose(v.data[0], [[0.5, 0.0], [0.0, 0.5]], atol=1e-15)


def test_routing_hand_trace_two_iterations():
    u = np.zeros((2, 2, 2))
    u[0, 0] = [1, 0]
    u[1, 0] = [1, 0]
    u[0, 1] = [0, 2]
    with G.precision(np.float64):
        v, cs = nets.dynamic_routing(u, 2, return_couplings=True)
    # agreements after round 1: b = [[0.5, 1.0], [0.5, 0.0]]
    c0 = [math.exp(0.5) / (math.exp(0.5) + math.exp(1.0)), math.exp(1.0) / (math.exp(0.5) + math.exp(1.0))]
    c1 = [math.exp(0.5) / (math.exp(0.5) + 1), 1 / (math.exp(0.5) + 1)]
    np.testing.assert_allclose(cs[1][0], [c0, c1], rtol=1e-12)
    s0 = c0[0] * 1 + c1[0] * 1
    s1 = c0[1] * 2
    np.testing.assert_allclose(v.data[0, 0], [s0**2 / (1 + s0**2), 0], rtol=1e-12)
    np.testing.assert_allclose(v.data[0, 1], [0, s1**2 / (1 + s1**2)], rtol=1e-12)


def test_routing_first_iteration_uniform_and_sums(rng):
    u = rng.standard_normal((3, 20, 5, 4))
    _, cs = nets.dynamic_routing(u, 3, return_couplings=True)
    np.testing.assert_array_equal(cs[0], np.full((3, 20, 5), 0.2))
    for c in cs:
        np.testing.assert_allclose(c.sum(axis=2), 1.0, atol=1e-6)


def test_routing_needs_iterations():
    with pytest.raises(ValueError):
        nets.dynamic_routing(np.zeros((2, 2, 2)), 0)


def test_capsule_predictions_match_einsum(rng):
    u = rng.standard_normal((2, 6, 4))
    w = rng.standard_normal((6, 3, 5, 4))
    with G.precision(np.float64):
        got = nets.capsule_predictions(Tensor(u), Tensor(w)).data
    np.testing.assert_allclose(got, np.einsum("ikdp,nip->nikd", w, u), rtol=1e-12)


# --------------------------------------------------------------- models
def test_parameter_counts_hand_formula(mnist_models):
    dec = 160 * 512 + 512 + 512 * 1024 + 1024 + 1024 * 784 + 784
    conv1 = 256 * 81 + 256
    conv2 = 256 * 256 * 81 + 256
    caps = 1152 * 10 * 16 * 8
    fc = 256 * 6 * 6 * 160 + 160
    expected = {
        "capsnet": conv1 + conv2 + caps + dec,
        "cnn_cr": conv1 + conv2 + fc + dec,
        "cnn_r": conv1 + conv2 + fc + 160 * 10 + 10 + dec,
    }
    counts = {a: m.param_count() for a, m in mnist_models.items()}
    assert counts == expected
    assert max(counts.values()) / min(counts.values()) - 1 < 0.05


@pytest.mark.parametrize("name", ["mnist", "fashion", "svhn", "tiny"])
def test_parameter_parity_per_preset(name):
    counts = [nets.ModelBundle.create(nets.preset(name, a)).param_count() for a in nets.ARCHITECTURES]
    assert max(counts) / min(counts) - 1 < 0.05


def test_capsnet_forward_shapes(mnist_models, rng):
    x = rng.random((2, 1, 28, 28)).astype(np.float32)
    logits, v = nets.forward_capsnet(mnist_models["capsnet"], x)
    assert v.shape == (2, 10, 16)
    assert logits.shape == (2, 10)
    assert (logits.data >= 0).all() and (logits.data < 1).all()
    np.testing.assert_allclose(logits.data, np.linalg.norm(v.data, axis=2), rtol=1e-6)


def test_cnn_forward_shapes_and_logits(mnist_models, rng):
    x = rng.random((2, 1, 28, 28)).astype(np.float32)
    logits, poses = nets.forward_cnn(mnist_models["cnn_cr"], x, conditional=True)
    assert poses.shape == (2, 10, 16)
    np.testing.assert_allclose(logits.data, poses.data.sum(axis=2), rtol=1e-6)
    logits, poses = nets.forward_cnn(mnist_models["cnn_r"], x, conditional=False)
    assert poses.shape == (2, 1, 160)
    assert logits.shape == (2, 10)
    with pytest.raises(ValueError):
        nets.forward_cnn(mnist_models["cnn_r"], x, conditional=True)


def test_input_shape_checked(mnist_models):
    with pytest.raises(ValueError):
        mnist_models["capsnet"].forward(np.zeros((1, 1, 32, 32), dtype=np.float32))


def test_capsnet_argmax_invariant_to_uniform_rescale(mnist_models, rng):
    _, v = mnist_models["capsnet"].forward(rng.random((4, 1, 28, 28)).astype(np.float32))
    for a in (0.1, 0.5, 3.0):
        np.testing.assert_array_equal(np.linalg.norm(a * v.data, axis=2).argmax(1),
                                      np.linalg.norm(v.data, axis=2).argmax(1))


@pytest.mark.parametrize("arch", ["capsnet", "cnn_cr"])
def test_masking_invariance_bit_exact(arch, rng):
    m = nets.ModelBundle.create(nets.preset("tiny", arch), seed=1)
    k, d = m.n_classes, m.config.pose_dim
    poses = rng.standard_normal((8, k, d)).astype(np.float32)
    ids = rng.integers(0, k, 8)
    ref = nets.mask_and_reconstruct(m, Tensor(poses), ids).data
    for _ in range(50):
        moved = poses + rng.standard_normal(poses.shape).astype(np.float32)
        moved[np.arange(8), ids] = poses[np.arange(8), ids]
        np.testing.assert_array_equal(nets.mask_and_reconstruct(m, Tensor(moved), ids).data, ref)
    assert (ref >= 0).all() and (ref <= 1).all()


def test_mask_class_out_of_range():
    m = nets.ModelBundle.create(nets.preset("tiny", "capsnet"))
    with pytest.raises(ValueError):
        nets.mask_and_reconstruct(m, Tensor(np.zeros((1, 10, 8), dtype=np.float32)), 10)


def test_unmasked_reconstruction_uses_all_poses(rng):
    m = nets.ModelBundle.create(nets.preset("tiny", "capsnet"), seed=2)
    poses = rng.standard_normal((1, 10, 8)).astype(np.float32)
    a = m.reconstruct(Tensor(poses), [0], masked=False).data
    poses[0, 5] += 1
    assert not np.array_equal(a, m.reconstruct(Tensor(poses), [0], masked=False).data)


# ----------------------------------------------------------------- losses
def test_margin_loss_examples():
    logits = np.full((1, 10), 0.1)
    logits[0, 3] = 0.9
    with G.precision(np.float64):
        assert nets.margin_loss(Tensor(logits), [3]).item() == pytest.approx(0.0, abs=1e-15)
        z = np.zeros((1, 10))
        assert nets.margin_loss(Tensor(z), [3]).item() == pytest.approx(0.81)


def test_margin_loss_gradient(rng):
    logits = rng.uniform(0, 1, (4, 5))
    assert G.gradcheck(lambda a: nets.margin_loss(a, [0, 1, 4, 2]), [logits]) < 1e-6


def test_total_loss_uses_true_class_reconstruction(rng):
    m = nets.ModelBundle.create(nets.preset("tiny", "capsnet"), seed=0)
    x = rng.random((3, 1, 28, 28)).astype(np.float32)
    y = np.array([1, 2, 3])
    loss, cls_v, rec_v = nets.total_loss(m, x, y)
    _, v = m.forward(x)
    r = m.reconstruct(v, y).data
    sse = ((r - x.reshape(3, -1)) ** 2).sum(1).mean()
    assert rec_v == pytest.approx(sse, rel=1e-5)
    assert loss.item() == pytest.approx(cls_v + 0.0005 * sse, rel=1e-5)


# --------------------------------------------------------------- training
def test_training_reduces_loss_and_is_deterministic(digits):
    train, _ = digits
    sub = train.head(256)

    def run():
        m = nets.ModelBundle.create(nets.preset("tiny", "cnn_cr"), seed=4)
        hist = nets.train(m, sub.images, sub.labels, sub.images[:64], sub.labels[:64],
                          epochs=3, batch_size=64, rng=np.random.default_rng(0))
        return m, hist

    m1, h1 = run()
    m2, _ = run()
    assert m1.checksum() == m2.checksum()
    losses = [e.train_loss for e in h1]
    assert losses[2] < losses[0]
    assert all(math.isfinite(e.val_error) for e in h1)


def test_zero_recon_weight_leaves_decoder_untouched(digits):
    train, _ = digits
    m = nets.ModelBundle.create(nets.preset("tiny", "capsnet"), seed=0)
    before = {k: v.data.copy() for k, v in m.params.items()}
    nets.train(m, train.images[:64], train.labels[:64], epochs=1, batch_size=32, recon_weight=0.0)
    for k, v in m.params.items():
        changed = not np.array_equal(before[k], v.data)
        assert changed != k.startswith("dec"), k


def test_divergence_raises(digits):
    train, _ = digits
    m = nets.ModelBundle.create(nets.preset("tiny", "cnn_r"), seed=0)
    m.params["head.w"].data[:] = 3e38
    with pytest.raises(nets.TrainingDiverged), np.errstate(all="ignore"):
        nets.train(m, train.images[:32], train.labels[:32], epochs=1, batch_size=32)


def test_epoch_checkpoints(tmp_path, digits):
    train, _ = digits
    m = nets.ModelBundle.create(nets.preset("tiny", "cnn_r"), seed=0)
    nets.train(m, train.images[:64], train.labels[:64], epochs=2, batch_size=32, checkpoint_dir=tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_001.ckpt", "epoch_002.ckpt"]
    assert nets.ModelBundle.load(tmp_path / "epoch_002.ckpt").checksum() == m.checksum()


# -------------------------------------------------------------- checkpoint
@pytest.mark.parametrize("arch", nets.ARCHITECTURES)
def test_checkpoint_round_trip_bit_exact(tmp_path, arch):
    m = nets.ModelBundle.create(nets.preset("tiny", arch), seed=3, meta={"dataset": "digits"})
    path = m.save(tmp_path / "m.ckpt")
    back = nets.ModelBundle.load(path)
    assert back.config == m.config
    assert back.meta["dataset"] == "digits"
    for k in m.params:
        assert back.params[k].data.tobytes() == m.params[k].data.tobytes()
    assert path.read_bytes() == back.save(tmp_path / "again.ckpt").read_bytes()


def test_checkpoint_header_fields(tmp_path):
    m = nets.ModelBundle.create(nets.preset("tiny", "capsnet"))
    c = tensorio.load(m.save(tmp_path / "m.ckpt"))
    assert (c.tag, c.n_classes, c.input_shape) == ("capsnet", 10, (1, 28, 28))


def test_frozen_view_shares_storage_without_grad():
    m = nets.ModelBundle.create(nets.preset("tiny", "capsnet"))
    f = m.frozen()
    assert all(not p.requires_grad for p in f.parameters())
    assert all(np.shares_memory(f.params[k].data, m.params[k].data) for k in m.params)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_init_is_seeded(seed):
    a = nets.init_params(nets.preset("tiny", "cnn_r"), np.random.default_rng(seed))
    b = nets.init_params(nets.preset("tiny", "cnn_r"), np.random.default_rng(seed))
    assert all(np.array_equal(a[k], b[k]) for k in a)
    w = a["conv1.w"]
    assert np.abs(w).max() <= 2 * 0.05
    assert not a["conv1.b"].any()
