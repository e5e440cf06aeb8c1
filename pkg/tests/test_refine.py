import math

import numpy as np
import pytest

from gradcheck import TOL, numeric_grad, rel_error
from poserefine import autonet, rotgeo
from poserefine.dataset import DatasetSplit, render_dataset
from poserefine.errors import CheckpointError, InvalidArgumentError, TrainingDivergenceError
from poserefine.refine import (
    ARCH_VERSION,
    Refiner,
    TrainConfig,
    build_network,
    checkpoint_meta,
    forward,
    format_metrics_log,
    geodesic_loss,
    geodesic_loss_batch,
    mse_loss,
    mse_loss_batch,
    refined_pose,
    train,
)
from poserefine.rotgeo import AxisAngle, UnitQuaternion, axis_angle_to_quat
from poserefine.sampler import NoiseConfig, make_rng, perturb


@pytest.fixture(scope="module")
def net():
    return build_network(0)


@pytest.fixture(scope="module")
def tiny_data():
    rng = make_rng(21)
    return render_dataset([rotgeo.random_quaternion(rng) for _ in range(24)])


def _images(rng, n):
    return rng.uniform(0, 1, size=(n, 3, 64, 64)).astype(np.float32)


def _quats(rng, n):
    return np.array([rotgeo.random_quaternion(rng).as_array() for _ in range(n)])


# ---------------------------------------------------------------- construction


def test_same_seed_gives_identical_checkpoints(net):
    assert build_network(0).to_bytes() == net.to_bytes()


def test_different_seed_gives_different_weights(net):
    other = build_network(1)
    a = dict(net.parameters_named())["head.0.weight"].data
    b = dict(other.parameters_named())["head.0.weight"].data
    assert not np.array_equal(a, b)


def test_stage_sizes(net):
    rng = make_rng(0)
    net.set_mode("eval")
    feats = net.cnn.forward(_images(rng, 2))
    pose = net.pose.forward(_quats(rng, 2).astype(np.float32))
    assert feats.shape == (2, 4096)
    assert pose.shape == (2, 4096)
    assert np.concatenate([feats, pose], axis=1).shape == (2, 8192)
    assert net.feature_sizes() == (4096, 4096)


def test_rejects_wrong_image_shape(net):
    with pytest.raises(InvalidArgumentError):
        net.forward_batch(np.zeros((1, 3, 32, 32), np.float32), np.array([[1.0, 0, 0, 0]]))


# ---------------------------------------------------------------- forward


def test_output_is_unit_norm_and_finite(net):
    rng = make_rng(1)
    images, q_in = _images(rng, 100), _quats(rng, 100)
    net.set_mode("eval")
    out = net.forward_batch(images, q_in)
    assert np.all(np.isfinite(out))
    assert np.abs(np.linalg.norm(out.astype(np.float64), axis=1) - 1).max() < 1e-6


def test_forward_is_bit_reproducible(net):
    rng = make_rng(2)
    image = rng.uniform(0, 1, size=(64, 64, 3))
    q = rotgeo.random_quaternion(rng)
    a = forward(net, image, q)
    b = forward(net, image, q)
    assert a == b
    assert abs(a.norm() - 1) < 1e-9


def test_forward_restores_mode(net):
    net.set_mode("train")
    forward(net, np.zeros((64, 64, 3)), UnitQuaternion.identity())
    assert net.mode == "train"
    net.set_mode("eval")


def test_refined_pose_identity_correction():
    q = rotgeo.random_quaternion(make_rng(3))
    assert refined_pose(q, UnitQuaternion.identity()).same_rotation(q, 1e-12)


def test_refined_pose_with_sampler_label_recovers_truth():
    rng = make_rng(4)
    for _ in range(200):
        q_gt = rotgeo.random_quaternion(rng)
        pair = perturb(q_gt, NoiseConfig.uniform(0, 30), rng)
        assert rotgeo.geodesic_angle(refined_pose(pair.q_in, pair.q_label), q_gt) < 1e-9


def test_refined_pose_matches_matrix_product():
    rng = make_rng(5)
    for _ in range(100):
        a, b = rotgeo.random_quaternion(rng), rotgeo.random_quaternion(rng)
        expect = rotgeo.quat_to_matrix(a) @ rotgeo.quat_to_matrix(b)
        assert np.abs(rotgeo.quat_to_matrix(refined_pose(a, b)) - expect).max() < 1e-9


# ---------------------------------------------------------------- losses


def test_geodesic_loss_examples():
    q = rotgeo.random_quaternion(make_rng(6))
    assert geodesic_loss(q, q)[0] < 1e-3
    assert geodesic_loss(-q, q)[0] < 1e-3
    turn = axis_angle_to_quat(AxisAngle((0.0, 1.0, 0.0), 1.0))
    assert geodesic_loss(turn, UnitQuaternion.identity())[0] == pytest.approx(1.0, abs=1e-12)


def test_geodesic_loss_matches_geodesic_angle():
    rng = make_rng(7)
    for _ in range(500):
        a, b = rotgeo.random_quaternion(rng), rotgeo.random_quaternion(rng)
        loss = geodesic_loss(a, b)[0]
        if loss < 1e-3:
            continue
        assert abs(loss - rotgeo.geodesic_angle(a, b)) < 1e-9


def test_mse_loss_examples():
    q = rotgeo.random_quaternion(make_rng(8))
    assert mse_loss(q.canonical(), q)[0] == 0.0
    assert mse_loss(UnitQuaternion(1.0, 0, 0, 0), UnitQuaternion(0, 0, 0, 1.0))[0] == pytest.approx(0.5)


def test_both_losses_vanish_only_at_the_label():
    rng = make_rng(9)
    for _ in range(50):
        lab = rotgeo.random_quaternion(rng).canonical()
        assert mse_loss(lab, lab)[0] == 0.0
        assert geodesic_loss(lab, lab)[0] < 1e-3
        other = rotgeo.quat_mul(lab, axis_angle_to_quat(AxisAngle((1.0, 0.0, 0.0), 0.2)))
        assert mse_loss(other.canonical(), lab)[0] > 0
        assert geodesic_loss(other, lab)[0] > 0.19


def _loss_instances(seed, n):
    rng = make_rng(seed)
    found = []
    while len(found) < n:
        q_out = rng.normal(size=4)
        q_out /= np.linalg.norm(q_out)
        q_lab = rotgeo.random_quaternion(rng).canonical().as_array()
        loss = geodesic_loss_batch(q_out[None], q_lab[None])[0]
        if 0.1 <= loss <= 3.0:
            found.append((q_out, q_lab))
    return found


@pytest.mark.parametrize("loss_fn", [geodesic_loss_batch, mse_loss_batch], ids=["geodesic", "mse"])
def test_loss_gradients_match_finite_differences(loss_fn):
    for q_out, q_lab in _loss_instances(10, 25):
        x = q_out[None].copy()
        _, grad = loss_fn(x, q_lab[None])
        num = numeric_grad(lambda: loss_fn(x, q_lab[None])[0], x)
        assert rel_error(grad, num) < TOL


@pytest.mark.parametrize("loss_fn", [geodesic_loss_batch, mse_loss_batch], ids=["geodesic", "mse"])
def test_batched_loss_gradient_through_normalization(loss_fn):
    rng = make_rng(11)
    for _ in range(20):
        raw = rng.normal(size=(3, 4))
        lab = _quats(rng, 3) * np.sign(_quats(rng, 3)[:, :1] + 2)
        lab = np.array([UnitQuaternion.from_array(q).canonical().as_array() for q in lab])

        def f():
            out, _ = autonet.l2_normalize_forward(raw)
            return loss_fn(out, lab)[0]

        out, cache = autonet.l2_normalize_forward(raw)
        _, g = loss_fn(out, lab)
        analytic = autonet.l2_normalize_backward(g, cache)
        assert rel_error(analytic, numeric_grad(f, raw)) < TOL


def test_geodesic_gradient_is_bounded_near_zero_loss():
    q = rotgeo.random_quaternion(make_rng(12)).as_array()
    loss, grad = geodesic_loss_batch(q[None], q[None])
    assert np.all(np.isfinite(grad))
    assert loss < 1e-3


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path, net):
    path = tmp_path / "m.ckpt"
    net.save(path, {"note": "x"})
    back = Refiner.load(path)
    assert back.to_bytes({"note": "x"}) == net.to_bytes({"note": "x"})
    assert back.meta["arch"] == ARCH_VERSION and back.meta["note"] == "x"


def test_checkpoint_with_other_arch_is_refused(net):
    entries = net.state_entries({"arch": "something-else"})
    assert checkpoint_meta(entries)["arch"] == "something-else"
    with pytest.raises(CheckpointError, match="architecture"):
        Refiner.from_entries(entries)


def test_checkpoint_missing_tensor_is_refused(net):
    entries = net.state_entries()
    del entries["head.6.weight"]
    with pytest.raises(CheckpointError, match="missing"):
        Refiner.from_entries(entries)


# ---------------------------------------------------------------- training


def _split(n_train, n_val):
    return DatasetSplit(list(range(n_train)), list(range(n_train, n_train + n_val)), [], 0)


def test_zero_epochs_leave_weights_unchanged(tiny_data):
    model = build_network(3)
    before = model.to_bytes()
    _, metrics = train(model, tiny_data, _split(16, 8), TrainConfig(epochs_mse=0, epochs_geodesic=0))
    assert metrics == []
    assert model.to_bytes() == before


def test_short_training_is_reproducible(tiny_data):
    cfg = TrainConfig(epochs_mse=1, epochs_geodesic=1, batch_size=8)
    runs = []
    for _ in range(2):
        model = build_network(4)
        _, metrics = train(model, tiny_data, _split(16, 8), cfg)
        runs.append((format_metrics_log(metrics), model.to_bytes()))
    assert runs[0] == runs[1]
    log = runs[0][0].splitlines()
    assert log[0].startswith("epoch=1 loss=mse ")
    assert log[1].startswith("epoch=2 loss=geodesic ")
    assert runs[0][1] != build_network(4).to_bytes()


def test_training_reduces_loss_on_a_tiny_set(tiny_data):
    cfg = TrainConfig(epochs_mse=6, epochs_geodesic=0, batch_size=8, lr=1e-4, redraw_noise=False)
    model = build_network(5)
    _, metrics = train(model, tiny_data, _split(16, 8), cfg)
    assert metrics[-1].train_loss < metrics[0].train_loss


def test_non_finite_input_raises_divergence(tiny_data):
    bad = tiny_data.subset(range(16))
    bad.images = bad.images.copy()
    bad.images[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergenceError, match="epoch 1"):
        train(build_network(6), bad, _split(16, 0), TrainConfig(epochs_mse=1, epochs_geodesic=0, batch_size=16))


def test_train_config_validation():
    with pytest.raises(InvalidArgumentError):
        TrainConfig(epochs_mse=-1)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(batch_size=1)
    with pytest.raises(InvalidArgumentError):
        TrainConfig(lr=0.0)
    assert TrainConfig().digest() == TrainConfig().digest()
    assert TrainConfig().digest() != TrainConfig(seed=1).digest()


def test_loss_gradient_sign_points_toward_label():
    lab = UnitQuaternion.identity()
    out = axis_angle_to_quat(AxisAngle((0.0, 0.0, 1.0), 1.0))
    loss, grad = geodesic_loss(out, lab)
    step = out.as_array() - 1e-2 * grad
    assert geodesic_loss(UnitQuaternion.from_array(step, normalize=True), lab)[0] < loss
    assert math.isfinite(loss)
