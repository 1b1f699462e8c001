import numpy as np
import pytest

from descdistill import models as M


@pytest.fixture(scope="module")
def patches():
    return np.random.default_rng(0).uniform(0, 255, (6, 1, 32, 32)).astype(np.float32)


@pytest.mark.parametrize("build,dim", [(M.build_teacher, 128), (M.build_student, 64)])
def test_output_shape_and_unit_norm(build, dim, patches):
    out = build(seed=1).forward(patches)
    assert out.shape == (6, dim)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-5)


def test_wrong_input_shape():
    with pytest.raises(ValueError):
        M.build_student().forward(np.zeros((2, 1, 31, 32), np.float32))


def test_same_seed_same_weights():
    assert M.build_student(3).digest() == M.build_student(3).digest()
    assert M.build_student(3).digest() != M.build_student(4).digest()


def test_parameter_counts():
    t, s = M.build_teacher(), M.build_student()
    assert M.param_count(t) == M.spec_param_count(M.teacher_spec())
    assert M.param_count(s) == M.spec_param_count(M.student_spec())
    assert M.param_count(s) < 0.75 * M.param_count(t)
    assert M.param_count(t) >= 1.25 * M.param_count(s)
    assert M.param_count(None) == 0


def test_batch_of_one_matches_batch_row(patches):
    net = M.build_student(2)
    full = net.forward(patches)
    for i in range(len(patches)):
        np.testing.assert_allclose(net.forward(patches[i:i + 1])[0], full[i], atol=1e-6)


def test_permutation_equivariance(patches):
    net = M.build_teacher(2)
    perm = np.array([3, 0, 5, 1, 4, 2])
    np.testing.assert_allclose(net.forward(patches[perm]), net.forward(patches)[perm], atol=1e-6)


def test_standardize_scale_shift_invariant(patches):
    x = patches[:, 0].astype(np.float64)
    np.testing.assert_allclose(M.standardize(3.0 * x + 17.0), M.standardize(x), atol=1e-9)
    assert np.all(M.standardize(np.full((1, 4, 4), 5.0)) == 0.0)


def test_training_mode_updates_running_stats(patches):
    net = M.build_student(0).train()
    before = {k: v.copy() for k, v in net.buffers().items()}
    net.forward(patches)
    after = net.buffers()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_checkpoint_round_trip(tmp_path, patches):
    net = M.build_student(5)
    net.train().forward(patches)        # move running statistics off their initial values
    net.eval()
    path = tmp_path / "s.ckpt"
    M.save_checkpoint(net, {"note": "x"}, path)
    ck = M.load_checkpoint(path)
    assert ck.meta == {"note": "x"}
    assert ck.network.digest() == net.digest()
    np.testing.assert_array_equal(ck.network.forward(patches), net.forward(patches))


def test_checkpoint_bytes_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    M.save_checkpoint(M.build_student(1), {}, a)
    M.save_checkpoint(M.build_student(1), {}, b)
    assert a.read_bytes() == b.read_bytes()


def test_truncated_checkpoint(tmp_path):
    path = tmp_path / "t.ckpt"
    M.save_checkpoint(M.build_student(), {}, path)
    path.write_bytes(path.read_bytes()[:-10])
    with pytest.raises(M.CorruptCheckpointError):
        M.load_checkpoint(path)


def test_bad_magic(tmp_path):
    path = tmp_path / "x.ckpt"
    path.write_bytes(b"NOTACKPT" + bytes(40))
    with pytest.raises(M.CorruptCheckpointError):
        M.load_checkpoint(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "v.ckpt"
    M.save_checkpoint(M.build_student(), {}, path)
    raw = path.read_bytes().replace(b'"version": 1', b'"version": 9', 1)
    path.write_bytes(raw)
    with pytest.raises(M.VersionMismatchError):
        M.load_checkpoint(path)


def test_wrong_architecture(tmp_path):
    path = tmp_path / "s.ckpt"
    M.save_checkpoint(M.build_student(), {}, path)
    with pytest.raises(M.ShapeMismatchError):
        M.load_checkpoint(path, expect_spec=M.teacher_spec())


def test_spec_dict_round_trip():
    spec = M.student_spec()
    assert M.NetworkSpec.from_dict(spec.to_dict()) == spec


def test_backward_populates_every_param(patches):
    net = M.build_student(0).train()
    out = net.forward(patches)
    net.backward(np.random.default_rng(1).standard_normal(out.shape).astype(np.float32))
    assert all(t.grad is not None and np.all(np.isfinite(t.grad)) for t in net.params().values())
