import numpy as np
import pytest

from stndet.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from stndet.optim import OptimState, adamw_step, default_no_decay
from stndet.tensor import Tensor


def scalar_param(value, grad):
    p = Tensor(np.array([value]), requires_grad=True)
    p.grad = np.array([grad])
    return p


def test_adamw_hand_computed_step():
    p = scalar_param(1.0, 1.0)
    adamw_step({"w": p}, OptimState(lr=0.002, weight_decay=0.0))
    # m = 0.1, v = 0.001, bias-corrected both to 1: p -= lr * 1 / (1 + eps)
    assert p.data[0] == pytest.approx(1.0 - 0.002 / (1.0 + 1e-8), abs=1e-15)


def test_adamw_hand_computed_step_with_decay():
    p = scalar_param(1.0, 1.0)
    adamw_step({"w": p}, OptimState(lr=0.002, weight_decay=5e-4))
    assert p.data[0] == pytest.approx((1.0 - 0.002 * 5e-4) - 0.002 / (1.0 + 1e-8), abs=1e-15)


def test_zero_grad_decays_by_lr_wd():
    p = scalar_param(3.0, 0.0)
    adamw_step({"w": p}, OptimState(lr=0.01, weight_decay=0.1))
    assert p.data[0] == pytest.approx(3.0 - 0.01 * 0.1 * 3.0, abs=1e-15)


def test_no_decay_group_and_grads_untouched():
    p, b = scalar_param(2.0, 0.0), scalar_param(2.0, 0.0)
    st = OptimState(lr=0.01, weight_decay=0.1, no_decay=default_no_decay(["conv.weight", "conv.bias"]))
    adamw_step({"conv.weight": p, "conv.bias": b}, st)
    assert b.data[0] == 2.0 and p.data[0] < 2.0
    assert p.grad[0] == 0.0 and st.step == 1


def test_lr_scale():
    p = scalar_param(1.0, 1.0)
    adamw_step({"w": p}, OptimState(lr=0.002, weight_decay=0.0, lr_scale={"w": 0.5}))
    assert p.data[0] == pytest.approx(1.0 - 0.001 / (1.0 + 1e-8), abs=1e-15)


def test_missing_grad_raises():
    p = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        adamw_step({"w": p}, OptimState())


def test_checkpoint_round_trip_exact(tmp_path, rng):
    arrays = {"a": rng.normal(size=(3, 4)), "b": rng.normal(size=5).astype(np.float32),
              "c": np.array(7.0), "d": np.zeros((0, 2))}
    path = save_checkpoint(tmp_path / "x.ckpt", arrays, {"note": "hi", "n": [1, 2]})
    got, meta = load_checkpoint(path)
    assert meta == {"note": "hi", "n": [1, 2]}
    assert set(got) == set(arrays)
    for k, v in arrays.items():
        assert got[k].dtype == v.dtype and got[k].shape == v.shape
        assert got[k].tobytes() == v.tobytes()


def test_optimizer_state_round_trip(tmp_path, rng):
    p = Tensor(rng.normal(size=(2, 2)), requires_grad=True)
    st = OptimState(lr_scale={"w": 0.1}, no_decay={"w"})
    for _ in range(3):
        p.grad = rng.normal(size=(2, 2))
        adamw_step({"w": p}, st)
    save_checkpoint(tmp_path / "o.ckpt", st.arrays(), {"optim": st.hyper()})
    arrays, meta = load_checkpoint(tmp_path / "o.ckpt")
    st2 = OptimState.restore(meta["optim"], arrays)
    assert st2.hyper() == st.hyper()
    np.testing.assert_array_equal(st2.exp_avg["w"], st.exp_avg["w"])
    np.testing.assert_array_equal(st2.exp_avg_sq["w"], st.exp_avg_sq["w"])


def test_corrupt_checkpoints(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOTACKPT" + b"\0" * 16)
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    good = save_checkpoint(tmp_path / "g.ckpt", {"a": np.ones(4)})
    (tmp_path / "t.ckpt").write_bytes(good.read_bytes()[:-8])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.ckpt")
