import math

import numpy as np
import pytest

from vizcap import container
from vizcap.container import ContainerError
from vizcap.optim import (SCST_STEP_OFFSET, Adam, OptimizerConfig, ScheduleState, adam_update,
                          clip_grad_norm, learning_rate)
from vizcap.tensor import NonFiniteError, parameter


def test_decay_ratio_2000_vs_8000():
    cfg = OptimizerConfig(warmup_steps=2000)
    r = learning_rate(cfg, ScheduleState(2000)) / learning_rate(cfg, ScheduleState(8000))
    assert r == pytest.approx(2.0, rel=1e-12)


def test_warmup_is_linear_and_continuous():
    cfg = OptimizerConfig(base_lr=1e-3, warmup_steps=2000)
    assert learning_rate(cfg, ScheduleState(1000)) == pytest.approx(5e-4)
    assert learning_rate(cfg, ScheduleState(2000)) == pytest.approx(1e-3)
    assert learning_rate(cfg, ScheduleState(2001)) == pytest.approx(1e-3 * math.sqrt(2000 / 2001))
    assert learning_rate(cfg, ScheduleState(0)) > 0


def test_scst_schedule_offset():
    s = ScheduleState.for_scst(3000)
    assert SCST_STEP_OFFSET == 50000
    assert s.effective == 53000
    cfg = OptimizerConfig(warmup_steps=2000)
    # past the warmup region: pure inverse-sqrt decay
    assert learning_rate(cfg, s) == pytest.approx(cfg.base_lr * math.sqrt(2000 / 53000))


def test_config_validation():
    with pytest.raises(ValueError):
        OptimizerConfig(beta1=0.99, beta2=0.98)
    with pytest.raises(ValueError):
        OptimizerConfig(warmup_steps=-1)


def test_zero_gradient_leaves_params_and_decays_moments():
    cfg = OptimizerConfig()
    p = np.array([1.0, -2.0])
    out, m, v = adam_update(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, cfg, 1e-3)
    np.testing.assert_array_equal(out, p)
    m0, v0 = np.array([0.5, 0.5]), np.array([0.25, 0.25])
    _, m, v = adam_update(p, np.zeros(2), m0, v0, 2, cfg, 0.0)
    np.testing.assert_allclose(m, 0.9 * m0)
    np.testing.assert_allclose(v, 0.98 * v0)


def test_adam_update_is_pure():
    rng = np.random.default_rng(0)
    p, g, m, v = (rng.normal(size=5) for _ in range(4))
    v = np.abs(v)
    a = adam_update(p.copy(), g.copy(), m.copy(), v.copy(), 3, OptimizerConfig(), 1e-3)
    b = adam_update(p.copy(), g.copy(), m.copy(), v.copy(), 3, OptimizerConfig(), 1e-3)
    for x, y in zip(a, b):
        assert x.tobytes() == y.tobytes()


def test_adam_first_step_moves_by_lr():
    w = parameter([1.0, 1.0], dtype=np.float64)
    w.grad = np.array([3.0, -0.5])
    opt = Adam({"w": w}, OptimizerConfig(base_lr=0.1, warmup_steps=0))
    s = ScheduleState(1)
    lr = opt.step(s)
    # bias-corrected first step is lr * sign(g)
    np.testing.assert_allclose(w.data, [1.0 - lr, 1.0 + lr], atol=1e-8)
    assert s.step == 2


def test_adam_rejects_non_finite():
    w = parameter([1.0])
    w.grad = np.array([np.inf], dtype=np.float32)
    with pytest.raises(NonFiniteError):
        Adam({"w": w}).step(ScheduleState())


def test_clip_grad_norm():
    a, b = parameter([3.0]), parameter([4.0])
    a.grad, b.grad = np.array([3.0], np.float32), np.array([4.0], np.float32)
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    assert np.hypot(a.grad, b.grad)[0] == pytest.approx(1.0, rel=1e-6)


def test_adam_state_roundtrip_through_container(tmp_path):
    w = parameter(np.ones((2, 3)))
    w.grad = np.full((2, 3), 0.1, np.float32)
    opt = Adam({"w": w})
    opt.step(ScheduleState())
    container.save(tmp_path / "optim.bin", opt.state_tensors())
    other = Adam({"w": parameter(np.ones((2, 3)))})
    other.load_state_tensors(container.load(tmp_path / "optim.bin"))
    assert other.t == 1
    np.testing.assert_array_equal(other.m["w"], opt.m["w"])


def test_container_bit_exact_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"a": rng.normal(size=(3, 4)).astype(np.float32), "bé/ü": np.arange(5, dtype=np.float32),
               "scalar": np.array(2.5, dtype=np.float32), "empty": np.zeros((0, 3), np.float32)}
    container.save(tmp_path / "x.bin", tensors)
    back = container.load(tmp_path / "x.bin")
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()
    blob = (tmp_path / "x.bin").read_bytes()
    assert container.dumps(back) == blob


def test_container_layout():
    blob = container.dumps({"w": np.array([[1.0, 2.0]], np.float32)})
    assert blob[:4] == b"VZCT"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    # name length, name, rank, two u64 extents, two f32
    assert len(blob) == 12 + 4 + 1 + 4 + 16 + 8
    assert np.frombuffer(blob[-8:], "<f4").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (9).to_bytes(4, "little") + b[8:],
    lambda b: b[:-1],
    lambda b: b + b"\0",
])
def test_container_rejects_corruption(mutate):
    blob = container.dumps({"w": np.ones(3, np.float32)})
    with pytest.raises(ContainerError):
        container.loads(mutate(blob))
