from dataclasses import replace

import numpy as np
import pytest

from edgexc import model, zoo
from edgexc.errors import ArchError, ShapeError


@pytest.fixture(scope="module")
def small():
    return zoo.build("optimized", width_scale=1 / 16)


def test_init_deterministic(small):
    a, b = model.init_params(small, 5), model.init_params(small, 5)
    assert a.equals(b)
    assert not a.equals(model.init_params(small, 6))
    assert a.seed == 5


def test_init_values(small):
    p = model.init_params(small, 0)
    bn = p["entry/m0/l1"]
    assert (bn["gamma"] == 1).all() and (bn["beta"] == 0).all()
    w = model.init_params(zoo.build("optimized"), 0)["middle_1/r0/m0/l1"]["pointwise"]
    assert w.std() == pytest.approx(np.sqrt(2 / 512), rel=0.05)


def test_forward_shapes(rng):
    for name in ("xception", "optimized"):
        spec = zoo.build(name, width_scale=0.25)
        p = model.init_params(spec, 0)
        x = rng.random((2, 3, 32, 32), dtype=np.float32)
        logits = model.forward(spec, p, x, "eval")
        assert logits.shape == (2, 10) and logits.dtype == np.float32


def test_full_width_forward(rng):
    spec = zoo.build("optimized")
    logits = model.forward(spec, model.init_params(spec, 0), rng.random((2, 3, 32, 32), dtype=np.float32))
    assert logits.shape == (2, 10) and np.isfinite(logits).all()


def test_eval_forward_deterministic_and_pure(small, rng):
    p = model.init_params(small, 0)
    before = p.copy()
    x = rng.random((3, 3, 32, 32), dtype=np.float32)
    y1 = model.forward(small, p, x, "eval")
    y2 = model.forward(small, p, x, "eval")
    assert y1.tobytes() == y2.tobytes()
    assert p.equals(before)


def test_train_forward_updates_running_stats(small, rng):
    p = model.init_params(small, 0)
    model.forward(small, p, rng.random((4, 3, 32, 32), dtype=np.float32), "train")
    assert not np.allclose(p["entry/m0/l1"]["running_mean"], 0)


def test_check_params(small):
    p = model.init_params(small, 0)
    model.check_params(small, p)
    bad = p.copy()
    del bad.tensors["exit/m1/l0"]
    with pytest.raises(ArchError):
        model.check_params(small, bad)
    bad = p.copy()
    bad.tensors["orphan"] = {}
    with pytest.raises(ArchError):
        model.check_params(small, bad)


def test_input_shape_checked(small):
    with pytest.raises(ShapeError):
        model.forward(small, model.init_params(small, 0), np.zeros((1, 3, 16, 16), np.float32))


def test_save_load_round_trip(small, tmp_path):
    p = model.init_params(small, 1)
    p.save(tmp_path / "w.npz")
    assert model.ModelParams.load(tmp_path / "w.npz").equals(replace(p, seed=None))


@pytest.mark.parametrize("name", ["optimized", "xception"])
def test_network_gradient_spot_check(name, rng):
    """Whole-network backward vs central differences on a handful of parameters (float64)."""
    if name == "optimized":
        widths = replace(zoo.REFERENCE_WIDTHS.scaled(1 / 32), hidden_fc=(5,))
        spec = zoo.build_optimized(3, widths)
    else:
        spec = zoo.build_xception_baseline(3, width_scale=1 / 32)
    p = model.init_params(spec, 0, dtype=np.float64)
    x = rng.random((4, 3, 32, 32))
    y = np.array([0, 1, 2, 1])

    def loss_at(params):
        return model.loss_and_grads(spec, params.copy(), x, y)[0]

    _, grads, _ = model.loss_and_grads(spec, p.copy(), x, y)
    picks = ["entry/m0/l0", "entry/m1/skip/conv", "exit/m1/l3", "head/fc0"]
    if name == "optimized":
        picks += ["middle_1/r2/m0/l4", "middle_2/m1/l7", "head/fc1"]
    else:
        picks += ["middle/r5/m0/l4"]
    h = 1e-6
    for lid in picks:
        pname = next(n for n in grads[lid] if n in ("weight", "pointwise", "depthwise"))
        arr = p[lid][pname]
        for flat in rng.choice(arr.size, size=3, replace=False):
            idx = np.unravel_index(flat, arr.shape)
            old = arr[idx]
            arr[idx] = old + h
            fp = loss_at(p)
            arr[idx] = old - h
            fm = loss_at(p)
            arr[idx] = old
            num = (fp - fm) / (2 * h)
            assert grads[lid][pname][idx] == pytest.approx(num, rel=1e-4, abs=1e-7), (lid, idx)
