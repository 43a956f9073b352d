import struct

import numpy as np
import pytest

from ssclab import tensor as T
from ssclab.gradcheck import grad_check
from ssclab.nn import (CHECKPOINT_MAGIC, Backbone, BackboneConfig, ClassifierHead, Model,
                       classify, compute_cams, load_checkpoint, model_from_checkpoint,
                       save_checkpoint)
from ssclab.tensor import ShapeError

SMALL = BackboneConfig(in_height=16, in_width=12, channels=(4, 6), strides=(2, 2),
                      kernels=None, norm_groups=0)


def cam_oracle(f, w):
    b, c, h, wd = f.shape
    out = np.zeros((b, w.shape[0], h, wd))
    for i in range(b):
        for m in range(w.shape[0]):
            for y in range(h):
                for x in range(wd):
                    s = 0.0
                    for k in range(c):
                        s += w[m, k] * f[i, k, y, x]
                    out[i, m, y, x] = s
    return out


def test_compute_cams_matches_loop_oracle():
    rng = np.random.default_rng(0)
    for _ in range(20):
        f = rng.normal(size=(2, 5, 3, 4))
        w = rng.normal(size=(3, 5))
        np.testing.assert_allclose(compute_cams(f, w), cam_oracle(f, w), atol=1e-9)
        np.testing.assert_allclose(compute_cams(T.Tensor(f), w).data, cam_oracle(f, w), atol=1e-9)


def test_cams_are_signed_and_biasless():
    f = np.ones((1, 2, 2, 2))
    w = np.array([[1.0, -3.0]])
    np.testing.assert_array_equal(compute_cams(f, w), np.full((1, 1, 2, 2), -2.0))


def test_logits_equal_cam_mean_plus_bias():
    model = Model(3, SMALL, seed=1, dtype=np.float64)
    model.head.bias.data = np.array([0.1, -0.2, 0.3])
    x = np.random.default_rng(2).random((2, 3, 16, 12))
    fb = model(x)
    cams = compute_cams(fb.features.data, model.head.weight.data)
    np.testing.assert_allclose(fb.logits.data, cams.mean(axis=(2, 3)) + model.head.bias.data,
                               atol=1e-12)
    np.testing.assert_allclose(fb.probs, 1 / (1 + np.exp(-fb.logits.data)), atol=1e-12)


def test_cam_channel_mismatch():
    with pytest.raises(ShapeError):
        compute_cams(np.ones((1, 3, 2, 2)), np.ones((2, 4)))
    with pytest.raises(ShapeError):
        compute_cams(T.Tensor(np.ones((1, 3, 2, 2))), np.ones((2, 4)))


def test_backbone_geometry():
    bb = Backbone(BackboneConfig(), rng=np.random.default_rng(0))
    x = np.zeros((2, 3, 64, 48), dtype=np.float32)
    assert bb(x).shape == (2, BackboneConfig().out_channels, *BackboneConfig().feature_extents())
    with pytest.raises(ShapeError):
        bb(np.zeros((2, 3, 32, 48)))
    with pytest.raises(ShapeError):
        Backbone(BackboneConfig(in_height=8, in_width=8))
    with pytest.raises(ValueError, match="one entry per layer"):
        BackboneConfig(channels=(4, 8), strides=(2, 2))


def test_head_rejects_channel_mismatch():
    head = ClassifierHead(4, 2)
    with pytest.raises(ShapeError):
        head(np.ones((1, 5, 2, 2)))
    z, p = classify(np.ones((1, 4, 2, 2)), head)
    assert z.shape == (1, 2) and p.shape == (1, 2)


def test_forward_is_deterministic_and_reaches_every_parameter():
    x = np.random.default_rng(3).random((2, 3, 16, 12))
    a, b = Model(2, SMALL, seed=5), Model(2, SMALL, seed=5)
    fa, fb = a(x), b(x)
    np.testing.assert_array_equal(fa.logits.data, fb.logits.data)
    T.backward(T.reduce(T.mul(fa.logits, fa.logits)))
    for name, p in a.named_parameters():
        assert p.grad is not None and p.grad.shape == p.shape, name


def test_model_gradient_matches_finite_differences():
    cfg = BackboneConfig(in_height=8, in_width=6, channels=(3, 4), strides=(2, 1), kernels=None,
                          norm_groups=1)
    model = Model(2, cfg, seed=1, dtype=np.float64)
    x = np.random.default_rng(0).random((2, 3, 8, 6))
    params = model.parameters()

    def f_leaves(*leaves):
        blocks = model.backbone.blocks
        norms = model.backbone.norms
        it = iter(leaves)
        for blk, nrm in zip(blocks, norms):
            blk.weight, blk.bias = next(it), next(it)
            nrm.weight, nrm.bias = next(it), next(it)
        model.head.weight, model.head.bias = next(it), next(it)
        out = model(x).logits
        return T.reduce(T.mul(out, out))

    rep = grad_check(f_leaves, [p.data for p in params])
    assert rep.passed, str(rep)


def test_parameter_names_are_stable():
    names = [n for n, _ in Model(2, SMALL).named_parameters()]
    assert names == ["backbone.0.weight", "backbone.0.bias", "backbone.1.weight",
                     "backbone.1.bias", "head.weight", "head.bias"]


def test_checkpoint_round_trip(tmp_path):
    model = Model(3, SMALL, seed=7)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, model.state_dict())
    blob = path.read_bytes()
    assert blob.startswith(CHECKPOINT_MAGIC)
    state = load_checkpoint(path)
    assert list(state) == [n for n, _ in model.named_parameters()]
    for name, arr in model.state_dict().items():
        np.testing.assert_array_equal(state[name], arr.astype(np.float32))
    clone = model_from_checkpoint(path, SMALL)
    x = np.random.default_rng(0).random((1, 3, 16, 12))
    np.testing.assert_array_equal(clone(x).logits.data, model(x).logits.data)


def test_checkpoint_record_layout(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint(path, {"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
    blob = path.read_bytes()
    assert blob[:8] == b"SSCCKPT1"
    (n,) = struct.unpack_from("<I", blob, 8)
    assert blob[12:12 + n] == b"w"
    rank, d0, d1 = struct.unpack_from("<3I", blob, 12 + n)
    assert (rank, d0, d1) == (2, 2, 3)
    data = np.frombuffer(blob, "<f4", offset=24 + n)
    np.testing.assert_array_equal(data, np.arange(6))


def test_checkpoint_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.bin")
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"NOTMAGIC")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
    good = tmp_path / "good.bin"
    save_checkpoint(good, {"w": np.ones((4, 4), dtype=np.float32)})
    truncated = tmp_path / "trunc.bin"
    truncated.write_bytes(good.read_bytes()[:-5])
    with pytest.raises(ValueError):
        load_checkpoint(truncated)


def test_load_state_dict_checks_shapes():
    model = Model(2, SMALL)
    state = model.state_dict()
    state["head.weight"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        model.load_state_dict(state)
    with pytest.raises(KeyError):
        model.load_state_dict({})
