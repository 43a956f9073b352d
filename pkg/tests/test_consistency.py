import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssclab import tensor as T
from ssclab.consistency import (ConsistencyConfig, ConsistencyMemory, aggregate_cams,
                                batch_aggregates, freeze_from_baseline, load_memory,
                                save_memory, select_qualified, semc_loss, spac_loss,
                                update_memory, weighted_gap)
from ssclab.gradcheck import grad_check
from ssclab.nn import BackboneConfig, Model, compute_cams
from ssclab.tensor import Tensor


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v)


def memory(m=2, h=2, w=2, c=3):
    return ConsistencyMemory.zeros(m, h, w, c)


# -- selection and aggregation ----------------------------------------------------------

def test_select_qualified_examples():
    mask, n = select_qualified(np.array([[0.95], [0.91], [0.60]]), np.array([[1], [1], [1]]), 0.9)
    assert mask[:, 0].tolist() == [True, True, False] and n.tolist() == [2]
    p = np.random.default_rng(0).random((5, 3))
    y = np.random.default_rng(1).integers(0, 2, (5, 3))
    np.testing.assert_array_equal(select_qualified(p, y, 0.0)[0], y == 1)
    mask, _ = select_qualified(np.ones((1, 2)), np.zeros((1, 2)), 0.5)
    assert not mask.any()


def test_select_qualified_is_strict():
    mask, _ = select_qualified(np.array([[0.9]]), np.array([[1]]), 0.9)
    assert not mask.any()


def test_aggregate_examples():
    u = np.arange(4.0).reshape(2, 2)
    cams = np.stack([u, -u])[:, None]  # (2, 1, 2, 2)
    means, n = aggregate_cams(cams, np.array([[1], [0]]))
    np.testing.assert_array_equal(means[0], u)
    assert n.tolist() == [1]
    means, n = aggregate_cams(cams, np.array([[1], [1]]))
    np.testing.assert_array_equal(means[0], np.zeros((2, 2)))
    means, n = aggregate_cams(cams, np.array([[0], [0]]))
    assert n.tolist() == [0] and not means.any()


def aggregate_oracle(cams, mask):
    b, m = mask.shape
    out = np.zeros(cams.shape[1:])
    counts = np.zeros(m, dtype=int)
    for j in range(m):
        for i in range(b):
            if mask[i, j]:
                out[j] += cams[i, j]
                counts[j] += 1
        if counts[j]:
            out[j] /= counts[j]
    return out, counts


def gap_oracle(f, a):
    b, c, h, w = f.shape
    m = a.shape[1]
    v = np.zeros((b, m, c))
    for i in range(b):
        for j in range(m):
            for k in range(c):
                for y in range(h):
                    for x in range(w):
                        v[i, j, k] += a[i, j, y, x] * f[i, k, y, x]
    return v / (h * w)


def test_aggregate_and_gap_match_oracles():
    rng = np.random.default_rng(3)
    for _ in range(25):
        cams = rng.normal(size=(4, 3, 2, 3))
        mask = rng.integers(0, 2, (4, 3))
        means, n = aggregate_cams(cams, mask)
        ref, ref_n = aggregate_oracle(cams, mask)
        np.testing.assert_allclose(means, ref, atol=1e-12)
        np.testing.assert_array_equal(n, ref_n)
        t_means, _ = aggregate_cams(Tensor(cams), mask)
        np.testing.assert_allclose(t_means.data, ref, atol=1e-12)
        f = rng.normal(size=(4, 5, 2, 3))
        np.testing.assert_allclose(weighted_gap(f, cams), gap_oracle(f, cams), atol=1e-12)


def test_weighted_gap_examples():
    f = np.random.default_rng(0).normal(size=(1, 3, 2, 2))
    np.testing.assert_allclose(weighted_gap(f, np.ones((1, 1, 2, 2)))[0, 0], f.mean(axis=(2, 3))[0])
    assert not weighted_gap(f, np.zeros((1, 2, 2, 2))).any()


# -- memory update --------------------------------------------------------------------

def test_first_update_copies_normalized_aggregate():
    mem = memory(1, 1, 2, 2)
    cfg = ConsistencyConfig(alpha=0.3)
    update_memory(mem, np.array([[[3.0, 4.0]]]), np.array([[0.0, 2.0]]), np.array([1]), cfg)
    np.testing.assert_allclose(mem.spa[0, 0], [0.6, 0.8])
    np.testing.assert_allclose(mem.sem[0], [0.0, 1.0])
    assert mem.spa_initialized[0] and mem.sem_initialized[0] and mem.update_count[0] == 1


def test_momentum_examples():
    u, v = np.array([[[1.0, 0.0]]]), np.array([[[0.0, 1.0]]])
    mem = memory(1, 1, 2, 2)
    update_memory(mem, u, None, [1], ConsistencyConfig(alpha=0.5))
    update_memory(mem, v, None, [1], ConsistencyConfig(alpha=0.5))
    np.testing.assert_allclose(mem.spa[0, 0], [0.5, 0.5])
    assert np.isclose(np.linalg.norm(mem.spa[0]), np.sqrt(0.5))
    update_memory(mem, 7 * u, None, [1], ConsistencyConfig(alpha=1.0))
    np.testing.assert_array_equal(mem.spa[0, 0], [1.0, 0.0])


def test_rows_without_qualified_samples_untouched():
    mem = memory(2, 1, 2, 2)
    cfg = ConsistencyConfig()
    update_memory(mem, np.ones((2, 1, 2)), np.ones((2, 2)), [1, 1], cfg)
    before = mem.copy()
    update_memory(mem, np.random.default_rng(0).normal(size=(2, 1, 2)), np.ones((2, 2)),
                  [0, 3], cfg)
    np.testing.assert_array_equal(mem.spa[0], before.spa[0])
    np.testing.assert_array_equal(mem.sem[0], before.sem[0])
    assert mem.update_count.tolist() == [1, 2]


def test_degenerate_aggregate_is_skipped_and_audited():
    mem = memory(1, 1, 2, 2)
    update_memory(mem, np.zeros((1, 1, 2)), np.zeros((1, 2)), [2], ConsistencyConfig())
    assert not mem.spa_initialized[0] and not mem.sem_initialized[0]
    assert any("degenerate" in line for line in mem.audit)


@given(st.lists(st.tuples(st.integers(0, 3), st.integers(0, 10_000)), min_size=1, max_size=12),
       st.floats(0.05, 1.0), st.sampled_from(["soft", "hard"]))
@settings(max_examples=60, deadline=None)
def test_initialized_rows_have_norm_in_unit_interval(steps, alpha, variant):
    mem = memory(3, 2, 2, 4)
    cfg = ConsistencyConfig(alpha=alpha, variant=variant)
    for n, seed in steps:
        rng = np.random.default_rng(seed)
        n_q = np.array([n, 0, n % 2])
        update_memory(mem, rng.normal(size=(3, 2, 2)), rng.normal(size=(3, 4)), n_q, cfg)
        for rows, flags in ((mem.spa, mem.spa_initialized), (mem.sem, mem.sem_initialized)):
            norms = np.linalg.norm(rows.reshape(3, -1), axis=1)
            assert np.all((norms[flags] > 0) & (norms[flags] <= 1 + 1e-9))
            assert not rows[~flags].any()


def test_repeated_identical_aggregate_converges_monotonically():
    mem = memory(1, 2, 2, 2)
    cfg = ConsistencyConfig(alpha=0.3)
    update_memory(mem, np.array([[[1.0, 0.0], [0.0, 0.0]]]), None, [1], cfg)
    g = np.array([[[0.0, 1.0], [1.0, 0.0]]])
    cos = []
    for _ in range(4):
        update_memory(mem, g, None, [1], cfg)
        cos.append(float((unit(mem.spa[0].ravel()) * unit(g.ravel())).sum()))
    assert all(b > a for a, b in zip(cos, cos[1:]))


@given(st.integers(0, 10_000), st.integers(1, 6))
@settings(max_examples=40, deadline=None)
def test_hard_memory_rows_are_binary_before_normalization(seed, steps):
    rng = np.random.default_rng(seed)
    mem = memory(2, 3, 3, 2)
    cfg = ConsistencyConfig(variant="hard", alpha=0.9)
    for _ in range(steps):
        update_memory(mem, rng.normal(size=(2, 3, 3)), rng.normal(size=(2, 2)), [1, 1], cfg)
    for row, ok in zip(mem.spa, mem.spa_initialized):
        if ok:
            nz = row[row != 0]
            np.testing.assert_allclose(nz, nz.max(), rtol=1e-12)  # one shared level
            levels = row / nz.max()
            assert set(np.unique(levels)) <= {0.0, 1.0}


def test_frozen_spatial_memory_is_never_modified():
    mem = memory(1, 1, 2, 3)
    update_memory(mem, np.array([[[1.0, 2.0]]]), np.ones((1, 3)), [1], ConsistencyConfig())
    mem.spa_frozen = True
    spa = mem.spa.copy()
    update_memory(mem, np.array([[[-5.0, 1.0]]]), np.array([[1.0, 0.0, 0.0]]), [4],
                  ConsistencyConfig(variant="fix"))
    np.testing.assert_array_equal(mem.spa, spa)
    assert not np.allclose(mem.sem[0], unit(np.ones(3)))
    assert any("frozen" in line for line in mem.audit)


# -- losses -------------------------------------------------------------------------

def test_spac_loss_hand_example():
    mem = memory(2, 2, 2, 1)
    mem.spa[0] = [[1.0, 0.0], [0.0, 0.0]]
    mem.spa[1] = [[0.0, 0.0], [0.6, 0.8]]
    mem.spa_initialized[:] = True
    a_p = np.array([[[0.0, 2.0], [0.0, 0.0]], [[0.0, 0.0], [3.0, 4.0]]])
    # attribute 0: |(0,1,0,0) - (1,0,0,0)|_1 = 2; attribute 1: identical -> 0
    assert spac_loss(a_p, [1, 1], mem).item() == pytest.approx(1.0)
    assert spac_loss(a_p, [1, 0], mem).item() == pytest.approx(2.0)
    assert spac_loss(a_p, [0, 0], mem).item() == 0.0
    mem.spa_initialized[0] = False
    assert spac_loss(a_p, [1, 1], mem).item() == 0.0


def test_semc_loss_matches_hand_value():
    mem = memory(1, 1, 1, 2)
    mem.sem[0] = [1.0, 0.0]
    mem.sem_initialized[0] = True
    v = np.array([[1.0, 1.0]])
    expected = abs(1 / np.sqrt(2) - 1) + 1 / np.sqrt(2)
    assert semc_loss(v, [2], mem).item() == pytest.approx(expected)


def _loaded_memory(rng, m, h, w, c):
    mem = memory(m, h, w, c)
    mem.spa[:] = rng.normal(size=mem.spa.shape)
    mem.sem[:] = rng.normal(size=mem.sem.shape)
    mem.spa_initialized[:] = True
    mem.sem_initialized[:] = True
    return mem


def test_consistency_loss_gradients():
    rng = np.random.default_rng(5)
    mem = _loaded_memory(rng, 3, 2, 2, 4)
    a_p = rng.normal(size=(3, 2, 2))
    v_p = rng.normal(size=(3, 4))
    assert grad_check(lambda a: spac_loss(a, [1, 2, 0], mem), a_p).passed
    assert grad_check(lambda v: semc_loss(v, [1, 1, 1], mem), v_p).passed
    f = rng.normal(size=(2, 4, 2, 2))
    cams = rng.normal(size=(2, 3, 2, 2))
    assert grad_check(lambda f_, a_: T.reduce(T.mul(weighted_gap(f_, a_), weighted_gap(f_, a_))),
                      [f, cams]).passed


def test_no_gradient_reaches_memory():
    rng = np.random.default_rng(9)
    mem = _loaded_memory(rng, 2, 2, 2, 3)
    a = Tensor(rng.normal(size=(2, 2, 2)), requires_grad=True)
    T.backward(spac_loss(a, [1, 1], mem))
    g1 = a.grad.copy()
    spa_before = mem.spa.copy()
    a.grad = None
    mem_leaf = Tensor(mem.spa.copy(), requires_grad=True)
    mem2 = mem.copy()
    mem2.spa = mem_leaf.data
    T.backward(spac_loss(a, [1, 1], mem2))
    np.testing.assert_array_equal(a.grad, g1)
    assert mem_leaf.grad is None
    np.testing.assert_array_equal(mem.spa, spa_before)


def test_batch_aggregates_split_qualified_from_positive():
    rng = np.random.default_rng(2)
    f = rng.normal(size=(3, 4, 2, 2))
    w = rng.normal(size=(2, 4))
    cams = compute_cams(f, w)
    probs = np.array([[0.95, 0.2], [0.5, 0.99], [0.97, 0.97]])
    labels = np.array([[1, 0], [1, 1], [0, 1]])
    agg = batch_aggregates(Tensor(f), compute_cams(Tensor(f), w), probs, labels,
                           ConsistencyConfig(tau=0.9))
    assert agg.n_q.tolist() == [1, 2] and agg.n_p.tolist() == [2, 2]
    np.testing.assert_allclose(agg.a_q[0], cams[0, 0])
    np.testing.assert_allclose(agg.a_p.data[0], (cams[0, 0] + cams[1, 0]) / 2)
    assert isinstance(agg.a_p, Tensor) and isinstance(agg.a_q, np.ndarray)


# -- fix variant and persistence ---------------------------------------------------------

SMALL = BackboneConfig(in_height=16, in_width=12, channels=(4, 6), strides=(2, 2),
                      kernels=None, norm_groups=0)


def test_freeze_from_baseline_examples():
    model = Model(2, SMALL, seed=3, dtype=np.float64)
    model.head.bias.data = np.array([20.0, -20.0])  # attribute 0 always confident
    imgs = np.random.default_rng(0).random((2, 3, 16, 12))
    labels = np.array([[1, 1], [1, 0]])
    fb = model(imgs)
    cams = compute_cams(fb.features.data, model.head.weight.data)

    one = freeze_from_baseline(model, [(imgs[:1], labels[:1])], ConsistencyConfig())
    np.testing.assert_allclose(one.spa[0], cams[0, 0] / np.linalg.norm(cams[0, 0]), atol=1e-12)
    assert one.spa_frozen and one.spa_initialized.tolist() == [True, False]
    assert not one.spa[1].any()

    both = freeze_from_baseline(model, [(imgs[:1], labels[:1]), (imgs[1:], labels[1:])],
                                ConsistencyConfig())
    mean = (cams[0, 0] + cams[1, 0]) / 2
    np.testing.assert_allclose(both.spa[0], mean / np.linalg.norm(mean), atol=1e-12)


def test_memory_dump_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    mem = _loaded_memory(rng, 3, 2, 2, 5)
    mem.sem_initialized[1] = False
    mem.update_count[:] = [4, 0, 7]
    mem.spa_frozen = True
    path = tmp_path / "memory.bin"
    save_memory(path, mem)
    assert path.read_bytes()[:7] == b"SSCMEM1"
    back = load_memory(path)
    np.testing.assert_array_equal(back.spa, mem.spa)
    np.testing.assert_array_equal(back.sem, mem.sem)
    np.testing.assert_array_equal(back.spa_initialized, mem.spa_initialized)
    np.testing.assert_array_equal(back.sem_initialized, mem.sem_initialized)
    np.testing.assert_array_equal(back.update_count, mem.update_count)
    assert back.spa_frozen


def test_memory_dump_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_memory(tmp_path / "nope.bin")
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"XXXXXXXXXXXX")
    with pytest.raises(ValueError):
        load_memory(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        ConsistencyConfig(tau=1.0)
    with pytest.raises(ValueError):
        ConsistencyConfig(alpha=0.0)
    with pytest.raises(ValueError):
        ConsistencyConfig(variant="medium")
