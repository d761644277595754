import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_grad, rel_err
from nvf import autodiff as ad
from nvf.codebook import Codebook, CodebookConfig
from nvf.nn import bind


def hard(H=2, R=5, dc=3, **kw):
    return Codebook(CodebookConfig(mode="hard", heads=H, codes=R, code_dim=dc, **kw), np.random.default_rng(0))


def soft(H=2, R=3, dc=2, **kw):
    return Codebook(CodebookConfig(mode="soft", heads=H, codes=R, code_dim=dc, **kw), np.random.default_rng(0))


def test_config_validation():
    with pytest.raises(ValueError):
        CodebookConfig(mode="fuzzy")
    with pytest.raises(ValueError):
        CodebookConfig(gamma=1.0)
    assert CodebookConfig(heads=4, code_dim=64).embed_dim == 256


# ------------------------------------------------------------------ hard lookup


def test_exact_code_hit():
    cb = hard()
    z = np.concatenate([cb.codes[0, 3], cb.codes[1, 1]])[None]
    zq, idx = cb.hard_lookup(z)
    assert idx.tolist() == [[3, 1]]
    np.testing.assert_array_equal(zq, z)


def test_tie_goes_to_lower_index():
    cb = hard(H=1, R=3, dc=1)
    cb.codes = np.array([[[1.0], [-1.0], [1.0]]])
    _, idx = cb.hard_lookup(np.array([[0.0]]))
    assert idx.tolist() == [[0]]
    _, idx = cb.hard_lookup(np.array([[1.0]]))
    assert idx.tolist() == [[0]]


def test_lookup_matches_linear_scan_full_sizes():
    cb = hard(H=4, R=256, dc=64)
    z = np.random.default_rng(1).standard_normal((300, 256)) * 0.2
    zq, idx = cb.hard_lookup(z)
    for b in range(300):
        for h in range(4):
            seg = z[b, h * 64 : (h + 1) * 64]
            d = [float(np.sum((seg - cb.codes[h, r]) ** 2)) for r in range(256)]
            assert idx[b, h] == int(np.argmin(d))
            assert np.sum((seg - zq[b, h * 64 : (h + 1) * 64]) ** 2) == min(d)


def test_lookup_width_check():
    with pytest.raises(ValueError):
        hard().hard_lookup(np.zeros((1, 5)))
    with pytest.raises(ValueError):
        soft().hard_lookup(np.zeros((1, 4)))


# ------------------------------------------------------------------ EMA


def test_ema_single_assignment_by_hand():
    cb = hard(H=1, R=1, dc=3, gamma=0.99)
    cb.load_state({"cb.codes": np.zeros((1, 1, 3)), "cb.cluster_size": np.ones((1, 1)),
                   "cb.ema_sum": np.zeros((1, 1, 3))})
    cb.ema_update(np.ones((1, 3)), np.array([[0]]))
    np.testing.assert_allclose(cb.codes, 0.01, atol=1e-15)


def test_ema_leaves_unassigned_codes():
    cb = hard()
    before = cb.codes.copy()
    z = np.zeros((2, 6))
    cb.ema_update(z, np.array([[0, 0], [0, 0]]))
    np.testing.assert_array_equal(cb.codes[:, 1:], before[:, 1:])
    assert not np.array_equal(cb.codes[:, 0], before[:, 0])
    with pytest.raises(ValueError):
        soft().ema_update(np.zeros((1, 4)), np.zeros((1, 2), int))


def test_ema_reaches_cluster_centroids():
    rng = np.random.default_rng(2)
    centers = np.array([[2.0, 0], [-2.0, 0], [0, 2.0]])
    data = np.concatenate([c + 0.3 * rng.standard_normal((100, 2)) for c in centers])
    means = np.stack([data[i * 100 : (i + 1) * 100].mean(0) for i in range(3)])
    cb = hard(H=1, R=3, dc=2)
    init = (centers + 0.5)[None]
    cb.load_state({"cb.codes": init, "cb.cluster_size": np.ones((1, 3)), "cb.ema_sum": init.copy()})
    for _ in range(500):
        _, idx = cb.hard_lookup(data)
        cb.ema_update(data, idx)
    assert np.max(np.abs(cb.codes[0] - means)) < 1e-3
    assert np.all(np.isfinite(cb.codes)) and cb.codes.shape == (1, 3, 2)


# ------------------------------------------------------------------ commitment


def test_commitment_terms_examples():
    cb = hard(H=1, R=2, dc=3, beta=0.25)
    c = cb.codes[0, 0]
    t = ad.Tape()
    z = t.leaf(c[None].copy())
    pull, commit = cb.commitment_terms(z, c[None])
    assert float(pull.value) == 0.0 and float(commit.value) == 0.0
    u = np.array([0.0, 1.0, 0.0])
    z = t.leaf((c + u)[None])
    pull, commit = cb.commitment_terms(z, c[None])
    assert float(pull.value) == pytest.approx(1.0, abs=1e-15)
    assert float(commit.value) == pytest.approx(0.25, abs=1e-15)


def test_commitment_gradient_fd():
    cb = hard(H=2, R=4, dc=3)
    zv = np.random.default_rng(3).standard_normal((5, 6))
    zq, _ = cb.hard_lookup(zv)
    t = ad.Tape()
    z = t.leaf(zv)
    pull, commit = cb.commitment_terms(z, zq)
    (g,) = t.grad(pull + commit, [z])

    def f():
        tt = ad.Tape()
        p, c = cb.commitment_terms(tt.const(zv), zq)
        return float(p.value)  # the code-side term is stop-gradient wrt z

    assert rel_err(g, numeric_grad(f, zv, 1e-6)) < 1e-4


# ------------------------------------------------------------------ soft lookup


def _soft_eval(cb, z, **kw):
    t = ad.Tape()
    P = bind(t, cb.params, trainable=False)
    return cb.soft_lookup(P, t.const(z), **kw)


def test_single_code_returns_its_value():
    cb = soft(H=2, R=1, dc=2)
    z = np.random.default_rng(4).standard_normal((6, 4))
    out = _soft_eval(cb, z).value
    v = cb.params["cb.codes"] @ cb.params["cb.wv"]  # (H, 1, dc)
    np.testing.assert_allclose(out, np.tile(v[:, 0].reshape(1, 4), (6, 1)), atol=1e-15)


def test_identical_keys_average_values():
    cb = soft(H=1, R=4, dc=2)
    cb.params["cb.wk"] = np.zeros((1, 2, 2))
    out = _soft_eval(cb, np.random.default_rng(5).standard_normal((3, 2))).value
    v = (cb.params["cb.codes"] @ cb.params["cb.wv"])[0]
    np.testing.assert_allclose(out, np.tile(v.mean(0), (3, 1)), atol=1e-15)


def test_worked_example_identity_projections():
    cb = soft(H=2, R=3, dc=2)
    eye = np.tile(np.eye(2), (2, 1, 1))
    cb.params.update({"cb.wq": eye, "cb.wk": eye.copy(), "cb.wv": eye.copy(), "cb.bq": np.zeros((2, 1, 2))})
    codes = np.array([[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], [[0.5, -0.5], [-1.0, 0.0], [0.0, 2.0]]])
    cb.params["cb.codes"] = codes
    z = np.array([[0.2, 0.4, 1.0, -1.0]])
    out = _soft_eval(cb, z).value[0]
    expect = []
    for h in range(2):
        q = z[0, 2 * h : 2 * h + 2]
        logits = [float(q @ codes[h, r]) / np.sqrt(2) for r in range(3)]
        e = [np.exp(x) for x in logits]
        w = [x / sum(e) for x in e]
        expect.extend(sum(w[r] * codes[h, r] for r in range(3)))
    np.testing.assert_allclose(out, expect, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_soft_weights_normalized_and_hull(seed):
    cb = Codebook(CodebookConfig(mode="soft", heads=3, codes=7, code_dim=4), np.random.default_rng(seed))
    z = np.random.default_rng(seed + 1).standard_normal((9, 12)) * 3
    t = ad.Tape()
    P = bind(t, cb.params, trainable=False)
    out, w, v = cb.soft_lookup(P, t.const(z), return_weights=True)
    assert np.max(np.abs(w.value.sum(-1) - 1)) < 1e-9 and np.all(w.value >= 0)
    o = out.value.reshape(9, 3, 4).transpose(1, 0, 2)  # (H, B, dc)
    lo, hi = v.value.min(axis=1)[:, None, :], v.value.max(axis=1)[:, None, :]
    assert np.all(o >= lo - 1e-12) and np.all(o <= hi + 1e-12)


def test_sharpness_limit():
    cb = soft(H=1, R=3, dc=2)
    eye = np.eye(2)[None]
    cb.params.update({"cb.wq": eye, "cb.wk": eye.copy(), "cb.wv": eye.copy()})
    cb.params["cb.codes"] = np.array([[[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]])
    z = np.array([[2.0, 0.0]])  # logits (2, 0, -2) / sqrt(2): margin >= 1
    out = _soft_eval(cb, z, logit_scale=50.0).value[0]
    assert np.linalg.norm(out - [1.0, 0.0]) < 1e-6


def test_soft_gradients_fd():
    cb = soft(H=2, R=3, dc=2)
    z = np.random.default_rng(6).standard_normal((4, 4))
    w = np.random.default_rng(7).standard_normal((4, 4))
    t = ad.Tape()
    P = bind(t, cb.params)
    zv = t.leaf(z)
    names = sorted(P)
    grads = t.grad(ad.sum(cb.soft_lookup(P, zv) * w), [P[k] for k in names] + [zv])

    def f():
        return float(ad.sum(_soft_eval(cb, z) * w).value)

    for k, g in zip(names, grads):
        assert rel_err(g, numeric_grad(f, cb.params[k], 1e-6)) < 1e-5, k
    assert rel_err(grads[-1], numeric_grad(f, z, 1e-6)) < 1e-5
