import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nckd.errors import ContractError, DimensionError
from nckd.geometry import make_simplex_etf
from nckd.losses import cross_entropy, nc1_loss
from nckd.model import LINEAR, NC3, Mlp
from nckd.numcore import Rng, softmax
from nckd.verify import finite_difference, rel_error

seeds = st.integers(0, 2**32 - 1)


def test_zero_network_uniform_softmax():
    m = Mlp.init([3, 4], 5, Rng(0))
    for name in m.params:
        m.params[name][:] = 0.0
    logits = m.forward(Rng(1).gaussian(2, 3)).logits
    np.testing.assert_array_equal(logits, 0.0)
    np.testing.assert_allclose(softmax(logits, axis=1), 0.2, atol=1e-15)


def test_identity_layer_passes_nonnegative_input():
    m = Mlp.init([4, 4], 2, Rng(0))
    m.params["W1"] = np.eye(4)
    x = np.abs(Rng(1).gaussian(3, 4))
    np.testing.assert_array_equal(m.forward(x).penultimate, x)


def test_nc3_head_logits_are_scaled_inner_products():
    k, d = 4, 5
    etf = make_simplex_etf(k, d, Rng(0))
    m = Mlp.init([d, d], k, Rng(1))
    m.params["W1"] = np.eye(d)
    m.params["b1"] = np.zeros(d)
    m.set_nc3_head(etf, scale=3.0)
    # penultimate = ReLU(h); pick an input whose ReLU leaves it unchanged
    h = np.abs(Rng(2).gaussian(d))
    logits = m.forward(h[None, :]).logits[0]
    np.testing.assert_allclose(logits, 3.0 * etf @ h, atol=1e-14)


def test_nc3_head_etf_logit_gap():
    k, d = 5, 4
    etf = make_simplex_etf(k, d, Rng(0))
    m = Mlp.init([d, d], k, Rng(1))
    m.set_nc3_head(etf, scale=10.0)
    for j in range(k):
        logits = m.nc3_scale * (etf @ etf[j])
        others = np.delete(logits, j)
        np.testing.assert_allclose(logits[j] - others, 10.0 * (1 + 1 / (k - 1)), atol=1e-12)


def test_set_nc3_head_argmax_and_idempotence():
    k, d = 3, 6
    rows = make_simplex_etf(k, d, Rng(0))
    m = Mlp.init([d, d], k, Rng(1))
    m.params["W1"] = np.eye(d)
    m.params["b1"] = np.zeros(d)
    m.set_nc3_head(rows, scale=2.0)
    x = Rng(2).gaussian(5, d)
    first = m.forward(x).logits
    m.set_nc3_head(rows, scale=2.0)
    np.testing.assert_array_equal(first, m.forward(x).logits)
    for j in range(k):
        h = 1.7 * rows[j]
        assert np.argmax(m.nc3_scale * rows @ h) == j
    with pytest.raises(DimensionError):
        m.set_nc3_head(np.eye(3)[:, :2], scale=1.0)
    with pytest.raises(ContractError):
        m.set_nc3_head(2 * rows, scale=1.0)
    with pytest.raises(ContractError):
        m.set_nc3_head(rows, scale=0.0)


def test_linear_and_nc3_heads_agree_on_shared_rows():
    k, d = 4, 6
    rows = make_simplex_etf(k, d, Rng(3))
    lin = Mlp.init([5, d], k, Rng(4))
    lin.params["head_W"] = rows.copy()
    lin.params["head_b"] = np.zeros(k)
    nc3 = lin.copy()
    nc3.set_nc3_head(rows, scale=1.0)
    x = Rng(5).gaussian(7, 5)
    np.testing.assert_array_equal(lin.forward(x).logits, nc3.forward(x).logits)


@given(seeds, st.floats(0.01, 100))
def test_nc3_argmax_invariant_to_feature_scale(seed, c):
    rows = make_simplex_etf(4, 5, Rng(seed))
    h = Rng(seed).spawn("h").gaussian(3, 5)
    a = np.argmax(h @ rows.T, axis=1)
    b = np.argmax((c * h) @ rows.T, axis=1)
    np.testing.assert_array_equal(a, b)


def test_init_contract():
    a = Mlp.init([8, 1024, 3], 4, Rng(9))
    b = Mlp.init([8, 1024, 3], 4, Rng(9))
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    assert abs(a.params["W2"].var() / (2 / 1024) - 1) < 0.1
    assert np.all(a.params["b1"] == 0) and np.all(a.params["b2"] == 0) and np.all(a.params["head_b"] == 0)
    with pytest.raises(ContractError):
        Mlp.init([3, 0], 2, Rng(0))
    with pytest.raises(DimensionError):
        a.forward(np.zeros((2, 7)))


def test_projector_only_when_dimensions_differ():
    assert "proj" not in Mlp.init([3, 6], 2, Rng(0), proj_dim=6).params
    m = Mlp.init([3, 6], 2, Rng(0), proj_dim=10)
    assert m.params["proj"].shape == (10, 6)
    assert m.features(np.ones((2, 3))).shape == (2, 10)


def test_zero_upstream_gives_zero_gradients():
    m = Mlp.init([3, 5, 4], 3, Rng(0), proj_dim=6)
    cache = m.forward(Rng(1).gaussian(4, 3))
    grads = m.backward(cache, np.zeros((4, 3)), np.zeros((4, 6)))
    for g in grads.values():
        np.testing.assert_array_equal(g, 0.0)
    with pytest.raises(ContractError):
        m.backward(None, np.zeros((4, 3)))


def test_head_gradient_closed_form():
    m = Mlp.init([3, 4], 3, Rng(0))
    x = Rng(1).gaussian(5, 3)
    y = np.array([0, 1, 2, 1, 0])
    cache = m.forward(x)
    ce = cross_entropy(cache.logits, y)
    grads = m.backward(cache, ce.grads["logits"])
    h = cache.penultimate
    expect = (softmax(cache.logits, axis=1) - np.eye(3)[y]).T @ h / 5
    np.testing.assert_allclose(grads["head_W"], expect, atol=1e-15)


def _kink_free(m, x, margin=1e-3):
    a = x
    for l in range(1, m.n_hidden + 1):
        z = a @ m.params[f"W{l}"].T + m.params[f"b{l}"]
        if np.min(np.abs(z)) < margin:
            return False
        a = np.maximum(z, 0)
    return True


@pytest.mark.parametrize("head", [LINEAR, NC3])
@pytest.mark.parametrize("layer", [-1, 1])
@given(seed=seeds)
def test_backward_matches_finite_differences(head, layer, seed):
    rng = Rng(seed)
    k = 3
    m = Mlp.init([4, 6, 5], k, rng.spawn("m"), proj_dim=7, distill_layer=layer)
    for l in (1, 2):
        m.params[f"b{l}"] = 0.1 * rng.spawn(f"b{l}").gaussian(m.widths[l])
    if head == NC3:
        m.set_nc3_head(make_simplex_etf(k, 5, rng.spawn("etf")), scale=2.0)
    x = rng.spawn("x").gaussian(6, 4)
    if not _kink_free(m, x):
        return
    y = np.array([0, 1, 2, 0, 1, 2])
    protos = rng.spawn("p").gaussian(k, 7)

    def loss():
        cache = m.forward(x)
        return cross_entropy(cache.logits, y).value + nc1_loss(cache.projected, y, protos, 0.5).value

    cache = m.forward(x)
    # normalization curvature grows like 1/|h|^2, which breaks the difference oracle near zero
    if min(np.linalg.norm(cache.projected, axis=1).min(), np.linalg.norm(cache.penultimate, axis=1).min()) < 0.05:
        return
    ce = cross_entropy(cache.logits, y)
    n1 = nc1_loss(cache.projected, y, protos, 0.5)
    grads = m.backward(cache, ce.grads["logits"], n1.grads["features"])
    assert set(grads) == set(m.trainable())
    if head == NC3:
        assert "head_W" not in grads
    for name in m.trainable():
        num = finite_difference(loss, m.params[name])
        assert rel_error(grads[name], num) < 1e-5, name


def test_nc3_head_on_projection_gradient():
    rng = Rng(11)
    k = 3
    m = Mlp.init([4, 6], k, rng.spawn("m"), proj_dim=5)
    m.params["b1"] = 0.1 * rng.spawn("b").gaussian(6)
    m.set_nc3_head(make_simplex_etf(k, 5, rng.spawn("e")), scale=2.0, on_projection=True)
    x = rng.spawn("x").gaussian(5, 4)
    assert _kink_free(m, x)
    y = np.array([0, 1, 2, 0, 1])
    cache = m.forward(x)
    np.testing.assert_allclose(cache.logits, 2.0 * cache.projected @ m.centroids.T, atol=1e-14)
    grads = m.backward(cache, cross_entropy(cache.logits, y).grads["logits"])
    for name in m.trainable():
        num = finite_difference(lambda: cross_entropy(m.forward(x).logits, y).value, m.params[name])
        assert rel_error(grads[name], num) < 1e-5


def test_checkpoint_round_trip_and_probe(tmp_path):
    m = Mlp.init([3, 5, 4], 2, Rng(0), proj_dim=6)
    probe = Rng(1).gaussian(3, 3)
    path = tmp_path / "m.json"
    m.save(path, probe=probe)
    back = Mlp.load(path)
    np.testing.assert_array_equal(back.forward(probe).logits, m.forward(probe).logits)
    assert back.fingerprint() == m.fingerprint()
    text = path.read_text()
    m.save(path, probe=probe)
    assert path.read_text() == text


def test_checkpoint_probe_mismatch_detected(tmp_path):
    import json

    m = Mlp.init([3, 4], 2, Rng(0))
    path = tmp_path / "m.json"
    m.save(path, probe=np.ones((1, 3)))
    doc = json.loads(path.read_text())
    doc["params"]["head_b"][0] += 1.0
    path.write_text(json.dumps(doc))
    with pytest.raises(ContractError):
        Mlp.load(path)
    Mlp.load(path, check_probe=False)
