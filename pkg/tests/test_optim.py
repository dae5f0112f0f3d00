import numpy as np
import pytest

from diffem.optim import ParamStore, adam_step, ema_update, global_norm


def make_store(rng):
    return ParamStore(params={
        "w": rng.standard_normal((3, 2)),
        "b": rng.standard_normal(2),
    })


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def test_global_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    assert global_norm(grads) == pytest.approx(5.0)


def test_clipping_equals_prescaled_gradient(rng):
    # gradient of norm 10, clip_norm 1 -> same update as gradient * 0.1
    store = make_store(rng)
    g = {"w": np.zeros((3, 2)), "b": np.zeros(2)}
    g["w"][0, 0] = 10.0
    clipped = adam_step(store.clone(), g, lr=1e-3, clip_norm=1.0)
    pre = {k: v * 0.1 for k, v in g.items()}
    manual = adam_step(store.clone(), pre, lr=1e-3, clip_norm=1e9)
    for k in store.params:
        assert np.array_equal(clipped.params[k], manual.params[k])


def test_first_step_magnitude_is_lr(rng):
    # with bias correction, |update| == lr for any single nonzero gradient
    store = make_store(rng)
    g = {"w": np.zeros((3, 2)), "b": np.zeros(2)}
    g["b"][1] = 0.5
    out = adam_step(store.clone(), g, lr=1e-2, clip_norm=1e9)
    delta = out.params["b"][1] - store.params["b"][1]
    assert delta == pytest.approx(-1e-2, rel=1e-6)
    assert out.step == store.step + 1


def test_adam_matches_reference_implementation(rng):
    store = make_store(rng)
    ref_p = {k: v.copy() for k, v in store.params.items()}
    m = {k: np.zeros_like(v) for k, v in ref_p.items()}
    v = {k: np.zeros_like(x) for k, x in ref_p.items()}
    lr, b1, b2, eps = 3e-3, 0.9, 0.999, 1e-8
    cur = store
    for step in range(1, 6):
        grads = {k: rng.standard_normal(x.shape) for k, x in ref_p.items()}
        cur = adam_step(cur, grads, lr=lr, clip_norm=1e9)
        for k in ref_p:
            m[k] = b1 * m[k] + (1 - b1) * grads[k]
            v[k] = b2 * v[k] + (1 - b2) * grads[k] ** 2
            mhat = m[k] / (1 - b1**step)
            vhat = v[k] / (1 - b2**step)
            ref_p[k] = ref_p[k] - lr * mhat / (np.sqrt(vhat) + eps)
    for k in ref_p:
        assert np.allclose(cur.params[k], ref_p[k], atol=1e-12)


def test_adam_validates_inputs(rng):
    store = make_store(rng)
    g = {k: np.zeros_like(p) for k, p in store.params.items()}
    with pytest.raises(ValueError):
        adam_step(store, g, lr=0.0, clip_norm=1.0)
    with pytest.raises(ValueError):
        adam_step(store, g, lr=1e-3, clip_norm=0.0)
    bad = dict(g)
    bad["w"] = np.full((3, 2), np.nan)
    with pytest.raises((ValueError, FloatingPointError)):
        adam_step(store, bad, lr=1e-3, clip_norm=1.0)
    wrong = dict(g)
    wrong["w"] = np.zeros((2, 2))
    with pytest.raises(ValueError):
        adam_step(store, wrong, lr=1e-3, clip_norm=1.0)


def test_adam_step_does_not_mutate_input(rng):
    store = make_store(rng)
    before = {k: v.copy() for k, v in store.params.items()}
    g = {k: np.ones_like(p) for k, p in store.params.items()}
    adam_step(store, g, lr=1e-3, clip_norm=1.0)
    for k in before:
        assert np.array_equal(store.params[k], before[k])


def test_ema_update(rng):
    shadow = make_store(rng)
    store = make_store(rng)
    out = ema_update(shadow, store, decay=0.9)
    for k in shadow.params:
        expect = 0.9 * shadow.params[k] + 0.1 * store.params[k]
        assert np.allclose(out.params[k], expect)
    with pytest.raises(ValueError):
        ema_update(shadow, store, decay=1.0)


def test_clone_is_independent(rng):
    store = make_store(rng)
    cp = store.clone()
    cp.params["w"][0, 0] += 1.0
    assert store.params["w"][0, 0] != cp.params["w"][0, 0]
