import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tct import numeric
from tct.cpc import (cpc_loss, encode_future, info_nce, info_nce_batch, make_batch, sample_anchors,
                     sample_negatives)
from tct.data import default_schema, eligible, fit_standardizer, generate_synthetic
from tct.encoder import Encoder, EncoderConfig, horizon_window, pack, prepare

from conftest import objective, toy_batch, toy_setup


# --- info_nce ------------------------------------------------------------------------------


@pytest.mark.parametrize("n", [1, 7, 255])
def test_uniform_logits_give_log_n_plus_one(n):
    negs = np.random.default_rng(n).normal(size=(n, 5))
    assert info_nce(np.zeros(5), np.ones(5), negs, 0.1) == pytest.approx(math.log(n + 1), abs=1e-12)
    if n == 255:
        assert round(info_nce(np.zeros(5), np.ones(5), negs, 0.1), 4) == 5.5452


def test_closed_form_single_positive():
    z_hat = np.array([1.0, 0.0])
    pos = np.array([1.0, 0.0])
    negs = np.tile([0.0, 1.0], (255, 1))
    loss = info_nce(z_hat, pos, negs, 0.1)
    assert loss == pytest.approx(math.log1p(255 * math.exp(-10)), rel=1e-12)
    assert round(loss, 5) == 0.01151


def test_negative_order_does_not_matter():
    rng = np.random.default_rng(0)
    z_hat, pos, negs = rng.normal(size=4), rng.normal(size=4), rng.normal(size=(9, 4))
    a = info_nce(z_hat, pos, negs, 0.3)
    assert info_nce(z_hat, pos, negs[rng.permutation(9)], 0.3) == pytest.approx(a, abs=1e-12)


def test_info_nce_errors():
    with pytest.raises(ValueError):
        info_nce(np.ones(3), np.ones(3), [np.ones(3)], 0.0)
    with pytest.raises(ValueError):
        info_nce(np.ones(3), np.ones(3), [np.ones(2)], 0.1)
    with pytest.raises(FloatingPointError):
        info_nce(np.array([np.inf, 0.0]), np.ones(2), [np.ones(2)], 0.1)


vec = st.lists(st.floats(-3, 3), min_size=3, max_size=3).map(np.array)


@settings(max_examples=60, deadline=None)
@given(vec, vec, st.lists(vec, min_size=1, max_size=6), st.floats(0.05, 2.0))
def test_info_nce_non_negative(z_hat, pos, negs, tau):
    assert info_nce(z_hat, pos, negs, tau) >= 0


@settings(max_examples=60, deadline=None)
@given(st.floats(-2, 2), st.lists(st.floats(-2, 2), min_size=1, max_size=6), st.floats(0.01, 1.0))
def test_raising_positive_similarity_lowers_loss(s_pos, s_negs, bump):
    # one-dimensional embeddings make the similarities explicit
    z_hat = np.array([1.0])
    negs = [np.array([s]) for s in s_negs]
    lo = info_nce(z_hat, np.array([s_pos + bump]), negs, 0.5)
    hi = info_nce(z_hat, np.array([s_pos]), negs, 0.5)
    assert lo < hi


def test_temperature_sharpens_in_the_right_direction():
    z_hat = np.array([1.0])
    negs = [np.array([0.2]), np.array([-0.4])]
    good = [info_nce(z_hat, np.array([0.8]), negs, t) for t in (1.0, 0.5, 0.1)]
    bad = [info_nce(z_hat, np.array([-0.1]), negs, t) for t in (1.0, 0.5, 0.1)]
    assert good[0] > good[1] > good[2]
    assert bad[0] < bad[1] < bad[2]


def test_batch_form_matches_scalar_form():
    rng = np.random.default_rng(3)
    z_hat, z = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
    loss, acc, _, _ = info_nce_batch(z_hat, z, 0.2)
    ref = [info_nce(z_hat[i], z[i], sample_negatives(z, i), 0.2) for i in range(6)]
    assert loss == pytest.approx(np.mean(ref), abs=1e-12)
    scores = z_hat @ z.T
    assert acc == np.mean(np.argmax(scores, axis=1) == np.arange(6))


def test_info_nce_batch_gradient():
    rng = np.random.default_rng(4)
    params = {"zh": rng.normal(size=(2, 4)), "z": rng.normal(size=(2, 4))}

    def fn(p):
        loss, _, dzh, dz = info_nce_batch(p["zh"], p["z"], 0.5)
        return loss, {"zh": dzh, "z": dz}

    assert numeric.grad_check(fn, params, eps=1e-5) < 1e-5


# --- negatives and anchors ---------------------------------------------------------------


@pytest.mark.parametrize("B", [2, 256])
def test_negatives_are_the_other_positives(B):
    pos = np.arange(B, dtype=float)[:, None] * np.ones((1, 3))
    for i in (0, B - 1):
        negs = sample_negatives(pos, i)
        assert len(negs) == B - 1
        assert i not in negs[:, 0]


def test_negatives_need_two_anchors():
    with pytest.raises(ValueError):
        sample_negatives(np.ones((1, 3)), 0)


def test_anchors_leave_room_for_every_horizon(small_corpus):
    parties, _ = eligible(small_corpus)
    schema = fit_standardizer(parties, default_schema())
    items = prepare(parties, schema)
    rng = np.random.default_rng(0)
    for _ in range(5):
        for it, k in zip(items, sample_anchors(items, 2, rng)):
            assert 1 <= k <= it.plan.num_global
            assert horizon_window(it.plan, k, 1, len(it)) is not None
            full = [j for j in range(1, it.plan.num_global + 1)
                    if horizon_window(it.plan, j, 2, len(it)) is not None]
            if full:
                assert horizon_window(it.plan, k, 2, len(it)) is not None


# --- predict_future / encode_future ----------------------------------------------------------


@pytest.fixture(scope="module")
def model():
    parties, schema, cfg, items = toy_setup(n=4)
    return items, Encoder(dataclasses.replace(cfg, d_e=8, grn_hidden=8, d_h=8), seed=3)


def test_predict_future(model):
    _, enc = model
    c = np.random.default_rng(0).normal(size=8)
    enc = Encoder(enc.config, seed=3)
    enc.params["head.1"].value[...] = np.eye(8)
    np.testing.assert_array_equal(enc.predict_future(c, 1), c)
    before = enc.predict_future(c, 2).copy()
    enc.params["head.1"].value[...] = 0
    assert not enc.predict_future(c, 1).any()
    np.testing.assert_array_equal(enc.predict_future(c, 2), before)
    for k in (0, 3):
        with pytest.raises(ValueError):
            enc.predict_future(c, k)


def test_future_window_equals_history_summary(model):
    items, enc = model
    it = items[0]
    # the first future window after anchor 1 is sub-sequence 2 of the history
    lo, hi = it.plan.boundaries[1]
    assert horizon_window(it.plan, 1, 1, len(it)) == (lo, hi)
    z = encode_future(enc, it, 1, 1)
    xi, _, _ = enc.encode_events(it.num, it.cat)
    np.testing.assert_allclose(z, enc.encode_local(xi[lo:hi])[1], atol=1e-12)


def test_future_window_is_local(model):
    items, enc = model
    it = items[1]
    z = encode_future(enc, it, 2, 2)
    lo, _ = horizon_window(it.plan, 2, 2, len(it))
    earlier = dataclasses.replace(it, num=it.num.copy(), cat=it.cat.copy())
    earlier.num[:lo] += 5.0
    earlier.cat[:lo] = 0
    assert encode_future(enc, earlier, 2, 2).tobytes() == z.tobytes()


def test_future_window_out_of_bounds(model):
    items, enc = model
    it = items[0]
    with pytest.raises(IndexError):
        encode_future(enc, it, it.plan.num_global, 3)


# --- total loss ------------------------------------------------------------------------------


def test_single_horizon_total_is_that_horizon(model):
    items, enc = model
    one = Encoder(dataclasses.replace(enc.config, horizons=1), seed=3)
    rep = cpc_loss(one, make_batch(one, items, np.random.default_rng(0)), 0.1, backward=False)
    assert len(rep.per_horizon) == 1
    assert rep.total == rep.per_horizon[0]


def test_report_total_is_mean_of_horizons(model):
    items, enc = model
    rep = cpc_loss(enc, toy_batch(enc, items), 0.1, backward=False)
    assert abs(rep.total - np.mean(rep.per_horizon)) <= 1e-9
    assert all(x >= 0 for x in rep.per_horizon)
    assert 0 <= rep.accuracy <= 1


def test_identical_anchors_give_ln2(model):
    items, enc = model
    it = items[0]
    batch = pack([it, it], [2, 2], 2)
    rep = cpc_loss(enc, batch, 0.1, backward=False)
    for x in rep.per_horizon:
        assert x == pytest.approx(math.log(2), abs=1e-12)


def test_random_init_loss_near_log_batch():
    parties, _ = eligible(generate_synthetic(400, 0.1, 77))
    schema = fit_standardizer(parties, default_schema())
    items = prepare(parties, schema)
    cfg = EncoderConfig.from_schema(schema)
    totals = []
    for seed in range(20):
        rng = np.random.default_rng(seed)
        pick = [items[i] for i in rng.choice(len(items), 64, replace=False)]
        enc = Encoder(cfg, seed=seed)
        totals.append(cpc_loss(enc, make_batch(enc, pick, rng), 0.1, backward=False).total)
    assert max(abs(t - math.log(64)) for t in totals) <= 0.7, totals


def test_unused_embedding_rows_get_no_gradient(model):
    items, enc = model
    enc.zero_grad()
    batch = toy_batch(enc, items)
    cpc_loss(enc, batch, 0.1)
    schema_cats = enc.config.categorical
    for j, (name, size) in enumerate(schema_cats):
        used = np.unique(batch.cat[:, j])
        grad = enc.params[f"embed.{name}"].grad
        unused = np.setdiff1d(np.arange(size), used)
        assert not grad[unused].any()
        assert grad[used].any()


def test_loss_gradient_through_future_windows(model):
    items, enc = model
    batch = toy_batch(enc, items)
    fn, loss_fn = objective(enc, batch)
    # only the short-term path carries the future windows
    params = {k: v for k, v in enc.values().items() if k.startswith(("enc1.", "head."))}
    assert numeric.grad_check(fn, params, eps=5e-5, loss_fn=loss_fn, floor=1e-7) <= 1e-4
