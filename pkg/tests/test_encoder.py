import dataclasses
import math

import numpy as np
import pytest

from tct import numeric as nm
from tct.data import (Event, PartySequence, default_schema, derive_fields, fit_standardizer,
                      generate_synthetic)
from tct.encoder import (Encoder, EncoderConfig, embed_batch, embed_party, encode_event, grn, pack,
                         prepare, variable_select)

from conftest import objective, toy_batch, toy_setup


def grn_params(rng, m, hid, m_out=None, d_c=None):
    m_out = m_out or m
    p = {"w2": rng.normal(size=(hid, m)), "b2": rng.normal(size=hid),
         "w1": rng.normal(size=(2 * m_out, hid)), "b1": rng.normal(size=2 * m_out),
         "gamma": rng.normal(size=m_out), "beta": rng.normal(size=m_out)}
    if d_c:
        p["w3"] = rng.normal(size=(hid, d_c))
    if m_out != m:
        p["skip"] = rng.normal(size=(m_out, m))
    return p


def scalar_grn(a, c, p):
    """Element-by-element evaluation of the gated residual block."""
    hid, m = p["w2"].shape
    m_out = len(p["gamma"])
    eta2 = []
    for i in range(hid):
        s = p["b2"][i] + sum(p["w2"][i][j] * a[j] for j in range(m))
        if c is not None:
            s += sum(p["w3"][i][j] * c[j] for j in range(len(c)))
        eta2.append(s if s > 0 else math.exp(s) - 1)
    eta1 = [p["b1"][i] + sum(p["w1"][i][j] * eta2[j] for j in range(hid)) for i in range(2 * m_out)]
    gated = [eta1[i] / (1 + math.exp(-eta1[m_out + i])) for i in range(m_out)]
    if "skip" in p:
        skip = [sum(p["skip"][i][j] * a[j] for j in range(m)) for i in range(m_out)]
    else:
        skip = list(a)
    x = [skip[i] + gated[i] for i in range(m_out)]
    mu = sum(x) / m_out
    var = sum((v - mu) ** 2 for v in x) / m_out
    return [p["gamma"][i] * (x[i] - mu) / math.sqrt(var + 1e-5) + p["beta"][i] for i in range(m_out)]


def zero_grn(m, hid):
    return {"w2": np.zeros((hid, m)), "b2": np.zeros(hid), "w1": np.zeros((2 * m, hid)),
            "b1": np.zeros(2 * m), "gamma": np.ones(m), "beta": np.zeros(m)}


def test_grn_zero_weights():
    a = np.array([1.0, 2.0, 4.0])
    out, _ = grn(a, None, zero_grn(3, 2))
    np.testing.assert_allclose(out, nm.layer_norm(a, np.ones(3), np.zeros(3))[0])
    out, _ = grn(np.full(3, 2.5), None, zero_grn(3, 2))
    np.testing.assert_array_equal(out, np.zeros(3))


@pytest.mark.parametrize("m_out,d_c", [(4, None), (4, 3), (2, None), (3, 2)])
def test_grn_matches_scalar_oracle(m_out, d_c):
    rng = np.random.default_rng(m_out * 10 + (d_c or 0))
    p = grn_params(rng, 4, 5, m_out, d_c)
    a = rng.normal(size=4)
    c = rng.normal(size=d_c) if d_c else None
    out, _ = grn(a, c, p)
    np.testing.assert_allclose(out, scalar_grn(a, c, p), atol=1e-6)


def test_grn_errors():
    p = grn_params(np.random.default_rng(0), 4, 3)
    with pytest.raises(ValueError):
        grn(np.ones(4), np.ones(2), p)
    with pytest.raises(ValueError):
        grn(np.ones(5), None, p)


# --- event encoding -----------------------------------------------------------------------


@pytest.fixture(scope="module")
def setup():
    parties = generate_synthetic(12, 0.5, 21)
    schema = fit_standardizer(parties, default_schema(embed_dim=6))
    cfg = EncoderConfig.from_schema(schema, d_h=8)
    return parties, schema, cfg, Encoder(cfg, seed=2)


def test_encode_event_shape_and_oov(setup):
    parties, schema, cfg, enc = setup
    e = parties[0].events[3]
    Xi = encode_event(e, schema, enc)
    assert Xi.shape == (schema.n_variables, cfg.d_e)
    with pytest.raises(IndexError, match="counterparty_id"):
        encode_event(dataclasses.replace(e, counterparty_id=512), schema, enc)


def test_encode_event_ignores_static_fields(setup):
    parties, schema, cfg, enc = setup
    e = parties[0].events[3]
    moved = dataclasses.replace(e, party_id="other", timestamp=e.timestamp + 12345)
    assert encode_event(e, schema, enc).tobytes() == encode_event(moved, schema, enc).tobytes()


def test_embedding_lookup_returns_rows():
    cfg = EncoderConfig((), (("c", 3),), d_e=3, d_h=4)
    enc = Encoder(cfg)
    enc.params["embed.c"].value[...] = np.eye(3)
    phi = enc.embed_variables(np.zeros((1, 0)), np.array([[1]]))
    np.testing.assert_array_equal(phi[0, 0], [0.0, 1.0, 0.0])
    with pytest.raises(IndexError):
        enc.embed_variables(np.zeros((1, 0)), np.array([[3]]))


def test_variable_select_single_variable():
    cfg = EncoderConfig(("x",), (), d_e=3, d_h=4)
    enc = Encoder(cfg, seed=1)
    Xi = np.random.default_rng(0).normal(size=(1, 3))
    xi, v = variable_select(Xi, enc)
    assert v.tolist() == [1.0]
    np.testing.assert_array_equal(xi, Xi[0])


def test_variable_select_uniform_when_logits_equal(setup):
    _, _, cfg, _ = setup
    enc = Encoder(cfg, seed=3)
    for k in ("w1", "b1", "skip", "beta"):
        enc.params[f"vsn.sel.{k}"].value[...] = 0
    Xi = np.random.default_rng(1).normal(size=(cfg.n_variables, cfg.d_e))
    xi, v = variable_select(Xi, enc)
    np.testing.assert_allclose(v, 1 / cfg.n_variables)
    np.testing.assert_allclose(xi, Xi.mean(axis=0))


def test_selection_weights_on_simplex(setup):
    _, schema, cfg, enc = setup
    parties = generate_synthetic(240, 0.1, 8)
    items = prepare(parties, schema)
    num = np.concatenate([it.num for it in items])
    cat = np.concatenate([it.cat for it in items])
    assert len(num) >= 10_000
    _, v, _ = enc.encode_events(num, cat)
    assert np.all(v >= 0)
    assert np.max(np.abs(v.sum(axis=1) - 1)) <= 1e-6


# --- recurrent encoders and context -----------------------------------------------------------


def test_encode_local(setup):
    _, _, cfg, enc = setup
    rng = np.random.default_rng(4)
    x = rng.normal(size=(5, cfg.d_e))
    H, last = enc.encode_local(x[:1])
    z = np.zeros(cfg.d_h)
    (h, _), _ = nm.lstm_cell(x[0], z, z, enc.cell("enc1"))
    np.testing.assert_array_equal(H[0], h)
    H, last = enc.encode_local(x)
    for t in range(1, 6):
        np.testing.assert_allclose(enc.encode_local(x[:t])[1], H[t - 1], atol=1e-12)
    np.testing.assert_array_equal(last, H[-1])
    with pytest.raises(ValueError):
        enc.encode_local(np.zeros((0, cfg.d_e)))


def test_encode_local_zero_params():
    cfg = EncoderConfig(("x",), (), d_e=2, d_h=3)
    enc = Encoder(cfg)
    for k in ("wx", "wh", "b"):
        enc.params[f"enc1.{k}"].value[...] = 0
    H, _ = enc.encode_local(np.zeros((4, 2)))
    assert not H.any()


def test_encode_global(setup):
    _, _, cfg, enc = setup
    s = np.random.default_rng(5).normal(size=(6, cfg.d_h))
    H = enc.encode_global(s)
    assert H.shape == (6, cfg.d_h)
    z = np.zeros(cfg.d_h)
    (h, _), _ = nm.lstm_cell(s[0], z, z, enc.cell("enc2"))
    np.testing.assert_array_equal(enc.encode_global(s[:1])[0], h)
    for k in range(1, 7):
        np.testing.assert_allclose(enc.encode_global(s[:k])[-1], H[k - 1], atol=1e-12)
    with pytest.raises(ValueError):
        enc.encode_global(np.zeros((0, cfg.d_h)))


def test_context_last_and_single_token_attention(setup):
    _, _, cfg, enc = setup
    h = np.random.default_rng(6).normal(size=(1, cfg.d_h))
    np.testing.assert_array_equal(enc.context_vector(h), h[0])
    att = Encoder(dataclasses.replace(cfg, context_mode="attention"), seed=1)
    p = {k: att.params[f"attn.{k}"].value for k in ("wv", "wo")}
    np.testing.assert_allclose(att.context_vector(h), p["wo"] @ p["wv"] @ h[0], atol=1e-12)
    with pytest.raises(ValueError):
        enc.context_vector(np.zeros((0, cfg.d_h)))


@pytest.mark.parametrize("mode", ["last", "attention"])
def test_batched_context_matches_single_party_path(setup, mode):
    parties, schema, cfg, _ = setup
    cfg = dataclasses.replace(cfg, context_mode=mode)
    enc = Encoder(cfg, seed=4)
    items = prepare(parties[:5], schema)
    anchors = [2, 3, 1, 4, 2]
    batch = pack(items, anchors, horizons=2)
    state = enc.forward(batch)
    for b, (it, k) in enumerate(zip(items, anchors)):
        xi, _, _ = enc.encode_events(it.num, it.cat)
        summaries = [enc.encode_local(xi[lo:hi])[1] for lo, hi in it.plan.boundaries[:k]]
        c = enc.context_vector(enc.encode_global(np.array(summaries)))
        np.testing.assert_allclose(state.context[b], c, atol=1e-10)


@pytest.mark.parametrize("mode", ["last", "attention"])
def test_context_is_causal(setup, mode):
    parties, schema, cfg, _ = setup
    enc = Encoder(dataclasses.replace(cfg, context_mode=mode), seed=4)
    it = prepare(parties[:1], schema)[0]
    c_prefix = enc.forward(pack([it], [2])).context
    later = dataclasses.replace(it, num=it.num.copy())
    lo = it.plan.boundaries[2][0]
    later.num[lo:] += 3.0
    assert enc.forward(pack([later], [2])).context.tobytes() == c_prefix.tobytes()


# --- party embeddings ---------------------------------------------------------------------


def test_embed_party_deterministic_and_32_wide():
    parties = generate_synthetic(3, 0.0, 2)
    schema = fit_standardizer(parties, default_schema())
    enc = Encoder(EncoderConfig.from_schema(schema), seed=0)
    a = embed_party(parties[0], schema, enc)
    b = embed_party(parties[0], schema, enc)
    assert a.vector.shape == (32,)
    assert a.vector.tobytes() == b.vector.tobytes()
    np.testing.assert_allclose(embed_batch(enc, prepare(parties, schema))[0], a.vector, atol=1e-12)


def test_embedding_is_order_sensitive():
    parties = [p for p in generate_synthetic(300, 1.0, 13)][:100]
    schema = fit_standardizer(parties, default_schema(embed_dim=8))
    enc = Encoder(EncoderConfig.from_schema(schema, d_h=32), seed=0)
    rng = np.random.default_rng(0)
    changed = 0
    for p in parties:
        # keep the timestamps, shuffle which payload happens when
        payload = [(e.amount, e.channel_id, e.counterparty_id, e.direction) for e in p.events]
        order = rng.permutation(len(payload))
        evs = [dataclasses.replace(e, amount=payload[j][0], channel_id=payload[j][1],
                                   counterparty_id=payload[j][2], direction=payload[j][3])
               for e, j in zip(p.events, order)]
        shuffled = PartySequence(p.party_id, derive_fields(evs), p.label)
        a = embed_party(p, schema, enc).vector
        b = embed_party(shuffled, schema, enc).vector
        changed += not np.array_equal(a, b)
    assert changed >= 95


def test_static_inputs_never_reach_default_encoder():
    parties, schema, cfg, items = toy_setup()
    enc = Encoder(cfg, seed=0)
    base = embed_batch(enc, items)
    moved = [dataclasses.replace(it, party_id="X" + it.party_id, static=it.static + 7.5) for it in items]
    assert embed_batch(enc, moved).tobytes() == base.tobytes()
    # negative control: the opt-in static context does see them
    on = Encoder(dataclasses.replace(cfg, static_context=True), seed=0)
    assert not np.array_equal(embed_batch(on, items), embed_batch(on, moved))


def test_config_fingerprint_tracks_architecture_only():
    cfg = EncoderConfig(("x",), (("c", 4),))
    assert cfg.fingerprint() == dataclasses.replace(cfg, precision="float32").fingerprint()
    assert cfg.fingerprint() != dataclasses.replace(cfg, d_h=16).fingerprint()
    with pytest.raises(ValueError):
        EncoderConfig(("x",), (), context_mode="mean")
    with pytest.raises(ValueError):
        EncoderConfig(("x",), (), d_h=30, context_mode="attention")


def test_fp32_and_fp64_agree_on_argmax():
    parties, schema, cfg64, items = toy_setup(n=8)
    cfg32 = dataclasses.replace(cfg64, precision="float32")
    e64, e32 = Encoder(cfg64, seed=5), Encoder(cfg32, seed=5)
    b64 = toy_batch(e64, items)
    b32 = pack(items, [int(k) for k in b64.ctx_mask.sum(axis=1)], 2, dtype=np.float32)
    s64, s32 = e64.forward(b64), e32.forward(b32)
    for k in range(1, 3):
        rows = np.flatnonzero(b64.fut_valid[:, k - 1])
        W64, W32 = e64.params[f"head.{k}"].value, e32.params[f"head.{k}"].value
        l64 = (s64.context[rows] @ W64.T) @ s64.summaries[b64.fut_win[rows, k - 1]].T
        l32 = (s32.context[rows] @ W32.T) @ s32.summaries[b32.fut_win[rows, k - 1]].T
        assert np.array_equal(np.argmax(l64, axis=1), np.argmax(l32, axis=1))


# --- end-to-end gradients at reduced width, every entry --------------------------------------


@pytest.mark.parametrize("mode,static", [("last", False), ("attention", False), ("last", True)])
def test_full_objective_gradient_every_entry(mode, static):
    from tct import numeric
    parties, schema, cfg, items = toy_setup(n=4)
    cfg = dataclasses.replace(cfg, d_e=4, grn_hidden=4, d_h=8, context_mode=mode, static_context=static)
    enc = Encoder(cfg, seed=1)
    batch = toy_batch(enc, items)
    fn, loss_fn = objective(enc, batch)
    details = {}
    # a loss near ln 4 carries ~1e-15 of rounding, i.e. ~1e-11 in each difference
    # quotient, so gradients under 1e-7 are judged against that floor
    err = numeric.grad_check(fn, enc.values(), eps=5e-5, loss_fn=loss_fn, details=details, floor=1e-7)
    assert err <= 1e-4, sorted(details.items(), key=lambda kv: -kv[1])[:3]
