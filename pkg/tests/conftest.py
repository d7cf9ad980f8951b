import numpy as np
import pytest

from tct.cpc import cpc_loss, make_batch
from tct.data import PartySequence, default_schema, fit_standardizer, generate_synthetic
from tct.encoder import Encoder, EncoderConfig, prepare


def toy_parties(n=4, T=18, seed=3):
    """Short fraud-heavy corpus cut to exactly T events per party."""
    out = []
    for p in generate_synthetic(n + 4, 0.5, seed):
        if len(p) >= T:
            out.append(PartySequence(p.party_id, p.events[:T], p.label))
        if len(out) == n:
            return out
    raise RuntimeError("not enough long parties")


def toy_setup(precision="float64", n=4, seed=0, **kw):
    parties = toy_parties(n)
    schema = fit_standardizer(parties, default_schema())
    cfg = EncoderConfig.from_schema(schema, precision=precision, **kw)
    items = prepare(parties, schema, cfg.k_global, cfg.local_window)
    return parties, schema, cfg, items


def objective(encoder, batch, tau=0.1):
    """(fn, loss_fn) pair for grad_check over every encoder parameter."""

    def fn(params):
        encoder.zero_grad()
        rep = cpc_loss(encoder, batch, tau)
        return rep.total, {k: p.grad.copy() for k, p in encoder.params.items()}

    def loss_fn(params):
        return cpc_loss(encoder, batch, tau, backward=False).total

    return fn, loss_fn


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(60, 0.3, 11)


@pytest.fixture
def toy():
    return toy_setup()


def toy_batch(encoder, items, seed=0):
    return make_batch(encoder, items, np.random.default_rng(seed))


def new_encoder(cfg, seed=0):
    return Encoder(cfg, seed=seed)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
