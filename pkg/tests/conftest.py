import numpy as np
import pytest

from lowrankformer.numcore import ParamStore


def identity_factorized(dense: ParamStore) -> ParamStore:
    """Rewrite every dense W (m x n) as E @ D with rank min(m, n) and one factor the identity."""
    out = ParamStore(dense.rng_seed, dense.dtype)
    for name, t in dense.items():
        if name.endswith(".W") and not name.split(".")[-2] in ("khat", "vhat"):
            m, n = t.shape
            out.add(name[:-1] + "E", np.eye(m) if m <= n else t.data)
            out.add(name[:-1] + "D", t.data if m <= n else np.eye(n))
        else:
            out.add(name, t.data)
    return out


def materialized(fact: ParamStore) -> ParamStore:
    """Replace every E/D pair by the dense product W = E @ D."""
    out = ParamStore(fact.rng_seed, fact.dtype)
    for name, t in fact.items():
        if name.endswith(".E"):
            out.add(name[:-1] + "W", t.data @ fact[name[:-1] + "D"].data)
        elif name.endswith(".D"):
            continue
        else:
            out.add(name, t.data)
    return out


def np_layer_norm(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def np_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


SEEDS = [0, 1, 2, 3, 4]
