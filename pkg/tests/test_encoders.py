import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flame.encoders import Encoder, encode, sinusoidal
from flame.experts import LedgerError
from flame.numerics import autodiff as ad
from helpers import gradcheck


def _encoder(d_in=3, d=4, seed=0, pos=0.3):
    enc = Encoder("m", d_in, d, rng=np.random.default_rng(seed))
    enc.pos.data = np.asarray(pos)
    r = np.random.default_rng(seed + 1)
    enc.inp.base_bias.data = r.standard_normal(d)
    return enc


def _brute(enc, x):
    """Entry-by-entry single-head attention with residual."""
    L, d = x.shape[0], enc.d
    Wi, bi = enc.inp.effective_weight(0), enc.inp.effective_bias(0)
    Wq, Wk, Wv = (w.effective_weight(0) for w in (enc.q, enc.k, enc.v))
    p = [[sum(Wi[j, i] * x[t, i] for i in range(x.shape[1])) + bi[j]
          + float(enc.pos.data) * (math.sin(t / 10000 ** (2 * (j // 2) / d)) if j % 2 == 0
                                   else math.cos(t / 10000 ** (2 * (j // 2) / d)))
          for j in range(d)] for t in range(L)]
    proj = lambda W: [[sum(W[j, i] * p[t][i] for i in range(d)) for j in range(d)] for t in range(L)]  # noqa: E731
    q, k, v = proj(Wq), proj(Wk), proj(Wv)
    out = np.zeros((L, d))
    for t in range(L):
        s = [sum(q[t][j] * k[u][j] for j in range(d)) / math.sqrt(d) for u in range(L)]
        mx = max(s)
        e = [math.exp(v_ - mx) for v_ in s]
        a = [v_ / sum(e) for v_ in e]
        for j in range(d):
            out[t, j] = p[t][j] + sum(a[u] * v[u][j] for u in range(L))
    return out


def test_matches_brute_force_attention():
    enc = _encoder()
    x = np.random.default_rng(7).standard_normal((3, 3))
    np.testing.assert_allclose(encode(enc, x, 0).data, _brute(enc, x), atol=1e-10, rtol=0)


def test_single_step_is_projection_plus_value():
    enc = _encoder()
    x = np.random.default_rng(1).standard_normal((1, 3))
    p = x @ enc.inp.effective_weight(0).T + enc.inp.effective_bias(0) + float(enc.pos.data) * sinusoidal(1, 4)
    np.testing.assert_allclose(encode(enc, x, 0).data, p + p @ enc.v.effective_weight(0).T, atol=1e-12)


def test_zero_weights_give_zero_output():
    enc = Encoder("m", 3, 4, rng=None)
    x = np.random.default_rng(2).standard_normal((5, 3))
    assert np.array_equal(encode(enc, x, 0).data, np.zeros((5, 4)))


@given(L=st.integers(1, 9), batch=st.integers(1, 3))
def test_length_preserved(L, batch):
    enc = _encoder()
    x = np.random.default_rng(L).standard_normal((batch, L, 3))
    assert encode(enc, x, 0).shape == (batch, L, 4)


def test_batched_equals_per_sample():
    enc = _encoder()
    x = np.random.default_rng(3).standard_normal((2, 4, 3))
    both = encode(enc, x, 0).data
    for b in range(2):
        np.testing.assert_allclose(both[b], encode(enc, x[b], 0).data, atol=1e-13)


def test_empty_and_wrong_dim_rejected():
    enc = _encoder()
    with pytest.raises(ValueError):
        encode(enc, np.zeros((0, 3)), 0)
    with pytest.raises(ValueError):
        encode(enc, np.zeros((2, 5)), 0)


def test_earlier_cursor_unaffected_by_later_stage():
    enc = _encoder()
    x = np.random.default_rng(4).standard_normal((6, 3))
    before = encode(enc, x, 0).data.copy()
    enc.attach_live(1)
    rng = np.random.default_rng(5)
    for w in enc.weights:
        w.live.data = rng.standard_normal(w.shape)
    enc.live_pos.data = np.asarray(0.7)
    during = encode(enc, x, 0).data
    enc.compress_and_stack(2)
    after = encode(enc, x, 0).data
    assert before.tobytes() == during.tobytes() == after.tobytes()
    assert not np.allclose(encode(enc, x, 1).data, before)
    with pytest.raises(LedgerError):
        encode(enc, x, 2)


def test_positional_delta_is_exact():
    enc = _encoder(pos=0.25)
    enc.attach_live(1)
    enc.live_pos.data = np.asarray(0.5)
    enc.compress_and_stack(1)
    assert float(enc.pos_scale(1).data) == 0.75
    assert float(enc.pos_scale(0).data) == 0.25


@pytest.mark.parametrize("seed", range(10))
def test_encoder_gradients(seed):
    enc = _encoder(seed=seed)
    enc.attach_live(1)
    rng = np.random.default_rng(100 + seed)
    for w in enc.weights:
        w.live.data = 0.3 * rng.standard_normal(w.shape)
    x = rng.standard_normal((2, 4, 3))
    wout = rng.standard_normal((2, 4, 4))
    params = list(enc.params().values())
    base = [p for p in params if "live" not in p.name]
    live = [p for p in params if "live" in p.name]
    assert gradcheck(lambda: ad.sum(encode(enc, x, 0) * wout), base) <= 1e-4
    assert gradcheck(lambda: ad.sum(encode(enc, x, 1) * wout), live) <= 1e-4
