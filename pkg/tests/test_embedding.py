import math
from datetime import datetime

import numpy as np
import pytest

from pdformer import autodiff as ad
from pdformer.autodiff import Parameter
from pdformer.embedding import (
    TimeIndexMeta,
    embed,
    init_embedding_params,
    slots_per_day,
    temporal_position_encoding,
)


def make_params(C=2, k=3, d=6, slots=288, seed=0):
    params = {}
    init_embedding_params(params, np.random.default_rng(seed), C, k, d, slots)
    return params


def test_position_encoding_first_rows():
    pe = temporal_position_encoding(3, 4)
    np.testing.assert_allclose(pe[0], [0.0, 1.0, 0.0, 1.0])
    assert pe[1, 0] == pytest.approx(math.sin(1.0))
    assert pe[1, 1] == pytest.approx(math.cos(1.0))
    assert pe[2, 2] == pytest.approx(math.sin(2.0 / 100.0))


def test_position_encoding_odd_dim_rejected():
    with pytest.raises(ValueError):
        temporal_position_encoding(3, 5)


def test_slots_per_day():
    assert slots_per_day(5) == 288
    assert slots_per_day(30) == 48
    with pytest.raises(ValueError):
        slots_per_day(7)


def test_time_meta_calendar():
    # 2018-01-01 is a Monday
    meta = TimeIndexMeta.for_steps(datetime(2018, 1, 1), 5, [0, 1, 288, 288 * 6 + 287])
    assert meta.week_index.tolist() == [1, 1, 2, 7]
    assert meta.day_slot.tolist() == [0, 1, 0, 287]


def test_embedding_is_sum_of_parts():
    rng = np.random.default_rng(1)
    B, T, N, C, k, d = 2, 3, 4, 2, 3, 6
    P = make_params(C, k, d)
    window = rng.normal(size=(B, T, N, C))
    basis = rng.normal(size=(N, k))
    meta = TimeIndexMeta.stack(
        [TimeIndexMeta.for_steps(datetime(2018, 1, 1), 5, np.arange(s, s + T)) for s in (0, 400)]
    )
    pe = temporal_position_encoding(T, d)
    x = embed(P, window, meta, basis, pe).data
    w = {k_: p.data for k_, p in P.items()}
    for b in range(B):
        for t in range(T):
            for n in range(N):
                expect = (
                    window[b, t, n] @ w["embed.data.w"]
                    + w["embed.data.b"]
                    + basis[n] @ w["embed.lap.w"]
                    + w["embed.lap.b"]
                    + w["embed.week"][meta.week_index[b, t] - 1]
                    + w["embed.day"][meta.day_slot[b, t]]
                    + pe[t]
                )
                np.testing.assert_allclose(x[b, t, n], expect, atol=1e-12)


def test_periodic_tables_get_sparse_gradients():
    P = make_params(1, 2, 4, slots=48)
    window = np.zeros((1, 2, 3, 1))
    meta = TimeIndexMeta(np.array([[3, 3]]), np.array([[10, 11]]), np.array([[0, 1]]))
    out = embed(P, window, meta, np.zeros((3, 2)), temporal_position_encoding(2, 4))
    ad.backward(ad.sum(out))
    g = P["embed.day"].grad
    assert set(np.nonzero(g.any(axis=1))[0]) == {10, 11}
    np.testing.assert_allclose(g[10], 3.0)
    np.testing.assert_allclose(P["embed.week"].grad[2], 6.0)
    assert not np.delete(P["embed.week"].grad, 2, axis=0).any()


def test_embedding_gradients_finite_difference():
    rng = np.random.default_rng(2)
    P = make_params(2, 2, 4, slots=48)
    window = rng.normal(size=(1, 3, 2, 2))
    basis = rng.normal(size=(2, 2))
    meta = TimeIndexMeta(np.array([[1, 2, 3]]), np.array([[0, 1, 2]]), np.arange(3)[None])
    pe = temporal_position_encoding(3, 4)
    R = rng.normal(size=(1, 3, 2, 4))

    def value():
        return float((embed(P, window, meta, basis, pe).data * R).sum())

    ad.backward(ad.sum(ad.hadamard(embed(P, window, meta, basis, pe), R)))
    for name in ("embed.data.w", "embed.lap.b"):
        p = P[name]
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + 1e-6
            up = value()
            p.data[idx] = orig - 1e-6
            down = value()
            p.data[idx] = orig
            assert p.grad[idx] == pytest.approx((up - down) / 2e-6, abs=1e-6)


def test_embedding_shape_checks():
    P = make_params(2, 3, 6)
    meta = TimeIndexMeta(np.ones((1, 3), int), np.zeros((1, 3), int), np.zeros((1, 3), int))
    pe = temporal_position_encoding(3, 6)
    with pytest.raises(ValueError, match="channels"):
        embed(P, np.zeros((1, 3, 4, 1)), meta, np.zeros((4, 3)), pe)
    with pytest.raises(ValueError, match="basis"):
        embed(P, np.zeros((1, 3, 4, 2)), meta, np.zeros((5, 3)), pe)


def test_init_ranges():
    P = make_params(2, 3, 8, slots=48)
    assert np.abs(P["embed.week"].data).max() <= 0.04
    assert P["embed.day"].shape == (48, 8)
    assert np.abs(P["embed.data.w"].data).max() <= 1 / math.sqrt(2)
    assert isinstance(P["embed.lap.w"], Parameter)
