import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from mixpost.core import ValidationError
from mixpost.scenario import (QuantileForecast, ecc_q, mid_quantile_levels)


def test_mid_levels():
    assert mid_quantile_levels(4).tolist() == [0.125, 0.375, 0.625, 0.875]


def test_sorted_template_is_identity():
    q = QuantileForecast([[1.0, 2.0, 3.0], [10.0, 20.0, 30.0]])
    raw = np.array([[0.1, 5.0], [0.2, 6.0], [0.3, 7.0]])
    assert np.array_equal(ecc_q(q, raw).values, q.values.T)


def test_rank_permutation_example():
    q = QuantileForecast([[1.0, 2.0, 3.0]])
    raw = np.array([[9.0], [1.0], [5.0]])   # ranks 3, 1, 2
    assert ecc_q(q, raw).values[:, 0].tolist() == [3.0, 1.0, 2.0]


def test_ties_follow_member_order():
    q = QuantileForecast([[1.0, 2.0, 3.0]])
    raw = np.array([[0.0], [0.0], [-1.0]])
    assert ecc_q(q, raw).values[:, 0].tolist() == [2.0, 3.0, 1.0]


def test_errors():
    with pytest.raises(ValidationError):
        QuantileForecast([[2.0, 1.0]])
    with pytest.raises(ValidationError):
        ecc_q(QuantileForecast([[1.0, 2.0]]), np.zeros((3, 1)))


def test_from_distributions_and_csv(tmp_path):
    q = QuantileForecast.from_distributions([stats.norm(0, 1), stats.norm(5, 2)], 4,
                                            lead_times=(1, 2))
    assert q.values[1, 0] == pytest.approx(5 + 2 * stats.norm.ppf(0.125))
    s = ecc_q(q, np.arange(8.0).reshape(4, 2))
    s.write_csv(tmp_path / "s.csv")
    lines = (tmp_path / "s.csv").read_text().splitlines()
    assert lines[0] == "member,lead_time,value" and len(lines) == 9
    assert lines[2].startswith("1,2,")


def test_from_samples_levels():
    S = np.arange(1000.0)[None, :]
    q = QuantileForecast.from_samples(S, 10)
    assert np.allclose(q.values[0], np.quantile(S[0], mid_quantile_levels(10)))


@settings(max_examples=1000, deadline=None)
@given(M=st.integers(1, 12), H=st.integers(1, 5), seed=st.integers(0, 2 ** 32 - 1),
       ties=st.booleans())
def test_marginals_and_ranks_preserved(M, H, seed, ties):
    rng = np.random.default_rng(seed)
    raw = rng.integers(0, 3, (M, H)).astype(float) if ties else rng.normal(size=(M, H))
    Q = np.sort(rng.normal(size=(H, M)), axis=1)
    out = ecc_q(QuantileForecast(Q), raw).values
    assert np.array_equal(np.sort(out, axis=0), Q.T)
    rank = lambda A: np.argsort(np.argsort(A, axis=0, kind="stable"), axis=0, kind="stable")
    # ties in the template become strict ranks by member index
    if np.all(np.diff(Q, axis=1) > 0):
        assert np.array_equal(rank(out), rank(raw))
    if not ties and M > 2 and H > 1:
        assert np.allclose(stats.spearmanr(out).statistic, stats.spearmanr(raw).statistic)
