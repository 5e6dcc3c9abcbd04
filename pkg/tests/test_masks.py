import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from saferealign.deltas import MaskSet
from saferealign.fisher import ratio_count
from saferealign.masks import build_mask, extend_mask_more, random_mask


def test_build_mask_examples():
    c = MaskSet({"w": [1, 0, 1]})
    f = {"w": np.array([0.9, 0.5, 0.1])}
    np.testing.assert_array_equal(build_mask(c, f, 50)["w"], [1, 0, 0])
    np.testing.assert_array_equal(build_mask(c, f, 100)["w"], c["w"])
    assert not build_mask(c, f, 0)["w"].any()


def test_ties_all_selected():
    c = MaskSet({"w": [1, 1, 1, 1]})
    m = build_mask(c, {"w": np.array([0.5, 0.5, 0.5, 0.1])}, 25)
    np.testing.assert_array_equal(m["w"], [1, 1, 1, 0])


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 100), st.floats(0, 100), st.sampled_from(["per-tensor", "global"]))
def test_mask_properties(seed, r1, r2, scope):
    rng = np.random.default_rng(seed)
    shapes = {"a": (5, 7), "b": (11,)}
    cand = MaskSet({n: rng.random(s) < 0.5 for n, s in shapes.items()})
    f = {n: rng.random(s) for n, s in shapes.items()}
    lo, hi = sorted((r1, r2))
    m_lo, m_hi = build_mask(cand, f, lo, scope), build_mask(cand, f, hi, scope)
    assert m_lo.issubset(cand) and m_hi.issubset(cand)
    assert m_lo.issubset(m_hi)
    # distinct scores: exact count per scope
    if scope == "per-tensor":
        for n in shapes:
            assert m_hi[n].sum() == ratio_count(hi, int(cand[n].sum()))
    else:
        assert m_hi.count() == ratio_count(hi, cand.count())


def test_extend_more_examples():
    cand = MaskSet({"w": [1, 0, 0, 0]})
    f = {"w": np.array([0.9, 0.3, 0.2, 0.7])}
    full = build_mask(cand, f, 100)
    assert extend_mask_more(full, cand, f, 0).equal(full)
    assert extend_mask_more(full, cand, f, 100)["w"].all()
    np.testing.assert_array_equal(extend_mask_more(full, cand, f, 100 / 3)["w"], [1, 0, 1, 0])
    np.testing.assert_array_equal(extend_mask_more(full, cand, f, 34)["w"], [1, 1, 1, 0])


def test_extend_more_tie_break_by_index():
    cand = MaskSet({"w": [0, 0, 0]})
    f = {"w": np.array([0.2, 0.2, 0.2])}
    np.testing.assert_array_equal(extend_mask_more(cand, cand, f, 50)["w"], [1, 1, 0])


def test_extend_more_requires_full_candidates():
    cand = MaskSet({"w": [1, 1, 0]})
    with pytest.raises(ValueError, match="omits"):
        extend_mask_more(MaskSet({"w": [1, 0, 0]}), cand, {"w": np.ones(3)}, 10)


def test_extend_more_denominator_all():
    cand = MaskSet({"w": [1, 1, 0, 0]})
    f = {"w": np.array([0.5, 0.5, 0.4, 0.1])}
    # 25% of all four positions is one extra
    np.testing.assert_array_equal(extend_mask_more(cand, cand, f, 25, denominator="all")["w"], [1, 1, 0, 1])
    np.testing.assert_array_equal(extend_mask_more(cand, cand, f, 25)["w"], [1, 1, 0, 1])
    np.testing.assert_array_equal(extend_mask_more(cand, cand, f, 60, denominator="all")["w"], [1, 1, 1, 1])


def test_random_mask_nested_and_counted():
    shapes = {"a": (10, 10), "b": (33,)}
    m30, m60 = random_mask(shapes, 30, 5), random_mask(shapes, 60, 5)
    assert m30.issubset(m60)
    assert m30["a"].sum() == 30 and m30["b"].sum() == ratio_count(30, 33)
    g = random_mask(shapes, 50, 5, "global")
    assert g.count() == ratio_count(50, 133)
