import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bdlab.errors import DomainError
from bdlab.vectors import GradientVector, is_shared_segment

finite = st.floats(-1e6, 1e6, allow_nan=False, allow_infinity=False)


def test_from_parts_builds_contiguous_segments():
    g = GradientVector.from_parts([("a", np.ones((2, 2))), ("b", [5.0])])
    assert g.segments == {"a": (0, 4), "b": (4, 5)}
    assert g.segment("b").tolist() == [5.0]


@pytest.mark.parametrize("segments", [{"a": (0, 2)}, {"a": (0, 2), "b": (3, 4)}, {"a": (1, 4)}])
def test_bad_partition_is_rejected(segments):
    with pytest.raises(DomainError):
        GradientVector(np.zeros(4), segments)


def test_restrict_and_shared_view():
    g = GradientVector.from_parts([("lora_A.0", [1.0]), ("head_g.weight", [2.0]), ("lora_B.0", [3.0])])
    assert g.restrict(is_shared_segment).values.tolist() == [1.0, 3.0]
    assert g.restrict(["head_g.weight"]).values.tolist() == [2.0]


def test_mismatched_segments_cannot_mix():
    a = GradientVector.from_parts([("x", [1.0, 2.0])])
    b = GradientVector.from_parts([("y", [1.0, 2.0])])
    with pytest.raises(DomainError):
        a + b
    with pytest.raises(DomainError):
        a.dot(b)


@settings(max_examples=50)
@given(arrays(np.float64, st.integers(1, 40), elements=finite))
def test_cached_norm_matches_recomputed(values):
    g = GradientVector(values, {"all": (0, values.size)})
    assert g.norm == pytest.approx(float(np.sqrt(np.sum(values**2))), rel=1e-12, abs=1e-300)


@settings(max_examples=50)
@given(arrays(np.float64, 6, elements=finite), arrays(np.float64, 6, elements=finite), st.floats(-10, 10))
def test_arithmetic_is_coordinatewise(a, b, k):
    seg = {"p": (0, 3), "q": (3, 6)}
    ga, gb = GradientVector(a, seg), GradientVector(b, seg)
    assert np.array_equal((ga + gb).values, a + b)
    assert np.array_equal((ga - gb).values, a - b)
    assert np.array_equal((k * ga).values, a * k)
    assert (ga + gb).segments == seg
