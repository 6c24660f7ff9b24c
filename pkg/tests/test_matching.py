import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from kvmerge.errors import InfeasibleRemovalError, ShapeError
from kvmerge.matching import (
    FdMetric,
    alternating_split,
    build_plan_bipartite,
    build_plan_pairwise,
    comparison_count,
    fd_matrix,
    feature_divergence,
    removal_count,
)

import oracles

METRICS = list(FdMetric)
vectors = hnp.arrays(
    np.float32, st.integers(1, 8).map(lambda d: (d,)),
    elements=st.floats(-100, 100, width=32).filter(lambda x: abs(x) > 1e-3),
)


def test_cosine_examples():
    assert feature_divergence([1, 0], [1, 0]) == pytest.approx(0, abs=1e-7)
    assert feature_divergence([1, 0], [0, 1]) == pytest.approx(1, abs=1e-7)
    assert feature_divergence([1, 0], [-1, 0]) == pytest.approx(2, abs=1e-7)
    assert feature_divergence([1, 1], [1, 0]) == pytest.approx(1 - 1 / math.sqrt(2), abs=1e-7)


def test_distance_metrics():
    assert feature_divergence([0, 0], [3, 4], "euclidean") == pytest.approx(5.0)
    assert feature_divergence([0, 0], [3, 4], "l2sq") == pytest.approx(25.0)


def test_zero_vector_cosine_uses_floor():
    assert feature_divergence([0, 0], [1, 0]) == 1.0


def test_dimension_mismatch():
    with pytest.raises(ShapeError):
        feature_divergence([1, 0], [1, 0, 0])


@given(vectors, st.sampled_from(METRICS))
def test_fd_self_zero(x, metric):
    assert abs(feature_divergence(x, x, metric)) < 1e-7 * max(1.0, float(np.dot(x, x)) if metric is FdMetric.L2_SQUARED else 1.0)


@given(st.integers(1, 6).flatmap(lambda d: st.tuples(
    hnp.arrays(np.float32, (d,), elements=st.floats(-10, 10, width=32).filter(lambda x: abs(x) > 1e-2)),
    hnp.arrays(np.float32, (d,), elements=st.floats(-10, 10, width=32).filter(lambda x: abs(x) > 1e-2)),
)), st.sampled_from(METRICS))
def test_fd_symmetric(xy, metric):
    x, y = xy
    a, b = feature_divergence(x, y, metric), feature_divergence(y, x, metric)
    assert abs(a - b) <= 1e-7 * max(1.0, abs(a))


@given(st.integers(1, 6).flatmap(lambda d: st.tuples(
    hnp.arrays(np.float32, (d,), elements=st.floats(-10, 10, width=32).filter(lambda x: abs(x) > 1e-2)),
    hnp.arrays(np.float32, (d,), elements=st.floats(-10, 10, width=32).filter(lambda x: abs(x) > 1e-2)),
)), st.floats(1e-3, 1e3))
def test_cosine_scale_invariant(xy, c):
    x, y = xy
    base = feature_divergence(x, y)
    assert abs(feature_divergence(x * np.float32(c), y) - base) < 1e-6
    assert abs(feature_divergence(x, y * np.float32(c)) - base) < 1e-6


def test_alternating_split():
    assert alternating_split(["t1", "t2", "t3", "t4", "t5", "t6"]) == (["t1", "t3", "t5"], ["t2", "t4", "t6"])
    assert alternating_split(["t1"]) == (["t1"], [])
    assert alternating_split(["t1", "t2", "t3", "t4", "t5"]) == (["t1", "t3", "t5"], ["t2", "t4"])


def test_bipartite_worked_example():
    x = np.array([[1, 0], [1, 0.1], [0, 1], [-1, 0]], dtype=np.float32)  # a1 b1 a2 b2
    fd = fd_matrix(x[[0, 2]], x[[1, 3]], "cosine")
    np.testing.assert_allclose(fd[:, 0], [1 - 1 / math.sqrt(1.01), 1 - 0.1 / math.sqrt(1.01)], atol=1e-6)
    plan = build_plan_bipartite(x, [0, 2], [1, 3], "cosine", 1)
    assert plan.edges == ((0, 1),)
    assert plan.removed == {0}
    assert plan.kept_order == (1, 2, 3)
    assert plan.edge_fd[0] == pytest.approx(0.00496, abs=1e-5)


def test_bipartite_noop():
    x = np.eye(4, dtype=np.float32)
    plan = build_plan_bipartite(x, [0, 2], [1, 3], "cosine", 0)
    assert plan.edges == () and plan.kept_order == (0, 1, 2, 3)


def test_bipartite_all_to_one_destination():
    x = np.array([[1, 0], [1, 0], [1, 0], [0, 1], [1, 0]], dtype=np.float32)
    a, b = [0, 2, 4], [1, 3]
    plan = build_plan_bipartite(x, a, b, "cosine", 3)
    assert {dst for _, dst in plan.edges} == {1}
    assert plan.kept_order == (1, 3)


def test_bipartite_infeasible():
    x = np.eye(3, dtype=np.float32)
    with pytest.raises(InfeasibleRemovalError):
        build_plan_bipartite(x, [0, 2], [1], "cosine", 3)
    with pytest.raises(InfeasibleRemovalError):
        build_plan_bipartite(x[:1], [0], [], "cosine", 1)


def test_pairwise_examples():
    assert build_plan_pairwise(np.eye(2, dtype=np.float32), "cosine", 1).edges == ((0, 1),)
    same = build_plan_pairwise(np.ones((4, 3), dtype=np.float32), "l2sq", 2)
    assert same.edges == ((0, 1), (2, 3))
    x = np.array([[1, 0], [1, 0.01], [0, 1], [0, 1.01]], dtype=np.float32)
    plan = build_plan_pairwise(x, "cosine", 2)
    assert sorted(plan.edges) == [(0, 1), (2, 3)]
    assert plan.kept_order == (1, 3)
    with pytest.raises(InfeasibleRemovalError):
        build_plan_pairwise(x, "cosine", 3)


def test_comparison_counts():
    assert comparison_count(8, "pairwise") == 28 and comparison_count(8, "bipartite") == 16
    assert comparison_count(2, "pairwise") == 1 and comparison_count(2, "bipartite") == 1
    assert comparison_count(512, "pairwise") == 130_816
    assert comparison_count(512, "bipartite") == 65_536
    assert comparison_count(1, "pairwise") == 0


def test_removal_count_rules():
    assert removal_count(36, 0.5, 18) == 18
    assert removal_count(36, 0.5, 18, "half-pairs") == 9
    assert removal_count(7, 0.5, 4) == 3
    assert removal_count(10, 0.29, 5) == 2
    assert removal_count(100, 0.29, 50) == 29


window = st.integers(1, 12).flatmap(
    lambda v: st.tuples(
        hnp.arrays(np.float32, (v, 4), elements=st.floats(-5, 5, width=32)),
        st.integers(0, (v + 1) // 2),
    )
)


@given(window, st.sampled_from(METRICS))
@settings(max_examples=100)
def test_bipartite_plan_validity(win, metric):
    x, r = win
    a, b = alternating_split(range(len(x)))
    if r > 0 and not b:
        r = 0
    plan = build_plan_bipartite(x, a, b, metric, r)
    assert plan.r == len(plan.removed) == r
    assert len(plan.kept_order) == len(x) - r
    assert list(plan.kept_order) == sorted(plan.kept_order)
    assert build_plan_bipartite(x, a, b, metric, r) == plan


def test_bipartite_ties_break_low_index():
    x = np.array([[0, 0], [1, 0], [0, 0], [1, 0]], dtype=np.float32)
    # both A tokens are equidistant from both B tokens under l2sq
    plan = build_plan_bipartite(x, [0, 2], [1, 3], "l2sq", 1)
    assert plan.edges == ((0, 1),)
    assert oracles.bipartite_plan(x.tolist(), "l2sq", 1) == [(0, 1)]
