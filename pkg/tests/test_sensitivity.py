import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from repstab.errors import DegenerateDenominator, ShapeMismatch
from repstab.importance import ImportanceProfile, Method, compute_importance
from repstab.sensitivity import (
    FeatureTensor,
    SensitivityTrace,
    build_feature_tensor,
    instability_ratio,
    is_degenerate,
    profile_text,
    rank_words,
    select_top_k,
    sensitivity_score,
)


def _trace(values):
    values = np.asarray(values, float)
    return SensitivityTrace(list(range(len(values))), values, np.ones(2))


# -- top-k -------------------------------------------------------------


def test_top_k_ties_prefer_lower_index():
    assert select_top_k([0.3, 0.1, 0.3, 0.2], 2) == [0, 2]
    assert rank_words([0.3, 0.1, 0.3, 0.2]) == [0, 2, 3, 1]


def test_top_k_larger_than_n():
    assert select_top_k([0.1, 0.5], 20) == [0, 1]


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from([0.0, 0.1, 0.2, 0.5, 1.0]), min_size=1, max_size=12), st.integers(1, 14))
def test_top_k_matches_full_sort(scores, k):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    assert select_top_k(scores, k) == sorted(order[:k])


def test_top_k_rejects_zero():
    with pytest.raises(ValueError):
        select_top_k([1.0], 0)


# -- cosine sensitivity ------------------------------------------------


def test_cosine_distance_anchor_values():
    e = np.array([1.0, 0.0])
    assert sensitivity_score(e, e) == 0.0
    assert sensitivity_score(e, np.array([0.0, 3.0])) == pytest.approx(1.0)
    assert sensitivity_score(e, -2 * e) == pytest.approx(2.0)


def test_cosine_degenerate_norm():
    e = np.array([1.0, 2.0])
    z = np.zeros(2)
    assert sensitivity_score(e, z) == 0.0 and is_degenerate(e, z)
    assert not is_degenerate(e, e)


def test_cosine_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        sensitivity_score(np.ones(2), np.ones(3))


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
    arrays(np.float64, 6, elements=st.floats(-1e3, 1e3)),
    st.floats(1e-3, 1e3),
)
def test_cosine_range_and_scale_invariance(a, b, c):
    s = sensitivity_score(a, b)
    assert 0.0 <= s <= 2.0
    if not is_degenerate(a, b) and not is_degenerate(c * a, b):
        assert sensitivity_score(c * a, b) == pytest.approx(s, abs=1e-9)


# -- profiling ---------------------------------------------------------


def test_profile_subset_consistency(stub):
    text = stub.tokenize("The awful film was a dull and boring mess overall")
    prof = compute_importance(stub, text, Method.GRADIENT)
    full = profile_text(stub, text, prof, k=text.n_words)
    part = profile_text(stub, text, prof, k=3)
    assert len(part.selected) == 3
    np.testing.assert_allclose(part.selected_values(), full.sensitivities[part.selected], atol=1e-9)
    off = np.setdiff1d(np.arange(text.n_words), part.selected)
    assert np.all(part.sensitivities[off] == 0)


def test_profile_length_mismatch(stub):
    text = stub.tokenize("two words")
    with pytest.raises(ShapeMismatch):
        profile_text(stub, text, ImportanceProfile(Method.RANDOM, [1.0]), k=1)


def test_feature_tensor_sparsity_and_round_trip(stub):
    text = stub.tokenize("The awful film was a dull mess")
    prof = compute_importance(stub, text, Method.ROLLOUT)
    trace = profile_text(stub, text, prof, k=2)
    Z = build_feature_tensor(text, prof, trace)
    assert Z.length == text.n_words
    nonzero_rows = set(np.flatnonzero(np.abs(Z.Z).sum(1)))
    assert nonzero_rows <= set(trace.selected)
    np.testing.assert_allclose(Z.Z[trace.selected, 1], prof.scores[trace.selected])
    back = FeatureTensor.from_json(Z.to_json())
    assert np.array_equal(back.Z, Z.Z)


def test_feature_tensor_validation():
    with pytest.raises(ShapeMismatch):
        FeatureTensor(np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        FeatureTensor.from_columns([1.0], [1.0, 2.0])


# -- instability ratio -------------------------------------------------


def test_instability_ratio_rounded_means():
    benign = [_trace([0.01, 0.01]), _trace([0.01])]
    adv = [_trace([0.02, 0.02, 0.02])]
    assert instability_ratio(benign, adv) == pytest.approx(2.0)
    # 0.028 / 0.014 of rounded reported means
    assert instability_ratio([_trace([0.014])], [_trace([0.028])]) == pytest.approx(2.0)


def test_instability_ratio_identical_collections():
    t = [_trace([0.3, 0.1]), _trace([0.2])]
    assert instability_ratio(t, t) == pytest.approx(1.0)


def test_instability_ratio_pools_values_not_texts():
    benign = [_trace([0.1]), _trace([0.1, 0.1, 0.1])]
    adv = [_trace([0.4]), _trace([0.0, 0.0, 0.0])]
    assert instability_ratio(benign, adv) == pytest.approx(1.0)


def test_instability_ratio_zero_denominator():
    with pytest.raises(DegenerateDenominator):
        instability_ratio([_trace([0.0])], [_trace([0.5])])


def test_instability_ratio_empty():
    with pytest.raises(ValueError):
        instability_ratio([], [_trace([0.5])])


def test_selected_values_only_selected():
    tr = SensitivityTrace([1], np.array([0.0, 0.7, 0.0]), np.ones(2))
    assert tr.selected_values().tolist() == [0.7]
    assert list(itertools.chain(tr.selected)) == [1]
