import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stan.errors import ModeError, ParseError, SingularityError
from stan.transform import (Mode, ParamVec, build_affine_theta, build_affine_theta_backward,
                            build_attention_theta, build_attention_theta_backward, build_theta,
                            compose, embed_attention, format_theta, identity, invert,
                            parse_theta, translation)

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def test_affine_examples():
    np.testing.assert_array_equal(build_affine_theta(np.zeros(12)), np.eye(4))
    p = np.zeros(12)
    p[3] = 0.25
    expected = np.eye(4)
    expected[0, 3] = 0.25
    np.testing.assert_array_equal(build_affine_theta(p), expected)
    np.testing.assert_allclose(build_affine_theta(np.full(12, 0.1)), [
        [1.1, 0.1, 0.1, 0.1], [0.1, 1.1, 0.1, 0.1], [0.1, 0.1, 1.1, 0.1], [0, 0, 0, 1]])


def test_attention_examples():
    np.testing.assert_array_equal(build_attention_theta(np.zeros(6)), np.eye(4))
    np.testing.assert_array_equal(build_attention_theta([1.0, 0, 0, 0, 0, 0]),
                                  np.diag([2.0, 1, 1, 1]))
    m = build_attention_theta([0.1, 0.2, 0.3, 0.4, 0.5, 0.6])
    np.testing.assert_allclose(m, [[1.1, 0, 0, 0.4], [0, 1.2, 0, 0.5], [0, 0, 1.3, 0.6],
                                   [0, 0, 0, 1]])


def test_embed_leaves_off_diagonals_zero():
    e = embed_attention(np.arange(1.0, 7.0))
    assert e[[1, 2, 4, 6, 8, 9]].tolist() == [0.0] * 6
    assert e[[0, 5, 10, 3, 7, 11]].tolist() == [1, 2, 3, 4, 5, 6]


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 6, elements=finite))
def test_attention_is_embedded_affine(p):
    assert np.array_equal(build_attention_theta(p), build_affine_theta(embed_attention(p)))


def test_batched_builders_match_single():
    p = np.random.default_rng(0).standard_normal((5, 12))
    batch = build_affine_theta(p)
    assert batch.shape == (5, 4, 4)
    for i in range(5):
        np.testing.assert_array_equal(batch[i], build_affine_theta(p[i]))


def test_builder_backward_picks_entries():
    d = np.arange(16.0).reshape(4, 4)
    np.testing.assert_array_equal(build_affine_theta_backward(d), np.arange(12.0))
    np.testing.assert_array_equal(build_attention_theta_backward(d), [0, 5, 10, 3, 7, 11])


def test_wrong_length_is_mode_error():
    with pytest.raises(ModeError):
        build_affine_theta(np.zeros(6))
    with pytest.raises(ModeError):
        build_attention_theta(np.zeros(12))
    with pytest.raises(ModeError):
        ParamVec("attention", np.zeros(12))
    with pytest.raises(ValueError):
        build_theta("homography", np.zeros(8))


def test_paramvec():
    pv = ParamVec("affine", np.zeros(12))
    assert pv.mode is Mode.AFFINE and Mode.AFFINE.dof == 12 and Mode.ATTENTION.dof == 6
    np.testing.assert_array_equal(pv.theta(), np.eye(4))
    with pytest.raises(ModeError):
        build_attention_theta(pv)


def test_compose_examples():
    x = build_affine_theta(np.random.default_rng(1).standard_normal(12) * 0.3)
    np.testing.assert_array_equal(compose(identity(), x), x)
    np.testing.assert_allclose(compose(translation(x=0.1), translation(x=0.2)),
                               translation(x=0.3), atol=1e-15)
    np.testing.assert_allclose(compose(x, invert(x)), np.eye(4), atol=1e-10)


def test_compose_order():
    a, b = translation(t=1.0), np.diag([2.0, 1, 1, 1])
    v = np.array([1.0, 0, 0, 1])
    np.testing.assert_array_equal(compose(a, b) @ v, a @ (b @ v))


def test_invert_examples():
    np.testing.assert_array_equal(invert(np.eye(4)), np.eye(4))
    np.testing.assert_array_equal(invert(np.diag([2.0, 1, 1, 1])), np.diag([0.5, 1, 1, 1]))
    with pytest.raises(SingularityError):
        invert(np.diag([1e-12, 1, 1, 1]))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 12, elements=st.floats(-0.4, 0.4)))
def test_invert_round_trip(p):
    m = build_affine_theta(p)
    np.testing.assert_allclose(compose(invert(m), m), np.eye(4), atol=1e-10)


def test_theta_text_round_trip():
    m = build_affine_theta(np.random.default_rng(2).standard_normal(12))
    assert np.array_equal(parse_theta(format_theta(m)), m)


@pytest.mark.parametrize("text", ["1 0 0 0 0 1 0 0 0 0 1 0 0 0 0",
                                  "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 1 0",
                                  "1 0 0 0 0 1 0 0 0 0 1 0 0 0 0 x",
                                  "1 0 0 0 0 1 0 0 0 0 1 0 0 0 1 1"])
def test_parse_theta_rejects(text):
    with pytest.raises(ParseError):
        parse_theta(text)
