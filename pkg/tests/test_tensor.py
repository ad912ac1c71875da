import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cmedit import tensor as T


def reference_splitmix64(seed, n):
    # textbook splitmix64, written independently of the package
    out, x = [], seed
    for _ in range(n):
        x = (x + 0x9E3779B97F4A7C15) % 2**64
        z = x
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) % 2**64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) % 2**64
        out.append(z ^ (z >> 31))
    return out


def test_splitmix64_seed0_first_output():
    assert reference_splitmix64(0, 1)[0] == 0xE220A8397B1DCDAF
    assert T.Rng(0).next_u64() == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**64 - 1, 0xDEADBEEF])
def test_vectorised_stream_matches_reference(seed):
    ref = reference_splitmix64(seed, 17)
    rng = T.Rng(seed)
    assert [int(v) for v in rng.next_u64_array(10)] == ref[:10]
    assert [rng.next_u64() for _ in range(7)] == ref[10:]


def test_sample_normal_is_box_muller_over_stream():
    raw = reference_splitmix64(9, 2)
    u1 = ((raw[0] >> 11) + 1) * 2.0**-53
    u2 = (raw[1] >> 11) * 2.0**-53
    r = math.sqrt(-2 * math.log(u1))
    expected = np.float32([r * math.cos(2 * math.pi * u2), r * math.sin(2 * math.pi * u2)])
    np.testing.assert_array_equal(T.sample_normal(T.Rng(9), (2,)), expected)


def test_same_seed_same_tensor_bitwise():
    a = T.sample_normal(T.Rng(123), (4, 5, 6))
    b = T.sample_normal(T.Rng(123), (4, 5, 6))
    assert a.dtype == np.float32
    assert a.tobytes() == b.tobytes()


def test_million_draws_moments():
    x = T.sample_normal(T.Rng(42), (10**6,)).astype(np.float64)
    assert abs(x.mean()) < 0.01
    assert abs(x.var() - 1) < 0.01


@given(st.integers(0, 2**64 - 1), st.lists(st.integers(1, 9), min_size=1, max_size=5))
def test_split_draws_equal_one_draw(seed, sizes):
    # the pending Box-Muller value carries across calls
    rng = T.Rng(seed)
    parts = np.concatenate([T.sample_normal(rng, (n,)) for n in sizes])
    whole = T.sample_normal(T.Rng(seed), (sum(sizes),))
    assert parts.tobytes() == whole.tobytes()


@pytest.mark.parametrize("shape", [(0,), (3, 0), ()])
def test_zero_extent_rejected(shape):
    with pytest.raises(T.InvalidShapeError):
        T.sample_normal(T.Rng(0), shape)


def test_nonfinite_rejected():
    with pytest.raises(T.NonFiniteError):
        T.as_tensor([1.0, float("nan")])


# softmax ---------------------------------------------------------------------


def test_softmax_uniform_row():
    np.testing.assert_allclose(T.softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-7)


def test_softmax_rows_sum_to_one_1000_rows():
    gen = np.random.default_rng(0)
    for _ in range(10):
        width = int(gen.integers(1, 513))
        x = gen.normal(scale=gen.uniform(0.1, 30), size=(100, width)).astype(np.float32)
        p = T.softmax_rows(x)
        assert (p >= 0).all()
        assert np.abs(p.astype(np.float64).sum(axis=1) - 1).max() <= 1e-6


@given(
    arrays(np.float32, st.tuples(st.integers(1, 6), st.integers(1, 40)), elements=st.floats(-50, 50, width=32)),
    st.floats(-100, 100, width=32),
)
def test_softmax_shift_invariant(x, c):
    np.testing.assert_allclose(T.softmax_rows(x), T.softmax_rows(x + np.float32(c)), atol=1e-6)


def test_softmax_needs_rank2():
    with pytest.raises(T.InvalidShapeError):
        T.softmax_rows(np.zeros(3))


# cosine distance ---------------------------------------------------------------


def test_cosine_distance_basics():
    u = np.array([1.0, 2.0, 3.0], np.float32)
    assert T.cosine_distance(u, u) == pytest.approx(0.0, abs=1e-12)
    assert T.cosine_distance(u, 2 * u) == pytest.approx(0.0, abs=1e-12)
    assert T.cosine_distance([1, 0], [0, 1]) == 1.0
    assert T.cosine_distance([1, 0], [-1, 0]) == 2.0


def test_cosine_distance_zero_vector_is_neutral():
    assert T.cosine_distance([0, 0, 0], [1, 2, 3]) == 1.0


def test_cosine_distance_symmetric_and_scale_invariant():
    gen = np.random.default_rng(1)
    for _ in range(1000):
        n = int(gen.integers(1, 64))
        u, v = gen.normal(size=(2, n))
        s = gen.uniform(0.01, 100)
        d = T.cosine_distance(u, v)
        assert 0 <= d <= 2
        assert abs(d - T.cosine_distance(v, u)) <= 1e-6
        assert abs(d - T.cosine_distance(s * u, v)) <= 1e-6


# contract ops --------------------------------------------------------------------


def test_matmul_shape_and_associativity():
    gen = np.random.default_rng(2)
    a, b, c = (gen.normal(size=s).astype(np.float32) for s in [(3, 4), (4, 5), (5, 2)])
    left = T.matmul(T.matmul(a, b), c)
    right = T.matmul(a, T.matmul(b, c))
    assert left.shape == (3, 2) and left.dtype == np.float32
    np.testing.assert_allclose(left, right, atol=1e-5)
    with pytest.raises(T.InvalidShapeError):
        T.matmul(a, c)


def test_elementwise_ops():
    a = np.array([1.0, 2.0, 3.0], np.float32)
    b = np.array([0.5, -1.0, 2.0], np.float32)
    np.testing.assert_array_equal(T.add(a, b), [1.5, 1.0, 5.0])
    np.testing.assert_array_equal(T.mul(a, b), [0.5, -2.0, 6.0])
    np.testing.assert_array_equal(T.scale(a, 2), [2.0, 4.0, 6.0])
    np.testing.assert_array_equal(T.add(T.add(a, b), a), T.add(a, T.add(b, a)))


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 1))
def test_concat_then_slice_recovers_parts(na, nb, w, axis):
    gen = np.random.default_rng(na * 100 + nb * 10 + w)
    shape_a = (na, w) if axis == 0 else (w, na)
    shape_b = (nb, w) if axis == 0 else (w, nb)
    a = gen.normal(size=shape_a).astype(np.float32)
    b = gen.normal(size=shape_b).astype(np.float32)
    c = T.concat([a, b], axis=axis)
    np.testing.assert_array_equal(T.slice_axis(c, axis, 0, na), a)
    np.testing.assert_array_equal(T.slice_axis(c, axis, na, na + nb), b)


def test_mean_axis():
    x = np.arange(12, dtype=np.float32).reshape(3, 4)
    np.testing.assert_array_equal(T.mean_axis(x, 0), [4, 5, 6, 7])
    assert T.mean_axis(x, 1).shape == (3,)


# CMVE container --------------------------------------------------------------------


def test_cmve_layout():
    t = np.array([[1.0, -2.0, 0.5]], np.float32)
    buf = T.dumps_tensor(t)
    expected = b"CMVE" + struct.pack("<HH", 1, 2) + struct.pack("<QQ", 1, 3) + struct.pack("<3f", 1.0, -2.0, 0.5)
    assert buf == expected


def test_cmve_round_trip(tmp_path):
    t = T.sample_normal(T.Rng(5), (2, 3, 4))
    T.save_tensor(tmp_path / "x.cmve", t)
    back = T.load_tensor(tmp_path / "x.cmve")
    assert back.tobytes() == t.tobytes() and back.shape == t.shape


@pytest.mark.parametrize(
    "buf",
    [
        b"XXXX" + struct.pack("<HH", 1, 1) + struct.pack("<Q", 1) + b"\0" * 4,
        b"CMVE" + struct.pack("<HH", 2, 1) + struct.pack("<Q", 1) + b"\0" * 4,
        b"CMVE" + struct.pack("<HH", 1, 1) + struct.pack("<Q", 2) + b"\0" * 4,
    ],
)
def test_cmve_rejects_bad_files(buf):
    with pytest.raises(T.ContainerError):
        T.loads_tensor(buf)
