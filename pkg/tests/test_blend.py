import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cmedit.blend import BlendMask, blend_latents, compute_blend_map, edited_ratio
from cmedit.control import align_prompts
from cmedit.tensor import softmax_rows

INSERT = align_prompts(["a", "cat"], ["a", "red", "cat"])  # edited = {1}
SAME = align_prompts(["a", "cat"], ["a", "cat"])


def maps(n=3, P=16, k=3, seed=0):
    gen = np.random.default_rng(seed)
    return [softmax_rows(gen.normal(scale=2.0, size=(P, k)).astype(np.float32)) for _ in range(n)]


def test_all_mass_on_edited_tokens_gives_full_mask():
    A = np.zeros((4, 3), np.float32)
    A[:, 1] = 1
    for thresh in (0.0, 0.5, 1.0):
        assert compute_blend_map([A], INSERT, thresh, (2, 2)).mask.min() == 1


def test_zero_threshold_gives_full_mask():
    assert compute_blend_map(maps(), INSERT, 0.0, (4, 4)).density == 1.0


def test_empty_edited_set_warns_and_is_all_zero():
    with pytest.warns(RuntimeWarning, match="no edited tokens"):
        m = compute_blend_map(maps(k=2), SAME, 0.3, (4, 4), upsample=2)
    assert m.mask.shape == (8, 8, 1) and m.density == 0.0


def test_ratio_by_hand():
    A = np.array([[0.2, 0.6, 0.2], [0.5, 0.1, 0.4]], np.float32)
    np.testing.assert_allclose(edited_ratio(A, [1]), [0.6, 0.1], rtol=1e-6)
    m = compute_blend_map([A], INSERT, 0.3, (1, 2))
    assert m.mask[..., 0].tolist() == [[1.0, 0.0]]


def test_aligned_token_switch_flips_numerator():
    A = np.array([[0.2, 0.6, 0.2], [0.5, 0.1, 0.4]], np.float32)
    m = compute_blend_map([A], INSERT, 0.5, (1, 2), tokens="aligned")
    assert m.mask[..., 0].tolist() == [[0.0, 1.0]]


def test_nearest_upsampling():
    A = np.array([[0, 1, 0], [1, 0, 0], [1, 0, 0], [0, 1, 0]], np.float32)
    m = compute_blend_map([A], INSERT, 0.5, (2, 2), upsample=2).mask[..., 0]
    np.testing.assert_array_equal(m, np.kron([[1, 0], [0, 1]], np.ones((2, 2))))


def test_averaging_order_independent():
    ms = maps(n=6, P=64, seed=3)
    ref = compute_blend_map(ms, INSERT, 0.3, (8, 8)).mask
    gen = np.random.default_rng(0)
    for _ in range(10):
        perm = gen.permutation(len(ms))
        assert compute_blend_map([ms[i] for i in perm], INSERT, 0.3, (8, 8)).mask.tobytes() == ref.tobytes()


def test_density_monotone_in_threshold():
    ms = maps(n=4, P=64, seed=5)
    dens = [compute_blend_map(ms, INSERT, t, (8, 8)).density for t in np.linspace(0, 1, 41)]
    assert all(a >= b for a, b in zip(dens, dens[1:]))
    assert dens[0] == 1.0


def test_map_errors():
    with pytest.raises(ValueError):
        compute_blend_map([], INSERT, 0.3, (2, 2))
    with pytest.raises(ValueError):
        compute_blend_map([np.ones((4, 3)), np.ones((5, 3))], INSERT, 0.3, (2, 2))
    with pytest.raises(ValueError):
        compute_blend_map([np.ones((4, 3))], INSERT, 0.3, (3, 2))


# splicing -------------------------------------------------------------------------


def latents(seed=0):
    gen = np.random.default_rng(seed)
    return gen.normal(size=(2, 4, 4, 6)).astype(np.float32)


def test_blend_endpoints():
    ze, zb = latents()
    ones, zeros = np.ones((4, 4, 1), np.float32), np.zeros((4, 4, 1), np.float32)
    assert blend_latents(ze, zb, ones).tobytes() == ze.tobytes()
    assert blend_latents(ze, zb, zeros).tobytes() == zb.tobytes()


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1))
def test_partition_and_idempotence(seed):
    ze, zb = latents(seed)
    M = (np.random.default_rng(seed).random((4, 4, 1)) < 0.5).astype(np.float32)
    out = blend_latents(ze, zb, BlendMask(M, 1, 0.3))
    on = np.broadcast_to(M, ze.shape) == 1
    assert np.abs(out - ze)[on].max(initial=0) == 0
    assert np.abs(out - zb)[~on].max(initial=0) == 0
    assert blend_latents(out, zb, M).tobytes() == out.tobytes()


def test_blend_shape_errors():
    ze, zb = latents()
    with pytest.raises(ValueError):
        blend_latents(ze, zb[:2], np.ones((4, 4, 1)))
    with pytest.raises(ValueError):
        blend_latents(ze, zb, np.ones((3, 4, 1)))


def test_no_warning_with_edited_tokens():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        compute_blend_map(maps(), INSERT, 0.3, (4, 4))
