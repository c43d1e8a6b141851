import numpy as np
import pytest

from gapfill import embedding as E
from gapfill import numerics as N
from gapfill.errors import ConfigError


def brute_stats(values, mask):
    """Independent reference: selection stats by enumeration, centered OLS."""
    pts = [(i, v) for i, (v, m) in enumerate(zip(values, mask)) if m > 0]
    if not pts:
        return np.zeros(4)
    ys = sorted(v for _, v in pts)
    n = len(ys)
    med = ys[(n - 1) // 2] if n % 2 else 0.5 * (ys[n // 2 - 1] + ys[n // 2])
    if n < 2:
        slope = 0.0
    else:
        tbar = sum(t for t, _ in pts) / n
        ybar = sum(v for _, v in pts) / n
        den = sum((t - tbar) ** 2 for t, _ in pts)
        slope = sum((t - tbar) * (v - ybar) for t, v in pts) / den
    return np.array([min(ys), med, max(ys), slope])


class TestPatchify:
    def test_counts(self):
        ps = E.patchify(np.zeros(96), np.ones(96), 16)
        assert ps.values.shape == (6, 16)
        np.testing.assert_array_equal(ps.ratios, np.zeros(6))

    def test_ratio(self):
        ps = E.patchify(np.zeros(4), np.array([1.0, 1, 0, 0]), 4)
        assert ps.ratios[0] == 0.5

    def test_indivisible_rejected(self):
        with pytest.raises(ConfigError):
            E.patchify(np.zeros(10), np.ones(10), 3)

    def test_patch_boundaries(self):
        vals = np.arange(8.0)
        ps = E.patchify(vals, np.ones(8), 4)
        np.testing.assert_array_equal(ps.values[1], [4, 5, 6, 7])


class TestStats:
    def test_fully_observed_ramp(self):
        out = E.patch_stats(np.array([1.0, 2, 3, 4]), np.ones(4))
        np.testing.assert_allclose(out, [1, 2.5, 4, 1.0])

    def test_constant(self):
        out = E.patch_stats(np.full(5, 7.0), np.ones(5))
        np.testing.assert_allclose(out, [7, 7, 7, 0])

    def test_fully_masked(self):
        np.testing.assert_array_equal(E.patch_stats(np.arange(4.0), np.zeros(4)), np.zeros(4))

    def test_single_point_slope_zero(self):
        mask = np.zeros(6)
        mask[3] = 1
        out = E.patch_stats(np.arange(6.0) * 2, mask)
        np.testing.assert_allclose(out, [6, 6, 6, 0])

    def test_series_ramp(self):
        out = E.series_stats(np.arange(96.0), np.ones(96))
        np.testing.assert_allclose(out, [0, 47.5, 95, 1.0])

    def test_two_endpoints(self):
        mask = np.zeros(96)
        mask[0] = mask[95] = 1
        vals = np.zeros(96)
        vals[95] = 95.0
        out = E.series_stats(vals, mask)
        np.testing.assert_allclose(out, [0, 47.5, 95, 1.0])

    def test_even_count_median_is_midpoint(self):
        out = E.patch_stats(np.array([1.0, 9.0, 3.0, 5.0]), np.ones(4))
        assert out[1] == 4.0

    @pytest.mark.parametrize("chunk", range(10))
    def test_equals_brute_force_on_1000_random_pairs(self, chunk):
        rng = np.random.default_rng(1000 + chunk)
        for _ in range(100):
            p = int(rng.integers(1, 24))
            vals = rng.standard_normal(p) * rng.uniform(0.1, 10)
            mask = (rng.random(p) > rng.uniform(0, 0.9)).astype(float)
            mine = E.patch_stats(vals, mask)
            ref = brute_stats(vals, mask)
            # selection statistics are bit-exact; the slope matches the
            # independent formula to float resolution
            assert mine[0] == ref[0] and mine[2] == ref[2]
            np.testing.assert_allclose(mine[1], ref[1], rtol=0, atol=0)
            np.testing.assert_allclose(mine[3], ref[3], rtol=1e-10, atol=1e-12)


def make_params(seed=0, P=4, D=8, domains=None):
    return E.init_embedding(np.random.default_rng(seed), P, D, domains, dtype=np.float64)


class TestEmbedInput:
    def test_sequence_layout(self):
        params = make_params()
        out = E.embed_input(params, np.zeros(12), np.ones(12), 4)
        assert out.data.shape == (3 + 2, 8)

    def test_fully_observed_has_no_missing_component(self):
        params = make_params(1)
        rng = np.random.default_rng(2)
        vals = rng.standard_normal(12)
        base = E.embed_input(params, vals, np.ones(12), 4).data.copy()
        params.missing.data[:] = rng.standard_normal(8)
        again = E.embed_input(params, vals, np.ones(12), 4).data
        np.testing.assert_array_equal(base, again)

    def test_fully_missing_patch_reduces_to_zero_projection(self):
        params = make_params(3)
        params.missing.data[:] = 0.0
        vals = np.zeros(12)
        mask = np.ones(12)
        mask[4:8] = 0
        out = E.embed_input(params, vals, mask, 4).data
        zero_proj = params.patch_b.data + params.stats_b.data
        np.testing.assert_allclose(out[3], zero_proj, atol=1e-12)

    def test_single_extra_missing_point_changes_only_that_patch_token(self):
        params = make_params(4, P=16)
        rng = np.random.default_rng(5)
        vals = rng.standard_normal(96)
        mask = np.ones(96)
        a = E.embed_input(params, vals, mask, 16).data
        # direct construction of the second sequence: same values, one more
        # missing point inside patch 3
        mask2 = mask.copy()
        mask2[3 * 16 + 7] = 0
        vals2 = vals * mask2
        b = E.embed_input(params, vals2, mask2, 16).data
        changed = [t for t in range(a.shape[0]) if not np.array_equal(a[t], b[t])]
        assert changed == [2 + 3] or changed == [1, 2 + 3]
        # global stats token may change (window stats see the point drop);
        # every other patch token must be identical
        for t in range(2, a.shape[0]):
            if t != 2 + 3:
                np.testing.assert_array_equal(a[t], b[t])

    def test_missing_token_linearity_bit_exact_with_zero_base(self):
        params = make_params(6)
        for name in ("patch_w", "patch_b", "stats_w", "stats_b"):
            getattr(params, name).data[:] = 0.0
        vals = np.zeros(12)
        full = E.embed_input(params, vals, np.zeros(12), 4).data  # every ratio 1
        none = E.embed_input(params, vals, np.ones(12), 4).data  # every ratio 0
        diff = full[2] - none[2]
        assert diff.tobytes() == params.missing.data.tobytes()

    def test_gradient_reaches_missing_vector_only_when_masked(self):
        params = make_params(7)
        vals = np.zeros((2, 12))
        mask = np.ones((2, 12))

        def loss(m):
            out = E.embed_batch(params, vals, m, 4, np.zeros(2, dtype=int))
            return N.tsum(N.square(out))

        params.missing.zero_grad()
        N.backward(loss(mask))
        assert params.missing.grad is None or not params.missing.grad.any()

        mask2 = mask.copy()
        mask2[0, :4] = 0
        params.missing.zero_grad()
        N.backward(loss(mask2))
        assert params.missing.grad is not None and params.missing.grad.any()

    def test_domain_table_lookup(self):
        params = make_params(8, domains=["alpha", "beta"])
        a = E.embed_input(params, np.zeros(12), np.ones(12), 4, domain="alpha").data
        b = E.embed_input(params, np.zeros(12), np.ones(12), 4, domain="beta").data
        assert not np.array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1:], b[1:])

    def test_missing_domain_label_rejected(self):
        params = make_params(9, domains=["alpha", "beta"])
        with pytest.raises(ConfigError):
            E.embed_input(params, np.zeros(12), np.ones(12), 4)
        with pytest.raises(ConfigError):
            E.embed_input(params, np.zeros(12), np.ones(12), 4, domain="gamma")

    def test_embedding_gradcheck(self):
        params = make_params(10, P=4, D=6)
        rng = np.random.default_rng(11)
        vals = rng.standard_normal((2, 8))
        mask = (rng.random((2, 8)) > 0.3).astype(float)
        tensors = list(params.named().values())

        def loss():
            out = E.embed_batch(params, vals, mask, 4, np.zeros(2, dtype=int))
            return N.tsum(N.square(out))

        assert N.grad_check(loss, tensors, eps=1e-5) < 1e-6
