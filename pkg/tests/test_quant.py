import math

import numpy as np
import pytest
from scipy import stats

from pissa.adapter import merge, pissa_init
from pissa.linalg import RandomSource, exact_svd, frobenius_norm, nuclear_norm
from pissa.quant import (Nf4Codebook, QuantConfig, build_nf4_codebook,
                         dequantize, distribution_diagnostics,
                         error_reduction_ratio, loftq_init, qlora_error,
                         qlora_init, qpissa_init, quantization_error_bound,
                         quantize)
from tests.test_linalg import power_law_matrix

# Frozen output of the quantile construction (see the oracle test below).
GOLDEN_LEVELS = (
    -1.0, -0.696192805632343, -0.5250729594465005, -0.3949174259199071,
    -0.28444130892108205, -0.1847734028004556, -0.09104997598578049, 0.0,
    0.07958031495840909, 0.1609301443802907, 0.2461122513474594,
    0.3379151367131279, 0.44070973186421625, 0.5626168879699849,
    0.7229566441594734, 1.0,
)


class TestCodebook:
    def test_golden_values(self):
        assert build_nf4_codebook().levels == GOLDEN_LEVELS

    def test_quantile_oracle(self):
        # Recompute from scratch: evenly spaced normal quantiles, eight on
        # the negative side and nine on the non-negative side (zero shared),
        # normalized by the largest magnitude.
        offset = 1.0 - (1.0 / 32 + 1.0 / 30) / 2
        pos = [stats.norm.ppf(p) for p in np.linspace(0.5, offset, 9)]
        neg = [-stats.norm.ppf(p) for p in np.linspace(offset, 0.5, 8)]
        oracle = sorted(set(v / pos[-1] for v in neg[:-1] + pos) | {0.0})
        np.testing.assert_allclose(GOLDEN_LEVELS, oracle, atol=1e-15)

    def test_structure(self):
        lv = np.asarray(build_nf4_codebook().levels)
        assert lv.shape == (16,)
        assert (np.diff(lv) > 0).all()
        assert lv[0] == -1.0 and lv[-1] == 1.0
        assert lv[7] == 0.0

    def test_invalid_codebooks_rejected(self):
        with pytest.raises(ValueError):
            Nf4Codebook(tuple(np.linspace(-1, 1, 15)))
        with pytest.raises(ValueError):
            Nf4Codebook(tuple(np.linspace(-0.9, 1.0, 16)))


class TestQuantizeDequantize:
    def test_zero_matrix(self):
        q = quantize(np.zeros((8, 8)))
        assert (q.scales == 0.0).all()
        assert (q.unpacked_codes() == 7).all()  # index of the zero level
        assert np.array_equal(dequantize(q), np.zeros((8, 8)))

    def test_known_block(self):
        cfg = QuantConfig(block_size=4)
        m = np.array([[1.0, -1.0, 0.0, 0.5]])
        q = quantize(m, cfg)
        levels = np.asarray(cfg.codebook.levels)
        expected = [15, 0, 7, int(np.argmin(np.abs(levels - 0.5)))]
        assert list(q.unpacked_codes()) == expected
        assert q.scales[0] == 1.0

    def test_nearest_level_brute_force(self):
        cfg = QuantConfig(block_size=16)
        m = RandomSource(0).normal((6, 8))
        q = quantize(m, cfg)
        levels = np.asarray(cfg.codebook.levels)
        codes = q.unpacked_codes()
        flat = m.ravel()
        for i, x in enumerate(flat):
            scale = q.scales[i // 16]
            best = min(range(16), key=lambda j: (abs(x / scale - levels[j]), j))
            assert codes[i] == best

    def test_tie_toward_lower_index(self):
        levels = np.asarray(build_nf4_codebook().levels)
        midpoint = (levels[7] + levels[8]) / 2  # exactly between 0 and next
        m = np.array([[1.0, midpoint]])
        codes = quantize(m, QuantConfig(block_size=2)).unpacked_codes()
        assert codes[1] == 7

    @pytest.mark.parametrize("shape,block", [((8, 8), 64), ((7, 9), 16),
                                             ((1, 5), 64), ((13, 3), 4)])
    def test_idempotence(self, shape, block):
        cfg = QuantConfig(block_size=block)
        m = RandomSource(99).normal(shape)
        m[0, :] = 0.0  # include a zero run
        q1 = quantize(m, cfg)
        q2 = quantize(dequantize(q1), cfg)
        assert np.array_equal(q1.codes, q2.codes)
        assert np.array_equal(q1.scales, q2.scales)

    def test_extremes_roundtrip_exact(self):
        cfg = QuantConfig(block_size=4)
        m = np.array([[0.75, -0.75, 0.1, 0.2]])
        d = dequantize(quantize(m, cfg))
        assert d[0, 0] == 0.75 and d[0, 1] == -0.75

    @pytest.mark.parametrize("seed", range(10))
    def test_per_entry_error_bound(self, seed):
        cfg = QuantConfig(block_size=32)
        m = RandomSource(seed).normal((16, 16)) * (seed + 1)
        q = quantize(m, cfg)
        err = np.abs(m - dequantize(q))
        assert (err <= quantization_error_bound(q) + 1e-15).all()


class TestQloraError:
    def test_exact_representable_is_zero(self):
        cfg = QuantConfig(block_size=4)
        levels = np.asarray(cfg.codebook.levels)
        m = 2.5 * levels[[15, 3, 7, 12, 0, 9, 1, 14]].reshape(2, 4)
        assert qlora_error(m, cfg) <= 1e-12

    def test_matches_svd_oracle(self):
        cfg = QuantConfig()
        w = power_law_matrix(48, 48, 1.0, 0)
        err_matrix = w - dequantize(quantize(w, cfg))
        oracle = float(np.sum(exact_svd(err_matrix).s))
        assert qlora_error(w, cfg) == pytest.approx(oracle, rel=1e-12)

    def test_zero_adapter_ratio_exactly_zero(self):
        cfg = QuantConfig()
        w = power_law_matrix(64, 64, 1.0, 1)
        baseline = qlora_init(w, 8, RandomSource(5), cfg)
        assert error_reduction_ratio(w, baseline, cfg) == 0.0


class TestQpissaInit:
    def test_t1_is_pissa_with_quantized_residual(self):
        cfg = QuantConfig()
        w = power_law_matrix(48, 32, 0.5, 3)
        layer = qpissa_init(w, 4, T=1, cfg=cfg)
        ref = pissa_init(w, 4)
        np.testing.assert_allclose(layer.adapter.a, ref.adapter.a, atol=1e-12)
        np.testing.assert_allclose(layer.adapter.b, ref.adapter.b, atol=1e-12)
        ref_q = quantize(w - ref.adapter.delta(), cfg)
        assert np.array_equal(layer.base.codes, ref_q.codes)
        assert np.array_equal(layer.base.scales, ref_q.scales)

    @pytest.mark.parametrize("seed", range(5))
    def test_more_iterations_reduce_error(self, seed):
        cfg = QuantConfig()
        w = power_law_matrix(96, 96, 1.0, seed + 50)
        e1 = nuclear_norm(w - merge(qpissa_init(w, 8, T=1, cfg=cfg)))
        e5 = nuclear_norm(w - merge(qpissa_init(w, 8, T=5, cfg=cfg)))
        assert e5 <= e1

    @pytest.mark.parametrize("seed", range(5))
    def test_frobenius_objective_monotone(self, seed):
        cfg = QuantConfig()
        w = power_law_matrix(64, 64, 1.0, seed + 70)
        errs = [frobenius_norm(w - merge(qpissa_init(w, 8, T=t, cfg=cfg)))
                for t in range(1, 6)]
        for before, after in zip(errs, errs[1:]):
            assert after <= before + 1e-12, f"seed {seed}: {errs}"

    def test_exact_low_rank_near_zero_error(self):
        rng = RandomSource(7)
        w = rng.spawn(0).normal((24, 3)) @ rng.spawn(1).normal((3, 18))
        layer = qpissa_init(w, 3, T=1)
        # Residual is exactly zero, so the quantized base stores zeros.
        assert frobenius_norm(w - merge(layer)) <= 1e-10

    def test_invalid_args(self):
        w = RandomSource(0).normal((8, 8))
        with pytest.raises(ValueError):
            qpissa_init(w, 0)
        with pytest.raises(ValueError):
            qpissa_init(w, 2, T=0)


class TestLoftqInit:
    @pytest.mark.parametrize("rank", [4, 16])
    def test_t1_tail_identity(self, rank):
        cfg = QuantConfig()
        w = power_law_matrix(96, 96, 1.0, 9)
        layer = loftq_init(w, rank, T=1, cfg=cfg)
        err = nuclear_norm(w - merge(layer))
        tail = float(np.sum(exact_svd(w - dequantize(quantize(w, cfg))).s[rank:]))
        assert err == pytest.approx(tail, rel=1e-8)

    def test_full_rank_absorbs_error(self):
        cfg = QuantConfig()
        w = power_law_matrix(24, 24, 1.0, 4)
        layer = loftq_init(w, 24, T=1, cfg=cfg)
        assert nuclear_norm(w - merge(layer)) <= 1e-10

    def test_invalid_args(self):
        w = RandomSource(0).normal((8, 8))
        with pytest.raises(ValueError):
            loftq_init(w, 9)
        with pytest.raises(ValueError):
            loftq_init(w, 2, T=-1)


class TestErrorReductionRatio:
    def test_half_error_is_fifty_percent(self):
        # Synthetic layer whose merged error has exactly half the nuclear norm.
        cfg = QuantConfig()
        w = power_law_matrix(32, 32, 1.0, 2)
        baseline = qlora_error(w, cfg)
        layer = qlora_init(w, 4, RandomSource(0), cfg)
        err_matrix = w - merge(layer)
        # Move half the error into the adapter: merge becomes w - err/2.
        half = pissa_init(err_matrix / 2.0, min(err_matrix.shape))
        layer.adapter.a = half.adapter.a
        layer.adapter.b = half.adapter.b
        layer.adapter.rank = min(err_matrix.shape)
        ratio = error_reduction_ratio(w, layer, cfg)
        assert ratio == pytest.approx(50.0, rel=1e-6)

    @pytest.mark.parametrize("seed", range(3))
    def test_method_ordering(self, seed):
        cfg = QuantConfig()
        w = power_law_matrix(128, 128, 1.0, seed + 30)
        qp = error_reduction_ratio(w, qpissa_init(w, 8, 1, cfg), cfg)
        lq = error_reduction_ratio(w, loftq_init(w, 8, 1, cfg), cfg)
        base = error_reduction_ratio(w, qlora_init(w, 8, RandomSource(seed), cfg), cfg)
        assert qp > lq > base == 0.0

    def test_zero_denominator_reported(self):
        w = np.zeros((4, 4))
        layer = qlora_init(np.ones((4, 4)), 2, RandomSource(0))
        with pytest.raises(ZeroDivisionError):
            error_reduction_ratio(w, layer)


class TestDistributionDiagnostics:
    def test_gaussian_std(self):
        samples = RandomSource(0).normal((500, 200))
        std, dof = distribution_diagnostics(samples)
        assert std == pytest.approx(1.0, rel=0.02)
        assert dof > 20

    def test_residual_is_narrower(self):
        w = power_law_matrix(128, 128, 1.0, 0)
        layer = pissa_init(w, 16)
        std_w, _ = distribution_diagnostics(w)
        std_res, _ = distribution_diagnostics(layer.base)
        assert std_res < std_w

    def test_heavy_tail_low_dof(self):
        gen = RandomSource(3).generator()
        heavy = gen.standard_t(3, size=(200, 200))
        _, dof_heavy = distribution_diagnostics(heavy)
        _, dof_gauss = distribution_diagnostics(RandomSource(1).normal((200, 200)))
        assert dof_heavy < dof_gauss
        assert dof_heavy <= 6

    def test_constant_matrix(self):
        std, dof = distribution_diagnostics(np.full((3, 3), 2.5))
        assert std == 0.0 and math.isinf(dof)

    def test_too_small(self):
        with pytest.raises(ValueError):
            distribution_diagnostics(np.ones((1, 1)))
