import csv
import itertools

import numpy as np
import pytest
from scipy import integrate, stats

from multiquant.error_analysis import (
    CSV_HEADER,
    ErrorModelConfig,
    accumulated_msqe,
    clipping_noise,
    msqe_analytic,
    msqe_monte_carlo,
    msqe_table,
    noise_transplant_residual,
    quantization_noise,
    write_msqe_csv,
)


def quad_clipping(u, power):
    val, _ = integrate.quad(lambda w: stats.norm.pdf(w) * (w - u) ** power, u, np.inf, epsabs=0, epsrel=1e-12)
    return 2 * val


class TestAnalytic:
    @pytest.mark.parametrize("u", [0.25, 1.0, 2.0, 3.0, 4.5])
    def test_closed_forms_match_quadrature(self, u):
        assert clipping_noise(u, "as-written") == pytest.approx(quad_clipping(u, 1), rel=1e-9)
        assert clipping_noise(u, "squared") == pytest.approx(quad_clipping(u, 2), rel=1e-9)

    def test_quantization_noise_b8_u1(self):
        r = msqe_analytic(ErrorModelConfig(1.0, 8))
        assert r.quantization_noise == pytest.approx(1 / (3 * 2**16))
        assert r.quantization_noise == pytest.approx(5.0863e-6, rel=1e-4)
        assert r.total_analytic == r.clipping_noise + r.quantization_noise

    def test_exact_bin_denominator(self):
        assert quantization_noise(1.0, 2, "exact-bin") == pytest.approx(1 / 27)
        ratio = quantization_noise(1.0, 2, "pow2") / quantization_noise(1.0, 2, "exact-bin")
        assert ratio == pytest.approx(9 / 16)

    @pytest.mark.parametrize("variant", ["as-written", "squared"])
    def test_limits(self, variant):
        assert clipping_noise(40.0, variant) == pytest.approx(0.0, abs=1e-300)
        assert quantization_noise(2.0, 60) < 1e-30

    def test_monotone_in_u(self):
        us = np.linspace(0.1, 6, 60)
        for variant in ("as-written", "squared"):
            clip = [clipping_noise(u, variant) for u in us]
            assert np.all(np.diff(clip) < 0)
        quant = [quantization_noise(u, 4) for u in us]
        assert np.all(np.diff(quant) > 0)

    def test_all_terms_nonnegative(self):
        for b, u, v in itertools.product([2, 3, 8], [0.5, 2, 5], ["as-written", "squared"]):
            r = msqe_analytic(ErrorModelConfig(u, b, v))
            assert r.clipping_noise >= 0 and r.quantization_noise >= 0

    def test_config_validation(self):
        with pytest.raises(ValueError, match="unsupported"):
            ErrorModelConfig(1.0, 4, distribution="laplace")
        with pytest.raises(ValueError):
            ErrorModelConfig(0.0, 4)
        with pytest.raises(ValueError):
            ErrorModelConfig(1.0, 1)
        with pytest.raises(ValueError):
            ErrorModelConfig(1.0, 4, n_samples=100)


class TestMonteCarlo:
    def test_b8_u3_agrees_with_squared_variant(self):
        cfg = ErrorModelConfig(3.0, 8, "squared", n_samples=1_000_000, seed=1)
        mc = msqe_monte_carlo(cfg)
        assert abs(msqe_analytic(cfg).total_analytic - mc) / mc < 0.05

    def test_fewer_bits_more_error(self):
        assert msqe_monte_carlo(ErrorModelConfig(2.0, 2, n_samples=200_000)) > msqe_monte_carlo(
            ErrorModelConfig(2.0, 8, n_samples=200_000)
        )

    def test_seeded(self):
        cfg = ErrorModelConfig(1.5, 4, n_samples=50_000, seed=7)
        assert msqe_monte_carlo(cfg) == msqe_monte_carlo(cfg)

    def test_as_written_variant_is_rejected_by_the_oracle(self):
        cfg = ErrorModelConfig(2.0, 8, n_samples=1_000_000)
        mc = msqe_monte_carlo(cfg)
        gap_written = abs(msqe_analytic(ErrorModelConfig(2.0, 8, "as-written")).total_analytic - mc) / mc
        gap_squared = abs(msqe_analytic(ErrorModelConfig(2.0, 8, "squared")).total_analytic - mc) / mc
        assert gap_squared < 0.05 < gap_written


class TestAccumulated:
    def test_singleton(self):
        assert accumulated_msqe({8}, 1.0) == msqe_analytic(ErrorModelConfig(1.0, 8)).total_analytic

    def test_more_candidates_more_error(self):
        assert accumulated_msqe({2, 4, 6, 8}, 1.0) > accumulated_msqe({8}, 1.0)

    def test_additive_and_order_free(self):
        a = accumulated_msqe([2, 4], 1.3) + accumulated_msqe([6, 8], 1.3)
        for perm in itertools.permutations([2, 4, 6, 8]):
            assert accumulated_msqe(perm, 1.3) == pytest.approx(a, rel=1e-14)

    def test_four_term_sum_against_monte_carlo(self):
        analytic = accumulated_msqe({2, 4, 6, 8}, 2.0, "squared", "exact-bin")
        mc = sum(msqe_monte_carlo(ErrorModelConfig(2.0, b, n_samples=500_000, seed=b)) for b in (2, 4, 6, 8))
        assert abs(analytic - mc) / mc < 0.05

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            accumulated_msqe([], 1.0)


class TestTransplant:
    @pytest.fixture
    def conv_pair(self):
        rng = np.random.default_rng(0)
        return rng.standard_normal((4, 3, 3, 3)), rng.uniform(0.1, 2.0, (6, 3, 6, 6))

    def test_no_quantization(self, conv_pair):
        w, a = conv_pair
        r = noise_transplant_residual(w, a, a_bar=a)
        assert r.residual == 0.0 and r.activation_noise == 0.0

    def test_uniform_scaling(self, conv_pair):
        w, a = conv_pair
        r = noise_transplant_residual(w, a, a_bar=2 * a)
        assert r.residual < 1e-12
        assert r.activation_noise == pytest.approx(1.0)
        assert r.weight_noise == pytest.approx(1.0, abs=1e-9)

    def test_four_bit_activations_small_but_nonzero(self, conv_pair):
        w, a = conv_pair
        r = noise_transplant_residual(w, a, bits=4)
        assert r.conclusive
        assert 1e-4 < r.residual < 0.1

    def test_degenerate_support_inconclusive(self, conv_pair):
        w, a = conv_pair
        a = a.copy()
        a[:, :, :, :4] = 0.0
        r = noise_transplant_residual(w, a, bits=4)
        assert not r.conclusive


def test_csv_output(tmp_path):
    rows = msqe_table([4], [1.0, 2.0], n_samples=20_000)
    path = tmp_path / "msqe.csv"
    write_msqe_csv(rows, path)
    with open(path) as fh:
        lines = list(csv.reader(fh))
    assert lines[0] == CSV_HEADER
    assert len(lines) == 1 + 2 * 2
    assert {line[2] for line in lines[1:]} == {"as-written", "squared"}
