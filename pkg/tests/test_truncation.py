import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from specden import phantom as ph
from specden import pipeline as pl
from specden import truncation as tr
from specden.decomposition import pca_decompose
from specden.errors import DegenerateScoresError, NoNoiseDomainError, SparseInputError, TooFewComponentsError
from specden.preprocess import center

FX = tr.CMOS_FIXTURE


def spiked(m, n, strengths, seed=0):
    """Centred noise matrix (unit variance) with rank-len(strengths) signal."""
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((m, n))
    for i, s in enumerate(strengths):
        u = rng.choice([-1.0, 1.0], m)  # bimodal scores make an anisotropic couple
        v = np.zeros(n)
        v[i * 3:(i + 1) * 3] = 1 / math.sqrt(3)
        d += s * np.outer(u, v)
    return pca_decompose(center(d)[0])


class TestNadler:
    def test_table_values(self):
        m, n, s2 = FX["m"], FX["n"], FX["sigma2"]
        assert tr.nadler_retrievable(40.05, s2, m, n)
        assert 40.05 / s2 == pytest.approx(1.43, abs=0.005)
        assert not tr.nadler_retrievable(0.5804, s2, m, n)
        assert 0.5804 / s2 == pytest.approx(0.0207, abs=5e-5)
        assert math.sqrt(n / m) == pytest.approx(0.245, abs=5e-4)

    def test_boundary_inclusive(self):
        m, n = 400, 100
        assert tr.nadler_retrievable(2.0 * math.sqrt(n / m), 2.0, m, n)

    def test_fixture_flags(self):
        flags, text = tr.fixture_report()
        assert flags == [True] * 6 + [False] * 5
        assert "0.234" in text and "0.245" in text
        assert text.splitlines()[0] == "component,lambda_true,ratio,bound,retrievable"

    def test_count_stops_at_first_failure(self):
        assert tr.nadler_count([10, 0.1, 10], 1.0, 100, 100) == 1

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            tr.nadler_retrievable(1.0, 0.0, 10, 10)


class TestGavishDonoho:
    @given(st.floats(1e-3, 1e3), st.integers(2, 10 ** 5))
    def test_square_anchor(self, s2, m):
        assert tr.gavish_donoho_threshold(s2, m, m) == pytest.approx(16 / 3 * s2, rel=1e-6)

    def test_square_example(self):
        assert tr.gavish_donoho_cutoff([6.0, 5.0, 1.0], 1.0, 50, 50) == 1
        assert tr.gavish_donoho_cutoff([1.0, 0.5], 1.0, 50, 50) == 0

    @given(st.lists(st.floats(0, 100), min_size=1, max_size=30), st.floats(0.01, 10), st.floats(0.01, 10),
           st.integers(10, 5000), st.integers(10, 5000))
    def test_monotone_in_sigma2(self, lam, a, b, m, n):
        lo, hi = sorted((a, b))
        assert tr.gavish_donoho_cutoff(lam, hi, m, n) <= tr.gavish_donoho_cutoff(lam, lo, m, n)

    def test_fixture_scale(self):
        # noise variances of the fixture sit just above the bulk edge, so the
        # threshold lies between the noise bulk and the spiked components
        thr = tr.gavish_donoho_threshold(FX["sigma2"], FX["m"], FX["n"])
        assert FX["sigma2"] * (1 + math.sqrt(FX["n"] / FX["m"])) ** 2 < thr < FX["lambda"][5]

    def test_pure_noise_gives_zero(self):
        m = spiked(3000, 200, [])
        s2 = tr.estimate_noise_sigma2(m.variances, m.m, m.n)
        assert tr.gavish_donoho_cutoff(m.variances, s2, m.m, m.n) == 0

    def test_sigma_positive(self):
        with pytest.raises(ValueError):
            tr.gavish_donoho_cutoff([1.0], 0.0, 5, 5)


class TestNoiseEstimate:
    def test_gaussian(self):
        rng = np.random.default_rng(1)
        m = pca_decompose(center(rng.standard_normal((2000, 400)))[0])
        assert 0.9 <= tr.estimate_noise_sigma2(m.variances, 2000, 400) <= 1.1

    def test_wide_matrix(self):
        rng = np.random.default_rng(2)
        m = pca_decompose(center(2.0 * rng.standard_normal((300, 900)))[0])
        assert tr.estimate_noise_sigma2(m.variances, 300, 900) == pytest.approx(4.0, rel=0.1)

    def test_low_rank_jitter(self):
        rng = np.random.default_rng(3)
        d = rng.standard_normal((500, 5)) @ rng.standard_normal((5, 60)) + 1e-9 * rng.standard_normal((500, 60))
        m = pca_decompose(center(d)[0])
        assert tr.estimate_noise_sigma2(m.variances, 500, 60) <= 1e-6 * m.variances[0]

    def test_too_few(self):
        with pytest.raises(TooFewComponentsError):
            tr.estimate_noise_sigma2(np.ones(9), 100, 9)

    def test_null_length_checked(self):
        with pytest.raises(ValueError):
            tr.estimate_noise_sigma2(np.ones(20), 100, 20, null_variances=np.ones(12))

    def test_desk_phantom_with_null(self, oracle, noisy_cube):
        model = oracle["model"]
        # the null goes through the same binning, so it starts at the raw grid size
        null = pl.noise_null_variances(noisy_cube.rows, noisy_cube.cols, model.n)
        est = tr.estimate_noise_sigma2(model.variances, model.m, model.n, null)
        assert est == pytest.approx(oracle["sigma2"], rel=0.2)


class TestScatterGrid:
    def test_origin(self):
        g = tr.scatter_grid(np.zeros(50), np.zeros(50), t=8)
        assert g.cells[4, 4] == 50 and g.cells.sum() == 50

    def test_corners(self):
        g = tr.scatter_grid([1, 1, -1, -1], [1, -1, 1, -1], t=2)
        assert g.cells.tolist() == [[1, 1], [1, 1]]

    def test_gaussian_marginals(self):
        rng = np.random.default_rng(4)
        x, y = rng.standard_normal((2, 100_000))
        g = tr.scatter_grid(x, y, 64)
        (lo, hi), _ = g.ranges
        edges = np.linspace(lo, hi, 65) / x.std()
        p = np.diff(stats.norm.cdf(edges))
        p[0] += stats.norm.cdf(edges[0])
        p[-1] += stats.norm.sf(edges[-1])
        for marg in (g.cells.sum(axis=1), g.cells.sum(axis=0)):
            exp = p * x.size
            keep = exp > 5
            chi2 = ((marg[keep] - exp[keep]) ** 2 / exp[keep]).sum()
            assert chi2 < stats.chi2.ppf(0.99, keep.sum() - 1)

    def test_constant_nonzero_rejected(self):
        with pytest.raises(DegenerateScoresError):
            tr.scatter_grid(np.ones(5), np.arange(5.0))

    @given(st.integers(2, 300), st.integers(8, 64), st.integers(0, 2 ** 31))
    def test_cells_sum_to_m(self, m, t, seed):
        x, y = np.random.default_rng(seed).standard_normal((2, m))
        assert tr.scatter_grid(x, y, t).cells.sum() == m


class TestCovSkewPurity:
    def test_cov_self(self, rng):
        x = rng.standard_normal(1000)
        x -= x.mean()
        assert tr.aniso_cov(x, x) == pytest.approx(x.var())

    def test_cov_pca_couples(self, rng):
        m = pca_decompose(center(rng.standard_normal((500, 8)))[0])
        scale = m.variances[0]
        for i in range(7):
            assert abs(tr.aniso_cov(m.scores[:, i], m.scores[:, i + 1])) <= 1e-8 * scale

    def test_cov_independent(self, rng):
        x, y = rng.standard_normal((2, 10_000))
        assert abs(tr.aniso_cov(x, y)) <= 5 / math.sqrt(10_000)

    @settings(max_examples=30)
    @given(st.integers(2, 40), st.integers(0, 2 ** 31))
    def test_skew_expansion_matches_direct(self, m, seed):
        x, y = np.random.default_rng(seed).standard_normal((2, m))
        a, b = tr.aniso_skew(x, y), tr.aniso_skew_direct(x, y)
        assert a == pytest.approx(b, rel=1e-7, abs=1e-9 * (1 + abs(b)))

    def test_skew_symmetries(self, rng):
        x, y = rng.standard_normal((2, 40))
        v = tr.aniso_skew(x, y)
        assert tr.aniso_skew(-x, -y) == pytest.approx(v, rel=1e-10)
        assert tr.aniso_skew(np.r_[x, x], np.r_[y, y]) == pytest.approx(v, rel=1e-10)
        assert tr.aniso_skew_direct(np.r_[x, x], np.r_[y, y]) == pytest.approx(v, rel=1e-10)

    def test_skew_zero_cov(self):
        assert math.isnan(tr.aniso_skew([1.0, 0.0], [0.0, 1.0]))

    def test_purity_examples(self):
        one = np.zeros((8, 8), dtype=int)
        one[3, 3] = 17
        assert tr.aniso_purity(tr.ScatterGrid(one, ((0, 0), (0, 0)))) == 1.0
        assert tr.aniso_purity(tr.ScatterGrid(np.full((2, 2), 5), ((0, 0), (0, 0)))) == 1.0
        off = np.array([[0, 3], [4, 0]])
        assert math.isnan(tr.aniso_purity(tr.ScatterGrid(off, ((0, 0), (0, 0)))))

    def test_domains_on_phantom(self, oracle):
        T = oracle["model"].scores
        truth_k = 6
        series = {c: tr.anisotropy_series(oracle["model"], c).values for c in ("skew", "purity", "hist")}
        noise = slice(truth_k + 1, tr.DEFAULT_MAX_SCAN)
        signal = slice(0, truth_k - 1)
        sk = np.abs(series["skew"])
        assert np.median(sk[noise]) < 0.1 * np.median(sk[signal])
        # purity separates the domains less cleanly than the histogram criterion
        label = np.arange(tr.DEFAULT_MAX_SCAN) < truth_k

        def auc(v):
            return stats.mannwhitneyu(v[label], v[~label]).statistic / (label.sum() * (~label).sum())

        assert auc(series["hist"]) == 1.0
        assert auc(series["purity"]) < auc(series["hist"])
        assert T.shape[1] >= tr.DEFAULT_MAX_SCAN


class TestHist:
    def test_isotropic(self):
        x, y = np.random.default_rng(5).standard_normal((2, 100_000))
        assert abs(tr.aniso_hist(x, y)) < 0.5

    def test_line(self):
        rng = np.random.default_rng(6)
        t1 = rng.choice([-1.0, 1.0], 100_000)
        t2 = 0.1 * rng.standard_normal(100_000)
        assert tr.aniso_hist(t1, t2) > 0.5

    def test_runtime(self):
        x, y = np.random.default_rng(7).standard_normal((2, 100_000))
        t0 = time.perf_counter()
        tr.aniso_hist(x, y)
        assert time.perf_counter() - t0 < 2.0

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(0, math.pi))
    def test_rotation_and_swap(self, seed, theta):
        # values sit near zero, so the change is bounded against the 0.5 threshold scale
        x, y = np.random.default_rng(seed).standard_normal((2, 50_000))
        base = tr.aniso_hist(x, y, p=64)
        c, s = math.cos(theta), math.sin(theta)
        assert abs(tr.aniso_hist(c * x - s * y, s * x + c * y, p=64) - base) < 0.2 * tr.DEFAULT_THRESHOLD
        assert abs(tr.aniso_hist(y, x, p=64) - base) < 0.2 * tr.DEFAULT_THRESHOLD

    @settings(max_examples=10)
    @given(st.integers(0, 2 ** 31))
    def test_permutation_identical(self, seed):
        rng = np.random.default_rng(seed)
        x, y = rng.standard_normal((2, 2000))
        perm = rng.permutation(2000)
        assert tr.aniso_hist(x[perm], y[perm]) == tr.aniso_hist(x, y)

    def test_degenerate(self):
        with pytest.raises(DegenerateScoresError):
            tr.aniso_hist(np.zeros(200), np.arange(200.0))

    def test_small_sample_warns(self):
        with pytest.warns(RuntimeWarning):
            tr.aniso_hist(np.arange(20.0), np.arange(20.0)[::-1] ** 2)

    def test_unknown_criterion(self):
        with pytest.raises(ValueError):
            tr.couple_value(np.arange(5.0), np.arange(5.0) ** 2, "bogus")


class TestSelection:
    def test_pure_noise(self):
        k, series = tr.select_cutoff_anisotropy(spiked(10_000, 60, []))
        assert k == 0 and np.all(series.values < 0.5)

    def test_rank_two(self):
        k, series = tr.select_cutoff_anisotropy(spiked(10_000, 60, [4.0, 3.0]))
        assert k == 2
        assert series.values[0] > 0.5 and series.values[1] > 0.5
        assert np.all(series.values[2:] < 0.5)

    def test_suffix_rule(self):
        s = tr.AnisotropySeries("hist", np.array([2.0, 0.1, 0.9, 0.1, 0.2]), 0.5)
        assert tr.cutoff_from_series(s) == 3
        assert s.couples()[:2] == [(1, 2), (2, 3)]

    def test_nan_counts_as_anisotropic(self):
        s = tr.AnisotropySeries("skew", np.array([0.1, np.nan, 0.1]), 0.5)
        assert tr.cutoff_from_series(s) == 2

    def test_no_noise_domain(self):
        with pytest.raises(NoNoiseDomainError):
            tr.cutoff_from_series(tr.AnisotropySeries("hist", np.array([0.1, 2.0]), 0.5))

    def test_sparse_guard(self):
        m = spiked(2000, 40, [3.0])
        with pytest.raises(SparseInputError):
            tr.select_cutoff_anisotropy(m, raw_sparsity=0.01, filtered=False)
        k, _ = tr.select_cutoff_anisotropy(m, raw_sparsity=0.01, filtered=False, force=True)
        assert k == 1
        assert tr.select_cutoff_anisotropy(m, raw_sparsity=0.01, filtered=True)[0] == 1
        assert tr.select_cutoff_anisotropy(m, raw_sparsity=0.9, filtered=False)[0] == 1

    def test_desk_phantom_matches_oracle(self, oracle):
        model = oracle["model"]
        k, _ = tr.select_cutoff_anisotropy(model, raw_sparsity=oracle["prep"].raw_sparsity)
        kn = tr.nadler_count(oracle["lambda_true"], oracle["sigma2"], model.m, model.n)
        assert abs(k - kn) <= 1

    def test_dose_monotone_where_applicable(self):
        # from dose 1 upwards the filtered matrix is at least ~13% nonzero;
        # k must not grow as the dose falls
        ks = []
        for d in (1, 2, 8, 32, 64):
            noisy, _ = ph.two_phase_object(dose=d, seed=0)
            model, _ = pl.decompose(noisy, pl.FILTERED_WEIGHTED)
            ks.append(tr.select_cutoff_anisotropy(model)[0])
        assert ks == sorted(ks)
        assert ks[-1] == 1

    @pytest.mark.xfail(reason="below dose 1 the filtered data stay mostly empty and the scatter "
                              "plots are dominated by count discreteness", strict=True)
    def test_dose_monotone_full_series(self):
        ks = []
        for d in ph.TWO_PHASE_DOSES:
            noisy, _ = ph.two_phase_object(dose=d, seed=0)
            model, _ = pl.decompose(noisy, pl.FILTERED_WEIGHTED)
            try:
                ks.append(tr.select_cutoff_anisotropy(model)[0])
            except NoNoiseDomainError:
                ks.append(model.r)
        assert ks == sorted(ks)


class TestReport:
    def test_report_contents(self, oracle):
        model = oracle["model"]
        rep = tr.truncation_report(model, sigma2=oracle["sigma2"], lambda_true=oracle["lambda_true"],
                                   raw_sparsity=oracle["prep"].raw_sparsity)
        assert rep.sigma2_source == "given"
        assert rep.k_nadler == tr.nadler_count(oracle["lambda_true"], oracle["sigma2"], model.m, model.n)
        assert len(rep.nadler_flags) == model.r
        text = rep.summary()
        assert text.startswith("method,k\n")
        assert f"anisotropy_hist,{rep.k_aniso}" in text and "nadler_oracle," in text
        csv = rep.series_csv().splitlines()
        assert csv[0] == "couple_index,criterion_value" and len(csv) == tr.DEFAULT_MAX_SCAN + 1
        assert 0 <= rep.k_gd <= model.r and 0 <= rep.k_aniso <= model.r

    def test_report_no_noise_domain(self):
        m = spiked(3000, 30, [5.0])
        rep = tr.truncation_report(m, max_scan=1)
        assert rep.k_aniso is None and "increase max_scan" in rep.notes[0]
        assert "anisotropy_hist,none" in rep.summary()

    def test_report_sparse_refused(self):
        with pytest.raises(SparseInputError):
            tr.truncation_report(spiked(2000, 30, [3.0]), raw_sparsity=0.1, filtered=False)

    def test_scree_knee(self):
        lam = np.r_[[100, 50, 20], np.full(20, 1.0)]
        assert tr.scree_knee(lam) == 3
