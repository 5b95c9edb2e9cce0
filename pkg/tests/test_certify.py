"""Weighted-inequality sweeps and Gramian eigenvalue estimation."""

import math

import numpy as np
import pytest

from nskctrl import (
    CoefficientFunction,
    ControlRegion,
    InvalidZeta,
    IterationStall,
    ModelParams,
    TorusGrid,
    ValidationError,
    carleman_check,
    derive_constants,
    estimate_observability,
    make_weight_set,
    manufactured_suite,
)
from nskctrl.dynamics import TimeGrid, assemble_blocks

S_SWEEP = (4.0, 8.0, 16.0, 32.0, 64.0)


def heat_params():
    return ModelParams(
        rho_star=2.0,
        P=CoefficientFunction.from_polynomial_in_rho((0.0, 1.0), 2.0),
        kappa=CoefficientFunction.from_polynomial_in_rho((0.3,), 2.0),
        mu=CoefficientFunction.from_polynomial_in_rho((0.8,), 2.0),
        nu=CoefficientFunction.from_polynomial_in_rho((0.1,), 2.0),
        eta=1.5,
    )


def nsk_params():
    return ModelParams(
        rho_star=2.0,
        P=CoefficientFunction.from_polynomial_in_rho((0.0, 0.5, 0.25, 0.05), 2.0),
        kappa=CoefficientFunction.from_polynomial_in_rho((0.3, 0.1, 0.02), 2.0),
        mu=CoefficientFunction.from_polynomial_in_rho((0.8, 0.05), 2.0),
        nu=CoefficientFunction.from_polynomial_in_rho((0.1, -0.02), 2.0),
        eta=1.5,
    )


def heat_system(grid, zeta=0.05):
    return assemble_blocks(derive_constants(heat_params()), grid, "heat", zeta=zeta)


def nsk_system(grid):
    return assemble_blocks(derive_constants(nsk_params()), grid, "linearized_nsk")


def window():
    return ControlRegion.from_widths(np.pi - 0.4, 2.2, 2.6, np.pi)


def closed_form_eigenvalues(grid, tg, zeta):
    """Per-mode Gramian eigenvalues for uncontrolled full-domain diffusion."""
    out = []
    for k2 in grid.k_squared.ravel():
        out.append(float(np.sum(tg.trapezoid_weights
                                * np.exp(-2.0 * zeta * k2 * (tg.T - tg.nodes)))))
    return np.asarray(out)


def carleman_setup(N=32, M=64):
    grid = TorusGrid.regular(1, 2 * np.pi, N)
    tg = TimeGrid(1.0, M)
    region = window()
    ws = make_weight_set(grid, region, 1.0, s=4.0, lam=1.0)
    return grid, tg, region, ws


class TestManufacturedSuite:
    def test_case_names_and_order(self):
        grid, _, region, _ = carleman_setup()
        names = [c.name for c in manufactured_suite(grid, region, 1.0 + 0j)]
        assert names == ["zero", "off_support", "observed", "oscillatory",
                         "diffusion_solution"]

    def test_zero_case_vanishes(self):
        grid, _, region, _ = carleman_setup()
        case = manufactured_suite(grid, region, 1.0 + 0j)[0]
        assert np.all(case.value(0.3).coeffs == 0.0)
        assert np.all(case.dvalue(0.3).coeffs == 0.0)

    @pytest.mark.parametrize("index", [1, 2, 3, 4])
    def test_time_derivatives_are_analytic(self, index):
        grid, _, region, _ = carleman_setup()
        case = manufactured_suite(grid, region, 0.7 + 0.3j)[index]
        t, h = 0.4, 1e-5
        fd = (case.value(t + h).coeffs - case.value(t - h).coeffs) / (2.0 * h)
        exact = case.dvalue(t).coeffs
        scale = np.abs(exact).max()
        assert scale > 0.0
        assert np.abs(fd - exact).max() <= 1e-7 * scale

    def test_off_support_vanishes_on_cutoff_support(self):
        grid, _, region, _ = carleman_setup()
        case = manufactured_suite(grid, region, 1.0 + 0j)[1]
        vals = case.value(0.2).grid_values()[0]
        chi = region.chi0_on(grid)
        assert np.abs(vals[chi > 0.0]).max() <= 1e-12

    def test_observed_is_supported_inside_inner_box(self):
        grid, _, region, _ = carleman_setup()
        case = manufactured_suite(grid, region, 1.0 + 0j)[2]
        vals = case.value(0.2).grid_values()[0]
        pts = np.stack(grid.meshgrid())
        outside = ~region.omega0.contains(pts)
        assert np.abs(vals[outside]).max() <= 1e-12
        assert np.abs(vals).max() > 0.1


class TestCarlemanCheck:
    def test_rejects_nonpositive_diffusion(self):
        _, tg, _, ws = carleman_setup()
        for bad in (-1.0, 0.0, 1.0j):
            with pytest.raises(InvalidZeta):
                carleman_check(bad, ws, tg)

    def test_rejects_horizon_mismatch(self):
        _, _, _, ws = carleman_setup()
        with pytest.raises(ValidationError):
            carleman_check(1.0, ws, TimeGrid(0.5, 32))

    def test_rejects_bad_refinement(self):
        _, tg, _, ws = carleman_setup()
        with pytest.raises(ValidationError):
            carleman_check(1.0, ws, tg, quadrature_refine=0)

    def test_zero_case_is_undefined_not_asserted(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        for s in S_SWEEP:
            e = rep.entry("zero", s, 1.0)
            assert not e.defined
            assert math.isnan(e.constant)

    def test_constants_stay_near_one_and_decrease(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg)
        assert rep.growth_flags == []
        for lam in rep.lambda_values:
            worst = [c for _, c in rep.worst_constants(lam)]
            assert all(1.0 < c < 1.06 for c in worst)
            for a, b in zip(worst, worst[1:]):
                assert b <= 1.05 * a

    def test_default_sweep_frozen_off_support_row(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        row = [rep.entry("off_support", s, 1.0).constant for s in S_SWEEP]
        np.testing.assert_allclose(
            row,
            [1.015727531, 1.010650303, 1.006799635, 1.00407249, 1.002295595],
            rtol=1e-5)

    def test_observed_constant_tends_to_one_from_above(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        row = [rep.entry("observed", s, 1.0).constant for s in S_SWEEP]
        assert all(1.0 < c < 1.005 for c in row)
        assert row == sorted(row, reverse=True)

    def test_exact_solution_case_has_negligible_residual(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        e = rep.entry("diffusion_solution", 4.0, 1.0)
        assert e.log_residual < e.log_observation - 30.0

    def test_unrefined_quadrature_reproduces_growth_artifact(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, quadrature_refine=1)
        row = [rep.entry("off_support", s, 1.0).constant for s in S_SWEEP]
        np.testing.assert_allclose(
            row, [19.2198, 27.181, 38.4397, 54.3619, 76.8793], rtol=5e-4)
        assert len(rep.growth_flags) == 9
        for _, _, _, ratio in rep.growth_flags:
            assert abs(ratio - math.sqrt(2.0)) < 1e-3

    def test_refinement_level_is_converged(self):
        _, tg, _, ws = carleman_setup()
        r2 = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        r4 = carleman_check(1.0, ws, tg, lambda_values=(1.0,), quadrature_refine=4)
        for s in S_SWEEP:
            a = r2.entry("off_support", s, 1.0).constant
            b = r4.entry("off_support", s, 1.0).constant
            assert abs(a - b) <= 1e-5 * a

    def test_complex_diffusion_behaves_like_real(self):
        _, tg, _, ws = carleman_setup()
        real = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        cplx = carleman_check(1.0 + 5.0j, ws, tg, lambda_values=(1.0,))
        assert cplx.growth_flags == []
        for case in ("off_support", "observed", "oscillatory", "diffusion_solution"):
            for s in S_SWEEP:
                a = real.entry(case, s, 1.0).constant
                b = cplx.entry(case, s, 1.0).constant
                assert 0.1 < b / a < 10.0

    def test_fixed_lambda_normalization_is_tracked(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.5,))
        e = rep.entry("observed", 8.0, 1.5)
        assert math.isfinite(e.constant_fixed_lambda)
        assert e.constant_fixed_lambda > 0.0
        assert e.constant_fixed_lambda != e.constant

    def test_tail_bound_is_reported_and_tiny(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        assert rep.tail_log_bound < -1e6
        assert "tail" in rep.tail_note or "envelope" in rep.tail_note

    def test_lambda_cap_note_present(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        assert rep.lambda_cap == 2.0
        assert rep.lambda_cap_note

    def test_unknown_entry_raises(self):
        _, tg, _, ws = carleman_setup()
        rep = carleman_check(1.0, ws, tg, lambda_values=(1.0,))
        with pytest.raises(KeyError):
            rep.entry("off_support", 3.0, 1.0)


class TestObservabilityOracle:
    def test_full_domain_matches_closed_form(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 16)
        tg = TimeGrid(1.0, 16)
        rep = estimate_observability(heat_system(grid), None, tg, seed=0)
        closed = closed_form_eigenvalues(grid, tg, 0.05)
        assert abs(rep.lambda_max - closed.max()) <= 1e-6 * closed.max()
        assert abs(rep.lambda_min - closed.min()) <= 1e-6 * closed.min()
        assert rep.lambda_min > 0.0
        assert rep.kappa_obs == pytest.approx(1.0 / rep.lambda_min)
        assert rep.power_residual <= 1e-6
        assert rep.inverse_residual <= 1e-6

    def test_band_compression_matches_band_restricted_closed_form(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 16)
        tg = TimeGrid(1.0, 16)
        rep = estimate_observability(heat_system(grid), None, tg, seed=0, band=2)
        k2 = grid.k_squared.ravel()
        closed = closed_form_eigenvalues(grid, tg, 0.05)[k2 <= 4.0]
        assert abs(rep.lambda_max - closed.max()) <= 1e-6 * closed.max()
        assert abs(rep.lambda_min - closed.min()) <= 1e-6 * closed.min()
        assert rep.band == 2

    def test_seeded_runs_are_bit_reproducible(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 16)
        tg = TimeGrid(1.0, 16)
        a = estimate_observability(heat_system(grid), None, tg, seed=3)
        b = estimate_observability(heat_system(grid), None, tg, seed=3)
        assert a.lambda_max == b.lambda_max
        assert a.lambda_min == b.lambda_min
        assert a.cg_total == b.cg_total

    def test_seed_choice_does_not_move_the_eigenvalues(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 16)
        tg = TimeGrid(1.0, 16)
        a = estimate_observability(heat_system(grid), None, tg, seed=0)
        b = estimate_observability(heat_system(grid), None, tg, seed=11)
        assert a.lambda_min == pytest.approx(b.lambda_min, rel=1e-5)
        assert a.lambda_max == pytest.approx(b.lambda_max, rel=1e-5)

    def test_power_iteration_stalls_on_tiny_budget(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 16)
        tg = TimeGrid(1.0, 16)
        with pytest.raises(IterationStall):
            estimate_observability(heat_system(grid), None, tg, seed=0, max_iters=1)

    def test_inner_solver_stalls_on_tiny_budget(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 32)
        tg = TimeGrid(1.0, 32)
        with pytest.raises(IterationStall):
            estimate_observability(nsk_system(grid), window(), tg, seed=0,
                                   band=4, cg_max_iters=1)


class TestObservabilityLocalized:
    def test_shrinking_the_window_shrinks_lambda_min(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 32)
        tg = TimeGrid(1.0, 64)
        sys_n = nsk_system(grid)
        full = estimate_observability(sys_n, window(), tg, seed=0, band=4)
        half = estimate_observability(
            sys_n, ControlRegion.from_widths(np.pi - 0.4, 1.1, 1.3, 0.5 * np.pi),
            tg, seed=0, band=4)
        assert full.lambda_min > 0.0
        assert half.lambda_min > 0.0
        assert half.lambda_min < full.lambda_min

    def test_shorter_horizon_costs_observability(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 32)
        sys_n = nsk_system(grid)
        long = estimate_observability(sys_n, window(), TimeGrid(1.0, 64),
                                      seed=0, band=4)
        short = estimate_observability(sys_n, window(), TimeGrid(0.2, 64),
                                       seed=0, band=4)
        assert short.kappa_obs > 100.0 * long.kappa_obs

    def test_weighted_mode_is_optional_and_distinct(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 32)
        tg = TimeGrid(1.0, 64)
        sys_n = nsk_system(grid)
        ws = make_weight_set(grid, window(), 1.0, s=8.0, lam=1.5)
        plain = estimate_observability(sys_n, window(), tg, seed=0, band=4)
        weighted = estimate_observability(sys_n, window(), tg, seed=0, band=4,
                                          weight_mode="carleman", weights=ws)
        assert plain.weight_mode == "plain"
        assert weighted.weight_mode == "carleman"
        assert weighted.lambda_min > 0.0
        assert weighted.lambda_min != plain.lambda_min

    def test_report_carries_the_run_description(self):
        grid = TorusGrid.regular(1, 2 * np.pi, 32)
        tg = TimeGrid(1.0, 64)
        rep = estimate_observability(nsk_system(grid), window(), tg, seed=5, band=4)
        assert rep.kind == "linearized_nsk"
        assert rep.T == 1.0
        assert rep.seed == 5
        assert rep.terminal_weight == "l2"
        assert rep.cg_total >= rep.inverse_iterations
