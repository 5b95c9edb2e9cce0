"""Nonlinear corrections, the full integrator, and the fixed-point loop."""

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from nskctrl import (
    BallExit,
    CoefficientFunction,
    ControlRegion,
    GridMismatch,
    ModelParams,
    NeighborhoodExceeded,
    PicardDivergence,
    RankMismatch,
    ShapeMismatch,
    SpectralField,
    StepRejected,
    TorusGrid,
    ValidationError,
    derive_constants,
    make_weight_set,
    sobolev_norm,
)
from nskctrl.dynamics import TimeGrid, assemble_blocks, propagate
from nskctrl.nonlinear import (
    UnderlineFunctions,
    _compose,
    _xy_distance,
    eval_nonlinear,
    evaluate_source_series,
    picard_control_loop,
    simulate_nonlinear,
    source_norm,
)
from nskctrl.spectral import differentiate

RHO_STAR = 2.0
ETA = 1.5


def make_params(kappa_rho=(0.3, 0.1, 0.02), mu_rho=(0.8, 0.05), nu_rho=(0.1, -0.02),
                P_rho=(0.0, 0.5, 0.25, 0.05)):
    return ModelParams(
        rho_star=RHO_STAR,
        P=CoefficientFunction.from_polynomial_in_rho(P_rho, RHO_STAR),
        kappa=CoefficientFunction.from_polynomial_in_rho(kappa_rho, RHO_STAR),
        mu=CoefficientFunction.from_polynomial_in_rho(mu_rho, RHO_STAR),
        nu=CoefficientFunction.from_polynomial_in_rho(nu_rho, RHO_STAR),
        eta=ETA,
    )


def bare_params():
    """Laws whose shifted versions all vanish: only the density-free
    convective and acceleration corrections survive."""
    return make_params(kappa_rho=(0.3,), mu_rho=(0.8,), nu_rho=(0.1,),
                       P_rho=(0.0, 1.0))


def window():
    return ControlRegion.from_widths(np.pi, 2.2, 2.6, np.pi)


def sample_data(grid, amp):
    x = grid.axis_points(0)
    return SpectralField.from_grid_values(
        grid,
        np.stack([amp * (np.cos(x) + 0.3 * np.sin(2 * x)),
                  amp * (0.5 * np.sin(x) - 0.2 * np.cos(3 * x))]),
    )


def fine_derivative(vals, order=1):
    n = vals.size
    c = np.fft.fft(vals)
    k = 2 * np.pi * np.fft.fftfreq(n, d=2 * np.pi / n)
    if order == 1:
        k = k.copy()
        k[n // 2] = 0.0
        return np.real(np.fft.ifft(1j * k * c))
    return np.real(np.fft.ifft(-(k ** 2) * c))


def trig_profile(rng, pts, kmax, scale):
    vals = np.zeros_like(pts)
    terms = []
    for n in range(1, kmax + 1):
        al, be = rng.normal(size=2) * scale / n
        terms.append((n, al, be))
        vals = vals + al * np.cos(n * pts) + be * np.sin(n * pts)
    return vals, terms


def eval_profile(terms, pts):
    vals = np.zeros_like(pts)
    for n, al, be in terms:
        vals = vals + al * np.cos(n * pts) + be * np.sin(n * pts)
    return vals


class TestUnderlineFunctions:
    def test_closed_form_recentering(self):
        uf = UnderlineFunctions.from_params(make_params())

        def kap(r):
            return 0.3 + 0.1 * r + 0.02 * r * r

        def pp(r):
            return 0.5 + 0.5 * r + 0.15 * r * r

        for a in (0.13, -0.2, 0.37):
            r = RHO_STAR * a + RHO_STAR
            assert uf.kappa_u.value_at_offset(a) == pytest.approx(
                RHO_STAR * (kap(r) - kap(RHO_STAR)), abs=1e-13)
            assert uf.mu_u.value_at_offset(a) == pytest.approx(
                0.05 * (r - RHO_STAR) / RHO_STAR, abs=1e-13)
            assert uf.nu_u.value_at_offset(a) == pytest.approx(
                -0.02 * (r - RHO_STAR) / RHO_STAR, abs=1e-13)
            assert uf.Pprime_u.value_at_offset(a) == pytest.approx(
                pp(r) - pp(RHO_STAR), abs=1e-13)

    @settings(max_examples=60, deadline=None)
    @given(
        c1=st.floats(-2.0, 2.0),
        c2=st.floats(-1.0, 1.0),
        a=st.floats(-0.6, 0.6),
    )
    def test_shifted_laws_vanish_at_zero_deviation(self, c1, c2, a):
        assume(0.3 + RHO_STAR * c1 + RHO_STAR ** 2 * c2 > 0.05)
        params = make_params(kappa_rho=(0.3, c1, c2))
        uf = UnderlineFunctions.from_params(params)
        assert uf.kappa_u.value_at_offset(0.0) == 0.0
        direct = RHO_STAR * (
            params.kappa.value_at_offset(RHO_STAR * a) - params.kappa.value_at_offset(0.0))
        assert uf.kappa_u.value_at_offset(a) == pytest.approx(direct, abs=1e-12)

    def test_band_travels_with_the_laws(self):
        uf = UnderlineFunctions.from_params(make_params())
        assert uf.rho_star == RHO_STAR
        assert uf.eta == ETA


class TestEvalNonlinear:
    def setup_method(self):
        self.grid = TorusGrid.regular(1, 2 * np.pi, 32)
        self.x = self.grid.axis_points(0)
        self.uf = UnderlineFunctions.from_params(make_params())

    def test_zero_deviation_leaves_only_convection(self):
        a = SpectralField.zero(self.grid, 1)
        u = SpectralField.from_grid_values(
            self.grid, 0.2 * np.sin(self.x) + 0.1 * np.cos(2 * self.x))
        du = SpectralField.from_grid_values(self.grid, 0.05 * np.cos(self.x))
        f_a, f_u = eval_nonlinear(self.uf, a, u, du)
        assert np.max(np.abs(f_a.coeffs)) == 0.0
        uv = np.real(u.grid_values()[0])
        dux = np.real(differentiate(u, "grad").grid_values()[0])
        np.testing.assert_allclose(
            np.real(f_u.grid_values()[0]), -uv * dux, atol=1e-14)

    def test_transport_identity_for_constant_velocity(self):
        amp, c = 0.6, 0.7
        a = SpectralField.from_grid_values(self.grid, amp * np.cos(self.x))
        u = SpectralField.from_grid_values(self.grid, np.full(32, c))
        f_a, _ = eval_nonlinear(self.uf, a, u, SpectralField.zero(self.grid, 1))
        np.testing.assert_allclose(
            np.real(f_a.grid_values()[0]), amp * c * np.sin(self.x), atol=1e-13)

    def test_each_correction_matches_fine_grid_oracle(self):
        rng = np.random.default_rng(7)
        fine_x = TorusGrid.regular(1, 2 * np.pi, 64).axis_points(0)
        a_vals, a_t = trig_profile(rng, self.x, 3, 0.08)
        u_vals, u_t = trig_profile(rng, self.x, 3, 0.08)
        w_vals, w_t = trig_profile(rng, self.x, 3, 0.05)
        a = SpectralField.from_grid_values(self.grid, a_vals)
        u = SpectralField.from_grid_values(self.grid, u_vals)
        w = SpectralField.from_grid_values(self.grid, w_vals)
        zero = SpectralField.zero(self.grid, 1)
        af = eval_profile(a_t, fine_x)
        uff = eval_profile(u_t, fine_x)
        wf = eval_profile(w_t, fine_x)

        def run(params, du):
            uf = UnderlineFunctions.from_params(params)
            f_a, f_u = eval_nonlinear(uf, a, u, du)
            return np.real(f_a.grid_values()[0]), np.real(f_u.grid_values()[0])

        def close(got, oracle_fine):
            rel = np.max(np.abs(got - oracle_fine[::2])) / np.max(np.abs(oracle_fine))
            assert rel <= 1e-9

        fa1, fu1 = run(bare_params(), zero)
        close(fa1, -uff * fine_derivative(af))
        close(fu1, -(1.0 + af) * uff * fine_derivative(uff))

        _, fu3 = run(bare_params(), w)
        close(fu3 - fu1, af * wf)

        visc = make_params(kappa_rho=(0.3,), P_rho=(0.0, 1.0),
                           mu_rho=(0.8, 0.05, 0.01), nu_rho=(0.1, -0.02, 0.005))
        uf2 = UnderlineFunctions.from_params(visc)
        _, fu2 = run(visc, zero)
        mu_f = uf2.mu_u.value_at_offset(af)
        nu_f = uf2.nu_u.value_at_offset(af)
        close(fu2 - fu1,
              fine_derivative(2.0 * mu_f * fine_derivative(uff))
              + fine_derivative(nu_f * fine_derivative(uff)))

        pres = make_params(kappa_rho=(0.3,), mu_rho=(0.8,), nu_rho=(0.1,))
        uf4 = UnderlineFunctions.from_params(pres)
        _, fu4 = run(pres, zero)
        pp_f = uf4.Pprime_u.value_at_offset(af)
        close(fu4 - fu1, pp_f * fine_derivative(af))

        capi = make_params(mu_rho=(0.8,), nu_rho=(0.1,), P_rho=(0.0, 1.0))
        uf5 = UnderlineFunctions.from_params(capi)
        _, fu5 = run(capi, zero)
        kap_f = uf5.kappa_u.value_at_offset(af)
        inner = kap_f * fine_derivative(af, 2) + fine_derivative(kap_f) * fine_derivative(af)
        close(fu5 - fu1, (1.0 + af) * fine_derivative(inner))

    def test_band_violation_reports_deviation(self):
        a = SpectralField.from_grid_values(self.grid, 0.9 * np.cos(self.x))
        u = SpectralField.zero(self.grid, 1)
        with pytest.raises(NeighborhoodExceeded) as info:
            eval_nonlinear(self.uf, a, u, u)
        assert info.value.max_deviation == pytest.approx(1.8)

    def test_field_ranks_enforced(self):
        a = SpectralField.zero(self.grid, 1)
        u = SpectralField.zero(self.grid, 1)
        with pytest.raises(RankMismatch):
            eval_nonlinear(self.uf, SpectralField.zero(self.grid, 2), u, u)
        other = SpectralField.zero(TorusGrid.regular(1, 2 * np.pi, 16), 1)
        with pytest.raises(GridMismatch):
            eval_nonlinear(self.uf, a, other, other)


class TestSimulateNonlinear:
    def setup_method(self):
        self.params = make_params()
        self.grid = TorusGrid.regular(1, 2 * np.pi, 32)
        self.x = self.grid.axis_points(0)
        self.tg = TimeGrid(1.0, 64)

    def test_zero_data_stays_at_the_reference_state(self):
        data = SpectralField.zero(self.grid, 2)
        out = simulate_nonlinear(self.params, data, None, self.tg)
        assert np.max(np.abs(out.trajectory.states)) == 0.0
        assert out.inf_rho == pytest.approx(RHO_STAR)

    def test_tiny_data_matches_the_linear_flow_quadratically(self):
        sysl = assemble_blocks(derive_constants(self.params), self.grid,
                               "linearized_nsk")
        gaps = []
        for amp in (1e-6, 1e-5):
            data = sample_data(self.grid, amp)
            nl = simulate_nonlinear(self.params, data, None, self.tg)
            lin = propagate(sysl, data, self.tg)
            gaps.append(np.max(np.abs(nl.trajectory.states - lin.states)))
        assert gaps[0] <= 1e-10
        assert 80.0 < gaps[1] / gaps[0] < 120.0

    def test_manufactured_solution_converges_at_second_order(self):
        uf = UnderlineFunctions.from_params(self.params)
        sysl = assemble_blocks(derive_constants(self.params), self.grid,
                               "linearized_nsk")
        prof_a = SpectralField.from_grid_values(
            self.grid, 0.05 * (np.cos(self.x) + 0.4 * np.sin(2 * self.x)))
        prof_u = SpectralField.from_grid_values(
            self.grid, 0.05 * (np.sin(self.x) - 0.3 * np.cos(2 * self.x)))

        def exact(tg):
            nodes = tg.nodes
            states = np.zeros((nodes.size, self.grid.npoints, 2), dtype=complex)
            dstates = np.zeros_like(states)
            for j, t in enumerate(nodes):
                g, gp = np.cos(0.7 * t), -0.7 * np.sin(0.7 * t)
                states[j, :, 0] = g * prof_a.coeffs[0].ravel()
                states[j, :, 1] = g * prof_u.coeffs[0].ravel()
                dstates[j, :, 0] = gp * prof_a.coeffs[0].ravel()
                dstates[j, :, 1] = gp * prof_u.coeffs[0].ravel()
            return states, dstates

        errs = []
        for M in (32, 64):
            tg = TimeGrid(1.0, M)
            states, dstates = exact(tg)
            residual = dstates - np.einsum("kij,nkj->nki", sysl.blocks, states)
            residual = residual - evaluate_source_series(
                uf, sysl, tg, states, dstates).reshape(M + 1, 2, -1).swapaxes(-1, -2)
            sources = np.ascontiguousarray(
                residual.swapaxes(-1, -2)).reshape(M + 1, 2, *self.grid.N)
            data = SpectralField(self.grid, states[0].T.reshape(2, *self.grid.N).copy())
            out = simulate_nonlinear(self.params, data, None, tg, sources=sources)
            errs.append(np.max(np.abs(out.trajectory.states - states)))
        assert 3.4 < errs[0] / errs[1] < 4.6

    def test_non_finite_controls_are_rejected(self):
        data = sample_data(self.grid, 1e-2)
        controls = np.zeros((self.tg.M + 1, 2, *self.grid.N))
        controls[3, 0, 5] = np.nan
        with pytest.raises(StepRejected):
            simulate_nonlinear(self.params, data, controls, self.tg,
                               cutoff=window().chi0_on(self.grid))

    def test_out_of_band_data_rejected(self):
        data = SpectralField.from_grid_values(
            self.grid, np.stack([0.9 * np.cos(self.x), 0.0 * self.x]))
        with pytest.raises(NeighborhoodExceeded):
            simulate_nonlinear(self.params, data, None, self.tg)


def band_trajectory(seed, grid, tg, scale):
    """Smooth band-limited two-component trajectory with exact derivative."""
    rng = np.random.default_rng(seed)
    x = grid.axis_points(0)
    profs = []
    for _ in range(2):
        vals, _terms = trig_profile(rng, x, 3, 1.0)
        profs.append(SpectralField.from_grid_values(grid, vals).coeffs[0].ravel())
    states = np.zeros((tg.M + 1, grid.npoints, 2), dtype=complex)
    dstates = np.zeros_like(states)
    for j, t in enumerate(tg.nodes):
        g, gp = np.cos(0.9 * t), -0.9 * np.sin(0.9 * t)
        for comp in range(2):
            states[j, :, comp] = scale * g * profs[comp]
            dstates[j, :, comp] = scale * gp * profs[comp]
    return states, dstates


class TestSourceSeriesProperties:
    def setup_method(self):
        self.params = make_params()
        self.uf = UnderlineFunctions.from_params(self.params)
        self.grid = TorusGrid.regular(1, 2 * np.pi, 32)
        self.tg = TimeGrid(1.0, 16)
        self.system = assemble_blocks(derive_constants(self.params), self.grid,
                                      "linearized_nsk")

    def test_source_norm_scales_quadratically_with_ball_radius(self):
        radii = (1e-1, 1e-2, 1e-3)
        norms = []
        for radius in radii:
            states, dstates = band_trajectory(3, self.grid, self.tg, radius)
            series = evaluate_source_series(self.uf, self.system, self.tg,
                                            states, dstates)
            norms.append(source_norm(self.grid, self.tg, series))
        slope = np.polyfit(np.log10(radii), np.log10(norms), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.1)

    def test_source_differences_are_lipschitz_in_the_ball(self):
        radii = (1e-1, 1e-2, 1e-3)
        gaps = []
        constants = []
        for radius in radii:
            s1, d1 = band_trajectory(3, self.grid, self.tg, radius)
            s2, d2 = band_trajectory(4, self.grid, self.tg, radius)
            s2 = s1 + 0.1 * (s2 - s1)
            d2 = d1 + 0.1 * (d2 - d1)
            f1 = evaluate_source_series(self.uf, self.system, self.tg, s1, d1)
            f2 = evaluate_source_series(self.uf, self.system, self.tg, s2, d2)
            dist = _xy_distance(self.grid, self.tg, s1 - s2, d1 - d2)
            gap = source_norm(self.grid, self.tg, f1 - f2)
            gaps.append(gap)
            constants.append(gap / (radius * dist))
        slope = np.polyfit(np.log10(radii), np.log10(gaps), 1)[0]
        assert slope == pytest.approx(2.0, abs=0.1)
        assert max(constants) / min(constants) < 2.0

    def test_composition_bound_is_stable_under_refinement(self):
        fn = CoefficientFunction((0.0, 0.7, -0.3, 0.12))
        ratios = []
        for n in (32, 64):
            grid = TorusGrid.regular(1, 2 * np.pi, n)
            x = grid.axis_points(0)
            fld = SpectralField.from_grid_values(
                grid, 0.05 * (np.cos(x) + 0.4 * np.sin(2 * x) - 0.2 * np.cos(3 * x)))
            comp = _compose(fn, fld)
            ratios.append(sobolev_norm(comp, 2) / sobolev_norm(fld, 2))
        assert ratios[1] == pytest.approx(ratios[0], rel=1e-9)

    def test_series_shapes_validated(self):
        states = np.zeros((3, self.grid.npoints, 2), dtype=complex)
        with pytest.raises(ShapeMismatch):
            evaluate_source_series(self.uf, self.system, self.tg, states, states)
        with pytest.raises(ShapeMismatch):
            source_norm(self.grid, self.tg, np.zeros((4, 2, 32)))


class TestPicardControlLoop:
    def setup_method(self):
        self.params = make_params()
        self.grid = TorusGrid.regular(1, 2 * np.pi, 32)
        self.tg = TimeGrid(1.0, 64)
        self.region = window()

    def run_loop(self, data, **kwargs):
        options = dict(ball_radius=1.0, tol=1e-6, max_iters=20, epsilon=1e-8,
                       cg_tol=1e-8, cg_max_iters=600)
        options.update(kwargs)
        return picard_control_loop(self.params, data, self.region, self.tg,
                                   **options)

    def test_zero_data_converges_immediately_with_zero_control(self):
        state, result = self.run_loop(SpectralField.zero(self.grid, 2))
        assert state.distances == [0.0]
        assert np.max(np.abs(state.controls)) == 0.0
        assert result.cg_iterations == 0
        assert state.previous is None
        assert state.inf_rho == pytest.approx(RHO_STAR)

    def test_small_data_contracts_and_replay_reaches_target(self):
        state, result = self.run_loop(sample_data(self.grid, 1e-2))
        assert len(state.distances) <= 8
        assert max(state.contraction_factors) < 0.05
        assert state.nonlinear_terminal_norm <= 1e-3 * result.initial_norm
        assert state.nonlinear_terminal_norm == pytest.approx(
            result.terminal_norm, rel=1e-5)
        assert state.inf_rho > 1.9
        assert all(b <= math.log(1.0) for b in state.log_ball_norms)
        assert len(state.source_norms) == len(state.distances)
        assert state.source_norms[0] == 0.0
        assert state.source_norms[-1] > 0.0

    def test_halving_the_data_never_costs_more_iterations(self):
        counts = []
        tops = []
        for amp in (1e-2, 5e-3, 2.5e-3):
            state, _ = self.run_loop(sample_data(self.grid, amp))
            counts.append(len(state.distances))
            tops.append(max(state.contraction_factors))
        assert counts == sorted(counts, reverse=True)
        assert tops == sorted(tops, reverse=True)

    def test_terminal_defect_tracks_the_stop_tolerance(self):
        tg = TimeGrid(1.0, 128)
        data = sample_data(self.grid, 1.6e-1)
        terminals = []
        for tol in (1e-1, 1e-2, 1e-3):
            state, _ = picard_control_loop(
                self.params, data, self.region, tg,
                ball_radius=100.0, tol=tol, max_iters=40,
                epsilon=1e-9, cg_tol=1e-9, cg_max_iters=1200, max_shrinks=0)
            terminals.append(state.nonlinear_terminal_norm)
        assert terminals[0] / terminals[1] >= 3.0
        assert terminals[1] / terminals[2] >= 3.0

    def test_ball_exit_reported_without_shrink_budget(self):
        with pytest.raises(BallExit):
            self.run_loop(sample_data(self.grid, 1e-2), ball_radius=0.1,
                          max_shrinks=0)

    def test_shrink_policy_rescales_the_data(self):
        state, _ = self.run_loop(sample_data(self.grid, 1e-2), ball_radius=0.11,
                                 max_shrinks=4)
        assert state.scale == pytest.approx(0.125)
        assert state.log_ball_norms[0] < math.log(0.11)

    def test_tolerance_below_solver_floor_is_divergence(self):
        with pytest.raises(PicardDivergence) as info:
            self.run_loop(sample_data(self.grid, 1e-2), tol=1e-14, max_iters=4,
                          max_shrinks=0)
        assert len(info.value.factors) == 3

    def test_weighted_ball_norms_in_carleman_mode(self):
        weights = make_weight_set(self.grid, self.region, 1.0, s=8.0, lam=1.5)
        state, result = self.run_loop(
            sample_data(self.grid, 1e-2), ball_radius=5.0, cg_max_iters=800,
            weight_mode="carleman", weights=weights)
        assert len(state.distances) <= 8
        assert max(state.contraction_factors) < 0.1
        assert np.max(np.abs(state.controls[-1])) == 0.0
        assert all(b < math.log(5.0) for b in state.log_ball_norms)
        assert state.nonlinear_terminal_norm <= 1e-3 * result.initial_norm

    def test_configuration_validated(self):
        data = sample_data(self.grid, 1e-2)
        with pytest.raises(ValidationError):
            self.run_loop(data, ball_radius=0.0)
        with pytest.raises(ValidationError):
            self.run_loop(data, smallness=-1.0)
        with pytest.raises(ShapeMismatch):
            self.run_loop(SpectralField.zero(self.grid, 1))
