import numpy as np
import pytest

from netmee import (
    Dataset,
    FirstStageParams,
    Graph,
    MomentProblem,
    ParamLayout,
    RankDeficiencyError,
    ValidationError,
    confidence_interval,
    default_true_params,
    generate_dataset,
    load_estimates_artifact,
    ring,
    solve_equilibrium,
    solve_step1,
    solve_step2,
    two_step,
    wald_test,
    write_covariance_csv,
    write_estimates_csv,
)
from netmee.gmm import GmmResult, _newton_root
from netmee.moments import CellParams, ParamVector, conditional_mean_v

from _oracles import newton_logit, wls


def lambda_free_truth():
    base = default_true_params()
    return ParamVector(first=FirstStageParams(base.first.beta_d, 0.0),
                       cells=base.cells)


@pytest.fixture(scope="module")
def ring_fit():
    g = ring(500)
    data = generate_dataset(g, default_true_params(), np.random.default_rng(21))
    problem = MomentProblem(g, data)
    step1 = solve_step1(problem)
    res = solve_step2(problem, step1)
    return g, data, problem, step1, res


class TestStep1:
    def test_degenerate_interference_matches_oracles(self):
        n = 500
        g = Graph.from_edges(n, [])
        data = generate_dataset(g, lambda_free_truth(), np.random.default_rng(4))
        problem = MomentProblem(g, data)
        step1 = solve_step1(problem)

        beta_oracle = newton_logit(data.z_design, data.d)
        assert np.max(np.abs(step1.first.beta_d - beta_oracle)) < 1e-6

        p = solve_equilibrium(g, data.z_design,
                              FirstStageParams(step1.first.beta_d, 0.0)).p
        for t in problem.layout.labels:
            mask = (data.labels[:, 0] == t.own) & (data.labels[:, 1] == t.neigh)
            design = np.column_stack([data.x_design, conditional_mean_v(p, t.own)])
            coef = wls(design, data.y, mask)
            cell = step1.cells[t]
            assert np.max(np.abs(cell.beta_x - coef[:-1])) < 1e-8
            assert abs(cell.beta_p - coef[-1]) < 1e-8

    def test_zero_noise_fixture_has_tiny_objective(self):
        n = 400
        g = ring(n)
        truth = default_true_params()
        rng = np.random.default_rng(17)
        x = rng.standard_normal((n, 1))
        z = rng.standard_normal((n, 1))
        zd = np.column_stack([np.ones(n), z])
        state = solve_equilibrium(g, zd, truth.first, derivatives=False)
        nu = rng.logistic(size=n)
        d = (zd @ truth.first.beta_d + truth.first.lam * state.shares >= nu).astype(int)
        from netmee import exposure_map

        labels = exposure_map(g, d)
        m = np.where(d == 1, state.p / 2.0, (1.0 + state.p) / 2.0)
        y = np.zeros(n)
        xd = np.column_stack([np.ones(n), x])
        for t, cell in truth.cells.items():
            mask = (labels[:, 0] == t.own) & (labels[:, 1] == t.neigh)
            y[mask] = xd[mask] @ cell.beta_x + cell.beta_p * m[mask]
        data = Dataset(y=y, d=d, x=x, z=z, labels=labels)
        problem = MomentProblem(g, data)
        step1 = solve_step1(problem)
        gbar = problem.gbar(problem.layout.pack(step1))
        assert float(gbar @ gbar) < 1e-12
        # Estimates land near the generating values (sampling error only).
        flat = problem.layout.pack(step1)
        flat_truth = problem.layout.pack(truth)
        assert np.max(np.abs(flat - flat_truth)) < 0.75

    def test_permutation_stability(self):
        n = 300
        g = ring(n)
        data = generate_dataset(g, default_true_params(), np.random.default_rng(9))
        problem = MomentProblem(g, data)
        flat = problem.layout.pack(solve_step1(problem))

        rng = np.random.default_rng(1)
        perm = rng.permutation(n)
        inv = np.empty(n, dtype=int)
        inv[perm] = np.arange(n)
        g_perm = Graph.from_edges(n, [[inv[u], inv[v]] for u, v in g.edges])
        data_perm = Dataset(y=data.y[perm], d=data.d[perm], x=data.x[perm],
                            z=data.z[perm], labels=data.labels[perm])
        problem_perm = MomentProblem(g_perm, data_perm)
        flat_perm = problem_perm.layout.pack(solve_step1(problem_perm))
        assert np.max(np.abs(flat - flat_perm)) < 1e-10

    def test_rank_deficient_cell_design_raises(self):
        n = 400
        g = ring(n)
        rng = np.random.default_rng(12)
        base = generate_dataset(g, default_true_params(), rng)
        x_dup = np.column_stack([base.x[:, 0], base.x[:, 0]])
        truth = default_true_params()
        cells = {t: CellParams(beta_x=np.array([c.beta_x[0], c.beta_x[1], 0.0]),
                               beta_p=c.beta_p)
                 for t, c in truth.cells.items()}
        y = base.y  # outcome left as-is; only the design is collinear
        data = Dataset(y=y, d=base.d, x=x_dup, z=base.z, labels=base.labels)
        with pytest.raises(RankDeficiencyError, match="beta_X"):
            two_step(g, data)


class TestStep2:
    def test_ring1000_intercept_se_in_band(self):
        # Single fit on the baseline ring design: reported SE of the selection
        # intercept should sit near the cross-replication dispersion (~0.168).
        g = ring(1000)
        data = generate_dataset(g, default_true_params(), np.random.default_rng(77))
        res = two_step(g, data)
        se = res.std_err[res.layout.names.index("beta_D0")]
        assert 0.7 * 0.168 <= se <= 1.3 * 0.168

    def test_bit_identical_rerun(self):
        g = ring(400)
        data = generate_dataset(g, default_true_params(), np.random.default_rng(13))
        a = two_step(g, data)
        b = two_step(g, data)
        assert np.array_equal(a.flat, b.flat)
        assert np.array_equal(a.std_err, b.std_err)
        assert np.array_equal(a.omega_beta, b.omega_beta)

    def test_point_estimate_matches_step1(self, ring_fit):
        _, _, problem, step1, res = ring_fit
        assert np.max(np.abs(res.flat - problem.layout.pack(step1))) < 1e-8

    def test_sandwich_simplifies_with_inverse_weight(self, ring_fit):
        _, _, _, _, res = ring_fit
        simplified = np.linalg.inv(
            res.g_jacobian.T @ np.linalg.inv(res.omega_g) @ res.g_jacobian
        )
        scale = np.max(np.abs(simplified))
        assert np.max(np.abs(res.omega_beta - simplified)) / scale < 1e-8

    def test_result_invariants(self, ring_fit):
        _, _, _, _, res = ring_fit
        assert res.converged
        assert res.objective >= 0.0
        # Just-identified root: every moment coordinate below solve tolerance.
        assert res.diagnostics["moment_sup_norm"] <= 1e-8
        assert np.allclose(res.omega_beta, res.omega_beta.T, atol=0)
        assert np.all(np.linalg.eigvalsh(res.omega_beta) > 0)
        assert np.all(res.std_err > 0)

    def test_richardson_jacobian_agreement(self, ring_fit):
        _, _, problem, _, res = ring_fit
        coarse = problem.jacobian_fd(res.flat, step_scale=1e-6)
        fine = problem.jacobian_fd(res.flat, step_scale=5e-7)
        rel = np.max(np.abs(coarse - fine)) / np.max(np.abs(coarse))
        assert rel < 1e-4

    def test_objective_non_increasing(self, ring_fit):
        _, _, problem, step1, _ = ring_fit
        start = problem.layout.pack(step1) + 0.25
        _, info = _newton_root(problem, start)
        history = np.asarray(info.objective_history)
        assert info.converged
        assert np.all(np.diff(history) <= 0.0)


class TestInference:
    def test_ci_arithmetic(self, ring_fit):
        _, _, _, _, res = ring_fit
        ci = confidence_interval(res, level=0.95)
        z = 1.959964
        assert np.allclose(ci[:, 0], res.flat - z * res.std_err, atol=1e-6)
        assert np.allclose(ci[:, 1], res.flat + z * res.std_err, atol=1e-6)

    def test_ci_reference_numbers(self):
        layout = ParamLayout(dim_z=1, dim_x=1)
        flat = np.full(layout.size, 1.0)
        res = GmmResult(
            layout=layout, beta=layout.unpack(flat), flat=flat,
            std_err=np.full(layout.size, 0.1), omega_g=None, g_jacobian=None,
            omega_beta=np.eye(layout.size), objective=0.0, converged=True,
            psd_repaired=False, n=100,
        )
        ci = confidence_interval(res, level=0.95)
        assert ci[0, 0] == pytest.approx(0.80400, abs=5e-6)
        assert ci[0, 1] == pytest.approx(1.19600, abs=5e-6)

    def test_degenerate_interval(self):
        layout = ParamLayout(dim_z=1, dim_x=1)
        flat = np.linspace(0.0, 1.0, layout.size)
        res = GmmResult(
            layout=layout, beta=layout.unpack(flat), flat=flat,
            std_err=np.zeros(layout.size), omega_g=None, g_jacobian=None,
            omega_beta=np.zeros((layout.size, layout.size)), objective=0.0,
            converged=True, psd_repaired=False, n=10,
        )
        ci = confidence_interval(res)
        assert np.array_equal(ci[:, 0], flat)
        assert np.array_equal(ci[:, 1], flat)

    def test_wald_zero_restriction(self, ring_fit):
        _, _, _, _, res = ring_fit
        stat, pvalue = wald_test(res, np.zeros(1),
                                 np.eye(res.flat.size)[:, :1], 1)
        assert stat == 0.0
        assert pvalue == 1.0

    def test_wald_scalar_equals_squared_t(self, ring_fit):
        _, _, _, _, res = ring_fit
        j = res.layout.lam_index()
        target = 0.5
        basis = np.zeros((res.flat.size, 1))
        basis[j, 0] = 1.0
        stat, _ = wald_test(res, lambda b: np.array([b[j] - target]), basis, 1)
        t_ratio = (res.flat[j] - target) / res.std_err[j]
        assert stat == pytest.approx(t_ratio**2, abs=1e-10)

    def test_wald_singular_restriction(self, ring_fit):
        _, _, _, _, res = ring_fit
        with pytest.raises(RankDeficiencyError):
            wald_test(res, np.zeros(1), np.zeros((res.flat.size, 1)), 1)


class TestArtifacts:
    def test_round_trip(self, tmp_path, ring_fit):
        _, _, _, _, res = ring_fit
        est = tmp_path / "estimates.csv"
        cov = tmp_path / "covariance.csv"
        write_estimates_csv(est, res)
        write_covariance_csv(cov, res)
        loaded = load_estimates_artifact(est, cov)
        assert loaded.names == res.names
        assert np.array_equal(loaded.flat, res.flat)
        assert np.array_equal(loaded.std_err, res.std_err)
        assert np.allclose(loaded.scaled_covariance(), res.scaled_covariance(),
                           rtol=0, atol=0)

    def test_mismatched_covariance_rejected(self, tmp_path, ring_fit):
        _, _, _, _, res = ring_fit
        est = tmp_path / "estimates.csv"
        cov = tmp_path / "covariance.csv"
        write_estimates_csv(est, res)
        cov.write_text("param,foo\nfoo,1.0\n")
        with pytest.raises(ValidationError):
            load_estimates_artifact(est, cov)
