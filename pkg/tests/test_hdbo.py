import numpy as np
import pytest
from scipy.optimize import minimize

from rmlbo import bench, gp
from rmlbo.hdbo import (
    ConfigError,
    HDBOConfig,
    RunAborted,
    SimulationRecord,
    acquisition_maximize,
    local_prior_refine,
    read_trace,
    run_hdbo_rml,
    select_maximizers,
    write_trace,
)
from rmlbo.problems import GaussianSpec, log_prior
from rmlbo.rml import RMLInstance, draw_randomizations, objective
from rmlbo.seeding import STREAM_RANDOMIZE, labeled_stream


def bowl_problem(D=20, d=2, seed=1, prior="uniform", noise_sd=None):
    return bench.make_problem("quadratic-bowl", D=D, d=d, seed=seed, prior=prior,
                              noise_sd=noise_sd)


def drawn(problem, n_rml, seed=11):
    return draw_randomizations(problem, n_rml, labeled_stream(seed, STREAM_RANDOMIZE))


class TestAcquisitionMaximize:
    def _model(self, seed):
        rng = np.random.default_rng(seed)
        X = rng.uniform(-1.5, 1.5, (25, 3))
        z = np.sin(2 * X[:, 0]) + X[:, 1] ** 2 - 0.5 * X[:, 2]
        return gp.fit(X, z, rng)

    def test_beats_fresh_random_probes(self):
        model = self._model(0)
        lo, hi = -np.sqrt(3) * np.ones(3), np.sqrt(3) * np.ones(3)
        ystar = acquisition_maximize(model, (lo, hi), 2.0, np.random.default_rng(100))
        probes = np.random.default_rng(200).uniform(lo, hi, (1000, 3))
        assert gp.ucb(model, ystar, 2.0) >= np.max(gp.ucb(model, probes, 2.0))

    def test_empty_model_returns_in_domain_point(self):
        model = gp.empty_model(gp.KernelParams.from_natural(1.0, 1.0), dim=2)
        lo, hi = -np.ones(2), np.ones(2)
        y = acquisition_maximize(model, (lo, hi), 1.0, np.random.default_rng(0))
        assert np.all(y >= lo) and np.all(y <= hi)

    def test_deterministic_per_seed(self):
        model = self._model(3)
        lo, hi = -np.sqrt(3) * np.ones(3), np.sqrt(3) * np.ones(3)
        a = acquisition_maximize(model, (lo, hi), 2.0, np.random.default_rng(5))
        b = acquisition_maximize(model, (lo, hi), 2.0, np.random.default_rng(5))
        assert a.tobytes() == b.tobytes()

    def test_always_inside_box(self):
        model = self._model(4)
        lo, hi = -np.sqrt(3) * np.ones(3), np.sqrt(3) * np.ones(3)
        for seed in range(5):
            y = acquisition_maximize(model, (lo, hi), 2.0, np.random.default_rng(seed))
            assert np.all(y >= lo) and np.all(y <= hi)


class TestLocalPriorRefine:
    def test_identity_covariance_midpoint(self):
        inst = RMLInstance(1, np.zeros(2), np.array([2.0, -4.0]))
        prior = GaussianSpec(np.zeros(2), np.eye(2))
        x0 = np.array([1.0, 1.0])
        z = local_prior_refine(x0, inst, prior, 1.0)
        assert np.allclose(z, (x0 + inst.prior_mean_n) / 2)

    def test_eta_to_zero_returns_start(self):
        rng = np.random.default_rng(0)
        inst = RMLInstance(1, np.zeros(2), rng.standard_normal(4))
        prior = GaussianSpec(np.zeros(4), np.eye(4) + 0.1)
        x0 = rng.standard_normal(4)
        assert np.max(np.abs(local_prior_refine(x0, inst, prior, 1e-12) - x0)) < 1e-6

    def test_eta_to_infinity_returns_prior_mean(self):
        rng = np.random.default_rng(1)
        inst = RMLInstance(1, np.zeros(2), rng.standard_normal(4))
        prior = GaussianSpec(np.zeros(4), np.eye(4) + 0.1)
        x0 = rng.standard_normal(4)
        z = local_prior_refine(x0, inst, prior, 1e12)
        assert np.max(np.abs(z - inst.prior_mean_n)) < 1e-6

    def test_matches_numeric_proximal_maximizer(self):
        rng = np.random.default_rng(7)
        q, r = np.linalg.qr(rng.standard_normal((6, 6)))
        cov = q @ np.diag(rng.uniform(0.5, 2.0, 6)) @ q.T
        cov = 0.5 * (cov + cov.T)
        prior = GaussianSpec(np.zeros(6), cov)
        inst = RMLInstance(1, np.zeros(2), rng.standard_normal(6))
        x0 = rng.standard_normal(6)
        eta = 0.25
        z = local_prior_refine(x0, inst, prior, eta)
        cov_inv = np.linalg.inv(cov)

        def neg(x):
            dm = x - inst.prior_mean_n
            return 0.5 * dm @ cov_inv @ dm + ((x - x0) @ (x - x0)) / (2 * eta)

        res = minimize(neg, x0, method="L-BFGS-B", jac="3-point",
                       options={"gtol": 1e-14, "ftol": 1e-18})
        assert np.max(np.abs(res.x - z)) < 1e-6

    def test_never_decreases_prior_density(self):
        rng = np.random.default_rng(8)
        prior = GaussianSpec(np.zeros(5), np.eye(5) * 0.8)
        for _ in range(20):
            inst = RMLInstance(1, np.zeros(2), rng.standard_normal(5))
            x0 = 3 * rng.standard_normal(5)
            z = local_prior_refine(x0, inst, prior, 0.25)
            lp = lambda x: -0.5 * (x - inst.prior_mean_n) @ np.linalg.solve(
                prior.cov, x - inst.prior_mean_n)
            assert lp(z) >= lp(x0) - 1e-12

    def test_consumes_no_evaluations(self):
        prob = bowl_problem(prior="gaussian")
        inst = drawn(prob, 1)[0]
        before = prob.simulator.eval_counter
        local_prior_refine(np.zeros(20), inst, prob.prior,  0.25)
        assert prob.simulator.eval_counter == before


class TestBudgetAccounting:
    def test_uniform_budget_is_k_times_floor(self):
        prob = bowl_problem()
        insts = drawn(prob, 4)
        cfg = HDBOConfig(n_rml=4, budget_N=65, K=3, d_e=3, n0=3, seed=2)
        before = prob.simulator.eval_counter
        res = run_hdbo_rml(prob, insts, cfg)
        assert res.n_evals == 3 * (65 // 3) == 63
        assert prob.simulator.eval_counter - before == res.n_evals
        assert res.n_evals <= cfg.budget_N

    def test_gaussian_budget_is_2k_times_floor(self):
        prob = bowl_problem(prior="gaussian")
        insts = drawn(prob, 4)
        cfg = HDBOConfig(n_rml=4, budget_N=65, K=3, d_e=3, n0=3, seed=2)
        before = prob.simulator.eval_counter
        res = run_hdbo_rml(prob, insts, cfg)
        assert res.n_evals == 2 * 3 * (65 // 6) == 60
        assert prob.simulator.eval_counter - before == res.n_evals

    def test_init_exceeding_budget_is_config_error(self):
        prob = bowl_problem()
        insts = drawn(prob, 2)
        cfg = HDBOConfig(n_rml=2, budget_N=20, K=4, d_e=2, n0=5, seed=0)
        with pytest.raises(ConfigError, match="initial points"):
            run_hdbo_rml(prob, insts, cfg)

    def test_instance_count_must_match_config(self):
        prob = bowl_problem()
        insts = drawn(prob, 3)
        cfg = HDBOConfig(n_rml=4, budget_N=40, K=2, d_e=2, n0=2, seed=0)
        with pytest.raises(ConfigError, match="instances"):
            run_hdbo_rml(prob, insts, cfg)

    def test_embedding_dimension_capped_by_input_dimension(self):
        prob = bowl_problem(D=4, d=2)
        insts = drawn(prob, 2)
        cfg = HDBOConfig(n_rml=2, budget_N=40, K=2, d_e=9, n0=2, seed=0)
        with pytest.raises(ConfigError, match="input dimension"):
            run_hdbo_rml(prob, insts, cfg)

    def test_instances_must_stay_in_draw_order(self):
        prob = bowl_problem()
        insts = drawn(prob, 3)
        cfg = HDBOConfig(n_rml=3, budget_N=40, K=2, d_e=2, n0=2, seed=0)
        with pytest.raises(ConfigError, match="ordered"):
            run_hdbo_rml(prob, list(reversed(insts)), cfg)


@pytest.fixture(scope="module")
def uniform_run():
    prob = bowl_problem()
    insts = drawn(prob, 4)
    cfg = HDBOConfig(n_rml=4, budget_N=60, K=3, d_e=3, n0=3, seed=9)
    return prob, insts, cfg, run_hdbo_rml(prob, insts, cfg)


@pytest.fixture(scope="module")
def gaussian_run():
    prob = bowl_problem(prior="gaussian")
    insts = drawn(prob, 3)
    cfg = HDBOConfig(n_rml=3, budget_N=72, K=3, d_e=3, n0=3, seed=4)
    return prob, insts, cfg, run_hdbo_rml(prob, insts, cfg)


class TestRunTrace:
    def test_identical_seeds_give_identical_traces(self, uniform_run):
        prob, insts, cfg, res = uniform_run
        res2 = run_hdbo_rml(bowl_problem(), insts, cfg)
        assert len(res.records) == len(res2.records)
        for a, b in zip(res.records, res2.records):
            assert a.to_dict() == b.to_dict()

    def test_objective_cycles_one_based(self, uniform_run):
        _, _, cfg, res = uniform_run
        for rec in res.records:
            assert rec.objective_index == ((rec.iteration - 1) % cfg.n_rml) + 1

    def test_lifted_points_reconstructible_from_embeddings(self, uniform_run):
        prob, _, _, res = uniform_run
        embs = {e.index: e for e in res.embeddings}
        for rec in res.records:
            x = prob.prior.clip(embs[rec.emb_index].matrix @ rec.y)
            assert np.max(np.abs(x - rec.x)) < 1e-12

    def test_maximizers_are_feasible(self, uniform_run):
        prob, _, _, res = uniform_run
        for x in res.maximizers:
            assert log_prior(x, prob.prior) > -np.inf

    def test_selected_value_dominates_every_candidate(self, uniform_run):
        prob, insts, _, res = uniform_run
        for i, inst in enumerate(insts):
            for rec in res.records:
                cand_x, cand_f = rec.candidate()
                assert res.values[i] >= objective(inst, cand_x, prob, fx=cand_f) - 1e-12

    def test_refined_fields_absent_for_uniform(self, uniform_run):
        _, _, _, res = uniform_run
        assert all(r.refined_z is None and r.f_refined is None for r in res.records)

    def test_trace_round_trips_through_jsonl(self, uniform_run, tmp_path):
        _, _, _, res = uniform_run
        path = tmp_path / "trace.jsonl"
        write_trace(res.records, path)
        back = read_trace(path)
        assert len(back) == len(res.records)
        for a, b in zip(res.records, back):
            assert a.to_dict() == b.to_dict()


class TestGaussianPath:
    def test_every_record_is_refined(self, gaussian_run):
        _, _, _, res = gaussian_run
        assert all(r.refined_z is not None and r.f_refined is not None
                   for r in res.records)

    def test_proximal_step_never_decreases_prior(self, gaussian_run):
        prob, insts, _, res = gaussian_run
        for rec in res.records:
            mean_n = insts[rec.objective_index - 1].prior_mean_n
            lp = lambda x: -0.5 * (x - mean_n) @ np.linalg.solve(prob.prior.cov, x - mean_n)
            assert lp(rec.refined_z) >= lp(rec.x) - 1e-10

    def test_selection_uses_refined_candidates(self, gaussian_run):
        prob, insts, _, res = gaussian_run
        for i, inst in enumerate(insts):
            vals = [objective(inst, r.refined_z, prob, fx=r.f_refined) for r in res.records]
            assert res.values[i] == pytest.approx(max(vals), abs=1e-12)
            best = int(np.argmax(vals))
            assert np.allclose(res.maximizers[i], res.records[best].refined_z)


class TestDataSharing:
    def test_training_set_grows_with_every_prior_record(self, monkeypatch):
        sizes = []
        real_fit = gp.fit
        real_fit_with = gp.fit_with_params

        def spy_fit(inputs, targets, rng):
            sizes.append(np.atleast_2d(inputs).shape[0])
            return real_fit(inputs, targets, rng)

        def spy_fit_with(inputs, targets, params):
            sizes.append(np.atleast_2d(inputs).shape[0])
            return real_fit_with(inputs, targets, params)

        monkeypatch.setattr("rmlbo.hdbo.gp.fit", spy_fit)
        monkeypatch.setattr("rmlbo.hdbo.gp.fit_with_params", spy_fit_with)
        prob = bowl_problem()
        insts = drawn(prob, 5)
        cfg = HDBOConfig(n_rml=5, budget_N=36, K=2, d_e=2, n0=3, seed=1)
        run_hdbo_rml(prob, insts, cfg)
        slots = cfg.slots_per_embedding(False)
        expected = [m - 1 for _ in range(cfg.K) for m in range(cfg.n0 + 1, slots + 1)]
        assert sizes == expected

    def test_refit_cadence_full_then_every_fifth(self, monkeypatch):
        # full hyperparameter search while the training set is below 30
        # points, afterwards every 5th slot with factor-only fits between;
        # the slot index is the spied training size plus one
        full_slots, factor_slots = [], []
        real_fit = gp.fit
        real_fit_with = gp.fit_with_params

        def spy_fit(inputs, targets, rng):
            full_slots.append(np.atleast_2d(inputs).shape[0] + 1)
            return real_fit(inputs, targets, rng)

        def spy_fit_with(inputs, targets, params):
            factor_slots.append(np.atleast_2d(inputs).shape[0] + 1)
            return real_fit_with(inputs, targets, params)

        monkeypatch.setattr("rmlbo.hdbo.gp.fit", spy_fit)
        monkeypatch.setattr("rmlbo.hdbo.gp.fit_with_params", spy_fit_with)
        prob = bowl_problem(D=8, d=2)
        insts = drawn(prob, 2)
        cfg = HDBOConfig(n_rml=2, budget_N=40, K=1, d_e=2, n0=3, seed=0)
        run_hdbo_rml(prob, insts, cfg)
        assert full_slots == list(range(4, 31)) + [35, 40]
        assert factor_slots == [31, 32, 33, 34, 36, 37, 38, 39]

    def test_best_so_far_values_non_decreasing(self):
        prob = bowl_problem()
        insts = drawn(prob, 3)
        cfg = HDBOConfig(n_rml=3, budget_N=45, K=3, d_e=2, n0=2, seed=6)
        res = run_hdbo_rml(prob, insts, cfg)
        for inst in insts:
            best = -np.inf
            series = []
            for rec in res.records:
                cand_x, cand_f = rec.candidate()
                best = max(best, objective(inst, cand_x, prob, fx=cand_f))
                series.append(best)
            assert all(b >= a for a, b in zip(series, series[1:]))


class TestSelectMaximizers:
    def test_tie_breaks_toward_earliest_record(self):
        prob = bowl_problem(D=6, d=2)
        insts = drawn(prob, 2)
        x = np.zeros(6)
        fx = prob.simulator(x)
        recs = [SimulationRecord(-1, None, x.copy(), fx.copy(), None, None, i + 1, 1)
                for i in range(3)]
        maximizers, values = select_maximizers(recs, insts, prob)
        assert np.allclose(maximizers[0], recs[0].x)

    def test_empty_trace_rejected(self):
        prob = bowl_problem(D=6, d=2)
        with pytest.raises(ValueError, match="empty trace"):
            select_maximizers([], drawn(prob, 1), prob)


class TestReductionToSingleObjectiveBO:
    def test_finds_grid_optimum_on_1d_ridge(self):
        # n_rml=1, K=1: plain embedded BO; value within 0.1 of a
        # 20001-point grid maximum over the reachable active coordinate
        # in at least 4 of 5 seeds (N=60, D=20)
        wins = 0
        for seed in range(5):
            prob = bench.make_problem("quadratic-bowl", D=20, d=1, seed=seed,
                                      noise_sd=0.5)
            insts = draw_randomizations(prob, 1, labeled_stream(seed, STREAM_RANDOMIZE))
            cfg = HDBOConfig(n_rml=1, budget_N=60, K=1, d_e=2, n0=5, seed=seed)
            res = run_hdbo_rml(prob, insts, cfg)
            a = prob.simulator.active_matrix[:, 0]
            reach = float(np.sum(np.abs(a)))
            grid = np.linspace(-reach, reach, 20001)
            inst = insts[0]
            const = -np.log(2 * np.pi) - 2 * np.log(0.5)
            vals = [-0.5 * np.sum((inst.data_n - np.array([u, u * u])) ** 2) / 0.25 + const
                    for u in grid]
            if float(np.max(vals)) - float(res.values[0]) <= 0.1:
                wins += 1
        assert wins >= 4


class TestAbort:
    def test_simulator_failure_preserves_partial_trace(self):
        prob = bench.make_problem("quadratic-bowl", D=10, d=2, seed=0, fail_after=17)
        insts = drawn(prob, 2)
        cfg = HDBOConfig(n_rml=2, budget_N=40, K=2, d_e=2, n0=3, seed=0)
        with pytest.raises(RunAborted) as err:
            run_hdbo_rml(prob, insts, cfg)
        assert len(err.value.records) == 17
