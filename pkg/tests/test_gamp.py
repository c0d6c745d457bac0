import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gamp_lab.errors import ConfigError, DegeneratePosteriorError, DivergenceError, EstimatorError, InvalidArgumentError
from gamp_lab.experiment import lmmse_oracle
from gamp_lab.gamp import GampTrace, RunConfig, TRACE_COLUMNS, damped_update, run_gamp, run_gamp_full, run_gamp_scalar
from gamp_lab.input_channels import AwgnInput, input_estimator_for
from gamp_lab.model import ProblemInstance, median_trace, sample_problem
from gamp_lab.output_channels import AwgnOutput, OutputEstimator, output_estimator_for
from gamp_lab.specs import AwgnInputSpec, AwgnOutputSpec, BernoulliGaussianSpec, SigmoidAwgnSpec

BG = BernoulliGaussianSpec(0.1, 1.0)
SIG = SigmoidAwgnSpec(6.1, 0.01)
TIGHT = dict(max_iters=500, stop_tol=1e-12)


def matched(inst):
    return input_estimator_for(inst.input_spec), output_estimator_for(inst.output_spec)


def scalar_instance(y):
    one = np.ones(1)
    return ProblemInstance(
        A=np.ones((1, 1)), q=np.zeros(1), x=one, z=one, y=np.array([y]), w=np.array([y - 1.0]),
        input_spec=AwgnInputSpec(0.0, 1.0), output_spec=AwgnOutputSpec(1.0), seed=0,
    )


class TestScalarProblem:
    @pytest.mark.parametrize("variant", ["full", "scalar_variance"])
    def test_converges_to_half(self, variant):
        inst = scalar_instance(1.0)
        state, _ = run_gamp(inst, AwgnInput(1.0), AwgnOutput(1.0), RunConfig(variant=variant, **TIGHT))
        # scalar LMMSE: taux0 * y / (taux0 + tauw)
        assert state.xhat[0] == pytest.approx(0.5, abs=1e-12)

    def test_variants_identical(self):
        inst = scalar_instance(0.3)
        a = run_gamp_full(inst, AwgnInput(1.0), AwgnOutput(1.0), RunConfig(**TIGHT))
        b = run_gamp_scalar(inst, AwgnInput(1.0), AwgnOutput(1.0), RunConfig(variant="scalar_variance", **TIGHT))
        assert np.array_equal(a[0].xhat, b[0].xhat) and a[1].nse_db == b[1].nse_db


class TestLmmseOracle:
    @pytest.mark.parametrize("variant", ["full", "scalar_variance"])
    @pytest.mark.parametrize("seed", range(5))
    def test_matches_dense_solve(self, variant, seed):
        inst = sample_problem(200, 0.5, AwgnInputSpec(0.3, 1.0), AwgnOutputSpec(0.1), seed=seed)
        state, _ = run_gamp(inst, *matched(inst), RunConfig(variant=variant, **TIGHT))
        oracle = lmmse_oracle(inst)
        assert np.linalg.norm(state.xhat - oracle) <= 1e-6 * np.linalg.norm(oracle)

    def test_fixed_point_identity(self):
        inst = sample_problem(200, 0.5, AwgnInputSpec(0.0, 1.0), AwgnOutputSpec(0.1), seed=7)
        state, _ = run_gamp(inst, *matched(inst), RunConfig(**TIGHT))
        # eliminating phat: shat * tauw = y - A xhat at a fixed point
        assert np.linalg.norm(state.shat * 0.1 - (inst.y - inst.A @ state.xhat)) <= 1e-8 * np.linalg.norm(inst.y)

    def test_oracle_rejects_other_specs(self):
        with pytest.raises(ConfigError):
            lmmse_oracle(sample_problem(10, 0.5, BG, SIG, seed=0))


class TestAlgorithm:
    def test_onsager_term_matters(self):
        finals = {True: [], False: []}
        for seed in range(20):
            inst = sample_problem(1000, 0.5, BG, SIG, seed=seed)
            for onsager in (True, False):
                try:
                    _, tr = run_gamp(inst, *matched(inst), RunConfig(max_iters=15, stop_tol=0.0, onsager=onsager))
                    finals[onsager].append(tr.nse_db[15])
                except DivergenceError:
                    finals[onsager].append(np.inf)
        med = {k: median_trace([[v] for v in vals])[0] for k, vals in finals.items()}
        assert med[True] <= med[False] - 3.0

    def test_trace_length_and_stopping(self):
        inst = sample_problem(200, 0.5, AwgnInputSpec(0.0, 1.0), AwgnOutputSpec(0.1), seed=1)
        _, tr = run_gamp(inst, *matched(inst), RunConfig(max_iters=7, stop_tol=0.0))
        assert len(tr) == 8 and tr.iterations == 7
        _, tr = run_gamp(inst, *matched(inst), RunConfig(max_iters=500, stop_tol=1e-6))
        assert len(tr) <= 501 and tr.step_residual[-1] < 1e-6 and all(r >= 1e-6 for r in tr.step_residual[1:-1])

    def test_min_iterations(self):
        inst = scalar_instance(1.0)
        _, tr = run_gamp(inst, AwgnInput(1.0), AwgnOutput(1.0), RunConfig(max_iters=10, stop_tol=1e9, min_iters=3))
        assert tr.iterations == 3

    def test_determinism(self):
        inst = sample_problem(300, 0.5, BG, SIG, seed=3)
        a = run_gamp(inst, *matched(inst), RunConfig(max_iters=8))
        b = run_gamp(inst, *matched(inst), RunConfig(max_iters=8))
        assert a[1].to_csv() == b[1].to_csv() and np.array_equal(a[0].xhat, b[0].xhat)

    def test_permutation_equivariance(self):
        inst = sample_problem(200, 0.5, BG, SIG, seed=5)
        perm = np.random.default_rng(0).permutation(inst.n)
        permuted = ProblemInstance(
            A=inst.A[:, perm], q=inst.q[perm], x=inst.x[perm], z=inst.z, y=inst.y, w=inst.w,
            input_spec=BG, output_spec=SIG, seed=inst.seed,
        )
        a, _ = run_gamp(inst, *matched(inst), RunConfig(max_iters=10))
        b, _ = run_gamp(permuted, *matched(inst), RunConfig(max_iters=10))
        # BLAS reorders the sums, so agreement is to rounding rather than bitwise
        assert np.max(np.abs(a.xhat[perm] - b.xhat)) <= 1e-10

    def test_state_invariants(self):
        inst = sample_problem(300, 0.5, BG, SIG, seed=2)
        seen = []

        def check(t, state):
            if t > 0:
                assert np.array_equal(state.zhat, inst.A @ seen[-1])
                assert np.all(state.taup > 0) and np.all(state.taur > 0) and np.all(state.taux > 0)
            seen.append(state.xhat.copy())

        run_gamp(inst, *matched(inst), RunConfig(max_iters=6), callback=check)
        assert len(seen) == 7

    def test_first_iteration_has_no_onsager_term(self):
        inst = sample_problem(100, 0.5, BG, SIG, seed=2)
        states = {}
        run_gamp(inst, *matched(inst), RunConfig(max_iters=2), callback=lambda t, s: states.setdefault(t, s))
        assert np.array_equal(states[1].phat, states[1].zhat)
        assert not np.array_equal(states[2].phat, states[2].zhat)

    def test_scalar_variances_are_scalars(self):
        inst = sample_problem(100, 0.5, BG, SIG, seed=2)
        state, _ = run_gamp(inst, *matched(inst), RunConfig(max_iters=3, variant="scalar_variance"))
        assert np.ndim(state.taux) == 0 and np.ndim(state.taup) == 0 and np.ndim(state.taur) == 0

    def test_se_modifications_need_trace(self):
        inst = sample_problem(100, 0.5, BG, SIG, seed=2)
        with pytest.raises(InvalidArgumentError):
            run_gamp(inst, *matched(inst), RunConfig(max_iters=3, variant="scalar_variance", se_modifications=True))


class _NanOutput(OutputEstimator):
    def estimate(self, phat, y, taup):
        s = np.zeros_like(phat)
        s[3] = np.nan
        return s, np.ones_like(phat)


class _FailingOutput(OutputEstimator):
    def estimate(self, phat, y, taup):
        raise DegeneratePosteriorError("boom", index=4)


class TestErrors:
    def test_divergence_carries_trace(self):
        inst = sample_problem(50, 0.5, AwgnInputSpec(0.0, 1.0), AwgnOutputSpec(0.1), seed=0)
        with pytest.raises(DivergenceError) as info:
            run_gamp(inst, AwgnInput(1.0), _NanOutput(), RunConfig(max_iters=5))
        assert info.value.iteration == 1 and len(info.value.trace) == 1

    def test_estimator_error_location(self):
        inst = sample_problem(50, 0.5, AwgnInputSpec(0.0, 1.0), AwgnOutputSpec(0.1), seed=0)
        with pytest.raises(EstimatorError) as info:
            run_gamp(inst, AwgnInput(1.0), _FailingOutput(), RunConfig(max_iters=5))
        assert info.value.iteration == 1 and info.value.index == 4

    @pytest.mark.parametrize("kwargs", [dict(max_iters=0), dict(damping=0.0), dict(damping=1.5), dict(variant="x"), dict(stop_tol=-1.0)])
    def test_bad_config(self, kwargs):
        with pytest.raises(InvalidArgumentError):
            RunConfig(**kwargs)


class TestDamping:
    def test_identity(self):
        new = np.array([1.0, 2.0])
        assert damped_update(np.zeros(2), new, 1.0) is new

    def test_half(self):
        assert damped_update(0.0, 2.0, 0.5) == 1.0

    @given(st.floats(0.05, 1.0), st.floats(-10, 10), st.floats(-10, 10))
    @settings(max_examples=60, deadline=None)
    def test_geometric_convergence(self, d, old, new):
        v = old
        for k in range(1, 30):
            v = damped_update(v, new, d)
            assert abs(v - new) <= (1 - d) ** k * abs(old - new) * (1 + 1e-12) + 1e-12

    def test_damped_run_still_reaches_lmmse(self):
        inst = sample_problem(200, 0.5, AwgnInputSpec(0.0, 1.0), AwgnOutputSpec(0.1), seed=3)
        state, _ = run_gamp(inst, *matched(inst), RunConfig(damping=0.7, max_iters=2000, stop_tol=1e-13))
        oracle = lmmse_oracle(inst)
        assert np.linalg.norm(state.xhat - oracle) <= 1e-6 * np.linalg.norm(oracle)

    def test_bad_factor(self):
        with pytest.raises(InvalidArgumentError):
            damped_update(0.0, 1.0, 0.0)


class TestTraceExport:
    def test_csv_round_trip(self):
        inst = sample_problem(200, 0.5, BG, SIG, seed=1)
        _, tr = run_gamp(inst, *matched(inst), RunConfig(max_iters=5))
        text = tr.to_csv()
        back = GampTrace.from_csv(text)
        assert back.to_csv() == text
        assert text.splitlines()[len(tr.metadata)] == ",".join(TRACE_COLUMNS)
        assert back.metadata["seed"] == 1

    def test_json(self):
        inst = sample_problem(50, 0.5, BG, SIG, seed=1)
        _, tr = run_gamp(inst, *matched(inst), RunConfig(max_iters=2))
        d = json.loads(tr.to_json())
        assert len(d["nse_db"]) == 3 and d["metadata"]["variant"] == "full"
