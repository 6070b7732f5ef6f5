import math

import numpy as np
import pytest

from dprisk.dpmcmc import GammaBase, SamplerConfig, run_chain
from dprisk.errors import DegenerateInputError, InputError
from dprisk.loglinear import independence_spec
from dprisk.oracle import quadrature_posterior_1d
from dprisk.selection import (
    ModelScore,
    c1_score,
    rank_models,
    run_two_stage,
    stop_index,
    waic_u_score,
)
from dprisk.table import ContingencyTable, KeyVariable, draw_sample, generate_population


@pytest.fixture
def one_unique_table():
    V = KeyVariable("V", ("a", "b"))
    return ContingencyTable([V], f=[1, 2], pi=0.5)


def test_c1_single_draw_hand_value(one_unique_table):
    """One unique cell with pi * lambda = 1: C1 = log(1 * e^{-1}) = -1."""
    lam = np.array([[2.0, 9.9]])  # pi = 0.5 so rate = 1 in the unique cell
    assert c1_score(lam, one_unique_table) == pytest.approx(-1.0, abs=1e-12)


def test_c1_duplicating_draws_is_invariant(one_unique_table):
    rng = np.random.default_rng(0)
    lam = rng.gamma(2.0, 1.0, size=(40, 2))
    doubled = np.vstack([lam, lam])
    assert c1_score(lam, one_unique_table) == pytest.approx(
        c1_score(doubled, one_unique_table), rel=1e-12)


def test_c1_is_negative(one_unique_table):
    rng = np.random.default_rng(1)
    lam = rng.gamma(2.0, 2.0, size=(64, 2))
    assert c1_score(lam, one_unique_table) < 0


def test_c1_requires_uniques():
    V = KeyVariable("V", ("a", "b"))
    t = ContingencyTable([V], f=[2, 3], pi=0.5)
    with pytest.raises(DegenerateInputError):
        c1_score(np.ones((4, 2)), t)


def test_c1_permutation_invariance():
    V = KeyVariable("V", tuple("abcd"))
    t = ContingencyTable([V], f=[1, 2, 1, 0], pi=0.5)
    rng = np.random.default_rng(2)
    lam = rng.gamma(2.0, 1.0, size=(32, 4))
    base_val = c1_score(lam, t)
    # permute draw order
    assert c1_score(lam[::-1], t) == pytest.approx(base_val, rel=1e-12)
    # permute cell order together with the table's level declaration
    perm = [3, 0, 2, 1]
    V2 = KeyVariable("V", tuple("dacb"))
    t2 = ContingencyTable([V2], f=[0, 1, 1, 2], pi=0.5)
    assert c1_score(lam[:, perm], t2) == pytest.approx(base_val, rel=1e-12)


def test_waic_u_identities(one_unique_table):
    rng = np.random.default_rng(3)
    lam = rng.gamma(2.0, 1.0, size=(50, 2))
    c1 = c1_score(lam, one_unique_table)
    waic, p = waic_u_score(lam, one_unique_table)
    assert waic == pytest.approx(c1 - p, rel=1e-12)
    assert p >= 0
    assert waic <= c1


def test_waic_u_constant_draws(one_unique_table):
    lam = np.full((30, 2), 1.8)
    waic, p = waic_u_score(lam, one_unique_table)
    assert p == pytest.approx(0.0, abs=1e-14)
    assert waic == pytest.approx(c1_score(lam, one_unique_table), rel=1e-12)


def test_waic_u_needs_two_draws(one_unique_table):
    with pytest.raises(InputError):
        waic_u_score(np.ones((1, 2)), one_unique_table)


def test_c1_matches_quadrature_on_single_cell():
    """Single-cell table with a conjugate posterior: the Monte Carlo C1
    converges to the quadrature value of the log predictive density."""
    V = KeyVariable("V", ("a", "b"))
    sz = np.array([False, True])
    t = ContingencyTable([V], f=[1, 0], pi=0.5, structural_zeros=sz)
    spec = independence_spec([V])
    base = GammaBase(1.2, 0.6)
    beta = (0.4, 0.0)
    pe = 0.5 * math.exp(0.4)
    cfg = SamplerConfig(burn_in=1000, draws=200000, thin=1, seed=0,
                        fix_beta=beta, fix_m=1.0)
    d = run_chain(t, spec, base, cfg)
    c1 = c1_score(d, t)
    # posterior over omega is Gamma(a + 1, b + pe); predictive of f = 1 is
    # integral of (pe w) e^{-pe w} against that posterior
    a_post, b_post = base.a + 1.0, base.b + pe
    quad = quadrature_posterior_1d(
        lambda w: 1.0 * np.log(pe * w) - pe * w,
        lambda w: (a_post - 1) * np.log(w) - b_post * w,
        np.linspace(1e-8, 60, 200001),
    )
    # log predictive = log int pmf * post = log_norm(lik x post) - log_norm(post)
    ref = quadrature_posterior_1d(
        lambda w: np.zeros_like(w),
        lambda w: (a_post - 1) * np.log(w) - b_post * w,
        np.linspace(1e-8, 60, 200001),
    )
    expected = quad.log_norm - ref.log_norm
    assert c1 == pytest.approx(expected, abs=1e-3)


# -- stopping rule -----------------------------------------------------------------


def test_stop_index_first_decline():
    assert stop_index([-5.0, -4.0, -3.0, -3.5, -2.0]) == 3
    assert stop_index([-5.0, -6.0]) == 1
    assert stop_index([-5.0, -4.0, -3.0]) is None
    assert stop_index([-5.0]) is None


def test_stop_index_patience_two():
    c1s = [-5.0, -4.0, -4.5, -4.2, -4.6, -4.9]
    assert stop_index(c1s, patience=1) == 2
    assert stop_index(c1s, patience=2) == 5
    assert stop_index([-5.0, -5.5, -6.0], patience=2) == 2


# -- ranking -----------------------------------------------------------------------


def _score(spec_id, c1, waic=None, tau1=1.0):
    return ModelScore(spec_id=spec_id, c1=c1, waic_u=waic if waic is not None else c1,
                      p_waic_u=0.0, tau1_star=tau1, tau2_star=tau1 + 1,
                      tau1_sim=tau1, tau2_sim=tau1 + 1, quantiles_sim_tau1={})


def test_rank_models_orders_by_c1():
    a, b = _score("I", -10.0), _score("I + A*B", -5.0)
    rows = rank_models([a, b])
    assert a.rank_c1 == 2 and b.rank_c1 == 1
    assert [r["spec"] for r in rows] == ["I + A*B", "I"]
    assert all("error_tau1" not in r for r in rows)


def test_rank_models_with_truth_and_ties():
    a = _score("I", -15.0, tau1=4.0)
    b = _score("I + A*B", -9.0, tau1=2.5)
    c = _score("I + A*C", -9.5, tau1=1.0)
    rows = rank_models([a, b, c], truth=(2.0, 5.0), near_tie_threshold=2.0)
    assert b.rank_c1 == 1 and c.rank_c1 == 2 and a.rank_c1 == 3
    assert b.rank_true_error == 1  # |2.5 - 2| = 0.5
    assert c.rank_true_error == 2  # |1 - 2| = 1
    assert a.rank_true_error == 3
    assert c.near_tie and a.near_tie is False
    assert any(r["rank_error"] == 1 for r in rows)


def test_rank_models_needs_two(one_unique_table):
    with pytest.raises(InputError):
        rank_models([_score("I", -1.0)])


# -- two-stage orchestration ----------------------------------------------------------


def _selection_fixture(seed=0):
    A = KeyVariable("A", tuple(str(i) for i in range(5)))
    B = KeyVariable("B", tuple(str(i) for i in range(4)))
    C = KeyVariable("C", tuple(str(i) for i in range(3)))
    spec_true = independence_spec([A, B, C]).with_interaction("A", "B")
    rng = np.random.default_rng(seed)
    beta = np.zeros(spec_true.q)
    beta[0] = 2.0
    beta[1:10] = rng.normal(0, 0.4, 9)
    beta[-12:] = rng.normal(0, 1.1, 12)  # strong A*B block
    pop = generate_population(spec_true, beta, N_target=3000, seed=seed + 1,
                              random_effects=GammaBase(1.0, 1.0))
    sample = draw_sample(pop, 0.10, seed=seed + 2)
    return sample, spec_true


def test_run_two_stage_end_to_end():
    sample, spec_true = _selection_fixture()
    cfg = SamplerConfig(burn_in=150, draws=200, thin=1, seed=42)
    run = run_two_stage(sample, GammaBase(1.0, 0.1), cfg,
                        c0_kwargs={"max_steps": 2}, report_parametric=True)
    cands = run.candidate_scores()
    assert cands, "no candidates evaluated"
    assert cands[0].spec_id == "I"
    # chosen maximizes C1 among candidates
    best = max(cands, key=lambda s: s.c1)
    assert run.chosen == best.spec_id
    # parametric counterparts are present, flagged, and never chosen
    assert any(not s.is_candidate for s in run.scores)
    assert all(run.chosen != s.spec_id for s in run.scores if not s.is_candidate)
    # ranks filled, true risks available (population F was retained)
    assert all(s.rank_c1 is not None for s in run.scores)
    assert all(s.true_error_tau1 is not None for s in run.scores)
    d = run.as_dict()
    assert d["chosen"] == run.chosen
    assert len(d["scores"]) == len(run.scores)


def test_run_two_stage_deterministic():
    sample, _ = _selection_fixture(seed=5)
    cfg = SamplerConfig(burn_in=80, draws=100, thin=1, seed=7)
    a = run_two_stage(sample, GammaBase(1.0, 0.1), cfg, c0_kwargs={"max_steps": 1})
    b = run_two_stage(sample, GammaBase(1.0, 0.1), cfg, c0_kwargs={"max_steps": 1})
    assert a.as_dict() == b.as_dict()


def test_run_two_stage_requires_uniques():
    V = KeyVariable("V", ("a", "b"))
    t = ContingencyTable([V], f=[5, 3], pi=0.5)
    with pytest.raises(DegenerateInputError):
        run_two_stage(t, GammaBase(), SamplerConfig(burn_in=5, draws=5, seed=0))


def test_waic_u_can_disagree_with_c1_on_heterogeneous_data():
    """The DP model wins on C1 but its large posterior-variance correction
    lets the (variance-poor) parametric model win on WAIC_U."""
    variables = [KeyVariable(f"V{i+1}", tuple(str(j) for j in range(s)))
                 for i, s in enumerate((8, 5, 6))]
    spec = independence_spec(variables)
    rng = np.random.default_rng(0)
    beta = np.concatenate([[1.0], rng.normal(0, 0.5, spec.q - 1)])
    pop = generate_population(spec, beta, N_target=1200, seed=1,
                              random_effects=GammaBase(1.0, 1.0))
    sample = draw_sample(pop, 0.1, seed=2)

    cfg_np = SamplerConfig(burn_in=300, draws=400, thin=1, seed=100)
    d_np = run_chain(sample, spec, GammaBase(1.0, 0.1), cfg_np)
    c1_np = c1_score(d_np, sample)
    w_np, p_np = waic_u_score(d_np, sample)

    # omega pinned at 1 by the degenerate base: a pure fixed-effects model
    # whose per-cell predictive variance is small
    cfg_p = SamplerConfig(burn_in=300, draws=400, thin=1, seed=200, parametric=True)
    d_p = run_chain(sample, spec, GammaBase(1e8, 1e8), cfg_p)
    c1_p = c1_score(d_p, sample)
    w_p, p_p = waic_u_score(d_p, sample)

    assert p_p < p_np
    assert c1_np > c1_p
    assert w_p > w_np  # the rank flip


def test_run_two_stage_empty_path_chooses_default_model():
    """An all-blocking penalty grid keeps the path empty: the DP model with
    independence fixed effects is the only candidate and is chosen."""
    sample, _ = _selection_fixture(seed=2)
    cfg = SamplerConfig(burn_in=60, draws=80, thin=1, seed=1)
    run = run_two_stage(sample, GammaBase(1.0, 0.1), cfg,
                        c0_kwargs={"gamma_grid": [1e9, 1e8]})
    assert run.chosen == "I"
    assert len(run.candidate_scores()) == 1
    assert run.stop_reason == "path exhausted"


def test_run_two_stage_stop_respects_patience():
    sample, _ = _selection_fixture(seed=9)
    cfg = SamplerConfig(burn_in=100, draws=150, thin=1, seed=3)
    run = run_two_stage(sample, GammaBase(1.0, 0.1), cfg,
                        c0_kwargs={"max_steps": 3}, patience=1)
    c1s = [s.c1 for s in run.candidate_scores()]
    idx = stop_index(c1s, patience=1)
    if run.stop_reason == "C1 declined":
        assert idx == len(c1s) - 1
    else:
        assert idx is None
