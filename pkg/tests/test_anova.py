import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfactorial.anova import (
    anova,
    decompose,
    ems_table,
    estimate_components_anova,
    f_tests,
    linear_combination_df,
    satterthwaite_df,
    standard_lattice,
    xi_values,
)
from crossfactorial.design import DesignSpec, randomise, systematic_design
from crossfactorial.exceptions import StructuralError
from crossfactorial.factors import Factor, build_lattice

from conftest import RUNNING
from oracles import covariance_matrix, design_a_components_from_ms, design_a_xi, satterthwaite_three_term

EXAMPLE1_COMPONENTS = {"T": 0.10, "I:T": 0.15, "E": 0.75}


def simulate(table, components, rng, delta1=0.0):
    y = delta1 * np.where(table.intervention == 0, 1.0, -1.0)
    for term, value in components.items():
        if term == "E":
            y = y + rng.normal(0, math.sqrt(value), table.n_units)
        else:
            f = table.factor(term)
            y = y + rng.normal(0, math.sqrt(value), f.n_levels)[f.level_of]
    return y


# -- projectors ----------------------------------------------------------------------------


TRACES = {"a": [1, 15, 16, 288], "b": [1, 1, 15, 4, 15, 4, 60, 60, 160]}


@pytest.mark.parametrize("shape", ["a", "b"])
def test_projector_traces_and_orthogonality(shape):
    table = systematic_design(DesignSpec(**RUNNING[shape]))
    projs = decompose(standard_lattice(table))
    assert sorted(p.df for p in projs) == sorted(TRACES[shape])
    total = np.zeros((table.n_units, table.n_units))
    for p in projs:
        q = p.projector
        assert np.allclose(q @ q, q, atol=1e-10)
        assert np.allclose(q, q.T)
        assert round(np.trace(q)) == p.df
        total += q
    assert np.allclose(total, np.eye(table.n_units), atol=1e-10)
    for i, p in enumerate(projs):
        for r in projs[i + 1:]:
            assert np.max(np.abs(p.projector @ r.projector)) < 1e-10


def test_mean_projector_is_constant(design_a):
    q_u = decompose(standard_lattice(design_a))[0]
    assert q_u.name == "U"
    assert np.allclose(q_u.projector, 1 / 320)


def test_non_orthogonal_structure_rejected():
    f = Factor("F", [0, 0, 1, 1, 1])
    g = Factor("G", [0, 1, 0, 1, 1])
    with pytest.raises(StructuralError):
        decompose(build_lattice([f, g]))


# -- sums of squares --------------------------------------------------------------------------


def test_constant_outcome(design_b):
    table = anova(np.full(320, 2.5), design_b)
    for r in table.source_rows():
        expected = 320 * 2.5**2 if r.source == "Mean" else 0.0
        assert r.sum_sq == pytest.approx(expected, abs=1e-9)


def test_pure_intervention_effect(design_a):
    y = np.where(design_a.intervention == 0, 1.0, -1.0)
    table = anova(y, design_a)
    assert table.row("I:T", "Interventions").sum_sq == pytest.approx(320)
    for r in table.source_rows():
        if r.source != "Interventions":
            assert r.sum_sq == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["a", "b", "c"]), st.integers(2, 3), st.integers(2, 4), st.integers(1, 3),
       st.integers(0, 2**32 - 1))
def test_df_and_sums_of_squares_partition(shape, n_i, n_t, n_r, seed):
    counts = dict(shape=shape, n_I=n_i, n_T=n_t, n_R=n_r, seed=seed)
    if shape != "a":
        counts["n_B"] = 2
    if shape == "c":
        counts["n_C"] = 2
    table = randomise(DesignSpec(**counts))
    y = np.random.default_rng(seed).normal(size=table.n_units)
    result = anova(y, table)
    rows = result.source_rows()
    assert sum(r.df for r in rows) == table.n_units
    assert math.fsum(r.sum_sq for r in rows) == pytest.approx(float(y @ y), rel=1e-10)


# -- expected mean squares ---------------------------------------------------------------------


def test_ems_design_a(design_a):
    ems = {k: v.render() for k, v in ems_table(standard_lattice(design_a)).items()}
    assert ems[("T", "Therapists")] == "ξ_T"
    assert ems[("I:T", "Interventions")] == "‖τ_I‖² + ξ_{I∧T}"
    assert ems[("I:T", "Residual")] == "ξ_{I∧T}"
    assert ems[("E", "Patients")] == "ξ_E"
    assert ems[("U", "Mean")] == "‖τ_0‖² + ξ_0"


def test_ems_design_b(design_b):
    ems = {k: v.render() for k, v in ems_table(standard_lattice(design_b)).items()}
    assert ems[("I", "Interventions")] == "‖τ_I‖² + ξ_{I∧T} + ξ_{I∧B} − ξ_{I∧T∧B}"
    assert ems[("E", "Patients")] == "ξ_E"
    assert ("I", "Residual") not in ems


def test_ems_design_c(design_c):
    ems = {k: v.render() for k, v in ems_table(standard_lattice(design_c)).items()}
    assert ems[("I", "Interventions")] == "‖τ_I‖² + ξ_{I∧C} + ξ_{I∧B} − ξ_{I∧C∧B}"


def test_ems_coefficients_are_unit(running_design):
    for expr in ems_table(standard_lattice(running_design)).values():
        assert all(c in (-1, 1) for _, c in expr.xi_terms)


# -- covariance oracle ------------------------------------------------------------------------------


def test_xi_design_a_matches_closed_form(design_a):
    lat = standard_lattice(design_a)
    xi = xi_values(lat, EXAMPLE1_COMPONENTS)
    expected = design_a_xi(0.10, 0.15, 0.75, 2, 10)
    assert xi["I:T"] == pytest.approx(2.25)
    assert xi["T"] == pytest.approx(4.25)
    for name, value in expected.items():
        assert xi[name] == pytest.approx(value)


def test_pitfall_pooled_denominator_is_smaller(design_a):
    xi = xi_values(standard_lattice(design_a), EXAMPLE1_COMPONENTS)
    pooled = (15 * xi["I:T"] + 288 * xi["E"]) / 303
    assert pooled < xi["I:T"]


def test_covariance_acts_as_scalar_on_each_stratum(design_b):
    comps = {"T": 0.1, "B": 0.1, "T:B": 0.1, "I:T": 0.15, "I:B": 0.1, "I:T:B": 0.1, "E": 0.35}
    lat = standard_lattice(design_b)
    V = covariance_matrix(design_b, comps)
    xi = xi_values(lat, comps)
    for p in decompose(lat):
        assert np.allclose(V @ p.projector, xi[p.name] * p.projector, rtol=1e-8, atol=1e-10)
    # the fixed stratum carries the three-term combination
    q_i = next(p.projector for p in decompose(lat) if p.name == "I")
    combo = xi["I:T"] + xi["I:B"] - xi["I:T:B"]
    assert np.allclose(V @ q_i, combo * q_i, atol=1e-10)


# -- Satterthwaite ------------------------------------------------------------------------------


def test_satterthwaite_equal_ms_design_b():
    m = 1.7
    assert satterthwaite_df({"I:T": m, "I:B": m, "I:T:B": m}, "b") == pytest.approx(3.0, abs=1e-12)


def test_satterthwaite_single_surviving_term():
    assert satterthwaite_df({"I:T": 2.0, "I:B": 0.0, "I:T:B": 0.0}, "b") == pytest.approx(15.0)


def test_satterthwaite_equal_ms_design_c():
    ms = {"I:C": 0.4, "I:B": 0.4, "I:C:B": 0.4}
    assert satterthwaite_df(ms, "c", n_C=6, n_B=5) == pytest.approx(2.0, abs=1e-12)


@settings(max_examples=100)
@given(st.floats(0.01, 10), st.floats(0.01, 10), st.floats(0.01, 10))
def test_satterthwaite_matches_formula(a, b, c):
    got = satterthwaite_df({"I:T": a, "I:B": b, "I:T:B": c}, "b")
    if a + b - c > 0:
        assert got == pytest.approx(satterthwaite_three_term(a, b, c, 15, 4, 60), rel=1e-12)
    else:
        assert math.isnan(got)


def test_linear_combination_nonpositive_is_nan():
    assert math.isnan(linear_combination_df((1, -1), (1.0, 2.0), (5, 5)))


# -- F-tests ---------------------------------------------------------------------------------------


def test_design_a_tests(design_a, rng):
    y = simulate(design_a, EXAMPLE1_COMPONENTS, rng, 0.315)
    table = anova(y, design_a)
    t_i, t_t, t_it = table.test("I"), table.test("T"), table.test("I:T")
    assert (t_i.df_num, t_i.df_den, t_i.kind) == (1, 15, "exact-F")
    assert t_i.statistic == pytest.approx(table.extras["fixed_ms"] / table.residual_ms["I:T"])
    assert (t_t.df_num, t_t.df_den) == (15, 15)
    assert t_t.denominator == (("I:T", 1),)
    assert (t_it.df_num, t_it.df_den) == (15, 288)
    assert t_it.denominator == (("E", 1),)
    for t in (t_i, t_t, t_it):
        assert 0 <= t.p_value <= 1


def test_design_b_intervention_uses_three_term_denominator(design_b, rng):
    comps = {"T": 0.1, "B": 0.1, "T:B": 0.1, "I:T": 0.15, "I:B": 0.1, "I:T:B": 0.1, "E": 0.35}
    table = anova(simulate(design_b, comps, rng, 0.18), design_b)
    t_i = table.test("I")
    assert t_i.kind == "by-hand-linear-combination"
    assert dict(t_i.denominator) == {"I:T": 1, "I:B": 1, "I:T:B": -1}
    ms = table.residual_ms
    assert t_i.statistic == pytest.approx(table.extras["fixed_ms"] / (ms["I:T"] + ms["I:B"] - ms["I:T:B"]))
    assert t_i.statistic != pytest.approx(table.extras["fixed_ms"] / ms["I:T"])
    assert t_i.df_den == pytest.approx(satterthwaite_df(ms, "b"))


def test_design_b_random_tests(design_b, rng):
    comps = {"T": 0.1, "B": 0.1, "T:B": 0.1, "I:T": 0.15, "I:B": 0.1, "I:T:B": 0.1, "E": 0.35}
    table = anova(simulate(design_b, comps, rng), design_b)
    assert table.test("I:T").denominator == (("I:T:B", 1),)
    assert table.test("I:T").kind == "exact-F"
    assert table.test("T:B").denominator == (("I:T:B", 1),)
    assert table.test("I:T:B").denominator == (("E", 1),)
    assert table.test("T").kind == "approximate-F"
    assert dict(table.test("T").denominator) == {"I:T": 1, "T:B": 1, "I:T:B": -1}
    assert table.test("B").kind == "approximate-F"


def test_design_c_approximate_tests(design_c, rng):
    comps = {"C": .1, "T": .1, "B": .1, "C:B": .05, "T:B": .05, "I:C": .1, "I:T": .1, "I:B": .1,
             "I:C:B": .05, "I:T:B": .05, "E": .2}
    table = anova(simulate(design_c, comps, rng), design_c)
    for name in ("C", "B", "T", "I:C", "C:B"):
        assert table.test(name).kind == "approximate-F", name
    assert dict(table.test("I").denominator) == {"I:C": 1, "I:B": 1, "I:C:B": -1}


def test_nonpositive_denominator_gives_undefined_test(design_b, rng):
    comps = {"T": 0.1, "B": 0.1, "T:B": 0.1, "I:T": 0.15, "I:B": 0.1, "I:T:B": 0.1, "E": 0.35}
    table = anova(simulate(design_b, comps, rng), design_b)
    ms = dict(table.residual_ms)
    ms["I:T:B"] = ms["I:T"] + ms["I:B"] + 1.0
    broken = dataclasses.replace(table, residual_ms=ms)
    t_i = next(t for t in f_tests(broken) if t.effect == "I")
    assert t_i.p_value is None and not t_i.defined
    assert "nonpositive" in t_i.note


# -- component estimates -----------------------------------------------------------------------


def _with_ms(table, **ms):
    new = dict(table.residual_ms)
    new.update(ms)
    return dataclasses.replace(table, residual_ms=new)


def test_components_from_reference_mean_squares(design_a, rng):
    table = _with_ms(anova(rng.normal(size=320), design_a), E=0.75, **{"I:T": 2.25, "T": 4.25})
    est = estimate_components_anova(table)
    assert est.components["E"] == pytest.approx(0.75)
    assert est.components["I:T"] == pytest.approx(0.15)
    assert est.components["T"] == pytest.approx(0.10)
    oracle = design_a_components_from_ms(4.25, 2.25, 0.75, 2, 10)
    for k, v in oracle.items():
        assert est.components[k] == pytest.approx(v)


def test_negative_component_flagged_and_truncated(design_a, rng):
    table = _with_ms(anova(rng.normal(size=320), design_a), E=1.0, **{"I:T": 0.5, "T": 4.0})
    kept = estimate_components_anova(table, allow_negative=True)
    cut = estimate_components_anova(table, allow_negative=False)
    assert kept.components["I:T"] == pytest.approx(-0.05)
    assert kept.negative["I:T"] and cut.negative["I:T"]
    assert cut.components["I:T"] == 0.0 and cut.truncated


def test_equal_mean_squares_give_only_residual(design_b, rng):
    table = anova(rng.normal(size=320), design_b)
    flat = dataclasses.replace(table, residual_ms={k: 0.9 for k in table.residual_ms})
    est = estimate_components_anova(flat, allow_negative=True)
    for k, v in est.components.items():
        assert v == pytest.approx(0.9 if k == "E" else 0.0, abs=1e-12)


# -- Monte Carlo ----------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def design_a_monte_carlo():
    table = randomise(DesignSpec(**RUNNING["a"], seed=1))
    lat = standard_lattice(table)
    rng = np.random.default_rng(2024)
    n_rep = 10_000
    rms, est = np.empty(n_rep), np.empty((n_rep, 3))
    for r in range(n_rep):
        result = anova(simulate(table, EXAMPLE1_COMPONENTS, rng, 0.315), lattice=lat)
        rms[r] = result.residual_ms["I:T"]
        c = estimate_components_anova(result, allow_negative=True).components
        est[r] = c["T"], c["I:T"], c["E"]
    return rms, est


def test_residual_ms_expectation(design_a_monte_carlo):
    rms, _ = design_a_monte_carlo
    target = 10 * 0.15 + 0.75
    assert abs(rms.mean() - target) < 3 * rms.std(ddof=1) / math.sqrt(rms.size)


def test_anova_estimates_unbiased_with_negatives(design_a_monte_carlo):
    _, est = design_a_monte_carlo
    mc_se = est.std(axis=0, ddof=1) / math.sqrt(est.shape[0])
    for k, truth in enumerate((0.10, 0.15, 0.75)):
        assert abs(est[:, k].mean() - truth) < 3 * mc_se[k]


# -- exports -------------------------------------------------------------------------------------------


def test_markdown_and_csv_columns(design_a, rng):
    table = anova(rng.normal(size=320), design_a)
    md = table.to_markdown().splitlines()
    assert md[0] == "| Stratum | Source | df | SS | MS | EMS | F | df_den | p |"
    csv_text = table.to_csv().splitlines()
    assert csv_text[0] == "Stratum,Source,df,SS,MS,EMS,F,df_den,p"
    assert len(csv_text) == len(table.rows) + 1


def test_length_mismatch(design_a):
    with pytest.raises(StructuralError):
        anova(np.zeros(10), design_a)
