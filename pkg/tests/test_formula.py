import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossfactorial.anova import standard_lattice
from crossfactorial.design import DesignSpec, systematic_design
from crossfactorial.exceptions import BindingError, ParseError, StructuralError
from crossfactorial.factors import canonical_term
from crossfactorial.formula import Cross, ErrorClause, RandomUnit, Term, bind_term, expand, parse, render, to_model

from conftest import RUNNING

REFERENCE_FORMULAS = {
    "a": ["y~I+Error(T+I:T)", "y~I+(1|T)+(1|I:T)"],
    "b": ["y~I+Error(I*T*B)", "y~I+(1|T)+(1|B)+(1|T:B)+(1|I:T)+(1|I:B)+(1|I:T:B)"],
    "c": ["y~I+Error(B+I+C+T+I:B+C:B+T:B+I:C+I:T+I:C:B+I:T:B)",
          "y~I+(1|T)+(1|B)+(1|T:B)+(1|C)+(1|C:B)+(1|I:T)+(1|I:B)+(1|I:T:B)+(1|I:C)+(1|I:C:B)"],
}
ALL_REFERENCE = [f for pair in REFERENCE_FORMULAS.values() for f in pair]


@pytest.mark.parametrize("text", ALL_REFERENCE)
def test_reference_formulas_round_trip(text):
    ast = parse(text)
    assert render(ast) == text
    assert render(parse(render(ast))) == text


def test_whitespace_is_ignored():
    assert render(parse("  y ~ I + Error( T + I : T )\n")) == "y~I+Error(T+I:T)"


def test_ast_shape():
    ast = parse("y~I+Error(T+I:T)+(1|B)")
    assert ast.response == "y"
    assert ast.fixed_terms == [Term(("I",))]
    assert ast.error_terms == [Term(("T",)), Term(("I", "T"))]
    assert ast.random_terms == [Term(("B",))]


def test_error_cross_expands_to_seven_terms():
    ast = expand(parse("y~I+Error(I*T*B)"))
    err = [t.render() for t in ast.error_terms]
    assert err == ["I", "T", "B", "I:T", "I:B", "T:B", "I:T:B"]


def test_random_cross_expands():
    ast = expand(parse("y~I+(1|T*B)"))
    assert [g.render() for g in ast.random_terms] == ["T", "B", "T:B"]


def test_intercept_only():
    ast = parse("y~1")
    assert ast.has_intercept_only
    assert render(ast) == "y~1"


def test_long_names_bind_to_letters():
    assert bind_term(Term(("therapist", "intervention"))) == "I:T"
    assert bind_term(Term(("centre", "batch", "I"))) == "I:C:B"


def test_unknown_identifier_raises_binding_error():
    ast = parse("y~I+Error(Z)")
    with pytest.raises(BindingError):
        to_model(ast, systematic_design(DesignSpec(**RUNNING["a"])))


@pytest.mark.parametrize("text,offset", [
    ("y~", 2),
    ("y~I+", 4),
    ("y I", 2),
    ("y~I+Error(T", 9),
    ("y~(1|)", 5),
    ("y~I$", 3),
    ("", 0),
    ("y~I)", 3),
])
def test_parse_errors_report_offsets(text, offset):
    with pytest.raises(ParseError) as info:
        parse(text)
    assert info.value.offset == offset
    assert f"(at byte {offset})" in str(info.value)


def test_offsets_count_bytes_not_characters():
    text = "y~I+é"
    with pytest.raises(ParseError) as info:
        parse(text)
    assert info.value.offset == len("y~I+".encode())


# -- expansion properties -----------------------------------------------------------------------


LETTERS = ["I", "T", "B", "C"]


def inter():
    return st.lists(st.sampled_from(LETTERS), min_size=1, max_size=3, unique=True).map(":".join)


def cross():
    return st.lists(inter(), min_size=1, max_size=3).map("*".join)


def items():
    plain = cross()
    error = st.lists(cross(), min_size=1, max_size=3).map(lambda xs: "Error(" + "+".join(xs) + ")")
    unit = cross().map(lambda x: f"(1|{x})")
    return st.lists(st.one_of(plain, error, unit), min_size=1, max_size=4)


def term_sets(ast):
    fixed = {t.key for t in ast.fixed_terms}
    err = {t.key for t in ast.error_terms}
    rnd = {t.key for t in ast.random_terms}
    return fixed, err, rnd


@settings(max_examples=200)
@given(items())
def test_expand_is_idempotent(parts):
    ast = parse("y~" + "+".join(parts))
    once = expand(ast)
    assert expand(once) == once
    assert render(parse(render(once))) == render(once)
    for item in once.items:
        assert not isinstance(item, Cross)
        if isinstance(item, ErrorClause):
            assert not any(isinstance(t, Cross) for t in item.terms)
        if isinstance(item, RandomUnit):
            assert isinstance(item.group, Term)


@settings(max_examples=200)
@given(items(), st.randoms(use_true_random=False))
def test_expand_is_order_insensitive(parts, rnd):
    shuffled = list(parts)
    rnd.shuffle(shuffled)
    a = expand(parse("y~" + "+".join(parts)))
    b = expand(parse("y~" + "+".join(shuffled)))
    assert term_sets(a) == term_sets(b)


@settings(max_examples=100)
@given(st.lists(inter(), min_size=1, max_size=3))
def test_cross_contains_every_subset_interaction(parts):
    terms = {t.key for t in expand(parse("y~" + "*".join(parts))).fixed_terms}
    for p in parts:
        assert frozenset(p.split(":")) in terms
    assert frozenset(":".join(parts).split(":")) in terms


# -- binding to designs --------------------------------------------------------------------------


@pytest.mark.parametrize("shape", ["a", "b", "c"])
@pytest.mark.parametrize("which", [0, 1])
def test_reference_formulas_reproduce_standard_lattices(shape, which):
    design = systematic_design(DesignSpec(**RUNNING[shape]))
    lattice, spec = to_model(parse(REFERENCE_FORMULAS[shape][which]), design)
    reference = standard_lattice(design)
    assert sorted(lattice.names("random")) == sorted(reference.names("random"))
    assert sorted(lattice.edges("random")) == sorted(reference.edges("random"))
    assert [f.name for f in lattice.fixed] == ["U", "I"]
    roles = {f.name: f.role for f in lattice.random}
    assert roles.get("I") == (None if shape == "a" else "dependent-random")
    assert spec.fixed == "I"
    assert "I" not in spec.random_terms


@pytest.mark.parametrize("shape", ["a", "b", "c"])
def test_error_and_random_unit_notations_agree(shape):
    design = systematic_design(DesignSpec(**RUNNING[shape]))
    _, spec_error = to_model(parse(REFERENCE_FORMULAS[shape][0]), design)
    _, spec_unit = to_model(parse(REFERENCE_FORMULAS[shape][1]), design)
    assert set(spec_error.random_terms) == set(spec_unit.random_terms)


def test_term_order_inside_interactions_is_irrelevant():
    design = systematic_design(DesignSpec(**RUNNING["b"]))
    _, a = to_model(parse("y~I+(1|T:I)+(1|B:T)"), design)
    _, b = to_model(parse("y~I+(1|I:T)+(1|T:B)"), design)
    assert a.random_terms == b.random_terms == (canonical_term("I:T"), canonical_term("T:B"))


def test_intercept_only_model():
    design = systematic_design(DesignSpec(**RUNNING["a"]))
    lattice, spec = to_model(parse("y~1+(1|T)"), design)
    assert spec.fixed is None
    assert lattice.names("random") == ["U", "T", "E"]


def test_interaction_fixed_effect_rejected():
    design = systematic_design(DesignSpec(**RUNNING["a"]))
    with pytest.raises(StructuralError):
        to_model(parse("y~I:T"), design)


def test_model_terms_bind_to_existing_columns():
    design = systematic_design(DesignSpec(**RUNNING["c"]))
    _, spec = to_model(parse(REFERENCE_FORMULAS["c"][1]), design)
    for term in spec.random_terms:
        assert design.factor(term).n_levels > 1
    assert len(spec.random_terms) == 10
