"""Parser for analysis formulas such as ``y~I+Error(T+I:T)`` or ``y~I+(1|T)+(1|I:T)``.

Grammar (``:`` binds tighter than ``*``, which binds tighter than ``+``)::

    formula := IDENT '~' sum
    sum     := item ('+' item)*
    item    := 'Error' '(' sum ')' | '(' '1' '|' cross ')' | '1' | cross
    cross   := inter ('*' inter)*
    inter   := IDENT (':' IDENT)*

Whitespace is ignored.  Identifiers start with a letter and continue with
letters, digits or underscores.  Error positions are reported as byte offsets
into the UTF-8 encoded text.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

from .exceptions import BindingError, ParseError

ALIASES = {
    "I": "I", "intervention": "I",
    "T": "T", "therapist": "T",
    "B": "B", "batch": "B",
    "C": "C", "centre": "C", "center": "C",
}


@dataclass(frozen=True)
class Term:
    """An identifier or a ``:`` interaction of identifiers."""

    names: tuple

    def render(self) -> str:
        return ":".join(self.names)

    @property
    def key(self) -> frozenset:
        return frozenset(self.names)


@dataclass(frozen=True)
class Cross:
    """Unexpanded ``a*b*...``; each part is a :class:`Term`."""

    parts: tuple

    def render(self) -> str:
        return "*".join(p.render() for p in self.parts)

    def expand(self) -> tuple:
        # main effects, then two-way, three-way ... interactions
        out = []
        for size in range(1, len(self.parts) + 1):
            for combo in combinations(self.parts, size):
                names = []
                for part in combo:
                    names.extend(n for n in part.names if n not in names)
                out.append(Term(tuple(names)))
        return tuple(out)


@dataclass(frozen=True)
class Intercept:
    def render(self) -> str:
        return "1"


@dataclass(frozen=True)
class ErrorClause:
    terms: tuple

    def render(self) -> str:
        return "Error(" + "+".join(t.render() for t in self.terms) + ")"


@dataclass(frozen=True)
class RandomUnit:
    """A ``(1|G)`` random-intercept unit."""

    group: object

    def render(self) -> str:
        return f"(1|{self.group.render()})"


@dataclass(frozen=True)
class FormulaAst:
    """Parsed formula.  ``items`` keeps the right-hand side in source order."""

    response: str
    items: tuple

    @property
    def fixed_terms(self) -> list:
        return [i for i in self.items if isinstance(i, (Term, Cross))]

    @property
    def error_terms(self) -> list:
        return [t for i in self.items if isinstance(i, ErrorClause) for t in i.terms]

    @property
    def random_terms(self) -> list:
        return [i.group for i in self.items if isinstance(i, RandomUnit)]

    @property
    def has_intercept_only(self) -> bool:
        return not self.fixed_terms

    def render(self) -> str:
        return f"{self.response}~" + "+".join(i.render() for i in self.items)

    def __str__(self):
        return self.render()


_TOKEN = re.compile(r"\s*(?:(?P<ident>[A-Za-z][A-Za-z0-9_]*)|(?P<num>[0-9]+)|(?P<op>[~+:*()|]))")


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if not m:
            start = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ParseError(f"unexpected character {text[start]!r}", len(text[:start].encode("utf-8")))
        kind = m.lastgroup
        value = m.group(kind)
        start = m.start(kind)
        tokens.append((kind, value, len(text[:start].encode("utf-8"))))
        pos = m.end()
    tokens.append(("end", "", len(text.encode("utf-8"))))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self, ahead: int = 0):
        return self.tokens[min(self.i + ahead, len(self.tokens) - 1)]

    def take(self, value: str | None = None, kind: str | None = None):
        tok = self.peek()
        if (value is not None and tok[1] != value) or (kind is not None and tok[0] != kind):
            want = repr(value) if value is not None else kind
            got = "end of input" if tok[0] == "end" else repr(tok[1])
            raise ParseError(f"expected {want}, found {got}", tok[2])
        self.i += 1
        return tok

    def formula(self) -> FormulaAst:
        resp = self.take(kind="ident")[1]
        self.take("~")
        items = self.sum(top=True)
        if self.peek()[0] != "end":
            tok = self.peek()
            msg = "unbalanced ')'" if tok[1] == ")" else f"unexpected {tok[1]!r}"
            raise ParseError(msg, tok[2])
        return FormulaAst(resp, tuple(items))

    def sum(self, top: bool) -> list:
        items = [self.item(top)]
        while self.peek()[1] == "+":
            self.take("+")
            items.append(self.item(top))
        return items

    def item(self, top: bool):
        kind, value, off = self.peek()
        if kind == "ident" and value == "Error" and self.peek(1)[1] == "(":
            if not top:
                raise ParseError("Error(...) cannot be nested", off)
            self.take()
            paren = self.peek()[2]
            self.take("(")
            if self.peek()[1] == ")":
                raise ParseError("empty Error clause", self.peek()[2])
            terms = []
            for it in self.sum(top=False):
                if not isinstance(it, (Term, Cross)):
                    raise ParseError("Error(...) may only contain terms", off)
                terms.append(it)
            self.close(paren)
            return ErrorClause(tuple(terms))
        if value == "(":
            if not top:
                raise ParseError("random-effect units cannot be nested", off)
            self.take("(")
            one = self.peek()
            if one[1] != "1":
                raise ParseError("expected '1' in (1|group)", one[2])
            self.take()
            self.take("|")
            group = self.cross()
            self.close(off)
            return RandomUnit(group)
        if kind == "num":
            if value != "1":
                raise ParseError(f"only the intercept 1 may appear as a number, found {value!r}", off)
            self.take()
            return Intercept()
        if kind == "end":
            raise ParseError("expected a term, found end of input", off)
        if kind != "ident":
            raise ParseError(f"expected a term, found {value!r}", off)
        return self.cross()

    def close(self, open_offset: int):
        tok = self.peek()
        if tok[1] != ")":
            if tok[0] == "end":
                raise ParseError("unbalanced '('", open_offset)
            raise ParseError(f"expected ')', found {tok[1]!r}", tok[2])
        self.take(")")

    def cross(self):
        parts = [self.inter()]
        while self.peek()[1] == "*":
            self.take("*")
            parts.append(self.inter())
        return parts[0] if len(parts) == 1 else Cross(tuple(parts))

    def inter(self) -> Term:
        names = [self.take(kind="ident")[1]]
        while self.peek()[1] == ":":
            self.take(":")
            names.append(self.take(kind="ident")[1])
        return Term(tuple(names))


def parse(text: str) -> FormulaAst:
    """Parse formula text into a :class:`FormulaAst`.

    Raises
    ------
    ParseError
        With the byte offset of the offending token.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    if not text.strip():
        raise ParseError("empty formula", 0)
    return _Parser(text).formula()


def _dedupe(terms: Sequence[Term]) -> tuple:
    seen, out = set(), []
    for t in terms:
        if t.key not in seen:
            seen.add(t.key)
            out.append(t)
    return tuple(out)


def expand(ast: FormulaAst) -> FormulaAst:
    """Replace every ``*`` by its main effects and interactions and drop duplicates."""
    items = []
    fixed_seen = set()
    for item in ast.items:
        if isinstance(item, Cross):
            expanded = item.expand()
        elif isinstance(item, Term):
            expanded = (item,)
        elif isinstance(item, ErrorClause):
            flat = []
            for t in item.terms:
                flat.extend(t.expand() if isinstance(t, Cross) else (t,))
            items.append(ErrorClause(_dedupe(flat)))
            continue
        elif isinstance(item, RandomUnit):
            groups = item.group.expand() if isinstance(item.group, Cross) else (item.group,)
            items.extend(RandomUnit(g) for g in groups)
            continue
        else:
            items.append(item)
            continue
        for t in expanded:
            if t.key not in fixed_seen:
                fixed_seen.add(t.key)
                items.append(t)
    # random units: drop repeats of the same group
    out, seen_groups = [], set()
    for item in items:
        if isinstance(item, RandomUnit):
            if item.group.key in seen_groups:
                continue
            seen_groups.add(item.group.key)
        out.append(item)
    return FormulaAst(ast.response, tuple(out))


def render(ast: FormulaAst) -> str:
    """Canonical text: no whitespace, items in AST order."""
    return ast.render()


def bind_term(term: Term) -> str:
    """Canonical design term name for an AST term (``therapist:intervention`` -> ``I:T``)."""
    from .factors import canonical_term

    letters = []
    for name in term.names:
        if name not in ALIASES:
            raise BindingError(f"identifier {name!r} does not name a design column "
                               f"(expected one of {', '.join(sorted(ALIASES))})")
        letters.append(ALIASES[name])
    return canonical_term(":".join(letters))


def to_model(ast: FormulaAst, design):
    """Lattice and mixed-model spec for a parsed formula on a design.

    Error and ``(1|G)`` terms become random factors; other terms are fixed.
    A factor in both parts becomes dependent-random in the lattice and carries
    no variance parameter in the model spec.

    Returns
    -------
    lattice : FactorLattice
    spec : ModelSpec
    """
    from .factors import build_lattice
    from .reml import ModelSpec

    ast = expand(ast)
    fixed = [bind_term(t) for t in ast.fixed_terms]
    random = list(dict.fromkeys(bind_term(t) for t in ast.error_terms + ast.random_terms))
    if len(fixed) > 1 or any(":" in f for f in fixed):
        from .exceptions import StructuralError

        raise StructuralError("only a single fixed factor (the intervention) is supported")
    factors = [design.factor(f, "fixed") for f in fixed] + [design.factor(r) for r in random]
    if not factors:
        from .factors import Factor

        factors = [Factor.universal(design.n_units)]
    lattice = build_lattice(factors)
    fixed_factors = [design.factor(f, "fixed") for f in fixed]
    model_terms = tuple(r for r in random
                        if not any(design.factor(r).same_partition(ff) for ff in fixed_factors))
    spec = ModelSpec(model_terms, fixed=fixed[0] if fixed else None)
    return lattice, spec
