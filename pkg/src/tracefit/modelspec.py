"""The model-specification mini-language.

A model is a sum of terms.  Each term names a feature from the catalog, the
component column whose levels it is computed over, an optional coefficient
scope modifier, and bindings for the feature's nonlinear parameters::

    model  := term ("+" term)*
    term   := feature modifier? "(" component ("," binding)* ")"
    modifier := "$"            -- one coefficient per component level
              | "@"            -- penalized per-level intercept (intercept only)
    binding  := name "=" (number | "?")

"?" marks a parameter as free, to be optimized with the catalog's default
bounds.  Intercept terms always receive one coefficient per level; for all
other features the default (no modifier) is a single shared coefficient.
Whitespace is insignificant.  Component names that are not plain identifiers
can be quoted: ``intercept("KC (Default)")``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Optional

from . import features
from .errors import SpecError

SHARED = "shared"
PER_LEVEL = "per_level"
RANDOM_INTERCEPT = "random_intercept"

_TOKEN_RE = re.compile(
    r"""\s*(?:
        (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
      | (?P<number>[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?)
      | (?P<quoted>"[^"]*"|'[^']*')
      | (?P<sym>[+$@(),=?])
      )""",
    re.VERBOSE,
)

_IDENT_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_.]*\Z")


@dataclass(frozen=True)
class Term:
    """One additive term: feature x component x scope x parameter bindings."""

    feature: str
    component: str
    scope: str = SHARED
    bindings: tuple = ()  # ((name, float | None), ...) in catalog order; None = free

    def binding_map(self) -> dict:
        return dict(self.bindings)

    def free_params(self) -> list:
        return [name for name, v in self.bindings if v is None]


@dataclass(frozen=True)
class ModelSpec:
    terms: tuple
    source: str = ""

    def free_params(self) -> list:
        """All free parameters in term order as (term_index, name) pairs."""
        out = []
        for i, t in enumerate(self.terms):
            out.extend((i, name) for name in t.free_params())
        return out


def _tokenize(text: str) -> list:
    tokens = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == m.start():
            if text[pos:].strip() == "":
                break
            raise SpecError(f"syntax error at position {pos}: "
                            f"unexpected {text[pos:pos + 10]!r}")
        if m.lastgroup is not None:
            tokens.append((m.lastgroup, m.group(m.lastgroup), m.start(m.lastgroup)))
        pos = m.end()
    tokens.append(("eof", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self, kind=None, value=None):
        tok = self.tokens[self.i]
        if kind is not None and tok[0] != kind or (value is not None and tok[1] != value):
            want = value if value is not None else kind
            raise SpecError(f"syntax error at position {tok[2]}: "
                            f"expected {want!r}, found {tok[1] or 'end of input'!r}")
        self.i += 1
        return tok

    def parse(self) -> ModelSpec:
        terms = [self.term()]
        while self.peek()[1] == "+":
            self.take("sym", "+")
            terms.append(self.term())
        tok = self.peek()
        if tok[0] != "eof":
            raise SpecError(f"syntax error at position {tok[2]}: "
                            f"unexpected {tok[1]!r} after term")
        seen = set()
        for t in terms:
            key = (t.feature, t.component, t.scope)
            if key in seen:
                raise SpecError(f"duplicate term {t.feature}({t.component}) "
                                f"with scope {t.scope}")
            seen.add(key)
        return ModelSpec(tuple(terms), self.text)

    def term(self) -> Term:
        tok = self.take("name")
        feature = tok[1]
        if feature not in features.CATALOG:
            known = ", ".join(sorted(features.CATALOG))
            raise SpecError(f"unknown feature {feature!r} at position {tok[2]}; "
                            f"known features: {known}")
        scope = SHARED
        nxt = self.peek()
        if nxt[1] == "$":
            self.take("sym", "$")
            scope = PER_LEVEL
        elif nxt[1] == "@":
            self.take("sym", "@")
            scope = RANDOM_INTERCEPT
        if scope == RANDOM_INTERCEPT and feature != "intercept":
            raise SpecError(f"'@' applies only to intercept terms, not {feature!r}")
        if scope == PER_LEVEL and feature == "numeric":
            raise SpecError("numeric terms fit a single shared coefficient; "
                            "'$' is not allowed")
        self.take("sym", "(")
        comp = self.component()
        given = {}
        while self.peek()[1] == ",":
            self.take("sym", ",")
            name_tok = self.take("name")
            self.take("sym", "=")
            val_tok = self.peek()
            if val_tok[1] == "?":
                self.take("sym", "?")
                value: Optional[float] = None
            else:
                num = self.take("number")
                value = float(num[1])
            if name_tok[1] in given:
                raise SpecError(f"parameter {name_tok[1]!r} bound twice "
                                f"at position {name_tok[2]}")
            given[name_tok[1]] = value
        self.take("sym", ")")

        required = features.required_params(feature)
        missing = [n for n in required if n not in given]
        extra = [n for n in given if n not in required]
        if missing or extra:
            parts = []
            if missing:
                parts.append(f"missing parameter(s) {missing}")
            if extra:
                parts.append(f"unexpected parameter(s) {extra}")
            need = f"; {feature} takes ({', '.join(required)})" if required \
                else f"; {feature} takes no parameters"
            raise SpecError(f"term {feature}({comp}): " + " and ".join(parts) + need)
        for name, value in given.items():
            if value is not None:
                _check_bound(feature, name, value)
        bindings = tuple((n, given[n]) for n in required)
        return Term(feature, comp, scope, bindings)

    def component(self) -> str:
        tok = self.peek()
        if tok[0] == "quoted":
            self.take("quoted")
            return tok[1][1:-1]
        if tok[0] == "name":
            self.take("name")
            return tok[1]
        raise SpecError(f"syntax error at position {tok[2]}: expected a component "
                        f"column name, found {tok[1] or 'end of input'!r}")


def _check_bound(feature: str, name: str, value: float) -> None:
    ps = features.param_bounds(feature, name)
    ok = ps.lo < value <= ps.hi if ps.lo_open else ps.lo <= value <= ps.hi
    if not ok:
        lo = f"({ps.lo}" if ps.lo_open else f"[{ps.lo}"
        raise SpecError(f"{feature} parameter {name}={value} outside bounds "
                        f"{lo}, {ps.hi}]")


def parse_model(text: str) -> ModelSpec:
    """Parse model text into a ModelSpec, rejecting any malformed input."""
    if not text or not text.strip():
        raise SpecError("empty model specification")
    return _Parser(text).parse()


def render(spec: ModelSpec) -> str:
    """Canonical text form; parse_model(render(s)) is structurally s."""
    parts = []
    for t in spec.terms:
        mod = {PER_LEVEL: "$", RANDOM_INTERCEPT: "@"}.get(t.scope, "")
        comp = t.component if _IDENT_RE.match(t.component) else f'"{t.component}"'
        args = [comp]
        args.extend(f"{n}=?" if v is None else f"{n}={v!r}" for n, v in t.bindings)
        parts.append(f"{t.feature}{mod}({', '.join(args)})")
    return " + ".join(parts)


@dataclass(frozen=True)
class ValidatedSpec:
    spec: ModelSpec
    cardinality: dict  # term index -> planned coefficient count

    @property
    def terms(self) -> tuple:
        return self.spec.terms


def _component_levels(event, component: str) -> tuple:
    if component == "Student":
        return (event.student_id,)
    if component == "KC":
        return event.kc_levels
    if component == "Item":
        return (event.item_id,) if event.item_id is not None else ()
    v = event.extra_columns.get(component)
    return (v,) if v is not None and v != "" else ()


def numeric_value(event, component: str) -> float:
    if component == "Duration":
        if event.duration is None:
            raise SpecError("numeric(Duration): event without a duration value")
        return float(event.duration)
    v = event.extra_columns.get(component)
    if v is None or v == "":
        raise SpecError(f"numeric({component}): missing value")
    try:
        return float(v)
    except ValueError:
        raise SpecError(f"numeric({component}): non-numeric value {v!r}") from None


def validate(spec: ModelSpec, ds) -> ValidatedSpec:
    """Check every term's component against the dataset and report sizes."""
    available = set(ds.columns)
    cardinality = {}
    for i, t in enumerate(spec.terms):
        if t.feature == "numeric":
            if t.component != "Duration" and t.component not in available:
                raise SpecError(f"term {i}: column {t.component!r} not in dataset "
                                f"(available: {sorted(available)})")
            for ev in ds.events:
                numeric_value(ev, t.component)
            cardinality[i] = 1
            continue
        if t.component == "Duration" or t.component not in available:
            raise SpecError(f"term {i}: column {t.component!r} not in dataset "
                            f"(available: {sorted(available)})")
        if t.feature == "intercept" or t.scope in (PER_LEVEL, RANDOM_INTERCEPT):
            levels = set()
            for ev in ds.events:
                levels.update(_component_levels(ev, t.component))
            cardinality[i] = len(levels)
        else:
            cardinality[i] = 1
    return ValidatedSpec(spec, cardinality)


def _table2(n: int) -> str:
    pd = "propdec(Student, d=?)"
    icept = "intercept(KC)"
    kc_terms = {
        1: ["lineafm$(KC)"],
        2: ["logafm$(KC)"],
        3: ["linesuc$(KC)", "linefail$(KC)"],
        4: ["logsuc$(KC)", "logfail$(KC)"],
        5: ["logsuc$(KC)", "logfail$(KC)", "recency$(KC, d=?)"],
        6: ["expdecsuc$(KC, d=?)", "expdecfail$(KC, d=?)"],
        7: ["propdec$(KC, d=?)"],
        8: ["propdec$(KC, d=?)", "logfail$(KC)"],
        9: ["propdec$(KC, d=?)", "expdecfail$(KC, d=?)"],
        10: ["propdec$(KC, d=?)", "ppe$(KC, c=?, x=?, b=?, m=?)"],
        11: ["propdec$(KC, d=?)", "base2$(KC, d=?, b=?)"],
        12: ["propdec$(KC, d=?)", "base4$(KC, d=?, b=?, xi=?, gamma=?)"],
    }[n]
    return " + ".join([pd, icept] + kc_terms)


_TABLE3 = {
    1: "intercept@(Student)",
    2: "intercept(Student)",
    3: "propdec(Student, d=?)",
    4: "propdec2(Student, d=?)",
    5: "logitdec(Student, d=?)",
    6: "intercept(Student) + propdec(Student, d=?)",
}

PRESETS = {f"table2:{i}": _table2(i) for i in range(1, 13)}
PRESETS.update({f"table3:{i}": _TABLE3[i] for i in range(1, 7)})


def expand_presets(names) -> list:
    """Expand preset names (supporting 'table2:*' wildcards) in table order."""
    out = []
    for name in names:
        name = name.strip()
        if name.endswith(":*"):
            prefix = name[:-1]
            matches = [k for k in PRESETS if k.startswith(prefix)]
            matches.sort(key=lambda k: int(k.split(":")[1]))
            if not matches:
                raise SpecError(f"no presets match {name!r}")
            out.extend(matches)
        elif name in PRESETS:
            out.append(name)
        else:
            raise SpecError(f"unknown preset {name!r}; known: "
                            + ", ".join(sorted(PRESETS)))
    return out
