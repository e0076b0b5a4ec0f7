"""Per-level practice-history state and the feature catalog.

Every feature maps a component level's strictly-prior history to a real
number that enters the logit.  State lives per (student, component column,
level): counts of prior opportunities/successes/failures, the timestamps of
the first and most recent opportunities, the full (timestamp, outcome)
history, and the accumulated within-session time between first and last
opportunity.

Two evaluation paths exist and must agree exactly:

* ``eval_feature`` recomputes a value from a ComponentState (the reference,
  used by tests, sequential generation, and candidate scoring);
* ``FeatureStream`` maintains decayed running counts incrementally so a full
  pass over a level's trials is linear-time (used via the design-matrix
  builder in :mod:`tracefit.fit`).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import SequencingError, SpecError

DEFAULT_SESSION_GAP = 1800.0

# Ghost pseudo-counts seeding the decayed-proportion recurrences.  propdec
# starts at exactly 0.5; propdec2 starts at 0 and can only rise.
GHOSTS = {
    "propdec": (1.0, 1.0),
    "propdec2": (0.0, 3.0),
    "logitdec": (1.0, 1.0),
}


@dataclass(frozen=True)
class ParamSpec:
    name: str
    lo: float
    hi: float
    lo_open: bool = False  # value must be strictly greater than lo


@dataclass(frozen=True)
class FeatureInfo:
    params: tuple
    adaptive: bool
    dynamic: bool


def _p(name, lo, hi, lo_open=False):
    return ParamSpec(name, lo, hi, lo_open)


# The catalog: every evaluable kind, the nonlinear parameters it requires,
# their default bounds, and whether it is adaptive (depends on outcome
# quality) and/or dynamic (changes with time or amount of practice).
CATALOG = {
    "intercept": FeatureInfo((), False, False),
    "numeric": FeatureInfo((), False, False),
    "lineafm": FeatureInfo((), False, True),
    "logafm": FeatureInfo((), False, True),
    "powafm": FeatureInfo((_p("d", 0.0, 1.0),), False, True),
    "recency": FeatureInfo((_p("d", 0.0, 3.0),), False, True),
    "expdecafm": FeatureInfo((_p("d", 0.0, 1.0, lo_open=True),), False, True),
    "base": FeatureInfo((_p("d", 0.0, 3.0),), False, True),
    "base2": FeatureInfo((_p("d", 0.0, 3.0), _p("b", 0.0, 1.0)), False, True),
    "base4": FeatureInfo(
        (_p("d", 0.0, 3.0), _p("b", 0.0, 1.0), _p("xi", 0.0, 1.0),
         _p("gamma", 0.0, 3.0, lo_open=True)),
        False, True),
    "ppe": FeatureInfo(
        (_p("c", 0.0, 1.0, lo_open=True), _p("x", 0.0, 1.0),
         _p("b", 0.0, 3.0), _p("m", 0.0, 3.0)),
        False, True),
    "logsuc": FeatureInfo((), True, True),
    "linesuc": FeatureInfo((), True, True),
    "logfail": FeatureInfo((), True, True),
    "linefail": FeatureInfo((), True, True),
    "expdecsuc": FeatureInfo((_p("d", 0.0, 1.0, lo_open=True),), True, True),
    "expdecfail": FeatureInfo((_p("d", 0.0, 1.0, lo_open=True),), True, True),
    "basesuc": FeatureInfo((_p("d", 0.0, 3.0),), True, True),
    "basefail": FeatureInfo((_p("d", 0.0, 3.0),), True, True),
    "base2suc": FeatureInfo((_p("d", 0.0, 3.0), _p("b", 0.0, 1.0)), True, True),
    "base2fail": FeatureInfo((_p("d", 0.0, 3.0), _p("b", 0.0, 1.0)), True, True),
    "linecomp": FeatureInfo((), True, True),
    "prop": FeatureInfo((), True, True),
    "propdec": FeatureInfo((_p("d", 0.0, 1.0, lo_open=True),), True, True),
    "propdec2": FeatureInfo((_p("d", 0.0, 1.0, lo_open=True),), True, True),
    "logit": FeatureInfo((_p("c", 0.0, 5.0, lo_open=True),), True, True),
    "logitdec": FeatureInfo((_p("d", 0.0, 1.0, lo_open=True),), True, True),
}

COUNT_KINDS = frozenset({"lineafm", "logafm", "powafm", "expdecafm"})
MEMORY_KINDS = frozenset({"recency", "base", "base2", "base4", "ppe",
                          "basesuc", "basefail", "base2suc", "base2fail"})
PERFORMANCE_KINDS = frozenset({"logsuc", "logfail", "linesuc", "linefail",
                               "expdecsuc", "expdecfail", "linecomp"})
PROPORTION_KINDS = frozenset({"prop", "propdec", "propdec2", "logit", "logitdec"})
EVALUABLE_KINDS = COUNT_KINDS | MEMORY_KINDS | PERFORMANCE_KINDS | PROPORTION_KINDS

# Kinds whose value at trial k depends on a decayed running count over the
# prior outcomes of the level (and nothing else).
RECURRENCE_KINDS = frozenset({"expdecafm", "expdecsuc", "expdecfail",
                              "propdec", "propdec2", "logitdec"})


def required_params(feature: str) -> tuple:
    try:
        return tuple(p.name for p in CATALOG[feature].params)
    except KeyError:
        raise SpecError(f"unknown feature {feature!r}") from None


def param_bounds(feature: str, name: str) -> ParamSpec:
    for p in CATALOG[feature].params:
        if p.name == name:
            return p
    raise SpecError(f"feature {feature!r} has no parameter {name!r}")


@dataclass
class ComponentState:
    """Accumulated strictly-prior history for one (student, column, level)."""

    session_gap: float = DEFAULT_SESSION_GAP
    n_opp: int = 0
    n_suc: int = 0
    n_fail: int = 0
    t_first: Optional[float] = None
    t_last: Optional[float] = None
    timestamps: list = field(default_factory=list)
    outcomes: list = field(default_factory=list)
    intrasession_elapsed: float = 0.0
    last_session: Optional[str] = None

    @property
    def history(self) -> list:
        return list(zip(self.timestamps, self.outcomes))

    def within_session(self, now: float, session_id: Optional[str] = None) -> bool:
        """True when the gap from the last opportunity to ``now`` stays in-session."""
        if self.n_opp == 0:
            return False
        gap = now - self.t_last
        if gap <= self.session_gap:
            return True
        return (session_id is not None and self.last_session is not None
                and session_id == self.last_session)

    def extended_intrasession(self, now: float, session_id: Optional[str] = None) -> float:
        """Intrasession time including the final gap up to ``now`` if in-session."""
        if self.n_opp == 0:
            return 0.0
        if self.within_session(now, session_id):
            return self.intrasession_elapsed + (now - self.t_last)
        return self.intrasession_elapsed


def update_state(state: ComponentState, event) -> ComponentState:
    """Fold one observed event into the state.  Call after evaluating features."""
    return advance_state(state, event.timestamp, event.outcome, event.session_id)


def advance_state(state: ComponentState, timestamp: float, outcome: int,
                  session_id: Optional[str] = None) -> ComponentState:
    if state.n_opp > 0:
        if timestamp < state.t_last:
            raise SequencingError(
                f"event at {timestamp} precedes last seen timestamp {state.t_last}")
        if state.within_session(timestamp, session_id):
            state.intrasession_elapsed += timestamp - state.t_last
    else:
        state.t_first = timestamp
    state.t_last = timestamp
    state.timestamps.append(timestamp)
    state.outcomes.append(int(outcome))
    state.n_opp += 1
    if outcome:
        state.n_suc += 1
    else:
        state.n_fail += 1
    state.last_session = session_id
    return state


def _decayed_counts(outcomes, d: float, g_s: float, g_f: float) -> tuple:
    s = g_s
    f = g_f
    for y in outcomes:
        s = s * d + y
        f = f * d + (1.0 - y)
    return s, f


def _decayed_sum(outcomes, d: float, of_successes: bool) -> float:
    c = 0.0
    for y in outcomes:
        c = c * d + (y if of_successes else 1.0 - y)
    return c


def _ppe_value(ts_prior: np.ndarray, now: float, c: float, x: float,
               b: float, m: float) -> float:
    """Power-law practice with recency-weighted age and spacing-tuned decay."""
    n = len(ts_prior)
    if n == 0:
        return 0.0
    ages = np.maximum(1.0, now - ts_prior)
    w = ages ** (-x)
    w = w / w.sum()
    t_w = float(np.dot(w, ages))
    if n >= 2:
        lags = np.diff(ts_prior)
        d_t = b + m * float(np.mean(1.0 / np.log(math.e + lags)))
    else:
        d_t = b
    return n ** c * t_w ** (-d_t)


def mean_prior_gap(state: ComponentState) -> float:
    """Mean gap between successive prior opportunities, clamped to >= 1 s."""
    if state.n_opp < 2:
        return 1.0
    return max(1.0, (state.t_last - state.t_first) / (state.n_opp - 1))


def eval_count_features(state: ComponentState, kind: str, params: dict,
                        now: Optional[float] = None) -> float:
    n = state.n_opp
    if kind == "lineafm":
        return float(n)
    if kind == "logafm":
        return math.log1p(n)
    if kind == "powafm":
        return 0.0 if n == 0 else float(n) ** params["d"]
    if kind == "expdecafm":
        return _expdec_total(state.outcomes, params["d"])
    raise SpecError(f"not a count feature: {kind!r}")


def _expdec_total(outcomes, d: float) -> float:
    c = 0.0
    for _ in outcomes:
        c = c * d + 1.0
    return c


def eval_memory_features(state: ComponentState, kind: str, params: dict,
                         now: float, session_id: Optional[str] = None) -> float:
    n = state.n_opp
    if n == 0:
        return 0.0
    if kind == "recency":
        return max(1.0, now - state.t_last) ** (-params["d"])
    if kind == "ppe":
        return _ppe_value(np.asarray(state.timestamps, dtype=np.float64), now,
                          params["c"], params["x"], params["b"], params["m"])
    age = max(1.0, now - state.t_first)
    if kind == "base":
        return math.log1p(n) * age ** (-params["d"])
    if kind == "basesuc":
        return math.log1p(state.n_suc) * age ** (-params["d"])
    if kind == "basefail":
        return math.log1p(state.n_fail) * age ** (-params["d"])
    ispx = state.extended_intrasession(now, session_id)
    adj_age = max(1.0, ispx + params["b"] * (age - ispx))
    if kind == "base2":
        return math.log1p(n) * adj_age ** (-params["d"])
    if kind == "base2suc":
        return math.log1p(state.n_suc) * adj_age ** (-params["d"])
    if kind == "base2fail":
        return math.log1p(state.n_fail) * adj_age ** (-params["d"])
    if kind == "base4":
        spacing = mean_prior_gap(state) ** params["xi"] if n >= 2 else 1.0
        return math.log1p(n) ** params["gamma"] * spacing * adj_age ** (-params["d"])
    raise SpecError(f"not a memory feature: {kind!r}")


def eval_performance_features(state: ComponentState, kind: str, params: dict) -> float:
    if kind == "logsuc":
        return math.log1p(state.n_suc)
    if kind == "logfail":
        return math.log1p(state.n_fail)
    if kind == "linesuc":
        return float(state.n_suc)
    if kind == "linefail":
        return float(state.n_fail)
    if kind == "linecomp":
        return float(state.n_suc - state.n_fail)
    if kind == "expdecsuc":
        return _decayed_sum(state.outcomes, params["d"], True)
    if kind == "expdecfail":
        return _decayed_sum(state.outcomes, params["d"], False)
    raise SpecError(f"not a performance feature: {kind!r}")


def eval_proportion_features(state: ComponentState, kind: str, params: dict) -> float:
    if kind == "prop":
        return state.n_suc / state.n_opp if state.n_opp else 0.5
    if kind == "logit":
        c = params["c"]
        return math.log((state.n_suc + c) / (state.n_fail + c))
    g_s, g_f = GHOSTS[kind]
    s, f = _decayed_counts(state.outcomes, params["d"], g_s, g_f)
    if kind in ("propdec", "propdec2"):
        return s / (s + f)
    if kind == "logitdec":
        return math.log(s / f)
    raise SpecError(f"not a proportion feature: {kind!r}")


def eval_feature(state: ComponentState, kind: str, params: dict,
                 now: Optional[float] = None,
                 session_id: Optional[str] = None) -> float:
    """Reference evaluation of any catalog kind from a ComponentState."""
    if kind in COUNT_KINDS:
        return eval_count_features(state, kind, params, now)
    if kind in MEMORY_KINDS:
        if now is None:
            raise ValueError(f"{kind} requires the current time")
        return eval_memory_features(state, kind, params, now, session_id)
    if kind in PERFORMANCE_KINDS:
        return eval_performance_features(state, kind, params)
    if kind in PROPORTION_KINDS:
        return eval_proportion_features(state, kind, params)
    raise SpecError(f"unknown feature kind {kind!r}")


class FeatureStream:
    """Incremental evaluator for one feature over one level's trial sequence.

    ``value`` must be read before ``push`` for each trial so only strictly
    prior information is used.  Decayed running counts are maintained
    incrementally; all other kinds evaluate from the underlying state.
    """

    def __init__(self, kind: str, params: Optional[dict] = None,
                 session_gap: float = DEFAULT_SESSION_GAP):
        if kind not in EVALUABLE_KINDS:
            raise SpecError(f"unknown feature kind {kind!r}")
        self.kind = kind
        self.params = dict(params or {})
        self.state = ComponentState(session_gap=session_gap)
        if kind in ("propdec", "propdec2", "logitdec"):
            self._s, self._f = GHOSTS[kind]
        else:
            self._s, self._f = 0.0, 0.0
        self._c = 0.0

    def value(self, now: Optional[float] = None,
              session_id: Optional[str] = None) -> float:
        kind, p = self.kind, self.params
        if kind == "expdecafm":
            return self._c
        if kind == "expdecsuc":
            return self._s
        if kind == "expdecfail":
            return self._f
        if kind in ("propdec", "propdec2"):
            return self._s / (self._s + self._f)
        if kind == "logitdec":
            return math.log(self._s / self._f)
        return eval_feature(self.state, kind, p, now, session_id)

    def push(self, timestamp: float, outcome: int,
             session_id: Optional[str] = None) -> None:
        d = self.params.get("d")
        y = float(outcome)
        if self.kind == "expdecafm":
            self._c = self._c * d + 1.0
        elif self.kind == "expdecsuc":
            self._s = self._s * d + y
        elif self.kind == "expdecfail":
            self._f = self._f * d + (1.0 - y)
        elif self.kind in ("propdec", "propdec2", "logitdec"):
            self._s = self._s * d + y
            self._f = self._f * d + (1.0 - y)
        advance_state(self.state, timestamp, outcome, session_id)
