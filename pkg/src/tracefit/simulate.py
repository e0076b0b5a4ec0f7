"""Synthetic learner datasets drawn from a known ground-truth model.

Generation walks each student's scheduled trials in order: features are
evaluated on strictly-prior state, the logit is assembled from the
ground-truth coefficients, an outcome is drawn, and only then does the
state advance.  Adaptive features therefore feed back on sampled outcomes,
like a live system.  Every student has an independent random stream derived
from (seed, student index), so generation is deterministic and order-safe.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, SpecError
from .features import ComponentState, eval_feature, update_state
from .ingest import Dataset, TrialEvent
from .modelspec import ModelSpec, _component_levels, parse_model, render


@dataclass
class TruthModel:
    """A fully-bound specification with known coefficients."""

    spec: ModelSpec
    params: dict = field(default_factory=dict)        # term -> {name: value}
    shared_coefs: dict = field(default_factory=dict)  # term -> coefficient
    level_coefs: dict = field(default_factory=dict)   # term -> {level: coef}

    def __post_init__(self):
        if isinstance(self.spec, str):
            self.spec = parse_model(self.spec)
        for ti, term in enumerate(self.spec.terms):
            bound = dict(self.params.get(ti, {}))
            for name, v in term.bindings:
                if v is not None:
                    bound.setdefault(name, v)
            missing = [n for n, _ in term.bindings if n not in bound]
            if missing:
                raise ConfigError(f"ground-truth term {ti} ({term.feature}) "
                                  f"lacks parameter value(s) {missing}")
            self.params[ti] = bound

    def to_dict(self) -> dict:
        return {
            "spec": render(self.spec),
            "params": {str(k): v for k, v in sorted(self.params.items())},
            "shared_coefs": {str(k): v for k, v in sorted(self.shared_coefs.items())},
            "level_coefs": {str(k): dict(sorted(v.items()))
                            for k, v in sorted(self.level_coefs.items())},
        }

    @staticmethod
    def from_dict(d: dict) -> "TruthModel":
        return TruthModel(
            parse_model(d["spec"]),
            {int(k): dict(v) for k, v in d.get("params", {}).items()},
            {int(k): float(v) for k, v in d.get("shared_coefs", {}).items()},
            {int(k): {lv: float(c) for lv, c in v.items()}
             for k, v in d.get("level_coefs", {}).items()},
        )


@dataclass
class SynthConfig:
    """Shape of the synthetic cohort and its practice schedule."""

    students: int = 100
    kcs: int = 5
    items_per_kc: int = 4
    trials_per_student: int = 100
    gap_range: tuple = (10.0, 600.0)       # log-uniform inter-trial gap, seconds
    trials_per_session: Optional[int] = None
    session_gap: float = 86400.0           # inserted between sessions, seconds
    truth: Optional[TruthModel] = None
    seed: int = 0

    def __post_init__(self):
        if min(self.students, self.kcs, self.items_per_kc,
               self.trials_per_student) < 1:
            raise ConfigError("all counts must be >= 1")
        lo, hi = self.gap_range
        if not (0 < lo <= hi):
            raise ConfigError("gap_range must be positive with lo <= hi")
        if self.truth is None:
            raise ConfigError("a ground-truth model is required")

    def to_dict(self) -> dict:
        return {
            "students": self.students,
            "kcs": self.kcs,
            "items_per_kc": self.items_per_kc,
            "trials_per_student": self.trials_per_student,
            "gap_range": list(self.gap_range),
            "trials_per_session": self.trials_per_session,
            "session_gap": self.session_gap,
            "seed": self.seed,
            "truth": self.truth.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "SynthConfig":
        d = dict(d)
        truth = TruthModel.from_dict(d.pop("truth"))
        if "gap_range" in d:
            d["gap_range"] = tuple(d["gap_range"])
        unknown = set(d) - set(SynthConfig.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synthetic-config keys: {sorted(unknown)}")
        return SynthConfig(truth=truth, **d)


_SYNTH_COLUMNS = {"Student", "KC", "Item"}


def _check_schema(truth: TruthModel) -> None:
    for ti, term in enumerate(truth.spec.terms):
        if term.feature == "numeric":
            raise SpecError("numeric terms are not part of the synthetic schema")
        if term.component not in _SYNTH_COLUMNS:
            raise SpecError(f"ground-truth term {ti} references column "
                            f"{term.component!r}; synthetic data has "
                            f"{sorted(_SYNTH_COLUMNS)}")


def generate(cfg: SynthConfig) -> Dataset:
    """Draw a full synthetic cohort from the ground-truth model."""
    truth = cfg.truth
    _check_schema(truth)
    spec = truth.spec
    all_events = []
    kc_ids = [f"kc{k:02d}" for k in range(cfg.kcs)]
    for sidx in range(cfg.students):
        rng = np.random.default_rng([cfg.seed, sidx])
        sid = f"s{sidx:04d}"
        states: dict = {}
        item_counter = {kc: 0 for kc in kc_ids}
        t = 0.0
        session = 0
        lo, hi = math.log(cfg.gap_range[0]), math.log(cfg.gap_range[1])
        for k in range(cfg.trials_per_student):
            if k > 0:
                if cfg.trials_per_session and k % cfg.trials_per_session == 0:
                    t += cfg.session_gap
                    session += 1
                else:
                    t += math.exp(rng.uniform(lo, hi))
            kc = kc_ids[k % cfg.kcs]
            item = f"{kc}_i{item_counter[kc] % cfg.items_per_kc}"
            item_counter[kc] += 1
            probe = TrialEvent(sid, item, (kc,), t, 0, None, True, f"sess{session}")

            x = 0.0
            for ti, term in enumerate(spec.terms):
                levels = _component_levels(probe, term.component)
                if term.feature == "intercept":
                    per = truth.level_coefs.get(ti, {})
                    x += sum(per.get(lv, 0.0) for lv in levels)
                    continue
                params = truth.params.get(ti, {})
                for lv in levels:
                    st = states.get((term.component, lv))
                    if st is None:
                        st = ComponentState()
                        states[(term.component, lv)] = st
                    value = eval_feature(st, term.feature, params, t,
                                         probe.session_id)
                    if ti in truth.level_coefs:
                        x += truth.level_coefs[ti].get(lv, 0.0) * value
                    else:
                        x += truth.shared_coefs.get(ti, 0.0) * value
            p = 1.0 / (1.0 + math.exp(-x))
            outcome = 1 if rng.random() < p else 0
            event = TrialEvent(sid, item, (kc,), t, outcome, None, True,
                               probe.session_id)
            touched = set()
            for term in spec.terms:
                for lv in _component_levels(event, term.component):
                    key = (term.component, lv)
                    if key in touched:
                        continue
                    st = states.get(key)
                    if st is None:
                        st = ComponentState()
                        states[key] = st
                    update_state(st, event)
                    touched.add(key)
            all_events.append(event)

    all_events.sort(key=lambda ev: ev.student_id)  # stable: trial order kept
    provenance = {"source": "synthetic", "config": cfg.to_dict(),
                  "warnings": [], "filters": []}
    return Dataset(all_events, provenance)
