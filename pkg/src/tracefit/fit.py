"""Design-matrix assembly, penalized logistic fitting, and nested optimization.

Fitting a model has an inner and an outer problem.  The inner problem is a
ridge-stabilized logistic regression solved by iteratively reweighted least
squares (IRLS) with step-halving.  The outer problem tunes any free
nonlinear feature parameters by a derivative-free simplex search over a
smooth bounds transform, rebuilding the design matrix and refitting at every
evaluation.

To keep the outer loop cheap, one pass over the dataset precomputes, per
component column, a table of per-(trial, level) state snapshots (counts,
ages, intrasession time, mean spacing) plus the per-level trial sequences.
Feature values for any parameter setting are then pure array transforms of
those snapshots, except the decayed-count recurrences and the weighted-age
feature, which walk each level sequence once.  Snapshot accumulation uses
the same state code as :mod:`tracefit.features`, so builder output matches
the streaming reference bit for bit.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import sparse
from scipy.optimize import minimize
from scipy.special import expit

from . import features
from .errors import FitError, SpecError
from .features import (ComponentState, GHOSTS, RECURRENCE_KINDS, _ppe_value,
                       advance_state)
from .ingest import Dataset, TrialEvent, replace_event
from .modelspec import (ModelSpec, PER_LEVEL, RANDOM_INTERCEPT, Term,
                        _component_levels, numeric_value, parse_model, render,
                        validate)


@dataclass(frozen=True)
class FitConfig:
    """Knobs for the inner solver and the outer simplex search."""

    ridge: float = 1e-6            # stability floor on every coefficient
    ridge_random: float = 1.0      # penalty on '@' (random-intercept) columns
    session_gap: float = features.DEFAULT_SESSION_GAP
    max_irls_iter: int = 50
    irls_tol: float = 1e-10
    nm_max_evals: int = 300
    nm_fatol: float = 1e-5
    nm_step: float = 0.5
    multistart: int = 1
    seed: int = 0

    @staticmethod
    def from_dict(d: dict) -> "FitConfig":
        unknown = set(d) - set(FitConfig.__dataclass_fields__)
        if unknown:
            raise FitError(f"unknown fit-config keys: {sorted(unknown)}")
        return FitConfig(**d)


@dataclass
class Seq:
    """One (student, level) trial sequence: entry positions, outcomes, times."""

    pos: np.ndarray
    y: list
    ts: np.ndarray


@dataclass
class ColumnTable:
    """Per-entry prior-state snapshots for one component column.

    An entry is one (trial, level) pair; trials carrying several levels of
    the column produce several entries.
    """

    rows: np.ndarray       # trial row index per entry
    codes: np.ndarray      # level code per entry
    levels: list           # code -> level name
    n: np.ndarray          # prior opportunity count
    suc: np.ndarray
    fail: np.ndarray
    delta: np.ndarray      # now - t_last (0 when n == 0)
    age: np.ndarray        # now - t_first (0 when n == 0)
    ispx: np.ndarray       # intrasession time extended by the final gap
    gapmean: np.ndarray    # (t_last - t_first) / (n - 1); 1.0 when n < 2
    seqs: list


@dataclass
class BuildContext:
    tables: dict           # component column -> ColumnTable
    numeric: dict          # term index -> per-trial value array
    y: np.ndarray
    n_rows: int


def _build_column_table(ds: Dataset, column: str, session_gap: float) -> ColumnTable:
    rows, codes = [], []
    n_l, s_l, f_l = [], [], []
    delta_l, age_l, ispx_l, gapm_l = [], [], [], []
    entry_y, entry_ts = [], []
    levels: list = []
    level_idx: dict = {}
    seq_entries: dict = {}
    row = 0
    for sid, evs in ds.iter_students():
        states: dict = {}
        for ev in evs:
            lvls = _component_levels(ev, column)
            touched = []
            for lv in lvls:
                st = states.get(lv)
                if st is None:
                    st = ComponentState(session_gap=session_gap)
                    states[lv] = st
                code = level_idx.get(lv)
                if code is None:
                    code = len(levels)
                    level_idx[lv] = code
                    levels.append(lv)
                rows.append(row)
                codes.append(code)
                n_l.append(st.n_opp)
                s_l.append(st.n_suc)
                f_l.append(st.n_fail)
                if st.n_opp:
                    delta_l.append(ev.timestamp - st.t_last)
                    age_l.append(ev.timestamp - st.t_first)
                    ispx_l.append(st.extended_intrasession(ev.timestamp, ev.session_id))
                    gapm_l.append((st.t_last - st.t_first) / (st.n_opp - 1)
                                  if st.n_opp >= 2 else 1.0)
                else:
                    delta_l.append(0.0)
                    age_l.append(0.0)
                    ispx_l.append(0.0)
                    gapm_l.append(1.0)
                entry_y.append(float(ev.outcome))
                entry_ts.append(ev.timestamp)
                seq_entries.setdefault((sid, code), []).append(len(rows) - 1)
                touched.append(st)
            for st in touched:
                advance_state(st, ev.timestamp, ev.outcome, ev.session_id)
            row += 1

    seqs = []
    for key in seq_entries:
        pos = np.asarray(seq_entries[key], dtype=np.int64)
        seqs.append(Seq(pos,
                        [entry_y[i] for i in pos],
                        np.asarray([entry_ts[i] for i in pos], dtype=np.float64)))
    arr = lambda xs: np.asarray(xs, dtype=np.float64)
    return ColumnTable(np.asarray(rows, dtype=np.int64),
                       np.asarray(codes, dtype=np.int64), levels,
                       arr(n_l), arr(s_l), arr(f_l), arr(delta_l), arr(age_l),
                       arr(ispx_l), arr(gapm_l), seqs)


def prepare_tables(ds: Dataset, spec: ModelSpec,
                   session_gap: float = features.DEFAULT_SESSION_GAP) -> BuildContext:
    """One streaming pass producing everything parameter-independent."""
    needed = {t.component for t in spec.terms if t.feature != "numeric"}
    tables = {c: _build_column_table(ds, c, session_gap) for c in sorted(needed)}
    numeric = {}
    for ti, t in enumerate(spec.terms):
        if t.feature == "numeric":
            numeric[ti] = np.asarray([numeric_value(ev, t.component)
                                      for ev in ds.events], dtype=np.float64)
    return BuildContext(tables, numeric, ds.outcomes(), len(ds))


def _entry_values(table: ColumnTable, kind: str, p: dict) -> np.ndarray:
    n, s, f = table.n, table.suc, table.fail
    if kind == "lineafm":
        return n.copy()
    if kind == "logafm":
        return np.log1p(n)
    if kind == "powafm":
        return np.where(n > 0, n ** p["d"], 0.0)
    if kind == "logsuc":
        return np.log1p(s)
    if kind == "logfail":
        return np.log1p(f)
    if kind == "linesuc":
        return s.copy()
    if kind == "linefail":
        return f.copy()
    if kind == "linecomp":
        return s - f
    if kind == "prop":
        return np.where(n > 0, s / np.where(n > 0, n, 1.0), 0.5)
    if kind == "logit":
        c = p["c"]
        return np.log((s + c) / (f + c))
    if kind == "recency":
        return np.where(n > 0, np.maximum(1.0, table.delta) ** (-p["d"]), 0.0)
    if kind in ("base", "basesuc", "basefail"):
        age = np.maximum(1.0, table.age)
        cnt = {"base": n, "basesuc": s, "basefail": f}[kind]
        return np.where(n > 0, np.log1p(cnt) * age ** (-p["d"]), 0.0)
    if kind in ("base2", "base2suc", "base2fail", "base4"):
        age = np.maximum(1.0, table.age)
        adj = np.maximum(1.0, table.ispx + p["b"] * (age - table.ispx))
        decay = adj ** (-p["d"])
        if kind == "base4":
            spacing = np.where(n >= 2, np.maximum(1.0, table.gapmean) ** p["xi"], 1.0)
            out = np.log1p(n) ** p["gamma"] * spacing * decay
        else:
            cnt = {"base2": n, "base2suc": s, "base2fail": f}[kind]
            out = np.log1p(cnt) * decay
        return np.where(n > 0, out, 0.0)
    if kind in RECURRENCE_KINDS:
        return _recurrence_values(table, kind, p["d"])
    if kind == "ppe":
        out = np.zeros(len(n))
        c, x, b, m = p["c"], p["x"], p["b"], p["m"]
        for seq in table.seqs:
            ts = seq.ts
            for k, e in enumerate(seq.pos):
                out[e] = _ppe_value(ts[:k], ts[k], c, x, b, m)
        return out
    raise SpecError(f"unknown feature kind {kind!r}")


def _recurrence_values(table: ColumnTable, kind: str, d: float) -> np.ndarray:
    out = np.zeros(len(table.n))
    if kind in ("propdec", "propdec2", "logitdec"):
        g_s, g_f = GHOSTS[kind]
        use_log = kind == "logitdec"
        for seq in table.seqs:
            s_acc, f_acc = g_s, g_f
            pos = seq.pos
            ys = seq.y
            for k in range(len(pos)):
                out[pos[k]] = math.log(s_acc / f_acc) if use_log \
                    else s_acc / (s_acc + f_acc)
                y = ys[k]
                s_acc = s_acc * d + y
                f_acc = f_acc * d + (1.0 - y)
        return out
    for seq in table.seqs:
        acc = 0.0
        pos = seq.pos
        ys = seq.y
        if kind == "expdecafm":
            for k in range(len(pos)):
                out[pos[k]] = acc
                acc = acc * d + 1.0
        elif kind == "expdecsuc":
            for k in range(len(pos)):
                out[pos[k]] = acc
                acc = acc * d + ys[k]
        else:  # expdecfail
            for k in range(len(pos)):
                out[pos[k]] = acc
                acc = acc * d + (1.0 - ys[k])
    return out


def _is_per_level(term: Term) -> bool:
    return term.feature == "intercept" or term.scope in (PER_LEVEL, RANDOM_INTERCEPT)


def materialize(ctx: BuildContext, spec: ModelSpec, params: dict,
                colmap: Optional[dict] = None):
    """Assemble the sparse design matrix for a full parameter assignment.

    ``colmap`` maps (term index, level-or-None) to a column.  When omitted it
    is created from the context (training); when given, entries whose level
    has no column contribute nothing (unseen levels at prediction time).
    """
    if colmap is None:
        colmap = {}
        for ti, term in enumerate(spec.terms):
            if _is_per_level(term):
                for lv in sorted(ctx.tables[term.component].levels):
                    colmap[(ti, lv)] = len(colmap)
            else:
                colmap[(ti, None)] = len(colmap)
    rows_parts, cols_parts, vals_parts = [], [], []
    for ti, term in enumerate(spec.terms):
        if term.feature == "numeric":
            rows = np.arange(ctx.n_rows, dtype=np.int64)
            vals = ctx.numeric[ti]
            cols = np.full(ctx.n_rows, colmap[(ti, None)], dtype=np.int64)
        else:
            table = ctx.tables[term.component]
            rows = table.rows
            if term.feature == "intercept":
                vals = np.ones(len(rows))
            else:
                vals = _entry_values(table, term.feature, params.get(ti, {}))
            if _is_per_level(term):
                code_to_col = np.asarray(
                    [colmap.get((ti, lv), -1) for lv in table.levels],
                    dtype=np.int64)
                cols = code_to_col[table.codes] if len(rows) else \
                    np.empty(0, dtype=np.int64)
                mask = cols >= 0
                if not mask.all():
                    rows, cols, vals = rows[mask], cols[mask], vals[mask]
            else:
                cols = np.full(len(rows), colmap[(ti, None)], dtype=np.int64)
        rows_parts.append(rows)
        cols_parts.append(cols)
        vals_parts.append(vals)
    ncols = len(colmap)
    if ncols == 0:
        raise FitError("model has no fittable columns on this dataset")
    X = sparse.coo_matrix(
        (np.concatenate(vals_parts),
         (np.concatenate(rows_parts), np.concatenate(cols_parts))),
        shape=(ctx.n_rows, ncols)).tocsr()
    return X, colmap


def build_design_matrix(ds: Dataset, spec: ModelSpec, params: dict,
                        session_gap: float = features.DEFAULT_SESSION_GAP,
                        colmap: Optional[dict] = None):
    """Convenience wrapper: one-shot table preparation plus materialization."""
    ctx = prepare_tables(ds, spec, session_gap)
    return materialize(ctx, spec, params, colmap)


def _penalties(spec: ModelSpec, colmap: dict, cfg: FitConfig) -> np.ndarray:
    lam = np.full(len(colmap), cfg.ridge)
    for (ti, _lv), j in colmap.items():
        if spec.terms[ti].scope == RANDOM_INTERCEPT:
            lam[j] = cfg.ridge_random
    return lam


@dataclass
class GlmResult:
    beta: np.ndarray
    ll: float              # unpenalized log-likelihood at beta
    penalized_ll: float
    p: np.ndarray
    converged: bool
    iterations: int
    separated: bool


def fit_glm(X, y: np.ndarray, penalties: np.ndarray,
            cfg: Optional[FitConfig] = None) -> GlmResult:
    """Maximize sum(y ln p + (1-y) ln(1-p)) - 0.5 sum(lam beta^2) by IRLS.

    Newton steps with step-halving; converged when the penalized objective
    moves by less than ``irls_tol`` or after ``max_irls_iter`` iterations.
    Perfect separation is tamed by the ridge floor and flagged.
    """
    cfg = cfg or FitConfig()
    if X.shape[0] == 0:
        raise FitError("empty design matrix")
    lam = np.asarray(penalties, dtype=np.float64)
    if np.any(lam < 0):
        raise FitError("penalties must be >= 0")
    X = sparse.csr_matrix(X)
    m = X.shape[1]
    beta = np.zeros(m)
    z = np.zeros(X.shape[0])

    def pll(b, zz):
        return float(y @ zz - np.logaddexp(0.0, zz).sum() - 0.5 * (lam * b * b).sum())

    obj = pll(beta, z)
    converged = False
    iterations = 0
    for iterations in range(1, cfg.max_irls_iter + 1):
        p = expit(z)
        w = np.clip(p * (1.0 - p), 1e-10, None)
        g = X.T @ (y - p) - lam * beta
        H = (X.T @ X.multiply(w[:, None])).toarray()
        H[np.diag_indices_from(H)] += lam
        try:
            delta = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            delta = np.linalg.lstsq(H, g, rcond=None)[0]
        step = 1.0
        improved = False
        nb, nz, nobj = beta, z, obj
        for _ in range(30):
            nb = beta + step * delta
            nz = X @ nb
            nobj = pll(nb, nz)
            if nobj >= obj:
                improved = True
                break
            step *= 0.5
        if not improved:
            converged = True  # no ascent direction left at this precision
            break
        beta, z = nb, nz
        if nobj - obj < cfg.irls_tol:
            obj = nobj
            converged = True
            break
        obj = nobj

    p = expit(z)
    ll = float(y @ z - np.logaddexp(0.0, z).sum())
    separated = bool(np.any(np.abs(beta) > 12.0))
    return GlmResult(beta, ll, obj, p, converged, iterations, separated)


@dataclass
class FittedModel:
    """A fitted specification: coefficients, resolved parameters, diagnostics."""

    spec: ModelSpec
    params: dict           # term index -> {param name: resolved value}
    coefs: np.ndarray
    columns: list          # column index -> (term index, level or None)
    train_ll: float
    null_ll: float
    base_rate: float
    session_gap: float
    diagnostics: dict = field(default_factory=dict)

    def colmap(self) -> dict:
        return {key: j for j, key in enumerate(self.columns)}

    def coefficient(self, term_idx: int, level: Optional[str] = None) -> float:
        return float(self.coefs[self.colmap()[(term_idx, level)]])

    @property
    def train_mcfadden(self) -> float:
        if self.null_ll == 0:
            return float("nan")
        return 1.0 - self.train_ll / self.null_ll

    def to_dict(self) -> dict:
        return {
            "spec": render(self.spec),
            "params": {str(ti): dict(pv) for ti, pv in sorted(self.params.items())},
            "coefficients": [
                {"term": ti, "level": lv, "coef": float(self.coefs[j])}
                for j, (ti, lv) in enumerate(self.columns)
            ],
            "train_ll": self.train_ll,
            "null_ll": self.null_ll,
            "train_mcfadden": self.train_mcfadden,
            "base_rate": self.base_rate,
            "session_gap": self.session_gap,
            "diagnostics": self.diagnostics,
        }

    @staticmethod
    def from_dict(d: dict) -> "FittedModel":
        spec = parse_model(d["spec"])
        params = {int(ti): dict(pv) for ti, pv in d["params"].items()}
        columns = [(c["term"], c["level"]) for c in d["coefficients"]]
        coefs = np.array([c["coef"] for c in d["coefficients"]], dtype=np.float64)
        return FittedModel(spec, params, coefs, columns, d["train_ll"],
                           d["null_ll"], d["base_rate"], d["session_gap"],
                           dict(d.get("diagnostics", {})))

    def save(self, path, extra_header: Optional[dict] = None) -> None:
        doc = dict(extra_header or {})
        doc.update(self.to_dict())
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "FittedModel":
        with open(path, "r", encoding="utf-8") as fh:
            return FittedModel.from_dict(json.load(fh))


def _fixed_params(spec: ModelSpec) -> dict:
    return {ti: {n: v for n, v in t.bindings if v is not None}
            for ti, t in enumerate(spec.terms)}


def fit_model(ds: Dataset, spec, config: Optional[FitConfig] = None) -> FittedModel:
    """Fit a model, optimizing any free nonlinear parameters in an outer loop.

    With no free parameters this is a single inner fit.  Otherwise a
    Nelder-Mead simplex searches the free vector through a logistic bounds
    transform, starting at bound midpoints, with the inner fit's penalized
    train log-likelihood as the objective.  Deterministic given the seed.
    """
    cfg = config or FitConfig()
    if isinstance(spec, str):
        spec = parse_model(spec)
    validate(spec, ds)
    if len(ds) == 0:
        raise FitError("empty dataset")
    ctx = prepare_tables(ds, spec, cfg.session_gap)
    y = ctx.y

    free = []
    for ti, name in spec.free_params():
        ps = features.param_bounds(spec.terms[ti].feature, name)
        free.append((ti, name, ps.lo, ps.hi))
    fixed = _fixed_params(spec)

    def resolve(zvec) -> dict:
        params = {ti: dict(m) for ti, m in fixed.items()}
        for (ti, name, lo, hi), zj in zip(free, zvec):
            params[ti][name] = lo + (hi - lo) * float(expit(zj))
        return params

    def solve_at(params):
        X, colmap = materialize(ctx, spec, params)
        lam = _penalties(spec, colmap, cfg)
        return colmap, fit_glm(X, y, lam, cfg)

    eval_count = 0
    if not free:
        params = resolve(())
        colmap, res = solve_at(params)
        nm_evals, nm_converged = 0, True
    else:
        def objective(zvec):
            nonlocal eval_count
            eval_count += 1
            _, r = solve_at(resolve(zvec))
            return -r.penalized_ll

        k = len(free)
        starts = [np.zeros(k)]
        if cfg.multistart > 1:
            rng = np.random.default_rng(cfg.seed)
            starts.extend(rng.uniform(-2.0, 2.0, size=k)
                          for _ in range(cfg.multistart - 1))
        best = None
        nm_converged = False
        for z0 in starts:
            simplex = np.vstack([z0] + [z0 + cfg.nm_step * e for e in np.eye(k)])
            result = minimize(objective, z0, method="Nelder-Mead",
                              options={"initial_simplex": simplex,
                                       "fatol": cfg.nm_fatol,
                                       "xatol": float("inf"),
                                       "maxfev": cfg.nm_max_evals,
                                       "maxiter": 10 ** 9})
            if best is None or result.fun < best.fun:
                best = result
            nm_converged = nm_converged or bool(result.success)
        params = resolve(best.x)
        colmap, res = solve_at(params)
        nm_evals = eval_count

    ones = sparse.csr_matrix(np.ones((len(y), 1)))
    null = fit_glm(ones, y, np.array([cfg.ridge]), cfg)

    columns = [None] * len(colmap)
    for key, j in colmap.items():
        columns[j] = key
    diagnostics = {
        "irls_converged": res.converged,
        "irls_iterations": res.iterations,
        "separated": res.separated,
        "nm_evaluations": nm_evals,
        "nm_converged": nm_converged,
        "penalized_ll": res.penalized_ll,
    }
    return FittedModel(spec, params, res.beta, columns, res.ll, null.ll,
                       float(y.mean()), cfg.session_gap, diagnostics)


def predict(model: FittedModel, ds: Dataset) -> np.ndarray:
    """Per-trial success probabilities for a dataset with the same schema."""
    validate(model.spec, ds)
    ctx = prepare_tables(ds, model.spec, model.session_gap)
    X, _ = materialize(ctx, model.spec, model.params, colmap=model.colmap())
    return expit(X @ model.coefs)


def score_candidates(model: FittedModel, history: list, candidates: list,
                     now: Optional[float] = None, target: float = 0.8,
                     mastery: float = 0.95) -> list:
    """Rank candidate next items by closeness to the target probability.

    ``history`` is one student's time-ordered events; each candidate is a
    TrialEvent template (outcome ignored).  Ties break lexicographically by
    item id; candidates at or above the mastery threshold are flagged.
    """
    if not candidates:
        raise FitError("empty candidate set")
    if now is None:
        now = history[-1].timestamp + 1.0 if history else 0.0
    student = history[0].student_id if history else "student"
    session = history[-1].session_id if history else None
    scored = []
    for cand in candidates:
        ev = TrialEvent(student, cand.item_id, cand.kc_levels, now, 0,
                        None, True, cand.session_id or session,
                        dict(cand.extra_columns))
        ds = Dataset([replace_event(e) for e in history] + [ev])
        p = float(predict(model, ds)[-1])
        scored.append({"item": cand.item_id, "p": p,
                       "distance": abs(p - target), "mastered": p >= mastery})
    scored.sort(key=lambda r: (r["distance"], str(r["item"])))
    return scored
