"""Metrics, repeated split-half cross-validation, and model comparison.

Each cross-validation run partitions students (never trials) into halves
using a run-derived random stream, fits every candidate model on the train
half with full nested optimization, and scores the held-out half.  Models
inside one run always see the identical split.  Pairwise comparison runs a
paired t-test over per-subject held-out RMSE within each run, averages the
t statistic across runs, and adjusts the resulting p-values for false
discovery under dependency.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse, stats
from scipy.special import expit

from .errors import FitError, TracefitError
from .fit import FitConfig, fit_glm, fit_model, predict
from .ingest import Dataset
from .modelspec import ModelSpec, parse_model, render


def log_likelihood(p: np.ndarray, y: np.ndarray) -> float:
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return float(np.sum(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def mcfadden_r2(p_model, p_null, y) -> float:
    """1 - LL(model)/LL(null); NaN when the null likelihood is exactly zero."""
    y = np.asarray(y, dtype=np.float64)
    p_null = np.broadcast_to(np.asarray(p_null, dtype=np.float64), y.shape)
    ll_null = log_likelihood(p_null, y)
    if ll_null == 0.0:
        return float("nan")
    return 1.0 - log_likelihood(p_model, y) / ll_null


def auc(p, y) -> float:
    """Probability a random positive outranks a random negative, ties as 1/2.

    NaN when y contains a single class.
    """
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y)
    pos = y == 1
    n_pos = int(pos.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = stats.rankdata(p)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def subject_rmse(p, y, subjects) -> tuple:
    """Per-subject root-mean-square error and the unweighted subject mean."""
    p = np.asarray(p, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    order: list = []
    groups: dict = {}
    for i, s in enumerate(subjects):
        if s not in groups:
            groups[s] = []
            order.append(s)
        groups[s].append(i)
    out = {}
    for s in order:
        idx = np.asarray(groups[s], dtype=np.int64)
        out[s] = float(np.sqrt(np.mean((y[idx] - p[idx]) ** 2)))
    return out, float(np.mean(list(out.values())))


@dataclass
class CvReport:
    """Everything recorded by split-half cross-validation."""

    labels: list
    spec_texts: list
    seed: int
    runs: int
    records: list                      # one dict per run
    summary: list                      # one dict per model
    subsample: Optional[int] = None
    pairwise: Optional[dict] = None    # filled by pairwise_compare

    def to_dict(self) -> dict:
        return {
            "labels": self.labels,
            "specs": self.spec_texts,
            "seed": self.seed,
            "runs": self.runs,
            "subsample": self.subsample,
            "summary": self.summary,
            "pairwise": self.pairwise,
            "records": self.records,
        }

    def to_json(self, extra_header: Optional[dict] = None) -> str:
        doc = dict(extra_header or {})
        doc.update(self.to_dict())
        return json.dumps(doc, indent=2, sort_keys=True)


def _fit_and_score(spec: ModelSpec, train: Dataset, test: Dataset,
                   p_null: float, cfg: FitConfig) -> dict:
    model = fit_model(train, spec, cfg)
    p = predict(model, test)
    y = test.outcomes()
    per_subject, mean_rmse = subject_rmse(p, y, test.subjects())
    return {
        "ok": True,
        "error": None,
        "mcfadden": mcfadden_r2(p, p_null, y),
        "auc": auc(p, y),
        "mean_subject_rmse": mean_rmse,
        "subject_rmse": per_subject,
        "diagnostics": dict(model.diagnostics),
        "params": {str(k): v for k, v in sorted(model.params.items()) if v},
    }


def _one_run(run: int, ds: Dataset, specs: Sequence[ModelSpec], seed: int,
             subsample: Optional[int], cfg: FitConfig) -> dict:
    ss = np.random.SeedSequence([seed, run])
    shuffle_seq, fit_seq = ss.spawn(2)
    rng = np.random.default_rng(shuffle_seq)
    students = list(ds.student_ids)
    n = len(students)
    if subsample is not None and subsample < n:
        chosen = rng.choice(n, size=subsample, replace=False)
        ordered = [students[i] for i in chosen]
    else:
        ordered = [students[i] for i in rng.permutation(n)]
    n_train = (len(ordered) + 1) // 2  # odd counts: train gets the extra
    train_ids = ordered[:n_train]
    test_ids = ordered[n_train:]
    train = ds.subset(train_ids)
    test = ds.subset(test_ids)

    run_cfg = replace(cfg, seed=int(fit_seq.generate_state(1)[0]))
    base_rate = float(train.outcomes().mean())
    # Null for test-fold McFadden: intercept-only refit on the train half,
    # which is the training base rate up to the ridge floor.
    y_train = train.outcomes()
    ones = sparse.csr_matrix(np.ones((len(y_train), 1)))
    null = fit_glm(ones, y_train, np.array([run_cfg.ridge]), run_cfg)
    p_null = float(expit(null.beta[0]))

    models = []
    for spec in specs:
        try:
            models.append(_fit_and_score(spec, train, test, p_null, run_cfg))
        except TracefitError as exc:
            models.append({"ok": False, "error": f"{type(exc).__name__}: {exc}",
                           "mcfadden": None, "auc": None,
                           "mean_subject_rmse": None, "subject_rmse": {},
                           "diagnostics": {}, "params": {}})
    return {
        "run": run,
        "train_students": train_ids,
        "test_students": test_ids,
        "base_rate": base_rate,
        "null_p": p_null,
        "models": models,
    }


def split_half_cv(ds: Dataset, specs, runs: int = 100, seed: int = 0,
                  threads: int = 1, subsample_students: Optional[int] = None,
                  fit_config: Optional[FitConfig] = None,
                  labels: Optional[list] = None) -> CvReport:
    """Repeated student-stratified split-half cross-validation.

    Every run derives its own random stream from (seed, run index), so
    extending the run count leaves earlier runs unchanged, and results do
    not depend on the thread count.
    """
    if len(ds.student_ids) < 2:
        raise FitError("split-half cross-validation needs at least 2 students")
    parsed = [parse_model(s) if isinstance(s, str) else s for s in specs]
    if not parsed:
        raise FitError("no model specifications given")
    cfg = fit_config or FitConfig()
    texts = [render(s) for s in parsed]
    labels = list(labels) if labels is not None else list(texts)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(_one_run, r, ds, parsed, seed,
                                   subsample_students, cfg)
                       for r in range(runs)]
            records = [f.result() for f in futures]
    else:
        records = [_one_run(r, ds, parsed, seed, subsample_students, cfg)
                   for r in range(runs)]

    summary = []
    for mi in range(len(parsed)):
        rows = [rec["models"][mi] for rec in records]
        ok = [r for r in rows if r["ok"]]
        def mean_of(key):
            vals = [r[key] for r in ok if r[key] is not None
                    and not math.isnan(r[key])]
            return float(np.mean(vals)) if vals else None
        summary.append({
            "label": labels[mi],
            "spec": texts[mi],
            "runs_ok": len(ok),
            "runs_excluded": len(rows) - len(ok),
            "mcfadden": mean_of("mcfadden"),
            "auc": mean_of("auc"),
            "mean_subject_rmse": mean_of("mean_subject_rmse"),
        })
    return CvReport(labels, texts, seed, runs, records, summary,
                    subsample_students)


def _benjamini_yekutieli(p_values: np.ndarray) -> np.ndarray:
    """Step-up FDR adjustment valid under dependency, clipped to [raw, 1]."""
    m = len(p_values)
    if m == 0:
        return p_values.copy()
    c_m = float(np.sum(1.0 / np.arange(1, m + 1)))
    order = np.argsort(p_values, kind="stable")
    adjusted = np.empty(m)
    running = np.inf
    for rank in range(m, 0, -1):
        idx = order[rank - 1]
        running = min(running, m * c_m * p_values[idx] / rank)
        adjusted[idx] = min(1.0, running)
    return adjusted


def pairwise_compare(report: CvReport) -> dict:
    """Per-pair mean paired-t over subject RMSE, p-values, and FDR adjustment.

    Within each run the same held-out subjects feed both models of a pair.
    Runs where either model failed are excluded for that pair.  A run with
    zero-variance differences contributes t = 0 and is flagged.
    """
    k = len(report.labels)
    if k < 2:
        raise FitError("pairwise comparison needs at least 2 models")
    t_mat = np.zeros((k, k))
    p_mat = np.ones((k, k))
    df_mat = np.zeros((k, k), dtype=np.int64)
    zero_var_runs = 0
    for i in range(k):
        for j in range(i + 1, k):
            ts = []
            min_subjects = None
            for rec in report.records:
                mi, mj = rec["models"][i], rec["models"][j]
                if not (mi["ok"] and mj["ok"]):
                    continue
                subjects = rec["test_students"]
                d = np.array([mi["subject_rmse"][s] - mj["subject_rmse"][s]
                              for s in subjects])
                if len(d) < 2:
                    continue
                sd = float(np.std(d, ddof=1))
                if sd == 0.0:
                    ts.append(0.0)
                    zero_var_runs += 1
                else:
                    ts.append(float(np.mean(d) / (sd / math.sqrt(len(d)))))
                n_subj = len(d)
                min_subjects = n_subj if min_subjects is None \
                    else min(min_subjects, n_subj)
            if not ts:
                t_mat[i, j] = t_mat[j, i] = float("nan")
                p_mat[i, j] = p_mat[j, i] = float("nan")
                continue
            mean_t = float(np.mean(ts))
            df = max(1, min_subjects - 1)
            p = float(2.0 * stats.t.sf(abs(mean_t), df))
            t_mat[i, j] = mean_t
            t_mat[j, i] = -mean_t
            p_mat[i, j] = p_mat[j, i] = p
            df_mat[i, j] = df_mat[j, i] = df

    iu = np.triu_indices(k, 1)
    raw = p_mat[iu]
    finite = ~np.isnan(raw)
    adj = np.full_like(raw, np.nan)
    adj[finite] = _benjamini_yekutieli(raw[finite])
    adj_mat = np.ones((k, k))
    adj_mat[iu] = adj
    adj_mat[(iu[1], iu[0])] = adj

    result = {
        "t": t_mat.tolist(),
        "p": p_mat.tolist(),
        "p_adjusted": adj_mat.tolist(),
        "df": df_mat.tolist(),
        "zero_variance_runs": zero_var_runs,
    }
    report.pairwise = result
    return result


def render_markdown(report: CvReport, title: str = "Model comparison",
                    header_lines: Optional[list] = None) -> str:
    """Metric table plus the pairwise significance grid as markdown."""
    lines = [f"# {title}", ""]
    for extra in header_lines or []:
        lines.append(extra)
    lines.append(f"Runs: {report.runs}; seed: {report.seed}"
                 + (f"; per-run student subsample: {report.subsample}"
                    if report.subsample else ""))
    lines += ["", "## Held-out metrics (means over runs)", "",
              "| # | model | R2_test | RMSE_test | AUC_test | runs |",
              "|---|-------|---------|-----------|----------|------|"]

    def fmt(v):
        return "n/a" if v is None else f"{v:.3f}"

    for idx, row in enumerate(report.summary, start=1):
        note = "" if row["runs_excluded"] == 0 else f" ({row['runs_excluded']} excl.)"
        lines.append(f"| {idx} | {row['label']} | {fmt(row['mcfadden'])} | "
                     f"{fmt(row['mean_subject_rmse'])} | {fmt(row['auc'])} | "
                     f"{row['runs_ok']}{note} |")

    if report.pairwise is not None:
        k = len(report.labels)
        t = report.pairwise["t"]
        p = report.pairwise["p"]
        p_adj = report.pairwise["p_adjusted"]
        lines += ["", "## Pairwise comparison (paired t over held-out subject RMSE)",
                  "",
                  "Cell (row, col): mean t of row minus col; negative favors the row.",
                  "`*` raw p < .05 (two-sided); `**` significant after "
                  "false-discovery-rate adjustment.", ""]
        head = "| model | " + " | ".join(str(i + 1) for i in range(k)) + " |"
        lines.append(head)
        lines.append("|" + "---|" * (k + 1))
        for i in range(k):
            cells = []
            for j in range(k):
                if i == j:
                    cells.append("--")
                    continue
                tij, pij, aij = t[i][j], p[i][j], p_adj[i][j]
                if tij is None or (isinstance(tij, float) and math.isnan(tij)):
                    cells.append("n/a")
                    continue
                stars = "**" if aij < 0.05 else ("*" if pij < 0.05 else "")
                cells.append(f"{tij:+.2f}{stars}")
            lines.append(f"| {i + 1} | " + " | ".join(cells) + " |")
    lines.append("")
    return "\n".join(lines)
