"""Reading tab-delimited practice logs and the standard filtering pipeline.

The input format is a UTF-8 TSV with a header row (LF or CRLF endings, lines
starting with '#' skipped).  A ColumnMap names the source columns; only the
student and outcome columns are mandatory.  Loading produces a Dataset of
TrialEvent records grouped by student and time-ordered within student, with
a provenance record that accumulates warnings and, later, the filter log.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ConfigError, DataError, EmptyDatasetError, RowError


@dataclass(frozen=True)
class ColumnMap:
    """Names of source columns plus outcome/KC parsing conventions.

    Optional columns that are absent from the file are silently treated as
    unavailable (a provenance warning is recorded for the time column, which
    triggers synthetic timestamps).
    """

    student: str = "Anon Student Id"
    outcome: str = "Outcome"
    kc: Optional[str] = "KC (Default)"
    item: Optional[str] = "Problem Name"
    time: Optional[str] = "Time"
    duration: Optional[str] = "Duration (sec)"
    attempt: Optional[str] = "Attempt At Step"
    session: Optional[str] = "Session Id"
    step: Optional[str] = "Step Name"
    problem: Optional[str] = "Problem Name"
    success_tokens: frozenset = frozenset({"CORRECT"})
    kc_delimiter: str = "~~"

    @staticmethod
    def from_dict(d: dict) -> "ColumnMap":
        kwargs = dict(d)
        if "success_tokens" in kwargs:
            kwargs["success_tokens"] = frozenset(kwargs["success_tokens"])
        unknown = set(kwargs) - {f for f in ColumnMap.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown column-map keys: {sorted(unknown)}")
        return ColumnMap(**kwargs)


@dataclass
class TrialEvent:
    """One observed practice attempt."""

    student_id: str
    item_id: Optional[str]
    kc_levels: tuple
    timestamp: float
    outcome: int
    duration: Optional[float] = None
    first_attempt: bool = True
    session_id: Optional[str] = None
    extra_columns: dict = field(default_factory=dict)


class Dataset:
    """Events grouped by student (first-appearance order), time-sorted within.

    Immutable by convention after construction; helper views are cached.
    """

    def __init__(self, events: Sequence[TrialEvent], provenance: Optional[dict] = None):
        self.events = list(events)
        self.provenance = provenance if provenance is not None else {}
        self._spans = {}
        order = []
        start = 0
        for i, ev in enumerate(self.events):
            sid = ev.student_id
            if not order or sid != order[-1]:
                if order:
                    self._spans[order[-1]] = (start, i)
                if sid in self._spans:
                    raise DataError(f"events of student {sid!r} are not contiguous")
                order.append(sid)
                start = i
        if order:
            self._spans[order[-1]] = (start, len(self.events))
        self.student_ids = order

    def __len__(self) -> int:
        return len(self.events)

    def iter_students(self) -> Iterator[tuple]:
        for sid in self.student_ids:
            lo, hi = self._spans[sid]
            yield sid, self.events[lo:hi]

    def student_events(self, sid: str) -> list:
        lo, hi = self._spans[sid]
        return self.events[lo:hi]

    def subset(self, student_ids: Iterable[str]) -> "Dataset":
        keep = [sid for sid in self.student_ids if sid in set(student_ids)]
        events = []
        for sid in keep:
            events.extend(self.student_events(sid))
        return Dataset(events, dict(self.provenance))

    @property
    def columns(self) -> list:
        """Component columns usable in model specifications."""
        cols = ["Student"]
        if any(ev.kc_levels for ev in self.events):
            cols.append("KC")
        if any(ev.item_id is not None for ev in self.events):
            cols.append("Item")
        if any(ev.duration is not None for ev in self.events):
            cols.append("Duration")
        extra = set()
        for ev in self.events:
            extra.update(ev.extra_columns)
        cols.extend(sorted(extra))
        return cols

    def outcomes(self) -> np.ndarray:
        return np.array([ev.outcome for ev in self.events], dtype=np.float64)

    def subjects(self) -> list:
        return [ev.student_id for ev in self.events]


def _parse_timestamp(text: str, line_no: int) -> float:
    try:
        return float(text)
    except ValueError:
        pass
    for parser in (datetime.fromisoformat,):
        try:
            dt = parser(text)
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            return dt.timestamp()
        except ValueError:
            continue
    raise RowError(line_no, f"unparseable timestamp {text!r}")


def load_datashop(path, column_map: Optional[ColumnMap] = None) -> Dataset:
    """Read a tab-delimited event log into a canonical Dataset.

    Rows missing the student or outcome cell are rejected with a
    line-numbered error.  A missing time column triggers synthetic per-student
    timestamps spaced 1 s apart, recorded as a provenance warning.
    """
    cmap = column_map or ColumnMap()
    warnings: list = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        lines = fh.read().splitlines()

    rows = [(i + 1, line) for i, line in enumerate(lines) if line and not line.startswith("#")]
    if not rows:
        raise DataError(f"{path}: empty file")
    header_line_no, header_line = rows[0]
    header = header_line.split("\t")
    col_idx = {name: i for i, name in enumerate(header)}

    for mandatory in (cmap.student, cmap.outcome):
        if mandatory not in col_idx:
            raise ConfigError(f"mandatory column {mandatory!r} not found in header")

    def idx_of(name: Optional[str]) -> Optional[int]:
        if name is None or name not in col_idx:
            return None
        return col_idx[name]

    i_student = col_idx[cmap.student]
    i_outcome = col_idx[cmap.outcome]
    i_kc = idx_of(cmap.kc)
    i_item = idx_of(cmap.item)
    i_time = idx_of(cmap.time)
    i_dur = idx_of(cmap.duration)
    i_att = idx_of(cmap.attempt)
    i_sess = idx_of(cmap.session)
    if cmap.time is not None and i_time is None:
        warnings.append(
            f"time column {cmap.time!r} absent; using synthetic timestamps spaced 1 s apart"
        )
    consumed = {i for i in (i_student, i_outcome, i_kc, i_item, i_time, i_dur, i_att, i_sess)
                if i is not None}

    events = []
    order_in_file = []
    for line_no, line in rows[1:]:
        cells = line.split("\t")
        if len(cells) < len(header):
            cells = cells + [""] * (len(header) - len(cells))

        student = cells[i_student].strip()
        outcome_text = cells[i_outcome].strip()
        if not student:
            raise RowError(line_no, f"missing value in student column {cmap.student!r}")
        if not outcome_text:
            raise RowError(line_no, f"missing value in outcome column {cmap.outcome!r}")
        outcome = 1 if outcome_text in cmap.success_tokens else 0

        kcs: tuple = ()
        if i_kc is not None:
            cell = cells[i_kc].strip()
            if cell:
                seen = []
                for part in cell.split(cmap.kc_delimiter):
                    part = part.strip()
                    if part and part not in seen:
                        seen.append(part)
                kcs = tuple(seen)

        item = cells[i_item].strip() or None if i_item is not None else None
        session = cells[i_sess].strip() or None if i_sess is not None else None

        ts: Optional[float] = None
        if i_time is not None:
            cell = cells[i_time].strip()
            if cell:
                ts = _parse_timestamp(cell, line_no)
            else:
                raise RowError(line_no, f"missing value in time column {cmap.time!r}")

        dur: Optional[float] = None
        if i_dur is not None:
            cell = cells[i_dur].strip()
            if cell:
                try:
                    dur = float(cell)
                except ValueError:
                    raise RowError(line_no, f"unparseable duration {cell!r}") from None
                if not math.isfinite(dur) or dur < 0:
                    raise RowError(line_no, f"duration must be finite and >= 0, got {cell!r}")

        first_attempt = True
        if i_att is not None:
            cell = cells[i_att].strip()
            if cell:
                try:
                    first_attempt = float(cell) == 1
                except ValueError:
                    first_attempt = False

        extra = {name: cells[j].strip() for name, j in col_idx.items() if j not in consumed}
        for aux in (cmap.step, cmap.problem):
            if aux is not None and aux in col_idx and aux not in extra:
                extra[aux] = cells[col_idx[aux]].strip()
        events.append(TrialEvent(student, item, kcs, ts if ts is not None else 0.0,
                                 outcome, dur, first_attempt, session, extra))
        order_in_file.append(line_no)

    if not events:
        raise DataError(f"{path}: no data rows")

    # Group by student (first appearance) and stable-sort within student by
    # timestamp so file order breaks ties.
    by_student: dict = {}
    for ev, ln in zip(events, order_in_file):
        by_student.setdefault(ev.student_id, []).append((ev, ln))
    ordered = []
    for sid, pairs in by_student.items():
        if i_time is None:
            for k, (ev, _) in enumerate(pairs):
                ev.timestamp = float(k)
            ordered.extend(ev for ev, _ in pairs)
        else:
            pairs.sort(key=lambda p: p[0].timestamp)  # stable: ties keep file order
            ordered.extend(ev for ev, _ in pairs)

    present = [f for f in ("student", "outcome", "kc", "item", "time", "duration",
                           "attempt", "session", "step", "problem")
               if getattr(cmap, f) is not None and getattr(cmap, f) in col_idx]
    provenance = {
        "source": str(path),
        "column_map": _column_map_dict(cmap),
        "present_columns": present,
        "warnings": warnings,
        "filters": [],
    }
    return Dataset(ordered, provenance)


def _column_map_dict(cmap: ColumnMap) -> dict:
    d = {f: getattr(cmap, f) for f in ColumnMap.__dataclass_fields__}
    d["success_tokens"] = sorted(d["success_tokens"])
    return d


@dataclass(frozen=True)
class FilterConfig:
    """Thresholds for the event-filtering pipeline."""

    first_attempt_only: bool = True
    min_student_obs: int = 25
    min_kc_obs: int = 600
    drop_single_exposure: bool = True
    winsorize_pct: float = 0.95
    impute_median: bool = True

    @staticmethod
    def from_dict(d: dict) -> "FilterConfig":
        unknown = set(d) - {f for f in FilterConfig.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown filter keys: {sorted(unknown)}")
        return FilterConfig(**d)


def nearest_rank_percentile(values: Sequence[float], q: float) -> float:
    """Nearest-rank percentile: the ceil(q*n)-th smallest value."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("no values")
    rank = max(1, math.ceil(q * len(ordered)))
    return ordered[rank - 1]


def filter_pipeline(ds: Dataset, cfg: Optional[FilterConfig] = None) -> Dataset:
    """Apply the standard filtering stages in order, logging removals.

    Stages: (1) first attempts at first steps, (2) minimum events per
    student, (3) minimum events per KC, (4) single-exposure (student, KC)
    pairs, (5) duration winsorization, (6) median imputation of missing
    durations.  Raises EmptyDatasetError naming the stage that emptied the
    data.
    """
    cfg = cfg or FilterConfig()
    if len(ds) == 0:
        raise EmptyDatasetError("input dataset is empty")
    events = [replace_event(ev) for ev in ds.events]
    log: list = []

    def record(stage: int, name: str, removed: int, detail: str = "") -> None:
        log.append({"stage": stage, "name": name, "removed": removed, "detail": detail})

    def check_nonempty(stage_name: str) -> None:
        if not events:
            raise EmptyDatasetError(f"all events removed at stage {stage_name!r}")

    # Stage 1: first attempts at first steps.
    cmap_d = ds.provenance.get("column_map", {})
    present = ds.provenance.get("present_columns")
    attempt_mapped = cmap_d.get("attempt") is not None and (
        present is None or "attempt" in present
    )
    step_col = cmap_d.get("step") if (present is None or "step" in present) else None
    problem_col = cmap_d.get("problem") if (present is None or "problem" in present) else None
    if cfg.first_attempt_only and attempt_mapped:
        first_step: dict = {}
        if step_col and problem_col:
            for ev in events:
                step = ev.extra_columns.get(step_col)
                problem = ev.extra_columns.get(problem_col)
                if step is None or problem is None:
                    continue
                key = (ev.student_id, problem)
                if key not in first_step:
                    first_step[key] = step

        def keep_first(ev: TrialEvent) -> bool:
            if not ev.first_attempt:
                return False
            if step_col and problem_col:
                step = ev.extra_columns.get(step_col)
                problem = ev.extra_columns.get(problem_col)
                if step is not None and problem is not None:
                    return first_step[(ev.student_id, problem)] == step
            return True

        before = len(events)
        events = [ev for ev in events if keep_first(ev)]
        record(1, "first_attempts_first_steps", before - len(events))
        check_nonempty("first_attempts_first_steps")
    else:
        record(1, "first_attempts_first_steps", 0, "skipped: attempt column not mapped")

    # Stage 2: students with enough observations.
    counts: dict = {}
    for ev in events:
        counts[ev.student_id] = counts.get(ev.student_id, 0) + 1
    before = len(events)
    events = [ev for ev in events if counts[ev.student_id] >= cfg.min_student_obs]
    record(2, "min_student_obs", before - len(events),
           f"threshold {cfg.min_student_obs} (inclusive)")
    check_nonempty("min_student_obs")

    # Stage 3: KCs with enough observations.  Under-threshold KC levels are
    # removed from events; an event is dropped when it loses all its levels.
    kc_counts: dict = {}
    for ev in events:
        for kc in ev.kc_levels:
            kc_counts[kc] = kc_counts.get(kc, 0) + 1
    if kc_counts:
        keep_kc = {kc for kc, c in kc_counts.items() if c >= cfg.min_kc_obs}
        before = len(events)
        events = _strip_levels(events, lambda ev, kc: kc in keep_kc)
        record(3, "min_kc_obs", before - len(events),
               f"threshold {cfg.min_kc_obs} (inclusive); kept {len(keep_kc)} of {len(kc_counts)} KCs")
        check_nonempty("min_kc_obs")
    else:
        record(3, "min_kc_obs", 0, "no KC labels")

    # Stage 4: single-exposure (student, KC) pairs.
    if cfg.drop_single_exposure:
        pair_counts: dict = {}
        for ev in events:
            for kc in ev.kc_levels:
                key = (ev.student_id, kc)
                pair_counts[key] = pair_counts.get(key, 0) + 1
        before = len(events)
        events = _strip_levels(
            events, lambda ev, kc: pair_counts[(ev.student_id, kc)] > 1
        )
        record(4, "single_exposure", before - len(events))
        check_nonempty("single_exposure")
    else:
        record(4, "single_exposure", 0, "disabled")

    # Stage 5: winsorize extreme durations.
    observed = [ev.duration for ev in events if ev.duration is not None]
    if observed:
        cap = nearest_rank_percentile(observed, cfg.winsorize_pct)
        changed = 0
        for ev in events:
            if ev.duration is not None and ev.duration > cap:
                ev.duration = cap
                changed += 1
        record(5, "winsorize_duration", 0, f"cap {cap}; winsorized {changed}")
    else:
        record(5, "winsorize_duration", 0, "no durations present")

    # Stage 6: impute missing durations with the overall median.
    observed = [ev.duration for ev in events if ev.duration is not None]
    if cfg.impute_median and observed:
        med = float(np.median(observed))
        imputed = 0
        for ev in events:
            if ev.duration is None:
                ev.duration = med
                imputed += 1
        record(6, "impute_duration", 0, f"median {med}; imputed {imputed}")
    else:
        record(6, "impute_duration", 0, "no durations to impute from"
               if not observed else "disabled")

    provenance = dict(ds.provenance)
    provenance["filters"] = list(provenance.get("filters", [])) + log
    return Dataset(events, provenance)


def replace_event(ev: TrialEvent) -> TrialEvent:
    return TrialEvent(ev.student_id, ev.item_id, ev.kc_levels, ev.timestamp,
                      ev.outcome, ev.duration, ev.first_attempt, ev.session_id,
                      dict(ev.extra_columns))


def _strip_levels(events: list, keep) -> list:
    out = []
    for ev in events:
        if not ev.kc_levels:
            out.append(ev)
            continue
        kept = tuple(kc for kc in ev.kc_levels if keep(ev, kc))
        if kept:
            ev.kc_levels = kept
            out.append(ev)
    return out


def save_dataset(ds: Dataset, path, header_comment: Optional[str] = None) -> None:
    """Write a Dataset back to the canonical TSV shape."""
    has_kc = any(ev.kc_levels for ev in ds.events)
    has_item = any(ev.item_id is not None for ev in ds.events)
    has_dur = any(ev.duration is not None for ev in ds.events)
    has_sess = any(ev.session_id is not None for ev in ds.events)
    extra_names = sorted({name for ev in ds.events for name in ev.extra_columns})

    header = ["Anon Student Id", "Outcome", "Time"]
    if has_kc:
        header.append("KC (Default)")
    if has_item:
        header.append("Problem Name")
    if has_dur:
        header.append("Duration (sec)")
    if has_sess:
        header.append("Session Id")
    header.extend(extra_names)

    def fmt_time(t: float) -> str:
        return repr(t) if t != int(t) else str(int(t))

    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("\t".join(header) + "\n")
        for ev in ds.events:
            row = [ev.student_id, "CORRECT" if ev.outcome == 1 else "INCORRECT",
                   fmt_time(ev.timestamp)]
            if has_kc:
                row.append("~~".join(ev.kc_levels))
            if has_item:
                row.append(ev.item_id or "")
            if has_dur:
                row.append("" if ev.duration is None else repr(float(ev.duration)))
            if has_sess:
                row.append(ev.session_id or "")
            row.extend(str(ev.extra_columns.get(name, "")) for name in extra_names)
            fh.write("\t".join(row) + "\n")


def save_provenance(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ds.provenance, fh, indent=2, sort_keys=True)
        fh.write("\n")
