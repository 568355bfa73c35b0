"""Report tables and their CSV / JSON serialisation.

A report is a list of rows plus a metadata block holding the exact run
configuration, so any emitted file can be fed back with ``--config`` and
reproduce the same numbers. CSV files carry the metadata as a single
``# {json}`` comment line above the header.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone

from . import __version__
from .errors import ConfigError
from .markov import (
    adjustable_approx,
    chain_steady_state,
    efron_steady_state,
    smith_asymptotics,
)
from .rules import MARKOV_FAMILIES, parse_rule
from .simulate import StudyResult, admissibility_trajectory

__all__ = [
    "KINDS",
    "ReportTable",
    "format_value",
    "read_report",
    "simulate_report",
    "exact_rows",
    "exact_report",
    "compare_report",
    "admissibility_report",
]

KINDS = ("per_n", "steady_state", "table2_repro", "table3_repro", "table4_repro", "admissibility")
SIG_DIGITS = 6


def format_value(value) -> str:
    """Fixed CSV text: integers verbatim, floats to 6 significant digits, NaN empty."""
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(value).lower()
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        return f"{value:.{SIG_DIGITS}g}"
    return str(value)


def _json_value(value):
    if isinstance(value, float):
        if math.isnan(value):
            return None
        return float(format_value(value))
    return value


@dataclass
class ReportTable:
    kind: str
    columns: tuple
    rows: list
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown report kind {self.kind!r}")
        for row in self.rows:
            if len(row) != len(self.columns):
                raise ConfigError("row length does not match the columns")

    def _meta(self) -> dict:
        meta = {"kind": self.kind, "version": __version__}
        meta.update(self.metadata)
        meta.setdefault("timestamp", datetime.now(timezone.utc).isoformat(timespec="seconds"))
        return meta

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("# " + json.dumps(self._meta(), sort_keys=True) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([format_value(v) for v in row])
        return buf.getvalue()

    def to_json(self) -> str:
        records = [{c: _json_value(v) for c, v in zip(self.columns, row)} for row in self.rows]
        envelope = {"metadata": self._meta(), "columns": list(self.columns), "rows": records}
        return json.dumps(envelope, indent=2, sort_keys=False) + "\n"

    def render(self, fmt: str = "csv") -> str:
        if fmt == "csv":
            return self.to_csv()
        if fmt == "json":
            return self.to_json()
        raise ConfigError(f"unknown format {fmt!r} (csv or json)")

    def column(self, name: str) -> list:
        i = self.columns.index(name)
        return [row[i] for row in self.rows]


def read_report(text: str) -> tuple[dict, list[dict]]:
    """Parse an emitted CSV or JSON report into ``(metadata, records)``.

    Numeric CSV cells come back as floats, empty cells as NaN.
    """
    stripped = text.lstrip()
    if stripped.startswith("{"):
        data = json.loads(stripped)
        if "metadata" not in data:
            return data, []
        return data["metadata"], data.get("rows", [])
    lines = text.splitlines()
    if not lines or not lines[0].startswith("# "):
        raise ConfigError("CSV report lacks its metadata line")
    meta = json.loads(lines[0][2:])
    records = []
    for rec in csv.DictReader(lines[1:]):
        records.append({k: _parse_cell(v) for k, v in rec.items()})
    return meta, records


def _parse_cell(text: str):
    if text == "":
        return math.nan
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def simulate_report(result: StudyResult, metadata: dict | None = None) -> ReportTable:
    cols = ("n", "loss_mean", "loss_se", "bias_mean", "bias_se", "loss_adj", "bias_adj")
    rows = [
        [int(k), float(lm), float(ls), float(bm), float(bs), float(la), float(ba)]
        for k, lm, ls, bm, bs, la, ba in zip(
            result.n,
            result.loss_mean,
            result.loss_se,
            result.bias_mean,
            result.bias_se,
            result.loss_adj,
            result.bias_adj,
        )
    ]
    meta = {"command": "simulate", "config": result.config.to_dict(), "seed": result.config.seed}
    meta.update(metadata or {})
    meta.setdefault("run", {k: v for k, v in result.metadata.items() if k != "config"})
    return ReportTable("per_n", cols, rows, meta)


EXACT_COLUMNS = ("rule", "n", "parity", "loss_exact", "bias_exact", "p0_even", "method")


def exact_rows(rule, ns, method: str = "auto") -> list[list]:
    """Steady-state (or asymptotic) loss and bias of one rule at each ``n``.

    ``method`` is ``auto``, ``chain``, ``closed`` (Efron only), ``approx``
    (adjustable coin truncated at +-3) or ``asymptotic`` (Smith / Wei).
    """
    rule = parse_rule(rule)
    f = rule.family
    if method == "auto":
        if f == "efron":
            method = "closed"
        elif f in ("smith", "wei"):
            method = "asymptotic"
        elif f == "random":
            method = "random"
        elif f in MARKOV_FAMILIES:
            method = "chain"
        else:
            raise ConfigError(f"no exact analysis for rule {rule}")
    ns = [int(k) for k in ns]
    if any(k < 1 for k in ns):
        raise ConfigError("n must be >= 1")

    def parity(k):
        return "even" if k % 2 == 0 else "odd"

    rows = []
    if method == "random":
        if f != "random":
            raise ConfigError(f"method 'random' does not apply to {rule}")
        return [[str(rule), k, "any", 1.0, 0.0, math.nan, method] for k in ns]
    if method == "closed":
        if f != "efron":
            raise ConfigError(f"no closed form for rule {rule}")
        st = efron_steady_state(rule.get("p"))
        return [[str(rule), k, parity(k), st.loss(k), st.bias(k), st.p0_even, method] for k in ns]
    if method == "approx":
        if f != "adjustable":
            raise ConfigError("the truncated approximation applies to the adjustable coin only")
        ap = adjustable_approx(rule.get("a"))
        return [[str(rule), k, parity(k), ap.loss(k), ap.bias(k), ap.dist_even[0], method] for k in ns]
    if method == "asymptotic":
        if f not in ("smith", "wei"):
            raise ConfigError(f"no asymptotic results for rule {rule}")
        rho = rule.get("rho") if f == "smith" else 1.0
        for k in ns:
            a = smith_asymptotics(rho, k)
            rows.append([str(rule), k, "any", a.loss_inf, a.bias_n, math.nan, method])
        return rows
    if method == "chain":
        if f not in MARKOV_FAMILIES or f in ("smith", "wei", "bayes", "random"):
            raise ConfigError(f"no exact analysis for rule {rule}")
        st = chain_steady_state(rule)
        return [[str(rule), k, parity(k), st.loss(k), st.bias(k), st.p0_even, method] for k in ns]
    raise ConfigError(f"unknown method {method!r}")


def exact_report(rules, ns=(199, 200), method: str = "auto", metadata: dict | None = None) -> ReportTable:
    rows = []
    for rule in rules:
        rows.extend(exact_rows(rule, ns, method))
    kind = "table2_repro" if method == "approx" else "steady_state"
    meta = {"command": "exact", "config": {"rules": [str(parse_rule(r)) for r in rules], "n": list(ns), "method": method}}
    meta.update(metadata or {})
    return ReportTable(kind, EXACT_COLUMNS, rows, meta)


def _check_same_covariates(results):
    kinds = {r.config.m > 0 for r in results}
    if len(kinds) > 1:
        raise ConfigError("cannot mix rules with and without covariates in one comparison")


def compare_report(results, extra_n=(), metadata: dict | None = None) -> ReportTable:
    """One row per rule, sorted by descending adjacent bias at the largest ``n``.

    Ties are broken by the rule string so the order is total.
    """
    results = list(results)
    if len(results) < 2:
        raise ConfigError("compare needs at least two rules")
    _check_same_covariates(results)
    n_max = results[0].config.n_max
    if any(r.config.n_max != n_max for r in results):
        raise ConfigError("all rules in a comparison must share n_max")
    extra = sorted({int(k) for k in extra_n} - {n_max - 1, n_max})
    for k in extra:
        if not 1 <= k <= n_max:
            raise ConfigError(f"n={k} outside 1..{n_max}")
    top, prev = n_max, n_max - 1
    cols = ["rule", "label"]
    for k in extra:
        cols += [f"loss_{k}", f"bias_{k}"]
    cols += [f"loss_{prev}", f"loss_{top}", f"bias_{prev}", f"bias_{top}", f"loss_adj_{top}", f"bias_adj_{top}"]
    rows = []
    for r in results:
        row = [str(r.config.rule), r.config.rule.label]
        for k in extra:
            row += [r.at(k)["loss_mean"], r.at(k)["bias_mean"]]
        a, b = r.at(prev), r.at(top)
        row += [a["loss_mean"], b["loss_mean"], a["bias_mean"], b["bias_mean"], b["loss_adj"], b["bias_adj"]]
        rows.append(row)
    rows.sort(key=lambda row: (-row[-1], row[0]))
    kind = "table4_repro" if results[0].config.m > 0 else "table3_repro"
    meta = {"command": "compare", "config": _shared_config(results, extra_n=list(extra))}
    meta.update(metadata or {})
    return ReportTable(kind, tuple(cols), rows, meta)


def admissibility_report(results, marks, with_se: bool = True, metadata: dict | None = None) -> ReportTable:
    results = list(results)
    if not results:
        raise ConfigError("no rules given")
    _check_same_covariates(results)
    cols = ["rule", "n_mark", "bias_adj", "loss_adj"]
    if with_se:
        cols += ["bias_adj_se", "loss_adj_se"]
    rows = []
    for r in results:
        for p in admissibility_trajectory(r, marks):
            row = [str(r.config.rule), p.n, p.bias_adj, p.loss_adj]
            if with_se:
                row += [p.bias_adj_se, p.loss_adj_se]
            rows.append(row)
    meta = {"command": "admissibility", "config": _shared_config(results, marks=[int(k) for k in marks])}
    meta.update(metadata or {})
    return ReportTable("admissibility", tuple(cols), rows, meta)


def _shared_config(results, **extra) -> dict:
    first = results[0].config.to_dict()
    cfg = {"rules": [str(r.config.rule) for r in results]}
    cfg.update({k: v for k, v in first.items() if k != "rule"})
    cfg.update(extra)
    return cfg

