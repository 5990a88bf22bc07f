"""Experiment reports: the attack x defense result grid plus provenance.

A report row is a defense, a column is an attack (plus the clean "natural"
column and, for classification, the worst-case "ensemble" column). Per-
sample correctness flags are stored so the ensemble column can always be
recomputed from raw outcomes rather than aggregate numbers. Stereo reports
carry {mae, rmse, d1} cells and "error reduced" percentages against the
undefended row instead of ensemble/flags.

The report hash covers everything except timings, so reruns compare equal
regardless of wall-clock jitter.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field

from .attacks import worst_case_ensemble
from .serialize import atomic_write_text

__all__ = ["ExperimentReport", "report_hash", "emit_report", "load_report", "error_reduced_percent"]

METRIC_KEYS = ("mae", "rmse", "d1")


@dataclass
class ExperimentReport:
    task: str
    attack_names: list
    defense_names: list
    natural: dict  # defense -> accuracy (classification) or metric dict (stereo)
    cells: dict  # defense -> attack -> accuracy or metric dict
    ensemble: dict = field(default_factory=dict)  # defense -> worst-case accuracy
    flags: dict = field(default_factory=dict)  # "defense|attack" -> list of 0/1
    error_reduced: dict = field(default_factory=dict)  # defense -> attack -> metric -> %
    meta: dict = field(default_factory=dict)

    def recompute_ensemble(self):
        """Worst-case accuracy per defense from the stored per-sample flags."""
        out = {}
        for dname in self.defense_names:
            rows = [self.flags[f"{dname}|{aname}"] for aname in self.attack_names]
            if not rows:
                continue
            matrix = list(zip(*rows))  # samples x attacks
            out[dname] = worst_case_ensemble(matrix)
        return out

    def to_json_dict(self):
        return {
            "task": self.task,
            "attack_names": list(self.attack_names),
            "defense_names": list(self.defense_names),
            "natural": self.natural,
            "cells": self.cells,
            "ensemble": self.ensemble,
            "flags": self.flags,
            "error_reduced": self.error_reduced,
            "meta": self.meta,
        }

    @classmethod
    def from_json_dict(cls, d):
        return cls(
            task=d["task"],
            attack_names=list(d["attack_names"]),
            defense_names=list(d["defense_names"]),
            natural=d["natural"],
            cells=d["cells"],
            ensemble=d.get("ensemble", {}),
            flags=d.get("flags", {}),
            error_reduced=d.get("error_reduced", {}),
            meta=d.get("meta", {}),
        )


def error_reduced_percent(undefended, defended):
    """Tab-style error reduction: 100 * (undefended - defended) / undefended
    per metric; 0 where the undefended error is already 0."""
    out = {}
    for k in METRIC_KEYS:
        u, v = float(undefended[k]), float(defended[k])
        out[k] = 0.0 if u == 0.0 else 100.0 * (u - v) / u
    return out


def _canonical_json(report, with_timings=True):
    d = report.to_json_dict()
    if not with_timings:
        meta = dict(d["meta"])
        meta.pop("timings", None)
        d["meta"] = meta
    return json.dumps(d, sort_keys=True, separators=(",", ":"))


def report_hash(report):
    """Content hash excluding timing metadata."""
    return hashlib.sha256(_canonical_json(report, with_timings=False).encode("utf-8")).hexdigest()


def _classification_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["defense", "natural", *report.attack_names, "ensemble"])
    for dname in report.defense_names:
        row = [dname, f"{report.natural[dname]:.6f}"]
        row += [f"{report.cells[dname][a]:.6f}" for a in report.attack_names]
        row.append(f"{report.ensemble[dname]:.6f}" if dname in report.ensemble else "")
        w.writerow(row)
    return buf.getvalue()


def _stereo_csv(report):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["defense", "metric", "natural", *report.attack_names])
    for dname in report.defense_names:
        for m in METRIC_KEYS:
            row = [dname, m, f"{report.natural[dname][m]:.6f}"]
            row += [f"{report.cells[dname][a][m]:.6f}" for a in report.attack_names]
            w.writerow(row)
        if dname in report.error_reduced:
            for m in METRIC_KEYS:
                row = [f"{dname}:error-reduced", m, ""]
                row += [f"{report.error_reduced[dname][a][m]:.4f}" for a in report.attack_names]
                w.writerow(row)
    return buf.getvalue()


def emit_report(report, fmt, path):
    """Write the report as plot-ready CSV or lossless JSON (atomic)."""
    if fmt == "json":
        atomic_write_text(path, json.dumps(report.to_json_dict(), sort_keys=True, indent=1) + "\n")
    elif fmt == "csv":
        text = _classification_csv(report) if report.task == "classification" else _stereo_csv(report)
        atomic_write_text(path, text)
    else:
        raise ValueError(f"unknown report format {fmt!r} (expected csv or json)")
    return path


def load_report(path):
    with open(path, "r", encoding="utf-8") as f:
        return ExperimentReport.from_json_dict(json.load(f))
