"""Grounded text summaries of an evaluation.

An :class:`EvidenceBundle` collects every number a summary may cite, already
rounded to two decimals. Template sentences are built only from bundle
values; free text from an optional language-model endpoint goes through the
same grounding filter, which drops any sentence citing a numeral or marker
name the bundle does not contain.
"""
from __future__ import annotations

import json
import logging
import math
import os
import re
import urllib.error
import urllib.request
from dataclasses import asdict, dataclass, field
from importlib import resources
from typing import Callable

import numpy as np

from .metrics import EvalReport

log = logging.getLogger(__name__)

SCHEMA_VERSION = "1"
PREAMBLE_ASSET = "preamble_v1.txt"
SCHEMA_ASSET = "evidence_schema_v1.json"
TOKEN_ENV = "DPCPHENO_LLM_TOKEN"

THRESHOLDS = {
    "strong_d": 0.8,
    "moderate_d": 0.5,
    "lineage_r": 0.7,
    "weak_r": 0.4,
    "rare_fraction": 0.1,
    "low_confidence": 0.6,
    "ccc_gap": 0.1,
    "concentration_percent": 50.0,
}

_NUMERAL = re.compile(r"\d+(?:\.\d+)?")
_LABEL_DIGITS = re.compile(r"\bF1\b")
_MARKER = re.compile(r"\b(?:CD\d+[A-Za-z]?|HLA-[A-Z0-9]+)\b")
_SENTENCE = re.compile(r"(?<=[.!?])\s+")


def load_asset(name: str) -> str:
    return resources.files("dpcpheno").joinpath("assets", name).read_text(encoding="utf-8")


def _r2(v) -> float:
    return round(float(v), 2)


@dataclass
class EvidenceBundle:
    n_cells: int
    class_names: list[str]
    marker_names: list[str]
    fractions: dict[str, float]
    percents: dict[str, float]
    effect_sizes: dict[str, dict[str, float | None]]
    marker_metrics: dict[str, dict[str, float]]
    misclassifications: dict
    confidence: dict | None
    classification: dict | None
    thresholds: dict[str, float] = field(default_factory=lambda: dict(THRESHOLDS))
    provenance: dict[str, str] = field(default_factory=dict)
    schema_version: str = SCHEMA_VERSION

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceBundle":
        return cls(**d)

    def numerals(self) -> set[float]:
        """Absolute values, rounded to 2 decimals, of every number in the bundle."""
        out: set[float] = set()

        def walk(obj):
            if isinstance(obj, dict):
                for k, v in obj.items():
                    if k != "provenance":
                        walk(v)
            elif isinstance(obj, (list, tuple)):
                for v in obj:
                    walk(v)
            elif isinstance(obj, (int, float)) and not isinstance(obj, bool) and math.isfinite(obj):
                out.add(_r2(abs(obj)))

        walk({k: v for k, v in self.to_dict().items() if k != "provenance"})
        return out

    def marker_tokens(self) -> set[str]:
        tokens = set()
        for name in self.marker_names:
            tokens.update(_MARKER.findall(name))
        return tokens


def cohens_d(group, rest) -> float | None:
    """(mean1 - mean2) / pooled sample std; None when undefined."""
    a = np.asarray(group, dtype=np.float64)
    b = np.asarray(rest, dtype=np.float64)
    n1, n2 = a.size, b.size
    if n1 < 2 or n2 < 2:
        return None
    pooled = ((n1 - 1) * a.var(ddof=1) + (n2 - 1) * b.var(ddof=1)) / (n1 + n2 - 2)
    if not pooled > 0:
        return None
    return float((a.mean() - b.mean()) / math.sqrt(pooled))


def build_evidence(report: EvalReport, cls_probs=None, reg_pred=None, labels=None,
                   low_confidence: float = THRESHOLDS["low_confidence"]) -> EvidenceBundle:
    """Assemble the bundle from a report plus the per-cell predictions behind it.

    Groups are predicted classes when ``cls_probs`` is given, else ``labels``.
    Effect sizes compare predicted marker levels of one group against the rest.
    """
    classes = list(report.class_names)
    markers = list(report.marker_names)
    prov: dict[str, str] = {"n_cells": "report.n_samples"}
    if cls_probs is not None:
        probs = np.asarray(cls_probs, dtype=np.float64)
        groups = probs.argmax(axis=1)
        group_src = "argmax of predicted class probabilities"
    elif labels is not None:
        probs = None
        groups = np.asarray(labels, dtype=np.int64)
        group_src = "reference labels"
    else:
        probs, groups, group_src = None, None, ""

    n = int(report.n_samples)
    fractions, percents = {}, {}
    if groups is not None and len(groups):
        counts = np.bincount(groups, minlength=len(classes))
        for i, name in enumerate(classes):
            fractions[name] = _r2(counts[i] / len(groups))
            percents[name] = float(round(100.0 * counts[i] / len(groups)))
            prov[f"fractions.{name}"] = f"share of cells per class ({group_src})"
            prov[f"percents.{name}"] = f"fractions.{name} x 100, rounded"

    effects: dict[str, dict[str, float | None]] = {}
    if groups is not None and reg_pred is not None:
        reg = np.asarray(reg_pred, dtype=np.float64)
        for i, name in enumerate(classes):
            sel = groups == i
            effects[name] = {}
            for j, m in enumerate(markers):
                d = cohens_d(reg[sel, j], reg[~sel, j])
                effects[name][m] = None if d is None else _r2(d)
                prov[f"effect_sizes.{name}.{m}"] = "Cohen's d of predicted marker, class vs rest"

    metrics = {}
    if report.regression is not None:
        for j, row in enumerate(report.regression["rows"]):
            metrics[row["marker"]] = {k: _r2(row[k]) for k in ("pearson_r", "ccc", "rmse", "mae")}
            prov[f"marker_metrics.{row['marker']}"] = f"report.regression.rows[{j}]"

    mis = {"total": 0, "pairs": []}
    cls_block = None
    if report.classification is not None:
        cm = np.asarray(report.classification["confusion"])
        off = [(int(cm[t, p]), t, p) for t in range(len(classes)) for p in range(len(classes))
               if t != p and cm[t, p] > 0]
        off.sort(key=lambda x: (-x[0], x[1], x[2]))
        total = int(sum(c for c, _, _ in off))
        mis = {"total": total, "pairs": [
            {"true": classes[t], "predicted": classes[p], "count": c,
             "share_percent": float(round(100.0 * c / total))} for c, t, p in off[:3]]}
        prov["misclassifications"] = "off-diagonal cells of report.classification.confusion"
        cls_block = {"accuracy_percent": float(round(100.0 * report.classification["accuracy"])),
                     "macro_f1": _r2(report.classification["macro_f1"])}
        prov["classification"] = "report.classification accuracy and macro_f1"

    conf = None
    if probs is not None and len(probs):
        top = probs.max(axis=1)
        conf = {"mean": _r2(top.mean()), "median": _r2(np.median(top)),
                "low_threshold": _r2(low_confidence),
                "low_percent": float(round(100.0 * (top < low_confidence).mean()))}
        prov["confidence"] = "top-class predicted probability per cell"
    prov["thresholds"] = "template firing thresholds"
    return EvidenceBundle(n, classes, markers, fractions, percents, effects, metrics, mis, conf,
                          cls_block, dict(THRESHOLDS), prov)


@dataclass(frozen=True)
class SummaryTemplate:
    """One sentence skeleton with typed, range-checked slots and a firing rule.

    ``fire`` returns one slot binding per sentence to emit (possibly none).
    """

    id: str
    priority: int
    slots: dict[str, tuple[type, float | None, float | None]]
    skeleton: str
    fire: Callable[[EvidenceBundle], list[dict]]

    def render(self, bundle: EvidenceBundle) -> list[str]:
        out = []
        for binding in self.fire(bundle):
            values = {}
            for name, (kind, lo, hi) in self.slots.items():
                v = binding[name]
                if kind is str:
                    values[name] = str(v)
                    continue
                v = float(v)
                if (lo is not None and v < lo) or (hi is not None and v > hi):
                    raise ValueError(f"template {self.id}: slot {name}={v} outside [{lo}, {hi}]")
                values[name] = _fmt_int(v) if kind is int else f"{v:.2f}"
            out.append(self.skeleton.format(**values))
        return out


def _fmt_int(v: float) -> str:
    return str(int(round(v)))


def _sorted_fractions(b: EvidenceBundle):
    return sorted(b.fractions.items(), key=lambda kv: (-kv[1], b.class_names.index(kv[0])))


def _majority(b):
    top = _sorted_fractions(b)[:1]
    return [{"cls": c, "pct": b.percents[c]} for c, f in top if f > 0.5]


def _plurality(b):
    top = _sorted_fractions(b)[:1]
    return [{"cls": c, "pct": b.percents[c], "n": b.n_cells} for c, f in top if 0 < f <= 0.5]


def _rare(b):
    t = b.thresholds["rare_fraction"]
    return [{"cls": c, "pct": b.percents[c]} for c in b.class_names
            if c in b.fractions and 0 < b.fractions[c] < t]


def _effects(lo: float | None, hi: float | None, sign: int):
    def fire(b):
        out = []
        lo_v = b.thresholds[lo] if lo else None
        hi_v = b.thresholds[hi] if hi else None
        for c in b.class_names:
            for m in b.marker_names:
                d = b.effect_sizes.get(c, {}).get(m)
                if d is None:
                    continue
                mag = d * sign
                if mag <= 0 or (lo_v is not None and mag < lo_v) or (hi_v is not None and mag >= hi_v):
                    continue
                out.append({"cls": c, "marker": m, "d": d})
        return out
    return fire


def _hotspot(b):
    pairs = b.misclassifications["pairs"]
    return [{"true": p["true"], "pred": p["predicted"], "count": p["count"]} for p in pairs[:1]]


def _concentration(b):
    pairs = b.misclassifications["pairs"]
    t = b.thresholds["concentration_percent"]
    return [{"share": p["share_percent"], "true": p["true"], "pred": p["predicted"]}
            for p in pairs[:1] if p["share_percent"] >= t and b.misclassifications["total"] > 1]


def _tier(lo: str | None, hi: str | None):
    def fire(b):
        lo_v = b.thresholds[lo] if lo else None
        hi_v = b.thresholds[hi] if hi else None
        out = []
        for m in b.marker_names:
            if m not in b.marker_metrics:
                continue
            r = b.marker_metrics[m]["pearson_r"]
            if (lo_v is None or r >= lo_v) and (hi_v is None or r < hi_v):
                out.append({"marker": m, "r": r})
        return out
    return fire


def _accuracy(b):
    c = b.classification
    return [] if c is None else [{"acc": c["accuracy_percent"], "f1": c["macro_f1"]}]


def _confidence(b):
    c = b.confidence
    return [] if c is None else [{"mean": c["mean"], "median": c["median"]}]


def _low_confidence(b):
    c = b.confidence
    if c is None or c["low_percent"] <= 0:
        return []
    return [{"pct": c["low_percent"], "thr": c["low_threshold"]}]


def _ccc_gap(b):
    gap = b.thresholds["ccc_gap"]
    return [{"marker": m, "r": v["pearson_r"], "ccc": v["ccc"]}
            for m, v in ((m, b.marker_metrics.get(m)) for m in b.marker_names)
            if v is not None and v["pearson_r"] - v["ccc"] >= gap]


_S, _PCT, _D, _R = (str, None, None), (int, 0, 100), (float, None, None), (float, -1, 1)

TEMPLATES: tuple[SummaryTemplate, ...] = (
    SummaryTemplate("composition.majority", 10, {"cls": _S, "pct": _PCT},
                    "Most cells in the cohort are called {cls} ({pct}%).", _majority),
    SummaryTemplate("composition.plurality", 11, {"cls": _S, "pct": _PCT, "n": (int, 0, None)},
                    "{cls} is the most frequent call ({pct}% of {n} cells).", _plurality),
    SummaryTemplate("composition.rare", 12, {"cls": _S, "pct": _PCT},
                    "{cls} cells are rare in this cohort ({pct}%).", _rare),
    SummaryTemplate("classification.accuracy", 20, {"acc": _PCT, "f1": (float, 0, 1)},
                    "Class calls agree with the reference for {acc}% of cells (macro F1 {f1}).", _accuracy),
    SummaryTemplate("enrichment.strong", 30, {"cls": _S, "marker": _S, "d": _D},
                    "{cls} cells carry markedly higher predicted {marker} than other cells (Cohen's d {d}).",
                    _effects("strong_d", None, +1)),
    SummaryTemplate("depletion.strong", 31, {"cls": _S, "marker": _S, "d": _D},
                    "{cls} cells carry markedly lower predicted {marker} than other cells (Cohen's d {d}).",
                    _effects("strong_d", None, -1)),
    SummaryTemplate("enrichment.moderate", 32, {"cls": _S, "marker": _S, "d": _D},
                    "{cls} cells lean towards higher predicted {marker} (Cohen's d {d}).",
                    _effects("moderate_d", "strong_d", +1)),
    SummaryTemplate("depletion.moderate", 33, {"cls": _S, "marker": _S, "d": _D},
                    "{cls} cells lean towards lower predicted {marker} (Cohen's d {d}).",
                    _effects("moderate_d", "strong_d", -1)),
    SummaryTemplate("tier.lineage", 40, {"marker": _S, "r": _R},
                    "{marker} is lineage-coupled; predicted and measured levels track closely (r {r}).",
                    _tier("lineage_r", None)),
    SummaryTemplate("tier.intermediate", 41, {"marker": _S, "r": _R},
                    "{marker} is partly recoverable from morphology (r {r}).", _tier("weak_r", "lineage_r")),
    SummaryTemplate("tier.weak", 42, {"marker": _S, "r": _R},
                    "{marker} is only weakly morphology-coupled (r {r}).", _tier(None, "weak_r")),
    SummaryTemplate("agreement.ccc_gap", 43, {"marker": _S, "r": _R, "ccc": _R},
                    "{marker} predictions correlate with measurement (r {r}) but are off in scale or offset (CCC {ccc}).",
                    _ccc_gap),
    SummaryTemplate("errors.hotspot", 50, {"true": _S, "pred": _S, "count": (int, 1, None)},
                    "The most common error is {true} called as {pred} ({count} cells).", _hotspot),
    SummaryTemplate("errors.concentration", 51, {"share": _PCT, "true": _S, "pred": _S},
                    "That pair accounts for {share}% of all errors ({true} to {pred}).", _concentration),
    SummaryTemplate("confidence.overall", 60, {"mean": (float, 0, 1), "median": (float, 0, 1)},
                    "Top-class confidence averages {mean} (median {median}).", _confidence),
    SummaryTemplate("confidence.low", 61, {"pct": _PCT, "thr": (float, 0, 1)},
                    "{pct}% of cells are called with confidence below {thr}.", _low_confidence),
)


def fallback_sentence(bundle: EvidenceBundle) -> str:
    return f"The cohort contains {bundle.n_cells} cells."


def render_summary(bundle: EvidenceBundle, templates=TEMPLATES) -> str:
    """Concatenate every firing template's sentences, ordered by (priority, id)."""
    sentences = []
    for t in sorted(templates, key=lambda t: (t.priority, t.id)):
        sentences += t.render(bundle)
    sentences = [s for s in sentences if is_grounded(s, bundle)]
    return " ".join(sentences) if sentences else fallback_sentence(bundle)


def ungrounded_tokens(text: str, bundle: EvidenceBundle) -> list[str]:
    """Numerals and marker names in ``text`` that the bundle does not contain."""
    allowed_markers = bundle.marker_tokens()
    bad = [m for m in _MARKER.findall(text) if m not in allowed_markers]
    stripped = _LABEL_DIGITS.sub(" ", _MARKER.sub(" ", text))
    allowed = bundle.numerals()
    for tok in _NUMERAL.findall(stripped):
        try:
            v = _r2(float(tok))
        except ValueError:
            bad.append(tok)
            continue
        if v not in allowed:
            bad.append(tok)
    return bad


def is_grounded(text: str, bundle: EvidenceBundle) -> bool:
    return not ungrounded_tokens(text, bundle)


def grounding_filter(text: str, bundle: EvidenceBundle) -> tuple[list[str], list[str]]:
    """Split into sentences; returns (kept, dropped)."""
    kept, dropped = [], []
    for s in _SENTENCE.split(text.strip()):
        s = " ".join(s.split())
        if not s:
            continue
        (kept if is_grounded(s, bundle) else dropped).append(s)
    return kept, dropped


@dataclass(frozen=True)
class EndpointConfig:
    url: str
    token_env: str = TOKEN_ENV
    timeout: float = 30.0


Transport = Callable[[str, bytes, dict, float], str]


def urllib_transport(url: str, body: bytes, headers: dict, timeout: float) -> str:
    req = urllib.request.Request(url, data=body, headers=headers, method="POST")
    with urllib.request.urlopen(req, timeout=timeout) as resp:
        return resp.read().decode("utf-8")


def _response_text(raw: str) -> str:
    try:
        payload = json.loads(raw)
    except json.JSONDecodeError:
        return raw
    if isinstance(payload, dict):
        for key in ("text", "summary", "output", "content"):
            if isinstance(payload.get(key), str):
                return payload[key]
    return raw if not isinstance(payload, str) else payload


def llm_summarize(bundle: EvidenceBundle, endpoint: EndpointConfig, transport: Transport | None = None,
                  templates=TEMPLATES) -> str:
    """Ask an external endpoint for a summary, keep only grounded sentences.

    If every sentence is dropped, or the call fails, the template summary is
    returned unchanged. If only some are dropped, the template summary is
    appended to the kept sentences.
    """
    template_text = render_summary(bundle, templates)
    headers = {"Content-Type": "application/json"}
    token = os.environ.get(endpoint.token_env)
    if token:
        headers["Authorization"] = f"Bearer {token}"
    body = json.dumps({"preamble": load_asset(PREAMBLE_ASSET), "evidence": bundle.to_dict()},
                      sort_keys=True).encode("utf-8")
    send = transport or urllib_transport
    try:
        raw = send(endpoint.url, body, headers, endpoint.timeout)
        text = _response_text(raw)
        if not isinstance(text, str):
            raise TypeError("endpoint returned a non-text payload")
    except (urllib.error.URLError, OSError, TimeoutError, ValueError, TypeError) as e:
        log.warning("summary endpoint unavailable (%s); using template summary", e)
        return template_text
    kept, dropped = grounding_filter(text, bundle)
    if dropped:
        log.info("grounding filter dropped %d sentence(s)", len(dropped))
    if not kept:
        return template_text
    if dropped:
        return " ".join(kept + [template_text])
    return " ".join(kept)
