"""Deterministic, offline text synthesis for time-series windows.

Statistics are extracted from a window and poured into fixed general-purpose
templates.  The slot grammar lives here as a single source of truth: the
template filler renders canonical phrasings ("a minimum of 12.00", "peaks
... at steps 5, 15, 25"), and the same patterns drive numeric parsing in
the encoder and slot re-abstraction in the refinement pipeline.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

NUM = r"-?\d+(?:\.\d+)?"
NUMLIST = rf"{NUM}(?:\s*,\s*{NUM})*"


class TemplateError(ValueError):
    """Slot coverage or structural problems while filling a template."""


class StatsError(ValueError):
    """Window too short or otherwise unusable for statistics."""


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class StatSummary:
    """Raw-unit descriptive statistics for one window."""

    minimum: float
    maximum: float
    mean: float
    std: float
    q1: float
    median: float
    q3: float
    peak_steps: list[int]
    dip_steps: list[int]
    k: int
    length: int
    trend: str               # increasing | decreasing | flat
    variability: str         # low | moderate | high
    degenerate: bool = False


def _plateau_runs(x: np.ndarray) -> list[tuple[int, float]]:
    """(start_index, value) for each maximal run of equal values."""
    runs = [(0, float(x[0]))]
    for i in range(1, len(x)):
        if x[i] != runs[-1][1]:
            runs.append((i, float(x[i])))
    return runs


def _local_extrema(x: np.ndarray, kind: str) -> list[tuple[int, float]]:
    """Strict local maxima/minima; a plateau counts once at its left edge.
    Endpoints qualify against their single neighbour."""
    runs = _plateau_runs(x)
    if len(runs) == 1:
        return []
    out = []
    for j, (idx, val) in enumerate(runs):
        left = runs[j - 1][1] if j > 0 else None
        right = runs[j + 1][1] if j + 1 < len(runs) else None
        if kind == "max":
            ok = (left is None or val > left) and (right is None or val > right)
        else:
            ok = (left is None or val < left) and (right is None or val < right)
        if ok:
            out.append((idx, val))
    return out


def _top_k_steps(x: np.ndarray, k: int, kind: str) -> list[int]:
    extrema = _local_extrema(x, kind)
    sign = -1.0 if kind == "max" else 1.0
    chosen = [idx for idx, val in sorted(extrema, key=lambda p: (sign * p[1], p[0]))[:k]]
    if len(chosen) < k:
        taken = set(chosen)
        rest = sorted(
            ((sign * float(x[i]), i) for i in range(len(x)) if i not in taken))
        chosen += [i for _, i in rest[:k - len(chosen)]]
    return sorted(chosen[:k])


def extract_stats(values: np.ndarray, k: int = 3,
                  period_hint: int | None = None) -> StatSummary:
    """Descriptive statistics of a raw-unit window.

    Quartiles use linear interpolation.  Peaks/dips are the k largest local
    maxima/minima (ties break toward the smaller index; plateaus count at
    their leftmost point).  The trend is flat when the least-squares slope,
    scaled by length/std, stays below 0.1.  Variability bands come from the
    coefficient of variation: < 0.15 low, < 0.5 moderate, else high.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size < 2 * k:
        raise StatsError(f"window of length {x.size} too short for k={k} extrema")
    q1, median, q3 = (float(v) for v in np.percentile(x, [25, 50, 75]))
    std = float(x.std())
    mean = float(x.mean())
    degenerate = std <= 1e-12
    if degenerate:
        peaks = list(range(k))
        dips = list(range(k))
    else:
        peaks = _top_k_steps(x, k, "max")
        dips = _top_k_steps(x, k, "min")
    slope = float(np.polyfit(np.arange(x.size), x, 1)[0])
    scaled = abs(slope) * x.size / max(std, 1e-8)
    if scaled < 0.1:
        trend = "flat"
    else:
        trend = "increasing" if slope > 0 else "decreasing"
    cov = std / max(abs(mean), 1e-8)
    variability = "low" if cov < 0.15 else ("moderate" if cov < 0.5 else "high")
    return StatSummary(
        minimum=float(x.min()), maximum=float(x.max()), mean=mean, std=std,
        q1=q1, median=median, q3=q3, peak_steps=peaks, dip_steps=dips,
        k=k, length=int(x.size), trend=trend, variability=variability,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# templates
# ---------------------------------------------------------------------------

@dataclass
class Template:
    """A slotted sentence skeleton.  Validation is reported, not enforced,
    so candidate templates from the refinement pipeline can be inspected."""

    template_id: str
    body: str
    required_slots: set[str]


@dataclass
class TextDescription:
    """A filled template bound to its source window."""

    text: str
    template_id: str
    slots: dict[str, str]
    window_ref: str = ""


@dataclass
class ValidationReport:
    unmatched_braces: bool = False
    unknown_placeholders: list[str] = field(default_factory=list)
    unused_slots: list[str] = field(default_factory=list)
    numeral_literals: list[str] = field(default_factory=list)
    banned_literals: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.unmatched_braces or self.unknown_placeholders
                    or self.unused_slots or self.numeral_literals
                    or self.banned_literals)

    def reasons(self) -> list[str]:
        out = []
        if self.unmatched_braces:
            out.append("unmatched braces")
        for p in self.unknown_placeholders:
            out.append(f"placeholder {{{p}}} not declared")
        for s in self.unused_slots:
            out.append(f"declared slot {s!r} unused")
        for n in self.numeral_literals:
            out.append(f"concrete numeral {n!r} in body")
        for b in self.banned_literals:
            out.append(f"dataset name {b!r} in body")
        return out


_PLACEHOLDER_RE = re.compile(r"\{([a-zA-Z0-9_]+)\}")


def _default_resource(name: str) -> str:
    return resources.files("textseries").joinpath("resources", name).read_text()


def load_banned_literals(path: str | Path | None = None) -> list[str]:
    text = Path(path).read_text() if path else _default_resource("banned_literals.txt")
    return [ln.strip().lower() for ln in text.splitlines()
            if ln.strip() and not ln.startswith("#")]


def load_template_library(path: str | Path | None = None) -> list[Template]:
    """Templates from a JSONL file (one object per line); defaults to the
    shipped library."""
    text = Path(path).read_text() if path else _default_resource("templates.jsonl")
    out = []
    for i, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.append(Template(obj["template_id"], obj["body"],
                                set(obj["required_slots"])))
        except (json.JSONDecodeError, KeyError) as exc:
            raise TemplateError(f"template library line {i}: {exc}")
    if not out:
        raise TemplateError("template library is empty")
    return out


def validate_template(template: Template,
                      banned: list[str] | None = None) -> ValidationReport:
    """Report structural and leakage problems; never raises."""
    report = ValidationReport()
    body = template.body
    depth = 0
    for ch in body:
        if ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
        if depth not in (0, 1):
            report.unmatched_braces = True
            break
    if depth != 0:
        report.unmatched_braces = True
    placeholders = set(_PLACEHOLDER_RE.findall(body))
    report.unknown_placeholders = sorted(placeholders - template.required_slots)
    report.unused_slots = sorted(template.required_slots - placeholders)
    stripped = _PLACEHOLDER_RE.sub(" ", body)
    report.numeral_literals = re.findall(NUM, stripped)
    if banned is None:
        banned = load_banned_literals()
    low = stripped.lower()
    for lit in banned:
        if re.search(rf"(?<![a-z0-9]){re.escape(lit)}(?![a-z0-9])", low):
            report.banned_literals.append(lit)
    return report


# ---------------------------------------------------------------------------
# slot rendering and filling
# ---------------------------------------------------------------------------

_TWO_DP_SLOTS = ("min_value", "max_value", "mean_value", "std_value",
                 "median_value", "q1_value", "q3_value")
_STEP_LIST_SLOTS = ("peak_steps", "dip_steps")
_INT_SLOTS = ("prediction_length", "total_steps")

_TREND_PHRASE = {
    "increasing": "a steadily increasing trend",
    "decreasing": "a gradually decreasing trend",
    "flat": "a broadly flat profile",
}


def stats_slots(stats: StatSummary) -> dict[str, str]:
    """Canonical renderings of every slot derivable from statistics."""
    vals = {
        "min_value": stats.minimum, "max_value": stats.maximum,
        "mean_value": stats.mean, "std_value": stats.std,
        "median_value": stats.median, "q1_value": stats.q1,
        "q3_value": stats.q3,
    }
    out = {name: f"{v:.2f}" for name, v in vals.items()}
    out["peak_steps"] = ", ".join(str(i) for i in stats.peak_steps)
    out["dip_steps"] = ", ".join(str(i) for i in stats.dip_steps)
    out["prediction_length"] = str(stats.length)
    out["total_steps"] = str(stats.length)
    out["variability_summary"] = f"{stats.variability} variability"
    out["trend_summary"] = _TREND_PHRASE[stats.trend]
    out["describe_general_trend"] = f"the values follow {_TREND_PHRASE[stats.trend]}"
    return out


def fill_template(template: Template, stats: StatSummary,
                  domain_meta: dict[str, str] | None = None,
                  window_ref: str = "") -> TextDescription:
    """Substitute every required slot from stats-derived values plus
    domain metadata.  Numeric statistics render with two decimals; step
    lists render comma-separated."""
    domain_meta = domain_meta or {}
    slots = stats_slots(stats)
    known = set(slots) | set(domain_meta)
    unknown_meta = set(domain_meta) - template.required_slots
    if unknown_meta:
        log.warning("fill_template(%s): unused metadata slots %s",
                    template.template_id, sorted(unknown_meta))
    missing = sorted(template.required_slots - known)
    if missing:
        raise TemplateError(f"missing slot: {missing[0]}")
    values = {name: domain_meta.get(name, slots.get(name, ""))
              for name in template.required_slots}
    text = template.body
    for name, value in values.items():
        text = text.replace("{" + name + "}", value)
    if "{" in text or "}" in text:
        raise TemplateError(f"unresolved placeholder remains in {template.template_id}")
    return TextDescription(text=text, template_id=template.template_id,
                           slots=values, window_ref=window_ref)


# ---------------------------------------------------------------------------
# rule-based baseline text
# ---------------------------------------------------------------------------

_N_SEGMENTS = 8


def rule_based_text(values: np.ndarray, window_ref: str = "") -> TextDescription:
    """Trend words with degree modifiers over eight equal segments; the
    weak baseline against which template texts are compared."""
    x = np.asarray(values, dtype=np.float64)
    if x.size < _N_SEGMENTS:
        raise StatsError(f"need at least {_N_SEGMENTS} points, got {x.size}")
    tokens = []
    for seg in np.array_split(x, _N_SEGMENTS):
        m = seg.size
        slope = float(np.polyfit(np.arange(m), seg, 1)[0]) if m > 1 else 0.0
        rise = slope * (m - 1)
        r = rise / max(float(seg.std()), 1e-8)
        if abs(r) < 0.1:
            word = "flat"
        else:
            word = "increasing" if r > 0 else "decreasing"
        mag = abs(r)
        degree = "significant" if mag >= 2.0 else ("moderate" if mag >= 0.5 else "slight")
        tokens.append(f"{degree} {word}")
    text = "The series can be described as " + ", ".join(tokens) + "."
    return TextDescription(text=text, template_id="rule_based", slots={},
                           window_ref=window_ref)


# ---------------------------------------------------------------------------
# slot grammar (shared with the encoder and the refinement pipeline)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlotPattern:
    regex: re.Pattern
    slots: tuple[str, ...]   # slot name per capture group


def _sp(pattern: str, *slots: str) -> SlotPattern:
    return SlotPattern(re.compile(pattern, re.IGNORECASE), slots)


SLOT_PATTERNS: list[SlotPattern] = [
    _sp(rf"standard deviation of (?:about |approximately )?({NUM})", "std_value"),
    _sp(rf"variability(?: \(standard deviation\))? of ({NUM})", "std_value"),
    _sp(rf"mean of (?:approximately |about )?({NUM})", "mean_value"),
    _sp(rf"(?:an )?average of ({NUM})", "mean_value"),
    _sp(rf"averaging ({NUM})", "mean_value"),
    _sp(rf"median(?: value)?(?: is)?(?: projected to be)?(?: around)? ({NUM})", "median_value"),
    _sp(rf"minimum of ({NUM})", "min_value"),
    _sp(rf"(?:a )?low of ({NUM})", "min_value"),
    _sp(rf"maximum of ({NUM})", "max_value"),
    _sp(rf"(?:a )?high of ({NUM})", "max_value"),
    _sp(rf"peaking at ({NUM})", "max_value"),
    _sp(rf"rang(?:e|es|ing) (?:between|from) ({NUM}) (?:and|to) ({NUM})",
        "min_value", "max_value"),
    _sp(rf"varies between ({NUM}) and ({NUM})", "min_value", "max_value"),
    _sp(rf"(?:peaks|highs)[^.]*?(?:at|near|around) (?:time )?steps? ({NUMLIST})", "peak_steps"),
    _sp(rf"peak values at ({NUMLIST})", "peak_steps"),
    _sp(rf"(?:dips|troughs|lows)[^.]*?(?:at|near|around) (?:time )?steps? ({NUMLIST})", "dip_steps"),
    _sp(rf"prediction length is (\d+)", "prediction_length"),
    _sp(rf"prediction horizon is (?:set at )?(\d+)", "prediction_length"),
    _sp(rf"forecast (?:horizon|length) is (\d+)", "prediction_length"),
    _sp(rf"prediction (?:windows|spans) of (\d+)(?: time)? steps", "prediction_length"),
    _sp(rf"predictions (?:are made )?for horizons of (\d+)(?: time)? steps", "prediction_length"),
    _sp(rf"predictions required for (\d+) steps", "prediction_length"),
    _sp(rf"each series spans (\d+) steps", "prediction_length"),
    _sp(rf"contains? (\d+) time points", "total_steps"),
    _sp(rf"consists? of (\d+) time points", "total_steps"),
    _sp(rf"total number of time steps is (\d+)", "total_steps"),
]

_PERIOD_RE = re.compile(rf"every (\d+) (?:time )?steps", re.IGNORECASE)


def parse_slot_values(text: str) -> dict[str, str]:
    """First match per slot, scanning the grammar in order."""
    found: dict[str, str] = {}
    for sp in SLOT_PATTERNS:
        m = sp.regex.search(text)
        if not m:
            continue
        for slot, value in zip(sp.slots, m.groups()):
            found.setdefault(slot, value.strip())
    return found


def parse_period(text: str) -> int | None:
    m = _PERIOD_RE.search(text)
    return int(m.group(1)) if m else None


def abstract_text(text: str) -> str:
    """Inverse of filling: replace recognized concrete values with their
    slot placeholders.  Values the grammar does not know stay behind and
    will be flagged as leakage downstream."""
    out = text
    for sp in SLOT_PATTERNS:
        def repl(m: re.Match, sp=sp) -> str:
            s = m.group(0)
            # replace capture groups right-to-left to keep offsets valid
            for gi in range(len(sp.slots), 0, -1):
                start, end = m.span(gi)
                if start < 0:
                    continue
                start -= m.start(0)
                end -= m.start(0)
                s = s[:start] + "{" + sp.slots[gi - 1] + "}" + s[end:]
            return s

        out = sp.regex.sub(repl, out)
    out = _PERIOD_RE.sub("every {period_steps} steps", out)
    return out
