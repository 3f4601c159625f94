"""Role-based multi-agent template refinement.

Two teams (planner, scientist, engineer, observer) refine a draft text
through scientist-analysis / engineer-rewrite / observer-critique cycles;
team leaders then reconcile under a manager, and surviving texts are
re-abstracted into a template library.  Drafts are scored by a
deterministic text-conditioned forecaster (lower MAE is better), so
refinement quality is measurable offline.  The chat backend is pluggable:
a scripted mock for deterministic runs, or any HTTP endpoint speaking the
{role, system, messages} -> {content} contract.
"""

from __future__ import annotations

import json
import logging
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Protocol

import numpy as np

from .metrics import seasonal_naive
from .textsynth import (
    _PLACEHOLDER_RE,
    Template,
    TextDescription,
    abstract_text,
    parse_period,
    parse_slot_values,
    validate_template,
)

log = logging.getLogger(__name__)

APPROVAL_TOKEN = "[APPROVED]"

ENDPOINT_ENV = "BRIDGE_LLM_ENDPOINT"
TOKEN_ENV = "BRIDGE_LLM_TOKEN"


class Role(str, Enum):
    MANAGER = "manager"
    PLANNER = "planner"
    SCIENTIST = "scientist"
    ENGINEER = "engineer"
    OBSERVER = "observer"


class Stage(str, Enum):
    PLANNING = "planning"
    INTRA = "intra"
    INTER = "inter"
    POST = "post"


_STAGE_ORDER = {Stage.PLANNING: 0, Stage.INTRA: 1, Stage.INTER: 2, Stage.POST: 3}


class BackendError(RuntimeError):
    pass


@dataclass
class AgentMessage:
    role: Role
    team: str  # "A" | "B" | "none"
    stage: Stage
    content: str
    iteration: int = 0

    def as_dict(self) -> dict:
        return {"role": self.role.value, "team": self.team,
                "stage": self.stage.value, "content": self.content,
                "iteration": self.iteration}


@dataclass
class Transcript:
    item_id: str
    messages: list[AgentMessage] = field(default_factory=list)
    fitness_per_cycle: list[float] = field(default_factory=list)
    status: str = "consensus"  # consensus | iteration_cap | backend_error

    def append(self, msg: AgentMessage) -> None:
        if self.messages and _STAGE_ORDER[msg.stage] < _STAGE_ORDER[self.messages[-1].stage]:
            raise ValueError(
                f"stage {msg.stage.value} after {self.messages[-1].stage.value}")
        self.messages.append(msg)


@dataclass
class RefinementConfig:
    max_intra_iters: int = 4
    max_inter_rounds: int = 3
    horizon: int = 24
    seed: int = 0
    strategy: str = "multi_team"  # multi_team | single_macro | single_micro

    def __post_init__(self):
        if self.max_intra_iters < 1 or self.max_inter_rounds < 1:
            raise ValueError("iteration caps must be >= 1")
        if self.strategy not in ("multi_team", "single_macro", "single_micro"):
            raise ValueError(f"unknown strategy {self.strategy!r}")

    @property
    def teams(self) -> tuple[str, ...]:
        return ("A", "B") if self.strategy == "multi_team" else ("A",)


@dataclass
class RefinementItem:
    """A draft plus the series context its fitness is scored against."""

    text: TextDescription
    history: np.ndarray
    truth: np.ndarray
    item_id: str = ""


# ---------------------------------------------------------------------------
# chat backends
# ---------------------------------------------------------------------------

class ChatBackend(Protocol):
    def complete(self, role: Role, system: str, history: list[dict]) -> str: ...


class MockBackend:
    """Deterministic scripted backend: responses are consumed FIFO per
    role.  Script exhaustion is a backend error, like a dead endpoint."""

    def __init__(self, responses: list[dict]):
        self._queues: dict[str, list[str]] = {}
        for entry in responses:
            self._queues.setdefault(entry["role"], []).append(entry["content"])

    @classmethod
    def from_script_file(cls, path: str | Path) -> "MockBackend":
        with open(path) as fh:
            obj = json.load(fh)
        return cls(obj["responses"])

    def complete(self, role: Role, system: str, history: list[dict]) -> str:
        queue = self._queues.get(role.value, [])
        if not queue:
            raise BackendError(f"mock script exhausted for role {role.value!r}")
        return queue.pop(0)


class HttpBackend:
    """POST {role, system, messages} to an LLM bridge endpoint."""

    def __init__(self, endpoint: str | None = None, token: str | None = None,
                 timeout: float = 30.0):
        self.endpoint = endpoint or os.environ.get(ENDPOINT_ENV)
        if not self.endpoint:
            raise BackendError(
                f"no endpoint configured; set {ENDPOINT_ENV} or pass endpoint=")
        self.token = token if token is not None else os.environ.get(TOKEN_ENV)
        self.timeout = timeout

    def complete(self, role: Role, system: str, history: list[dict]) -> str:
        payload = json.dumps({"role": role.value, "system": system,
                              "messages": history}).encode("utf-8")
        headers = {"Content-Type": "application/json"}
        if self.token:
            headers["Authorization"] = f"Bearer {self.token}"
        try:
            req = urllib.request.Request(self.endpoint, data=payload, headers=headers)
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                body = json.loads(resp.read().decode("utf-8"))
            return str(body["content"])
        except (urllib.error.URLError, OSError, KeyError, json.JSONDecodeError) as exc:
            raise BackendError(f"backend request failed: {exc}")


# ---------------------------------------------------------------------------
# automatic evaluation
# ---------------------------------------------------------------------------

def detect_period(history: np.ndarray) -> int:
    """Lag of the strongest autocorrelation peak, or 1 if nothing stands out."""
    x = np.asarray(history, dtype=np.float64)
    n = x.size
    if n < 4:
        return 1
    xc = x - x.mean()
    var = float(np.dot(xc, xc)) / n
    if var == 0:
        return 1
    best_lag, best_val = 1, -np.inf
    for lag in range(2, n // 2 + 1):
        # per-term normalization so long lags are not penalized
        val = float(np.dot(xc[:-lag], xc[lag:])) / (n - lag) / var
        if val > best_val:
            best_lag, best_val = lag, val
    return best_lag


def auto_evaluate(text: TextDescription | str, history: np.ndarray,
                  truth: np.ndarray) -> float:
    """Fitness of a description: MAE of a deterministic text-conditioned
    forecast against the truth (lower is better).

    The forecast starts from a seasonal-naive continuation (period parsed
    from the text or autocorrelation-detected), is rescaled to the text's
    stated mean/std when present, and stated peak/dip steps are pinned to
    the history's max/min levels.
    """
    content = text.text if isinstance(text, TextDescription) else text
    history = np.asarray(history, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if history.size == 0:
        raise ValueError("empty history")
    if truth.size < 1:
        raise ValueError("empty truth")
    period = parse_period(content) or detect_period(history)
    forecast = seasonal_naive(history, truth.size, period).astype(np.float64)
    parsed = parse_slot_values(content)
    mean = float(parsed["mean_value"]) if "mean_value" in parsed else None
    std = float(parsed["std_value"]) if "std_value" in parsed else None
    if mean is not None and std is not None:
        f_std = max(float(forecast.std()), 1e-8)
        forecast = (forecast - forecast.mean()) / f_std * std + mean
    elif mean is not None:
        forecast = forecast - forecast.mean() + mean
    elif std is not None:
        f_std = max(float(forecast.std()), 1e-8)
        forecast = (forecast - forecast.mean()) / f_std * std + forecast.mean()
    hi, lo = float(history.max()), float(history.min())
    for name, level in (("peak_steps", hi), ("dip_steps", lo)):
        if name in parsed:
            for step in parsed[name].split(","):
                idx = int(float(step))
                if 0 <= idx < truth.size:
                    forecast[idx] = level
    return float(np.mean(np.abs(forecast - truth)))


# ---------------------------------------------------------------------------
# refinement stages
# ---------------------------------------------------------------------------

_SYSTEM_PROMPTS = {
    "multi_team": "Refine the draft so a forecaster conditioned on it performs better.",
    "single_macro": "Refine the draft with high-level adjustments only: overall "
                    "trend, level, and coverage of the key statistics.",
    "single_micro": "Refine the draft with fine-grained edits: exact values, "
                    "step indices, and phrasing detail.",
}


def _history_as_dicts(messages: list[AgentMessage]) -> list[dict]:
    return [m.as_dict() for m in messages]


@dataclass
class IntraResult:
    best: TextDescription
    approved: bool
    cycles: int
    fitness_per_cycle: list[float]


def intra_group_cycle(team: str, draft: TextDescription, backend: ChatBackend,
                      evaluator: Callable[[TextDescription], float],
                      config: RefinementConfig,
                      transcript: Transcript) -> IntraResult:
    """Scientist analysis -> engineer rewrite -> observer critique, repeated
    until the observer emits the approval token or the cap is reached.  The
    best draft by fitness survives regardless of when it appeared."""
    system = _SYSTEM_PROMPTS[config.strategy]
    best = draft
    best_fitness = evaluator(draft)
    approved = False
    cycles = 0
    fitness_log: list[float] = []
    for it in range(1, config.max_intra_iters + 1):
        cycles = it
        analysis = backend.complete(Role.SCIENTIST, system,
                                    _history_as_dicts(transcript.messages))
        transcript.append(AgentMessage(Role.SCIENTIST, team, Stage.INTRA, analysis, it))
        rewrite = backend.complete(Role.ENGINEER, system,
                                   _history_as_dicts(transcript.messages))
        transcript.append(AgentMessage(Role.ENGINEER, team, Stage.INTRA, rewrite, it))
        candidate = TextDescription(text=rewrite, template_id=draft.template_id,
                                    slots=parse_slot_values(rewrite),
                                    window_ref=draft.window_ref)
        fitness = evaluator(candidate)
        fitness_log.append(fitness)
        transcript.fitness_per_cycle.append(fitness)
        if fitness < best_fitness:
            best, best_fitness = candidate, fitness
        critique = backend.complete(Role.OBSERVER, system,
                                    _history_as_dicts(transcript.messages))
        transcript.append(AgentMessage(Role.OBSERVER, team, Stage.INTRA, critique, it))
        if APPROVAL_TOKEN in critique:
            approved = True
            break
    return IntraResult(best=best, approved=approved, cycles=cycles,
                       fitness_per_cycle=fitness_log)


def inter_group_consensus(draft_a: TextDescription, draft_b: TextDescription,
                          backend: ChatBackend,
                          evaluator: Callable[[TextDescription], float],
                          config: RefinementConfig,
                          transcript: Transcript) -> tuple[TextDescription, bool]:
    """Alternating leader dialogue moderated by the manager; ends on mutual
    approval tokens or the round cap.  The fitness-better draft wins;
    ties go to team A."""
    transcript.append(AgentMessage(Role.MANAGER, "none", Stage.INTER,
                                   "Compare both drafts and converge on one.", 0))
    if draft_a.text == draft_b.text:
        transcript.append(AgentMessage(Role.MANAGER, "none", Stage.INTER,
                                       "Drafts are identical; consensus reached.", 1))
        return draft_a, True
    consensus = False
    for rnd in range(1, config.max_inter_rounds + 1):
        say_a = backend.complete(Role.PLANNER, _SYSTEM_PROMPTS[config.strategy],
                                 _history_as_dicts(transcript.messages))
        transcript.append(AgentMessage(Role.PLANNER, "A", Stage.INTER, say_a, rnd))
        say_b = backend.complete(Role.PLANNER, _SYSTEM_PROMPTS[config.strategy],
                                 _history_as_dicts(transcript.messages))
        transcript.append(AgentMessage(Role.PLANNER, "B", Stage.INTER, say_b, rnd))
        if APPROVAL_TOKEN in say_a and APPROVAL_TOKEN in say_b:
            consensus = True
            break
    fit_a, fit_b = evaluator(draft_a), evaluator(draft_b)
    winner = draft_a if fit_a <= fit_b else draft_b
    transcript.append(AgentMessage(
        Role.MANAGER, "none", Stage.INTER,
        f"Selected team {'A' if winner is draft_a else 'B'} draft "
        f"(fitness {min(fit_a, fit_b):.4f}); consensus={consensus}.", 0))
    return winner, consensus


def postprocess(texts: list[str],
                banned: list[str] | None = None) -> tuple[list[Template], list[tuple[str, list[str]]]]:
    """Re-abstract concrete values into slots, drop duplicates, and keep
    only templates that validate with zero violations."""
    if not texts:
        raise ValueError("postprocess needs at least one text")
    seen: set[str] = set()
    survivors: list[Template] = []
    rejected: list[tuple[str, list[str]]] = []
    for text in texts:
        body = abstract_text(text)
        key = " ".join(body.split()).casefold()
        if key in seen:
            continue
        seen.add(key)
        slots = set(_PLACEHOLDER_RE.findall(body))
        template = Template(template_id=f"refined-{len(survivors):03d}",
                            body=body, required_slots=slots)
        report = validate_template(template, banned)
        if report.ok:
            survivors.append(template)
        else:
            rejected.append((text, report.reasons()))
    return survivors, rejected


@dataclass
class RefinementOutcome:
    templates: list[Template]
    transcripts: list[Transcript]
    rejected: list[tuple[str, list[str]]]
    refined_texts: list[TextDescription]


def run_refinement(items: list[RefinementItem], backend: ChatBackend,
                   config: RefinementConfig | None = None,
                   banned: list[str] | None = None) -> RefinementOutcome:
    """Full pipeline: planning, per-team intra cycles, inter-team
    consensus, then post-processing into a template library.  A backend
    failure marks the affected item and the run continues."""
    if not items:
        raise ValueError("need at least one item")
    config = config or RefinementConfig()
    transcripts: list[Transcript] = []
    refined: list[TextDescription] = []
    for pos, item in enumerate(items):
        item_id = item.item_id or f"item-{pos:03d}"
        transcript = Transcript(item_id=item_id)
        transcripts.append(transcript)
        transcript.append(AgentMessage(
            Role.MANAGER, "none", Stage.PLANNING,
            f"Teams {', '.join(config.teams)}: refine draft {item_id} and "
            f"report back.", 0))

        def evaluator(desc: TextDescription, item=item) -> float:
            return auto_evaluate(desc, item.history, item.truth)

        try:
            results = {
                team: intra_group_cycle(team, item.text, backend, evaluator,
                                        config, transcript)
                for team in config.teams
            }
            if len(config.teams) == 2:
                winner, consensus = inter_group_consensus(
                    results["A"].best, results["B"].best, backend, evaluator,
                    config, transcript)
            else:
                winner = results["A"].best
                consensus = results["A"].approved
            transcript.status = ("consensus" if consensus else "iteration_cap")
        except BackendError as exc:
            log.warning("backend failure on %s: %s", item_id, exc)
            transcript.status = "backend_error"
            continue
        refined.append(winner)
        transcript.append(AgentMessage(
            Role.MANAGER, "none", Stage.POST,
            "Draft accepted into the post-processing pool.", 0))
    if refined:
        templates, rejected = postprocess([d.text for d in refined], banned)
    else:
        templates, rejected = [], []
    return RefinementOutcome(templates=templates, transcripts=transcripts,
                             rejected=rejected, refined_texts=refined)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def write_transcripts(transcripts: list[Transcript], path: str | Path) -> None:
    """One JSON object per line: every message in order, then a status
    line per transcript."""
    with open(path, "w") as fh:
        for t in transcripts:
            for seq, msg in enumerate(t.messages):
                obj = {"item_id": t.item_id, "seq": seq, **msg.as_dict()}
                fh.write(json.dumps(obj, sort_keys=True) + "\n")
            fh.write(json.dumps({
                "item_id": t.item_id, "status": t.status,
                "fitness_per_cycle": t.fitness_per_cycle,
            }, sort_keys=True) + "\n")


def write_template_library(templates: list[Template], path: str | Path) -> None:
    with open(path, "w") as fh:
        for t in templates:
            fh.write(json.dumps({
                "template_id": t.template_id, "body": t.body,
                "required_slots": sorted(t.required_slots),
            }, sort_keys=True) + "\n")
