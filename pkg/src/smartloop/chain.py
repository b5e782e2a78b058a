"""Core data model: queries, steps, chains, segments, and training pairs.

Everything here is an immutable value object. Chains are segmented at
tool-call boundaries: each segment is one model generation span, ending
either right after a tool call (before its output) or at the final
response. Instruction pairs for supervised training are emitted one per
segment.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, Mapping


class SmartloopError(Exception):
    """Base class for all errors raised by this package."""


class MalformedChain(SmartloopError):
    """Chain violates structural invariants; carries the validation report."""

    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


class CorpusError(SmartloopError):
    """Corpus file is unreadable or a record violates the line schema."""


class Domain(Enum):
    MATH = "Math"
    TIME = "Time"
    INTENTION = "Intention"
    OTHER = "Other"


class ToolKind(Enum):
    CODE = "Code"
    SEARCH = "Search"
    ASK_USER = "AskUser"


class StepMode(Enum):
    KNOWLEDGE = "Knowledge"
    TOOL = "Tool"


class DecisionToken(Enum):
    """Strategy marker prefixed to a step header, e.g. ``[[Reasoning]]``."""

    REASONING = "Reasoning"
    SEARCH = "Search"
    ASK_USER = "AskUser"

    @property
    def surface(self) -> str:
        return f"[[{self.value}]]"

    @classmethod
    def from_surface(cls, text: str) -> "DecisionToken":
        for token in cls:
            if token.surface == text:
                return token
        raise ValueError(f"not a decision token: {text!r}")


@dataclass(frozen=True)
class Query:
    id: str
    domain: Domain
    text: str
    ground_truth: str | None = None
    metadata: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.text.strip():
            raise ValueError("query text must be non-empty")


@dataclass(frozen=True)
class Subgoal:
    index: int  # 1-based
    description: str
    annotation: StepMode | None = None  # None until the annotation stage ran
    tool: ToolKind | None = None

    def __post_init__(self):
        if self.annotation is StepMode.KNOWLEDGE and self.tool is not None:
            raise ValueError("knowledge-driven subgoal cannot carry a tool")
        if self.annotation is StepMode.TOOL and self.tool is None:
            raise ValueError("tool-reliant subgoal must name a tool")


@dataclass(frozen=True)
class ToolCall:
    kind: ToolKind
    payload: str  # code snippet for Code; query string for Search/AskUser

    def __post_init__(self):
        if not self.payload.strip():
            raise ValueError("tool call payload must be non-empty")


@dataclass(frozen=True)
class ToolOutput:
    text: str
    success: bool = True
    latency_ms: int = 0

    def __post_init__(self):
        if not self.success and not self.text.strip():
            raise ValueError("failed tool output must carry a diagnostic message")


@dataclass(frozen=True)
class Step:
    """One reasoning step: knowledge-driven content or a tool invocation.

    ``justification`` is kept separate from ``content`` so renderers can
    toggle justification-free variants. ``tool_label`` preserves a raw
    header annotation when it cannot be derived from ``call`` (unknown
    tool names survive parsing verbatim). ``decision`` is the strategy
    token the step was emitted with, when that convention is active.
    """

    index: int  # 1-based
    title: str
    mode: StepMode
    justification: str = ""
    content: str = ""
    call: ToolCall | None = None
    output: ToolOutput | None = None
    decision: DecisionToken | None = None
    tool_label: str | None = None

    def executed(self) -> bool:
        return self.call is not None and self.output is not None

    def with_output(self, output: ToolOutput) -> "Step":
        return replace(self, output=output)


@dataclass(frozen=True)
class Chain:
    query: Query
    steps: tuple[Step, ...]
    final_response: str | None = None


@dataclass(frozen=True)
class InstructionPair:
    """One (instruction, input, output) supervised-training record."""

    instruction: str
    input: str
    output: str
    pair_index: int  # 1-based position within the source chain
    source_query_id: str

    def __post_init__(self):
        if not self.output:
            raise ValueError("instruction pair output must be non-empty")


@dataclass(frozen=True)
class Segment:
    """One generation span plus everything that preceded it.

    ``context`` holds all fully-executed steps before the span. The last
    step of a non-final span carries a tool call whose output is *not*
    part of the span (it arrives between this span and the next).
    """

    context: tuple[Step, ...]
    span: tuple[Step, ...]
    includes_final: bool


def validate_chain(chain: Chain, forge_policy: bool = False) -> list[str]:
    """Check structural invariants; returns violations (empty list = valid).

    ``forge_policy`` adds the requirements imposed on pipeline-produced
    chains: at least one knowledge-driven and one tool-reliant step
    (compositionality) and a final response.
    """
    violations: list[str] = []
    for position, step in enumerate(chain.steps, start=1):
        if step.index != position:
            violations.append(f"step {position}: index {step.index} breaks contiguous numbering")
        if step.mode is StepMode.TOOL and step.call is None:
            violations.append(f"step {position}: tool step without call")
        if step.mode is StepMode.KNOWLEDGE and step.call is not None:
            violations.append(f"step {position}: knowledge step with call")
        if step.output is not None and step.call is None:
            violations.append(f"step {position}: output without call")
    if forge_policy:
        modes = {step.mode for step in chain.steps}
        if StepMode.TOOL not in modes:
            violations.append("no tool-reliant step")
        if StepMode.KNOWLEDGE not in modes:
            violations.append("no knowledge-driven step")
        if chain.final_response is None or not chain.final_response.strip():
            violations.append("missing final response")
    return violations


def segment_at_tool_boundaries(chain: Chain) -> list[Segment]:
    """Split a chain into generation spans at tool-call boundaries.

    Every tool step closes a span immediately after its call; content
    after the last tool step (trailing knowledge steps and/or the final
    response) forms one more span. A chain with m tool steps therefore
    yields m segments, or m+1 when a trailing span exists.

    Raises MalformedChain when the base invariants do not hold.
    """
    violations = validate_chain(chain)
    if violations:
        raise MalformedChain(violations)
    segments: list[Segment] = []
    context: list[Step] = []
    span: list[Step] = []
    for step in chain.steps:
        span.append(step)
        if step.call is not None:
            segments.append(Segment(context=tuple(context), span=tuple(span), includes_final=False))
            context.extend(span)
            span = []
    if span or chain.final_response is not None:
        segments.append(Segment(context=tuple(context), span=tuple(span), includes_final=chain.final_response is not None))
    return segments


def tool_step_count(chain: Chain) -> int:
    return sum(1 for step in chain.steps if step.mode is StepMode.TOOL)


# ---------------------------------------------------------------------------
# Serialization: corpus ingestion (JSONL) and chain persistence (JSON)
# ---------------------------------------------------------------------------


def _query_from_record(record: Mapping, line_no: int) -> Query:
    for key in ("id", "domain", "question"):
        if key not in record:
            raise CorpusError(f"line {line_no}: missing field {key!r}")
    raw_domain = str(record["domain"])
    try:
        domain = Domain(raw_domain.capitalize())
    except ValueError:
        raise CorpusError(f"line {line_no}: unknown domain {raw_domain!r}") from None
    metadata = record.get("metadata") or {}
    if not isinstance(metadata, dict):
        raise CorpusError(f"line {line_no}: metadata must be an object")
    answer = record.get("answer")
    try:
        return Query(
            id=str(record["id"]),
            domain=domain,
            text=str(record["question"]),
            ground_truth=None if answer is None else str(answer),
            metadata={str(k): str(v) for k, v in metadata.items()},
        )
    except ValueError as exc:
        raise CorpusError(f"line {line_no}: {exc}") from None


def load_corpus(path: str | Path) -> list[Query]:
    """Read a line-delimited JSON corpus ({id, domain, question, answer?, metadata?})."""
    queries: list[Query] = []
    seen: set[str] = set()
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus: {exc}") from exc
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"line {line_no}: invalid JSON ({exc.msg})") from None
        query = _query_from_record(record, line_no)
        if query.id in seen:
            raise CorpusError(f"line {line_no}: duplicate query id {query.id!r}")
        seen.add(query.id)
        queries.append(query)
    return queries


def query_to_dict(query: Query) -> dict:
    return {
        "id": query.id,
        "domain": query.domain.value,
        "text": query.text,
        "ground_truth": query.ground_truth,
        "metadata": dict(query.metadata),
    }


def query_from_dict(data: Mapping) -> Query:
    return Query(
        id=data["id"],
        domain=Domain(data["domain"]),
        text=data["text"],
        ground_truth=data.get("ground_truth"),
        metadata=dict(data.get("metadata") or {}),
    )


def step_to_dict(step: Step) -> dict:
    return {
        "index": step.index,
        "title": step.title,
        "mode": step.mode.value,
        "justification": step.justification,
        "content": step.content,
        "call": None if step.call is None else {"kind": step.call.kind.value, "payload": step.call.payload},
        "output": None
        if step.output is None
        else {"text": step.output.text, "success": step.output.success, "latency_ms": step.output.latency_ms},
        "decision": None if step.decision is None else step.decision.value,
        "tool_label": step.tool_label,
    }


def step_from_dict(data: Mapping) -> Step:
    call = data.get("call")
    output = data.get("output")
    decision = data.get("decision")
    return Step(
        index=data["index"],
        title=data["title"],
        mode=StepMode(data["mode"]),
        justification=data.get("justification", ""),
        content=data.get("content", ""),
        call=None if call is None else ToolCall(ToolKind(call["kind"]), call["payload"]),
        output=None
        if output is None
        else ToolOutput(output["text"], output.get("success", True), output.get("latency_ms", 0)),
        decision=None if decision is None else DecisionToken(decision),
        tool_label=data.get("tool_label"),
    )


def chain_to_dict(chain: Chain) -> dict:
    segments = segment_at_tool_boundaries(chain) if not validate_chain(chain) else None
    doc = {
        "query": query_to_dict(chain.query),
        "steps": [step_to_dict(step) for step in chain.steps],
        "final_response": chain.final_response,
        "pair_counts": None,
    }
    if segments is not None:
        # Both counting conventions, so either can be filtered downstream.
        doc["pair_counts"] = {"tool_steps": tool_step_count(chain), "segments": len(segments)}
    return doc


def chain_from_dict(data: Mapping) -> Chain:
    return Chain(
        query=query_from_dict(data["query"]),
        steps=tuple(step_from_dict(s) for s in data["steps"]),
        final_response=data.get("final_response"),
    )


def write_chain(chain: Chain, path: str | Path) -> None:
    Path(path).write_text(json.dumps(chain_to_dict(chain), indent=2, ensure_ascii=False, sort_keys=True) + "\n", encoding="utf-8")


def read_chain(path: str | Path) -> Chain:
    return chain_from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
