"""Bit-exact parser and renderer for the plain-text step protocol.

The wire format (see docs/wire_format.md for the full grammar and
decision table):

    ### Task
    <task text>
    ### Reasoning Steps
    - Step 1: <title>, general reasoning
    Why: <one-line justification>
    <content>
    - Step 2: <title>, tool: <name>
    <content>
    Search(<query>)
    - Output: <tool execution output>
    ### Final Response
    <answer>

Tool calls take one of three shapes: a fenced ``python`` code block, or
the literal patterns ``Search(...)`` / ``AskUser(...)`` with a
balanced-parenthesis argument. Step headers may carry a strategy token
(``- Step 3: [[Search]] <title>, tool: Search``).

Parsing is total: arbitrary input never raises, it degrades to zero
steps with an exhausted terminal. When a generation contains both an
unexecuted tool call and a final-response marker, whichever appears
first in document order wins and the rest of the text is discarded.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

from .chain import (
    Chain,
    DecisionToken,
    Query,
    SmartloopError,
    Step,
    StepMode,
    ToolCall,
    ToolKind,
    ToolOutput,
)

FINAL_MARKER = "### Final Response"
REASONING_MARKER = "### Reasoning Steps"
TASK_MARKER = "### Task"
OUTPUT_PREFIX = "- Output: "
WHY_PREFIX = "Why: "
CODE_FENCE_OPEN = "```python"
CODE_FENCE_CLOSE = "```"

_HEADER_RE = re.compile(r"^- Step (\d+): (.*)$")
_TOKEN_RE = re.compile(r"^\[\[(Reasoning|Search|AskUser)\]\] ")
_TOOL_SUFFIX_RE = re.compile(r"^(.*), tool: (.+)$", re.DOTALL)
_PAREN_CALL_RE = re.compile(r"(?<![A-Za-z0-9_])(Search|AskUser)\(")
_KNOWLEDGE_SUFFIX = ", general reasoning"


class UnbalancedCall(SmartloopError):
    """A recognized tool-call opener has no closing delimiter."""


class MalformedStep(SmartloopError):
    """Step violates invariants required for canonical rendering."""


@dataclass(frozen=True)
class ToolCallPending:
    call: ToolCall


@dataclass(frozen=True)
class FinalAnswer:
    text: str


@dataclass(frozen=True)
class Exhausted:
    pass


Terminal = Union[ToolCallPending, FinalAnswer, Exhausted]


@dataclass(frozen=True)
class ParsedOutput:
    steps: tuple[Step, ...]
    terminal: Terminal


def terminal_tag(terminal: Terminal) -> str:
    if isinstance(terminal, ToolCallPending):
        return "tool_call"
    if isinstance(terminal, FinalAnswer):
        return "final"
    return "exhausted"


# ---------------------------------------------------------------------------
# Tool-call extraction
# ---------------------------------------------------------------------------


def _scan_balanced(text: str, open_index: int) -> int:
    """Index just past the parenthesis matching ``text[open_index]``."""
    depth = 0
    for i in range(open_index, len(text)):
        if text[i] == "(":
            depth += 1
        elif text[i] == ")":
            depth -= 1
            if depth == 0:
                return i + 1
    raise UnbalancedCall(f"unclosed call opened at offset {open_index}")


def _find_code_fence(text: str, start: int) -> tuple[int, int, str] | None:
    """Locate the first ``python`` fence at or after ``start``.

    Returns (span_start, span_end, snippet); span_end excludes the
    newline after the closing fence. Raises UnbalancedCall when the
    fence never closes.
    """
    offset = start
    for line_start, line_end, line in _iter_lines(text, start):
        if line.strip() == CODE_FENCE_OPEN:
            body_lines: list[str] = []
            for close_start, close_end, close_line in _iter_lines(text, line_end):
                if close_line.strip() == CODE_FENCE_CLOSE:
                    snippet = "\n".join(body_lines)
                    span_end = close_start + len(close_line)
                    return line_start, span_end, snippet
                body_lines.append(close_line)
            raise UnbalancedCall(f"unclosed code fence opened at offset {line_start}")
        offset = line_end
    return None


def _iter_lines(text: str, start: int = 0):
    """Yield (line_start, next_line_start, line_without_newline)."""
    pos = start
    n = len(text)
    while pos < n:
        newline = text.find("\n", pos)
        if newline == -1:
            yield pos, n, text[pos:n]
            return
        yield pos, newline + 1, text[pos:newline]
        pos = newline + 1


def _find_call(text: str, start: int = 0) -> tuple[ToolCall, int, int] | None:
    """First tool call at or after ``start`` as (call, span_start, span_end).

    Empty-payload matches are not calls; scanning continues past them.
    """
    pos = start
    while True:
        fence = _find_code_fence(text, pos)
        paren = _PAREN_CALL_RE.search(text, pos)
        if fence is None and paren is None:
            return None
        fence_at = fence[0] if fence is not None else len(text) + 1
        paren_at = paren.start() if paren is not None else len(text) + 1
        if fence_at < paren_at:
            span_start, span_end, snippet = fence  # type: ignore[misc]
            if snippet.strip():
                return ToolCall(ToolKind.CODE, snippet), span_start, span_end
            pos = span_end
            continue
        assert paren is not None
        open_index = paren.end() - 1
        span_end = _scan_balanced(text, open_index)
        payload = text[open_index + 1 : span_end - 1]
        if payload.strip():
            kind = ToolKind.SEARCH if paren.group(1) == "Search" else ToolKind.ASK_USER
            return ToolCall(kind, payload), paren.start(), span_end
        pos = span_end


def extract_tool_call(text: str) -> ToolCall | None:
    """First tool call in document order, or None.

    Raises UnbalancedCall when a recognized opener never closes.
    """
    found = _find_call(text)
    return None if found is None else found[0]


def extract_final_response(text: str) -> str | None:
    """Text after the first final-response marker line, trimmed; None if
    the marker is missing or nothing follows it."""
    for line_start, line_end, line in _iter_lines(text):
        if line.startswith(FINAL_MARKER):
            answer = text[line_end:].strip()
            return answer or None
    return None


# ---------------------------------------------------------------------------
# Model-output parsing
# ---------------------------------------------------------------------------


def _parse_header(line: str) -> tuple[int, str, DecisionToken | None, str | None, bool] | None:
    """Split a step header into (index, title, decision, tool label, is_knowledge)."""
    match = _HEADER_RE.match(line)
    if match is None:
        return None
    index = int(match.group(1))
    rest = match.group(2)
    decision = None
    token_match = _TOKEN_RE.match(rest)
    if token_match is not None:
        decision = DecisionToken(token_match.group(1))
        rest = rest[token_match.end() :]
    if rest.endswith(_KNOWLEDGE_SUFFIX):
        return index, rest[: -len(_KNOWLEDGE_SUFFIX)], decision, None, True
    tool_match = _TOOL_SUFFIX_RE.match(rest)
    if tool_match is not None:
        return index, tool_match.group(1), decision, tool_match.group(2), False
    return index, rest, decision, None, False


@dataclass
class _Block:
    header: tuple[int, str, DecisionToken | None, str | None, bool] | None
    body_start: int
    body_end: int


def _split_blocks(text: str) -> tuple[list[_Block], int | None]:
    """Cut the text into step blocks; returns (blocks, final marker line start).

    Leading text up to a reasoning-steps marker is skipped; prose before
    the first header becomes a headerless block. The first final-response
    marker line ends block collection.
    """
    lines = list(_iter_lines(text))
    start_line = 0
    for i, (_, line_end, line) in enumerate(lines):
        if _HEADER_RE.match(line) or line.startswith(FINAL_MARKER):
            break
        if line.startswith(REASONING_MARKER):
            start_line = i + 1
            break
    blocks: list[_Block] = []
    final_at: int | None = None
    current: _Block | None = None
    pos = lines[start_line][0] if start_line < len(lines) else len(text)
    for line_start, line_end, line in lines[start_line:]:
        if line.startswith(FINAL_MARKER):
            if current is not None:
                current.body_end = line_start
            final_at = line_start
            break
        header = _parse_header(line)
        if header is not None:
            if current is not None:
                current.body_end = line_start
            current = _Block(header=header, body_start=line_end, body_end=len(text))
            blocks.append(current)
        elif current is None:
            current = _Block(header=None, body_start=pos, body_end=len(text))
            blocks.append(current)
    return blocks, final_at


def _parse_body(body: str) -> tuple[str, str, ToolCall | None, ToolOutput | None, bool]:
    """Parse a block body into (justification, content, call, output, pending).

    ``pending`` means the body carries an unexecuted call; trailing text
    after it was discarded.
    """
    justification = ""
    if body.startswith(WHY_PREFIX):
        newline = body.find("\n")
        if newline == -1:
            return body[len(WHY_PREFIX) :], "", None, None, False
        justification = body[len(WHY_PREFIX) : newline]
        body = body[newline + 1 :]
    try:
        found = _find_call(body)
    except UnbalancedCall:
        found = None
    if found is None:
        return justification, _strip_one_newline(body), None, None, False
    call, span_start, span_end = found
    content = _strip_one_newline(body[:span_start])
    after = body[span_end:]
    if after.startswith("\n" + OUTPUT_PREFIX):
        raw = after[1 + len(OUTPUT_PREFIX) :]
        output = ToolOutput(text=_strip_one_newline(raw))
        return justification, content, call, output, False
    return justification, content, call, None, True


def _strip_one_newline(text: str) -> str:
    return text[:-1] if text.endswith("\n") else text


def parse_model_output(text: str, next_index: int = 1) -> ParsedOutput:
    """Parse one model generation into steps and a terminal.

    Total over arbitrary input. ``next_index`` numbers a step
    synthesized for a tool call that appears before any step header
    (free-text generations still need the call recorded on a step).
    """
    blocks, final_at = _split_blocks(text)
    steps: list[Step] = []
    for block in blocks:
        body = text[block.body_start : block.body_end]
        justification, content, call, output, pending = _parse_body(body)
        if block.header is None and call is None:
            continue  # headerless prose without a call carries no step
        if block.header is None:
            index, title, decision, label, _ = next_index, "", None, None, False
        else:
            index, title, decision, label, _ = block.header
        if call is not None and label == call.kind.value:
            label = None  # derivable from the call; keep only mismatches
        steps.append(
            Step(
                index=index,
                title=title,
                mode=StepMode.TOOL if call is not None else StepMode.KNOWLEDGE,
                justification=justification,
                content=content,
                call=call,
                output=output,
                decision=decision,
                tool_label=label,
            )
        )
        if pending:
            assert call is not None
            return ParsedOutput(steps=tuple(steps), terminal=ToolCallPending(call))
    if final_at is not None:
        answer = extract_final_response(text[final_at:])
        if answer is not None:
            return ParsedOutput(steps=tuple(steps), terminal=FinalAnswer(answer))
    return ParsedOutput(steps=tuple(steps), terminal=Exhausted())


# ---------------------------------------------------------------------------
# Canonical rendering
# ---------------------------------------------------------------------------


def render_call(call: ToolCall) -> str:
    if call.kind is ToolKind.CODE:
        return f"{CODE_FENCE_OPEN}\n{call.payload}\n{CODE_FENCE_CLOSE}"
    return f"{call.kind.value}({call.payload})"


def _check_renderable(step: Step) -> None:
    if step.mode is StepMode.TOOL and step.call is None:
        raise MalformedStep(f"step {step.index}: tool step without call")
    if step.mode is StepMode.KNOWLEDGE and step.call is not None:
        raise MalformedStep(f"step {step.index}: knowledge step with call")
    if step.output is not None and step.call is None:
        raise MalformedStep(f"step {step.index}: output without call")
    if "\n" in step.title:
        raise MalformedStep(f"step {step.index}: title must be single-line")
    if "\n" in step.justification:
        raise MalformedStep(f"step {step.index}: justification must be single-line")


def render_step(step: Step, include_output: bool = True, include_justification: bool = True) -> str:
    """Canonical text for one step; ends with exactly one newline per element."""
    _check_renderable(step)
    header = f"- Step {step.index}: "
    if step.decision is not None:
        header += step.decision.surface + " "
    header += step.title
    if step.call is not None:
        header += f", tool: {step.tool_label or step.call.kind.value}"
    elif step.tool_label is not None:
        header += f", tool: {step.tool_label}"
    else:
        header += _KNOWLEDGE_SUFFIX
    parts = [header + "\n"]
    if include_justification and step.justification:
        parts.append(WHY_PREFIX + step.justification + "\n")
    if step.content:
        parts.append(step.content + "\n")
    if step.call is not None:
        parts.append(render_call(step.call) + "\n")
    if include_output and step.output is not None:
        parts.append(OUTPUT_PREFIX + step.output.text + "\n")
    return "".join(parts)


def render_steps(steps, include_justifications: bool = True) -> str:
    return "".join(render_step(s, include_justification=include_justifications) for s in steps)


def render_history(steps, query: Query, include_justifications: bool = True) -> str:
    """User-message text: the task preamble followed by all executed steps."""
    preamble = f"{TASK_MARKER}\n{query.text}\n{REASONING_MARKER}\n"
    return preamble + render_steps(steps, include_justifications=include_justifications)


def render_span(span, final_response: str | None = None, include_justifications: bool = True) -> str:
    """One generation span: the last step of a tool-boundary span renders
    without its output (the output arrives after the generation ends)."""
    parts = []
    for i, step in enumerate(span):
        boundary = final_response is None and i == len(span) - 1
        parts.append(
            render_step(step, include_output=not boundary, include_justification=include_justifications)
        )
    if final_response is not None:
        parts.append(f"{FINAL_MARKER}\n{final_response}\n")
    return "".join(parts)


def render_chain(chain: Chain, include_justifications: bool = True) -> str:
    """Full canonical rendering: task, every executed step, final response."""
    text = render_history(chain.steps, chain.query, include_justifications=include_justifications)
    if chain.final_response is not None:
        text += f"{FINAL_MARKER}\n{chain.final_response}\n"
    return text
