"""Decomposition text format: parsing, format checking, placeholder resolution.

A decomposition is a block of lines of the form::

    ### Q1: Which state is WXBX located?
    ### Q2: In which of #1 's regions is Richmond?

where ``#j`` stands for the reader's answer to step ``j``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Sequence

DEFAULT_T_MAX = 8

PARSE_FAIL = "PARSE_FAIL"
BAD_LABEL_SEQUENCE = "BAD_LABEL_SEQUENCE"
OUT_OF_RANGE_REF = "OUT_OF_RANGE_REF"
TEXTUAL_REF = "TEXTUAL_REF"
EMPTY_STEP = "EMPTY_STEP"
TOO_MANY_STEPS = "TOO_MANY_STEPS"

VIOLATION_CODES = (
    PARSE_FAIL,
    BAD_LABEL_SEQUENCE,
    OUT_OF_RANGE_REF,
    TEXTUAL_REF,
    EMPTY_STEP,
    TOO_MANY_STEPS,
)

_LABEL_LINE = re.compile(r"^[ \t]*###[ \t]*Q(\d+)[ \t]*:(.*)$")
# greedy digits: "#12" is always index 12, never "#1" + "2"
PLACEHOLDER = re.compile(r"#(\d+)")
_TEXTUAL_REF = re.compile(r"\bquestion\s*#?\s*\d+", re.IGNORECASE)


class DecompositionError(ValueError):
    """Raised when text cannot be parsed into a decomposition."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class UnresolvedReferenceError(LookupError):
    pass


@dataclass(frozen=True)
class SubQuestion:
    index: int
    template: str

    def __post_init__(self):
        if self.index < 1:
            raise ValueError(f"step index must be >= 1, got {self.index}")
        if len(self.template.splitlines()) > 1:
            raise ValueError("template must be a single line")
        if not self.template.strip():
            raise ValueError(f"step {self.index} has an empty template")
        if self.template != self.template.strip():
            raise ValueError("template must not carry leading/trailing whitespace")

    @property
    def references(self) -> tuple[int, ...]:
        return tuple(int(m.group(1)) for m in PLACEHOLDER.finditer(self.template))


@dataclass(frozen=True)
class Decomposition:
    steps: tuple[SubQuestion, ...]
    raw_text: str = field(default="", compare=False)

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError("a decomposition needs at least one step")
        for expected, step in enumerate(self.steps, start=1):
            if step.index != expected:
                raise ValueError(f"step indices must be 1..T, found {step.index} at position {expected}")

    @classmethod
    def from_templates(cls, templates: Sequence[str]) -> Decomposition:
        steps = tuple(SubQuestion(i, t) for i, t in enumerate(templates, start=1))
        d = cls(steps)
        object.__setattr__(d, "raw_text", serialize_decomposition(d))
        return d

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def templates(self) -> list[str]:
        return [s.template for s in self.steps]


@dataclass(frozen=True)
class FormatVerdict:
    valid: bool
    violations: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "violations", tuple(self.violations))
        if self.valid != (not self.violations):
            raise ValueError("valid must be true exactly when there are no violations")

    @classmethod
    def from_violations(cls, violations: Sequence[str]) -> FormatVerdict:
        return cls(valid=not violations, violations=tuple(violations))

    def to_dict(self) -> dict:
        return {"valid": self.valid, "violations": list(self.violations)}


def parse_decomposition(raw: str) -> Decomposition:
    """Parse model output into a :class:`Decomposition`.

    Only ``### Q<t>:`` lines are read; any other text (preambles, echoed
    headers, trailing commentary) is ignored.
    """
    labelled: list[tuple[int, str]] = []
    for line in raw.splitlines():
        m = _LABEL_LINE.match(line)
        if m:
            labelled.append((int(m.group(1)), m.group(2).strip()))
    if not labelled:
        raise DecompositionError(PARSE_FAIL, "no '### Q<t>:' line found")
    for expected, (label, _) in enumerate(labelled, start=1):
        if label != expected:
            raise DecompositionError(
                BAD_LABEL_SEQUENCE, f"expected label Q{expected}, found Q{label}"
            )
    for label, body in labelled:
        if not body:
            raise DecompositionError(EMPTY_STEP, f"step Q{label} has an empty body")
    steps = tuple(SubQuestion(label, body) for label, body in labelled)
    return Decomposition(steps, raw_text=raw)


def serialize_decomposition(d: Decomposition) -> str:
    return "\n".join(f"### Q{s.index}: {s.template}" for s in d.steps)


def check_format(d: Decomposition | DecompositionError, t_max: int = DEFAULT_T_MAX) -> FormatVerdict:
    """Format reward check.

    A parse error yields ``PARSE_FAIL`` followed by its specific code when
    that code is more precise (e.g. ``BAD_LABEL_SEQUENCE``).
    """
    if isinstance(d, DecompositionError):
        codes = [PARSE_FAIL]
        if d.code != PARSE_FAIL:
            codes.append(d.code)
        return FormatVerdict.from_violations(codes)

    violations: list[str] = []
    for step in d.steps:
        if any(j < 1 or j >= step.index for j in step.references):
            if OUT_OF_RANGE_REF not in violations:
                violations.append(OUT_OF_RANGE_REF)
        if _TEXTUAL_REF.search(step.template) and TEXTUAL_REF not in violations:
            violations.append(TEXTUAL_REF)
    if len(d.steps) > t_max:
        violations.append(TOO_MANY_STEPS)
    return FormatVerdict.from_violations(violations)


def verify_text(raw: str, t_max: int = DEFAULT_T_MAX) -> tuple[Decomposition | None, FormatVerdict]:
    """Parse and check in one go; the decomposition is None on parse failure."""
    try:
        d = parse_decomposition(raw)
    except DecompositionError as err:
        return None, check_format(err, t_max)
    return d, check_format(d, t_max)


def resolve_step(step: SubQuestion, prior_answers: Sequence[str]) -> str:
    """Substitute ``#j`` placeholders with ``prior_answers[j-1]`` in one pass."""

    def substitute(m: re.Match) -> str:
        j = int(m.group(1))
        if j < 1 or j > len(prior_answers):
            raise UnresolvedReferenceError(
                f"step {step.index} references #{j} but only {len(prior_answers)} answers are available"
            )
        return prior_answers[j - 1]

    return PLACEHOLDER.sub(substitute, step.template)
