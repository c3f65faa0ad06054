"""Prompt templates for the learner and optimizer roles, and reply parsing.

The learner template asks the vision-language model for a binary verdict on a
set of frames while reflecting on the guiding questions. The optimizer
template shows the model a batch of frames, the learner's predictions and the
video-level targets, and asks for a rewritten numbered list of questions.

Templates are plain text files with ``[[Section Name]]`` markers so they can be
edited without touching code. Section headings in the rendered prompt are
emitted by the renderer, not the template, so parsers downstream (including
the simulated backend) can rely on them.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

IMAGE_PLACEHOLDER = "<image>"
DEFAULT_QUESTION_BUDGET = 500

LEARNER_SECTIONS = ("Model Description", "Prompt Questions", "Input", "Output Formatting")
OPTIMIZER_SECTIONS = (
    "Instruction",
    "Inputs",
    "Model Description",
    "Current Prompt Questions",
    "Model Predictions & Targets",
    "Optimization Instruction",
)


class ParseFailure(ValueError):
    """The model reply did not contain the expected structure."""


class WrongCount(ParseFailure):
    """A numbered question list was found but had the wrong length."""

    def __init__(self, count: int, expected: int):
        super().__init__(f"expected {expected} questions, found {count}")
        self.count = count
        self.expected = expected


@dataclass(frozen=True)
class QuestionSet:
    """Ordered guiding questions plus where they came from.

    ``iteration`` is the training iteration that produced the set (0 for a
    hand-written initialisation) and ``val_accuracy`` the validation accuracy
    measured for it, if any.
    """

    questions: tuple
    iteration: int = 0
    val_accuracy: Optional[float] = None
    budget: int = field(default=DEFAULT_QUESTION_BUDGET, compare=False, repr=False)

    def __post_init__(self):
        qs = tuple(str(q).strip() for q in self.questions)
        object.__setattr__(self, "questions", qs)
        if not qs:
            raise ValueError("a question set needs at least one question")
        if any(not q for q in qs):
            raise ValueError("questions must be non-empty")
        too_long = [q for q in qs if len(q) > self.budget]
        if too_long:
            raise ValueError(f"question exceeds {self.budget} characters: {too_long[0][:60]!r}...")
        if len(set(qs)) != len(qs):
            raise ValueError("questions must be distinct")
        if self.iteration < 0:
            raise ValueError("iteration must be non-negative")
        if self.val_accuracy is not None and not 0.0 <= self.val_accuracy <= 1.0:
            raise ValueError("val_accuracy must lie in [0, 1]")

    @property
    def m(self) -> int:
        return len(self.questions)

    def with_accuracy(self, accuracy: float) -> "QuestionSet":
        return replace(self, val_accuracy=float(accuracy))

    def numbered(self) -> str:
        return "\n".join(f"{i}. {q}" for i, q in enumerate(self.questions, start=1))


@dataclass(frozen=True)
class LearnerTemplate:
    model_description: str
    prompt_questions_header: str
    output_formatting: str

    def __post_init__(self):
        for name in ("model_description", "prompt_questions_header", "output_formatting"):
            if not getattr(self, name).strip():
                raise ValueError(f"learner template section {name!r} is empty")
        if "answer:" not in self.output_formatting.lower():
            raise ValueError("output formatting must demand an 'Answer: <0|1>' verdict token")


@dataclass(frozen=True)
class OptimizerTemplate:
    instruction: str
    model_description: str
    optimization_instruction: str

    def __post_init__(self):
        for name in ("instruction", "model_description", "optimization_instruction"):
            if not getattr(self, name).strip():
                raise ValueError(f"optimizer template section {name!r} is empty")
        if "{m}" not in self.optimization_instruction:
            raise ValueError("optimization instruction must contain the {m} placeholder")


# ---------------------------------------------------------------------------
# Preset files
# ---------------------------------------------------------------------------

_SECTION_RE = re.compile(r"^\[\[(.+?)\]\]\s*$", re.MULTILINE)


def parse_sections(text: str) -> dict:
    """Split ``[[Name]]``-delimited text into a ``{name: body}`` mapping."""
    matches = list(_SECTION_RE.finditer(text))
    if not matches:
        raise ValueError("template text has no [[Section]] markers")
    sections = {}
    for i, m in enumerate(matches):
        end = matches[i + 1].start() if i + 1 < len(matches) else len(text)
        sections[m.group(1).strip()] = text[m.end():end].strip()
    return sections


def _read_preset(name: str) -> str:
    return resources.files("vera.presets").joinpath(name).read_text(encoding="utf-8")


def load_learner_template(path=None) -> LearnerTemplate:
    text = Path(path).read_text(encoding="utf-8") if path else _read_preset("learner_template.txt")
    s = parse_sections(text)
    try:
        return LearnerTemplate(s["Model Description"], s["Prompt Questions"], s["Output Formatting"])
    except KeyError as exc:
        raise ValueError(f"learner template is missing section {exc}") from None


def load_optimizer_template(path=None) -> OptimizerTemplate:
    text = Path(path).read_text(encoding="utf-8") if path else _read_preset("optimizer_template.txt")
    s = parse_sections(text)
    try:
        return OptimizerTemplate(s["Instruction"], s["Model Description"], s["Optimization Instruction"])
    except KeyError as exc:
        raise ValueError(f"optimizer template is missing section {exc}") from None


def load_preset_questions(name: str) -> QuestionSet:
    """Load a shipped question preset: ``"initial"`` or ``"ucf_crime"``."""
    from .manifest import read_question_set_text

    files = {"initial": "questions_initial.json", "ucf_crime": "questions_ucf_crime.json"}
    if name not in files:
        raise KeyError(f"unknown question preset {name!r}; choose from {sorted(files)}")
    return read_question_set_text(_read_preset(files[name]))


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

EXPLANATION_REQUEST = (
    "Also provide an explanation in one sentence on a separate line starting with "
    "'Explanation:'."
)


def _section(title: str, body: str) -> str:
    return f"## {title}\n{body.strip()}\n"


def render_learner_prompt(
    template: LearnerTemplate,
    q: QuestionSet,
    n_images: int = 8,
    explain: bool = False,
) -> str:
    """Render the learner prompt with ``q`` numbered in the questions section.

    Parameters
    ----------
    template : LearnerTemplate
        Section texts.
    q : QuestionSet
        Guiding questions inserted in the "Prompt Questions" section.
    n_images : int
        Number of image placeholders emitted in the "Input" section.
    explain : bool
        Append the one-sentence explanation request used at inference time.
    """
    output = template.output_formatting
    if explain:
        output = f"{output.rstrip()}\n{EXPLANATION_REQUEST}"
    parts = [
        _section("Model Description", template.model_description),
        _section("Prompt Questions", f"{template.prompt_questions_header.strip()}\n{q.numbered()}"),
        _section("Input", " ".join([IMAGE_PLACEHOLDER] * n_images)),
        _section("Output Formatting", output),
    ]
    return "\n".join(parts)


def render_optimizer_prompt(
    template: OptimizerTemplate,
    q: QuestionSet,
    preds: Sequence[int],
    targets: Sequence[int],
    m: Optional[int] = None,
    images_per_video: int = 8,
) -> str:
    """Render the optimizer prompt for one mini-batch.

    ``m`` is the number of questions requested back; it defaults to the size
    of ``q``.
    """
    preds = [int(p) for p in preds]
    targets = [int(y) for y in targets]
    if len(preds) != len(targets):
        raise ValueError(f"preds and targets differ in length ({len(preds)} vs {len(targets)})")
    m = q.m if m is None else m
    inputs = "\n".join(
        f"Video {j}: " + " ".join([IMAGE_PLACEHOLDER] * images_per_video)
        for j in range(1, len(preds) + 1)
    )
    pairs = "\n".join(
        f"Video {j}: prediction = {p}, target = {y}"
        for j, (p, y) in enumerate(zip(preds, targets), start=1)
    )
    parts = [
        _section("Instruction", template.instruction),
        _section("Inputs", inputs),
        _section("Model Description", template.model_description),
        _section("Current Prompt Questions", q.numbered()),
        _section("Model Predictions & Targets", pairs),
        _section("Optimization Instruction", template.optimization_instruction.replace("{m}", str(m))),
    ]
    return "\n".join(parts)


def split_rendered_sections(prompt: str) -> dict:
    """Inverse of the renderer's ``## Title`` layout (used by the simulator)."""
    out = {}
    current = None
    for line in prompt.splitlines():
        if line.startswith("## "):
            current = line[3:].strip()
            out[current] = []
        elif current is not None:
            out[current].append(line)
    return {k: "\n".join(v).strip() for k, v in out.items()}


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------

_VERDICT_RE = re.compile(
    r"""
    answer\s*[:=]\s*\**\s*(?P<answer>[01])\b
    | anomaly\s*[:=]\s*\**\s*(?P<anomaly>yes|no)\b
    | ^[ \t*\[(]*(?P<bare>[01])[ \t*\]).]*$
    """,
    re.IGNORECASE | re.MULTILINE | re.VERBOSE,
)


def parse_binary_verdict(reply: str) -> int:
    """Extract the 0/1 verdict from a learner reply.

    Accepted forms are ``Answer: 0|1``, ``Anomaly: yes|no`` and a line holding
    only ``0`` or ``1``. The last occurrence wins so that reasoning that
    precedes the final answer is ignored.
    """
    last = None
    for m in _VERDICT_RE.finditer(reply or ""):
        last = m
    if last is None:
        raise ParseFailure("no verdict token in reply")
    if last.group("answer") is not None:
        return int(last.group("answer"))
    if last.group("anomaly") is not None:
        return 1 if last.group("anomaly").lower() == "yes" else 0
    return int(last.group("bare"))


_EXPLANATION_RE = re.compile(r"explanation\s*:\s*(.+)", re.IGNORECASE)


def parse_explanation(reply: str) -> str:
    """Return the explanation sentence, or an empty string if absent."""
    found = _EXPLANATION_RE.findall(reply or "")
    return found[-1].strip() if found else ""


_NUMBERED_RE = re.compile(r"^\s*(?:\*\*)?(\d+)\s*[.)]\s*(?:\*\*)?\s*(.+?)\s*$")


def extract_numbered_list(reply: str) -> list:
    """Return the last run of lines numbered ``1.``, ``2.``, ... in ``reply``."""
    runs = []
    current = []
    for line in (reply or "").splitlines():
        m = _NUMBERED_RE.match(line)
        if not m:
            continue
        num, text = int(m.group(1)), m.group(2).strip()
        if num == 1:
            if current:
                runs.append(current)
            current = [text]
        elif current and num == len(current) + 1:
            current.append(text)
        else:
            if current:
                runs.append(current)
            current = []
    if current:
        runs.append(current)
    return runs[-1] if runs else []


def parse_question_set(
    reply: str,
    expected_m: int,
    iteration: int = 0,
    budget: int = DEFAULT_QUESTION_BUDGET,
) -> QuestionSet:
    """Parse an optimizer reply into a :class:`QuestionSet` of ``expected_m`` items."""
    items = extract_numbered_list(reply)
    if not items:
        raise ParseFailure("no numbered question list in reply")
    if len(items) != expected_m:
        raise WrongCount(len(items), expected_m)
    try:
        return QuestionSet(tuple(items), iteration=iteration, budget=budget)
    except ValueError as exc:
        raise ParseFailure(str(exc)) from exc
