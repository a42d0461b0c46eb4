"""Prompt composition and answer parsing for the LLM re-ranker.

A prompt is a fixed-order sequence of titled sections (recent visit,
history, relational links, candidates, instruction). Ablation flags gate
the evidence sections independently so incremental configurations can be
compared. Answers are parsed leniently back into a full permutation of the
candidate codes.
"""
from __future__ import annotations

from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ehr import Ontology, PredictionInstance
from .evidence import (
    UNMAPPED_GROUP,
    CandidateSet,
    PrioritizedHistory,
    RelationalEvidence,
)

TASKS = ("overall", "novel")
STRATEGIES = ("evidence", "plain", "cot", "sc")

SC_SAMPLES = 3
SC_TEMPERATURE = 0.7

DEFAULT_MAX_PROMPT_CHARS = 16000

HISTORY_TITLE_PRIORITIZED = "Patient Historical Diagnoses (Prioritized)"
HISTORY_TITLE_RAW = "Patient Historical Diagnoses"
RELATIONS_TITLE = "Relational Evidence Support"
CANDIDATES_TITLE_NOVEL = "Candidate CCS Codes (Novel Only)"
CANDIDATES_TITLE_OVERALL = "Candidate CCS Codes"
COT_LINE = "- Think step by step before the Answer line."

# Containment matching ignores fragments shorter than this.
MIN_CONTAINMENT_LEN = 4


class PromptError(ValueError):
    """Raised for inconsistent prompt inputs or bad templates."""


@dataclass(frozen=True)
class AblationFlags:
    """Which evidence mechanisms are active. `candidates` is consumed by the
    pipeline (top-K set vs full vocabulary); the other two gate sections
    here."""

    candidates: bool = True
    prioritization: bool = True
    relations: bool = True

    @classmethod
    def for_stage(cls, stage: str) -> AblationFlags:
        try:
            level = ABLATION_STAGES.index(stage)
        except ValueError:
            raise PromptError(f"unknown ablation stage {stage!r}") from None
        return cls(
            candidates=level >= 1, prioritization=level >= 2, relations=level >= 3
        )


ABLATION_STAGES = ("base", "candidate", "prioritization", "relational")


@dataclass(frozen=True)
class PromptOptions:
    task: str = "overall"
    strategy: str = "evidence"
    flags: AblationFlags = AblationFlags()
    template_text: str | None = None
    max_chars: int = DEFAULT_MAX_PROMPT_CHARS

    def __post_init__(self):
        if self.task not in TASKS:
            raise PromptError(f"unknown task {self.task!r}")
        if self.strategy not in STRATEGIES:
            raise PromptError(f"unknown strategy {self.strategy!r}")
        if self.max_chars < 1:
            raise PromptError("max_chars must be positive")

    @property
    def effective_flags(self) -> AblationFlags:
        if self.strategy == "plain":
            return AblationFlags(candidates=False, prioritization=False,
                                 relations=False)
        return self.flags


@dataclass(frozen=True)
class PromptSpec:
    """A composed prompt before rendering: ordered titled sections plus the
    parsing-relevant context."""

    task: str
    strategy: str
    sections: tuple[tuple[str, str], ...]
    candidate_names: tuple[str, ...]
    days_since_last_visit: int


@dataclass(frozen=True)
class ParsedPrediction:
    ranked: tuple[str, ...]
    matched_count: int
    raw_text: str

    def __post_init__(self):
        object.__setattr__(self, "ranked", tuple(self.ranked))
        if len(set(self.ranked)) != len(self.ranked):
            raise PromptError("duplicate codes in parsed ranking")


def load_template(path: str | Path | None = None) -> str:
    """Read a prompt template, stripping '#' comment lines. With no path the
    packaged default is used."""
    if path is None:
        text = (resources.files("dxrank") / "prompt_template.txt").read_text(
            encoding="utf-8"
        )
    else:
        text = Path(path).read_text(encoding="utf-8")
    kept = [ln for ln in text.splitlines() if not ln.startswith("#")]
    return "\n".join(kept)


def _quote_join(names: Iterable[str]) -> str:
    return ", ".join(f'"{n}"' for n in names)


def _render_group(icd_names: Sequence[str], ccs_name: str) -> str:
    inner = ", ".join(f'"{n}"' for n in icd_names)
    return f'[{{{inner}}} BELONG TO "{ccs_name}"]'


def build_prompt_spec(
    instance: PredictionInstance,
    prioritized: PrioritizedHistory,
    relations: RelationalEvidence,
    candidates: CandidateSet,
    ontology: Ontology,
    options: PromptOptions = PromptOptions(),
) -> PromptSpec:
    """Assemble the ordered sections for one instance.

    The novel task requires novel-mode candidates (and vice versa); history
    is rendered grouped and logit-ordered only when prioritization is on.
    """
    flags = options.effective_flags
    want_mode = "novel" if options.task == "novel" else "overall"
    if candidates.mode != want_mode:
        raise PromptError(
            f"task {options.task!r} given {candidates.mode!r}-mode candidates"
        )

    sections: list[tuple[str, str]] = []
    if options.task == "novel":
        last = instance.input_visits[-1]
        title = f"Last Diagnostic Visit ({instance.days_to_target} days ago)"
        sections.append((title, _quote_join(ontology.icd_name(i) for i in last.icd)))

    if flags.prioritization:
        groups = [
            _render_group(
                [ontology.icd_name(i) for i in g.icds],
                g.ccs if g.ccs == UNMAPPED_GROUP else ontology.ccs_name(g.ccs),
            )
            for g in prioritized.groups
        ]
        sections.append((HISTORY_TITLE_PRIORITIZED, ", ".join(groups)))
    else:
        names = [ontology.ccs_name(c) for c in sorted(instance.history_ccs)]
        sections.append((HISTORY_TITLE_RAW, _quote_join(names)))

    if flags.relations:
        lines = [
            f'"{ontology.ccs_name(link.history_ccs)}" ⇒ "{ontology.ccs_name(link.candidate_ccs)}"'
            for link in relations.links
        ]
        sections.append((RELATIONS_TITLE, "\n".join(lines) if lines else "None"))

    cand_title = (
        CANDIDATES_TITLE_NOVEL if options.task == "novel" else CANDIDATES_TITLE_OVERALL
    )
    candidate_names = tuple(ontology.ccs_name(c) for c in candidates.codes)
    sections.append((cand_title, _quote_join(candidate_names)))

    return PromptSpec(
        task=options.task,
        strategy=options.strategy,
        sections=tuple(sections),
        candidate_names=candidate_names,
        days_since_last_visit=instance.days_to_target,
    )


def _render(spec: PromptSpec, template: str, cot: bool) -> str:
    values = {
        "last_visit_section": "",
        "history_section": "",
        "relations_section": "",
        "candidates_section": "",
        "cot_line": f"\n{COT_LINE}" if cot else "",
    }
    for title, body in spec.sections:
        block = f"{title}:\n{body}\n\n"
        if title.startswith("Last Diagnostic Visit"):
            values["last_visit_section"] = block
        elif title.startswith(RELATIONS_TITLE):
            values["relations_section"] = block
        elif title.startswith(HISTORY_TITLE_RAW):
            values["history_section"] = block
        else:
            values["candidates_section"] = block
    try:
        return template.format(**values)
    except (KeyError, IndexError, ValueError) as exc:
        raise PromptError(f"bad template: {exc}") from None


def compose_prompt(
    instance: PredictionInstance,
    prioritized: PrioritizedHistory,
    relations: RelationalEvidence,
    candidates: CandidateSet,
    ontology: Ontology,
    options: PromptOptions = PromptOptions(),
) -> str:
    """Render the full prompt text. If it exceeds options.max_chars, history
    groups are dropped from the tail until it fits (the history section is
    the only unbounded part)."""
    spec = build_prompt_spec(
        instance, prioritized, relations, candidates, ontology, options
    )
    template = (
        options.template_text if options.template_text is not None else load_template()
    )
    cot = options.strategy == "cot"
    text = _render(spec, template, cot)
    groups = prioritized.groups
    while len(text) > options.max_chars and groups:
        groups = groups[:-1]
        spec = build_prompt_spec(
            instance,
            PrioritizedHistory(groups=groups),
            relations,
            candidates,
            ontology,
            options,
        )
        text = _render(spec, template, cot)
    return text


# ---------------------------------------------------------------------------
# Answer parsing
# ---------------------------------------------------------------------------


def _normalize(token: str) -> str:
    return token.strip().strip("\"'").strip().rstrip(".").casefold()


def _match_token(
    norm: str, names: Sequence[str], folded: Sequence[str]
) -> int | None:
    """Resolve one answer token to a candidate index, or None."""
    if not norm:
        return None
    for i, f in enumerate(folded):
        if norm == f:
            return i
    # Name contained in the token: prefer the longest (most specific) name.
    best: int | None = None
    for i, f in enumerate(folded):
        if len(f) >= MIN_CONTAINMENT_LEN and f in norm:
            if best is None or len(f) > len(folded[best]):
                best = i
    if best is not None:
        return best
    # Token contained in a name: prefer the shortest enclosing name.
    if len(norm) >= MIN_CONTAINMENT_LEN:
        enclosing = [i for i, f in enumerate(folded) if norm in f]
        if enclosing:
            return min(enclosing, key=lambda i: (len(folded[i]), i))
    return None


def parse_answer(
    text: str,
    candidates: CandidateSet,
    ccs_names: Mapping[str, str] | None = None,
) -> ParsedPrediction:
    """Parse a model reply into a full ranking of the candidate codes.

    The last line starting with "answer:" (any case) wins; its comma-split
    tokens are matched to candidate names exactly, then by containment.
    Without an answer line, candidate names are collected from the whole
    text in order of first mention. Unmentioned candidates are backfilled
    in candidate (logit) order.
    """
    if not candidates.entries:
        raise PromptError("cannot parse against an empty candidate set")
    codes = candidates.codes
    names = [ccs_names.get(c, c) if ccs_names else c for c in codes]
    folded = [n.casefold() for n in names]

    answer_body: str | None = None
    for line in text.splitlines():
        stripped = line.strip()
        if stripped.casefold().startswith("answer:"):
            answer_body = stripped[len("answer:"):]

    matched: list[int] = []
    if answer_body is not None:
        for token in answer_body.split(","):
            idx = _match_token(_normalize(token), names, folded)
            if idx is not None and idx not in matched:
                matched.append(idx)
    else:
        hay = text.casefold()
        hits = []
        for i, f in enumerate(folded):
            pos = hay.find(f)
            if pos >= 0:
                hits.append((pos, -len(f), i))
        matched = [i for _, _, i in sorted(hits)]

    ranked = [codes[i] for i in matched]
    ranked.extend(c for c in codes if c not in set(ranked))
    return ParsedPrediction(
        ranked=tuple(ranked), matched_count=len(matched), raw_text=text
    )


def sc_aggregate(rankings: Sequence[ParsedPrediction]) -> ParsedPrediction:
    """Borda fusion of several rankings over one candidate set: score each
    code by summed (K - position), break ties by mean position then code id."""
    if not rankings:
        raise PromptError("no rankings to aggregate")
    base = set(rankings[0].ranked)
    for r in rankings[1:]:
        if set(r.ranked) != base:
            raise PromptError("rankings cover different candidate sets")
    k = len(rankings[0].ranked)
    score: dict[str, int] = {c: 0 for c in base}
    positions: dict[str, list[int]] = {c: [] for c in base}
    for r in rankings:
        for pos, c in enumerate(r.ranked):
            score[c] += k - pos
            positions[c].append(pos)
    fused = sorted(
        base,
        key=lambda c: (-score[c], sum(positions[c]) / len(positions[c]), c),
    )
    mean_matched = sum(r.matched_count for r in rankings) / len(rankings)
    return ParsedPrediction(
        ranked=tuple(fused),
        matched_count=int(round(mean_matched)),
        raw_text="\n---\n".join(r.raw_text for r in rankings),
    )
