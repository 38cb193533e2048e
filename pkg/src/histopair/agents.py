"""Caption generation stages and the invertible revision-script algebra.

The generation chain per patch is describe -> revise -> summarize, each
stage a backend call with its own retry semantics. Revisions travel as
scripts of add/delete/modify operations over character spans; every script
has a well-defined inverse, which is what makes revision training pairs
constructible from perturbed descriptions.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .backends import DESCRIBE_TEMPLATE, REFINE_MODE_SPLIT, SHORTEN_INSTRUCTION
from .corpus import (
    DEFAULT_TOKENIZER,
    PairRecord,
    PatchRef,
    SlideRecord,
    count_tokens,
    sentence_spans,
)
from .errors import (
    BackendError,
    DigestMismatch,
    EmptyResponse,
    InputError,
    InvalidScript,
    ShortList,
    TooShort,
)
from .extraction import CandidateSet, PipelineConfig

log = logging.getLogger(__name__)

DEFAULT_MAX_RETRIES = 3

DEFAULT_CONTRADICTION_LEXICON = (
    "No atypical cells are identified",
    "The architecture is entirely preserved",
    "There is no inflammatory component",
    "Nuclei are small and uniform throughout",
    "The stroma is unremarkable",
    "No mitotic figures are seen",
    "The lesion is clearly benign",
    "Margins are free of any abnormality",
)


class Stage(str, Enum):
    DESCRIBE = "describe"
    REVISE = "revise"
    SUMMARIZE = "summarize"
    REFINE_REPORT = "refine_report"
    ATTRIBUTES = "attributes"


class OpKind(str, Enum):
    ADD = "add"
    DELETE = "delete"
    MODIFY = "modify"


@dataclass(frozen=True)
class ReviseOp:
    kind: OpKind
    span_start: int
    span_end: int
    payload: str

    def __post_init__(self):
        if self.span_start < 0 or self.span_start > self.span_end:
            raise InvalidScript(f"bad span [{self.span_start},{self.span_end})")
        if self.kind is OpKind.ADD and self.span_start != self.span_end:
            raise InvalidScript("add op must have zero-width span")
        if self.kind is OpKind.DELETE and self.payload != "":
            raise InvalidScript("delete op must carry no payload")

    def to_json(self) -> dict:
        return {"kind": self.kind.value, "start": self.span_start,
                "end": self.span_end, "payload": self.payload}


def text_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class ReviseScript:
    ops: tuple[ReviseOp, ...]
    source_digest: str

    def __post_init__(self):
        object.__setattr__(self, "ops", tuple(self.ops))
        prev_end = None
        for op in self.ops:
            # zero-width spans may touch a successor's start; real spans may not
            if prev_end is not None and op.span_start < prev_end:
                raise InvalidScript("ops must be non-overlapping and sorted")
            prev_end = op.span_end

    @classmethod
    def from_raw(cls, raw_ops: list[dict], source: str) -> "ReviseScript":
        try:
            ops = tuple(
                ReviseOp(OpKind(o["kind"]), int(o["start"]), int(o["end"]),
                         str(o["payload"]))
                for o in raw_ops
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidScript(f"malformed op: {exc}") from exc
        for op in ops:
            if op.span_end > len(source):
                raise InvalidScript(
                    f"span [{op.span_start},{op.span_end}) exceeds text length {len(source)}")
        return cls(ops=ops, source_digest=text_digest(source))


def apply_script(text: str, script: ReviseScript) -> str:
    """Apply ops right-to-left so earlier offsets stay valid."""
    if text_digest(text) != script.source_digest:
        raise DigestMismatch("script was built for a different text")
    for op in script.ops:
        if op.span_end > len(text):
            raise InvalidScript(
                f"span [{op.span_start},{op.span_end}) exceeds text length {len(text)}")
    out = text
    for op in reversed(script.ops):
        out = out[: op.span_start] + op.payload + out[op.span_end :]
    return out


def invert_script(script: ReviseScript, source: str) -> ReviseScript:
    """Script that maps apply_script(source, script) back to source.

    Additions become deletions of the inserted span, deletions become
    additions of the removed text, and modifications swap payloads; spans
    are re-expressed in the modified text's coordinates.
    """
    modified = apply_script(source, script)  # also validates digest/spans
    inverse: list[ReviseOp] = []
    delta = 0
    for op in script.ops:
        pos = op.span_start + delta
        if op.kind is OpKind.ADD:
            inverse.append(ReviseOp(OpKind.DELETE, pos, pos + len(op.payload), ""))
            delta += len(op.payload)
        elif op.kind is OpKind.DELETE:
            removed = source[op.span_start : op.span_end]
            inverse.append(ReviseOp(OpKind.ADD, pos, pos, removed))
            delta -= op.span_end - op.span_start
        else:
            original = source[op.span_start : op.span_end]
            inverse.append(ReviseOp(OpKind.MODIFY, pos, pos + len(op.payload), original))
            delta += len(op.payload) - (op.span_end - op.span_start)
    return ReviseScript(ops=tuple(inverse), source_digest=text_digest(modified))


def perturb_description(description: str, n_ops: int, seed: int,
                        kinds: list[OpKind] | None = None,
                        lexicon: tuple[str, ...] = DEFAULT_CONTRADICTION_LEXICON,
                        ) -> tuple[str, ReviseScript]:
    """Inject seeded inaccuracies at sentence granularity.

    Draws ``n_ops`` distinct sentences and applies one add/delete/modify to
    each, with payloads from the contradiction lexicon. The forward script
    is returned; its inverse is the correction target.
    """
    if n_ops < 1:
        raise InputError("n_ops must be >= 1")
    units = sentence_spans(description)
    if len(units) < n_ops:
        raise TooShort(
            f"description has {len(units)} sentence units; need >= {n_ops}")
    rng = np.random.default_rng(seed)
    picked = sorted(int(i) for i in rng.choice(len(units), size=n_ops, replace=False))
    if kinds is not None:
        if len(kinds) != n_ops:
            raise InputError("kinds must list one kind per op")
        drawn = list(kinds)
    else:
        all_kinds = [OpKind.ADD, OpKind.DELETE, OpKind.MODIFY]
        drawn = [all_kinds[int(i)] for i in rng.integers(0, 3, size=n_ops)]
    ops: list[ReviseOp] = []
    for i, kind in zip(picked, drawn):
        start, end = units[i]
        territory_end = units[i + 1][0] if i + 1 < len(units) else len(description)
        phrase = lexicon[int(rng.integers(0, len(lexicon)))]
        if kind is OpKind.ADD:
            ops.append(ReviseOp(OpKind.ADD, start, start, phrase + ". "))
        elif kind is OpKind.DELETE:
            ops.append(ReviseOp(OpKind.DELETE, start, territory_end, ""))
        else:
            ops.append(ReviseOp(OpKind.MODIFY, start, end, phrase + "."))
    script = ReviseScript(ops=tuple(ops), source_digest=text_digest(description))
    return apply_script(description, script), script


# --- transcripts -------------------------------------------------------------

@dataclass(frozen=True)
class AgentTranscript:
    stage: Stage
    request_digest: str
    response_digest: str
    attempts: int
    backend: str
    truncated: bool = False


def _record(transcripts, stage: Stage, request, response, attempts: int,
            backend_name: str, truncated: bool = False):
    if transcripts is None:
        return
    req = json.dumps(request, sort_keys=True, ensure_ascii=False, default=str)
    resp = json.dumps(response, sort_keys=True, ensure_ascii=False, default=str)
    transcripts.append(AgentTranscript(
        stage=stage, request_digest=text_digest(req),
        response_digest=text_digest(resp), attempts=attempts,
        backend=backend_name, truncated=truncated))


# --- backend-facing stages ----------------------------------------------------

def describe(patch: PatchRef, organ_source: str, backend,
             template: str = DESCRIBE_TEMPLATE,
             max_retries: int = DEFAULT_MAX_RETRIES,
             transcripts: list | None = None) -> str:
    """Fetch a detailed description; retries empty responses."""
    if not organ_source:
        raise InputError("organ_source must be non-empty")
    prompt = template.replace("{source}", organ_source)
    last_error: BackendError | None = None
    for attempt in range(1, max_retries + 2):
        try:
            text = backend.describe(patch.patch_id, patch.uri, organ_source, prompt)
        except BackendError as exc:
            if exc.permanent:
                raise
            last_error = exc
            continue
        if text:
            _record(transcripts, Stage.DESCRIBE,
                    {"patch_id": patch.patch_id, "source": organ_source,
                     "template": prompt},
                    text, attempt, backend.name)
            return text
    if last_error is not None:
        raise BackendError(f"describe failed after {max_retries + 1} attempts: {last_error}",
                           endpoint="describe", attempts=max_retries + 1)
    raise EmptyResponse(f"describe returned empty text for {patch.patch_id}",
                        endpoint="describe", attempts=max_retries + 1)


def revise(description: str, backend,
           transcripts: list | None = None) -> tuple[str, ReviseScript]:
    """Backend revision plus the validated script mapping old -> new text."""
    if not description:
        raise InputError("description must be non-empty")
    revised_text, raw_ops = backend.revise(description)
    script = ReviseScript.from_raw(raw_ops, description)
    computed = apply_script(description, script)
    if computed != revised_text:
        raise InvalidScript("backend revised text is inconsistent with its ops")
    _record(transcripts, Stage.REVISE, {"text": description},
            {"text": revised_text, "ops": raw_ops}, 1, backend.name)
    return computed, script


def summarize(description: str, budget: int, backend, tokenizer=None,
              max_retries: int = DEFAULT_MAX_RETRIES,
              transcripts: list | None = None) -> str:
    """Summary within the token budget; re-asks, then truncates as last resort."""
    if budget < 1:
        raise InputError("budget must be >= 1")
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    text = description
    out = ""
    attempts = 0
    for attempt in range(1, max_retries + 2):
        attempts = attempt
        out = backend.summarize(text, budget)
        if count_tokens(out, tok) <= budget:
            _record(transcripts, Stage.SUMMARIZE,
                    {"text": text, "max_tokens": budget}, out, attempts,
                    backend.name)
            return out
        text = SHORTEN_INSTRUCTION.replace("{budget}", str(budget)) + description
    truncated = " ".join(tok.tokenize(out)[:budget])
    _record(transcripts, Stage.SUMMARIZE,
            {"text": text, "max_tokens": budget}, truncated, attempts,
            backend.name, truncated=True)
    return truncated


def refine_report(report_raw: str, backend, tokenizer=None,
                  budget: int = 77,
                  transcripts: list | None = None) -> list[str]:
    """Findings sentences, each within the token budget.

    Over-budget sentences go back to the backend for clause-level splitting,
    up to 3 levels deep, then get hard-wrapped at token boundaries.
    """
    if not report_raw:
        raise InputError("report must be non-empty")
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER

    def fit(sentence: str, level: int) -> list[str]:
        if count_tokens(sentence, tok) <= budget:
            return [sentence]
        if level >= 3:
            toks = tok.tokenize(sentence)
            return [" ".join(toks[i : i + budget]) for i in range(0, len(toks), budget)]
        parts = backend.refine_report(sentence, budget, mode=REFINE_MODE_SPLIT)
        parts = [p for p in parts if p.strip()]
        if parts == [sentence]:  # backend found no boundary; force the wrap
            return fit(sentence, 3)
        out: list[str] = []
        for p in parts:
            out.extend(fit(p, level + 1))
        return out

    sentences = backend.refine_report(report_raw, budget)
    _record(transcripts, Stage.REFINE_REPORT,
            {"text": report_raw, "max_tokens": budget}, sentences, 1, backend.name)
    result: list[str] = []
    for s in sentences:
        if s.strip():
            result.extend(fit(s, 0))
    return result


def attribute_prompts(organ_source: str, backend, n: int = 20,
                      cache: dict | None = None,
                      max_retries: int = DEFAULT_MAX_RETRIES,
                      transcripts: list | None = None) -> list[str]:
    """Exactly ``n`` distinct attribute phrases for an organ, cached per run."""
    if not organ_source:
        raise InputError("organ_source must be non-empty")
    if cache is not None and organ_source in cache:
        return list(cache[organ_source])
    seen: list[str] = []
    attempts = 0
    ask = n
    for attempt in range(1, max_retries + 2):
        attempts = attempt
        got = backend.attributes(organ_source, ask)
        for a in got:
            a = a.strip()
            if a and a not in seen:
                seen.append(a)
        if len(seen) >= n:
            result = seen[:n]
            if cache is not None:
                cache[organ_source] = list(result)
            _record(transcripts, Stage.ATTRIBUTES,
                    {"source": organ_source, "n": n}, result, attempts,
                    backend.name)
            return result
        ask = n + (n - len(seen))  # top up with a larger draw
    raise ShortList(
        f"backend produced {len(seen)} distinct attributes for {organ_source!r}, "
        f"need {n}", endpoint="attributes", attempts=attempts)


# --- orchestration ------------------------------------------------------------

class AgentClient:
    """Bundles a raw backend with run-scoped state (cache, transcripts).

    Quacks like a backend for embedding calls, so extraction can take it
    wherever an embedder is expected.
    """

    def __init__(self, backend, tokenizer=None,
                 template: str = DESCRIBE_TEMPLATE,
                 max_retries: int = DEFAULT_MAX_RETRIES):
        self.backend = backend
        self.tokenizer = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
        self.template = template
        self.max_retries = max_retries
        self.transcripts: list[AgentTranscript] = []
        self._attr_cache: dict[str, list[str]] = {}

    @property
    def name(self) -> str:
        return self.backend.name

    def embed_text(self, texts: list[str]) -> np.ndarray:
        return self.backend.embed_text(texts)

    def embed_image(self, patch_ids: list[str], uris: list[str]) -> np.ndarray:
        return self.backend.embed_image(patch_ids, uris)

    def describe(self, patch: PatchRef, organ_source: str) -> str:
        return describe(patch, organ_source, self.backend, template=self.template,
                        max_retries=self.max_retries, transcripts=self.transcripts)

    def revise(self, description: str) -> tuple[str, ReviseScript]:
        return revise(description, self.backend, transcripts=self.transcripts)

    def summarize(self, description: str, budget: int) -> str:
        return summarize(description, budget, self.backend, tokenizer=self.tokenizer,
                         max_retries=self.max_retries, transcripts=self.transcripts)

    def refine_report(self, report_raw: str, budget: int) -> list[str]:
        return refine_report(report_raw, self.backend, tokenizer=self.tokenizer,
                             budget=budget, transcripts=self.transcripts)

    def attribute_prompts(self, organ_source: str, n: int = 20) -> list[str]:
        return attribute_prompts(organ_source, self.backend, n=n,
                                 cache=self._attr_cache,
                                 max_retries=self.max_retries,
                                 transcripts=self.transcripts)


def _meta_from(transcripts: list[AgentTranscript], backend_name: str) -> dict:
    meta: dict[str, dict] = {}
    for t in transcripts:
        entry = {"backend": t.backend, "attempts": t.attempts}
        if t.truncated:
            entry["truncated"] = True
        meta[t.stage.value] = entry
    if not meta:
        meta["backend"] = {"backend": backend_name, "attempts": 0}
    return meta


def orchestrate_slide(cand: CandidateSet, slide: SlideRecord, backends,
                      cfg: PipelineConfig, tokenizer=None) -> list[PairRecord]:
    """Run describe -> revise -> summarize for every kept candidate.

    ``backends`` is an :class:`AgentClient` or a raw backend (wrapped here).
    Entries whose generation fails after retries are dropped and logged;
    nothing is ever fabricated for them.
    """
    if not cand.deduped:
        raise InputError("candidate set must be deduped before orchestration")
    client = backends if isinstance(backends, AgentClient) else AgentClient(
        backends, tokenizer=tokenizer)
    tok = tokenizer if tokenizer is not None else client.tokenizer
    records: list[PairRecord] = []
    for entry in cand.entries:
        mark = len(client.transcripts)
        try:
            desc = client.describe(entry.patch, slide.organ_source)
            revised, _script = client.revise(desc)
            summary = client.summarize(revised, cfg.token_budget)
        except (BackendError, InvalidScript) as exc:
            endpoint = getattr(exc, "endpoint", "") or "agent"
            log.warning("dropping %s: %s stage failed: %s",
                        entry.patch.patch_id, endpoint, exc)
            del client.transcripts[mark:]
            continue
        if not (desc and revised and summary):
            log.warning("dropping %s: a stage produced empty text",
                        entry.patch.patch_id)
            del client.transcripts[mark:]
            continue
        records.append(PairRecord(
            patch=entry.patch,
            selection_route=entry.route,
            description=desc,
            revised=revised,
            summary=summary,
            summary_tokens=count_tokens(summary, tok),
            agent_meta=_meta_from(client.transcripts[mark:], client.name),
        ))
    return records
