"""Data model and manifest I/O for slides, patches, and generated pairs.

File formats are line-delimited JSON (UTF-8):

* slide manifest: optional header line (recognized by a ``schema_version``
  key), then one :class:`SlideRecord` per line;
* pairs output: a mandatory header line carrying ``schema_version`` and
  ``config_digest``, then one :class:`PairRecord` per line.

Serialization is canonical (fixed field order, compact separators) so
re-writing a loaded file reproduces it byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Iterator

from .errors import (
    DuplicateSlideId,
    GridOutOfRange,
    IncompleteRecord,
    ParseError,
)

SCHEMA_VERSION = "1"
RECOGNIZED_SCHEMAS = {"1"}
DEFAULT_TOKEN_BUDGET = 77


class Route(str, Enum):
    """How a patch entered the candidate set. Order encodes merge priority."""

    REPORT_PROMPT = "report_prompt"
    ATTRIBUTE_PROMPT = "attribute_prompt"
    CLUSTER = "cluster"

    @property
    def priority(self) -> int:
        return _ROUTE_PRIORITY[self]


_ROUTE_PRIORITY = {
    Route.REPORT_PROMPT: 0,
    Route.ATTRIBUTE_PROMPT: 1,
    Route.CLUSTER: 2,
}


class WhitespaceTokenizer:
    """Default tokenizer: whitespace-delimited units."""

    name = "whitespace"

    def tokenize(self, text: str) -> list[str]:
        return text.split()

    def count(self, text: str) -> int:
        return len(text.split())


DEFAULT_TOKENIZER = WhitespaceTokenizer()


def count_tokens(text: str, tokenizer=None) -> int:
    """Token count of ``text`` under ``tokenizer`` (whitespace by default)."""
    tok = tokenizer if tokenizer is not None else DEFAULT_TOKENIZER
    return tok.count(text)


def sentence_spans(text: str) -> list[tuple[int, int]]:
    """[start, end) spans of ". "-separated sentences.

    A span's end includes the sentence's own period; the single separator
    space between sentences belongs to neither span.
    """
    spans = []
    start = 0
    for m in re.finditer(r"\. ", text):
        spans.append((start, m.start() + 1))
        start = m.end()
    if start < len(text):
        spans.append((start, len(text)))
    return spans


def stable_digest(text: str, n_hex: int = 16) -> str:
    """First ``n_hex`` hex chars of the SHA-256 of ``text``."""
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:n_hex]


def patch_id_for(slide_id: str, col: int, row: int) -> str:
    # Stable 16-hex-char hash so joins across stages are reproducible.
    return stable_digest(f"{slide_id}:{col}:{row}")


def patch_uri_for(slide_id: str, col: int, row: int) -> str:
    """Opaque locator handed to backends; pixel bytes live outside the pipeline."""
    return f"patch://{slide_id}/{col}/{row}"


@dataclass(frozen=True)
class PatchRef:
    slide_id: str
    col: int
    row: int

    @property
    def patch_id(self) -> str:
        return patch_id_for(self.slide_id, self.col, self.row)

    @property
    def uri(self) -> str:
        return patch_uri_for(self.slide_id, self.col, self.row)


@dataclass(frozen=True)
class SlideRecord:
    slide_id: str
    organ_source: str
    grid_w: int
    grid_h: int
    tile_px: int
    findings: tuple[str, ...] = ()
    report_raw: str | None = None

    def __post_init__(self):
        if self.grid_w < 1 or self.grid_h < 1:
            raise GridOutOfRange(
                f"slide {self.slide_id!r}: grid {self.grid_w}x{self.grid_h} must be >= 1x1"
            )
        if self.tile_px < 1:
            raise GridOutOfRange(f"slide {self.slide_id!r}: tile_px must be positive")
        object.__setattr__(self, "findings", tuple(self.findings))

    @property
    def n_patches(self) -> int:
        return self.grid_w * self.grid_h

    def patch(self, col: int, row: int) -> PatchRef:
        if not (0 <= col < self.grid_w and 0 <= row < self.grid_h):
            raise GridOutOfRange(
                f"slide {self.slide_id!r}: ({col},{row}) outside {self.grid_w}x{self.grid_h}"
            )
        return PatchRef(self.slide_id, col, row)

    def iter_patches(self) -> Iterator[PatchRef]:
        """Row-major enumeration; defines the canonical embedding-row order."""
        for row in range(self.grid_h):
            for col in range(self.grid_w):
                yield PatchRef(self.slide_id, col, row)


@dataclass
class PairRecord:
    patch: PatchRef
    selection_route: Route
    description: str
    revised: str
    summary: str
    summary_tokens: int
    agent_meta: dict[str, dict] = field(default_factory=dict)

    def is_complete(self, token_budget: int = DEFAULT_TOKEN_BUDGET) -> bool:
        return (
            bool(self.description)
            and bool(self.revised)
            and bool(self.summary)
            and 0 <= self.summary_tokens <= token_budget
        )


@dataclass
class DatasetManifest:
    schema_version: str
    slides: list[SlideRecord]
    created_at: str = ""
    config_digest: str = ""

    def __post_init__(self):
        if self.schema_version not in RECOGNIZED_SCHEMAS:
            raise ParseError(f"unrecognized schema_version {self.schema_version!r}")
        seen: set[str] = set()
        for s in self.slides:
            if s.slide_id in seen:
                raise DuplicateSlideId(s.slide_id)
            seen.add(s.slide_id)

    def slide(self, slide_id: str) -> SlideRecord:
        for s in self.slides:
            if s.slide_id == slide_id:
                return s
        raise KeyError(slide_id)


def _dumps(obj: dict) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def _slide_to_json(s: SlideRecord) -> dict:
    d = {
        "slide_id": s.slide_id,
        "organ_source": s.organ_source,
        "grid_w": s.grid_w,
        "grid_h": s.grid_h,
        "tile_px": s.tile_px,
        "findings": list(s.findings),
    }
    if s.report_raw is not None:
        d["report_raw"] = s.report_raw
    return d


def _slide_from_json(d: dict, line_no: int) -> SlideRecord:
    try:
        return SlideRecord(
            slide_id=str(d["slide_id"]),
            organ_source=str(d["organ_source"]),
            grid_w=int(d["grid_w"]),
            grid_h=int(d["grid_h"]),
            tile_px=int(d["tile_px"]),
            findings=tuple(str(x) for x in d.get("findings", [])),
            report_raw=d.get("report_raw"),
        )
    except GridOutOfRange:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad slide record: {exc}", line_no) from exc


def load_manifest(path) -> DatasetManifest:
    """Load a line-delimited slide manifest, checking all record invariants."""
    slides: list[SlideRecord] = []
    header: dict = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", line_no) from exc
            if not isinstance(obj, dict):
                raise ParseError("record is not an object", line_no)
            if line_no == 1 and "schema_version" in obj and "slide_id" not in obj:
                header = obj
                continue
            slides.append(_slide_from_json(obj, line_no))
    return DatasetManifest(
        schema_version=str(header.get("schema_version", SCHEMA_VERSION)),
        slides=slides,
        created_at=str(header.get("created_at", "")),
        config_digest=str(header.get("config_digest", "")),
    )


def write_manifest(manifest: DatasetManifest, path) -> int:
    """Write a manifest with a header line; returns the slide count."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps({
            "schema_version": manifest.schema_version,
            "created_at": manifest.created_at,
            "config_digest": manifest.config_digest,
        }) + "\n")
        for s in manifest.slides:
            fh.write(_dumps(_slide_to_json(s)) + "\n")
    return len(manifest.slides)


# --- pairs ------------------------------------------------------------------

def pair_to_json(r: PairRecord) -> dict:
    return {
        "patch_id": r.patch.patch_id,
        "slide_id": r.patch.slide_id,
        "col": r.patch.col,
        "row": r.patch.row,
        "selection_route": r.selection_route.value,
        "description": r.description,
        "revised": r.revised,
        "summary": r.summary,
        "summary_tokens": r.summary_tokens,
        "agent_meta": r.agent_meta,
    }


def pair_from_json(d: dict, line_no: int = 0) -> PairRecord:
    try:
        rec = PairRecord(
            patch=PatchRef(str(d["slide_id"]), int(d["col"]), int(d["row"])),
            selection_route=Route(d["selection_route"]),
            description=str(d["description"]),
            revised=str(d["revised"]),
            summary=str(d["summary"]),
            summary_tokens=int(d["summary_tokens"]),
            agent_meta=dict(d.get("agent_meta", {})),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"bad pair record: {exc}", line_no) from exc
    if rec.patch.patch_id != d["patch_id"]:
        raise ParseError("patch_id does not match (slide_id, col, row)", line_no)
    return rec


def pairs_header(config_digest: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "config_digest": config_digest}


def write_pairs(records: Iterable[PairRecord], path, config_digest: str = "",
                token_budget: int = DEFAULT_TOKEN_BUDGET) -> int:
    """Write completed pair records; rejects incomplete ones. Returns count."""
    records = list(records)
    for i, r in enumerate(records):
        if not r.is_complete(token_budget):
            raise IncompleteRecord(f"record {i} ({r.patch.patch_id}) is incomplete")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_dumps(pairs_header(config_digest)) + "\n")
        for r in records:
            fh.write(_dumps(pair_to_json(r)) + "\n")
    return len(records)


def load_pairs(path) -> tuple[dict, list[PairRecord]]:
    """Read a pairs file; returns (header, records).

    A trailing line that fails to parse is ignored (interrupted writes leave
    at most one partial last line).
    """
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError("pairs file is empty (missing header)", 1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid header: {exc.msg}", 1) from exc
    if not isinstance(header, dict) or "schema_version" not in header:
        raise ParseError("first line is not a pairs header", 1)
    if str(header["schema_version"]) not in RECOGNIZED_SCHEMAS:
        raise ParseError(f"unrecognized schema_version {header['schema_version']!r}", 1)
    records: list[PairRecord] = []
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            records.append(pair_from_json(obj, line_no))
        except (json.JSONDecodeError, ParseError):
            if line_no == len(lines):  # partial trailing write; drop it
                break
            raise
    return header, records
