"""Backend wire protocol: deterministic mock and HTTP client.

Request/response bodies are JSON over HTTP. Core endpoints:

    POST /embed_text    {texts:[...]}                          -> {vectors:[[f32;d],...], d}
    POST /embed_image   {patch_ids:[...], uris:[...]}          -> {vectors:[[f32;d],...], d}
    POST /describe      {patch_id, uri, source, template}      -> {text}
    POST /revise        {text}                                 -> {text, ops:[{kind,start,end,payload}]}
    POST /summarize     {text, max_tokens}                     -> {text}

Auxiliary endpoints used by report refinement and attribute generation:

    POST /refine_report {text, max_tokens, mode}               -> {sentences:[...]}
    POST /attributes    {source, n}                            -> {attributes:[...]}

Status 200 on success; 4xx is permanent (no retry); 5xx/timeout is retryable
with jittered exponential backoff. The mock backend is a pure function of
(endpoint, request body, seed), so pipeline output is reproducible without
any model weights.
"""

from __future__ import annotations

import hashlib
import json
import random
import re
import threading
import time
from dataclasses import dataclass

import numpy as np
import requests

from .corpus import sentence_spans
from .errors import BackendError

DEFAULT_MOCK_DIM = 64

DESCRIBE_TEMPLATE = "This is a histopathology image from {source}, describe this image in detail"
SHORTEN_INSTRUCTION = "Summarize in at most {budget} tokens: "
REFINE_MODE_REFINE = "refine"
REFINE_MODE_SPLIT = "split"


@dataclass(frozen=True)
class BackendEndpoint:
    name: str
    base_url: str
    timeout_ms: int = 30_000
    max_retries: int = 3
    max_in_flight: int = 8

    def __post_init__(self):
        if self.max_retries < 0:
            raise ValueError("max_retries must be >= 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def _canon(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True, separators=(",", ":"))


def hash_seed(*parts) -> int:
    """Stable 64-bit seed from string parts (for np.random.default_rng)."""
    h = hashlib.sha256(":".join(str(p) for p in parts).encode("utf-8")).digest()
    return int.from_bytes(h[:8], "little")


def _unit_vector(rng: np.random.Generator, d: int) -> list[float]:
    v = rng.standard_normal(d)
    v /= np.linalg.norm(v)
    return [float(x) for x in v.astype(np.float32)]


_WORD_BANK = [
    "tumor", "cells", "nuclei", "stroma", "glandular", "epithelium", "mitotic",
    "figures", "chromatin", "eosinophilic", "cytoplasm", "infiltrate",
    "lymphocytes", "necrosis", "fibrosis", "hyperchromatic", "pleomorphic",
    "architecture", "ducts", "vessels", "keratin", "mucin", "atypia",
    "invasion", "margins", "papillary", "solid", "cribriform", "desmoplastic",
    "reaction", "inflammatory", "plasma", "macrophages", "hemorrhage",
    "calcification", "dysplasia", "carcinoma", "benign", "malignant",
    "moderately", "poorly", "differentiated", "arranged", "irregular",
    "prominent", "nucleoli", "vacuolated", "spindle", "sheets", "nests",
]

_ATTRIBUTE_BANK = [
    "enlarged nuclei", "lymphocyte infiltration", "nuclear pleomorphism",
    "prominent nucleoli", "high mitotic activity", "glandular architecture",
    "desmoplastic stroma", "tumor necrosis", "hyperchromatic nuclei",
    "irregular nuclear membranes", "increased nuclear-to-cytoplasmic ratio",
    "cribriform growth pattern", "papillary structures", "signet ring cells",
    "mucin production", "keratin pearls", "vascular invasion",
    "perineural invasion", "apoptotic bodies", "spindle cell morphology",
    "clear cell change", "granular eosinophilic cytoplasm",
    "lymphovascular emboli", "tumor budding", "stromal fibrosis",
    "chronic inflammation", "giant multinucleated cells", "microcalcifications",
    "loss of polarity", "dense chromatin clumping", "atypical mitoses",
    "solid sheet-like growth",
]

_CONTRADICTION_BANK = [
    "No atypical cells are identified in this field",
    "The tissue architecture appears entirely unremarkable",
    "There is no evidence of inflammatory infiltrate",
    "Nuclei are uniformly small and regular",
    "The stroma shows no desmoplastic reaction",
    "Mitotic figures are absent throughout",
]


def _apply_raw_ops(text: str, ops: list[dict]) -> str:
    # ops sorted by start; apply right-to-left so earlier offsets stay valid
    out = text
    for op in sorted(ops, key=lambda o: o["start"], reverse=True):
        start, end = op["start"], op["end"]
        out = out[:start] + op["payload"] + out[end:]
    return out


@dataclass
class FaultConfig:
    """Deterministic fault injection knobs for the mock backend."""

    describe_permanent_fail_rate: float = 0.0
    describe_empty_attempts: int = 0
    summarize_overlong_attempts: int = 0


class MockBackend:
    """Deterministic stand-in for every agent/encoder role.

    Responses are pure functions of (endpoint, request body, seed); embeddings
    are seeded unit vectors derived from the request hash. ``calls`` records
    (endpoint, body) for tests.
    """

    def __init__(self, seed: int = 0, d: int = DEFAULT_MOCK_DIM,
                 faults: FaultConfig | None = None):
        self.seed = seed
        self.d = d
        self.faults = faults or FaultConfig()
        self.name = f"mock-{seed}"
        self.calls: list[tuple[str, dict]] = []
        self._attempt_counts: dict[str, int] = {}

    # -- internals ----------------------------------------------------------

    def _rng(self, endpoint: str, body: dict) -> np.random.Generator:
        return np.random.default_rng(hash_seed("mock", self.seed, endpoint, _canon(body)))

    def _log(self, endpoint: str, body: dict):
        self.calls.append((endpoint, body))

    def _bump(self, key: str) -> int:
        n = self._attempt_counts.get(key, 0) + 1
        self._attempt_counts[key] = n
        return n

    def _text(self, rng: np.random.Generator, n_sentences: int,
              lead: str = "") -> str:
        sentences = []
        for _ in range(n_sentences):
            k = int(rng.integers(7, 13))
            words = [_WORD_BANK[int(i)] for i in rng.integers(0, len(_WORD_BANK), k)]
            words[0] = words[0].capitalize()
            sentences.append(" ".join(words))
        body = ". ".join(sentences) + "."
        return (lead + " " + body) if lead else body

    # -- wire endpoints -------------------------------------------------------

    def embed_text(self, texts: list[str]) -> np.ndarray:
        self._log("embed_text", {"texts": list(texts)})
        vecs = [_unit_vector(self._rng("embed_text", {"text": t}), self.d) for t in texts]
        return np.asarray(vecs, dtype=np.float32)

    def embed_image(self, patch_ids: list[str], uris: list[str]) -> np.ndarray:
        self._log("embed_image", {"patch_ids": list(patch_ids), "uris": list(uris)})
        vecs = [_unit_vector(self._rng("embed_image", {"uri": u}), self.d) for u in uris]
        return np.asarray(vecs, dtype=np.float32)

    def describe(self, patch_id: str, uri: str, source: str, template: str) -> str:
        body = {"patch_id": patch_id, "uri": uri, "source": source, "template": template}
        self._log("describe", body)
        rng = self._rng("describe", body)
        if self.faults.describe_permanent_fail_rate > 0.0:
            gate = np.random.default_rng(hash_seed("mock-fault", self.seed, patch_id))
            if gate.random() < self.faults.describe_permanent_fail_rate:
                raise BackendError(f"describe failed for {patch_id}",
                                   endpoint="describe", permanent=True)
        if self.faults.describe_empty_attempts > 0:
            if self._bump(f"describe:{patch_id}") <= self.faults.describe_empty_attempts:
                return ""
        lead = f"This histopathology image from {source} (patch {patch_id}) shows"
        return self._text(rng, int(rng.integers(9, 15)), lead=lead)

    def revise(self, text: str) -> tuple[str, list[dict]]:
        body = {"text": text}
        self._log("revise", body)
        rng = self._rng("revise", body)
        action = int(rng.integers(0, 4))
        ops: list[dict] = []
        spans = sentence_spans(text)
        if action == 3 and len(spans) < 2:
            action = 1
        if action == 1:  # modify one word
            tokens = list(re.finditer(r"\S+", text))
            if tokens:
                t = tokens[int(rng.integers(0, len(tokens)))]
                ops = [{"kind": "modify", "start": t.start(), "end": t.end(),
                        "payload": _WORD_BANK[int(rng.integers(0, len(_WORD_BANK)))]}]
        elif action == 2:  # append a corrective note
            note = " " + _CONTRADICTION_BANK[int(rng.integers(0, len(_CONTRADICTION_BANK)))] + "."
            ops = [{"kind": "add", "start": len(text), "end": len(text), "payload": note}]
        elif action == 3:  # drop one sentence
            i = int(rng.integers(0, len(spans)))
            start, end = spans[i]
            if i < len(spans) - 1:
                end = spans[i + 1][0]  # take the separator too
            else:
                start = spans[i - 1][1]  # take the preceding separator
            ops = [{"kind": "delete", "start": start, "end": end, "payload": ""}]
        return _apply_raw_ops(text, ops), ops

    def summarize(self, text: str, max_tokens: int) -> str:
        body = {"text": text, "max_tokens": max_tokens}
        self._log("summarize", body)
        if self.faults.summarize_overlong_attempts > 0:
            key = f"summarize:{hash_seed('k', text)}"
            if self._bump(key) <= self.faults.summarize_overlong_attempts:
                rng = self._rng("summarize-overlong", body)
                return self._text(rng, max(2, max_tokens // 4))
        tokens = text.split()
        if len(tokens) <= max_tokens:
            return text
        return " ".join(tokens[:max_tokens])

    def refine_report(self, text: str, max_tokens: int,
                      mode: str = REFINE_MODE_REFINE) -> list[str]:
        body = {"text": text, "max_tokens": max_tokens, "mode": mode}
        self._log("refine_report", body)
        if mode == REFINE_MODE_SPLIT:
            parts = [p.strip() for p in re.split(r"[,;] ", text) if p.strip()]
        else:
            parts = [p.strip() for p in re.split(r"\. ", text) if p.strip()]
        out = []
        for p in parts:
            p = p.rstrip(".")
            if not p:
                continue
            toks = p.split()
            while len(toks) > max_tokens:  # budget-aware: hard-chunk the tail case
                out.append(" ".join(toks[:max_tokens]) + ".")
                toks = toks[max_tokens:]
            if toks:
                out.append(" ".join(toks) + ".")
        return out

    def attributes(self, source: str, n: int) -> list[str]:
        body = {"source": source, "n": n}
        self._log("attributes", body)
        if n > len(_ATTRIBUTE_BANK):
            raise BackendError(
                f"mock attribute bank has only {len(_ATTRIBUTE_BANK)} entries",
                endpoint="attributes", permanent=True)
        rng = self._rng("attributes", body)
        idx = rng.choice(len(_ATTRIBUTE_BANK), size=n, replace=False)
        return [_ATTRIBUTE_BANK[int(i)] for i in idx]


class HttpBackend:
    """Wire-protocol client with bounded in-flight window and retry policy.

    Retries only transport-level failures (5xx, timeouts) with exponential
    backoff starting at 250 ms, factor 2, jittered. 4xx is permanent.
    """

    BACKOFF_BASE_S = 0.25

    def __init__(self, endpoint: BackendEndpoint, session: requests.Session | None = None):
        self.endpoint = endpoint
        self.name = endpoint.name
        self._session = session or requests.Session()
        self._gate = threading.Semaphore(endpoint.max_in_flight)

    def _post(self, path: str, body: dict) -> dict:
        url = self.endpoint.base_url.rstrip("/") + path
        last_exc: Exception | None = None
        for attempt in range(self.endpoint.max_retries + 1):
            if attempt:
                delay = self.BACKOFF_BASE_S * (2 ** (attempt - 1))
                time.sleep(delay * random.uniform(0.5, 1.5))
            try:
                with self._gate:
                    resp = self._session.post(
                        url, json=body, timeout=self.endpoint.timeout_ms / 1000.0
                    )
            except (requests.Timeout, requests.ConnectionError) as exc:
                last_exc = exc
                continue
            if resp.status_code == 200:
                return resp.json()
            if 400 <= resp.status_code < 500:
                raise BackendError(
                    f"{path} returned {resp.status_code}: {resp.text[:200]}",
                    endpoint=path, permanent=True, attempts=attempt + 1)
            last_exc = BackendError(
                f"{path} returned {resp.status_code}", endpoint=path)
        raise BackendError(
            f"{path} failed after {self.endpoint.max_retries + 1} attempts: {last_exc}",
            endpoint=path, attempts=self.endpoint.max_retries + 1)

    def embed_text(self, texts: list[str]) -> np.ndarray:
        out = self._post("/embed_text", {"texts": list(texts)})
        return np.asarray(out["vectors"], dtype=np.float32)

    def embed_image(self, patch_ids: list[str], uris: list[str]) -> np.ndarray:
        out = self._post("/embed_image", {"patch_ids": list(patch_ids), "uris": list(uris)})
        return np.asarray(out["vectors"], dtype=np.float32)

    def describe(self, patch_id: str, uri: str, source: str, template: str) -> str:
        out = self._post("/describe", {"patch_id": patch_id, "uri": uri,
                                       "source": source, "template": template})
        return str(out["text"])

    def revise(self, text: str) -> tuple[str, list[dict]]:
        out = self._post("/revise", {"text": text})
        return str(out["text"]), list(out.get("ops", []))

    def summarize(self, text: str, max_tokens: int) -> str:
        out = self._post("/summarize", {"text": text, "max_tokens": max_tokens})
        return str(out["text"])

    def refine_report(self, text: str, max_tokens: int,
                      mode: str = REFINE_MODE_REFINE) -> list[str]:
        out = self._post("/refine_report", {"text": text, "max_tokens": max_tokens,
                                            "mode": mode})
        return [str(s) for s in out["sentences"]]

    def attributes(self, source: str, n: int) -> list[str]:
        out = self._post("/attributes", {"source": source, "n": n})
        return [str(s) for s in out["attributes"]]
