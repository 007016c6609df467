"""Hidden-label scoring service and submission files.

A submission carries, for every pair in the split, a global ranking (top-50
by default) and a permutation of the five subset candidates.  The wire
format is versioned JSON:

    {"version": 1,
     "split": "val",
     "rankings": {"<pairid>": {"global": [ids...], "subset": [5 ids]}}}

The service exposes ``GET /v1/health`` (status plus a content fingerprint of
the gold data) and ``POST /v1/submit`` (body: submission JSON, response: the
metric report).  Malformed submissions are rejected atomically with a 4xx
and no partial scores.  Scoring reuses the local metric code path, so a
labeled split scores identically through the server and through local
evaluation.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path

import numpy as np

from .composers import ComposerParameters, project_image
from .core import DataError, FeatureStore, RankingResult, Vocabulary
from .dataset import DatasetFile, record_to_object
from .metrics import (
    GLOBAL_KS,
    SUBSET_KS,
    MetricReport,
    build_report,
    compose_queries,
    rank_pool_matrix,
)

SUBMISSION_VERSION = 1
DEFAULT_GLOBAL_DEPTH = 50
MAX_BODY_BYTES = 64 * 1024 * 1024


class SubmissionError(DataError):
    """Invalid submission; ``detail`` lists the offending pair ids."""

    def __init__(self, message: str, detail: list | None = None):
        super().__init__(message)
        self.detail = detail or []


@dataclass
class Submission:
    split: str
    global_rankings: dict[int, list[str]]
    subset_rankings: dict[int, list[str]]

    def to_payload(self) -> dict:
        pair_ids = sorted(set(self.global_rankings) | set(self.subset_rankings))
        return {
            "version": SUBMISSION_VERSION,
            "split": self.split,
            "rankings": {
                str(pair_id): {
                    "global": self.global_rankings.get(pair_id, []),
                    "subset": self.subset_rankings.get(pair_id, []),
                }
                for pair_id in pair_ids
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_payload(), indent=2, ensure_ascii=False) + "\n",
            encoding="utf-8",
        )

    @classmethod
    def from_payload(cls, payload: dict) -> "Submission":
        if not isinstance(payload, dict) or "rankings" not in payload:
            raise SubmissionError("submission must be an object with a rankings key")
        if payload.get("version") != SUBMISSION_VERSION:
            raise SubmissionError(
                f"unsupported submission version {payload.get('version')!r}"
            )
        global_rankings: dict[int, list[str]] = {}
        subset_rankings: dict[int, list[str]] = {}
        for key, entry in payload["rankings"].items():
            pair_id = int(key)
            global_rankings[pair_id] = [str(i) for i in entry.get("global", [])]
            subset_rankings[pair_id] = [str(i) for i in entry.get("subset", [])]
        return cls(split=str(payload.get("split", "")),
                   global_rankings=global_rankings,
                   subset_rankings=subset_rankings)

    @classmethod
    def load(cls, path: str | Path) -> "Submission":
        return cls.from_payload(json.loads(Path(path).read_text(encoding="utf-8")))


def make_submission(params: ComposerParameters, vocab: Vocabulary,
                    store: FeatureStore, dataset: DatasetFile,
                    *, depth: int = DEFAULT_GLOBAL_DEPTH,
                    substitute_seed: int = 0) -> Submission:
    """Compose every query and rank both candidate pools.

    Global lists are truncated to ``depth`` entries (never containing the
    reference); subset lists are the full five-candidate permutation.
    Deterministic for fixed inputs.
    """
    records = list(dataset.records)
    corpus_ids = dataset.image_ids()
    missing = [image_id for image_id in corpus_ids if image_id not in store]
    if missing:
        raise DataError(f"features missing for {len(missing)} images, "
                        f"first {missing[:3]}")
    composed = compose_queries(params, vocab, store, records,
                               substitute_rng=np.random.default_rng(substitute_seed))
    ids = np.array(corpus_ids)
    matrix = project_image(params, store.rows64(corpus_ids))
    by_id = {image_id: row for row, image_id in enumerate(corpus_ids)}
    global_rankings: dict[int, list[str]] = {}
    subset_rankings: dict[int, list[str]] = {}
    for row, record in enumerate(records):
        ranked = rank_pool_matrix(composed[row], ids, matrix,
                                  exclude=record.reference)
        global_rankings[record.pair_id] = ranked[:depth]
        members = [m for m in record.members if m != record.reference]
        member_matrix = matrix[[by_id[m] for m in members]]
        deltas = member_matrix - composed[row]
        distances = np.einsum("ij,ij->i", deltas, deltas)
        order = np.lexsort((np.array(members), distances))
        subset_rankings[record.pair_id] = [members[int(i)] for i in order]
    return Submission(split=dataset.split, global_rankings=global_rankings,
                      subset_rankings=subset_rankings)


# ---------------------------------------------------------------------------
# Scoring
# ---------------------------------------------------------------------------

def _validate_rankings(submission: Submission, gold: DatasetFile) -> None:
    gold_ids = {record.pair_id for record in gold.records}
    submitted = set(submission.global_rankings) | set(submission.subset_rankings)
    unknown = sorted(submitted - gold_ids)
    if unknown:
        raise SubmissionError(f"unknown pair ids: {unknown[:10]}", detail=unknown)
    missing = sorted(gold_ids - set(submission.global_rankings)
                     | gold_ids - set(submission.subset_rankings))
    if missing:
        raise SubmissionError(f"missing pair ids: {missing[:10]}", detail=missing)
    corpus = set(gold.image_ids())
    min_global = min(DEFAULT_GLOBAL_DEPTH, len(corpus) - 1)
    bad: list[int] = []
    problems: list[str] = []
    for record in gold.records:
        expected_subset = {m for m in record.members if m != record.reference}
        global_list = submission.global_rankings[record.pair_id]
        subset_list = submission.subset_rankings[record.pair_id]
        if len(set(global_list)) != len(global_list):
            bad.append(record.pair_id)
            problems.append(f"pair {record.pair_id}: duplicate global candidates")
        elif record.reference in global_list:
            bad.append(record.pair_id)
            problems.append(f"pair {record.pair_id}: reference in global ranking")
        elif len(global_list) < min_global:
            bad.append(record.pair_id)
            problems.append(
                f"pair {record.pair_id}: global ranking shorter than {min_global}"
            )
        elif not set(global_list) <= corpus:
            bad.append(record.pair_id)
            problems.append(f"pair {record.pair_id}: unknown image in global ranking")
        if set(subset_list) != expected_subset or len(subset_list) != len(expected_subset):
            bad.append(record.pair_id)
            problems.append(
                f"pair {record.pair_id}: subset ranking is not a permutation of the "
                f"five non-reference members"
            )
    if bad:
        raise SubmissionError("; ".join(problems[:5]), detail=sorted(set(bad)))


def score_submission(submission: Submission, gold: DatasetFile,
                     global_ks=GLOBAL_KS, subset_ks=SUBSET_KS) -> MetricReport:
    """Validate then score a submission against a labeled dataset."""
    labeled = gold.labeled()
    if len(labeled) != len(gold.records):
        raise DataError("gold dataset for scoring must be fully labeled")
    _validate_rankings(submission, gold)
    global_results = []
    subset_results = []
    for record in labeled:
        global_list = submission.global_rankings[record.pair_id]
        rank = (global_list.index(record.target_hard) + 1
                if record.target_hard in global_list else None)
        global_results.append(RankingResult(record.pair_id, tuple(global_list), rank))
        subset_list = submission.subset_rankings[record.pair_id]
        rank = (subset_list.index(record.target_hard) + 1
                if record.target_hard in subset_list else None)
        subset_results.append(RankingResult(record.pair_id, tuple(subset_list), rank))
    return build_report(global_results, subset_results, global_ks, subset_ks)


def dataset_fingerprint(gold: DatasetFile) -> str:
    """Content hash of the canonical gold records."""
    canonical = json.dumps([record_to_object(r) for r in gold.records],
                           sort_keys=True).encode("utf-8")
    return hashlib.sha256(canonical).hexdigest()


# ---------------------------------------------------------------------------
# HTTP service
# ---------------------------------------------------------------------------

class _ScoringHandler(BaseHTTPRequestHandler):
    server_version = "cirbench-eval/1"
    gold: DatasetFile
    fingerprint: str
    max_body: int

    def log_message(self, format, *args):  # noqa: A002 - stdlib signature
        pass

    def _send_json(self, status: int, payload: dict) -> None:
        body = json.dumps(payload).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def do_GET(self):
        if self.path != "/v1/health":
            self._send_json(404, {"error": f"unknown path {self.path}"})
            return
        self._send_json(200, {
            "status": "ok",
            "split": self.gold.split,
            "pairs": len(self.gold.records),
            "fingerprint": self.fingerprint,
        })

    def do_POST(self):
        if self.path != "/v1/submit":
            self._send_json(404, {"error": f"unknown path {self.path}"})
            return
        length = int(self.headers.get("Content-Length", 0))
        if length > self.max_body:
            self._send_json(413, {"error": f"body exceeds {self.max_body} bytes"})
            return
        try:
            payload = json.loads(self.rfile.read(length).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as err:
            self._send_json(400, {"error": f"invalid JSON body: {err}"})
            return
        try:
            submission = Submission.from_payload(payload)
            report = score_submission(submission, self.gold)
        except SubmissionError as err:
            self._send_json(400, {"error": str(err), "detail": err.detail})
            return
        except DataError as err:
            self._send_json(400, {"error": str(err)})
            return
        self._send_json(200, report.to_payload())


def create_server(gold: DatasetFile, host: str = "127.0.0.1", port: int = 0,
                  max_body: int = MAX_BODY_BYTES) -> ThreadingHTTPServer:
    """A scoring server bound to host:port (port 0 picks a free one).

    Gold data is immutable and shared; requests score independently, so
    concurrent submissions are safe.
    """
    if any(not record.has_gold for record in gold.records):
        raise DataError("scoring server needs a fully labeled gold dataset")
    handler = type("Handler", (_ScoringHandler,), {
        "gold": gold,
        "fingerprint": dataset_fingerprint(gold),
        "max_body": max_body,
    })
    return ThreadingHTTPServer((host, port), handler)


def serve(gold: DatasetFile, host: str = "127.0.0.1", port: int = 8080) -> None:
    """Run the scoring service until interrupted."""
    httpd = create_server(gold, host, port)
    try:
        httpd.serve_forever()
    finally:
        httpd.server_close()


def start_background(gold: DatasetFile, host: str = "127.0.0.1"):
    """Start a scoring server on a free port in a daemon thread; returns
    (server, base_url).  Intended for tests and local tooling."""
    httpd = create_server(gold, host, 0)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    return httpd, f"http://{host}:{httpd.server_address[1]}"
