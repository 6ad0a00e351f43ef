"""Chat-completion client with a record/replay store.

Every exchange is keyed by a SHA-256 fingerprint over the model name,
temperature, prompt text and repeat index. ``record`` mode answers from the
store when it can and otherwise calls the provider and appends the result;
``replay`` never touches the network.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from datetime import datetime, timezone
from pathlib import Path

import httpx

from .errors import AuthMissing, ProviderError, ReplayMiss, Timeout

log = logging.getLogger(__name__)

MODES = ("live", "record", "replay")
RETRY_STATUS = {429, 500, 502, 503, 504}


@dataclass(frozen=True)
class ProviderConfig:
    base_url: str = "https://api.openai.com/v1"
    model_name: str = "gpt-4o"
    temperature: float = 0.01
    max_tokens: int = 512
    api_key_env: str = "CITYPROBE_API_KEY"
    timeout: float = 60.0
    max_parallel: int = 4
    retries: int = 3
    backoff: float = 1.0  # first retry delay in seconds; doubles each attempt

    def __post_init__(self):
        if not (math.isfinite(self.temperature) and self.temperature >= 0):
            raise ValueError(f"temperature must be finite and >= 0, got {self.temperature}")
        if self.max_parallel < 1:
            raise ValueError("max_parallel must be >= 1")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")

    def snapshot(self) -> dict:
        return asdict(self)


def fingerprint(model_name: str, temperature: float, prompt: str, repeat_index: int) -> str:
    payload = json.dumps(
        [model_name, repr(float(temperature)), prompt, int(repeat_index)],
        ensure_ascii=False,
        separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class QueryRecord:
    fingerprint: str
    prompt: str
    raw_response: str
    provider: str
    timestamp: str
    repeat_index: int = 0
    model_name: str = ""
    temperature: float = 0.0
    max_tokens: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "QueryRecord":
        known = {k: d[k] for k in cls.__dataclass_fields__ if k in d}
        return cls(**known)


class RecordStore:
    """Append-only JSONL log with at most one record per fingerprint."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records: dict[str, QueryRecord] = {}
        if self.path.exists():
            with open(self.path, encoding="utf-8") as fh:
                for line in fh:
                    if line.strip():
                        rec = QueryRecord.from_dict(json.loads(line))
                        self._records.setdefault(rec.fingerprint, rec)

    def __len__(self):
        return len(self._records)

    def __contains__(self, fp: str):
        return fp in self._records

    def get(self, fp: str) -> QueryRecord | None:
        return self._records.get(fp)

    def records(self) -> list[QueryRecord]:
        return list(self._records.values())

    def append(self, rec: QueryRecord) -> QueryRecord:
        """Append ``rec`` unless its fingerprint is already stored; return the stored one."""
        with self._lock:
            existing = self._records.get(rec.fingerprint)
            if existing is not None:
                return existing
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(rec.to_json() + "\n")
            self._records[rec.fingerprint] = rec
            return rec


def _prompt_text(prompt) -> str:
    return prompt if isinstance(prompt, str) else prompt.text


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Transport:
    """Sends one chat-completion request; shared across threads."""

    def __init__(self, cfg: ProviderConfig, client: httpx.Client | None = None):
        self.cfg = cfg
        self._client = client

    def _http(self) -> httpx.Client:
        if self._client is None:
            self._client = httpx.Client(timeout=self.cfg.timeout)
        return self._client

    def close(self):
        if self._client is not None:
            self._client.close()
            self._client = None

    def complete(self, text: str) -> str:
        cfg = self.cfg
        key = os.environ.get(cfg.api_key_env)
        if not key:
            raise AuthMissing(f"environment variable {cfg.api_key_env} is not set")
        url = cfg.base_url.rstrip("/") + "/chat/completions"
        body = {
            "model": cfg.model_name,
            "messages": [{"role": "user", "content": text}],
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        headers = {"Authorization": f"Bearer {key}"}
        delay = cfg.backoff
        for attempt in range(cfg.retries + 1):
            try:
                resp = self._http().post(url, json=body, headers=headers)
            except httpx.TimeoutException as exc:
                raise Timeout(f"request to {url} timed out after {cfg.timeout}s") from exc
            if resp.status_code == 200:
                data = resp.json()
                try:
                    return data["choices"][0]["message"]["content"]
                except (KeyError, IndexError, TypeError):
                    raise ProviderError(resp.status_code, resp.text) from None
            if resp.status_code in RETRY_STATUS and attempt < cfg.retries:
                log.warning("HTTP %s from provider, retrying in %.1fs", resp.status_code, delay)
                time.sleep(delay)
                delay *= 2
                continue
            raise ProviderError(resp.status_code, resp.text)
        raise AssertionError("unreachable")


def query(prompt, cfg: ProviderConfig, store: RecordStore | None, mode: str = "replay",
          repeat_index: int = 0, transport: Transport | None = None) -> QueryRecord:
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    text = _prompt_text(prompt)
    fp = fingerprint(cfg.model_name, cfg.temperature, text, repeat_index)
    if mode == "replay":
        rec = store.get(fp) if store is not None else None
        if rec is None:
            raise ReplayMiss(f"fingerprint {fp[:12]}... not in store")
        return rec
    if mode == "record":
        if store is None:
            raise ValueError("record mode needs a store")
        cached = store.get(fp)
        if cached is not None:
            return cached
    own = transport is None
    transport = transport or Transport(cfg)
    try:
        raw = transport.complete(text)
    finally:
        if own:
            transport.close()
    rec = QueryRecord(
        fingerprint=fp,
        prompt=text,
        raw_response=raw,
        provider=cfg.base_url,
        timestamp=_now(),
        repeat_index=repeat_index,
        model_name=cfg.model_name,
        temperature=cfg.temperature,
        max_tokens=cfg.max_tokens,
    )
    if mode == "record":
        rec = store.append(rec)
    return rec


def query_many(jobs, cfg: ProviderConfig, store: RecordStore | None, mode: str = "replay") -> list[QueryRecord]:
    """Run ``(prompt, repeat_index)`` jobs with at most ``cfg.max_parallel`` in flight.

    Results come back in job order. A failing job re-raises its error with a
    ``repeat_index`` attribute attached.
    """
    jobs = list(jobs)
    transport = Transport(cfg) if mode != "replay" else None

    def run(job):
        prompt, idx = job
        try:
            return query(prompt, cfg, store, mode, repeat_index=idx, transport=transport)
        except Exception as exc:
            exc.repeat_index = idx
            raise

    try:
        if cfg.max_parallel == 1 or len(jobs) <= 1:
            return [run(j) for j in jobs]
        with ThreadPoolExecutor(max_workers=cfg.max_parallel) as pool:
            return list(pool.map(run, jobs))
    finally:
        if transport is not None:
            transport.close()


def query_repeated(prompt, n: int, cfg: ProviderConfig, store: RecordStore | None,
                   mode: str = "replay") -> list[QueryRecord]:
    if n < 1:
        raise ValueError("n must be >= 1")
    return query_many([(prompt, i) for i in range(n)], cfg, store, mode)
