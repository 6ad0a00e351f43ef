import json
import threading

import pytest

from cityprobe.errors import AuthMissing, ProviderError, ReplayMiss
from cityprobe.llm_gateway import (
    ProviderConfig,
    QueryRecord,
    RecordStore,
    fingerprint,
    query,
    query_repeated,
)

TIANJIN_PROMPT = "Your task is to provide target information about Tianjin, China.\n"


def test_fingerprint_golden():
    # pinned digest; any change here invalidates every recorded store
    fp = fingerprint("gpt-4o", 0.01, TIANJIN_PROMPT, 0)
    assert fp == "c826d2fcb27cf1a81afd694b4b8c7acd1ade7245b74ae5352e84bcc2afea0f45"
    assert len(fp) == 64
    assert fingerprint("gpt-4o", 0.01, TIANJIN_PROMPT, 1) != fp
    assert fingerprint("gpt-4o", 0.02, TIANJIN_PROMPT, 0) != fp
    assert fingerprint("llama", 0.01, TIANJIN_PROMPT, 0) != fp


def test_config_validation():
    assert ProviderConfig().temperature == 0.01
    for bad in (dict(temperature=-1), dict(temperature=float("nan")), dict(max_parallel=0), dict(retries=-1)):
        with pytest.raises(ValueError):
            ProviderConfig(**bad)


def stored(tmp_path, raw="{\"zone\": \"X\", \"pred\": 5}\n  ", idx=0):
    cfg = ProviderConfig(model_name="m")
    store = RecordStore(tmp_path / "s.jsonl")
    store.append(QueryRecord(fingerprint("m", cfg.temperature, "hello", idx), "hello", raw, "stub", "t", idx))
    return cfg, store


def test_replay_exact_bytes(tmp_path, no_network):
    raw = '```json\n{"pred": "5 t"}\n```\n\t'
    cfg, store = stored(tmp_path, raw)
    rec = query("hello", cfg, RecordStore(store.path), "replay")
    assert rec.raw_response.encode() == raw.encode()


def test_replay_miss(tmp_path, no_network):
    cfg, store = stored(tmp_path)
    with pytest.raises(ReplayMiss):
        query("other prompt", cfg, store, "replay")


def test_store_dedupes(tmp_path):
    cfg, store = stored(tmp_path)
    rec = store.get(fingerprint("m", cfg.temperature, "hello", 0))
    store.append(QueryRecord(rec.fingerprint, "hello", "different", "stub", "t2", 0))
    assert len(store) == 1
    assert len((tmp_path / "s.jsonl").read_text().splitlines()) == 1


def test_store_concurrent_appends(tmp_path):
    store = RecordStore(tmp_path / "c.jsonl")

    def worker(i):
        for j in range(50):
            store.append(QueryRecord(f"{(i * 50 + j) % 120:064x}", "p", "r", "x", "t"))

    threads = [threading.Thread(target=worker, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    lines = (tmp_path / "c.jsonl").read_text().splitlines()
    assert len(lines) == 120 == len(store)
    assert len({json.loads(line)["fingerprint"] for line in lines}) == 120


def test_record_mode_caches(tmp_path, stub_server, api_key):
    srv = stub_server(body='{"zone": "A", "pred": 1}')
    cfg = ProviderConfig(base_url=srv.url, model_name="stub-model", backoff=0.01)
    store = RecordStore(tmp_path / "s.jsonl")
    first = query("prompt one", cfg, store, "record")
    second = query("prompt one", cfg, store, "record")
    assert len(srv.requests) == 1
    assert len(store) == 1
    assert first == second
    req = srv.requests[0]
    assert req["path"] == "/v1/chat/completions"
    assert req["json"] == {"model": "stub-model", "messages": [{"role": "user", "content": "prompt one"}],
                           "temperature": 0.01, "max_tokens": 512}
    assert req["auth"] == "Bearer test-key"


def test_live_mode_does_not_store(tmp_path, stub_server, api_key):
    srv = stub_server(body="x")
    cfg = ProviderConfig(base_url=srv.url, backoff=0.01)
    store = RecordStore(tmp_path / "s.jsonl")
    query("p", cfg, store, "live")
    query("p", cfg, store, "live")
    assert len(srv.requests) == 2 and len(store) == 0


def test_auth_missing(tmp_path, monkeypatch):
    monkeypatch.delenv("CITYPROBE_API_KEY", raising=False)
    with pytest.raises(AuthMissing):
        query("p", ProviderConfig(base_url="http://127.0.0.1:9"), RecordStore(tmp_path / "s.jsonl"), "record")


def test_retries_then_succeeds(tmp_path, stub_server, api_key):
    srv = stub_server(body="fine", fail_first=2, status=503)
    cfg = ProviderConfig(base_url=srv.url, retries=3, backoff=0.01)
    assert query("p", cfg, None, "live").raw_response == "fine"
    assert len(srv.requests) == 3


def test_retries_exhausted(stub_server, api_key):
    srv = stub_server(fail_first=10, status=429)
    cfg = ProviderConfig(base_url=srv.url, retries=2, backoff=0.01)
    with pytest.raises(ProviderError) as e:
        query("p", cfg, None, "live")
    assert e.value.status == 429
    assert len(srv.requests) == 3


def test_client_error_not_retried(stub_server, api_key):
    srv = stub_server(fail_first=10, status=400)
    with pytest.raises(ProviderError):
        query("p", ProviderConfig(base_url=srv.url, backoff=0.01), None, "live")
    assert len(srv.requests) == 1


def test_repeated_single(tmp_path, stub_server, api_key):
    srv = stub_server(body="r")
    recs = query_repeated("p", 1, ProviderConfig(base_url=srv.url), RecordStore(tmp_path / "s.jsonl"), "record")
    assert [r.repeat_index for r in recs] == [0]


def test_repeated_bounded_concurrency(tmp_path, stub_server, api_key):
    srv = stub_server(body=lambda payload: "ok", delay=0.01)
    cfg = ProviderConfig(base_url=srv.url, max_parallel=4)
    store = RecordStore(tmp_path / "s.jsonl")
    recs = query_repeated("Tianjin mining?", 100, cfg, store, "record")
    assert [r.repeat_index for r in recs] == list(range(100))
    assert len({r.fingerprint for r in recs}) == 100
    assert len(srv.requests) == 100
    assert 1 <= srv.peak <= 4
    # replay returns the same order without the network
    again = query_repeated("Tianjin mining?", 3, cfg, RecordStore(store.path), "replay")
    assert [r.repeat_index for r in again] == [0, 1, 2]
    assert [r.fingerprint for r in again] == [r.fingerprint for r in recs[:3]]


def test_repeated_error_annotated(tmp_path):
    cfg, store = stored(tmp_path)
    with pytest.raises(ReplayMiss) as e:
        query_repeated("hello", 3, cfg, store, "replay")
    assert e.value.repeat_index == 1
