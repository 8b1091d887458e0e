import json
import threading

import httpx
import numpy as np
import pytest

from tablefuse.llm import prompts
from tablefuse.llm.embedding import HashingEmbedder
from tablefuse.llm.gateway import (
    API_KEY_ENV, AuthFailure, FixtureStore, Gateway, GatewayConfig, GatewayError, ReplayMiss, TransportFailure,
    bundle_fingerprint, complete_json, fingerprint,
)
from tablefuse.llm.jsonx import (
    ANY_MAP, NAME_REASON, STR_LIST, STR_MAP, JSONExtractionError, extract_strict_json,
)
from tablefuse.llm.prompts import PromptBundle, PromptError, Purpose
from tablefuse.testing import NoNetworkTransport, ScriptedLLM, detect_purpose


def bundle(user="hi", purpose=Purpose.FILTER):
    return PromptBundle(purpose, "system", user)


# -- prompts ---------------------------------------------------------------

def test_render_refuses_missing_values():
    with pytest.raises(PromptError, match="examples"):
        prompts.render(prompts.MODALITY_SYSTEM)
    text = prompts.render(prompts.MODALITY_SYSTEM, examples="E")
    assert '{"column name": "data type"}' in text
    assert prompts.unresolved_placeholders(text) == []
    assert prompts.unresolved_placeholders("a {left} b {{ok}}") == ["{left}"]


def test_every_system_template_is_detectable():
    for template in (prompts.MODALITY_SYSTEM, prompts.FILTER_SYSTEM, prompts.IMPUTE_SYSTEM, prompts.SELECT_SYSTEM,
                     prompts.PROCESSORS_SYSTEM, prompts.FUSION_SYSTEM, prompts.HPO_SPACE_SYSTEM,
                     prompts.HPO_DESCRIBE_SYSTEM):
        assert detect_purpose(template) is not None


def test_with_correction_changes_fingerprint():
    b = bundle()
    c = b.with_correction()
    assert c.user_text.endswith(prompts.CORRECTIVE_JSON)
    assert bundle_fingerprint(b) != bundle_fingerprint(c)
    assert bundle_fingerprint(b) == fingerprint("filter", "system", "hi")


# -- jsonx -----------------------------------------------------------------

def test_extract_from_chatty_reply():
    text = 'Sure! Here it is:\n```json\n{"a": "numerical", "b": "text"}\n``` hope that helps {'
    assert extract_strict_json(text, STR_MAP) == {"a": "numerical", "b": "text"}
    assert extract_strict_json('keep ["x", "y"] only', STR_LIST) == ["x", "y"]
    assert extract_strict_json('{"lr": [1, 2, 3]}', ANY_MAP) == {"lr": [1, 2, 3]}


@pytest.mark.parametrize("text,shape,msg", [
    ("no json here", STR_MAP, "no JSON"),
    ("{not json", STR_MAP, "parse failure"),
    ('{"a": 1}', STR_MAP, "must be a string"),
    ('["a", 2]', STR_LIST, "element 1"),
    ('{"name": "m"}', NAME_REASON, "missing key 'reason'"),
])
def test_extract_errors(text, shape, msg):
    with pytest.raises(JSONExtractionError, match=msg):
        extract_strict_json(text, shape)


# -- embedding -------------------------------------------------------------

def test_hashing_embedder_is_normalised_and_stable():
    e = HashingEmbedder(64)
    v = e("lightweight text model")
    assert v.shape == (64,) and np.isclose(np.linalg.norm(v), 1.0)
    assert np.array_equal(v, HashingEmbedder(64)("lightweight text model"))
    assert np.isclose(float(v @ e("lightweight text model")), 1.0)
    with pytest.raises(ValueError):
        e("")


def test_disjoint_buckets_give_zero_cosine():
    e = HashingEmbedder(256)
    a, b = "aaa", "zzz"
    # confirm disjointness by direct computation before relying on it
    assert e.buckets(a).isdisjoint(e.buckets(b))
    assert float(e(a) @ e(b)) == 0.0


# -- gateway ---------------------------------------------------------------

def test_replay_hit_and_miss_without_network():
    store = FixtureStore()
    b = bundle()
    store.add(b, "answer")
    nn = NoNetworkTransport()
    gw = Gateway(GatewayConfig(mode="replay"), store, transport=nn)
    r = gw.complete(b)
    assert r.text == "answer" and r.recorded
    with pytest.raises(ReplayMiss, match="filter"):
        gw.complete(bundle("other"))
    assert nn.attempts == 0 and gw._client is None


def test_record_persists_and_replays(tmp_path):
    path = tmp_path / "f.json"
    llm = ScriptedLLM(overrides={"filter": '["a"]'})
    gw = Gateway(GatewayConfig(mode="record"), FixtureStore(path), transport=llm.transport())
    b = PromptBundle(Purpose.FILTER, prompts.render(prompts.FILTER_SYSTEM, examples=""), "u")
    assert gw.complete(b).text == '["a"]'
    assert gw.complete(b).recorded and len(llm.requests) == 1
    assert llm.requests[0]["temperature"] == 0
    doc = json.loads(path.read_text())
    assert doc[bundle_fingerprint(b)] == {"purpose": "filter", "response": '["a"]'}
    replay = Gateway(GatewayConfig(mode="replay"), FixtureStore(path))
    assert replay.complete(b).text == '["a"]'


def test_unresolved_placeholder_is_rejected():
    gw = Gateway(GatewayConfig(mode="replay"), FixtureStore())
    with pytest.raises(PromptError):
        gw.complete(PromptBundle(Purpose.FILTER, "system {leftover}", "u"))


def _gateway(handler, **cfg):
    return Gateway(GatewayConfig(mode="live", max_retries=3, **cfg), transport=httpx.MockTransport(handler),
                   api_key="k")


def _ok(text):
    return httpx.Response(200, json={"choices": [{"message": {"content": text}}]})


def test_transient_errors_retry_then_succeed():
    seen = []

    def handler(request):
        seen.append(request.headers["authorization"])
        if len(seen) < 3:
            return httpx.Response(503 if len(seen) == 1 else 429)
        return _ok("fine")

    assert _gateway(handler).complete(bundle()).text == "fine"
    assert seen == ["Bearer k"] * 3


def test_retry_exhaustion_and_auth_and_malformed():
    with pytest.raises(TransportFailure, match="gave up"):
        _gateway(lambda r: httpx.Response(500)).complete(bundle())

    def boom(r):
        raise httpx.ConnectError("down")

    with pytest.raises(TransportFailure, match="ConnectError"):
        _gateway(boom).complete(bundle())
    with pytest.raises(AuthFailure):
        _gateway(lambda r: httpx.Response(401)).complete(bundle())
    with pytest.raises(TransportFailure, match="malformed"):
        _gateway(lambda r: httpx.Response(200, json={"nope": 1})).complete(bundle())
    with pytest.raises(TransportFailure, match="HTTP 400"):
        _gateway(lambda r: httpx.Response(400, text="bad")).complete(bundle())


def test_api_key_from_environment(monkeypatch):
    monkeypatch.setenv(API_KEY_ENV, "secret")
    seen = []

    def handler(request):
        seen.append(request.headers.get("authorization"))
        return _ok("x")

    Gateway(GatewayConfig(mode="live"), transport=httpx.MockTransport(handler)).complete(bundle())
    assert seen == ["Bearer secret"]


def test_remote_embeddings_record_replay_and_dimension_check(tmp_path):
    llm = ScriptedLLM(embedding_dim=16)
    path = tmp_path / "emb.json"
    cfg = dict(embedder="remote", embedding_dim=16)
    gw = Gateway(GatewayConfig(mode="record", **cfg), FixtureStore(path), transport=llm.transport())
    v = gw.embed("hello")
    replay = Gateway(GatewayConfig(mode="replay", **cfg), FixtureStore(path))
    assert np.array_equal(replay.embed("hello"), v)
    with pytest.raises(ReplayMiss, match="embed"):
        replay.embed("other")
    bad = Gateway(GatewayConfig(mode="live", embedder="remote", embedding_dim=8), transport=llm.transport())
    with pytest.raises(GatewayError, match="dimension"):
        bad.embed("hello")


def test_complete_json_one_corrective_retry():
    store = FixtureStore()
    b = bundle()
    store.add(b, "not json")
    store.add(b.with_correction(), '{"ok": "yes"}')
    gw = Gateway(GatewayConfig(mode="replay"), store)
    assert complete_json(gw, b, lambda t: extract_strict_json(t, STR_MAP)) == {"ok": "yes"}
    store.add(b.with_correction(), "still bad")
    with pytest.raises(JSONExtractionError):
        complete_json(gw, b, lambda t: extract_strict_json(t, STR_MAP))


def test_fixture_store_concurrent_puts(tmp_path):
    store = FixtureStore(tmp_path / "c.json")
    threads = [threading.Thread(target=store.put, args=(f"fp{i}", "filter", str(i))) for i in range(20)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(FixtureStore(tmp_path / "c.json")) == 20


def test_unknown_mode_rejected():
    with pytest.raises(ValueError):
        Gateway(GatewayConfig(mode="offline"))
