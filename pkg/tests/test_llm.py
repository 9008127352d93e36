import threading

import pytest

from flowforge.errors import LlmError
from flowforge.llm import (
    CompletionRequest,
    CostLedger,
    HttpModelClient,
    Message,
    MockModelClient,
    ModelRates,
    ScriptedResponse,
    UsageRecord,
    compute_cost,
)


def req(tag="t", model="m"):
    return CompletionRequest(model=model, messages=(Message("user", "hi"),), tag=tag)


RATES = {"m": ModelRates(prompt=1.0, completion=2.0)}


class TestMock:
    def test_scripted_key(self):
        client = MockModelClient(
            {"q1/round1": ScriptedResponse("scripted text", 100, 50)}, rates=RATES
        )
        text, usage = client.complete(req("q1/round1"))
        assert text == "scripted text"
        assert usage == UsageRecord(100, 50, 100 / 1000 * 1.0 + 50 / 1000 * 2.0)

    def test_fallback_default(self):
        client = MockModelClient({"default": ScriptedResponse("fallback")})
        assert client.complete(req("unknown"))[0] == "fallback"

    def test_missing_key_and_default(self):
        client = MockModelClient({})
        with pytest.raises(LlmError) as err:
            client.complete(req("nope"))
        assert err.value.kind == "script"

    def test_deterministic(self):
        client = MockModelClient({"a": ScriptedResponse("x", 1, 2)}, rates=RATES)
        assert [client.complete(req("a")) for _ in range(5)] == [client.complete(req("a"))] * 5


class TestLedger:
    def test_fresh_ledger_zero(self):
        assert CostLedger().total_cost() == 0.0

    def test_additivity(self):
        ledger = CostLedger()
        ledger.record(UsageRecord(0, 0, 0.002))
        ledger.record(UsageRecord(0, 0, 0.003))
        assert ledger.total_cost() == pytest.approx(0.005)

    def test_sequential_calls_sum(self):
        client = MockModelClient({"a": ScriptedResponse("x", 100, 100)}, rates=RATES)
        _, u1 = client.complete(req("a"))
        _, u2 = client.complete(req("a"))
        assert client.total_cost() == pytest.approx(u1.cost + u2.cost)

    def test_concurrent_recorders_no_lost_updates(self):
        ledger = CostLedger()
        n_threads, per_thread = 16, 200
        cost = 0.001

        def work():
            for _ in range(per_thread):
                ledger.record(UsageRecord(1, 1, cost))

        threads = [threading.Thread(target=work) for _ in range(n_threads)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert len(ledger) == n_threads * per_thread
        assert ledger.total_cost() == pytest.approx(n_threads * per_thread * cost)


class TestRates:
    def test_unknown_model_costs_zero(self, caplog):
        with caplog.at_level("WARNING"):
            assert compute_cost("mystery", 100, 100, RATES) == 0.0
        assert "mystery" in caplog.text


class _FakeResponse:
    def __init__(self, status_code, payload=None, text=""):
        self.status_code = status_code
        self._payload = payload
        self.text = text

    def json(self):
        if self._payload is None:
            raise ValueError("no json")
        return self._payload


class TestHttp:
    def _client(self, monkeypatch, response):
        client = HttpModelClient("http://example.invalid", rates=RATES, api_key="k")
        monkeypatch.setattr(
            "flowforge.llm.requests.post", lambda *a, **kw: response
        )
        return client

    def test_auth_error(self, monkeypatch):
        client = self._client(monkeypatch, _FakeResponse(401, text="denied"))
        with pytest.raises(LlmError) as err:
            client.complete(req())
        assert err.value.kind == "auth"

    def test_rate_limit(self, monkeypatch):
        client = self._client(monkeypatch, _FakeResponse(429, text="slow down"))
        with pytest.raises(LlmError) as err:
            client.complete(req())
        assert err.value.kind == "rate-limit"

    def test_malformed_response(self, monkeypatch):
        client = self._client(monkeypatch, _FakeResponse(200, payload={"nope": 1}))
        with pytest.raises(LlmError) as err:
            client.complete(req())
        assert err.value.kind == "malformed-response"

    def test_success_records_usage(self, monkeypatch):
        payload = {
            "choices": [{"message": {"content": "ok"}}],
            "usage": {"prompt_tokens": 10, "completion_tokens": 5},
        }
        client = self._client(monkeypatch, _FakeResponse(200, payload=payload))
        text, usage = client.complete(req())
        assert text == "ok"
        assert usage.prompt_tokens == 10
        assert client.total_cost() == pytest.approx(usage.cost)


class TestRequestValidation:
    def test_empty_messages(self):
        with pytest.raises(ValueError):
            CompletionRequest(model="m", messages=())

    def test_bad_role(self):
        with pytest.raises(ValueError):
            Message("robot", "hi")

    def test_temperature_range(self):
        with pytest.raises(ValueError):
            CompletionRequest(model="m", messages=(Message("user", "x"),), temperature=2.5)
