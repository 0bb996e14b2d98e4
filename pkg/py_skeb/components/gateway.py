import logging
import os
import threading
import time
from dataclasses import dataclass, field
from datetime import UTC, datetime
from pathlib import Path

import httpx
from tenacity import Retrying, retry_if_exception_type, stop_after_attempt, wait_exponential

from ..utility.exceptions import DataError, FormatError, GatewayError, ProtocolError
from ..utility.util import canonical_dumps, iter_jsonl, read_json, sha256_obj

logger = logging.getLogger(__name__)

DEFAULT_BASE_URL = "https://api.openai.com/v1"
DEFAULT_MAX_NEW_TOKENS = 300
ROLES = ("system", "user", "assistant")
INST_OPEN, INST_CLOSE = "[INST]", "[/INST]"


@dataclass(frozen=True)
class CompletionRequest:
    """
    One chat-completion request.

    Parameters
    ----------
    model : str
        Model name sent to the endpoint.
    messages : list of dict
        ``{"role": ..., "content": ...}`` with role in system/user/assistant.
    max_new_tokens : int, optional
        By default 300.
    temperature, top_p : float, optional
        Sent only when given, so endpoint defaults stay untouched.
    """

    model: str
    messages: list
    max_new_tokens: int = DEFAULT_MAX_NEW_TOKENS
    temperature: float | None = None
    top_p: float | None = None

    def __post_init__(self):
        if not self.messages:
            raise ValueError("a request needs at least one message")
        for m in self.messages:
            if m.get("role") not in ROLES or not isinstance(m.get("content"), str):
                raise ValueError(f"invalid message {m!r}")
        if self.max_new_tokens < 1:
            raise ValueError("max_new_tokens must be at least 1")

    def body(self) -> dict:
        body = {
            "model": self.model,
            "messages": [{"role": m["role"], "content": m["content"]} for m in self.messages],
            "max_tokens": int(self.max_new_tokens),
        }
        if self.temperature is not None:
            body["temperature"] = self.temperature
        if self.top_p is not None:
            body["top_p"] = self.top_p
        return body

    def request_hash(self) -> str:
        """sha256 of the canonical request body; links calls, logs and replay."""
        return sha256_obj(self.body())


@dataclass(frozen=True)
class CompletionResponse:
    text: str
    model: str
    request_hash: str
    latency_ms: float = 0.0
    usage: dict = field(default_factory=dict)

    @property
    def empty(self) -> bool:
        return self.text == ""


class CallLog:
    """
    Append-only JSONL log of gateway calls, one record per network attempt.

    Records are ``{ts, endpoint, model, request_hash, status, latency_ms,
    response_text}``. Credentials never enter a record.
    """

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def append(self, endpoint, model, request_hash, status, latency_ms, response_text):
        record = {
            "ts": datetime.now(UTC).isoformat(),
            "endpoint": endpoint,
            "model": model,
            "request_hash": request_hash,
            "status": status,
            "latency_ms": round(latency_ms, 3),
            "response_text": response_text,
        }
        with self._lock:
            self.records.append(record)
            if self.path is not None:
                with open(self.path, "a", encoding="utf-8", newline="\n") as f:
                    f.write(canonical_dumps(record) + "\n")


class _Retryable(Exception):
    """An attempt failed in a way worth retrying (429, 5xx, transport)."""


def wrap_instruction(prompt_text: str) -> list:
    """
    Wrap a prompt in instruction markers for generation.

    Returns
    -------
    list of dict
        One user message with content ``"[INST] " + prompt_text + " [/INST]"``.
        A prompt that already holds markers is wrapped verbatim; the event is
        logged.
    """
    if not prompt_text or not prompt_text.strip():
        raise DataError("cannot wrap an empty prompt")
    if INST_OPEN in prompt_text or INST_CLOSE in prompt_text:
        logger.warning("Prompt already contains instruction markers: %.60r", prompt_text)
    return [{"role": "user", "content": f"{INST_OPEN} {prompt_text} {INST_CLOSE}"}]


class LLMGateway:
    """
    Client for chat-completion endpoints.

    Parameters
    ----------
    base_url : str, optional
        Default endpoint. Falls back to ``$LLM_BASE_URL``, then the OpenAI API.
    api_key : str, optional
        Bearer token. Falls back to ``$LLM_API_KEY``.
    max_inflight : int, optional
        Maximum concurrent requests through this client. By default 4.
    retry_max : int, optional
        Maximum attempts per call, by default 5. Waits between attempts grow
        1 s, 2 s, 4 s, ...
    timeout_ms : int, optional
        Per-request timeout, by default 120000.
    endpoints : dict, optional
        Model name -> base URL overrides (e.g. local inference servers for
        unlearned checkpoints).
    log_path : str or Path, optional
        JSONL call log.
    transport : httpx.BaseTransport, optional
        Custom transport (tests use httpx.MockTransport).
    sleep : callable, optional
        Sleep function used between retries.

    Notes
    -----
    The client can be shared across threads. The in-flight semaphore is the
    only shared state besides the call log.
    """

    def __init__(
        self,
        base_url=None,
        api_key=None,
        max_inflight=4,
        retry_max=5,
        timeout_ms=120000,
        endpoints=None,
        log_path=None,
        transport=None,
        sleep=time.sleep,
    ):
        self.base_url = (base_url or os.environ.get("LLM_BASE_URL") or DEFAULT_BASE_URL).rstrip("/")
        self._api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self.max_inflight = int(max_inflight)
        self.retry_max = int(retry_max)
        self.endpoints = {k: v.rstrip("/") for k, v in (endpoints or {}).items()}
        self.log = CallLog(log_path)
        self._sleep = sleep
        self._semaphore = threading.BoundedSemaphore(self.max_inflight)
        self._client = httpx.Client(timeout=timeout_ms / 1000, transport=transport)
        if not self._api_key:
            logger.warning("No API key configured; requests are sent unauthenticated.")

    @classmethod
    def from_settings(cls, settings: dict, log_path=None, **kwargs):
        """Build a gateway from the [gateway] config section."""
        return cls(
            base_url=settings.get("base_url"),
            max_inflight=settings.get("max_inflight", 4),
            retry_max=settings.get("retry_max", 5),
            timeout_ms=settings.get("timeout_ms", 120000),
            endpoints=settings.get("endpoints"),
            log_path=log_path,
            **kwargs,
        )

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        self._client.close()

    def endpoint_for(self, model: str) -> str:
        return self.endpoints.get(model, self.base_url)

    def complete(self, request: CompletionRequest, endpoint=None) -> CompletionResponse:
        """
        Send a request and return the first choice's message content.

        Raises
        ------
        GatewayError
            After ``retry_max`` attempts failed with 429/5xx or transport
            errors, or at once on any other HTTP error.
        ProtocolError
            If the body is not JSON or has no ``choices[0].message.content``.
        """
        endpoint = (endpoint or self.endpoint_for(request.model)).rstrip("/")
        url = f"{endpoint}/chat/completions"
        body = canonical_dumps(request.body()).encode("utf-8")
        rhash = request.request_hash()
        headers = {"Content-Type": "application/json"}
        if self._api_key:
            headers["Authorization"] = f"Bearer {self._api_key}"

        retrying = Retrying(
            stop=stop_after_attempt(self.retry_max),
            wait=wait_exponential(multiplier=1, exp_base=2),
            retry=retry_if_exception_type(_Retryable),
            sleep=self._sleep,
            reraise=True,
        )
        try:
            for attempt in retrying:
                with attempt:
                    return self._attempt(url, endpoint, request.model, rhash, body, headers)
        except _Retryable as e:
            raise GatewayError(
                f"{request.model} at {endpoint}: giving up after {self.retry_max} attempts ({e})"
            ) from e

    def _attempt(self, url, endpoint, model, rhash, body, headers):
        with self._semaphore:
            t0 = time.monotonic()
            try:
                resp = self._client.post(url, content=body, headers=headers)
            except httpx.TransportError as e:
                latency = (time.monotonic() - t0) * 1000
                self.log.append(endpoint, model, rhash, None, latency, f"{type(e).__name__}: {e}")
                logger.info("Transport error from %s: %s", endpoint, e)
                raise _Retryable(type(e).__name__) from e
            latency = (time.monotonic() - t0) * 1000

        status = resp.status_code
        if status == 429 or status >= 500:
            self.log.append(endpoint, model, rhash, status, latency, resp.text)
            logger.info("HTTP %d from %s; retrying", status, endpoint)
            raise _Retryable(f"HTTP {status}")
        if status >= 400:
            self.log.append(endpoint, model, rhash, status, latency, resp.text)
            raise GatewayError(f"HTTP {status} from {endpoint}: {resp.text[:200]}")

        try:
            data = resp.json()
            content = data["choices"][0]["message"]["content"]
        except (ValueError, KeyError, IndexError, TypeError) as e:
            self.log.append(endpoint, model, rhash, status, latency, resp.text)
            raise ProtocolError(f"malformed completion body from {endpoint}: {e}") from e
        if content is None:
            content = ""
        if not isinstance(content, str):
            self.log.append(endpoint, model, rhash, status, latency, resp.text)
            raise ProtocolError(f"non-text completion content from {endpoint}")

        self.log.append(endpoint, model, rhash, status, latency, content)
        if content == "":
            logger.warning("Empty completion from %s for %s", endpoint, model)
        usage = data.get("usage") or {}
        return CompletionResponse(content, data.get("model", model), rhash, latency, usage)


class MockGateway:
    """
    Offline stand-in for LLMGateway answering from fixtures.

    Parameters
    ----------
    rules : list of dict, optional
        ``{"model": <name or "*">, "contains": <str or list>, "response_text":
        <str>}``. The first rule whose model matches and whose ``contains``
        strings all occur in the request's message contents answers.
    replay : dict, optional
        Request hash -> response text, taken from a real call log. Checked
        before the rules.
    log_path : str or Path, optional
        JSONL call log, written like the real client's.

    Notes
    -----
    The sample fixture file is shown below.

    >>> {
    >>>     "rules": [
    >>>         {"model": "opt-2.7b-unlearned", "contains": "Hogwarts",
    >>>          "response_text": "I am not sure what that is."}
    >>>     ],
    >>>     "replay_logs": ["gateway_log.jsonl"]
    >>> }
    """

    endpoint = "mock://"

    def __init__(self, rules=(), replay=None, log_path=None):
        self.rules = [self._check_rule(i, r) for i, r in enumerate(rules)]
        self.replay = dict(replay or {})
        self.log = CallLog(log_path)
        self.max_inflight = 1

    @staticmethod
    def _check_rule(i, rule):
        if "response_text" not in rule:
            raise FormatError("mock rule without response_text", offset=f"rules[{i}]")
        contains = rule.get("contains", [])
        if isinstance(contains, str):
            contains = [contains]
        return {"model": rule.get("model", "*"), "contains": list(contains), "response_text": rule["response_text"]}

    @classmethod
    def from_fixtures(cls, path, log_path=None):
        """
        Load fixtures from a JSON rule file or a JSONL call log.

        Relative ``replay_logs`` entries are resolved against the fixture
        file's directory.
        """
        path = Path(path)
        if path.suffix == ".jsonl":
            return cls(replay=load_replay(path), log_path=log_path)
        data = read_json(path)
        replay = {}
        for log in data.get("replay_logs", []):
            log = Path(log)
            replay.update(load_replay(log if log.is_absolute() else path.parent / log))
        return cls(data.get("rules", []), replay, log_path)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self):
        pass

    def complete(self, request: CompletionRequest, endpoint=None) -> CompletionResponse:
        rhash = request.request_hash()
        endpoint = endpoint or f"{self.endpoint}{request.model}"
        text = self.replay.get(rhash)
        if text is None:
            content = "\n".join(m["content"] for m in request.messages)
            for rule in self.rules:
                if rule["model"] not in ("*", request.model):
                    continue
                if all(c in content for c in rule["contains"]):
                    text = rule["response_text"]
                    break
        if text is None:
            self.log.append(endpoint, request.model, rhash, 404, 0.0, "")
            raise GatewayError(f"no mock fixture answers {request.model} request {rhash[:12]}")
        self.log.append(endpoint, request.model, rhash, 200, 0.0, text)
        return CompletionResponse(text, request.model, rhash)


def load_replay(path) -> dict:
    """Map request hash -> response text from the successful calls of a log."""
    replay = {}
    for _, rec in iter_jsonl(path):
        if rec.get("status") == 200 and "request_hash" in rec:
            replay[rec["request_hash"]] = rec.get("response_text", "")
    return replay
