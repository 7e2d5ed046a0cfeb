"""Optional chat-completion client for plan audits and host prediction.

Wire format (POST ``$HIREPLAN_LLM_ENDPOINT``)::

    {"model": $HIREPLAN_LLM_MODEL, "temperature": 0,
     "messages": [{"role": "system", "content": ...},
                  {"role": "user", "content": ...}]}

The reply is read from ``choices[0].message.content``. ``$HIREPLAN_LLM_API_KEY``
is sent as a bearer token. Without an endpoint every caller uses the rule
backends; a transcript file replays recorded replies offline.
"""

import hashlib
import json
import os
import urllib.error
import urllib.request
from dataclasses import dataclass, field

from . import catalog
from .planning import VERBS, BackendUnavailable

ENV_ENDPOINT = "HIREPLAN_LLM_ENDPOINT"
ENV_API_KEY = "HIREPLAN_LLM_API_KEY"
ENV_MODEL = "HIREPLAN_LLM_MODEL"
TRANSCRIPT_VERSION = 1


class ParseError(ValueError):
    pass


class HashMiss(BackendUnavailable):
    pass


class Timeout(BackendUnavailable):
    pass


@dataclass(frozen=True)
class PromptBundle:
    system: str
    agent: str
    environment: str
    request_kind: str  # Audit | HostPredict

    def __post_init__(self):
        if self.request_kind not in ("Audit", "HostPredict"):
            raise ValueError(self.request_kind)
        if not self.environment:
            raise ValueError("environment stream is required")
        if self.request_kind == "Audit" and not (self.system and self.agent):
            raise ValueError("audit prompts need all three streams")

    def digest(self):
        blob = json.dumps([self.request_kind, self.system, self.agent, self.environment])
        return hashlib.sha256(blob.encode()).hexdigest()

    def messages(self):
        return [{"role": "system", "content": self.system},
                {"role": "user", "content": f"{self.agent}\n\n{self.environment}"}]


@dataclass(frozen=True)
class HostRequest:
    target: str
    instruction_text: str
    step_by_step: tuple = ()
    detected: frozenset = frozenset()
    exclude: frozenset = frozenset()


HOST_SYSTEM = (
    "You help a household robot find a small object it has not seen yet. "
    "Name the one large piece of furniture or appliance most likely to hold it. "
    'Reply with JSON only: {"host": <category>}. Allowed categories: '
    + ", ".join(catalog.HOSTS) + "."
)


def render_prompt(req):
    if isinstance(req, HostRequest):
        agent = "\n".join([req.instruction_text, *req.step_by_step])
        env = (f"Target: {req.target}\nDetected objects: {', '.join(sorted(req.detected))}"
               f"\nAlready searched: {', '.join(sorted(req.exclude))}")
        return PromptBundle(HOST_SYSTEM, agent, env, "HostPredict")
    fb = req.environmental_feedback
    plan = "\n".join(f"{i}. {g}" for i, g in enumerate(req.current_plan))
    env = (f"Detected objects: {', '.join(sorted(fb.detected))}\n"
           f"Current step index: {fb.step_index}\nCurrent plan:\n{plan}")
    if fb.last_failure:
        verb, cat, reason = fb.last_failure
        env += f"\nLast action failed: {verb} {cat} ({reason})"
    return PromptBundle(req.system_message, req.agent_message, env, "Audit")


def format_plan_response(keys, rationale=""):
    subs = [{"action": v, "object": o, "receptacle": r} for v, o, r in keys]
    return json.dumps({"subgoals": subs, "rationale": rationale})


def _category(value, what):
    if not isinstance(value, str) or value not in catalog.CATEGORY_INDEX:
        raise ParseError(f"unknown {what} {value!r}")
    return value


def parse_response(raw, kind):
    """Strictly parse a reply: Audit -> (keys, rationale); HostPredict -> category."""
    try:
        data = json.loads(raw)
    except (TypeError, json.JSONDecodeError) as exc:
        raise ParseError(f"not JSON: {exc}") from None
    if not isinstance(data, dict):
        raise ParseError("reply must be a JSON object")
    if kind == "HostPredict":
        return _category(data.get("host"), "host")
    if kind != "Audit":
        raise ValueError(kind)
    subs = data.get("subgoals")
    if not isinstance(subs, list) or not subs:
        raise ParseError("missing sub-goal list")
    keys = []
    for s in subs:
        if not isinstance(s, dict):
            raise ParseError("sub-goal must be an object")
        verb = s.get("action")
        if verb not in VERBS:
            raise ParseError(f"unknown verb {verb!r}")
        obj = _category(s.get("object"), "object")
        rec = s.get("receptacle")
        if rec is not None:
            rec = _category(rec, "receptacle")
        if verb == "Put" and rec is None:
            raise ParseError("Put without receptacle")
        keys.append((verb, obj, rec))
    rationale = data.get("rationale", "")
    return keys, rationale if isinstance(rationale, str) else json.dumps(rationale)


@dataclass
class Transcript:
    entries: list = field(default_factory=list)  # dicts: hash, response, episode, step

    def lookup(self, digest):
        for e in self.entries:
            if e["hash"] == digest:
                return e["response"]
        raise HashMiss(digest)

    def append(self, digest, response, episode=None, step=None):
        self.entries.append({"hash": digest, "response": response, "episode": episode,
                             "step": step})

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(json.dumps({"transcript_version": TRANSCRIPT_VERSION}) + "\n")
            for e in self.entries:
                fh.write(json.dumps(e, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            lines = [json.loads(x) for x in fh if x.strip()]
        if not lines or lines[0].get("transcript_version") != TRANSCRIPT_VERSION:
            raise ValueError(f"{path}: unsupported transcript")
        return cls(lines[1:])


class LLMClient:
    def __init__(self, mode="replay", transcript=None, endpoint=None, api_key=None,
                 model=None, timeout=20.0, record=False, opener=None):
        if mode not in ("live", "replay"):
            raise ValueError(mode)
        self.mode = mode
        self.transcript = transcript if transcript is not None else Transcript()
        self.endpoint = endpoint
        self.api_key = api_key
        self.model = model
        self.timeout = timeout
        self.record = record
        self._open = opener or urllib.request.urlopen
        self.context = {}  # episode/step keys stamped onto recorded entries

    @classmethod
    def from_env(cls, **kw):
        """Live client configured from the environment, or None when unset."""
        endpoint = os.environ.get(ENV_ENDPOINT)
        if not endpoint:
            return None
        return cls("live", endpoint=endpoint, api_key=os.environ.get(ENV_API_KEY),
                   model=os.environ.get(ENV_MODEL, "default"), **kw)

    def call(self, bundle):
        digest = bundle.digest()
        if self.mode == "replay":
            return self.transcript.lookup(digest)
        if not self.endpoint:
            raise BackendUnavailable("no endpoint configured")
        raw = self._post(bundle)
        if self.record:
            self.transcript.append(digest, raw, **self.context)
        return raw

    def _post(self, bundle):
        body = json.dumps({"model": self.model, "messages": bundle.messages(),
                           "temperature": 0}).encode()
        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        last = None
        for _ in range(2):  # one retry
            req = urllib.request.Request(self.endpoint, data=body, headers=headers)
            try:
                with self._open(req, timeout=self.timeout) as resp:
                    payload = json.loads(resp.read().decode())
                return payload["choices"][0]["message"]["content"]
            except TimeoutError as exc:
                last = Timeout(str(exc))
            except (urllib.error.URLError, OSError, KeyError, IndexError, ValueError) as exc:
                last = BackendUnavailable(f"{type(exc).__name__}: {exc}")
        raise last
