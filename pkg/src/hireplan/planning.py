"""Template sub-goal planning and the environment-aware plan auditor."""

import difflib
import logging
from dataclasses import dataclass, field, replace

from . import catalog
from .catalog import APPLIANCE_FOR, OPENABLE
from .sim.scene import UnknownTaskType

log = logging.getLogger(__name__)

VERBS = ("GoTo", "PickUp", "Put", "Open", "Close", "Clean", "Heat", "Cool", "Slice",
         "ToggleOn", "ToggleOff")
STATUSES = ("Pending", "Active", "Done", "Abandoned")
NAV_VERBS = ("GoTo",)


class IllegalEdit(ValueError):
    pass


class BackendUnavailable(RuntimeError):
    pass


@dataclass
class SubGoal:
    verb: str
    object: str
    receptacle: str = None
    status: str = "Pending"

    def __post_init__(self):
        if self.verb not in VERBS:
            raise ValueError(f"unknown verb {self.verb!r}")
        if self.status not in STATUSES:
            raise ValueError(f"unknown status {self.status!r}")
        if self.verb == "Put" and not self.receptacle:
            raise ValueError("Put needs a receptacle")

    @property
    def key(self):
        return (self.verb, self.object, self.receptacle)

    def __str__(self):
        args = self.object if self.receptacle is None else f"{self.object}, {self.receptacle}"
        return f"({self.verb}, {args})"

    def to_dict(self):
        return {"action": self.verb, "object": self.object, "receptacle": self.receptacle,
                "status": self.status}


def plan_from_keys(keys):
    return [SubGoal(*k) for k in keys]


def active_index(plan):
    for i, g in enumerate(plan):
        if g.status == "Active":
            return i
    return None


def check_plan(plan):
    if sum(g.status == "Active" for g in plan) > 1:
        raise ValueError("more than one Active sub-goal")
    return plan


# ----------------------------------------------------------------------
# templates
# ----------------------------------------------------------------------

def plan_subgoals(task):
    """Expand the task template; preconditions such as Open are left out."""
    x, y = task.mentioned_target, task.mentioned_receptacle
    fetch = [("GoTo", x), ("PickUp", x)]
    place = [("GoTo", y), ("Put", x, y)]
    t = task.task_type
    if t == "PickAndPlace":
        keys = fetch + place
    elif t == "PickTwoAndPlace":
        keys = fetch + place + fetch + place
    elif t in ("CleanAndPlace", "HeatAndPlace", "CoolAndPlace"):
        verb = t[: -len("AndPlace")]
        keys = fetch + [("GoTo", APPLIANCE_FOR[verb]), (verb, x)] + place
    elif t == "ExamineInLight":
        keys = fetch + [("GoTo", y), ("ToggleOn", y)]
    elif t == "PlaceInReceptacle":
        keys = fetch + place + [("Close", y)]
    else:
        raise UnknownTaskType(t)
    return plan_from_keys(keys)


# ----------------------------------------------------------------------
# requests, responses, edits
# ----------------------------------------------------------------------

SYSTEM_MESSAGE = (
    "You supervise a household robot that follows a list of sub-goals. "
    "Each sub-goal is a tuple (action, object[, receptacle]) with action drawn from "
    + ", ".join(VERBS) + ". Revise the list so that every step is executable in the "
    "environment described, editing only the current step and the steps after it. "
    'Reply with JSON only: {"subgoals": [{"action": ..., "object": ..., '
    '"receptacle": ...}], "rationale": ...}.'
)


@dataclass(frozen=True)
class EnvironmentalFeedback:
    detected: frozenset  # categories seen so far
    step_index: int  # index of the current sub-goal
    last_failure: tuple = None  # (verb, category, reason) of a failed interaction


@dataclass
class AuditRequest:
    system_message: str
    agent_message: str
    environmental_feedback: EnvironmentalFeedback
    current_plan: list
    kind: str = "pre"  # pre | disambiguate | failure


def build_audit_request(task, plan, detected, kind="pre", last_failure=None):
    idx = active_index(plan)
    if idx is None:
        idx = next((i for i, g in enumerate(plan) if g.status == "Pending"), len(plan))
    agent = task.instruction_text
    if task.step_by_step:
        agent += "\n" + "\n".join(task.step_by_step)
    return AuditRequest(SYSTEM_MESSAGE, agent,
                        EnvironmentalFeedback(frozenset(detected), idx, last_failure),
                        [replace(g) for g in plan], kind)


@dataclass(frozen=True)
class Edit:
    kind: str  # Insert | Delete | Substitute
    position: int  # index in the plan the edit was computed against
    subgoal: tuple = None  # key of the inserted or substituted sub-goal


@dataclass
class AuditResponse:
    revised_plan: list
    edits: list = field(default_factory=list)
    rationale: str = ""
    backend: str = "rule"
    focus: int = None  # recovery only: index in revised_plan that becomes Active


def _opcodes(a, b):
    """difflib opcodes anchored on the common prefix and suffix, so repeated
    sub-goal patterns do not shift an edit onto an earlier copy."""
    p = 0
    while p < min(len(a), len(b)) and a[p] == b[p]:
        p += 1
    q = 0
    while q < min(len(a), len(b)) - p and a[len(a) - 1 - q] == b[len(b) - 1 - q]:
        q += 1
    ops = [("equal", 0, p, 0, p)] if p else []
    mid = difflib.SequenceMatcher(a=a[p:len(a) - q], b=b[p:len(b) - q], autojunk=False)
    for tag, i1, i2, j1, j2 in mid.get_opcodes():
        ops.append((tag, i1 + p, i2 + p, j1 + p, j2 + p))
    if q:
        ops.append(("equal", len(a) - q, len(a), len(b) - q, len(b)))
    return ops


def diff_edits(old, new):
    """Edit script turning ``old`` into ``new`` (keys compared, statuses ignored)."""
    a = [g.key for g in old]
    b = [g.key for g in new]
    edits = []
    for tag, i1, i2, j1, j2 in _opcodes(a, b):
        if tag == "equal":
            continue
        if tag == "replace" and i2 - i1 == j2 - j1:
            edits += [Edit("Substitute", i1 + k, b[j1 + k]) for k in range(i2 - i1)]
            continue
        if tag in ("replace", "delete"):
            edits += [Edit("Delete", i, a[i]) for i in range(i1, i2)]
        if tag in ("replace", "insert"):
            edits += [Edit("Insert", i1, b[j]) for j in range(j1, j2)]
    return edits


def apply_revision(plan, resp):
    """Adopt ``resp.revised_plan`` if it leaves the Done prefix intact.

    Statuses of the result are recomputed: Done sub-goals are copied from
    ``plan``; the Active marker stays on the same sub-goal if it survived,
    otherwise moves to whatever now sits at the old Active position.
    """
    check_plan(plan)
    new = [SubGoal(g.verb, g.object, g.receptacle) for g in resp.revised_plan]
    done = 0
    while done < len(plan) and plan[done].status in ("Done", "Abandoned"):
        done += 1
    for g in plan[done:]:
        if g.status == "Done":
            raise IllegalEdit("Done sub-goal after the current one")
    if len(new) < done or [g.key for g in new[:done]] != [g.key for g in plan[:done]]:
        raise IllegalEdit("revision modifies completed sub-goals")
    for e in resp.edits:
        if e.position < done:
            raise IllegalEdit(f"edit at {e.position} touches completed sub-goal")
    for i in range(done):
        new[i].status = plan[i].status
    act = active_index(plan)
    if act is not None:
        ops = _opcodes([g.key for g in plan], [g.key for g in new])
        target = None
        for tag, i1, i2, j1, j2 in ops:
            if tag == "equal" and i1 <= act < i2:
                target = j1 + (act - i1)
            elif tag == "replace" and i1 <= act < i2:
                target = min(j1 + (act - i1), j2 - 1)
        if target is None:
            target = min(max(done, act), len(new) - 1)
        if resp.focus is not None:
            if not done <= resp.focus < len(new):
                raise IllegalEdit(f"focus {resp.focus} outside the editable range")
            target = resp.focus
        # nothing left past the Done prefix: the plan is finished, not re-opened
        if done <= target < len(new):
            new[target].status = "Active"
    return check_plan(new)


# ----------------------------------------------------------------------
# triggers
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class StepBudget:
    nav: int = 40
    interact: int = 10

    def for_verb(self, verb):
        return self.nav if verb in NAV_VERBS else self.interact


@dataclass
class SubGoalProgress:
    active: int = 0
    verb: str = "GoTo"
    steps_on_active: int = 0
    audits_fired: int = 0
    corrections_applied: int = 0
    fired_multiples: set = field(default_factory=set)

    def reset(self, active, verb):
        self.active = active
        self.verb = verb
        self.steps_on_active = 0
        self.fired_multiples = set()


def should_trigger_audit(progress, budget=StepBudget()):
    b = budget.for_verb(progress.verb)
    if progress.steps_on_active < b:
        return False
    return progress.steps_on_active // b not in progress.fired_multiples


def record_trigger(progress, budget=StepBudget()):
    progress.fired_multiples.add(progress.steps_on_active // budget.for_verb(progress.verb))
    progress.audits_fired += 1


# ----------------------------------------------------------------------
# auditor backends
# ----------------------------------------------------------------------

class RuleAuditor:
    """Deterministic auditor driven by the co-occurrence and synonym tables."""

    name = "rule"

    def __init__(self, close_after_open=False):
        self.close_after_open = close_after_open

    def audit(self, req):
        if req.kind == "pre":
            return self.pre_execution(req)
        if req.kind == "failure":
            return self.recover(req)
        return self.disambiguate(req)

    # -- interaction failure ----------------------------------------------
    def recover(self, req):
        """A closed receptacle refused the Active interaction: open it first."""
        plan = req.current_plan
        keys = [g.key for g in plan]
        act = active_index(plan)
        failure = req.environmental_feedback.last_failure
        if act is None or not failure or failure[2] != "ReceptacleClosed":
            return _response(plan, keys, "nothing to recover")
        verb, obj, rec = keys[act]
        need = rec if verb == "Put" else APPLIANCE_FOR.get(verb)
        if need is None and verb == "PickUp":
            need = next((h for h, _ in catalog.cooccurrence().get(obj, ()) if h in OPENABLE), None)
        if need not in OPENABLE:
            return _response(plan, keys, f"cannot tell what to open for {verb}")
        keys.insert(act, ("Open", need, None))
        resp = _response(plan, keys, f"{need} was closed")
        resp.focus = act
        return resp

    # -- pre-execution --------------------------------------------------
    def pre_execution(self, req):
        plan = req.current_plan
        detected = req.environmental_feedback.detected
        keys = [self._substitute(g.key) for g in plan]
        frozen = sum(1 for g in plan if g.status in ("Done", "Abandoned"))
        out = keys[:frozen]
        reasons = []
        for i in range(frozen, len(keys)):
            verb, obj, rec = keys[i]
            need = None
            if verb == "PickUp" and obj not in detected:
                host = _only_openable_host(obj)
                if host:
                    need = host
                    # open before walking to the object
                    at = len(out)
                    if at > frozen and out[-1] == ("GoTo", obj, None):
                        at -= 1
                    if not _opened_before(out, host, at):
                        out.insert(at, ("Open", host, None))
                        reasons.append(f"{obj} is usually kept in a closed {host}")
                    out.append(keys[i])
                    continue
            if verb == "Put" and rec in OPENABLE:
                need = rec
            elif verb in APPLIANCE_FOR and APPLIANCE_FOR[verb] in OPENABLE:
                need = APPLIANCE_FOR[verb]
            if need and not _opened_before(out, need, len(out)):
                out.append(("Open", need, None))
                reasons.append(f"{need} must be open for {verb}")
            out.append(keys[i])
            if need and self.close_after_open and verb in ("Put", "Heat", "Cool"):
                nxt = keys[i + 1] if i + 1 < len(keys) else None
                if nxt != ("Close", need, None):
                    out.append(("Close", need, None))
        for a, b in zip(plan, keys):
            if a.key != b:
                reasons.append(f"{a.object} is not a known object; using {b[1]}")
        return _response(plan, out, "; ".join(reasons))

    @staticmethod
    def _substitute(key):
        verb, obj, rec = key

        def fix(c):
            if c is None or c in catalog.CATEGORY_INDEX:
                return c
            return catalog.nearest_category(c, catalog.CATEGORIES) or c

        return (verb, fix(obj), fix(rec))

    # -- disambiguation -------------------------------------------------
    def disambiguate(self, req):
        plan = req.current_plan
        detected = req.environmental_feedback.detected
        act = active_index(plan)
        if act is None:
            return _response(plan, [g.key for g in plan], "no active sub-goal")
        obj = plan[act].object
        if obj in detected:
            return _response(plan, [g.key for g in plan], f"{obj} already observed")
        sub = catalog.nearest_category(obj, detected)
        if sub is None:
            return _response(plan, [g.key for g in plan], f"nothing observed resembles {obj}")
        keys = []
        for i, g in enumerate(plan):
            v, o, r = g.key
            if i >= act and g.status in ("Active", "Pending"):
                o = sub if o == obj else o
                r = sub if r == obj else r
            keys.append((v, o, r))
        return _response(plan, keys, f"{obj} not seen but {sub} was")


def _only_openable_host(category):
    table = catalog.cooccurrence().get(category)
    if not table:
        return None
    if all(h in OPENABLE for h, _ in table):
        return table[0][0]
    return None


def _opened_before(keys, category, at):
    """True when the last Open/Close of ``category`` before ``at`` is an Open."""
    for verb, obj, _ in reversed(keys[:at]):
        if obj == category and verb in ("Open", "Close"):
            return verb == "Open"
    return False


def _response(plan, keys, rationale):
    revised = plan_from_keys(keys)
    return AuditResponse(revised, diff_edits(plan, revised), rationale)


class LLMAuditor:
    """Auditor that asks a chat model and falls back to the rule backend."""

    name = "llm"

    def __init__(self, bridge, fallback=None):
        self.bridge = bridge
        self.fallback = fallback or RuleAuditor()
        self.events = []

    def audit(self, req):
        from .llm import ParseError, parse_response, render_prompt

        try:
            raw = self.bridge.call(render_prompt(req))
            keys, rationale = parse_response(raw, "Audit")
            resp = _response(req.current_plan, keys, rationale)
            resp.backend = "llm"
            act = active_index(req.current_plan)
            if req.kind == "failure" and act is not None:
                old = [g.key for g in req.current_plan]
                if keys[:act] == old[:act] and keys[act:act + 1] != old[act:act + 1]:
                    resp.focus = act
            return resp
        except (BackendUnavailable, ParseError, ValueError) as exc:
            log.info("auditor fallback: %s", exc)
            self.events.append({"fallback": type(exc).__name__, "detail": str(exc)})
            return self.fallback.audit(req)
