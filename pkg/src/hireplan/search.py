"""Commonsense-guided search for small objects that have not been mapped yet."""

import logging
from dataclasses import dataclass, field

import numpy as np

from . import catalog
from .catalog import OPENABLE
from .navigation import cells_within, distance_field

log = logging.getLogger(__name__)

PHASES = ("Idle", "Predicting", "Visiting", "Exhausted", "Found")


class NoHostKnown(LookupError):
    pass


@dataclass(frozen=True)
class SearchDirective:
    kind: str  # Found | Navigate | OpenAndInspect | AdvanceQueue | Explore | Exhausted
    instance: int = None
    goals: frozenset = None
    open_first: bool = False
    z: int = None

    def to_dict(self):
        d = {"kind": self.kind}
        if self.instance is not None:
            d["instance"] = int(self.instance)
        if self.kind == "OpenAndInspect":
            d["open_first"] = self.open_first
        return d


def needs_search(imap, target):
    return not imap.has_category(target)


# ----------------------------------------------------------------------
# host prediction
# ----------------------------------------------------------------------

class RuleHostPredictor:
    name = "rule"

    def __init__(self, table=None):
        self.table = table if table is not None else catalog.cooccurrence()

    def predict(self, target, mapped=(), exclude=(), request=None):
        """Heaviest host already on the map, else heaviest overall."""
        hosts = [h for h, _ in self.table.get(target, ()) if h not in exclude]
        if not hosts:
            raise NoHostKnown(target)
        for h in hosts:
            if h in mapped:
                return h
        return hosts[0]


class LLMHostPredictor:
    name = "llm"

    def __init__(self, client, fallback=None):
        self.client = client
        self.fallback = fallback or RuleHostPredictor()
        self.events = []

    def predict(self, target, mapped=(), exclude=(), request=None):
        from .llm import HostRequest, ParseError, parse_response, render_prompt
        from .planning import BackendUnavailable

        req = request or HostRequest(target, f"Find the {target}.")
        try:
            host = parse_response(self.client.call(render_prompt(req)), "HostPredict")
            if host in exclude:
                raise ParseError(f"{host} was already searched")
            return host
        except (BackendUnavailable, ParseError) as exc:
            log.info("host predictor fallback: %s", exc)
            self.events.append({"fallback": type(exc).__name__, "detail": str(exc)})
            return self.fallback.predict(target, mapped, exclude)


def predict_host(target, mapped=(), table=None, backend=None, exclude=()):
    backend = backend or RuleHostPredictor(table)
    return backend.predict(target, set(mapped), set(exclude))


# ----------------------------------------------------------------------
# instance-wise visiting
# ----------------------------------------------------------------------

def build_visit_queue(imap, host, agent_cell, skip=()):
    """Unvisited instances of ``host``, nearest first, one per stacked column."""
    out, covered = [], set(skip)
    for iid, _, _ in imap.query_instances(host, agent_cell, only_unvisited=True):
        if iid in covered:
            continue
        out.append(iid)
        covered.update(imap.column(iid))
    return out


@dataclass
class SearchState:
    target: str
    host: str = None
    queue: list = field(default_factory=list)
    phase: str = "Idle"
    inspected: set = field(default_factory=set)  # heads whose inspection finished
    opened: set = field(default_factory=set)
    failed_hosts: list = field(default_factory=list)
    repredicted: bool = False
    head_steps: int = 0
    explore_steps: int = 0
    open_attempts: int = 0
    tried_frontiers: set = field(default_factory=set)
    bad_cells: dict = field(default_factory=dict)  # instance -> cells where opening failed

    def head(self):
        return self.queue[0] if self.queue else None


def start_search(target, imap, pose, predictor, exclude=()):
    state = SearchState(target, phase="Predicting")
    try:
        state.host = predictor.predict(target, imap.categories(), exclude)
    except NoHostKnown:
        state.phase = "Exhausted"
        return state
    state.queue = build_visit_queue(imap, state.host, pose.cell)
    state.phase = "Visiting" if state.queue else "Exhausted"
    return state


def approach_cells(imap, iid, radius):
    cells = set()
    for j in imap.column(iid):
        cells |= imap.instances[j].footprint
    blocked = imap.blocked()
    return frozenset(rc for rc in cells_within(cells, radius, imap.grid_shape) if not blocked[rc])


def _refresh(state, imap, pose):
    if state.host is None:
        return
    covered = set()
    for iid in state.queue:
        covered.update(imap.column(iid) if iid in imap.instances else ())
    covered |= state.inspected
    new = build_visit_queue(imap, state.host, pose.cell, skip=covered)
    if new:
        state.queue.extend(new)
        if state.phase == "Exhausted":
            state.phase = "Visiting"


def search_step(state, imap, pose, radius=2.0, cap=40, predictor=None, explore_cap=30,
                ignore=()):
    """Next directive of the instance-wise search; does not touch the world.

    ``ignore`` lists target instances the caller already ruled out (stale or
    delivered ones) so they do not count as found.
    """
    found = [f for f in imap.query_instances(state.target, pose.cell) if f[0] not in ignore]
    if found:
        state.phase = "Found"
        return SearchDirective("Found", found[0][0])
    _refresh(state, imap, pose)
    if state.queue:
        head = state.queue[0]
        if head not in imap.instances or head in state.inspected or state.head_steps >= cap:
            if head in imap.instances:
                for j in imap.column(head):
                    imap.mark_visited(j)
            state.inspected.add(head)
            state.queue.pop(0)
            state.head_steps = 0
            state.open_attempts = 0
            if not state.queue:
                state.phase = "Exhausted"
            return SearchDirective("AdvanceQueue", head)
        goals = approach_cells(imap, head, radius) - state.bad_cells.get(head, frozenset())
        inst = imap.instances[head]
        if pose.cell in goals or not goals:
            open_first = state.host in OPENABLE and head not in state.opened
            return SearchDirective("OpenAndInspect", head, goals, open_first, inst.z)
        return SearchDirective("Navigate", head, goals)
    state.phase = "Exhausted"
    frontier = frontier_cells(imap, exclude=state.tried_frontiers)
    if frontier and state.explore_steps < explore_cap:
        return SearchDirective("Explore", goals=frozenset(frontier))
    if predictor is not None and not state.repredicted and state.host is not None:
        state.repredicted = True
        state.failed_hosts.append(state.host)
        try:
            state.host = predictor.predict(state.target, imap.categories(), state.failed_hosts)
        except NoHostKnown:
            state.host = None
        if state.host is not None:
            state.queue = build_visit_queue(imap, state.host, pose.cell, skip=state.inspected)
            state.explore_steps = 0
            state.phase = "Visiting" if state.queue else "Exhausted"
            return SearchDirective("AdvanceQueue")
    if frontier:
        return SearchDirective("Explore", goals=frozenset(frontier))
    return SearchDirective("Exhausted")


# ----------------------------------------------------------------------
# exploration and the pooled-heatmap baseline
# ----------------------------------------------------------------------

def frontier_cells(imap, exclude=()):
    """Known-free cells with an unknown 4-neighbour."""
    blocked = imap.blocked()
    free = imap.explored & ~blocked
    unknown = ~imap.explored & ~blocked
    nb = np.zeros_like(unknown)
    nb[1:, :] |= unknown[:-1, :]
    nb[:-1, :] |= unknown[1:, :]
    nb[:, 1:] |= unknown[:, :-1]
    nb[:, :-1] |= unknown[:, 1:]
    cells = {(int(r), int(c)) for r, c in np.argwhere(free & nb)}
    return sorted(cells - set(exclude))


def block_edges(n, k=8):
    return [(i * n) // k for i in range(k + 1)]


def pool(presence, k=8):
    """Sum ``presence`` (H, W) into a k x k grid of contiguous blocks."""
    H, W = presence.shape
    re, ce = block_edges(H, k), block_edges(W, k)
    out = np.zeros((k, k))
    for i in range(k):
        for j in range(k):
            out[i, j] = presence[re[i]:re[i + 1], ce[j]:ce[j + 1]].sum()
    return out


def heatmap_search_stub(imap, target, table=None):
    """Centre cell of the densest 8x8 block of the target's host categories.

    No instance enumeration, no visited masking, no opening. Ties go to the
    top-left block.
    """
    table = table if table is not None else catalog.cooccurrence()
    H, W = imap.grid_shape
    presence = np.zeros((H, W))
    for host, _ in table.get(target, ()):
        presence += (imap.grid[catalog.CATEGORY_INDEX[host]] > 0).any(axis=-1)
    heat = pool(presence)
    i, j = np.unravel_index(int(np.argmax(heat)), heat.shape)
    re, ce = block_edges(H), block_edges(W)
    r0, r1 = re[i], max(re[i + 1], re[i] + 1)
    c0, c1 = ce[j], max(ce[j + 1], ce[j] + 1)
    return ((r0 + r1 - 1) // 2, (c0 + c1 - 1) // 2)


def nearest_goal_field(imap, goals, agent_cell):
    blocked = imap.blocked().copy()
    blocked[agent_cell] = False
    return distance_field(blocked, goals)
