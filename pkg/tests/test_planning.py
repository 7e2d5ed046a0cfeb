import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hireplan import catalog
from hireplan.oracle import simulate_plan
from hireplan.planning import (
    AuditResponse, IllegalEdit, RuleAuditor, StepBudget, SubGoal, SubGoalProgress,
    apply_revision, build_audit_request, diff_edits, plan_from_keys, plan_subgoals,
    record_trigger, should_trigger_audit,
)
from hireplan.sim import ProfileInfeasible, SceneProfile, Simulator, UnknownTaskType, make_episode
from hireplan.sim.scene import TASK_TYPES

from .scenes import task

PNP = [("GoTo", "Mug", None), ("PickUp", "Mug", None), ("GoTo", "CounterTop", None),
       ("Put", "Mug", "CounterTop")]


def keys(plan):
    return [g.key for g in plan]


def with_status(plan_keys, active):
    plan = plan_from_keys(plan_keys)
    for i, g in enumerate(plan):
        g.status = "Done" if i < active else "Active" if i == active else "Pending"
    return plan


# ----------------------------------------------------------------------
# templates
# ----------------------------------------------------------------------

def test_pick_and_place_template():
    assert keys(plan_subgoals(task("PickAndPlace", "Mug", "CounterTop"))) == PNP


def test_clean_template_inserts_sink_stage():
    got = keys(plan_subgoals(task("CleanAndPlace", "Mug", "CounterTop")))
    assert got == PNP[:2] + [("GoTo", "Sink", None), ("Clean", "Mug", None)] + PNP[2:]


def test_heat_template_inserts_microwave_stage():
    got = keys(plan_subgoals(task("HeatAndPlace", "Egg", "CounterTop")))
    assert got[2:4] == [("GoTo", "Microwave", None), ("Heat", "Egg", None)]


def test_templates_never_open():
    for tt in TASK_TYPES:
        t = task(tt, "Mug", "Cabinet")
        assert all(g.verb not in ("Open",) for g in plan_subgoals(t))


def test_unknown_task_type():
    t = task("PickAndPlace", "Mug", "CounterTop")
    t.task_type = "Juggle"
    with pytest.raises(UnknownTaskType):
        plan_subgoals(t)


def test_subgoal_schema_guards():
    with pytest.raises(ValueError):
        SubGoal("Dance", "Mug")
    with pytest.raises(ValueError):
        SubGoal("Put", "Mug")


# ----------------------------------------------------------------------
# pre-execution audit
# ----------------------------------------------------------------------

def audit(plan, detected=(), kind="pre", t=None):
    t = t or task("PickAndPlace", "Mug", "CounterTop")
    return RuleAuditor().audit(build_audit_request(t, plan, detected, kind))


def test_hidden_sponge_gets_open_cabinet_before_pickup():
    plan = plan_from_keys([("GoTo", "DishSponge", None), ("PickUp", "DishSponge", None),
                           ("GoTo", "Sink", None), ("Put", "DishSponge", "Sink")])
    resp = audit(plan, detected={"Sink", "Cabinet"})
    got = keys(resp.revised_plan)
    assert ("Open", "Cabinet", None) in got
    assert got.index(("Open", "Cabinet", None)) < got.index(("PickUp", "DishSponge", None))
    assert any(e.kind == "Insert" and e.subgoal == ("Open", "Cabinet", None) for e in resp.edits)


def test_audit_is_idempotent():
    plan = plan_from_keys([("GoTo", "DishSponge", None), ("PickUp", "DishSponge", None),
                           ("GoTo", "Fridge", None), ("Put", "DishSponge", "Fridge")])
    once = audit(plan)
    assert once.edits
    twice = audit(once.revised_plan)
    assert twice.edits == []


def test_non_catalog_name_is_substituted():
    plan = plan_from_keys([("GoTo", "Mug", None), ("PickUp", "Mug", None),
                           ("GoTo", "TrashBin", None), ("Put", "Mug", "TrashBin")])
    resp = audit(plan, detected={"Mug"})
    # exhaustive oracle: score every catalog category, keep the unique best
    scores = {c: catalog.similarity("TrashBin", c) for c in catalog.CATEGORIES}
    best = max(scores.values())
    want = sorted(c for c, s in scores.items() if s == best)[0]
    assert want == "GarbageCan"
    assert ("Put", "Mug", want) in keys(resp.revised_plan)
    assert {e.kind for e in resp.edits} == {"Substitute"}


def test_feasible_plans_are_left_alone():
    """Soundness: plans the privileged oracle completes unaided get no edits."""
    checked = 0
    for seed in range(120):
        try:
            scene, t = make_episode(seed, SceneProfile(occlusion_rate=0.0),
                                    TASK_TYPES[seed % len(TASK_TYPES)])
        except ProfileInfeasible:
            continue
        plan = plan_subgoals(t)
        if not simulate_plan(scene, t, plan).success:
            continue
        checked += 1
        resp = RuleAuditor().audit(build_audit_request(t, plan, Simulator(scene).observe().categories))
        assert resp.edits == [], (seed, resp.rationale)
    assert checked >= 20


def test_close_after_open_flag():
    plan = plan_from_keys([("GoTo", "Mug", None), ("PickUp", "Mug", None),
                           ("GoTo", "Fridge", None), ("Put", "Mug", "Fridge")])
    req = build_audit_request(task("PickAndPlace", "Mug", "Fridge"), plan, {"Mug"})
    off = keys(RuleAuditor().audit(req).revised_plan)
    on = keys(RuleAuditor(close_after_open=True).audit(req).revised_plan)
    assert ("Close", "Fridge", None) not in off
    assert on[-1] == ("Close", "Fridge", None)


# ----------------------------------------------------------------------
# triggers
# ----------------------------------------------------------------------

def test_trigger_thresholds_and_refire():
    b = StepBudget()
    p = SubGoalProgress(verb="GoTo", steps_on_active=b.nav - 1)
    assert not should_trigger_audit(p, b)
    p.steps_on_active = b.nav
    assert should_trigger_audit(p, b)
    record_trigger(p, b)
    p.steps_on_active = b.nav + 1
    assert not should_trigger_audit(p, b)
    p.steps_on_active = 2 * b.nav
    assert should_trigger_audit(p, b)


def test_interaction_budget():
    b = StepBudget()
    assert should_trigger_audit(SubGoalProgress(verb="PickUp", steps_on_active=b.interact), b)


@given(st.integers(1, 50), st.integers(1, 20), st.sampled_from(["GoTo", "Put"]))
def test_trigger_is_monotone_without_firing(nav, interact, verb):
    b = StepBudget(nav=nav, interact=interact)
    p = SubGoalProgress(verb=verb)
    prev = False
    for n in range(120):
        p.steps_on_active = n
        now = should_trigger_audit(p, b)
        assert now >= prev
        prev = now


# ----------------------------------------------------------------------
# disambiguation
# ----------------------------------------------------------------------

def test_cup_becomes_mug_when_mug_is_seen():
    plan = with_status([("GoTo", "Cup", None), ("PickUp", "Cup", None),
                        ("GoTo", "Sink", None), ("Put", "Cup", "Sink")], 1)
    resp = audit(plan, detected={"Mug", "Sink"}, kind="disambiguate")
    assert keys(resp.revised_plan)[1] == ("PickUp", "Mug", None)
    assert keys(resp.revised_plan)[3] == ("Put", "Mug", "Sink")
    assert keys(resp.revised_plan)[0] == ("GoTo", "Cup", None)  # Done prefix untouched


def test_present_target_needs_nothing():
    plan = with_status(PNP, 1)
    assert audit(plan, detected={"Mug"}, kind="disambiguate").edits == []


def test_no_substitute_leaves_plan():
    plan = with_status(PNP, 1)
    resp = audit(plan, detected={"Apple"}, kind="disambiguate")
    assert resp.edits == [] and resp.rationale


# ----------------------------------------------------------------------
# revision
# ----------------------------------------------------------------------

def test_insert_before_active_keeps_active():
    plan = with_status(PNP, 1)
    new = plan_from_keys(PNP[:1] + [("Open", "Cabinet", None)] + PNP[1:])
    out = apply_revision(plan, AuditResponse(new, diff_edits(plan, new)))
    assert [g.status for g in out][:3] == ["Done", "Pending", "Active"]
    assert out[2].key == ("PickUp", "Mug", None)


def test_edit_of_done_subgoal_is_rejected():
    plan = with_status(PNP, 2)
    before = [(g.key, g.status) for g in plan]
    new = plan_from_keys([("GoTo", "Cup", None)] + PNP[1:])
    with pytest.raises(IllegalEdit):
        apply_revision(plan, AuditResponse(new, diff_edits(plan, new)))
    assert [(g.key, g.status) for g in plan] == before


def test_substituted_active_stays_active():
    plan = with_status(PNP, 1)
    new = plan_from_keys([PNP[0], ("PickUp", "Cup", None)] + PNP[2:])
    out = apply_revision(plan, AuditResponse(new, diff_edits(plan, new)))
    assert out[1].key == ("PickUp", "Cup", None) and out[1].status == "Active"


def _random_keys(rng, n):
    verbs = ["GoTo", "PickUp", "Open", "Close", "Clean"]
    cats = ["Mug", "Cabinet", "Apple", "Sink"]
    return [(rng.choice(verbs), rng.choice(cats), None) for _ in range(n)]


def test_revision_never_touches_done_prefix():
    rng = random.Random(0)
    for _ in range(1000):
        n = rng.randint(1, 8)
        plan_keys = _random_keys(rng, n)
        active = rng.randint(0, n - 1)
        plan = with_status(plan_keys, active)
        new_keys = list(plan_keys)
        for _ in range(rng.randint(1, 3)):
            op = rng.choice(["ins", "del", "sub"])
            i = rng.randint(0, len(new_keys))
            if op == "ins":
                new_keys.insert(i, _random_keys(rng, 1)[0])
            elif new_keys and i < len(new_keys):
                if op == "del":
                    new_keys.pop(i)
                else:
                    new_keys[i] = _random_keys(rng, 1)[0]
        new = plan_from_keys(new_keys)
        resp = AuditResponse(new, diff_edits(plan, new))
        try:
            out = apply_revision(plan, resp)
        except IllegalEdit:
            assert new_keys[:active] != plan_keys[:active] or any(
                e.position < active for e in resp.edits)
            continue
        assert [(g.key, g.status) for g in out[:active]] == [(k, "Done") for k in plan_keys[:active]]
        assert sum(g.status == "Active" for g in out) <= 1
