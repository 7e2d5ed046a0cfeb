import json

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.utils.estimator_checks import check_get_params_invariance

from hireplan.correction import (
    KEEP, LABELS, DegenerateDataset, FeasibilityCorrector, FeasibilityFeatures, RuleCorrector,
    correct, evaluate_corrector, extract_features, generate_dataset, load_dataset, load_model,
    rule_corrector, save_dataset, save_model, split_by_episode, train_corrector,
)
from hireplan.evaluation import default_suite
from hireplan.sim import NAV_KINDS, Action, Simulator
from hireplan.sim.scene import Scene

from .scenes import room, task


def feats(planned, visible=True, depth=1.0, offset=0, ahead=True, holding=False, area=0.1):
    return FeasibilityFeatures(visible, area if visible else 0.0, depth, offset, ahead, holding, planned)


# ----------------------------------------------------------------------
# the three worked scenarios
# ----------------------------------------------------------------------

def test_too_far_to_pick_up_knife():
    assert rule_corrector(feats("PickUp", depth=3.0)) == "MoveAhead"


def test_too_low_to_put():
    assert rule_corrector(feats("Put", offset=1, holding=True)) == "LookUp"


def test_blocked_move_ahead():
    assert rule_corrector(feats("MoveAhead", visible=False, ahead=False)) == "RotateRight"


def test_knife_scene_end_to_end():
    s = room(9, 9, furniture=[("CounterTop", [(4, 5), (4, 6)])], small=[("Knife", 0, 0)],
             agent=(4, 1, 1))
    sim = Simulator(s)
    planned = Action("PickUp", "Knife")
    act, label, f = correct(sim.observe(), planned, RuleCorrector())
    assert (act, label) == (Action("MoveAhead"), "MoveAhead")
    assert f.target_visible and f.target_min_depth > 2.0
    assert sim.clone().step(planned).failure_reason == "TooFar"


def test_low_viewpoint_scene_end_to_end():
    s = room(furniture=[("UpperCabinet", [(3, 5)]), ("CounterTop", [(2, 4)])],
             small=[("Pan", 1, 0)], agent=(3, 4, 1))
    sim = Simulator(s)
    sim.step(Action("RotateLeft"))
    assert sim.step(Action("PickUp", "Pan")).success
    sim.step(Action("RotateRight"))
    sim.step(Action("LookUp"))
    assert sim.step(Action("Open", "Cabinet")).success
    sim.step(Action("LookDown"))
    planned = Action("Put", "Cabinet")
    act, label, _ = correct(sim.observe(), planned, RuleCorrector())
    assert (act, label) == (Action("LookUp"), "LookUp")
    assert sim.clone().step(planned).failure_reason == "WrongPitch"
    sim.step(act)
    assert sim.step(planned).success


def test_wall_scene_end_to_end():
    sim = Simulator(room(agent=(1, 3, 0)))
    act, label, f = correct(sim.observe(), Action("MoveAhead"), RuleCorrector())
    assert (act, label) == (Action("RotateRight"), "RotateRight")
    assert not f.cell_ahead_free


# ----------------------------------------------------------------------
# rule semantics
# ----------------------------------------------------------------------

def test_feasible_keeps_plan():
    assert rule_corrector(feats("PickUp")) == KEEP
    assert rule_corrector(feats("MoveAhead")) == KEEP
    assert rule_corrector(feats("LookDown", visible=False)) == KEEP


def test_distance_precedes_pitch():
    assert rule_corrector(feats("Put", depth=4.0, offset=1)) == "MoveAhead"


def test_invisible_target_scans():
    assert rule_corrector(feats("Open", visible=False, depth=12.0)) == "RotateRight"


def test_keep_is_identity_and_substitutes_are_target_free():
    sim = Simulator(room(9, 9, furniture=[("CounterTop", [(4, 5), (4, 6)])],
                         small=[("Knife", 0, 0)], agent=(4, 3, 1)))
    obs = sim.observe()
    for planned in [Action("PickUp", "Knife"), Action("MoveAhead"), Action("Open", "Fridge"),
                    Action("Put", "CounterTop"), Action("RotateLeft")]:
        act, label, _ = correct(obs, planned, RuleCorrector())
        if label == KEEP:
            assert act is planned
        else:
            assert act.kind in NAV_KINDS and act.target is None
            assert sim.clone().step(act).failure_reason != "InvalidTarget"


def test_features_see_only_the_observation():
    sim = Simulator(room(agent=(3, 3, 0)))
    obs = sim.observe()
    a = extract_features(obs, Action("PickUp", "Apple"))
    sim.scene.objects.clear()  # ground truth gone; the same observation gives the same features
    assert extract_features(obs, Action("PickUp", "Apple")) == a


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------

def episodes(n, seed=1):
    out = []
    for spec in default_suite(n, seed).episodes:
        scene, task = spec.build()
        out.append((spec.episode_id, scene, task, spec.seed))
    return out


@pytest.fixture(scope="module")
def small_dataset():
    return generate_dataset(episodes(20), perturb_rate=0.3, max_steps=100, keep_states=True)


def test_dataset_is_deterministic(small_dataset):
    again = generate_dataset(episodes(20), perturb_rate=0.3, max_steps=100, keep_states=True)
    assert [r.to_dict() for r in again] == [r.to_dict() for r in small_dataset]


def test_successful_steps_keep_their_label(small_dataset):
    for r in small_dataset:
        if r.outcome_success:
            assert r.label == KEEP
        else:
            assert r.label == rule_corrector(r.features)
        assert r.label in LABELS


def test_too_far_failures_relabel_to_move_ahead(small_dataset):
    far = [r for r in small_dataset if r.outcome_reason == "TooFar"]
    assert far
    for r in far:
        want = "RotateRight" if not r.features.target_visible else "MoveAhead"
        assert r.label == want


def test_relabel_is_sound_under_replay(small_dataset):
    failed = [r for r in small_dataset if not r.outcome_success and r.state][:200]
    assert len(failed) >= 20
    for r in failed:
        sim = Simulator(Scene.from_dict(r.state["scene"]))
        for k, v in r.state["agent"].items():
            setattr(sim.agent, k, v)
        if r.label == KEEP:
            continue
        out = sim.step(Action(r.label))
        assert out.success or out.failure_reason != r.outcome_reason


def test_zero_failure_episode_labels_are_keep():
    s = room(furniture=[("CounterTop", [(2, 4)]), ("Shelf", [(4, 4)])], small=[("Mug", 0, 0)],
             agent=(3, 3, 1))
    recs = generate_dataset([("e", s, task("PickAndPlace", "Mug", "Shelf"), 0)],
                            perturb_rate=0.0, keep_fraction=1.0)
    assert recs and all(r.outcome_success and r.label == KEEP for r in recs)


def test_keep_fraction_thins_only_keep_records():
    eps = episodes(6)
    full = generate_dataset(eps, perturb_rate=0.3, max_steps=80, keep_fraction=1.0)
    thin = generate_dataset(eps, perturb_rate=0.3, max_steps=80, keep_fraction=0.2)
    assert [r.to_dict() for r in full if r.label != KEEP] == [r.to_dict() for r in thin if r.label != KEEP]
    assert sum(r.label == KEEP for r in thin) < sum(r.label == KEEP for r in full)
    with pytest.raises(ValueError):
        generate_dataset(eps, keep_fraction=0.0)


def test_dataset_round_trip(tmp_path, small_dataset):
    p = tmp_path / "d.jsonl"
    save_dataset(small_dataset, p)
    assert [r.to_dict() for r in load_dataset(p)] == [r.to_dict() for r in small_dataset]
    head = json.loads(p.read_text().splitlines()[0])
    assert head["schema_version"] == 1


def test_split_is_by_episode(small_dataset):
    train, held = split_by_episode(small_dataset, 3)
    assert {r.episode for r in train}.isdisjoint({r.episode for r in held})
    assert len(train) + len(held) == len(small_dataset)


# ----------------------------------------------------------------------
# learned corrector
# ----------------------------------------------------------------------

def test_single_class_is_degenerate(small_dataset):
    keep = [r for r in small_dataset if r.label == KEEP]
    with pytest.raises(DegenerateDataset):
        train_corrector(keep)


def test_training_is_deterministic_and_reports(small_dataset):
    m1, _, held = train_corrector(small_dataset, split_seed=0)
    m2, _, _ = train_corrector(small_dataset, split_seed=0)
    r1, r2 = evaluate_corrector(m1, held), evaluate_corrector(m2, held)
    assert r1 == r2
    counts = {}
    for r in held:
        counts[r.label] = counts.get(r.label, 0) + 1
    assert r1["majority_share"] == max(counts.values()) / len(held)
    assert r1["n"] == len(held)


def test_rule_corrector_scores_perfectly_on_its_labels(small_dataset):
    rep = evaluate_corrector(RuleCorrector(), small_dataset)
    assert rep["accuracy"] == 1.0 and rep["rule_agreement"] == 1.0


def test_constant_predictor_scores_majority(small_dataset):
    class Const:
        def predict(self, X):
            return np.array([KEEP] * len(X), dtype=object)

    rep = evaluate_corrector(Const(), small_dataset)
    assert rep["accuracy"] == pytest.approx(rep["majority_share"])


@pytest.mark.filterwarnings("ignore::sklearn.exceptions.ConvergenceWarning")
def test_estimator_api(tmp_path, small_dataset):
    est = FeasibilityCorrector(hidden_layer_sizes=(16,), max_iter=300)
    check_get_params_invariance("FeasibilityCorrector", est)
    assert clone(est).get_params() == est.get_params()
    X = [r.features for r in small_dataset]
    y = [r.label for r in small_dataset]
    est.fit(X, y)
    assert set(est.predict(X)) <= set(est.classes_)
    assert est.predict_proba(X).shape == (len(X), len(est.classes_))
    assert 0.0 <= est.score(X, y) <= 1.0
    p = tmp_path / "m.pkl"
    save_model(est, p)
    assert list(load_model(p).predict(X)) == list(est.predict(X))
