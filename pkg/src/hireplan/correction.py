"""Action-feasibility correction: (observation, planned action) -> action.

Features summarise what the frame says about the planned action's target.
``rule_corrector`` is the reference decision list; ``FeasibilityCorrector``
learns the same mapping from relabelled trajectories.
"""

import json
import pickle
import random
from dataclasses import asdict, dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.metrics import confusion_matrix
from sklearn.model_selection import GroupShuffleSplit
from sklearn.neural_network import MLPClassifier
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.validation import check_is_fitted

from . import catalog
from .catalog import APPLIANCE_FOR, CATEGORY_INDEX, FURNITURE, FURNITURE_CATEGORY
from .sim.render import CameraConfig, back_project, camera_origin, ray_directions
from .sim.scene import HEADINGS
from .sim.world import INTERACTION_KINDS, NAV_KINDS, Action

KEEP = "KeepPlanned"
LABELS = (KEEP,) + NAV_KINDS
PLANNED_KINDS = NAV_KINDS + INTERACTION_KINDS
FAR = 12.0  # depth reported when the target is not visible
MODEL_HEADER = {"format": "hireplan-corrector", "version": 1}
DATASET_VERSION = 1


class DegenerateDataset(ValueError):
    pass


@dataclass(frozen=True)
class FeasibilityFeatures:
    target_visible: bool
    target_pixel_area: float
    target_min_depth: float
    target_vertical_offset: int
    cell_ahead_free: bool
    holding: bool
    planned_action: str

    def vector(self):
        onehot = [float(self.planned_action == k) for k in PLANNED_KINDS]
        return np.array([float(self.target_visible), self.target_pixel_area,
                         min(self.target_min_depth, FAR), float(self.target_vertical_offset),
                         float(self.cell_ahead_free), float(self.holding)] + onehot)


def as_matrix(features):
    if isinstance(features, np.ndarray):
        return features
    return np.vstack([f.vector() for f in features])


# ----------------------------------------------------------------------
# feature extraction
# ----------------------------------------------------------------------

def target_category(action, obs):
    """Category whose pixels decide the action's feasibility, and an optional id."""
    t = action.target
    oid = None
    if isinstance(t, (int, np.integer)):
        oid = int(t)
        t = dict(obs.detected).get(oid)
    if action.kind in APPLIANCE_FOR:
        return APPLIANCE_FOR[action.kind], None
    return t, oid


def reachable_levels(category, observed, kind):
    """Interaction levels consistent with the observed height slices."""
    observed = set(observed)
    if catalog.is_small(category):
        return observed
    out = set()
    for k, spec in FURNITURE.items():
        if FURNITURE_CATEGORY.get(k, k) != category or not observed & set(spec.body_levels):
            continue
        out |= set(spec.body_levels)
        if kind not in ("Open", "Close"):
            out |= set(spec.slot_levels)
    return out or observed


def extract_features(obs, planned, camera=CameraConfig(), radius=2.0, contents=()):
    """Feasibility features of ``planned`` in ``obs``.

    ``contents`` lists object ids known to sit inside the target receptacle;
    their pixels stand in for it when they hide the receptacle itself.
    """
    pose = obs.pose
    depth = obs.depth.reshape(-1)
    seg = obs.seg_mask.reshape(-1)
    hit = (seg > 0) & np.isfinite(depth)
    dirs = ray_directions(pose.heading, pose.pitch, camera)
    pts = np.full((len(depth), 3), np.nan)
    if hit.any():
        pts[hit] = back_project(camera_origin(pose.row, pose.col, camera), dirs[hit], depth[hit])
    cells = np.floor(pts[:, :2])

    dr, dc = HEADINGS[pose.heading]
    ahead = (pose.row + dr, pose.col + dc)
    in_ahead = hit & (cells[:, 0] == ahead[0]) & (cells[:, 1] == ahead[1])
    ahead_free = not bool(in_ahead.any())

    visible, area, dist, offset = False, 0.0, FAR, 0
    if planned.kind in INTERACTION_KINDS:
        cat, oid = target_category(planned, obs)
        sel = np.zeros_like(hit)
        if cat in CATEGORY_INDEX:
            sel = hit & (obs.seg_category.reshape(-1) == CATEGORY_INDEX[cat])
            if oid is not None:
                segs = [k + 1 for k, i in enumerate(obs.seg_ids) if i == oid]
                sel &= np.isin(seg, segs)
        if contents:
            inside = [k + 1 for k, i in enumerate(obs.seg_ids) if i in set(contents)]
            sel |= hit & np.isin(seg, inside)
        if sel.any():
            visible = True
            area = float(sel.mean())
            best = None
            for s in np.unique(seg[sel]):
                m = sel & (seg == s)
                d = float(np.min(np.hypot(cells[m, 0] - pose.row, cells[m, 1] - pose.col)))
                zs = set(np.floor(pts[m, 2]).astype(int).tolist())
                levels = reachable_levels(cat, zs, planned.kind) if cat in CATEGORY_INDEX else zs
                want = pose.pitch + 1
                z = min(levels, key=lambda v: (abs(v - want), v))
                off = int(z - want)
                key = (not (d <= radius and off == 0), d, abs(off))
                if best is None or key < best[0]:
                    best = (key, d, off)
            _, dist, offset = best
    return FeasibilityFeatures(visible, area, dist, offset, ahead_free,
                               obs.holding_category is not None, planned.kind)


# ----------------------------------------------------------------------
# correctors
# ----------------------------------------------------------------------

def rule_corrector(f, radius=2.0):
    """Decision list: blocked > not visible > too far > pitch."""
    if f.planned_action == "MoveAhead" and not f.cell_ahead_free:
        return "RotateRight"
    if f.planned_action in INTERACTION_KINDS:
        if not f.target_visible:
            return "RotateRight"
        if f.target_min_depth > radius:
            return "MoveAhead"
        if f.target_vertical_offset > 0:
            return "LookUp"
        if f.target_vertical_offset < 0:
            return "LookDown"
    return KEEP


class RuleCorrector:
    name = "rule"

    def __init__(self, radius=2.0):
        self.radius = radius

    def predict(self, features):
        return np.array([rule_corrector(f, self.radius) for f in features], dtype=object)


def correct(obs, planned, model, camera=CameraConfig(), radius=2.0, contents=()):
    """Return ``(action, label, features)``; interactions are only ever
    replaced by target-free navigation actions."""
    f = extract_features(obs, planned, camera, radius, contents)
    label = str(model.predict([f])[0])
    if label == KEEP or label not in NAV_KINDS:
        return planned, KEEP, f
    return Action(label), label, f


class FeasibilityCorrector(ClassifierMixin, BaseEstimator):
    """Small multilayer classifier over feasibility features."""

    def __init__(self, hidden_layer_sizes=(64, 32), alpha=1e-4, max_iter=800, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.alpha = alpha
        self.max_iter = max_iter
        self.random_state = random_state

    def fit(self, X, y):
        X = as_matrix(X)
        y = np.asarray(y, dtype=object)
        self.classes_ = np.array(sorted(set(y.tolist())), dtype=object)
        if len(self.classes_) < 2:
            raise DegenerateDataset(f"only one class present: {self.classes_.tolist()}")
        self.pipeline_ = make_pipeline(
            StandardScaler(),
            MLPClassifier(hidden_layer_sizes=self.hidden_layer_sizes, alpha=self.alpha,
                          max_iter=self.max_iter, random_state=self.random_state),
        )
        self.pipeline_.fit(X, y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "pipeline_")
        return self.pipeline_.predict(as_matrix(X))

    def predict_proba(self, X):
        check_is_fitted(self, "pipeline_")
        return self.pipeline_.predict_proba(as_matrix(X))


def save_model(model, path):
    with open(path, "wb") as fh:
        fh.write((json.dumps(MODEL_HEADER) + "\n").encode())
        pickle.dump(model, fh)


def load_model(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header != MODEL_HEADER:
            raise ValueError(f"{path}: unsupported model header {header}")
        return pickle.load(fh)


# ----------------------------------------------------------------------
# datasets
# ----------------------------------------------------------------------

@dataclass
class CorrectionRecord:
    features: FeasibilityFeatures
    planned: str
    label: str
    outcome_success: bool
    outcome_reason: str = None
    episode: str = ""
    step: int = 0
    planned_target: object = None
    state: dict = None  # simulator state before the step, kept for failed steps

    def __post_init__(self):
        if self.label not in LABELS:
            raise ValueError(f"label {self.label!r} outside the correction space")

    def to_dict(self):
        d = asdict(self)
        d["features"] = asdict(self.features)
        if isinstance(self.planned_target, np.integer):
            d["planned_target"] = int(self.planned_target)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["features"] = FeasibilityFeatures(**d["features"])
        return cls(**d)


def relabel(features, success, radius=2.0):
    return KEEP if success else rule_corrector(features, radius)


def generate_dataset(episodes, perturb_rate=0.3, max_steps=150, keep_states=False,
                     keep_fraction=0.2):
    """Relabelled records from the uncorrected agent on ``episodes``.

    ``episodes`` is an iterable of ``(episode_id, scene, task, seed)``. Most
    steps need no correction, so only ``keep_fraction`` of the KeepPlanned
    records survive, chosen by a per-episode seeded draw.
    """
    from .agent import EpisodeConfig, run_episode

    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError("keep_fraction must lie in (0, 1]")
    records = []
    for eid, scene, task, seed in episodes:
        cfg = EpisodeConfig(low_level_on=False, perturb_rate=perturb_rate, seed=seed,
                            max_steps=max_steps)
        ep = []
        run_episode(scene, task, cfg, episode_id=eid, dataset=ep, keep_states=keep_states)
        rng = random.Random(f"keep-{eid}-{seed}")
        records.extend(r for r in ep if r.label != KEEP or rng.random() < keep_fraction)
    return records


def class_counts(records):
    out = {k: 0 for k in LABELS}
    for r in records:
        out[r.label] += 1
    return out


def save_dataset(records, path):
    with open(path, "w") as fh:
        fh.write(json.dumps({"schema_version": DATASET_VERSION, "kind": "corrections"}) + "\n")
        for r in records:
            fh.write(json.dumps(r.to_dict(), sort_keys=True) + "\n")


def load_dataset(path):
    with open(path) as fh:
        header = json.loads(fh.readline())
        if header.get("schema_version") != DATASET_VERSION:
            raise ValueError(f"{path}: unsupported dataset schema")
        return [CorrectionRecord.from_dict(json.loads(x)) for x in fh if x.strip()]


def split_by_episode(records, split_seed=0, test_size=0.2):
    groups = [r.episode for r in records]
    gss = GroupShuffleSplit(n_splits=1, test_size=test_size, random_state=split_seed)
    train, test = next(gss.split(np.zeros(len(records)), groups=groups))
    return [records[i] for i in train], [records[i] for i in test]


def train_corrector(records, split_seed=0, **params):
    """Fit on an 80/20 episode split; returns ``(model, train, held_out)``."""
    if len({r.label for r in records}) < 2:
        raise DegenerateDataset("dataset has a single label")
    train, test = split_by_episode(records, split_seed)
    model = FeasibilityCorrector(random_state=split_seed, **params)
    model.fit([r.features for r in train], [r.label for r in train])
    return model, train, test


def evaluate_corrector(model, records, radius=2.0):
    feats = [r.features for r in records]
    y = np.array([r.label for r in records], dtype=object)
    pred = np.asarray(model.predict(feats), dtype=object)
    rule = np.array([rule_corrector(f, radius) for f in feats], dtype=object)
    labels = [k for k in LABELS if k in set(y.tolist()) | set(pred.tolist())]
    cm = confusion_matrix(y, pred, labels=labels) if len(y) else np.zeros((0, 0), int)
    recall = {}
    for i, k in enumerate(labels):
        n = int(cm[i].sum())
        if n:
            recall[k] = float(cm[i, i] / n)
    counts = {k: int((y == k).sum()) for k in labels}
    majority = max(counts.values()) / len(y) if len(y) else 0.0
    return {
        "n": int(len(y)),
        "accuracy": float((pred == y).mean()) if len(y) else 0.0,
        "rule_agreement": float((pred == rule).mean()) if len(y) else 0.0,
        "majority_share": float(majority),
        "per_class_recall": recall,
        "labels": labels,
        "confusion": cm.tolist(),
    }
