from .render import CameraConfig
from .scene import (
    HEADINGS, TASK_TYPES, ObjectInstance, Predicate, ProfileInfeasible, Scene, SceneProfile,
    TaskSpec, UnknownTaskType, generate_scene, make_episode,
)
from .world import (
    FAILURE_REASONS, INTERACTION_KINDS, NAV_KINDS, Action, ActionOutcome, AgentState,
    NoiseConfig, Observation, SimConfig, Simulator, category_name,
)
