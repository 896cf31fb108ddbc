"""Synthetic manipulator tasks with closed-form drive dynamics.

Each task moves an object along the rows of its drive matrix W_n. Joint
postures only matter through an optional engagement gate, so the optimal
actions of every task lie in span(W_n); the union of drive rows is the
ground-truth synergy subspace returned by ``oracle_subspace``.

States may be batched: ``joints`` of shape (d,) or (n, d). Batched episodes
advance in lockstep and share ``step_count``.
"""
import dataclasses
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from config import ENV_DEFAULTS, TASK_SET_DEFAULTS
from errors import ConfigurationError, DomainError
from seeding import make_rng

logging.basicConfig(level=logging.INFO)
logger = logging.getLogger(__name__)

OBJECT_DIMS = {"valve": 1, "dice": 3, "weight_pull": 1, "screw": 2, "sparse_valve": 1}
SET_B_LAYOUT = (("dice", 3), ("valve", 1), ("weight_pull", 1), ("screw", 2))
UNSEEN_KINDS = ("cyl_valve", "cw_valve", "topdown_screw")
SVD_CUTOFF = 1e-8


@dataclass(frozen=True, eq=False)
class Task:
    id: int
    kind: str
    name: str
    drive: np.ndarray
    contact_center: np.ndarray
    engagement_width: float = ENV_DEFAULTS["engagement_width"]
    action_penalty: float = ENV_DEFAULTS["action_penalty"]
    reward_sign: float = 1.0
    goal: tuple = ()
    goal_threshold: float = ENV_DEFAULTS["sparse_threshold"]
    horizon: int = ENV_DEFAULTS["horizon"]
    engagement_on: bool = False
    gravity: float = ENV_DEFAULTS["gravity"]
    coupling: float = ENV_DEFAULTS["screw_coupling"]
    joint_step: float = ENV_DEFAULTS["joint_step"]

    def __post_init__(self):
        if self.kind not in OBJECT_DIMS:
            raise ConfigurationError(f"Unknown task kind: {self.kind}")
        drive = np.array(self.drive, dtype=np.float64)
        drive.setflags(write=False)
        center = np.array(self.contact_center, dtype=np.float64)
        center.setflags(write=False)
        object.__setattr__(self, "drive", drive)
        object.__setattr__(self, "contact_center", center)
        object.__setattr__(self, "goal", tuple(float(g) for g in self.goal))
        if drive.ndim != 2 or drive.shape[0] != OBJECT_DIMS[self.kind]:
            raise ConfigurationError(f"{self.name}: drive must be {OBJECT_DIMS[self.kind]} x d, got {drive.shape}")
        if not np.allclose(np.linalg.norm(drive, axis=1), 1.0, atol=1e-10):
            raise ConfigurationError(f"{self.name}: drive rows must have unit norm")
        if center.shape != (drive.shape[1],):
            raise ConfigurationError(f"{self.name}: contact center must have dim {drive.shape[1]}")
        if self.engagement_width <= 0:
            raise ConfigurationError(f"{self.name}: engagement width must be positive")
        if self.horizon < 1:
            raise ConfigurationError(f"{self.name}: horizon must be >= 1")
        if self.kind == "dice" and len(self.goal) != 3:
            raise ConfigurationError(f"{self.name}: dice goal must be a 3-vector")
        if self.kind == "sparse_valve" and len(self.goal) != 1:
            raise ConfigurationError(f"{self.name}: sparse valve needs a target angle")

    @property
    def d(self):
        return self.drive.shape[1]

    @property
    def object_dim(self):
        return self.drive.shape[0]

    @property
    def obs_dim(self):
        return self.d + self.object_dim + 1

    def to_dict(self):
        doc = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        doc["drive"] = self.drive.tolist()
        doc["contact_center"] = self.contact_center.tolist()
        doc["goal"] = list(self.goal)
        return doc

    @classmethod
    def from_dict(cls, doc):
        return cls(**doc)


@dataclass
class EnvState:
    joints: np.ndarray
    object: np.ndarray
    step_count: int = 0


@dataclass
class StepResult:
    next_state: EnvState
    reward: object
    done: bool


@dataclass
class TaskSet:
    set_id: str
    d: int
    seed: int
    engagement_on: bool
    orthogonal: bool
    tasks: list = field(default_factory=list)
    span_dim: int = 0

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    def __getitem__(self, index):
        return self.tasks[index]

    @property
    def names(self):
        return [t.name for t in self.tasks]

    def identity(self):
        return {"set_id": self.set_id, "d": self.d, "seed": self.seed,
                "engagement_on": self.engagement_on, "orthogonal": self.orthogonal}

    def to_dict(self):
        doc = self.identity()
        doc["span_dim"] = self.span_dim
        doc["tasks"] = [t.to_dict() for t in self.tasks]
        return doc

    @classmethod
    def from_dict(cls, doc):
        tasks = [Task.from_dict(t) for t in doc["tasks"]]
        return cls(doc["set_id"], doc["d"], doc["seed"], doc["engagement_on"], doc["orthogonal"],
                   tasks, doc["span_dim"])


def save_task_set(path, task_set):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(task_set.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def load_task_set(path):
    with open(path, "r", encoding="utf-8") as f:
        return TaskSet.from_dict(json.load(f))


# ---------------------------------------------------------------- builders

def _orthonormal_rows(rng, k, d):
    q, r = np.linalg.qr(rng.standard_normal((d, k)))
    q = q * np.sign(np.where(np.diag(r) == 0, 1.0, np.diag(r)))
    return q.T.copy()


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def make_task_set(set_id, d=TASK_SET_DEFAULTS["d"], seed=0, engagement_on=False, orthogonal=False,
                  horizon=ENV_DEFAULTS["horizon"], action_penalty=ENV_DEFAULTS["action_penalty"],
                  engagement_width=ENV_DEFAULTS["engagement_width"]):
    """Build task set A (transition-only variation) or B (heterogeneous)"""
    if set_id == "A":
        layout = [("valve", 1)] * 4
    elif set_id == "B":
        layout = list(SET_B_LAYOUT)
    else:
        raise ConfigurationError(f"Unknown task set: {set_id}")
    rows_needed = sum(k for _, k in layout) + (len(layout) if engagement_on else 0)
    if d < ENV_DEFAULTS["min_d"] or rows_needed > d:
        raise ConfigurationError(
            f"d={d} cannot host task set {set_id} (needs d >= {ENV_DEFAULTS['min_d']} "
            f"and a {rows_needed}-dim subspace)")

    rng = make_rng(seed, "task_set", set_id)
    if orthogonal:
        stacked = _orthonormal_rows(rng, sum(k for _, k in layout), d)
        offsets = np.cumsum([0] + [k for _, k in layout])
        drives = [stacked[offsets[i]:offsets[i + 1]] for i in range(len(layout))]
    else:
        drives = [_orthonormal_rows(rng, k, d) for _, k in layout]

    tasks = []
    for n, ((kind, _), drive) in enumerate(zip(layout, drives)):
        center = _unit(rng, d) * ENV_DEFAULTS["contact_radius"]
        goal = ()
        if kind == "dice":
            goal = tuple(_unit(rng, 3) * ENV_DEFAULTS["dice_goal_radius"])
        name = f"valve{n}" if set_id == "A" else kind
        tasks.append(Task(id=n, kind=kind, name=name, drive=drive, contact_center=center,
                          engagement_width=engagement_width, action_penalty=action_penalty,
                          goal=goal, horizon=horizon, engagement_on=engagement_on))
    task_set = TaskSet(set_id, d, seed, engagement_on, orthogonal, tasks)
    task_set.span_dim = oracle_subspace(tasks).shape[1]
    logger.info(f"Task set {set_id}: {len(tasks)} tasks, d={d}, oracle span dim {task_set.span_dim}")
    return task_set


def _first_of_kind(base, kind):
    for task in base:
        if task.kind == kind:
            return task
    raise ConfigurationError(f"Base task set has no {kind} task")


def make_unseen_tasks(base, seed=0, kinds=UNSEEN_KINDS):
    """Tasks outside the training set, built from the base tasks"""
    base = list(base)
    rng = make_rng(seed, "unseen_tasks")
    next_id = max(t.id for t in base) + 1
    unseen = []
    for kind in kinds:
        if kind == "cyl_valve":
            valves = [t for t in base if t.kind == "valve"]
            if not valves:
                raise ConfigurationError("Base task set has no valve task")
            weights = rng.dirichlet(np.ones(len(valves)))
            row = np.sum([w * t.drive[0] for w, t in zip(weights, valves)], axis=0)
            center = np.sum([w * t.contact_center for w, t in zip(weights, valves)], axis=0)
            task = dataclasses.replace(valves[0], id=next_id, name="cyl_valve",
                                       drive=(row / np.linalg.norm(row))[None, :], contact_center=center)
        elif kind == "cw_valve":
            task = dataclasses.replace(_first_of_kind(base, "valve"), id=next_id, name="cw_valve",
                                       reward_sign=-1.0)
        elif kind == "topdown_screw":
            screw = _first_of_kind(base, "screw")
            task = dataclasses.replace(screw, id=next_id, name="topdown_screw",
                                       coupling=-screw.coupling, reward_sign=-1.0)
        else:
            raise ConfigurationError(f"Unknown unseen task kind: {kind}")
        unseen.append(task)
        next_id += 1
    return unseen


def make_sparse_valve(base, target=ENV_DEFAULTS["sparse_target"],
                      threshold=ENV_DEFAULTS["sparse_threshold"]):
    """Goal-conditioned valve rewarded only near ``target``"""
    base = list(base)
    valve = _first_of_kind(base, "valve")
    return dataclasses.replace(valve, id=max(t.id for t in base) + 1, kind="sparse_valve",
                               name="sparse_valve", goal=(target,), goal_threshold=threshold)


def make_orthogonal_task(base, kind="valve", seed=0):
    """Task whose drive is orthogonal to the oracle subspace of ``base``"""
    base = list(base)
    template = _first_of_kind(base, kind)
    basis = oracle_subspace(base)
    rng = make_rng(seed, "orthogonal_task", kind)
    rows = []
    for _ in range(template.object_dim):
        v = rng.standard_normal(template.d)
        v -= basis @ (basis.T @ v)
        for r in rows:
            v -= r * (r @ v)
        rows.append(v / np.linalg.norm(v))
    return dataclasses.replace(template, id=max(t.id for t in base) + 1, name=f"orth_{kind}",
                               drive=np.array(rows))


def oracle_subspace(tasks):
    """Orthonormal basis (d x r, columns) of the union of drive rows and contact directions"""
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("oracle_subspace needs at least one task")
    vectors = [row for t in tasks for row in t.drive]
    for t in tasks:
        norm = np.linalg.norm(t.contact_center)
        if t.engagement_on and norm > 0:
            vectors.append(t.contact_center / norm)
    _, s, vt = np.linalg.svd(np.array(vectors), full_matrices=False)
    return vt[s > SVD_CUTOFF].T.copy()


# ---------------------------------------------------------------- dynamics

def reset(task, seed=0, num_envs=None):
    """Start state: zero joints, object at its task-specific origin"""
    batch = () if num_envs is None else (num_envs,)
    joints = np.zeros(batch + (task.d,))
    if task.kind == "dice":
        rng = make_rng(seed, "reset", task.id)
        direction = rng.standard_normal(batch + (3,))
        direction /= np.linalg.norm(direction, axis=-1, keepdims=True)
        radius = rng.uniform(size=batch + (1,)) ** (1.0 / 3.0)
        obj = direction * radius
    else:
        obj = np.zeros(batch + (task.object_dim,))
    return EnvState(joints, obj, 0)


def observe(task, state):
    """Observation = (joints, object, step fraction)"""
    frac = np.full(state.joints.shape[:-1] + (1,), state.step_count / task.horizon)
    return np.concatenate([state.joints, state.object, frac], axis=-1)


def engagement(task, joints):
    if not task.engagement_on:
        return np.ones(joints.shape[:-1])
    dist2 = np.sum((joints - task.contact_center) ** 2, axis=-1)
    return np.exp(-dist2 / (2.0 * task.engagement_width ** 2))


def step(task, state, action):
    """Advance one step; ``action`` must already be clipped to [-1, 1]"""
    a = np.asarray(action, dtype=np.float64)
    if a.shape[-1] != task.d or a.shape[:-1] != state.joints.shape[:-1]:
        raise ConfigurationError(f"{task.name}: action shape {a.shape} does not match state {state.joints.shape}")
    if np.any(np.isnan(a)):
        raise DomainError(f"{task.name}: NaN in action")
    if state.step_count >= task.horizon:
        raise DomainError(f"{task.name}: episode already finished")

    gate = engagement(task, state.joints)
    joints = np.clip(state.joints + task.joint_step * a, -2.0, 2.0)
    push = gate[..., None] * (a @ task.drive.T)
    penalty = task.action_penalty * np.sum(a * a, axis=-1)
    obj = state.object

    if task.kind in ("valve", "sparse_valve"):
        new_obj = obj + push
        if task.kind == "valve":
            reward = task.reward_sign * push[..., 0] - penalty
        else:
            hit = np.abs(new_obj[..., 0] - task.goal[0]) < task.goal_threshold
            reward = hit.astype(np.float64)
    elif task.kind == "dice":
        new_obj = obj + push
        goal = np.array(task.goal)
        progress = np.linalg.norm(obj - goal, axis=-1) - np.linalg.norm(new_obj - goal, axis=-1)
        reward = task.reward_sign * progress - penalty
    elif task.kind == "weight_pull":
        lift = np.maximum(push, 0.0) - task.gravity
        new_obj = obj + lift
        reward = task.reward_sign * lift[..., 0] - penalty
    else:
        d_rot = push[..., 0]
        d_trans = push[..., 1] + task.coupling * d_rot
        new_obj = obj + np.stack([d_rot, d_trans], axis=-1)
        reward = task.reward_sign * d_trans - penalty

    next_state = EnvState(joints, new_obj, state.step_count + 1)
    if np.ndim(reward) == 0:
        reward = float(reward)
    return StepResult(next_state, reward, next_state.step_count >= task.horizon)
