"""Synthetic online navigation benchmark.

Scenes are random geometric graphs over a 10 m x 10 m floor. Node features
are a fixed two-layer random projection of position plus a per-scene style
vector, so feature similarity tracks spatial proximity. The instruction for
an episode is the goal's clean feature plus a small positional code. A
``ShiftSpec`` corrupts the features the agent observes (constant bias plus
per-node noise) and can switch the layout generator, which produces the
"unseen" streams.
"""
from __future__ import annotations

import hashlib
import heapq
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DataValidityError
from .model import StepInput

FEATURE_DIM = 8
AREA = 10.0
SUCCESS_RADIUS = 3.0
MIN_START_GOAL = 5.0
WORLD_SEED = 20240721
STREAM_SCHEMA = "fstta-stream/1"

# (min nodes, max nodes, base radius, clustered layout)
LAYOUT_FAMILIES = {
    0: (12, 18, 3.6, False),
    1: (16, 24, 3.0, True),
}


def _world_projection():
    rng = np.random.default_rng(WORLD_SEED)
    w1 = rng.normal(0.0, 0.6, (6, 16))
    b1 = rng.normal(0.0, 0.3, 16)
    w2 = rng.normal(0.0, 1.0 / 4.0, (16, FEATURE_DIM))
    return w1, b1, w2


_W1, _B1, _W2 = _world_projection()


def _pos_code(pos):
    u = np.asarray(pos, dtype=np.float64) / AREA
    return np.concatenate([u, np.sin(np.pi * u), np.cos(np.pi * u)], axis=-1)


def position_features(pos):
    """Clean, style-free feature of a position (or an array of positions)."""
    return np.tanh(_pos_code(pos) @ _W1 + _B1) @ _W2


def instruction_code(pos):
    # low-amplitude sinusoidal code of the goal coordinates
    u = np.asarray(pos, dtype=np.float64) / AREA
    return 0.05 * np.concatenate([np.sin(2 * np.pi * u), np.cos(2 * np.pi * u), np.sin(4 * np.pi * u), np.cos(4 * np.pi * u)])


@dataclass
class Scene:
    seed: int
    layout_family: int
    positions: np.ndarray
    edges: list
    features: np.ndarray
    style: np.ndarray
    adjacency: list = field(repr=False, default=None)

    def __post_init__(self):
        if self.adjacency is None:
            adj = [[] for _ in range(len(self.positions))]
            for a, b in self.edges:
                adj[a].append(b)
                adj[b].append(a)
            self.adjacency = [sorted(x) for x in adj]

    @property
    def n(self):
        return len(self.positions)

    def edge_length(self, a, b):
        return float(np.linalg.norm(self.positions[a] - self.positions[b]))

    def shortest_paths_to(self, goal):
        """Dijkstra from ``goal``: returns (distance, next hop toward goal) per node."""
        dist = np.full(self.n, np.inf)
        nxt = np.full(self.n, -1, dtype=np.int64)
        dist[goal] = 0.0
        heap = [(0.0, goal)]
        while heap:
            d, u = heapq.heappop(heap)
            if d > dist[u]:
                continue
            for v in self.adjacency[u]:
                nd = d + self.edge_length(u, v)
                if nd < dist[v] - 1e-12:
                    dist[v] = nd
                    nxt[v] = u
                    heapq.heappush(heap, (nd, v))
        return dist, nxt

    def connected(self):
        seen = {0}
        stack = [0]
        while stack:
            u = stack.pop()
            for v in self.adjacency[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return len(seen) == self.n

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.positions, dtype="<f8").tobytes())
        h.update(np.asarray(self.edges, dtype="<i8").tobytes())
        h.update(np.ascontiguousarray(self.features, dtype="<f8").tobytes())
        return h.hexdigest()[:16]


def generate_scene(seed, layout_family=0):
    if layout_family not in LAYOUT_FAMILIES:
        raise DataValidityError(f"unknown layout family {layout_family}")
    lo, hi, radius, clustered = LAYOUT_FAMILIES[layout_family]
    rng = np.random.default_rng(seed)
    n = int(rng.integers(lo, hi + 1))
    if clustered:
        centers = rng.uniform(1.5, AREA - 1.5, (3, 2))
        pos = centers[rng.integers(0, 3, n)] + rng.normal(0.0, 1.6, (n, 2))
        pos = np.clip(pos, 0.0, AREA)
    else:
        pos = rng.uniform(0.0, AREA, (n, 2))
    style = rng.normal(0.0, 0.08, FEATURE_DIM)
    feats = position_features(pos) + style
    d = np.linalg.norm(pos[:, None] - pos[None], axis=-1)
    while True:
        edges = [(i, j) for i in range(n) for j in range(i + 1, n) if d[i, j] <= radius]
        scene = Scene(seed, layout_family, pos, edges, feats, style)
        if scene.connected():
            return scene
        radius += 0.25


@dataclass
class ShiftSpec:
    feature_bias: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feature_noise_sigma: float = 0.0
    layout_family: int = 0

    @classmethod
    def seen(cls):
        return cls()

    @classmethod
    def unseen(cls, seed, bias_norm=0.5, noise_sigma=0.1, layout_family=1):
        rng = np.random.default_rng([seed, 7])
        b = rng.normal(size=FEATURE_DIM)
        return cls(bias_norm * b / np.linalg.norm(b), noise_sigma, layout_family)

    def to_dict(self):
        return {
            "feature_bias": [float(x) for x in self.feature_bias],
            "feature_noise_sigma": float(self.feature_noise_sigma),
            "layout_family": int(self.layout_family),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["feature_bias"], dtype=np.float64), float(d["feature_noise_sigma"]), int(d["layout_family"]))


@dataclass
class Episode:
    episode_id: int
    scene_seed: int
    scene: Scene
    start: int
    goal: int
    shift: ShiftSpec
    observed: np.ndarray
    instruction: np.ndarray
    budget: int
    shortest_length: float
    shortest_hops: int

    def to_record(self):
        return {
            "schema": STREAM_SCHEMA,
            "episode_id": self.episode_id,
            "seed": self.scene_seed,
            "scene_hash": self.scene.digest(),
            "start": self.start,
            "goal": self.goal,
            "shift": self.shift.to_dict(),
        }


def _hops(scene, start, nxt):
    hops, u = 0, start
    while nxt[u] >= 0:
        u = nxt[u]
        hops += 1
    return hops


def make_episode(episode_id, scene_seed, shift, start=None, goal=None):
    """Build one episode from its scene seed; start/goal are drawn when omitted."""
    scene = generate_scene(scene_seed, shift.layout_family)
    rng = np.random.default_rng([scene_seed, 1])
    if start is None or goal is None:
        d = np.linalg.norm(scene.positions[:, None] - scene.positions[None], axis=-1)
        pairs = np.argwhere(d >= MIN_START_GOAL)
        if len(pairs) == 0:
            pairs = np.argwhere(d == d.max())
        start, goal = (int(v) for v in pairs[rng.integers(len(pairs))])
    dist, nxt = scene.shortest_paths_to(goal)
    hops = _hops(scene, start, nxt)
    # own generator, so replaying with explicit start/goal reproduces the noise
    noise = np.random.default_rng([scene_seed, 2]).normal(0.0, 1.0, scene.features.shape) * shift.feature_noise_sigma
    observed = scene.features + shift.feature_bias + noise
    instruction = scene.features[goal] + instruction_code(scene.positions[goal])
    return Episode(episode_id, int(scene_seed), scene, int(start), int(goal), shift, observed,
                   instruction, 2 * hops + 2, float(dist[start]), hops)


def generate_stream(seed, shift, count):
    """Deterministic list of ``count`` episodes, one fresh scene each."""
    if count < 1:
        raise DataValidityError("count must be >= 1")
    rng = np.random.default_rng(seed)
    scene_seeds = rng.integers(0, 2**31 - 1, size=count)
    return [make_episode(i, int(s), shift) for i, s in enumerate(scene_seeds)]


def write_stream(episodes, path):
    with open(path, "w") as fh:
        for ep in episodes:
            fh.write(json.dumps(ep.to_record(), sort_keys=True) + "\n")


def read_stream(path):
    episodes = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            if rec.get("schema") != STREAM_SCHEMA:
                raise DataValidityError(f"stream schema {rec.get('schema')!r} != {STREAM_SCHEMA!r}")
            ep = make_episode(rec["episode_id"], rec["seed"], ShiftSpec.from_dict(rec["shift"]), rec["start"], rec["goal"])
            if ep.scene.digest() != rec["scene_hash"]:
                raise DataValidityError(f"scene hash mismatch for episode {rec['episode_id']}")
            episodes.append(ep)
    return episodes


def step_input(ep: Episode, node, visited):
    """Candidates are the neighbours of ``node`` in index order, then STOP."""
    nbrs = ep.scene.adjacency[node]
    cands = np.vstack([ep.observed[nbrs], ep.observed[node][None]])
    history = ep.observed[visited].mean(axis=0)
    return StepInput(ep.instruction, cands, history), nbrs


def teacher_steps(ep: Episode):
    """Teacher-forced ``(StepInput, label)`` pairs along the shortest path."""
    _, nxt = ep.scene.shortest_paths_to(ep.goal)
    node, visited, out = ep.start, [ep.start], []
    while True:
        inp, nbrs = step_input(ep, node, visited)
        if node == ep.goal:
            out.append((inp, len(nbrs)))
            return out
        out.append((inp, nbrs.index(int(nxt[node]))))
        node = int(nxt[node])
        visited.append(node)


def teacher_sampler(shift=None, seed_offset=0):
    """Sampler for ``model.pretrain`` drawing seen-distribution episodes."""
    shift = shift or ShiftSpec.seen()

    def sample(rng, n_episodes):
        seeds = rng.integers(0, 2**31 - 1, size=n_episodes) + seed_offset
        steps = []
        for i, s in enumerate(seeds):
            steps.extend(teacher_steps(make_episode(i, int(s % (2**31 - 1)), shift)))
        return steps

    return sample


@dataclass
class EpisodeRecord:
    episode_id: int
    scene_hash: str
    start: int
    goal: int
    path: list
    scores: list
    stopped: bool
    success: bool
    oracle_success: bool
    trajectory_length: float
    nav_error: float
    spl: float
    shortest_length: float
    wall_ms: float = 0.0

    def to_dict(self):
        d = asdict(self)
        d["scores"] = [list(map(float, s)) for s in self.scores]
        return d


def score_outcome(ep: Episode, path, stopped, scores=(), wall_ms=0.0):
    pos = ep.scene.positions
    tl = float(sum(ep.scene.edge_length(a, b) for a, b in zip(path[:-1], path[1:])))
    to_goal = np.linalg.norm(pos[path] - pos[ep.goal], axis=1)
    ne = float(to_goal[-1])
    success = bool(stopped and ne < SUCCESS_RADIUS)
    oracle = bool(np.min(to_goal) < SUCCESS_RADIUS)
    l = ep.shortest_length
    # the l = 0 limit of S * l / max(p, l) is S
    spl = float(success) if l == 0.0 else float(success) * l / max(tl, l)
    return EpisodeRecord(ep.episode_id, ep.scene.digest(), ep.start, ep.goal, list(path), list(scores),
                         bool(stopped), success, oracle, tl, ne, spl, l, wall_ms)


def run_teacher(ep: Episode):
    _, nxt = ep.scene.shortest_paths_to(ep.goal)
    node, path = ep.start, [ep.start]
    for _ in range(ep.budget):
        if node == ep.goal:
            return score_outcome(ep, path, True)
        node = int(nxt[node])
        path.append(node)
    return score_outcome(ep, path, False)


@dataclass
class MetricsRow:
    SR: float
    OSR: float
    SPL: float
    TL: float
    NE: float

    def as_dict(self):
        return asdict(self)


def evaluate(records):
    """Mean metrics; SR, OSR and SPL in percent, TL and NE in metres."""
    if not records:
        raise DataValidityError("evaluate needs at least one record")
    return MetricsRow(
        SR=100.0 * float(np.mean([r.success for r in records])),
        OSR=100.0 * float(np.mean([r.oracle_success for r in records])),
        SPL=100.0 * float(np.mean([r.spl for r in records])),
        TL=float(np.mean([r.trajectory_length for r in records])),
        NE=float(np.mean([r.nav_error for r in records])),
    )


def run_episode(session, ep: Episode):
    """Greedy rollout of the session's current policy on one episode.

    Each step scores the candidates, takes the argmax, and (when the session
    adapts) hands the step's entropy gradient to the session before moving.
    """
    t0 = time.perf_counter()
    session.on_sample_start()
    node, visited, path, scores = ep.start, [ep.start], [ep.start], []
    stopped = False
    for _ in range(ep.budget):
        inp, nbrs = step_input(ep, node, visited)
        if session.adapting:
            probs, _, grad = session.entropy_gradient(inp)
        else:
            probs = session.score(inp)
        action = int(np.argmax(probs))
        if session.adapting:
            session.on_action_step(grad)
        scores.append(probs)
        if action == len(nbrs):
            stopped = True
            break
        node = nbrs[action]
        visited.append(node)
        path.append(node)
    session.on_sample_end()
    return score_outcome(ep, path, stopped, scores, 1e3 * (time.perf_counter() - t0))


def run_stream(session, episodes):
    return [run_episode(session, ep) for ep in episodes]
