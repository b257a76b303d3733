"""Multi-agent multi-target tracking simulator with pluggable channel fusion.

Targets follow independent nearly-constant-velocity dynamics per axis;
each agent measures its group's targets through a constant personal
position bias, plus a landmark observation of the bias itself.  Every
agent runs a Kalman filter over the full global state (all targets, all
biases) and exchanges estimates with its neighbors once per step using
the configured fusion rule (CI, block-wise CI, the sampled
semidefinite bound, or no fusion at all); a centralized filter over all
measurements serves as the consistency baseline.

Dynamics and noise levels are deliberately open degrees of freedom, so
they are explicit scenario parameters with documented defaults.
All randomness descends from one master seed through named substreams,
so different fusion methods see identical truths and measurements.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields as dc_fields, replace

import numpy as np

from .core import (
    BlockPartition,
    ConfigError,
    DimensionError,
    FusionError,
    GaussianEstimate,
    check_spd,
    make_substream,
    make_substream_seed,
    partition_to_sparsity,
    symmetrize,
)
from .fusion import ci_fuse, nmci_fuse
from .sdp import robust_fuse
from . import metrics as _metrics

SCENARIO_SCHEMA = "cofusion-scenario-v1"
METHODS = ("centralized", "CI", "nmCI", "SDP", "none")
PARTITION_SCHEMES = ("group_target_bias", "group_axes", "per_target_bias")
# the sampled-program fusion path is restricted to small global states
SDP_MAX_DIM = 8


# ---------------------------------------------------------------------------
# state layout

@dataclass(frozen=True)
class StateLayout:
    """Index bookkeeping for the global state [targets..., biases...].

    Target t occupies 4 slots [x, vx, y, vy] starting at 4t; agent a's
    bias occupies 2 slots [bx, by] starting at 4*n_targets + 2a.
    """

    n_targets: int
    n_agents: int

    @property
    def dim(self) -> int:
        return 4 * self.n_targets + 2 * self.n_agents

    def target_indices(self, t: int) -> list[int]:
        return [4 * t, 4 * t + 1, 4 * t + 2, 4 * t + 3]

    def bias_indices(self, a: int) -> list[int]:
        base = 4 * self.n_targets + 2 * a
        return [base, base + 1]

    def position_indices(self) -> list[int]:
        return [i for t in range(self.n_targets) for i in (4 * t, 4 * t + 2)]

    def labels(self) -> tuple[str, ...]:
        labs = []
        for t in range(self.n_targets):
            labs += [f"t{t}:px", f"t{t}:vx", f"t{t}:py", f"t{t}:vy"]
        for a in range(self.n_agents):
            labs += [f"a{a}:bx", f"a{a}:by"]
        return tuple(labs)


def _phi2(dt: float) -> np.ndarray:
    return np.array([[1.0, dt], [0.0, 1.0]])


def _q2(dt: float, q: float) -> np.ndarray:
    return q * np.array([[dt ** 3 / 3.0, dt ** 2 / 2.0], [dt ** 2 / 2.0, dt]])


def target_transition(dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-target (4x4) transition and process noise, x and y decoupled."""
    phi = np.zeros((4, 4))
    qn = np.zeros((4, 4))
    p2, n2 = _phi2(dt), _q2(dt, q)
    phi[:2, :2] = p2
    phi[2:, 2:] = p2
    qn[:2, :2] = n2
    qn[2:, 2:] = n2
    return phi, qn


def global_transition(layout: StateLayout, dt: float, q: float) -> tuple[np.ndarray, np.ndarray]:
    """Full-state transition and process noise; biases are constants."""
    d = layout.dim
    f = np.eye(d)
    qn = np.zeros((d, d))
    phi, q4 = target_transition(dt, q)
    for t in range(layout.n_targets):
        ix = np.ix_(layout.target_indices(t), layout.target_indices(t))
        f[ix] = phi
        qn[ix] = q4
    return f, qn


def propagate_truth(state, dt: float, q: float, rng: np.random.Generator) -> np.ndarray:
    """One nearly-constant-velocity step of a single 4-dim target state."""
    state = np.asarray(state, dtype=float).reshape(4)
    if dt <= 0:
        raise ConfigError("dt must be positive")
    phi, qn = target_transition(dt, q)
    out = phi @ state
    if q > 0:
        out = out + np.linalg.cholesky(qn) @ rng.standard_normal(4)
    return out


# ---------------------------------------------------------------------------
# scenario configuration

@dataclass(frozen=True)
class GroupSpec:
    agents: tuple[int, ...]
    targets: tuple[int, ...]


@dataclass(frozen=True)
class ScenarioConfig:
    """Complete description of one tracking experiment.

    The dynamics/noise defaults (dt, q, R matrices, bias range, priors)
    are artifact choices; the reference experiment they imitate does not
    specify them.
    """

    name: str = "scenario"
    seed: int = 0
    dt: float = 1.0
    q: float = 0.01
    n_steps: int = 100
    mc_runs: int = 15
    groups: tuple[GroupSpec, ...] = ()
    edges: tuple[tuple[int, int], ...] = ()
    assignments: tuple[tuple[int, ...], ...] | None = None
    r_target: tuple = ((1.0, 0.0), (0.0, 1.0))
    r_landmark: tuple = ((0.25, 0.0), (0.0, 0.25))
    agent_r_target: tuple | None = None
    bias_range: float = 2.0
    prior_position_var: float = 100.0
    prior_velocity_var: float = 25.0
    prior_bias_var: float = 4.0
    init_position_spread: float = 50.0
    init_velocity_std: float = 1.0
    methods: tuple[str, ...] = ("centralized", "CI", "nmCI")
    partition_scheme: str = "group_target_bias"
    report_agent: int = 0
    fusion_every: int = 1
    fusion_start: int = 0
    record_estimates: str = "all"
    sdp_samples: int = 100
    sdp_tol: float = 1e-6

    def __post_init__(self):
        groups = tuple(GroupSpec(tuple(int(a) for a in g.agents),
                                 tuple(int(t) for t in g.targets))
                       for g in self.groups)
        if not groups:
            raise ConfigError("at least one group is required")
        agents = [a for g in groups for a in g.agents]
        targets = [t for g in groups for t in g.targets]
        if sorted(agents) != list(range(len(agents))):
            raise ConfigError("group agent ids must disjointly cover 0..n_agents-1")
        if sorted(targets) != list(range(len(targets))):
            raise ConfigError("group target ids must disjointly cover 0..n_targets-1")
        if not targets:
            raise ConfigError("at least one target is required")
        n_agents = len(agents)
        edges = tuple((int(i), int(j)) for i, j in self.edges)
        seen = set()
        for i, j in edges:
            if i == j or not (0 <= i < n_agents and 0 <= j < n_agents):
                raise ConfigError(f"invalid edge ({i}, {j})")
            key = (min(i, j), max(i, j))
            if key in seen:
                raise ConfigError(f"duplicate edge ({i}, {j})")
            seen.add(key)
        group_of = {}
        for gi, g in enumerate(groups):
            for a in g.agents:
                group_of[a] = gi
        if self.assignments is None:
            assigned = tuple(tuple(groups[group_of[a]].targets) for a in range(n_agents))
        else:
            if len(self.assignments) != n_agents:
                raise ConfigError("assignments must list targets for every agent")
            assigned = tuple(tuple(int(t) for t in ts) for ts in self.assignments)
            for a, ts in enumerate(assigned):
                if not ts:
                    raise ConfigError(f"agent {a} needs at least one assigned target")
                allowed = set(groups[group_of[a]].targets)
                if not set(ts) <= allowed:
                    raise ConfigError(
                        f"agent {a} may only be assigned its own group's targets")
        for m in (check_spd(np.asarray(self.r_target, dtype=float), name="r_target"),
                  check_spd(np.asarray(self.r_landmark, dtype=float), name="r_landmark")):
            if m.shape != (2, 2):
                raise ConfigError("noise matrices must be 2x2")
        if self.agent_r_target is not None:
            if len(self.agent_r_target) != n_agents:
                raise ConfigError("agent_r_target must list one matrix per agent")
            for a, m in enumerate(self.agent_r_target):
                m = check_spd(np.asarray(m, dtype=float), name=f"agent_r_target[{a}]")
                if m.shape != (2, 2):
                    raise ConfigError("noise matrices must be 2x2")
        if not self.methods:
            raise ConfigError("methods must be non-empty")
        for m in self.methods:
            if m not in METHODS:
                raise ConfigError(f"unknown method {m!r} (choose from {METHODS})")
        if self.partition_scheme not in PARTITION_SCHEMES:
            raise ConfigError(f"unknown partition scheme {self.partition_scheme!r}")
        if not (0 <= int(self.report_agent) < n_agents):
            raise ConfigError("report_agent out of range")
        if self.record_estimates not in ("all", "report", "none"):
            raise ConfigError("record_estimates must be all, report, or none")
        if self.dt <= 0 or self.q < 0 or self.n_steps < 1 or self.mc_runs < 1 \
                or self.fusion_every < 1 or self.bias_range < 0 \
                or self.fusion_start < 0:
            raise ConfigError("dt > 0, q >= 0, n_steps/mc_runs/fusion_every >= 1, "
                              "bias_range >= 0, fusion_start >= 0 required")
        if min(self.prior_position_var, self.prior_velocity_var, self.prior_bias_var) <= 0:
            raise ConfigError("prior variances must be positive")
        object.__setattr__(self, "groups", groups)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "assignments", assigned)
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "report_agent", int(self.report_agent))
        object.__setattr__(self, "r_target",
                           tuple(tuple(float(v) for v in row) for row in self.r_target))
        object.__setattr__(self, "r_landmark",
                           tuple(tuple(float(v) for v in row) for row in self.r_landmark))
        if self.agent_r_target is not None:
            object.__setattr__(
                self, "agent_r_target",
                tuple(tuple(tuple(float(v) for v in row) for row in m)
                      for m in self.agent_r_target))

    @property
    def n_agents(self) -> int:
        return sum(len(g.agents) for g in self.groups)

    @property
    def n_targets(self) -> int:
        return sum(len(g.targets) for g in self.groups)

    def layout(self) -> StateLayout:
        return StateLayout(self.n_targets, self.n_agents)

    def group_of_agent(self, a: int) -> int:
        for gi, g in enumerate(self.groups):
            if a in g.agents:
                return gi
        raise ConfigError(f"agent {a} belongs to no group")

    def to_dict(self) -> dict:
        d = {"schema": SCENARIO_SCHEMA}
        for f in dc_fields(self):
            v = getattr(self, f.name)
            if f.name == "groups":
                v = [{"agents": list(g.agents), "targets": list(g.targets)} for g in v]
            elif f.name == "edges":
                v = [list(e) for e in v]
            elif f.name == "assignments":
                v = [list(t) for t in v]
            elif f.name in ("r_target", "r_landmark"):
                v = [list(row) for row in v]
            elif f.name == "agent_r_target" and v is not None:
                v = [[list(row) for row in m] for m in v]
            elif f.name == "methods":
                v = list(v)
            d[f.name] = v
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        if not isinstance(d, dict):
            raise ConfigError("scenario config must be a mapping")
        if d.get("schema") != SCENARIO_SCHEMA:
            raise ConfigError(f"unsupported scenario schema {d.get('schema')!r}; "
                              f"expected {SCENARIO_SCHEMA!r}")
        known = {f.name for f in dc_fields(cls)}
        unknown = set(d) - known - {"schema"}
        if unknown:
            raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
        kw = {k: v for k, v in d.items() if k != "schema"}
        if "groups" in kw:
            parsed = []
            for g in kw["groups"]:
                if not isinstance(g, dict) or set(g) != {"agents", "targets"}:
                    raise ConfigError("each group needs exactly the keys agents, targets")
                parsed.append(GroupSpec(tuple(g["agents"]), tuple(g["targets"])))
            kw["groups"] = tuple(parsed)
        if "edges" in kw:
            kw["edges"] = tuple(tuple(e) for e in kw["edges"])
        if kw.get("assignments") is not None:
            kw["assignments"] = tuple(tuple(t) for t in kw["assignments"])
        if "methods" in kw:
            kw["methods"] = tuple(kw["methods"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        with open(path, "r", encoding="utf-8") as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(d)


# ---------------------------------------------------------------------------
# runtime agent records

@dataclass(frozen=True)
class AgentConfig:
    """One realized agent: identity, bias truth, sensing, and neighbors."""

    id: int
    bias: np.ndarray
    assigned_targets: tuple[int, ...]
    neighbors: tuple[int, ...]
    meas_noise_target: np.ndarray
    meas_noise_landmark: np.ndarray


@dataclass(frozen=True)
class AgentMeasurements:
    """Measurements one agent collects in one step."""

    z_targets: dict        # target id -> biased position measurement (2,)
    landmark: np.ndarray   # direct bias observation (2,)


@dataclass(frozen=True)
class AgentBelief:
    estimate: GaussianEstimate
    partition: BlockPartition


@dataclass(frozen=True)
class FilterModel:
    """Precomputed matrices for one filter: dynamics and observation."""

    f: np.ndarray
    q: np.ndarray
    h: np.ndarray
    r: np.ndarray
    r_chol: np.ndarray
    meas_order: tuple      # ((agent_id, target_id or "landmark"), ...)


def measure(agent: AgentConfig, truth, layout: StateLayout,
            rng: np.random.Generator) -> AgentMeasurements:
    """Biased position measurement of each assigned target plus a landmark."""
    if not agent.assigned_targets:
        raise ConfigError(f"agent {agent.id} has no assigned targets")
    truth = np.asarray(truth, dtype=float)
    la, lb = np.linalg.cholesky(agent.meas_noise_target), \
        np.linalg.cholesky(agent.meas_noise_landmark)
    z = {}
    for t in agent.assigned_targets:
        ti = layout.target_indices(t)
        pos = truth[[ti[0], ti[2]]]
        z[t] = pos + agent.bias + la @ rng.standard_normal(2)
    m = agent.bias + lb @ rng.standard_normal(2)
    return AgentMeasurements(z_targets=z, landmark=m)


def agent_filter_model(agent: AgentConfig, layout: StateLayout,
                       dt: float, q: float) -> FilterModel:
    """Observation and dynamics matrices for one agent's local filter."""
    f, qn = global_transition(layout, dt, q)
    rows = 2 * (len(agent.assigned_targets) + 1)
    h = np.zeros((rows, layout.dim))
    r = np.zeros((rows, rows))
    order = []
    row = 0
    bi = layout.bias_indices(agent.id)
    for t in agent.assigned_targets:
        ti = layout.target_indices(t)
        h[row, ti[0]] = 1.0
        h[row, bi[0]] = 1.0
        h[row + 1, ti[2]] = 1.0
        h[row + 1, bi[1]] = 1.0
        r[row:row + 2, row:row + 2] = agent.meas_noise_target
        order.append((agent.id, t))
        row += 2
    h[row, bi[0]] = 1.0
    h[row + 1, bi[1]] = 1.0
    r[row:row + 2, row:row + 2] = agent.meas_noise_landmark
    order.append((agent.id, "landmark"))
    return FilterModel(f=f, q=qn, h=h, r=r, r_chol=np.linalg.cholesky(r),
                       meas_order=tuple(order))


def stack_measurements(model: FilterModel,
                       per_agent: dict[int, AgentMeasurements]) -> np.ndarray:
    """Measurement vector in the row order the model's H was built with."""
    parts = []
    for agent_id, what in model.meas_order:
        m = per_agent[agent_id]
        parts.append(m.landmark if what == "landmark" else m.z_targets[what])
    return np.concatenate(parts)


def local_filter_step(belief: GaussianEstimate, model: FilterModel,
                      z: np.ndarray) -> GaussianEstimate:
    """Linear predict + measurement update (Joseph form) on the global state.

    States the observation matrix does not touch are only predicted.  A
    covariance that comes out non-SPD fails construction, which signals
    a misconfigured scenario rather than being patched over.
    """
    mean = model.f @ belief.mean
    cov = symmetrize(model.f @ belief.covariance @ model.f.T + model.q)
    if z is not None and model.h.shape[0] > 0:
        s = model.h @ cov @ model.h.T + model.r
        k = np.linalg.solve(s.T, (cov @ model.h.T).T).T
        mean = mean + k @ (z - model.h @ mean)
        ikh = np.eye(belief.dim) - k @ model.h
        cov = symmetrize(ikh @ cov @ ikh.T + k @ model.r @ k.T)
    return GaussianEstimate(mean, cov, belief.labels)


# ---------------------------------------------------------------------------
# partitions

def build_partition(scenario: ScenarioConfig, scheme: str | None = None) -> BlockPartition:
    """Fusion partition over the global state.

    ``group_target_bias`` groups each agent-group's target states and,
    separately, its agents' biases (the coupling an agent's measurements
    create between the two is dropped at fusion time, so this scheme
    runs block-wise fusion in lenient mode).  ``group_axes`` groups each
    agent-group's x-axis states and y-axis states; with diagonal noise
    matrices those blocks stay exactly uncorrelated, so no coupling is
    ever dropped.  ``per_target_bias`` is the finest partition: one
    block per target and one per agent bias, which lets block-wise
    fusion pick an independent weight wherever exactly one agent holds
    fresh information (also lenient).
    """
    scheme = scheme or scenario.partition_scheme
    layout = scenario.layout()
    blocks: list[tuple[int, ...]] = []
    if scheme == "group_target_bias":
        for g in scenario.groups:
            tblk = [i for t in g.targets for i in layout.target_indices(t)]
            bblk = [i for a in g.agents for i in layout.bias_indices(a)]
            blocks += [tuple(tblk), tuple(bblk)]
    elif scheme == "per_target_bias":
        for t in range(layout.n_targets):
            blocks.append(tuple(layout.target_indices(t)))
        for a in range(layout.n_agents):
            blocks.append(tuple(layout.bias_indices(a)))
    elif scheme == "group_axes":
        for g in scenario.groups:
            xblk, yblk = [], []
            for t in g.targets:
                ti = layout.target_indices(t)
                xblk += [ti[0], ti[1]]
                yblk += [ti[2], ti[3]]
            for a in g.agents:
                bi = layout.bias_indices(a)
                xblk.append(bi[0])
                yblk.append(bi[1])
            blocks += [tuple(xblk), tuple(yblk)]
    else:
        raise ConfigError(f"unknown partition scheme {scheme!r}")
    return BlockPartition(tuple(blocks))


def partition_is_exact(scenario: ScenarioConfig, scheme: str | None = None) -> bool:
    """Whether belief covariances are exactly block-diagonal under the scheme.

    True for ``group_axes`` with diagonal noise matrices: nothing in the
    linear-Gaussian pipeline then couples x- and y-axis states, so the
    off-block entries are zero to the last bit and strict block-wise
    fusion applies.
    """
    scheme = scheme or scenario.partition_scheme
    if scheme != "group_axes":
        return False
    rt = np.asarray(scenario.r_target)
    rl = np.asarray(scenario.r_landmark)
    return bool(np.allclose(rt, np.diag(np.diag(rt)), atol=0.0)
                and np.allclose(rl, np.diag(np.diag(rl)), atol=0.0))


# ---------------------------------------------------------------------------
# fusion round

def fusion_round(beliefs: list[AgentBelief], edges, method: str, step: int, *,
                 strict: bool = False, seed: int = 0, sdp_samples: int = 100,
                 sdp_tol: float = 1e-6) -> tuple[list[AgentBelief], list[dict]]:
    """Fuse along every edge in order; both endpoints adopt the result.

    Edges are processed sequentially in the given order, so later edges
    see the outcome of earlier ones within the same round.  Weight
    values are returned as one record per edge (per block for the
    block-wise method).  A failure on an edge aborts with the edge id.
    """
    if method == "none":
        return list(beliefs), []
    if method not in ("CI", "nmCI", "SDP"):
        raise ConfigError(f"fusion_round cannot run method {method!r}")
    out = list(beliefs)
    records: list[dict] = []
    for i, j in edges:
        a, b = out[i], out[j]
        try:
            if method == "CI":
                res = ci_fuse(a.estimate, b.estimate)
            elif method == "nmCI":
                res = nmci_fuse(a.estimate, b.estimate, a.partition, strict=strict)
            else:
                pattern = partition_to_sparsity(a.partition)
                res = robust_fuse(a.estimate, b.estimate, pattern, sdp_samples,
                                  make_substream_seed(seed, "edge", step, i, j),
                                  tol=sdp_tol)
        except FusionError as exc:
            raise FusionError(
                f"fusion failed on edge ({i}, {j}) at step {step}: {exc}") from exc
        fused = GaussianEstimate(res.fused_mean, res.bound, a.estimate.labels)
        out[i] = AgentBelief(fused, a.partition)
        out[j] = AgentBelief(fused, b.partition)
        if res.omega is None:
            records.append({"step": step, "edge": f"{i}-{j}", "block": -1,
                            "omega": float("nan"), "method": method})
        else:
            for blk, w in enumerate(res.omega):
                records.append({"step": step, "edge": f"{i}-{j}", "block": blk,
                                "omega": float(w), "method": method})
    return out, records


# ---------------------------------------------------------------------------
# one Monte-Carlo run

def _prior_covariance(scenario: ScenarioConfig) -> np.ndarray:
    layout = scenario.layout()
    diag = []
    for _t in range(layout.n_targets):
        diag += [scenario.prior_position_var, scenario.prior_velocity_var] * 2
    diag += [scenario.prior_bias_var] * (2 * layout.n_agents)
    return np.diag(np.array(diag))


def _make_agents(scenario: ScenarioConfig, biases: np.ndarray) -> list[AgentConfig]:
    nbrs: dict[int, list[int]] = {a: [] for a in range(scenario.n_agents)}
    for i, j in scenario.edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    rl = np.asarray(scenario.r_landmark, dtype=float)

    def rt(a: int) -> np.ndarray:
        if scenario.agent_r_target is not None:
            return np.asarray(scenario.agent_r_target[a], dtype=float)
        return np.asarray(scenario.r_target, dtype=float)

    return [AgentConfig(id=a, bias=biases[a].copy(),
                        assigned_targets=scenario.assignments[a],
                        neighbors=tuple(sorted(nbrs[a])),
                        meas_noise_target=rt(a), meas_noise_landmark=rl)
            for a in range(scenario.n_agents)]


def centralized_model(scenario: ScenarioConfig, agents: list[AgentConfig]) -> FilterModel:
    """One filter consuming every agent's measurements each step."""
    layout = scenario.layout()
    models = [agent_filter_model(a, layout, scenario.dt, scenario.q) for a in agents]
    h = np.vstack([m.h for m in models])
    rows = h.shape[0]
    r = np.zeros((rows, rows))
    at = 0
    order = []
    for m in models:
        k = m.r.shape[0]
        r[at:at + k, at:at + k] = m.r
        order += list(m.meas_order)
        at += k
    f, qn = global_transition(layout, scenario.dt, scenario.q)
    return FilterModel(f=f, q=qn, h=h, r=r, r_chol=np.linalg.cholesky(r),
                       meas_order=tuple(order))


def simulate_run(scenario: ScenarioConfig, run_idx: int,
                 methods: tuple[str, ...] | None = None) -> dict:
    """Simulate one Monte-Carlo run for every requested method.

    Truth, measurements, and prior perturbations are drawn once from
    run-specific substreams and replayed identically for each method.
    Returns per-method arrays of shape (steps, agents) for NEES,
    position error, 2-sigma summary, and covariance trace, plus
    recorded estimate trajectories and weight logs.
    """
    methods = tuple(methods or scenario.methods)
    layout = scenario.layout()
    d = layout.dim
    labels = layout.labels()
    n_a, n_t, steps = scenario.n_agents, scenario.n_targets, scenario.n_steps
    pos_idx = layout.position_indices()

    rng_truth = make_substream(scenario.seed, "truth", run_idx)
    rng_meas = make_substream(scenario.seed, "meas", run_idx)
    rng_prior = make_substream(scenario.seed, "prior", run_idx)

    biases = rng_truth.uniform(-scenario.bias_range, scenario.bias_range, size=(n_a, 2))
    agents = _make_agents(scenario, biases)

    x = np.zeros(d)
    for t in range(n_t):
        ti = layout.target_indices(t)
        pos = rng_truth.uniform(-scenario.init_position_spread,
                                scenario.init_position_spread, 2)
        vel = rng_truth.normal(0.0, scenario.init_velocity_std, 2)
        x[ti] = [pos[0], vel[0], pos[1], vel[1]]
    for a in range(n_a):
        x[layout.bias_indices(a)] = biases[a]

    # roll the whole truth and measurement record up front so every
    # method replays the exact same realizations
    truth = np.empty((steps, d))
    meas: list[dict[int, AgentMeasurements]] = []
    xk = x
    for k in range(steps):
        nxt = xk.copy()
        for t in range(n_t):
            ti = layout.target_indices(t)
            nxt[ti] = propagate_truth(xk[ti], scenario.dt, scenario.q, rng_truth)
        xk = nxt
        truth[k] = xk
        meas.append({a.id: measure(a, xk, layout, rng_meas) for a in agents})

    p0 = _prior_covariance(scenario)
    l0 = np.linalg.cholesky(p0)
    # every agent and the centralized baseline start from one shared
    # prior belief; a common prior keeps fusion of untouched states a
    # no-op instead of an uncredited averaging of independent errors
    prior_mean = x + l0 @ rng_prior.standard_normal(d)

    partition = build_partition(scenario)
    strict = partition_is_exact(scenario)
    models = [agent_filter_model(a, layout, scenario.dt, scenario.q) for a in agents]
    if scenario.record_estimates == "all":
        rec_agents = list(range(n_a))
    elif scenario.record_estimates == "report":
        rec_agents = [scenario.report_agent]
    else:
        rec_agents = []

    if "SDP" in methods and d > SDP_MAX_DIM:
        raise ConfigError(
            f"SDP fusion is limited to global states of dimension <= {SDP_MAX_DIM} "
            f"(this scenario has {d})")

    out: dict = {"truth": truth, "run": run_idx, "methods": {}}
    for method in methods:
        central = method == "centralized"
        cols = 1 if central else n_a
        rec = {
            "nees": np.empty((steps, cols)),
            "pos_err": np.empty((steps, cols)),
            "avg2sig": np.empty((steps, cols)),
            "cov_trace": np.empty((steps, cols)),
            "omega": [],
            "est_mean": None,
            "est_std": None,
        }
        if central:
            rec_ids = [-1] if scenario.record_estimates != "none" else []
        else:
            rec_ids = rec_agents
        if rec_ids:
            rec["est_mean"] = np.empty((steps, len(rec_ids), d))
            rec["est_std"] = np.empty((steps, len(rec_ids), d))
        rec["est_agents"] = rec_ids

        if central:
            model_c = centralized_model(scenario, agents)
            beliefs = [GaussianEstimate(prior_mean, p0, labels)]
        else:
            beliefs = [GaussianEstimate(prior_mean, p0, labels) for a in range(n_a)]
        wrapped = [AgentBelief(b, partition) for b in beliefs]

        for k in range(steps):
            if central:
                z = stack_measurements(model_c, meas[k])
                wrapped = [AgentBelief(local_filter_step(wrapped[0].estimate, model_c, z),
                                       partition)]
            else:
                stepped = []
                for a in range(n_a):
                    z = stack_measurements(models[a], meas[k])
                    stepped.append(AgentBelief(
                        local_filter_step(wrapped[a].estimate, models[a], z), partition))
                wrapped = stepped
                if method != "none" and (k + 1) > scenario.fusion_start \
                        and (k + 1 - scenario.fusion_start) % scenario.fusion_every == 0:
                    wrapped, recs = fusion_round(
                        wrapped, scenario.edges, method, k, strict=strict,
                        seed=make_substream_seed(scenario.seed, "fusion", run_idx),
                        sdp_samples=scenario.sdp_samples, sdp_tol=scenario.sdp_tol)
                    rec["omega"] += recs
            for c in range(cols):
                est = wrapped[c].estimate
                rec["nees"][k, c] = _metrics.nees(est, truth[k])
                err = est.mean[pos_idx] - truth[k][pos_idx]
                rec["pos_err"][k, c] = float(np.linalg.norm(err))
                pv = np.diag(est.covariance)[pos_idx]
                rec["avg2sig"][k, c] = 2.0 * float(np.sqrt(np.mean(pv)))
                rec["cov_trace"][k, c] = float(np.trace(est.covariance))
            for ri, aid in enumerate(rec_ids):
                est = wrapped[0 if central else aid].estimate
                rec["est_mean"][k, ri] = est.mean
                rec["est_std"][k, ri] = np.sqrt(np.diag(est.covariance))
        out["methods"][method] = rec
    return out


# ---------------------------------------------------------------------------
# Monte-Carlo driver and aggregation

@dataclass
class TrackData:
    scenario: ScenarioConfig
    methods: tuple[str, ...]
    state_dim: int
    runs: list[dict]


def _run_worker(args):
    scenario_dict, run_idx, methods = args
    scn = ScenarioConfig.from_dict(scenario_dict)
    return simulate_run(scn, run_idx, methods)


def run_scenario(scenario: ScenarioConfig, *, methods=None, mc_runs: int | None = None,
                 seed: int | None = None, jobs: int = 1) -> TrackData:
    """Run the Monte-Carlo experiment, optionally across processes.

    ``methods``/``mc_runs``/``seed`` override the scenario fields.  Runs
    are dispatched by index with disjoint substreams, so the result does
    not depend on ``jobs``; records are collected in run order.
    """
    if seed is not None or mc_runs is not None:
        scenario = replace(scenario,
                           seed=scenario.seed if seed is None else int(seed),
                           mc_runs=scenario.mc_runs if mc_runs is None else int(mc_runs))
    methods = tuple(methods or scenario.methods)
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    runs: list[dict]
    if jobs > 1 and scenario.mc_runs > 1:
        from concurrent.futures import ProcessPoolExecutor

        args = [(scenario.to_dict(), r, methods) for r in range(scenario.mc_runs)]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(_run_worker, args))
    else:
        runs = [simulate_run(scenario, r, methods) for r in range(scenario.mc_runs)]
    return TrackData(scenario=scenario, methods=methods,
                     state_dim=scenario.layout().dim, runs=runs)


def summarize(data: TrackData, level: float = 0.95) -> _metrics.McStatistics:
    """Aggregate a tracking experiment into Monte-Carlo statistics.

    The NEES series averages the report agent across runs; the band is
    the scaled chi-square interval for that run count and the global
    state dimension.  RMSE and the 2-sigma summary are averaged over
    runs and agents; steady-state figures average the last quarter of
    the steps.
    """
    scn = data.scenario
    n_runs = len(data.runs)
    steps = scn.n_steps
    tail = max(1, steps // 4)
    band = _metrics.chi2_band(data.state_dim, n_runs, level)
    nees_series: dict = {}
    rmse_mean: dict = {}
    sigma_mean: dict = {}
    omega_log: list = []
    summary: dict = {"state_dim": data.state_dim, "mc_runs": n_runs,
                     "steps": steps, "level": level,
                     "report_agent": scn.report_agent,
                     "band": [band[0], band[1]], "methods": {}}
    for method in data.methods:
        col = 0 if method == "centralized" else scn.report_agent
        nees_runs = np.stack([r["methods"][method]["nees"][:, col] for r in data.runs])
        series = nees_runs.mean(axis=0)
        nees_series[method] = series
        pe = np.stack([r["methods"][method]["pos_err"] for r in data.runs])
        rmse_runs = np.sqrt(np.mean(pe ** 2, axis=1))      # (runs, agents)
        rmse_mean[method] = float(np.mean(rmse_runs))
        s2 = np.stack([r["methods"][method]["avg2sig"] for r in data.runs])
        sigma_mean[method] = float(np.mean(s2))
        tr = np.stack([r["methods"][method]["cov_trace"] for r in data.runs])
        in_band = float(np.mean((series >= band[0]) & (series <= band[1])))
        for r in data.runs:
            for recm in r["methods"][method]["omega"]:
                omega_log.append({"run": r["run"], "method": method, **recm})
        summary["methods"][method] = {
            "rmse_mean": rmse_mean[method],
            "sigma2_mean": sigma_mean[method],
            "nees_in_band_fraction": in_band,
            "nees_steady": float(series[-tail:].mean()),
            "cov_trace_steady": float(tr[:, -tail:, :].mean()),
        }
    stats = _metrics.McStatistics(
        nees_series={m: s.tolist() for m, s in nees_series.items()},
        chi2_bounds=band, rmse_mean=rmse_mean, sigma2_mean=sigma_mean,
        omega_log=omega_log)
    stats.rows = [summary]
    return stats


# ---------------------------------------------------------------------------
# CSV row generators (column contracts in metrics)

def track_rows(data: TrackData):
    for r in data.runs:
        for method in data.methods:
            rec = r["methods"][method]
            cols = rec["nees"].shape[1]
            for k in range(rec["nees"].shape[0]):
                for c in range(cols):
                    agent = -1 if method == "centralized" else c
                    yield {"run": r["run"], "step": k, "method": method,
                           "agent": agent, "nees": float(rec["nees"][k, c]),
                           "pos_error_norm": float(rec["pos_err"][k, c]),
                           "avg_two_sigma": float(rec["avg2sig"][k, c]),
                           "cov_trace": float(rec["cov_trace"][k, c])}


def omega_rows(data: TrackData):
    for r in data.runs:
        for method in data.methods:
            for rec in r["methods"][method]["omega"]:
                yield {"run": r["run"], "step": rec["step"], "method": method,
                       "edge": rec["edge"], "block": rec["block"],
                       "omega": rec["omega"]}


def truth_rows(data: TrackData):
    labels = data.scenario.layout().labels()
    for r in data.runs:
        t = r["truth"]
        for k in range(t.shape[0]):
            for i, lab in enumerate(labels):
                yield {"run": r["run"], "step": k, "label": lab,
                       "value": float(t[k, i])}


ESTIMATE_CSV_COLUMNS = ["run", "step", "method", "agent", "label", "mean", "std"]

def estimate_rows(data: TrackData):
    labels = data.scenario.layout().labels()
    for r in data.runs:
        for method in data.methods:
            rec = r["methods"][method]
            if rec["est_mean"] is None:
                continue
            for k in range(rec["est_mean"].shape[0]):
                for ri, aid in enumerate(rec["est_agents"]):
                    for i, lab in enumerate(labels):
                        yield {"run": r["run"], "step": k, "method": method,
                               "agent": aid, "label": lab,
                               "mean": float(rec["est_mean"][k, ri, i]),
                               "std": float(rec["est_std"][k, ri, i])}
