"""Benchmark Dec-POMDPs and perturbation wrappers for out-of-distribution evaluation."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .decpomdp import TabularDecPomdp, validate
from .uncertainty import tv_distance

ENV_KINDS = ("example_b1", "example_b2", "random_decpomdp", "coop_grid")
PERTURBATION_KINDS = ("kernel_contaminate", "kernel_tv_shift", "obs_noise")


# golden two-agent instances ---------------------------------------------------------------

_B_REWARDS = {"example_b1": (0.0, 0.7, 0.4, 1.0, 0.7), "example_b2": (0.0, 0.7, 0.4, 1.0, 0.5)}


def _example_b(rewards: Sequence[float], s0_rows: dict, gamma: float) -> TabularDecPomdp:
    S, A = 5, 4
    kernel = np.zeros((S, A, S))
    for s in range(1, S):
        kernel[s, :, s] = 1.0
    for k, row in s0_rows.items():
        kernel[0, k] = row
    reward = np.repeat(np.asarray(rewards, dtype=np.float64)[:, None], A, axis=1)
    ident = np.arange(S)
    return TabularDecPomdp(kernel, reward, (2, 2), (ident, ident), gamma,
                           state_names=[f"S{s}" for s in range(S)])


def _det(s: int) -> np.ndarray:
    return np.eye(5)[s]


def example_b1(variant: str = "P1", gamma: float = 0.9) -> TabularDecPomdp:
    """Two agents, actions {1,2} (ids 0,1); P1 deterministic, P2 mixes S2/S3 on (1,2) and (2,1)."""
    rows = {0: _det(1), 1: _det(2), 2: _det(3), 3: _det(4)}
    if variant == "P2":
        rows[1] = np.array([0, 0, 1 / 3, 2 / 3, 0])
        rows[2] = np.array([0, 0, 2 / 3, 1 / 3, 0])
    elif variant != "P1":
        raise ValueError(f"unknown variant {variant!r}")
    return _example_b(_B_REWARDS["example_b1"], rows, gamma)


def example_b2(variant: str = "P1", gamma: float = 0.9) -> TabularDecPomdp:
    """P1 deterministic with S4 reward 0.5; under P2 every action leads to S4."""
    if variant == "P1":
        rows = {0: _det(1), 1: _det(2), 2: _det(3), 3: _det(4)}
    elif variant == "P2":
        rows = {k: _det(4) for k in range(4)}
    else:
        raise ValueError(f"unknown variant {variant!r}")
    return _example_b(_B_REWARDS["example_b2"], rows, gamma)


# random instances ---------------------------------------------------------------------


def _digit_obs(n_states: int, n_agents: int) -> tuple[np.ndarray, ...]:
    base = int(np.ceil(n_states ** (1.0 / n_agents)))
    while base ** n_agents < n_states:
        base += 1
    s = np.arange(n_states)
    return tuple((s // base ** i) % base for i in range(n_agents))


def random_decpomdp(seed: int, n_states: int = 5, n_agents: int = 2,
                    actions: Sequence[int] | int = 2, gamma: float = 0.9,
                    concentration: float = 0.5, fail_state: bool = True) -> TabularDecPomdp:
    """Dirichlet kernels, rewards in [0,1]; the last state is an absorbing zero-reward fail state."""
    rng = np.random.default_rng(seed)
    acts = (actions,) * n_agents if isinstance(actions, int) else tuple(actions)
    A = int(np.prod(acts))
    kernel = rng.dirichlet(np.full(n_states, concentration), size=(n_states, A))
    reward = rng.uniform(0.0, 1.0, size=(n_states, A))
    fail = None
    if fail_state:
        fail = n_states - 1
        kernel[fail] = 0.0
        kernel[fail, :, fail] = 1.0
        reward[fail] = 0.0
    kernel /= kernel.sum(axis=-1, keepdims=True)
    return TabularDecPomdp(kernel, reward, acts, _digit_obs(n_states, n_agents), gamma, fail)


# cooperative gridworld -------------------------------------------------------------------

MOVES = ((0, 0), (-1, 0), (1, 0), (0, -1), (0, 1))   # stay, up, down, left, right


@dataclass(frozen=True)
class CoopGridLayout:
    size: int = 5
    start: tuple[tuple[int, int], tuple[int, int]] = ((0, 0), (0, 0))
    far_targets: tuple[tuple[int, int], tuple[int, int]] = ((2, 2), (2, 1))
    near_targets: tuple[tuple[int, int], tuple[int, int]] = ((1, 0), (0, 1))
    far_reward: float = 1.0
    near_reward: float = 0.6
    step_penalty: float = -0.01
    slip: float = 0.1
    wall_fail: float = 0.0

    @property
    def n_cells(self) -> int:
        return self.size * self.size

    @property
    def done_state(self) -> int:
        return self.n_cells ** 2

    @property
    def fail_state(self) -> int:
        return self.n_cells ** 2 + 1

    def cell(self, rc: tuple[int, int]) -> int:
        return rc[0] * self.size + rc[1]

    def encode(self, c0: int, c1: int) -> int:
        return c0 * self.n_cells + c1


def _agent_moves(layout: CoopGridLayout) -> np.ndarray:
    """(cells, 5 actions, cells + 1): last column is the fail outcome."""
    n, C = layout.size, layout.n_cells
    T = np.zeros((C, len(MOVES), C + 1))
    for c in range(C):
        r, col = divmod(c, n)
        for a, (dr, dc) in enumerate(MOVES):
            nr, nc = r + dr, col + dc
            T[c, a, c] += layout.slip
            if 0 <= nr < n and 0 <= nc < n:
                T[c, a, nr * n + nc] += 1.0 - layout.slip
            else:
                T[c, a, C] += (1.0 - layout.slip) * layout.wall_fail
                T[c, a, c] += (1.0 - layout.slip) * (1.0 - layout.wall_fail)
    return T


def coop_grid(layout: CoopGridLayout = CoopGridLayout(), gamma: float = 0.95) -> TabularDecPomdp:
    """Two agents on a grid; both must stand on a paired target at once.

    Agent ``i`` observes its own cell plus a flag telling whether its partner is on
    one of the partner's target cells. Reaching a target pair pays its reward and
    moves to an absorbing ``done`` state. With ``wall_fail > 0`` bumping into a
    wall can drop the team into the absorbing fail state.
    """
    C = layout.n_cells
    S = C * C + 2
    done, fail = layout.done_state, layout.fail_state
    T = _agent_moves(layout)
    nA = len(MOVES)
    kernel = np.zeros((S, nA * nA, S))
    reward = np.full((S, nA * nA), layout.step_penalty)
    far = tuple(layout.cell(t) for t in layout.far_targets)
    near = tuple(layout.cell(t) for t in layout.near_targets)
    for c0 in range(C):
        for c1 in range(C):
            s = layout.encode(c0, c1)
            if (c0, c1) == far or (c0, c1) == near:
                reward[s] = layout.far_reward if (c0, c1) == far else layout.near_reward
                kernel[s, :, done] = 1.0
                continue
            for a0 in range(nA):
                p0 = T[c0, a0]
                for a1 in range(nA):
                    p1 = T[c1, a1]
                    row = kernel[s, a0 * nA + a1]
                    row[:C * C] = np.outer(p0[:C], p1[:C]).ravel()
                    row[fail] = 1.0 - row[:C * C].sum()
    for z in (done, fail):
        kernel[z, :, z] = 1.0
        reward[z] = 0.0
    kernel[np.abs(kernel) < 1e-15] = 0.0
    kernel /= kernel.sum(axis=-1, keepdims=True)

    targets = [{far[i], near[i]} for i in range(2)]
    obs = [np.zeros(S, dtype=np.int64) for _ in range(2)]
    for c0 in range(C):
        for c1 in range(C):
            s = layout.encode(c0, c1)
            obs[0][s] = c0 + C * int(c1 in targets[1])
            obs[1][s] = c1 + C * int(c0 in targets[0])
    for o in obs:
        o[done], o[fail] = 2 * C, 2 * C + 1
    names = [f"({divmod(c0, layout.size)},{divmod(c1, layout.size)})" for c0 in range(C) for c1 in range(C)]
    return TabularDecPomdp(kernel, reward, (nA, nA), tuple(obs), gamma, fail, names + ["done", "fail"])


# perturbations ----------------------------------------------------------------------------


@dataclass(frozen=True)
class Perturbation:
    kind: str
    rho: float = 0.0          # rho_test for kernel shifts, sigma for obs_noise
    seed: int = 0
    target: str = "auto"      # kernel_tv_shift: "fail", "random" or "auto"

    def __post_init__(self) -> None:
        if self.kind not in PERTURBATION_KINDS:
            raise ValueError(f"unknown perturbation {self.kind!r}")
        if self.kind != "obs_noise" and not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho_test must lie in [0,1]")
        if self.kind == "obs_noise" and self.rho < 0:
            raise ValueError("sigma must be non-negative")


def perturb(model: TabularDecPomdp, p: Perturbation) -> TabularDecPomdp:
    """Return a model whose kernel lies in the rho_test ball around ``model``'s."""
    if p.kind == "obs_noise" or p.rho == 0.0:
        return model
    rng = np.random.default_rng(p.seed)
    P = model.kernel
    S, A, _ = P.shape
    keep = np.ones((S, A), dtype=bool)
    if model.fail_state is not None:
        keep[model.fail_state] = False         # the fail state stays absorbing under every member
    if p.kind == "kernel_contaminate":
        nu = rng.dirichlet(np.ones(S), size=(S, A))
        out = np.where(keep[..., None], (1.0 - p.rho) * P + p.rho * nu, P)
        # mixture-form membership: the recovered nu must be a distribution
        nu_back = (out - (1.0 - p.rho) * P) / p.rho
        assert np.all(nu_back[keep] >= -1e-12) and np.allclose(nu_back[keep].sum(-1), 1.0, atol=1e-12)
    else:
        mode = p.target
        if mode == "auto":
            mode = "fail" if model.fail_state is not None else "random"
        if mode == "fail":
            if model.fail_state is None:
                raise ValueError("fail-target shift needs a model with a fail state")
            tgt = np.full((S, A), model.fail_state)
        else:
            tgt = rng.integers(0, S, size=(S, A))
        out = _shift_rows(P, tgt, p.rho, keep)
        assert np.all(tv_distance(out, P) <= p.rho + 1e-12)
    pm = model.with_kernel(out)
    err = validate(pm)
    assert err is None, str(err)
    return pm


def _shift_rows(P: np.ndarray, target: np.ndarray, rho: float, keep: np.ndarray) -> np.ndarray:
    """Move min(rho, 1 - p_target) mass proportionally from the other states onto ``target``."""
    S, A, _ = P.shape
    s_idx, k_idx = np.indices((S, A))
    pt = P[s_idx, k_idx, target]
    rest = 1.0 - pt
    take = np.where(keep & (rest > 0), np.minimum(rho, rest), 0.0)
    scale = 1.0 - take / np.where(rest > 0, rest, 1.0)
    out = P * scale[..., None]
    out[s_idx, k_idx, target] = pt + take
    return out


# simulation environments ---------------------------------------------------------------------


@dataclass
class EnvSpec:
    kind: str
    params: dict = field(default_factory=dict)
    perturbation: Optional[Perturbation] = None
    name: Optional[str] = None

    def __post_init__(self) -> None:
        if self.kind not in ENV_KINDS:
            raise ValueError(f"unknown env kind {self.kind!r}")
        if isinstance(self.perturbation, dict):
            self.perturbation = Perturbation(**self.perturbation)

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.perturbation is None:
            return self.kind
        return f"{self.kind}+{self.perturbation.kind}({self.perturbation.rho})"

    def to_dict(self) -> dict:
        return {"kind": self.kind, "params": self.params, "name": self.name,
                "perturbation": None if self.perturbation is None else asdict(self.perturbation)}

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        unknown = set(d) - {"kind", "params", "perturbation", "name"}
        if unknown:
            raise ValueError(f"unknown env spec keys {sorted(unknown)}")
        return cls(d["kind"], dict(d.get("params", {})), d.get("perturbation"), d.get("name"))


class MultiAgentEnv:
    """Episodic simulator over a tabular model with one-hot observation features."""

    def __init__(self, model: TabularDecPomdp, init_dist: np.ndarray, horizon: int,
                 terminal_states: Sequence[int] = (), obs_noise: float = 0.0, noise_seed: int = 0,
                 name: str = "env"):
        self.model = model
        self.init_dist = np.asarray(init_dist, dtype=np.float64)
        self.horizon = int(horizon)
        self.terminal = np.zeros(model.n_states, dtype=bool)
        self.terminal[list(terminal_states)] = True
        self.obs_noise = float(obs_noise)
        self.noise_rng = np.random.default_rng(noise_seed)
        self.name = name
        self.obs_dims = tuple(model.n_obs(i) for i in range(model.n_agents))
        self._eye = [np.eye(d) for d in self.obs_dims]
        self.state_dim = sum(self.obs_dims)
        self._state_feats = np.concatenate(
            [self._eye[i][model.obs_map[i]] for i in range(model.n_agents)], axis=1)

    @property
    def n_agents(self) -> int:
        return self.model.n_agents

    @property
    def actions_per_agent(self) -> tuple[int, ...]:
        return self.model.actions_per_agent

    def reset(self, rng: np.random.Generator) -> int:
        return int(rng.choice(self.model.n_states, p=self.init_dist))

    def step(self, state: int, joint_action: Sequence[int], rng: np.random.Generator) -> tuple[int, float, bool]:
        nxt, r = self.model.step(state, joint_action, rng)
        return nxt, r, bool(self.terminal[nxt])

    def observe(self, state: int) -> tuple[int, ...]:
        return self.model.observe(state)

    def obs_features(self, agent: int, obs_id: int) -> np.ndarray:
        f = self._eye[agent][obs_id]
        if self.obs_noise > 0:
            f = f + self.noise_rng.normal(0.0, self.obs_noise, size=f.shape)
        return f

    def state_features(self, state: int) -> np.ndarray:
        return self._state_feats[state]


def build_model(spec: EnvSpec) -> TabularDecPomdp:
    prm = dict(spec.params)
    prm.pop("horizon", None)
    prm.pop("start", None)
    if spec.kind == "example_b1":
        model = example_b1(prm.get("variant", "P1"), prm.get("gamma", 0.9))
    elif spec.kind == "example_b2":
        model = example_b2(prm.get("variant", "P1"), prm.get("gamma", 0.9))
    elif spec.kind == "random_decpomdp":
        model = random_decpomdp(prm.get("seed", 0), prm.get("n_states", 5), prm.get("n_agents", 2),
                                prm.get("actions", 2), prm.get("gamma", 0.9),
                                prm.get("concentration", 0.5), prm.get("fail_state", True))
    else:
        gamma = prm.pop("gamma", 0.95)
        layout = CoopGridLayout(**{k: _tuplify(v) for k, v in prm.items()})
        model = coop_grid(layout, gamma)
    if spec.perturbation is not None:
        model = perturb(model, spec.perturbation)
    return model


def _tuplify(v):
    if isinstance(v, list):
        return tuple(_tuplify(x) for x in v)
    return v


def make_env(spec: EnvSpec) -> MultiAgentEnv:
    model = build_model(spec)
    err = validate(model)
    if err is not None:
        raise ValueError(f"{spec.label}: {err}")
    prm = spec.params
    S = model.n_states
    init = np.zeros(S)
    terminal: list[int] = []
    if spec.kind in ("example_b1", "example_b2"):
        init[0] = 1.0
        horizon = prm.get("horizon", 10)
    elif spec.kind == "random_decpomdp":
        live = [s for s in range(S) if s != model.fail_state]
        init[live] = 1.0 / len(live)
        horizon = prm.get("horizon", 20)
        if model.fail_state is not None:
            terminal.append(model.fail_state)
    else:
        lay = CoopGridLayout(**{k: _tuplify(v) for k, v in prm.items() if k not in ("gamma", "horizon")})
        init[lay.encode(lay.cell(lay.start[0]), lay.cell(lay.start[1]))] = 1.0
        horizon = prm.get("horizon", 20)
        terminal = [lay.done_state, lay.fail_state]
    pert = spec.perturbation
    noise = pert.rho if pert is not None and pert.kind == "obs_noise" else 0.0
    seed = pert.seed if pert is not None else 0
    return MultiAgentEnv(model, init, horizon, terminal, noise, seed, spec.label)
