"""Finite cooperative Dec-POMDP models: representation, validation, simulation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

ROW_TOL = 1e-12


class ModelError(ValueError):
    """Raised for invalid states, actions or observations."""


class NotInImageError(ModelError):
    """A joint observation that no state produces."""


@dataclass(frozen=True)
class Violation:
    invariant: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.invariant} at {self.location}: {self.message}"


@dataclass(eq=False)
class TabularDecPomdp:
    """A finite Dec-POMDP with a dense joint-action kernel.

    ``kernel`` has shape ``(n_states, n_joint_actions, n_states)`` and ``reward``
    has shape ``(n_states, n_joint_actions)``. Joint actions are flattened in
    row-major order over ``actions_per_agent`` (agent 0 is the slowest index).
    ``obs_map[i][s]`` is agent ``i``'s observation id in state ``s``.
    """

    kernel: np.ndarray
    reward: np.ndarray
    actions_per_agent: tuple[int, ...]
    obs_map: tuple[np.ndarray, ...]
    gamma: float
    fail_state: Optional[int] = None
    state_names: Optional[list[str]] = None
    _decode: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self) -> None:
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.reward = np.asarray(self.reward, dtype=np.float64)
        self.actions_per_agent = tuple(int(a) for a in self.actions_per_agent)
        self.obs_map = tuple(np.asarray(o, dtype=np.int64) for o in self.obs_map)
        self.gamma = float(self.gamma)
        if self.fail_state is not None:
            self.fail_state = int(self.fail_state)
        self._decode = {}
        for s in range(self.n_states):
            self._decode.setdefault(self.observe(s), s)

    @property
    def n_states(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_agents(self) -> int:
        return len(self.actions_per_agent)

    @property
    def n_joint_actions(self) -> int:
        return int(np.prod(self.actions_per_agent))

    @property
    def reward_bound(self) -> float:
        return float(np.max(np.abs(self.reward))) if self.reward.size else 0.0

    def n_obs(self, agent: int) -> int:
        return int(self.obs_map[agent].max()) + 1

    def joint_index(self, joint_action: Sequence[int]) -> int:
        if len(joint_action) != self.n_agents:
            raise ModelError(f"joint action {tuple(joint_action)} has wrong length")
        for i, (a, n) in enumerate(zip(joint_action, self.actions_per_agent)):
            if not 0 <= int(a) < n:
                raise ModelError(f"invalid action {a} for agent {i}")
        return int(np.ravel_multi_index(tuple(int(a) for a in joint_action), self.actions_per_agent))

    def joint_action(self, index: int) -> tuple[int, ...]:
        if not 0 <= index < self.n_joint_actions:
            raise ModelError(f"invalid joint action index {index}")
        return tuple(int(a) for a in np.unravel_index(index, self.actions_per_agent))

    def all_joint_actions(self) -> list[tuple[int, ...]]:
        return [self.joint_action(k) for k in range(self.n_joint_actions)]

    def _check_state(self, state: int) -> int:
        if not 0 <= int(state) < self.n_states:
            raise ModelError(f"invalid state {state}")
        return int(state)

    def observe(self, state: int) -> tuple[int, ...]:
        s = self._check_state(state)
        return tuple(int(o[s]) for o in self.obs_map)

    def decode(self, joint_obs: Sequence[int]) -> int:
        key = tuple(int(o) for o in joint_obs)
        try:
            return self._decode[key]
        except KeyError:
            raise NotInImageError(f"joint observation {key} is not produced by any state") from None

    def step(self, state: int, joint_action: Sequence[int] | int,
             rng: np.random.Generator) -> tuple[int, float]:
        s = self._check_state(state)
        k = joint_action if isinstance(joint_action, (int, np.integer)) else self.joint_index(joint_action)
        if not 0 <= int(k) < self.n_joint_actions:
            raise ModelError(f"invalid joint action index {k}")
        cdf = np.cumsum(self.kernel[s, k])
        nxt = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        return min(nxt, self.n_states - 1), float(self.reward[s, k])

    def with_kernel(self, kernel: np.ndarray) -> "TabularDecPomdp":
        return TabularDecPomdp(kernel=kernel, reward=self.reward.copy(),
                               actions_per_agent=self.actions_per_agent,
                               obs_map=self.obs_map, gamma=self.gamma,
                               fail_state=self.fail_state, state_names=self.state_names)

    # serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "tabular-decpomdp",
            "version": 1,
            "n_states": self.n_states,
            "n_agents": self.n_agents,
            "actions_per_agent": list(self.actions_per_agent),
            "gamma": self.gamma,
            "fail_state": self.fail_state,
            "state_names": self.state_names,
            "obs_map": [o.tolist() for o in self.obs_map],
            "reward": self.reward.tolist(),
            "kernel": self.kernel.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "TabularDecPomdp":
        if data.get("format") != "tabular-decpomdp":
            raise ModelError("not a tabular-decpomdp document")
        model = cls(kernel=np.array(data["kernel"], dtype=np.float64),
                    reward=np.array(data["reward"], dtype=np.float64),
                    actions_per_agent=tuple(data["actions_per_agent"]),
                    obs_map=tuple(np.array(o) for o in data["obs_map"]),
                    gamma=data["gamma"], fail_state=data.get("fail_state"),
                    state_names=data.get("state_names"))
        if model.n_states != data["n_states"] or model.n_agents != data["n_agents"]:
            raise ModelError("declared sizes do not match the arrays")
        return model

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "TabularDecPomdp":
        return cls.from_dict(json.loads(Path(path).read_text()))


def validate(model: TabularDecPomdp) -> Optional[Violation]:
    """Return the first violated model invariant, or None when the model is valid."""
    S, A = model.n_states, model.n_joint_actions
    if model.kernel.shape != (S, A, S):
        return Violation("shape", "kernel", f"expected {(S, A, S)}, got {model.kernel.shape}")
    if model.reward.shape != (S, A):
        return Violation("shape", "reward", f"expected {(S, A)}, got {model.reward.shape}")
    if not 0.0 < model.gamma < 1.0:
        return Violation("discount", "gamma", f"gamma={model.gamma} not in (0,1)")
    if not np.all(np.isfinite(model.reward)):
        s, k = np.argwhere(~np.isfinite(model.reward))[0]
        return Violation("bounded reward", _cell(model, s, k), "non-finite reward")
    bad = np.any((model.kernel < 0) | ~np.isfinite(model.kernel), axis=-1)
    totals = model.kernel.sum(axis=-1)
    off = np.abs(totals - 1.0) > ROW_TOL
    if bad.any() or off.any():
        # report the first offending cell in (state, joint action) order
        s, k = np.argwhere(bad | off)[0]
        if bad[s, k]:
            return Violation("stochastic kernel", _cell(model, s, k), "negative or non-finite entry")
        return Violation("stochastic kernel", _cell(model, s, k), f"row sums to {totals[s, k]:.12g}")
    if len(model.obs_map) != model.n_agents:
        return Violation("observation map", "obs_map", "one map per agent required")
    for i, o in enumerate(model.obs_map):
        if o.shape != (S,) or np.any(o < 0):
            return Violation("observation map", f"agent {i}", "must map every state to a non-negative id")
    seen: dict[tuple, int] = {}
    for s in range(S):
        key = model.observe(s)
        if key in seen:
            return Violation("injective observation", f"states {seen[key]} and {s}",
                             f"share joint observation {key}")
        seen[key] = s
    f = model.fail_state
    if f is not None:
        if not 0 <= f < S:
            return Violation("fail state", "fail_state", f"{f} is not a state")
        for k in range(A):
            if model.reward[f, k] != 0.0:
                return Violation("fail state", _cell(model, f, k),
                                 f"reward {model.reward[f, k]} must be 0")
            if model.kernel[f, k, f] != 1.0:
                return Violation("fail state", _cell(model, f, k),
                                 "fail state must be absorbing")
    return None


def _cell(model: TabularDecPomdp, s: int, k: int) -> str:
    a = tuple(x + 1 for x in model.joint_action(int(k)))
    return f"row (s{int(s)},{a})"


# histories and transitions ------------------------------------------------------


class History:
    """Fixed-window action-observation history shared by all agents.

    Each entry is ``(joint_obs, prev_joint_action)`` where ``prev_joint_action`` is
    None for the first step of an episode. At most ``window`` entries are kept.
    """

    def __init__(self, window: int, initial_obs: Sequence[int]):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self.entries: list[tuple[tuple[int, ...], Optional[tuple[int, ...]]]] = [(tuple(initial_obs), None)]

    def push(self, obs: Sequence[int], prev_action: Sequence[int]) -> None:
        self.entries.append((tuple(obs), tuple(prev_action)))
        if len(self.entries) > self.window:
            del self.entries[0]

    def agent_view(self, agent: int) -> list[tuple[int, Optional[int]]]:
        return [(o[agent], None if a is None else a[agent]) for o, a in self.entries]

    @property
    def filled(self) -> int:
        return len(self.entries)

    def copy(self) -> "History":
        h = History.__new__(History)
        h.window = self.window
        h.entries = list(self.entries)
        return h


@dataclass(frozen=True)
class Transition:
    history: tuple[np.ndarray, ...]   # one encoded window per agent
    state: int
    joint_action: tuple[int, ...]
    reward: float
    next_history: tuple[np.ndarray, ...]
    next_state: int
    terminal: bool
    filled: int = 1           # real (non-padding) entries in ``history``

    def __post_init__(self) -> None:
        if not np.isfinite(self.reward):
            raise ModelError("transition reward must be finite")
