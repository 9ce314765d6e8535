"""Per-agent utility networks, VDN/QMIX/QTRAN mixers, the TV dual network and
the robust TD targets and losses used to train them.

Architectures are stateless: every forward call takes the :class:`ParamStore`
to read from, so the same object serves online and target parameters.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .autodiff import ParamStore, Tensor, add_dense, as_tensor, concat, dense, stack_sum
from .uncertainty import eta_upper

MIXERS = ("vdn", "qmix", "qtran")


def one_hot(index: np.ndarray, n: int) -> np.ndarray:
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros(index.shape + (n,))
    np.put_along_axis(out, index[..., None], 1.0, axis=-1)
    return out


def history_dim(obs_dim: int, n_actions: int, window: int) -> int:
    return window * (obs_dim + n_actions)


# agent networks ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AgentNetSpec:
    input_dims: tuple[int, ...]
    actions_per_agent: tuple[int, ...]
    hidden: int = 64
    shared: bool = False      # one parameter set for all agents (needs equal dims); agent id appended

    @property
    def n_agents(self) -> int:
        return len(self.actions_per_agent)


class AgentNets:
    """Two-layer ReLU MLPs mapping an encoded history window to per-action utilities."""

    def __init__(self, store: ParamStore, spec: AgentNetSpec, rng: np.random.Generator, prefix: str = "agent"):
        self.spec = spec
        self.prefix = prefix
        H = spec.hidden
        if spec.shared:
            if len(set(spec.input_dims)) != 1 or len(set(spec.actions_per_agent)) != 1:
                raise ValueError("shared agent parameters need identical input and action sizes")
            d = spec.input_dims[0] + spec.n_agents
            self._names = [f"{prefix}"] * spec.n_agents
            self._register(store, prefix, d, spec.actions_per_agent[0], rng)
        else:
            self._names = [f"{prefix}{i}" for i in range(spec.n_agents)]
            for i, name in enumerate(self._names):
                self._register(store, name, spec.input_dims[i], spec.actions_per_agent[i], rng)
        self.hidden_dim = H

    def _register(self, store, name, d_in, n_out, rng) -> None:
        add_dense(store, f"{name}.fc1", d_in, self.spec.hidden, rng)
        add_dense(store, f"{name}.fc2", self.spec.hidden, self.spec.hidden, rng)
        add_dense(store, f"{name}.out", self.spec.hidden, n_out, rng)

    def param_prefixes(self) -> list[str]:
        return sorted(set(f"{n}." for n in self._names))

    def _input(self, agent: int, x) -> Tensor:
        x = np.atleast_2d(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64))
        if self.spec.shared:
            ids = np.zeros((x.shape[0], self.spec.n_agents))
            ids[:, agent] = 1.0
            x = np.concatenate([x, ids], axis=1)
        return Tensor(x)

    def encode(self, store: ParamStore, agent: int, x) -> Tensor:
        """Hidden representation shared with the QTRAN joint network."""
        name = self._names[agent]
        h = dense(store, f"{name}.fc1", self._input(agent, x)).relu()
        return dense(store, f"{name}.fc2", h).relu()

    def head(self, store: ParamStore, agent: int, hidden: Tensor) -> Tensor:
        return dense(store, f"{self._names[agent]}.out", hidden)

    def q_values(self, store: ParamStore, agent: int, x) -> Tensor:
        return self.head(store, agent, self.encode(store, agent, x))

    def q_numpy(self, store: ParamStore, agent: int, x: np.ndarray) -> np.ndarray:
        """Graph-free forward pass for acting; equals ``q_values(...).data``."""
        name = self._names[agent]
        p = store.params
        h = self._input(agent, x).data
        for layer in ("fc1", "fc2"):
            h = h @ p[f"{name}.{layer}.w"].data + p[f"{name}.{layer}.b"].data
            h = h * (h > 0)
        return h @ p[f"{name}.out.w"].data + p[f"{name}.out.b"].data

    def forward(self, store: ParamStore, xs: Sequence[np.ndarray]) -> tuple[list[Tensor], list[Tensor]]:
        hid = [self.encode(store, i, x) for i, x in enumerate(xs)]
        return hid, [self.head(store, i, h) for i, h in enumerate(hid)]

    def greedy(self, store: ParamStore, xs: Sequence[np.ndarray]) -> np.ndarray:
        """Per-agent argmax (smallest id among ties); shape (batch, n_agents)."""
        qs = [self.q_numpy(store, i, x) for i, x in enumerate(xs)]
        return np.stack([np.argmax(q, axis=1) for q in qs], axis=1)


# mixers ------------------------------------------------------------------------------------


class VDNMixer:
    kind = "vdn"
    needs_state = False

    def __call__(self, store: ParamStore, qs: Sequence[Tensor], state=None) -> Tensor:
        return stack_sum([as_tensor(q) for q in qs])

    def param_prefixes(self) -> list[str]:
        return []


class QMixer:
    """Monotonic mixing network whose weights come from state-conditioned hypernetworks.

    Mixing weights pass through ``abs`` so that Q_tot is nondecreasing in every
    agent utility for any parameter values.
    """

    kind = "qmix"
    needs_state = True

    def __init__(self, store: ParamStore, n_agents: int, state_dim: int, rng: np.random.Generator,
                 embed: int = 32, hyper_hidden: int = 64, prefix: str = "mixer"):
        self.n_agents, self.embed, self.prefix = n_agents, embed, prefix
        for i in range(n_agents):
            add_dense(store, f"{prefix}.w1_{i}", state_dim, embed, rng)
        add_dense(store, f"{prefix}.b1", state_dim, embed, rng)
        add_dense(store, f"{prefix}.w2", state_dim, embed, rng)
        add_dense(store, f"{prefix}.v1", state_dim, hyper_hidden, rng)
        add_dense(store, f"{prefix}.v2", hyper_hidden, 1, rng)

    def param_prefixes(self) -> list[str]:
        return [f"{self.prefix}."]

    def weights(self, store: ParamStore, state) -> tuple[list[Tensor], Tensor]:
        s = as_tensor(state)
        w1 = [dense(store, f"{self.prefix}.w1_{i}", s).abs() for i in range(self.n_agents)]
        return w1, dense(store, f"{self.prefix}.w2", s).abs()

    def __call__(self, store: ParamStore, qs: Sequence[Tensor], state=None) -> Tensor:
        if state is None:
            raise ValueError("QMIX mixing needs the global state")
        s = as_tensor(state)
        w1, w2 = self.weights(store, s)
        pre = dense(store, f"{self.prefix}.b1", s)
        for q, w in zip(qs, w1):
            pre = pre + as_tensor(q).reshape(-1, 1) * w
        hidden = pre.elu()
        v = dense(store, f"{self.prefix}.v2", dense(store, f"{self.prefix}.v1", s).relu())
        return (hidden * w2).sum(axis=1) + v.reshape(-1)


class QTranHeads:
    """Joint action-value network and state-value baseline over shared agent encodings."""

    kind = "qtran"
    needs_state = False

    def __init__(self, store: ParamStore, n_agents: int, hidden_dim: int, actions_per_agent: Sequence[int],
                 rng: np.random.Generator, width: int = 64, prefix: str = "qtran"):
        self.prefix = prefix
        self.actions_per_agent = tuple(actions_per_agent)
        d_h = n_agents * hidden_dim
        add_dense(store, f"{prefix}.j1", d_h + sum(self.actions_per_agent), width, rng)
        add_dense(store, f"{prefix}.j2", width, 1, rng)
        add_dense(store, f"{prefix}.v1", d_h, width, rng)
        add_dense(store, f"{prefix}.v2", width, 1, rng)

    def param_prefixes(self) -> list[str]:
        return [f"{self.prefix}."]

    def joint(self, store: ParamStore, hiddens: Sequence[Tensor], actions: np.ndarray) -> Tensor:
        acts = np.atleast_2d(actions)
        oh = [Tensor(one_hot(acts[:, i], n)) for i, n in enumerate(self.actions_per_agent)]
        x = concat(list(hiddens) + oh, axis=1)
        return dense(store, f"{self.prefix}.j2", dense(store, f"{self.prefix}.j1", x).relu()).reshape(-1)

    def value(self, store: ParamStore, hiddens: Sequence[Tensor]) -> Tensor:
        x = concat(list(hiddens), axis=1)
        return dense(store, f"{self.prefix}.v2", dense(store, f"{self.prefix}.v1", x).relu()).reshape(-1)


def mix(variant: str, per_agent_q_chosen: Sequence, state=None, store: Optional[ParamStore] = None,
        mixer=None) -> Tensor:
    """Combine chosen per-agent utilities into Q_tot.

    VDN needs nothing else; QMIX needs ``state`` plus the mixer and its store.
    For QTRAN the joint network is evaluated directly, see :class:`QTranHeads`.
    """
    if variant == "vdn":
        return VDNMixer()(store, per_agent_q_chosen)
    if variant == "qmix":
        if state is None:
            raise ValueError("QMIX mixing needs the global state")
        return mixer(store, per_agent_q_chosen, state)
    if variant == "qtran":
        raise ValueError("QTRAN Q_tot comes from QTranHeads.joint, not a mixer over utilities")
    raise ValueError(f"unknown mixer {variant!r}")


# dual network ------------------------------------------------------------------------------


class DualNet:
    """eta(s, a) in [0, 2/(rho(1-gamma))] as a scaled sigmoid of an MLP."""

    def __init__(self, store: ParamStore, state_dim: int, actions_per_agent: Sequence[int], rho: float,
                 gamma: float, rng: np.random.Generator, hidden: int = 64, init_eta: float = 1.0,
                 prefix: str = "dual"):
        self.prefix = prefix
        self.actions_per_agent = tuple(actions_per_agent)
        self.upper = eta_upper(rho, gamma)
        add_dense(store, f"{prefix}.fc1", state_dim + sum(self.actions_per_agent), hidden, rng)
        add_dense(store, f"{prefix}.out", hidden, 1, rng)
        frac = min(max(init_eta / self.upper, 1e-6), 1 - 1e-6)
        store[f"{prefix}.out.b"].data[:] = np.log(frac / (1 - frac))

    def param_prefixes(self) -> list[str]:
        return [f"{self.prefix}."]

    def __call__(self, store: ParamStore, state, actions: np.ndarray) -> Tensor:
        acts = np.atleast_2d(actions)
        oh = [one_hot(acts[:, i], n) for i, n in enumerate(self.actions_per_agent)]
        x = Tensor(np.concatenate([np.atleast_2d(np.asarray(state))] + oh, axis=1))
        z = dense(store, f"{self.prefix}.out", dense(store, f"{self.prefix}.fc1", x).relu())
        return (z.sigmoid() * self.upper).reshape(-1)


# targets and losses ----------------------------------------------------------------------------


def robust_td_target_contamination(r, gamma: float, rho: float, q_next):
    """y = r + gamma (1 - rho) q_next."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho={rho} outside [0,1]")
    return np.asarray(r, dtype=np.float64) + gamma * (1.0 - rho) * np.asarray(q_next, dtype=np.float64)


def robust_td_target_tv(r, gamma: float, rho: float, eta, q_next):
    """y = r + gamma (1 - rho) eta - gamma [eta - q_next]_+."""
    eta = np.asarray(eta, dtype=np.float64)
    q_next = np.asarray(q_next, dtype=np.float64)
    return np.asarray(r, dtype=np.float64) + gamma * (1.0 - rho) * eta - gamma * np.maximum(eta - q_next, 0.0)


def td_target(uncertainty: str, r, gamma: float, rho: float, q_next, eta=None):
    if uncertainty == "none":
        return robust_td_target_contamination(r, gamma, 0.0, q_next)
    if uncertainty == "contamination":
        return robust_td_target_contamination(r, gamma, rho, q_next)
    if uncertainty == "tv":
        if eta is None:
            raise ValueError("TV targets need the dual variable")
        return robust_td_target_tv(r, gamma, rho, eta, q_next)
    raise ValueError(f"unknown uncertainty {uncertainty!r}")


def td_loss(q_tot_pred: Tensor, y_target) -> Tensor:
    """Mean squared TD error; the target never carries gradient."""
    y = y_target.detach() if isinstance(y_target, Tensor) else Tensor(y_target)
    return (as_tensor(q_tot_pred) - y).square().mean()


def dual_loss(eta: Tensor, q_tot_next_max, rho: float) -> Tensor:
    """Mean of [eta - q_next_max]_+ - (1 - rho) eta; Q enters detached."""
    eta = as_tensor(eta)
    if eta.data.size == 0:
        raise ValueError("dual loss needs a nonempty batch")
    q = Tensor(np.asarray(q_tot_next_max.data if isinstance(q_tot_next_max, Tensor) else q_tot_next_max,
                          dtype=np.float64))
    return ((eta - q).clamp0() - eta * (1.0 - rho)).mean()


def qtran_losses(vdn_sum: Tensor, joint_q, v_tot: Tensor, greedy_flag) -> tuple[Tensor, Tensor]:
    """(L_opt, L_nopt) from the slack ``sum Q_i - Q_jt_detached + V_tot``.

    L_opt averages the squared slack over entries flagged greedy; L_nopt averages
    ``min(slack, 0)^2`` over the rest. An empty group contributes zero.
    """
    flag = np.asarray(greedy_flag, dtype=np.float64).reshape(-1)
    jq = joint_q.detach() if isinstance(joint_q, Tensor) else Tensor(joint_q)
    slack = as_tensor(vdn_sum) - jq + as_tensor(v_tot)
    n_opt, n_nopt = flag.sum(), (1.0 - flag).sum()
    l_opt = (slack.square() * flag).sum() * (1.0 / max(n_opt, 1.0))
    l_nopt = (slack.neg_part().square() * (1.0 - flag)).sum() * (1.0 / max(n_nopt, 1.0))
    return l_opt, l_nopt
