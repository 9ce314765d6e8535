"""Replay, exploration, target synchronisation and the robust factorized training loop."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import Adam, NonFiniteError, ParamStore, RMSprop, clip_grad_norm
from .decpomdp import Transition
from .envs import MultiAgentEnv
from .factorization import (AgentNets, AgentNetSpec, DualNet, QMixer, QTranHeads, VDNMixer, dual_loss,
                            history_dim, one_hot, qtran_losses, td_loss, td_target)

ALGORITHMS = ("vdn", "qmix", "qtran")
UNCERTAINTIES = ("none", "contamination", "tv")


class DivergenceError(FloatingPointError):
    pass


# replay and exploration -------------------------------------------------------------------------


class ReplayBuffer:
    """FIFO ring buffer of transitions with uniform sampling of distinct indices."""

    def __init__(self, capacity: int, rng: np.random.Generator):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.rng = rng
        self.items: list[Optional[Transition]] = [None] * capacity
        self.filled = np.zeros(capacity, dtype=np.int64)
        self.pos = 0
        self.size = 0
        self.added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, tr: Transition) -> None:
        self.items[self.pos] = tr
        self.filled[self.pos] = tr.filled
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.added += 1

    def ordered(self) -> list[Transition]:
        """Stored transitions from oldest to newest."""
        start = self.pos if self.size == self.capacity else 0
        return [self.items[(start + k) % self.capacity] for k in range(self.size)]

    def eligible(self, min_filled: int = 1) -> np.ndarray:
        return np.flatnonzero(self.filled[:self.size] >= min_filled)

    def sample(self, batch_size: int, min_filled: int = 1) -> Optional[list[Transition]]:
        """``batch_size`` distinct transitions whose history has >= ``min_filled`` real entries."""
        idx = self.eligible(min_filled)
        if len(idx) < batch_size:
            return None
        pick = self.rng.choice(idx, size=batch_size, replace=False)
        return [self.items[i] for i in pick]


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.01
    anneal_steps: int = 50_000

    def __call__(self, step: int) -> float:
        if self.anneal_steps <= 0:
            return self.end
        frac = min(max(step / self.anneal_steps, 0.0), 1.0)
        return self.start + frac * (self.end - self.start)


def eps_greedy(q_rows: Sequence[np.ndarray], epsilon: float, rng: np.random.Generator) -> tuple[int, ...]:
    """Independently per agent: uniform with prob ``epsilon``, else argmax (smallest id on ties)."""
    out = []
    for q in q_rows:
        q = np.asarray(q).reshape(-1)
        if rng.random() < epsilon:
            out.append(int(rng.integers(len(q))))
        else:
            out.append(int(np.argmax(q)))
    return tuple(out)


def target_sync(params: ParamStore, snapshot: ParamStore, f: int, step: int) -> ParamStore:
    """Return a fresh deep copy of ``params`` exactly when ``step % f == 0``."""
    if f < 1:
        raise ValueError("sync frequency must be >= 1")
    return params.snapshot() if step % f == 0 else snapshot


# history encoding ----------------------------------------------------------------------------------


class HistoryEncoder:
    """Per-agent window of (observation features, previous action one-hot), zero-padded at the front."""

    def __init__(self, env: MultiAgentEnv, window: int):
        self.env = env
        self.window = window
        self.dims = [env.obs_dims[i] + env.actions_per_agent[i] for i in range(env.n_agents)]
        self.slots: list[list[np.ndarray]] = []

    @property
    def input_dims(self) -> tuple[int, ...]:
        return tuple(history_dim(self.env.obs_dims[i], self.env.actions_per_agent[i], self.window)
                     for i in range(self.env.n_agents))

    def reset(self, obs: Sequence[int]) -> None:
        self.slots = [[self._entry(i, obs[i], None)] for i in range(self.env.n_agents)]

    def _entry(self, agent: int, obs_id: int, prev_action: Optional[int]) -> np.ndarray:
        nA = self.env.actions_per_agent[agent]
        act = np.zeros(nA) if prev_action is None else one_hot(prev_action, nA)
        return np.concatenate([self.env.obs_features(agent, obs_id), act])

    def push(self, obs: Sequence[int], joint_action: Sequence[int]) -> None:
        for i, sl in enumerate(self.slots):
            sl.append(self._entry(i, obs[i], joint_action[i]))
            if len(sl) > self.window:
                del sl[0]

    @property
    def filled(self) -> int:
        return len(self.slots[0])

    def features(self) -> tuple[np.ndarray, ...]:
        out = []
        for i, sl in enumerate(self.slots):
            pad = [np.zeros(self.dims[i])] * (self.window - len(sl))
            out.append(np.concatenate(pad + sl))
        return tuple(out)

    def copy(self) -> "HistoryEncoder":
        h = HistoryEncoder.__new__(HistoryEncoder)
        h.env, h.window, h.dims = self.env, self.window, self.dims
        h.slots = [list(sl) for sl in self.slots]
        return h


# configuration and records ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    algorithm: str = "vdn"
    uncertainty: str = "none"
    rho: float = 0.0
    gamma: Optional[float] = None          # None: use the environment model's discount
    steps: int = 50_000
    episodes: Optional[int] = None         # optional cap on episodes
    horizon: Optional[int] = None          # None: the environment's horizon
    batch_size: int = 64
    buffer_capacity: int = 10_000
    target_sync: int = 200                 # in parameter updates
    update_every: int = 2                  # environment steps per parameter update
    lr_agent: float = 5e-4
    lr_joint: float = 1e-3                 # QTRAN joint/value networks and the dual network
    window: int = 4
    burn_in: int = 1                       # minimum real history entries for a trainable transition
    hidden: int = 64
    mixer_embed: int = 32
    shared_agent: bool = False
    eps_start: float = 1.0
    eps_end: float = 0.01
    eps_anneal: int = 20_000
    grad_clip: float = 10.0
    eval_every: int = 5_000
    eval_episodes: int = 32
    learning_starts: int = 500
    seed: int = 0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm: {self.algorithm!r} not in {ALGORITHMS}")
        if self.uncertainty not in UNCERTAINTIES:
            raise ValueError(f"uncertainty: {self.uncertainty!r} not in {UNCERTAINTIES}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho: {self.rho} outside [0,1]")
        if self.uncertainty == "tv" and self.rho == 0.0:
            raise ValueError("rho: TV training needs rho > 0 (use uncertainty 'none' for rho = 0)")
        if self.gamma is not None and not 0.0 < self.gamma < 1.0:
            raise ValueError(f"gamma: {self.gamma} not in (0,1)")
        for name in ("steps", "batch_size", "buffer_capacity", "target_sync", "update_every", "window",
                     "hidden", "mixer_embed", "eval_every", "eval_episodes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name}: must be >= 1")
        if not 1 <= self.burn_in <= self.window:
            raise ValueError("burn_in: must lie in [1, window]")
        if self.batch_size > self.buffer_capacity:
            raise ValueError("batch_size: exceeds buffer_capacity")

    @property
    def effective_rho(self) -> float:
        return 0.0 if self.uncertainty == "none" else self.rho

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Checkpoint:
    step: int
    episode: int
    epsilon: float
    train_return: float
    eval: dict                 # env label -> [mean, stderr] over episodes
    losses: dict

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunRecord:
    run_id: str
    config: dict
    env: str
    eval_envs: list
    checkpoints: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""
    checkpoint_path: Optional[str] = None
    param_checksum: Optional[str] = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["checkpoints"] = [c.to_dict() if isinstance(c, Checkpoint) else c for c in self.checkpoints]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        rec = cls(**{k: v for k, v in d.items() if k != "checkpoints"})
        rec.checkpoints = [Checkpoint(**c) for c in d.get("checkpoints", [])]
        return rec

    def final_eval(self, label: str) -> float:
        return float(self.checkpoints[-1].eval[label][0])

    def save(self, directory: str | Path) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.run_id}.json"
        path.write_text(json.dumps(self.to_dict(), indent=1))
        with open(directory / f"{self.run_id}.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            labels = list(self.eval_envs)
            w.writerow(["step", "episode", "epsilon", "train_return"] + [f"eval:{l}" for l in labels]
                       + ["loss_td", "loss_dual", "loss_opt", "loss_nopt"])
            for c in self.checkpoints:
                w.writerow([c.step, c.episode, c.epsilon, c.train_return]
                           + [c.eval[l][0] for l in labels]
                           + [c.losses.get(k, "") for k in ("td", "dual", "opt", "nopt")])
        return path

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))


# learner ------------------------------------------------------------------------------------------------


class Learner:
    """Networks, optimizers and the update rule for one algorithm/uncertainty pair."""

    def __init__(self, config: TrainConfig, env: MultiAgentEnv, rng: np.random.Generator):
        self.cfg = config
        self.env = env
        self.gamma = config.gamma if config.gamma is not None else env.model.gamma
        self.rho = config.effective_rho
        enc = HistoryEncoder(env, config.window)
        self.store = ParamStore()
        self.agents = AgentNets(self.store, AgentNetSpec(enc.input_dims, env.actions_per_agent,
                                                         config.hidden, config.shared_agent), rng)
        if config.algorithm == "vdn":
            self.mixer = VDNMixer()
        elif config.algorithm == "qmix":
            self.mixer = QMixer(self.store, env.n_agents, env.state_dim, rng, embed=config.mixer_embed)
        else:
            self.mixer = QTranHeads(self.store, env.n_agents, config.hidden, env.actions_per_agent, rng)
        self.dual = None
        if config.uncertainty == "tv":
            self.dual = DualNet(self.store, env.state_dim, env.actions_per_agent, self.rho, self.gamma, rng)
        self.agent_names = self.store.subset(self.agents.param_prefixes()
                                             + (self.mixer.param_prefixes() if config.algorithm == "qmix" else []))
        self.joint_names = self.store.subset(self.mixer.param_prefixes()) if config.algorithm == "qtran" else []
        self.dual_names = self.store.subset(self.dual.param_prefixes()) if self.dual else []
        self.opt_agent = RMSprop(lr=config.lr_agent)
        self.opt_joint = Adam(lr=config.lr_joint)
        self.opt_dual = Adam(lr=config.lr_joint)
        self.target = self.store.snapshot()
        self.updates = 0

    # acting ----------------------------------------------------------------------------------

    def q_rows(self, feats: Sequence[np.ndarray]) -> list[np.ndarray]:
        return [self.agents.q_numpy(self.store, i, f[None])[0] for i, f in enumerate(feats)]

    # batched pieces ---------------------------------------------------------------------------

    def _stack(self, batch: Sequence[Transition]):
        n = self.env.n_agents
        X = [np.array([t.history[i] for t in batch]) for i in range(n)]
        Xn = [np.array([t.next_history[i] for t in batch]) for i in range(n)]
        A = np.array([t.joint_action for t in batch], dtype=np.int64)
        r = np.array([t.reward for t in batch])
        done = np.array([t.terminal for t in batch], dtype=np.float64)
        S = self.env.state_features(np.array([t.state for t in batch]))
        Sn = self.env.state_features(np.array([t.next_state for t in batch]))
        return X, Xn, A, r, done, S, Sn

    def q_tot(self, store: ParamStore, X, A, S):
        hid, qs = self.agents.forward(store, X)
        chosen = [q.gather(A[:, i]) for i, q in enumerate(qs)]
        if self.cfg.algorithm == "qtran":
            return self.mixer.joint(store, hid, A), hid, qs, chosen
        return self.mixer(store, chosen, S), hid, qs, chosen

    def next_value(self, Xn, Sn, done) -> np.ndarray:
        """Target-network Q_tot at the per-agent greedy next action; zero after termination."""
        if self.cfg.algorithm == "vdn":
            # additive mixing: Q_tot at the per-agent greedy action is the sum of maxima
            q = sum(self.agents.q_numpy(self.target, i, x).max(axis=1) for i, x in enumerate(Xn))
            return q * (1.0 - done)
        greedy = self.agents.greedy(self.target, Xn)
        q, *_ = self.q_tot(self.target, Xn, greedy, Sn)
        return q.data * (1.0 - done)

    # update -----------------------------------------------------------------------------------

    def update(self, batch: Sequence[Transition], dual_batch: Optional[Sequence[Transition]] = None) -> dict:
        cfg = self.cfg
        X, Xn, A, r, done, S, Sn = self._stack(batch)
        losses = {}
        eta = None
        if self.dual is not None:
            if dual_batch is None:
                raise ValueError("TV training needs a second minibatch for the dual update")
            _, dXn, dA, _, ddone, dS, dSn = self._stack(dual_batch)
            q_max = self.next_value(dXn, dSn, ddone)
            self.store.zero_grad()
            ld = dual_loss(self.dual(self.store, dS, dA), q_max, self.rho)
            ld.backward()
            self._check(ld, "dual")
            clip_grad_norm(self.store, self.dual_names, cfg.grad_clip)
            self.opt_dual.step(self.store, self.dual_names)
            losses["dual"] = ld.item()
            eta = self.dual(self.store, S, A).data
        q_next = self.next_value(Xn, Sn, done)
        y = td_target(cfg.uncertainty, r, self.gamma, self.rho, q_next, eta)

        self.store.zero_grad()
        pred, hid, qs, chosen = self.q_tot(self.store, X, A, S)
        loss = td_loss(pred, y)
        losses["td"] = loss.item()
        if cfg.algorithm == "qtran":
            bar = np.stack([np.argmax(q.data, axis=1) for q in qs], axis=1)
            v = self.mixer.value(self.store, hid)
            sum_bar = sum(q.gather(bar[:, i]) for i, q in enumerate(qs))
            joint_bar = self.mixer.joint(self.store, hid, bar)
            l_opt, _ = qtran_losses(sum_bar, joint_bar, v, np.ones(len(batch)))
            flag = np.all(A == bar, axis=1)
            _, l_nopt = qtran_losses(sum(chosen), pred, v, flag)
            loss = loss + l_opt + l_nopt
            losses["opt"], losses["nopt"] = l_opt.item(), l_nopt.item()
        self._check(loss, "td")
        loss.backward()
        names = self.agent_names + self.joint_names
        clip_grad_norm(self.store, names, cfg.grad_clip)
        self.opt_agent.step(self.store, self.agent_names)
        if self.joint_names:
            self.opt_joint.step(self.store, self.joint_names)
        self.updates += 1
        self.target = target_sync(self.store, self.target, cfg.target_sync, self.updates)
        return losses

    @staticmethod
    def _check(loss, what: str) -> None:
        if not np.isfinite(loss.item()):
            raise DivergenceError(f"non-finite {what} loss")


# evaluation ----------------------------------------------------------------------------------------------


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    return float(sum(r * gamma ** t for t, r in enumerate(rewards)))


def run_greedy_episodes(learner: Learner, env: MultiAgentEnv, episodes: int, rng: np.random.Generator,
                        horizon: Optional[int] = None) -> np.ndarray:
    """Discounted returns of ``episodes`` greedy (epsilon = 0) rollouts."""
    H = horizon or env.horizon
    out = np.empty(episodes)
    for e in range(episodes):
        s = env.reset(rng)
        enc = HistoryEncoder(env, learner.cfg.window)
        enc.reset(env.observe(s))
        rewards = []
        for _ in range(H):
            a = eps_greedy(learner.q_rows(enc.features()), 0.0, rng)
            s, rew, done = env.step(s, a, rng)
            rewards.append(rew)
            enc.push(env.observe(s), a)
            if done:
                break
        out[e] = discounted_return(rewards, env.model.gamma)
    return out


def mean_stderr(x: Sequence[float]) -> tuple[float, float]:
    x = np.asarray(x, dtype=np.float64)
    if len(x) < 2:
        return float(x.mean()), 0.0
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x)))


def decentralized_agreement(learner: Learner, feats: Sequence[Sequence[np.ndarray]],
                            states: Sequence[int]) -> float:
    """Fraction of histories where per-agent greedy equals the joint argmax of the mixed Q_tot."""
    n = learner.env.n_agents
    joints = np.array(list(np.ndindex(*learner.env.actions_per_agent)), dtype=np.int64)
    hits = 0
    for f, s in zip(feats, states):
        X = [np.repeat(f[i][None], len(joints), axis=0) for i in range(n)]
        S = np.repeat(learner.env.state_features(s)[None], len(joints), axis=0)
        q, _, qs, _ = learner.q_tot(learner.store, X, joints, S)
        dec = tuple(int(np.argmax(qi.data[0])) for qi in qs)
        best = np.flatnonzero(q.data >= q.data.max() - 1e-9)
        hits += any(tuple(joints[b]) == dec for b in best)
    return hits / max(len(states), 1)


# training loop ------------------------------------------------------------------------------------------------


def train_run(config: TrainConfig, env: MultiAgentEnv, eval_envs: Sequence[MultiAgentEnv] = (),
              run_id: Optional[str] = None, out_dir: Optional[str | Path] = None,
              learner_out: Optional[list] = None) -> RunRecord:
    """Train one run: act, store, sample, (dual step), TD step, periodic sync.

    ``eval_envs`` are evaluated with greedy policies every ``eval_every`` steps and
    at the end, together with the training env. When ``learner_out`` is a list the
    trained learner is appended to it.
    """
    cfg = config
    cfg.validate()
    run_id = run_id or f"{cfg.algorithm}-{cfg.uncertainty}-rho{cfg.rho:g}-seed{cfg.seed}"
    ss = np.random.SeedSequence(cfg.seed)
    init_rng, act_rng, env_rng, buf_rng = (np.random.default_rng(s) for s in ss.spawn(4))
    learner = Learner(cfg, env, init_rng)
    buffer = ReplayBuffer(cfg.buffer_capacity, buf_rng)
    eps = EpsilonSchedule(cfg.eps_start, cfg.eps_end, cfg.eps_anneal)
    horizon = cfg.horizon or env.horizon
    all_envs = [env] + list(eval_envs)
    labels = [e.name for e in all_envs]
    if len(set(labels)) != len(labels):
        raise ValueError(f"environment labels must be unique, got {labels}")
    record = RunRecord(run_id, cfg.to_dict(), env.name, labels)

    step = episode = 0
    recent: list[float] = []
    last_losses: dict = {}

    def evaluate() -> None:
        res = {}
        for k, e in enumerate(all_envs):
            rng = np.random.default_rng([cfg.seed, k, step])
            res[e.name] = list(mean_stderr(run_greedy_episodes(learner, e, cfg.eval_episodes, rng, horizon)))
        record.checkpoints.append(Checkpoint(step, episode, eps(step),
                                             float(np.mean(recent[-20:])) if recent else 0.0, res,
                                             dict(last_losses)))

    try:
        while step < cfg.steps and (cfg.episodes is None or episode < cfg.episodes):
            s = env.reset(env_rng)
            enc = HistoryEncoder(env, cfg.window)
            enc.reset(env.observe(s))
            rewards = []
            for _ in range(horizon):
                a = eps_greedy(learner.q_rows(enc.features()), eps(step), act_rng)
                s2, rew, done = env.step(s, a, env_rng)
                nxt = enc.copy()
                nxt.push(env.observe(s2), a)
                buffer.add(Transition(enc.features(), s, a, rew, nxt.features(), s2, done, enc.filled))
                rewards.append(rew)
                s, enc = s2, nxt
                step += 1
                if step % cfg.update_every == 0 and step >= cfg.learning_starts:
                    batch = buffer.sample(cfg.batch_size, cfg.burn_in)
                    if batch is not None:
                        dual_batch = buffer.sample(cfg.batch_size, cfg.burn_in) if learner.dual else None
                        last_losses = learner.update(batch, dual_batch)
                if step % cfg.eval_every == 0:
                    evaluate()
                if done or step >= cfg.steps:
                    break
            recent.append(discounted_return(rewards, env.model.gamma))
            episode += 1
        if not record.checkpoints or record.checkpoints[-1].step != step:
            evaluate()
    except (DivergenceError, NonFiniteError) as exc:
        record.status = "diverged"
        record.message = f"{exc} at step {step}, update {learner.updates}"
        if out_dir is not None:
            diag = Path(out_dir) / f"{run_id}.diverged.params.json"
            diag.parent.mkdir(parents=True, exist_ok=True)
            learner.store.save(diag)
            record.checkpoint_path = str(diag)
    record.param_checksum = learner.store.checksum()
    if out_dir is not None:
        if record.status == "ok":
            ck = Path(out_dir) / f"{run_id}.params.json"
            ck.parent.mkdir(parents=True, exist_ok=True)
            learner.store.save(ck)
            record.checkpoint_path = str(ck)
        record.save(out_dir)
    if learner_out is not None:
        learner_out.append(learner)
    return record
