"""Actor/learner training around a single asynchronously updated global model.

Actors roll out epsilon-greedy episodes with a periodically refreshed parameter
snapshot and push transitions into a shared replay buffer. Learners copy the
latest snapshot, compute the multi-agent DQN gradient on a replay batch and
push it to the global model, which applies gradients one at a time with Adam
(stale gradients included) and republishes a snapshot after every update.

``Trainer.run_sync`` interleaves one actor and one learner in a fixed order and
is bit-reproducible; ``Trainer.run_async`` runs every role on its own thread.
"""

from __future__ import annotations

import json
import logging
import queue
import threading
import time
import zlib
from dataclasses import asdict, dataclass, fields
from typing import Callable

import numpy as np
import torch

from . import checkpoint as ckpt
from .dqn import EpsilonSchedule, Experience, ReplayBuffer, dqn_loss_and_grads, select_actions
from .errors import BufferTooSmall, ChannelClosed, FormatError
from .net import Adam, EncoderConfig, NetConfig, QNetwork
from .pose_graph import PoseGraph, build_fetal_graph
from .reward import RewardConfig, all_rewards
from .rng import substream
from .volume import AugmentConfig, LabeledVolume, augment, env_step, extract_patches, initial_positions

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    n_actors: int = 4
    m_learners: int = 4
    batch_size: int = 3
    lr: float = 3e-4
    clip: float = 50.0
    gamma: float = 0.9
    target_sync_period: int = 2500
    replay_capacity: int = 20_000
    actor_snapshot_period: int = 64
    total_learner_steps: int = 10_000
    warmup: int = 200
    actor_steps_per_learner_step: int = 1
    episode_steps: int = 60
    step_voxels: int = 1
    init_fraction: float = 0.15
    eps_start: float = 1.0
    eps_end: float = 0.1
    eps_decay_steps: int = 50_000
    max_staleness: int = -1  # negative: accept any staleness
    augment_flip: bool = True
    augment_rotate: bool = True
    augment_scale: bool = True
    log_every: int = 50
    verify_snapshots: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("n_actors", "m_learners", "batch_size", "target_sync_period",
                     "replay_capacity", "actor_snapshot_period", "episode_steps",
                     "step_voxels", "actor_steps_per_learner_step"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")

    def augment_config(self) -> AugmentConfig | None:
        if not (self.augment_flip or self.augment_rotate or self.augment_scale):
            return None
        return AugmentConfig(self.augment_flip, self.augment_rotate, self.augment_scale)

    def epsilon(self) -> EpsilonSchedule:
        return EpsilonSchedule(self.eps_start, self.eps_end, self.eps_decay_steps)


def net_config_to_dict(cfg: NetConfig) -> dict:
    return {"encoder": asdict(cfg.encoder), "graph_widths": list(cfg.graph_widths),
            "graph_comm": cfg.graph_comm}


def net_config_from_dict(d: dict) -> NetConfig:
    enc = dict(d["encoder"])
    enc["channels"] = tuple(enc["channels"])
    return NetConfig(EncoderConfig(**enc), tuple(d["graph_widths"]), bool(d["graph_comm"]))


def _dataclass_from_dict(cls, d: dict):
    names = {f.name for f in fields(cls)}
    return cls(**{k: v for k, v in d.items() if k in names})


# ------------------------------------------------------------------ snapshots


def state_checksum(state: dict[str, torch.Tensor]) -> int:
    crc = 0
    for name in sorted(state):
        crc = zlib.crc32(name.encode(), crc)
        crc = zlib.crc32(state[name].detach().contiguous().numpy().tobytes(), crc)
    return crc


@dataclass(frozen=True)
class ParamSnapshot:
    version: int
    state: dict[str, torch.Tensor]
    checksum: int | None = None


@dataclass
class GradientMessage:
    learner_id: int
    version: int
    grads: dict[str, torch.Tensor]
    buffer_delta: dict[str, torch.Tensor]
    loss: float
    checksum: int | None = None


def _clone_state(net: torch.nn.Module) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


class GlobalModel:
    """The single authoritative parameter copy; every mutation happens under one lock."""

    def __init__(self, net_cfg: NetConfig, cfg: TrainConfig):
        self.cfg = cfg
        self.net = QNetwork(net_cfg, seed=int(substream(cfg.seed, "init").integers(2**31 - 1)))
        self.target = QNetwork(net_cfg)
        self.target.load_state_dict(self.net.state_dict())
        self.target.eval()
        self.opt = Adam(dict(self.net.named_parameters()), lr=cfg.lr, clip=cfg.clip)
        self.applied = 0
        self.dropped = 0
        self.pushed = 0
        self.last_loss = float("nan")
        self.published_checksums: dict[int, int] = {}
        self.published_versions: list[int] = []
        self.checksum_mismatches = 0
        self._lock = threading.Lock()
        self._snapshot = self._publish()
        self._target_snapshot = ParamSnapshot(0, _clone_state(self.target))

    @property
    def version(self) -> int:
        return self.net.version

    def _publish(self) -> ParamSnapshot:
        state = _clone_state(self.net)
        checksum = state_checksum(state) if self.cfg.verify_snapshots else None
        if checksum is not None:
            self.published_checksums[self.net.version] = checksum
        self._snapshot = ParamSnapshot(self.net.version, state, checksum)
        self.published_versions.append(self.net.version)
        return self._snapshot

    def latest(self) -> ParamSnapshot:
        return self._snapshot

    def latest_target(self) -> ParamSnapshot:
        return self._target_snapshot

    def apply(self, msg: GradientMessage) -> int:
        with self._lock:
            self.pushed += 1
            if msg.checksum is not None and self.published_checksums.get(msg.version) != msg.checksum:
                self.checksum_mismatches += 1
            stale = self.net.version - msg.version
            if 0 <= self.cfg.max_staleness < stale:
                self.dropped += 1
                return self.net.version
            self.opt.step(msg.grads)
            with torch.no_grad():
                buffers = dict(self.net.named_buffers())
                for name, delta in msg.buffer_delta.items():
                    buffers[name].add_(delta.to(buffers[name].dtype))
            self.net.version += 1
            self.applied += 1
            self.last_loss = msg.loss
            if self.applied % self.cfg.target_sync_period == 0:
                self.target.load_state_dict(self.net.state_dict())
                self._target_snapshot = ParamSnapshot(self.net.version, _clone_state(self.target))
            self._publish()
            return self.net.version


def global_apply(model: GlobalModel, msg: GradientMessage) -> int:
    return model.apply(msg)


# -------------------------------------------------------------------- volumes


class VolumeSource:
    """Training volumes addressed by stable keys: ``"i"`` or ``"i:augment_seed"``."""

    def __init__(self, volumes: list[LabeledVolume], augment_cfg: AugmentConfig | None = None,
                 cache_size: int = 64):
        if not volumes:
            raise ValueError("no training volumes")
        self.volumes = list(volumes)
        self.augment_cfg = augment_cfg
        self._cache: dict[str, LabeledVolume] = {}
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def draw(self, rng: np.random.Generator) -> tuple[str, LabeledVolume]:
        idx = int(rng.integers(len(self.volumes)))
        if self.augment_cfg is None:
            key = str(idx)
        else:
            key = f"{idx}:{int(rng.integers(2**31 - 1))}"
        return key, self.resolve(key)

    def resolve(self, key: str) -> LabeledVolume:
        with self._lock:
            if key in self._cache:
                return self._cache[key]
        idx, _, seed = key.partition(":")
        v = self.volumes[int(idx)]
        if seed:
            v = augment(v, int(seed), self.augment_cfg or AugmentConfig())
        with self._lock:
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[key] = v
        return v


# ----------------------------------------------------------------- actor


@dataclass
class Episode:
    key: str
    volume: LabeledVolume
    positions: np.ndarray
    t: int = 0


class Actor:
    def __init__(self, actor_id: int, net_cfg: NetConfig, reward_cfg: RewardConfig, cfg: TrainConfig,
                 source: VolumeSource, replay: ReplayBuffer, model: GlobalModel,
                 graph: PoseGraph | None = None, q_function: Callable | None = None):
        self.id = actor_id
        self.cfg = cfg
        self.reward_cfg = reward_cfg
        self.source = source
        self.replay = replay
        self.model = model
        self.graph = graph or build_fetal_graph()
        self.net = QNetwork(net_cfg)
        self.net.eval()
        self.patch = net_cfg.encoder.patch
        self.q_function = q_function or self.net.q_values
        self.rng = substream(cfg.seed, f"actor-{actor_id}")
        self.schedule = cfg.epsilon()
        self.steps = 0
        self.episodes = 0
        self.snapshot_version = -1
        self.episode: Episode | None = None

    def fetch(self) -> None:
        snap = self.model.latest()
        self.net.load_state_dict(snap.state)
        self.snapshot_version = snap.version

    def _new_episode(self) -> Episode:
        key, vol = self.source.draw(self.rng)
        pos = initial_positions(vol.dims, self.rng, self.cfg.init_fraction)
        self.episodes += 1
        return Episode(key, vol, pos)

    @property
    def epsilon(self) -> float:
        return self.schedule(self.steps)

    def step(self) -> Experience:
        if self.steps % self.cfg.actor_snapshot_period == 0:
            self.fetch()
        if self.episode is None or self.episode.t >= self.cfg.episode_steps:
            self.episode = self._new_episode()
        ep = self.episode
        q = self.q_function(extract_patches(ep.volume.voxels, ep.positions, self.patch))
        actions = select_actions(q, self.epsilon, self.rng)
        new = env_step(ep.positions, actions, ep.volume.dims, self.cfg.step_voxels)
        rewards = all_rewards(ep.positions, new, ep.volume.landmarks_gt, self.graph, self.reward_cfg)
        exp = Experience(ep.volume, ep.key, ep.positions, actions, rewards, new, False)
        self.replay.push(exp)
        ep.positions = new
        ep.t += 1
        self.steps += 1
        return exp

    def run(self, stop: threading.Event) -> None:
        while not stop.is_set():
            self.step()


def run_actor(actor: Actor, stop: threading.Event) -> None:
    actor.run(stop)


# ---------------------------------------------------------------- learner


class Learner:
    def __init__(self, learner_id: int, net_cfg: NetConfig, cfg: TrainConfig, replay: ReplayBuffer,
                 model: GlobalModel):
        self.id = learner_id
        self.cfg = cfg
        self.replay = replay
        self.model = model
        self.net = QNetwork(net_cfg)
        self.target = QNetwork(net_cfg)
        self.target_version = -1
        self.rng = substream(cfg.seed, f"learner-{learner_id}")
        self.steps = 0

    def ready(self) -> bool:
        return len(self.replay) >= max(self.cfg.batch_size, self.cfg.warmup)

    def step(self) -> GradientMessage:
        snap = self.model.latest()
        self.net.load_state_dict(snap.state)
        checksum = state_checksum(_clone_state(self.net)) if self.cfg.verify_snapshots else None
        tsnap = self.model.latest_target()
        if tsnap.version != self.target_version:
            self.target.load_state_dict(tsnap.state)
            self.target_version = tsnap.version
        batch = self.replay.sample(self.cfg.batch_size, self.rng)
        before = {k: b.detach().clone() for k, b in self.net.named_buffers()}
        loss, grads = dqn_loss_and_grads(batch, self.net, self.target, self.cfg.gamma)
        delta = {k: b.detach() - before[k] for k, b in self.net.named_buffers()}
        self.steps += 1
        return GradientMessage(self.id, snap.version, grads, delta, loss, checksum)

    def run(self, stop: threading.Event, sink: Callable[[GradientMessage], None]) -> None:
        while not stop.is_set():
            if not self.ready():
                time.sleep(0.01)
                continue
            try:
                sink(self.step())
            except (ChannelClosed, BufferTooSmall):
                return


def run_learner(learner: Learner, stop: threading.Event, sink) -> None:
    learner.run(stop, sink)


# ---------------------------------------------------------------- metrics


class MetricsWriter:
    """Append-only JSON-lines stream; ``cursor`` counts records written."""

    def __init__(self, path=None, cursor: int = 0):
        self.path = path
        self.cursor = cursor
        self.records: list[dict] = []
        if path is not None:
            lines = []
            try:
                with open(path) as fh:
                    lines = fh.readlines()[:cursor]
            except FileNotFoundError:
                pass
            with open(path, "w") as fh:
                fh.writelines(lines)

    def write(self, record: dict) -> None:
        self.records.append(record)
        self.cursor += 1
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------- trainer


class Trainer:
    def __init__(self, volumes: list[LabeledVolume], cfg: TrainConfig = TrainConfig(),
                 net_cfg: NetConfig | None = None, reward_cfg: RewardConfig = RewardConfig(),
                 metrics: MetricsWriter | None = None, deterministic: bool = False):
        from .net import PRESETS

        self.cfg = cfg
        self.net_cfg = net_cfg or PRESETS["desk"]
        self.reward_cfg = reward_cfg
        self.deterministic = deterministic
        if deterministic:
            torch.set_num_threads(1)
        self.source = VolumeSource(volumes, cfg.augment_config())
        self.replay = ReplayBuffer(cfg.replay_capacity)
        self.model = GlobalModel(self.net_cfg, cfg)
        n_act = 1 if deterministic else cfg.n_actors
        n_learn = 1 if deterministic else cfg.m_learners
        self.actors = [Actor(i, self.net_cfg, reward_cfg, cfg, self.source, self.replay, self.model)
                       for i in range(n_act)]
        self.learners = [Learner(i, self.net_cfg, cfg, self.replay, self.model) for i in range(n_learn)]
        self.metrics = metrics or MetricsWriter()
        self.start_time = time.time()

    # -- bookkeeping
    @property
    def learner_steps(self) -> int:
        return self.model.applied

    def _record(self) -> None:
        step = self.model.applied
        if step % self.cfg.log_every:
            return
        self.metrics.write({
            "wall_time": round(time.time() - self.start_time, 3),
            "learner_step": step,
            "loss": self.model.last_loss,
            "eps": self.actors[0].epsilon,
            "replay_size": len(self.replay),
        })

    # -- synchronous mode
    def run_sync(self, until_step: int | None = None,
                 callback: Callable[["Trainer"], None] | None = None) -> None:
        """Single-actor, single-learner lockstep: k actor steps, then one update once warm."""
        until = self.cfg.total_learner_steps if until_step is None else until_step
        actor, learner = self.actors[0], self.learners[0]
        while self.model.applied < until:
            for _ in range(self.cfg.actor_steps_per_learner_step):
                actor.step()
            if learner.ready():
                self.model.apply(learner.step())
                self._record()
                if callback is not None:
                    callback(self)

    # -- asynchronous mode
    def run_async(self, duration_s: float | None = None, until_step: int | None = None) -> dict:
        until = self.cfg.total_learner_steps if until_step is None else until_step
        stop = threading.Event()
        grads: queue.Queue = queue.Queue()
        counts = {"pushed": 0}
        count_lock = threading.Lock()

        def sink(msg):
            if stop.is_set():
                raise ChannelClosed("trainer stopping")
            with count_lock:
                counts["pushed"] += 1
            grads.put(msg)

        def applier():
            while True:
                msg = grads.get()
                if msg is None:
                    return
                self.model.apply(msg)
                self._record()
                if self.model.applied >= until:
                    stop.set()

        threads = [threading.Thread(target=a.run, args=(stop,), name=f"actor-{a.id}", daemon=True)
                   for a in self.actors]
        threads += [threading.Thread(target=lr.run, args=(stop, sink), name=f"learner-{lr.id}", daemon=True)
                    for lr in self.learners]
        opt_thread = threading.Thread(target=applier, name="global-optimizer", daemon=True)
        opt_thread.start()
        for t in threads:
            t.start()
        t0 = time.time()
        while not stop.is_set():
            if duration_s is not None and time.time() - t0 >= duration_s:
                stop.set()
            stop.wait(0.05)
        for t in threads:
            t.join()
        grads.put(None)
        opt_thread.join()
        return {"pushed": counts["pushed"], "applied": self.model.applied,
                "dropped": self.model.dropped, "received": self.model.pushed}

    # -- checkpointing
    def config_dict(self) -> dict:
        return {"train": asdict(self.cfg), "net": net_config_to_dict(self.net_cfg),
                "reward": asdict(self.reward_cfg), "deterministic": self.deterministic}

    def to_checkpoint(self) -> ckpt.CheckpointData:
        def blocks(prefix, module):
            return {f"{prefix}.{k}": v.detach().double().numpy() for k, v in module.state_dict().items()}

        params = blocks("net", self.model.net)
        params.update(blocks("target", self.model.target))
        for a in self.actors:
            params.update(blocks(f"actor{a.id}", a.net))
        optimizer = {k: v.detach().double().numpy() for k, v in self.model.opt.state_tensors().items()}
        items = self.replay.items()
        state = {
            "version": self.model.net.version,
            "applied": self.model.applied,
            "dropped": self.model.dropped,
            "pushed": self.model.pushed,
            "last_loss": self.model.last_loss,
            "target_version": self.model.latest_target().version,
            "adam_t": self.model.opt.t,
            "metrics_cursor": self.metrics.cursor,
            "replay_total_pushed": self.replay.total_pushed,
            "replay_keys": [e.volume_key for e in items],
            "actors": [
                {"steps": a.steps, "episodes": a.episodes, "snapshot_version": a.snapshot_version,
                 "episode": None if a.episode is None else
                 {"key": a.episode.key, "positions": a.episode.positions.tolist(), "t": a.episode.t}}
                for a in self.actors
            ],
            "learners": [{"steps": lr.steps} for lr in self.learners],
        }
        rngs = {f"actor-{a.id}": a.rng.bit_generator.state for a in self.actors}
        rngs.update({f"learner-{lr.id}": lr.rng.bit_generator.state for lr in self.learners})
        blobs = {
            "state": json.dumps(state, sort_keys=True).encode(),
            "rng": json.dumps(rngs, sort_keys=True).encode(),
        }
        if items:
            blobs["replay.positions_t"] = np.stack([e.positions_t for e in items]).astype("<i8").tobytes()
            blobs["replay.actions"] = np.stack([e.actions for e in items]).astype("<i8").tobytes()
            blobs["replay.rewards"] = np.stack([e.rewards for e in items]).astype("<f8").tobytes()
            blobs["replay.positions_t1"] = np.stack([e.positions_t1 for e in items]).astype("<i8").tobytes()
            blobs["replay.terminal"] = np.array([e.terminal for e in items], dtype="u1").tobytes()
        return ckpt.CheckpointData(self.config_dict(), params, optimizer, blobs)

    def save_checkpoint(self, path) -> None:
        ckpt.save(self.to_checkpoint(), path)

    @classmethod
    def from_checkpoint(cls, data: ckpt.CheckpointData | str, volumes: list[LabeledVolume],
                        metrics_path=None) -> "Trainer":
        if not isinstance(data, ckpt.CheckpointData):
            data = ckpt.load(data)
        conf = data.config
        try:
            cfg = _dataclass_from_dict(TrainConfig, conf["train"])
            net_cfg = net_config_from_dict(conf["net"])
            reward_cfg = _dataclass_from_dict(RewardConfig, conf["reward"])
            state = json.loads(data.blobs["state"])
            rngs = json.loads(data.blobs["rng"])
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"checkpoint config unreadable: {exc}") from exc
        tr = cls(volumes, cfg, net_cfg, reward_cfg,
                 metrics=MetricsWriter(metrics_path, state["metrics_cursor"]),
                 deterministic=bool(conf.get("deterministic", False)))
        load_module(tr.model.net, data.params, "net")
        load_module(tr.model.target, data.params, "target")
        for a in tr.actors:
            load_module(a.net, data.params, f"actor{a.id}")
        with torch.no_grad():
            for k, v in tr.model.opt.state_tensors().items():
                v.copy_(torch.as_tensor(data.optimizer[k]))
        tr.model.opt.t = state["adam_t"]
        tr.model.net.version = state["version"]
        tr.model.applied = state["applied"]
        tr.model.dropped = state["dropped"]
        tr.model.pushed = state["pushed"]
        tr.model.last_loss = state["last_loss"]
        tr.model.published_checksums.clear()
        tr.model.published_versions.clear()
        tr.model._publish()
        tr.model._target_snapshot = ParamSnapshot(state["target_version"], _clone_state(tr.model.target))
        for a, st in zip(tr.actors, state["actors"]):
            a.steps, a.episodes, a.snapshot_version = st["steps"], st["episodes"], st["snapshot_version"]
            a.rng.bit_generator.state = rngs[f"actor-{a.id}"]
            ep = st["episode"]
            if ep is not None:
                a.episode = Episode(ep["key"], tr.source.resolve(ep["key"]),
                                    np.array(ep["positions"], dtype=np.int64), ep["t"])
        for lr, st in zip(tr.learners, state["learners"]):
            lr.steps = st["steps"]
            lr.rng.bit_generator.state = rngs[f"learner-{lr.id}"]
        keys = state["replay_keys"]
        if keys:
            n = len(keys)
            pt = np.frombuffer(data.blobs["replay.positions_t"], "<i8").reshape(n, -1, 3)
            act = np.frombuffer(data.blobs["replay.actions"], "<i8").reshape(n, -1)
            rew = np.frombuffer(data.blobs["replay.rewards"], "<f8").reshape(n, -1)
            pt1 = np.frombuffer(data.blobs["replay.positions_t1"], "<i8").reshape(n, -1, 3)
            term = np.frombuffer(data.blobs["replay.terminal"], "u1").astype(bool)
            vols = {key: tr.source.resolve(key) for key in dict.fromkeys(keys)}
            items = [Experience(vols[key], key, pt[i].astype(np.int64), act[i].astype(np.int64),
                                rew[i].astype(np.float64), pt1[i].astype(np.int64), bool(term[i]))
                     for i, key in enumerate(keys)]
            tr.replay.restore(items, state["replay_total_pushed"])
        return tr


def load_module(module: torch.nn.Module, blocks: dict[str, np.ndarray], prefix: str) -> None:
    """Copy ``prefix.*`` blocks into ``module``; FormatError on any name or shape mismatch."""
    own = module.state_dict()
    expected = {f"{prefix}.{k}" for k in own}
    present = {k for k in blocks if k.startswith(prefix + ".")}
    if expected != present:
        raise FormatError(f"parameter set mismatch for {prefix!r}: "
                          f"missing {sorted(expected - present)[:3]}, unexpected {sorted(present - expected)[:3]}")
    new = {}
    for k, v in own.items():
        arr = blocks[f"{prefix}.{k}"]
        if tuple(arr.shape) != tuple(v.shape):
            raise FormatError(f"{prefix}.{k}: shape {arr.shape} != {tuple(v.shape)}")
        new[k] = torch.as_tensor(arr).to(v.dtype)
    module.load_state_dict(new)


def checkpoint_save(trainer: Trainer, path) -> None:
    trainer.save_checkpoint(path)


def checkpoint_load(path, volumes: list[LabeledVolume], metrics_path=None) -> Trainer:
    return Trainer.from_checkpoint(path, volumes, metrics_path)


def network_from_checkpoint(path_or_data) -> QNetwork:
    """The global Q-network stored in a checkpoint, ready for inference."""
    data = path_or_data if isinstance(path_or_data, ckpt.CheckpointData) else ckpt.load(path_or_data)
    try:
        net_cfg = net_config_from_dict(data.config["net"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"checkpoint config unreadable: {exc}") from exc
    net = QNetwork(net_cfg)
    load_module(net, data.params, "net")
    net.eval()
    return net


__all__ = [
    "TrainConfig", "Trainer", "GlobalModel", "Actor", "Learner", "ParamSnapshot", "GradientMessage",
    "VolumeSource", "MetricsWriter", "run_actor", "run_learner", "global_apply", "checkpoint_save",
    "checkpoint_load", "network_from_checkpoint", "state_checksum",
]
