"""Replay, exploration, TD targets and the multi-agent DQN loss."""

from __future__ import annotations

import copy
import threading
from dataclasses import dataclass

import numpy as np
import torch

from .errors import BufferTooSmall
from .net import QNetwork
from .volume import N_ACTIONS, LabeledVolume, extract_patches


@dataclass(frozen=True)
class Experience:
    """One synchronous step of all agents.

    Patches are not stored; they are cut from ``volume`` on demand, which keeps
    a transition at a few hundred bytes instead of two full patch stacks.
    """

    volume: LabeledVolume
    volume_key: str
    positions_t: np.ndarray  # (K, 3) int
    actions: np.ndarray  # (K,) int
    rewards: np.ndarray  # (K,) float
    positions_t1: np.ndarray
    terminal: bool = False

    def patches_t(self, size: int) -> np.ndarray:
        return extract_patches(self.volume.voxels, self.positions_t, size)

    def patches_t1(self, size: int) -> np.ndarray:
        return extract_patches(self.volume.voxels, self.positions_t1, size)


class ReplayBuffer:
    """Fixed-capacity ring buffer, safe for concurrent push and sample."""

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self._items: list = [None] * capacity
        self._next = 0
        self._size = 0
        self._pushed = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self._size

    @property
    def total_pushed(self) -> int:
        return self._pushed

    def push(self, item) -> None:
        with self._lock:
            self._items[self._next] = item
            self._next = (self._next + 1) % self.capacity
            self._size = min(self._size + 1, self.capacity)
            self._pushed += 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> list:
        with self._lock:
            if self._size < batch_size:
                raise BufferTooSmall(f"{self._size} items, need {batch_size}")
            idx = rng.integers(0, self._size, size=batch_size)
            return [self._items[i] for i in idx]

    def items(self) -> list:
        """Contents from oldest to newest."""
        with self._lock:
            if self._size < self.capacity:
                return self._items[: self._size]
            return self._items[self._next :] + self._items[: self._next]

    def restore(self, items: list, total_pushed: int) -> None:
        with self._lock:
            items = list(items)[-self.capacity :]
            self._items = items + [None] * (self.capacity - len(items))
            self._size = len(items)
            self._next = len(items) % self.capacity
            self._pushed = total_pushed


def replay_push(buf: ReplayBuffer, exp) -> None:
    buf.push(exp)


def replay_sample(buf: ReplayBuffer, batch_size: int, rng: np.random.Generator) -> list:
    return buf.sample(batch_size, rng)


@dataclass(frozen=True)
class EpsilonSchedule:
    eps_start: float = 1.0
    eps_end: float = 0.1
    decay_steps: int = 50_000

    def __call__(self, step: int) -> float:
        if step >= self.decay_steps:
            return self.eps_end
        frac = step / self.decay_steps
        return self.eps_start + frac * (self.eps_end - self.eps_start)


def select_actions(q: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
    """Per-agent epsilon-greedy; ties go to the lowest action index."""
    q = np.asarray(q)
    explore = rng.random(q.shape[0]) < eps
    random_actions = rng.integers(0, q.shape[1], size=q.shape[0])
    return np.where(explore, random_actions, np.argmax(q, axis=1))


def bellman_targets(rewards, next_q, terminal, gamma: float):
    """``r + gamma * max_a next_q`` with the bootstrap dropped where terminal.

    rewards: (B, K); next_q: (B, K, A); terminal: (B,).
    """
    if isinstance(next_q, torch.Tensor):
        boot = next_q.max(dim=-1).values
        live = (~torch.as_tensor(terminal, dtype=torch.bool)).to(boot.dtype)[:, None]
        return torch.as_tensor(rewards, dtype=boot.dtype) + gamma * live * boot
    boot = np.max(next_q, axis=-1)
    live = ~np.asarray(terminal, dtype=bool)
    return np.asarray(rewards, dtype=np.float64) + gamma * live[:, None] * boot


def stack_batch(batch: list[Experience], size: int):
    pt = np.stack([e.patches_t(size) for e in batch])
    pt1 = np.stack([e.patches_t1(size) for e in batch])
    actions = np.stack([e.actions for e in batch])
    rewards = np.stack([e.rewards for e in batch])
    terminal = np.array([e.terminal for e in batch])
    return pt, actions, rewards, pt1, terminal


def td_targets(batch: list[Experience], target_net: QNetwork, gamma: float) -> torch.Tensor:
    """(B, K) targets computed with the frozen network in inference mode."""
    size = target_net.cfg.encoder.patch
    _, _, rewards, pt1, terminal = stack_batch(batch, size)
    return _targets(target_net, rewards, pt1, terminal, gamma)


def _targets(target_net, rewards, pt1, terminal, gamma):
    dtype = next(target_net.parameters()).dtype
    target_net.eval()
    with torch.no_grad():
        next_q = target_net(torch.as_tensor(pt1, dtype=dtype))
    return bellman_targets(rewards, next_q, terminal, gamma)


def dqn_loss(q_taken: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Sum over agents of the batch-mean squared TD error; inputs are (B, K)."""
    return ((targets - q_taken) ** 2).mean(dim=0).sum()


def dqn_loss_and_grads(batch: list[Experience], net: QNetwork, target_net: QNetwork,
                       gamma: float) -> tuple[float, dict[str, torch.Tensor]]:
    size = net.cfg.encoder.patch
    pt, actions, rewards, pt1, terminal = stack_batch(batch, size)
    y = _targets(target_net, rewards, pt1, terminal, gamma)
    net.train()
    net.zero_grad(set_to_none=True)
    dtype = next(net.parameters()).dtype
    q = net(torch.as_tensor(pt, dtype=dtype))
    q_taken = q.gather(2, torch.as_tensor(actions, dtype=torch.long)[..., None])[..., 0]
    loss = dqn_loss(q_taken, y.to(dtype))
    loss.backward()
    grads = {
        name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
        for name, p in net.named_parameters()
    }
    net.zero_grad(set_to_none=True)
    return float(loss.detach()), grads


def sync_target(net: QNetwork) -> QNetwork:
    target = copy.deepcopy(net)
    target.eval()
    for p in target.parameters():
        p.requires_grad_(False)
    return target


__all__ = [
    "Experience", "ReplayBuffer", "EpsilonSchedule", "select_actions", "bellman_targets",
    "td_targets", "dqn_loss", "dqn_loss_and_grads", "sync_target", "replay_push",
    "replay_sample", "N_ACTIONS",
]
