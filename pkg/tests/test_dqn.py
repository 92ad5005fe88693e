import threading

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import value_iteration
from posedrl.dqn import (
    EpsilonSchedule, Experience, ReplayBuffer, bellman_targets, dqn_loss, dqn_loss_and_grads,
    replay_push, replay_sample, select_actions, stack_batch, sync_target, td_targets,
)
from posedrl.errors import BufferTooSmall
from posedrl.net import PRESETS, QNetwork
from posedrl.pose_graph import build_fetal_graph
from posedrl.reward import RewardConfig, all_rewards
from posedrl.trainer import TrainConfig
from posedrl.volume import env_step


# ------------------------------------------------------------------ actions

def test_greedy_and_ties(rng):
    q = np.zeros((15, 6))
    q[0] = [1, 5, 2, 0, 0, 0]
    q[1] = [3, 3, 0, 0, 0, 0]
    a = select_actions(q, 0.0, rng)
    assert a[0] == 1 and a[1] == 0 and a[2] == 0


def test_full_exploration_is_uniform():
    rng = np.random.default_rng(1)
    q = np.tile(np.arange(6.0), (15, 1))
    draws = np.concatenate([select_actions(q, 1.0, rng) for _ in range(7000)])
    assert len(draws) >= 10**5
    assert stats.chisquare(np.bincount(draws, minlength=6)).pvalue > 0.001


def test_epsilon_schedule():
    s = EpsilonSchedule()
    assert (s.eps_start, s.eps_end, s.decay_steps) == (1.0, 0.1, 50_000)
    vals = [s(t) for t in range(0, 60_000, 500)]
    assert all(a >= b for a, b in zip(vals, vals[1:]))
    assert s(50_000) == 0.1 and s(10**7) == 0.1 and s(0) == 1.0


# ------------------------------------------------------------------ targets

def test_bellman_arithmetic():
    nq = np.zeros((1, 1, 6))
    nq[0, 0, 3] = 2.0
    assert bellman_targets([[1.0]], nq, [False], 0.9)[0, 0] == pytest.approx(2.8)
    assert bellman_targets([[1.0]], nq, [True], 0.9)[0, 0] == 1.0
    r = np.random.default_rng(0).normal(size=(4, 15))
    assert np.array_equal(bellman_targets(r, np.ones((4, 15, 6)), [False] * 4, 0.0), r)
    t = bellman_targets(torch.tensor(r), torch.ones(4, 15, 6, dtype=torch.float64), [False, True, False, True], 0.5)
    assert torch.allclose(t, torch.tensor(r) + 0.5 * torch.tensor([1.0, 0, 1, 0], dtype=torch.float64)[:, None])


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.01, 5), st.floats(0, 0.99))
def test_targets_monotone(seed, delta, gamma):
    rng = np.random.default_rng(seed)
    r, nq = rng.normal(size=(3, 15)), rng.normal(size=(3, 15, 6))
    base = bellman_targets(r, nq, [False] * 3, gamma)
    assert np.allclose(bellman_targets(r + delta, nq, [False] * 3, gamma) - base, delta)
    assert np.allclose(bellman_targets(r, nq + delta, [False] * 3, gamma) - base, gamma * delta)


def test_loss_arithmetic_and_sign(rng):
    assert float(dqn_loss(torch.zeros(1, 1), torch.full((1, 1), 2.0))) == 4.0
    q, y = torch.as_tensor(rng.normal(size=(3, 15))), torch.as_tensor(rng.normal(size=(3, 15)))
    assert float(dqn_loss(q, y)) > 0
    assert float(dqn_loss(q, q.clone())) == 0.0
    assert float(dqn_loss(q, y)) == pytest.approx(float(((y - q) ** 2).mean(0).sum()))


# ---------------------------------------------------- network-backed loss

def _batch(volume, rng, n=3, rewards=None):
    g = build_fetal_graph()
    out = []
    for i in range(n):
        pos = rng.integers(6, 26, size=(15, 3))
        act = rng.integers(0, 6, size=15)
        new = env_step(pos, act, volume.dims)
        r = all_rewards(pos, new, volume.landmarks_gt, g, RewardConfig()) if rewards is None else rewards[i]
        out.append(Experience(volume, "0", pos, act, r, new, bool(i == 2)))
    return out


def test_td_targets_use_frozen_network(small_phantoms, rng):
    net = QNetwork(PRESETS["tiny"], seed=1).double()
    batch = _batch(small_phantoms[0], rng)
    target = sync_target(net)
    y = td_targets(batch, target, 0.9)
    assert torch.allclose(y, td_targets(batch, net, 0.9))
    _, _, r, pt1, term = stack_batch(batch, 8)
    net.eval()
    nq = net(torch.as_tensor(pt1, dtype=torch.float64)).detach().numpy()
    assert np.allclose(y.numpy(), bellman_targets(r, nq, term, 0.9))
    with torch.no_grad():
        for p in net.parameters():
            p.add_(1.0)
    assert torch.equal(td_targets(batch, target, 0.9), y)
    assert not torch.allclose(td_targets(batch, net, 0.9), y)


def test_loss_is_zero_at_bellman_fixed_point(small_phantoms, rng):
    net = QNetwork(PRESETS["tiny"], seed=2).double()
    batch = _batch(small_phantoms[1], rng)
    target = sync_target(net)
    pt, act, _, pt1, term = stack_batch(batch, 8)
    net.train()
    with torch.no_grad():
        q = net(torch.as_tensor(pt, dtype=torch.float64)).numpy()
        target.eval()
        nq = target(torch.as_tensor(pt1, dtype=torch.float64)).numpy()
    q_taken = np.take_along_axis(q, act[..., None], 2)[..., 0]
    fixed = q_taken - 0.9 * (~term)[:, None] * nq.max(-1)
    batch = [Experience(e.volume, e.volume_key, e.positions_t, e.actions, fixed[i], e.positions_t1, e.terminal)
             for i, e in enumerate(batch)]
    loss, grads = dqn_loss_and_grads(batch, net, target, 0.9)
    assert loss < 1e-20
    assert max(float(g.abs().max()) for g in grads.values()) < 1e-9


def test_gradients_flow_only_through_online_network(small_phantoms, rng):
    net = QNetwork(PRESETS["tiny"], seed=3).double()
    target = sync_target(net)
    batch = _batch(small_phantoms[2], rng)
    loss, grads = dqn_loss_and_grads(batch, net, target, 0.9)
    assert loss > 0
    assert set(grads) == {k for k, _ in net.named_parameters()}
    assert all(p.grad is None for p in target.parameters())
    assert any(float(g.abs().max()) > 0 for g in grads.values())


def test_sync_is_a_deep_copy():
    net = QNetwork(PRESETS["tiny"], seed=4)
    target = sync_target(net)
    with torch.no_grad():
        next(net.parameters()).add_(1.0)
    assert not torch.equal(next(net.parameters()), next(target.parameters()))
    assert TrainConfig().target_sync_period == 2500


# ------------------------------------------------------------------- replay

def test_ring_semantics():
    buf = ReplayBuffer(4)
    for i in range(1, 7):
        replay_push(buf, i)
    assert sorted(buf.items()) == [3, 4, 5, 6]
    assert buf.items() == [3, 4, 5, 6]
    assert len(buf) == 4 and buf.total_pushed == 6


def test_batch_default():
    assert TrainConfig().batch_size == 3


def test_premature_sample():
    buf = ReplayBuffer(10)
    buf.push(1)
    with pytest.raises(BufferTooSmall):
        replay_sample(buf, 3, np.random.default_rng(0))


def test_uniform_sampling():
    buf = ReplayBuffer(10)
    for i in range(10):
        buf.push(i)
    rng = np.random.default_rng(2)
    draws = np.concatenate([replay_sample(buf, 10, rng) for _ in range(10_000)])
    assert stats.chisquare(np.bincount(draws, minlength=10)).pvalue > 0.001


def test_concurrent_push_and_sample():
    buf = ReplayBuffer(500)
    errors = []

    def producer(pid):
        for i in range(2000):
            buf.push((pid, i, pid * 10_000 + i))

    def consumer():
        rng = np.random.default_rng()
        for _ in range(500):
            if len(buf) >= 3:
                for pid, i, check in buf.sample(3, rng):
                    if check != pid * 10_000 + i:
                        errors.append((pid, i, check))

    threads = [threading.Thread(target=producer, args=(p,)) for p in range(4)]
    threads += [threading.Thread(target=consumer) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    assert buf.total_pushed == 8000 and len(buf) == 500


# --------------------------------------------------------- tabular sanity

def test_tabular_dqn_converges_to_value_iteration():
    n, gamma, goal = 11, 0.9, 7.0
    dims = (n, 1, 1)
    graph = build_fetal_graph()
    states = np.arange(n)

    def step(s, a):
        pos = np.zeros((15, 3), dtype=np.int64)
        pos[:, 0] = s
        new = env_step(pos, np.full(15, a), dims)
        gt = np.zeros((15, 3))
        gt[:, 0] = goal
        r = all_rewards(pos, new, gt, graph, RewardConfig(use_structure_reward=False))
        return int(new[8, 0]), float(r[8])

    trans = np.array([[step(s, a)[0] for a in range(6)] for s in states])
    rew = np.array([[step(s, a)[1] for a in range(6)] for s in states])
    q_star = value_iteration(n, trans, rew, gamma)

    table = torch.zeros(n, 6, dtype=torch.float64, requires_grad=True)
    frozen = table.detach().clone()
    rng = np.random.default_rng(0)
    buf = ReplayBuffer(10_000)
    s = 5
    for _ in range(3000):
        a = int(select_actions(table.detach().numpy()[s:s + 1], 1.0, rng)[0])
        s1, r = step(s, a)
        buf.push((s, a, r, s1))
        s = s1
    for it in range(40_000):
        (s, a, r, s1), = buf.sample(1, rng)
        y = bellman_targets([[r]], frozen[s1][None, None], [False], gamma)
        loss = dqn_loss(table[s, a].reshape(1, 1), y)
        (g,) = torch.autograd.grad(loss, table)
        with torch.no_grad():
            table -= 0.5 * g
        if it % 50 == 0:
            frozen = table.detach().clone()
    assert np.abs(table.detach().numpy() - q_star).max() < 1e-6
