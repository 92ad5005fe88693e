"""Q-network: shared 3-D conv encoder, graph communication layers, Adam.

Tensors, convolution kernels and reverse-mode differentiation come from torch;
the graph communication layer, initialisation, clipping and the optimiser are
defined here.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn

from .errors import ShapeMismatch
from .pose_graph import N_LANDMARKS, build_fetal_graph, normalized_adjacency
from .volume import N_ACTIONS


@dataclass(frozen=True)
class EncoderConfig:
    channels: tuple[int, ...] = (8, 16)
    patch: int = 24
    kernel: int = 3
    first_stride: int = 2
    second_stride: int = 1
    pool: int = 2

    def output_extent(self) -> int:
        n = self.patch
        pad = self.kernel // 2
        for _ in self.channels:
            for stride in (self.first_stride, self.second_stride):
                n = (n + 2 * pad - self.kernel) // stride + 1
            n = math.ceil((n - self.pool) / self.pool) + 1 if n > 1 else 1
        return n

    def feature_size(self) -> int:
        return self.channels[-1] * self.output_extent() ** 3


@dataclass(frozen=True)
class NetConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    graph_widths: tuple[int, ...] = (256, 128, N_ACTIONS)
    graph_comm: bool = True  # False: identity adjacency, i.e. independent per-agent heads

    def __post_init__(self):
        if self.graph_widths[-1] != N_ACTIONS:
            raise ValueError(f"final graph width must be {N_ACTIONS}")
        if self.encoder.output_extent() < 1:
            raise ValueError("encoder reduces the patch below one voxel")


PRESETS = {
    "paper": NetConfig(EncoderConfig(channels=(32, 64, 128, 256), patch=48)),
    "desk": NetConfig(EncoderConfig(channels=(8, 16), patch=24)),
    "tiny": NetConfig(EncoderConfig(channels=(8,), patch=8), graph_widths=(12, 8, N_ACTIONS)),
}


def preset(name: str, **overrides) -> NetConfig:
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(cfg, **overrides) if overrides else cfg


def _he_uniform_(t: torch.Tensor, fan_in: int, gen: torch.Generator) -> None:
    bound = math.sqrt(6.0 / fan_in)
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=gen)


class ConvBlock(nn.Sequential):
    def __init__(self, c_in: int, c_out: int, cfg: EncoderConfig):
        pad = cfg.kernel // 2
        # no conv bias: the batch norm that follows would cancel it
        super().__init__(
            nn.Conv3d(c_in, c_out, cfg.kernel, stride=cfg.first_stride, padding=pad, bias=False),
            nn.BatchNorm3d(c_out),
            nn.ReLU(),
            nn.Conv3d(c_out, c_out, cfg.kernel, stride=cfg.second_stride, padding=pad, bias=False),
            nn.BatchNorm3d(c_out),
            nn.ReLU(),
            nn.MaxPool3d(cfg.pool, ceil_mode=True),
        )


class Encoder(nn.Module):
    """Conv encoder applied with the same weights to every agent's patch."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        blocks, c = [], 1
        for c_out in cfg.channels:
            blocks.append(ConvBlock(c, c_out, cfg))
            c = c_out
        self.blocks = nn.Sequential(*blocks)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        # patches: (B, K, P, P, P) -> (B, K, F)
        p = self.cfg.patch
        if patches.dim() != 5 or tuple(patches.shape[2:]) != (p, p, p):
            raise ShapeMismatch(f"expected (B, K, {p}, {p}, {p}) patches, got {tuple(patches.shape)}")
        b, k = patches.shape[:2]
        h = self.blocks(patches.reshape(b * k, 1, p, p, p))
        return h.reshape(b, k, -1)


class GraphCommLayer(nn.Module):
    """Per-node kernels followed by mixing with a learnable masked-softmax adjacency.

    Node i's output is ``act(sum_j rho[i, j] * W_j x_j)`` where ``rho`` is the
    row-wise softmax of the mask restricted to the adjacency support.
    """

    def __init__(self, c_in: int, c_out: int, adjacency: np.ndarray, activation: str = "relu"):
        super().__init__()
        k = adjacency.shape[0]
        self.weight = nn.Parameter(torch.empty(k, c_out, c_in))
        self.mask = nn.Parameter(torch.zeros(k, k))
        self.register_buffer("adjacency", torch.as_tensor(adjacency, dtype=torch.float32))
        if activation not in ("relu", "identity"):
            raise ValueError(activation)
        self.activation = activation

    def mixing(self) -> torch.Tensor:
        return normalized_adjacency(self.mask, self.adjacency)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, K, C_in)
        k, c_out, c_in = self.weight.shape
        if x.dim() != 3 or x.shape[1] != k or x.shape[2] != c_in:
            raise ShapeMismatch(f"expected (B, {k}, {c_in}), got {tuple(x.shape)}")
        y = torch.einsum("koi,bki->bko", self.weight, x)
        h = torch.einsum("kj,bjo->bko", self.mixing().to(y.dtype), y)
        return torch.relu(h) if self.activation == "relu" else h


class QNetwork(nn.Module):
    def __init__(self, cfg: NetConfig = PRESETS["desk"], seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.version = 0
        graph = build_fetal_graph()
        adj = graph.adjacency() if cfg.graph_comm else np.eye(N_LANDMARKS)
        self.encoder = Encoder(cfg.encoder)
        widths = (cfg.encoder.feature_size(),) + tuple(cfg.graph_widths)
        self.graph_layers = nn.ModuleList(
            GraphCommLayer(widths[i], widths[i + 1], adj,
                           "relu" if i < len(widths) - 2 else "identity")
            for i in range(len(widths) - 1)
        )
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(int(seed))
        for m in self.modules():
            if isinstance(m, nn.Conv3d):
                fan_in = m.in_channels * m.kernel_size[0] ** 3
                _he_uniform_(m.weight, fan_in, gen)
            elif isinstance(m, nn.BatchNorm3d):
                m.reset_parameters()
            elif isinstance(m, GraphCommLayer):
                _he_uniform_(m.weight, m.weight.shape[2], gen)
                nn.init.zeros_(m.mask)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        h = self.encoder(patches)
        for layer in self.graph_layers:
            h = layer(h)
        return h

    def q_values(self, patches: np.ndarray) -> np.ndarray:
        """Inference-mode Q for a single (K, P, P, P) observation."""
        was_training = self.training
        self.eval()
        try:
            with torch.no_grad():
                dtype = next(self.parameters()).dtype
                q = self(torch.as_tensor(patches, dtype=dtype)[None])[0]
        finally:
            self.train(was_training)
        return q.numpy().astype(np.float64)


def q_forward(net: QNetwork, patches, train_mode: bool = False) -> torch.Tensor:
    net.train(train_mode)
    x = torch.as_tensor(patches, dtype=next(net.parameters()).dtype)
    if x.dim() == 4:
        x = x[None]
    return net(x)


# ------------------------------------------------------------------ optimiser


def clip_global_norm(grads: dict[str, torch.Tensor], threshold: float) -> float:
    """Scale ``grads`` in place so their joint 2-norm is at most ``threshold``; returns the pre-clip norm."""
    total = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if total > threshold:
        scale = threshold / total
        for g in grads.values():
            g.mul_(scale)
    return total


class Adam:
    """Adam over a named parameter dict, with global-norm clipping before each update."""

    def __init__(self, params: dict[str, torch.Tensor], lr: float = 3e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float = 50.0):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.clip = clip
        self.t = 0
        self.m = {k: torch.zeros_like(p) for k, p in params.items()}
        self.v = {k: torch.zeros_like(p) for k, p in params.items()}

    def step(self, grads: dict[str, torch.Tensor]) -> float:
        grads = {k: g.detach().clone() for k, g in grads.items()}
        norm = clip_global_norm(grads, self.clip)
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        with torch.no_grad():
            for k, p in self.params.items():
                g = grads[k]
                self.m[k].mul_(b1).add_(g, alpha=1.0 - b1)
                self.v[k].mul_(b2).addcmul_(g, g, value=1.0 - b2)
                denom = (self.v[k] / c2).sqrt_().add_(self.eps)
                p.addcdiv_(self.m[k], denom, value=-self.lr / c1)
        return norm

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {f"m.{k}": v for k, v in self.m.items()}
        out.update({f"v.{k}": v for k, v in self.v.items()})
        return out


def adam_step(net: QNetwork, grads: dict[str, torch.Tensor], opt: Adam) -> float:
    norm = opt.step(grads)
    net.version += 1
    return norm


def named_parameters(net: nn.Module) -> dict[str, torch.Tensor]:
    return dict(net.named_parameters())


# --------------------------------------------------------------- grad checks


def finite_difference_check(loss_fn, params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
                            step: float = 1e-5, n_entries: int = 16, n_directions: int = 2,
                            seed: int = 0) -> dict[str, float]:
    """Worst relative error per parameter tensor between ``grads`` and central differences.

    Checks ``n_entries`` random coordinates plus ``n_directions`` random
    directional derivatives spanning the whole tensor. ``loss_fn`` must be
    deterministic and return a Python float.
    """
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in params.items():
        g = grads[name].detach().reshape(-1)
        flat = p.data.reshape(-1)
        errs = []
        idx = rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + step
            up = loss_fn()
            flat[i] = orig - step
            down = loss_fn()
            flat[i] = orig
            fd = (up - down) / (2 * step)
            errs.append(_rel(fd, g[i].item()))
        for _ in range(n_directions):
            d = torch.as_tensor(rng.normal(size=flat.numel()), dtype=flat.dtype)
            d /= d.norm()
            orig = flat.clone()
            flat.add_(step * d)
            up = loss_fn()
            flat.copy_(orig - step * d)
            down = loss_fn()
            flat.copy_(orig)
            errs.append(_rel((up - down) / (2 * step), float(g @ d)))
        worst[name] = max(errs)
    return worst


def _rel(a: float, b: float, floor: float = 1e-7) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)
