"""Grouped state-space machinery: the token mixer and its attentive scan.

A mixer block normalizes its input, runs the grouped state-space module
(positional encoding, token-to-group classification policy, semantic
reordering, attentive selective scan) and a convolutional feed-forward,
each behind a learnable-scaled residual.

The scan itself is a chunked sequential recurrence run internally in
float64; a brute-force per-step recurrence is the correctness anchor in
the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .config import GssmConfig
from .errors import NumericalStabilityError


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel dim of a (B, C, H, W) map (per spatial token)."""

    def __init__(self, channels: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.channels = channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = x.permute(0, 2, 3, 1)
        y = F.layer_norm(y, (self.channels,), self.weight.to(y.dtype), self.bias.to(y.dtype))
        return y.permute(0, 3, 1, 2)


class LearnedPositionalEncoding(nn.Module):
    """Additive per-position table, bilinearly resized to the input grid."""

    def __init__(self, channels: int, table_size: int = 16):
        super().__init__()
        self.table = nn.Parameter(0.02 * torch.randn(1, channels, table_size, table_size))

    def positional_field(self, height: int, width: int, dtype=None) -> torch.Tensor:
        table = self.table if dtype is None else self.table.to(dtype)
        if table.shape[-2:] == (height, width):
            return table
        return F.interpolate(table, size=(height, width), mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.positional_field(x.shape[-2], x.shape[-1], dtype=x.dtype)


class ClassificationPolicy(nn.Module):
    """Hard one-hot token-to-group assignment, straight-through when sampling.

    Sampling perturbs temperature-scaled scores with Gumbel noise, so the hard
    draw follows softmax(logits / temperature); the backward pass flows through
    the perturbed soft probabilities. Eval mode takes the argmax.
    """

    def __init__(self, channels: int, num_groups: int, temperature: float = 1.0):
        super().__init__()
        if num_groups < 2:
            raise ValueError("need at least two groups for a classification policy")
        self.proj = nn.Linear(channels, num_groups)
        self.temperature = temperature

    def forward(self, tokens: torch.Tensor, sample: bool | None = None) -> torch.Tensor:
        """tokens: (B, L, C) -> one-hot assignments (B, L, T)."""
        if sample is None:
            sample = self.training
        logits = F.linear(tokens, self.proj.weight.to(tokens.dtype), self.proj.bias.to(tokens.dtype))
        if sample:
            u = torch.rand_like(logits)
            gumbel = -torch.log((-torch.log(u.clamp_min(1e-20))).clamp_min(1e-20))
            scores = logits / self.temperature + gumbel
            soft = F.softmax(scores, dim=-1)
            index = scores.argmax(dim=-1, keepdim=True)
            hard = torch.zeros_like(soft).scatter_(-1, index, 1.0)
            return hard + (soft - soft.detach())
        index = logits.argmax(dim=-1, keepdim=True)
        return torch.zeros_like(logits).scatter_(-1, index, 1.0)


class GlobalEmbedding(nn.Module):
    """Model-wide embedding factor, one shared instance across all mixer blocks."""

    def __init__(self, rank: int, state_dim: int):
        super().__init__()
        self.weight = nn.Parameter(0.02 * torch.randn(rank, state_dim))


class EmbeddingBank(nn.Module):
    """Per-block local factor paired with the shared global factor.

    The combined table is recomputed on every call, never cached, so updates
    to either factor are always visible.
    """

    def __init__(self, num_embeddings: int, rank: int, global_embedding: GlobalEmbedding):
        super().__init__()
        self.local = nn.Parameter(0.02 * torch.randn(num_embeddings, rank))
        self.global_embedding = global_embedding

    def table(self, dtype=None) -> torch.Tensor:
        local = self.local if dtype is None else self.local.to(dtype)
        glob = self.global_embedding.weight if dtype is None else self.global_embedding.weight.to(dtype)
        return local @ glob  # (T, N)


def build_embedding(bank: EmbeddingBank, y_cp: torch.Tensor) -> torch.Tensor:
    """Token embeddings E = Y_cp @ (local @ global); row i is the assigned table row."""
    table = bank.table(dtype=y_cp.dtype)
    if y_cp.shape[-1] != table.shape[0]:
        raise ValueError(f"policy width {y_cp.shape[-1]} != bank size {table.shape[0]}")
    return y_cp @ table  # (B, L, N)


@dataclass
class ScanOrder:
    """Bijective token ordering and its inverse, (B, L) index tensors."""

    permutation: torch.Tensor
    inverse: torch.Tensor


def flatten_tokens(x: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> raster tokens (B, H*W, C)."""
    b, c, h, w = x.shape
    return x.permute(0, 2, 3, 1).reshape(b, h * w, c)


def unflatten_tokens(tokens: torch.Tensor, height: int, width: int) -> torch.Tensor:
    b, _, c = tokens.shape
    return tokens.reshape(b, height, width, c).permute(0, 3, 1, 2)


def sgn_order(y_cp: torch.Tensor) -> ScanOrder:
    """Stable sort by assigned group index; raster position breaks ties."""
    assignment = y_cp.argmax(dim=-1)  # (B, L)
    permutation = torch.argsort(assignment, dim=1, stable=True)
    inverse = torch.argsort(permutation, dim=1)
    return ScanOrder(permutation=permutation, inverse=inverse)


def _gather_tokens(tokens: torch.Tensor, index: torch.Tensor) -> torch.Tensor:
    return tokens.gather(1, index.unsqueeze(-1).expand_as(tokens))


def sgn_unfold(x: torch.Tensor, y_cp: torch.Tensor) -> tuple[torch.Tensor, ScanOrder]:
    """Raster-flatten a feature map and reorder tokens by semantic group."""
    tokens = flatten_tokens(x)
    order = sgn_order(y_cp)
    return _gather_tokens(tokens, order.permutation), order


def sgn_fold(tokens: torch.Tensor, order: ScanOrder, height: int, width: int) -> torch.Tensor:
    """Invert sgn_unfold back to the original (B, C, H, W) layout."""
    return unflatten_tokens(_gather_tokens(tokens, order.inverse), height, width)


class AttentiveScan(nn.Module):
    """Selective scan whose output projection is augmented by token embeddings.

    Per channel d: h_t = Abar_t h_{t-1} + Bbar_t x_t,  y_t = (C_t + E_t) . h_t + D_d x_t,
    with zero-order-hold discretization Abar = exp(dt * A), Bbar = dt * B, A
    negative-real so every decay factor sits in (0, 1). The recurrence runs
    chunk-blocked in float64 and is cast back to the input dtype.
    """

    def __init__(self, inner_dim: int, state_dim: int):
        super().__init__()
        self.inner_dim = inner_dim
        self.state_dim = state_dim
        # S4D-real layout: channel d decays with rates 1..N
        a_init = torch.arange(1, state_dim + 1, dtype=torch.float32).repeat(inner_dim, 1)
        self.a_log = nn.Parameter(torch.log(a_init))
        self.delta_proj = nn.Linear(inner_dim, inner_dim, bias=False)
        dt = torch.exp(torch.rand(inner_dim) * (math.log(0.1) - math.log(0.001)) + math.log(0.001))
        self.delta_bias = nn.Parameter(torch.log(torch.expm1(dt)))  # softplus^-1(dt)
        self.b_proj = nn.Linear(inner_dim, state_dim, bias=False)
        self.c_proj = nn.Linear(inner_dim, state_dim, bias=False)
        self.skip = nn.Parameter(torch.ones(inner_dim))

    def discretize(self, tokens: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Input-dependent (Abar, Bbar, C): (B,L,D,N), (B,L,D,N), (B,L,N)."""
        dt = F.softplus(F.linear(tokens, self.delta_proj.weight.to(tokens.dtype)) + self.delta_bias.to(tokens.dtype))
        a = -torch.exp(self.a_log.to(tokens.dtype))  # (D, N)
        a_bar = torch.exp(dt.unsqueeze(-1) * a)  # (B, L, D, N)
        b = F.linear(tokens, self.b_proj.weight.to(tokens.dtype))  # (B, L, N)
        b_bar = dt.unsqueeze(-1) * b.unsqueeze(2)  # (B, L, D, N)
        c = F.linear(tokens, self.c_proj.weight.to(tokens.dtype))  # (B, L, N)
        return a_bar, b_bar, c

    def forward(self, tokens: torch.Tensor, embedding: torch.Tensor | None = None) -> torch.Tensor:
        """tokens: (B, L, D), embedding: (B, L, N) or None -> (B, L, D)."""
        out_dtype = tokens.dtype
        x = tokens.to(torch.float64)
        a_bar, b_bar, c = self.discretize(x)
        drive = b_bar * x.unsqueeze(-1)  # (B, L, D, N)
        h = _chunked_linear_recurrence(a_bar, drive)
        c_eff = c if embedding is None else c + embedding.to(torch.float64)
        y = torch.einsum("bln,bldn->bld", c_eff, h) + self.skip.to(torch.float64) * x
        if not torch.isfinite(y).all():
            bad = (~torch.isfinite(y)).any(dim=2).any(dim=0)
            step = int(torch.nonzero(bad)[0])
            raise NumericalStabilityError(f"non-finite scan value at step {step}")
        return y.to(out_dtype)


def _scan_blocks(a: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    b, length, d, n = a.shape
    chunk = max(1, min(length, int(math.ceil(math.sqrt(length)))))
    pad = (-length) % chunk
    if pad:
        a = torch.cat([a, torch.ones(b, pad, d, n, dtype=a.dtype)], dim=1)
        u = torch.cat([u, torch.zeros(b, pad, d, n, dtype=u.dtype)], dim=1)
    nc = a.shape[1] // chunk
    a = a.reshape(b, nc, chunk, d, n)
    u = u.reshape(b, nc, chunk, d, n)

    state = torch.zeros(b, nc, d, n, dtype=a.dtype)
    locals_ = []
    for k in range(chunk):
        state = a[:, :, k] * state + u[:, :, k]
        locals_.append(state)
    h_local = torch.stack(locals_, dim=2)  # (B, nc, K, D, N)

    a_cum = torch.cumprod(a, dim=2)
    carries = [torch.zeros(b, d, n, dtype=a.dtype)]
    for c in range(1, nc):
        carries.append(a_cum[:, c - 1, -1] * carries[-1] + h_local[:, c - 1, -1])
    carry = torch.stack(carries, dim=1)  # (B, nc, D, N)

    h = h_local + a_cum * carry.unsqueeze(2)
    h = h.reshape(b, nc * chunk, d, n)
    return h[:, :length]


class _LinearRecurrence(torch.autograd.Function):
    """Scan with a hand-written backward.

    The adjoint of h_t = a_t * h_{t-1} + u_t is the same recurrence run in
    reverse (lambda_t = g_t + a_{t+1} * lambda_{t+1}), so one extra blocked
    scan replaces an autograd graph with a node per time step.
    """

    @staticmethod
    def forward(ctx, a, u):
        h = _scan_blocks(a, u)
        ctx.save_for_backward(a, h)
        return h

    @staticmethod
    @torch.autograd.function.once_differentiable
    def backward(ctx, grad_h):
        a, h = ctx.saved_tensors
        a_next = torch.cat([a[:, 1:], torch.ones_like(a[:, :1])], dim=1)
        lam = _scan_blocks(a_next.flip(1), grad_h.flip(1)).flip(1)
        h_prev = torch.cat([torch.zeros_like(h[:, :1]), h[:, :-1]], dim=1)
        return lam * h_prev, lam


def _chunked_linear_recurrence(a: torch.Tensor, u: torch.Tensor) -> torch.Tensor:
    """h_t = a_t * h_{t-1} + u_t along dim 1, h_0 = 0, blocked for short loops.

    Splitting into chunks is exact: within a chunk, h = h_local + cumprod(a) * carry,
    where the carry is the state entering the chunk.
    """
    return _LinearRecurrence.apply(a, u)


class ConvFeedForward(nn.Module):
    """1x1 expand x2 -> depthwise 3x3 -> GELU -> 1x1 contract."""

    def __init__(self, channels: int):
        super().__init__()
        hidden = channels * 2
        self.expand = nn.Conv2d(channels, hidden, 1)
        self.depthwise = nn.Conv2d(hidden, hidden, 3, padding=1, groups=hidden)
        self.contract = nn.Conv2d(hidden, channels, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.contract(F.gelu(self.depthwise(self.expand(x))))


class Gssm(nn.Module):
    """Positional encoding -> policy -> semantic reorder -> attentive scan -> fold."""

    def __init__(self, channels: int, cfg: GssmConfig, global_embedding: GlobalEmbedding):
        super().__init__()
        inner = max(1, int(round(channels * cfg.expand)))
        self.pos = LearnedPositionalEncoding(channels, cfg.pos_table_size)
        self.policy = ClassificationPolicy(channels, cfg.num_embeddings, cfg.temperature)
        self.bank = EmbeddingBank(cfg.num_embeddings, cfg.embed_rank, global_embedding)
        self.in_proj = nn.Linear(channels, inner)
        self.scan = AttentiveScan(inner, cfg.state_dim)
        self.out_proj = nn.Linear(inner, channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        tokens = flatten_tokens(self.pos(x))
        y_cp = self.policy(tokens)
        embedding = build_embedding(self.bank, y_cp)
        order = sgn_order(y_cp)
        inner = F.linear(tokens, self.in_proj.weight.to(x.dtype), self.in_proj.bias.to(x.dtype))
        inner = _gather_tokens(inner, order.permutation)
        embedding = _gather_tokens(embedding, order.permutation)
        scanned = self.scan(inner, embedding)
        scanned = _gather_tokens(scanned, order.inverse)
        out = F.linear(scanned, self.out_proj.weight.to(x.dtype), self.out_proj.bias.to(x.dtype))
        return unflatten_tokens(out, h, w)


class Gssb(nn.Module):
    """Token-mixer block: scan and feed-forward behind scaled residuals."""

    def __init__(self, channels: int, cfg: GssmConfig, global_embedding: GlobalEmbedding):
        super().__init__()
        self.norm1 = ChannelLayerNorm(channels)
        self.gssm = Gssm(channels, cfg, global_embedding)
        self.scale1 = nn.Parameter(torch.ones(channels))
        self.norm2 = ChannelLayerNorm(channels)
        self.ffn = ConvFeedForward(channels)
        self.scale2 = nn.Parameter(torch.ones(channels))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        s1 = self.scale1.to(x.dtype).view(1, -1, 1, 1)
        s2 = self.scale2.to(x.dtype).view(1, -1, 1, 1)
        x_hat = self.gssm(self.norm1(x)) + s1 * x
        return self.ffn(self.norm2(x_hat)) + s2 * x_hat
