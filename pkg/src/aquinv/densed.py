"""Autoregressive dense encoder-decoder surrogate of the flow and transport model.

One network application maps ``(c(t_i), S(t_i), lnK)`` to ``(c(t_{i+1}), h)``;
a rollout applies it ``I`` times starting from ``c(t_0) = 0``.
"""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .errors import DomainError, LayoutError, NumericError
from .grid import build_source_field, locate_cell
from .layers import BnReluConv, Conv3, DenseBlock, TConv3

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DenseEdSpec:
    grid_shape: tuple
    in_channels: int = 3
    out_channels: int = 2
    init_features: int = 48
    growth: int = 48
    blocks: tuple = (3, 6, 3)

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(n) for n in self.grid_shape))
        object.__setattr__(self, "blocks", tuple(int(b) for b in self.blocks))

    @property
    def coarse_shapes(self):
        s1 = tuple(ad.conv_output_size(n, 3, 2, 1) for n in self.grid_shape)
        s2 = tuple(ad.conv_output_size(n, 3, 2, 1) for n in s1)
        return s1, s2

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class NormalizationSpec:
    """Channel scalings; the source channel is divided by ``s_ref``."""

    c_ref: float = 1000.0
    s_ref: float = 1.0
    lnk_mean: float = 0.0
    lnk_std: float = 1.0
    h_ref: float = 30.0

    def __post_init__(self):
        if min(self.c_ref, self.s_ref, self.lnk_std, self.h_ref) <= 0:
            raise DomainError("normalisation scales must be positive")

    def to_dict(self):
        return asdict(self)


class Transition(nn.Module):
    """BN-ReLU-Conv(1x1) halving channels, then a stride-2 conv or tconv."""

    def __init__(self, c_in, c_out, size_in, size_out, up):
        super().__init__()
        self.reduce = BnReluConv(c_in, c_in // 2, kernel=1)
        if up:
            self.resample = TConv3.to_size(c_in // 2, c_out, size_in, size_out)
        else:
            self.resample = Conv3(c_in // 2, c_out, 3, stride=2)

    def forward(self, x):
        return self.resample(self.reduce(x))


class DenseED(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        s1, s2 = spec.coarse_shapes
        nb1, nb2, nb3 = spec.blocks
        g = spec.growth
        self.conv = Conv3(spec.in_channels, spec.init_features, 3, stride=2)
        self.block1 = DenseBlock(spec.init_features, nb1, g)
        c = self.block1.c_out
        self.encoding = Transition(c, c // 2, s1, s2, up=False)
        self.block2 = DenseBlock(c // 2, nb2, g)
        c = self.block2.c_out
        self.decoding1 = Transition(c, c // 2, s2, s1, up=True)
        self.block3 = DenseBlock(c // 2, nb3, g)
        c = self.block3.c_out
        self.decoding2 = Transition(c, spec.out_channels, s1, spec.grid_shape, up=True)

    def trace(self, x):
        rows = [("input", x)]
        for name in ("conv", "block1", "encoding", "block2", "decoding1", "block3", "decoding2"):
            x = getattr(self, name)(x)
            rows.append((name, x))
        return rows

    def forward(self, x):
        if tuple(x.shape[1:]) != (self.spec.in_channels,) + self.spec.grid_shape:
            raise LayoutError(f"surrogate expects (N, {self.spec.in_channels}, {self.spec.grid_shape}), "
                              f"got {tuple(x.shape)}")
        return self.trace(x)[-1][1]


def source_mask(grid, cell, sensors, weight=5.0):
    """Loss weights: ``1 + weight`` at the 27-cell source neighbourhood and at sensors."""
    mask = np.ones(grid.shape)
    i, j, k = cell
    mask[max(i - 1, 0):i + 2, max(j - 1, 0):j + 2, max(k - 1, 0):k + 2] = 1.0 + weight
    if sensors:
        si, sj, sk = np.array(sensors).T
        mask[si, sj, sk] = 1.0 + weight
    return mask


def weighted_l1_loss(pred, target, mask=None, params=(), lam=1e-5):
    """``mean(mask * |pred - target|) + lam * sum(w**2)``; mask broadcasts over channels."""
    loss = ad.l1_loss(pred, target, mask)
    if lam and params:
        loss = loss + ad.l2_penalty(params, lam)
    return loss


@dataclass
class SurrogateDataset:
    """Autoregressive pairs from simulator runs.

    ``inputs`` is ``(P, 3, W, H, D)`` raw (c, S, lnK); ``outputs`` is
    ``(P, 2, W, H, D)`` raw (c_next, h); ``run`` and ``step`` index each pair
    and ``cells`` the source cell of its run.
    """

    inputs: np.ndarray
    outputs: np.ndarray
    run: np.ndarray
    step: np.ndarray
    cells: np.ndarray

    def __len__(self):
        return len(self.inputs)

    def subset(self, runs):
        sel = np.isin(self.run, runs)
        return SurrogateDataset(self.inputs[sel], self.outputs[sel], self.run[sel], self.step[sel],
                                self.cells[sel])


def source_fields(src, times, grid):
    """Loading-rate field active during each interval ``[t_i, t_{i+1})`` for ``t_0 = 0``."""
    starts = np.concatenate([[0.0], np.asarray(times[:-1], float)])
    return np.stack([build_source_field(src, t, grid) for t in starts])


def make_pairs(lnk_runs, sources, snapshots, heads, times, grid):
    """Pair step ``i`` inputs with step ``i+1`` outputs for every run, ``c(t_0) = 0``."""
    inputs, outputs, run_idx, step_idx, cells = [], [], [], [], []
    for r, (lnk, src, c, h) in enumerate(zip(lnk_runs, sources, snapshots, heads)):
        s = source_fields(src, times, grid)
        c_prev = np.concatenate([np.zeros((1,) + grid.shape), c[:-1]])
        n = len(times)
        inputs.append(np.stack([c_prev, s, np.broadcast_to(lnk, c_prev.shape)], axis=1))
        outputs.append(np.stack([c, np.broadcast_to(h, c.shape)], axis=1))
        run_idx.append(np.full(n, r))
        step_idx.append(np.arange(n))
        cells.append(np.tile(locate_cell(src.sl_x, src.sl_y, src.layer, grid), (n, 1)))
    return SurrogateDataset(np.concatenate(inputs), np.concatenate(outputs), np.concatenate(run_idx),
                            np.concatenate(step_idx), np.concatenate(cells))


def normalize_inputs(x, norm):
    x = np.array(x, dtype=float, copy=True)
    x[:, 0] /= norm.c_ref
    x[:, 1] /= norm.s_ref
    x[:, 2] = (x[:, 2] - norm.lnk_mean) / norm.lnk_std
    return x


def normalize_outputs(y, norm):
    y = np.array(y, dtype=float, copy=True)
    y[:, 0] /= norm.c_ref
    y[:, 1] /= norm.h_ref
    return y


@dataclass
class SurrogateHistory:
    train_loss: list = field(default_factory=list)
    train_rmse: list = field(default_factory=list)
    test_rmse: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


class Surrogate:
    """Trained network plus the metadata needed to run it."""

    def __init__(self, net, norm, dt, times):
        self.net = net
        self.norm = norm
        self.dt = float(dt)
        self.times = tuple(float(t) for t in times)

    @property
    def dtype(self):
        return next(self.net.parameters()).dtype

    @torch.no_grad()
    def predict(self, x_raw, batch_size=32):
        """One autoregressive step on raw inputs ``(N, 3, ...)``; returns raw ``(N, 2, ...)``."""
        self.net.eval()
        x = normalize_inputs(x_raw, self.norm)
        out = []
        for s in range(0, len(x), batch_size):
            out.append(self.net(torch.as_tensor(x[s:s + batch_size], dtype=self.dtype)).double().numpy())
        y = np.concatenate(out)
        y[:, 0] *= self.norm.c_ref
        y[:, 1] *= self.norm.h_ref
        return y

    def rollout(self, lnk, sources, grid, times=None, batch_size=32):
        """Predict concentration snapshots and head for a batch of members.

        ``lnk`` is ``(B, W, H, D)`` and ``sources`` a list of ``B``
        :class:`SourceConfig`.  Returns ``(c, h)`` with ``c`` of shape
        ``(B, I) + grid`` and ``h`` of shape ``(B,) + grid``; the head is the
        first step's head channel and concentrations are clamped at zero.
        """
        times = self.times if times is None else tuple(times)
        spacing = np.diff(np.concatenate([[0.0], times]))
        if np.any(np.abs(spacing - self.dt) > 1e-9 * self.dt):
            raise DomainError(f"rollout spacing {spacing} differs from training interval {self.dt}")
        lnk = np.asarray(lnk, float)
        if lnk.ndim == 3:
            lnk = lnk[None]
        n_b = len(lnk)
        s_fields = np.stack([source_fields(src, times, grid) for src in sources])  # (B, I, ...)
        c = np.zeros((n_b,) + grid.shape)
        snaps = np.zeros((n_b, len(times)) + grid.shape)
        head = None
        for i in range(len(times)):
            x = np.stack([c, s_fields[:, i], lnk], axis=1)
            y = self.predict(x, batch_size)
            c = np.maximum(y[:, 0], 0.0)
            snaps[:, i] = c
            if head is None:
                head = y[:, 1]
        return snaps, head


def rmse(a, b):
    return float(np.sqrt(np.mean((np.asarray(a) - np.asarray(b)) ** 2)))


def _masks(ds, grid, sensors, weight):
    masks = np.stack([source_mask(grid, tuple(cell), sensors, weight) for cell in ds.cells])
    return masks[:, None]


@torch.no_grad()
def _eval_rmse(net, x, y, dtype, batch_size=64):
    net.eval()
    sq, n = 0.0, 0
    for s in range(0, len(x), batch_size):
        pred = net(torch.as_tensor(x[s:s + batch_size], dtype=dtype))
        sq += ((pred - torch.as_tensor(y[s:s + batch_size], dtype=dtype)) ** 2).sum().item()
        n += pred.numel()
    return math.sqrt(sq / n)


def train_surrogate(train, test, spec, norm, grid, sensors, dt, times, epochs=200, lr=5e-3,
                    batch_size=16, seed=0, lam=1e-5, mask_weight=5.0, momentum=0.9,
                    dtype=torch.float32, on_epoch=None):
    """Momentum SGD on the weighted L1 loss with cosine decay to ``lr / 10``.

    RMSE histories are computed on normalised outputs over all cells.
    """
    if len(train) == 0:
        raise LayoutError("empty surrogate training set")
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    net = DenseED(spec).to(dtype)
    opt = ad.make_optimizer(net.parameters(), "sgd", lr, momentum=momentum)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(epochs, 1), eta_min=lr / 10)
    x_tr = normalize_inputs(train.inputs, norm)
    y_tr = normalize_outputs(train.outputs, norm)
    m_tr = _masks(train, grid, sensors, mask_weight)
    x_te = normalize_inputs(test.inputs, norm) if len(test) else None
    y_te = normalize_outputs(test.outputs, norm) if len(test) else None
    weights = [p for name, p in net.named_parameters() if name.endswith("weight") and p.dim() > 1]
    hist = SurrogateHistory()
    good = copy.deepcopy(net.state_dict())
    n = len(x_tr)
    bs = min(batch_size, n)
    for epoch in range(epochs):
        net.train()
        order = rng.permutation(n)
        total, batches = 0.0, 0
        for s in range(0, n - bs + 1, bs):
            idx = order[s:s + bs]
            xb = torch.as_tensor(x_tr[idx], dtype=dtype)
            yb = torch.as_tensor(y_tr[idx], dtype=dtype)
            mb = torch.as_tensor(m_tr[idx], dtype=dtype)
            loss = weighted_l1_loss(net(xb), yb, mb, weights, lam)
            if not torch.isfinite(loss):
                net.load_state_dict(good)
                err = NumericError(f"non-finite surrogate loss in epoch {epoch + 1}")
                err.model = net
                raise err
            opt.zero_grad()
            ad.backward(loss)
            opt.step()
            total += loss.item()
            batches += 1
        sched.step()
        hist.train_loss.append(total / max(batches, 1))
        hist.train_rmse.append(_eval_rmse(net, x_tr, y_tr, dtype))
        hist.test_rmse.append(_eval_rmse(net, x_te, y_te, dtype) if x_te is not None else float("nan"))
        good = copy.deepcopy(net.state_dict())
        log.info("surrogate epoch %d: loss=%.5f train_rmse=%.5f test_rmse=%.5f", epoch + 1,
                 hist.train_loss[-1], hist.train_rmse[-1], hist.test_rmse[-1])
        if on_epoch is not None:
            on_epoch(epoch, net, hist)
    net.eval()
    return Surrogate(net, norm, dt, times), hist
