"""Convolutional adversarial autoencoder for log-conductivity fields.

The encoder maps a ``(1, W, H, D)`` field to the mean and log-variance of
a latent ``(2, w, h, d)`` code, the decoder maps codes back to fields, and
the discriminator separates encoded codes from standard-normal draws.
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from . import autodiff as ad
from .errors import LayoutError, NumericError
from .layers import RRDB, BatchNorm3, BnReluConv, Conv3, Linear

log = logging.getLogger(__name__)

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class CaaeSpec:
    grid_shape: tuple
    features: int = 48
    latent_channels: int = 2
    n_db: int = 3
    n_l: int = 5
    growth: int = 16
    beta: float = 0.2
    w: float = 0.01
    disc_channels: tuple = (32, 64, 128)
    disc_fc: int = 128
    up_targets: tuple | None = None

    def __post_init__(self):
        object.__setattr__(self, "grid_shape", tuple(int(n) for n in self.grid_shape))
        object.__setattr__(self, "disc_channels", tuple(self.disc_channels))
        if self.up_targets is not None:
            object.__setattr__(self, "up_targets", tuple(tuple(t) for t in self.up_targets))

    @property
    def mid_shape(self):
        return tuple(ad.conv_output_size(n, 3, 2, 1) for n in self.grid_shape)

    @property
    def latent_spatial(self):
        return tuple(ad.conv_output_size(n, 3, 2, 1) for n in self.mid_shape)

    @property
    def latent_shape(self):
        return (self.latent_channels,) + self.latent_spatial

    @property
    def n_latent(self):
        return int(np.prod(self.latent_shape))

    @property
    def upsample_targets(self):
        """Resolutions after the two decoder upsamplings.

        Unless overridden: twice the latent size (minus one where the grid
        size is odd), then the grid itself.
        """
        if self.up_targets is not None:
            return self.up_targets
        first = tuple(2 * n - (g % 2) for n, g in zip(self.latent_spatial, self.grid_shape))
        return (first, self.grid_shape)

    def to_dict(self):
        return asdict(self)


class Encoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        nf = spec.features
        self.spec = spec
        self.conv = Conv3(1, nf, 3, stride=2)
        self.rrdb = RRDB(nf, spec.n_db, spec.n_l, spec.growth, spec.beta)
        self.mix = BnReluConv(nf, nf)
        self.mu = Conv3(nf, spec.latent_channels, 3, stride=2)
        self.log_var = Conv3(nf, spec.latent_channels, 3, stride=2)

    def trace(self, k):
        """Forward pass returning ``(name, output)`` for every architecture row."""
        rows = [("input", k)]
        x = self.conv(k)
        rows.append(("conv", x))
        x = self.rrdb(x)
        rows.append(("rrdb", x))
        x = self.mix(x)
        rows.append(("bn_relu_conv", x))
        rows.append(("mu", self.mu(x)))
        rows.append(("log_var", self.log_var(x)))
        return rows

    def forward(self, k):
        if tuple(k.shape[1:]) != (1,) + self.spec.grid_shape:
            raise LayoutError(f"encoder expects (N, 1, {self.spec.grid_shape}), got {tuple(k.shape)}")
        rows = self.trace(k)
        return rows[-2][1], rows[-1][1]


class UpBlock(nn.Module):
    """BN-ReLU-UP-Conv: nearest resize to a fixed resolution, then a 3x3x3 conv."""

    def __init__(self, c_in, c_out, target):
        super().__init__()
        self.bn = BatchNorm3(c_in)
        self.conv = Conv3(c_in, c_out, 3)
        self.target = tuple(target)

    def forward(self, x):
        x = ad.activation(self.bn(x), "relu")
        return self.conv(ad.nearest_resize3(x, self.target))


class Decoder(nn.Module):
    def __init__(self, spec):
        super().__init__()
        nf = spec.features
        self.spec = spec
        t1, t2 = spec.upsample_targets
        self.conv = Conv3(spec.latent_channels, nf, 3)
        self.rrdb1 = RRDB(nf, spec.n_db, spec.n_l, spec.growth, spec.beta)
        self.rrdb2 = RRDB(nf, spec.n_db, spec.n_l, spec.growth, spec.beta)
        self.up1 = UpBlock(nf, nf, t1)
        self.rrdb3 = RRDB(nf, spec.n_db, spec.n_l, spec.growth, spec.beta)
        self.up2 = UpBlock(nf, 1, t2)

    def trace(self, z):
        rows = [("input", z)]
        for name in ("conv", "rrdb1", "rrdb2", "up1", "rrdb3", "up2"):
            z = getattr(self, name)(z)
            rows.append((name, z))
        return rows

    def forward(self, z):
        if tuple(z.shape[1:]) != self.spec.latent_shape:
            raise LayoutError(f"decoder expects (N, {self.spec.latent_shape}), got {tuple(z.shape)}")
        return self.trace(z)[-1][1]


class Discriminator(nn.Module):
    def __init__(self, spec):
        super().__init__()
        layers = []
        c_in, size = spec.latent_channels, spec.latent_spatial
        for c in spec.disc_channels:
            conv = Conv3(c_in, c, 3, stride=2, negative_slope=ad.LEAKY_SLOPE)
            size = conv.output_size(size)
            layers.append(conv)
            c_in = c
        self.convs = nn.ModuleList(layers)
        self.fc1 = Linear(c_in * int(np.prod(size)), spec.disc_fc, negative_slope=ad.LEAKY_SLOPE)
        self.fc2 = Linear(spec.disc_fc, 1, init="xavier")

    def forward(self, z):
        x = z
        for conv in self.convs:
            x = ad.activation(conv(x), "leakyrelu")
        x = ad.activation(self.fc1(x.flatten(1)), "leakyrelu")
        return ad.activation(self.fc2(x), "sigmoid").squeeze(1)


class CAAE(nn.Module):
    def __init__(self, spec):
        super().__init__()
        self.spec = spec
        self.encoder = Encoder(spec)
        self.decoder = Decoder(spec)
        self.discriminator = Discriminator(spec)

    def encode(self, k):
        return self.encoder(k)

    def decode(self, z):
        return self.decoder(z)

    def discriminate(self, z):
        return self.discriminator(z)

    @torch.no_grad()
    def decode_numpy(self, z_flat, batch_size=64):
        """Decode flat latent vectors ``(N, n_latent)`` to ``(N, W, H, D)`` fields (eval mode)."""
        was_training = self.training
        self.eval()
        z_flat = np.atleast_2d(np.asarray(z_flat))
        if z_flat.shape[1] != self.spec.n_latent:
            raise LayoutError(f"latent vectors need {self.spec.n_latent} entries, got {z_flat.shape[1]}")
        dtype = next(self.parameters()).dtype
        out = []
        for s in range(0, len(z_flat), batch_size):
            z = torch.as_tensor(z_flat[s:s + batch_size], dtype=dtype).reshape((-1,) + self.spec.latent_shape)
            out.append(self.decoder(z)[:, 0].double().numpy())
        self.train(was_training)
        return np.concatenate(out, axis=0)


def reparameterize(mu, log_var, generator=None, eps=None):
    """``z = mu + exp(log_var / 2) * eps`` with ``eps ~ N(0, I)`` unless given."""
    if eps is None:
        eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    return mu + torch.exp(0.5 * log_var) * eps


def reconstruction_loss(k, k_hat):
    """Mean absolute error over batch and cells."""
    return ad.l1_loss(k_hat, k)


def generator_loss(d_fake):
    return -torch.log(torch.clamp(d_fake, min=LOG_CLAMP)).mean()


def discriminator_loss(d_real, d_fake):
    return -(torch.log(torch.clamp(d_real, min=LOG_CLAMP))
             + torch.log(torch.clamp(1.0 - d_fake, min=LOG_CLAMP))).mean()


def caae_losses(k, k_hat, d_fake, d_real, w=0.01):
    """Return ``(L_rec, L_G, L_D, L_ED)`` with ``L_ED = L_rec + w * L_G``."""
    l_rec = reconstruction_loss(k, k_hat)
    l_g = generator_loss(d_fake)
    l_d = discriminator_loss(d_real, d_fake)
    return l_rec, l_g, l_d, l_rec + w * l_g


@dataclass
class TrainHistory:
    l_rec: list = field(default_factory=list)
    l_g: list = field(default_factory=list)
    l_d: list = field(default_factory=list)
    l_ed: list = field(default_factory=list)
    test_mae: list = field(default_factory=list)

    def to_dict(self):
        return asdict(self)


def train_caae(patches, spec, epochs=50, lr=2e-4, batch_size=32, seed=0, test_patches=None,
               dtype=torch.float32, on_epoch=None, model=None):
    """Two-phase adversarial training on an ``(N, W, H, D)`` array of log-conductivity patches.

    Each batch first updates encoder and decoder on ``L_ED`` and then the
    discriminator on ``L_D``, both with Adam.  On a non-finite loss the last
    finished epoch's weights are restored and :class:`NumericError` raised
    with the model attached as ``err.model``.
    """
    patches = np.asarray(patches)
    if len(patches) == 0:
        raise LayoutError("empty training set")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = CAAE(spec).to(dtype) if model is None else model
    ed_params = list(model.encoder.parameters()) + list(model.decoder.parameters())
    opt_ed = ad.make_optimizer(ed_params, "adam", lr)
    opt_d = ad.make_optimizer(model.discriminator.parameters(), "adam", lr)
    data = torch.as_tensor(patches[:, None], dtype=dtype)
    if len(data) == 1:
        # batch statistics need two items; a lone sample is duplicated
        data = data.repeat(2, 1, 1, 1, 1)
    hist = TrainHistory()
    good = copy.deepcopy(model.state_dict())
    n = len(data)
    bs = min(batch_size, n)
    for epoch in range(epochs):
        model.train()
        order = rng.permutation(n)
        sums = np.zeros(4)
        batches = 0
        for s in range(0, n - bs + 1, bs):
            k = data[order[s:s + bs]]
            mu, log_var = model.encoder(k)
            z = reparameterize(mu, log_var, gen)
            k_hat = model.decoder(z)
            l_rec = reconstruction_loss(k, k_hat)
            l_g = generator_loss(model.discriminator(z))
            l_ed = l_rec + spec.w * l_g
            if not torch.isfinite(l_ed):
                model.load_state_dict(good)
                err = NumericError(f"non-finite CAAE loss in epoch {epoch + 1}")
                err.model = model
                raise err
            opt_ed.zero_grad()
            ad.backward(l_ed)
            opt_ed.step()

            z_real = torch.randn(z.shape, generator=gen, dtype=dtype)
            l_d = discriminator_loss(model.discriminator(z_real), model.discriminator(z.detach()))
            opt_d.zero_grad()
            ad.backward(l_d)
            opt_d.step()
            sums += [l_rec.item(), l_g.item(), l_d.item(), l_ed.item()]
            batches += 1
        sums /= max(batches, 1)
        hist.l_rec.append(float(sums[0]))
        hist.l_g.append(float(sums[1]))
        hist.l_d.append(float(sums[2]))
        hist.l_ed.append(float(sums[3]))
        if test_patches is not None and len(test_patches):
            hist.test_mae.append(reconstruction_mae(model, test_patches))
        good = copy.deepcopy(model.state_dict())
        log.info("CAAE epoch %d: L_rec=%.4f L_G=%.4f L_D=%.4f", epoch + 1, *sums[:3])
        if on_epoch is not None:
            on_epoch(epoch, model, hist)
    model.eval()
    return model, hist


@torch.no_grad()
def reconstruction_mae(model, patches, batch_size=64):
    """Cell-averaged ``|k - De(mu(k))|`` over a patch set (eval mode)."""
    was_training = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    total, count = 0.0, 0
    for s in range(0, len(patches), batch_size):
        k = torch.as_tensor(np.asarray(patches[s:s + batch_size])[:, None], dtype=dtype)
        mu, _ = model.encoder(k)
        total += torch.abs(model.decoder(mu) - k).sum().item()
        count += k.numel()
    model.train(was_training)
    return total / count


def facies_fraction(fields, threshold):
    return float(np.mean(np.asarray(fields) > threshold))

