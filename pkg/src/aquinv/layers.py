"""Parameterised building blocks shared by the autoencoder and the surrogate."""
from __future__ import annotations

import torch
from torch import nn

from . import autodiff as ad
from .errors import LayoutError


class Conv3(nn.Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1, padding=None, bias=True, init="he",
                 negative_slope=0.0):
        super().__init__()
        self.stride = stride
        self.padding = kernel // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(c_out, c_in, kernel, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out)) if bias else None
        fan_in = c_in * kernel ** 3
        if init == "xavier":
            ad.xavier_normal_(self.weight, fan_in, c_out * kernel ** 3)
        else:
            ad.he_normal_(self.weight, fan_in, negative_slope)

    def forward(self, x):
        return ad.conv3(x, self.weight, self.bias, self.stride, self.padding)

    def output_size(self, size):
        k = self.weight.shape[-1]
        return tuple(ad.conv_output_size(n, k, self.stride, self.padding) for n in size)


class TConv3(nn.Module):
    """Transposed convolution whose output padding is fixed per axis."""

    def __init__(self, c_in, c_out, kernel=3, stride=2, padding=1, output_padding=(0, 0, 0)):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.output_padding = tuple(output_padding)
        self.weight = nn.Parameter(torch.empty(c_in, c_out, kernel, kernel, kernel))
        self.bias = nn.Parameter(torch.zeros(c_out))
        ad.he_normal_(self.weight, c_in * kernel ** 3 // stride ** 3)

    @classmethod
    def to_size(cls, c_in, c_out, size_in, size_out, kernel=3, stride=2, padding=1):
        ops = tuple(o - ad.tconv_output_size(n, kernel, stride, padding) for n, o in zip(size_in, size_out))
        if any(op < 0 or op >= stride for op in ops):
            raise LayoutError(f"cannot map {size_in} to {size_out} with a stride-{stride} tconv")
        return cls(c_in, c_out, kernel, stride, padding, ops)

    def forward(self, x):
        return ad.tconv3(x, self.weight, self.bias, self.stride, self.padding, self.output_padding)


class BatchNorm3(nn.Module):
    def __init__(self, channels, eps=1e-5, momentum=0.1):
        super().__init__()
        self.eps, self.momentum = eps, momentum
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, x):
        return ad.batchnorm3(x, self.weight, self.bias, self.running_mean, self.running_var,
                             self.training, self.eps, self.momentum)


class Linear(nn.Module):
    def __init__(self, n_in, n_out, init="he", negative_slope=0.0):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(n_out, n_in))
        self.bias = nn.Parameter(torch.zeros(n_out))
        if init == "xavier":
            ad.xavier_normal_(self.weight, n_in, n_out)
        else:
            ad.he_normal_(self.weight, n_in, negative_slope)

    def forward(self, x):
        return ad.fully_connected(x, self.weight, self.bias)


class BnReluConv(nn.Module):
    def __init__(self, c_in, c_out, kernel=3, stride=1):
        super().__init__()
        self.bn = BatchNorm3(c_in)
        self.conv = Conv3(c_in, c_out, kernel, stride)

    def forward(self, x):
        return self.conv(ad.activation(self.bn(x), "relu"))


class DenseBlock(nn.Module):
    """``n_layers`` BN-ReLU-Conv layers, each fed the concatenation of all previous outputs."""

    def __init__(self, c_in, n_layers, growth):
        super().__init__()
        self.layers = nn.ModuleList(BnReluConv(c_in + i * growth, growth) for i in range(n_layers))
        self.c_out = c_in + n_layers * growth

    def forward(self, x):
        for layer in self.layers:
            x = ad.concat_channels(x, layer(x))
        return x


class ResidualDenseBlock(nn.Module):
    def __init__(self, channels, n_layers=5, growth=16, beta=0.2):
        super().__init__()
        self.dense = DenseBlock(channels, n_layers, growth)
        self.fuse = Conv3(self.dense.c_out, channels, kernel=1)
        self.beta = beta

    def forward(self, x):
        return ad.add(x, ad.scale(self.fuse(self.dense(x)), self.beta))


class RRDB(nn.Module):
    """Residual-in-residual dense block."""

    def __init__(self, channels, n_blocks=3, n_layers=5, growth=16, beta=0.2):
        super().__init__()
        self.blocks = nn.Sequential(*(ResidualDenseBlock(channels, n_layers, growth, beta)
                                      for _ in range(n_blocks)))
        self.beta = beta

    def forward(self, x):
        return ad.add(x, ad.scale(self.blocks(x), self.beta))
