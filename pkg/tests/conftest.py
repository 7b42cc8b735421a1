"""Shared builders for randomized small networks and datasets."""

import numpy as np
import pytest

from jcert.netcore import Affine, Conv2D, Network, ReLU


def make_mlp(rng, in_dim, hidden, num_classes, scale=1.0):
    """Random dense ReLU net with the given hidden widths."""
    layers = []
    prev = in_dim
    for width in hidden:
        layers.append(Affine(rng.uniform(-scale, scale, (width, prev)),
                             rng.uniform(-scale, scale, width)))
        layers.append(ReLU())
        prev = width
    layers.append(Affine(rng.uniform(-scale, scale, (num_classes, prev)),
                         rng.uniform(-scale, scale, num_classes)))
    return Network(tuple(layers), (in_dim,), num_classes)


def make_conv_net(rng, in_shape, out_ch, kernel, stride, padding, num_classes):
    """conv -> relu -> dense net on a (ch, h, w) input."""
    conv = Conv2D(rng.uniform(-1, 1, (out_ch, in_shape[0], kernel, kernel)),
                  rng.uniform(-1, 1, out_ch), (stride, stride), (padding, padding))
    flat = int(np.prod(conv.out_shape(in_shape)))
    dense = Affine(rng.uniform(-1, 1, (num_classes, flat)), rng.uniform(-1, 1, num_classes))
    return Network((conv, ReLU(), dense), in_shape, num_classes)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
