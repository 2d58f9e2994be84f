"""Finite-difference checks for every differentiable op, plus a whole-model
check through a miniature of the real network."""

import numpy as np
import pytest

from prunekit import tensor as T
from fdcheck import fd_check


def _labels(rng, n, k):
    return rng.integers(0, k, size=n)


def test_conv2d_gradients():
    rng = np.random.default_rng(10)
    for stride, padding in [(1, 0), (1, 1), (2, 1), (1, 2)]:
        x = T.Tensor(rng.normal(size=(2, 2, 7, 7)), requires_grad=True)
        w = T.Tensor(rng.normal(size=(3, 2, 3, 3)), requires_grad=True)
        b = T.Tensor(rng.normal(size=3), requires_grad=True)
        labels = _labels(rng, 2, 10)

        def loss():
            h = T.flatten(T.conv2d(x, w, b, stride, padding))
            return T.softmax_cross_entropy(h, labels % h.data.shape[1])

        fd_check(loss, [x, w, b])


def test_dense_gradients():
    rng = np.random.default_rng(11)
    x = T.Tensor(rng.normal(size=(4, 9)), requires_grad=True)
    w = T.Tensor(rng.normal(size=(6, 9)), requires_grad=True)
    b = T.Tensor(rng.normal(size=6), requires_grad=True)
    labels = _labels(rng, 4, 6)

    def loss():
        return T.softmax_cross_entropy(T.dense(x, w, b), labels)

    fd_check(loss, [x, w, b])


def test_relu_gradients_away_from_kink():
    rng = np.random.default_rng(12)
    data = rng.normal(size=(3, 8))
    data[np.abs(data) < 0.05] += 0.2  # keep FD away from the kink
    x = T.Tensor(data, requires_grad=True)
    labels = _labels(rng, 3, 8)

    def loss():
        return T.softmax_cross_entropy(T.relu(x), labels)

    fd_check(loss, [x])


def test_maxpool_gradients():
    rng = np.random.default_rng(13)
    # Scale up so window values differ by much more than the FD step.
    x = T.Tensor(rng.normal(size=(2, 2, 6, 6)) * 10.0, requires_grad=True)
    labels = _labels(rng, 2, 18)

    def loss():
        h = T.flatten(T.maxpool2x2(x))
        return T.softmax_cross_entropy(h, labels)

    fd_check(loss, [x])


def test_flatten_and_add_gradients():
    rng = np.random.default_rng(14)
    x = T.Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    y = T.Tensor(rng.normal(size=(2, 3, 4, 4)), requires_grad=True)
    labels = _labels(rng, 2, 48)

    def loss():
        return T.softmax_cross_entropy(T.flatten(T.add(x, y)), labels)

    fd_check(loss, [x, y])


def test_softmax_cross_entropy_gradients():
    rng = np.random.default_rng(15)
    x = T.Tensor(rng.normal(size=(5, 7)), requires_grad=True)
    labels = _labels(rng, 5, 7)

    def loss():
        return T.softmax_cross_entropy(x, labels)

    fd_check(loss, [x])


def test_whole_tiny_network_gradients():
    # conv -> relu -> pool -> conv -> relu -> pool -> flatten -> dense -> CE,
    # the same shape family as the real model but minuscule.
    rng = np.random.default_rng(16)
    x = T.Tensor(rng.normal(size=(2, 1, 14, 14)))
    w1 = T.Tensor(rng.normal(size=(3, 1, 3, 3)) * 0.5, requires_grad=True)
    b1 = T.Tensor(np.zeros(3), requires_grad=True)
    w2 = T.Tensor(rng.normal(size=(4, 3, 3, 3)) * 0.5, requires_grad=True)
    b2 = T.Tensor(np.zeros(4), requires_grad=True)
    wf = T.Tensor(rng.normal(size=(5, 16)) * 0.5, requires_grad=True)
    bf = T.Tensor(np.zeros(5), requires_grad=True)
    labels = _labels(rng, 2, 5)

    def loss():
        h = T.maxpool2x2(T.relu(T.conv2d(x, w1, b1)))
        h = T.maxpool2x2(T.relu(T.conv2d(h, w2, b2)))
        h = T.dense(T.flatten(h), wf, bf)
        return T.softmax_cross_entropy(h, labels)

    fd_check(loss, [w1, b1, w2, b2, wf, bf], max_indices=15)


def test_residual_add_path_gradients():
    rng = np.random.default_rng(17)
    x = T.Tensor(rng.normal(size=(2, 2, 4, 4)))
    w = T.Tensor(rng.normal(size=(2, 2, 3, 3)) * 0.5, requires_grad=True)
    b = T.Tensor(np.zeros(2), requires_grad=True)
    labels = _labels(rng, 2, 32)

    def loss():
        z = T.conv2d(x, w, b, 1, 1)
        h = T.relu(T.add(x, z))
        return T.softmax_cross_entropy(T.flatten(h), labels)

    fd_check(loss, [w, b])
