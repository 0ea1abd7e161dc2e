"""Consolidated finite-difference gradient suite over every differentiable op.

Each entry builds a small double-precision scenario, runs backward(), and
compares against central finite differences. run_all() returns the per-check
worst relative errors plus the elapsed wall time.
"""

import time

import numpy as np

from embolite import nn
from embolite import tensor as T
from embolite.detector import AttentionHead, ConvLSTMCell, Detector, aggregate_features, bce_loss, focal_loss
from embolite.tensor import Tensor
from embolite.unet import dice_loss

from oracles import gradcheck


def _rand(rng, *shape):
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def check_conv2d(rng):
    x = _rand(rng, 2, 3, 5, 5)
    w = _rand(rng, 4, 3, 3, 3)
    b = _rand(rng, 4)
    return gradcheck(lambda: T.reduce_sum(T.mul(T.conv2d(x, w, b, 1, 1),
                                                T.conv2d(x, w, b, 1, 1))), [x, w, b])


def check_conv2d_strided(rng):
    x = _rand(rng, 1, 2, 6, 6)
    w = _rand(rng, 3, 2, 3, 3)
    b = _rand(rng, 3)
    return gradcheck(lambda: T.reduce_sum(T.conv2d(x, w, b, 2, 0) ** 2.0), [x, w, b])


def check_batchnorm(rng):
    x = _rand(rng, 4, 2, 3, 3)
    bn = nn.BatchNorm2d(2)
    bn.gamma.data = rng.normal(1.0, 0.2, 2)
    bn.beta.data = rng.normal(0.0, 0.2, 2)
    bn.train()
    return gradcheck(lambda: T.reduce_sum(bn(x) ** 2.0), [x, bn.gamma, bn.beta])


def check_relu(rng):
    data = rng.normal(0.0, 1.0, (3, 4))
    data[np.abs(data) < 0.1] += 0.3  # keep away from the kink
    x = Tensor(data, requires_grad=True)
    return gradcheck(lambda: T.reduce_sum(T.relu(x) ** 2.0), [x])


def check_sigmoid(rng):
    x = _rand(rng, 3, 4)
    return gradcheck(lambda: T.reduce_sum(T.sigmoid(x) ** 2.0), [x])


def check_tanh(rng):
    x = _rand(rng, 3, 4)
    return gradcheck(lambda: T.reduce_sum(T.tanh(x) ** 2.0), [x])


def check_maxpool(rng):
    x = _rand(rng, 1, 2, 4, 4)
    return gradcheck(lambda: T.reduce_sum(T.pool2d(x, "max", 2) ** 2.0), [x])


def check_avgpool(rng):
    x = _rand(rng, 1, 2, 4, 4)
    return gradcheck(lambda: T.reduce_sum(T.pool2d(x, "avg", 2) ** 2.0), [x])


def check_upsample(rng):
    x = _rand(rng, 1, 2, 3, 3)
    w = Tensor(rng.normal(0.0, 1.0, (1, 2, 6, 6)))
    return gradcheck(lambda: T.reduce_sum(T.mul(T.upsample2x(x), w)), [x])


def check_linear(rng):
    lin = nn.Linear(5, 2, rng)
    lin.weight.data = rng.normal(0.0, 1.0, (2, 5))
    lin.bias.data = rng.normal(0.0, 1.0, 2)
    x = _rand(rng, 3, 5)
    return gradcheck(lambda: T.reduce_sum(lin(x) ** 2.0), [x, lin.weight, lin.bias])


def check_convlstm_step(rng):
    cell = ConvLSTMCell(1, 2, rng)
    for _, p in cell.named_parameters():
        p.data = rng.normal(0.0, 0.4, p.data.shape)
    x = _rand(rng, 1, 1, 4, 4)
    h0 = _rand(rng, 1, 2, 4, 4)
    c0 = _rand(rng, 1, 2, 4, 4)
    params = [p for _, p in cell.named_parameters()] + [x, h0, c0]

    def fn():
        h1, c1 = cell.step(x, h0, c0)
        return T.reduce_sum(h1 ** 2.0) + T.reduce_sum(c1 ** 2.0)

    return gradcheck(fn, params)


def check_dice_loss(rng):
    pred = Tensor(rng.uniform(0.05, 0.95, (1, 1, 4, 4)), requires_grad=True)
    target = Tensor((rng.uniform(size=(1, 1, 4, 4)) > 0.5).astype(float))
    return gradcheck(lambda: dice_loss(pred, target), [pred])


def check_bce(rng):
    y_hat = Tensor(rng.uniform(0.05, 0.95, 4), requires_grad=True)
    y = np.array([1.0, 0.0, 1.0, 0.0])
    return gradcheck(lambda: bce_loss(y_hat, y), [y_hat])


def check_focal(rng):
    y_hat = Tensor(rng.uniform(0.05, 0.95, 4), requires_grad=True)
    y = np.array([1.0, 0.0, 0.0, 1.0])
    return gradcheck(lambda: focal_loss(y_hat, y, 2.0), [y_hat])


def check_attention(rng):
    attn = AttentionHead(6, 4, 2, rng)
    feats = _rand(rng, 1, 5, 6)
    params = [p for _, p in attn.named_parameters()] + [feats]
    return gradcheck(
        lambda: T.reduce_sum(aggregate_features(feats, "self_attention", attn) ** 2.0), params
    )


def check_full_detector(rng):
    model = Detector(hidden=3, pool=4, instance_hw=16, rng=rng, aggregation="max",
                     instance_encoder="convlstm")
    instances = rng.uniform(0.0, 1.0, (1, 4, 1, 16, 16))
    y = np.array([1.0])
    params = [p for _, p in model.named_parameters()]
    return gradcheck(lambda: focal_loss(model(instances), y, 2.0), params)


CHECKS = [
    ("conv2d", check_conv2d),
    ("conv2d_strided", check_conv2d_strided),
    ("batchnorm2d", check_batchnorm),
    ("relu", check_relu),
    ("sigmoid", check_sigmoid),
    ("tanh", check_tanh),
    ("maxpool", check_maxpool),
    ("avgpool", check_avgpool),
    ("upsample2x", check_upsample),
    ("linear", check_linear),
    ("convlstm_step", check_convlstm_step),
    ("dice_loss", check_dice_loss),
    ("bce_loss", check_bce),
    ("focal_loss", check_focal),
    ("attention_aggregation", check_attention),
    ("full_detector", check_full_detector),
]


def run_all(seed=20240521):
    results = []
    start = time.monotonic()
    for name, check in CHECKS:
        rng = np.random.default_rng([seed, hash(name) % (2**31)])
        results.append((name, check(rng)))
    elapsed = time.monotonic() - start
    return results, elapsed


if __name__ == "__main__":
    results, elapsed = run_all()
    for name, err in results:
        print(f"{name:24s} max rel err {err:.3e}")
    print(f"total {elapsed:.1f}s")
