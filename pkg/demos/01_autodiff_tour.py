"""A short walk through the tensor library: build a graph, backprop, compare with finite differences."""

import numpy as np

from tomformer import tensor as T
from tomformer.tensor import Tensor, finite_diff_check

rng = np.random.default_rng(0)

# leaves that want gradients
x = Tensor(rng.normal(size=(4, 6)), requires_grad=True)
w = Tensor(rng.normal(size=(6, 3)), requires_grad=True)
b = Tensor(np.zeros(3), requires_grad=True)

# a tiny classifier: affine map, log-softmax, pick one entry per row
logits = x @ w + b                      # trailing-axis bias broadcasts over rows
logp = T.log_softmax(logits, axis=-1)
labels = np.array([0, 2, 1, 1])
loss = -(logp * Tensor(np.eye(3)[labels])).sum() * (1 / 4)
print("loss", loss.item())

loss.backward()
print("dL/db", b.grad)                  # mean of (softmax - onehot) per class
p = np.exp(logp.data)
print("by hand", (p - np.eye(3)[labels]).mean(axis=0))

# same gradient, checked numerically with central differences
err = finite_diff_check(lambda v: -(T.log_softmax(Tensor(x.data) @ v, axis=-1) * Tensor(np.eye(3)[labels])).sum(),
                        w.data)
print("max relative error, weights:", err)

# images: 2 channels, 6x6, and a strided conv followed by max pooling
img = Tensor(rng.normal(size=(2, 6, 6)), requires_grad=True)
ker = Tensor(rng.normal(size=(4, 2, 3, 3)), requires_grad=True)
feat = T.maxpool2d(T.relu(T.conv2d(img, ker, stride=1, padding=1)), 2, 2)
print("feature map", feat.shape)        # (4, 3, 3)
feat.sum().backward()
print("input grad norm", np.linalg.norm(img.grad))

# layer norm keeps rows at zero mean, unit variance (before gamma/beta)
y = T.layer_norm(Tensor(rng.normal(3.0, 5.0, size=(2, 8))), Tensor(np.ones(8)), Tensor(np.zeros(8)))
print("row means", y.data.mean(axis=1).round(12), "row vars", y.data.var(axis=1).round(4))
