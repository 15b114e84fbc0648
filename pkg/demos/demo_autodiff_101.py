"""
Reverse-mode autodiff in a few lines
====================================

Build a small expression, call ``backward`` and compare with finite differences.
"""

import numpy as np

from con2em.autodiff import Adam, Tensor, softmax_cross_entropy, one_hot

# a tracked leaf and a plain constant
x = Tensor([[0.5, -1.0, 2.0]], requires_grad=True)
w = np.array([[1.0], [2.0], [-0.5]])

y = ((x * x).exp() @ w).sum()
y.backward()
print("f(x)      =", y.item())
print("autodiff  =", x.grad.ravel())

# central differences agree to roughly 1e-9
h = 1e-6
fd = []
for i in range(3):
    e = np.zeros((1, 3))
    e[0, i] = h
    f = lambda v: float((np.exp(v * v) @ w).sum())
    fd.append((f(x.data + e) - f(x.data - e)) / (2 * h))
print("finite    =", np.array(fd))

# Adam on a softmax regression
rng = np.random.default_rng(0)
X = rng.normal(size=(200, 2))
labels = (X[:, 0] + X[:, 1] > 0).astype(int)
W = Tensor(np.zeros((2, 2)), requires_grad=True)
opt = Adam([W], lr=0.1)
for step in range(100):
    opt.zero_grad()
    loss = softmax_cross_entropy(Tensor(X) @ W, one_hot(labels, 2))
    loss.backward()
    opt.step()
print(f"softmax regression loss after 100 Adam steps: {loss.item():.4f}")
