"""
Reverse-mode gradients with diffkit
===================================

Build a small graph, pull gradients back through it, and compare them to
central finite differences.
"""

import numpy as np

from mtsattack.diffkit import Graph

rng = np.random.default_rng(0)
W = rng.normal(size=(3, 3))
x0 = rng.normal(size=3)

# f(x) = sum(tanh(W x)); leaves are named so gradients come back by name
g = Graph()
x = g.leaf("x", x0)
y = (g.const(W) @ x.reshape(3, 1)).tanh().sum()
grad = g.backward(y)["x"]
print("f(x)      =", float(y.value))
print("autodiff  =", grad)

# the same derivative by finite differences
h = 1e-6
num = np.array([(np.tanh(W @ (x0 + h * e)).sum() - np.tanh(W @ (x0 - h * e)).sum()) / (2 * h)
                for e in np.eye(3)])
print("numerical =", num)
print("max abs gap:", np.max(np.abs(grad - num)))
