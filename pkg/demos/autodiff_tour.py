# A short tour of the tape-based autodiff used by every model in the package.

import numpy as np

from mlsn.autodiff import Graph, ParamSet, Tensor, grad_check

# Parameters live in Tensors. Graph nodes wrap values computed from them.
rng = np.random.default_rng(0)
W = Tensor(rng.normal(size=(3, 4)))
b = Tensor(np.zeros(3))
x = rng.normal(size=(5, 4))

g = Graph()
h = g.relu(g.affine(g.input(x), g.param(W), g.param(b)))
p = g.softmax_rows(h)
loss = g.reduce_mean(g.product(p, p))
print("loss", loss.item())

# One backward pass fills W.grad and b.grad.
g.backward(loss)
print("dW row norms", np.linalg.norm(W.grad, axis=1))


# Central differences agree with the tape to about 1e-9.
def build(graph):
    h = graph.relu(graph.affine(graph.input(x), graph.param(W), graph.param(b)))
    p = graph.softmax_rows(h)
    return graph.reduce_mean(graph.product(p, p))


print("max relative error", grad_check(build, ParamSet({"W": W, "b": b}), 1e-6))
