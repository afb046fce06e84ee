"""Build small graphs on the numpy tape and compare gradients with finite differences."""
import numpy as np

from imcap import autodiff as ad

rng = np.random.default_rng(0)

# d/dx sum(tanh(x @ w)) by hand and by the tape
x = ad.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
w = ad.Tensor(rng.standard_normal((4, 2)))
y = ad.sum_all(ad.tanh(ad.matmul(x, w)))
ad.backward(y)
by_hand = (1 - np.tanh(x.data @ w.data) ** 2) @ w.data.T
print("max |tape - hand| =", np.abs(x.grad - by_hand).max())

# central differences on a layer-norm + softmax pipeline
gain = ad.Tensor(np.ones(5))
bias = ad.Tensor(np.zeros(5))


def f(t):
    return ad.sum_all(ad.mul(ad.softmax(ad.layer_norm(t, gain, bias)), ad.Tensor(np.arange(5.0))))


rep = ad.grad_check(f, ad.Tensor(rng.standard_normal((2, 5))))
print(f"layer_norm/softmax grad check: max rel err {rep.max_rel_error:.2e} passed={rep.passed}")

# cross entropy ignores padded targets
logits = ad.Tensor(rng.standard_normal((1, 4, 6)), requires_grad=True)
targets = np.array([[3, 5, 0, 0]])
ad.backward(ad.cross_entropy_loss(logits, targets))
print("grad rows at pad positions are zero:", np.all(logits.grad[0, 2:] == 0))

with ad.no_grad():
    ad.relu(ad.Tensor(np.ones(3), requires_grad=True))
print("tape entries recorded under no_grad:", ad.tape_length())
