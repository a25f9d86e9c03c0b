# Reverse-mode autodiff on a tiny two-layer network, checked against
# central finite differences.

import numpy as np

from dpcpheno.tensorcore import Tensor, grad_check, parameter
from dpcpheno.tensorcore import functional as F

rng = np.random.default_rng(0)

# weights are leaf tensors that accumulate .grad
w1 = parameter(rng.normal(0, 0.5, (4, 8)))
w2 = parameter(rng.normal(0, 0.5, (8, 1)))
x = Tensor(rng.normal(0, 1, (16, 4)))
y = rng.normal(0, 1, (16, 1))

pred = F.gelu(x @ w1) @ w2
loss = F.mean((pred - Tensor(y)) ** 2)
loss.backward()
print("loss", loss.item())
print("grad norm w1", np.linalg.norm(w1.grad))

# rebuild in float64 and compare every weight block to central differences;
# the closure reads the weights at call time because grad_check perturbs them
v1 = parameter(rng.normal(0, 0.5, (4, 8)))
v2 = parameter(rng.normal(0, 0.5, (8, 1)))

def objective():
    return F.mean((F.gelu(x @ v1) @ v2 - Tensor(y)) ** 2)

res = grad_check(objective, {"w1": v1, "w2": v2})
print("max relative error", res.max_rel_error, "passed", res.passed)
