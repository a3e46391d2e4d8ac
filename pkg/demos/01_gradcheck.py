"""Checking reverse-mode gradients against central differences.

Build a small expression from the autodiff primitives, then let grad_check
perturb every input entry and compare.  Float64 agrees to well under 1e-6;
float32 rounding limits it to around 1e-4.
"""
import numpy as np

from triplex.tensor import Tensor, default_dtype, gelu, grad_check, layer_norm, softmax, tensor

rng = np.random.default_rng(0)


def f(params):
    x, w = params
    h = gelu(layer_norm(x @ w))
    return (softmax(h, axis=-1) * h).sum()


for dt in (np.float64, np.float32):
    with default_dtype(dt):
        # tensor() casts to the current default dtype; Tensor() keeps float64 input as is
        x = tensor(rng.normal(size=(5, 4)))
        w = tensor(rng.normal(size=(4, 6)))
        err = grad_check(f, [x, w])
        print(f"{x.dtype}: max relative error {err:.2e}")

# a gradient bug is caught at once: swap the true op for one with a wrong backward
with default_dtype(np.float64):
    x = Tensor(rng.normal(size=(3, 3)))

    def broken(t):
        # forward is x^2 but the recorded derivative is x, not 2x
        return Tensor._make(t.data ** 2, (t,), lambda g: (g * t.data,), "bad_square").sum()

    print(f"wrong backward: max relative error {grad_check(broken, x):.2e}")
