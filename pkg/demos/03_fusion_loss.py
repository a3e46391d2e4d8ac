"""The fusion loss on a hand-sized example.

Each single-resolution head is pulled towards the truth and towards the
fused prediction; the fused head itself only sees the truth.
"""
import numpy as np

from triplex.fusion import fusion_loss
from triplex.tensor import Tensor, default_dtype

with default_dtype(np.float64):
    y = np.array([[0.0, 0.0]])
    q_f = Tensor(np.array([[1.0, 1.0]]), requires_grad=True)
    q_ta = Tensor(np.array([[1.0, 0.0]]), requires_grad=True)
    q_ne = Tensor(np.array([[0.0, 0.0]]), requires_grad=True)
    q_gl = Tensor(np.array([[0.5, 0.5]]), requires_grad=True)

    for alpha in (0.0, 0.5, 1.0):
        parts = fusion_loss(q_ta, q_ne, q_gl, q_f, y, alpha).as_floats()
        print(f"alpha={alpha}: " + "  ".join(f"{k}={v:.3f}" for k, v in parts.items()))

    # the soft target is detached: L_F alone moves q_f
    loss = fusion_loss(q_ta, q_ne, q_gl, q_f, y, 0.5)
    loss.total.backward()
    print("d total / d q_f =", q_f.grad, "(= d L_F / d q_f = 2 q_f / 2)")
