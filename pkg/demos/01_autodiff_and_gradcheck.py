"""Tour of the autodiff engine: tensors, the tape, backward, gradcheck.

Run:  python3 demos/01_autodiff_and_gradcheck.py
"""

import numpy as np

from geoinfra.autodiff import (
    Tape, Tensor, backward, conv2d, gradcheck, relu, sigmoid, tsum,
)

# --- forward ops are plain numpy under the hood -----------------------------
x = Tensor([[1.0, -2.0], [3.0, -4.0]])
print("relu:", relu(x).data.tolist())
print("sigmoid(0) =", sigmoid(Tensor([0.0])).item())

# --- recording on a tape and differentiating --------------------------------
w = Tensor(np.array([0.5, -1.0, 2.0]), requires_grad=True, dtype=np.float64)
with Tape() as tape:
    loss = tsum(sigmoid(w))
backward(tape, loss)
print("d/dw sum(sigmoid(w)) =", w.grad, "(sigmoid' at each coordinate)")

# --- convolution against the obvious nested-loop computation ----------------
rng = np.random.default_rng(0)
img = rng.normal(size=(1, 2, 6, 6))
kernel = rng.normal(size=(3, 2, 3, 3))
out = conv2d(Tensor(img, dtype=np.float64), Tensor(kernel, dtype=np.float64),
             stride=2, padding=1)
print("conv2d output shape:", out.shape)

reference = np.zeros(out.shape)
padded = np.pad(img, ((0, 0), (0, 0), (1, 1), (1, 1)))
for f in range(3):
    for i in range(out.shape[2]):
        for j in range(out.shape[3]):
            window = padded[0, :, i * 2:i * 2 + 3, j * 2:j * 2 + 3]
            reference[0, f, i, j] = (window * kernel[f]).sum()
print("max |conv - nested loops| =", float(np.abs(out.data - reference).max()))

# --- gradcheck: analytic backward vs central finite differences -------------
point = Tensor(rng.normal(size=(2, 2, 5, 5)), dtype=np.float64)
k = Tensor(rng.normal(size=(4, 2, 3, 3)), dtype=np.float64)
err = gradcheck(lambda t: tsum(sigmoid(conv2d(t, k, padding=1))), point)
print(f"conv2d gradcheck max relative error: {err:.2e}")

# a deliberately broken gradient is caught immediately
from geoinfra.autodiff import emit

def wrong_square(t):
    return tsum(emit("bad", (t,), t.data ** 2, lambda g: (4.0 * t.data * g,)))

print(f"planted 2x-off backward reports error ~0.5: "
      f"{gradcheck(wrong_square, Tensor([1.0, 2.0], dtype=np.float64)):.3f}")
