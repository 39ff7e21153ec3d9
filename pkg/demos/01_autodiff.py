"""A tour of the reverse-mode autodiff core.

Builds a few small computations on the tape, runs backward, and checks one
gradient against central finite differences by hand.
"""

import numpy as np

from sala import autodiff as ad
from sala.autodiff import Tensor

# --- scalars and elementwise ops -------------------------------------------
x = Tensor([3.0], requires_grad=True, name="x")
with ad.Tape():
    loss = ad.sum_all(ad.mul(x, x))          # loss = x^2
    ad.backward(loss)
print(f"d(x^2)/dx at x=3: {x.grad[0]}   (expected 6)")

# --- a dense layer with matmul ----------------------------------------------
rng = np.random.default_rng(0)
w = Tensor(rng.normal(size=(4, 2)), requires_grad=True, name="w")
b = Tensor(np.zeros(2), requires_grad=True, name="b")
inputs = Tensor(rng.normal(size=(8, 4)))

def forward():
    return ad.sum_all(ad.relu(ad.add_rowvec(ad.matmul(inputs, w), b)))

with ad.Tape():
    out = forward()
    ad.backward(out)

# verify one weight gradient with central differences
h = 1e-5
orig = w.data[1, 1]
w.data[1, 1] = orig + h
f_plus = forward().item()
w.data[1, 1] = orig - h
f_minus = forward().item()
w.data[1, 1] = orig
numeric = (f_plus - f_minus) / (2 * h)
print(f"analytic dL/dw[1,1] = {w.grad[1, 1]:.10f}")
print(f"numeric  dL/dw[1,1] = {numeric:.10f}")

# --- convolution with an identity kernel ------------------------------------
img = Tensor(rng.normal(size=(1, 1, 6, 6)))
kernel = np.zeros((1, 1, 3, 3))
kernel[0, 0, 1, 1] = 1.0                      # delta at the center
same = ad.conv2d(img, Tensor(kernel), Tensor(np.zeros(1)))
print(f"identity-kernel conv preserves input: {np.array_equal(same.data, img.data)}")

# --- one backward pass per tape ---------------------------------------------
with ad.Tape():
    loss = ad.sum_all(ad.mul(x, x))
    ad.backward(loss)
    try:
        ad.backward(loss)
    except RuntimeError as err:
        print(f"second backward correctly rejected: {err}")
