"""
The autodiff tape
=================

Every primitive records a vector-Jacobian product on the active tape.
``backward`` walks the records in reverse; ``grad_check`` compares the result
with central differences.
"""

import numpy as np

from graphdepth import tensorcore as tc
from graphdepth.errors import NumericError
from graphdepth.tensorcore import Tape, Tensor, backward, grad_check_report

x = Tensor(np.array(3.0), requires_grad=True)
with Tape() as tape:
    y = tc.mul(x, x)
print("d(x^2)/dx at 3:", backward(tape, y)[x])

# A small conv + relu + upsample chain, checked element by element.
rng = np.random.default_rng(1)
img = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
kernel = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
bias = Tensor(np.zeros(3), requires_grad=True)


def chain(a, k, b):
    h = tc.upsample2x(tc.relu(tc.conv2d(a, k, b, padding=1)))
    return tc.sum_over(tc.mul(h, h))


report = grad_check_report(chain, [img, kernel, bias])
print(f"max relative error {report.max_rel_error:.2e} over {report.checked} elements "
      f"({report.excluded} excluded at relu kinks)")

# Non-finite values fail loudly at the op that produced them.
try:
    tc.exp(Tensor(np.array([1000.0])))
except NumericError as exc:
    print("caught:", exc)
