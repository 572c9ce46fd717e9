"""The reverse-mode autodiff core: tapes, parameters, and gradient checks.

Everything in the library is built on a small numpy tape with explicit
functional ops (no operator overloading).  This script fits a two-layer
network to a toy regression problem using the same Adam update the
parser trainer uses, then verifies gradients against central finite
differences.
"""

import numpy as np

from narparse import Parameter, Tape, Tensor, adam_step, grad_check
from narparse.tensor import add, linear, mul, relu, scale, sigmoid, tmean


def main():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(64, 3)).astype(np.float32)
    y = np.sin(x.sum(axis=1, keepdims=True)).astype(np.float32)

    w1 = Parameter("w1", rng.normal(scale=0.5, size=(3, 16)).astype(np.float32))
    b1 = Parameter("b1", np.zeros((16,), dtype=np.float32))
    w2 = Parameter("w2", rng.normal(scale=0.5, size=(16, 1)).astype(np.float32))
    params = [w1, b1, w2]

    def mse(xs, ys, ps):
        w1_, b1_, w2_ = ps
        hidden = relu(linear(Tensor(xs), w1_.tensor, b1_.tensor))
        pred = linear(hidden, w2_.tensor)
        diff = add(pred, scale(Tensor(ys), -1.0))
        return tmean(mul(diff, diff))

    print("fitting y = sin(x1 + x2 + x3) with a 3-16-1 relu net:")
    for step in range(401):
        with Tape() as tape:
            loss = mse(x, y, params)
        tape.backward(loss)
        for p in params:
            adam_step(p, lr=1e-2)
            p.zero_grad()
        if step % 100 == 0:
            print(f"  step {step:4d}  mse = {float(loss.data):.5f}")
    print()

    # the same machinery validates itself: analytic gradients vs central
    # differences in float64.  A sigmoid net is used here because finite
    # differences straddle relu kinks at a trained optimum; the library's
    # own test suite checks every op, relu included, at safe points.
    rng64 = np.random.default_rng(1)
    params64 = [
        Parameter("w1", rng64.normal(scale=0.5, size=(3, 16))),
        Parameter("b1", np.zeros(16)),
        Parameter("w2", rng64.normal(scale=0.5, size=(16, 1))),
    ]
    x64, y64 = x.astype(np.float64), y.astype(np.float64)

    def smooth_mse():
        w1_, b1_, w2_ = params64
        hidden = sigmoid(linear(Tensor(x64), w1_.tensor, b1_.tensor))
        pred = linear(hidden, w2_.tensor)
        diff = add(pred, scale(Tensor(y64), -1.0))
        return tmean(mul(diff, diff))

    report = grad_check(smooth_mse, params64, max_elements_per_param=8)
    print(report)


if __name__ == "__main__":
    main()
