"""A first look at the reverse-mode tensor engine.

Builds a two-layer scoring function, runs one backward pass, and compares a
few analytic derivatives against central finite differences.
"""

import numpy as np

from moce import autodiff as ad
from moce.autodiff import Tensor


def loss_value(w1: Tensor, b1: Tensor, w2: Tensor, x: Tensor) -> Tensor:
    hidden = ad.tanh(ad.add(ad.matmul(x, w1), b1))
    score = ad.matmul(hidden, w2)
    return ad.reduce_sum(ad.mul(score, score))


def main() -> None:
    rng = np.random.default_rng(0)
    w1 = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b1 = Tensor(np.zeros(4), requires_grad=True)
    w2 = Tensor(rng.normal(size=(4, 1)), requires_grad=True)
    x = Tensor(rng.normal(size=(5, 3)))

    tape = ad.Tape()
    with tape:
        loss = loss_value(w1, b1, w2, x)
    grads = tape.backward(loss)
    print(f"loss = {float(loss.data):.6f}")
    print(f"gradient tensors: {sorted(len(grads[t].reshape(-1)) for t in grads)}")

    print()
    print("-- analytic vs central difference --")
    eps = 1e-6
    for name, tensor in (("w1", w1), ("b1", b1), ("w2", w2)):
        flat_index = int(rng.integers(tensor.data.size))
        original = tensor.data.reshape(-1)[flat_index]
        tensor.data.reshape(-1)[flat_index] = original + eps
        up = float(loss_value(w1, b1, w2, x).data)
        tensor.data.reshape(-1)[flat_index] = original - eps
        down = float(loss_value(w1, b1, w2, x).data)
        tensor.data.reshape(-1)[flat_index] = original
        fd = (up - down) / (2 * eps)
        analytic = grads[tensor].reshape(-1)[flat_index]
        print(f"{name}[{flat_index}]: analytic {analytic:+.8f}  "
              f"numeric {fd:+.8f}  |diff| {abs(analytic - fd):.2e}")


if __name__ == "__main__":
    main()
