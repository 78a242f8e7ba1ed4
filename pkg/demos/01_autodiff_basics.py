#!/usr/bin/env python3
"""A tour of the reverse-mode tape: build a loss, pull gradients, verify.

Everything in the trainer runs on this little engine — dense float64
matrices, one backward sweep in reverse topological order, and a
finite-difference cross-check for honesty.  Runs in about a second.
"""

import numpy as np

from retrack import autodiff as ad


def main() -> None:
    rng = np.random.default_rng(7)

    # Leaves are wrapped numpy arrays; everything downstream remembers
    # how it was made.
    x = ad.tensor(rng.standard_normal((4, 3)))
    w = ad.tensor(rng.standard_normal((3, 3)) * 0.5)
    gain = ad.tensor(np.ones((1, 3)))
    bias = ad.tensor(np.zeros((1, 3)))

    print("x:", x.shape, " w:", w.shape)

    # A miniature encoder: affine map, layer norm, row-normalize, then a
    # softmax cross-entropy against class 2 of the pooled logits.
    h = ad.matmul(x, w)
    h = ad.layer_norm(h, gain, bias)
    h = ad.rowwise_l2_normalize(h, eps=1e-8)
    logits = ad.col_mean(h)                     # (1, 3) pooled
    loss = ad.softmax_cross_entropy_row(ad.scale(logits, 10.0), target=2)
    print("loss:", loss.item())

    # One call gives every parameter's gradient.
    params = {"w": w, "gain": gain, "bias": bias}
    g = ad.grads(loss, params)
    for name, grad in g.items():
        print(f"d loss / d {name}: shape {grad.shape}, |g|_max = {np.abs(grad).max():.6f}")

    # The tape is only trustworthy because we can always ask an
    # independent referee: central finite differences.
    def rebuild() -> ad.Tensor:
        h2 = ad.rowwise_l2_normalize(ad.layer_norm(ad.matmul(x, w), gain, bias), eps=1e-8)
        return ad.softmax_cross_entropy_row(ad.scale(ad.col_mean(h2), 10.0), target=2)

    err = ad.gradcheck(rebuild, params, h=1e-5)
    print(f"max relative error vs central differences: {err:.3e}")
    assert err < 1e-6

    # Non-finite values are rejected at the door rather than propagated.
    try:
        ad.tensor(np.array([[1.0, np.inf]]))
    except ad.NonFiniteError as e:
        print("non-finite leaf rejected:", e)


if __name__ == "__main__":
    main()
