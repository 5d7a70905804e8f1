"""Central finite-difference gradient oracle, independent of the tape.

The oracle only re-runs a caller-supplied forward function with perturbed
parameter entries; it never inspects recorded ops.
"""

import numpy as np

from auxnas.autodiff import Tape


def numeric_grad_entries(f, tensor, entries, h=1e-6):
    """Central differences d f / d tensor.values[entry] for chosen flat entries.

    f() must recompute the scalar loss value (a float) from current
    tensor values.
    """
    flat = tensor.values.reshape(-1)
    out = np.empty(len(entries), dtype=np.float64)
    for j, e in enumerate(entries):
        orig = flat[e]
        flat[e] = orig + h
        fp = f()
        flat[e] = orig - h
        fm = f()
        flat[e] = orig
        out[j] = (fp - fm) / (2 * h)
    return out


def check_grads(build_loss, params, rtol=1e-6, atol=1e-9, h=1e-6, max_entries=None, rng=None):
    """Compare tape gradients of a scalar loss against the FD oracle.

    build_loss() runs the forward and returns the loss Tensor; params is
    a list of leaf tensors (f64) to check. When max_entries is set, a
    seeded random subset of entries per tensor is checked instead of all.
    Returns the worst relative error observed.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)

    def f():
        return float(build_loss().values)

    worst = 0.0
    for p in params:
        assert p.grad is not None, "parameter did not receive a gradient"
        n = p.values.size
        if max_entries is not None and n > max_entries:
            assert rng is not None
            entries = rng.choice(n, size=max_entries, replace=False)
        else:
            entries = np.arange(n)
        num = numeric_grad_entries(f, p, entries, h=h)
        ana = p.grad.reshape(-1)[entries]
        err = np.abs(ana - num)
        mag = np.maximum(np.abs(ana), np.abs(num))
        bound = atol + rtol * mag
        # relative error is only resolvable where the gradient magnitude sits
        # well above the FD roundoff floor (~1e-10 at h=1e-6, f64); smaller
        # entries (dead ReLU units etc.) are held to the absolute tolerance
        sig = mag > 1e-4
        if sig.any():
            worst = max(worst, float((err[sig] / mag[sig]).max()))
        assert (err <= bound).all(), (
            f"gradient mismatch: max abs err {err.max():.3e}, "
            f"max rel err {(err / np.maximum(mag, 1e-12)).max():.3e}"
        )
    return worst
