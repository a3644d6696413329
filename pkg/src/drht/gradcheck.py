"""Central finite-difference gradient checks."""

import numpy as np


def relative_error(analytic, numeric, floor=1e-6):
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero gradients from dominating."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_partial(loss_fn, array, index, h=1e-5):
    """d loss / d array[index] by central difference, perturbing ``array`` in place."""
    old = array[index]
    array[index] = old + h
    plus = float(loss_fn())
    array[index] = old - h
    minus = float(loss_fn())
    array[index] = old
    return (plus - minus) / (2 * h)


def sample_coordinates(tensors, count, rng):
    """Draw ``count`` (tensor_index, flat_index) pairs, spread over all tensors."""
    sizes = np.array([t.data.size for t in tensors])
    picks = []
    for k in range(count):
        ti = k % len(tensors) if k < len(tensors) else int(rng.choice(len(tensors), p=sizes / sizes.sum()))
        picks.append((ti, int(rng.integers(sizes[ti]))))
    return picks


def check_gradients(build_loss, tensors, count=100, h=1e-5, rng=None):
    """Compare backprop against central differences at ``count`` random coordinates.

    ``build_loss`` runs a fresh forward pass and returns a scalar Tensor.
    Returns the array of relative errors, one per coordinate.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    for t in tensors:
        t.grad = None
    build_loss().backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in tensors]

    def value():
        return build_loss().item()

    # Round-off in a central difference is about eps*|L|/h; gradients smaller
    # than 1e4 times that cannot be resolved to 1e-4 relative accuracy.
    floor = max(1e-6, 1e4 * np.finfo(np.float64).eps * abs(value()) / h)
    errors = []
    for ti, flat in sample_coordinates(tensors, count, rng):
        idx = np.unravel_index(flat, tensors[ti].shape)
        num = numeric_partial(value, tensors[ti].data, idx, h)
        errors.append(relative_error(analytic[ti][idx], num, floor))
    return np.array(errors)
