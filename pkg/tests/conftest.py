"""Shared test helpers: the finite-difference gradient oracle."""
import numpy as np

from beamweaver import autodiff as ad
from beamweaver.autodiff import Tape


def loss_value(loss_fn, values):
    """Evaluate a loss function on plain constants, returning a real float."""
    out = loss_fn(*[ad.constant(v) for v in values])
    return float(np.real(out.value.reshape(())))


def fd_gradients(loss_fn, values, eps=1e-5):
    """Central-difference gradients in the stored convention.

    For each complex entry z = x + i*y the oracle returns
    0.5 * (dL/dx + i * dL/dy), matching the conjugate-Wirtinger gradient
    produced by ``backward``.
    """
    grads = []
    for i, v in enumerate(values):
        g = np.zeros(v.shape, dtype=np.complex128)
        flat = g.reshape(-1)
        base = [np.array(w, dtype=np.complex128) for w in values]
        for idx in range(v.size):
            for direction in (1.0, 1.0j):
                pert = base[i].reshape(-1)
                keep = pert[idx]
                pert[idx] = keep + eps * direction
                up = loss_value(loss_fn, base)
                pert[idx] = keep - eps * direction
                dn = loss_value(loss_fn, base)
                pert[idx] = keep
                flat[idx] += 0.5 * direction * (up - dn) / (2.0 * eps)
        grads.append(g)
    return grads


def analytic_gradients(loss_fn, values):
    """Gradients from a single backward pass over tape parameters."""
    tape = Tape()
    params = [tape.parameter(f"p{i}", v) for i, v in enumerate(values)]
    loss = loss_fn(*params)
    ad.backward(loss)
    return [tape.parameters[f"p{i}"].grad if tape.parameters[f"p{i}"].grad is not None
            else np.zeros(v.shape, dtype=np.complex128)
            for i, v in enumerate(values)]


def assert_grads_match(loss_fn, values, rtol=1e-4, eps=1e-5):
    got = analytic_gradients(loss_fn, values)
    want = fd_gradients(loss_fn, values, eps=eps)
    for g, w in zip(got, want):
        denom = max(np.linalg.norm(w), np.linalg.norm(g), 1e-8)
        err = np.linalg.norm(g - w) / denom
        assert err < rtol, f"gradient mismatch: rel err {err:.3e}\n got={g}\nwant={w}"


def random_complex(rng, shape, scale=1.0):
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
