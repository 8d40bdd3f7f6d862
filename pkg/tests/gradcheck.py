"""Central finite-difference gradient checking used across the test suite.

Kept independent of the autodiff implementation: it only calls the
function under test forward at perturbed inputs.
"""

import numpy as np

from protoadapt.tensor import Tensor


def numerical_grad(f, arrays, wrt, eps=1e-6):
    """Central-difference gradient of scalar f(*arrays) w.r.t. arrays[wrt]."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    g = np.zeros_like(base[wrt])
    flat = base[wrt].reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(*base)
        flat[i] = orig - eps
        fm = f(*base)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_grads(op, arrays, grad_indices, rtol=1e-5, atol=1e-7, eps=1e-6):
    """Compare autodiff grads of sum(op(*arrays)) against finite differences."""
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=(i in grad_indices))
               for i, a in enumerate(arrays)]
    out = op(*tensors)
    out.sum().backward()

    def scalar(*arrs):
        return float(op(*[Tensor(a) for a in arrs]).sum().numpy())

    for i in grad_indices:
        num = numerical_grad(scalar, arrays, i, eps=eps)
        ana = tensors[i].grad
        np.testing.assert_allclose(ana, num, rtol=rtol, atol=atol)
