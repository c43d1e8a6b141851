"""Central-difference verification oracle for backward passes."""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, OracleInvalidError
from .tensor import Tensor, backward


def grad_check(f, params, eps=1e-5, floor=1e-8) -> float:
    """Worst relative error between backward gradients and central differences.

    `f` must be a zero-argument callable returning a scalar-loss Tensor and
    must be deterministic for fixed parameter values; determinism is verified
    by evaluating twice and comparing bit-for-bit.  Each element of each
    parameter is perturbed by +/- eps and the finite-difference estimate is
    compared against the recorded gradient with an absolute floor in the
    denominator.
    """
    if eps <= 0:
        raise ContractError("grad_check requires eps > 0")
    params = list(params)
    for p in params:
        if not isinstance(p, Tensor) or not p.requires_grad:
            raise ContractError("grad_check params must be trainable tensors")

    first = f().data.copy()
    second = f().data.copy()
    if first.tobytes() != second.tobytes():
        raise OracleInvalidError("function is not deterministic across evaluations")

    for p in params:
        p.zero_grad()
    backward(f())
    analytic = []
    for p in params:
        if p.grad is None:
            analytic.append(np.zeros_like(p.data))
        else:
            analytic.append(p.grad.copy())

    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data.reshape(()))
            flat[i] = orig - eps
            down = float(f().data.reshape(()))
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            denom = max(abs(float(aflat[i])), abs(numeric), floor)
            rel = abs(float(aflat[i]) - numeric) / denom
            worst = max(worst, rel)
    return worst
