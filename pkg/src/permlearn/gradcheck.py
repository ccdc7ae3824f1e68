"""Central finite-difference checks for the analytic backward passes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TENSOR_NAMES, ModelParams, loss_and_grads

# gradients smaller than this are compared in absolute terms
REL_ERROR_FLOOR = 1e-5


def relative_error(analytic, numeric, floor: float = REL_ERROR_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(f, x: np.ndarray, h: float = 1e-5, coords=None) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x``; ``x`` is perturbed in place and restored."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size) if coords is None else coords:
        orig = flat[k]
        flat[k] = orig + h
        fp = f()
        flat[k] = orig - h
        fm = f()
        flat[k] = orig
        gflat[k] = (fp - fm) / (2 * h)
    return grad


@dataclass
class TensorReport:
    name: str
    max_rel_error: float
    worst_index: tuple
    analytic: float
    numeric: float


@dataclass
class GradcheckReport:
    tensors: list
    tolerance: float

    @property
    def max_rel_error(self) -> float:
        return max(t.max_rel_error for t in self.tensors)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self):
        for t in self.tensors:
            yield (
                f"{t.name},{t.max_rel_error:.6g},{'/'.join(map(str, t.worst_index))},"
                f"{t.analytic:.6g},{t.numeric:.6g}"
            )
        yield f"{'PASS' if self.passed else 'FAIL'} max_rel_error={self.max_rel_error:.6g} tol={self.tolerance:g}"


def check_model_gradients(
    params: ModelParams,
    x_shuffled,
    pis,
    sinkhorn_cfg,
    loss_kind: str = "sinkhorn_ce",
    weight_decay: float = 0.0,
    h: float = 1e-5,
    tolerance: float = 1e-4,
    inject_fault: bool = False,
) -> GradcheckReport:
    """Compare :func:`loss_and_grads` against finite differences on every parameter.

    ``inject_fault`` flips the sign of the analytic score-layer gradient, so a
    working checker must report failure.
    """
    params = params.copy()
    _, grads = loss_and_grads(params, x_shuffled, pis, sinkhorn_cfg, loss_kind, weight_decay)
    if inject_fault:
        grads["score.weight"] = -grads["score.weight"]

    def objective():
        return loss_and_grads(params, x_shuffled, pis, sinkhorn_cfg, loss_kind, weight_decay)[0]

    reports = []
    for name in TENSOR_NAMES:
        num = numeric_gradient(objective, params[name], h)
        err = relative_error(grads[name], num)
        k = np.unravel_index(int(np.argmax(err)), err.shape)
        reports.append(TensorReport(name, float(err[k]), tuple(int(i) for i in k), float(grads[name][k]), float(num[k])))
    return GradcheckReport(reports, tolerance)
