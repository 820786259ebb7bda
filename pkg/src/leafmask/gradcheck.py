"""Central finite-difference gradient checking.

The numeric derivative uses the fourth-order central stencil
``(-f(x+2h) + 8f(x+h) - 8f(x-h) + f(x-2h)) / 12h``: at h = 1e-3 the plain
two-point stencil's O(h^2) truncation error alone can exceed 1e-4 relative on
sigmoid-gated modules.

A check target is a function ``f(arrays, grad=True) -> (loss, grads, cache)``
over a dict of float64 arrays; ``grads`` may be None when ``grad`` is False. Every element of every array is perturbed by +-h. For
piecewise-smooth functions (ReLU, max-pool) a perturbation whose stencil
changes a branch decision is not a valid finite-difference probe; such
elements are reported as ``skipped`` rather than compared.
"""

from dataclasses import dataclass, field

import numpy as np

from .tensor import decision_signature

STEP = 1e-3
TOLERANCE = 1e-4
DENOM_FLOOR = 1e-8


@dataclass
class GradReport:
    name: str
    max_rel_error: float = 0.0
    worst: str = ""
    checked: int = 0
    skipped: int = 0
    per_array: dict = field(default_factory=dict)

    def passed(self, tol=TOLERANCE, max_skip_fraction=0.1):
        total = self.checked + self.skipped
        return (self.checked > 0 and self.max_rel_error < tol
                and self.skipped <= max_skip_fraction * total)

    def line(self, tol=TOLERANCE):
        status = "PASS" if self.passed(tol) else "FAIL"
        return (f"{status} {self.name}: max rel err {self.max_rel_error:.2e} "
                f"({self.checked} checked, {self.skipped} skipped, worst {self.worst})")


def relative_error(analytic, numeric, floor=DENOM_FLOOR):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_gradients(f, arrays, name="check", h=STEP, only=None):
    """Compare analytic gradients of ``f`` with central differences.

    ``only`` optionally restricts which array names are perturbed.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in arrays.items()}
    _, grads, cache = f(arrays)
    base_sig = decision_signature(cache)
    report = GradReport(name)
    for key, arr in arrays.items():
        if only is not None and key not in only:
            continue
        analytic = np.asarray(grads.get(key, np.zeros_like(arr)), dtype=np.float64)
        if analytic.shape != arr.shape:
            raise ValueError(f"{name}: gradient for {key} has shape {analytic.shape}, expected {arr.shape}")
        worst_here = 0.0
        for idx in np.ndindex(arr.shape):
            orig = arr[idx]
            values = {}
            same_piece = True
            for step in (-2, -1, 1, 2):
                arr[idx] = orig + step * h
                values[step], _, c = f(arrays, False)
                same_piece = same_piece and decision_signature(c) == base_sig
            arr[idx] = orig
            if not same_piece:
                report.skipped += 1
                continue
            numeric = (-values[2] + 8 * values[1] - 8 * values[-1] + values[-2]) / (12 * h)
            err = float(relative_error(analytic[idx], numeric))
            report.checked += 1
            worst_here = max(worst_here, err)
            if err > report.max_rel_error:
                report.max_rel_error = err
                report.worst = f"{key}{list(idx)}"
        report.per_array[key] = worst_here
    return report
