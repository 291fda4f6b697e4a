"""Central finite-difference verification of analytic gradients.

Runs only in 64-bit. The callable under test maps a parameter dict to
(scalar loss, gradient dict) and must be deterministic; parameters are
perturbed entry by entry (optionally a sampled subset for large tensors).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

REL_ERR_FLOOR = 1e-8


@dataclass
class GradCheckReport:
    per_param: dict  # name -> max relative error over checked entries
    tolerance: float

    @property
    def global_max(self) -> float:
        return max(self.per_param.values()) if self.per_param else 0.0

    @property
    def passed(self) -> bool:
        return self.global_max <= self.tolerance

    def lines(self) -> list:
        out = [f"{name}: max_rel_err={err:.3e}" for name, err in self.per_param.items()]
        verdict = "PASS" if self.passed else "FAIL"
        out.append(f"global max {self.global_max:.3e} vs tolerance {self.tolerance:.1e}: {verdict}")
        return out


def gradcheck(
    fn,
    params: dict,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
    loss_fn=None,
) -> GradCheckReport:
    """Compare fn's analytic gradients against central differences.

    ``max_entries`` caps the number of checked entries per parameter (a
    deterministic sample when given ``rng``); by default every entry is
    checked. ``loss_fn`` optionally provides a cheaper forward-only
    evaluation for the perturbed passes.
    """
    for name, p in params.items():
        if p.dtype != np.float64:
            raise ValueError(f"gradcheck requires float64 parameters; {name!r} is {p.dtype}")
    if loss_fn is None:
        loss_fn = lambda ps: fn(ps)[0]  # noqa: E731

    _, analytic = fn(params)
    per_param = {}
    for name, p in params.items():
        grad = np.asarray(analytic[name], dtype=np.float64)
        flat = p.reshape(-1)
        n = flat.size
        if max_entries is not None and n > max_entries:
            if rng is None:
                rng = np.random.default_rng(0)
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        else:
            idx = np.arange(n)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            loss_plus = loss_fn(params)
            flat[i] = orig - step
            loss_minus = loss_fn(params)
            flat[i] = orig
            numeric = (loss_plus - loss_minus) / (2.0 * step)
            a = grad.reshape(-1)[i]
            rel = abs(a - numeric) / max(abs(a), abs(numeric), REL_ERR_FLOOR)
            if rel > worst:
                worst = rel
        per_param[name] = worst
    return GradCheckReport(per_param, tolerance)
