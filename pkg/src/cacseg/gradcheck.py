"""Central finite-difference check of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import DetachLog, Tape, Tensor

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-5
REL_FLOOR = 1e-8


@dataclass
class ParamReport:
    name: str
    analytic: np.ndarray
    numeric: np.ndarray
    rel_err: np.ndarray
    untestable: list[tuple[int, ...]] = field(default_factory=list)

    @property
    def worst(self) -> tuple[tuple[int, ...], float]:
        if self.rel_err.size == 0:
            return (), 0.0
        flat = int(np.nanargmax(np.where(np.isnan(self.rel_err), -1.0, self.rel_err)))
        idx = np.unravel_index(flat, self.rel_err.shape)
        return tuple(int(i) for i in idx), float(self.rel_err.flat[flat])


@dataclass
class GradcheckReport:
    params: list[ParamReport]
    tolerance: float
    step: float

    @property
    def worst(self) -> tuple[str, tuple[int, ...], float]:
        best = ("", (), 0.0)
        for p in self.params:
            idx, err = p.worst
            if err >= best[2]:
                best = (p.name, idx, err)
        return best

    @property
    def passed(self) -> bool:
        return self.worst[2] < self.tolerance and not any(p.untestable for p in self.params)

    def format(self) -> str:
        lines = []
        for p in self.params:
            idx, err = p.worst
            lines.append(f"{p.name:<16} size {p.analytic.size:>5}  worst rel err {err:.3e} at {idx}"
                         + (f"  untestable {len(p.untestable)}" if p.untestable else ""))
        name, idx, err = self.worst
        verdict = "PASS" if self.passed else "FAIL"
        lines.append(f"{verdict}: worst {name}{list(idx)} rel err {err:.3e} (tolerance {self.tolerance:g}, step {self.step:g})")
        return "\n".join(lines)


def relative_error(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), REL_FLOOR)


def check(scalar_fn: Callable[..., Tensor], params: Sequence[np.ndarray], step: float = DEFAULT_STEP,
          tolerance: float = DEFAULT_TOL, names: Optional[Sequence[str]] = None) -> GradcheckReport:
    """Compare tape gradients of ``scalar_fn(*tensors)`` with central differences.

    Values leaving :func:`~cacseg.tensor.detach` are held at their base-point
    values during the perturbed evaluations. ``scalar_fn`` receives one :class:`Tensor` per entry of ``params`` and must
    return a scalar tensor. Coordinates whose perturbed evaluation is not finite
    are reported as untestable.
    """
    arrays = [np.array(p, dtype=np.float64) for p in params]
    names = list(names) if names is not None else [f"param{i}" for i in range(len(arrays))]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    frozen = DetachLog()
    with frozen.recording(), Tape() as tape:
        out = scalar_fn(*leaves)
    analytic = tape.gradient(out, leaves)

    def evaluate(i, idx, delta):
        shifted = [a if j != i else a.copy() for j, a in enumerate(arrays)]
        shifted[i][idx] += delta
        with frozen.replaying(), np.errstate(all="ignore"):
            return float(scalar_fn(*(Tensor(a) for a in shifted)).item())

    reports = []
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        bad = []
        for idx in np.ndindex(a.shape):
            hi, lo = evaluate(i, idx, step), evaluate(i, idx, -step)
            if not (np.isfinite(hi) and np.isfinite(lo)):
                bad.append(idx)
                numeric[idx] = np.nan
                continue
            numeric[idx] = (hi - lo) / (2 * step)
        err = relative_error(analytic[i], numeric)
        reports.append(ParamReport(names[i], analytic[i], numeric, err, bad))
    return GradcheckReport(reports, tolerance, step)


def _row_f_instance(seed: int):
    """12-pixel (3x4), 3-class, d=8 instance with every parameter group.

    Biases are drawn at random: at the zero-bias initialisation a projector
    row can have all hidden units dead, which puts an exactly-zero row into
    the normaliser's degenerate branch where the loss is discontinuous.
    """
    from .labels import IGNORE
    from .train import RunConfig, init_params

    rng = np.random.default_rng(seed)
    cfg = RunConfig(d=8, seed=seed)
    params, _ = init_params(cfg, d_in=4, n_classes=3)
    for k in params:
        if k.endswith((".b1", ".b2")):
            params[k] = rng.uniform(-0.5, 0.5, size=params[k].shape)
    x = rng.uniform(-2.0, 2.0, size=(12, 4))
    y = np.array([0, 0, 0, 1, 1, 1, 1, 2, 2, 0, 1, IGNORE])
    return cfg, params, x, y


def total_loss_check(seed: int = 0, step: float = DEFAULT_STEP, tolerance: float = DEFAULT_TOL) -> GradcheckReport:
    """Full objective (all four terms, class-wise entropy KL) over encoder, C and theta_p."""
    from .losses import total_loss
    from .train import model_forward

    cfg, params, x, y = _row_f_instance(seed)
    names = [k for k in params if not k.startswith("theta_y.")]

    def fn(*tensors):
        p = dict(params, **dict(zip(names, tensors)))
        out = model_forward(p, x, y, cfg)
        return total_loss(out.p, out.p_y, out.p_p, y, cfg.loss)

    return check(fn, [params[k] for k in names], step, tolerance, names)


def stop_gradient_check(seed: int = 0) -> dict[str, dict[str, np.ndarray]]:
    """Gradients of the distillation term and of ce_y with respect to theta_y."""
    from .losses import loss_terms
    from .train import model_forward

    cfg, params, x, y = _row_f_instance(seed)
    out = {}
    for term in ("kl", "ce_y"):
        leaves = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        with Tape() as tape:
            o = model_forward(leaves, x, y, cfg)
            value = loss_terms(o.p, o.p_y, o.p_p, y, cfg.loss)[term]
        names = [k for k in params if k.startswith("theta_y.")]
        grads = tape.gradient(value, [leaves[k] for k in names])
        out[term] = dict(zip(names, grads))
    return out


def op_checks(seed: int = 0) -> dict[str, GradcheckReport]:
    """One randomized check per differentiable tensor operation."""
    from . import tensor as T

    rng = np.random.default_rng(seed)

    def u(*shape):
        return rng.uniform(-2.0, 2.0, size=shape)

    def away_from_zero(*shape):
        v = u(*shape)
        return np.where(np.abs(v) < 1e-3, 0.5, v)

    w = u(4, 3)  # fixed readouts so each check reduces to a nontrivial scalar
    w5 = u(4, 5)

    def readout(t):
        return T.reduce_sum(T.mul(t, w))

    cases = {
        "matmul": (lambda a, b: readout(T.matmul(a, b)), [u(4, 5), u(5, 3)]),
        "matmul_batched": (lambda a, b: T.reduce_sum(T.mul(T.matmul(a, b), w)), [u(2, 4, 5), u(5, 3)]),
        "transpose": (lambda a: readout(T.transpose(a)), [u(3, 4)]),
        "add": (lambda a, b: readout(T.mul(T.add(a, b), T.add(a, b))), [u(4, 3), u(3)]),
        "sub": (lambda a, b: readout(T.mul(T.sub(a, b), a)), [u(4, 3), u(4, 1)]),
        "mul": (lambda a, b: readout(T.mul(a, b)), [u(4, 3), u(4, 3)]),
        "div": (lambda a, b: readout(T.div(a, b)), [u(4, 3), rng.uniform(0.5, 2.0, size=(4, 1))]),
        "scale": (lambda a: readout(T.mul(T.scale(a, 15.0), a)), [u(4, 3)]),
        "relu": (lambda a: readout(T.mul(T.relu(a), a)), [away_from_zero(4, 3)]),
        "softmax_rows": (lambda a: readout(T.softmax_rows(a)), [u(4, 3)]),
        "log_softmax_rows": (lambda a: readout(T.log_softmax_rows(a)), [u(4, 3)]),
        "l2_normalize_rows": (lambda a: readout(T.l2_normalize_rows(a)), [u(4, 3)]),
        "inv_row_norms": (lambda a: T.reduce_sum(T.mul(T.inv_row_norms(a), w[:, :1])), [u(4, 3)]),
        "concat_cols": (lambda a, b: T.reduce_sum(T.mul(T.concat_cols(a, b), w5)), [u(4, 2), u(4, 3)]),
        "reduce_sum": (lambda a: T.reduce_sum(T.mul(T.reduce_sum(a, axis=0), w[0])), [u(4, 3)]),
        "reduce_mean": (lambda a: T.reduce_sum(T.mul(T.reduce_mean(a, axis=1, keepdims=True), a)), [u(4, 3)]),
        "reshape": (lambda a: readout(T.reshape(a, (4, 3))), [u(2, 6)]),
        "detach": (lambda a: readout(T.add(a, T.mul(T.detach(a), a))), [u(4, 3)]),
    }
    return {name: check(fn, args) for name, (fn, args) in cases.items()}
