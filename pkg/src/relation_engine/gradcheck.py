"""Finite-difference verification of tape gradients.

`grad_check` compares the adjoint-computed gradient of a scalar function
with central differences, coordinate by coordinate, and reports the max
relative error per input:

    err = |g_ad - g_fd| / max(|g_ad|, |g_fd|, floor)

`run_suite` checks every differentiable op plus the composite pipelines
(encoder layer, mask attention, end-to-end model) and is what the
`gradcheck` command runs. Passing `inject_bug=<op>` swaps in a fixture with
a deliberately wrong adjoint so the failure path can be exercised.

Usage:
    with precision(np.float64):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        report = grad_check(lambda t: ops.sum(ops.mul(t, t)), [x])
    assert report.passed
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf

from relation_engine import ops
from relation_engine.errors import GradientError
from relation_engine.tensor import Tensor, Tape, backward, no_grad, precision, record_op

logger = logging.getLogger("relation_engine.gradcheck")

DEFAULT_TOLERANCE = 1e-4
DEFAULT_STEP = 1e-5
OP_FLOOR = 1e-8
COMPOSITE_FLOOR = 1e-6


@dataclass
class GradCheckReport:
    """Outcome of one gradient check."""
    name: str
    errors: dict[str, float]
    tolerance: float
    coordinates: int = 0
    kinks: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    @property
    def failing_inputs(self) -> list[str]:
        return [k for k, v in self.errors.items() if v > self.tolerance]

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "max_rel_error": self.max_error,
            "passed": self.passed,
            "coordinates": self.coordinates,
            "kinks": self.kinks,
            "errors": dict(self.errors),
        }


def _scalar(out: Tensor) -> float:
    if out.size != 1:
        raise GradientError(f"grad_check needs a scalar function, got shape {out.shape}")
    value = float(out.data.reshape(-1)[0])
    if not np.isfinite(value):
        raise GradientError(f"grad_check: function output is not finite ({value})")
    return value


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = DEFAULT_TOLERANCE,
    h: float = DEFAULT_STEP,
    floor: float = OP_FLOOR,
    max_coords: Optional[int] = None,
    seed: int = 0,
    names: Optional[Sequence[str]] = None,
    name: str = "f",
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Check the tape gradient of scalar `f(*inputs)` against central differences.

    Args:
        f: Function of the input tensors returning a scalar tensor.
        inputs: 64-bit tensors; they are perturbed in place and restored.
        max_coords: Check at most this many seeded-random coordinates per input.
        skip_kinks: Skip coordinates where the one-sided differences disagree
            by more than the central estimate misses, i.e. the step crossed a
            ReLU or min/max switch. Used for composite pipelines.

    Raises:
        GradientError: Non-64-bit input, non-scalar or non-finite output.
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise GradientError(f"grad_check needs float64 inputs, got {t.dtype}")
        t.data = np.ascontiguousarray(t.data)
        t.requires_grad = True
        t.grad = None
    labels = list(names) if names is not None else [f"input{i}" for i in range(len(inputs))]

    with Tape():
        out = f(*inputs)
    base = _scalar(out)
    backward(out)
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]

    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    checked = 0
    kinks = 0

    with no_grad():
        for label, t, g_ad in zip(labels, inputs, analytic):
            flat = t.data.reshape(-1)
            g_flat = g_ad.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            worst = 0.0
            for c in coords:
                orig = flat[c]
                flat[c] = orig + h
                f_plus = _scalar(f(*inputs))
                flat[c] = orig - h
                f_minus = _scalar(f(*inputs))
                flat[c] = orig
                g_fd = (f_plus - f_minus) / (2.0 * h)
                ga = float(g_flat[c])
                err = abs(ga - g_fd) / max(abs(ga), abs(g_fd), floor)
                if skip_kinks and err > tolerance:
                    one_sided_gap = abs((f_plus - base) / h - (base - f_minus) / h)
                    if one_sided_gap > abs(ga - g_fd):
                        kinks += 1
                        continue
                worst = max(worst, err)
                checked += 1
            errors[label] = worst
            t.grad = None

    report = GradCheckReport(name, errors, tolerance, coordinates=checked, kinks=kinks)
    logger.debug("grad_check %s: max rel error %.3e over %d coords (%d kinks skipped)",
                 name, report.max_error, checked, kinks)
    return report


# ----------------------------------------------------------------------
# Negative-control fixtures: ops with a deliberately wrong adjoint
# ----------------------------------------------------------------------

def _faulty_gelu(x: Tensor) -> Tensor:
    good = ops.gelu(x.detach())
    phi = 0.5 * (1.0 + erf(x.data / np.sqrt(2.0)))
    # drops the x * pdf term
    return record_op("gelu", (x,), Tensor(good.data, dtype=x.dtype), lambda g: (g * phi,))


def _faulty_softmax(x: Tensor, axis: int = -1) -> Tensor:
    good = ops.softmax(x.detach(), axis=axis)
    # ignores the normalization coupling
    return record_op("softmax", (x,), Tensor(good.data, dtype=x.dtype),
                     lambda g: (g * good.data,))


def _faulty_layer_norm(x: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    good = ops.layer_norm(x.detach(), gamma.detach(), beta.detach())
    mu = x.data.mean(axis=-1, keepdims=True)
    var = ((x.data - mu) ** 2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + ops.LAYER_NORM_EPS)
    xhat = (x.data - mu) * inv
    n = x.shape[-1]

    def adjoint(g):
        # treats mean and variance as constants
        return (g * gamma.data * inv,
                (g.reshape(-1, n) * xhat.reshape(-1, n)).sum(axis=0),
                g.reshape(-1, n).sum(axis=0))

    return record_op("layer_norm", (x, gamma, beta), Tensor(good.data, dtype=x.dtype), adjoint)


def _faulty_matmul(a: Tensor, b: Tensor) -> Tensor:
    good = ops.matmul(a.detach(), b.detach())
    # right-operand gradient off by a factor of two
    return record_op("matmul", (a, b), Tensor(good.data, dtype=a.dtype),
                     lambda g: (g @ b.data.T, 0.5 * (a.data.T @ g)))


def _faulty_mse(pred: Tensor, target: Tensor) -> Tensor:
    good = ops.mse(pred.detach(), target.detach())
    diff = pred.data - target.data
    # missing factor of two
    return record_op("mse", (pred, target), Tensor(good.data, dtype=pred.dtype),
                     lambda g: (g * diff / diff.size, -g * diff / diff.size))


def _faulty_conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    good = ops.conv2d(x.detach(), weight.detach(),
                      None if bias is None else bias.detach())
    inputs = [x, weight] + ([bias] if bias is not None else [])

    def adjoint(g):
        # no input or kernel gradient; bias averaged instead of summed
        grads = [np.zeros_like(x.data), np.zeros_like(weight.data)]
        if bias is not None:
            grads.append(g.mean(axis=(1, 2)))
        return grads

    return record_op("conv2d_3x3", inputs, Tensor(good.data, dtype=x.dtype), adjoint)


FAULTY_OPS: dict[str, Callable[..., Tensor]] = {
    "gelu": _faulty_gelu,
    "softmax": _faulty_softmax,
    "layer_norm": _faulty_layer_norm,
    "matmul": _faulty_matmul,
    "mse": _faulty_mse,
    "conv2d": _faulty_conv2d,
}


# ----------------------------------------------------------------------
# Suite
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class SuiteDims:
    d: int
    heads: int
    d_ff: int
    d_c: int
    d_s: int
    grid: int
    layers: int
    hidden: int
    image: int = 32
    max_coords: int = 8


SUITE_DIMS = {
    "small": SuiteDims(d=8, heads=2, d_ff=16, d_c=4, d_s=8, grid=4, layers=1, hidden=2),
    "default": SuiteDims(d=16, heads=4, d_ff=32, d_c=8, d_s=16, grid=6, layers=2, hidden=4),
}


@dataclass
class SuiteReport:
    reports: list[GradCheckReport] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.reports)

    @property
    def failing(self) -> list[str]:
        return [r.name for r in self.reports if not r.passed]

    def to_dict(self) -> dict:
        return {"passed": self.passed, "failing": self.failing,
                "checks": [r.to_dict() for r in self.reports]}


def _readout(y: Tensor, seed: int = 99) -> Tensor:
    """Scalar sum(y * R) with a fixed random R, so no gradient is trivially zero."""
    r = np.random.default_rng(seed).standard_normal(y.shape)
    return ops.sum(ops.mul(y, Tensor(r)))


def _randn(rng: np.random.Generator, *shape: int, away_from_zero: bool = False) -> Tensor:
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (0.1 + np.abs(x))
    return Tensor(x, requires_grad=True)


def _op_checks(rng: np.random.Generator, inject_bug: Optional[str]):
    """(name, f, inputs) for every differentiable op."""

    def op(name: str) -> Callable[..., Tensor]:
        if name == inject_bug:
            return FAULTY_OPS[name]
        return getattr(ops, name)

    x34 = lambda: _randn(rng, 3, 4)  # noqa: E731
    checks = [
        ("add", lambda a, b: _readout(ops.add(a, b)), [x34(), _randn(rng, 4)]),
        ("sub", lambda a, b: _readout(ops.sub(a, b)), [x34(), x34()]),
        ("hadamard", lambda a, b: _readout(ops.mul(a, b)), [x34(), x34()]),
        ("scale", lambda a: _readout(ops.scale(ops.neg(a), 0.7)), [x34()]),
        ("matmul", lambda a, b: _readout(op("matmul")(a, b)), [x34(), _randn(rng, 4, 5)]),
        ("matmul_batched", lambda a, b: _readout(ops.matmul(a, b)),
         [_randn(rng, 3, 4), _randn(rng, 2, 4, 2)]),
        ("concat", lambda a, b: _readout(ops.concat([a, b], axis=1)), [x34(), _randn(rng, 3, 2)]),
        ("stack", lambda a, b: _readout(ops.stack([a, b])), [x34(), x34()]),
        ("reshape_transpose", lambda a: _readout(ops.transpose(ops.reshape(a, (2, 6)))), [x34()]),
        ("getitem", lambda a: _readout(a[np.array([0, 2, 0])]), [x34()]),
        ("embedding", lambda t: _readout(ops.embedding(t, [1, 3, 1])), [_randn(rng, 5, 3)]),
        ("sum", lambda a: _readout(ops.sum(a, axis=0)), [x34()]),
        ("mean", lambda a: _readout(ops.mean(a, axis=1)), [x34()]),
        ("mean_pool", lambda a: _readout(ops.mean_pool(a)), [_randn(rng, 2, 3, 3)]),
        ("relu", lambda a: _readout(ops.relu(a)), [_randn(rng, 3, 4, away_from_zero=True)]),
        ("gelu", lambda a: _readout(op("gelu")(a)), [x34()]),
        ("softmax", lambda a: _readout(op("softmax")(a, axis=-1)), [x34()]),
        ("layer_norm", lambda a, g, b: _readout(op("layer_norm")(a, g, b)),
         [x34(), _randn(rng, 4), _randn(rng, 4)]),
        ("min_max_norm", lambda a: _readout(ops.min_max_norm(a)), [x34()]),
        ("conv2d", lambda x, w, b: _readout(op("conv2d")(x, w, b)),
         [_randn(rng, 2, 5, 5), _randn(rng, 3, 2, 3, 3), _randn(rng, 3)]),
        ("conv2d_1x1", lambda x, w, b: _readout(ops.conv2d(x, w, b)),
         [_randn(rng, 2, 4, 4), _randn(rng, 3, 2, 1, 1), _randn(rng, 3)]),
        ("avg_pool2", lambda a: _readout(ops.avg_pool2(a)), [_randn(rng, 2, 5, 4)]),
        ("bilinear_sample", lambda a: _readout(
            ops.bilinear_sample(a, np.array([0.3, 1.7, 3.2]), np.array([0.6, 2.4]))),
         [_randn(rng, 2, 5, 4)]),
        ("cross_entropy", lambda z: op("cross_entropy")(z, [1, 0, 3]), [x34()]),
        ("mse", lambda p, t: op("mse")(p, t), [x34(), x34()]),
        ("bce", lambda p, t: ops.bce(p, t),
         [Tensor(rng.uniform(0.1, 0.9, (3, 4)), requires_grad=True),
          Tensor(rng.uniform(0.1, 0.9, (3, 4)), requires_grad=True)]),
    ]
    return checks


def _composite_checks(dims: SuiteDims, seed: int):
    """(name, f, named parameter tensors) for the multi-op pipelines."""
    from relation_engine.backbone import BoundingBox, VisualBackbone
    from relation_engine.config import ModelConfig
    from relation_engine.dataset import ImageRecord, ObjectInstance, RelationInstance, render_canvas
    from relation_engine.encoder import EncoderLayer
    from relation_engine.mask_attention import (
        MaskAttention,
        apply_mask,
        ground_truth_mask,
        mask_loss,
    )
    from relation_engine.model import RelationshipModel
    from relation_engine.predicates import NO_RELATIONSHIP, SPATIAL_PREDICATES, VRD_PREDICATES
    from relation_engine.sequence import Vocabulary
    from relation_engine.trainer import total_loss

    rng = np.random.default_rng(seed)
    checks = []

    layer = EncoderLayer(dims.d, dims.heads, dims.d_ff, rng)
    layer.cast(np.float64)
    x = Tensor(rng.standard_normal((5, dims.d)), requires_grad=True)
    checks.append(("encoder_layer", lambda: _readout(layer(x)[0]),
                   [("x", x), *layer.named_parameters()]))

    backbone = VisualBackbone(dims.d_c, dims.d, rng, hidden=dims.hidden,
                              grid=(dims.grid, dims.grid))
    mam = MaskAttention(dims.d_c, dims.d, rng)
    backbone.cast(np.float64)
    mam.cast(np.float64)
    v_s = Tensor(rng.standard_normal((dims.d_c, dims.grid, dims.grid)), requires_grad=True)
    w_s = Tensor(rng.standard_normal(dims.d), requires_grad=True)
    box = BoundingBox(4, 6, 20, 26)
    target = ground_truth_mask(box, dims.image, dims.image, (dims.grid, dims.grid))

    def mask_pipeline() -> Tensor:
        m_s = mam.compute_attention_mask(v_s, w_s)
        feature = apply_mask(v_s, m_s, backbone)
        return ops.add(_readout(feature), mask_loss(m_s, target, "mse"))

    checks.append(("mask_attention", mask_pipeline,
                   [("v_s", v_s), ("w_s", w_s), *mam.named_parameters(),
                    *backbone.projection.named_parameters("projection.")]))

    objects = [
        ObjectInstance(0, "cup", BoundingBox(3, 2, 13, 12), 0.2),
        ObjectInstance(1, "table", BoundingBox(2, 14, 28, 28), 0.6),
    ]
    record = ImageRecord("gradcheck", dims.image, dims.image, objects, [])
    record.canvas = render_canvas(record, seed)
    vocab = Vocabulary(["cup", "table", "above", "to", "the", "left", "of"])
    config = ModelConfig(d=dims.d, L=dims.layers, M=dims.heads, d_ff=dims.d_ff, d_s=dims.d_s,
                         d_c=dims.d_c, d_w=dims.grid, d_h=dims.grid, p_max=16,
                         backbone_hidden=dims.hidden)
    for mode, predicates, predicate, target_class in (
        ("triplet-binary", SPATIAL_PREDICATES, "above", 1),
        ("doublet-vrd", (NO_RELATIONSHIP, *VRD_PREDICATES), None, 2),
    ):
        model = RelationshipModel(config, vocab, predicates, mode, seed=seed)
        model.cast(np.float64)
        instance = RelationInstance(record.image_id, objects[0], objects[1], predicate,
                                    target_class)

        def end_to_end(model=model, instance=instance, target_class=target_class) -> Tensor:
            result = model.forward(instance, record)
            return total_loss([result], [target_class]).total

        name = "end_to_end_triplet" if predicate else "end_to_end_doublet"
        checks.append((name, end_to_end, list(model.named_parameters())))
    return checks


def run_suite(dims: str = "small", inject_bug: Optional[str] = None,
              tolerance: float = DEFAULT_TOLERANCE, seed: int = 0) -> SuiteReport:
    """Check every op and the composite pipelines in 64-bit precision.

    Raises:
        ValueError: Unknown `dims` preset or `inject_bug` op.
    """
    if dims not in SUITE_DIMS:
        raise ValueError(f"dims must be one of {sorted(SUITE_DIMS)}, got {dims!r}")
    if inject_bug is not None and inject_bug not in FAULTY_OPS:
        raise ValueError(f"no faulty fixture for {inject_bug!r}; choose from {sorted(FAULTY_OPS)}")
    preset = SUITE_DIMS[dims]
    suite = SuiteReport()
    with precision(np.float64):
        rng = np.random.default_rng(seed)
        for name, f, inputs in _op_checks(rng, inject_bug):
            suite.reports.append(grad_check(f, inputs, tolerance=tolerance, floor=OP_FLOOR,
                                            name=name, seed=seed))
        for name, f, named in _composite_checks(preset, seed):
            labels = [label for label, _ in named]
            tensors = [t for _, t in named]
            suite.reports.append(grad_check(
                lambda *_, f=f: f(), tensors, tolerance=tolerance, floor=COMPOSITE_FLOOR,
                max_coords=preset.max_coords, seed=seed, names=labels, name=name,
                skip_kinks=True,
            ))
    for r in suite.reports:
        level = logging.INFO if r.passed else logging.ERROR
        logger.log(level, "%-22s max rel error %.2e (%s)", r.name, r.max_error,
                   "ok" if r.passed else "FAIL")
    return suite
