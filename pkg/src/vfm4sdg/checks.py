"""Finite-difference verification suite for every differentiable path.

Each check builds a small random instance, evaluates a fixed scalar head
on it, and compares the tape gradient against central finite differences
via :func:`vfm4sdg.tensor.grad_check`. Smooth-L1 checks keep residuals
away from the knee (the loss is only C1 there, which degrades the finite
difference, not the gradient); the knee itself is covered by exact-value
tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as T
from .distill import FeaturePyramid, TeacherFeature, csrpd_loss
from .enhance import EnhancerParams, QuerySet, cross_attention, init_enhancer_params, scpqe
from .prototypes import PrototypeBank
from .tensor import GradCheckReport, Tensor, grad_check


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    passed: bool


def _linear_head(shape, rng: np.random.Generator):
    # Fixed random linear functional, drawn once per check, so outputs with
    # structural constraints (rows summing to one, zero-mean rows) still
    # produce a non-trivial, well-defined gradient.
    w = Tensor(rng.uniform(-1.0, 1.0, size=shape))
    return lambda out: T.tsum(T.mul(out, w))


def _run(name: str, report: GradCheckReport, results: list) -> None:
    results.append(CheckResult(name=name, max_rel_error=report.max_rel_error, passed=report.passed))


def _with_named(params: EnhancerParams, name: str, value: Tensor) -> EnhancerParams:
    if "." in name:
        block_name, field_name = name.split(".", 1)
        patched_block = replace(getattr(params, block_name), **{field_name: value})
        return replace(params, **{block_name: patched_block})
    return replace(params, **{name: value})


def _check_smooth_l1(rng, results, tol, step):
    x = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)))
    target = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)))
    _run(
        "smooth_l1/quadratic",
        grad_check(lambda t: T.smooth_l1(t, target, beta=4.0), x, step, tol),
        results,
    )
    offset = np.sign(rng.uniform(-1, 1, size=(3, 4))) * rng.uniform(0.4, 1.0, size=(3, 4))
    shift = Tensor(offset)
    zeros = Tensor(np.zeros((3, 4)))
    small = Tensor(rng.uniform(-0.1, 0.1, size=(3, 4)))
    _run(
        "smooth_l1/linear",
        grad_check(lambda t: T.smooth_l1(T.add(t, shift), zeros, beta=0.05), small, step, tol),
        results,
    )


def _check_layer_norm(rng, results, tol, step):
    x = Tensor(rng.uniform(-1.0, 1.0, size=(4, 5)))
    gain = Tensor(rng.uniform(0.5, 1.5, size=5))
    bias = Tensor(rng.uniform(-0.5, 0.5, size=5))
    head = _linear_head((4, 5), rng)
    _run("layer_norm/input", grad_check(lambda t: head(T.layer_norm(t, gain, bias)), x, step, tol), results)
    _run("layer_norm/gain", grad_check(lambda g: head(T.layer_norm(x, g, bias)), gain, step, tol), results)


def _check_softmax(rng, results, tol, step):
    x = Tensor(rng.uniform(-1.0, 1.0, size=(3, 5)))
    head = _linear_head((3, 5), rng)
    _run("softmax_rows", grad_check(lambda t: head(T.softmax_rows(t)), x, step, tol), results)


def _check_matmul(rng, results, tol, step):
    a = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)))
    b = Tensor(rng.uniform(-1.0, 1.0, size=(4, 2)))
    head = _linear_head((3, 2), rng)
    _run("matmul/left", grad_check(lambda t: head(T.matmul(t, b)), a, step, tol), results)
    _run("matmul/right", grad_check(lambda t: head(T.matmul(a, t)), b, step, tol), results)


def _check_l2_normalize(rng, results, tol, step):
    # Columns kept clearly away from the zero-norm guard.
    x = Tensor(rng.uniform(0.3, 1.0, size=(3, 4)) * np.sign(rng.uniform(-1, 1, size=(3, 4))))
    head = _linear_head((3, 4), rng)
    _run(
        "l2_normalize_columns",
        grad_check(lambda t: head(T.l2_normalize_columns(t)), x, step, tol),
        results,
    )


def _check_resampling(rng, results, tol, step):
    x = Tensor(rng.uniform(-1.0, 1.0, size=(2, 3, 3)))
    pool_head = _linear_head((2, 2, 2), rng)
    _run(
        "adaptive_avg_pool2d",
        grad_check(lambda t: pool_head(T.adaptive_avg_pool2d(t, (2, 2))), x, step, tol),
        results,
    )
    small = Tensor(rng.uniform(-1.0, 1.0, size=(2, 2, 2)))
    up_head = _linear_head((2, 3, 3), rng)
    _run(
        "bilinear_resize",
        grad_check(lambda t: up_head(T.bilinear_resize(t, (3, 3))), small, step, tol),
        results,
    )


def _check_attention(rng, results, tol, step):
    params = init_enhancer_params(query_width=4, teacher_width=3, heads=2, seed=int(rng.integers(1 << 31)))
    block = params.siga
    q = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)))
    kv = Tensor(rng.uniform(-1.0, 1.0, size=(2, 4)))
    head = _linear_head((3, 4), rng)
    _run(
        "cross_attention/queries",
        grad_check(lambda t: head(cross_attention(t, kv, block, 2)), q, step, tol),
        results,
    )
    for field_name in ("wq", "wk", "wv", "wo", "bv", "bo"):
        leaf = getattr(block, field_name)

        def param_head(p, field_name=field_name):
            patched = replace(block, **{field_name: p})
            return head(cross_attention(q, kv, patched, 2))

        _run(f"cross_attention/{field_name}", grad_check(param_head, leaf, step, tol), results)


def _check_csrpd(rng, results, tol, step):
    teacher = TeacherFeature(map=rng.uniform(-1.0, 1.0, size=(5, 2, 2)))
    student = Tensor(rng.uniform(-1.0, 1.0, size=(4, 3, 3)))

    def pooled_head(t):
        return csrpd_loss(FeaturePyramid(levels=[(0, t)]), teacher, levels=[0], beta=4.0)

    _run("csrpd_loss/pooling_path", grad_check(pooled_head, student, step, tol), results)

    small = Tensor(rng.uniform(-1.0, 1.0, size=(4, 2, 2)))
    wide_teacher = TeacherFeature(map=rng.uniform(-1.0, 1.0, size=(5, 3, 3)))

    def bilinear_head(t):
        return csrpd_loss(FeaturePyramid(levels=[(0, t)]), wide_teacher, levels=[0], beta=4.0)

    _run("csrpd_loss/bilinear_path", grad_check(bilinear_head, small, step, tol), results)


def _check_scpqe(rng, results, tol, step):
    params = init_enhancer_params(query_width=4, teacher_width=3, heads=2, seed=int(rng.integers(1 << 31)))
    bank = PrototypeBank(
        prototypes=rng.uniform(-1.0, 1.0, size=(2, 3)),
        category_ids=[1, 2],
        instance_counts=[1, 1],
    )
    teacher = TeacherFeature(map=rng.uniform(-1.0, 1.0, size=(3, 2, 2)))
    queries = Tensor(rng.uniform(-1.0, 1.0, size=(3, 4)))

    def energy(qs: QuerySet) -> Tensor:
        return T.tsum(T.mul(qs.queries, qs.queries))

    _run(
        "scpqe/queries",
        grad_check(
            lambda t: energy(scpqe(QuerySet(queries=t), bank, teacher, params)),
            queries,
            step,
            tol,
        ),
        results,
    )
    for name, leaf in params.named_tensors().items():
        def param_head(p, name=name):
            patched = _with_named(params, name, p)
            return energy(scpqe(QuerySet(queries=queries), bank, teacher, patched))

        _run(f"scpqe/{name}", grad_check(param_head, leaf, step, tol), results)


def gradient_suite(seed: int = 0, instances: int = 20, tol: float = 1e-4, step: float = 1e-4):
    """Run every check family on ``instances`` random instances.

    Returns ``(results, elapsed_seconds)``; the suite passes iff every
    entry passed.
    """
    rng = np.random.default_rng(seed)
    results: list = []
    start = time.perf_counter()
    families = (
        _check_smooth_l1,
        _check_layer_norm,
        _check_softmax,
        _check_matmul,
        _check_l2_normalize,
        _check_resampling,
        _check_attention,
        _check_csrpd,
        _check_scpqe,
    )
    for _ in range(instances):
        for family in families:
            family(rng, results, tol, step)
    elapsed = time.perf_counter() - start
    return results, elapsed
