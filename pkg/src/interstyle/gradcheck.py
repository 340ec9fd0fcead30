"""Finite-difference gradient verification.

Analytic gradients from the tape are compared against central differences
on float64 inputs. Large tensors are checked on a deterministic sample of
entries; small ones exhaustively.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autograd import Tensor, backward, no_grad

DEFAULT_STEP = 1e-5
DEFAULT_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    entries: int
    tol: float

    @property
    def ok(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        status = "ok" if self.ok else "FAIL"
        return (f"gradcheck {self.name}: {status} "
                f"(max rel err {self.max_rel_err:.3e} over {self.entries} entries)")


def _rel_err(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return np.abs(analytic - numeric) / denom


def check_gradients(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray],
                    name: str = "fn", step: float = DEFAULT_STEP,
                    tol: float = DEFAULT_TOL, max_entries: int | None = None,
                    seed: int = 0) -> CheckResult:
    """Compare tape gradients of ``fn(*tensors)`` with central differences.

    ``fn`` must map Tensors to a scalar Tensor and be deterministic (freeze
    any random draws before calling). All inputs are promoted to float64.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True, dtype=np.float64) for a in arrays]
    loss = fn(*tensors)
    backward(loss)

    def value() -> float:
        with no_grad():
            return fn(*[Tensor(a, dtype=np.float64) for a in arrays]).item()

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for arr, tensor in zip(arrays, tensors):
        flat = arr.reshape(-1)
        analytic = tensor.grad.reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        for i in idx:
            old = flat[i]
            flat[i] = old + step
            fp = value()
            flat[i] = old - step
            fm = value()
            flat[i] = old
            numeric = (fp - fm) / (2.0 * step)
            worst = max(worst, float(_rel_err(np.float64(analytic[i]),
                                              np.float64(numeric))))
            checked += 1
    return CheckResult(name=name, max_rel_err=worst, entries=checked, tol=tol)


# ---------------------------------------------------------------------------
# the full verification suite: every op, the whole extractor, and the
# extractor with each stylizer spliced into the differentiable path.


def _weighted(out, seed: int = 12345):
    # fixed-seed probe weights: the same array on every call, so the
    # finite-difference evaluations see a deterministic function
    from . import autograd as ag
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return ag.tsum(ag.mul(out, Tensor(w, dtype=np.float64)))


def _op_checks(rng: np.random.Generator) -> list[CheckResult]:
    from . import autograd as ag

    results = []

    def signed_away_from_zero(shape, margin=0.2):
        return (rng.uniform(margin, 1.0 + margin, size=shape)
                * rng.choice([-1.0, 1.0], size=shape))

    binary_shapes = [((3, 4), (3, 4)), ((3, 4), (4,)), ((2, 1, 4), (1, 3, 1))]
    for op_name, op in (("add", ag.add), ("sub", ag.sub), ("mul", ag.mul),
                        ("div", ag.div)):
        for sa, sb in binary_shapes:
            a = rng.standard_normal(sa)
            b = signed_away_from_zero(sb) if op_name == "div" \
                else rng.standard_normal(sb)
            results.append(check_gradients(
                lambda ta, tb, _op=op: _weighted(_op(ta, tb)),
                [a, b], name=f"{op_name}{sa}x{sb}"))

    for shape in [(5,), (3, 4), (2, 3, 4)]:
        x = signed_away_from_zero(shape)
        results.append(check_gradients(
            lambda t: _weighted(ag.relu(t)), [x], name=f"relu{shape}"))
        results.append(check_gradients(
            lambda t: _weighted(ag.maximum(t, 0.0)), [x],
            name=f"maximum{shape}"))

    for shape in [(4,), (2, 5), (3, 2, 2)]:
        x = rng.uniform(0.1, 2.0, size=shape)
        results.append(check_gradients(
            lambda t: _weighted(ag.sqrt(t)), [x], name=f"sqrt{shape}"))

    for sa, sb in [((3, 4), (4, 5)), ((1, 6), (6, 2)), ((5, 3), (3, 3))]:
        results.append(check_gradients(
            lambda ta, tb: _weighted(ag.matmul(ta, tb)),
            [rng.standard_normal(sa), rng.standard_normal(sb)],
            name=f"matmul{sa}x{sb}"))

    for shape, axis in [((4, 7), 1), ((3, 5), 0), ((2, 3, 4), 2)]:
        results.append(check_gradients(
            lambda t, _ax=axis: _weighted(ag.log_sum_exp(t, _ax)),
            [rng.standard_normal(shape)], name=f"log_sum_exp{shape}@{axis}"))

    for shape in [(2, 3, 4, 5), (1, 1, 3, 3), (3, 2, 2, 6)]:
        x = rng.standard_normal(shape)
        results.append(check_gradients(
            lambda t: _weighted(ag.global_average_pool(t)), [x],
            name=f"gap{shape}"))
        results.append(check_gradients(
            lambda t: _weighted_stats(t), [x],
            name=f"channel_stats{shape}"))

    for shape in [(3, 6), (2, 5), (4, 4)]:
        x = rng.standard_normal(shape)
        results.append(check_gradients(
            lambda t: _weighted(ag.l2_normalize(t, axis=-1)), [x],
            name=f"l2_normalize{shape}"))

    for shape, new in [((2, 6), (3, 4)), ((4, 3), (12,)), ((2, 2, 3), (2, 6))]:
        results.append(check_gradients(
            lambda t, _n=new: _weighted(ag.reshape(t, _n)),
            [rng.standard_normal(shape)], name=f"reshape{shape}->{new}"))

    for shape, axis in [((3, 4), None), ((3, 4), 0), ((2, 3, 4), 1)]:
        results.append(check_gradients(
            lambda t, _ax=axis: _weighted(ag.tsum(t, axis=_ax)),
            [rng.standard_normal(shape)], name=f"sum{shape}@{axis}"))
        results.append(check_gradients(
            lambda t, _ax=axis: _weighted(ag.tmean(t, axis=_ax)),
            [rng.standard_normal(shape)], name=f"mean{shape}@{axis}"))

    for n, c in [(4, 3), (6, 2), (5, 5)]:
        idx = rng.integers(0, c, size=n)
        results.append(check_gradients(
            lambda t, _i=idx: _weighted(ag.gather_rows(t, _i)),
            [rng.standard_normal((n, c))], name=f"gather_rows({n},{c})"))
        take = rng.integers(0, n, size=n)  # repeats allowed
        results.append(check_gradients(
            lambda t, _i=take: _weighted(ag.take_batch(t, _i)),
            [rng.standard_normal((n, c))], name=f"take_batch({n},{c})"))

    conv_cases = [
        ((2, 3, 5, 5), (4, 3, 3, 3), 2, 1),
        ((1, 1, 3, 3), (1, 1, 3, 3), 1, 0),
        ((2, 2, 6, 4), (3, 2, 2, 3), 1, 2),
    ]
    for xs, ks, stride, padding in conv_cases:
        results.append(check_gradients(
            lambda tx, tk, tb, _s=stride, _p=padding:
                _weighted(ag.conv2d(tx, tk, tb, _s, _p)),
            [rng.standard_normal(xs), rng.standard_normal(ks),
             rng.standard_normal(ks[0])],
            name=f"conv2d{xs}k{ks}s{stride}p{padding}"))
    return results


def _weighted_stats(t):
    from . import autograd as ag
    mu, sigma = ag.channel_stats(t, eps=1e-6)
    return ag.add(_weighted(mu, seed=7), _weighted(sigma, seed=8))


def _two_layer_check(rng: np.random.Generator) -> CheckResult:
    from . import autograd as ag

    x = rng.standard_normal((4, 6))
    w1 = rng.standard_normal((6, 5)) * 0.5
    b1 = rng.standard_normal(5) * 0.1
    w2 = rng.standard_normal((5, 3)) * 0.5
    b2 = rng.standard_normal(3) * 0.1

    def fn(tx, tw1, tb1, tw2, tb2):
        hidden = ag.relu(ag.linear(tx, tw1, tb1))
        return _weighted(ag.linear(hidden, tw2, tb2))

    return check_gradients(fn, [x, w1, b1, w2, b2], name="two_layer_net")


def _backbone_checks(rng: np.random.Generator,
                     max_entries: int) -> list[CheckResult]:
    from . import autograd as ag
    from .backbone import Backbone
    from .stylize import StylizerSpec, apply_draw, draw_style

    results = []
    images = rng.uniform(0.0, 1.0, size=(2, 3, 32, 16))

    def make_model():
        model = Backbone(seed=11, dtype=np.float64)
        model.train()
        return model

    base_model = make_model()
    param_arrays = [p.data.copy() for p in base_model.parameters()]

    def forward_with(transform):
        def fn(tx, *params):
            base_model.replace_parameters(list(params))
            out = base_model.forward(tx, stylizer=transform,
                                     insertion="after_stage1")
            return _weighted(out)
        return fn

    results.append(check_gradients(forward_with(None), [images] + param_arrays,
                                   name="backbone", max_entries=max_entries,
                                   seed=1))

    for method in ("isg", "mixstyle", "dsu", "padain"):
        spec = StylizerSpec(method=method)
        fmap = base_model.features_at(images, "after_stage1")
        draw = draw_style(fmap, spec, np.random.default_rng(23))
        transform = lambda f, _s=spec, _d=draw: apply_draw(f, _s, _d)  # noqa: E731
        results.append(check_gradients(forward_with(transform),
                                       [images] + param_arrays,
                                       name=f"backbone+{method}",
                                       max_entries=max_entries, seed=2))
    return results


def full_suite(max_entries: int = 6, seed: int = 0) -> list[CheckResult]:
    """Every differentiable op, the tiny extractor, and each stylizer."""
    rng = np.random.default_rng(seed)
    results = _op_checks(rng)
    results.append(_two_layer_check(rng))
    results.extend(_backbone_checks(rng, max_entries))
    return results
