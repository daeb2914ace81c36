"""Finite-difference verification of recorded adjoints.

Every differentiable primitive and the assembled network are checked in
double precision against central differences. The suite initializes the
network at a generic position (non-zero head, non-integer sample points)
so the piecewise-linear warp is differentiable at every probed coordinate.
"""

from __future__ import annotations

import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .rng import Rng


def fd_gradient(f: Callable[[Sequence[np.ndarray]], float],
                arrays: Sequence[np.ndarray], eps: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradient of a scalar function of float64 arrays."""
    grads = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = g.reshape(-1)
        base = a.reshape(-1)
        for j in range(base.size):
            orig = base[j]
            work = [x.copy() for x in arrays]
            work[i].reshape(-1)[j] = orig + eps
            fp = f(work)
            work[i].reshape(-1)[j] = orig - eps
            fm = f(work)
            flat[j] = (fp - fm) / (2.0 * eps)
        grads.append(g)
    return grads


def rel_error(analytic: np.ndarray, fd: np.ndarray, floor: float = 1e-8) -> float:
    """Worst-element relative error with an absolute floor for tiny gradients."""
    scale = max(float(np.max(np.abs(analytic), initial=0.0)),
                float(np.max(np.abs(fd), initial=0.0)), floor)
    return float(np.max(np.abs(analytic - fd), initial=0.0)) / scale


def check_case(forward: Callable[[Sequence[T.Tensor]], T.Tensor],
               arrays: Sequence[np.ndarray], eps: float = 1e-5) -> float:
    """Record ``forward`` on a tape, differentiate, compare against FD."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = T.Tape()
    leaves = [tape.watch(T.Tensor(a)) for a in arrays]
    loss = forward(leaves)
    grads = T.backward(tape, loss)
    analytic = [grads[x] for x in leaves]

    def f(vals):
        out = forward([T.Tensor(v) for v in vals])
        return out.item()

    numeric = fd_gradient(f, arrays, eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@contextmanager
def corrupted_adjoint(op_name: str, scale: float = 1.5):
    """Scale one op's recorded adjoints — negative control for the suite."""
    T._ADJOINT_SCALE[op_name] = scale
    try:
        yield
    finally:
        T._ADJOINT_SCALE.pop(op_name, None)


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


@dataclass
class SuiteReport:
    results: list[CheckResult] = field(default_factory=list)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> list[CheckResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> list[str]:
        width = max(len(r.name) for r in self.results) if self.results else 0
        out = []
        for r in self.results:
            mark = "PASS" if r.passed else "FAIL"
            out.append(f"{mark}  {r.name:<{width}}  worst_rel_err={r.max_rel_err:.3e}"
                       f"  tol={r.tolerance:.0e}")
        out.append(f"{'PASS' if self.passed else 'FAIL'}  total ({len(self.results)} checks,"
                   f" {self.elapsed_s:.1f}s)")
        return out


def _rand(rng: Rng, shape, lo=-1.0, hi=1.0) -> np.ndarray:
    return rng.uniforms(int(np.prod(shape)), lo, hi).reshape(shape)


def primitive_cases(rng: Rng) -> list[tuple[str, Callable, list[np.ndarray]]]:
    """(name, forward, input arrays) for every differentiable primitive.

    Inputs avoid the non-smooth points of each op (zero denominators,
    leaky-relu kinks, sqrt at zero) so central differences are valid.
    """
    r = lambda *s: _rand(rng, s)

    cases: list[tuple[str, Callable, list[np.ndarray]]] = []

    a, b = r(3, 4), r(3, 4)
    w34 = r(3, 4)
    cases.append(("add", lambda xs: T.reduce_sum(T.mul(T.add(xs[0], xs[1]), T.Tensor(w34))), [a, b]))
    cases.append(("sub", lambda xs: T.reduce_sum(T.mul(T.sub(xs[0], xs[1]), T.Tensor(w34))), [a, b]))
    cases.append(("mul", lambda xs: T.reduce_sum(T.mul(T.mul(xs[0], xs[1]), T.Tensor(w34))), [a, b]))
    den = _rand(rng, (3, 4), 0.5, 1.5) * np.where(_rand(rng, (3, 4)) > 0, 1.0, -1.0)
    cases.append(("div", lambda xs: T.reduce_sum(T.mul(T.div(xs[0], xs[1]), T.Tensor(w34))), [a, den]))
    cases.append(("broadcast_add", lambda xs: T.reduce_sum(T.mul(T.add(xs[0], xs[1]), T.Tensor(r(2, 3, 4)))),
                  [r(2, 3, 4), r(1, 4)]))

    x1 = r(3, 4)
    w1 = r(3, 4)
    cases.append(("sigmoid", lambda xs: T.reduce_sum(T.mul(T.sigmoid(xs[0]), T.Tensor(w1))), [x1]))
    xk = _rand(rng, (3, 4), 0.2, 1.0) * np.where(_rand(rng, (3, 4)) > 0, 1.0, -1.0)
    cases.append(("leaky_relu", lambda xs: T.reduce_sum(T.mul(T.leaky_relu(xs[0], 0.2), T.Tensor(w1))), [xk]))
    cases.append(("exp", lambda xs: T.reduce_sum(T.mul(T.exp(xs[0]), T.Tensor(w1))), [x1]))
    xs_pos = _rand(rng, (3, 4), 0.5, 1.5)
    cases.append(("sqrt", lambda xs: T.reduce_sum(T.mul(T.sqrt(xs[0]), T.Tensor(w1))), [xs_pos]))

    ma, mb = r(4, 5), r(5, 6)
    wm = r(4, 6)
    cases.append(("matmul", lambda xs: T.reduce_sum(T.mul(T.matmul(xs[0], xs[1]), T.Tensor(wm))), [ma, mb]))
    ba, bb = r(2, 3, 4), r(4, 5)
    wbm = r(2, 3, 5)
    cases.append(("matmul_batched", lambda xs: T.reduce_sum(T.mul(T.matmul(xs[0], xs[1]), T.Tensor(wbm))),
                  [ba, bb]))

    cx, ck = r(5, 5, 5, 2), r(3, 3, 3, 2, 3)
    wc = r(3, 3, 3, 3)
    cases.append(("conv3d", lambda xs: T.reduce_sum(T.mul(T.conv3d(xs[0], xs[1], 2, 1), T.Tensor(wc))),
                  [cx, ck]))

    lx, lg, lb = r(3, 6), r(6), r(6)
    wl = r(3, 6)
    cases.append(("layer_norm",
                  lambda xs: T.reduce_sum(T.mul(T.layer_norm(xs[0], xs[1], xs[2]), T.Tensor(wl))),
                  [lx, lg, lb]))
    sx = r(3, 5)
    ws = r(3, 5)
    cases.append(("softmax", lambda xs: T.reduce_sum(T.mul(T.softmax(xs[0], -1), T.Tensor(ws))), [sx]))

    rx = r(3, 4, 5)
    wr = r(4,)
    cases.append(("reduce_mean", lambda xs: T.reduce_sum(T.mul(T.reduce_mean(xs[0], (0, 2)), T.Tensor(wr))),
                  [rx]))
    cases.append(("reduce_sum", lambda xs: T.reduce_sum(T.mul(T.reduce_sum(xs[0], (1,)), T.Tensor(r(3, 5)))),
                  [rx]))

    wshape = r(2, 3, 4)
    cases.append(("reshape", lambda xs: T.reduce_sum(T.mul(T.reshape(xs[0], (4, 6)), T.Tensor(r(4, 6)))),
                  [wshape]))
    cases.append(("transpose", lambda xs: T.reduce_sum(T.mul(T.transpose(xs[0], (2, 0, 1)), T.Tensor(r(4, 2, 3)))),
                  [wshape]))
    c1, c2 = r(2, 3), r(4, 3)
    cases.append(("concat", lambda xs: T.reduce_sum(T.mul(T.concat(xs, 0), T.Tensor(r(6, 3)))), [c1, c2]))
    cases.append(("slice", lambda xs: T.reduce_sum(T.mul(xs[0][1:3, ::2], T.Tensor(r(2, 2)))), [r(4, 4)]))
    cases.append(("broadcast_to", lambda xs: T.reduce_sum(T.mul(T.broadcast_to(xs[0], (3, 2, 4)), T.Tensor(r(3, 2, 4)))),
                  [r(1, 4)]))
    cases.append(("roll", lambda xs: T.reduce_sum(T.mul(T.roll(xs[0], (1, 2), (0, 1)), T.Tensor(r(3, 4)))),
                  [r(3, 4)]))
    idx = rng.integers(12, 0, 5).reshape(4, 3)
    cases.append(("take", lambda xs: T.reduce_sum(T.mul(T.take(xs[0], idx), T.Tensor(r(4, 3, 2)))),
                  [r(5, 2)]))
    return cases


def run_primitive_suite(seed: int = 20240601, eps: float = 1e-5,
                        tolerance: float = 1e-6) -> SuiteReport:
    """FD-check every primitive; all gradients must match within tolerance."""
    t0 = time.monotonic()
    rng = Rng(seed)
    report = SuiteReport()
    for name, fwd, arrays in primitive_cases(rng):
        err = check_case(fwd, arrays, eps)
        report.results.append(CheckResult(name, err, tolerance))
    report.elapsed_s = time.monotonic() - t0
    return report


def run_mechanism_suite(seed: int = 20240602, eps: float = 1e-5,
                        tolerance: float = 1e-5) -> SuiteReport:
    """FD-check the assembled attention, gating, embedding and loss pieces."""
    from . import attention, gating, metrics, network, warp, windows

    t0 = time.monotonic()
    rng = Rng(seed)
    report = SuiteReport()

    def run(name, fwd, arrays, tol=tolerance):
        report.results.append(CheckResult(name, check_case(fwd, arrays, eps), tol))

    # windowed multi-head attention with relative positional bias (+ mask)
    spec = windows.WindowSpec(window=(2, 2, 1), shift=(1, 1, 0), feat=(4, 4, 2))
    heads, c = 2, 4
    k = spec.elements_per_window
    index = attention.relative_index_map(spec.window)
    table_rows = (2 * spec.window[0] - 1) * (2 * spec.window[1] - 1) * (2 * spec.window[2] - 1)
    mask = windows.attention_mask(spec, dtype=np.float64)
    arrays = [_rand(rng, (spec.n_windows, k, c)), _rand(rng, (c, 3 * c)), _rand(rng, (3 * c,)),
              _rand(rng, (c, c)), _rand(rng, (c,)), _rand(rng, (table_rows, heads), -0.2, 0.2)]
    wproj = _rand(rng, (spec.n_windows, k, c))

    def msa_fwd(xs):
        seq, qkv_w, qkv_b, proj_w, proj_b, table = xs
        bias = attention.relative_position_bias(table, index)
        out = attention.window_msa(seq, qkv_w, qkv_b, proj_w, proj_b, heads, bias, mask=mask)
        return T.reduce_sum(T.mul(out, T.Tensor(wproj)))

    run("window_attention", msa_fwd, arrays)
    run("relative_bias",
        lambda xs: T.reduce_sum(T.mul(attention.relative_position_bias(xs[0], index),
                                      T.Tensor(_rand(rng, (heads, k, k))))),
        [arrays[5]])

    # gating phases
    n, kk, cc = 3, 4, 8
    gp = [("channel.w1", (cc, cc // 4)), ("channel.b1", (cc // 4,)),
          ("channel.w2", (cc // 4, cc)), ("channel.b2", (cc,)),
          ("window.w1", (n, max(1, n // 4))), ("window.b1", (max(1, n // 4),)),
          ("window.w2", (max(1, n // 4), n)), ("window.b2", (n,))]
    gp_arrays = [_rand(rng, s) for _, s in gp]
    seq0 = _rand(rng, (n, kk, cc))
    wgate = _rand(rng, (n, kk, cc))

    def as_params(xs):
        return {f"g.{name}": t for (name, _), t in zip(gp, xs)}

    run("channel_gate",
        lambda xs: T.reduce_sum(T.mul(gating.channel_gate(xs[0], as_params(xs[1:]), "g"),
                                      T.Tensor(wgate))),
        [seq0] + gp_arrays)
    run("window_gate",
        lambda xs: T.reduce_sum(T.mul(gating.window_gate(xs[0], as_params(xs[1:]), "g"),
                                      T.Tensor(wgate))),
        [seq0] + gp_arrays)
    run("window_gating",
        lambda xs: T.reduce_sum(T.mul(gating.window_gating(xs[0], as_params(xs[1:]), "g"),
                                      T.Tensor(wgate))),
        [seq0] + gp_arrays)

    # patch merging / expanding
    pmx, pmw, pmb = _rand(rng, (2, 2, 2, 2)), _rand(rng, (16, 4)), _rand(rng, (4,))
    run("patch_merge",
        lambda xs: T.reduce_sum(T.mul(network.patch_merging(xs[0], xs[1], xs[2]),
                                      T.Tensor(_rand(rng, (1, 1, 1, 4))))),
        [pmx, pmw, pmb])
    pex, pew, peb = _rand(rng, (2, 2, 2, 4)), _rand(rng, (4, 16)), _rand(rng, (16,))
    run("patch_expand",
        lambda xs: T.reduce_sum(T.mul(network.patch_expanding(xs[0], xs[1], xs[2]),
                                      T.Tensor(_rand(rng, (4, 4, 4, 2))))),
        [pex, pew, peb])

    # warp: gradient w.r.t. image and field at generic sample points
    img = _rand(rng, (4, 4, 3, 1), 0.0, 1.0)
    fld = _rand(rng, (4, 4, 3, 3), -0.6, 0.6) + 0.151  # keep off integer lattice
    wv = _rand(rng, (4, 4, 3, 1))
    run("warp_trilinear",
        lambda xs: T.reduce_sum(T.mul(warp.warp_trilinear(xs[0], xs[1]), T.Tensor(wv))),
        [img, fld])

    # losses
    run("mse", lambda xs: metrics.mse(xs[0], xs[1]), [_rand(rng, (3, 3, 2, 1)), _rand(rng, (3, 3, 2, 1))])
    run("smoothness", lambda xs: metrics.diffusion_regularizer(xs[0]), [_rand(rng, (3, 3, 2, 3))],
        tol=1e-7)
    report.elapsed_s = time.monotonic() - t0
    return report


def end_to_end_config():
    from .network import ArchConfig

    return ArchConfig(dims=(16, 8, 8), channels=8, window=(2, 2, 2), heads=(2, 2, 2, 2))


def run_end_to_end(seed: int = 20240603, eps: float = 1e-4, tolerance: float = 1e-4,
                   n_coords: int = 24) -> SuiteReport:
    """FD-check the full registration loss against sampled parameter coordinates.

    Runs in float64 at a toy configuration. The head is moved off its zero
    initialization so the deformation samples the warp away from the integer
    lattice, where trilinear interpolation is differentiable.
    """
    from . import metrics, network
    from .data import PhantomSpec, make_pair

    t0 = time.monotonic()
    cfg = end_to_end_config()
    rng = Rng(seed)
    params = network.init_params(cfg, seed=seed + 1, dtype=np.float64)
    for name in list(params):
        if name.startswith("head."):
            bump = _rand(rng.child(7), params[name].shape, -0.3, 0.3) + 0.11
            params[name] = T.Tensor(params[name].data + bump)

    spec = PhantomSpec(seed=seed + 2, dims=cfg.dims, organs=2, amplitude=1.0)
    moving, fixed, _ = make_pair(spec)
    mov = T.Tensor(moving.intensity.astype(np.float64))
    fix = T.Tensor(fixed.intensity.astype(np.float64))

    def loss_value(p: dict[str, T.Tensor]) -> float:
        fieldt = network.forward(p, cfg, mov, fix)
        return metrics.total_loss(mov, fix, fieldt, lam=0.04).total.item()

    tape = T.Tape()
    watched = {k: tape.watch(v) for k, v in params.items()}
    fieldt = network.forward(watched, cfg, mov, fix)
    loss = metrics.total_loss(mov, fix, fieldt, lam=0.04).total
    grads = T.backward(tape, loss)

    names = sorted(params)
    coord_rng = rng.child(13)
    picks = []
    for i in range(n_coords):
        name = names[int(coord_rng.integers(1, 0, len(names))[0])]
        j = int(coord_rng.integers(1, 0, params[name].size)[0])
        picks.append((name, j))

    report = SuiteReport()
    for name, j in picks:
        analytic = float(grads[watched[name]].reshape(-1)[j])

        def probe(delta: float) -> float:
            p2 = dict(params)
            arr = params[name].data.copy()
            arr.reshape(-1)[j] += delta
            p2[name] = T.Tensor(arr)
            return loss_value(p2)

        fd = (probe(eps) - probe(-eps)) / (2.0 * eps)
        err = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-6)
        report.results.append(CheckResult(f"loss_grad[{name}[{j}]]", err, tolerance))
    report.elapsed_s = time.monotonic() - t0
    return report
