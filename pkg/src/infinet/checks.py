"""Verification suites shared by the CLI and the test-suite.

Each suite returns ``CheckResult`` records. They are plain values, so a
caller can print them, gate on them, or freeze them in a test.
"""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autograd as ag
from .autograd import GradReport, Node, grad_check, grad_check_params
from .data import Sample, synth_blobs
from .interaction import (ABLATION_KINDS, BranchStack, InteractionKind, Polynomial, Rbf, gram_matrix,
                          interact, is_psd, rbf_kernel, rbf_series_truncated)
from .model import BlockConfig, InfiBlock, build_demo_net, build_model, get_variant
from .nn import (DepthwiseConv, LayerNormLayer, LinearLayer, MlpLayer, StridedConv, global_avg_pool)
from .tensor import Tensor
from .training import TrainConfig, cross_entropy_smoothed, train


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    value: float  # worst observed error (or the statistic being gated)
    tol: float
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f"  {self.detail}" if self.detail else ""
        return f"{tag} {self.name}: {self.value:.3e} (tol {self.tol:g}){extra}"


# ---------------------------------------------------------------------------
# kernels

SERIES_SWEEP = (0, 5, 10, 15, 20)


def random_pairs(trials: int, dim: int, max_norm: float, rng: np.random.Generator):
    """Pairs with uniformly random directions and radii uniform on ``[0, max_norm]``."""
    out = []
    for _ in range(trials):
        pair = []
        for _ in range(2):
            v = rng.standard_normal(dim)
            v *= rng.uniform(0, 1) * max_norm / np.linalg.norm(v)
            pair.append(v)
        out.append(tuple(pair))
    return out


def series_errors(trials: int = 100, max_norm: float = 2.0, terms: int = 20, dim: int = 7,
                  seed: int = 0) -> list[float]:
    """Per-trial ``|series_J(s, t) - K(s, t)|`` on the pairs the series check uses."""
    pairs = random_pairs(trials, dim, max_norm, np.random.default_rng(seed))
    return [abs(rbf_series_truncated(s, t, terms) - rbf_kernel(s, t, 1.0)) for s, t in pairs]


def series_check(trials: int = 100, max_norm: float = 2.0, terms: int = 20, dim: int = 7,
                 seed: int = 0, tol: float = 1e-9) -> CheckResult:
    pairs = random_pairs(trials, dim, max_norm, np.random.default_rng(seed))
    worst = max(series_errors(trials, max_norm, terms, dim, seed))
    sweep = sorted(set(SERIES_SWEEP) | {terms})
    monotone = True
    for s, t in pairs:
        errs = [abs(rbf_series_truncated(s, t, j) - rbf_kernel(s, t, 1.0)) for j in sweep]
        # equal-within-roundoff counts as nonincreasing once the series has converged
        monotone &= all(b <= a + 1e-15 for a, b in zip(errs, errs[1:]))
    passed = worst < tol and monotone
    return CheckResult(f"rbf series J={terms}", passed, worst, tol,
                       f"monotone over J={list(sweep)}: {'yes' if monotone else 'NO'}")


def symmetry_range_check(trials: int = 100, max_norm: float = 2.0, dim: int = 7, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, in_range = 0.0, True
    for s, t in random_pairs(trials, dim, max_norm, rng):
        k = rbf_kernel(s, t)
        worst = max(worst, abs(k - rbf_kernel(t, s)))
        in_range &= 0.0 < k <= 1.0 and rbf_kernel(s, s) == 1.0
    return CheckResult("rbf symmetry and range (0,1]", worst == 0.0 and in_range, worst, 0.0)


def gram_check(kind: InteractionKind, m: int = 8, seeds: Iterable[int] = range(20), dim: int = 7,
               rel_tol: float = 1e-8) -> CheckResult:
    worst = 0.0
    ok = True
    for seed in seeds:
        pts = np.random.default_rng(seed).standard_normal((m, dim))
        good, lo, hi = is_psd(gram_matrix(pts, kind), rel_tol)
        ok &= good
        worst = max(worst, max(-lo, 0.0) / hi)
    label = "rbf" if isinstance(kind, Rbf) else f"poly d={kind.d}"
    return CheckResult(f"gram psd {label} (m={m})", ok, worst, rel_tol, "value = max(-min_eig, 0)/max_eig")


def kernel_suites(trials: int = 100, max_norm: float = 2.0, terms: int = 20, seed: int = 0,
                  tol: float = 1e-9) -> list[CheckResult]:
    return [series_check(trials, max_norm, terms, seed=seed, tol=tol),
            symmetry_range_check(trials, max_norm, seed=seed),
            gram_check(Rbf(1.0)), gram_check(Polynomial(1.0, 2)), gram_check(Polynomial(1.0, 3))]


# ---------------------------------------------------------------------------
# gradients (double precision throughout)

UNIT_TOL = 1e-4
MODEL_TOL = 1e-3
CHECK_STD = 0.25  # parameter scale for checks; the 0.02 init makes many gradients vanish into roundoff


def _rescale(module, rng, std=CHECK_STD):
    for _, p in module.named_parameters():
        p.value = Tensor(rng.normal(0.0, std, p.shape))


def _merge(name: str, reports: Sequence[GradReport], tol: float) -> CheckResult:
    worst = max(r.max_error for r in reports)
    return CheckResult(name, worst < tol, worst, tol, f"{len(reports)} checks")


def _module_report(module, inputs: np.ndarray, forward: Callable[[Node], Node], seed: int,
                   tol: float, max_coords: int = 16, reduce=ag.sum, residual: bool = False) -> list[GradReport]:
    """Check a random projection of ``forward``; ``residual`` drops the identity path for the params."""
    rng = np.random.default_rng(seed + 1000)
    w = Node(Tensor(rng.standard_normal(forward(Node(Tensor(inputs))).shape)))
    loss_of = lambda x: reduce(forward(x) * w)  # noqa: E731
    reports = [grad_check(loss_of, Tensor(inputs), tol=tol, max_coords=max_coords, seed=seed)]
    if module is not None:
        x = Node(Tensor(inputs))
        params = dict(module.named_parameters())
        f = (lambda: reduce((forward(x) - x) * w)) if residual else (lambda: loss_of(x))
        reports.append(grad_check_params(f, params, tol=tol, max_coords=max_coords, seed=seed))
    return reports


def _layer_cases(seed: int):
    rng = np.random.default_rng(seed)
    x = rng.normal(0, 1, (2, 5, 5, 4))
    lin = LinearLayer(4, 3, rng)
    dw = DepthwiseConv(4, 3, rng)
    dw_big = DepthwiseConv(2, 3, rng)  # 13x13 = 169 px takes the tap loop
    ln = LayerNormLayer(4)
    mlp = MlpLayer(4, 2, rng)
    sc = StridedConv(4, 3, 2, 2, rng)
    sc3 = StridedConv(4, 3, 3, 1, rng)
    for m in (lin, dw, dw_big, ln, mlp, sc, sc3):
        _rescale(m, rng, 0.5)
    x4 = rng.normal(0, 1, (2, 4, 4, 4))
    labels = rng.integers(0, 3, 4).tolist()
    return [
        ("linear", lin, x, lin),
        ("depthwise conv (toeplitz)", dw, x, dw),
        ("depthwise conv (taps)", dw_big, rng.normal(0, 1, (1, 13, 13, 2)), dw_big),
        ("layer norm", ln, x, ln),
        ("mlp (gelu)", mlp, x, mlp),
        ("strided conv k=s=2", sc, x4, sc),
        ("strided conv k=3 s=1", sc3, x4[:, :3, :3], sc3),
        ("global avg pool", None, x, global_avg_pool),
        ("relu", None, x + 0.05, ag.relu),
        ("exp/log/sqrt", None, np.abs(x) + 0.5, lambda v: ag.log(ag.sqrt(v)) + ag.exp(v * 0.3)),
        ("smoothed cross-entropy", None, rng.normal(0, 1, (4, 3)),
         lambda v: cross_entropy_smoothed(v, labels, 0.1)),
    ]


def layer_gradchecks(seeds: int = 5) -> list[CheckResult]:
    by_name: dict[str, list[GradReport]] = {}
    for seed in range(seeds):
        for name, module, x, fwd in _layer_cases(seed):
            if name == "smoothed cross-entropy":
                rep = [grad_check(fwd, Tensor(x), tol=UNIT_TOL, seed=seed)]
            else:
                rep = _module_report(module, x, fwd, seed, UNIT_TOL)
            by_name.setdefault(name, []).extend(rep)
    return [_merge(f"grad {n}", r, UNIT_TOL) for n, r in by_name.items()]


def interact_gradchecks(seeds: int = 5, r: int = 3) -> list[CheckResult]:
    out = []
    for label, kind in ABLATION_KINDS.items():
        reports = []
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            # branches are ReLU outputs inside the block; nonnegative inputs keep
            # (<u,v>+c)^d away from its stationary point, where the central
            # difference's eps^2 term swamps a vanishing gradient
            a0 = np.abs(rng.normal(0, 0.6, (r, 2, 3, 3, 2)))
            b0 = np.abs(rng.normal(0, 0.6, (r, 2, 3, 3, 2)))
            fa = lambda x: ag.sum(interact(BranchStack(x), BranchStack(Node(Tensor(b0))), kind))  # noqa: E731
            fb = lambda x: ag.sum(interact(BranchStack(Node(Tensor(a0))), BranchStack(x), kind))  # noqa: E731
            reports.append(grad_check(fa, Tensor(a0), tol=UNIT_TOL, seed=seed))
            reports.append(grad_check(fb, Tensor(b0), tol=UNIT_TOL, seed=seed))
        out.append(_merge(f"grad interact {label}", reports, UNIT_TOL))
    return out


def block_gradchecks(seeds: int = 5, kinds: Sequence[str] = tuple(ABLATION_KINDS)) -> list[CheckResult]:
    out = []
    for label in kinds:
        reports = []
        for seed in range(seeds):
            rng = np.random.default_rng(seed)
            blk = InfiBlock(BlockConfig(4, 2, ABLATION_KINDS[label], 2, 3), rng)
            _rescale(blk, rng)
            x = rng.normal(0, 1, (1, 4, 4, 4))
            # mean reduction and no identity term keep the loss small: the finite
            # difference floor is ~eps_mach*|f|/eps, which would otherwise exceed
            # 1e-4 relative on coordinates whose true gradient is below ~1e-6
            reports.extend(_module_report(blk, x, blk, seed, UNIT_TOL, max_coords=8, reduce=ag.mean,
                                          residual=True))
        out.append(_merge(f"grad infiblock {label}", reports, UNIT_TOL))
    return out


def model_gradchecks(seeds: int = 5, kind: str = "rbf") -> list[CheckResult]:
    reports = []
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        model = build_model(get_variant("micro", kind=ABLATION_KINDS[kind]), seed=seed)
        _rescale(model, rng)
        x = Node(Tensor(rng.uniform(0, 1, (2, 16, 16, 3))))
        labels = rng.integers(0, 10, 2).tolist()
        loss = lambda: cross_entropy_smoothed(model(x), labels, 0.1)  # noqa: E731
        # ~7k ReLUs, so probe pairs that straddle a kink are resampled; that frees
        # eps to grow to 1e-4, where the roundoff floor eps_mach*|f|/eps stays
        # below tolerance even for coordinates with gradients near 1e-8
        reports.append(grad_check_params(loss, dict(model.named_parameters()), eps=1e-4, tol=MODEL_TOL,
                                         max_coords=3, seed=seed, skip_kinks=True))
    res = _merge(f"grad micro model ({kind})", reports, MODEL_TOL)
    return [replace(res, detail=f"{res.detail}, {sum(r.kinks for r in reports)} kink probes resampled")]


def gradcheck_suite(scope: str = "layers", seeds: int = 5) -> list[CheckResult]:
    runners = {"layers": layer_gradchecks, "interact": interact_gradchecks,
               "block": block_gradchecks, "model": model_gradchecks}
    if scope not in runners:
        raise ValueError(f"unknown gradcheck scope {scope!r}")
    return runners[scope](seeds)


# ---------------------------------------------------------------------------
# overfit

def overfit_check(kind: str, n: int = 10, steps: int = 200, lr: float = 1e-2, seed: int = 0) -> CheckResult:
    from .training import evaluate, train_steps

    data = synth_blobs(10, 1, 16, 16, seed=seed)[:n]
    model = build_model(get_variant("micro", kind=ABLATION_KINDS[kind]), seed=seed)
    best, used = 0.0, 0
    # evaluate every 20 steps so the reported step count is meaningful
    for chunk in range(steps // 20):
        train_steps(model, data, 20, lr=lr)
        used += 20
        best = evaluate(model, data)
        if best == 1.0:
            break
    return CheckResult(f"overfit micro {kind}", best == 1.0, best, 1.0, f"{used} steps")


# ---------------------------------------------------------------------------
# interaction ordering on the demo network

DEMO_IMAGE_SIZE = 16
DEMO_TRAIN_PER_CLASS = 200
DEMO_VAL_PER_CLASS = 50
DEMO_WIDTH = 32
DEMO_BATCH = 32
DEMO_LR = 2e-3


def demo_data(size: int = DEMO_IMAGE_SIZE, per_class: int = DEMO_TRAIN_PER_CLASS,
              val_per_class: int = DEMO_VAL_PER_CLASS) -> tuple[list[Sample], list[Sample]]:
    return (synth_blobs(10, per_class, size, size, seed=1),
            synth_blobs(10, val_per_class, size, size, seed=2))


def demo_compare(train_set, val_set, epochs: int = 10, seeds: Iterable[int] = range(3), width: int = DEMO_WIDTH,
                 batch_size: int = DEMO_BATCH, lr: float = DEMO_LR, dtype=np.float32,
                 kinds: Sequence[str] = tuple(ABLATION_KINDS), parallel: int = 0,
                 progress: Callable[[str], None] | None = None) -> list[tuple[str, int, float]]:
    """Train one demo net per (kind, seed); the init seed is shared across kinds."""
    rows = []
    for seed in seeds:
        for label in kinds:
            t0 = time.perf_counter()
            model = build_demo_net(ABLATION_KINDS[label], 10, seed=seed, dtype=dtype, width=width)
            cfg = TrainConfig(total_epochs=epochs, batch_size=batch_size, base_lr=lr, seed=seed, parallel=parallel)
            res = train(model, train_set, cfg, val=val_set)
            acc = res.rows[-1].val_acc if res.rows else float("nan")
            rows.append((label, seed, acc))
            if progress:
                progress(f"{label} seed={seed} val_acc={acc:.4f} ({time.perf_counter() - t0:.0f}s)")
    return rows


def median_by_kind(rows: Sequence[tuple[str, int, float]]) -> dict[str, float]:
    grouped: dict[str, list[float]] = {}
    for kind, _, acc in rows:
        grouped.setdefault(kind, []).append(acc)
    return {k: statistics.median(v) for k, v in grouped.items()}


def ordering_check(medians: dict[str, float], margin: float = 0.01) -> CheckResult:
    rbf, had, add = medians["rbf"], medians["hadamard"], medians["add"]
    ok = rbf >= had >= add and rbf - add >= margin
    detail = " ".join(f"{k}={v:.4f}" for k, v in medians.items())
    return CheckResult("ordering rbf >= hadamard >= add, rbf-add >= 1pt", ok, rbf - add, margin, detail)
