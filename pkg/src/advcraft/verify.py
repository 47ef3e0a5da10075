"""Executable verification of the library's correctness criteria.

Each check is an independent oracle: finite differences against the tape
gradients, dot-product identities for transform adjoints, bit-exact
reduction equivalences between attack variants, randomized budget trials,
step-geometry checks against a hand-computed trace, the crop-invariance
probe, white-box saturation, transfer-ordering comparisons, and report
determinism across worker counts.

``run_all`` prints one PASS/FAIL line per criterion; the same functions
back ``tests/test_acceptance.py``.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import models as mdl
from . import transforms as tf
from .attacks import VARIANTS, _adabelief_step, attack_config, run_attack
from .autodiff import (
    Tape,
    Tensor,
    finite_difference_gradient,
    input_gradient,
    softmax_cross_entropy,
)
from .config import dataset_from_config, load_config, load_zoo, save_zoo, zoo_from_config
from .data import select_correctly_classified, stack_examples
from .evaluate import (
    EvalConfig,
    emit_probe_report,
    reports_to_csv,
    run_attack_eval,
    run_bench,
    run_probe,
    stable_band_width,
)

ITERATIVE_VARIANTS = ("i-fgsm", "mi-fgsm", "ni-fgsm", "abi-fgm",
                      "si-ni-fgsm", "ci-mi-fgsm", "ci-ni-fgsm", "ci-ab-fgm")


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.detail} [{self.seconds:.1f}s]"


def _rng(seed) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def _random_architecture(rng, channels, side, classes):
    """A random small layer chain ending in a dense head."""
    kind = rng.integers(0, 4)
    geometry = (channels, side, side)
    if kind == 0:  # pure MLP
        hidden = int(rng.integers(4, 12))
        layers = [mdl.flatten(), mdl.dense(channels * side * side, hidden),
                  mdl.relu(), mdl.dense(hidden, classes)]
    elif kind == 1:  # single conv
        out_ch = int(rng.integers(2, 5))
        k = int(rng.choice([3, 5]))
        layers = [mdl.conv2d(channels, out_ch, k), mdl.relu(), mdl.flatten()]
        flat = mdl.infer_shapes(tuple(layers), geometry)[-1][0]
        layers.append(mdl.dense(flat, classes))
    elif kind == 2:  # conv + pool
        out_ch = int(rng.integers(2, 5))
        layers = [mdl.conv2d(channels, out_ch, 3), mdl.relu(), mdl.maxpool2(), mdl.flatten()]
        flat = mdl.infer_shapes(tuple(layers), geometry)[-1][0]
        layers.append(mdl.dense(flat, classes))
    else:  # two convs
        mid = int(rng.integers(2, 4))
        layers = [mdl.conv2d(channels, mid, 3), mdl.relu(), mdl.conv2d(mid, mid + 1, 3),
                  mdl.relu(), mdl.flatten()]
        flat = mdl.infer_shapes(tuple(layers), geometry)[-1][0]
        layers.append(mdl.dense(flat, classes))
    return tuple(layers), geometry


def _random_model(rng, *, side=8, classes=3):
    channels = int(rng.integers(1, 3))
    arch, geometry = _random_architecture(rng, channels, side, classes)
    return mdl.init_model(arch, geometry, int(rng.integers(0, 2 ** 31)))


def check_gradient_oracle(cases: int = 20, h: float = 1e-5, limit: float = 1e-4) -> CheckResult:
    """Analytic input gradients against central finite differences."""
    start = time.time()
    rng = _rng(101)
    worst = 0.0
    for _ in range(cases):
        model = _random_model(rng)
        x = Tensor(rng.random((1, *model.geometry)))
        label = int(rng.integers(0, model.classes))
        tape = Tape()
        loss = softmax_cross_entropy(mdl._forward(model, x, tape), [label], tape)
        analytic = input_gradient(tape, loss)

        def f(xx, _m=model, _l=label):
            t = Tape()
            return softmax_cross_entropy(mdl._forward(_m, xx, t), [_l], t)

        fd = finite_difference_gradient(f, x, h)
        rel = np.abs(analytic.data - fd.data).max() / (np.abs(fd.data).max() + 1e-12)
        worst = max(worst, rel)
    return CheckResult("gradient-oracle", worst < limit,
                       f"max relative error {worst:.3e} over {cases} models (limit {limit:g})",
                       time.time() - start)


def check_adjoint_identity(trials: int = 1000, limit: float = 1e-10) -> CheckResult:
    """<C x, y> == <x, C^T y> for random crop/pad and diverse-input draws."""
    start = time.time()
    rng = _rng(202)
    worst = 0.0
    for _ in range(trials):
        side = int(rng.integers(4, 13))
        channels = int(rng.integers(1, 3))
        x = Tensor(rng.random((channels, side, side)))
        y = Tensor(rng.random((channels, side, side)))
        prm = tf.sample_crop(rng, side, int(rng.integers(1, side + 1)))
        lhs = float(np.sum(tf.apply_crop_pad(x, prm).data * y.data))
        rhs = float(np.sum(x.data * tf.adjoint_crop_pad(y, prm).data))
        worst = max(worst, abs(lhs - rhs))
    for _ in range(trials):
        side = int(rng.integers(4, 13))
        channels = int(rng.integers(1, 3))
        x = Tensor(rng.random((channels, side, side)))
        y = Tensor(rng.random((channels, side, side)))
        prm = tf.sample_diverse_input(rng, side, 1.0)
        lhs = float(np.sum(tf.apply_diverse_input_params(x, prm).data * y.data))
        rhs = float(np.sum(x.data * tf.adjoint_diverse_input(y, prm).data))
        worst = max(worst, abs(lhs - rhs))
    return CheckResult("adjoint-identity", worst < limit,
                       f"max |<Cx,y> - <x,C'y>| = {worst:.2e} over 2x{trials} draws (limit {limit:g})",
                       time.time() - start)


def check_reductions() -> CheckResult:
    """Bit-exact equivalences between degenerate attack configurations."""
    start = time.time()
    rng = _rng(303)
    model = _random_model(rng, side=8, classes=4)
    x = Tensor(rng.random((4, *model.geometry)))
    y = rng.integers(0, model.classes, size=4)

    def craft(variant, **kw):
        return run_attack(attack_config(variant, epsilon=0.1, seed=9, **kw), model, x, y).data

    pairs = [
        ("i-fgsm(T=1) == fgsm",
         craft("i-fgsm", iterations=1), craft("fgsm", iterations=1)),
        ("mi-fgsm(mu=0) == i-fgsm",
         craft("mi-fgsm", iterations=6, mu=0.0), craft("i-fgsm", iterations=6)),
        ("ni-fgsm(mu=0) == i-fgsm",
         craft("ni-fgsm", iterations=6, mu=0.0), craft("i-fgsm", iterations=6)),
        ("ci-mi-fgsm(identity crop, m=1) == mi-fgsm",
         craft("ci-mi-fgsm", iterations=6, crop_min_fraction=1.0, copies=1),
         craft("mi-fgsm", iterations=6)),
        ("ci-ab-fgm(identity crop, m=1) == abi-fgm",
         craft("ci-ab-fgm", iterations=6, crop_min_fraction=1.0, copies=1),
         craft("abi-fgm", iterations=6)),
        ("dim(p=0) == dim off",
         craft("ci-ab-dim", iterations=4, dim_prob=0.0), craft("ci-ab-fgm", iterations=4)),
        ("ti(k=1) == ti off",
         craft("ci-ab-tim", iterations=4, ti_kernel_size=1), craft("ci-ab-fgm", iterations=4)),
        ("scale(s=1 forced) == scale off",
         craft("ci-ab-sim", iterations=4, scale_mode="halving", copies=1),
         craft("ci-ab-fgm", iterations=4, copies=1)),
    ]
    failures = [name for name, a, b in pairs if not np.array_equal(a, b)]
    return CheckResult("reduction-equivalences", not failures,
                       "all bit-exact" if not failures else f"failed: {', '.join(failures)}",
                       time.time() - start)


def check_budget(trials: int = 10_000) -> CheckResult:
    """L-inf budget and pixel range at every iteration of randomized attacks."""
    start = time.time()
    rng = _rng(404)
    models = [_random_model(rng, side=6, classes=2) for _ in range(5)]
    variants = sorted(VARIANTS)
    worst = 0.0
    bad_range = 0
    for trial in range(trials):
        model = models[int(rng.integers(0, len(models)))]
        variant = variants[int(rng.integers(0, len(variants)))]
        eps = float(rng.uniform(0.01, 0.2))
        overrides = {
            "epsilon": eps,
            "iterations": int(rng.integers(1, 5)),
            "mu": float(rng.uniform(0.0, 1.5)),
            "seed": trial,
        }
        if rng.random() < 0.3:
            overrides["alpha"] = float(rng.uniform(0.005, 0.1))
        if rng.random() < 0.3:
            overrides["copies"] = int(rng.integers(1, 4))
        if rng.random() < 0.3:
            overrides["crop_min_fraction"] = float(rng.uniform(0.5, 1.0))
        # presets may carry 7x7 kernels, too big for 6x6 trial images
        overrides["ti_kernel_size"] = int(rng.choice([0, 1, 3]))
        if rng.random() < 0.2:
            overrides["dim_prob"] = float(rng.random())
        if rng.random() < 0.2:
            overrides["final_update"] = "sign_step"
        cfg = attack_config(variant, **overrides)
        x = Tensor(rng.random((1, *model.geometry)))
        y = [int(rng.integers(0, model.classes))]
        diag: list = []
        adv = run_attack(cfg, model, x, y, diagnostics=diag)
        worst = max(worst, max(d["linf"] - eps for d in diag))
        if adv.data.min() < 0.0 or adv.data.max() > 1.0:
            bad_range += 1
    ok = worst <= 1e-9 and bad_range == 0
    return CheckResult("linf-budget", ok,
                       f"max L-inf excess {worst:.2e} (limit 1e-9), "
                       f"{bad_range} range violations over {trials} trials",
                       time.time() - start)


def check_abi_geometry(runs: int = 100) -> CheckResult:
    """Pre-projection AdaBelief steps have L2 length alpha; scalar trace matches."""
    start = time.time()
    rng = _rng(505)
    worst = 0.0
    for run in range(runs):
        model = _random_model(rng, side=6, classes=2)
        iters = int(rng.integers(2, 7))
        cfg = attack_config("abi-fgm", epsilon=float(rng.uniform(0.02, 0.2)),
                            iterations=iters,
                            beta1=float(rng.uniform(0.5, 0.99)),
                            beta2=float(rng.uniform(0.9, 0.9999)), seed=run)
        x = Tensor(rng.random((1, *model.geometry)))
        diag: list = []
        run_attack(cfg, model, x, [0], diagnostics=diag)
        for d in diag:
            if d["l2_step"] > 0.0:
                worst = max(worst, abs(d["l2_step"] - cfg.step_size))
    geometry_ok = worst < 1e-6

    # hand-computed first-step trace for raw gradient [3, 1]:
    # g = [0.75, 0.25] after L1 normalization, beta1=0.9, beta2=0.999, delta=1e-8
    cfg = attack_config("abi-fgm", epsilon=0.1, beta1=0.9, beta2=0.999, delta=1e-8)
    ghat = np.array([0.75, 0.25])
    m1, s1, direction = _adabelief_step(np.zeros(2), np.zeros(2), ghat, 0, cfg)
    expected = {
        "m1": np.array([0.075, 0.025]),
        "s1": np.array([4.55625e-4, 5.0625e-5]),
        "d": np.array([1.1110989058557359, 1.1110012782902757]),
    }
    trace_err = max(
        np.abs(m1 - expected["m1"]).max(),
        np.abs(s1 - expected["s1"]).max(),
        np.abs(direction - expected["d"]).max(),
    )
    trace_ok = trace_err < 1e-9
    return CheckResult("abi-step-geometry", geometry_ok and trace_ok,
                       f"max |L2 step - alpha| = {worst:.2e} over {runs} runs (limit 1e-6); "
                       f"scalar trace error {trace_err:.2e} (limit 1e-9)",
                       time.time() - start)


def check_ti_kernel() -> CheckResult:
    """Gaussian kernel normalization/symmetry; size-1 convolution is identity."""
    start = time.time()
    kern = tf.gaussian_kernel(7, 7 / np.sqrt(3.0))
    w = kern.weights
    sum_ok = abs(w.sum() - 1.0) <= 1e-12
    sym_ok = np.array_equal(w, w[::-1, ::-1]) and np.array_equal(w, w[::-1, :])
    center_ok = w[3, 3] == w.max() and (w >= 0).all()
    rng = _rng(606)
    g = Tensor(rng.standard_normal((2, 9, 9)))
    identity_ok = np.array_equal(
        tf.convolve_gradient(g, tf.gaussian_kernel(1, 1.0)).data, g.data)
    ok = sum_ok and sym_ok and center_ok and identity_ok
    return CheckResult("ti-kernel", ok,
                       f"7x7 sum deviation {abs(w.sum() - 1.0):.2e} (limit 1e-12), "
                       f"symmetric={sym_ok}, k=1 identity={identity_ok}",
                       time.time() - start)


# --- trained-model criteria ----------------------------------------------

class VerifyContext:
    """Shared heavyweight state: datasets and the trained zoo (disk-cached)."""

    def __init__(self, workdir=None, config_path=None):
        self.config = load_config(config_path)
        self.workdir = Path(workdir) if workdir is not None else None
        self.train_data = dataset_from_config(self.config)
        self.holdout = dataset_from_config(self.config, holdout=True)
        self.zoo = self._zoo()

    def _zoo(self) -> dict:
        digest = hashlib.sha256(json.dumps(
            {"dataset": self.config["dataset"], "holdout": self.config.get("holdout", {}),
             "zoo": self.config["zoo"]}, sort_keys=True).encode()).hexdigest()[:10]
        cache = self.workdir / f"zoo-{digest}" if self.workdir is not None else None
        if cache is not None and cache.is_dir() and list(cache.glob("*.pbck")):
            return load_zoo(cache)
        zoo = zoo_from_config(self.config, self.train_data)
        if cache is not None:
            save_zoo(zoo, cache)
        return zoo


def check_crop_probe(ctx: VerifyContext, *, model_name: str = "cnn-a",
                     limit: float = 0.25) -> CheckResult:
    """Mean loss stays within 25% of the clean loss across the stable crop band."""
    start = time.time()
    model = ctx.zoo[model_name]
    acc = mdl.accuracy(model, ctx.holdout)
    report = run_probe(model, ctx.holdout, seed=ctx.config["eval"]["seed"])
    if ctx.workdir is not None:
        emit_probe_report(report, Path(ctx.workdir) / f"crop_probe_{model_name}.csv")
    base = report.rows[0][1]
    band = stable_band_width(ctx.holdout.geometry[-1])
    stable = [(w, loss) for w, loss, _ in report.rows if 0 < w <= band]
    worst = max((abs(loss - base) / base for _, loss in stable), default=0.0)
    ok = acc >= 0.95 and len(ctx.holdout) >= 1000 and worst < limit
    return CheckResult(
        "crop-invariance-probe", ok,
        f"{model_name} holdout accuracy {acc:.3f} (need >= 0.95), "
        f"max stable-band loss deviation {worst:.1%} over widths <= {band} "
        f"(limit {limit:.0%}, {len(ctx.holdout)} images)",
        time.time() - start)


def check_whitebox(ctx: VerifyContext, *, examples: int = 500,
                   threshold: float = 0.99) -> CheckResult:
    """Every iterative variant saturates white-box success on every zoo model."""
    start = time.time()
    selected = select_correctly_classified(
        list(ctx.zoo.values()), ctx.holdout, examples, ctx.config["eval"]["seed"])
    images, labels = stack_examples(selected)
    overrides = dict(ctx.config["attack"])
    worst = (1.0, "")
    from .evaluate import craft_batched, _misclassification
    for name, model in sorted(ctx.zoo.items()):
        for variant in ITERATIVE_VARIANTS:
            cfg = attack_config(variant, epsilon=16 / 255, iterations=10,
                                seed=overrides.get("seed", 0))
            adv = craft_batched(model, images, labels, cfg, batch=examples)
            rate = _misclassification(model, adv, labels)
            if rate < worst[0]:
                worst = (rate, f"{variant} on {name}")
    ok = worst[0] >= threshold
    return CheckResult(
        "whitebox-success", ok,
        f"minimum white-box success {worst[0]:.1%} ({worst[1]}) over "
        f"{len(ITERATIVE_VARIANTS)} variants x {len(ctx.zoo)} models, "
        f"{examples} examples (need >= {threshold:.0%})",
        time.time() - start)


def check_transfer_ordering(ctx: VerifyContext, *, source: str = "cnn-a",
                            seeds=(0, 1, 2, 3, 4), gap_pp: float = 5.0) -> CheckResult:
    """CI-AB-FGM beats MI-FGSM black-box by >= 5pp; ensemble full stack beats DIM."""
    start = time.time()
    normal = [n for n in ("cnn-a", "cnn-b", "cnn-c", "mlp")]
    held_out = tuple(n for n in normal if n != source)
    examples = ctx.config["eval"]["examples"]
    overrides = dict(ctx.config["attack"])
    overrides.pop("seed", None)

    def mean_blackbox(variant, seed):
        cfg = EvalConfig(
            sources=(source,), targets=held_out,
            attack=attack_config(variant, seed=seed, **overrides),
            examples=examples, selection="all", seed=seed,
            batch=ctx.config["eval"]["batch"])
        report = run_attack_eval(ctx.zoo, ctx.holdout, cfg)
        return float(np.mean([e.success_rate for e in report.entries]))

    mi = [mean_blackbox("mi-fgsm", s) for s in seeds]
    ciab = [mean_blackbox("ci-ab-fgm", s) for s in seeds]
    gap = 100.0 * (float(np.mean(ciab)) - float(np.mean(mi)))
    single_ok = gap >= gap_pp

    defended = tuple(n for n in ("cnn-a-adv", "cnn-b-ens3", "cnn-c-ens") if n in ctx.zoo)
    ens_seed = seeds[0]

    def ensemble_rates(variant):
        cfg = EvalConfig(
            sources=tuple(normal), targets=defended,
            attack=attack_config(variant, seed=ens_seed, **overrides),
            examples=examples, selection="all", seed=ens_seed,
            batch=ctx.config["eval"]["batch"])
        report = run_attack_eval(ctx.zoo, ctx.holdout, cfg)
        return {e.target: e.success_rate for e in report.entries}

    dim_rates = ensemble_rates("dim")
    full_rates = ensemble_rates("ci-ab-si-ti-dim")
    losing = [t for t in defended if full_rates[t] <= dim_rates[t]]
    ensemble_ok = not losing
    ens_detail = ", ".join(
        f"{t}: {100 * full_rates[t]:.1f} vs {100 * dim_rates[t]:.1f}" for t in defended)
    return CheckResult(
        "transfer-ordering", single_ok and ensemble_ok,
        f"CI-AB-FGM - MI-FGSM black-box gap {gap:+.1f}pp over {len(seeds)} seeds "
        f"(need >= +{gap_pp:.0f}pp); ensemble CI-AB-SI-TI-DIM vs DIM on defended "
        f"targets: {ens_detail}" + ("" if ensemble_ok else f"; NOT ahead on {losing}"),
        time.time() - start)


def check_determinism(ctx: VerifyContext, *, examples: int = 40) -> CheckResult:
    """bench output is byte-identical for 1-worker and 4-worker runs."""
    start = time.time()
    kwargs = dict(
        examples=examples, seed=ctx.config["eval"]["seed"], batch=10,
        bases=("mi-fgsm", "ci-ab-fgm"), augs=("plain",), sources=("cnn-a",),
        include_ensemble=False, attack_overrides=dict(ctx.config["attack"]))
    one = run_bench(ctx.zoo, ctx.holdout, workers=1, **kwargs)
    four = run_bench(ctx.zoo, ctx.holdout, workers=4, **kwargs)
    csv_one, csv_four = reports_to_csv(one), reports_to_csv(four)
    json_one = json.dumps([r.config_hash for r in one]) + json.dumps(
        [[e.success_rate for e in r.entries] for r in one])
    json_four = json.dumps([r.config_hash for r in four]) + json.dumps(
        [[e.success_rate for e in r.entries] for r in four])
    ok = csv_one == csv_four and json_one == json_four
    return CheckResult("bench-determinism", ok,
                       "1-worker and 4-worker reports byte-identical" if ok
                       else "reports differ between worker counts",
                       time.time() - start)


QUICK_CHECKS = (
    check_gradient_oracle,
    check_adjoint_identity,
    check_reductions,
    check_budget,
    check_abi_geometry,
    check_ti_kernel,
)

CONTEXT_CHECKS = (
    check_crop_probe,
    check_whitebox,
    check_transfer_ordering,
    check_determinism,
)


def run_all(workdir=None, quick: bool = False, config_path=None) -> list:
    """Run the verification suite, printing one PASS/FAIL line per criterion."""
    results = []
    for check in QUICK_CHECKS:
        result = check()
        print(result.line(), flush=True)
        results.append(result)
    if not quick:
        if workdir is not None:
            Path(workdir).mkdir(parents=True, exist_ok=True)
        ctx = VerifyContext(workdir=workdir, config_path=config_path)
        for check in CONTEXT_CHECKS:
            result = check(ctx)
            print(result.line(), flush=True)
            results.append(result)
    return results
