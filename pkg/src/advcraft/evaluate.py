"""Experiment orchestration: success-rate evaluation and report emission.

An evaluation crafts adversarial examples on a source (single model or an
equal-weight ensemble) and measures the misclassification rate of each
target model on the result. Examples are pre-filtered to be correctly
classified, so misclassification equals attack success. Reports embed the
fully resolved attack config hash, seeds, and library version so that two
reports with equal hashes used identical effective parameters.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import __version__
from .attacks import AttackConfig, EnsembleSpec, run_attack
from .autodiff import Tensor
from .data import Dataset, select_correctly_classified, stack_examples
from .errors import ConfigError
from .models import forward_logits
from .transforms import crop_invariance_loss_curve, curve_to_csv

SELECTION_RULES = ("all", "sources")


@dataclass(frozen=True)
class EvalConfig:
    """One evaluation cell: sources x targets under a fixed attack."""

    sources: tuple
    targets: tuple
    attack: AttackConfig
    examples: int = 100
    selection: str = "all"
    seed: int = 0
    batch: int = 100
    fusion: str = "loss"

    def __post_init__(self):
        if not self.sources:
            raise ConfigError("evaluation needs at least one source model")
        if self.examples < 1:
            raise ConfigError(f"examples must be >= 1, got {self.examples}")
        if self.selection not in SELECTION_RULES:
            raise ConfigError(f"unknown selection rule {self.selection!r}")
        if self.batch < 1:
            raise ConfigError(f"batch must be >= 1, got {self.batch}")
        object.__setattr__(self, "sources", tuple(self.sources))
        object.__setattr__(self, "targets", tuple(self.targets))


@dataclass(frozen=True)
class SuccessEntry:
    target: str
    success_rate: float
    count: int
    white_box: bool


@dataclass(frozen=True)
class SuccessReport:
    """Success rates of one attack against every target, with provenance."""

    attack: str
    sources: tuple
    entries: tuple
    examples: int
    seed: int
    config_hash: str
    version: str

    def rate(self, target: str) -> float:
        for entry in self.entries:
            if entry.target == target:
                return entry.success_rate
        raise KeyError(target)


@dataclass(frozen=True)
class CropProbeReport:
    """Mean loss/accuracy per crop width for one model."""

    model: str
    seed: int
    rows: tuple

    def __post_init__(self):
        widths = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(widths, widths[1:])):
            raise ConfigError("probe widths must be strictly increasing")


def config_hash(cfg: AttackConfig, extra: dict | None = None) -> str:
    """Content hash of the resolved attack config (plus evaluation context)."""
    payload = asdict(cfg)
    if extra:
        payload.update(extra)
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def craft_batched(target, images: np.ndarray, labels: np.ndarray, cfg: AttackConfig,
                  *, batch: int = 100, workers: int = 1,
                  diagnostics: list | None = None) -> np.ndarray:
    """Craft adversarial examples in fixed-size chunks, optionally in parallel.

    Chunk boundaries depend only on ``batch`` and per-example randomness
    only on the global example index, so results are byte-identical for
    any worker count.
    """
    n = images.shape[0]
    starts = list(range(0, n, batch))

    def one(start):
        stop = min(start + batch, n)
        diag = [] if diagnostics is not None else None
        adv = run_attack(cfg, target, Tensor(images[start:stop]), labels[start:stop],
                         diagnostics=diag, example_ids=range(start, stop))
        return start, adv.data, diag

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(one, starts))
    else:
        parts = [one(s) for s in starts]
    out = np.empty_like(images)
    for start, adv, diag in sorted(parts, key=lambda p: p[0]):
        out[start:start + adv.shape[0]] = adv
        if diagnostics is not None:
            diagnostics.extend(diag)
    return out


def _misclassification(model, images: np.ndarray, labels: np.ndarray) -> float:
    wrong = 0
    for start in range(0, images.shape[0], 512):
        logits = forward_logits(model, Tensor(images[start:start + 512]))
        wrong += int((logits.data.argmax(axis=1) != labels[start:start + 512]).sum())
    return wrong / images.shape[0]


def run_attack_eval(zoo: dict, data: Dataset, cfg: EvalConfig, *, workers: int = 1,
                    diagnostics: list | None = None) -> SuccessReport:
    """Craft on the sources, score misclassification on every target."""
    for name in list(cfg.sources) + list(cfg.targets):
        if name not in zoo:
            raise ConfigError(f"model {name!r} not in the zoo ({', '.join(sorted(zoo))})")
    filter_names = sorted(zoo) if cfg.selection == "all" else list(cfg.sources)
    examples = select_correctly_classified(
        [zoo[m] for m in filter_names], data, cfg.examples, cfg.seed)
    images, labels = stack_examples(examples)
    if len(cfg.sources) == 1:
        target_model = zoo[cfg.sources[0]]
    else:
        target_model = EnsembleSpec.equal([zoo[m] for m in cfg.sources], fusion=cfg.fusion)
    adv = craft_batched(target_model, images, labels, cfg.attack,
                        batch=cfg.batch, workers=workers, diagnostics=diagnostics)
    entries = tuple(
        SuccessEntry(
            target=name,
            success_rate=_misclassification(zoo[name], adv, labels),
            count=images.shape[0],
            white_box=name in cfg.sources,
        )
        for name in cfg.targets
    )
    digest = config_hash(cfg.attack, {
        "sources": list(cfg.sources), "targets": list(cfg.targets),
        "examples": cfg.examples, "selection": cfg.selection,
        "eval_seed": cfg.seed, "fusion": cfg.fusion,
    })
    return SuccessReport(
        attack=cfg.attack.variant, sources=cfg.sources, entries=entries,
        examples=images.shape[0], seed=cfg.seed, config_hash=digest,
        version=__version__)


def run_probe(model, data: Dataset, seed: int = 0, *, name: str | None = None) -> CropProbeReport:
    """Crop-invariance probe: widths 0..round(H * 40/299) in steps of 2."""
    h = data.geometry[-1]
    max_width = int(round(h * 40 / 299))
    widths = list(range(0, max_width + 1, 2))
    rows = crop_invariance_loss_curve(model, data, widths, seed=seed)
    label = name if name is not None else model.metadata.get("name", "model")
    return CropProbeReport(model=label, seed=seed, rows=tuple(rows))


def stable_band_width(side: int) -> int:
    """Largest crop width inside the loss-stable band, scaled from 20/299."""
    return int(round(side * 20 / 299))


def report_rows(report: SuccessReport) -> list:
    source = "+".join(report.sources)
    return [
        (report.attack, source, e.target, e.white_box,
         f"{100.0 * e.success_rate:.3f}", e.count, report.seed, report.config_hash)
        for e in report.entries
    ]


CSV_HEADER = "attack,source,target,white_box,success_rate,n,seed,config_hash"


def reports_to_csv(reports) -> str:
    lines = [CSV_HEADER]
    for report in reports:
        for row in report_rows(report):
            lines.append(",".join(str(v).lower() if isinstance(v, bool) else str(v)
                                  for v in row))
    return "\n".join(lines) + "\n"


def report_to_dict(report: SuccessReport) -> dict:
    return {
        "attack": report.attack,
        "sources": list(report.sources),
        "entries": [asdict(e) for e in report.entries],
        "examples": report.examples,
        "seed": report.seed,
        "config_hash": report.config_hash,
        "version": report.version,
    }


def report_from_dict(payload: dict) -> SuccessReport:
    return SuccessReport(
        attack=payload["attack"],
        sources=tuple(payload["sources"]),
        entries=tuple(SuccessEntry(**e) for e in payload["entries"]),
        examples=payload["examples"],
        seed=payload["seed"],
        config_hash=payload["config_hash"],
        version=payload["version"],
    )


def emit_report(report, fmt: str, path) -> None:
    """Write a report (or list of reports) as CSV or JSON."""
    reports = report if isinstance(report, (list, tuple)) else [report]
    try:
        if fmt == "csv":
            text = reports_to_csv(reports)
        elif fmt == "json":
            text = json.dumps([report_to_dict(r) for r in reports],
                              sort_keys=True, indent=2) + "\n"
        else:
            raise ConfigError(f"unknown report format {fmt!r}")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(f"cannot write report to {path}: {exc}") from exc


def emit_probe_report(report: CropProbeReport, path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(curve_to_csv(report.rows))
    except OSError as exc:
        raise OSError(f"cannot write probe report to {path}: {exc}") from exc


# --- benchmark sweep ----------------------------------------------------

BENCH_BASES = ("mi-fgsm", "ni-fgsm", "abi-fgm", "si-ni-fgsm",
               "ci-mi-fgsm", "ci-ni-fgsm", "ci-ab-fgm")
BENCH_AUGS = ("plain", "dim", "tim", "ti-dim", "sim", "si-ti-dim")


def augmented_config(base: str, aug: str, **overrides) -> AttackConfig:
    """Compose a base attack with a transform augmentation from the sweep grid.

    The scale augmentation keeps the cited halving rule standalone but
    switches to random scales in [0.1, 1] when combined with crop copies.
    """
    from dataclasses import replace

    from .attacks import attack_config

    if aug not in BENCH_AUGS:
        raise ConfigError(f"unknown augmentation {aug!r}; known: {', '.join(BENCH_AUGS)}")
    toggles: dict = {}
    if aug in ("dim", "ti-dim", "si-ti-dim"):
        toggles["dim_prob"] = 0.5
    if aug in ("tim", "ti-dim", "si-ti-dim"):
        toggles["ti_kernel_size"] = 7
    if aug in ("sim", "si-ti-dim"):
        toggles["copies"] = 5
        preset_crop = attack_config(base).crop_min_fraction
        toggles["scale_mode"] = "random" if preset_crop < 1.0 else "halving"
    cfg = attack_config(base, **toggles, **overrides)
    name = base if aug == "plain" else f"{base}+{aug}"
    return replace(cfg, variant=name)


def run_bench(zoo: dict, data: Dataset, *, examples: int = 100, seed: int = 0,
              batch: int = 100, bases=BENCH_BASES, augs=BENCH_AUGS,
              sources=None, include_ensemble: bool = True, selection: str = "all",
              attack_overrides: dict | None = None, workers: int = 1) -> list:
    """The full tables sweep: bases x augmentations x (single sources + ensemble)."""
    targets = tuple(sorted(zoo))
    source_sets = [(name,) for name in (sources if sources is not None else targets)]
    if include_ensemble:
        normal = tuple(n for n in ("cnn-a", "cnn-b", "cnn-c", "mlp") if n in zoo)
        if len(normal) >= 2 and (normal not in source_sets):
            source_sets.append(normal)
    overrides = attack_overrides or {}
    reports = []
    for source_set in source_sets:
        for aug in augs:
            for base in bases:
                cfg = augmented_config(base, aug, seed=seed, **overrides)
                eval_cfg = EvalConfig(
                    sources=tuple(source_set), targets=targets, attack=cfg,
                    examples=examples, selection=selection, seed=seed, batch=batch)
                reports.append(run_attack_eval(zoo, data, eval_cfg, workers=workers))
    return reports
