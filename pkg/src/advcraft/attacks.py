"""The gradient attack family, from FGSM to CI-AB-SI-TI-DIM.

Every named method is a configuration of one iteration engine:

* gradient source: the weighted average of input gradients taken through
  ``copies`` randomly transformed views of the current iterate (scale,
  crop-and-pad, diverse input -- each chained back via its exact adjoint);
* optional smoothing of that averaged gradient with a Gaussian kernel;
* a direction rule: plain sign step, momentum sign step, Nesterov
  look-ahead sign step, or an AdaBelief move of exact L2 length alpha;
* projection onto the L-inf ball around the clean image intersected with
  the valid pixel range [0, 1].

Crafting is deterministic: every random draw for example ``n`` comes from
``example_stream(cfg.seed, n)``, so results do not depend on batching or
scheduling order.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from math import floor

import numpy as np

from . import transforms as tf
from .autodiff import Tensor, _fresh
from .errors import ConfigError, ShapeError

#: Proportional lower crop bound: the crop side is at least this fraction
#: of the image side, preserving a <= ~6.7% cropped border at any scale.
CROP_FRACTION = 279 / 299

DIRECTIONS = ("sign-step", "sign-momentum", "sign-nesterov", "adabelief")
SCALE_MODES = ("off", "random", "halving")
FINAL_UPDATES = ("clip", "sign_step")


@dataclass(frozen=True)
class AttackConfig:
    """Every knob of the attack family.

    Arguments:
        epsilon: L-inf budget in [0, 1] pixel units (16/255 matches the
            usual 16-of-255 setting).
        iterations: number of update steps T.
        alpha: step size; defaults to epsilon / iterations.
        mu: momentum decay factor.
        beta1, beta2: AdaBelief moment decay factors.
        delta: AdaBelief stability factor.
        copies: number of transformed views averaged per step (m).
        weights: per-copy weights, sum 1; uniform when None.
        crop_min_fraction: lower bound of the crop side as a fraction of
            the image side; 1.0 disables cropping.
        dim_prob: probability of the diverse-input transform per view.
        scale_mode: "off", "random" (uniform [0.1, 1] per view) or
            "halving" (view i scaled by 1/2**i).
        ti_kernel_size: Gaussian smoothing kernel size, 0 disables.
        ti_sigma: kernel sigma; defaults to size / sqrt(3).
        direction: update rule.
        final_update: how the literal trailing update step of the
            AdaBelief-based algorithms is read: "clip" projects the
            AdaBelief move, "sign_step" appends a sign step before
            projecting. Ignored by the sign rules.
        seed: root seed for the per-example draw streams.
    """

    epsilon: float = 16 / 255
    iterations: int = 10
    alpha: float | None = None
    mu: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    delta: float = 1e-8
    copies: int = 1
    weights: tuple | None = None
    crop_min_fraction: float = 1.0
    dim_prob: float = 0.0
    scale_mode: str = "off"
    ti_kernel_size: int = 0
    ti_sigma: float | None = None
    direction: str = "sign-momentum"
    final_update: str = "clip"
    seed: int = 0
    variant: str = "custom"

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.iterations < 1:
            raise ConfigError(f"iterations must be >= 1, got {self.iterations}")
        if self.alpha is not None and self.alpha <= 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.mu < 0:
            raise ConfigError(f"mu must be nonnegative, got {self.mu}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ConfigError(f"{name} must be in (0, 1), got {v}")
        if self.delta <= 0:
            raise ConfigError(f"delta must be positive, got {self.delta}")
        if self.copies < 1:
            raise ConfigError(f"copies must be >= 1, got {self.copies}")
        if self.weights is not None:
            w = tuple(float(v) for v in self.weights)
            if len(w) != self.copies:
                raise ConfigError(f"{len(w)} weights for {self.copies} copies")
            if abs(sum(w) - 1.0) > 1e-12:
                raise ConfigError(f"copy weights must sum to 1, got {sum(w)!r}")
            object.__setattr__(self, "weights", w)
        if not (0.0 <= self.dim_prob <= 1.0):
            raise ConfigError(f"dim_prob must be in [0, 1], got {self.dim_prob}")
        if not (0.0 < self.crop_min_fraction <= 1.0):
            raise ConfigError(f"crop_min_fraction must be in (0, 1], got {self.crop_min_fraction}")
        if self.scale_mode not in SCALE_MODES:
            raise ConfigError(f"unknown scale_mode {self.scale_mode!r}")
        if self.ti_kernel_size < 0 or (self.ti_kernel_size > 0 and self.ti_kernel_size % 2 == 0):
            raise ConfigError(f"ti_kernel_size must be 0 (off) or odd, got {self.ti_kernel_size}")
        if self.ti_sigma is not None and self.ti_sigma <= 0:
            raise ConfigError(f"ti_sigma must be positive, got {self.ti_sigma}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"unknown direction rule {self.direction!r}")
        if self.final_update not in FINAL_UPDATES:
            raise ConfigError(f"unknown final_update {self.final_update!r}")

    @property
    def step_size(self) -> float:
        return self.alpha if self.alpha is not None else self.epsilon / self.iterations

    def copy_weights(self) -> np.ndarray:
        if self.weights is not None:
            return np.asarray(self.weights, dtype=np.float64)
        return np.full(self.copies, 1.0 / self.copies)


#: Named methods as exact presets of the iteration engine.
VARIANTS = {
    "fgsm": {"direction": "sign-step", "iterations": 1, "alpha": None},
    "i-fgsm": {"direction": "sign-step"},
    "mi-fgsm": {"direction": "sign-momentum"},
    "ni-fgsm": {"direction": "sign-nesterov"},
    "abi-fgm": {"direction": "adabelief"},
    "si-ni-fgsm": {"direction": "sign-nesterov", "copies": 5, "scale_mode": "halving"},
    "dim": {"direction": "sign-momentum", "dim_prob": 0.5},
    "tim": {"direction": "sign-momentum", "ti_kernel_size": 7},
    "ti-dim": {"direction": "sign-momentum", "dim_prob": 0.5, "ti_kernel_size": 7},
    "sim": {"direction": "sign-momentum", "copies": 5, "scale_mode": "halving"},
    "si-ni-ti-dim": {"direction": "sign-nesterov", "copies": 5, "scale_mode": "halving",
                     "dim_prob": 0.5, "ti_kernel_size": 7},
    "ci-mi-fgsm": {"direction": "sign-momentum", "copies": 5,
                   "crop_min_fraction": CROP_FRACTION},
    "ci-ni-fgsm": {"direction": "sign-nesterov", "copies": 5,
                   "crop_min_fraction": CROP_FRACTION},
    "ci-ab-fgm": {"direction": "adabelief", "copies": 5,
                  "crop_min_fraction": CROP_FRACTION},
    "ci-ab-dim": {"direction": "adabelief", "copies": 5,
                  "crop_min_fraction": CROP_FRACTION, "dim_prob": 0.5},
    "ci-ab-tim": {"direction": "adabelief", "copies": 5,
                  "crop_min_fraction": CROP_FRACTION, "ti_kernel_size": 7},
    "ci-ab-ti-dim": {"direction": "adabelief", "copies": 5,
                     "crop_min_fraction": CROP_FRACTION, "dim_prob": 0.5,
                     "ti_kernel_size": 7},
    "ci-ab-sim": {"direction": "adabelief", "copies": 5,
                  "crop_min_fraction": CROP_FRACTION, "scale_mode": "random"},
    "ci-ab-si-ti-dim": {"direction": "adabelief", "copies": 5,
                        "crop_min_fraction": CROP_FRACTION, "scale_mode": "random",
                        "dim_prob": 0.5, "ti_kernel_size": 7},
}


def attack_config(variant: str, base: AttackConfig | None = None, **overrides) -> AttackConfig:
    """Resolve a named variant into a full config; overrides win over the preset."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown attack variant {variant!r}; known: {', '.join(sorted(VARIANTS))}")
    values = {f.name: getattr(base, f.name) for f in fields(AttackConfig)} if base else {}
    values.update(VARIANTS[variant])
    values.update(overrides)
    values["variant"] = variant
    return AttackConfig(**values)


@dataclass(frozen=True)
class EnsembleSpec:
    """Weighted set of source models attacked simultaneously.

    ``fusion`` picks how per-model outputs combine: "loss" sums the
    weighted cross-entropies (default), "logits" averages the logits
    before a single cross-entropy.
    """

    models: tuple
    weights: tuple
    fusion: str = "loss"

    def __post_init__(self):
        if not self.models:
            raise ConfigError("ensemble needs at least one model")
        w = tuple(float(v) for v in self.weights)
        if len(w) != len(self.models):
            raise ConfigError(f"{len(w)} weights for {len(self.models)} models")
        if any(v <= 0 for v in w):
            raise ConfigError("ensemble weights must be positive")
        if abs(sum(w) - 1.0) > 1e-12:
            raise ConfigError(f"ensemble weights must sum to 1, got {sum(w)!r}")
        if self.fusion not in ("loss", "logits"):
            raise ConfigError(f"unknown fusion mode {self.fusion!r}")
        object.__setattr__(self, "weights", w)
        geo = {m.geometry for m in self.models}
        cls = {m.classes for m in self.models}
        if len(geo) > 1 or len(cls) > 1:
            raise ConfigError("ensemble models must share geometry and class count")

    @classmethod
    def equal(cls, models, fusion: str = "loss") -> "EnsembleSpec":
        models = tuple(models)
        return cls(models, (1.0 / len(models),) * len(models), fusion)

    @property
    def geometry(self):
        return self.models[0].geometry

    @property
    def classes(self):
        return self.models[0].classes

    def per_example_loss_grads(self, images: np.ndarray, labels: np.ndarray):
        from . import autodiff as ad
        from . import models as mdl

        if self.fusion == "loss":
            total_loss = None
            total_grad = None
            for model, w in zip(self.models, self.weights):
                losses, grads = model.per_example_loss_grads(images, labels)
                total_loss = w * losses if total_loss is None else total_loss + w * losses
                total_grad = w * grads if total_grad is None else total_grad + w * grads
            return total_loss, total_grad
        # logit fusion: one cross-entropy on the weighted logit average
        tapes = []
        fused = None
        for model, w in zip(self.models, self.weights):
            tape = ad.Tape()
            logits = mdl._forward(model, Tensor(images), tape)
            tapes.append(tape)
            fused = w * logits.data if fused is None else fused + w * logits.data
        losses, probs = ad._stable_ce(fused, np.asarray(labels, dtype=np.int64))
        onehot = np.zeros_like(fused)
        onehot[np.arange(fused.shape[0]), labels] = 1.0
        dlogits = probs - onehot
        total_grad = None
        for tape, w in zip(tapes, self.weights):
            g = tape.backward(w * dlogits)
            total_grad = g if total_grad is None else total_grad + g
        return losses, total_grad


def example_stream(seed: int, index: int) -> np.random.Generator:
    """The seeded draw stream owned by example ``index``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(index,))))


def clip_to_ball(candidate: Tensor, x: Tensor, epsilon: float,
                 lo: float = 0.0, hi: float = 1.0) -> Tensor:
    """Clamp elementwise to [max(lo, x - eps), min(hi, x + eps)]."""
    if candidate.shape != x.shape:
        raise ShapeError(f"candidate shape {candidate.shape} does not match x shape {x.shape}")
    return _fresh(_clip_arr(candidate.data, x.data, epsilon, lo, hi))


def _clip_arr(candidate, x, epsilon, lo=0.0, hi=1.0):
    return np.clip(candidate, np.maximum(lo, x - epsilon), np.minimum(hi, x + epsilon))


def _copy_gradients(target, xs: np.ndarray, ys: np.ndarray, cfg: AttackConfig, rngs):
    """Weighted average of gradients through the per-copy transform chains.

    Per copy and example the chain is scale -> crop-and-pad -> diverse
    input (drawn in that order from the example's stream), evaluated on
    the target, and pulled back through the exact adjoints. Returns the
    per-example averaged losses and gradients.
    """
    n = xs.shape[0]
    side = xs.shape[-1]
    min_rnd = max(1, floor(side * cfg.crop_min_fraction))
    weights = cfg.copy_weights()
    total_loss = np.zeros(n)
    total_grad = np.zeros_like(xs)
    for i in range(cfg.copies):
        scales = np.ones(n)
        crops = []
        dims = []
        z = np.empty_like(xs)
        for j in range(n):
            rng = rngs[j]
            if cfg.scale_mode == "random":
                scales[j] = rng.uniform(0.1, 1.0)
            elif cfg.scale_mode == "halving":
                scales[j] = tf.halving_scale(i)
            crop = tf.sample_crop(rng, side, min_rnd)
            dim = tf.sample_diverse_input(rng, side, cfg.dim_prob)
            crops.append(crop)
            dims.append(dim)
            view = xs[j] if scales[j] == 1.0 else xs[j] * scales[j]
            view = tf._crop_pad_arr(view, crop)
            z[j] = tf._diverse_input_arr(view, dim)
        losses, grads = target.per_example_loss_grads(z, ys)
        pulled = np.empty_like(grads)
        for j in range(n):
            g = tf._diverse_input_adjoint_arr(grads[j], dims[j])
            g = tf._crop_pad_adjoint_arr(g, crops[j])
            pulled[j] = g if scales[j] == 1.0 else g * scales[j]
        total_loss += weights[i] * losses
        total_grad += weights[i] * pulled
    return total_loss, total_grad


def averaged_copy_gradient(target, x: Tensor, y: int, cfg: AttackConfig,
                           rng: np.random.Generator) -> Tensor:
    """Averaged transformed-view gradient for a single example (Eq.-style m-copy objective)."""
    xs = x.data[None] if x.data.ndim == 3 else x.data
    ys = np.atleast_1d(np.asarray(y, dtype=np.int64))
    _, grads = _copy_gradients(target, xs, ys, cfg, [rng] * xs.shape[0])
    return _fresh(grads[0] if x.data.ndim == 3 else grads)


@dataclass
class AttackState:
    """Per-batch iteration state (arrays are stacked over the examples)."""

    t: int
    x_adv: np.ndarray
    g: np.ndarray
    m_t: np.ndarray
    s_t: np.ndarray
    rngs: list


def _adabelief_step(m_t, s_t, ghat, t, cfg):
    """One AdaBelief moment update; returns new moments and the raw direction."""
    m_t = cfg.beta1 * m_t + (1.0 - cfg.beta1) * ghat
    s_t = cfg.beta2 * s_t + (1.0 - cfg.beta2) * (ghat - m_t) ** 2
    m_hat = m_t / (1.0 - cfg.beta1 ** (t + 1))
    s_hat = (s_t + cfg.delta) / (1.0 - cfg.beta2 ** (t + 1))
    direction = m_hat / np.sqrt(s_hat + cfg.delta)
    return m_t, s_t, direction


def run_attack(config, target, x: Tensor, y, *, diagnostics: list | None = None,
               example_ids=None) -> Tensor:
    """Craft adversarial examples with the configured iteration engine.

    ``config`` may be a variant name or a resolved AttackConfig. ``x`` is
    one image (C, H, W) or a batch (N, C, H, W) with matching labels.
    When ``diagnostics`` is a list, one record per iteration and example
    is appended: {example_id, t, loss, linf, l2_step}, where l2_step is
    the pre-projection displacement length.
    """
    cfg = attack_config(config) if isinstance(config, str) else config
    single = x.data.ndim == 3
    xs = x.data[None] if single else x.data
    if xs.ndim != 4:
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W) input, got shape {x.shape}")
    geometry = getattr(target, "geometry", None)
    if geometry is not None and tuple(xs.shape[1:]) != tuple(geometry):
        raise ShapeError(f"input geometry {tuple(xs.shape[1:])} does not match target {tuple(geometry)}")
    ys = np.atleast_1d(np.asarray(y, dtype=np.int64))
    if ys.shape[0] != xs.shape[0]:
        raise ShapeError(f"{ys.shape[0]} labels for {xs.shape[0]} examples")
    n = xs.shape[0]
    ids = list(range(n)) if example_ids is None else list(example_ids)
    eps = cfg.epsilon
    alpha = cfg.step_size
    kernel = None
    if cfg.ti_kernel_size > 0:
        sigma = cfg.ti_sigma if cfg.ti_sigma is not None else cfg.ti_kernel_size / np.sqrt(3.0)
        kernel = tf.gaussian_kernel(cfg.ti_kernel_size, sigma)
    state = AttackState(
        t=0,
        x_adv=xs.copy(),
        g=np.zeros_like(xs),
        m_t=np.zeros_like(xs),
        s_t=np.zeros_like(xs),
        rngs=[example_stream(cfg.seed, i) for i in ids],
    )
    sum_axes = tuple(range(1, xs.ndim))
    for t in range(cfg.iterations):
        state.t = t
        if cfg.direction == "sign-nesterov":
            x_eval = state.x_adv + alpha * cfg.mu * state.g
        else:
            x_eval = state.x_adv
        losses, raw = _copy_gradients(target, x_eval, ys, cfg, state.rngs)
        if kernel is not None:
            raw = tf.convolve_gradient(_fresh(raw), kernel).data
        l1 = np.abs(raw).sum(axis=sum_axes, keepdims=True)
        ghat = raw / np.where(l1 == 0.0, 1.0, l1)
        if cfg.direction == "adabelief":
            state.m_t, state.s_t, direction = _adabelief_step(
                state.m_t, state.s_t, ghat, t, cfg)
            l2 = np.sqrt((direction ** 2).sum(axis=sum_axes, keepdims=True))
            step = alpha * (direction / np.where(l2 == 0.0, 1.0, l2))
            state.g = ghat
        else:
            mu = 0.0 if cfg.direction == "sign-step" else cfg.mu
            state.g = mu * state.g + ghat
            step = alpha * np.sign(state.g)
        candidate = state.x_adv + step
        if cfg.direction == "adabelief" and cfg.final_update == "sign_step":
            candidate = candidate + alpha * np.sign(ghat)
        new = _clip_arr(candidate, xs, eps)
        if diagnostics is not None:
            step_l2 = np.sqrt((step ** 2).sum(axis=sum_axes))
            linf = np.abs(new - xs).max(axis=sum_axes)
            for j in range(n):
                diagnostics.append({
                    "example_id": ids[j], "t": t, "loss": float(losses[j]),
                    "linf": float(linf[j]), "l2_step": float(step_l2[j]),
                })
        state.x_adv = new
    return _fresh(state.x_adv[0] if single else state.x_adv)


def fgsm(model, x: Tensor, y, cfg: AttackConfig | None = None) -> Tensor:
    """One sign step of size epsilon, then range clamp (sign(0) = 0)."""
    return run_attack(attack_config("fgsm", cfg), model, x, y)


def i_fgsm(model, x: Tensor, y, cfg: AttackConfig | None = None) -> Tensor:
    """T sign steps of size alpha, each projected onto the budget ball."""
    return run_attack(attack_config("i-fgsm", cfg), model, x, y)


def mi_fgsm(model, x: Tensor, y, cfg: AttackConfig | None = None) -> Tensor:
    """Momentum-accumulated sign steps over L1-normalized gradients."""
    return run_attack(attack_config("mi-fgsm", cfg), model, x, y)


def ni_fgsm(model, x: Tensor, y, cfg: AttackConfig | None = None) -> Tensor:
    """Momentum sign steps with the gradient taken at a Nesterov look-ahead point."""
    return run_attack(attack_config("ni-fgsm", cfg), model, x, y)


def abi_fgm(model, x: Tensor, y, cfg: AttackConfig | None = None) -> Tensor:
    """AdaBelief-scaled moves of exact L2 length alpha inside the L-inf ball."""
    return run_attack(attack_config("abi-fgm", cfg), model, x, y)
