"""Small feed-forward classifiers: definition, training, persistence.

A model is an immutable stack of layer specs plus per-layer parameter
tensors. Training is plain minibatch SGD on cross-entropy, optionally
mixing adversarially perturbed examples into each batch (crafted on the
model itself, or round-robin on donor models for ensemble-adversarial
training). Everything is deterministic given the config seed.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .errors import (
    ArchitectureError,
    CheckpointChecksumError,
    CheckpointError,
    CheckpointMagicError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigError,
    ShapeError,
)

LAYER_KINDS = ("dense", "conv2d", "relu", "maxpool2", "flatten")
TRAINING_MODES = ("normal", "adversarial", "ensemble-adversarial")


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a feed-forward chain.

    ``dims`` is (in_features, out_features) for dense, (in_ch, out_ch, k)
    for conv2d, and empty for relu/maxpool2/flatten.
    """

    kind: str
    dims: tuple = ()
    stride: int = 1

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ArchitectureError(f"unknown layer kind {self.kind!r}")


def dense(in_features: int, out_features: int) -> LayerSpec:
    return LayerSpec("dense", (in_features, out_features))


def conv2d(in_channels: int, out_channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", (in_channels, out_channels, kernel), stride)


def relu() -> LayerSpec:
    return LayerSpec("relu")


def maxpool2() -> LayerSpec:
    return LayerSpec("maxpool2")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def infer_shapes(architecture, geometry) -> list[tuple]:
    """Per-layer output shapes (excluding batch) for a declared input geometry.

    Raises ArchitectureError naming the offending layer pair when two
    consecutive specs are incompatible.
    """
    shapes = []
    cur = tuple(geometry)
    for i, spec in enumerate(architecture):
        prev = f"layer {i - 1}" if i else "input"
        if spec.kind == "conv2d":
            cin, cout, k = spec.dims
            if len(cur) != 3 or cur[0] != cin:
                raise ArchitectureError(
                    f"{prev} produces {cur}, but layer {i} (conv2d) expects {cin} channels")
            c, h, w = cur
            if k > h or k > w:
                raise ArchitectureError(
                    f"{prev} produces {cur}, too small for layer {i} (conv2d k={k})")
            cur = (cout, (h - k) // spec.stride + 1, (w - k) // spec.stride + 1)
        elif spec.kind == "maxpool2":
            if len(cur) != 3 or cur[1] % 2 or cur[2] % 2:
                raise ArchitectureError(
                    f"{prev} produces {cur}, but layer {i} (maxpool2) needs even spatial dims")
            cur = (cur[0], cur[1] // 2, cur[2] // 2)
        elif spec.kind == "flatten":
            cur = (int(np.prod(cur)),)
        elif spec.kind == "dense":
            fin, fout = spec.dims
            if len(cur) != 1 or cur[0] != fin:
                raise ArchitectureError(
                    f"{prev} produces {cur}, but layer {i} (dense) expects {fin} features")
            cur = (fout,)
        # relu: shape unchanged
        shapes.append(cur)
    return shapes


@dataclass(frozen=True)
class ModelParams:
    """A trained (or freshly initialized) classifier.

    ``layers`` holds one (weight, bias) pair per parametric layer and
    None elsewhere, aligned with ``architecture``. Instances are
    immutable; training returns new ones.
    """

    architecture: tuple
    geometry: tuple
    classes: int
    layers: tuple
    metadata: dict = field(default_factory=dict)

    def per_example_loss_grads(self, images: np.ndarray, labels: np.ndarray):
        """Per-example cross-entropy losses and input gradients for a batch."""
        tape = Tape()
        logits = _forward(self, Tensor(images), tape)
        losses = ad.per_example_cross_entropy(logits, labels, tape)
        grads = tape.backward(1.0)
        return losses, grads


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    mode: str = "normal"
    adv_epsilon: float = 16 / 255
    adv_steps: int = 1
    donors: tuple = ()

    def __post_init__(self):
        if self.mode not in TRAINING_MODES:
            raise ConfigError(f"unknown training mode {self.mode!r}")
        if self.mode == "ensemble-adversarial" and not self.donors:
            raise ConfigError("ensemble-adversarial training requires at least one donor model")


def init_model(architecture, geometry, seed: int, *, name: str = "model",
               training_mode: str = "normal") -> ModelParams:
    """Deterministic Glorot-uniform initialization, biases zero.

    Weights are drawn uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    The final layer must be dense; its output width is the class count.
    """
    architecture = tuple(architecture)
    shapes = infer_shapes(architecture, geometry)
    if not architecture or architecture[-1].kind != "dense":
        raise ArchitectureError("architecture must end with a dense layer producing class logits")
    classes = shapes[-1][0]
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    layers = []
    for spec in architecture:
        if spec.kind == "dense":
            fin, fout = spec.dims
            a = np.sqrt(6.0 / (fin + fout))
            layers.append((Tensor(rng.uniform(-a, a, size=(fin, fout))),
                           Tensor(np.zeros(fout))))
        elif spec.kind == "conv2d":
            cin, cout, k = spec.dims
            a = np.sqrt(6.0 / (cin * k * k + cout * k * k))
            layers.append((Tensor(rng.uniform(-a, a, size=(cout, cin, k, k))),
                           Tensor(np.zeros(cout))))
        else:
            layers.append(None)
    metadata = {"name": name, "training_seed": seed, "training_mode": training_mode}
    return ModelParams(architecture, tuple(geometry), classes, tuple(layers), metadata)


def _forward(model: ModelParams, x: Tensor, tape: Tape | None = None) -> Tensor:
    cur = x
    for spec, params in zip(model.architecture, model.layers):
        if spec.kind == "dense":
            cur = ad.forward_dense(cur, params[0], params[1], tape)
        elif spec.kind == "conv2d":
            cur = ad.forward_conv2d(cur, params[0], params[1], spec.stride, tape)
        elif spec.kind == "relu":
            cur = ad.forward_relu(cur, tape)
        elif spec.kind == "maxpool2":
            cur = ad.forward_maxpool2(cur, tape)
        elif spec.kind == "flatten":
            cur = ad.forward_flatten(cur, tape)
    return cur


def forward_logits(model: ModelParams, batch: Tensor) -> Tensor:
    """Logits for a (batch, C, H, W) tensor; pure function of (model, batch)."""
    if tuple(batch.shape[1:]) != tuple(model.geometry):
        raise ShapeError(
            f"batch geometry {tuple(batch.shape[1:])} does not match model geometry {model.geometry}")
    return _forward(model, batch)


def _craft_sign_attack(model: ModelParams, images: np.ndarray, labels: np.ndarray,
                       epsilon: float, steps: int) -> np.ndarray:
    """FGSM (steps=1) / I-FGSM sign perturbation used inside training loops."""
    adv = images.copy()
    alpha = epsilon / steps
    for _ in range(steps):
        _, grads = model.per_example_loss_grads(adv, labels)
        adv = adv + alpha * np.sign(grads)
        adv = np.clip(adv, np.maximum(0.0, images - epsilon), np.minimum(1.0, images + epsilon))
    return adv


def train(model: ModelParams, data, cfg: TrainConfig) -> ModelParams:
    """Minibatch SGD on cross-entropy; returns a new ModelParams.

    In adversarial mode the first half of every batch is replaced by
    FGSM/I-FGSM examples crafted on the current parameters; in
    ensemble-adversarial mode they are crafted on donor models visited
    round-robin. Bit-deterministic given (model, data, cfg).
    """
    n = data.images.shape[0]
    if n == 0:
        raise ConfigError("cannot train on an empty dataset")
    if int(data.labels.max(initial=0)) >= model.classes:
        raise ConfigError(
            f"dataset has labels up to {int(data.labels.max())} but model has {model.classes} classes")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.seed)))
    layers = list(model.layers)
    batch_index = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            images = data.images[idx]
            labels = data.labels[idx]
            if cfg.mode != "normal" and len(idx) >= 2:
                half = len(idx) // 2
                current = ModelParams(model.architecture, model.geometry, model.classes,
                                      tuple(layers), model.metadata)
                crafter = current if cfg.mode == "adversarial" else \
                    cfg.donors[batch_index % len(cfg.donors)]
                images = images.copy()
                images[:half] = _craft_sign_attack(
                    crafter, images[:half], labels[:half], cfg.adv_epsilon, cfg.adv_steps)
            tape = Tape()
            working = ModelParams(model.architecture, model.geometry, model.classes,
                                  tuple(layers), model.metadata)
            logits = _forward(working, Tensor(images), tape)
            ad.softmax_cross_entropy(logits, labels, tape)
            tape.backward(1.0)
            for i, params in enumerate(layers):
                if params is None:
                    continue
                w, b = params
                layers[i] = (
                    ad._fresh(w.data - cfg.learning_rate * tape.param_grad(w).data),
                    ad._fresh(b.data - cfg.learning_rate * tape.param_grad(b).data),
                )
            batch_index += 1
    metadata = dict(model.metadata)
    metadata.update(training_seed=cfg.seed, training_mode=cfg.mode)
    return ModelParams(model.architecture, model.geometry, model.classes,
                       tuple(layers), metadata)


def accuracy(model: ModelParams, data) -> float:
    """Fraction of examples whose argmax logit equals the label.

    Ties break toward the lowest class index (argmax convention).
    """
    n = data.images.shape[0]
    correct = 0
    for start in range(0, n, 512):
        batch = data.images[start:start + 512]
        logits = forward_logits(model, Tensor(batch))
        correct += int((logits.data.argmax(axis=1) == data.labels[start:start + 512]).sum())
    return correct / n if n else 0.0


# --- checkpoint format -------------------------------------------------
#
# magic "PBCK" | u32 LE version | u32 LE header length | header JSON |
# parameter payload (little-endian f64, layer order, weight then bias) |
# u64 LE CRC-64 (ECMA-182 / XZ variant) over all preceding bytes.

CHECKPOINT_MAGIC = b"PBCK"
CHECKPOINT_VERSION = 1

_CRC64_POLY = 0xC96C5795D7870F42  # reflected ECMA-182
_CRC64_TABLE = []
for _byte in range(256):
    _crc = _byte
    for _ in range(8):
        _crc = (_crc >> 1) ^ (_CRC64_POLY if _crc & 1 else 0)
    _CRC64_TABLE.append(_crc)


def _crc64(data: bytes) -> int:
    crc = 0xFFFFFFFFFFFFFFFF
    for b in data:
        crc = (crc >> 8) ^ _CRC64_TABLE[(crc ^ b) & 0xFF]
    return crc ^ 0xFFFFFFFFFFFFFFFF


def save_checkpoint(model: ModelParams, path) -> None:
    header = {
        "architecture": [
            {"kind": s.kind, "dims": list(s.dims), "stride": s.stride}
            for s in model.architecture
        ],
        "geometry": list(model.geometry),
        "classes": model.classes,
        "metadata": model.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(
        part.data.astype("<f8").tobytes()
        for params in model.layers if params is not None
        for part in params
    )
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(header_bytes))
    body += header_bytes + payload
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(struct.pack("<Q", _crc64(body)))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointMagicError(f"{path}: not a checkpoint file (bad magic)")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: checkpoint version {version}, this library reads version {CHECKPOINT_VERSION}")
    if len(blob) < 12 + header_len + 8:
        raise CheckpointTruncatedError(f"{path}: file shorter than declared header")
    stored_crc = struct.unpack("<Q", blob[-8:])[0]
    body = blob[:-8]
    if _crc64(body) != stored_crc:
        raise CheckpointChecksumError(f"{path}: checksum mismatch, file corrupt")
    try:
        header = json.loads(body[12:12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    architecture = tuple(
        LayerSpec(entry["kind"], tuple(entry["dims"]), entry["stride"])
        for entry in header["architecture"]
    )
    geometry = tuple(header["geometry"])
    shapes = infer_shapes(architecture, geometry)
    payload = body[12 + header_len:]
    offset = 0
    layers = []
    for spec in architecture:
        if spec.kind == "dense":
            fin, fout = spec.dims
            wshape, bshape = (fin, fout), (fout,)
        elif spec.kind == "conv2d":
            cin, cout, k = spec.dims
            wshape, bshape = (cout, cin, k, k), (cout,)
        else:
            layers.append(None)
            continue
        need = (int(np.prod(wshape)) + int(np.prod(bshape))) * 8
        if offset + need > len(payload):
            raise CheckpointTruncatedError(f"{path}: parameter payload shorter than architecture requires")
        w = np.frombuffer(payload, dtype="<f8", count=int(np.prod(wshape)),
                          offset=offset).reshape(wshape)
        offset += int(np.prod(wshape)) * 8
        b = np.frombuffer(payload, dtype="<f8", count=int(np.prod(bshape)), offset=offset)
        offset += int(np.prod(bshape)) * 8
        layers.append((Tensor(w), Tensor(b)))
    if offset != len(payload):
        raise CheckpointError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return ModelParams(architecture, geometry, int(header["classes"]),
                       tuple(layers), dict(header["metadata"]))


# --- the classifier zoo -------------------------------------------------

def _conv_stack(geometry, classes, blocks) -> tuple:
    """Conv/relu(/pool) blocks followed by flatten + dense to the classes."""
    layers = []
    channels = geometry[0]
    for out_ch, k, pool in blocks:
        layers.append(conv2d(channels, out_ch, k))
        layers.append(relu())
        if pool:
            layers.append(maxpool2())
        channels = out_ch
    layers.append(flatten())
    flat = infer_shapes(tuple(layers), geometry)[-1][0]
    layers.append(dense(flat, classes))
    return tuple(layers)


def zoo_architectures(geometry, classes) -> dict:
    """The four base architectures the experiment zoo draws from."""
    flat = int(np.prod(geometry))
    return {
        "cnn-a": _conv_stack(geometry, classes, [(6, 5, True), (12, 5, True)]),
        "cnn-b": _conv_stack(geometry, classes, [(8, 9, True), (12, 3, True)]),
        "cnn-c": _conv_stack(geometry, classes, [(6, 3, False), (8, 3, True), (12, 5, True)]),
        "mlp": (flatten(), dense(flat, 128), relu(), dense(128, classes)),
    }


@dataclass(frozen=True)
class ZooEntry:
    """One zoo member: architecture, training mode, and its stable lr scale."""

    name: str
    arch: str
    mode: str = "normal"
    donors: tuple = ()
    lr_scale: float = 1.0


#: Four normally trained models plus one adversarially trained and two
#: ensemble-adversarially trained targets with different donor sets. The
#: lr scales sit below each architecture's plain-SGD divergence cliff.
DEFAULT_ZOO_PLAN = (
    ZooEntry("cnn-a", "cnn-a", lr_scale=1.5),
    ZooEntry("cnn-b", "cnn-b", lr_scale=2.0),
    ZooEntry("cnn-c", "cnn-c", lr_scale=1.0),
    ZooEntry("mlp", "mlp", lr_scale=0.6),
    ZooEntry("cnn-a-adv", "cnn-a", mode="adversarial", lr_scale=1.5),
    ZooEntry("cnn-b-ens3", "cnn-b", mode="ensemble-adversarial",
             donors=("cnn-a", "cnn-c", "mlp"), lr_scale=2.0),
    ZooEntry("cnn-c-ens", "cnn-c", mode="ensemble-adversarial",
             donors=("cnn-a", "cnn-b"), lr_scale=1.0),
)

NORMAL_ZOO_MODELS = ("cnn-a", "cnn-b", "cnn-c", "mlp")
DEFENDED_ZOO_MODELS = ("cnn-a-adv", "cnn-b-ens3", "cnn-c-ens")


def build_zoo(data, *, plan=DEFAULT_ZOO_PLAN, learning_rate=0.04, epochs=20,
              batch_size=32, adv_epsilon=16 / 255, seed=0) -> dict:
    """Train the full zoo on a dataset; donors must precede their dependents."""
    archs = zoo_architectures(data.geometry, data.classes)
    zoo: dict[str, ModelParams] = {}
    for i, entry in enumerate(plan):
        model = init_model(archs[entry.arch], data.geometry, seed * 1000 + i,
                           name=entry.name, training_mode=entry.mode)
        cfg = TrainConfig(
            learning_rate=learning_rate * entry.lr_scale, epochs=epochs,
            batch_size=batch_size, seed=seed * 1000 + i, mode=entry.mode,
            adv_epsilon=adv_epsilon,
            donors=tuple(zoo[d] for d in entry.donors))
        zoo[entry.name] = train(model, data, cfg)
    return zoo
