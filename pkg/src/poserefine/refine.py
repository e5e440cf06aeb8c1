"""The three-stage refinement network, its losses, and the training loop."""
from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autonet as an
from . import rotgeo
from .dataset import INPUT_SIZE, DatasetSplit, PoseDataset
from .errors import CheckpointError, InvalidArgumentError, NumericDegeneracyError, TrainingDivergenceError
from .rotgeo import UnitQuaternion
from .sampler import NoiseConfig, NoisePair, make_rng, perturb

log = logging.getLogger(__name__)

ARCH_VERSION = "refiner-v1"
FEATURE_DIM = 4096
ACOS_CLAMP = 1.0 - 1e-7
META_KEY = "__meta__"


class Refiner:
    """Image features + expanded input pose -> unit correction quaternion.

    Layer plan (64x64 input):

    - image stage: conv 3->16 5x5 pad 2, BN, ReLU, pool; conv 16->16 5x5
      pad 2, BN, ReLU, pool; flatten to 16*16*16 = 4096
    - pose stage: 4 -> 64 -> 512 -> 4096, ReLU after each
    - refinement stage: concat to 8192 -> 4096 -> 1024 -> 128 -> 4, ReLU
      between hidden layers, then unit normalization
    """

    def __init__(self, seed: int = 0, input_size: int = INPUT_SIZE):
        if input_size % 4:
            raise InvalidArgumentError("input size must be divisible by 4")
        rng = make_rng(seed)
        self.input_size = input_size
        self.seed = seed
        self.cnn = an.Sequential(
            an.Conv2d(3, 16, 5, padding=2, rng=rng, input_grad=False), an.BatchNorm(16), an.ReLU(), an.MaxPool2x2(),
            an.Conv2d(16, 16, 5, padding=2, rng=rng), an.BatchNorm(16), an.ReLU(), an.MaxPool2x2(),
            an.Flatten(),
        )
        self.pose = an.Sequential(
            an.Linear(4, 64, rng), an.ReLU(),
            an.Linear(64, 512, rng), an.ReLU(),
            an.Linear(512, FEATURE_DIM, rng), an.ReLU(),
        )
        self.head = an.Sequential(
            an.Linear(2 * FEATURE_DIM, 4096, rng), an.ReLU(),
            an.Linear(4096, 1024, rng), an.ReLU(),
            an.Linear(1024, 128, rng), an.ReLU(),
            an.Linear(128, 4, rng, relu_follows=False),
        )
        self.stages = OrderedDict(cnn=self.cnn, pose=self.pose, head=self.head)
        self._cat_sizes = None
        self._norm_cache = None
        self.set_mode("train")
        for name, t in self.parameters_named():
            t.name = name

    def set_mode(self, mode: str):
        if mode not in ("train", "eval"):
            raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
        self.mode = mode
        an.set_training(self.stages.values(), mode == "train")

    def parameters_named(self):
        for sname, stage in self.stages.items():
            for lname, layer in stage.named_layers():
                for pname, t in layer.params.items():
                    yield f"{sname}.{lname}.{pname}", t

    def buffers_named(self):
        for sname, stage in self.stages.items():
            for lname, layer in stage.named_layers():
                for bname, b in layer.buffers.items():
                    yield f"{sname}.{lname}.{bname}", b

    def parameters(self) -> list[an.Tensor]:
        return [t for _, t in self.parameters_named()]

    def feature_sizes(self) -> tuple[int, int]:
        s = self.input_size // 4
        return 16 * s * s, FEATURE_DIM

    # -- batch forward / backward -------------------------------------------

    def forward_batch(self, images: np.ndarray, q_in: np.ndarray) -> np.ndarray:
        """``images`` (B, 3, S, S), ``q_in`` (B, 4) -> unit corrections (B, 4)."""
        images = np.asarray(images, dtype=an.DTYPE)
        q_in = np.asarray(q_in, dtype=an.DTYPE)
        if images.ndim != 4 or images.shape[1:] != (3, self.input_size, self.input_size):
            raise InvalidArgumentError(f"expected images of shape (B, 3, {self.input_size}, {self.input_size}), got {images.shape}")
        if q_in.shape != (images.shape[0], 4):
            raise InvalidArgumentError(f"expected q_in of shape ({images.shape[0]}, 4), got {q_in.shape}")
        feats = self.cnn.forward(images)
        pose = self.pose.forward(q_in)
        cat, self._cat_sizes = an.concat_forward([feats, pose])
        raw = self.head.forward(cat)
        out, self._norm_cache = an.l2_normalize_forward(raw)
        return out

    def backward(self, d_out: np.ndarray):
        d = an.l2_normalize_backward(np.asarray(d_out, dtype=an.DTYPE), self._norm_cache)
        d = self.head.backward(d)
        d_feats, d_pose = an.concat_backward(d, self._cat_sizes)
        self.pose.backward(np.ascontiguousarray(d_pose))
        self.cnn.backward(np.ascontiguousarray(d_feats))

    # -- checkpoint -----------------------------------------------------------

    def state_entries(self, meta: dict | None = None) -> OrderedDict:
        entries: OrderedDict[str, np.ndarray] = OrderedDict()
        info = {"arch": ARCH_VERSION, "input_size": self.input_size}
        info.update(meta or {})
        raw = json.dumps(info, sort_keys=True).encode("utf-8")
        entries[META_KEY] = np.frombuffer(raw, dtype=np.uint8).astype(np.float32)
        for name, t in self.parameters_named():
            entries[name] = t.data
        for name, b in self.buffers_named():
            entries[name] = b
        return entries

    def save(self, path, meta: dict | None = None):
        with open(path, "wb") as fh:
            an.write_checkpoint(fh, self.state_entries(meta))

    def to_bytes(self, meta: dict | None = None) -> bytes:
        buf = io.BytesIO()
        an.write_checkpoint(buf, self.state_entries(meta))
        return buf.getvalue()

    @classmethod
    def load(cls, path) -> Refiner:
        with open(path, "rb") as fh:
            entries = an.read_checkpoint(fh)
        return cls.from_entries(entries)

    @classmethod
    def from_entries(cls, entries) -> Refiner:
        meta = checkpoint_meta(entries)
        if meta.get("arch") != ARCH_VERSION:
            raise CheckpointError(f"checkpoint architecture {meta.get('arch')!r} does not match {ARCH_VERSION!r}")
        model = cls(seed=0, input_size=int(meta.get("input_size", INPUT_SIZE)))
        for name, t in model.parameters_named():
            _assign(entries, name, t.data)
        for name, b in model.buffers_named():
            _assign(entries, name, b)
        model.meta = meta
        return model


def _assign(entries, name, target: np.ndarray):
    if name not in entries:
        raise CheckpointError(f"checkpoint is missing entry {name!r}")
    src = entries[name]
    if src.shape != target.shape:
        raise CheckpointError(f"entry {name!r} has shape {src.shape}, expected {target.shape}")
    target[...] = src


def checkpoint_meta(entries) -> dict:
    if META_KEY not in entries:
        raise CheckpointError("checkpoint has no metadata entry")
    raw = bytes(entries[META_KEY].astype(np.uint8).tolist())
    return json.loads(raw.decode("utf-8"))


def build_network(seed: int = 0, input_size: int = INPUT_SIZE) -> Refiner:
    return Refiner(seed, input_size)


def forward(model: Refiner, image: np.ndarray, q_in: UnitQuaternion, mode: str = "eval") -> UnitQuaternion:
    """Correction quaternion for one ``(H, W, 3)`` image and coarse pose.

    The result is the rotation from ``q_in`` to the estimated pose; compose it
    with :func:`refined_pose`.
    """
    prev = model.mode
    model.set_mode(mode)
    try:
        img = np.asarray(image, dtype=an.DTYPE).transpose(2, 0, 1)[None]
        out = model.forward_batch(img, q_in.as_array()[None])
    finally:
        model.set_mode(prev)
    return UnitQuaternion.from_array(out[0].astype(np.float64))


def refined_pose(q_in: UnitQuaternion, q_out: UnitQuaternion) -> UnitQuaternion:
    return rotgeo.quat_mul(q_in, q_out)


# ---------------------------------------------------------------------------
# losses; batch versions take (B, 4) arrays and return (mean loss, d loss / d q_out)


def quat_mul_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, av = a[:, :1], a[:, 1:]
    bw, bv = b[:, :1], b[:, 1:]
    w = aw * bw - np.sum(av * bv, axis=1, keepdims=True)
    v = aw * bv + bw * av + np.cross(av, bv)
    return np.concatenate([w, v], axis=1)


def quat_conj_batch(q: np.ndarray) -> np.ndarray:
    return q * np.array([1.0, -1.0, -1.0, -1.0], dtype=q.dtype)


def geodesic_loss_batch(q_out: np.ndarray, q_label: np.ndarray, clamp: float = ACOS_CLAMP):
    """Mean of ``2 acos(|scalar(q_out * q_label^-1)|)`` and its gradient w.r.t. ``q_out``.

    The magnitude is clamped to ``clamp`` before ``acos`` so the gradient
    stays bounded as the loss approaches zero.
    """
    q_out = np.asarray(q_out, dtype=np.float64)
    q_label = np.asarray(q_label, dtype=np.float64)
    rel = quat_mul_batch(q_out, quat_conj_batch(q_label))
    s = rel[:, 0]
    c = np.abs(s)
    active = c < clamp
    c = np.minimum(c, clamp)
    loss = 2.0 * np.arccos(c)
    n = q_out.shape[0]
    # d scalar(q_out * conj(q_label)) / d q_out = q_label
    dl_dc = np.where(active, -2.0 / np.sqrt(1.0 - c * c), 0.0)
    grad = (dl_dc * np.sign(s))[:, None] * q_label / n
    return float(loss.mean()), grad


def mse_loss_batch(q_out: np.ndarray, q_label: np.ndarray):
    """Mean squared componentwise error; labels are regressed as given (``w >= 0``)."""
    q_out = np.asarray(q_out, dtype=np.float64)
    q_label = np.asarray(q_label, dtype=np.float64)
    diff = q_out - q_label
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def geodesic_loss(q_out: UnitQuaternion, q_label: UnitQuaternion) -> tuple[float, np.ndarray]:
    """Loss value and gradient w.r.t. the four components of ``q_out``."""
    loss, grad = geodesic_loss_batch(q_out.as_array()[None], q_label.as_array()[None])
    return loss, grad[0]


def mse_loss(q_out: UnitQuaternion, q_label: UnitQuaternion) -> tuple[float, np.ndarray]:
    loss, grad = mse_loss_batch(q_out.as_array()[None], q_label.canonical().as_array()[None])
    return loss, grad[0]


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs_mse: int = 5
    epochs_geodesic: int = 10
    batch_size: int = 32
    lr: float = 1e-3
    noise: NoiseConfig = field(default_factory=lambda: NoiseConfig.uniform(0.0, 30.0))
    seed: int = 0
    deterministic: bool = True
    redraw_noise: bool = True

    def __post_init__(self):
        if self.epochs_mse < 0 or self.epochs_geodesic < 0:
            raise InvalidArgumentError("epoch counts must be non-negative")
        if self.batch_size < 2:
            raise InvalidArgumentError("batch size must be at least 2 (batch norm)")
        if not self.lr > 0:
            raise InvalidArgumentError("learning rate must be positive")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["noise"] = asdict(self.noise)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class EpochMetrics:
    epoch: int
    loss_kind: str
    train_loss: float
    val_error_deg: float
    seconds: float

    def line(self) -> str:
        return (f"epoch={self.epoch} loss={self.loss_kind} train_loss={self.train_loss!r} "
                f"val_error_deg={self.val_error_deg!r}")


def pairs_as_arrays(pairs: list[NoisePair]) -> tuple[np.ndarray, np.ndarray]:
    q_in = np.array([p.q_in.as_array() for p in pairs], dtype=np.float64)
    q_label = np.array([p.q_label.as_array() for p in pairs], dtype=np.float64)
    return q_in, q_label


def draw_pairs(data: PoseDataset, indices, noise: NoiseConfig, rng: np.random.Generator) -> list[NoisePair]:
    return [perturb(data.q_gt[i], noise, rng) for i in indices]


def predict(model: Refiner, images: np.ndarray, q_in: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode corrections for many samples, in input order."""
    prev = model.mode
    model.set_mode("eval")
    try:
        outs = [model.forward_batch(images[i:i + batch_size], q_in[i:i + batch_size])
                for i in range(0, len(images), batch_size)]
    finally:
        model.set_mode(prev)
    if not outs:
        return np.zeros((0, 4), dtype=an.DTYPE)
    return np.concatenate(outs, axis=0)


def angular_errors_deg(q_in: np.ndarray, q_out: np.ndarray, q_gt: np.ndarray) -> np.ndarray:
    refined = quat_mul_batch(np.asarray(q_in, np.float64), np.asarray(q_out, np.float64))
    refined /= np.linalg.norm(refined, axis=1, keepdims=True)
    rel = quat_mul_batch(refined, quat_conj_batch(np.asarray(q_gt, np.float64)))
    c = np.clip(np.abs(rel[:, 0]), 0.0, 1.0)
    return np.degrees(2.0 * np.arccos(c))


def validation_error(model: Refiner, data: PoseDataset, indices, pairs: list[NoisePair]) -> float:
    if not len(indices):
        return float("nan")
    q_in, _ = pairs_as_arrays(pairs)
    q_out = predict(model, data.images[list(indices)], q_in)
    q_gt = np.array([data.q_gt[i].as_array() for i in indices])
    return float(np.mean(angular_errors_deg(q_in, q_out, q_gt)))


class Trainer:
    """Two-phase training: MSE warmup epochs, then geodesic-loss epochs, Adam throughout."""

    def __init__(self, model: Refiner, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.opt = an.Adam(model.parameters(), lr=cfg.lr)
        self.rng = make_rng(cfg.seed)
        self.log: list[EpochMetrics] = []

    def _train_epoch(self, epoch: int, kind: str, data: PoseDataset, train_idx, fixed_pairs):
        cfg = self.cfg
        model = self.model
        model.set_mode("train")
        order = self.rng.permutation(len(train_idx))
        if cfg.redraw_noise:
            pairs = draw_pairs(data, train_idx, cfg.noise, self.rng)
        else:
            pairs = fixed_pairs
        q_in_all, q_label_all = pairs_as_arrays(pairs)
        loss_fn = mse_loss_batch if kind == "mse" else geodesic_loss_batch
        total, count = 0.0, 0
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            sel = order[start:start + cfg.batch_size]
            if len(sel) < 2:
                continue
            idx = [train_idx[i] for i in sel]
            try:
                out = model.forward_batch(data.images[idx], q_in_all[sel])
            except NumericDegeneracyError as exc:
                raise TrainingDivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
            loss, grad = loss_fn(out, q_label_all[sel])
            if not math.isfinite(loss):
                raise TrainingDivergenceError(f"non-finite {kind} loss at epoch {epoch}, batch {b}")
            self.opt.zero_grad()
            model.backward(grad)
            try:
                self.opt.step()
            except TrainingDivergenceError as exc:
                raise TrainingDivergenceError(f"epoch {epoch}, batch {b}: {exc}") from exc
            total += loss * len(sel)
            count += len(sel)
        return total / max(count, 1)

    def fit(self, data: PoseDataset, split: DatasetSplit, progress=None) -> list[EpochMetrics]:
        cfg = self.cfg
        if not split.train:
            raise InvalidArgumentError("training split is empty")
        val_rng = make_rng(cfg.seed + 1)
        val_pairs = draw_pairs(data, split.validation, cfg.noise, val_rng)
        fixed = None if cfg.redraw_noise else draw_pairs(data, split.train, cfg.noise, self.rng)
        phases = ["mse"] * cfg.epochs_mse + ["geodesic"] * cfg.epochs_geodesic
        for epoch, kind in enumerate(phases, 1):
            t0 = time.perf_counter()
            train_loss = self._train_epoch(epoch, kind, data, split.train, fixed)
            val = validation_error(self.model, data, split.validation, val_pairs)
            m = EpochMetrics(epoch, kind, train_loss, val, time.perf_counter() - t0)
            self.log.append(m)
            log.info("%s (%.1fs)", m.line(), m.seconds)
            if progress is not None:
                progress(m)
        self.model.set_mode("eval")
        return self.log


def train(model: Refiner, data: PoseDataset, split: DatasetSplit, cfg: TrainConfig,
          progress=None) -> tuple[Refiner, list[EpochMetrics]]:
    """Train ``model`` in place (it may come from a checkpoint, for fine-tuning)."""
    trainer = Trainer(model, cfg)
    metrics = trainer.fit(data, split, progress)
    model.meta = {"train_config": cfg.digest()}
    return model, metrics


def format_metrics_log(metrics: list[EpochMetrics]) -> str:
    return "".join(m.line() + "\n" for m in metrics)


def write_metrics_log(path, metrics: list[EpochMetrics]):
    Path(path).write_text(format_metrics_log(metrics))
