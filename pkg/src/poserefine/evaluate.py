"""Angular-error evaluation, report formatting, and the experiment protocols."""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import rotgeo
from .dataset import DatasetSplit, PoseDataset
from .errors import InvalidArgumentError
from .refine import Refiner, TrainConfig, build_network, predict, refined_pose, train
from .rotgeo import UnitQuaternion
from .sampler import NoiseConfig, make_rng, perturb


def angular_error(q_refined: UnitQuaternion, q_gt: UnitQuaternion) -> float:
    """Geodesic angle between refined and true orientation, in degrees."""
    return rotgeo.rad2deg(rotgeo.geodesic_angle(q_refined, q_gt))


# ---------------------------------------------------------------------------
# models the evaluator can drive: anything with predict(images, q_in, indices) -> (B, 4),
# where indices are the dataset records the images came from


class NetworkModel:
    def __init__(self, net: Refiner, batch_size: int = 64):
        self.net = net
        self.batch_size = batch_size

    def predict(self, images: np.ndarray, q_in: np.ndarray, indices=None) -> np.ndarray:
        return predict(self.net, images, q_in, self.batch_size)


class IdentityModel:
    """Always predicts no correction, so the error equals the injected noise."""

    def predict(self, images, q_in, indices=None):
        out = np.zeros((len(q_in), 4))
        out[:, 0] = 1.0
        return out


class OracleModel:
    """Test double that knows every record's true pose and returns the exact correction."""

    def __init__(self, data: PoseDataset):
        self.q_gt = data.q_gt

    def predict(self, images, q_in, indices=None):
        if indices is None:
            raise InvalidArgumentError("the oracle model needs the dataset indices of its inputs")
        out = []
        for i, q in zip(indices, q_in):
            q_gt = self.q_gt[i]
            out.append(rotgeo.quat_mul(rotgeo.quat_inverse(UnitQuaternion.from_array(q)), q_gt).as_array())
        return np.array(out)


def as_model(model):
    return NetworkModel(model) if isinstance(model, Refiner) else model


# ---------------------------------------------------------------------------
# reports


@dataclass
class ObjectStats:
    object_id: int
    name: str
    count: int
    mean_deg: float
    sd_deg: float


@dataclass
class EvalReport:
    objects: list[ObjectStats]
    count: int
    mean_deg: float
    sd_deg: float
    errors_deg: list[float] = field(default_factory=list, repr=False)
    label: str = ""
    seconds_per_inference: float | None = None

    @property
    def average_of_objects(self) -> float:
        return float(np.mean([o.mean_deg for o in self.objects])) if self.objects else float("nan")

    def format(self, style: str = "table") -> str:
        if style == "kv":
            return format_kv(self)
        if style == "table":
            return format_table(self)
        raise InvalidArgumentError(f"unknown report format {style!r}")


def _stats(errors) -> tuple[float, float]:
    a = np.asarray(errors, dtype=np.float64)
    return float(a.mean()), float(a.std())


def build_report(errors_deg, object_ids, names: dict[int, str] | None = None, label: str = "") -> EvalReport:
    """Aggregate per-sample errors; sd is the population sd over samples."""
    names = names or {}
    errors = np.asarray(errors_deg, dtype=np.float64)
    ids = np.asarray(object_ids)
    objects = []
    for oid in sorted(set(ids.tolist())):
        sel = errors[ids == oid]
        mean, sd = _stats(sel)
        objects.append(ObjectStats(int(oid), names.get(int(oid), f"object{oid}"), int(sel.size), mean, sd))
    mean, sd = _stats(errors) if errors.size else (float("nan"), float("nan"))
    return EvalReport(objects, int(errors.size), mean, sd, errors.tolist(), label)


def format_table(report: EvalReport) -> str:
    lines = []
    if report.label:
        lines.append(f"# {report.label}")
    lines.append(f"{'object':<20} {'count':>7} {'mean_deg':>10} {'sd_deg':>10}")
    for o in report.objects:
        lines.append(f"{o.name:<20} {o.count:>7d} {o.mean_deg:>10.4f} {o.sd_deg:>10.4f}")
    lines.append(f"{'overall':<20} {report.count:>7d} {report.mean_deg:>10.4f} {report.sd_deg:>10.4f}")
    if report.seconds_per_inference is not None:
        lines.append(f"# {1000 * report.seconds_per_inference:.3f} ms per inference")
    return "\n".join(lines) + "\n"


def format_kv(report: EvalReport) -> str:
    lines = []
    if report.label:
        lines.append(f"label={report.label}")
    for o in report.objects:
        lines.append(f"object={o.object_id} name={o.name} count={o.count} mean_deg={o.mean_deg!r} sd_deg={o.sd_deg!r}")
    lines.append(f"overall count={report.count} mean_deg={report.mean_deg!r} sd_deg={report.sd_deg!r}")
    if report.seconds_per_inference is not None:
        lines.append(f"seconds_per_inference={report.seconds_per_inference!r}")
    return "\n".join(lines) + "\n"


def parse_kv(text: str) -> dict:
    """Read back the ``overall`` line and per-object lines of :func:`format_kv`."""
    out: dict = {"objects": {}}
    for line in text.splitlines():
        fields = dict(tok.split("=", 1) for tok in line.split() if "=" in tok)
        if line.startswith("overall"):
            out.update(count=int(fields["count"]), mean_deg=float(fields["mean_deg"]), sd_deg=float(fields["sd_deg"]))
        elif "object" in fields:
            out["objects"][int(fields["object"])] = {
                "name": fields["name"], "count": int(fields["count"]),
                "mean_deg": float(fields["mean_deg"]), "sd_deg": float(fields["sd_deg"]),
            }
    return out


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model, data: PoseDataset, indices, noise: NoiseConfig, seed: int,
             batch_size: int = 64, label: str = "", timed: bool = False) -> EvalReport:
    """Perturb each test pose, predict a correction, compose, and measure the error.

    ``noise.resample`` copies of every index are evaluated, each with its own
    noise draw.
    """
    indices = [i for i in indices for _ in range(noise.resample)]
    if not indices:
        raise InvalidArgumentError("evaluation set is empty")
    model = as_model(model)
    rng = make_rng(seed)
    pairs = [perturb(data.q_gt[i], noise, rng) for i in indices]
    q_in = np.array([p.q_in.as_array() for p in pairs])
    errors = []
    elapsed = 0.0
    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        t0 = time.perf_counter()
        q_out = model.predict(data.images[idx], q_in[start:start + batch_size], idx)
        elapsed += time.perf_counter() - t0
        for j, row in enumerate(np.asarray(q_out, dtype=np.float64)):
            pair = pairs[start + j]
            q_ref = refined_pose(pair.q_in, UnitQuaternion.from_array(row))
            errors.append(angular_error(q_ref, data.q_gt[idx[j]]))
    report = build_report(errors, [data.object_ids[i] for i in indices], data.names, label or noise.label())
    if timed:
        report.seconds_per_inference = elapsed / len(indices)
    return report


# ---------------------------------------------------------------------------
# experiments

KINDS = ("training-size", "noise-distribution", "resampling")
DEFAULT_NOISES = (NoiseConfig.uniform(0, 30), NoiseConfig.normal(30, 5), NoiseConfig.normal(10, 5))


@dataclass
class ExperimentSpec:
    kind: str
    sizes: tuple[int, ...] = (500, 2000)
    noises: tuple[NoiseConfig, ...] = DEFAULT_NOISES
    resample: int = 3
    retrain: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidArgumentError(f"experiment kind must be one of {KINDS}, got {self.kind!r}")
        if self.kind == "training-size" and (not self.sizes or min(self.sizes) < 2):
            raise InvalidArgumentError("training-size experiment needs sizes >= 2")
        if self.kind == "noise-distribution" and not self.noises:
            raise InvalidArgumentError("noise-distribution experiment needs at least one noise config")
        if self.kind == "resampling" and self.resample < 1:
            raise InvalidArgumentError("resample factor must be >= 1")


@dataclass
class ExperimentBase:
    data: PoseDataset
    split: DatasetSplit
    train_cfg: TrainConfig = field(default_factory=TrainConfig)
    model: Refiner | None = None
    eval_seed: int = 12345
    init_seed: int = 0
    progress: object = None


@dataclass
class ExperimentResult:
    kind: str
    reports: list[EvalReport]

    def format(self, style: str = "table") -> str:
        return "".join(r.format(style) for r in self.reports)

    def means(self) -> list[float]:
        return [r.mean_deg for r in self.reports]


def _train_fresh(base: ExperimentBase, train_idx, cfg: TrainConfig) -> Refiner:
    model = build_network(base.init_seed, base.data.images.shape[-1])
    split = DatasetSplit(list(train_idx), base.split.validation, base.split.test, base.split.seed)
    train(model, base.data, split, cfg, base.progress)
    return model


def _base_model(base: ExperimentBase) -> Refiner:
    if base.model is None:
        base.model = _train_fresh(base, base.split.train, base.train_cfg)
    return base.model


def run_experiment(spec: ExperimentSpec, base: ExperimentBase) -> ExperimentResult:
    noise = base.train_cfg.noise
    test = base.split.test
    reports = []
    if spec.kind == "training-size":
        for n in spec.sizes:
            if n > len(base.split.train):
                raise InvalidArgumentError(f"training size {n} exceeds the {len(base.split.train)} training samples")
            model = _train_fresh(base, base.split.train[:n], base.train_cfg)
            reports.append(evaluate(model, base.data, test, replace(noise, resample=1), base.eval_seed,
                                    label=f"train_size={n}"))
    elif spec.kind == "noise-distribution":
        for cfg in spec.noises:
            if spec.retrain:
                model = _train_fresh(base, base.split.train, replace(base.train_cfg, noise=cfg))
            else:
                model = _base_model(base)
            reports.append(evaluate(model, base.data, test, cfg, base.eval_seed, label=f"noise={cfg.label()}"))
    else:
        model = _base_model(base)
        for k in sorted({1, spec.resample}):
            reports.append(evaluate(model, base.data, test, replace(noise, resample=k), base.eval_seed + k,
                                    label=f"resample={k}"))
    return ExperimentResult(spec.kind, reports)


def summary_line(result: ExperimentResult) -> str:
    means = result.means()
    if result.kind == "resampling" and len(means) == 2:
        return f"resampling delta_deg={abs(means[1] - means[0])!r}"
    return " ".join(f"{r.label}:{r.mean_deg:.4f}" for r in result.reports)


__all__ = [
    "angular_error", "evaluate", "EvalReport", "ExperimentSpec", "ExperimentBase", "run_experiment",
    "IdentityModel", "OracleModel", "NetworkModel", "build_report", "format_kv", "format_table", "parse_kv",
]
