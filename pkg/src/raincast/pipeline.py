"""End-to-end orchestration: dataset generation, splits, training,
calibration, prediction, evaluation, attribution, and report merging.

Every stage reads and writes only declared paths under one output directory,
and every artifact embeds the hash of the run configuration that produced
it.  All randomness flows from the single configured seed.
"""

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import baseline as bl
from .attribution import integrated_gradients
from .intensity import BinSet, exceedance_masks
from .micromodel import (
    ModelConfig,
    ParamSet,
    load_checkpoint,
    predict,
    save_checkpoint,
    train,
)
from .probcast import ThresholdTable, calibrate_thresholds, extract_intensity
from .raster import SENTINEL, SourceStack, load_raster, save_raster
from .synthdata import SceneConfig, SplitAssignment, gen_sequence, make_splits
from .verify import EvalSample, ReportConfig, build_report

MODELS = ("micromodel", "persistence", "advection")

STAGES = ("gen", "split", "train", "calibrate", "predict", "eval", "attribute", "report")


class MissingArtifactError(FileNotFoundError):
    """An upstream artifact required by this stage does not exist."""


class ConfigError(ValueError):
    """The run configuration violates the schema."""


def _take(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    seed: int
    bins: BinSet
    bins_name: str | None
    thresholds: tuple[float, ...]
    windows_km: tuple[float, ...]
    pools: tuple[int, ...]
    timeline_days: float
    step_min: float
    cycle_days: tuple[float, float, float]
    blackout_h: float
    scene: SceneConfig
    model: ModelConfig
    out_dir: str | None = None

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        _take(doc, {"seed", "bins", "thresholds", "windows_km", "pools", "timeline",
                    "splits", "scene", "model", "out_dir"}, "run config")
        try:
            seed = int(doc.get("seed", 0))
            bins_spec = doc.get("bins", "europe")
            if isinstance(bins_spec, str):
                bins = BinSet.preset(bins_spec)
                bins_name = bins_spec
            else:
                _take(bins_spec, {"edges", "top_width"}, "bins")
                bins = BinSet(tuple(bins_spec["edges"]), bins_spec.get("top_width", 5.0))
                bins_name = None
            timeline = doc.get("timeline", {})
            _take(timeline, {"days", "step_min"}, "timeline")
            splits = doc.get("splits", {})
            _take(splits, {"cycle_days", "blackout_h"}, "splits")
            cycle = tuple(splits.get("cycle_days", (12.0, 2.0, 2.0)))
            if len(cycle) != 3:
                raise ConfigError("cycle_days must hold train, val and test day counts")
            scene_doc = dict(doc.get("scene", {}))
            _take(scene_doc, set(SceneConfig.__dataclass_fields__), "scene")
            scene_doc.setdefault("seed", seed)
            for key in ("amp_range", "radius_range", "velocity"):
                if key in scene_doc:
                    scene_doc[key] = tuple(scene_doc[key])
            model_doc = dict(doc.get("model", {}))
            _take(model_doc, set(ModelConfig.__dataclass_fields__), "model")
            model_doc.setdefault("seed", seed)
            cfg = cls(
                seed=seed,
                bins=bins,
                bins_name=bins_name,
                thresholds=tuple(doc.get("thresholds", (0.5, 1.0, 2.0, 5.0, 10.0))),
                windows_km=tuple(doc.get("windows_km", (2.0, 10.0, 20.0))),
                pools=tuple(int(p) for p in doc.get("pools", (4,))),
                timeline_days=float(timeline.get("days", 20.0)),
                step_min=float(timeline.get("step_min", 60.0)),
                cycle_days=cycle,
                blackout_h=float(splits.get("blackout_h", 12.0)),
                scene=SceneConfig(**scene_doc),
                model=ModelConfig(**model_doc),
                out_dir=doc.get("out_dir"),
            )
        except (TypeError, ValueError, KeyError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(str(e)) from e
        if cfg.model.k_classes != cfg.bins.n_classes:
            raise ConfigError(
                f"model.k_classes = {cfg.model.k_classes} does not match "
                f"{cfg.bins.n_classes} bin edges"
            )
        for pool in cfg.pools:
            if pool < 1 or cfg.scene.h % pool or cfg.scene.w % pool:
                raise ConfigError(f"pool {pool} does not divide the {cfg.scene.h}x{cfg.scene.w} scene")
        return cfg

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(str(path))
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config is not valid JSON: {e}") from e
        return cls.from_dict(doc)

    def canonical(self) -> dict:
        return {
            "seed": self.seed,
            "bins": {"edges": list(self.bins.edges), "top_width": self.bins.top_width},
            "thresholds": list(self.thresholds),
            "windows_km": list(self.windows_km),
            "pools": list(self.pools),
            "timeline": {"days": self.timeline_days, "step_min": self.step_min},
            "splits": {"cycle_days": list(self.cycle_days), "blackout_h": self.blackout_h},
            "scene": asdict(self.scene),
            "model": asdict(self.model),
        }

    @property
    def hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# artifact helpers


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(str(path))
    return path


def _check_hash(doc: dict, cfg: RunConfig, path: Path, force: bool) -> None:
    if doc.get("config_hash") != cfg.hash and not force:
        raise ConfigError(
            f"{path} was produced by config {doc.get('config_hash')}, current is {cfg.hash} "
            "(use --force to override)"
        )


def _load_frames(out: Path) -> SourceStack:
    _require(out / "frames.json")
    _require(out / "frames.f32")
    return load_raster(out / "frames")


def _load_splits(out: Path) -> SplitAssignment:
    doc = json.loads(_require(out / "splits.json").read_text())
    return SplitAssignment(tuple(doc["timestamps_min"]), tuple(doc["labels"]))


def _window_origins(labels, split: str, t_in: int, t_out: int):
    """Frame indices whose full input+target window carries one split label."""
    n = len(labels)
    out = []
    for i in range(t_in - 1, n - t_out):
        window = labels[i - t_in + 1 : i + t_out + 1]
        if all(l == split for l in window):
            out.append(i)
    return out


def _samples(frames: np.ndarray, origins, t_in: int, t_out: int):
    return [
        (frames[i - t_in + 1 : i + 1], frames[i + 1 : i + 1 + t_out])
        for i in origins
    ]


# ---------------------------------------------------------------------------
# stages


def stage_gen(cfg: RunConfig, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    timestamps = np.arange(0.0, cfg.timeline_days * 1440.0, cfg.step_min)
    frames = gen_sequence(cfg.scene, len(timestamps))
    stack = SourceStack(
        frames[:, None], cfg.scene.res_km, (0.0, 0.0), tuple(timestamps.tolist()), "rate"
    )
    save_raster(out / "frames", stack)
    manifest = {
        "config_hash": cfg.hash,
        "scene": asdict(cfg.scene),
        "timeline": {"days": cfg.timeline_days, "step_min": cfg.step_min},
        "n_frames": len(timestamps),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")


def stage_split(cfg: RunConfig, out: Path) -> None:
    stack = _load_frames(out)
    assignment = make_splits(stack.timesteps_min, cfg.cycle_days, cfg.blackout_h)
    doc = {
        "config_hash": cfg.hash,
        "timestamps_min": list(assignment.timestamps_min),
        "labels": list(assignment.labels),
    }
    (out / "splits.json").write_text(json.dumps(doc, sort_keys=True) + "\n")


def stage_train(cfg: RunConfig, out: Path) -> None:
    stack = _load_frames(out)
    assignment = _load_splits(out)
    frames = stack.data[:, 0]
    origins = _window_origins(assignment.labels, "train", cfg.model.t_in, cfg.model.t_out)
    if not origins:
        raise ConfigError("no training windows fit inside the train split")
    dataset = _samples(frames, origins, cfg.model.t_in, cfg.model.t_out)
    params, curve = train(dataset, cfg.model, cfg.bins)
    save_checkpoint(out / "model", params, extra={"config_hash": cfg.hash})
    lines = ["step,loss"] + [f"{i},{v!r}" for i, v in enumerate(curve)]
    (out / "loss_curve.csv").write_text("\n".join(lines) + "\n")


def _lead_minutes(cfg: RunConfig) -> tuple[float, ...]:
    return tuple(cfg.step_min * (k + 1) for k in range(cfg.model.t_out))


def stage_calibrate(cfg: RunConfig, out: Path) -> None:
    stack = _load_frames(out)
    assignment = _load_splits(out)
    params = _load_model(cfg, out)
    frames = stack.data[:, 0]
    origins = _window_origins(assignment.labels, "val", cfg.model.t_in, cfg.model.t_out)
    if not origins:
        raise ConfigError("no calibration windows fit inside the val split")
    cubes, masks = [], []
    for inp, tgt in _samples(frames, origins, cfg.model.t_in, cfg.model.t_out):
        cubes.append(predict(params, inp))
        masks.append(exceedance_masks(tgt, cfg.bins))
    table = calibrate_thresholds(cubes, masks, bins=cfg.bins, lead_min=_lead_minutes(cfg))
    doc = {"config_hash": cfg.hash, "table": json.loads(table.to_json())}
    (out / "thresholds.json").write_text(json.dumps(doc, sort_keys=True) + "\n")


def _load_model(cfg: RunConfig, out: Path) -> ParamSet:
    _require(out / "model.json")
    _require(out / "model.f32")
    manifest = json.loads((out / "model.json").read_text())
    _check_hash(manifest, cfg, out / "model.json", force=False)
    return load_checkpoint(out / "model")


def _load_thresholds(cfg: RunConfig, out: Path) -> ThresholdTable:
    doc = json.loads(_require(out / "thresholds.json").read_text())
    _check_hash(doc, cfg, out / "thresholds.json", force=False)
    return ThresholdTable.from_json(json.dumps(doc["table"]), expect_edges=cfg.bins.edges)


def stage_predict(cfg: RunConfig, out: Path, model: str) -> None:
    if model not in MODELS:
        raise ConfigError(f"unknown model {model!r}; choose from {MODELS}")
    stack = _load_frames(out)
    assignment = _load_splits(out)
    frames = stack.data[:, 0]
    t_in, t_out = cfg.model.t_in, cfg.model.t_out
    origins = _window_origins(assignment.labels, "test", t_in, t_out)
    if not origins:
        raise ConfigError("no test windows fit inside the test split")

    rates_all, probs_all = [], []
    if model == "micromodel":
        params = _load_model(cfg, out)
        table = _load_thresholds(cfg, out)
    for inp, _tgt in _samples(frames, origins, t_in, t_out):
        if model == "micromodel":
            cube = predict(params, inp)
            rates = extract_intensity(cube, table, cfg.bins)
            probs_all.append(cube)
        elif model == "persistence":
            rates = bl.persistence(inp[-1], t_out)
        else:
            motion = bl.estimate_motion(inp)
            rates = bl.advect(inp[-1], motion, t_out)
        # pixels the baseline cannot see (advected in from outside) forecast no rain
        rates = np.where(rates == SENTINEL, 0.0, rates)
        rates_all.append(rates)

    rates_arr = np.stack(rates_all)
    doc = {
        "config_hash": cfg.hash,
        "model": model,
        "origin_indices": list(origins),
        "origins_min": [stack.timesteps_min[i] for i in origins],
        "lead_min": list(_lead_minutes(cfg)),
        "shape": list(rates_arr.shape),
        "has_prob": bool(probs_all),
        "k_classes": cfg.bins.n_classes if probs_all else 0,
    }
    blobs = [np.ascontiguousarray(rates_arr, dtype="<f4").tobytes()]
    if probs_all:
        blobs.append(np.ascontiguousarray(np.stack(probs_all), dtype="<f4").tobytes())
    (out / f"predictions_{model}.json").write_text(json.dumps(doc, sort_keys=True) + "\n")
    (out / f"predictions_{model}.f32").write_bytes(b"".join(blobs))


def _load_predictions(cfg: RunConfig, out: Path, model: str, force: bool):
    doc = json.loads(_require(out / f"predictions_{model}.json").read_text())
    _check_hash(doc, cfg, out / f"predictions_{model}.json", force)
    raw = np.frombuffer((_require(out / f"predictions_{model}.f32")).read_bytes(), dtype="<f4")
    raw = raw.astype(np.float64)
    shape = tuple(doc["shape"])
    n_rates = int(np.prod(shape))
    rates = raw[:n_rates].reshape(shape)
    probs = None
    if doc["has_prob"]:
        k = doc["k_classes"]
        pshape = (shape[0], shape[1], k, shape[2], shape[3])
        probs = raw[n_rates:].reshape(pshape)
    return doc, rates, probs


def stage_eval(cfg: RunConfig, out: Path, model: str, force: bool = False,
               plot_data: bool = False) -> None:
    manifest = json.loads(_require(out / "manifest.json").read_text())
    _check_hash(manifest, cfg, out / "manifest.json", force)
    stack = _load_frames(out)
    frames = stack.data[:, 0]
    doc, rates, probs = _load_predictions(cfg, out, model, force)
    t_out = cfg.model.t_out
    samples = []
    for j, i in enumerate(doc["origin_indices"]):
        obs = frames[i + 1 : i + 1 + t_out]
        samples.append(EvalSample(rates[j], obs, None if probs is None else probs[j]))
    rc = ReportConfig(
        thresholds=cfg.thresholds,
        windows_km=cfg.windows_km,
        pools=cfg.pools,
        res_km=cfg.scene.res_km,
        bins=cfg.bins,
        lead_min=tuple(doc["lead_min"]),
    )
    report = build_report(samples, rc)
    (out / f"report_{model}.csv").write_text(report.to_csv())
    rep_doc = json.loads(report.to_json())
    rep_doc["config_hash"] = cfg.hash
    rep_doc["model"] = model
    (out / f"report_{model}.json").write_text(json.dumps(rep_doc, sort_keys=True) + "\n")
    if plot_data:
        lines = ["metric,threshold,lead_min,value"]
        for row in rep_doc["rows"]:
            lines.append(f"{row['metric']},{row['threshold']},{row['lead_min']},{row['value']!r}")
        (out / f"plot_{model}.csv").write_text("\n".join(lines) + "\n")


def stage_attribute(cfg: RunConfig, out: Path, lead: int = 0, class_index: int = 0,
                    steps: int = 64) -> None:
    stack = _load_frames(out)
    assignment = _load_splits(out)
    params = _load_model(cfg, out)
    frames = stack.data[:, 0]
    origins = _window_origins(assignment.labels, "test", cfg.model.t_in, cfg.model.t_out)
    if not origins:
        raise ConfigError("no test windows to attribute")
    inp = frames[origins[0] - cfg.model.t_in + 1 : origins[0] + 1]
    result = integrated_gradients(params, inp, (lead, class_index, None), steps=steps)
    names = _plane_names(cfg)
    lines = ["feature,importance"]
    for name, v in zip(names, result["per_channel"]):
        lines.append(f"{name},{v!r}")
    lines.append(f"completeness_gap,{result['completeness_gap']!r}")
    (out / "attribution.csv").write_text("\n".join(lines) + "\n")


def _plane_names(cfg: RunConfig):
    t_in = cfg.model.t_in
    offsets = [int(-(t_in - 1 - j) * cfg.step_min) for j in range(t_in)]
    names = [f"rate_{o}min" for o in offsets] + [f"valid_{o}min" for o in offsets]
    if cfg.model.mode == "lead-conditioned":
        names += [f"lead_{k}" for k in range(cfg.model.t_out)]
    return names


def stage_report(cfg: RunConfig, out: Path, plot_data: bool = False) -> None:
    reports = sorted(out.glob("report_*.json"))
    if not reports:
        raise MissingArtifactError(str(out / "report_<model>.json"))
    lines = ["model,metric,threshold,lead_min,value"]
    plot_lines = ["model,metric,threshold,lead_min,value"]
    for path in reports:
        doc = json.loads(path.read_text())
        model = doc["model"]
        for row in doc["rows"]:
            v = row["value"]
            v = float("nan") if v is None else v
            lines.append(f"{model},{row['metric']},{row['threshold']},{row['lead_min']},{v!r}")
            plot_lines.append(
                f"{model},{row['metric']},{row['threshold']},{row['lead_min']},{v!r}"
            )
        for metric, v in sorted(doc["macro"].items()):
            v = float("nan") if v is None else v
            lines.append(f"{model},{metric},all,all,{v!r}")
    (out / "comparison.csv").write_text("\n".join(lines) + "\n")
    if plot_data:
        (out / "plot_data.csv").write_text("\n".join(plot_lines) + "\n")


def run_stage(stage: str, cfg: RunConfig, out: Path, **kwargs) -> None:
    if stage not in STAGES:
        raise ConfigError(f"unknown stage {stage!r}")
    if stage == "gen":
        stage_gen(cfg, out)
    elif stage == "split":
        stage_split(cfg, out)
    elif stage == "train":
        stage_train(cfg, out)
    elif stage == "calibrate":
        stage_calibrate(cfg, out)
    elif stage == "predict":
        stage_predict(cfg, out, kwargs["model"])
    elif stage == "eval":
        stage_eval(cfg, out, kwargs["model"], kwargs.get("force", False),
                   kwargs.get("plot_data", False))
    elif stage == "attribute":
        stage_attribute(cfg, out, kwargs.get("lead", 0), kwargs.get("class_index", 0),
                        kwargs.get("steps", 64))
    elif stage == "report":
        stage_report(cfg, out, kwargs.get("plot_data", False))
