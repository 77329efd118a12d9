"""End-to-end pipeline: pretraining, adaptation, distillation, evaluation, analysis."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import data as Dt
from . import detection as D
from . import model as M
from . import tensor as T
from .adapt import AdaptConfig, MeanTeacher, epoch_batches, heatmap_from_boxes
from .checkpoint import load_checkpoint, save_checkpoint
from .daaw import DEFAULT_CANDIDATES, DEFAULT_K, DEFAULT_SAMPLES, StabilityReport, select_weight
from .distill import DistillConfig, Distiller, StaticTeacher, freeze_all, init_student_from_dsod
from .tensor import OptimizerState, ParamStore, Tape

logger = logging.getLogger(__name__)

METRIC_COLUMNS = (
    "stage",
    "iteration",
    "epoch",
    "det",
    "det_masked",
    "reg",
    "hard_ema",
    "hard_static",
    "soft_static",
    "total",
    "w_c3",
    "w_c4",
    "w_c5",
    "n_pseudo",
    "eval_ap50",
)


# ----------------------------------------------------------------- configuration


@dataclass
class PretrainConfig:
    epochs: int = 15
    lr: float = 3e-3
    batch_size: int = 8
    foundation_seed: int = 0  # the surrogate is one fixed artifact, independent of the run seed
    foundation_epochs: int = 8
    foundation_images: int = 1200
    foundation_lr: float = 3e-3


@dataclass
class SweepConfig:
    enabled: bool = True
    samples: int = DEFAULT_SAMPLES
    k: int = DEFAULT_K
    candidates: tuple[float, ...] = DEFAULT_CANDIDATES


@dataclass
class RunConfig:
    seed: int = 0
    pair: str = "fog"
    n_train: int = 800
    n_eval: int = 200
    model: M.DetectorConfig = field(default_factory=M.DetectorConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# ----------------------------------------------------------------- evaluation


def evaluate(
    config: M.DetectorConfig,
    params: ParamStore,
    dataset: Dt.Dataset,
    weights: Sequence[float] | None = None,
    use_foundation: bool = True,
) -> dict:
    """AP50 of ``params`` on ``dataset`` (class-wise NMS at 0.5)."""
    preds = M.predict(config, params, dataset.images, weights, use_foundation)
    res = D.ap50(preds, dataset.labels, config.num_classes)
    return {"ap50": res["mAP"], "per_class": res["per_class"]}


# ----------------------------------------------------------------- pretraining


def mixture_dataset(scene: Dt.SceneSpec, n: int, seed: int) -> Dt.Dataset:
    """Scenes under random shift kinds and strengths (the foundation's broad corpus)."""
    rng = np.random.default_rng([seed, 31])
    images = np.empty((n, 3, *scene.image_size))
    labels = []
    for i in range(n):
        img, lab = Dt.render_scene(scene, seed, i)
        kind = Dt.SHIFT_KINDS[int(rng.integers(len(Dt.SHIFT_KINDS)))]
        dom = Dt.DomainSpec(kind, kind, float(rng.uniform(0.0, 1.0)) if kind != "none" else 0.0)
        images[i] = Dt.apply_domain(img, dom, seed, i)
        labels.append(lab)
    return Dt.Dataset(images, labels, seed, Dt.DomainSpec("mixture", "none", 0.0), scene)


def dense_targets(labels, fh: int, fw: int, num_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class centre heatmaps ``[fh, fw, C]`` and box sizes ``[fh, fw, 2]`` of the dominant object."""
    maps = np.zeros((fh, fw, num_classes))
    sizes = np.zeros((fh, fw, 2))
    best = np.zeros((fh, fw))
    for c, box in labels:
        hm = heatmap_from_boxes([box], fh, fw)
        maps[..., c] = np.maximum(maps[..., c], hm)
        upd = hm > best
        sizes[upd] = (box.w, box.h)
        best = np.maximum(best, hm)
    return maps, np.concatenate([sizes, best[..., None]], axis=-1)


_FOUNDATION_CACHE: dict[str, ParamStore] = {}


def pretrain_foundation(config: M.DetectorConfig, seed: int, cfg: PretrainConfig, scene: Dt.SceneSpec | None = None) -> ParamStore:
    """Train the foundation surrogate on a dense task over the domain mixture, then lock it.

    Results are memoized per process on ``(config, seed, cfg)``.
    """
    scene = scene or Dt.SceneSpec(image_size=config.image_size, num_classes=config.num_classes)
    key = repr((config, seed, cfg, scene))
    if key not in _FOUNDATION_CACHE:
        _FOUNDATION_CACHE[key] = _train_foundation(config, seed, cfg, scene)
    return _FOUNDATION_CACHE[key].copy()


def _train_foundation(config: M.DetectorConfig, seed: int, cfg: PretrainConfig, scene: Dt.SceneSpec) -> ParamStore:
    ds = mixture_dataset(scene, cfg.foundation_images, seed * 1000 + 9)
    rng = np.random.default_rng([seed, 5])
    params = M.init_foundation(config, rng, locked=False)
    C = config.num_classes
    params.add("aux.w", T.glorot(rng, config.foundation_dim, C + 2))
    params.add("aux.b", np.zeros(C + 2))
    fh, fw = config.foundation_shape
    targets = [dense_targets(lab, fh, fw, C) for lab in ds.labels]
    opt = OptimizerState(lr=cfg.foundation_lr)
    for epoch in range(cfg.foundation_epochs):
        for idx in epoch_batches(len(ds), cfg.batch_size, rng):
            maps = np.stack([targets[i][0] for i in idx])
            extra = np.stack([targets[i][1] for i in idx])
            params.zero_grad()
            with Tape() as tape:
                feat = M.encode_foundation(config, params, ds.images[idx], require_locked=False)
                pred = T.linear(feat, params["aux.w"], params["aux.b"])
                cls = T.mean(T.square(pred[..., :C] - maps))
                size = T.mean(T.square(pred[..., C:] - extra[..., :2]) * np.repeat(extra[..., 2:], 2, axis=-1))
                loss = cls + size
                tape.backward(loss)
            T.optimizer_step(params, opt)
        logger.info("foundation epoch %d loss %.5f", epoch, loss.item())
    out = ParamStore()
    for k, t in params.items():
        if k.startswith(M.FOUNDATION_PREFIX):
            out.add(k, t.data.copy(), locked=True)
    return out


def supervised_epoch(config: M.DetectorConfig, params: ParamStore, ds: Dt.Dataset, opt: OptimizerState, rng, batch_size: int) -> float:
    cells = M.cell_bounds(config)
    losses = []
    for idx in epoch_batches(len(ds), batch_size, rng):
        params.zero_grad()
        with Tape() as tape:
            out = M.forward(config, params, ds.images[idx], use_foundation=False)
            targets = [D.labels_to_arrays(ds.labels[i]) for i in idx]
            loss = D.batch_detection_loss(out.logits, out.boxes, targets, cells=cells) * (1.0 / len(idx))
            tape.backward(loss)
        T.optimizer_step(params, opt)
        losses.append(loss.item())
    return math.fsum(losses) / len(losses)


def pretrain_source(
    config: M.DetectorConfig, pair: Dt.BenchmarkPair, seed: int, cfg: PretrainConfig, foundation: ParamStore | None = None
) -> tuple[ParamStore, list[dict]]:
    """Supervised source training; the locked foundation surrogate is attached afterwards."""
    rng = np.random.default_rng([seed, 3])
    params = M.init_detector(config, rng)
    opt = OptimizerState(lr=cfg.lr)
    rows = []
    for epoch in range(cfg.epochs):
        loss = supervised_epoch(config, params, pair.source_train, opt, rng, cfg.batch_size)
        rows.append({"stage": "pretrain", "iteration": opt.step, "epoch": epoch, "total": loss})
        logger.info("source epoch %d loss %.4f", epoch, loss)
    if foundation is None:
        foundation = pretrain_foundation(config, cfg.foundation_seed, cfg)
    for k, t in foundation.items():
        params.add(k, t.data.copy(), locked=True)
    return params, rows


# ----------------------------------------------------------------- adaptation


@dataclass
class AdaptResult:
    teacher: ParamStore
    student: ParamStore
    w_star: tuple[float, float, float]
    report: StabilityReport | None
    rows: list[dict]
    evaluation: dict
    best: ParamStore
    best_evaluation: dict


def train_with_evals(n: int, batch_size: int, epochs: int, rng, step, score) -> tuple[list[dict], dict, dict]:
    """Shared loop: ``step(idx, epoch)`` per batch, ``score()`` every half epoch.

    Returns the rows, the best evaluation and the ``keep`` snapshot taken at it.
    ``score`` returns ``(evaluation, snapshot)``; ties keep the earlier one.
    """
    rows: list[dict] = []
    best_eval, best_snap = None, None
    for epoch in range(epochs):
        batches = list(epoch_batches(n, batch_size, rng))
        half = max(1, len(batches) // 2)
        for b, idx in enumerate(batches):
            rows.append(step(idx, epoch))
            if b + 1 == half or b + 1 == len(batches):
                ev, snap = score()
                rows[-1]["eval_ap50"] = ev["ap50"]
                logger.info("epoch %d batch %d target AP50 %.4f", epoch, b + 1, ev["ap50"])
                if best_eval is None or ev["ap50"] > best_eval["ap50"]:
                    best_eval, best_snap = {**ev, "iteration": rows[-1].get("iteration", len(rows))}, snap
    return rows, best_eval, best_snap


def attach_projectors(config: M.DetectorConfig, params: ParamStore, seed: int) -> ParamStore:
    out = params.copy()
    return M.init_projectors(config, np.random.default_rng([seed, 17]), out)


def sweep_weight(config: M.DetectorConfig, params: ParamStore, images: np.ndarray, cfg: SweepConfig) -> StabilityReport:
    """Stability sweep of the shared fusion weight on unlabeled target images."""

    def init_model(imgs):
        return M.predict(config, params, imgs, use_foundation=False)

    def fused_factory(w):
        return lambda imgs: M.predict(config, params, imgs, (w, w, w), use_foundation=True)

    return select_weight(init_model, fused_factory, images[: cfg.samples], cfg.candidates, cfg.k)


def run_adaptation(
    config: M.DetectorConfig,
    source: ParamStore,
    pair: Dt.BenchmarkPair,
    rc: RunConfig,
    report: StabilityReport | None = None,
) -> AdaptResult:
    """Stage I: weight sweep (unless disabled or given), then mean-teacher training on the target split."""
    cfg = dataclasses.replace(rc.adapt, seed=rc.seed)
    params = attach_projectors(config, source, rc.seed) if (cfg.use_ufi or cfg.use_safr) else source.copy()
    if not (cfg.use_ufi and rc.sweep.enabled):
        report = None
    elif report is None:
        report = sweep_weight(config, params, pair.target_train.images, rc.sweep)
    if report is not None:
        cfg = dataclasses.replace(cfg, w_star=(report.w_star,) * 3)
        logger.info("selected fusion weight %.3f", report.w_star)
    if not cfg.use_ufi:
        cfg = dataclasses.replace(cfg, w_star=(0.0, 0.0, 0.0))
    ds = pair.target_train
    iters = math.ceil(len(ds) / cfg.batch_size)
    runner = MeanTeacher(config, params, cfg, iters)
    use_found = cfg.use_ufi or cfg.use_safr

    def step(idx, epoch):
        r = runner.step(ds.images[idx])
        w = r.pop("weights")
        return {"stage": "adapt", "epoch": epoch, **r, "w_c3": w[0], "w_c4": w[1], "w_c5": w[2]}

    def score():
        ev = evaluate(config, runner.teacher, pair.target_eval, runner.current_weights(), use_found)
        return ev, runner.teacher.copy(requires_grad=False)

    rng = np.random.default_rng([rc.seed, 19])
    rows, best_eval, best = train_with_evals(len(ds), cfg.batch_size, cfg.epochs, rng, step, score)
    final = evaluate(config, runner.teacher, pair.target_eval, cfg.w_star, use_found)
    if best is None:
        best, best_eval = runner.teacher.copy(requires_grad=False), final
    return AdaptResult(runner.teacher, runner.student, tuple(cfg.w_star), report, rows, final, best, best_eval)


# ----------------------------------------------------------------- distillation


@dataclass
class DistillResult:
    student: ParamStore
    rows: list[dict]
    evaluation: dict
    best: ParamStore
    best_evaluation: dict


def run_distillation(
    config: M.DetectorConfig,
    dsod: ParamStore,
    w_star: Sequence[float],
    source: ParamStore,
    pair: Dt.BenchmarkPair,
    rc: RunConfig,
) -> DistillResult:
    """Stage II: foundation-free student trained against the EMA and static teachers."""
    cfg = dataclasses.replace(rc.distill, seed=rc.seed)
    init = dsod if cfg.init == "dsod" else source
    student, _ = init_student_from_dsod(init, config)
    static = StaticTeacher(config, freeze_all(dsod.copy(requires_grad=False)), tuple(float(w) for w in w_star))
    runner = Distiller(config, student, static, cfg)
    ds = pair.target_train

    def step(idx, epoch):
        return {"stage": "distill", "epoch": epoch, **runner.step(ds.images[idx])}

    def score():
        ev = evaluate(config, runner.student, pair.target_eval, use_foundation=False)
        return ev, runner.student.copy(requires_grad=False)

    rng = np.random.default_rng([rc.seed, 29])
    rows, best_eval, best = train_with_evals(len(ds), cfg.batch_size, cfg.epochs, rng, step, score)
    final = evaluate(config, runner.student, pair.target_eval, use_foundation=False)
    if best is None:
        best, best_eval = runner.student.copy(requires_grad=False), final
    return DistillResult(runner.student, rows, final, best, best_eval)


def ablation(rc: RunConfig) -> dict:
    """Source-only and the three Stage-I variants on one seed; target AP50 of each best checkpoint."""
    scene = Dt.SceneSpec(image_size=rc.model.image_size, num_classes=rc.model.num_classes)
    pair = Dt.make_pair(rc.pair, rc.seed, rc.n_train, rc.n_eval, scene)
    source, _ = pretrain_source(rc.model, pair, rc.seed, rc.pretrain)
    variants = {
        "mt": dict(use_ufi=False, use_safr=False),
        "mt_ufi": dict(use_ufi=True, use_safr=False),
        "dsod": dict(use_ufi=True, use_safr=True),
    }
    out = {"pair": pair, "source": source, "ap50": {"source": evaluate(rc.model, source, pair.target_eval, use_foundation=False)["ap50"]}}
    report = None
    for name, flags in variants.items():
        vrc = dataclasses.replace(rc, adapt=dataclasses.replace(rc.adapt, **flags))
        if flags["use_ufi"] and report is None and rc.sweep.enabled:
            report = sweep_weight(rc.model, attach_projectors(rc.model, source, rc.seed), pair.target_train.images, rc.sweep)
        res = run_adaptation(rc.model, source, pair, vrc, report)
        out[name] = res
        out["ap50"][name] = res.best_evaluation["ap50"]
        logger.info("seed %d %s target AP50 %.4f", rc.seed, name, res.best_evaluation["ap50"])
    return out


# ----------------------------------------------------------------- analysis


ORTHO_COLUMNS = ("checkpoint_id", "level", "mean_cos", "mean_abs_cos")


def orthogonality_rows(config: M.DetectorConfig, params: ParamStore, images: np.ndarray, checkpoint_id: str) -> list[dict]:
    """Per-level mean (and mean absolute) cosine between CNN and projected foundation features."""
    cnn = M.encode_cnn(config, params, images)
    found = M.encode_foundation(config, params, images)
    rows = []
    for level, name in enumerate(M.LEVELS):
        a = cnn[level].data.reshape(-1, config.dims[level])
        b = M.sse_project(config, params, found, level).data.reshape(-1, config.dims[level])
        cos = T.rowwise_cosine(a, b)
        rows.append(
            {
                "checkpoint_id": checkpoint_id,
                "level": name,
                "mean_cos": math.fsum(cos) / cos.size,
                "mean_abs_cos": math.fsum(np.abs(cos)) / cos.size,
            }
        )
    return rows


def orthogonality_images(config: M.DetectorConfig, seed: int, n_images: int = 100) -> np.ndarray:
    scene = Dt.SceneSpec(image_size=config.image_size, num_classes=config.num_classes)
    return Dt.generate_dataset(scene, Dt.DomainSpec(), n_images, seed * 1000 + 7).images


def analyze_orthogonality(config: M.DetectorConfig, seed: int, n_images: int = 100) -> list[dict]:
    """Orthogonality of a freshly initialized hybrid model (every branch random)."""
    rng = np.random.default_rng([seed, 41])
    params = M.init_detector(config, rng)
    M.init_foundation(config, rng, params)
    M.init_projectors(config, rng, params)
    return orthogonality_rows(config, params, orthogonality_images(config, seed, n_images), f"init-seed{seed}-d{min(config.dims)}")


# ----------------------------------------------------------------- output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def metrics_csv(rows: Sequence[dict], columns: Sequence[str] = METRIC_COLUMNS) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for r in rows:
        writer.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def write_text(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def write_json(path: Path, payload: dict) -> Path:
    return write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ----------------------------------------------------------------- config files


SECTIONS = ("model", "pretrain", "adapt", "sweep", "distill")


def _coerce(raw: str, default):
    text = raw.strip()
    if isinstance(default, bool):
        if text.lower() not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
            raise ValueError(f"not a boolean: {raw!r}")
        return text.lower() in ("1", "true", "yes", "on")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        kind = int if default and all(isinstance(x, int) for x in default) else float
        return tuple(kind(x) for x in text.replace(",", " ").split())
    if default is None:
        return None if text.lower() in ("", "none") else int(text)
    return text


def apply_overrides(obj, values: dict, where: str = ""):
    """Return a copy of dataclass ``obj`` with string/typed ``values`` applied."""
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in values.items():
        if key not in names:
            raise KeyError(f"unknown setting {where}{key!r}")
        default = getattr(obj, key)
        changes[key] = _coerce(value, default) if isinstance(value, str) else value
    return dataclasses.replace(obj, **changes)


def load_config(path: str | Path | None = None) -> RunConfig:
    """Read an INI-style file: ``[run]`` plus one section per stage."""
    rc = RunConfig()
    if path is None:
        return rc
    parser = configparser.ConfigParser()
    with open(path) as fh:
        parser.read_file(fh)
    for section in parser.sections():
        values = dict(parser[section])
        if section == "run":
            rc = apply_overrides(rc, values, "run.")
        elif section in SECTIONS:
            sub = getattr(rc, section)
            rc = dataclasses.replace(rc, **{section: apply_overrides(sub, values, f"{section}.")})
        else:
            raise KeyError(f"unknown config section {section!r}")
    # a pinned weight replaces the sweep unless the sweep is requested explicitly
    if parser.has_option("adapt", "w_star") and not parser.has_option("sweep", "enabled"):
        rc = dataclasses.replace(rc, sweep=dataclasses.replace(rc.sweep, enabled=False))
    return rc


# ----------------------------------------------------------------- stages on a run directory


SPLITS = ("source_train", "source_eval", "target_train", "target_eval")


def load_pair(rc: RunConfig, out: Path) -> Dt.BenchmarkPair:
    """The generated dataset under ``out/data`` if present, else regenerate it from the seed."""
    d = Path(out) / "data"
    if all((d / s / "labels.json").exists() for s in SPLITS):
        return Dt.BenchmarkPair(rc.pair, *(Dt.load_dataset(d / s) for s in SPLITS))
    scene = Dt.SceneSpec(image_size=rc.model.image_size, num_classes=rc.model.num_classes)
    return Dt.make_pair(rc.pair, rc.seed, rc.n_train, rc.n_eval, scene)


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run the '{stage}' stage first")
    return path


def stage_generate(rc: RunConfig, out: Path) -> Path:
    pair = load_pair(rc, Path(out) / "__none__")
    for name in SPLITS:
        Dt.save_dataset(getattr(pair, name), Path(out) / "data" / name)
    return Path(out) / "data"


def stage_pretrain(rc: RunConfig, out: Path) -> dict:
    out = Path(out)
    pair = load_pair(rc, out)
    params, rows = pretrain_source(rc.model, pair, rc.seed, rc.pretrain)
    meta = stage_meta(rc, "pretrain", rows[-1]["iteration"] if rows else 0)
    save_checkpoint(out / "pretrain" / "checkpoint.dsod", params, meta)
    write_text(out / "pretrain" / "metrics.csv", metrics_csv(rows))
    result = {
        "source_eval": evaluate(rc.model, params, pair.source_eval, use_foundation=False),
        "target_eval": evaluate(rc.model, params, pair.target_eval, use_foundation=False),
    }
    write_json(out / "pretrain" / "eval.json", result)
    return result


def _load_stage(out: Path, stage: str) -> tuple[ParamStore, dict]:
    return load_checkpoint(_require(Path(out) / stage / "checkpoint.dsod", stage))


def stage_sweep(rc: RunConfig, out: Path) -> StabilityReport:
    out = Path(out)
    source, _ = _load_stage(out, "pretrain")
    pair = load_pair(rc, out)
    params = attach_projectors(rc.model, source, rc.seed)
    report = sweep_weight(rc.model, params, pair.target_train.images, rc.sweep)
    write_text(out / "sweep" / "stability.csv", report.to_csv())
    return report


def read_stability_csv(path: Path) -> StabilityReport:
    with open(path) as fh:
        rows = list(csv.DictReader(fh))
    sel = [i for i, r in enumerate(rows) if r["selected"] == "1"]
    return StabilityReport(
        [float(r["w"]) for r in rows],
        [float(r["s_cls"]) for r in rows],
        [float(r["s_loc"]) for r in rows],
        [float(r["s_joint"]) for r in rows],
        sel[0] if sel else -1,
    )


def stage_adapt(rc: RunConfig, out: Path) -> AdaptResult:
    out = Path(out)
    source, _ = _load_stage(out, "pretrain")
    pair = load_pair(rc, out)
    sweep_file = out / "sweep" / "stability.csv"
    report = read_stability_csv(sweep_file) if sweep_file.exists() else None
    res = run_adaptation(rc.model, source, pair, rc, report)
    meta = stage_meta(rc, "adapt", len(res.rows), w_star=list(res.w_star), adapt=_plain(rc.adapt))
    save_checkpoint(out / "adapt" / "checkpoint.dsod", res.teacher, meta)
    best_meta = {**meta, "iteration": res.best_evaluation.get("iteration", len(res.rows)), "best_ap50": res.best_evaluation["ap50"]}
    save_checkpoint(out / "adapt" / "checkpoint_best.dsod", res.best, best_meta)
    write_text(out / "adapt" / "metrics.csv", metrics_csv(res.rows))
    if res.report is not None:
        write_text(out / "adapt" / "stability.csv", res.report.to_csv())
    payload = {"target_eval": res.evaluation, "best_target_eval": res.best_evaluation, "w_star": list(res.w_star)}
    write_json(out / "adapt" / "eval.json", payload)
    return res


def stage_distill(rc: RunConfig, out: Path) -> DistillResult:
    """Stage II from the best Stage-I checkpoint."""
    out = Path(out)
    source, _ = _load_stage(out, "pretrain")
    dsod, meta = load_checkpoint(_require(out / "adapt" / "checkpoint_best.dsod", "adapt"))
    pair = load_pair(rc, out)
    res = run_distillation(rc.model, dsod, meta["w_star"], source, pair, rc)
    meta = stage_meta(rc, "distill", len(res.rows), distill=_plain(rc.distill))
    save_checkpoint(out / "distill" / "checkpoint.dsod", res.student, meta)
    best_meta = {**meta, "iteration": res.best_evaluation.get("iteration", len(res.rows)), "best_ap50": res.best_evaluation["ap50"]}
    save_checkpoint(out / "distill" / "checkpoint_best.dsod", res.best, best_meta)
    write_text(out / "distill" / "metrics.csv", metrics_csv(res.rows))
    write_json(out / "distill" / "eval.json", {"target_eval": res.evaluation, "best_target_eval": res.best_evaluation})
    return res


def stage_evaluate(rc: RunConfig, out: Path) -> dict:
    """Evaluate every checkpoint present in the run directory on both eval splits."""
    out = Path(out)
    pair = load_pair(rc, out)
    result = {}
    for stage in ("pretrain", "adapt", "distill"):
        path = out / stage / "checkpoint.dsod"
        if not path.exists():
            continue
        params, meta = load_checkpoint(path)
        config = M.DetectorConfig.from_dict(meta["model"])
        weights = meta.get("w_star")
        use_found = stage == "adapt" and M.has_foundation(params)
        result[stage] = {
            split: evaluate(config, params, getattr(pair, split), weights, use_found) for split in ("source_eval", "target_eval")
        }
    if not result:
        raise FileNotFoundError(f"no checkpoints under {out}")
    write_json(out / "eval.json", result)
    return result


def stage_analyze(rc: RunConfig, out: Path, wide: int = 256, n_images: int = 100) -> list[dict]:
    """Orthogonality at init (configured and ``wide``-channel models) and of any Stage-I checkpoints."""
    out = Path(out)
    rows = analyze_orthogonality(rc.model, rc.seed, n_images)
    rows += analyze_orthogonality(dataclasses.replace(rc.model, dims=(wide,) * 3), rc.seed, n_images)
    images = orthogonality_images(rc.model, rc.seed, n_images)
    for name in ("checkpoint.dsod", "checkpoint_best.dsod"):
        path = out / "adapt" / name
        if path.exists():
            params, meta = load_checkpoint(path)
            config = M.DetectorConfig.from_dict(meta["model"])
            rows += orthogonality_rows(config, params, images, f"adapt/{name}")
    write_text(out / "analyze" / "orthogonality.csv", metrics_csv(rows, ORTHO_COLUMNS))
    return rows


def config_digest(rc: RunConfig) -> str:
    """Short SHA-256 of the resolved run configuration."""
    return hashlib.sha256(json.dumps(_plain(rc), sort_keys=True).encode()).hexdigest()[:16]


def stage_meta(rc: RunConfig, stage: str, iteration: int, **extra) -> dict:
    return {"stage": stage, "seed": rc.seed, "iteration": int(iteration), "config_digest": config_digest(rc), "model": rc.model.to_dict(), **extra}


def _plain(obj) -> dict:
    return json.loads(json.dumps(dataclasses.asdict(obj)))
