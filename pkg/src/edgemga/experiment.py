"""End-to-end experiment: select images, seed on the source, refine on the target.

Configuration is a flat ``key = value`` file (``#`` starts a comment).
Relative paths resolve against the config file's directory. Recognized
keys and their defaults are the fields of :class:`ExperimentConfig`;
``dataset``, ``source``, ``target`` and ``output`` are required. Numeric
values may be written as fractions such as ``8/255``.
"""

from __future__ import annotations

import logging
import shutil
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .advedge import AdvEdgeAttack, AttackConfig
from .cam import compute_cams, write_pgm
from .checkpoint import load_checkpoint, save_seeds
from .data import dataset_exists, load_dataset, save_png, select_evaluation_set
from .metrics import (
    DEFAULT_THRESHOLDS,
    EvaluationRecord,
    iou_sweep,
    iou_sweep_to_csv,
    noise_rate,
    records_from_csv,
    records_to_csv,
    summarize,
    summary_to_csv,
)
from .mga import MgaConfig, run_mga_batch
from .models import QueryOracle

logger = logging.getLogger(__name__)

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "run_experiment", "report"]

CONFIG_NAME = "experiment.cfg"


class ConfigError(ValueError):
    pass


def _number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"not a number: {text!r}") from exc


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


@dataclass
class ExperimentConfig:
    dataset: Path
    source: Path
    target: Path
    output: Path
    dataset_format: str = "auto"
    n_images: int = 10
    per_class: int = 1
    confidence: float = 0.6
    seed: int = 0
    interpreter: str = "CAM"
    # white-box stage
    epsilon: float = 8 / 255
    alpha: float = 1 / 255
    iterations: int = 300
    lam: float = 0.204
    tau: float = 0.2
    masked: bool = True
    # black-box stage
    population_size: int = 8
    crossover_rate: float = 0.5
    mutation_rate: float = 0.005
    mutation_scale: float = 1.0
    query_cap: int = 50_000
    mga_init: str = "seed"
    batch_size: int = 100

    @property
    def attack_config(self) -> AttackConfig:
        return AttackConfig(self.epsilon, self.alpha, self.iterations, self.lam, self.tau, self.masked)

    @property
    def mga_config(self) -> MgaConfig:
        return MgaConfig(
            self.population_size,
            self.crossover_rate,
            self.mutation_rate,
            self.mutation_scale,
            self.query_cap,
            self.seed,
            self.mga_init,
        )

    def validate(self) -> None:
        if not dataset_exists(self.dataset):
            raise ConfigError(f"dataset: {self.dataset} does not exist")
        for key in ("source", "target"):
            p = getattr(self, key)
            if not p.exists():
                raise ConfigError(f"{key}: checkpoint {p} does not exist")
        if not 0.0 <= self.confidence < 1.0:
            raise ConfigError("confidence must be in [0, 1)")
        if self.n_images < 0 or self.per_class < 1:
            raise ConfigError("n_images must be >= 0 and per_class >= 1")
        self.attack_config
        self.mga_config

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_PATH_KEYS = {"dataset", "source", "target", "output"}


def parse_config(text: str, base: Path | None = None) -> ExperimentConfig:
    base = base or Path.cwd()
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in _PATH_KEYS:
            p = Path(value)
            values[key] = p if p.is_absolute() else (base / p)
        elif types[key] == "bool":
            values[key] = _bool(value)
        elif types[key] == "int":
            num = _number(value)
            if num != int(num):
                raise ConfigError(f"line {lineno}: {key} must be an integer")
            values[key] = int(num)
        elif types[key] == "float":
            values[key] = _number(value)
        else:
            values[key] = value
    missing = _PATH_KEYS - set(values)
    if missing:
        raise ConfigError(f"missing keys: {', '.join(sorted(missing))}")
    return ExperimentConfig(**values)


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(encoding="utf-8"), p.parent)


def _isolated(stage: str, fn, keep: list[int], ids, errors: list[str]) -> dict:
    """Run ``fn`` on all kept indices at once; on failure, one image at a time.

    Returns ``{index: result}`` for the images that went through and drops
    the others from ``keep`` after recording why.
    """
    if not keep:
        return {}
    try:
        return dict(zip(keep, fn(list(keep))))
    except Exception:
        logger.warning("%s failed on the batch; retrying image by image", stage)
    out = {}
    for i in list(keep):
        try:
            out[i] = fn([i])[0]
        except Exception as exc:
            logger.exception("image %s failed during %s", ids[i], stage)
            errors.append(f"{ids[i]}: {stage}: {exc}")
            keep.remove(i)
    return out


def _record(cfg, image_id, y, result, x, x_adv, benign_map, adv_map) -> EvaluationRecord:
    return EvaluationRecord(
        image_id=image_id,
        y=int(y),
        success=result.success,
        queries=result.queries_used,
        noise_rate=noise_rate(x, x_adv, cfg.epsilon),
        iou=dict(iou_sweep(benign_map, adv_map, DEFAULT_THRESHOLDS)),
        adv_class=result.adv_class,
    )


def run_experiment(cfg: ExperimentConfig) -> dict:
    """Run the full pipeline and write every artifact under ``cfg.output``.

    A failure on one image is written to ``notes.txt`` and that image is
    left out; the other images are unaffected.
    """
    cfg.validate()
    source = load_checkpoint(cfg.source)
    target = load_checkpoint(cfg.target)
    X_all, y_all, ids_all = load_dataset(cfg.dataset, cfg.dataset_format, target.spec_.n_classes)
    idx, skipped = select_evaluation_set(
        X_all, y_all, target, cfg.n_images, cfg.confidence, cfg.per_class, cfg.seed
    )
    X, y = X_all[idx], y_all[idx]
    ids = [ids_all[i] for i in idx]

    out = Path(cfg.output)
    if out.exists() and any(out.iterdir()):
        if not (out / CONFIG_NAME).exists():
            raise ConfigError(f"output directory {out} is not empty and holds no previous run")
        shutil.rmtree(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "maps").mkdir()
    (out / CONFIG_NAME).write_text(cfg.to_text(), encoding="utf-8")

    errors: list[str] = []
    keep = list(range(len(X)))
    attack = AdvEdgeAttack(source, batch_size=cfg.batch_size, **cfg.attack_config.__dict__)
    seeds = _isolated("white-box", lambda ii: attack.generate(X[ii], y[ii], [ids[i] for i in ii]), keep, ids, errors)
    save_seeds(out / "seeds.aebm", [seeds[i] for i in keep])

    mga_cfg = cfg.mga_config

    def black_box(ii):
        # image i always draws from stream (seed, i), whatever the batch
        oracles = [QueryOracle(target, mga_cfg.query_cap) for _ in ii]
        return run_mga_batch(
            X[ii], y[ii], [seeds[i].delta for i in ii], [seeds[i].n_w for i in ii],
            oracles, mga_cfg, cfg.epsilon, [ids[i] for i in ii], indices=ii,
        )

    results = _isolated("black-box", black_box, keep, ids, errors)

    x_adv = {i: np.clip(X[i] + results[i].delta, 0, 1).astype(X.dtype) for i in keep}

    def maps(ii):
        benign = compute_cams(target, X[ii], y[ii])
        adv = compute_cams(target, np.stack([x_adv[i] for i in ii]), y[ii])
        return list(zip(benign, adv))

    cams = _isolated("attribution", maps, keep, ids, errors)
    records = {}
    for i in list(keep):
        try:
            records[i] = _record(cfg, ids[i], y[i], results[i], X[i], x_adv[i], *cams[i])
        except Exception as exc:
            logger.exception("image %s failed during evaluation", ids[i])
            errors.append(f"{ids[i]}: evaluation: {exc}")
            keep.remove(i)

    for i in keep:
        save_png(out / "images" / f"{ids[i]}_benign.png", X[i])
        save_png(out / "images" / f"{ids[i]}_adv.png", x_adv[i])
        write_pgm(out / "maps" / f"{ids[i]}_benign.pgm", cams[i][0])
        write_pgm(out / "maps" / f"{ids[i]}_adv.pgm", cams[i][1])
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for i in keep:
            fh.write(results[i].to_json() + "\n")
    records_to_csv(out / "per_image.csv", [records[i] for i in keep])
    summary = _write_summary(out, cfg, records_from_csv(out / "per_image.csv"))
    notes = [f"skipped_class = {c}" for c in skipped] + [f"error = {e}" for e in errors]
    (out / "notes.txt").write_text("\n".join(notes) + ("\n" if notes else ""), encoding="utf-8")
    return summary


def _write_summary(out: Path, cfg: ExperimentConfig, records) -> dict:
    summary = summarize(records, cfg.interpreter, cfg.source.stem, cfg.target.stem)
    summary_to_csv(out / "summary.csv", summary)
    iou_sweep_to_csv(out / "iou_sweep.csv", records)
    return summary


def report(directory) -> dict:
    """Rebuild summary and IoU-sweep CSVs from ``per_image.csv`` alone."""
    d = Path(directory)
    cfg_path = d / CONFIG_NAME
    csv_path = d / "per_image.csv"
    for p in (cfg_path, csv_path):
        if not p.exists():
            raise ConfigError(f"{p} does not exist")
    text = cfg_path.read_text(encoding="utf-8")
    values = dict(
        (k.strip(), v.strip()) for k, v in (line.split("=", 1) for line in text.splitlines() if "=" in line)
    )
    summary = summarize(
        records_from_csv(csv_path),
        values.get("interpreter", "CAM"),
        Path(values["source"]).stem,
        Path(values["target"]).stem,
    )
    summary_to_csv(d / "summary.csv", summary)
    iou_sweep_to_csv(d / "iou_sweep.csv", records_from_csv(csv_path))
    return summary
