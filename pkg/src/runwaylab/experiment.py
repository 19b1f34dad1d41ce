"""End-to-end experiment protocol: generate, train every strategy, evaluate.

Desk-scale defaults shrink the source protocol's dataset sizes while
preserving the synthetic-to-real ratio (about 10:1) and the day:night split,
so the strategy orderings stay comparable in minutes of CPU time. Results
are written per completed (strategy, seed) cell; the summary reports the
median over seeds.
"""

from __future__ import annotations

import csv
import json
import statistics
from dataclasses import asdict, dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Optional

from . import scenegen
from .dataset import Condition, Dataset, load_manifest
from .detector import Model, PatchCache, TrainConfig, default_grid, detect_from_patches, train
from .evaluation import IOU_THRESHOLDS, EvalReport, coco_ap
from .geometry import RunwaySpec, load_runway_db
from .sampling import Strategy
from .scenegen import SceneConfig, SceneStyle

STRATEGY_ORDER = (Strategy.REAL, Strategy.SYNTH, Strategy.MIX, Strategy.SAMPLER, Strategy.CARE)

RESULTS_CSV_HEADER = ["condition", "strategy", "seed", "coco_ap"] + [
    f"ap_{t:.2f}" for t in IOU_THRESHOLDS
]


class ExperimentError(Exception):
    pass


class NoResults(ExperimentError):
    pass


def packaged_runway_db_path() -> Path:
    return Path(str(resources.files("runwaylab").joinpath("data/airports.json")))


DEFAULT_REAL_AIRPORTS = ["ALFA", "BRVO", "CHLI", "DLTA", "ECHO"]
DEFAULT_SYNTH_AIRPORTS = DEFAULT_REAL_AIRPORTS + ["FXTR", "GOLF", "HTEL", "INDI", "JLET"]
DEFAULT_VALIDATION_AIRPORTS = ["KILO", "LIMA", "MIKE", "NOVM"]


@dataclass
class ExperimentConfig:
    runway_db: str = ""
    real_airports: list[str] = field(default_factory=lambda: list(DEFAULT_REAL_AIRPORTS))
    synth_airports: list[str] = field(default_factory=lambda: list(DEFAULT_SYNTH_AIRPORTS))
    validation_airports: list[str] = field(default_factory=lambda: list(DEFAULT_VALIDATION_AIRPORTS))
    real_train: int = 200
    synth_train: int = 2000
    val_per_condition: int = 200
    night_fraction: float = 0.5
    strategies: list[Strategy] = field(default_factory=lambda: list(STRATEGY_ORDER))
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    data_seed: int = 1234

    def __post_init__(self):
        self.strategies = [Strategy(s) for s in self.strategies]
        if not self.strategies:
            raise ValueError("strategies must be non-empty")
        if not self.seeds:
            raise ValueError("seeds must be non-empty")
        if not 0.0 <= self.night_fraction <= 1.0:
            raise ValueError("night_fraction must be in [0, 1]")
        if min(self.real_train, self.synth_train, self.val_per_condition) <= 0:
            raise ValueError("dataset counts must be positive")
        overlap = set(self.validation_airports) & (set(self.real_airports) | set(self.synth_airports))
        if overlap:
            raise ValueError(f"validation airports leak into training: {sorted(overlap)}")
        for name, count, airports in [
            ("real_train", self.real_train, self.real_airports),
            ("synth_train", self.synth_train, self.synth_airports),
            ("val_per_condition", self.val_per_condition, self.validation_airports),
        ]:
            if not airports:
                raise ValueError(f"no airports configured for {name}")
            if count % len(airports) != 0:
                raise ValueError(
                    f"{name}={count} not divisible by its {len(airports)} airports")

    def db_path(self) -> Path:
        return Path(self.runway_db) if self.runway_db else packaged_runway_db_path()

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        doc = dict(doc)
        train_doc = dict(doc.pop("train", {}))
        if "lambda" in train_doc:
            train_doc["lambda_"] = train_doc.pop("lambda")
        train_doc.setdefault("seed", 0)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(train=TrainConfig(**train_doc), **doc)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        doc = asdict(self)
        doc["strategies"] = [s.value for s in self.strategies]
        train_doc = doc["train"]
        train_doc["lambda"] = train_doc.pop("lambda_")
        return doc


def _pool_scene_configs(
    airports: list[str],
    style: SceneStyle,
    day_count: int,
    night_count: int,
    seed: int,
) -> tuple[list[SceneConfig], list[int]]:
    configs: list[SceneConfig] = []
    counts: list[int] = []
    for airport in airports:
        if day_count > 0:
            configs.append(SceneConfig(style, Condition.DAY, airport, seed=seed))
            counts.append(day_count)
        if night_count > 0:
            configs.append(SceneConfig(style, Condition.NIGHT, airport, seed=seed))
            counts.append(night_count)
    return configs, counts


def cmd_generate(config: ExperimentConfig, out_dir: str | Path) -> dict[str, Path]:
    """Produce the four per-airport-balanced pools; idempotent per seed.

    Pools: real-style day training, synthetic training (day or day+night per
    night_fraction), and real-style day and night validation sets from the
    held-out airports.
    """
    out_dir = Path(out_dir)
    db = load_runway_db(config.db_path())
    for airport in set(config.real_airports) | set(config.synth_airports) | set(config.validation_airports):
        if airport not in db:
            raise scenegen.UnknownAirport(f"airport {airport!r} not in runway database")

    per_real = config.real_train // len(config.real_airports)
    per_synth = config.synth_train // len(config.synth_airports)
    synth_night = round(per_synth * config.night_fraction)
    synth_day = per_synth - synth_night
    per_val = config.val_per_condition // len(config.validation_airports)

    pools = {
        "real_train": _pool_scene_configs(
            config.real_airports, SceneStyle.REAL, per_real, 0, config.data_seed),
        "synth_train": _pool_scene_configs(
            config.synth_airports, SceneStyle.SYNTH, synth_day, synth_night, config.data_seed + 1),
        "val_day": _pool_scene_configs(
            config.validation_airports, SceneStyle.REAL, per_val, 0, config.data_seed + 2),
        "val_night": _pool_scene_configs(
            config.validation_airports, SceneStyle.REAL, 0, per_val, config.data_seed + 3),
    }
    manifests: dict[str, Path] = {}
    for name, (configs, counts) in pools.items():
        scenegen.generate_dataset(configs, db, counts, out_dir / "data" / name, name=name)
        manifests[name] = out_dir / "data" / name / "manifest.json"
    return manifests


def _evaluate(model: Model, val: Dataset, cache: PatchCache,
              condition: Condition, strategy: Strategy) -> EvalReport:
    dets = {}
    gts = {}
    for i, sample in enumerate(val.samples):
        u8, _, _ = cache.get(sample)
        dets[i] = detect_from_patches(model, u8)
        gts[i] = [sample.bbox] if sample.bbox is not None else []
    return coco_ap(dets, gts, condition=condition, strategy=strategy.value)


def _append_result_row(path: Path, report: EvalReport, strategy: Strategy, seed: int) -> None:
    new = not path.exists()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "a", newline="") as f:
        w = csv.writer(f)
        if new:
            w.writerow(RESULTS_CSV_HEADER)
        w.writerow([report.condition.value, strategy.value, seed, f"{report.coco_ap:.6f}"]
                   + [f"{report.per_threshold_ap[t]:.6f}" for t in IOU_THRESHOLDS])
        f.flush()


def _detection_dump(path: Path, sample, models: dict[Strategy, Model], cache: PatchCache) -> None:
    doc = {
        "image": sample.image_ref,
        "airport_id": sample.airport_id,
        "condition": sample.condition.value,
        "ground_truth": list(sample.bbox.as_tuple()) if sample.bbox else None,
        "detections": {},
    }
    u8, _, _ = cache.get(sample)
    for strategy, model in models.items():
        doc["detections"][strategy.value] = [
            {"bbox": list(d.bbox.as_tuple()), "score": d.score}
            for d in detect_from_patches(model, u8)
        ]
    with open(path, "w") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")


def cmd_experiment(config: ExperimentConfig, out_dir: str | Path) -> dict:
    """Train every (strategy, seed) cell and evaluate on both conditions.

    Emits per-cell rows into results/results.csv as they complete, model
    checkpoints, a per-condition detection dump for the first validation
    image (the per-model inference comparison, as data), and the median
    report table.
    """
    out_dir = Path(out_dir)
    manifests = {
        name: out_dir / "data" / name / "manifest.json"
        for name in ("real_train", "synth_train", "val_day", "val_night")
    }
    if not all(p.exists() for p in manifests.values()):
        manifests = cmd_generate(config, out_dir)

    real_train = load_manifest(manifests["real_train"])
    synth_train = load_manifest(manifests["synth_train"])
    val_day = load_manifest(manifests["val_day"])
    val_night = load_manifest(manifests["val_night"])

    val_ids = set(config.validation_airports)
    for pool in (real_train, synth_train):
        leaked = {s.airport_id for s in pool.samples} & val_ids
        if leaked:
            raise ExperimentError(f"validation airports leaked into {pool.name}: {sorted(leaked)}")

    probe = scenegen.Image.load_png(real_train.samples[0].image_ref)
    grid = default_grid(probe.width, probe.height)
    cache = PatchCache(grid)

    results_csv = out_dir / "results" / "results.csv"
    if results_csv.exists():
        results_csv.unlink()
    strategies = [s for s in STRATEGY_ORDER if s in config.strategies]
    first_seed_models: dict[Strategy, Model] = {}
    for strategy in strategies:
        for seed in config.seeds:
            cfg = replace(config.train, seed=seed)
            model = train(real_train, synth_train, strategy, cfg, grid=grid, patch_cache=cache)
            model.save(out_dir / "checkpoints" / f"{strategy.value}_{seed}.json")
            if seed == config.seeds[0]:
                first_seed_models[strategy] = model
            for condition, val in ((Condition.DAY, val_day), (Condition.NIGHT, val_night)):
                report = _evaluate(model, val, cache, condition, strategy)
                _append_result_row(results_csv, report, strategy, seed)

    for condition, val in ((Condition.DAY, val_day), (Condition.NIGHT, val_night)):
        _detection_dump(out_dir / f"detections_{condition.value}.json",
                        val.samples[0], first_seed_models, cache)

    return cmd_report(out_dir / "results", out_dir)


def _read_result_rows(results_dir: Path) -> list[dict]:
    rows: list[dict] = []
    for path in sorted(results_dir.glob("*.csv")):
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                rows.append(rec)
    return rows


def _median_table(rows: list[dict]) -> dict[str, dict[str, float]]:
    cells: dict[tuple[str, str], list[float]] = {}
    for rec in rows:
        key = (rec["condition"], rec["strategy"])
        cells.setdefault(key, []).append(float(rec["coco_ap"]))
    table: dict[str, dict[str, float]] = {}
    for (condition, strategy), values in cells.items():
        table.setdefault(condition, {})[strategy] = statistics.median(values)
    return table


def _render_text_table(table: dict[str, dict[str, float]], seeds_note: str) -> str:
    strategies = [s.value for s in STRATEGY_ORDER
                  if any(s.value in row for row in table.values())]
    lines = [f"Median COCO AP {seeds_note}", ""]
    header = f"{'':10s}" + "".join(f"{s:>9s}" for s in strategies)
    lines.append(header)
    for condition in ("day", "night"):
        if condition not in table:
            continue
        row = table[condition]
        label = f"{condition.upper()} AP"
        cells = "".join(
            f"{row[s]:>9.4f}" if s in row else f"{'-':>9s}" for s in strategies)
        lines.append(f"{label:10s}" + cells)
    return "\n".join(lines) + "\n"


def _render_svg_bars(table_row: dict[str, float], title: str) -> str:
    strategies = [s.value for s in STRATEGY_ORDER if s.value in table_row]
    bar_w, gap, height, base = 70, 20, 220, 30
    width = gap + len(strategies) * (bar_w + gap)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 60}">',
        f'<text x="{width/2:.0f}" y="18" text-anchor="middle" font-family="sans-serif" '
        f'font-size="14">{title}</text>',
    ]
    for i, s in enumerate(strategies):
        v = table_row[s]
        h = v * height
        x = gap + i * (bar_w + gap)
        y = base + height - h
        parts.append(f'<rect x="{x}" y="{y:.1f}" width="{bar_w}" height="{h:.1f}" fill="#4878a8"/>')
        parts.append(f'<text x="{x + bar_w/2}" y="{y - 4:.1f}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{v:.3f}</text>')
        parts.append(f'<text x="{x + bar_w/2}" y="{base + height + 16}" text-anchor="middle" '
                     f'font-family="sans-serif" font-size="11">{s}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_report(results_dir: str | Path, out_dir: Optional[str | Path] = None) -> dict:
    """Aggregate per-seed CSV rows into the median table and chart files."""
    results_dir = Path(results_dir)
    rows = _read_result_rows(results_dir) if results_dir.exists() else []
    if not rows:
        raise NoResults(f"no result rows under {results_dir}")
    out_dir = Path(out_dir) if out_dir is not None else results_dir.parent
    out_dir.mkdir(parents=True, exist_ok=True)
    table = _median_table(rows)

    seeds = sorted({int(r["seed"]) for r in rows})
    text = _render_text_table(table, f"(median over seeds {seeds})")
    day = table.get("day", {})
    night = table.get("night", {})
    if "CARE" in night and "MIX" in night:
        text += (f"\nobservation (non-binding): night CARE {night['CARE']:.4f} vs "
                 f"MIX {night['MIX']:.4f}\n")
    (out_dir / "report.txt").write_text(text)

    strategies = [s.value for s in STRATEGY_ORDER
                  if any(s.value in row for row in table.values())]
    with open(out_dir / "report.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["condition"] + strategies)
        for condition in ("day", "night"):
            if condition in table:
                w.writerow([condition] + [
                    f"{table[condition][s]:.6f}" if s in table[condition] else ""
                    for s in strategies])
    for condition, row in (("day", day), ("night", night)):
        if row:
            svg = _render_svg_bars(row, f"{condition.upper()} median COCO AP")
            (out_dir / f"report_{condition}.svg").write_text(svg)
    return table
