"""R² scoring, threshold summaries, the repeated-partition stability protocol, and report files."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from kan_ets.datasets import Dataset, DatasetRecipe, generate_dataset
from kan_ets.training import ModelSpec, TrainConfig, train

log = logging.getLogger(__name__)

THRESHOLDS = (0.9, 0.95, 0.98)

#: R² of a constant target is undefined; it is reported as NaN and never counts as passing.
UNDEFINED_R2 = float("nan")


def r2_score(target, pred) -> float:
    """Coefficient of determination; :data:`UNDEFINED_R2` for a constant target."""
    y = np.asarray(target, dtype=float)
    p = np.asarray(pred, dtype=float)
    if y.shape != p.shape or y.ndim != 1 or y.size == 0:
        raise ValueError(f"target {y.shape} and prediction {p.shape} must be equal non-empty vectors")
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return UNDEFINED_R2
    return 1.0 - float(np.sum((y - p) ** 2)) / ss_tot


@dataclass(frozen=True)
class R2Entry:
    index: int
    omega: float
    amplitude: float
    r2: float


@dataclass
class R2Report:
    entries: list
    metadata: dict = field(default_factory=dict)
    thresholds: tuple = THRESHOLDS

    def __post_init__(self):
        for e in self.entries:
            if not (math.isnan(e.r2) or e.r2 <= 1.0 + 1e-12):
                raise ValueError(f"R² {e.r2} above 1 for sample {e.index}")

    @property
    def r2(self) -> np.ndarray:
        return np.array([e.r2 for e in self.entries])

    def count_above(self, threshold: float) -> int:
        # NaN compares False, so undefined scores never pass.
        return int(np.sum(self.r2 > threshold))

    def fraction_above(self, threshold: float) -> float:
        return self.count_above(threshold) / len(self.entries)

    def summary(self) -> dict:
        return {
            str(t): {"count": self.count_above(t), "fraction": self.fraction_above(t), "total": len(self.entries)}
            for t in self.thresholds
        }

    def to_dict(self) -> dict:
        return {
            "entries": [asdict(e) for e in self.entries],
            "thresholds": self.summary(),
            "metadata": self.metadata,
        }


def predict(model, dataset: Dataset, indices) -> np.ndarray:
    x, _, _ = dataset.scaled(indices)
    return model(x)


def evaluate(model, dataset: Dataset, test_indices=None, metadata=None) -> R2Report:
    """Per-sample R² between scaled targets and predictions."""
    if test_indices is None:
        if dataset.split is None:
            raise ValueError("no test indices given and dataset has no split")
        test_indices = dataset.split.test
    idx = np.asarray(test_indices, dtype=int)
    if idx.size == 0:
        raise ValueError("cannot evaluate on an empty test set")
    n_steps = dataset.recipe.n_steps
    if model.architecture[0] != n_steps or model.architecture[-1] != n_steps:
        raise ValueError(f"model maps {model.architecture[0]} -> {model.architecture[-1]} steps, dataset has {n_steps}")
    _, y, _ = dataset.scaled(idx)
    pred = predict(model, dataset, idx)
    amps, omegas = dataset.amplitudes, dataset.omegas
    entries = [R2Entry(int(i), float(omegas[i]), float(amps[i]), r2_score(y[j], pred[j])) for j, i in enumerate(idx)]
    return R2Report(entries, dict(metadata or {}))


@dataclass
class StabilityTable:
    rows: list  # one dict per partition: {"seed", "0.98", "0.95", "0.9"}
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for r in self.rows:
            if not r["0.98"] <= r["0.95"] <= r["0.9"]:
                raise ValueError(f"threshold fractions not nested in row {r}")

    def column(self, threshold) -> np.ndarray:
        return np.array([r[str(threshold)] for r in self.rows])

    def means(self) -> dict:
        return {str(t): float(self.column(t).mean()) for t in (0.98, 0.95, 0.9)}

    def to_dict(self) -> dict:
        return {"rows": self.rows, "means": self.means(), "metadata": self.metadata}


def stability_experiment(recipe_or_dataset, model_spec: ModelSpec, config: TrainConfig, n_partitions: int = 10,
                         fraction: float = 0.8, threads: int = 1, on_row=None) -> StabilityTable:
    """Split → train → evaluate for partition seeds 1..n; the model is re-initialised each time."""
    if n_partitions < 1:
        raise ValueError("n_partitions must be >= 1")
    if isinstance(recipe_or_dataset, DatasetRecipe):
        base = generate_dataset(recipe_or_dataset, threads=threads)
    else:
        base = recipe_or_dataset
    rows = []
    for seed in range(1, n_partitions + 1):
        ds = base.prepared(fraction, seed)
        model = model_spec.build(ds.recipe.n_steps)
        try:
            train(model, ds, config)
        except Exception as exc:
            raise RuntimeError(f"partition {seed}: training failed: {exc}") from exc
        rep = evaluate(model, ds)
        row = {"seed": seed, **{str(t): rep.fraction_above(t) for t in (0.98, 0.95, 0.9)}}
        log.info("partition %d: %s", seed, row)
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return StabilityTable(rows, {"model": model_spec.to_dict(), "config": config.to_dict(),
                                 "recipe": base.recipe.to_dict(), "fraction": fraction})


# ---------------------------------------------------------------------------
# report files


def _check_writable(path: Path) -> Path:
    path = Path(path)
    if not path.parent.is_dir():
        raise OSError(f"cannot write {path}: directory {path.parent} does not exist")
    return path


def emit_report(obj, path, fmt: str, dataset: Dataset | None = None, model=None, overlays: int = 0) -> list[Path]:
    """Write an :class:`R2Report` or :class:`StabilityTable` as csv, json or svg.

    For an R² report in svg format, ``overlays`` > 0 additionally writes that
    many prediction/target panels (needs ``dataset`` and ``model``).
    """
    path = _check_writable(path)
    if fmt == "json":
        path.write_text(json.dumps(obj.to_dict(), indent=1), encoding="utf-8")
        return [path]
    if fmt == "csv":
        with path.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            if isinstance(obj, R2Report):
                w.writerow(["omega", "amplitude", "r2"])
                for e in obj.entries:
                    w.writerow([repr(e.omega), repr(e.amplitude), repr(e.r2)])
            else:
                w.writerow(["seed", "r2>0.98", "r2>0.95", "r2>0.9"])
                for r in obj.rows:
                    w.writerow([r["seed"], r["0.98"], r["0.95"], r["0.9"]])
        return [path]
    if fmt == "svg":
        return _emit_svg(obj, path, dataset, model, overlays)
    raise ValueError(f"unknown report format {fmt!r}; expected csv, json or svg")


def read_report_csv(path) -> list[tuple[float, float, float]]:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    return [tuple(float(v) for v in r) for r in rows[1:]]


def _emit_svg(obj, path, dataset, model, overlays):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = [path]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if isinstance(obj, R2Report):
        entries = sorted(obj.entries, key=lambda e: (e.amplitude, e.omega))
        for amp in sorted({e.amplitude for e in entries}):
            sel = [e for e in entries if e.amplitude == amp]
            ax.plot([e.omega for e in sel], [e.r2 for e in sel], "o-", ms=3, label=f"A={amp:g}")
        finite = obj.r2[np.isfinite(obj.r2)]
        lo = max(-1.0, float(finite.min())) if finite.size else 0.0
        ax.set_ylim(min(lo, 0.85) - 0.02, 1.01)  # negative scores stay in the data, only the axis is clipped
        ax.set_xlabel("ω")
        ax.set_ylabel("R²")
        if len({e.amplitude for e in entries}) > 1:
            ax.legend(fontsize=7)
    else:
        seeds = [r["seed"] for r in obj.rows]
        for t in ("0.9", "0.95", "0.98"):
            ax.plot(seeds, obj.column(t), "o-", label=f"R²>{t}")
        ax.set_xlabel("partition seed")
        ax.set_ylabel("fraction of test cases")
        ax.set_ylim(0, 1.02)
        ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)

    if isinstance(obj, R2Report) and overlays > 0:
        if dataset is None or model is None:
            raise ValueError("overlay plots need the dataset and the model")
        chosen = sorted(obj.entries, key=lambda e: e.r2 if math.isfinite(e.r2) else -np.inf)[:overlays]
        idx = [e.index for e in chosen]
        _, y, _ = dataset.scaled(idx)
        pred = predict(model, dataset, idx)
        t = dataset.samples[0].drive.times
        for j, e in enumerate(chosen):
            fig, ax = plt.subplots(figsize=(6, 3))
            ax.plot(t, y[j], label="target")
            ax.plot(t, pred[j], "--", label="prediction")
            ax.set_title(f"ω={e.omega:.3f}, A={e.amplitude:g}, R²={e.r2:.4f}", fontsize=9)
            ax.set_xlabel("t")
            ax.legend(fontsize=7)
            fig.tight_layout()
            p = path.with_name(f"{path.stem}_sample{e.index}.svg")
            fig.savefig(p, format="svg")
            plt.close(fig)
            written.append(p)
    return written
