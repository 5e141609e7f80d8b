"""Online scoring, aggregation, and report persistence.

Scoring interleaves with adaptation: for each batch the method's step
returns the prediction computed before its own update, and only that
prediction is scored. Labels live on the scoring side exclusively; the
method never sees them.
"""

from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .corruptions import CorruptedSuite
from .errors import ValidationError
from .models import ModelBundle, RUNNING_FROZEN, bn_mode, entropy_from_logits
from .schedules import Schedule
from .training import as_torch

REPORT_SCHEMA = "teca-bench-report/1"
CONFIDENCE_BINS = 20
_BIN_EDGES = [i / CONFIDENCE_BINS for i in range(CONFIDENCE_BINS + 1)]


@dataclass
class SegmentMetrics:
    kind: str
    severity: int
    n_samples: int
    error_rate: float  # percent
    mean_entropy: float
    mean_confidence: float
    confidence_histogram: list[int]
    switch_ratio: float | None
    wall_time_seconds: float
    batch_time_median: float


@dataclass
class RunReport:
    schema: str
    method: str
    teca_enabled: bool
    seed: int
    config: dict
    schedule_hash: str
    suite_hash: str
    segments: list[SegmentMetrics]
    mean_row: dict
    switch_series: list[float] = field(default_factory=list)
    reset_count: int = 0

    @property
    def mean_error(self) -> float:
        return self.mean_row["error_rate"]

    def segment_errors(self) -> dict[tuple[str, int], float]:
        return {(s.kind, s.severity): s.error_rate for s in self.segments}

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        d["segments"] = [SegmentMetrics(**s) for s in d["segments"]]
        return cls(**d)


def _mean_row(segments: list[SegmentMetrics]) -> dict:
    if not segments:
        return {"error_rate": 0.0, "mean_entropy": 0.0, "mean_confidence": 0.0, "wall_time_seconds": 0.0}
    return {
        "error_rate": float(np.mean([s.error_rate for s in segments])),
        "mean_entropy": float(np.mean([s.mean_entropy for s in segments])),
        "mean_confidence": float(np.mean([s.mean_confidence for s in segments])),
        "wall_time_seconds": float(np.mean([s.wall_time_seconds for s in segments])),
    }


def score_online(
    method,
    schedule: Schedule,
    suite: CorruptedSuite,
    *,
    config_snapshot: dict | None = None,
    seed: int = 0,
    episodic: bool = False,
) -> RunReport:
    """Run a method over a schedule, scoring each batch before its update."""
    segments: list[SegmentMetrics] = []
    switch_series: list[float] = []
    resets_before = method.reset_count
    for seg in schedule.segments:
        cell = suite.cell(seg.kind, seg.severity)
        if episodic:
            method.reset()
        wrong = 0
        entropy_sum = 0.0
        confidence_sum = 0.0
        hist = np.zeros(CONFIDENCE_BINS, dtype=np.int64)
        batch_times = []
        t_seg = time.perf_counter()
        for batch_idx in seg.batches():
            x = as_torch(cell.images[batch_idx])
            t0 = time.perf_counter()
            result = method.step(x)
            batch_times.append(time.perf_counter() - t0)
            pred = result.prediction
            labels = cell.labels[batch_idx]
            wrong += int((pred.probs.argmax(dim=1).numpy() != labels).sum())
            entropy_sum += float(pred.entropy.sum())
            confidence_sum += float(pred.confidence.sum())
            hist += np.histogram(pred.confidence.numpy(), bins=CONFIDENCE_BINS, range=(0.0, 1.0))[0]
            if result.switch is not None:
                switch_series.append(result.switch.switch_ratio)
        n = len(seg.indices)
        seg_switch = (
            float(np.mean(switch_series[-seg.n_batches :])) if result.switch is not None else None
        )
        segments.append(
            SegmentMetrics(
                kind=seg.kind,
                severity=seg.severity,
                n_samples=n,
                error_rate=100.0 * wrong / n,
                mean_entropy=entropy_sum / n,
                mean_confidence=confidence_sum / n,
                confidence_histogram=[int(c) for c in hist],
                switch_ratio=seg_switch,
                wall_time_seconds=time.perf_counter() - t_seg,
                batch_time_median=float(statistics.median(batch_times)),
            )
        )
    return RunReport(
        schema=REPORT_SCHEMA,
        method=method.kind,
        teca_enabled=bool(getattr(method, "teca_enabled", False)),
        seed=seed,
        config=config_snapshot or {},
        schedule_hash=schedule.manifest_hash(),
        suite_hash=schedule.suite_hash,
        segments=segments,
        mean_row=_mean_row(segments),
        switch_series=switch_series,
        reset_count=method.reset_count - resets_before,
    )


# ---------------------------------------------------------------------------
# Severity sweep
# ---------------------------------------------------------------------------

def entropy_severity_sweep(bundle: ModelBundle, suite: CorruptedSuite) -> list[dict]:
    """Frozen-model error and mean entropy per severity (0 = clean),
    averaged over all kinds present in the suite."""
    severities = suite.severities
    rows = []
    for severity in [0] + list(severities):
        if severity == 0:
            cells = [suite.clean]
        else:
            cells = [suite.cells[(k, severity)] for k in suite.kinds if (k, severity) in suite.cells]
        errors, entropies = [], []
        for cell in cells:
            with torch.no_grad(), bn_mode(bundle.classifier, RUNNING_FROZEN):
                logits = bundle.classifier(as_torch(cell.images))
            errors.append(100.0 * float((logits.argmax(1).numpy() != cell.labels).mean()))
            entropies.append(float(entropy_from_logits(logits).mean()))
        rows.append(
            {
                "severity": severity,
                "error_rate": float(np.mean(errors)),
                "mean_entropy": float(np.mean(entropies)),
            }
        )
    return rows


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def emit_report(report: RunReport, out_dir: str | Path) -> list[Path]:
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create report directory {out_dir}: {e}") from e
    paths = []

    p = out_dir / "report.json"
    p.write_text(report.to_json())
    paths.append(p)

    p = out_dir / "table.csv"
    write_comparison_table([report], p)
    paths.append(p)

    p = out_dir / "histograms.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "severity"] + [f"bin_{i}" for i in range(CONFIDENCE_BINS)])
        for s in report.segments:
            w.writerow([s.kind, s.severity] + s.confidence_histogram)
    paths.append(p)

    p = out_dir / "timing.csv"
    with open(p, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["kind", "severity", "wall_time_seconds", "batch_time_median"])
        for s in report.segments:
            w.writerow([s.kind, s.severity, f"{s.wall_time_seconds:.6f}", f"{s.batch_time_median:.6f}"])
    paths.append(p)
    return paths


def write_comparison_table(reports: list[RunReport], path: str | Path) -> None:
    """Method x corruption grid; one row per report, mean column last."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kinds = list(dict.fromkeys(s.kind for r in reports for s in r.segments))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "teca", "seed"] + kinds + ["mean"])
        for r in reports:
            by_kind: dict[str, list[float]] = {}
            for s in r.segments:
                by_kind.setdefault(s.kind, []).append(s.error_rate)
            row = [r.method, "yes" if r.teca_enabled else "no", r.seed]
            row += [f"{np.mean(by_kind[k]):.2f}" if k in by_kind else "" for k in kinds]
            row.append(f"{r.mean_error:.2f}")
            w.writerow(row)


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["severity", "error_rate", "mean_entropy"])
        for r in rows:
            w.writerow([r["severity"], f"{r['error_rate']:.4f}", f"{r['mean_entropy']:.6f}"])


def emit_image_dumps(
    bundle: ModelBundle, suite: CorruptedSuite, out_dir: str | Path, k: int = 8
) -> list[Path]:
    """Per kind (highest severity present): a 2-row montage of the first k
    corrupted images and their enhanced versions, plus the confidence of
    each branch in a sidecar CSV."""
    from PIL import Image

    from .models import RUNNING_FROZEN, forward_classifier, forward_enhancer

    if k < 1:
        raise ValidationError("k must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    top = max(suite.severities)
    for kind in suite.kinds:
        cell = suite.cells[(kind, top)]
        x = as_torch(cell.images[:k])
        with torch.no_grad():
            enhanced = forward_enhancer(bundle, x, RUNNING_FROZEN)
            conf_raw = forward_classifier(bundle, x, RUNNING_FROZEN).confidence
            conf_enh = forward_classifier(bundle, enhanced, RUNNING_FROZEN).confidence
        rows = [x.numpy(), enhanced.numpy()]
        montage = np.concatenate(
            [np.concatenate(list(row.transpose(0, 2, 3, 1)), axis=1) for row in rows], axis=0
        )
        img = Image.fromarray(np.rint(montage * 255.0).astype(np.uint8), mode="RGB")
        p = out_dir / f"{kind}_s{top}.png"
        img.save(p)
        paths.append(p)
        with open(out_dir / f"{kind}_s{top}_confidence.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["index", "confidence_original", "confidence_enhanced"])
            for i in range(len(conf_raw)):
                w.writerow([i, f"{float(conf_raw[i]):.4f}", f"{float(conf_enh[i]):.4f}"])
    return paths
