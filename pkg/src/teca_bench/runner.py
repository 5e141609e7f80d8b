"""Pipeline orchestration shared by the CLI and the acceptance harness.

Responsibilities: deterministic checkpoint preparation, method construction
from config (including all combined-model wiring rules), protocol runs over
seeds, and the ablation / parameter-range grids.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .corruptions import CorruptedSuite, build_corrupted_suite
from .data import Dataset, generate_synthetic_dataset, ingest_external
from .errors import ConfigError, ContractError
from .models import BATCH_FROZEN, RUNNING_FROZEN, ModelBundle
from .reporting import RunReport, score_online
from .schedules import Schedule, build_diverse, build_gradual, build_ptta, build_standard
from .seeding import component_seed
from .snapshots import arch_fingerprint, load_snapshot, restore_snapshot, save_snapshot, take_snapshot
from .teca import CombinedModel
from .training import (
    ClassifierTrainConfig,
    EnhancerTrainConfig,
    TrainLog,
    train_classifier,
    train_enhancer,
    evaluate_error_rate,
)
from .tta import (
    BNAdaptMethod,
    CoTTALiteMethod,
    EATALiteMethod,
    InputAdaptMethod,
    RawModel,
    SourceMethod,
    TentMethod,
    estimate_fisher,
)

ADAPTIVE_METHODS = ("bn_adapt", "tent", "eata", "cotta")
GRADIENT_METHODS = ("tent", "eata", "cotta")


def set_threads(n: int) -> None:
    torch.set_num_threads(max(1, n))


def prepare_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset.kind == "synthetic":
        return generate_synthetic_dataset(cfg.master_seed, cfg.dataset.n_train, cfg.dataset.n_test)
    test = ingest_external(cfg.dataset.path, cfg.dataset.format, split="test")
    raise ConfigError(
        "external datasets currently provide only a test split; training "
        f"requires dataset.kind=synthetic (loaded {len(test)} test samples)"
    )


def _train_config_hash(cfg: RunConfig) -> str:
    relevant = {
        "master_seed": cfg.master_seed,
        "dataset": cfg.to_dict()["dataset"],
        "classifier": cfg.to_dict()["classifier"],
        "enhancer": cfg.to_dict()["enhancer"],
    }
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def _write_train_log(log: TrainLog, path: Path) -> None:
    lines = ["epoch,loss,val"]
    lines += [f"{e},{l:.6f},{v:.6f}" for e, l, v in log.rows()]
    path.write_text("\n".join(lines) + "\n")


@dataclass
class PreparedArtifacts:
    bundle: ModelBundle
    train: Dataset
    test: Dataset
    meta: dict = field(default_factory=dict)


# Regression floor for clean test accuracy, measured once at the default
# training budget and frozen.
CLEAN_ACCURACY_FLOOR = 0.90


def _classifier_config_hash(cfg: RunConfig) -> str:
    relevant = {
        "master_seed": cfg.master_seed,
        "dataset": cfg.to_dict()["dataset"],
        "classifier": cfg.to_dict()["classifier"],
    }
    return hashlib.sha256(json.dumps(relevant, sort_keys=True).encode()).hexdigest()


def _load_stage(ckpt_dir: Path, stage: str, expect_hash: str, bundle: ModelBundle) -> dict | None:
    snap_path = ckpt_dir / f"{stage}.snap"
    meta_path = ckpt_dir / f"{stage}_meta.json"
    if not (snap_path.exists() and meta_path.exists()):
        return None
    meta = json.loads(meta_path.read_text())
    if meta.get("train_config_hash") != expect_hash:
        raise ContractError(
            f"existing {stage} checkpoint was produced by a different training "
            "config; retrain with --force or use a fresh out dir"
        )
    snap = load_snapshot(snap_path)
    if snap.fingerprint != arch_fingerprint(bundle):
        raise ContractError("checkpoint architecture hash does not match this build")
    restore_snapshot(bundle, snap)
    return meta


def _save_stage(ckpt_dir: Path, stage: str, bundle: ModelBundle, meta: dict) -> dict:
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    snap = take_snapshot(bundle)
    save_snapshot(snap, ckpt_dir / f"{stage}.snap")
    meta = dict(meta, arch_fingerprint=snap.fingerprint, snapshot_digest=snap.digest())
    (ckpt_dir / f"{stage}_meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return meta


def prepare_classifier(cfg: RunConfig, out_root: Path, force: bool = False) -> PreparedArtifacts:
    """Train (or load) the source classifier checkpoint; idempotent per config."""
    ckpt_dir = Path(out_root) / "checkpoints"
    cfg_hash = _classifier_config_hash(cfg)
    train, test = prepare_data(cfg)
    bundle = ModelBundle.create(cfg.master_seed)
    if not force:
        meta = _load_stage(ckpt_dir, "classifier", cfg_hash, bundle)
        if meta is not None:
            for p in bundle.classifier.parameters():
                p.requires_grad_(False)
            return PreparedArtifacts(bundle, train, test, meta)
    cls_cfg = ClassifierTrainConfig(
        epochs=cfg.classifier.epochs,
        lr=cfg.classifier.lr,
        momentum=cfg.classifier.momentum,
        weight_decay=cfg.classifier.weight_decay,
        batch_size=cfg.classifier.batch_size,
        augment=cfg.classifier.augment,
        label_smoothing=cfg.classifier.label_smoothing,
    )
    log = train_classifier(bundle, train, test, cls_cfg, cfg.master_seed)
    for p in bundle.classifier.parameters():
        p.requires_grad_(False)
    clean_error = evaluate_error_rate(bundle, test.images, test.labels)
    if clean_error > 100.0 * (1.0 - CLEAN_ACCURACY_FLOOR):
        raise ContractError(
            f"clean accuracy regression: error {clean_error:.2f}% exceeds the "
            f"{100 * (1 - CLEAN_ACCURACY_FLOOR):.0f}% floor"
        )
    meta = _save_stage(
        ckpt_dir, "classifier", bundle,
        {"train_config_hash": cfg_hash, "clean_error_rate": clean_error},
    )
    _write_train_log(log, ckpt_dir / "classifier_log.csv")
    return PreparedArtifacts(bundle, train, test, meta)


def prepare_bundle(cfg: RunConfig, out_root: Path, force: bool = False) -> PreparedArtifacts:
    """Train (or load) the full classifier+enhancer checkpoint pair."""
    ckpt_dir = Path(out_root) / "checkpoints"
    cfg_hash = _train_config_hash(cfg)
    stage1 = prepare_classifier(cfg, out_root, force=force)
    bundle, train, test = stage1.bundle, stage1.train, stage1.test
    if not force:
        meta = _load_stage(ckpt_dir, "bundle", cfg_hash, bundle)
        if meta is not None:
            for p in bundle.classifier.parameters():
                p.requires_grad_(False)
            return PreparedArtifacts(bundle, train, test, meta)
    enh_cfg = EnhancerTrainConfig(
        epochs=cfg.enhancer.epochs,
        lr=cfg.enhancer.lr,
        momentum=cfg.enhancer.momentum,
        batch_size=cfg.enhancer.batch_size,
        aug=cfg.enhancer.aug.to_spec(),
        filter_fraction=cfg.enhancer.filter_fraction,
    )
    log = train_enhancer(bundle, train, enh_cfg, cfg.master_seed)
    meta = _save_stage(
        ckpt_dir, "bundle", bundle,
        {
            "train_config_hash": cfg_hash,
            "clean_error_rate": stage1.meta.get("clean_error_rate"),
            "augmentation_families": ["mixed-chain", "random-filter (DeepAugment-substitute)"],
        },
    )
    _write_train_log(log, ckpt_dir / "enhancer_log.csv")
    return PreparedArtifacts(bundle, train, test, meta)


def prepare_suite(cfg: RunConfig, test: Dataset, out_root: Path | None = None) -> CorruptedSuite:
    if out_root is not None:
        suite_dir = Path(out_root) / "suite"
        if (suite_dir / "manifest.json").exists():
            suite = CorruptedSuite.load(suite_dir)
            want = {
                "kinds": list(cfg.corruptions.kinds),
                "severities": [int(s) for s in cfg.corruptions.severities],
                "n_per_cell": int(cfg.corruptions.n_per_cell),
                "seed": component_seed(cfg.master_seed, "suite"),
            }
            if all(suite.manifest.get(k) == v for k, v in want.items()):
                return suite
    suite = build_corrupted_suite(
        test,
        kinds=tuple(cfg.corruptions.kinds),
        severities=tuple(cfg.corruptions.severities),
        n_per_cell=cfg.corruptions.n_per_cell,
        seed=component_seed(cfg.master_seed, "suite"),
    )
    if out_root is not None:
        suite.save(Path(out_root) / "suite")
    return suite


# ---------------------------------------------------------------------------
# Method construction
# ---------------------------------------------------------------------------

def build_method(cfg: RunConfig, bundle: ModelBundle, run_seed: int, source_images: np.ndarray | None = None):
    """Construct the configured method over its own copy of the bundle.

    Wiring rules:
    - frozen methods run on source running statistics;
    - adaptive methods normalize the classifier with the current batch;
    - with the combined model, the enhancer keeps frozen source statistics
      unless statistics freezing is disabled, and it always uses batch
      statistics when wrapped by batch-stats adaptation (which has no
      trainable update, so freezing is off by contract there);
    - gradient methods update BN affine parameters (all parameters for the
      teacher-student method), plus the configured enhancer group when the
      combined model is active, restricted by the update range.
    """
    mkind = cfg.method.kind
    teca = cfg.teca
    bundle = bundle.clone()

    if mkind == "source":
        model = RawModel(bundle, RUNNING_FROZEN)
    elif mkind == "input_adapt":
        model = CombinedModel(
            bundle, ls_enabled=False, spus_enabled=False, fbns_enabled=True, cls_bn=RUNNING_FROZEN
        )
    elif teca.enabled:
        if mkind == "bn_adapt":
            cls_batch = teca.update_range in ("both", "classifier")
            enh_batch = teca.update_range in ("both", "enhancer")
            model = CombinedModel(
                bundle,
                ls_enabled=teca.ls,
                spus_enabled=False,
                fbns_enabled=not enh_batch,
                cls_bn=BATCH_FROZEN if cls_batch else RUNNING_FROZEN,
                enh_bn=BATCH_FROZEN if enh_batch else RUNNING_FROZEN,
            )
        else:
            model = CombinedModel(
                bundle,
                ls_enabled=teca.ls,
                spus_enabled=teca.spus,
                fbns_enabled=teca.fbns,
                cls_bn=BATCH_FROZEN,
                enh_bn=BATCH_FROZEN,
            )
    else:
        model = RawModel(bundle, BATCH_FROZEN if mkind in ADAPTIVE_METHODS else RUNNING_FROZEN)

    params_cls: list[torch.nn.Parameter] = []
    params_enh: list[torch.nn.Parameter] = []
    if mkind in GRADIENT_METHODS:
        cls_group = "classifier_all" if mkind == "cotta" else "classifier_bn_affine"
        if not teca.enabled or teca.update_range in ("both", "classifier"):
            params_cls = [p for _, p in bundle.param_group(cls_group)]
        if teca.enabled and teca.update_range in ("both", "enhancer"):
            params_enh = [p for _, p in bundle.param_group(teca.enhancer_group)]

    for p in bundle.classifier.parameters():
        p.requires_grad_(False)
    for p in bundle.enhancer.parameters():
        p.requires_grad_(False)
    for p in params_cls + params_enh:
        p.requires_grad_(True)

    lr = cfg.method.resolved_lr()
    momentum = cfg.method.momentum
    seed = component_seed(run_seed, f"method:{mkind}")

    if mkind == "source":
        method = SourceMethod(model)
    elif mkind == "input_adapt":
        method = InputAdaptMethod(model)
    elif mkind == "bn_adapt":
        method = BNAdaptMethod(model)
    elif mkind == "tent":
        method = TentMethod(model, params_cls, params_enh, lr, momentum, seed)
    elif mkind == "eata":
        fisher = None
        if params_cls and source_images is not None and cfg.method.eata.anchor_weight > 0:
            fisher = estimate_fisher(
                bundle, source_images, params_cls, n_batches=cfg.method.eata.fisher_batches
            )
        method = EATALiteMethod(
            model,
            params_cls,
            params_enh,
            lr,
            momentum,
            seed,
            entropy_margin=cfg.method.eata.entropy_margin_scale * math.log(bundle.num_classes),
            anchor_weight=cfg.method.eata.anchor_weight,
            fisher=fisher,
        )
    elif mkind == "cotta":
        method = CoTTALiteMethod(
            model,
            params_cls,
            params_enh,
            lr,
            momentum,
            seed,
            views=cfg.method.cotta.views,
            ema_alpha=cfg.method.cotta.ema_alpha,
            confidence_threshold=cfg.method.cotta.confidence_threshold,
            restore_prob=cfg.method.cotta.restore_prob,
        )
    else:
        raise ConfigError(f"unknown method kind {mkind!r}")
    method.teca_enabled = teca.enabled or mkind == "input_adapt"
    return method


# ---------------------------------------------------------------------------
# Protocol runs
# ---------------------------------------------------------------------------

def make_schedules(cfg: RunConfig, suite: CorruptedSuite, run_seed: int) -> list[Schedule]:
    p = cfg.protocol
    kinds = tuple(cfg.corruptions.kinds)
    seed = component_seed(run_seed, f"schedule:{p.kind}")
    if p.kind == "standard":
        return [build_standard(kinds, p.severity, suite, p.batch_size, seed)]
    if p.kind == "gradual":
        return [build_gradual(kinds, suite, p.batch_size, seed)]
    if p.kind == "diverse":
        return build_diverse(kinds, p.severity, suite, p.batch_size, p.n_trials, seed)
    if p.kind == "ptta":
        return [build_ptta(kinds, p.severity, suite, p.batch_size, p.delta, seed)]
    raise ConfigError(f"unknown protocol {p.kind!r}")


def run_protocol(
    cfg: RunConfig,
    bundle: ModelBundle,
    suite: CorruptedSuite,
    run_seed: int,
    source_images: np.ndarray | None = None,
) -> list[RunReport]:
    """One protocol execution for one run seed (one report per trial)."""
    torch.manual_seed(component_seed(run_seed, "run-torch"))
    reports = []
    for schedule in make_schedules(cfg, suite, run_seed):
        method = build_method(cfg, bundle, run_seed, source_images)
        reports.append(
            score_online(
                method,
                schedule,
                suite,
                config_snapshot=cfg.to_dict(),
                seed=run_seed,
                episodic=cfg.protocol.episodic,
            )
        )
    return reports


def run_all_seeds(
    cfg: RunConfig,
    bundle: ModelBundle,
    suite: CorruptedSuite,
    source_images: np.ndarray | None = None,
) -> tuple[list[RunReport], dict]:
    reports: list[RunReport] = []
    for run_seed in cfg.run_seeds:
        reports.extend(run_protocol(cfg, bundle, suite, run_seed, source_images))
    summary = {
        "method": cfg.method.kind,
        "teca": cfg.teca.enabled or cfg.method.kind == "input_adapt",
        "protocol": cfg.protocol.kind,
        "seeds": list(cfg.run_seeds),
        "mean_error": float(np.mean([r.mean_error for r in reports])),
        "per_seed_mean_error": [r.mean_error for r in reports],
        "reset_counts": [r.reset_count for r in reports],
    }
    return reports, summary


def seed_mean_error(cfg: RunConfig, bundle, suite, source_images=None) -> float:
    _, summary = run_all_seeds(cfg, bundle, suite, source_images)
    return summary["mean_error"]


# ---------------------------------------------------------------------------
# Grids
# ---------------------------------------------------------------------------

def _variant(cfg: RunConfig, **updates) -> RunConfig:
    from .config import config_from_dict

    data = cfg.to_dict()
    for dotted, value in updates.items():
        node = data
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node[part]
        node[parts[-1]] = value
    return config_from_dict(data)


ABLATION_VARIANTS = ("full", "no_ls", "no_spus", "no_fbns")


def run_ablation_grid(
    cfg: RunConfig,
    bundle: ModelBundle,
    suite: CorruptedSuite,
    methods: tuple[str, ...] = ("bn_adapt", "tent", "eata", "cotta"),
    source_images: np.ndarray | None = None,
) -> dict:
    """Module-exclusion grid with shared seeds.

    Batch-stats adaptation has no gradient update, so the rescale and
    statistics-freeze variants are marked not-applicable for it.
    """
    grid: dict[str, dict[str, float | None]] = {}
    for mkind in methods:
        row: dict[str, float | None] = {}
        for variant in ABLATION_VARIANTS:
            if mkind == "bn_adapt" and variant in ("no_spus", "no_fbns"):
                row[variant] = None  # N/A by contract
                continue
            v = _variant(
                cfg,
                **{
                    "method.kind": mkind,
                    "teca.enabled": True,
                    "teca.ls": variant != "no_ls",
                    "teca.spus": variant != "no_spus",
                    "teca.fbns": variant != "no_fbns",
                },
            )
            row[variant] = seed_mean_error(v, bundle, suite, source_images)
        grid[mkind] = row
    return grid


def format_ablation_table(grid: dict) -> str:
    """Rows = excluded module, columns = methods, deltas in parentheses."""
    methods = list(grid)
    lines = ["excluded," + ",".join(methods)]
    for variant, label in (("no_ls", "LS"), ("no_spus", "SPUS"), ("no_fbns", "FBNS")):
        cells = []
        for m in methods:
            val = grid[m][variant]
            if val is None:
                cells.append("N/A")
            else:
                delta = val - grid[m]["full"]
                cells.append(f"{val:.2f} ({delta:+.2f})")
        lines.append(f"{label}," + ",".join(cells))
    lines.append("full," + ",".join(f"{grid[m]['full']:.2f}" for m in methods))
    return "\n".join(lines) + "\n"


def run_param_range_grid(
    cfg: RunConfig,
    bundle: ModelBundle,
    suite: CorruptedSuite,
    methods: tuple[str, ...] = ("bn_adapt", "tent"),
    source_images: np.ndarray | None = None,
) -> dict:
    """Update-range grid (both / classifier only / enhancer only)."""
    grid: dict[str, dict[str, float]] = {}
    for mkind in methods:
        row = {}
        for rng in ("both", "classifier", "enhancer"):
            v = _variant(
                cfg,
                **{"method.kind": mkind, "teca.enabled": True, "teca.update_range": rng},
            )
            row[rng] = seed_mean_error(v, bundle, suite, source_images)
        grid[mkind] = row
    return grid
