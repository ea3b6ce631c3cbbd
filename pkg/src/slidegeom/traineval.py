"""Training loop and repeated stratified cross-validation.

Cross-validation here means independent stratified random 80/20 splits (not
disjoint partitions): each fold reshuffles, trains from a fresh seeded
initialization, carves a small validation subset out of its training slides
to pick the best epoch by validation loss, and reports test metrics. Every
random draw descends from (config seed, fold index), so a rerun with the
same config and cohort is bitwise identical, including checkpoints and the
report JSON. Folds are independent and could run in parallel; this driver
runs them sequentially to keep gradient reduction order fixed.
"""

from __future__ import annotations

import csv
import json
import os
import subprocess
from dataclasses import dataclass

import numpy as np

from . import nucfeat
from .cellgraph import build_cell_graph, normalized_adjacency
from .config import config_hash
from .checkpoint import save_checkpoint
from .metrics import EvalReport, compute_metrics
from .model import AblationFlags, SubtypeModel
from .optim import AdamW, cross_entropy


class SplitError(ValueError):
    pass


@dataclass
class PreparedPatch:
    patch_id: int
    grid_row: int
    grid_col: int
    macro: np.ndarray
    meso: np.ndarray
    graph: object = None      # CellGraph when geometry is in play
    norm_adj: np.ndarray = None


@dataclass
class PreparedSlide:
    slide_id: int
    label: int
    patches: list


def prepare_slide(record, config, use_geometry):
    """Extract per-patch model inputs from a slide record.

    Geometry preparation filters necrotic nuclei, standardizes the 20-value
    rows per slide, and builds one graph (plus its cached normalized
    adjacency) per patch. Without geometry the nuclei are never touched.
    """
    patches = []
    if use_geometry:
        feature_mats = nucfeat.slide_feature_matrices(
            [p.nuclei for p in record.patches],
            radius_um=config.neighbor_radius_um,
            levels=config.glcm_levels,
            offsets=config.glcm_offsets,
        )
    for i, p in enumerate(record.patches):
        graph = None
        norm_adj = None
        if use_geometry:
            kept = nucfeat.filter_nuclei(p.nuclei)
            graph = build_cell_graph(kept, feature_mats[i], k=config.k, threshold_px=config.threshold_px)
            if graph.n_nodes:
                norm_adj = normalized_adjacency(graph.adjacency)
        patches.append(PreparedPatch(p.patch_id, p.grid_row, p.grid_col,
                                     np.asarray(p.f_macro), np.asarray(p.f_meso),
                                     graph, norm_adj))
    return PreparedSlide(record.slide_id, record.label, patches)


def prepare_cohort(records, config, use_geometry):
    return [prepare_slide(r, config, use_geometry) for r in records]


def stratified_split(labels, test_frac, rng, max_retries=20):
    """Random per-class 80/20 indices; every class must land in both sides."""
    labels = np.asarray(labels)
    classes = np.unique(labels)
    for _ in range(max_retries):
        train, test = [], []
        for c in classes:
            idx = np.flatnonzero(labels == c)
            if idx.size < 2:
                raise SplitError(f"class {c} has {idx.size} slide(s); cannot stratify a split")
            idx = rng.permutation(idx)
            n_test = min(max(1, int(round(test_frac * idx.size))), idx.size - 1)
            test.extend(idx[:n_test])
            train.extend(idx[n_test:])
        train = sorted(int(i) for i in train)
        test = sorted(int(i) for i in test)
        if set(labels[test]) == set(classes) and set(labels[train]) == set(classes):
            return train, test
    raise SplitError("could not draw a split containing every class on both sides")


def _mean_loss(model, slides, idx):
    total = 0.0
    for i in idx:
        total += cross_entropy(model.forward(slides[i]), slides[i].label).item()
    return total / len(idx)


def train_fold(slides, train_idx, config, flags, fold):
    """Train one fold from scratch; returns (model, history).

    The best epoch is chosen by validation loss on a stratified carve-out of
    the training slides (ties keep the earlier epoch); if the carve-out is
    impossible the final epoch wins.
    """
    ss = np.random.SeedSequence([config.seed, fold])
    init_seed, shuffle_seed, val_seed = ss.spawn(3)
    model = SubtypeModel(config, flags, np.random.default_rng(init_seed))
    opt = AdamW(model.named_parameters(), lr=config.lr,
                betas=(config.beta1, config.beta2), eps=config.eps,
                weight_decay=config.weight_decay)

    labels = [slides[i].label for i in train_idx]
    val_idx = []
    core_idx = list(train_idx)
    if config.val_frac > 0:
        try:
            core_rel, val_rel = stratified_split(labels, config.val_frac,
                                                 np.random.default_rng(val_seed))
            core_idx = [train_idx[i] for i in core_rel]
            val_idx = [train_idx[i] for i in val_rel]
        except SplitError:
            pass  # too few slides to hold out validation; train on everything

    shuffle_rng = np.random.default_rng(shuffle_seed)
    step_losses = []
    val_losses = []
    best = (np.inf, None)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(len(core_idx))
        for at in range(0, len(order), config.batch_size):
            batch = [core_idx[j] for j in order[at:at + config.batch_size]]
            inv = 1.0 / len(batch)
            batch_loss = 0.0
            for i in batch:
                loss = cross_entropy(model.forward(slides[i]), slides[i].label) * inv
                loss.backward()
                batch_loss += loss.item()
            opt.step()
            opt.zero_grad()
            step_losses.append(batch_loss)
        if val_idx:
            vl = _mean_loss(model, slides, val_idx)
            val_losses.append(vl)
            if vl < best[0]:
                best = (vl, model.state_arrays())
    if best[1] is not None:
        model.load_state(best[1])
    return model, {"step_losses": step_losses, "val_losses": val_losses}


def predict(model, slides, idx=None):
    """Softmax scores and raw logits for the given slides (all by default)."""
    idx = range(len(slides)) if idx is None else idx
    logits = []
    for i in idx:
        logits.append(model.forward(slides[i]).data.reshape(-1).copy())
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True), logits


def monte_carlo_cv(records, config, flags, out_dir=None, prepared=None):
    """Repeated stratified 80/20 train/test evaluation.

    Returns an :class:`EvalReport`; when ``out_dir`` is given, also writes per
    fold checkpoints, the JSON and CSV reports, figures, and a run manifest.
    """
    if len(records) < 10:
        raise SplitError(f"need at least 10 slides for cross-validation, got {len(records)}")
    labels = [r.label for r in records]
    if len(set(labels)) < config.classes:
        raise SplitError("cohort is missing at least one class")

    slides = prepared if prepared is not None else prepare_cohort(records, config, flags.use_geometry)
    chash = config_hash(config)
    report = EvalReport(flags=flags.to_dict(), config_hash=chash.hex(), seed=config.seed)
    histories = []
    models = []
    for fold in range(config.folds):
        split_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 5000 + fold]))
        train_idx, test_idx = stratified_split(labels, config.test_frac, split_rng)
        model, history = train_fold(slides, train_idx, config, flags, fold)
        scores, logits = predict(model, slides, test_idx)
        fold_metrics = compute_metrics(scores, [labels[i] for i in test_idx], config.classes)
        report.folds.append(fold_metrics)
        report.per_slide_logits.append(
            {str(slides[i].slide_id): [float(v) for v in row] for i, row in zip(test_idx, logits)})
        histories.append(history)
        models.append(model)

    if out_dir is not None:
        write_run_outputs(out_dir, report, histories, models, config)
    return report


def git_describe():
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        if out.returncode == 0:
            return out.stdout.strip()
    except OSError:
        pass
    return "unknown"


def run_manifest(config, extra=None):
    import dataclasses

    manifest = {
        "config": dataclasses.asdict(config),
        "config_hash": config_hash(config).hex(),
        "seed": config.seed,
        "git": git_describe(),
    }
    manifest.update(extra or {})
    return manifest


def write_run_outputs(out_dir, report, histories, models, config, manifest_extra=None):
    from . import figures

    os.makedirs(out_dir, exist_ok=True)
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    chash = config_hash(config)
    for fold, model in enumerate(models):
        save_checkpoint(os.path.join(ckpt_dir, f"fold{fold}.argw"), model.state_arrays(), chash)

    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=1)
        fh.write("\n")

    with open(os.path.join(out_dir, "report.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["fold", "auc", "acc", "f1", "precision"])
        for i, fold_metrics in enumerate(report.folds):
            writer.writerow([i] + [repr(fold_metrics[m]) for m in ("auc", "acc", "f1", "precision")])
        summary = report.summary()
        writer.writerow(["mean"] + [repr(summary[m]["mean"]) for m in ("auc", "acc", "f1", "precision")])
        writer.writerow(["std"] + [repr(summary[m]["std"]) for m in ("auc", "acc", "f1", "precision")])

    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(run_manifest(config, manifest_extra), fh, sort_keys=True, indent=1)
        fh.write("\n")

    fig_dir = os.path.join(out_dir, "figures")
    os.makedirs(fig_dir, exist_ok=True)
    figures.render_metrics_figure(report, os.path.join(fig_dir, "metrics.png"))
    figures.render_loss_figure(histories, os.path.join(fig_dir, "training_loss.png"))
