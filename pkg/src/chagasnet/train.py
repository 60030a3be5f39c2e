"""Pretraining on binned biomarkers, patient-level folds and fine-tuning of the fold ensemble."""

from __future__ import annotations

import copy
import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from multiprocessing import get_context
from pathlib import Path

import numpy as np
import torch

from .binning import PercentileBinner, match_labs, targets_from_values
from .evaluation import auc_roc
from .losses import bce_soft, masked_cross_entropy
from .model import FINETUNE, PRETRAIN, ECGNet, ModelConfig, make_checkpoint, swap_head
from .optim import HybridOptimizer, OptimConfig, smooth_bins
from .preprocess import PreprocessConfig, extract_snippet, pad_to, prepare, standardize_array

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = PRETRAIN
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 10
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0
    val_fraction: float = 0.2
    smooth: bool = True
    snippet_len: int = 800
    flat_eps: float = 1e-8
    dtype: str = "float32"

    def __post_init__(self):
        if self.phase not in (PRETRAIN, FINETUNE):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be at least 1")

    @classmethod
    def finetune_defaults(cls, **kw):
        kw.setdefault("optim", OptimConfig(lr=0.001))
        return cls(phase=FINETUNE, batch_size=kw.pop("batch_size", 128), **kw)

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


@dataclass
class PretrainData:
    records: list
    bins: np.ndarray
    mask: np.ndarray
    biomarkers: tuple
    n_bins: int

    def __len__(self):
        return len(self.records)

    @property
    def patient_ids(self):
        return [r.patient_id for r in self.records]


@dataclass
class FinetuneData:
    records: list
    labels: np.ndarray

    def __len__(self):
        return len(self.records)

    @property
    def patient_ids(self):
        return [r.patient_id for r in self.records]

    def subset(self, idx) -> "FinetuneData":
        return FinetuneData([self.records[i] for i in idx], self.labels[idx])


@dataclass
class FoldPlan:
    k: int
    fold_of_patient: dict

    def fold_indices(self, patient_ids, fold: int):
        val = [i for i, p in enumerate(patient_ids) if self.fold_of_patient[p] == fold]
        train = [i for i, p in enumerate(patient_ids) if self.fold_of_patient[p] != fold]
        return np.array(train, dtype=int), np.array(val, dtype=int)

    def save(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["patient_id", "fold"])
            for p, f in sorted(self.fold_of_patient.items()):
                w.writerow([p, f])

    @classmethod
    def load(cls, path) -> "FoldPlan":
        with open(path, newline="") as fh:
            m = {r["patient_id"]: int(r["fold"]) for r in csv.DictReader(fh)}
        return cls(max(m.values()) + 1, m)


# ---------------------------------------------------------------------------
# data assembly


def split_patients(patient_ids, val_fraction: float, seed: int):
    """Deterministic patient-disjoint train/validation split."""
    patients = sorted(set(patient_ids))
    rng = np.random.default_rng(seed)
    rng.shuffle(patients)
    n_val = int(round(len(patients) * val_fraction))
    if val_fraction > 0 and len(patients) > 1:
        n_val = min(max(n_val, 1), len(patients) - 1)
    return set(patients[n_val:]), set(patients[:n_val])


def build_pretrain_data(records, labs, biomarkers, n_bins=100, val_fraction=0.2, seed=0,
                        preprocess: PreprocessConfig | None = None, window_h=24.0):
    """Prepare records, join labs, split by patient and fit the binner on the train split only.

    Returns ``(train, val, binner)``.
    """
    biomarkers = tuple(biomarkers)
    values, excluded = match_labs(records, labs, biomarkers, window_h)
    if excluded:
        log.info("%d ECGs excluded: no lab within %g h", excluded, window_h)
    kept = [r for r in records if r.record_id in values]
    if not kept:
        raise TrainingError("no ECG has a lab result within the window")
    train_p, val_p = split_patients([r.patient_id for r in kept], val_fraction, seed)
    train_recs = [r for r in kept if r.patient_id in train_p]
    val_recs = [r for r in kept if r.patient_id in val_p]

    fit_values = {}
    for k, name in enumerate(biomarkers):
        col = np.array([values[r.record_id][k] for r in train_recs])
        col = col[~np.isnan(col)]
        if col.size:
            fit_values[name] = col
    missing = [b for b in biomarkers if b not in fit_values]
    if missing:
        raise TrainingError(f"no training values for {', '.join(missing)}")
    binner = PercentileBinner.fit(fit_values, n_bins, fitted_on="train")

    def assemble(recs):
        targets = [targets_from_values(r.record_id, values[r.record_id], binner) for r in recs]
        bins = np.array([t.bins for t in targets], dtype=np.int64).reshape(len(recs), len(biomarkers))
        mask = np.array([t.mask for t in targets], dtype=bool).reshape(len(recs), len(biomarkers))
        return PretrainData([prepare(r, preprocess) for r in recs], bins, mask, biomarkers, n_bins)

    return assemble(train_recs), assemble(val_recs), binner


def build_finetune_data(records, resolved, preprocess: PreprocessConfig | None = None) -> FinetuneData:
    kept = [r for r in records if r.record_id in resolved.labels]
    if not kept:
        raise TrainingError("no records carry a Chagas label")
    return FinetuneData([prepare(r, preprocess) for r in kept],
                        np.array([resolved.labels[r.record_id] for r in kept], dtype=np.float64))


def make_folds(patients, labels, k: int = 5, seed: int = 0) -> FoldPlan:
    """Patient-disjoint folds stratified by whether a patient has any positive label.

    ``patients`` and ``labels`` are per-record sequences.
    """
    positive = {}
    for p, y in zip(patients, labels):
        positive[p] = positive.get(p, False) or float(y) > 0
    if len(positive) < k:
        raise ValueError(f"{len(positive)} patients cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    fold_of = {}
    offset = 0
    for stratum in (True, False):
        members = sorted(p for p, pos in positive.items() if pos == stratum)
        rng.shuffle(members)
        for i, p in enumerate(members):
            fold_of[p] = (offset + i) % k
        offset = (offset + len(members)) % k
    return FoldPlan(k, fold_of)


# ---------------------------------------------------------------------------
# batching


def random_batch(records, idx, rng, length, flat_eps, dtype):
    x = np.stack([standardize_array(extract_snippet(records[i], rng, length).data, flat_eps) for i in idx])
    return torch.as_tensor(x, dtype=dtype)


def fixed_batch(records, idx, length, flat_eps, dtype):
    """Snippets starting at sample 0, used for validation."""
    x = np.stack([standardize_array(pad_to(records[i].signal, length)[:, :length], flat_eps) for i in idx])
    return torch.as_tensor(x, dtype=dtype)


def _batches(n, batch_size):
    for start in range(0, n, batch_size):
        yield slice(start, start + batch_size)


@torch.no_grad()
def pretrain_logits(model: ECGNet, data: PretrainData, cfg: TrainConfig) -> torch.Tensor:
    model.eval()
    out = []
    idx = np.arange(len(data))
    for sl in _batches(len(data), max(cfg.batch_size, 1)):
        out.append(model.forward_pretrain(fixed_batch(data.records, idx[sl], cfg.snippet_len,
                                                      cfg.flat_eps, cfg.torch_dtype)))
    return torch.cat(out) if out else torch.empty(0, data.n_bins, len(data.biomarkers))


def pretrain_val_loss(model, data: PretrainData, cfg: TrainConfig):
    if len(data) == 0:
        return float("nan"), None
    logits = pretrain_logits(model, data, cfg)
    loss, skipped = masked_cross_entropy(logits, torch.as_tensor(data.bins), torch.as_tensor(data.mask))
    return (float("nan") if skipped else float(loss)), logits


# ---------------------------------------------------------------------------
# pretraining


def pretrain(train: PretrainData, val: PretrainData, cfg: TrainConfig | None = None,
             model_cfg: ModelConfig | None = None, binner: PercentileBinner | None = None,
             callback=None) -> dict:
    """Train the biomarker model; return the checkpoint of the lowest-validation-loss epoch.

    ``callback(epoch, step, model)`` runs after every optimizer step (and smoothing).
    """
    cfg = cfg or TrainConfig()
    if len(train) == 0:
        raise TrainingError("empty training set")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    B, T = train.n_bins, len(train.biomarkers)
    model = ECGNet(model_cfg or ModelConfig(), head=PRETRAIN, n_bins=B, n_tests=T).to(cfg.torch_dtype)
    opt = HybridOptimizer(model, cfg.optim)
    alpha = cfg.optim.smoothing_alpha
    bins_t, mask_t = torch.as_tensor(train.bins), torch.as_tensor(train.mask)

    history, best = [], None
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = rng.permutation(len(train))
        total, pairs = 0.0, 0
        for step, sl in enumerate(_batches(len(train), cfg.batch_size)):
            idx = perm[sl]
            x = random_batch(train.records, idx, rng, cfg.snippet_len, cfg.flat_eps, cfg.torch_dtype)
            loss, skipped = masked_cross_entropy(model.forward_pretrain(x), bins_t[idx], mask_t[idx])
            if skipped:
                continue
            opt.zero_grad()
            loss.backward()
            opt.step()
            if cfg.smooth:
                smooth_bins(model.head.weight, alpha, B, T)
            n = int(mask_t[idx].sum())
            total += loss.item() * n
            pairs += n
            if callback is not None:
                callback(epoch, step, model)
        train_loss = total / pairs if pairs else float("nan")
        val_loss, _ = pretrain_val_loss(model, val, cfg)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("pretrain epoch %d: train %.4f val %.4f", epoch, train_loss, val_loss)
        score = val_loss if not math.isnan(val_loss) else train_loss
        if best is None or score < best["score"]:
            best = {"score": score, "epoch": epoch, "val_loss": val_loss,
                    "state": copy.deepcopy(model.state_dict()),
                    "optim": copy.deepcopy(opt.state_dict())}
        elif epoch - best["epoch"] >= cfg.patience:
            break

    model.load_state_dict(best["state"])
    return make_checkpoint(
        model,
        phase=PRETRAIN,
        epoch=best["epoch"],
        val_loss=best["val_loss"],
        history=history,
        biomarkers=list(train.biomarkers),
        binner=binner.to_dict() if binner is not None else None,
        optimizer_state=best["optim"],
        seed=cfg.seed,
    )


# ---------------------------------------------------------------------------
# fine-tuning


@torch.no_grad()
def finetune_logits(model: ECGNet, data: FinetuneData, cfg: TrainConfig) -> torch.Tensor:
    model.eval()
    idx = np.arange(len(data))
    out = [model.forward_finetune(fixed_batch(data.records, idx[sl], cfg.snippet_len, cfg.flat_eps, cfg.torch_dtype))
           for sl in _batches(len(data), cfg.batch_size)]
    return torch.cat(out)


def _validation_auc(probs, labels):
    hard = (np.asarray(labels) >= 0.5).astype(int)
    if hard.min() == hard.max():
        return float("nan")
    return auc_roc(probs, hard)


def train_fold(model: ECGNet, train: FinetuneData, val: FinetuneData, cfg: TrainConfig,
               fold: int = 0, callback=None) -> dict:
    torch.manual_seed(cfg.seed + fold)
    rng = np.random.default_rng([cfg.seed, fold])
    model = model.to(cfg.torch_dtype)
    opt = HybridOptimizer(model, cfg.optim)
    y_train = torch.as_tensor(train.labels, dtype=cfg.torch_dtype)
    y_val = torch.as_tensor(val.labels, dtype=cfg.torch_dtype)
    if callback is not None:
        callback(fold, 0, model)

    history, best = [], None
    for epoch in range(1, cfg.max_epochs + 1):
        model.train()
        perm = rng.permutation(len(train))
        total = 0.0
        for sl in _batches(len(train), cfg.batch_size):
            idx = perm[sl]
            x = random_batch(train.records, idx, rng, cfg.snippet_len, cfg.flat_eps, cfg.torch_dtype)
            loss = bce_soft(model.forward_finetune(x), y_train[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        logits = finetune_logits(model, val, cfg)
        val_loss = float(bce_soft(logits, y_val))
        val_auc = _validation_auc(torch.sigmoid(logits).numpy(), val.labels)
        history.append({"epoch": epoch, "train_loss": total / len(train), "val_loss": val_loss, "val_auc": val_auc})
        log.info("fold %d epoch %d: train %.4f val %.4f auc %.3f", fold, epoch, total / len(train), val_loss, val_auc)
        if callback is not None:
            callback(fold, epoch, model)
        if best is None or val_loss < best["val_loss"]:
            best = {"val_loss": val_loss, "val_auc": val_auc, "epoch": epoch,
                    "state": copy.deepcopy(model.state_dict()),
                    "optim": copy.deepcopy(opt.state_dict())}
        elif epoch - best["epoch"] >= cfg.patience:
            break

    model.load_state_dict(best["state"])
    return make_checkpoint(
        model,
        phase=FINETUNE,
        fold=fold,
        epoch=best["epoch"],
        val_loss=best["val_loss"],
        val_auc=best["val_auc"],
        history=history,
        optimizer_state=best["optim"],
        seed=cfg.seed,
    )


def _initial_model(pretrained, fold, cfg, model_cfg):
    if pretrained is not None:
        return swap_head(pretrained, seed=cfg.seed + fold)
    torch.manual_seed(cfg.seed + fold)
    return ECGNet(model_cfg or ModelConfig(), head=FINETUNE)


def _fold_worker(args):
    pretrained, data, plan, cfg, model_cfg, fold = args
    torch.set_num_threads(1)
    train_idx, val_idx = plan.fold_indices(data.patient_ids, fold)
    model = _initial_model(pretrained, fold, cfg, model_cfg)
    return train_fold(model, data.subset(train_idx), data.subset(val_idx), cfg, fold)


def finetune(pretrained, data: FinetuneData, plan: FoldPlan, cfg: TrainConfig | None = None,
             allow_cold_start: bool = False, model_cfg: ModelConfig | None = None,
             parallel: int = 1, callback=None) -> list[dict]:
    """Train one model per fold (validated on that fold), each warm-started from ``pretrained``.

    ``pretrained=None`` is only accepted with ``allow_cold_start`` (ablation).
    ``callback(fold, epoch, model)`` runs before training (epoch 0) and after each epoch;
    it is ignored when ``parallel > 1``.
    """
    cfg = cfg or TrainConfig.finetune_defaults()
    if pretrained is None and not allow_cold_start:
        raise TrainingError("fine-tuning needs a pretrained checkpoint (pass allow_cold_start for ablations)")
    if len(data) == 0:
        raise TrainingError("empty fine-tuning set")
    jobs = [(pretrained, data, plan, cfg, model_cfg, fold) for fold in range(plan.k)]
    if parallel > 1:
        with ProcessPoolExecutor(parallel, mp_context=get_context("spawn")) as pool:
            return list(pool.map(_fold_worker, jobs))
    out = []
    for pre, d, p, c, mc, fold in jobs:
        train_idx, val_idx = p.fold_indices(d.patient_ids, fold)
        model = _initial_model(pre, fold, c, mc)
        out.append(train_fold(model, d.subset(train_idx), d.subset(val_idx), c, fold, callback))
    return out


def write_metrics(history, path) -> None:
    if not history:
        return
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(history[0]))
        w.writeheader()
        w.writerows(history)
