"""Dual-branch training over packed mini-batches, inference and evaluation.

One optimisation step on a mini-batch of ``B`` bags:

1. split each bag into kept / discarded instances (Bernoulli, ratio ``r``);
2. optionally downsample each set with ADS;
3. pack the kept sets (main branch) and discarded sets (residual branch);
4. main branch: per-bag embeddings through the isolated masks, slide loss
   averaged over the ``B`` slides;
5. residual branch: each pack is one hyperslide with an aggregated label, loss
   averaged over its packs;
6. ``main + lambda * residual`` -> backward -> Adam.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autograd as ag
from .ads import ads_forward_infer, ads_forward_train
from .autograd import Tensor, TrainingFault
from .config import Config
from .data import FeatureBag
from .hyperslide import HyperslideLabel, hyperslide_label
from .losses import (
    asl_loss_from_logits,
    bce_from_logits,
    combine_losses,
    cross_entropy,
    focal_loss_from_logits,
    survival_nll,
)
from .masks import build_masks
from .metrics import MetricsReport, concordance_index, macro_accuracy, macro_auc, survival_risk
from .model import PackMILModel, aggregate_bag, aggregate_main, aggregate_residual, classify, probabilities
from .optim import Adam, cosine_lr, lr_for_batchsize
from .packing import adapt_pack_length, bag_rng, plan_packs, split_instances

log = logging.getLogger(__name__)


def output_dim(cfg: Config) -> int:
    return cfg.data.time_bins if cfg.task == "survival" else cfg.data.n_classes


def build_model(cfg: Config, dim: int) -> PackMILModel:
    ads = None
    if cfg.ads.enabled:
        ads = {"hidden": cfg.ads.hidden, "k": cfg.ads.k, "pool": cfg.ads.pool}
    return PackMILModel.build(cfg.task, dim, output_dim(cfg), cfg.model.d_attn, ads, cfg.model.norm, cfg.train.seed)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    """Bag visiting order for one epoch."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


# ---------------------------------------------------------------- per-sample losses


def main_losses(head: Tensor, labels: Sequence, cfg: Config) -> Tensor:
    """Slide-level loss per row of ``head``."""
    task = cfg.task
    if task == "grading":
        return cross_entropy(head, [lab.grade for lab in labels])
    if task == "subtyping":
        return bce_from_logits(head, np.array([lab.subtypes for lab in labels], dtype=np.float64))
    return survival_nll(
        head,
        np.array([lab.event for lab in labels]),
        np.array([lab.time_bin for lab in labels]),
        cfg.loss.alpha_cens,
    )


def residual_losses(head: Tensor, labels: Sequence[HyperslideLabel], cfg: Config) -> Tensor:
    """Hyperslide loss per residual pack."""
    task = cfg.task
    lc = cfg.loss
    if task == "grading":
        onehot = np.eye(head.shape[-1])[[lab.grade for lab in labels]]
        return asl_loss_from_logits(head, onehot, lc.gamma_pos, lc.gamma_neg)
    if task == "subtyping":
        soft = np.array([lab.soft_vector for lab in labels])
        return focal_loss_from_logits(head, soft, lc.alpha_focal, lc.gamma_focal)
    return survival_nll(
        head,
        np.array([lab.event[1] for lab in labels]),
        np.array([lab.event[0] for lab in labels]),
        lc.alpha_cens,
    )


# ---------------------------------------------------------------- branch helpers


def _n_rows(x) -> int:
    return x.shape[0]


def _rows(x, idx: np.ndarray):
    return ag.take_rows(x, idx) if isinstance(x, Tensor) else x[idx]


def _pack_tensor(parts: list, segs, L: int, dim: int):
    """Concatenate segment rows plus zero padding; stays numpy when no part needs grad."""
    blocks = [_rows(parts[s.bag_id - 1], np.arange(s.length)) for s in segs]
    used = sum(s.length for s in segs)
    if used < L:
        blocks.append(np.zeros((L - used, dim)))
    if any(isinstance(b, Tensor) for b in blocks):
        return ag.concat(blocks, axis=0)
    return np.concatenate(blocks, axis=0)


def _bag_ids(segs, L: int) -> np.ndarray:
    ids = np.zeros(L, dtype=np.int64)
    for s in segs:
        ids[s.start:s.start + s.length] = s.bag_id
    return ids


@dataclass
class StepResult:
    loss: float
    main: float
    residual: float | None
    n_main_packs: int
    n_res_packs: int
    main_length: int
    res_length: int | None


@dataclass
class TrainState:
    model: PackMILModel
    optimizer: Adam
    epoch: int = 0
    step: int = 0
    history: list[dict] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)


def init_state(cfg: Config, dim: int) -> TrainState:
    model = build_model(cfg, dim)
    return TrainState(model, Adam(model.parameters(), lr=cfg.train.lr))


class PackTrainer:
    """Holds a config and a :class:`TrainState`; one instance per training run."""

    def __init__(self, cfg: Config, dim: int, state: TrainState | None = None):
        self.cfg = cfg.validate()
        self.state = state if state is not None else init_state(cfg, dim)
        self.dim = dim

    @property
    def model(self) -> PackMILModel:
        return self.state.model

    # ------------------------------------------------------------ forward pieces

    def _branch_parts(self, bags: Sequence[FeatureBag], epoch: int, step: int):
        cfg = self.cfg
        tc = cfg.train
        ads = self.model.ads
        kept, disc = [], []
        for b, bag in enumerate(bags):
            rng = bag_rng(tc.seed, epoch, step, b)
            x = self.model.normalize(bag.features)
            if ads is not None and cfg.ads.placement == "before":
                x, _ = ads_forward_train(x, ads, rng=rng)
            if tc.sampling:
                sp = split_instances(_n_rows(x), tc.split_ratio, tc.min_patches, min_discard=tc.min_patches, rng=rng)
                k_rows = _rows(x, rng.permutation(sp.kept)) if len(sp.kept) else None
                d_rows = _rows(x, rng.permutation(sp.discarded)) if len(sp.discarded) else None
            else:
                k_rows, d_rows = x, None
            if ads is not None and cfg.ads.placement == "after":
                if k_rows is not None:
                    k_rows, _ = ads_forward_train(k_rows, ads, rng=rng)
                if d_rows is not None:
                    d_rows, _ = ads_forward_train(d_rows, ads, rng=rng)
            kept.append(k_rows)
            disc.append(d_rows)
        return kept, disc

    def _main_branch(self, parts, bags):
        L = self.cfg.train.pack_length
        lengths = [0 if p is None else _n_rows(p) for p in parts]
        L_eff = adapt_pack_length(lengths, L)
        plan = plan_packs([min(n, L_eff) for n in lengths], L_eff)
        B = len(parts)
        ids_out, z_out = [], []
        for segs in plan:
            feats = _pack_tensor(parts, segs, L_eff, self.dim)
            masks = build_masks(_bag_ids(segs, L_eff), B)
            ids, Z, _ = aggregate_main(feats, masks, self.model.abmil)
            ids_out.extend(int(i) for i in ids)
            z_out.append(Z)
        Z = ag.concat(z_out, axis=0)
        head = classify(Z, self.model.abmil, self.cfg.task)
        losses = main_losses(head, [bags[i - 1].label for i in ids_out], self.cfg)
        return ag.mean(losses), len(plan), L_eff, ids_out, head

    def _residual_branch(self, parts, bags):
        cfg = self.cfg
        L = cfg.train.pack_length
        lengths = [0 if p is None else _n_rows(p) for p in parts]
        if not any(lengths):
            return None, 0, None
        L_eff = adapt_pack_length(lengths, L)
        plan = plan_packs([min(n, L_eff) for n in lengths], L_eff)
        zs, labels = [], []
        for segs in plan:
            feats = _pack_tensor(parts, segs, L_eff, self.dim)
            presence = _bag_ids(segs, L_eff) > 0
            agg = aggregate_residual(feats, presence, self.model.abmil)
            if agg is None:
                continue
            members = [bags[s.bag_id - 1] for s in segs]
            lab = hyperslide_label(
                cfg.task,
                [m.label for m in members],
                [m.n_patches for m in members],
                max_grade=cfg.data.n_classes - 1,
                time_bins=cfg.data.time_bins,
            )
            zs.append(agg[0])
            labels.append(lab)
        weights = np.array([0.0 if lab.degenerate else 1.0 for lab in labels])
        if weights.sum() == 0:
            return None, len(plan), L_eff
        head = classify(ag.stack_rows(zs), self.model.abmil, cfg.task)
        per_pack = residual_losses(head, labels, cfg)
        return ag.mul(ag.sum(ag.mul(per_pack, weights)), 1.0 / weights.sum()), len(plan), L_eff

    def batch_loss(self, bags: Sequence[FeatureBag], epoch: int = 0, step: int = 0):
        """Forward pass of one mini-batch -> (total loss tensor, StepResult sans loss)."""
        cfg = self.cfg
        if not cfg.train.pack:
            losses = []
            for bag in bags:
                z, _ = aggregate_bag(self.model.normalize(bag.features), self.model.abmil)
                head = classify(ag.reshape(z, (1, -1)), self.model.abmil, cfg.task)
                losses.append(main_losses(head, [bag.label], cfg))
            main = ag.mean(ag.concat(losses, axis=0))
            return main, StepResult(main.item(), main.item(), None, 0, 0, 0, None)
        kept, disc = self._branch_parts(bags, epoch, step)
        main, n_main, L_main, _, _ = self._main_branch(kept, bags)
        res = None
        n_res, L_res = 0, None
        if cfg.loss.lam > 0 and cfg.train.sampling:
            res, n_res, L_res = self._residual_branch(disc, bags)
        total = combine_losses(main, res if res is not None else 0.0, cfg.loss.lam if res is not None else 0.0)
        info = StepResult(
            total.item(), main.item(), None if res is None else res.item(), n_main, n_res, L_main, L_res
        )
        return total, info

    # ------------------------------------------------------------ training

    def current_lr(self, epoch: int) -> float:
        tc = self.cfg.train
        lr = lr_for_batchsize(tc.lr, tc.batch_size, tc.lr_scaling)
        return cosine_lr(lr, epoch, tc.epochs) if tc.cosine else lr

    def train_step(self, bags: Sequence[FeatureBag], epoch: int, step: int, lr: float) -> StepResult:
        if self.model.norm is not None:
            self.model.norm.update(np.concatenate([b.features for b in bags]))
        total, info = self.batch_loss(bags, epoch, step)
        if not np.isfinite(total.data):
            raise TrainingFault(f"non-finite loss at epoch {epoch} step {step}")
        params = self.model.parameters()
        grads = ag.backward(total, params)
        self.state.optimizer.step([grads[p] for p in params], lr=lr)
        return info

    def train_epoch(self, bags: Sequence[FeatureBag], epoch: int | None = None) -> list[StepResult]:
        epoch = self.state.epoch if epoch is None else epoch
        bs = self.cfg.train.batch_size
        order = epoch_order(len(bags), self.cfg.train.seed, epoch)
        lr = self.current_lr(epoch)
        results = []
        for step, lo in enumerate(range(0, len(order), bs)):
            batch = [bags[i] for i in order[lo:lo + bs]]
            info = self.train_step(batch, epoch, step, lr)
            results.append(info)
            self.state.step_losses.append(info.loss)
            self.state.step += 1
        self.state.epoch = epoch + 1
        return results

    def fit(self, train: Sequence[FeatureBag], val: Sequence[FeatureBag] = ()) -> "FitResult":
        tc = self.cfg.train
        best_metric = -np.inf
        best_state = self.model.state()
        best_epoch = -1
        bad = 0
        for epoch in range(self.state.epoch, tc.epochs):
            steps = self.train_epoch(train, epoch)
            rec = {
                "epoch": epoch,
                "lr": self.current_lr(epoch),
                "loss": float(np.mean([s.loss for s in steps])),
                "main": float(np.mean([s.main for s in steps])),
                "residual": _mean_or_none([s.residual for s in steps]),
            }
            if val:
                metric = selection_metric(evaluate(val, self.model, self.cfg), self.cfg.task)
            else:
                metric = -rec["loss"]
            rec["val_metric"] = metric
            self.state.history.append(rec)
            log.info("epoch %d loss %.5f val %.4f", epoch, rec["loss"], metric)
            if metric > best_metric:
                best_metric, best_state, best_epoch, bad = metric, self.model.state(), epoch, 0
            elif epoch >= tc.stop_start:
                bad += 1
                if bad >= tc.patience:
                    break
        self.model.load_state(best_state)
        return FitResult(best_epoch, best_metric, self.state.history)

    def predict(self, bag: FeatureBag) -> np.ndarray:
        return infer_slide(bag, self.model)


@dataclass
class FitResult:
    best_epoch: int
    best_metric: float
    history: list[dict]


def _mean_or_none(xs):
    xs = [x for x in xs if x is not None]
    return float(np.mean(xs)) if xs else None


def train_epoch(bags: Sequence[FeatureBag], cfg: Config, state: TrainState) -> tuple[TrainState, list[float]]:
    trainer = PackTrainer(cfg, bags[0].dim, state)
    results = trainer.train_epoch(bags)
    return trainer.state, [r.loss for r in results]


# ---------------------------------------------------------------- inference / evaluation


def infer_slide(bag: FeatureBag | np.ndarray, model: PackMILModel) -> np.ndarray:
    """Deterministic prediction from the full instance sequence (no sampling, no pooling)."""
    x = bag.features if isinstance(bag, FeatureBag) else np.asarray(bag, dtype=np.float64)
    x = model.normalize(x)
    if model.ads is not None:
        x, _ = ads_forward_infer(x, model.ads)
    z, _ = aggregate_bag(x, model.abmil)
    return probabilities(classify(z, model.abmil, model.task), model.task).data.copy()


def evaluate(bags: Sequence[FeatureBag], model: PackMILModel, cfg: Config | None = None) -> MetricsReport:
    task = model.task
    preds = np.stack([infer_slide(b, model) for b in bags])
    report = MetricsReport()
    if task == "grading":
        y = np.array([b.label.grade for b in bags])
        report.accuracy = macro_accuracy(y, preds.argmax(axis=1))
        report.auc = macro_auc(y, preds)
    elif task == "subtyping":
        y = np.array([int(np.argmax(b.label.subtypes)) for b in bags])
        report.accuracy = macro_accuracy(y, preds.argmax(axis=1))
        report.auc = macro_auc(y, preds)
    else:
        report.c_index = concordance_index(
            survival_risk(preds),
            [b.label.time_bin for b in bags],
            [b.label.event for b in bags],
        )
    return report


def selection_metric(report: MetricsReport, task: str) -> float:
    """Validation metric used for checkpoint selection."""
    if task == "grading":
        value = report.accuracy
    elif task == "subtyping":
        value = report.auc if report.auc is not None else report.accuracy
    else:
        value = report.c_index
    return -np.inf if value is None else float(value)


def clone_model(model: PackMILModel) -> PackMILModel:
    return copy.deepcopy(model)
