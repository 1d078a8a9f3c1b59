"""Training orchestration: batching, optimizer, schedule, checkpointing, seeding."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .cycle import LossWeights, cc1_loss, cc2_loss, dual_cycle_forward, finetune_loss, mae
from .net import InterpolationNetwork, NetConfig
from .seqdata import (
    FrameSequence,
    QuadrupleSample,
    TripletSample,
    augment_reverse,
    make_quadruples,
    make_triplets,
    normalize,
)

CHECKPOINT_VERSION = 1
REVERSAL_P = 0.5  # temporal-reversal augmentation rate


class CheckpointError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "pretrain"
    epochs: int = 400
    batch_size: int = 16
    lr0: float = 3e-4
    lr_decay_factor: float = 2.0
    lr_decay_every: int = 400_000
    plateau_patience: int = 10
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    weight_decay: float = 0.05
    loss_weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    subsample_factor: int = 1

    def validate(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ValueError(f"phase must be pretrain or finetune, got {self.phase!r}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 <= 0:
            raise ValueError(f"lr0 must be > 0, got {self.lr0}")
        if self.lr_decay_factor <= 1:
            raise ValueError(f"lr_decay_factor must be > 1, got {self.lr_decay_factor}")
        if self.lr_decay_every < 1:
            raise ValueError(f"lr_decay_every must be >= 1, got {self.lr_decay_every}")
        if self.plateau_patience < 1:
            raise ValueError(f"plateau_patience must be >= 1, got {self.plateau_patience}")
        if self.subsample_factor < 1:
            raise ValueError(f"subsample_factor must be >= 1, got {self.subsample_factor}")
        self.loss_weights.validate()


def pretrain_defaults(**overrides) -> TrainConfig:
    return replace(TrainConfig(), **overrides)


def finetune_defaults(**overrides) -> TrainConfig:
    base = TrainConfig(phase="finetune", epochs=50, lr0=2e-3, weight_decay=0.0)
    return replace(base, **overrides)


@dataclass
class Checkpoint:
    parameters: dict[str, torch.Tensor]
    net_config: NetConfig
    train_config: TrainConfig | None
    global_step: int
    format_version: int = CHECKPOINT_VERSION


def lr_schedule(step: int, cfg: TrainConfig, plateau_count: int = 0) -> float:
    """Stepwise geometric decay plus extra halvings accumulated on plateaus."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return cfg.lr0 / cfg.lr_decay_factor ** (step // cfg.lr_decay_every + plateau_count)


def _train_config_to_dict(cfg: TrainConfig | None):
    return None if cfg is None else asdict(cfg)


def _train_config_from_dict(d) -> TrainConfig | None:
    if d is None:
        return None
    d = dict(d)
    d["loss_weights"] = LossWeights(**d["loss_weights"])
    return TrainConfig(**d)


def save_checkpoint(ckpt: Checkpoint, path: str | Path):
    """Atomic write: serialize to a temp file and rename into place."""
    payload = {
        "format_version": ckpt.format_version,
        "state_dict": ckpt.parameters,
        "net_config_json": json.dumps(asdict(ckpt.net_config)),
        "train_config_json": json.dumps(_train_config_to_dict(ckpt.train_config)),
        "global_step": ckpt.global_step,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint file {path}: {exc}") from exc
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"corrupt checkpoint file {path}: missing header")
    version = payload["format_version"]
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    return Checkpoint(
        parameters=payload["state_dict"],
        net_config=NetConfig(**json.loads(payload["net_config_json"])),
        train_config=_train_config_from_dict(json.loads(payload["train_config_json"])),
        global_step=int(payload["global_step"]),
        format_version=version,
    )


def _snapshot(net: InterpolationNetwork) -> dict[str, torch.Tensor]:
    return {k: v.detach().clone() for k, v in net.state_dict().items()}


def _triplet_batch(samples: list[TripletSample]):
    i0 = torch.from_numpy(np.stack([s.i0 for s in samples]))
    i1 = torch.from_numpy(np.stack([s.i1 for s in samples]))
    i2 = torch.from_numpy(np.stack([s.i2 for s in samples]))
    return i0, i1, i2


def _quadruple_batch(samples: list[QuadrupleSample]):
    in_a = torch.from_numpy(np.stack([s.in_a for s in samples]))
    in_b = torch.from_numpy(np.stack([s.in_b for s in samples]))
    gt_1 = torch.from_numpy(np.stack([s.gt_1 for s in samples]))
    gt_2 = torch.from_numpy(np.stack([s.gt_2 for s in samples]))
    return in_a, in_b, gt_1, gt_2


def _split(samples: list, rng: np.random.Generator):
    """Seeded 90/10 split; tiny pools keep at least one sample on each side."""
    perm = rng.permutation(len(samples))
    n_val = max(1, len(samples) // 10) if len(samples) >= 2 else 0
    val = [samples[i] for i in perm[:n_val]]
    train = [samples[i] for i in perm[n_val:]]
    if not train:
        train = val
    return train, val


def _prepare(data: list[FrameSequence], cfg: TrainConfig) -> list[FrameSequence]:
    if not data:
        raise ValueError("no training sequences provided")
    return [normalize(seq.subsample(cfg.subsample_factor)) for seq in data]


def _check_finite(loss: torch.Tensor, step: int, lr: float, components: dict):
    if not torch.isfinite(loss):
        detail = ", ".join(f"{k}={v:.6g}" for k, v in components.items())
        raise TrainingDiverged(f"non-finite loss at step {step} (lr={lr:.3g}): {detail}")


def _coarse_triplets(seq: FrameSequence) -> list[TripletSample]:
    """Triplets on the stride-3 grid, i.e. the inputs seen during fine-tuning.

    Window (i, i+3, i+6) uses input-grade frames only; ground-truth middles
    never feed the cycle terms.
    """
    frames = seq.frames
    return [
        TripletSample(frames[i], frames[i + 3], frames[i + 6], i)
        for i in range(max(frames.shape[0] - 6, 0))
    ]


class _BestTracker:
    """Keeps the lowest-validation snapshot and counts stagnant epochs."""

    def __init__(self, net: InterpolationNetwork, patience: int):
        self.best_val = float("inf")
        self.best_state = _snapshot(net)
        self.patience = patience
        self.stagnant = 0
        self.plateau_decays = 0

    def update(self, net: InterpolationNetwork, val_loss: float):
        if val_loss < self.best_val:
            self.best_val = val_loss
            self.best_state = _snapshot(net)
            self.stagnant = 0
        else:
            self.stagnant += 1
            if self.stagnant >= self.patience:
                self.plateau_decays += 1
                self.stagnant = 0


def pretrain(net: InterpolationNetwork, data: list[FrameSequence], cfg: TrainConfig,
             on_epoch=None) -> Checkpoint:
    """Unsupervised training on the dual cycle-consistency objective.

    Returns a checkpoint of the epoch with the lowest validation loss and
    leaves ``net`` holding those weights. ``on_epoch`` receives one dict per
    epoch: epoch, lr, cc1, cc2, combined, val_combined.
    """
    cfg.validate()
    if cfg.phase != "pretrain":
        raise ValueError(f"pretrain requires phase='pretrain', got {cfg.phase!r}")
    sequences = _prepare(data, cfg)
    triplets = [t for seq in sequences for t in make_triplets(seq)]
    if not triplets:
        raise ValueError("no training triplets after subsampling; sequences too short")
    rng = np.random.default_rng(cfg.seed)
    train_set, val_set = _split(triplets, rng)

    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr0,
                           betas=(cfg.adam_beta1, cfg.adam_beta2),
                           weight_decay=cfg.weight_decay)
    tracker = _BestTracker(net, cfg.plateau_patience)
    w = cfg.loss_weights
    step = 0

    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(train_set))
        sums = {"cc1": 0.0, "cc2": 0.0, "combined": 0.0}
        seen = 0
        epoch_lr = lr_schedule(step, cfg, tracker.plateau_decays)
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            samples = [augment_reverse(train_set[i], rng.random(), REVERSAL_P)
                       for i in chunk]
            i0, i1, i2 = _triplet_batch(samples)
            lr = lr_schedule(step, cfg, tracker.plateau_decays)
            for group in opt.param_groups:
                group["lr"] = lr
            sp = dual_cycle_forward(net.predict_pair, i0, i1, i2)
            l1 = cc1_loss(sp, i1)
            l2 = cc2_loss(sp)
            loss = w.lambda_cc1 * l1 + w.lambda_cc2 * l2
            _check_finite(loss, step, lr, {"cc1": l1.item(), "cc2": l2.item()})
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n = len(chunk)
            sums["cc1"] += l1.item() * n
            sums["cc2"] += l2.item() * n
            sums["combined"] += loss.item() * n
            seen += n
        val_combined = _validate_pretrain(net, val_set, cfg)
        tracker.update(net, val_combined)
        if on_epoch is not None:
            on_epoch({
                "epoch": epoch,
                "lr": epoch_lr,
                "cc1": sums["cc1"] / seen,
                "cc2": sums["cc2"] / seen,
                "combined": sums["combined"] / seen,
                "val_combined": val_combined,
            })

    net.load_state_dict(tracker.best_state)
    return Checkpoint(tracker.best_state, net.config, cfg, step)


def _validate_pretrain(net, val_set, cfg: TrainConfig) -> float:
    net.eval()
    w = cfg.loss_weights
    total, seen = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(val_set), cfg.batch_size):
            samples = val_set[lo:lo + cfg.batch_size]
            i0, i1, i2 = _triplet_batch(samples)
            sp = dual_cycle_forward(net.predict_pair, i0, i1, i2)
            loss = w.lambda_cc1 * cc1_loss(sp, i1) + w.lambda_cc2 * cc2_loss(sp)
            total += loss.item() * len(samples)
            seen += len(samples)
    return total / max(seen, 1)


def finetune(net: InterpolationNetwork, start: Checkpoint | None,
             data: list[FrameSequence], cfg: TrainConfig, on_epoch=None) -> Checkpoint:
    """Supervised fine-tuning regularized by the cycle terms.

    ``start`` may be None for training from the current (e.g. random)
    initialization. The cycle terms run on coarse triplets drawn from the
    stride-3 input grid of the same normalized sequences.
    """
    cfg.validate()
    if cfg.phase != "finetune":
        raise ValueError(f"finetune requires phase='finetune', got {cfg.phase!r}")
    if start is not None:
        mismatched = [f.name for f in fields(NetConfig)
                      if getattr(start.net_config, f.name) != getattr(net.config, f.name)]
        if mismatched:
            raise CheckpointError(
                "checkpoint architecture mismatch in fields: " + ", ".join(mismatched)
            )
        net.load_state_dict(start.parameters)

    sequences = _prepare(data, cfg)
    quads = [q for seq in sequences for q in make_quadruples(seq)]
    if not quads:
        raise ValueError("no training quadruples after subsampling; sequences too short")
    coarse = [t for seq in sequences for t in _coarse_triplets(seq)]
    rng = np.random.default_rng(cfg.seed)
    train_q, val_q = _split(quads, rng)
    train_t, val_t = _split(coarse, rng) if coarse else ([], [])

    opt = torch.optim.Adam(net.parameters(), lr=cfg.lr0,
                           betas=(cfg.adam_beta1, cfg.adam_beta2),
                           weight_decay=cfg.weight_decay)
    tracker = _BestTracker(net, cfg.plateau_patience)
    w = cfg.loss_weights
    step = 0

    for epoch in range(cfg.epochs):
        net.train()
        order = rng.permutation(len(train_q))
        sums = {"recon": 0.0, "cc1": 0.0, "cc2": 0.0, "loss": 0.0}
        seen = 0
        epoch_lr = lr_schedule(step, cfg, tracker.plateau_decays)
        for lo in range(0, len(order), cfg.batch_size):
            chunk = order[lo:lo + cfg.batch_size]
            q_samples = [augment_reverse(train_q[i], rng.random(), REVERSAL_P)
                         for i in chunk]
            in_a, in_b, gt_1, gt_2 = _quadruple_batch(q_samples)
            lr = lr_schedule(step, cfg, tracker.plateau_decays)
            for group in opt.param_groups:
                group["lr"] = lr
            pred = net.predict_pair(in_a, in_b)
            recon = 0.5 * (mae(pred[0], gt_1) + mae(pred[1], gt_2))
            if train_t:
                picks = rng.integers(0, len(train_t), size=len(chunk))
                t_samples = [augment_reverse(train_t[i], rng.random(), REVERSAL_P)
                             for i in picks]
                t0, t1, t2 = _triplet_batch(t_samples)
                sp = dual_cycle_forward(net.predict_pair, t0, t1, t2)
                l1 = cc1_loss(sp, t1)
                l2 = cc2_loss(sp)
            else:
                l1 = torch.zeros(())
                l2 = torch.zeros(())
            loss = recon + w.gamma_cc1 * l1 + w.gamma_cc2 * l2
            _check_finite(loss, step, lr,
                          {"recon": recon.item(), "cc1": l1.item(), "cc2": l2.item()})
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            n = len(chunk)
            for key, value in (("recon", recon), ("cc1", l1), ("cc2", l2), ("loss", loss)):
                sums[key] += value.item() * n
            seen += n
        val_loss = _validate_finetune(net, val_q, val_t, cfg)
        tracker.update(net, val_loss)
        if on_epoch is not None:
            on_epoch({
                "epoch": epoch,
                "lr": epoch_lr,
                "recon": sums["recon"] / seen,
                "cc1": sums["cc1"] / seen,
                "cc2": sums["cc2"] / seen,
                "loss": sums["loss"] / seen,
                "val_loss": val_loss,
            })

    net.load_state_dict(tracker.best_state)
    return Checkpoint(tracker.best_state, net.config, cfg, step)


def _validate_finetune(net, val_q, val_t, cfg: TrainConfig) -> float:
    net.eval()
    w = cfg.loss_weights
    with torch.no_grad():
        recon_total, seen = 0.0, 0
        for lo in range(0, len(val_q), cfg.batch_size):
            samples = val_q[lo:lo + cfg.batch_size]
            in_a, in_b, gt_1, gt_2 = _quadruple_batch(samples)
            pred = net.predict_pair(in_a, in_b)
            recon = 0.5 * (mae(pred[0], gt_1) + mae(pred[1], gt_2))
            recon_total += recon.item() * len(samples)
            seen += len(samples)
        total = recon_total / max(seen, 1)
        if val_t:
            cyc_total, cyc_seen = 0.0, 0
            for lo in range(0, len(val_t), cfg.batch_size):
                samples = val_t[lo:lo + cfg.batch_size]
                t0, t1, t2 = _triplet_batch(samples)
                sp = dual_cycle_forward(net.predict_pair, t0, t1, t2)
                cyc = w.gamma_cc1 * cc1_loss(sp, t1) + w.gamma_cc2 * cc2_loss(sp)
                cyc_total += cyc.item() * len(samples)
                cyc_seen += len(samples)
            total += cyc_total / max(cyc_seen, 1)
    return total
