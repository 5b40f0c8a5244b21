"""Training loop, checkpoint selection and ablation sweeps."""

from __future__ import annotations

import csv
import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .autodiff import Adam, Tensor, bce_loss
from .checkpoint import Checkpoint, read_checkpoint, segnet_checkpoint, write_checkpoint
from .config import RunConfig
from .crossvolume import PoolClass, PoolDescriptor, SiamHead, VcvrlConfig, VcvrlWarning, vcvrl_step
from .evaluate import evaluate_volumes, run_eval
from .metrics import aggregate, write_jsonl
from .segnet import SegNet, segnet_init
from .synthdata import VolumeSample, extract_patch, make_dataset, read_dataset

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainState:
    k: int = 0
    total_iterations: int = 1
    epoch: int = 0
    best_f1: float = -1.0
    best_epoch: int = 0
    descriptors: Dict[PoolClass, PoolDescriptor] = field(default_factory=dict)
    history: List[dict] = field(default_factory=list)
    losses: List[dict] = field(default_factory=list)

    def to_meta(self) -> dict:
        return {
            "k": self.k,
            "total_iterations": self.total_iterations,
            "epoch": self.epoch,
            "best_f1": self.best_f1,
            "best_epoch": self.best_epoch,
            "descriptors": {c.value: d.to_dict() for c, d in sorted(self.descriptors.items())},
            "history": self.history,
            "losses": self.losses,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "TrainState":
        return cls(
            k=meta["k"],
            total_iterations=meta["total_iterations"],
            epoch=meta["epoch"],
            best_f1=meta["best_f1"],
            best_epoch=meta["best_epoch"],
            descriptors={PoolClass(c): PoolDescriptor.from_dict(d) for c, d in meta["descriptors"].items()},
            history=list(meta["history"]),
            losses=list(meta["losses"]),
        )


@dataclass
class TrainResult:
    config: RunConfig
    state: TrainState
    net: SegNet
    head: Optional[SiamHead]
    best: Checkpoint

    @property
    def best_f1(self) -> float:
        return self.state.best_f1


def load_data(config: RunConfig) -> Dict[str, List[VolumeSample]]:
    if config.data_dir and Path(config.data_dir).exists():
        return read_dataset(config.data_dir)
    return make_dataset(config.generator, config.split_counts)


def _seed(config: RunConfig, *keys: int) -> np.random.Generator:
    return np.random.default_rng([config.seed, *keys])


def sample_batch(config: RunConfig, train: Sequence[VolumeSample], k: int):
    """Batch for iteration ``k``; a pure function of the run seed and ``k``."""
    rng = _seed(config, k, 0)
    picks = rng.integers(0, len(train), size=config.batch_size)
    patches = [extract_patch(train[i], config.augmentation, rng) for i in picks]
    x = np.stack([p.volume for p in patches])[:, None].astype(np.float32)
    y = np.stack([p.label for p in patches])[:, None].astype(np.float32)
    return x, y


def _effective_vcvrl(config: RunConfig) -> Optional[VcvrlConfig]:
    if config.vcvrl is None:
        return None
    from dataclasses import replace

    return replace(config.vcvrl, total_iterations=config.total_iterations)


def _training_checkpoint(config: RunConfig, net: SegNet, head, opt: Adam, state: TrainState) -> Checkpoint:
    extra = {}
    if head is not None:
        extra["head"] = [p.data for p in head.parameters()]
    extra["adam_m"] = opt.state.m
    extra["adam_v"] = opt.state.v
    meta = {"run": config.to_dict(), "adam_step": opt.state.step, "state": state.to_meta()}
    return segnet_checkpoint(net, meta, extra)


def _best_checkpoint(config: RunConfig, net: SegNet, state: TrainState) -> Checkpoint:
    meta = {"run": config.to_dict(), "epoch": state.epoch, "val_f1": state.best_f1}
    return segnet_checkpoint(net, meta)


def run_train(
    config: RunConfig,
    out_dir=None,
    data: Optional[Dict[str, List[VolumeSample]]] = None,
    resume=None,
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """Train a backbone, optionally with the cross-volume similarity objective.

    Writes ``best.vckp`` (best validation F1), ``last.vckp`` (resumable),
    ``metrics.jsonl`` (one record per epoch per split) and ``losses.jsonl``
    (per-iteration losses and fallback warnings) when ``out_dir`` is given.
    """
    data = data if data is not None else load_data(config)
    train, val = data["train"], data["val"]
    if not train or not val:
        raise ValueError("training needs non-empty train and val splits")
    vcfg = _effective_vcvrl(config)
    net = segnet_init(config.segnet, config.seed)
    head = SiamHead.create(config.segnet.latent_dim, vcfg, config.seed + 1) if vcfg else None
    params = net.parameters() + (head.parameters() if head else [])
    opt = Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    state = TrainState(total_iterations=config.total_iterations)
    best = _best_checkpoint(config, net, state)

    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else read_checkpoint(resume)
        saved = [*ckpt.sections["backbone"], *ckpt.sections.get("head", [])]
        for p, a in zip(params, saved):
            p.data[...] = a
        opt.state.m = [a.copy() for a in ckpt.sections["adam_m"]]
        opt.state.v = [a.copy() for a in ckpt.sections["adam_v"]]
        opt.state.step = ckpt.meta["adam_step"]
        state = TrainState.from_meta(ckpt.meta["state"])
        if out_dir is not None and (Path(out_dir) / "best.vckp").exists():
            best = read_checkpoint(Path(out_dir) / "best.vckp")
        log.info("resumed at epoch %d (iteration %d)", state.epoch, state.k)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    last_epoch = config.epochs if stop_after_epoch is None else min(stop_after_epoch, config.epochs)
    for epoch in range(state.epoch + 1, last_epoch + 1):
        epoch_ce, epoch_sim = [], []
        for _ in range(config.iters_per_epoch):
            state.k += 1
            k = state.k
            x, y = sample_batch(config, train, k)
            probs, bottleneck = net.forward(Tensor(x))
            l_ce = bce_loss(probs, y)
            loss = l_ce
            rec = {"k": k, "l_ce": float(l_ce.data)}
            if vcfg is not None:
                with warnings.catch_warnings(record=True) as caught:
                    warnings.simplefilter("always", VcvrlWarning)
                    step = vcvrl_step(bottleneck, y, probs, head, vcfg, state.descriptors, k, _seed(config, k, 1))
                state.descriptors = step.descriptors
                loss = l_ce + step.loss
                rec["l_sim"] = float(step.loss.data)
                if caught:
                    rec["warnings"] = [str(w.message) for w in caught]
                    for w in caught:
                        log.info("iteration %d: %s", k, w.message)
                epoch_sim.append(rec["l_sim"])
            if not math.isfinite(float(loss.data)):
                diag = {"k": k, "batch_seed": [config.seed, k, 0], **rec}
                if out_dir is not None:
                    (out_dir / "nonfinite.json").write_text(json.dumps(diag, indent=1))
                raise NonFiniteLossError(f"non-finite loss at iteration {k}: {diag}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_ce.append(rec["l_ce"])
            state.losses.append(rec)

        state.epoch = epoch
        train_rec = {"split": "train", "epoch": epoch, "k": state.k, "l_ce": float(np.mean(epoch_ce))}
        if vcfg is not None:
            train_rec["l_sim"] = float(np.mean(epoch_sim))
        val_scores = aggregate(evaluate_volumes(net, val, prefix="val"))
        val_rec = {"split": "val", "epoch": epoch, **val_scores}
        state.history.extend([train_rec, val_rec])
        log.info("epoch %d  l_ce %.4f  val f1 %.4f", epoch, train_rec["l_ce"], val_scores["f1"])
        if val_scores["f1"] > state.best_f1:
            state.best_f1 = val_scores["f1"]
            state.best_epoch = epoch
            best = _best_checkpoint(config, net, state)
            if out_dir is not None:
                write_checkpoint(out_dir / "best.vckp", best)
        if out_dir is not None:
            write_checkpoint(out_dir / "last.vckp", _training_checkpoint(config, net, head, opt, state))
            write_jsonl(out_dir / "metrics.jsonl", state.history)
            write_jsonl(out_dir / "losses.jsonl", state.losses)
    return TrainResult(config, state, net, head, best)


# -- sweeps ----------------------------------------------------------------------

SWEEP_AXES = ("anchors", "strategy", "pair_mode", "momentum")


def _parse_value(axis: str, value):
    if isinstance(value, str) and value.lower() in ("off", "none", "baseline"):
        return None
    if axis == "anchors":
        return int(value)
    if axis == "momentum":
        if isinstance(value, str):
            return value.lower() in ("1", "true", "on", "yes")
        return bool(value)
    return value


def sweep_config(config: RunConfig, axis: str, value, seed: int) -> RunConfig:
    """Config for one sweep cell; ``None`` disables the similarity objective."""
    from dataclasses import replace

    if axis not in SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {SWEEP_AXES}")
    base = config.vcvrl or VcvrlConfig(anchors=64)
    if value is None:
        vcvrl = None
    else:
        vcvrl = replace(base, **{axis: value})
    return config.replace(seed=seed, vcvrl=vcvrl)


def run_sweep(config: RunConfig, axis: str, values: Sequence, seeds: Optional[Sequence[int]] = None, out_csv=None) -> List[dict]:
    """Train and test one model per (value, seed); summarise mean and spread of test F1 per value."""
    if not values:
        raise ValueError("sweep needs at least one value")
    seeds = list(seeds or config.sweep_seeds or [config.seed])
    data = load_data(config)
    rows = []
    for raw in values:
        value = _parse_value(axis, raw)
        f1s = []
        for s in seeds:
            cfg = sweep_config(config, axis, value, s)
            result = run_train(cfg, data=data)
            _, agg = run_eval(result.best, data["test"])
            f1s.append(agg["f1"])
        mu, sigma = float(np.mean(f1s)), float(np.std(f1s))
        row = {
            "axis": axis,
            "value": "off" if value is None else str(raw),
            "log_n": math.log(value) if axis == "anchors" and value is not None else "",
            "f1_mean": mu,
            "f1_std": sigma,
            "f1_lower": mu - sigma / 3,
            "f1_upper": mu + sigma / 3,
            "seeds": " ".join(str(s) for s in seeds),
            "f1_per_seed": " ".join(repr(f) for f in f1s),
        }
        log.info("sweep %s=%s  f1 %.4f +- %.4f", axis, row["value"], mu, sigma)
        rows.append(row)
    if out_csv is not None:
        write_sweep_csv(out_csv, rows)
    return rows


def write_sweep_csv(path, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
