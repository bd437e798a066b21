"""SGD training loop with warmup + step decay, checkpointing and seeded replay."""

from __future__ import annotations

import base64
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from facedet.anchors import AnchorPyramid, TargetSet, build_anchor_pyramid, build_targets
from facedet.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from facedet.config import DetectorConfig, OptimConfig
from facedet.losses import LossReport, multitask_loss
from facedet.network import Detector
from facedet.sampling import Sample, augment

log = logging.getLogger(__name__)


class TrainingDiverged(FloatingPointError):
    pass


def scaled_schedule(cfg: OptimConfig) -> tuple[float, list[float], int]:
    """Warmup length, decay boundaries and total length after desk-scale shrinking."""
    total = int(math.ceil(cfg.total_iters / cfg.scale))
    return cfg.warmup_iters / cfg.scale, [d / cfg.scale for d in cfg.decay_iters], total


def lr_at(iteration: float, cfg: OptimConfig) -> float:
    warmup, decays, total = scaled_schedule(cfg)
    if not 0 <= iteration <= total:
        raise ValueError(f"iteration {iteration} outside [0, {total}]")
    if warmup > 0 and iteration <= warmup:
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * iteration / warmup
    k = sum(1 for d in decays if iteration >= d)
    return cfg.lr_peak * cfg.decay_factor ** k


def collate_targets(targets: Sequence[TargetSet]) -> dict:
    return {
        "labels": {s: torch.from_numpy(np.stack([t.labels[s] for t in targets])).long()
                   for s in ("first", "second")},
        "offsets": {s: torch.from_numpy(np.stack([t.offsets[s] for t in targets])).float()
                    for s in ("first", "second")},
        "seg": [torch.from_numpy(np.stack([t.seg[l] for t in targets]))
                for l in range(len(targets[0].seg))],
        "af_obj": torch.from_numpy(np.stack([t.af_obj for t in targets])),
        "af_dist": torch.from_numpy(np.stack([t.af_dist for t in targets])),
    }


def collate_images(samples: Sequence[Sample]) -> torch.Tensor:
    return torch.from_numpy(np.stack([s.image for s in samples]))


def make_optimizer(model: torch.nn.Module, cfg: OptimConfig) -> torch.optim.SGD:
    return torch.optim.SGD(model.parameters(), lr=cfg.lr_start, momentum=cfg.momentum,
                           weight_decay=cfg.weight_decay)


def set_deterministic(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True)


class Trainer:
    """Owns the model, optimizer and sampling RNG of one training run."""

    def __init__(self, cfg: DetectorConfig, dataset, out_dir: str | Path | None = None):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        self.cfg = cfg
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        set_deterministic(cfg.seed, cfg.deterministic)
        self.model = Detector(cfg)
        self.optimizer = make_optimizer(self.model, cfg.optim)
        self.rng = np.random.default_rng(cfg.seed)
        self.pyramid: AnchorPyramid = build_anchor_pyramid(cfg.sampler.crop_size, cfg)
        self.iteration = 0
        self.history: list[dict] = []
        _, _, self.total_iters = scaled_schedule(cfg.optim)

    # batches -------------------------------------------------------------

    def next_batch(self) -> tuple[list[Sample], list[TargetSet]]:
        n = len(self.dataset)
        bs = self.cfg.optim.batch_size
        idx = self.rng.choice(n, size=bs, replace=bs > n)
        samples = [augment(self.dataset[int(i)], self.cfg.sampler, self.rng) for i in idx]
        targets = [build_targets(s, self.pyramid, self.cfg.match, self.cfg) for s in samples]
        return samples, targets

    def step(self) -> dict:
        samples, targets = self.next_batch()
        images = self.model.normalize(collate_images(samples))
        batch_targets = collate_targets(targets)
        self.model.train()
        outputs = self.model(images)
        report: LossReport = multitask_loss(outputs, batch_targets, self.cfg.losses)
        if not torch.isfinite(report.total):
            self._dump_batch(samples, report)
            raise TrainingDiverged(f"non-finite loss at iteration {self.iteration}: {report.as_floats()}")
        lr = lr_at(min(self.iteration, self.total_iters), self.cfg.optim)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        report.total.backward()
        self.optimizer.step()
        record = {"iteration": self.iteration, "lr": lr, **report.as_floats()}
        self.iteration += 1
        self.history.append(record)
        return record

    def _dump_batch(self, samples: Sequence[Sample], report: LossReport) -> None:
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        path = self.out_dir / f"nan_batch_{self.iteration:07d}.npz"
        np.savez(path, images=np.stack([s.image for s in samples]),
                 **{f"boxes_{i}": s.boxes for i, s in enumerate(samples)})
        log.error("non-finite loss; batch dumped to %s (%s)", path, report.as_floats())

    def train(self, iterations: int | None = None, log_path: str | Path | None = None) -> list[dict]:
        end = self.total_iters if iterations is None else min(self.total_iters, self.iteration + iterations)
        cadence = self.cfg.optim.checkpoint_every
        log_fh = open(log_path, "a") if log_path is not None else None
        try:
            while self.iteration < end:
                record = self.step()
                if log_fh is not None:
                    log_fh.write(json.dumps(record) + "\n")
                    log_fh.flush()
                if self.iteration % max(1, self.cfg.optim.log_every * 50) == 0:
                    log.info("iter %d lr %.3g loss %.4f", record["iteration"], record["lr"], record["total"])
                if cadence and self.out_dir is not None and self.iteration % cadence == 0:
                    self.save(self.out_dir / f"ckpt_{self.iteration:07d}.npz")
        finally:
            if log_fh is not None:
                log_fh.close()
        return self.history

    # checkpoints ---------------------------------------------------------

    def optimizer_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name, p in self.model.named_parameters():
            buf = self.optimizer.state.get(p, {}).get("momentum_buffer")
            if buf is not None:
                out[name] = buf.detach().cpu().numpy().copy()
        return out

    def save(self, path: str | Path) -> Path:
        manifest = {
            "config_hash": self.cfg.content_hash(),
            "iteration": self.iteration,
            "numpy_rng": self.rng.bit_generator.state,
            "torch_rng": base64.b64encode(torch.get_rng_state().numpy().tobytes()).decode(),
        }
        return save_checkpoint(path, self.model.parameter_arrays(), manifest, self.optimizer_arrays())

    def restore(self, ckpt: Checkpoint | str | Path) -> None:
        if not isinstance(ckpt, Checkpoint):
            ckpt = load_checkpoint(ckpt, self.cfg.content_hash())
        elif ckpt.config_hash != self.cfg.content_hash():
            from facedet.checkpoint import CheckpointMismatchError
            raise CheckpointMismatchError("checkpoint config hash does not match")
        self.model.load_parameter_arrays(ckpt.params)
        self.optimizer = make_optimizer(self.model, self.cfg.optim)
        for name, p in self.model.named_parameters():
            if name in ckpt.optim:
                self.optimizer.state[p]["momentum_buffer"] = torch.from_numpy(ckpt.optim[name].copy())
        self.rng.bit_generator.state = ckpt.manifest["numpy_rng"]
        raw = np.frombuffer(base64.b64decode(ckpt.manifest["torch_rng"]), dtype=np.uint8).copy()
        torch.set_rng_state(torch.from_numpy(raw))
        self.iteration = ckpt.iteration


def load_model(cfg: DetectorConfig, path: str | Path) -> Detector:
    """Detector with parameters from ``path``; refuses a config-hash mismatch."""
    ckpt = load_checkpoint(path, cfg.content_hash())
    model = Detector(cfg, init=False)
    model.load_parameter_arrays(ckpt.params)
    model.eval()
    return model
