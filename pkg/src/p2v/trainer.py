"""The optimization loop, ablation modes, checkpointing, and logging.

Modes: `points2vec` trains the combined objective over context
quadruples; `autoencoder_only` skips quadruple sampling entirely and
trains reconstruction on uniform instance batches; `margin_only`
backpropagates the margin term alone, leaving the decoder untouched.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import context_sampler, losses
from .errors import InvalidInputError, NumericalError
from .model import ArchConfig, embed_cloud, init_params, save_checkpoint

log = logging.getLogger(__name__)

MODES = ("points2vec", "autoencoder_only", "margin_only")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 20
    epochs: int = 4000
    alpha: float = 1.0
    margin_weight: float = 10.0  # margin-to-reconstruction ratio
    reconstruction_weight: float = 1.0
    code_size: int = 256
    decoder_points: int = 1024
    mode: str = "points2vec"
    rng_seed: int = 0
    k_close: int = 10
    k_similar: int = 10
    grid_steps: int = 36
    refine_tol: float = 1e-3
    reconstruct_all: bool = False
    grad_clip: float = None  # global-norm clip, disabled unless set
    checkpoint_every: int = 100
    workers: int = None  # parallelism for the similarity-cache build
    dtype: str = "float32"
    arch: ArchConfig = field(default_factory=ArchConfig)

    def validate(self):
        if self.learning_rate <= 0:
            raise InvalidInputError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise InvalidInputError("batch_size and epochs must be at least 1")
        if self.alpha < 0 or self.margin_weight < 0:
            raise InvalidInputError("alpha and margin_weight must be nonnegative")
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.dtype not in ("float32", "float64"):
            raise InvalidInputError(f"dtype must be float32 or float64, got {self.dtype!r}")

    def to_dict(self):
        out = {k: v for k, v in self.__dict__.items() if k != "arch"}
        out["arch"] = self.arch.to_dict()
        return out

    @classmethod
    def from_dict(cls, data):
        kwargs = dict(data)
        if "lambda" in kwargs:  # config-file alias for the ratio
            kwargs["margin_weight"] = kwargs.pop("lambda")
        if "arch" in kwargs and not isinstance(kwargs["arch"], ArchConfig):
            kwargs["arch"] = ArchConfig.from_dict(kwargs["arch"])
        unknown = set(kwargs) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInputError(f"unknown config fields: {sorted(unknown)}")
        cfg = cls(**kwargs)
        cfg.validate()
        return cfg


def _quadruple_batch(cache, rng, batch_size, clouds):
    rows = [context_sampler.sample_quadruple(cache, rng) for _ in range(batch_size)]
    gather = lambda picks: clouds[torch.as_tensor(picks, dtype=torch.long)]
    return (
        gather([q.anchor for q in rows]),
        gather([q.close for q in rows]),
        gather([q.similar for q in rows]),
        gather([q.negative for q in rows]),
    )


def train(dataset, config, run_dir, cache_dir=None):
    """Run the full loop; returns (model, list of per-epoch log records).

    Writes the effective config, an append-only JSONL training log, and
    checkpoints every `checkpoint_every` epochs plus `final.p2vk` under
    `run_dir`. Deterministic end-to-end for a fixed seed and config. A
    non-finite loss aborts the run; checkpoints written so far remain.
    """
    config.validate()
    train_instances = dataset.subset("train")
    if len(train_instances) < 4:
        raise InvalidInputError(f"need at least 4 training instances, got {len(train_instances)}")

    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(
        json.dumps(config.to_dict(), sort_keys=True, indent=2) + "\n"
    )

    cache = None
    if config.mode != "autoencoder_only":
        cache = context_sampler.ensure_cache(
            train_instances,
            cache_dir or run_dir / "cache",
            k_close=config.k_close,
            k_similar=config.k_similar,
            grid_steps=config.grid_steps,
            refine_tol=config.refine_tol,
            workers=config.workers,
        )

    torch.manual_seed(config.rng_seed)
    rng = np.random.default_rng(config.rng_seed)
    dtype = torch.float64 if config.dtype == "float64" else torch.float32
    model = init_params(config.code_size, config.decoder_points, config.rng_seed,
                        arch=config.arch, dtype=dtype)
    model.train()

    clouds = torch.from_numpy(np.stack([r.cloud for r in train_instances])).to(dtype)
    n_train = len(train_instances)
    steps_per_epoch = math.ceil(n_train / config.batch_size)

    params = model.encoder.parameters() if config.mode == "margin_only" else model.parameters()
    optimizer = torch.optim.Adam(params, lr=config.learning_rate,
                                 betas=(0.9, 0.999), eps=1e-8)

    def checkpoint(name, epoch):
        save_checkpoint(run_dir / "checkpoints" / name, model, config.to_dict(),
                        config.rng_seed, epoch)

    records = []
    log_path = run_dir / "train_log.jsonl"
    with open(log_path, "w") as log_file:
        for epoch in range(1, config.epochs + 1):
            t0 = time.monotonic()
            margin_sum = rec_sum = total_sum = 0.0
            for _ in range(steps_per_epoch):
                if config.mode == "autoencoder_only":
                    idx = rng.integers(0, n_train, size=config.batch_size)
                    batch = clouds[torch.from_numpy(idx)]
                    e = model.encode(batch)
                    rec = losses.chamfer_loss(batch, model.decode(e)).mean()
                    total = config.reconstruction_weight * rec
                    margin_val, rec_val = 0.0, float(rec.detach())
                elif config.mode == "margin_only":
                    anchor, close, similar, negative = _quadruple_batch(
                        cache, rng, config.batch_size, clouds)
                    m, _, _, _ = losses.margin_loss(
                        model.encode(anchor), model.encode(close),
                        model.encode(similar), model.encode(negative), config.alpha)
                    total = config.margin_weight * m.mean()
                    margin_val, rec_val = float(m.detach().mean()), 0.0
                else:
                    anchor, close, similar, negative = _quadruple_batch(
                        cache, rng, config.batch_size, clouds)
                    total, report = losses.combined_step_losses(
                        model, anchor, close, similar, negative,
                        config.alpha, config.margin_weight,
                        reconstruction_weight=config.reconstruction_weight,
                        reconstruct_all=config.reconstruct_all)
                    margin_val, rec_val = report.margin_loss, report.reconstruction_loss

                if not math.isfinite(float(total.detach())):
                    raise NumericalError("non-finite training loss; aborting", layer="total")
                optimizer.zero_grad()
                total.backward()
                if config.grad_clip is not None:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), config.grad_clip)
                optimizer.step()
                margin_sum += margin_val
                rec_sum += rec_val
                total_sum += float(total.detach())

            record = {
                "epoch": epoch,
                "margin_loss": margin_sum / steps_per_epoch,
                "reconstruction_loss": rec_sum / steps_per_epoch,
                "total": total_sum / steps_per_epoch,
                "wall_time": time.monotonic() - t0,
            }
            records.append(record)
            log_file.write(json.dumps(record, sort_keys=True) + "\n")
            log_file.flush()
            if epoch % config.checkpoint_every == 0:
                checkpoint(f"epoch_{epoch:06d}.p2vk", epoch)

    checkpoint("final.p2vk", config.epochs)
    return model, records


def embed_dataset(model, dataset, split_filter=None):
    """Eval-mode embeddings for every instance of a split, in dataset order."""
    return [(rec, embed_cloud(model, rec.cloud)) for rec in dataset.subset(split_filter)]
