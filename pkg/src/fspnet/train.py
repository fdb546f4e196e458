"""Adam training loop, inference and evaluation."""

from __future__ import annotations

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .checkpoint import Checkpoint, CheckpointError
from .config import ModelConfig
from .data import Dataset, quantize, write_gray
from .metrics import MetricReport, evaluate_dataset
from .model import FSPNet
from .tensor import Tensor, no_grad

logger = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class DivergenceError(RuntimeError):
    """Training loss became NaN or infinite."""


class Adam:
    def __init__(self, named_params, betas=ADAM_BETAS, eps=ADAM_EPS):
        self.params = dict(named_params)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def build_model(config: ModelConfig) -> FSPNet:
    config.validate()
    return FSPNet(
        config.encoder,
        n_vertices=config.n_vertices,
        decoder_width=config.decoder_width,
        variant=config.variant,
        seed=config.seed,
    )


def model_from_checkpoint(ckpt: Checkpoint) -> FSPNet:
    model = build_model(ckpt.config)
    try:
        model.load_state_dict(ckpt.state)
    except ValueError as exc:
        raise CheckpointError(str(exc)) from exc
    return model


def _training_rng(seed: int) -> np.random.Generator:
    # separate stream from parameter initialization
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, 1])))


def make_checkpoint(config, model, opt, epoch, step, rng) -> Checkpoint:
    return Checkpoint(
        config=config,
        state={k: v.copy() for k, v in model.state_dict().items()},
        adam_m={k: v.copy() for k, v in opt.m.items()},
        adam_v={k: v.copy() for k, v in opt.v.items()},
        adam_step=opt.t,
        epoch=epoch,
        step=step,
        rng_state=rng.bit_generator.state,
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    losses: list[float] = field(default_factory=list)
    model: Optional[FSPNet] = None


def train(
    config: ModelConfig,
    dataset: Dataset,
    out_dir: Optional[str] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """Minimize the deep-supervision loss with Adam and a step-decay schedule."""
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    expected = (config.encoder.image_c, config.encoder.image_h, config.encoder.image_w)
    if dataset.images.shape[1:] != expected:
        raise ValueError(f"dataset images {dataset.images.shape[1:]} do not match config {expected}")
    model = build_model(config)
    model.train()
    opt = Adam(model.named_parameters())
    rng = _training_rng(config.seed)
    losses: list[float] = []
    n = len(dataset)
    step = 0
    epoch = 0
    done = config.max_steps > 0 and step >= config.max_steps
    while epoch < config.epochs and not done:
        lr = config.learning_rate_at(epoch)
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            images = dataset.images[idx]
            masks = dataset.masks[idx]
            if config.augment:
                flip = rng.random(len(idx)) < 0.5
                images = np.where(flip[:, None, None, None], images[..., ::-1], images)
                masks = np.where(flip[:, None, None], masks[..., ::-1], masks)
            loss = model.loss(Tensor(images), masks)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(f"loss became {value} at step {step}")
            model.zero_grad()
            loss.backward()
            opt.step(lr)
            losses.append(value)
            step += 1
            if on_step is not None:
                on_step(step, value)
            if config.max_steps and step >= config.max_steps:
                done = True
                break
        epoch += 1
        if out_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
            make_checkpoint(config, model, opt, epoch, step, rng).save(
                os.path.join(out_dir, f"epoch_{epoch:04d}.ckpt")
            )
    ckpt = make_checkpoint(config, model, opt, epoch, step, rng)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        ckpt.save(os.path.join(out_dir, "final.ckpt"))
        with open(os.path.join(out_dir, "losses.txt"), "w") as fh:
            fh.writelines(f"{v!r}\n" for v in losses)
    return TrainResult(ckpt, losses, model)


def predict(
    model_or_ckpt,
    images: np.ndarray,
    batch_size: int = 8,
    laterals: bool = False,
):
    """Deterministic inference. Returns (N, H, W) P3 maps, or (N, 4, H, W) with ``laterals``."""
    model = model_or_ckpt if isinstance(model_or_ckpt, FSPNet) else model_from_checkpoint(model_or_ckpt)
    cfg = model.config
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[1:] != (cfg.image_c, cfg.image_h, cfg.image_w):
        raise ValueError(
            f"images {images.shape[1:]} do not match the checkpoint input "
            f"{(cfg.image_c, cfg.image_h, cfg.image_w)}"
        )
    was_training = model.training
    model.eval()
    outs = []
    try:
        with no_grad():
            for start in range(0, len(images), batch_size):
                preds = model(Tensor(images[start : start + batch_size]))
                stacked = np.concatenate([p.data for p in preds], axis=1)  # B, k, H, W
                outs.append(stacked)
    finally:
        model.train(was_training)
    maps = np.concatenate(outs, axis=0)
    return maps if laterals else maps[:, -1]


def export_predictions(maps: np.ndarray, names, out_dir: str, laterals: Optional[np.ndarray] = None) -> None:
    os.makedirs(out_dir, exist_ok=True)
    for i, name in enumerate(names):
        write_gray(os.path.join(out_dir, f"{name}.png"), maps[i])
        if laterals is not None:
            for k in range(laterals.shape[1]):
                write_gray(os.path.join(out_dir, f"{name}_P{k}.png"), laterals[i, k])


def evaluate(model_or_ckpt, dataset: Dataset, maps: Optional[np.ndarray] = None) -> MetricReport:
    """Predict (unless ``maps`` are given) and score the 8-bit quantized P3 maps."""
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    if maps is None:
        maps = predict(model_or_ckpt, dataset.images)
    scores = quantize(maps).astype(np.float64) / 255.0
    return evaluate_dataset(list(zip(scores, dataset.masks)), names=dataset.names)
