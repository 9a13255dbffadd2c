"""A three-layer quantized toy network with synthetic, calibrated parameters.

conv1  W8A8 on an 8-bit 12x12x3 image, batch-norm, 2-bit quantizer, 2x2 pool
conv2  bipolar W1A2, alpha scaling, batch-norm, 2-bit quantizer, 2x2 pool
fc3    W8A2 producing 10 integer scores

Batch-norm statistics come from running the float graph on random
calibration frames, so every quantizer sees activations that spread over
all of its levels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .lowering import ConvGeometry
from .modelfile import ModelSpec, dump
from .streamline import (
    Linear,
    MaxPool,
    QuantMatrixOp,
    Quantize,
    Quantizer,
    alpha_scaling,
    batchnorm,
    evaluate,
)

# 2-bit half-wave quantizer: step 0.538, lowest threshold at zero
HWGQ_STEP = 0.538
HWGQ_LEVELS = (0.0, 0.538, 1.076, 1.614)
HWGQ_THRESHOLDS = (0.0, 0.807, 1.345)


@dataclass
class ToyConfig:
    height: int = 12
    width: int = 12
    in_c: int = 3
    c1: int = 16
    c2: int = 32
    classes: int = 10
    calib_frames: int = 8
    seed: int = 7


def hwgq_quantizer() -> Quantizer:
    return Quantizer(np.array(HWGQ_LEVELS), np.array(HWGQ_THRESHOLDS))


def _calibrated_bn(y: np.ndarray, rng) -> Linear:
    flat = y.reshape(-1, y.shape[-1])
    mu = flat.mean(axis=0)
    sigma = flat.std(axis=0) + 1e-3
    gamma = rng.uniform(0.6, 1.2, len(mu))
    beta = rng.uniform(0.2, 0.6, len(mu))
    return batchnorm(mu, sigma, gamma, beta)


def random_input(cfg: ToyConfig, rng) -> np.ndarray:
    return rng.integers(0, 256, (cfg.height, cfg.width, cfg.in_c), dtype=np.int64)


def make_toy_network(cfg: ToyConfig | None = None) -> ModelSpec:
    cfg = cfg or ToyConfig()
    rng = np.random.default_rng(cfg.seed)
    calib = [random_input(cfg, rng) for _ in range(cfg.calib_frames)]

    g1 = ConvGeometry(cfg.height, cfg.width, cfg.in_c, 3, 3, stride=1, pad=1, out_c=cfg.c1)
    conv1 = QuantMatrixOp(rng.integers(-128, 128, (cfg.c1, 3, 3, cfg.in_c)), 8, True,
                          geometry=g1, name="conv1")
    y = np.stack([evaluate([conv1], x).astype(np.float64) for x in calib])
    bn1 = Linear(_calibrated_bn(y, rng), "bn1")
    stage1 = [conv1, bn1, Quantize(hwgq_quantizer(), "q1"), MaxPool(2, 2, "pool1")]
    h1 = [evaluate(stage1, x) for x in calib]

    g2 = ConvGeometry(g1.out_h // 2, g1.out_w // 2, cfg.c1, 3, 3, stride=1, pad=1, out_c=cfg.c2)
    pm1 = rng.choice([-1, 1], (cfg.c2, 3, 3, cfg.c1))
    conv2 = QuantMatrixOp.from_bipolar(pm1, geometry=g2, name="conv2")
    alpha = Linear(alpha_scaling(rng.uniform(0.05, 0.2, cfg.c2)), "alpha2")
    y = np.stack([evaluate([conv2, alpha], x) for x in h1])
    bn2 = Linear(_calibrated_bn(y, rng), "bn2")
    stage2 = [conv2, alpha, bn2, Quantize(hwgq_quantizer(), "q2"), MaxPool(2, 2, "pool2")]

    depth = (g2.out_h // 2) * (g2.out_w // 2) * cfg.c2
    fc3 = QuantMatrixOp(rng.integers(-128, 128, (cfg.classes, depth)), 8, True, name="fc3")
    ops = stage1 + stage2 + [fc3]
    return ModelSpec((cfg.height, cfg.width, cfg.in_c), 8, False, ops)


def write_toy_model(directory, cfg: ToyConfig | None = None, wordsize: int = 64) -> Path:
    """Write ``toy.model`` plus its weight containers; returns the model path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / "toy.model"
    dump(make_toy_network(cfg), path, wordsize)
    return path
