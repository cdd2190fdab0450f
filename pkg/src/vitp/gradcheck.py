"""Finite-difference check of the full model gradient in double precision."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .model import ModelConfig, PointBatch, PointPrompt, forward, init_params

TINY = dict(num_classes=4, image_size=(8, 8), patch_size=4, embed_dim=16, depth=2, heads=2)
# Below this gradient norm a tensor is compared in absolute terms. Key biases
# have an exactly zero gradient (softmax ignores a shared shift), and central
# differences there return pure roundoff of about 5e-11.
SCALE_FLOOR = 1e-5


@dataclass
class GradcheckResult:
    max_rel_error: float
    worst: str
    per_tensor: dict = field(default_factory=dict)
    seconds: float = 0.0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_dict(self) -> dict:
        return {"passed": self.passed, "max_rel_error": self.max_rel_error, "worst": self.worst,
                "tolerance": self.tolerance, "seconds": self.seconds, "per_tensor": self.per_tensor}


def tiny_problem(seed: int = 0, num_points: int = 3):
    """Tiny model, random image and labelled points, all float64."""
    cfg = ModelConfig(**TINY)
    params = init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    # random weights everywhere so no path is structurally zero
    for _, t in params.items():
        t.data = t.data + rng.normal(0.0, 0.1, t.dims)
    image = rng.uniform(-1.0, 1.0, (*cfg.image_size, cfg.channels))
    prompts = [PointPrompt(float(x), float(y), float(w), float(h), int(rng.integers(cfg.num_classes)))
               for x, y, w, h in rng.uniform(0.0, 0.5, (num_points, 4))]
    return cfg, params, image, PointBatch(prompts)


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|, SCALE_FLOOR)`` over the whole tensor (norm-wise)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), SCALE_FLOOR)
    return float(np.linalg.norm(analytic - numeric) / scale)


def run_gradcheck(seed: int = 0, h: float = 1e-5, tolerance: float = 1e-4, corrupt=None,
                  names=None) -> GradcheckResult:
    """Compare backward() against central differences for every parameter.

    ``corrupt(name, grad) -> grad`` is a test hook applied to analytic grads;
    ``names`` restricts the check to some tensors.
    """
    start = time.perf_counter()
    cfg, params, image, batch = tiny_problem(seed)
    labels = batch.labels()

    def loss_value() -> float:
        return T.cross_entropy(forward(image, batch, params, cfg), labels).item()

    params.zero_grad()
    T.cross_entropy(forward(image, batch, params, cfg), labels).backward()
    analytic = {n: t.grad.copy() for n, t in params.items()}
    per_tensor = {}
    for name, t in params.items():
        if names is not None and name not in names:
            continue
        grad = analytic[name] if corrupt is None else corrupt(name, analytic[name].copy())
        numeric = np.zeros_like(t.data)
        flat, out = t.data.reshape(-1), numeric.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss_value()
            flat[i] = keep - h
            down = loss_value()
            flat[i] = keep
            out[i] = (up - down) / (2 * h)
        per_tensor[name] = relative_error(grad, numeric)
    worst = max(per_tensor, key=per_tensor.get)
    return GradcheckResult(per_tensor[worst], worst, per_tensor, time.perf_counter() - start, tolerance)
