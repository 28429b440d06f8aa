"""End-to-end finite-difference check of the full pre-training loss.

The analytic gradient of the weighted MIM + MLM + ITM total is compared with
a seven-point finite-difference stencil taken in float64. Its truncation error
is O(h^6), so a fairly large ``h`` can be used, which keeps rounding noise low.
For each parameter tensor we probe one random unit direction plus a few
single coordinates. The relative error of a
probe is ``|a - n| / max(|a|, |n|, floor)``. The floor is only there so that
entries whose true derivative is zero (e.g. an attention key bias, which
softmax shift-invariance cancels exactly) are not divided by rounding noise.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .harness import Batch, compute_losses
from .model import M3AE
from .transformer import ModelConfig

FLOOR = {np.float32: 1e-4, np.float64: 1e-6}


@dataclass
class GradCheckResult:
    dtype: str
    max_rel_error: float
    worst: str
    probes: int
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error < tol


def probe_batch(config: ModelConfig, seed: int = 0, size: int = 2) -> Batch:
    """Random images and distinct random captions of full length."""
    rng = np.random.default_rng(seed)
    patches = rng.random((size, config.n_patches, config.patch_dim)).astype(np.float32)
    body = np.stack([rng.permutation(np.arange(5, config.vocab_size))[: config.max_text_len] for _ in range(size)])
    ids = np.concatenate([np.full((size, 1), 2), body, np.full((size, 1), 3)], axis=1).astype(np.int64)
    return Batch(patches, ids, [" ".join(map(str, r)) for r in body])


def _loss(model: M3AE, batch: Batch, cfg: TrainConfig, step: int) -> T.Tensor:
    out = compute_losses(batch, model, step, cfg)
    if set(out.losses) != {"mim", "mlm", "itm"}:
        raise RuntimeError(f"probe batch exercised only {sorted(out.losses)}")
    return out.total


def analytic_gradients(model: M3AE, batch: Batch, cfg: TrainConfig, step: int) -> dict[str, np.ndarray]:
    model.zero_grad()
    T.backward(_loss(model, batch, cfg, step))
    grads = {}
    for name, p in model.named_parameters():
        if p.grad is None:
            raise RuntimeError(f"no gradient reached {name}")
        grads[name] = p.grad.astype(np.float64)
    return grads


def _probes(shape, rng, n_coords: int):
    size = int(np.prod(shape))
    u = rng.normal(size=shape)
    yield "dir", u / np.linalg.norm(u)
    for flat in rng.choice(size, size=min(n_coords, size), replace=False):
        e = np.zeros(size)
        e[flat] = 1.0
        yield f"[{int(flat)}]", e.reshape(shape)


def grad_check(
    config: ModelConfig | None = None,
    seed: int = 0,
    h: float = 1e-3,
    n_coords: int = 3,
) -> dict[str, GradCheckResult]:
    """Run the 32-bit and 64-bit checks; both compare against the float64 oracle."""
    config = config or ModelConfig.tiny()
    cfg = TrainConfig(total_steps=10, seed=seed)
    batch = probe_batch(config, seed)
    step = 0

    oracle = M3AE(config, seed=seed).astype(np.float64)
    base = {n: p.data.copy() for n, p in oracle.named_parameters()}
    rng = np.random.default_rng([seed, 99])
    probes = []  # (name, label, direction, numeric derivative)
    with T.default_dtype(np.float64), T.no_grad():
        params = dict(oracle.named_parameters())
        for name, p in params.items():
            for label, d in _probes(p.shape, rng, n_coords):
                f = {}
                for c in (-3, -2, -1, 1, 2, 3):
                    p.data = base[name] + c * h * d
                    f[c] = _loss(oracle, batch, cfg, step).item()
                p.data = base[name]
                num = (45 * (f[1] - f[-1]) - 9 * (f[2] - f[-2]) + (f[3] - f[-3])) / (60 * h)
                probes.append((name, label, d, num))

    results = {}
    for dtype in (np.float32, np.float64):
        t0 = time.perf_counter()
        model = M3AE(config, seed=seed).astype(dtype)
        with T.default_dtype(dtype):
            grads = analytic_gradients(model, batch, cfg, step)
        worst, worst_at = 0.0, ""
        for name, label, d, num in probes:
            ana = float(np.sum(grads[name] * d))
            err = abs(ana - num) / max(abs(ana), abs(num), FLOOR[dtype])
            if err > worst:
                worst, worst_at = err, f"{name}{label}"
        results[np.dtype(dtype).name] = GradCheckResult(
            np.dtype(dtype).name, worst, worst_at, len(probes), time.perf_counter() - t0
        )
    return results
