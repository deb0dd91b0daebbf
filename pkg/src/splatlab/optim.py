"""Adam over the scene's raw parameter fields, with row-aligned state."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import PARAM_FIELDS, ContractViolation, SceneModel

DEFAULT_LR = {
    "position": 1.6e-4,
    "rotation": 1e-3,
    "log_scale": 5e-3,
    "logit_opacity": 5e-2,
    "color": 2.5e-3,
}


def position_lr_at(iteration: int, total: int, lr_init: float = 1.6e-4,
                   lr_final: float = 1.6e-6, scale: float = 1.0) -> float:
    """Log-linear decay from lr_init to lr_final over ``total`` steps, times ``scale``."""
    if total <= 0:
        return lr_init * scale
    frac = min(max(iteration / total, 0.0), 1.0)
    if lr_init <= 0 or lr_final <= 0:
        # no log-space path through zero; fall back to linear
        return (lr_init * (1 - frac) + lr_final * frac) * scale
    return float(np.exp(np.log(lr_init) * (1 - frac) + np.log(lr_final) * frac)) * scale


@dataclass
class AdamState:
    exp_avg: dict[str, np.ndarray]
    exp_avg_sq: dict[str, np.ndarray]
    step_count: dict[str, int]
    lr: dict[str, float]
    generation: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def for_scene(cls, scene: SceneModel, lr: dict[str, float] | None = None, **kw) -> "AdamState":
        rates = dict(DEFAULT_LR)
        rates.update(lr or {})
        return cls(
            exp_avg={f: np.zeros_like(getattr(scene, f)) for f in PARAM_FIELDS},
            exp_avg_sq={f: np.zeros_like(getattr(scene, f)) for f in PARAM_FIELDS},
            step_count={f: 0 for f in PARAM_FIELDS},
            lr=rates,
            generation=scene.generation,
            **kw,
        )

    @property
    def rows(self) -> int:
        return len(self.exp_avg["position"])

    def check_alignment(self, scene: SceneModel) -> None:
        for f in PARAM_FIELDS:
            for name, arr in (("exp_avg", self.exp_avg[f]), ("exp_avg_sq", self.exp_avg_sq[f])):
                if arr.shape != getattr(scene, f).shape:
                    raise ContractViolation(
                        f"optimizer {name}[{f}] has shape {arr.shape}, scene {f} has "
                        f"{getattr(scene, f).shape}")
        if self.generation != scene.generation:
            raise ContractViolation(
                f"optimizer generation {self.generation} != scene generation {scene.generation}")

    def step(self, scene: SceneModel, gradients, lr_override: dict[str, float] | None = None) -> SceneModel:
        """Apply one bias-corrected Adam update to every field of ``scene`` in place."""
        self.check_alignment(scene)
        for f in PARAM_FIELDS:
            g = gradients[f]
            if g.shape != getattr(scene, f).shape:
                raise ContractViolation(f"gradient for {f} has shape {g.shape}")
            lr = (lr_override or {}).get(f, self.lr[f])
            self.step_count[f] += 1
            t = self.step_count[f]
            m = self.exp_avg[f]
            v = self.exp_avg_sq[f]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            param = getattr(scene, f)
            param -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return scene

    def extend_rows(self, new_row_count: int, generation: int | None = None) -> "AdamState":
        """Append ``new_row_count`` all-zero moment rows to every field."""
        if new_row_count < 0:
            raise ContractViolation("cannot extend by a negative row count")
        for store in (self.exp_avg, self.exp_avg_sq):
            for f, arr in store.items():
                store[f] = np.concatenate([arr, np.zeros((new_row_count,) + arr.shape[1:])])
        self.generation = self.generation + 1 if generation is None else generation
        return self

    def remove_rows(self, keep_mask, generation: int | None = None) -> "AdamState":
        keep_mask = np.asarray(keep_mask, dtype=bool)
        if keep_mask.shape != (self.rows,):
            raise ContractViolation(f"keep mask length {keep_mask.shape} != optimizer rows {self.rows}")
        for store in (self.exp_avg, self.exp_avg_sq):
            for f, arr in store.items():
                store[f] = arr[keep_mask]
        self.generation = self.generation + 1 if generation is None else generation
        return self

    def quantize_(self, dtype=np.float32) -> None:
        for store in (self.exp_avg, self.exp_avg_sq):
            for f in store:
                store[f] = store[f].astype(dtype).astype(np.float64)
