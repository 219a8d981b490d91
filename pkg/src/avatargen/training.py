"""Loss-curve bookkeeping shared by both training loops."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path


@dataclass
class LossEma:
    """Bias-corrected exponential moving average of the training loss."""

    decay: float = 0.9
    value: float = 0.0
    count: int = 0

    def update(self, loss: float) -> float:
        self.count += 1
        self.value = self.decay * self.value + (1 - self.decay) * loss
        return self.corrected

    @property
    def corrected(self) -> float:
        if self.count == 0:
            return float("nan")
        return self.value / (1 - self.decay**self.count)

    def state_dict(self) -> dict:
        return {"decay": self.decay, "value": self.value, "count": self.count}

    def load_state_dict(self, d: dict) -> None:
        self.decay, self.value, self.count = d["decay"], d["value"], d["count"]


class LossCurve:
    """Appends ``step,loss,ema_loss`` rows.

    A fresh run truncates the file. When resuming from ``resume_step`` any
    rows past that step (written after the last checkpoint) are dropped.
    """

    HEADER = ("step", "loss", "ema_loss")

    def __init__(self, path, resume_step: int | None = None):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        rows = []
        if resume_step is not None and self.path.exists():
            rows = [r for r in read_loss_curve(self.path) if r["step"] <= resume_step]
        with self.path.open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(self.HEADER)
            for r in rows:
                w.writerow([r["step"], f"{r['loss']:.8g}", f"{r['ema_loss']:.8g}"])

    def append(self, step: int, loss: float, ema: float) -> None:
        with self.path.open("a", newline="") as f:
            csv.writer(f).writerow([step, f"{loss:.8g}", f"{ema:.8g}"])


def read_loss_curve(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return [{"step": int(r["step"]), "loss": float(r["loss"]), "ema_loss": float(r["ema_loss"])}
                for r in csv.DictReader(f)]
