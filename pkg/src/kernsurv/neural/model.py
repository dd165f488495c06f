"""A fitted neural-kernel conditional Kaplan-Meier model and its JSON file format."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..data import Standardization, SurvivalDataset, TimeGrid
from ..estimator import ConditionalKaplanMeier
from ..kernel import GaussianEmbeddingKernel, Kernel
from .nets import EmbeddingNet
from .train import TrainConfig, prepare, train, warm_start

FORMAT = "kernsurv-model/1"


class KernelSurvivalModel:
    """Learned kernel ``exp(-||psi(x) - psi(x')||^2)`` plugged into Beran's estimator."""

    def __init__(self, net: EmbeddingNet, train_data: SurvivalDataset, grid: TimeGrid,
                 config: TrainConfig | None = None, history=None):
        self.net = net
        self.grid = grid
        self.config = config
        self.history = list(history or [])
        self.kernel = GaussianEmbeddingKernel(net)
        self.estimator = ConditionalKaplanMeier(train_data, self.kernel, grid)

    @property
    def train_data(self) -> SurvivalDataset:
        return self.estimator.train

    @classmethod
    def fit(cls, net: EmbeddingNet, data: SurvivalDataset, config: TrainConfig,
            warm_targets=None, warm_config: TrainConfig | None = None) -> "KernelSurvivalModel":
        if warm_targets is not None:
            net, _ = warm_start(net, data, warm_targets, warm_config or config)
        snapped, grid = prepare(data, config.grid_points)
        net, history = train(net, snapped, config, grid)
        return cls(net, snapped, grid, config, history)

    def with_kernel(self, kernel: Kernel) -> ConditionalKaplanMeier:
        return ConditionalKaplanMeier(self.train_data, kernel, self.grid)

    def predict_survival(self, X) -> np.ndarray:
        return self.estimator.predict_survival(X)

    def predict_times(self, X, method="median", horizon=None, finite=True) -> np.ndarray:
        return self.estimator.predict_times(X, method, horizon, finite)

    __call__ = predict_times

    def curves(self, X):
        return self.estimator.curves(X)

    def to_dict(self) -> dict:
        tr = self.train_data
        std = tr.standardization
        return {
            "format": FORMAT,
            "net": self.net.to_dict(),
            "grid": {"times": self.grid.times.tolist(), "quantized": self.grid.quantized},
            "train": {
                "features": tr.features.tolist(),
                "times": tr.times.tolist(),
                "events": tr.events.tolist(),
                "feature_names": list(tr.feature_names) if tr.feature_names else None,
            },
            "standardization": std.to_dict() if std is not None else None,
            "config": self.config.to_dict() if self.config else None,
            "history": self.history,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "KernelSurvivalModel":
        if d.get("format") != FORMAT:
            raise ValueError(f"unsupported model format {d.get('format')!r}")
        std = Standardization.from_dict(d["standardization"]) if d.get("standardization") else None
        t = d["train"]
        names = tuple(t["feature_names"]) if t.get("feature_names") else None
        train_data = SurvivalDataset(t["features"], t["times"], t["events"], names, std)
        grid = TimeGrid(d["grid"]["times"], d["grid"]["quantized"])
        config = TrainConfig(**d["config"]) if d.get("config") else None
        return cls(EmbeddingNet.from_dict(d["net"]), train_data, grid, config, d.get("history"))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path) -> "KernelSurvivalModel":
        return cls.from_dict(json.loads(Path(path).read_text()))
