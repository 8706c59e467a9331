"""scikit-learn style wrapper: ``fit`` trains, ``predict`` fuses, ``score`` reports mean Q2n."""
from __future__ import annotations

from typing import Optional

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .config import DataConfig, OTFMConfig, TrainConfig
from .losses import CostConfig
from .metrics import q2n
from .networks import MappingNetConfig, PotentialNetConfig
from .sampler import fuse_tensors
from .validation import check_pan_lrms, check_triplets


class OTFMPansharpener(BaseEstimator):
    """Fuses PAN and LRMS into HRMS with a one-step mapping network.

    ``X`` is a list of SampleTriplets or a ``(pan, lrms)`` pair of arrays.
    Training triplets must carry ``hrms_ref``. Defaults match ``desk_config``;
    ``cost_weight`` sets all three cost weights at once.
    """

    def __init__(self, bands: int = 4, ratio: int = 4, base_channels: int = 16, levels: int = 2,
                 attention_window: int = 3, potential_channels: int = 32, max_steps: int = 2000,
                 batch_size: int = 8, lr_mapping: float = 1e-3, lr_potential: float = 5e-4,
                 ema_decay: float = 0.99, weight_flow: float = 1.0, weight_mapping: float = 0.01,
                 uot: bool = True, cost_weight: float = 10.0, spectral_variant: str = "observation",
                 steps: int = 1, seed: int = 0):
        self.bands = bands
        self.ratio = ratio
        self.base_channels = base_channels
        self.levels = levels
        self.attention_window = attention_window
        self.potential_channels = potential_channels
        self.max_steps = max_steps
        self.batch_size = batch_size
        self.lr_mapping = lr_mapping
        self.lr_potential = lr_potential
        self.ema_decay = ema_decay
        self.weight_flow = weight_flow
        self.weight_mapping = weight_mapping
        self.uot = uot
        self.cost_weight = cost_weight
        self.spectral_variant = spectral_variant
        self.steps = steps
        self.seed = seed

    def make_config(self) -> OTFMConfig:
        return OTFMConfig(
            data=DataConfig(bands=self.bands, ratio=self.ratio),
            model=MappingNetConfig(bands=self.bands, base_channels=self.base_channels,
                                   levels=self.levels, attention_window=self.attention_window),
            potential=PotentialNetConfig(bands=self.bands, channels=self.potential_channels),
            train=TrainConfig(lr_mapping=self.lr_mapping, lr_potential=self.lr_potential,
                              max_steps=self.max_steps, batch_size=self.batch_size,
                              ema_decay=self.ema_decay, seed=self.seed,
                              weight_flow=self.weight_flow, weight_mapping=self.weight_mapping,
                              uot=self.uot, log_every=0, checkpoint_every=0),
            cost=CostConfig(lambda_base=self.cost_weight, lambda_spatial=self.cost_weight,
                            lambda_spectral=self.cost_weight, spectral_variant=self.spectral_variant),
        )

    def fit(self, X, y=None, run_dir=None):
        from .trainer import train_loop

        triplets = check_triplets(X, require_reference=True, bands=self.bands, ratio=self.ratio)
        self.checkpoint_ = train_loop(triplets, self.make_config(), run_dir=run_dir)
        self.network_ = self.checkpoint_.build_mapping(use_ema=True)
        self.n_steps_ = self.checkpoint_.step
        return self

    def _inputs(self, X):
        if isinstance(X, tuple) and len(X) == 2:
            return check_pan_lrms(X[0], X[1], self.ratio)
        triplets = check_triplets(X, bands=self.bands, ratio=self.ratio)
        return (np.stack([t.pan.data for t in triplets]),
                np.stack([t.lrms.data for t in triplets]))

    def predict(self, X, steps: Optional[int] = None) -> np.ndarray:
        check_is_fitted(self, "network_")
        pan, lrms = self._inputs(X)
        out = fuse_tensors(self.network_, torch.from_numpy(pan), torch.from_numpy(lrms),
                           self.ratio, steps or self.steps)
        return out.numpy()

    def score(self, X, y=None) -> float:
        """Mean Q2n of the fused images against ``y`` or the triplets' references."""
        fused = self.predict(X)
        if y is None:
            refs = [t.hrms_ref.data for t in check_triplets(X, require_reference=True)]
        else:
            refs = list(np.asarray(y, dtype=np.float32))
        return float(np.mean([q2n(f, r) for f, r in zip(fused, refs)]))
