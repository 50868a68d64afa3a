"""The full network: CLFE -> DSGL -> frame/video heads, with the TDA branch for training."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .clfe import clfe_forward, init_clfe
from .config import ModelConfig
from .data import FeatureSequence
from .dsgl import FramePredictions, dsgl_forward, init_dsgl
from .layers import ParamStore, add_linear, linear
from .tda import TdaOutput, init_tda, tda_forward
from .tensor import Tensor

# independent RNG stream per parameter group, so toggling one group leaves the others identical
_STREAMS = {"clfe": 0, "transformer": 1, "graph": 2, "heads": 3, "tda": 4}


@dataclass
class Batch:
    sem: np.ndarray          # (B, T, D_sem) float64
    tex: np.ndarray          # (B, T, D_tex)
    frame_labels: np.ndarray  # (B, T) bool
    video_labels: np.ndarray  # (B,) bool
    domains: np.ndarray      # (B,) int
    video_ids: list[str]

    @classmethod
    def from_sequences(cls, seqs: list[FeatureSequence]) -> "Batch":
        if len({s.T for s in seqs}) != 1:
            raise ValueError("all sequences in a batch must share T")
        return cls(
            sem=np.stack([s.semantic_feats for s in seqs]).astype(np.float64),
            tex=np.stack([s.textural_feats for s in seqs]).astype(np.float64),
            frame_labels=np.stack([s.frame_labels for s in seqs]),
            video_labels=np.array([s.video_label for s in seqs]),
            domains=np.array([s.domain_id for s in seqs], dtype=np.int64),
            video_ids=[s.video_id for s in seqs],
        )

    def __len__(self) -> int:
        return self.sem.shape[0]


@dataclass
class ModelOutput:
    frames: FramePredictions
    video_prob: Tensor
    fused: Tensor
    tda: TdaOutput | None = None


class DDNet:
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.seed = seed
        self.params = ParamStore()
        rng = {name: np.random.default_rng([seed, idx]) for name, idx in _STREAMS.items()}
        init_clfe(self.params, cfg, rng["clfe"])
        init_dsgl(self.params, cfg, rng["transformer"], rng["graph"])
        add_linear(self.params, rng["heads"], "head.frame", cfg.D, 1)
        add_linear(self.params, rng["heads"], "head.video", cfg.D, 1)
        init_tda(self.params, cfg, rng["tda"])

    def trainable(self) -> list[tuple[str, Tensor]]:
        """Parameters that receive gradient under the current config."""
        skip = []
        if not self.cfg.tda_enabled:
            skip.append("tda.")
        if not self.cfg.use_gcn:
            skip += ["dsgl.w_", "dsgl.gc", "dsgl.fuse"]
        return [(n, t) for n, t in self.params.items() if not any(n.startswith(s) for s in skip)]

    def forward(self, sem, tex, with_tda: bool | None = None, use_grl: bool = True,
                stop_grad: bool = True) -> ModelOutput:
        sem, tex = tn.as_tensor(sem), tn.as_tensor(tex)
        fused = clfe_forward(sem, tex, self.params, self.cfg)
        frames = dsgl_forward(fused, self.params, self.cfg)
        v = linear(tn.mean(frames.F_final, axis=-2), self.params, "head.video")
        video_prob = tn.sigmoid(v.reshape(v.shape[:-1]))
        if with_tda is None:
            with_tda = self.cfg.tda_enabled
        tda = tda_forward(frames.F_final, self.params, self.cfg, use_grl, stop_grad) if with_tda else None
        return ModelOutput(frames, video_prob, fused, tda)

    def predict(self, batch: Batch) -> np.ndarray:
        """Frame probabilities (B, T), inference only (no TDA, no graph recording)."""
        with tn.no_grad():
            out = self.forward(batch.sem, batch.tex, with_tda=False)
        return out.frames.probs.data

    def disentangled_features(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        with tn.no_grad():
            out = self.forward(batch.sem, batch.tex, with_tda=True)
        return out.tda.pair.F_f.data.copy(), out.tda.pair.F_s.data.copy()
